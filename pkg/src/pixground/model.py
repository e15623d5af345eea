"""The grounding network: conv backbone, visual encoder, word-to-pixel decoder, heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionRecord, MultiHeadAttention, records_from
from .nn import FFN, Conv2d, Embedding, LayerNorm, Linear, Module
from .tensor import Parameter, Tensor

CLS_ID = 0
PAD_ID = 1

QUERY_MODES = ("word", "sentence")


@dataclass
class ModelConfig:
    image_height: int = 64
    image_width: int = 64
    backbone_stride: int = 8
    backbone_channels: int = 64
    model_dim: int = 64
    num_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 3
    ffn_hidden_dim: int = 0  # 0 means 4 * model_dim
    max_tokens: int = 15  # word tokens, [CLS] excluded
    vocab_size: int = 22
    num_categories: int = 4
    num_attributes: int = 8
    query_mode: str = "word"
    norm_after_ffn: bool = True
    lambda_ce: float = 1.0
    lambda_bce: float = 10.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        d = self.backbone_stride
        if d < 2 or d & (d - 1):
            raise ValueError(f"backbone_stride must be a power of two >= 2, got {d}")
        if self.image_height % d or self.image_width % d:
            raise ValueError("image size must be divisible by backbone_stride")
        if self.model_dim % 4:
            raise ValueError("model_dim must be divisible by 4 for the 2D sine encoding")
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if min(self.encoder_layers, self.decoder_layers, self.max_tokens) < 1:
            raise ValueError("encoder_layers, decoder_layers and max_tokens must be >= 1")
        if self.query_mode not in QUERY_MODES:
            raise ValueError(f"query_mode must be one of {QUERY_MODES}")
        if self.num_categories < 2:
            raise ValueError("need at least two categories")
        for name in ("lambda_ce", "lambda_bce", "lambda_l1", "lambda_giou"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.backbone_stride, self.image_width // self.backbone_stride

    @property
    def ffn_dim(self) -> int:
        return self.ffn_hidden_dim or 4 * self.model_dim

    def to_dict(self) -> dict:
        return asdict(self)


def sine_position_encoding(h: int, w: int, dim: int) -> np.ndarray:
    """Fixed 2D encoding of shape (h*w, dim), rows in row-major grid order.

    The first dim/2 channels encode the row, the rest the column. Within a half,
    channels (2i, 2i+1) hold sin/cos of ``2*pi*pos/len / 10000**(2i/(dim/2))``.
    """
    half = dim // 2
    freqs = 10000.0 ** (2 * np.arange(half // 2) / half)

    def axis(n):
        pos = np.arange(n)[:, None] / n * 2 * math.pi / freqs
        enc = np.empty((n, half))
        enc[:, 0::2] = np.sin(pos)
        enc[:, 1::2] = np.cos(pos)
        return enc

    ey, ex = axis(h), axis(w)
    out = np.concatenate([np.repeat(ey, w, axis=0), np.tile(ex, (h, 1))], axis=1)
    return out


def sentence_pool(word_embeddings: Tensor, pad_mask=None) -> Tensor:
    """Uniform mean over unpadded word embeddings: (..., T, D) -> (..., 1, D)."""
    n = word_embeddings.shape[-2]
    keep = np.ones(word_embeddings.shape[:-1], dtype=bool) if pad_mask is None \
        else ~np.asarray(pad_mask, dtype=bool)
    counts = keep.sum(axis=-1, keepdims=True)
    if (counts == 0).any() or n == 0:
        raise ValueError("cannot pool an empty sentence")
    weights = (keep / counts).astype(word_embeddings.dtype)[..., None, :]
    return T.matmul(weights, word_embeddings)


class ToyBackbone(Module):
    """log2(stride) stride-2 3x3 convolutions with ReLU, channels-last."""

    def __init__(self, stride: int, channels: int, rng: np.random.Generator, dtype=np.float32):
        n = int(math.log2(stride))
        widths = [max(1, channels >> (n - 1 - i)) for i in range(n)]
        convs, cin = [], 3
        for cout in widths:
            convs.append(Conv2d(cin, cout, rng, kernel=3, stride=2, padding=1, dtype=dtype))
            cin = cout
        self.convs = convs

    def forward(self, images: Tensor) -> Tensor:
        x = images
        for conv in self.convs:
            x = T.relu(conv(x))
        return x


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        d = cfg.model_dim
        self.attn = MultiHeadAttention(d, cfg.num_heads, rng, dtype)
        self.norm_attn = LayerNorm(d, dtype=dtype)
        self.ffn = FFN(d, cfg.ffn_dim, rng, dtype=dtype)
        self.norm_ffn = LayerNorm(d, dtype=dtype) if cfg.norm_after_ffn else None

    def forward(self, x: Tensor, record: bool = False):
        a, w = self.attn(x, x, x, return_weights=record)
        h = self.norm_attn(x + a)
        out = x + self.ffn(h)
        if self.norm_ffn is not None:
            out = self.norm_ffn(out)
        return out, w


class DecoderLayer(Module):
    """Word self-attention, then word-to-pixel cross attention against the encoder memory.

    The residual around the cross-attention/FFN block starts from the layer input,
    not from the self-attended sequence.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        d = cfg.model_dim
        self.self_attn = MultiHeadAttention(d, cfg.num_heads, rng, dtype)
        self.norm_self = LayerNorm(d, dtype=dtype)
        self.cross_attn = MultiHeadAttention(d, cfg.num_heads, rng, dtype)
        self.norm_cross = LayerNorm(d, dtype=dtype)
        self.ffn = FFN(d, cfg.ffn_dim, rng, dtype=dtype)
        self.norm_ffn = LayerNorm(d, dtype=dtype) if cfg.norm_after_ffn else None

    def forward(self, words: Tensor, memory: Tensor, pad_mask=None, record: bool = False):
        s, _ = self.self_attn(words, words, words, key_pad_mask=pad_mask)
        attended = self.norm_self(words + s)
        c, w = self.cross_attn(attended, memory, memory, return_weights=record)
        h = self.norm_cross(words + c)
        out = words + self.ffn(h)
        if self.norm_ffn is not None:
            out = self.norm_ffn(out)
        return out, w


@dataclass
class GroundingOutput:
    box: Tensor  # (B, 4) normalized cx, cy, w, h
    category_logits: Tensor  # (B, N_c)
    attribute_logits: Tensor  # (B, N_a)
    cross_records: list[AttentionRecord] = field(default_factory=list)
    encoder_records: list[AttentionRecord] = field(default_factory=list)


class GroundingModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self._cfg = cfg
        self._dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        d = cfg.model_dim
        self.backbone = ToyBackbone(cfg.backbone_stride, cfg.backbone_channels, rng, dtype)
        self.input_proj = Linear(cfg.backbone_channels, d, rng, dtype)
        self.input_norm = LayerNorm(d, dtype=dtype)  # puts content on the same scale as the sine code
        self.encoder = [EncoderLayer(cfg, rng, dtype) for _ in range(cfg.encoder_layers)]
        self.word_embed = Embedding(cfg.vocab_size, d, rng, dtype)
        self.token_pos = Parameter(rng.normal(0.0, 0.02, size=(cfg.max_tokens + 1, d)), dtype=dtype)
        self.decoder = [DecoderLayer(cfg, rng, dtype) for _ in range(cfg.decoder_layers)]
        self.box_head = FFN(d, d, rng, out_dim=4, dtype=dtype)
        self.category_head = Linear(d, cfg.num_categories, rng, dtype)
        self.attribute_head = Linear(d, cfg.num_attributes, rng, dtype)
        self._pos_cache: dict = {}
        self.assign_names()

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def dtype(self):
        return self._dtype

    def astype(self, dtype) -> "GroundingModel":
        super().astype(dtype)
        self._dtype = np.dtype(dtype)
        self._pos_cache.clear()
        return self

    # -- parameter groups ------------------------------------------------------
    def backbone_parameters(self) -> list[Parameter]:
        return self.backbone.parameters()

    def encoder_parameters(self) -> list[Parameter]:
        params = self.input_proj.parameters() + self.input_norm.parameters()
        for layer in self.encoder:
            params += layer.parameters()
        return params

    # -- stages ------------------------------------------------------------------
    def toy_backbone(self, images) -> Tensor:
        images = images if isinstance(images, Tensor) else Tensor(images, dtype=self._dtype)
        cfg = self._cfg
        if images.ndim != 4 or images.shape[1:] != (cfg.image_height, cfg.image_width, 3):
            raise T.ShapeError(
                f"images must be (B, {cfg.image_height}, {cfg.image_width}, 3), got {images.shape}")
        return self.backbone(images)

    def visual_position(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._pos_cache:
            self._pos_cache[key] = sine_position_encoding(h, w, self._cfg.model_dim).astype(self._dtype)
        return self._pos_cache[key]

    def encode_visual_input(self, fmap: Tensor) -> Tensor:
        """(B, h, w, C) feature map -> (B, h*w, D) sequence with sine positions added."""
        b, h, w, c = fmap.shape
        if (h, w) != self._cfg.grid or c != self._cfg.backbone_channels:
            raise T.ShapeError(f"feature map {fmap.shape} does not match config")
        x = self.input_norm(self.input_proj(fmap.reshape(b, h * w, c)))
        return x + self.visual_position(h, w)

    def encoder_stack(self, seq: Tensor, record: bool = False):
        records = []
        for i, layer in enumerate(self.encoder):
            seq, w = layer(seq, record)
            if record:
                records += records_from(w, i, "self-visual")
        return seq, records

    def embed_tokens(self, token_ids) -> Tensor:
        """(B, L) ids -> (B, L, D) word embeddings plus learned positions, L <= max_tokens + 1."""
        ids = np.asarray(token_ids)
        if ids.shape[-1] > self._cfg.max_tokens + 1:
            ids = ids[..., : self._cfg.max_tokens + 1]
        return self.word_embed(ids) + self.token_pos[: ids.shape[-1]]

    def pooled_query(self, token_ids, pad_mask) -> tuple[Tensor, np.ndarray]:
        """Sentence-pooled decoder input: [CLS] plus one mean word vector.

        The mean is taken as a bag-of-words weighting of the embedding table, so
        it is bitwise identical under any reordering of the words.
        """
        ids = np.asarray(token_ids)[..., : self._cfg.max_tokens + 1]
        pad = np.asarray(pad_mask, dtype=bool)[..., : ids.shape[-1]]
        words = ~pad
        words[:, 0] = False
        n = words.sum(axis=1)
        if (n == 0).any():
            raise ValueError("cannot pool an empty sentence")
        b, v = ids.shape[0], self._cfg.vocab_size
        counts = np.zeros((b, v))
        for r in range(b):
            np.add.at(counts[r], ids[r][words[r]], 1.0)
        weights = Tensor((counts / n[:, None])[:, None, :], dtype=self._dtype)
        pooled = weights @ self.word_embed.weight
        cls = self.word_embed(ids[:, :1])
        seq = T.concat([cls, pooled], axis=1) + self.token_pos[:2]
        return seq, np.zeros((b, 2), dtype=bool)

    def decoder_stack(self, words: Tensor, memory: Tensor, pad_mask=None, record: bool = False):
        if words.shape[-1] != memory.shape[-1]:
            raise T.ShapeError("token and visual sequences differ in width")
        records = []
        for i, layer in enumerate(self.decoder):
            words, w = layer(words, memory, pad_mask, record)
            if record:
                records += records_from(w, i, "cross")
        return words, records

    def predict_heads(self, cls_feature: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        box = T.sigmoid(self.box_head(cls_feature))
        return box, self.category_head(cls_feature), self.attribute_head(cls_feature)

    def forward(self, images, token_ids, pad_mask=None, record: bool = False) -> GroundingOutput:
        ids = np.asarray(token_ids)
        if ids.ndim != 2:
            raise T.ShapeError("token_ids must be (batch, length)")
        if pad_mask is None:
            pad_mask = ids == PAD_ID
        pad_mask = np.asarray(pad_mask, dtype=bool)
        fmap = self.toy_backbone(images)
        memory, enc_records = self.encoder_stack(self.encode_visual_input(fmap), record)
        if self._cfg.query_mode == "sentence":
            words, dec_mask = self.pooled_query(ids, pad_mask)
        else:
            words = self.embed_tokens(ids)
            dec_mask = pad_mask[:, : words.shape[1]].copy()
            dec_mask[:, 0] = False
        out, cross = self.decoder_stack(words, memory, dec_mask, record)
        box, cat, attr = self.predict_heads(out[:, 0, :])
        return GroundingOutput(box, cat, attr, cross, enc_records)


def prepare_images(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 (B, H, W, 3) -> centred floats in [-1, 1]."""
    return (np.asarray(images, dtype=dtype) / 127.5 - 1.0).astype(dtype)
