"""Export decoder cross-attention as grayscale heatmaps.

For every decoder layer, head and token a binary PGM of the h x w feature grid
is written, min-max normalised per map (a constant map comes out all zero).
Head-averaged maps use the head label ``mean``. ``index.jsonl`` maps file names
to (layer, head, token) and ``weights.npy`` holds the raw weights with shape
(layers, heads, tokens, h*w).
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import tensor as T
from .attention import AttentionRecord
from .model import GroundingModel, prepare_images
from .synth.splits import GroundingSample, atomic_write


class RecordingError(RuntimeError):
    pass


def normalize_map(weights: np.ndarray) -> np.ndarray:
    """Min-max scale to uint8; a constant map becomes all zeros."""
    w = np.asarray(weights, dtype=np.float64)
    lo, hi = w.min(), w.max()
    if hi - lo <= 0:
        return np.zeros(w.shape, dtype=np.uint8)
    return np.round((w - lo) / (hi - lo) * 255).astype(np.uint8)


def encode_pgm(image: np.ndarray) -> bytes:
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image, dtype=np.uint8).tobytes()


def decode_pgm(blob: bytes) -> np.ndarray:
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError("not an 8-bit binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def stack_records(records: list[AttentionRecord], sample: int = 0) -> np.ndarray:
    """Cross-attention records -> (layers, heads, tokens, keys) for one batch row."""
    cross = [r for r in records if r.role == "cross"]
    if not cross:
        raise RecordingError("no cross-attention records; run the forward pass with record=True")
    layers = 1 + max(r.layer_index for r in cross)
    heads = 1 + max(r.head_index for r in cross)
    out = np.zeros((layers, heads, cross[0].query_len, cross[0].key_len))
    for r in cross:
        out[r.layer_index, r.head_index] = r.weights[sample]
    return out


def dump_records(records: list[AttentionRecord], tokens: list[str], grid: tuple[int, int],
                 out_dir: str, prefix: str = "") -> list[dict]:
    """Write one map per (layer, head, token) plus head means; returns the index rows.

    Only the first ``len(tokens)`` query rows are exported, so padding is skipped.
    """
    weights = stack_records(records)[:, :, : len(tokens)]
    layers, heads, n_tok, keys = weights.shape
    h, w = grid
    if h * w != keys:
        raise T.ShapeError(f"grid {grid} does not match {keys} keys")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for layer in range(layers):
        for head in list(range(heads)) + ["mean"]:
            block = weights[layer].mean(axis=0) if head == "mean" else weights[layer, head]
            for t in range(n_tok):
                name = f"{prefix}L{layer}_H{head}_T{t:02d}.pgm"
                atomic_write(os.path.join(out_dir, name),
                             encode_pgm(normalize_map(block[t].reshape(h, w))))
                rows.append({"file": name, "layer": layer, "head": head, "token_index": t,
                             "token": tokens[t]})
    np.save(os.path.join(out_dir, f"{prefix}weights.npy"), weights)
    return rows


def _tokens(model: GroundingModel, sample: GroundingSample) -> list[str]:
    if model.config.query_mode == "sentence":
        return ["[CLS]", "[POOL]"]
    return ["[CLS]"] + list(sample.words[: model.config.max_tokens])


def attn_dump(model: GroundingModel, sample: GroundingSample, out_dir: str,
              prefix: str = "") -> list[dict]:
    """Forward one sample with recording on and write its heatmaps and index."""
    with T.no_grad():
        out = model(prepare_images(sample.image[None], model.dtype),
                    np.asarray(sample.tokens.ids)[None], np.asarray(sample.tokens.pad_mask)[None],
                    record=True)
    rows = dump_records(out.cross_records, _tokens(model, sample), model.config.grid, out_dir, prefix)
    for r in rows:
        r["seed"] = sample.seed
        r["expression"] = " ".join(sample.words)
    return rows


def attn_dump_pair(model: GroundingModel, a: GroundingSample, b: GroundingSample,
                   out_dir: str) -> list[dict]:
    """Dump both members of a swap pair side by side (prefixes ``a_`` and ``b_``)."""
    rows = attn_dump(model, a, out_dir, "a_") + attn_dump(model, b, out_dir, "b_")
    write_index(rows, out_dir)
    return rows


def write_index(rows: list[dict], out_dir: str) -> None:
    atomic_write(os.path.join(out_dir, "index.jsonl"),
                 "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
