"""Training loop, evaluation and freeze modes."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .losses import LossWeights, iou_center, total_loss
from .model import GroundingModel, prepare_images
from .optim import AdamW, ParamGroup
from .synth.splits import GroundingDataset

log = logging.getLogger(__name__)

FREEZE_MODES = ("none", "backbone", "backbone+encoder")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainSchedule:
    total_steps: int = 20000
    batch_size: int = 8
    lr: float = 1e-3
    backbone_lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    freeze_steps: int | None = None  # backbone + encoder frozen for the first steps; None -> 10%
    decay_step: int | None = None  # None -> 80% of total_steps
    decay_factor: float = 0.1
    warmup_steps: int = 0  # linear lr ramp from 1/warmup_steps to 1
    clip_norm: float = 1.0
    freeze_mode: str = "none"  # held for the whole run
    eval_every: int = 1000
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.freeze_steps is None:
            self.freeze_steps = self.total_steps // 10
        if self.decay_step is None:
            self.decay_step = int(self.total_steps * 0.8)
        self.validate()

    def validate(self) -> None:
        if self.total_steps < 0 or self.batch_size < 1:
            raise ValueError("total_steps must be >= 0 and batch_size >= 1")
        if not 0 <= self.freeze_steps <= self.total_steps:
            raise ValueError("freeze_steps must lie within total_steps")
        if not 0 <= self.decay_step <= self.total_steps:
            raise ValueError("decay_step must lie within total_steps")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie within total_steps")
        if self.freeze_mode not in FREEZE_MODES:
            raise ValueError(f"freeze_mode must be one of {FREEZE_MODES}")

    def lr_scale(self, step: int) -> float:
        scale = self.decay_factor if step >= self.decay_step else 1.0
        if step < self.warmup_steps:
            scale *= (step + 1) / self.warmup_steps
        return scale


@dataclass
class EvalReport:
    accuracy: float  # fraction with IoU > 0.5
    mean_iou: float
    per_relation: dict[str, float]
    swap_consistency: float | None  # both members of a pair correct
    pair_divergence: float | None  # pair predictions with IoU <= 0.5 to each other
    loss_terms: dict[str, float]
    count: int

    def to_dict(self) -> dict:
        return asdict(self)


def _onehot(cats: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(cats), n))
    out[np.arange(len(cats)), cats] = 1.0
    return out


def batch_loss(model: GroundingModel, ds: GroundingDataset, idx, weights: LossWeights):
    cfg = model.config
    images = prepare_images(ds.images[idx], model.dtype)
    out = model(images, ds.token_ids[idx], ds.pad_mask[idx])
    return total_loss(out.box, out.category_logits, out.attribute_logits, ds.boxes[idx],
                      _onehot(ds.categories[idx], cfg.num_categories), ds.attributes[idx], weights)


def predict(model: GroundingModel, ds: GroundingDataset, batch_size: int = 100) -> np.ndarray:
    boxes = []
    with T.no_grad():
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            out = model(prepare_images(ds.images[idx], model.dtype), ds.token_ids[idx],
                        ds.pad_mask[idx])
            boxes.append(out.box.data.astype(np.float64))
    return np.concatenate(boxes)


def evaluate(model: GroundingModel, ds: GroundingDataset, batch_size: int = 100,
             weights: LossWeights | None = None) -> EvalReport:
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty split")
    weights = weights or LossWeights.from_config(model.config)
    preds, terms = [], []
    with T.no_grad():
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            cfg = model.config
            out = model(prepare_images(ds.images[idx], model.dtype), ds.token_ids[idx],
                        ds.pad_mask[idx])
            _, br = total_loss(out.box, out.category_logits, out.attribute_logits, ds.boxes[idx],
                               _onehot(ds.categories[idx], cfg.num_categories),
                               ds.attributes[idx], weights)
            preds.append(out.box.data.astype(np.float64))
            terms.append((len(idx), br))
    pred = np.concatenate(preds)
    return report_from_predictions(pred, ds, {
        k: sum(n * br[k] for n, br in terms) / len(ds) for k in terms[0][1]})


def report_from_predictions(pred: np.ndarray, ds: GroundingDataset,
                            loss_terms: dict | None = None) -> EvalReport:
    iou = iou_center(pred, ds.boxes)
    correct = iou > 0.5
    per_rel: dict[str, list[bool]] = {}
    for ok, rel in zip(correct, ds.relations):
        per_rel.setdefault(rel or "none", []).append(bool(ok))
    swap = divergence = None
    pair_ids = sorted(set(ds.pairs[ds.pairs >= 0].tolist()))
    if pair_ids:
        both, apart = [], []
        for p in pair_ids:
            a, b = np.flatnonzero(ds.pairs == p)[:2]
            both.append(correct[a] and correct[b])
            apart.append(iou_center(pred[a], pred[b]) <= 0.5)
        swap = float(np.mean(both))
        divergence = float(np.mean(apart))
    return EvalReport(
        accuracy=float(correct.mean()),
        mean_iou=float(iou.mean()),
        per_relation={k: float(np.mean(v)) for k, v in sorted(per_rel.items())},
        swap_consistency=swap,
        pair_divergence=divergence,
        loss_terms=loss_terms or {},
        count=len(ds),
    )


def build_optimizer(model: GroundingModel, sched: TrainSchedule) -> AdamW:
    backbone = model.backbone_parameters()
    ids = {id(p) for p in backbone}
    rest = [p for p in model.parameters() if id(p) not in ids]
    return AdamW([ParamGroup("backbone", backbone, sched.backbone_lr),
                  ParamGroup("transformer", rest, sched.lr)],
                 betas=(sched.beta1, sched.beta2), eps=sched.eps,
                 weight_decay=sched.weight_decay)


def apply_freeze(model: GroundingModel, sched: TrainSchedule, step: int) -> None:
    backbone = sched.freeze_mode in ("backbone", "backbone+encoder") or step < sched.freeze_steps
    encoder = sched.freeze_mode == "backbone+encoder" or step < sched.freeze_steps
    for p in model.backbone_parameters():
        p.frozen = backbone
    for p in model.encoder_parameters():
        p.frozen = encoder


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_step: int = -1
    best_accuracy: float = -1.0
    best_state: dict | None = None
    optimizer: AdamW | None = None


class MetricsLog:
    """Append-only JSON-lines log; records are also kept in memory."""

    def __init__(self, path: str | None = None):
        self.path = path
        self.records: list[dict] = []
        if path:
            open(path, "w").close()

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def train(model: GroundingModel, train_ds: GroundingDataset, sched: TrainSchedule,
          val_ds: GroundingDataset | None = None, log_path: str | None = None,
          keep_best: bool = True, callback=None) -> TrainResult:
    """Run ``sched.total_steps`` AdamW steps on shuffled mini-batches.

    With ``val_ds`` the model is evaluated every ``eval_every`` steps and at the end;
    when ``keep_best`` is set the best-accuracy parameters are restored at the end.
    """
    weights = LossWeights.from_config(model.config)
    opt = build_optimizer(model, sched)
    rng = np.random.default_rng(sched.seed)
    logger = MetricsLog(log_path)
    result = TrainResult(optimizer=opt)
    order = rng.permutation(len(train_ds))
    cursor = 0
    window: list[dict] = []

    def run_eval(step):
        rep = evaluate(model, val_ds, weights=weights)
        rec = {"step": step, "split": "val", "accuracy": rep.accuracy, "mean_iou": rep.mean_iou,
               "swap_consistency": rep.swap_consistency, "loss": rep.loss_terms}
        logger.write(rec)
        if rep.accuracy > result.best_accuracy:
            result.best_accuracy, result.best_step = rep.accuracy, step
            if keep_best:
                result.best_state = model.state_dict()
        log.info("step %d val acc %.3f miou %.3f", step, rep.accuracy, rep.mean_iou)

    for step in range(sched.total_steps):
        if cursor + sched.batch_size > len(order):
            order = rng.permutation(len(train_ds))
            cursor = 0
        idx = order[cursor:cursor + sched.batch_size]
        cursor += sched.batch_size
        apply_freeze(model, sched, step)
        opt.lr_scale = sched.lr_scale(step)
        try:
            loss, br = batch_loss(model, train_ds, idx, weights)
            opt.zero_grad()
            T.backward(loss)
        except T.NonFiniteError as exc:
            raise TrainingDiverged(
                f"non-finite values at step {step}; batch seeds {train_ds.seeds[idx].tolist()}") from exc
        if sched.clip_norm > 0:
            br["grad_norm"] = opt.clip_grad_norm(sched.clip_norm)
        opt.step()
        window.append(br)
        if (step + 1) % sched.log_every == 0:
            logger.write({"step": step + 1, "split": "train",
                          "loss": {k: float(np.mean([w[k] for w in window])) for k in window[0]},
                          "lr_scale": opt.lr_scale})
            window = []
        if callback is not None:
            callback(step, br)
        if val_ds is not None and sched.eval_every and (step + 1) % sched.eval_every == 0:
            run_eval(step + 1)
    if val_ds is not None and (sched.eval_every == 0 or sched.total_steps % sched.eval_every):
        run_eval(sched.total_steps)
    for p in model.parameters():
        p.frozen = False
    if keep_best and result.best_state is not None:
        model.load_state_dict(result.best_state)
    result.history = logger.records
    return result
