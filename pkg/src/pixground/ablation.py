"""Comparison suites: every arm trains under the same schedule, data and seeds."""

from __future__ import annotations

import dataclasses
import logging
import time
import traceback
from dataclasses import dataclass, field

import numpy as np

from .model import GroundingModel, ModelConfig
from .synth.splits import GroundingDataset
from .train import TrainSchedule, evaluate, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Arm:
    name: str
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    schedule: dict = field(default_factory=dict)  # TrainSchedule overrides


SUITES: dict[str, tuple[Arm, ...]] = {
    "word-vs-sentence": (
        Arm("word", {"query_mode": "word"}),
        Arm("sentence", {"query_mode": "sentence"}),
    ),
    "decoder-depth": tuple(Arm(f"N={n}", {"decoder_layers": n}) for n in (1, 2, 3)),
    # rows of the loss table: box terms always on, then +ce, +bce, all four
    "loss-terms": (
        Arm("box", {"lambda_ce": 0.0, "lambda_bce": 0.0}),
        Arm("box+ce", {"lambda_bce": 0.0}),
        Arm("box+bce", {"lambda_ce": 0.0}),
        Arm("box+ce+bce", {}),
    ),
    "freeze-modes": (
        Arm("backbone+encoder", schedule={"freeze_mode": "backbone+encoder"}),
        Arm("backbone", schedule={"freeze_mode": "backbone"}),
        Arm("end-to-end", schedule={"freeze_mode": "none"}),
    ),
}


@dataclass
class ArmRun:
    arm: str
    seed: int
    accuracy: float | None = None
    relational_accuracy: float | None = None
    mean_iou: float | None = None
    swap_consistency: float | None = None
    pair_divergence: float | None = None
    seconds: float = 0.0
    error: str | None = None


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def run_arm(arm: Arm, seed: int, base_model: ModelConfig, base_schedule: TrainSchedule,
            data: dict[str, GroundingDataset]) -> ArmRun:
    """Train and evaluate one arm; failures are captured in ``error`` rather than raised."""
    run = ArmRun(arm.name, seed)
    start = time.perf_counter()
    try:
        cfg = dataclasses.replace(base_model, **arm.model)
        sched_fields = {**dataclasses.asdict(base_schedule), **arm.schedule, "seed": seed}
        sched = TrainSchedule(**sched_fields)
        model = GroundingModel(cfg, seed=seed)
        train(model, data["train"], sched, val_ds=data.get("val"))
        test = data["test"]
        rep = evaluate(model, test)
        run.accuracy, run.mean_iou = rep.accuracy, rep.mean_iou
        rel = test.relational() if any(r is not None for r in test.relations) else None
        if rel is not None:
            run.relational_accuracy = evaluate(model, rel).accuracy
        if data.get("swap_test") is not None:
            swap = evaluate(model, data["swap_test"])
            run.swap_consistency, run.pair_divergence = swap.swap_consistency, swap.pair_divergence
    except Exception as exc:  # noqa: BLE001 - one arm must not abort its siblings
        run.error = f"{type(exc).__name__}: {exc}"
        log.error("arm %s seed %d failed\n%s", arm.name, seed, traceback.format_exc())
    run.seconds = time.perf_counter() - start
    return run


def run_ablation(suite: str, base_model: ModelConfig, base_schedule: TrainSchedule,
                 data: dict[str, GroundingDataset], seeds=(0,), arms: list[str] | None = None) -> dict:
    """Return a JSON-ready table with per-run rows and per-arm seed averages."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    chosen = [a for a in SUITES[suite] if arms is None or a.name in arms]
    rows = []
    for arm in chosen:
        runs = [run_arm(arm, s, base_model, base_schedule, data) for s in seeds]
        ok = [r for r in runs if r.error is None]
        rows.append({
            "arm": arm.name,
            "model_overrides": arm.model,
            "schedule_overrides": arm.schedule,
            "runs": [dataclasses.asdict(r) for r in runs],
            "accuracy": _mean(r.accuracy for r in ok),
            "relational_accuracy": _mean(r.relational_accuracy for r in ok),
            "swap_consistency": _mean(r.swap_consistency for r in ok),
            "pair_divergence": _mean(r.pair_divergence for r in ok),
            "failed_runs": len(runs) - len(ok),
        })
        log.info("arm %s accuracy %s", arm.name, rows[-1]["accuracy"])
    return {"suite": suite, "seeds": list(seeds), "schedule": dataclasses.asdict(base_schedule),
            "model": base_model.to_dict(), "arms": rows}
