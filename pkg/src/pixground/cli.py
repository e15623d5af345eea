"""``pixground`` command line: gen-data, train, eval, ablate, attn-dump.

Exit status is 0 on success, 2 on usage errors and 1 on runtime failures, which
also print a single JSON line ``{"error": ..., "type": ...}`` to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from . import config as config_mod
from .ablation import SUITES, run_ablation
from .checkpoint import load_checkpoint, save_checkpoint
from .heatmap import attn_dump, attn_dump_pair, write_index
from .model import GroundingModel
from .synth.language import Vocabulary
from .synth.splits import SPLITS, GroundingDataset, atomic_write, build_splits, manifest_header, \
    samples_from_manifest, write_manifest
from .train import evaluate, train

log = logging.getLogger("pixground")


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for path in sorted(root.rglob("*.py")):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:16]}"


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise config_mod.ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _prepare(args) -> config_mod.RunConfig:
    overrides = _overrides(args.set)
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    cfg = config_mod.load(args.config, overrides)
    os.makedirs(cfg.out_dir, exist_ok=True)
    config_mod.write_effective(cfg, cfg.out_dir, code_version())
    return cfg


def _samples(cfg: config_mod.RunConfig, names=SPLITS):
    if cfg.data_dir:
        out = {}
        for name in names:
            path = os.path.join(cfg.data_dir, f"{name}.jsonl")
            if not os.path.exists(path):
                raise FileNotFoundError(f"manifest not found: {path}")
            out[name] = samples_from_manifest(path)[1]
        return out
    return build_splits(cfg.data, names=tuple(names))


def _datasets(cfg, names=SPLITS) -> dict[str, GroundingDataset]:
    return {k: GroundingDataset.from_samples(v) for k, v in _samples(cfg, names).items() if v}


def _write_json(path: str, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands ------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    cfg = _prepare(args)
    vocab = Vocabulary.default()
    header = manifest_header(cfg.data, vocab)
    splits = build_splits(cfg.data, vocab)
    for name, samples in splits.items():
        write_manifest(os.path.join(cfg.out_dir, f"{name}.jsonl"), {**header, "split": name}, samples)
    print(json.dumps({name: len(s) for name, s in splits.items()}, sort_keys=True))


def cmd_train(args) -> None:
    cfg = _prepare(args)
    data = _datasets(cfg, ("train", "val", "test", "swap_test"))
    model = GroundingModel(cfg.model, seed=cfg.seed)
    result = train(model, data["train"], cfg.train, val_ds=data.get("val"),
                   log_path=os.path.join(cfg.out_dir, "metrics.jsonl"))
    save_checkpoint(model, os.path.join(cfg.out_dir, "model.ckpt"), result.optimizer)
    report = {"best_step": result.best_step, "best_val_accuracy": result.best_accuracy}
    for name in ("test", "swap_test"):
        if name in data:
            report[name] = evaluate(model, data[name]).to_dict()
    _write_json(os.path.join(cfg.out_dir, "report.json"), report)
    print(json.dumps({"test_accuracy": report.get("test", {}).get("accuracy"),
                      "best_step": result.best_step}))


def cmd_eval(args) -> None:
    cfg = _prepare(args)
    model = load_checkpoint(args.checkpoint, allow_config_mismatch=args.allow_config_mismatch)
    ds = _datasets(cfg, (args.split,))[args.split]
    rep = evaluate(model, ds)
    if args.relational:
        rep = evaluate(model, ds.relational())
    _write_json(os.path.join(cfg.out_dir, f"eval_{args.split}.json"), rep.to_dict())
    print(json.dumps({"split": args.split, "accuracy": rep.accuracy, "count": rep.count}))


def cmd_ablate(args) -> None:
    cfg = _prepare(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    data = _datasets(cfg, ("train", "val", "test", "swap_test"))
    table = run_ablation(args.suite, cfg.model, cfg.train, data, seeds=seeds)
    _write_json(os.path.join(cfg.out_dir, f"ablation_{args.suite}.json"), table)
    print(json.dumps({a["arm"]: a["accuracy"] for a in table["arms"]}))


def cmd_attn_dump(args) -> None:
    cfg = _prepare(args)
    model = load_checkpoint(args.checkpoint, allow_config_mismatch=args.allow_config_mismatch)
    samples = _samples(cfg, (args.split,))[args.split]
    if args.pair is not None:
        pair = [s for s in samples if s.pair == args.pair]
        if len(pair) != 2:
            raise ValueError(f"swap pair {args.pair} not found in split {args.split}")
        rows = attn_dump_pair(model, pair[0], pair[1], cfg.out_dir)
    else:
        if not 0 <= args.index < len(samples):
            raise IndexError(f"sample index {args.index} outside split of {len(samples)}")
        rows = attn_dump(model, samples[args.index], cfg.out_dir)
        write_index(rows, cfg.out_dir)
    print(json.dumps({"maps": len(rows), "out": cfg.out_dir}))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pixground", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--out", help="output directory (overrides out_dir)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key; repeatable")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("gen-data", help="write split manifests")).set_defaults(func=cmd_gen_data)
    common(sub.add_parser("train", help="train and checkpoint a model")).set_defaults(func=cmd_train)

    ev = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", default="test", choices=SPLITS)
    ev.add_argument("--relational", action="store_true", help="restrict to relational expressions")
    ev.add_argument("--allow-config-mismatch", action="store_true")
    ev.set_defaults(func=cmd_eval)

    ab = common(sub.add_parser("ablate", help="run a comparison suite"))
    ab.add_argument("--suite", required=True, choices=sorted(SUITES))
    ab.add_argument("--seeds", default="0", help="comma-separated seeds")
    ab.set_defaults(func=cmd_ablate)

    ad = common(sub.add_parser("attn-dump", help="write cross-attention heatmaps"))
    ad.add_argument("--checkpoint", required=True)
    ad.add_argument("--split", default="test", choices=SPLITS)
    ad.add_argument("--index", type=int, default=0, help="sample position within the split")
    ad.add_argument("--pair", type=int, help="dump both members of this swap pair")
    ad.add_argument("--allow-config-mismatch", action="store_true")
    ad.set_defaults(func=cmd_attn_dump)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - converted to the one-line error contract
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
