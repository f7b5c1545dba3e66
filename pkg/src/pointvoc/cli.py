"""Command-line front door.

Exit codes: 0 success, 2 usage/config errors, 3 numeric divergence.
Studies emit plot-ready CSV; rendering figures is out of scope.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, default_config, load_config, save_config
from .encoders import ModelConfig, load_checkpoint, save_checkpoint
from .evalmetrics import evaluate, format_table, report_lines
from .pseudolabel import load_store, save_store
from .scenegen import generate_dataset, load_dataset, save_dataset
from .trainer import DivergenceDetected, train_phase1, train_phase2

LABEL_RATIO_HEADER = "ratio,seed,ar25,map25"
PSEUDO_ITER_HEADER = "iteration,seed,map25,ar25"


def _read_config(path: str | None, seed: int | None) -> dict:
    cfg = load_config(path) if path else default_config()
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _class_set(split, selector: str):
    return {"unseen": split.unseen, "seen": split.seen, "all": split.test}[selector]


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    cfg = _read_config(args.config, args.seed)
    ds = generate_dataset(cfg, int(cfg["seed"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    counts = {}
    for scene in ds.scenes:
        for obj in scene.objects:
            counts[obj.class_id] = counts.get(obj.class_id, 0) + 1
    print(f"wrote {len(ds.scenes)} scenes, {len(ds.cls_samples)} classification "
          f"samples to {out}")
    for cls in sorted(counts):
        tag = "seen" if cls in ds.split.seen else "unseen"
        print(f"  class {cls} ({tag}): {counts[cls]} objects")
    return 0


def cmd_train(args) -> int:
    cfg = _read_config(args.config, args.seed)
    if args.contrastive is not None:
        cfg["contrastive_mode"] = args.contrastive
    if args.distance_temp is not None:
        cfg["distance_temp"] = args.distance_temp
    if args.refresh_period is not None:
        cfg["refresh_period"] = args.refresh_period
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config_used.txt")

    dataset = load_dataset(args.data) if args.data else generate_dataset(cfg, int(cfg["seed"]))
    mcfg = ModelConfig.from_config(cfg)

    params, log1 = train_phase1(dataset, cfg)
    save_checkpoint(params, out / "phase1.ckpt")
    log1.save(out / "phase1_log.jsonl")
    report = evaluate(params, dataset.scenes, dataset.split,
                      dataset.split.unseen, mcfg)
    print(f"phase 1 done: unseen mAP25 {100 * report.map25:.2f}% "
          f"AR25 {100 * report.ar25:.2f}%")
    if args.phase1_only:
        save_checkpoint(params, out / "final.ckpt")
        _write_metrics(report, out)
        return 0

    params, log2, store = train_phase2(dataset, params, cfg,
                                       use_pseudo=not args.no_pseudo)
    save_checkpoint(params, out / "final.ckpt")
    log2.save(out / "phase2_log.jsonl")
    if store is not None:
        save_store(store, out / "pseudo_store.txt")
    report = evaluate(params, dataset.scenes, dataset.split,
                      dataset.split.unseen, mcfg)
    print(f"phase 2 done: unseen mAP25 {100 * report.map25:.2f}% "
          f"AR25 {100 * report.ar25:.2f}%")
    _write_metrics(report, out)
    return 0


def _write_metrics(report, out: Path) -> None:
    (out / "metrics.txt").write_text(format_table(report) + "\n", encoding="utf-8")
    (out / "metrics_lines.txt").write_text("\n".join(report_lines(report)) + "\n",
                                           encoding="utf-8")


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        print(f"error: checkpoint not found: {ckpt}", file=sys.stderr)
        return 2
    params = load_checkpoint(ckpt)
    dataset = load_dataset(args.data)
    mcfg = ModelConfig.from_config(dataset.config)
    report = evaluate(params, dataset.scenes, dataset.split,
                      _class_set(dataset.split, args.classes), mcfg)
    print(format_table(report))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_metrics(report, out)
    return 0


def cmd_study_label_ratio(args) -> int:
    cfg = _read_config(args.config, None)
    ratios = [float(r) for r in args.ratios.split(",") if r]
    seeds = [int(s) for s in args.seeds.split(",") if s]
    if not ratios or not seeds:
        print("error: need non-empty --ratios and --seeds", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [LABEL_RATIO_HEADER]
    for ratio in ratios:
        for seed in seeds:
            run_cfg = dict(cfg)
            run_cfg["label_ratio"] = ratio
            run_cfg["seed"] = seed
            dataset = generate_dataset(run_cfg, seed)
            mcfg = ModelConfig.from_config(run_cfg)
            params, _ = train_phase1(dataset, run_cfg)
            report = evaluate(params, dataset.scenes, dataset.split,
                              dataset.split.test, mcfg)
            rows.append(f"{ratio:g},{seed},{report.ar25:.6f},{report.map25:.6f}")
            print(rows[-1])
    (out / "label_ratio.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return 0


def cmd_study_pseudo_iterations(args) -> int:
    cfg = _read_config(args.config, None)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    if args.refresh_period is not None:
        cfg["refresh_period"] = args.refresh_period
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [PSEUDO_ITER_HEADER]
    for seed in seeds:
        run_cfg = dict(cfg)
        run_cfg["seed"] = seed
        dataset = generate_dataset(run_cfg, seed)
        params, _ = train_phase1(dataset, run_cfg)
        _, log2, _ = train_phase2(dataset, params, run_cfg)
        for rec in log2.refreshes:
            rows.append(f"{rec['iteration']},{seed},{rec['map25']:.6f},"
                        f"{rec['ar25']:.6f}")
            print(rows[-1])
    (out / "pseudo_iterations.csv").write_text("\n".join(rows) + "\n",
                                               encoding="utf-8")
    return 0


def cmd_inspect_pseudo(args) -> int:
    store = load_store(args.store)
    print(f"{len(store)} labels")
    if len(store) == 0:
        return 0
    for cls, count in sorted(store.counts_by_class().items()):
        print(f"  class {cls}: {count}")
    confidences = [r.confidence for r in store.records]
    print("confidence histogram (10 bins over [0, 1]):")
    bins = [0] * 10
    for c in confidences:
        bins[min(int(c * 10), 9)] += 1
    for i, count in enumerate(bins):
        print(f"  [{i / 10:.1f}, {(i + 1) / 10:.1f}): {count}")
    return 0


# ------------------------------------------------------------------ wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointvoc",
        description="open-vocabulary 3D detection sandbox",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset to disk")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="two-phase training")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset dir (default: regenerate from config)")
    p.add_argument("--phase1-only", action="store_true")
    p.add_argument("--no-pseudo", action="store_true")
    p.add_argument("--contrastive",
                   choices=["off", "augmentation", "position", "class"])
    p.add_argument("--distance-temp", choices=["on", "off"])
    p.add_argument("--refresh-period", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--classes", choices=["unseen", "seen", "all"], default="unseen")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("study-label-ratio",
                       help="AR/mAP versus labeled-scene ratio (CSV)")
    p.add_argument("--config")
    p.add_argument("--ratios", default="0.1,1.0")
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_study_label_ratio)

    p = sub.add_parser("study-pseudo-iterations",
                       help="mAP/AR versus pseudo-label refresh count (CSV)")
    p.add_argument("--config")
    p.add_argument("--seeds", default="0")
    p.add_argument("--refresh-period", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_study_pseudo_iterations)

    p = sub.add_parser("inspect-pseudo", help="summarize a pseudo-label dump")
    p.add_argument("store")
    p.set_defaults(fn=cmd_inspect_pseudo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceDetected as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
