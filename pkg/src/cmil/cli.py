"""Command line interface: ``cmil generate|train|eval|sweep|report``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import bags
from .config import ConfigError, TrainConfig, load_flat_json
from .evaluation import evaluate, load_eval_split
from .models import load_checkpoint, save_checkpoint
from .search import SearchSpace, default_space, search_hyperparameters
from .training import read_log_csv, train, write_log_csv

log = logging.getLogger("cmil")

PATH_KEYS = ("train_manifest", "val_split", "test_split", "data_root", "out_dir")
EVAL_KEYS = ("exclude_same_camera",)
LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING}


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# run config: TrainConfig keys + paths + eval options in one flat JSON file
# ---------------------------------------------------------------------------


def load_run_config(path: str | None, overrides: dict[str, Any] | None = None) -> tuple[TrainConfig, dict[str, Any]]:
    flat = load_flat_json(path) if path else {}
    flat.update(overrides or {})
    extras = {k: flat.pop(k) for k in list(flat) if k in PATH_KEYS + EVAL_KEYS}
    cfg = TrainConfig.from_flat(flat)
    base = Path(path).parent if path else Path(".")
    for key in PATH_KEYS:
        if key in extras and extras[key] is not None and key != "out_dir":
            p = Path(extras[key])
            p = p if p.is_absolute() else base / p
            if not p.exists():
                raise CLIError(f"{key}: {p} does not exist")
            extras[key] = p
    return cfg, extras


def _seed_override(args) -> dict[str, Any]:
    if getattr(args, "seed", None) is None:
        return {}
    return {"seed": args.seed, "sampler.seed": args.seed}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    if (args.noise is None) == (args.dup_factor is None):
        raise CLIError("give exactly one of --noise or --dup-factor")
    try:
        k = args.dup_factor if args.dup_factor is not None else bags.factor_for_noise(args.noise)
        spec = bags.NoiseSpec(k, seed=args.seed or 0)
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    strong = bags.load_manifest(args.input)
    weak = bags.generate_synthetic_weak_labels(strong, spec)
    out = Path(args.out)
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "manifest.json"
    bags.save_manifest(weak, out)
    stats = bags.compute_bag_statistics(weak)
    print(
        f"duplication factor {k}: target noise {spec.target_noise:.4f}, "
        f"achieved noise {stats.mean_noise:.4f}, {stats.num_bags} bags, "
        f"{stats.num_crops} crops (mean bag size {stats.mean_bag_size:.1f})"
    )
    print(f"wrote {out}")
    return 0


def cmd_train(args) -> int:
    cfg, extras = load_run_config(args.config, _seed_override(args))
    if "train_manifest" not in extras:
        raise CLIError("config needs train_manifest")
    out = Path(args.out or extras.get("out_dir") or "cmil-run")
    out.mkdir(parents=True, exist_ok=True)
    manifest = bags.load_manifest(extras["train_manifest"])
    val = load_eval_split(extras["val_split"]) if "val_split" in extras else None
    data_root = extras.get("data_root") or Path(extras["train_manifest"]).parent
    model, rows = train(manifest, val, cfg, data_root=data_root)
    labels = sorted({b.label for b in manifest.bags})
    save_checkpoint(model, out / "checkpoint.json", labels=labels, extra={"config": cfg.to_flat()})
    write_log_csv(rows, out / "train_log.csv")
    (out / "config.json").write_text(json.dumps(cfg.to_flat(), indent=1, sort_keys=True) + "\n")
    print(f"trained {len(rows)} steps; wrote {out / 'checkpoint.json'} and {out / 'train_log.csv'}")
    return 0


def cmd_eval(args) -> int:
    model, doc = load_checkpoint(args.checkpoint)
    split = load_eval_split(args.split)
    expected = tuple(model.extractor_config.input_shape)
    if tuple(split.gallery_x.shape[1:]) != expected:
        raise CLIError(f"split crops have shape {tuple(split.gallery_x.shape[1:])}, checkpoint expects {expected}")
    _, extras = load_run_config(args.config) if args.config else (None, {})
    distance = args.distance or doc.get("extra", {}).get("config", {}).get("losses.distance", "euclidean")
    exclude = args.exclude_same_camera or bool(extras.get("exclude_same_camera", False))
    report = evaluate(split, model, distance, exclude_same_camera=exclude)
    text = report.to_json()
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_sweep(args) -> int:
    space = SearchSpace.load(args.space) if args.space else default_space()
    if args.budget is not None:
        if args.budget < 1:
            raise CLIError("--budget must be >= 1")
        space = SearchSpace.from_json({**space.to_json(), "budget": args.budget})
    base_cfg, extras = load_run_config(args.config, _seed_override(args))
    if "train_manifest" not in extras or "val_split" not in extras:
        raise CLIError("sweep config needs train_manifest and val_split")
    manifest = bags.load_manifest(extras["train_manifest"])
    val = load_eval_split(extras["val_split"])
    data_root = extras.get("data_root") or Path(extras["train_manifest"]).parent
    space = SearchSpace.from_json({**space.to_json(), "base": {**base_cfg.to_flat(), **space.base}})

    def objective(cfg: TrainConfig) -> float:
        model, rows = train(manifest, val, cfg, data_root=data_root)
        return max((r.val_rank1 for r in rows if r.val_rank1 is not None), default=0.0)

    out = Path(args.out or extras.get("out_dir") or "cmil-sweep")
    out.mkdir(parents=True, exist_ok=True)
    result = search_hyperparameters(space, objective, seed=args.seed or 0, trial_table=out / "trials.csv")
    (out / "best_config.json").write_text(json.dumps(result.best_config.to_flat(), indent=1, sort_keys=True) + "\n")
    print(f"best validation rank-1 {result.best_objective:.4f} over {len(result.trials)} trial runs")
    return 0


def epoch_series(rows) -> list[dict[str, Any]]:
    """One row per validated epoch: last step, val rank-1, epoch-mean alignment loss."""
    by_epoch: dict[int, list] = {}
    for r in rows:
        by_epoch.setdefault(r.epoch, []).append(r)
    out = []
    for epoch, rs in sorted(by_epoch.items()):
        val = [r.val_rank1 for r in rs if r.val_rank1 is not None]
        if not val:
            continue
        out.append(
            {"epoch": epoch, "step": rs[-1].step, "val_rank1": val[-1], "align": sum(r.align for r in rs) / len(rs)}
        )
    return out


def cmd_report(args) -> int:
    out = Path(args.out or "cmil-report")
    out.mkdir(parents=True, exist_ok=True)
    logs = {}
    for p in args.logs:
        try:
            logs[Path(p)] = read_log_csv(p)
        except (OSError, ValueError) as exc:
            raise CLIError(f"cannot read training log {p}: {exc}") from exc

    summary = []
    for path, rows in logs.items():
        series = epoch_series(rows)
        name = path.parent.name if path.name == "train_log.csv" else path.stem
        with open(out / f"{name}_series.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "step", "val_rank1", "align"], lineterminator="\n")
            w.writeheader()
            w.writerows(series)
        _plot(rows, series, out / f"{name}_alignment.png", title=name)
        best = max(series, key=lambda s: s["val_rank1"]) if series else None
        summary.append(
            {
                "run": name,
                "steps": len(rows),
                "best_val_rank1": "" if best is None else best["val_rank1"],
                "best_epoch": "" if best is None else best["epoch"],
                "final_align": rows[-1].align if rows else "",
            }
        )
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(summary)
    print(f"wrote report for {len(logs)} log(s) to {out}")
    return 0


def _plot(rows, series, path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([r.step for r in rows], [r.align for r in rows], color="tab:orange", lw=0.8, label="alignment loss")
    ax.set_xlabel("step")
    ax.set_ylabel("alignment loss")
    ax2 = ax.twinx()
    ax2.plot([s["step"] for s in series], [s["val_rank1"] for s in series], "o-", color="tab:blue", label="val rank-1")
    ax2.set_ylabel("rank-1")
    ax2.set_ylim(0, 1)
    ax.set_title(title)
    fig.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmil", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (or file for generate/eval)")

    g = sub.add_parser("generate", help="inject synthetic bag noise into a strongly labeled manifest")
    common(g)
    g.add_argument("--input", required=True, help="strong manifest JSON")
    g.add_argument("--noise", type=float, help="target noise fraction k/(k+1), e.g. 0.75")
    g.add_argument("--dup-factor", type=int, help="duplication factor k")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a CMIL model")
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a query/gallery split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", required=True)
    e.add_argument("--distance", choices=["euclidean", "cosine"])
    e.add_argument("--exclude-same-camera", action="store_true")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="random search with successive halving")
    common(s)
    s.add_argument("--space", help="search space JSON (default: bundled ranges)")
    s.add_argument("--budget", type=int)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="plot rank-1 and alignment loss from training logs")
    common(r)
    r.add_argument("logs", nargs="+", help="train_log.csv file(s)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("CMIL_LOG_LEVEL", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CLIError, ConfigError, bags.ManifestError, ValueError, RuntimeError) as exc:
        print(f"cmil {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
