"""Command-line interface: ``maskdepth <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .config import dump_config, load_config
from .data import Dataset, SceneSpec, load_dataset, make_dataset, write_dataset, write_pgm
from .evaluation import ARMS, SUITES, ablation_grid, evaluate
from .masking import MaskConfig, make_mask
from .metrics import read_csv, summarize, write_csv
from .networks import load_checkpoint
from .robustness import CORRUPTIONS, AttackSpec, corrupt, occlude, run_attack, CorruptionSpec
from .train import train

log = logging.getLogger("maskdepth")
THREADS_ENV = "MASKDEPTH_THREADS"


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(value))


def _scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _suite_params(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--param {item!r} is not key=value")
        if key in ("kinds", "strategies", "severities", "untargeted", "flip_horizontal", "flip_vertical"):
            out[key] = tuple(_scalar(v) for v in value.split(",") if v)  # "key=" switches a list off
        else:
            out[key] = _scalar(value)
    return out


def _write_perturbed(ds: Dataset, out: Path, frames: np.ndarray, provenance: dict) -> None:
    write_dataset(ds.with_frames(frames), out, extra={f"perturbation.{k}": v for k, v in provenance.items()})
    (out / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------
def cmd_gen_data(a) -> None:
    spec = SceneSpec(seed=a.seed, width=a.width, height=a.height, n_boxes=a.boxes)
    make_dataset(spec, a.n, a.out)
    print(f"wrote {a.n} triplets to {a.out}")


def cmd_train(a) -> None:
    overrides = list(a.set or [])
    for key in ("dataset", "checkpoint", "record"):
        if getattr(a, key):
            overrides.append(f"paths.{key}={getattr(a, key)}")
    cfg = load_config(a.config, overrides)

    def progress(epoch, step, loss, parts):
        if step % a.log_every == 0:
            log.info("epoch %d step %d loss %.5f photometric %.5f", epoch, step, loss, parts["photometric"])

    _, record = train(cfg, progress=progress)
    if a.dump_config:
        Path(a.dump_config).write_text(dump_config(cfg))
    print(json.dumps({"initial_loss": record.initial_loss, "final_epoch_loss": record.epoch_losses[-1],
                      "steps": record.steps, "checkpoint_sha256": record.checkpoint_sha256}, indent=2))


def cmd_eval(a) -> None:
    model = load_checkpoint(a.checkpoint)
    ds = load_dataset(a.dataset)
    rows = evaluate(model, ds, a.suite, _suite_params(a.param), run_id=a.run_id)
    write_csv(rows, a.out)
    for key, m in sorted(summarize(rows).items()):
        print(",".join(key), f"rmse={m.rmse:.4f}", f"d1={m.delta1:.4f}")
    print(f"wrote {len(rows)} rows to {a.out}")


def cmd_corrupt(a) -> None:
    ds = load_dataset(a.dataset)
    frames = np.array([
        [corrupt(ds.frames[i, s], CorruptionSpec(a.kind, a.severity, a.seed + 3 * i + s)) for s in range(3)]
        for i in range(len(ds))
    ])
    _write_perturbed(ds, Path(a.out), frames, {"kind": a.kind, "severity": a.severity, "seed": a.seed,
                                                "source": str(a.dataset)})


def cmd_occlude(a) -> None:
    ds = load_dataset(a.dataset)
    frames = ds.frames.copy()
    for i in range(len(ds)):
        frames[i, 1] = occlude(ds.frames[i, 1], a.strategy, a.ratio, a.seed + i, a.mask_size)
    _write_perturbed(ds, Path(a.out), frames, {"kind": "occlusion", "strategy": a.strategy, "ratio": a.ratio,
                                                "mask_size": a.mask_size, "seed": a.seed, "source": str(a.dataset)})


def cmd_attack(a) -> None:
    model = load_checkpoint(a.checkpoint)
    ds = load_dataset(a.dataset)
    spec = AttackSpec(a.mode, a.eps)
    res = run_attack(model, ds.frames, ds.K, spec)
    frames = ds.frames.copy()
    frames[:, 1] = res.adversarial
    _write_perturbed(ds, Path(a.out), frames, {"kind": "attack", "mode": a.mode, "epsilon": a.eps,
                                                "iterations": res.iterations, "checkpoint": str(a.checkpoint),
                                                "source": str(a.dataset)})


def cmd_ablate(a) -> None:
    base = load_config(a.config, a.set or [])
    train_set = load_dataset(a.train_data)
    eval_set = load_dataset(a.eval_data)
    arms = [x.strip() for x in a.arms.split(";") if x.strip()] if a.arms else None  # names contain commas
    seeds = [int(s) for s in a.seeds.split(",")]
    result = ablation_grid(base, train_set, eval_set, arms, seeds)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in result.results:
        safe = r.arm.replace("/", "_").replace(",", "_").replace("%", "pct").replace("-", "none")
        r.record.save(out / f"run_{safe}_seed{r.seed}.json")
    (out / "table.txt").write_text(result.table() + "\n")
    print(result.table())


def cmd_mask_preview(a) -> None:
    cfg = MaskConfig(a.mask_size, a.ratio, a.aspect, a.seed)
    grid = make_mask(a.strategy, cfg, a.height, a.width)
    img = grid.pixels(a.height, a.width).astype(np.float64)
    write_pgm(a.out, 1.0 - img)  # masked cells drawn black
    print(f"{grid.count}/{grid.grid.size} cells masked (ratio {grid.achieved_ratio:.3f}); wrote {a.out}")


def cmd_plot(a) -> None:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    rows = [r for r in read_csv(a.csv) if r.region == a.region]
    if not rows:
        raise SystemExit(f"{a.csv}: no rows for region {a.region!r}")
    fig, ax = plt.subplots(figsize=(6, 4))
    if a.kind == "line":
        series: dict[str, dict[float, list[float]]] = {}
        for r in rows:
            series.setdefault(r.perturbation, {}).setdefault(float(r.level), []).append(getattr(r, a.metric))
        for name, pts in sorted(series.items()):
            xs = sorted(pts)
            ax.plot(xs, [np.mean(pts[x]) for x in xs], marker="o", label=name)
        ax.set_xlabel("severity / epsilon")
        ax.legend(fontsize=7)
    else:
        groups: dict[str, list[float]] = {}
        for r in rows:
            groups.setdefault(f"{r.run_id}:{r.perturbation}:{r.level}", []).append(getattr(r, a.metric))
        names = sorted(groups)
        ax.bar(range(len(names)), [np.mean(groups[n]) for n in names])
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=60, ha="right", fontsize=6)
    ax.set_ylabel(a.metric)
    fig.tight_layout()
    fig.savefig(a.out, format="svg")
    plt.close(fig)
    print(f"wrote {a.out}")


# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maskdepth", description="Masked self-supervised depth estimation lab.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="render a synthetic triplet dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=400)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--boxes", type=int, default=3)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train depth and ego-motion networks")
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (repeatable)")
    s.add_argument("--dataset")
    s.add_argument("--checkpoint")
    s.add_argument("--record")
    s.add_argument("--dump-config")
    s.add_argument("--log-every", type=int, default=100)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on one suite and write CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--suite", choices=SUITES, default="clean")
    s.add_argument("--param", action="append", metavar="KEY=V[,V...]")
    s.add_argument("--run-id", default="run")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("corrupt", help="write a corrupted copy of a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=CORRUPTIONS, required=True)
    s.add_argument("--severity", type=int, choices=range(1, 6), required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_corrupt)

    s = sub.add_parser("occlude", help="write a copy with mean-filled occlusions on the target frames")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--strategy", choices=("blockwise", "random"), default="blockwise")
    s.add_argument("--ratio", type=float, default=0.25)
    s.add_argument("--mask-size", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_occlude)

    s = sub.add_parser("attack", help="write a copy with adversarial target frames")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("untargeted", "flip_horizontal", "flip_vertical"), default="untargeted")
    s.add_argument("--eps", type=float, default=8.0)
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("ablate", help="train and evaluate the ablation grid")
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--train-data", required=True)
    s.add_argument("--eval-data", required=True)
    s.add_argument("--arms", help=f"semicolon-separated list from: {'; '.join(ARMS)}")
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("mask-preview", help="render a mask as a PGM image")
    s.add_argument("--out", required=True)
    s.add_argument("--strategy", choices=("blockwise", "random"), default="blockwise")
    s.add_argument("--height", type=int, default=192)
    s.add_argument("--width", type=int, default=640)
    s.add_argument("--mask-size", type=int, default=16)
    s.add_argument("--ratio", type=float, default=0.25)
    s.add_argument("--aspect", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_mask_preview)

    s = sub.add_parser("plot", help="SVG chart from an evaluation CSV")
    s.add_argument("--csv", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=("line", "bar"), default="line")
    s.add_argument("--metric", choices=("rmse", "delta1", "delta2", "delta3"), default="rmse")
    s.add_argument("--region", choices=("complete", "unmasked", "masked"), default="complete")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            args.func(args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
