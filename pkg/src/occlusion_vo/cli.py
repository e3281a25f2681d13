"""Command-line entry point: ``occlusion-vo <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataset import export_dataset, import_dataset
from .evaluation import evaluate, read_trajectory, roc_auc
from .experiment import Variant, occlusion_sweep, records_from_file, run_experiment
from .motion_state import ClassifierParams, default_ref_lag
from .sim import SCENARIOS, generate, scenario_config
from .tracking import TrackingConfig


def _ratios(text: str) -> list[float]:
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None


def _write_json(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    sys.stdout.write(text)


def cmd_simulate(args) -> int:
    cfg = scenario_config(
        args.scenario,
        seed=args.seed,
        frames=args.frames,
        fps=args.fps,
        pixel_noise_sigma=args.noise_px,
        target_occlusion=args.target_occlusion,
    )
    out = export_dataset(generate(cfg), args.out)
    print(f"wrote {cfg.frames} frames to {out}")
    return 0


def cmd_run(args) -> int:
    dataset = import_dataset(args.dataset)
    ref_lag = args.ref_lag if args.ref_lag is not None else default_ref_lag(dataset.fps)
    classifier = ClassifierParams(sigma_bkg=args.sigma_bkg, ref_lag_n=ref_lag)
    cfg = replace(TrackingConfig(), tau_mar=args.tau_mar, classifier=classifier)
    report = run_experiment(dataset, args.variant, cfg, args.out)
    s = report.summary
    rmse = "n/a" if s["at_rmse"] is None else f"{s['at_rmse']:.4f} m"
    print(f"{s['variant']}: AT-RMSE {rmse}, lost {s['lost_frames']}/{s['frames']}, report in {args.out}")
    return 0


def cmd_eval(args) -> int:
    est, gt = read_trajectory(args.est), read_trajectory(args.gt)
    ev = evaluate(est, gt, with_scale=args.with_scale, sync_window=args.sync_window, sync_step=args.sync_step)
    T = ev.alignment.transform
    _write_json(
        {
            "at_rmse": ev.alignment.at_rmse,
            "time_offset": ev.offset,
            "scale": ev.alignment.scale,
            "rotation": T.R.tolist(),
            "translation": T.t.tolist(),
            "matched_poses": ev.matched,
            "unmatched_poses": ev.unmatched,
        },
        args.out,
    )
    return 0


def cmd_roc(args) -> int:
    records = []
    for path in args.records:
        p = Path(path)
        records.extend(records_from_file(p / "frames.jsonl" if p.is_dir() else p))
    sigmas = np.linspace(args.sigma_min, args.sigma_max, args.steps)
    curve = roc_auc(records, sigmas)
    lines = ["sigma_bkg,fpr,tpr"] + [f"{s!r},{f!r},{t!r}" for f, t, s in curve.points]
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"AUC {curve.auc:.4f} over {len(records)} object records")
    return 0


def cmd_sweep(args) -> int:
    result = occlusion_sweep(args.ratios, range(args.seed, args.seed + args.seeds), frames=args.frames)
    rows = [(r, float(np.nanmedian(v)), *v) for r, v in result.items()]
    text = "ratio,median_at_rmse," + ",".join(f"seed_{s}" for s in range(args.seed, args.seed + args.seeds)) + "\n"
    text += "".join(",".join(repr(float(x)) for x in row) + "\n" for row in rows)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occlusion-vo", description="Occlusion-aware stereo ego-motion tracking.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render a synthetic stereo dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=100)
    s.add_argument("--fps", type=float, default=6.0)
    s.add_argument("--noise-px", type=float, default=0.5)
    s.add_argument("--scenario", choices=SCENARIOS, default="mixed")
    s.add_argument("--target-occlusion", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="track a dataset with one variant")
    r.add_argument("--dataset", required=True)
    r.add_argument("--variant", choices=[v.value for v in Variant], default=Variant.PROPOSED.value)
    r.add_argument("--tau-mar", type=float, default=0.5)
    r.add_argument("--sigma-bkg", type=float, default=0.12)
    r.add_argument("--ref-lag", type=int, default=None, help="frames back to the reference frame (default fps/3)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="align and score an estimated trajectory")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--with-scale", action="store_true")
    e.add_argument("--sync-window", type=float, default=0.0)
    e.add_argument("--sync-step", type=float, default=0.1)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("roc", help="ROC over a sigma_bkg sweep from run records")
    c.add_argument("--records", nargs="+", required=True, help="frames.jsonl files or run directories")
    c.add_argument("--sigma-min", type=float, default=0.0)
    c.add_argument("--sigma-max", type=float, default=0.6)
    c.add_argument("--steps", type=int, default=61)
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_roc)

    w = sub.add_parser("sweep-occlusion", help="AT-RMSE versus a fixed occlusion ratio")
    w.add_argument("--ratios", type=_ratios, default=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7])
    w.add_argument("--seeds", type=int, default=10)
    w.add_argument("--seed", type=int, default=0, help="first seed")
    w.add_argument("--frames", type=int, default=60)
    w.add_argument("--out", default=None)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {reason}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
