"""Command-line pipeline: synthesize data, fit priors, lift, evaluate, ablate.

All randomness flows from --seed. BLAS threading is pinned (unless the caller
set the environment explicitly) so outputs are byte-identical across runs and
across --threads settings.
"""

from __future__ import annotations

import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .diffusion import cosine_schedule, forward_sample
from .errors import ConfigurationError, NormalizationError, ShapeError
from .evaluate import (default_cells, make_dataset, mpjpe, pose3d_from_json,
                       pose3d_to_json, reports_to_csv, reports_to_json, run_ablation)
from .preprocess import (filter_low_confidence, gaussian_smooth, load_alphapose_track,
                         load_joint_map, normalize, pose2d_from_jsonl, pose2d_to_jsonl,
                         segment_discontinuities)
from .prior import (AnalyticGaussianDenoiser, GaussianMotionPrior, RegressionDenoiser,
                    fit_gaussian_prior, fit_regression_denoiser, load_denoiser,
                    save_denoiser)
from .camera import make_rig
from .sampler import CmasConfig, diagnostics_to_jsonl, lift_batch
from .skeleton import (Pose2DSequence, Pose3DSequence, default_topology,
                       topology_from_json)
from .triangulate import OptimizerSettings

_U64 = (1 << 64) - 1


def _fraction(text: str) -> float:
    return float(Fraction(text))


def _int_list(text: str) -> list[int]:
    items = [s for s in text.split(",") if s.strip()]
    if not items:
        raise ConfigurationError("empty grid")
    return [int(s) for s in items]


def _fraction_list(text: str) -> list[float]:
    items = [s for s in text.split(",") if s.strip()]
    if not items:
        raise ConfigurationError("empty grid")
    return [_fraction(s) for s in items]


def _topology(args) -> "SkeletonTopology":
    if getattr(args, "topology", None):
        return topology_from_json(args.topology)
    return default_topology()


def _cmas_config(args, topo) -> CmasConfig:
    return CmasConfig(views=args.views, steps=args.steps, w_ref=args.w_ref,
                      lambda_bone=args.lambda_bone,
                      optimizer=OptimizerSettings(learning_rate=args.lr,
                                                  iterations=args.iters),
                      rig_distance=args.distance, rig_elevation=args.elevation,
                      seed=args.seed, topology=topo)


def _derived_seed(*parts: int) -> int:
    entropy = [int(p) & _U64 for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    topo = _topology(args)
    rig = make_rig(args.views, args.distance, args.elevation)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed & _U64]))
    motions, per_view = make_dataset(args.n, topo, rig, args.length, rng)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, motion in enumerate(motions):
        pose3d_to_json(motion, out / f"motion_{i:04d}_3d.json")
        for v in range(len(rig)):
            pose2d_to_jsonl(per_view[v][i], out / f"motion_{i:04d}_view{v}.jsonl")
    print(f"wrote {args.n} motions x ({1 + len(rig)}) files to {out}")
    return 0


def _load_2d_dataset(dataset_dir: Path) -> list[Pose2DSequence]:
    if not dataset_dir.is_dir():
        raise ConfigurationError(f"dataset directory {dataset_dir} does not exist")
    files = sorted(dataset_dir.glob("*.jsonl"))
    if not files:
        raise ConfigurationError(f"no .jsonl sequences under {dataset_dir}")
    return [pose2d_from_jsonl(f) for f in files]


def cmd_fit_prior(args) -> int:
    dataset = _load_2d_dataset(Path(args.dataset_dir))
    schedule = cosine_schedule(args.steps)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed & _U64, 2]))
    if args.kind == "gaussian":
        model = fit_gaussian_prior(dataset)
        print(f"gaussian prior: D={model.mean.size}, "
              f"trace(cov)={np.trace(model.covariance):.6g}")
    else:
        model = fit_regression_denoiser(dataset, schedule, args.samples_per_t, rng)
        _print_regression_diagnostics(model, dataset, schedule, rng)
    save_denoiser(args.out_model, model, args.steps)
    print(f"wrote {args.out_model}")
    return 0


def _print_regression_diagnostics(model, dataset, schedule, rng, samples: int = 256):
    rows = np.stack([seq.data.ravel() for seq in dataset])
    picks = rng.integers(0, rows.shape[0], size=min(samples, 4 * rows.shape[0]))
    x0 = rows[picks]
    for t in range(1, schedule.steps + 1):
        x_t = forward_sample(x0, t, rng.standard_normal(x0.shape), schedule)
        pred = x_t @ model.weights[t - 1] + model.offsets[t - 1]
        print(f"t={t:4d}  mse={float(np.mean((pred - x0) ** 2)):.6g}")


def _denoiser_from_model(model, steps: int):
    if isinstance(model, GaussianMotionPrior):
        return AnalyticGaussianDenoiser(model, cosine_schedule(steps))
    if isinstance(model, RegressionDenoiser):
        if model.steps != steps:
            raise ConfigurationError(f"regression model has {model.steps} steps, "
                                     f"--steps is {steps}")
        return model
    raise ConfigurationError(f"unsupported model type {type(model).__name__}")


def _window_starts(total: int, window: int) -> list[int]:
    starts = list(range(0, total - window + 1, window))
    if not starts:
        raise ConfigurationError(f"input has {total} frames, model needs >= {window}")
    if starts[-1] + window < total:
        starts.append(total - window)
    return starts


def cmd_lift(args) -> int:
    topo = _topology(args)
    cfg = _cmas_config(args, topo)
    model, _ = load_denoiser(args.model)
    denoiser = _denoiser_from_model(model, args.steps)
    win, joints = denoiser.seq_shape
    if joints != topo.joint_count:
        raise ConfigurationError(f"model has {joints} joints, topology has {topo.joint_count}")

    if args.raw:
        seq = pose2d_from_jsonl(args.input)
        segments = [(0, seq)]
    else:
        joint_map = load_joint_map(args.mapping) if args.mapping else None
        track = load_alphapose_track(args.input, joint_map)
        track = filter_low_confidence(track, args.confidence_threshold)
        _, xform = normalize(track, cfg.rig().reference_view, topo)
        track = replace(track, coords=xform.apply(track.coords))
        segments = []
        for seg in segment_discontinuities(track, args.continuity_threshold):
            seg = gaussian_smooth(seg, args.smooth_sigma)
            segments.append((seg.meta["start"],
                             Pose2DSequence(data=seg.coords, mask=seg.mask)))
        if not segments:
            raise ConfigurationError("preprocessing left no usable segment")

    diags_all = []
    outputs = []
    for seg_idx, (start, seq) in enumerate(segments):
        if seq.joints != joints:
            raise ConfigurationError(f"input has {seq.joints} joints, model has {joints}")
        assembled = np.zeros((seq.frames, joints, 3))
        mask = seq.observed_mask()
        for w_idx, w_start in enumerate(_window_starts(seq.frames, win)):
            sl = slice(w_start, w_start + win)
            seed = _derived_seed(args.seed, seg_idx, w_idx)
            out, diags = lift_batch(seq.data[None, sl], mask[None, sl], denoiser,
                                    replace(cfg, seed=seed), seeds=[seed],
                                    threads=args.threads)
            assembled[sl] = out[0]
            diags_all.extend(diags)
        outputs.append((start, assembled))

    out_path = Path(args.out)
    if len(outputs) == 1:
        pose3d_to_json(Pose3DSequence(data=outputs[0][1]), out_path)
    else:
        doc = {"unit": "m", "segments": [{"start": s, "frames": a.shape[0],
                                          "data": a.tolist()} for s, a in outputs]}
        out_path.write_text(json.dumps(doc))
    if args.diag:
        diagnostics_to_jsonl(diags_all, args.diag)
    print(f"wrote {out_path} ({sum(a.shape[0] for _, a in outputs)} frames, "
          f"{len(outputs)} segment(s), alignment={args.alignment})")
    return 0


def cmd_eval(args) -> int:
    pred = pose3d_from_json(args.pred)
    gt = pose3d_from_json(args.gt)
    values = {a: mpjpe(pred, gt, a) for a in ("none", "root", "procrustes")}
    print(f"mpjpe_{args.alignment}_mm={values[args.alignment]:.6f}")
    if args.out_csv:
        with Path(args.out_csv).open("w") as fh:
            fh.write("mpjpe_none,mpjpe_root,mpjpe_procrustes\n")
            fh.write(f"{values['none']},{values['root']},{values['procrustes']}\n")
    return 0


def _load_gt(dataset_dir: Path):
    if not dataset_dir.is_dir():
        raise ConfigurationError(f"dataset directory {dataset_dir} does not exist")
    files = sorted(dataset_dir.glob("*_3d.json"))
    if not files:
        raise ConfigurationError(f"no *_3d.json motions under {dataset_dir}")
    return [pose3d_from_json(f) for f in files]


def cmd_ablate(args) -> int:
    topo = _topology(args)
    gt = _load_gt(Path(args.dataset_dir))
    model, _ = load_denoiser(args.model)
    denoiser = _denoiser_from_model(model, args.steps)
    if args.views_grid is not None:
        cells = [{"name": f"views_{v}", "views": v} for v in _int_list(args.views_grid)]
    elif args.weights_grid is not None:
        cells = [{"name": f"w_ref_{w:g}", "w_ref": w} for w in _fraction_list(args.weights_grid)]
    else:
        cells = default_cells(args.sweep)
    base = _cmas_config(args, topo)
    reports = run_ablation(gt, denoiser, base, cells, noise_sigma=args.noise_sigma)
    reports_to_csv(reports, args.out_csv)
    reports_to_json(reports, Path(args.out_csv).with_suffix(".json"))
    for r in reports:
        print(f"{r.name:28s} mpjpe_root={r.mpjpe_mm['root']:9.3f} mm  "
              f"bone_var={r.bone_variance:.3e}  ({r.runtime_s:.1f}s)")
    print(f"wrote {args.out_csv}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_rig_flags(p):
    p.add_argument("--views", type=int, default=7, help="number of camera views")
    p.add_argument("--distance", type=float, default=7.0, help="camera distance, meters")
    p.add_argument("--elevation", type=float, default=float(np.pi / 16),
                   help="camera elevation, radians")
    p.add_argument("--topology", default=None, help="topology JSON (default: built-in 13-joint)")


def _add_sampling_flags(p):
    p.add_argument("--steps", type=int, default=100, help="diffusion steps T")
    p.add_argument("--w-ref", type=_fraction, default=0.8, dest="w_ref",
                   help="reference-view weight (fraction or decimal)")
    p.add_argument("--lambda-bone", type=float, default=0.001, dest="lambda_bone",
                   help="bone-variance loss weight")
    p.add_argument("--lr", type=float, default=0.01, help="triangulation learning rate")
    p.add_argument("--iters", type=int, default=1000,
                   help="triangulation iterations per denoising step")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmas",
        description="Conditional multi-view ancestral sampling: 2D-to-3D pose lifting.")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", formatter_class=fmt,
                       help="generate a synthetic 3D motion dataset with 2D projections")
    p.add_argument("--n", type=int, default=200, help="number of sequences")
    p.add_argument("--length", type=int, default=32, help="frames per sequence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    _add_rig_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-prior", formatter_class=fmt,
                       help="fit a denoiser on a directory of 2D sequences")
    p.add_argument("--dataset-dir", required=True)
    p.add_argument("--kind", choices=("gaussian", "regression"), default="gaussian")
    p.add_argument("--out-model", required=True)
    p.add_argument("--steps", type=int, default=100, help="diffusion steps T")
    p.add_argument("--samples-per-t", type=int, default=2048, dest="samples_per_t")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit_prior)

    p = sub.add_parser("lift", formatter_class=fmt,
                       help="lift a 2D pose sequence to 3D")
    p.add_argument("--input", required=True, help="2D input (flat-triplet JSON, or JSONL with --raw)")
    p.add_argument("--model", required=True, help="fitted denoiser (.npz)")
    p.add_argument("--out", required=True, help="output 3D JSON")
    p.add_argument("--raw", action="store_true",
                   help="input is already a normalized JSONL sequence; skip preprocessing")
    p.add_argument("--mapping", default=None, help="joint-mapping JSON for raw detector output")
    p.add_argument("--diag", default=None, help="write per-step diagnostics JSONL here")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alignment", choices=("none", "root", "procrustes"), default="root",
                   help="recorded for downstream evaluation")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads for per-view denoising")
    p.add_argument("--confidence-threshold", type=float, default=0.3,
                   dest="confidence_threshold")
    p.add_argument("--continuity-threshold", type=float, default=0.5,
                   dest="continuity_threshold")
    p.add_argument("--smooth-sigma", type=float, default=1.0, dest="smooth_sigma",
                   help="temporal Gaussian sigma, frames")
    _add_rig_flags(p)
    _add_sampling_flags(p)
    p.set_defaults(func=cmd_lift)

    p = sub.add_parser("eval", formatter_class=fmt, help="MPJPE between two 3D pose files")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--alignment", choices=("none", "root", "procrustes"), default="root")
    p.add_argument("--out-csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", formatter_class=fmt,
                       help="run benchmark sweeps over views / weights / loss components")
    p.add_argument("--dataset-dir", required=True, help="directory from `cmas synth`")
    p.add_argument("--model", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--sweep", choices=("views", "components", "weights", "all"),
                   default="all")
    p.add_argument("--views-grid", default=None, dest="views_grid",
                   help="comma-separated view counts (overrides --sweep)")
    p.add_argument("--weights-grid", default=None, dest="weights_grid",
                   help="comma-separated reference weights (overrides --sweep)")
    p.add_argument("--noise-sigma", type=float, default=0.005, dest="noise_sigma",
                   help="2D observation noise, normalized units")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    _add_rig_flags(p)
    _add_sampling_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def _extract_config(argv: list[str]) -> dict:
    """Pop --config PATH from argv and return the parsed JSON dict."""
    for i, tok in enumerate(argv):
        if tok == "--config":
            if i + 1 >= len(argv):
                raise ConfigurationError("--config needs a path")
            path = argv[i + 1]
            del argv[i:i + 2]
            return json.loads(Path(path).read_text())
        if tok.startswith("--config="):
            path = tok.split("=", 1)[1]
            del argv[i]
            return json.loads(Path(path).read_text())
    return {}


def _apply_config(args: argparse.Namespace, config: dict, argv: list[str]):
    explicit = set()
    for tok in argv:
        if tok.startswith("--"):
            explicit.add(tok.split("=", 1)[0].lstrip("-").replace("-", "_"))
    for key, value in config.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise ConfigurationError(f"unknown config key {key!r}")
        if dest not in explicit:
            setattr(args, dest, value)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        config = _extract_config(argv)
        parser = build_parser()
        args = parser.parse_args(argv)
        _apply_config(args, config, argv)
        return int(args.func(args) or 0)
    except (ConfigurationError, NormalizationError, ShapeError, FileNotFoundError,
            ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse usage errors already exit 2
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 1
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
