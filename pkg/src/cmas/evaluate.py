"""Metrics, synthetic benchmarks, and the ablation harness.

MPJPE is reported in millimeters under three alignments (none / root-relative /
Procrustes similarity). Synthetic motions are rigid skeletons driven by smooth
sinusoidal joint rotations, so their bone lengths are constant by construction
and they serve both as prior-fitting data and as benchmark ground truth.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraRig, CameraView, backproject, project
from .errors import ProjectionError, ShapeError
from .sampler import CmasConfig, lift_batch, with_overrides
from .skeleton import (Pose2DSequence, Pose3DSequence, SkeletonTopology,
                       bone_variance_loss, _pose_array)

ALIGNMENTS = ("none", "root", "procrustes")


def _procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Similarity-align pred onto gt over all frames and joints jointly."""
    p = pred.reshape(-1, 3)
    g = gt.reshape(-1, 3)
    mu_p, mu_g = p.mean(axis=0), g.mean(axis=0)
    pc, gc = p - mu_p, g - mu_g
    cov = gc.T @ pc / len(p)
    u, s, vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[-1] = -1.0
    rot = u @ np.diag(d) @ vt
    var_p = float((pc * pc).sum()) / len(p)
    scale = float(s @ d) / var_p if var_p > 0 else 1.0
    return (scale * (rot @ p.T).T + (mu_g - scale * rot @ mu_p)).reshape(pred.shape)


def mpjpe(pred, gt, alignment: str = "root", root_index: int = 0) -> float:
    """Mean per-joint Euclidean distance in millimeters after optional alignment."""
    p = _pose_array(pred, 3)
    g = _pose_array(gt, 3)
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} vs gt {g.shape}")
    if alignment == "root":
        p = p - p[..., root_index:root_index + 1, :]
        g = g - g[..., root_index:root_index + 1, :]
    elif alignment == "procrustes":
        p = _procrustes_align(p, g)
    elif alignment != "none":
        raise ValueError(f"unknown alignment {alignment!r}")
    return float(np.mean(np.linalg.norm(p - g, axis=-1))) * 1000.0


# ---------------------------------------------------------------------------
# synthetic motions
# ---------------------------------------------------------------------------

_CANONICAL_13 = {
    (0, 1): (0.0, 0.0, 0.55), (1, 2): (0.0, 0.0, 0.25),
    (1, 3): (0.0, 0.20, -0.05), (3, 4): (0.0, 0.06, -0.30), (4, 5): (0.0, 0.04, -0.26),
    (1, 6): (0.0, -0.20, -0.05), (6, 7): (0.0, -0.06, -0.30), (7, 8): (0.0, -0.04, -0.26),
    (0, 9): (0.0, 0.11, -0.50), (9, 10): (0.0, 0.02, -0.45),
    (0, 11): (0.0, -0.11, -0.50), (11, 12): (0.0, -0.02, -0.45),
}


@dataclass(frozen=True)
class SynthParams:
    angle_amplitude: float = 0.3   # radians of per-bone swing
    root_amplitude: float = 0.25   # meters of root drift
    max_cycles: float = 2.0        # fastest sinusoid, cycles per sequence


def _rodrigues(axis: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """(L, 3, 3) rotations about a fixed axis by per-frame angles."""
    k = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    s = np.sin(theta)[:, None, None]
    c = (1.0 - np.cos(theta))[:, None, None]
    return np.eye(3) + s * k + c * (k @ k)


def _bone_order(topo: SkeletonTopology) -> list[int]:
    """Bone indices ordered parent-before-child from the root."""
    by_parent: dict[int, list[int]] = {}
    for i, (p, _) in enumerate(topo.bones):
        by_parent.setdefault(p, []).append(i)
    order, stack = [], [topo.root_index]
    while stack:
        j = stack.pop(0)
        for i in by_parent.get(j, []):
            order.append(i)
            stack.append(topo.bones[i][1])
    return order


def _canonical_offsets(topo: SkeletonTopology, rng: np.random.Generator) -> np.ndarray:
    """(B, 3) rest offsets; curated for the default 13-joint tree, otherwise
    drawn once from rng with plausible bone lengths."""
    offsets = np.empty((topo.bone_count, 3))
    for i, bone in enumerate(topo.bones):
        if bone in _CANONICAL_13 and topo.joint_count == 13:
            offsets[i] = _CANONICAL_13[bone]
        else:
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            offsets[i] = direction * rng.uniform(0.2, 0.5)
    return offsets


def synth_motion(topo: SkeletonTopology, frames: int, rng: np.random.Generator,
                 params: SynthParams = SynthParams()) -> Pose3DSequence:
    """Rigid skeleton under sinusoidal joint-angle trajectories and slow root drift."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    offsets = _canonical_offsets(topo, rng)
    phase = rng.uniform(0.0, 2.0 * math.pi, size=3)
    freq = rng.uniform(0.25, 1.0, size=3)
    tgrid = np.arange(frames) / max(frames, 2)
    root = params.root_amplitude * np.stack(
        [np.sin(2.0 * math.pi * freq[0] * tgrid + phase[0]),
         np.sin(2.0 * math.pi * freq[1] * tgrid + phase[1]),
         0.3 * np.sin(2.0 * math.pi * freq[2] * tgrid + phase[2])], axis=-1)
    pos = np.zeros((topo.joint_count, frames, 3))
    rot = np.zeros((topo.joint_count, frames, 3, 3))
    pos[topo.root_index] = root
    rot[topo.root_index] = np.eye(3)
    for i in _bone_order(topo):
        p, c = topo.bones[i]
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        theta = params.angle_amplitude * np.sin(
            2.0 * math.pi * rng.uniform(0.25, params.max_cycles) * tgrid + rng.uniform(0, 2 * math.pi))
        rot[c] = np.einsum("lab,lbc->lac", rot[p], _rodrigues(axis, theta))
        pos[c] = pos[p] + np.einsum("lab,b->la", rot[c], offsets[i])
    return Pose3DSequence(data=pos.transpose(1, 0, 2))


def make_dataset(n: int, topo: SkeletonTopology, rig: CameraRig, frames: int,
                 rng: np.random.Generator, params: SynthParams = SynthParams(),
                 max_retries: int = 5
                 ) -> tuple[list[Pose3DSequence], list[list[Pose2DSequence]]]:
    """N synthetic motions plus their projections through every rig view."""
    if n < 1:
        raise ValueError("n must be >= 1")
    motions: list[Pose3DSequence] = []
    per_view: list[list[Pose2DSequence]] = [[] for _ in rig.views]
    for _ in range(n):
        for attempt in range(max_retries + 1):
            motion = synth_motion(topo, frames, rng, params)
            try:
                projections = [project(motion, v) for v in rig.views]
                break
            except ProjectionError:
                if attempt == max_retries:
                    raise
        motions.append(motion)
        for v, proj in enumerate(projections):
            per_view[v].append(proj)
    return motions, per_view


def baseline_lift(input2d: Pose2DSequence, reference_view: CameraView,
                  depth: float = 7.0) -> Pose3DSequence:
    """Constant-depth backprojection: the weakest sensible monocular lift."""
    return backproject(input2d, reference_view, depth)


class OracleDenoiser:
    """Returns the true projections of known motions, ignoring the latent.

    Used to validate the sampling machinery: with this denoiser the loop must
    reproduce the ground truth.
    """

    def __init__(self, motions: list[Pose3DSequence], rig: CameraRig):
        self._proj = np.stack([np.stack([project(m.data, v) for m in motions])
                               for v in rig.views])  # (V, N, L, J, 2)
        self.seq_shape = (motions[0].frames, motions[0].joints)

    def predict_clean(self, x_t: np.ndarray, t: int, view_index: int) -> np.ndarray:
        stored = self._proj[view_index]
        if x_t.ndim == 3:
            return stored[0]
        return stored


# ---------------------------------------------------------------------------
# benchmark harness
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkReport:
    name: str
    config: dict
    per_sequence_mpjpe: np.ndarray          # root-aligned, mm
    mpjpe_mm: dict                          # alignment -> mean
    median_mpjpe_mm: float
    bone_variance: float                    # mean over sequences, m^2
    per_sequence_bone_variance: np.ndarray
    runtime_s: float

    def __post_init__(self):
        if np.any(self.per_sequence_mpjpe < 0):
            raise ValueError("MPJPE must be nonnegative")


def default_cells(sweep: str) -> list[dict]:
    """Grid cells mirroring the published sweeps."""
    if sweep == "views":
        return [{"name": f"views_{v}", "views": v} for v in (3, 5, 7, 9)]
    if sweep == "components":
        return [
            {"name": "unweighted", "w_ref": 1.0 / 7.0, "lambda_bone": 0.0},
            {"name": "weighted_geometry", "w_ref": 0.8, "lambda_bone": 0.0},
            {"name": "weighted_geometry_bone", "w_ref": 0.8, "lambda_bone": 0.001},
        ]
    if sweep == "weights":
        fractions = ((1, 7), (1, 4), (1, 3), (2, 5), (1, 2), (2, 3), (3, 4),
                     (4, 5), (9, 10), (1, 1))
        return [{"name": f"w_ref_{a}_{b}", "w_ref": a / b} for a, b in fractions]
    if sweep == "all":
        return default_cells("views") + default_cells("components") + default_cells("weights")
    raise ValueError(f"unknown sweep {sweep!r}")


def sequence_seeds(master_seed: int, n: int) -> list[int]:
    """Per-sequence seeds derived deterministically from one master seed."""
    return [int(np.random.SeedSequence([int(master_seed) & ((1 << 64) - 1), i])
                .generate_state(1, np.uint64)[0]) for i in range(n)]


def noisy_reference_inputs(motions: list[Pose3DSequence], reference_view: CameraView,
                           sigma: float, seed: int) -> np.ndarray:
    """(N, L, J, 2) reference-view projections with i.i.d. Gaussian noise."""
    clean = np.stack([project(m.data, reference_view) for m in motions])
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & ((1 << 64) - 1), 17]))
    return clean + sigma * rng.standard_normal(clean.shape)


def run_benchmark_cell(name: str, inputs: np.ndarray, gt: list[Pose3DSequence],
                       denoiser, config: CmasConfig, seeds: list[int]) -> BenchmarkReport:
    start = time.perf_counter()
    out, _ = lift_batch(inputs, None, denoiser, config, seeds)
    runtime = time.perf_counter() - start
    root = config.topology.root_index
    per_root = np.array([mpjpe(out[i], gt[i].data, "root", root) for i in range(len(gt))])
    means = {a: float(np.mean([mpjpe(out[i], gt[i].data, a, root) for i in range(len(gt))]))
             for a in ALIGNMENTS}
    bone = np.asarray(bone_variance_loss(out, config.topology))
    return BenchmarkReport(
        name=name,
        config={"views": config.views, "steps": config.steps, "w_ref": config.w_ref,
                "lambda_bone": config.lambda_bone, "seed": config.seed,
                "lr": config.optimizer.learning_rate,
                "iterations": config.optimizer.iterations},
        per_sequence_mpjpe=per_root,
        mpjpe_mm=means,
        median_mpjpe_mm=float(np.median(per_root)),
        bone_variance=float(bone.mean()),
        per_sequence_bone_variance=bone,
        runtime_s=runtime)


def run_ablation(gt: list[Pose3DSequence], denoiser, base_config: CmasConfig,
                 cells: list[dict], noise_sigma: float = 0.005) -> list[BenchmarkReport]:
    """Lift every sequence under every grid cell and report MPJPE per cell.

    The noisy reference-view inputs and the per-sequence seeds are shared
    across cells (the reference camera is identical for every view count).
    """
    if not cells:
        raise ValueError("empty ablation grid")
    ref = base_config.rig().reference_view
    inputs = noisy_reference_inputs(gt, ref, noise_sigma, base_config.seed)
    seeds = sequence_seeds(base_config.seed, len(gt))
    reports = []
    for cell in cells:
        overrides = {k: v for k, v in cell.items() if k != "name"}
        cfg = with_overrides(base_config, **overrides)
        reports.append(run_benchmark_cell(cell.get("name", "cell"), inputs, gt,
                                          denoiser, cfg, seeds))
    return reports


_CSV_FIELDS = ("name", "views", "steps", "w_ref", "lambda_bone", "seed", "lr",
               "iterations", "mpjpe_none", "mpjpe_root", "mpjpe_procrustes",
               "median_mpjpe_root", "bone_variance", "runtime_s")


def reports_to_csv(reports: list[BenchmarkReport], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
        writer.writeheader()
        for r in reports:
            row = {"name": r.name, **r.config,
                   "mpjpe_none": r.mpjpe_mm["none"], "mpjpe_root": r.mpjpe_mm["root"],
                   "mpjpe_procrustes": r.mpjpe_mm["procrustes"],
                   "median_mpjpe_root": r.median_mpjpe_mm,
                   "bone_variance": r.bone_variance, "runtime_s": r.runtime_s}
            writer.writerow(row)


def reports_to_json(reports: list[BenchmarkReport], path: str | Path) -> None:
    doc = [{"name": r.name, "config": r.config, "mpjpe_mm": r.mpjpe_mm,
            "median_mpjpe_mm": r.median_mpjpe_mm, "bone_variance": r.bone_variance,
            "per_sequence_mpjpe": r.per_sequence_mpjpe.tolist(),
            "runtime_s": r.runtime_s} for r in reports]
    Path(path).write_text(json.dumps(doc, indent=1))


# ---------------------------------------------------------------------------
# 3D pose files
# ---------------------------------------------------------------------------

def pose3d_to_json(seq: Pose3DSequence, path: str | Path) -> None:
    Path(path).write_text(json.dumps({"frames": seq.frames, "joints": seq.joints,
                                      "unit": "m", "data": seq.data.tolist()}))


def pose3d_from_json(path: str | Path) -> Pose3DSequence:
    doc = json.loads(Path(path).read_text())
    return Pose3DSequence(data=np.asarray(doc["data"], dtype=np.float64))
