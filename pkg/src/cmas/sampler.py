"""The conditional multi-view ancestral sampling loop.

Per denoising step t = T..1: predict clean 2D motions for the virtual views,
hard-anchor the reference view to the observed input, triangulate a shared 3D
motion (warm-started from the previous step), reproject it to every view, and
posterior-sample each view's latent toward t-1. A final anchored triangulation
of the clean t = 0 motions produces the output.

All randomness derives from one seed through per-(step, view) streams, so a
run is a deterministic function of (input, denoiser, config) regardless of
how step (a) is threaded.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import CameraRig, backproject, make_rig
from .diffusion import Denoiser, cosine_schedule, posterior_mean_variance
from .errors import ConfigurationError
from .skeleton import (Pose2DSequence, Pose3DSequence, SkeletonTopology,
                       bone_variance_loss, default_topology)
from .triangulate import (MIN_CAMERA_DEPTH, OptimizerSettings, _loss_terms,
                          _triangulate_arrays, view_weights)

_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class CmasConfig:
    """Every tunable of the sampling loop; defaults are the production settings."""

    views: int = 7
    steps: int = 100
    w_ref: float = 0.8
    lambda_bone: float = 0.001
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    rig_distance: float = 7.0
    rig_elevation: float = math.pi / 16
    subject_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    reference_index: int = 0
    seed: int = 0
    topology: SkeletonTopology = field(default_factory=default_topology)

    def __post_init__(self):
        if self.views < 1 or self.steps < 1:
            raise ConfigurationError("views and steps must be >= 1")
        if not (0.0 < self.w_ref <= 1.0):
            raise ConfigurationError("w_ref must lie in (0, 1]")
        if self.lambda_bone < 0.0:
            raise ConfigurationError("lambda_bone must be nonnegative")
        if not (0 <= self.reference_index < self.views):
            raise ConfigurationError("reference_index out of range")

    def rig(self) -> CameraRig:
        return make_rig(self.views, self.rig_distance, self.rig_elevation,
                        self.subject_center, self.reference_index)


@dataclass
class StepDiagnostics:
    t: int
    loss: float
    ref_err: float
    bone_var: float


def diagnostics_to_jsonl(diags: list[StepDiagnostics], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for d in diags:
            fh.write(json.dumps({"t": d.t, "loss": d.loss,
                                 "ref_err": d.ref_err, "bone_var": d.bone_var}) + "\n")


def rng_streams(seed: int, t: int, v: int) -> np.random.Generator:
    """Independent, reproducible stream per (denoising step, view)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & _U64, int(t), int(v)]))


def _init_rng(seed: int) -> np.random.Generator:
    # distinct namespace from rng_streams (single-element entropy list)
    return np.random.default_rng(np.random.SeedSequence([int(seed) & _U64]))


def init_noise(config: CmasConfig, frames: int, rig: CameraRig,
               rng: np.random.Generator) -> np.ndarray:
    """Shared 3D noise projected to every view; returns (V, L, J, 2) latents at t = T."""
    eps3d = rng.standard_normal((frames, config.topology.joint_count, 3))
    rot = np.stack([v.rotation for v in rig.views])
    return np.einsum("vab,ljb->vlja", rot, eps3d)[..., :2].copy()


def _denoise_views(denoiser: Denoiser, x_t: np.ndarray, t: int, v0: int,
                   pool: ThreadPoolExecutor | None) -> np.ndarray:
    nviews = x_t.shape[0]
    out = np.empty_like(x_t)
    virtual = [v for v in range(nviews) if v != v0]
    if pool is None:
        for v in virtual:
            out[v] = denoiser.predict_clean(x_t[v], t, v)
    else:
        futures = {v: pool.submit(denoiser.predict_clean, x_t[v], t, v) for v in virtual}
        for v in virtual:
            out[v] = futures[v].result()
    return out


def lift_batch(inputs: np.ndarray, masks: np.ndarray | None, denoiser: Denoiser,
               config: CmasConfig, seeds, threads: int = 1
               ) -> tuple[np.ndarray, list[StepDiagnostics]]:
    """Run the sampling loop on a stack of sequences sharing one config.

    ``inputs`` is (N, L, J, 2) reference-view observations, ``masks`` an
    optional (N, L, J) bool array, ``seeds`` one seed per sequence. Returns
    (N, L, J, 3) and per-step diagnostics averaged over the batch.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    n, frames, joints, _ = inputs.shape
    if joints != config.topology.joint_count:
        raise ConfigurationError(f"input has {joints} joints, topology has "
                                 f"{config.topology.joint_count}")
    seeds = [int(s) for s in seeds]
    if len(seeds) != n:
        raise ConfigurationError("one seed per sequence required")
    rig = config.rig()
    v0 = config.reference_index
    schedule = cosine_schedule(config.steps)
    weights = view_weights(config.views, config.w_ref, v0)
    rot = np.stack([v.rotation for v in rig.views])
    trans = np.stack([v.translation for v in rig.views])
    foc = np.array([v.focal for v in rig.views]).reshape(-1, 1, 1, 1, 1)
    pp = np.stack([v.principal_point for v in rig.views]).reshape(-1, 1, 1, 1, 2)

    eps3d = np.stack([_init_rng(s).standard_normal((frames, joints, 3)) for s in seeds])
    x_t = np.einsum("vab,nljb->vnlja", rot, eps3d)[..., :2].copy()

    if masks is not None and not np.all(masks):
        tgt_masks = np.ones((config.views, n, frames, joints), dtype=bool)
        tgt_masks[v0] = masks
    else:
        tgt_masks = None

    x = backproject(inputs, rig.reference_view, depth=config.rig_distance)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    diags: list[StepDiagnostics] = []
    try:
        for t in range(config.steps, 0, -1):
            x0hat = _denoise_views(denoiser, x_t, t, v0, pool)
            x0hat[v0] = inputs  # hard anchoring to the observation
            assert np.array_equal(x0hat[v0], inputs)
            x = _triangulate_arrays(x0hat, tgt_masks, rig, weights, config.lambda_bone,
                                    config.topology, x, config.optimizer)
            cam = np.einsum("vab,nljb->vnlja", rot, x) + trans.reshape(-1, 1, 1, 1, 3)
            z = np.maximum(cam[..., 2], MIN_CAMERA_DEPTH)
            proj = pp + foc * cam[..., :2] / z[..., None]
            diags.append(_step_diagnostics(t, x, x0hat, tgt_masks, rig, weights,
                                           config, proj, inputs, masks))
            for v in range(config.views):
                mean, var = posterior_mean_variance(x_t[v], proj[v], t, schedule)
                if var > 0.0:
                    eps = np.stack([rng_streams(s, t, v).standard_normal((frames, joints, 2))
                                    for s in seeds])
                    x_t[v] = mean + math.sqrt(var) * eps
                else:
                    x_t[v] = mean
            if not np.all(np.isfinite(x_t)):
                raise FloatingPointError(f"non-finite latents after step t={t}")
        x0 = x_t.copy()
        x0[v0] = inputs
        x = _triangulate_arrays(x0, tgt_masks, rig, weights, config.lambda_bone,
                                config.topology, x, config.optimizer)
    finally:
        if pool is not None:
            pool.shutdown()
    return x, diags


def _step_diagnostics(t, x, targets, tgt_masks, rig, weights, config, proj,
                      inputs, masks) -> StepDiagnostics:
    geo, bone, _ = _loss_terms(x, targets, tgt_masks, rig, weights, config.lambda_bone,
                               config.topology, MIN_CAMERA_DEPTH, want_grad=False)
    total = np.mean(geo + config.lambda_bone * np.asarray(bone))
    err = np.linalg.norm(proj[config.reference_index] - inputs, axis=-1)
    if masks is not None:
        denom = max(int(masks.sum()), 1)
        ref_err = float(np.sum(err * masks) / denom)
    else:
        ref_err = float(np.mean(err))
    return StepDiagnostics(t=int(t), loss=float(total), ref_err=ref_err,
                           bone_var=float(np.mean(bone_variance_loss(x, config.topology))))


def lift(input2d: Pose2DSequence, denoiser: Denoiser, config: CmasConfig,
         threads: int = 1) -> tuple[Pose3DSequence, list[StepDiagnostics]]:
    """Lift one observed 2D sequence to 3D; deterministic given config.seed."""
    expected = getattr(denoiser, "seq_shape", None)
    if expected is not None and tuple(expected) != input2d.data.shape[:2]:
        raise ConfigurationError(f"input shape {input2d.data.shape[:2]} does not match "
                                 f"denoiser shape {tuple(expected)}")
    masks = input2d.observed_mask()[None]
    out, diags = lift_batch(input2d.data[None], masks, denoiser, config,
                            seeds=[config.seed], threads=threads)
    return Pose3DSequence(data=out[0]), diags


def with_overrides(config: CmasConfig, **kwargs) -> CmasConfig:
    """dataclasses.replace wrapper so callers need not import dataclasses."""
    return replace(config, **kwargs)
