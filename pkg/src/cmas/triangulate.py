"""Multi-view triangulation as weighted least-squares refinement.

The objective is a per-view weighted sum of squared reprojection errors plus a
scaled bone-length-variance penalty, minimized by adaptive-moment gradient
descent from a caller-supplied initialization. Intermediate iterates that
drift behind a camera are recovered rather than failed on: depth is clamped at
``MIN_CAMERA_DEPTH`` and a clamped point contributes no residual for that view
(it is unobservable there), so the views that still see it pull it back.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .camera import CameraRig
from .errors import ProjectionError, ShapeError
from .skeleton import (Pose2DSequence, Pose3DSequence, SkeletonTopology, _pose_array,
                       bone_variance_gradient, bone_variance_loss)

logger = logging.getLogger(__name__)

MIN_CAMERA_DEPTH = 0.1


@dataclass(frozen=True)
class ViewWeights:
    values: np.ndarray
    reference_index: int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 1 or len(vals) < 1:
            raise ShapeError("weights must be a nonempty vector")
        if not (0 <= self.reference_index < len(vals)):
            raise ValueError("reference_index out of range")
        if np.any(vals < 0.0):
            raise ValueError("weights must be nonnegative")
        if abs(math.fsum(vals) - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        others = np.delete(vals, self.reference_index)
        if len(others) and not np.all(others == others[0]):
            raise ValueError("non-reference weights must be identical")


def view_weights(views: int, w_ref: float, reference_index: int = 0) -> ViewWeights:
    """Reference view gets w_ref, the remaining views share 1 - w_ref evenly."""
    if views < 1:
        raise ValueError("views must be >= 1")
    if not (0.0 < w_ref <= 1.0):
        raise ValueError(f"w_ref must lie in (0, 1], got {w_ref}")
    if views == 1:
        if w_ref != 1.0:
            raise ValueError("a single-view rig requires w_ref = 1")
        return ViewWeights(values=np.ones(1), reference_index=0)
    vals = np.full(views, (1.0 - w_ref) / (views - 1))
    vals[reference_index] = w_ref
    return ViewWeights(values=vals, reference_index=reference_index)


@dataclass(frozen=True)
class OptimizerSettings:
    """Adam hyperparameters. ``final_learning_rate`` switches on geometric
    learning-rate decay across the run; None keeps the rate constant."""

    learning_rate: float = 0.01
    iterations: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    final_learning_rate: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.final_learning_rate is not None and not self.final_learning_rate > 0:
            raise ValueError("final_learning_rate must be positive")

    def rate_at(self, k: int) -> float:
        if self.final_learning_rate is None or self.iterations == 1:
            return self.learning_rate
        frac = k / (self.iterations - 1)
        return self.learning_rate * (self.final_learning_rate / self.learning_rate) ** frac


def _stack_targets(targets: list[Pose2DSequence]) -> tuple[np.ndarray, np.ndarray]:
    data = np.stack([t.data for t in targets])
    mask = np.stack([t.observed_mask() for t in targets])
    return data, mask


def _broadcast_view(arr: np.ndarray, x_ndim: int) -> np.ndarray:
    """Reshape a per-view array (V, ...) so it broadcasts against (V, batch..., L, J, c)."""
    return arr.reshape(arr.shape[:1] + (1,) * (x_ndim - 1) + arr.shape[1:])


def _loss_terms(x: np.ndarray, targets: np.ndarray, masks: np.ndarray | None,
                rig: CameraRig, weights: ViewWeights, lambda_bone: float,
                topo: SkeletonTopology | None, min_depth: float | None,
                want_grad: bool):
    """Weighted geometry loss, bone loss, and (optionally) the full gradient.

    ``x`` is (..., L, J, 3); ``targets`` is (V, ..., L, J, 2). Losses come back
    with the batch shape (...).
    """
    rot, trans, foc, pp = rig.stacked()
    cam = np.einsum("vab,...b->v...a", rot, x)
    cam += _broadcast_view(trans, x.ndim)
    z = cam[..., 2]
    if min_depth is None:
        if np.any(z <= 0.0):
            idx = tuple(int(i) for i in np.unravel_index(int(np.argmax(z <= 0.0)), z.shape))
            raise ProjectionError(f"joint at index {idx[1:]} behind camera {idx[0]}")
        zc = z
        live = None
    else:
        zc = np.maximum(z, min_depth)
        live = z > min_depth
    f = foc.reshape((-1,) + (1,) * (x.ndim - 1))
    img = _broadcast_view(pp, x.ndim) + f[..., None] * cam[..., :2] / zc[..., None]
    resid = img - targets
    if masks is not None:
        resid = resid * masks[..., None]
    if live is not None:
        # a behind-camera point is unobservable in that view: no residual, no pull
        resid = resid * live[..., None]
    alphas = weights.values.reshape((-1,) + (1,) * (x.ndim - 1))
    sq = np.sum(resid * resid, axis=(-1, -2, -3))  # (V, batch...)
    loss_geo = np.einsum("v,v...->...", weights.values, sq)
    loss_geo = float(loss_geo) if loss_geo.ndim == 0 else loss_geo

    loss_bone = 0.0
    grad = None
    if lambda_bone != 0.0:
        if topo is None:
            raise ValueError("a topology is required when lambda_bone != 0")
        loss_bone = bone_variance_loss(x, topo)
    if want_grad:
        wr = (2.0 * alphas)[..., None] * resid
        f_over_z = f / zc
        gxy = f_over_z[..., None] * wr
        gz = -f_over_z / zc * (cam[..., 0] * wr[..., 0] + cam[..., 1] * wr[..., 1])
        grad_cam = np.concatenate([gxy, gz[..., None]], axis=-1)
        grad = np.einsum("vba,v...b->...a", rot, grad_cam)
        if lambda_bone != 0.0:
            grad = grad + lambda_bone * bone_variance_gradient(x, topo)
    return loss_geo, loss_bone, grad


def geometry_loss(x, targets: list[Pose2DSequence], rig: CameraRig,
                  weights: ViewWeights, min_depth: float | None = None) -> float:
    """Sum over views of weight * squared reprojection error (masked joints excluded)."""
    arr = _pose_array(x, 3)
    data, mask = _stack_targets(targets)
    _check_views(data, arr, rig, weights)
    geo, _, _ = _loss_terms(arr, data, mask, rig, weights, 0.0, None, min_depth, want_grad=False)
    return float(geo)


def geometry_gradient(x, targets: list[Pose2DSequence], rig: CameraRig,
                      weights: ViewWeights, min_depth: float | None = None) -> np.ndarray:
    arr = _pose_array(x, 3)
    data, mask = _stack_targets(targets)
    _check_views(data, arr, rig, weights)
    _, _, grad = _loss_terms(arr, data, mask, rig, weights, 0.0, None, min_depth, want_grad=True)
    return grad


def total_loss(x, targets: list[Pose2DSequence], rig: CameraRig, weights: ViewWeights,
               lambda_bone: float, topo: SkeletonTopology,
               min_depth: float | None = None) -> float:
    """geometry_loss + lambda_bone * bone_variance_loss."""
    arr = _pose_array(x, 3)
    data, mask = _stack_targets(targets)
    _check_views(data, arr, rig, weights)
    geo, bone, _ = _loss_terms(arr, data, mask, rig, weights, lambda_bone, topo,
                               min_depth, want_grad=False)
    return float(geo) + lambda_bone * float(bone)


def total_gradient(x, targets: list[Pose2DSequence], rig: CameraRig, weights: ViewWeights,
                   lambda_bone: float, topo: SkeletonTopology,
                   min_depth: float | None = None) -> np.ndarray:
    arr = _pose_array(x, 3)
    data, mask = _stack_targets(targets)
    _check_views(data, arr, rig, weights)
    _, _, grad = _loss_terms(arr, data, mask, rig, weights, lambda_bone, topo,
                             min_depth, want_grad=True)
    return grad


def _check_views(targets: np.ndarray, x: np.ndarray, rig: CameraRig, weights: ViewWeights):
    if targets.shape[0] != len(rig) or len(weights.values) != len(rig):
        raise ShapeError(f"{targets.shape[0]} targets / {len(weights.values)} weights "
                         f"for a {len(rig)}-view rig")
    if targets.shape[-3:-1] != x.shape[-3:-1]:
        raise ShapeError(f"targets {targets.shape} do not match pose {x.shape}")


def _make_objective(targets: np.ndarray, masks: np.ndarray | None, rig: CameraRig,
                    weights: ViewWeights, lambda_bone: float, topo: SkeletonTopology,
                    x_shape: tuple):
    """Fused loss/gradient evaluator for the Adam loop.

    Same math as :func:`_loss_terms`, restructured around preallocated buffers
    and matmul (the loop dominates the pipeline's runtime, and fresh 50+ MB
    temporaries per iteration would be served by mmap each time).
    """
    rot, trans, foc, pp = rig.stacked()
    nviews = targets.shape[0]
    batch_shape = x_shape[:-3]
    per_frame = x_shape[-3] * x_shape[-2]  # L*J points per sequence
    m = int(np.prod(batch_shape, dtype=int)) * per_frame
    # cam = [x 1] @ [R^T; t^T] folds the translation into one matmul
    a = np.concatenate([rot.transpose(0, 2, 1), trans[:, None, :]], axis=1)  # (V,4,3)
    tgt = np.ascontiguousarray(targets.reshape(nviews, m, 2) - pp[:, None, :])
    maskf = None if masks is None else masks.reshape(nviews, m, 1).astype(np.float64)
    alphas = weights.values
    fcol = foc[:, None]

    xh = np.empty((m, 4))
    xh[:, 3] = 1.0
    cam = np.empty((nviews, m, 3))
    zc = np.empty((nviews, m))
    u = np.empty((nviews, m))
    t1 = np.empty((nviews, m))
    live = np.empty((nviews, m), dtype=bool)
    r = np.empty((nviews, m, 2))
    sq = np.empty((nviews, m))
    g3 = np.empty((nviews, m, 3))
    gv = np.empty((nviews, m, 3))
    gw = np.empty((m, 3))

    def evaluate(x: np.ndarray, want_grad: bool):
        xh[:, :3] = x.reshape(m, 3)
        np.matmul(xh[None], a, out=cam)
        z = cam[:, :, 2]
        np.maximum(z, MIN_CAMERA_DEPTH, out=zc)
        np.divide(fcol, zc, out=u)
        np.multiply(cam[:, :, :2], u[:, :, None], out=r)
        np.subtract(r, tgt, out=r)
        if maskf is not None:
            np.multiply(r, maskf, out=r)
        np.greater(z, MIN_CAMERA_DEPTH, out=live)
        np.multiply(r, live[:, :, None], out=r)
        np.einsum("vmc,vmc->vm", r, r, out=sq)
        per_seq = sq.reshape((nviews,) + batch_shape + (per_frame,)).sum(axis=-1)
        loss = np.einsum("v,v...->...", alphas, per_seq)
        if lambda_bone != 0.0:
            loss = loss + lambda_bone * bone_variance_loss(x, topo)
        loss = float(loss) if loss.ndim == 0 else loss
        if not want_grad:
            return loss, None
        np.multiply(u, (2.0 * alphas)[:, None], out=t1)
        np.multiply(r, t1[:, :, None], out=r)
        np.multiply(cam[:, :, 0], r[:, :, 0], out=t1)
        np.add(t1, cam[:, :, 1] * r[:, :, 1], out=t1)
        np.divide(t1, zc, out=t1)
        np.negative(t1, out=t1)
        g3[:, :, :2] = r
        g3[:, :, 2] = t1
        np.matmul(g3, rot, out=gv)  # rows are gradients: g_world = g_cam @ R
        grad = np.sum(gv, axis=0, out=gw).reshape(x_shape)
        if lambda_bone != 0.0:
            grad = grad + lambda_bone * bone_variance_gradient(x, topo)
        return loss, grad

    return evaluate


def _triangulate_arrays(targets: np.ndarray, masks: np.ndarray | None, rig: CameraRig,
                        weights: ViewWeights, lambda_bone: float, topo: SkeletonTopology,
                        init: np.ndarray, settings: OptimizerSettings) -> np.ndarray:
    """Batched Adam refinement. ``init`` is (..., L, J, 3), ``targets`` (V, ..., L, J, 2).

    Returns the best-loss iterate seen, so the result never scores worse than
    ``init`` on the total loss.
    """
    x = np.array(init, dtype=np.float64)
    evaluate = _make_objective(targets, masks, rig, weights, lambda_bone, topo, x.shape)
    batched = x.ndim > 3
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    step = np.empty_like(x)

    best_loss, _ = evaluate(x, want_grad=False)
    best_x = x.copy()
    b1, b2, eps = settings.beta1, settings.beta2, settings.epsilon
    for k in range(settings.iterations):
        loss, grad = evaluate(x, want_grad=True)
        if batched:
            better = loss < best_loss
            if np.any(better):
                best_x = np.where(better[..., None, None, None], x, best_x)
                best_loss = np.where(better, loss, best_loss)
        elif loss < best_loss:
            best_loss = loss
            best_x = x.copy()
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        # step = lr * mhat / (sqrt(vhat) + eps), with bias corrections folded in
        np.sqrt(v, out=step)
        step /= math.sqrt(1.0 - b2 ** (k + 1))
        step += eps
        np.divide(m, step, out=step)
        step *= settings.rate_at(k) / (1.0 - b1 ** (k + 1))
        x -= step
    loss, _ = evaluate(x, want_grad=False)
    if batched:
        better = loss < best_loss
        if np.any(better):
            best_x = np.where(better[..., None, None, None], x, best_x)
    elif loss < best_loss:
        best_x = x
    _log_clamped(best_x, rig)
    return best_x


def _log_clamped(x: np.ndarray, rig: CameraRig):
    if not logger.isEnabledFor(logging.DEBUG):
        return
    rot, trans, _, _ = rig.stacked()
    z = (np.einsum("vab,...b->v...a", rot, x) + _broadcast_view(trans, x.ndim))[..., 2]
    n = int(np.count_nonzero(z <= MIN_CAMERA_DEPTH))
    if n:
        logger.debug("triangulate: %d joint projections were depth-clamped", n)


def triangulate(targets: list[Pose2DSequence], rig: CameraRig, weights: ViewWeights,
                lambda_bone: float, topo: SkeletonTopology, init: Pose3DSequence,
                settings: OptimizerSettings = OptimizerSettings()) -> Pose3DSequence:
    """Minimize the total loss from ``init``; the result never scores worse than ``init``."""
    data, mask = _stack_targets(targets)
    arr = _pose_array(init, 3)
    _check_views(data, arr, rig, weights)
    out = _triangulate_arrays(data, mask, rig, weights, lambda_bone, topo, arr, settings)
    return Pose3DSequence(data=out)
