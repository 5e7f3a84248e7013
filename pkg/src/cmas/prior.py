"""Desk-scale denoisers standing in for a pre-trained 2D motion diffusion model.

Two families over flattened (L*J*2)-dimensional motion vectors:

* :class:`GaussianMotionPrior` — empirical mean/covariance of a 2D motion
  dataset; :func:`analytic_denoise` is the exact Bayes posterior mean
  E[x0 | x_t] under the DDPM forward process.
* :class:`RegressionDenoiser` — one ridge-regressed affine map per timestep,
  fitted on forward-noised samples.

Both are deterministic and immutable after construction; the per-timestep
solve of the Gaussian denoiser is cached (idempotent fill, thread-safe).
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule, forward_sample
from .errors import ShapeError
from .skeleton import Pose2DSequence

MODEL_FORMAT_VERSION = "cmas-prior/1"


def _flatten_dataset(dataset: list[Pose2DSequence]) -> tuple[np.ndarray, tuple[int, int]]:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    shape = dataset[0].data.shape[:2]
    rows = []
    for seq in dataset:
        if seq.data.shape[:2] != shape:
            raise ShapeError(f"dataset mixes shapes {shape} and {seq.data.shape[:2]}")
        rows.append(seq.data.ravel())
    return np.stack(rows), shape


@dataclass
class GaussianMotionPrior:
    mean: np.ndarray        # (D,)
    covariance: np.ndarray  # (D, D), jitter already applied
    seq_shape: tuple[int, int]
    _eig: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False, compare=False)
    _gain_cache: dict = field(default_factory=dict, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise ShapeError("covariance must be (D, D) for a D-dimensional mean")
        if d != self.seq_shape[0] * self.seq_shape[1] * 2:
            raise ShapeError("seq_shape inconsistent with dimension")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-9):
            raise ValueError("covariance must be symmetric")

    def _eigendecomposition(self) -> tuple[np.ndarray, np.ndarray]:
        if self._eig is None:
            with self._lock:
                if self._eig is None:
                    lam, q = np.linalg.eigh(self.covariance)
                    self._eig = (np.maximum(lam, 0.0), q)
        return self._eig


def fit_gaussian_prior(dataset: list[Pose2DSequence]) -> GaussianMotionPrior:
    """Empirical mean and covariance (divisor N) with 1e-6 * trace/D diagonal jitter."""
    rows, shape = _flatten_dataset(dataset)
    if rows.shape[0] < 2:
        raise ValueError("need at least 2 sequences to fit a prior")
    mean = rows.mean(axis=0)
    centered = rows - mean
    cov = centered.T @ centered / rows.shape[0]
    d = cov.shape[0]
    cov[np.diag_indices(d)] += 1e-6 * np.trace(cov) / d
    return GaussianMotionPrior(mean=mean, covariance=cov, seq_shape=shape)


def analytic_denoise(prior: GaussianMotionPrior, x_t: np.ndarray, t: int,
                     schedule: NoiseSchedule) -> np.ndarray:
    """Posterior mean of x0 given x_t for a Gaussian prior under the forward process.

    x0_hat = mu + sqrt(abar) S (abar S + (1-abar) I)^{-1} (x_t - sqrt(abar) mu),
    evaluated through a cached eigendecomposition of the covariance S.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    l, j = prior.seq_shape
    if x_t.shape[-3:] != (l, j, 2):
        raise ShapeError(f"x_t trailing shape {x_t.shape[-3:]} != {(l, j, 2)}")
    lam, q = prior._eigendecomposition()
    t = int(t)
    gain = prior._gain_cache.get(t)
    if gain is None:
        abar = schedule.alpha_bar_at(schedule._check_t(t))
        sqrt_abar = np.sqrt(abar)
        gain = (sqrt_abar, sqrt_abar * lam / (abar * lam + (1.0 - abar)))
        prior._gain_cache[t] = gain
    sqrt_abar, g = gain
    flat = x_t.reshape(x_t.shape[:-3] + (-1,))
    resid = flat - sqrt_abar * prior.mean
    out = prior.mean + ((resid @ q) * g) @ q.T
    return out.reshape(x_t.shape)


class AnalyticGaussianDenoiser:
    """Denoiser-protocol adapter around a Gaussian prior (view-agnostic)."""

    def __init__(self, prior: GaussianMotionPrior, schedule: NoiseSchedule):
        self.prior = prior
        self.schedule = schedule
        self.seq_shape = prior.seq_shape

    def predict_clean(self, x_t: np.ndarray, t: int, view_index: int) -> np.ndarray:
        return analytic_denoise(self.prior, x_t, t, self.schedule)


@dataclass
class RegressionDenoiser:
    """Per-timestep affine maps x0_hat = x_t @ weights[t-1] + offsets[t-1]."""

    weights: np.ndarray  # (T, D, D)
    offsets: np.ndarray  # (T, D)
    seq_shape: tuple[int, int]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        t, d = self.offsets.shape
        if self.weights.shape != (t, d, d):
            raise ShapeError("weights must be (T, D, D) matching offsets (T, D)")
        if d != self.seq_shape[0] * self.seq_shape[1] * 2:
            raise ShapeError("seq_shape inconsistent with dimension")

    @property
    def steps(self) -> int:
        return self.weights.shape[0]

    def predict_clean(self, x_t: np.ndarray, t: int, view_index: int = 0) -> np.ndarray:
        return regression_denoise(self, x_t, t)


def fit_regression_denoiser(dataset: list[Pose2DSequence], schedule: NoiseSchedule,
                            samples_per_t: int, rng: np.random.Generator,
                            ridge: float = 1e-4) -> RegressionDenoiser:
    """Ridge-regress x0 on forward-noised x_t separately for every timestep.

    The normal equations use the mean-scaled Gram matrix (X^T X / n + ridge I)
    on centered data, so the regularizer is sample-count independent.
    """
    rows, shape = _flatten_dataset(dataset)
    n, d = rows.shape
    if samples_per_t < 1:
        raise ValueError("samples_per_t must be >= 1")
    weights = np.empty((schedule.steps, d, d))
    offsets = np.empty((schedule.steps, d))
    for t in range(1, schedule.steps + 1):
        picks = rng.integers(0, n, size=samples_per_t)
        x0 = rows[picks]
        x_t = forward_sample(x0, t, rng.standard_normal(x0.shape), schedule)
        mx = x_t.mean(axis=0)
        my = x0.mean(axis=0)
        xc = x_t - mx
        gram = xc.T @ xc / samples_per_t
        gram[np.diag_indices(d)] += ridge
        a = np.linalg.solve(gram, xc.T @ (x0 - my) / samples_per_t)
        weights[t - 1] = a
        offsets[t - 1] = my - mx @ a
    return RegressionDenoiser(weights=weights, offsets=offsets, seq_shape=shape)


def regression_denoise(model: RegressionDenoiser, x_t: np.ndarray, t: int) -> np.ndarray:
    t = int(t)
    if not (1 <= t <= model.steps):
        raise ValueError(f"step {t} outside [1, {model.steps}]")
    x_t = np.asarray(x_t, dtype=np.float64)
    l, j = model.seq_shape
    if x_t.shape[-3:] != (l, j, 2):
        raise ShapeError(f"x_t trailing shape {x_t.shape[-3:]} != {(l, j, 2)}")
    flat = x_t.reshape(x_t.shape[:-3] + (-1,))
    out = flat @ model.weights[t - 1] + model.offsets[t - 1]
    return out.reshape(x_t.shape)


def save_denoiser(path: str | Path, model, schedule_steps: int) -> None:
    """Write a fitted prior/denoiser to a self-describing .npz container."""
    path = Path(path)
    if isinstance(model, GaussianMotionPrior):
        meta = {"version": MODEL_FORMAT_VERSION, "kind": "gaussian",
                "frames": model.seq_shape[0], "joints": model.seq_shape[1],
                "steps": schedule_steps}
        np.savez_compressed(path, meta=json.dumps(meta),
                            mean=model.mean, covariance=model.covariance)
    elif isinstance(model, RegressionDenoiser):
        meta = {"version": MODEL_FORMAT_VERSION, "kind": "regression",
                "frames": model.seq_shape[0], "joints": model.seq_shape[1],
                "steps": model.steps}
        np.savez_compressed(path, meta=json.dumps(meta),
                            weights=model.weights, offsets=model.offsets)
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")


def load_denoiser(path: str | Path):
    """Load a model container; returns (model, meta dict)."""
    with np.load(Path(path), allow_pickle=False) as payload:
        meta = json.loads(str(payload["meta"]))
        if meta.get("version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model version {meta.get('version')!r}")
        shape = (int(meta["frames"]), int(meta["joints"]))
        if meta["kind"] == "gaussian":
            model = GaussianMotionPrior(mean=payload["mean"],
                                        covariance=payload["covariance"],
                                        seq_shape=shape)
        elif meta["kind"] == "regression":
            model = RegressionDenoiser(weights=payload["weights"],
                                       offsets=payload["offsets"], seq_shape=shape)
        else:
            raise ValueError(f"unknown model kind {meta['kind']!r}")
    return model, meta
