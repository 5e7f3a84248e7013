"""Cleaning of raw 2D pose tracks before lifting.

Pipeline order: confidence filter -> normalize -> discontinuity segmentation
-> temporal Gaussian smoothing. Segmentation runs on normalized coordinates so
the continuity threshold is resolution-independent; the per-frame jump is the
root-mean-square over jointly-observed joints of each joint's Euclidean jump.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import CameraView
from .errors import NormalizationError, ShapeError
from .skeleton import Pose2DSequence, SkeletonTopology

CONFIDENCE_THRESHOLD = 0.3
CONTINUITY_THRESHOLD = 0.5
CANONICAL_TORSO_M = 0.55
CANONICAL_DEPTH_M = 7.0


@dataclass
class RawPoseTrack:
    """Per-frame J x 2 coordinates with detector confidences and an observation mask."""

    coords: np.ndarray                     # (L, J, 2)
    confidence: np.ndarray | None = None   # (L, J) in [0, 1]
    mask: np.ndarray | None = None         # (L, J), True = observed
    meta: dict = field(default_factory=dict)  # video id, fps, segment start, ...

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 3 or self.coords.shape[2] != 2:
            raise ShapeError(f"expected (L, J, 2), got {self.coords.shape}")
        lj = self.coords.shape[:2]
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=np.float64)
            if self.confidence.shape != lj:
                raise ShapeError("confidence shape mismatch")
            if np.any((self.confidence < 0) | (self.confidence > 1)):
                raise ValueError("confidence must lie in [0, 1]")
        if self.mask is None:
            self.mask = np.ones(lj, dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != lj:
                raise ShapeError("mask shape mismatch")

    @property
    def frames(self) -> int:
        return self.coords.shape[0]

    @property
    def joints(self) -> int:
        return self.coords.shape[1]


def filter_low_confidence(track: RawPoseTrack,
                          threshold: float = CONFIDENCE_THRESHOLD) -> RawPoseTrack:
    """Mask joints whose confidence is strictly below the threshold.

    Coordinates are retained; only the observation mask changes. Idempotent.
    """
    if track.confidence is None:
        return replace(track, coords=track.coords.copy(), mask=track.mask.copy())
    keep = track.confidence >= threshold
    return replace(track, coords=track.coords.copy(),
                   confidence=track.confidence.copy(), mask=track.mask & keep)


def frame_jumps(track: RawPoseTrack) -> np.ndarray:
    """(L-1,) RMS-over-joints Euclidean jump between consecutive frames.

    Only joints observed in both frames contribute; frames sharing no observed
    joint get a jump of 0 (no evidence of a cut).
    """
    d = np.linalg.norm(np.diff(track.coords, axis=0), axis=-1)  # (L-1, J)
    both = track.mask[1:] & track.mask[:-1]
    counts = both.sum(axis=1)
    sq = np.where(both, d * d, 0.0).sum(axis=1)
    return np.sqrt(sq / np.maximum(counts, 1)) * (counts > 0)


def segment_discontinuities(track: RawPoseTrack,
                            b_threshold: float = CONTINUITY_THRESHOLD) -> list[RawPoseTrack]:
    """Split the track wherever the inter-frame jump exceeds the threshold.

    Segments of length 1 are discarded. Each segment's ``meta['start']`` is its
    first frame index in the parent track.
    """
    jumps = frame_jumps(track)
    cuts = [0] + [int(f) + 1 for f in np.nonzero(jumps > b_threshold)[0]] + [track.frames]
    out = []
    base = track.meta.get("start", 0)
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b - a < 2:
            continue
        meta = dict(track.meta, start=base + a)
        out.append(RawPoseTrack(coords=track.coords[a:b],
                                confidence=None if track.confidence is None
                                else track.confidence[a:b],
                                mask=track.mask[a:b], meta=meta))
    return out


def gaussian_smooth(track: RawPoseTrack, sigma_frames: float = 1.0) -> RawPoseTrack:
    """Per-joint temporal convolution with a truncated Gaussian (radius 3*sigma).

    Kernel weights are renormalized over the frames that exist and are
    observed, so boundaries and missing detections are handled uniformly.
    Masked frames with at least one observed frame inside the kernel radius are
    filled from their neighbors and marked observed; joints with no observation
    in range stay masked.
    """
    if sigma_frames < 0:
        raise ValueError("sigma_frames must be nonnegative")
    radius = int(math.ceil(3.0 * sigma_frames))
    if radius == 0:
        return replace(track, coords=track.coords.copy(), mask=track.mask.copy())
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma_frames) ** 2)
    nframes = track.frames
    coords = np.zeros_like(track.coords)
    weight = np.zeros(track.mask.shape)
    for off, k in zip(offsets, kernel):
        lo, hi = max(0, -off), min(nframes, nframes - off)
        src = slice(lo + off, hi + off)
        dst = slice(lo, hi)
        w = k * track.mask[src]
        weight[dst] += w
        coords[dst] += w[..., None] * np.where(track.mask[src, ..., None],
                                               track.coords[src], 0.0)
    filled = weight > 0.0
    coords = np.where(filled[..., None], coords / np.maximum(weight, 1e-300)[..., None],
                      track.coords)
    return replace(track, coords=coords, confidence=None if track.confidence is None
                   else track.confidence.copy(), mask=filled)


@dataclass(frozen=True)
class NormalizationTransform:
    """image' = scale * image + offset; invertible."""

    scale: float
    offset: np.ndarray  # (2,)

    def apply(self, coords: np.ndarray) -> np.ndarray:
        return self.scale * coords + self.offset

    def invert(self, coords: np.ndarray) -> np.ndarray:
        return (coords - self.offset) / self.scale


def normalize(track: RawPoseTrack, reference_view: CameraView,
              topo: SkeletonTopology, torso_joint: int = 1,
              canonical_torso_m: float = CANONICAL_TORSO_M,
              canonical_depth_m: float = CANONICAL_DEPTH_M
              ) -> tuple[Pose2DSequence, NormalizationTransform]:
    """Map a raw track into the reference camera's normalized image frame.

    Scales so the median root-to-``torso_joint`` image distance equals the
    projected torso of a canonical subject at the rig distance, then translates
    the mean root position onto the principal point. Returns the applied
    transform for de-normalization.
    """
    root = topo.root_index
    both = track.mask[:, root] & track.mask[:, torso_joint]
    if not np.any(both):
        raise NormalizationError("no frame observes both the root and the torso joint")
    torso = np.linalg.norm(track.coords[both, torso_joint] - track.coords[both, root],
                           axis=-1)
    median_torso = float(np.median(torso))
    if median_torso <= 0.0:
        raise NormalizationError("degenerate zero torso length")
    target = reference_view.focal * canonical_torso_m / canonical_depth_m
    scale = target / median_torso
    root_mean = track.coords[track.mask[:, root], root].mean(axis=0)
    offset = reference_view.principal_point - scale * root_mean
    xform = NormalizationTransform(scale=scale, offset=offset)
    return Pose2DSequence(data=xform.apply(track.coords),
                          confidence=track.confidence,
                          mask=track.mask.copy()), xform


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def load_alphapose_track(path: str | Path, joint_map: list[int] | None = None,
                         meta: dict | None = None) -> RawPoseTrack:
    """Read a flat-keypoint-triplet JSON array (one object per frame).

    Each frame is {"keypoints": [x0, y0, c0, x1, y1, c1, ...]}. ``joint_map``
    gives, per topology joint, the source joint index to take.
    """
    doc = json.loads(Path(path).read_text())
    coords, conf = [], []
    for frame in doc:
        k = np.asarray(frame["keypoints"], dtype=np.float64).reshape(-1, 3)
        if joint_map is not None:
            k = k[np.asarray(joint_map, dtype=np.intp)]
        coords.append(k[:, :2])
        conf.append(k[:, 2])
    if not coords:
        raise ValueError(f"{path}: no frames")
    return RawPoseTrack(coords=np.stack(coords), confidence=np.clip(np.stack(conf), 0.0, 1.0),
                        meta=meta or {})


def load_joint_map(path: str | Path) -> list[int]:
    """Joint-mapping config: {"map": [source index per topology joint, ...]}."""
    doc = json.loads(Path(path).read_text())
    return [int(i) for i in doc["map"]]


def pose2d_to_jsonl(seq: Pose2DSequence, path: str | Path) -> None:
    mask = seq.observed_mask()
    with Path(path).open("w") as fh:
        for f in range(seq.frames):
            fh.write(json.dumps({"f": f, "xy": seq.data[f].tolist(),
                                 "mask": mask[f].tolist()}) + "\n")


def pose2d_from_jsonl(path: str | Path) -> Pose2DSequence:
    xy, mask = [], []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            xy.append(rec["xy"])
            mask.append(rec["mask"])
    if not xy:
        raise ValueError(f"{path}: no frames")
    return Pose2DSequence(data=np.asarray(xy, dtype=np.float64),
                          mask=np.asarray(mask, dtype=bool))
