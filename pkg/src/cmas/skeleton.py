"""Skeletal topology, pose-sequence containers, and the bone-length constancy loss.

The anatomical constraint used during triangulation is the mean over bones of
the temporal (population) variance of each bone's length:

    loss = (1/B) sum_i var_i,   var_i = (1/L) sum_l (b_i(l) - mean_i)^2
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class SkeletonTopology:
    """A rooted joint tree: ``bones`` is an ordered list of (parent, child) pairs.

    The bone graph must be connected and acyclic, i.e. a spanning tree of all
    ``joint_count`` joints rooted at ``root_index``.
    """

    joint_count: int
    bones: tuple[tuple[int, int], ...]
    root_index: int = 0
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        j = self.joint_count
        if j < 1:
            raise ValueError("joint_count must be positive")
        object.__setattr__(self, "bones", tuple((int(p), int(c)) for p, c in self.bones))
        if not (0 <= self.root_index < j):
            raise ValueError(f"root_index {self.root_index} outside [0, {j})")
        seen = set()
        for p, c in self.bones:
            if not (0 <= p < j and 0 <= c < j):
                raise ValueError(f"bone ({p}, {c}) references a joint outside [0, {j})")
            if p == c:
                raise ValueError(f"bone ({p}, {c}) connects a joint to itself")
            key = (min(p, c), max(p, c))
            if key in seen:
                raise ValueError(f"duplicate bone ({p}, {c})")
            seen.add(key)
        if len(self.bones) != j - 1:
            raise ValueError(f"{len(self.bones)} bones cannot span {j} joints as a tree")
        # connectivity: J-1 distinct edges span a tree iff all joints are reachable
        adj = [[] for _ in range(j)]
        for p, c in self.bones:
            adj[p].append(c)
            adj[c].append(p)
        stack, reached = [self.root_index], {self.root_index}
        while stack:
            for n in adj[stack.pop()]:
                if n not in reached:
                    reached.add(n)
                    stack.append(n)
        if len(reached) != j:
            raise ValueError("bone graph is not connected")
        if self.names is not None and len(self.names) != j:
            raise ValueError("names must have one entry per joint")

    @property
    def bone_count(self) -> int:
        return len(self.bones)

    @property
    def parent_indices(self) -> np.ndarray:
        return np.array([p for p, _ in self.bones], dtype=np.intp)

    @property
    def child_indices(self) -> np.ndarray:
        return np.array([c for _, c in self.bones], dtype=np.intp)

    def incidence(self) -> np.ndarray:
        """(J, B) signed incidence: +1 at the child joint, -1 at the parent."""
        m = np.zeros((self.joint_count, self.bone_count))
        for i, (p, c) in enumerate(self.bones):
            m[c, i] += 1.0
            m[p, i] -= 1.0
        return m


def default_topology() -> SkeletonTopology:
    """13-joint, 12-bone human tree rooted at the pelvis.

    Leg chains attach at the pelvis (pelvis-to-knee is the upper-leg bone), which
    keeps the tree at 13 joints while every held-constant distance is still a
    rigid anatomical one.
    """
    names = (
        "pelvis", "neck", "head",
        "l_shoulder", "l_elbow", "l_wrist",
        "r_shoulder", "r_elbow", "r_wrist",
        "l_knee", "l_ankle",
        "r_knee", "r_ankle",
    )
    bones = (
        (0, 1), (1, 2),
        (1, 3), (3, 4), (4, 5),
        (1, 6), (6, 7), (7, 8),
        (0, 9), (9, 10),
        (0, 11), (11, 12),
    )
    return SkeletonTopology(joint_count=13, bones=bones, root_index=0, names=names)


def topology_to_json(topo: SkeletonTopology, path: str | Path) -> None:
    doc = {"joints": topo.joint_count, "root": topo.root_index,
           "bones": [list(b) for b in topo.bones]}
    if topo.names is not None:
        doc["names"] = list(topo.names)
    Path(path).write_text(json.dumps(doc, indent=1))


def topology_from_json(path: str | Path) -> SkeletonTopology:
    doc = json.loads(Path(path).read_text())
    names = tuple(doc["names"]) if "names" in doc else None
    return SkeletonTopology(joint_count=doc["joints"],
                            bones=tuple((p, c) for p, c in doc["bones"]),
                            root_index=doc["root"], names=names)


@dataclass
class Pose3DSequence:
    """L x J x 3 world-frame joint coordinates in meters."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ShapeError(f"expected (L, J, 3), got {self.data.shape}")
        if self.data.shape[0] < 1:
            raise ShapeError("sequence must have at least one frame")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("3D coordinates must be finite")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def joints(self) -> int:
        return self.data.shape[1]


@dataclass
class Pose2DSequence:
    """L x J x 2 image coordinates in normalized units.

    ``mask`` marks observed joints (True = observed); ``confidence`` carries the
    upstream detector scores when available.
    """

    data: np.ndarray
    confidence: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ShapeError(f"expected (L, J, 2), got {self.data.shape}")
        if self.data.shape[0] < 1:
            raise ShapeError("sequence must have at least one frame")
        lj = self.data.shape[:2]
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=np.float64)
            if self.confidence.shape != lj:
                raise ShapeError(f"confidence shape {self.confidence.shape} != {lj}")
            if np.any((self.confidence < 0) | (self.confidence > 1)):
                raise ValueError("confidence values must lie in [0, 1]")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != lj:
                raise ShapeError(f"mask shape {self.mask.shape} != {lj}")
        observed = self.mask if self.mask is not None else np.ones(lj, dtype=bool)
        if not np.all(np.isfinite(self.data[observed])):
            raise ValueError("observed 2D coordinates must be finite")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def joints(self) -> int:
        return self.data.shape[1]

    def observed_mask(self) -> np.ndarray:
        if self.mask is not None:
            return self.mask
        return np.ones(self.data.shape[:2], dtype=bool)


def _pose_array(seq, expect_coords: int) -> np.ndarray:
    arr = np.asarray(getattr(seq, "data", seq), dtype=np.float64)
    if arr.ndim < 2 or arr.shape[-1] != expect_coords:
        raise ShapeError(f"expected trailing shape (J, {expect_coords}), got {arr.shape}")
    return arr


def bone_lengths(pose, topo: SkeletonTopology) -> np.ndarray:
    """Euclidean length of every bone for one pose (or a stack of poses).

    ``pose`` is (J, 3) or (..., J, 3); the result is (B,) or (..., B), ordered
    like ``topo.bones``.
    """
    arr = _pose_array(pose, 3)
    if arr.shape[-2] != topo.joint_count:
        raise ShapeError(f"pose has {arr.shape[-2]} joints, topology has {topo.joint_count}")
    diffs = arr[..., topo.child_indices, :] - arr[..., topo.parent_indices, :]
    return np.linalg.norm(diffs, axis=-1)


def bone_variance_loss(seq, topo: SkeletonTopology) -> float:
    """Mean over bones of the per-bone temporal variance of bone length.

    Population variance (divisor L). Zero iff every bone keeps a constant
    length across frames. Accepts (L, J, 3) or batched (..., L, J, 3); batched
    input returns one loss per leading index.
    """
    arr = _pose_array(seq, 3)
    lengths = bone_lengths(arr, topo)  # (..., L, B)
    dev = lengths - lengths.mean(axis=-2, keepdims=True)
    loss = np.mean(dev * dev, axis=(-2, -1))
    return float(loss) if loss.ndim == 0 else loss


def bone_variance_gradient(seq, topo: SkeletonTopology) -> np.ndarray:
    """Gradient of :func:`bone_variance_loss` w.r.t. every joint coordinate.

    Shape matches the input (..., L, J, 3). Zero-length bones contribute a
    zero direction rather than dividing by zero.
    """
    arr = _pose_array(seq, 3)
    if arr.shape[-2] != topo.joint_count:
        raise ShapeError(f"pose has {arr.shape[-2]} joints, topology has {topo.joint_count}")
    diffs = arr[..., topo.child_indices, :] - arr[..., topo.parent_indices, :]
    lengths = np.linalg.norm(diffs, axis=-1)  # (..., L, B)
    safe = np.where(lengths > 0.0, lengths, 1.0)
    unit = diffs / safe[..., None]
    unit = np.where((lengths > 0.0)[..., None], unit, 0.0)
    nframes, nbones = arr.shape[-3], topo.bone_count
    dloss_dlen = (2.0 / (nbones * nframes)) * (lengths - lengths.mean(axis=-2, keepdims=True))
    contrib = dloss_dlen[..., None] * unit  # (..., L, B, 3)
    # scatter +contrib to children, -contrib to parents via the incidence matrix
    return np.einsum("jb,...bc->...jc", topo.incidence(), contrib)
