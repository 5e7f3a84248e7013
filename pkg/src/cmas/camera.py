"""Pinhole cameras, the virtual viewing rig, and projection operators.

World frame is z-up. A view stores the world-to-camera rotation R and
translation t (camera-frame point = R @ x + t, camera center = -R.T @ t).
Image coordinates are normalized units: image = pp + focal * (x_c, y_c) / z_c.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ProjectionError, ShapeError
from .skeleton import Pose2DSequence, Pose3DSequence, _pose_array

_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class CameraView:
    rotation: np.ndarray       # (3, 3) world -> camera
    translation: np.ndarray    # (3,)
    focal: float
    principal_point: np.ndarray  # (2,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        pp = np.asarray(self.principal_point, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,) or pp.shape != (2,):
            raise ShapeError("camera parameters have wrong shapes")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "principal_point", pp)

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class CameraRig:
    views: tuple[CameraView, ...]
    reference_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))
        if len(self.views) < 1:
            raise ValueError("a rig needs at least one view")
        if not (0 <= self.reference_index < len(self.views)):
            raise ValueError("reference_index out of range")

    def __len__(self) -> int:
        return len(self.views)

    @property
    def reference_view(self) -> CameraView:
        return self.views[self.reference_index]

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(V,3,3) rotations, (V,3) translations, (V,) focals, (V,2) principal points."""
        cached = getattr(self, "_stacked", None)
        if cached is None:
            cached = (np.stack([v.rotation for v in self.views]),
                      np.stack([v.translation for v in self.views]),
                      np.array([v.focal for v in self.views]),
                      np.stack([v.principal_point for v in self.views]))
            object.__setattr__(self, "_stacked", cached)
        return cached


def _look_at(center_world: np.ndarray, camera_pos: np.ndarray) -> np.ndarray:
    """World-to-camera rotation with z toward ``center_world`` and image-y pointing down."""
    z = center_world - camera_pos
    z = z / np.linalg.norm(z)
    x = np.cross(z, _UP)
    nx = np.linalg.norm(x)
    if nx < 1e-12:  # looking straight up/down; pick an arbitrary horizontal right
        x = np.array([1.0, 0.0, 0.0])
    else:
        x = x / nx
    y = np.cross(z, x)
    return np.stack([x, y, z])


def make_rig(views: int,
             distance: float = 7.0,
             elevation: float = math.pi / 16,
             subject_center=(0.0, 0.0, 0.0),
             reference_index: int = 0,
             focal: float | None = None) -> CameraRig:
    """Ring of ``views`` cameras around ``subject_center``.

    All cameras sit at the same distance and elevation; azimuths are evenly
    spaced at 2*pi*k/views with view 0 at azimuth 0, and every camera looks at
    the subject center. Focal defaults to ``distance`` so one image unit spans
    roughly one meter at the subject.
    """
    if views < 1:
        raise ValueError("views must be >= 1")
    center = np.asarray(subject_center, dtype=np.float64)
    f = float(distance) if focal is None else float(focal)
    cams = []
    for k in range(views):
        azimuth = 2.0 * math.pi * k / views
        offset = np.array([math.cos(elevation) * math.cos(azimuth),
                           math.cos(elevation) * math.sin(azimuth),
                           math.sin(elevation)])
        pos = center + distance * offset
        rot = _look_at(center, pos)
        cams.append(CameraView(rotation=rot, translation=-rot @ pos,
                               focal=f, principal_point=np.zeros(2)))
    return CameraRig(views=tuple(cams), reference_index=reference_index)


def _camera_frame(points: np.ndarray, view: CameraView) -> np.ndarray:
    return np.einsum("ij,...j->...i", view.rotation, points) + view.translation


def project(points, view: CameraView, min_depth: float | None = None):
    """Perspective projection of world points onto a view.

    ``points`` may be a :class:`Pose3DSequence` (returns a
    :class:`Pose2DSequence`) or any (..., 3) array (returns (..., 2)).
    Nonpositive camera-frame depth raises :class:`ProjectionError` naming the
    first offending index, unless ``min_depth`` is given, in which case depth
    is clamped to it instead.
    """
    arr = _pose_array(points, 3)
    cam = _camera_frame(arr, view)
    z = cam[..., 2]
    if min_depth is None:
        if np.any(z <= 0.0):
            idx = tuple(int(i) for i in np.unravel_index(int(np.argmax(z <= 0.0)), z.shape))
            raise ProjectionError(f"point at index {idx} has nonpositive camera depth {z[idx]:.4g}")
    else:
        z = np.maximum(z, min_depth)
    img = view.principal_point + view.focal * cam[..., :2] / z[..., None]
    if isinstance(points, Pose3DSequence):
        return Pose2DSequence(data=img)
    return img


def project_gradient(points, view: CameraView, residual: np.ndarray,
                     min_depth: float | None = None) -> np.ndarray:
    """J^T @ residual, where J is the projection Jacobian per point.

    ``residual`` has shape (..., 2) matching the projected points; the result
    has shape (..., 3). With ``min_depth`` set, clamped points get zero
    depth-derivative (the clamp is locally constant in z).
    """
    arr = _pose_array(points, 3)
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape != arr.shape[:-1] + (2,):
        raise ShapeError(f"residual shape {residual.shape} does not match points {arr.shape}")
    cam = _camera_frame(arr, view)
    z = cam[..., 2]
    if min_depth is None:
        if np.any(z <= 0.0):
            idx = tuple(int(i) for i in np.unravel_index(int(np.argmax(z <= 0.0)), z.shape))
            raise ProjectionError(f"point at index {idx} has nonpositive camera depth {z[idx]:.4g}")
        zc = z
        live = None
    else:
        zc = np.maximum(z, min_depth)
        live = z > min_depth
    f_over_z = view.focal / zc
    gx = f_over_z * residual[..., 0]
    gy = f_over_z * residual[..., 1]
    gz = -f_over_z / zc * (cam[..., 0] * residual[..., 0] + cam[..., 1] * residual[..., 1])
    if live is not None:
        gz = np.where(live, gz, 0.0)
    grad_cam = np.stack([gx, gy, gz], axis=-1)
    return np.einsum("ji,...j->...i", view.rotation, grad_cam)


def project_noise(eps3d: np.ndarray, view: CameraView) -> np.ndarray:
    """Rotate 3D noise into the camera frame and drop depth.

    Rotation preserves isotropic-Gaussian marginals exactly, so standard-normal
    input yields standard-normal per-view noise (unlike perspective division).
    """
    eps3d = np.asarray(eps3d, dtype=np.float64)
    rotated = np.einsum("ij,...j->...i", view.rotation, eps3d)
    return rotated[..., :2]


def backproject(points2d, view: CameraView, depth: float):
    """Invert projection along each pixel's ray to a constant camera-frame depth."""
    arr = _pose_array(points2d, 2)
    unit = (arr - view.principal_point) / view.focal
    cam = np.concatenate([unit * depth, np.full(arr.shape[:-1] + (1,), float(depth))], axis=-1)
    world = np.einsum("ji,...j->...i", view.rotation, cam - view.translation)
    if isinstance(points2d, Pose2DSequence):
        return Pose3DSequence(data=world)
    return world


def rig_to_json(rig: CameraRig, path: str | Path) -> None:
    doc = {"views": [{"R": [float(x) for x in v.rotation.ravel()],
                      "t": [float(x) for x in v.translation],
                      "f": float(v.focal),
                      "pp": [float(x) for x in v.principal_point]}
                     for v in rig.views],
           "reference_index": rig.reference_index}
    Path(path).write_text(json.dumps(doc))


def rig_from_json(path: str | Path) -> CameraRig:
    doc = json.loads(Path(path).read_text())
    views = tuple(CameraView(rotation=np.array(v["R"]).reshape(3, 3),
                             translation=np.array(v["t"]),
                             focal=v["f"],
                             principal_point=np.array(v["pp"]))
                  for v in doc["views"])
    return CameraRig(views=views, reference_index=doc["reference_index"])
