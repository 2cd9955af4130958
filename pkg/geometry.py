"""
Camera Geometry
Pinhole intrinsics, axis-angle poses, reprojection and differentiable bilinear
sampling that together synthesize a target view from a source frame.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

import ndiff as nd
from ndiff import Tensor

# reprojected points at or below this depth (meters) are flagged invalid
DEPTH_EPS = 1e-6
# projected coordinates this close outside the image still count as inside
BOUNDS_TOL = 1e-4
# keeps the axis-angle norm differentiable at zero rotation
ANGLE_EPS = 1e-12


class GeometryError(ValueError):
    """Invalid camera or pose parameters."""


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera matrix K. Pixel centers sit at integer coordinates."""
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        values = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(values)):
            raise GeometryError(f"Intrinsics must be finite, got {values}")
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @classmethod
    def default_for(cls, height: int, width: int) -> "Intrinsics":
        """Roughly 64° horizontal field of view, principal point at the image center."""
        return cls(fx=0.8 * width, fy=0.8 * width, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0)

    def validate_for(self, height: int, width: int):
        if not (0 <= self.cx < width and 0 <= self.cy < height):
            raise GeometryError(
                f"Principal point ({self.cx}, {self.cy}) outside a {width}x{height} image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def inverse(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.fx, self.fy, self.cx, self.cy)


@dataclass(frozen=True)
class Pose6:
    """Axis-angle rotation (radians) and translation (meters)."""
    rotation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def from_vector(cls, vector) -> "Pose6":
        v = np.asarray(vector, dtype=np.float64).reshape(6)
        return cls(tuple(float(x) for x in v[:3]), tuple(float(x) for x in v[3:]))

    def vector(self) -> np.ndarray:
        return np.array(list(self.rotation) + list(self.translation), dtype=np.float64)


def pose_vector_to_matrix(pose: Tensor) -> Tensor:
    """
    Differentiable Rodrigues expansion of N×6 pose vectors to N×4×4 transforms.

    Args:
        pose: N×6 tensor (rx, ry, rz, tx, ty, tz)

    Returns:
        N×4×4 rigid transforms
    """
    pose = nd.as_tensor(pose)
    if pose.ndim != 2 or pose.shape[1] != 6:
        raise nd.ShapeMismatchError(f"pose_vector_to_matrix: expected N×6, got {pose.shape}")
    n = pose.shape[0]
    rot = pose[:, 0:3]
    angle = nd.sqrt(nd.sum_(rot * rot, axis=1, keepdims=True) + ANGLE_EPS)
    axis = rot / angle
    ax, ay, az = axis[:, 0:1], axis[:, 1:2], axis[:, 2:3]
    c = nd.cos(angle)
    s = nd.sin(angle)
    C = 1.0 - c

    rows = [
        [c + ax * ax * C, ax * ay * C - az * s, ax * az * C + ay * s, pose[:, 3:4]],
        [ay * ax * C + az * s, c + ay * ay * C, ay * az * C - ax * s, pose[:, 4:5]],
        [az * ax * C - ay * s, az * ay * C + ax * s, c + az * az * C, pose[:, 5:6]],
    ]
    bottom = nd.as_tensor(np.tile(np.array([[0.0, 0.0, 0.0, 1.0]]), (n, 1)), like=pose)
    stacked = [nd.concat(row, axis=1) for row in rows] + [bottom]
    return nd.stack(stacked, axis=1)


def pose_to_matrix(pose: Pose6) -> np.ndarray:
    """Expand a Pose6 to a 4×4 rigid transform in 64-bit."""
    vector = pose.vector()
    if not np.all(np.isfinite(vector)):
        raise GeometryError(f"Pose has non-finite components: {vector.tolist()}")
    if np.linalg.norm(vector[:3]) >= np.pi:
        raise GeometryError(f"Rotation magnitude must be below pi, got {np.linalg.norm(vector[:3])}")
    with nd.double_precision():
        return pose_vector_to_matrix(nd.Tensor(vector[None])).data[0]


def matrix_to_pose(matrix: np.ndarray) -> Pose6:
    """Logarithm of a rigid transform back to axis-angle plus translation."""
    matrix = np.asarray(matrix, dtype=np.float64)
    R = matrix[:3, :3]
    cos_angle = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = float(np.arccos(cos_angle))
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-8:
        rotation = w / 2.0
    else:
        rotation = w * angle / (2.0 * np.sin(angle))
    return Pose6.from_vector(np.concatenate([rotation, matrix[:3, 3]]))


def invert_transform(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    out = np.eye(4)
    out[:3, :3] = matrix[:3, :3].T
    out[:3, 3] = -matrix[:3, :3].T @ matrix[:3, 3]
    return out


def relative_transform(target_pose: np.ndarray, source_pose: np.ndarray) -> np.ndarray:
    """T_{t→s} from camera-to-world poses: maps target camera points into the source camera."""
    return invert_transform(source_pose) @ np.asarray(target_pose, dtype=np.float64)


def pixel_grid(height: int, width: int) -> np.ndarray:
    """Homogeneous pixel coordinates, 3×(H·W), row-major."""
    xs = np.tile(np.arange(width, dtype=np.float64), height)
    ys = np.repeat(np.arange(height, dtype=np.float64), width)
    return np.stack([xs, ys, np.ones_like(xs)])


def reproject(depth, K: Intrinsics, T) -> Tuple[Tensor, np.ndarray]:
    """
    Backproject target pixels with depth, move them by T and project into the source.

    A pixel is valid when its point lies in front of the source camera and
    projects inside [0, W−1]×[0, H−1] widened by BOUNDS_TOL px on every side.
    Projections past that margin are invalid.

    Args:
        depth: N×1×H×W (or H×W) positive depth
        K: Camera intrinsics
        T: 4×4 or N×4×4 target-to-source transform

    Returns:
        (coords N×H×W×2 tensor of (x, y), valid N×H×W 0/1 array)
    """
    depth = nd.as_tensor(depth)
    if depth.ndim == 2:
        depth = nd.reshape(depth, (1, 1) + depth.shape)
    if depth.ndim != 4 or depth.shape[1] != 1:
        raise nd.ShapeMismatchError(f"reproject: depth must be N×1×H×W, got {depth.shape}")
    n, _, height, width = depth.shape
    T = nd.as_tensor(T, like=depth)
    if T.ndim == 2:
        T = nd.reshape(T, (1, 4, 4))
    if T.shape[-2:] != (4, 4) or T.shape[0] not in (1, n):
        raise nd.ShapeMismatchError(f"reproject: transform shape {T.shape} does not fit batch {n}")

    dtype = depth.data.dtype
    rays = (K.inverse() @ pixel_grid(height, width)).astype(dtype)
    points = nd.reshape(depth, (n, 1, height * width)) * rays[None]
    ones = np.ones((n, 1, height * width), dtype=dtype)
    homogeneous = nd.concat([points, ones], axis=1)
    moved = nd.matmul(T, homogeneous)

    projection = np.zeros((1, 3, 4), dtype=dtype)
    projection[0, :, :3] = K.matrix()
    pixels = nd.matmul(projection, moved)
    z = pixels[:, 2:3, :]
    in_front = z.data[:, 0, :] > DEPTH_EPS
    xy = pixels[:, 0:2, :] / nd.clamp(z, lo=DEPTH_EPS)
    coords = nd.transpose(nd.reshape(xy, (n, 2, height, width)), (0, 2, 3, 1))

    x, y = coords.data[..., 0], coords.data[..., 1]
    inside = ((x >= -BOUNDS_TOL) & (x <= width - 1 + BOUNDS_TOL)
              & (y >= -BOUNDS_TOL) & (y <= height - 1 + BOUNDS_TOL))
    valid = (in_front.reshape(n, height, width) & inside).astype(dtype)
    return coords, valid


def bilinear_sample(source, coords) -> Tensor:
    """
    Sample a source image at continuous (x, y) coordinates.

    Out-of-range coordinates are clamped to the border; the gradient with
    respect to a clamped coordinate is zero.

    Args:
        source: N×C×H×W tensor
        coords: N×Ho×Wo×2 tensor of (x, y)

    Returns:
        N×C×Ho×Wo tensor
    """
    source = nd.as_tensor(source)
    coords = nd.as_tensor(coords, like=source)
    if source.ndim != 4 or coords.ndim != 4 or coords.shape[-1] != 2 or coords.shape[0] != source.shape[0]:
        raise nd.ShapeMismatchError(
            f"bilinear_sample: source {source.shape} incompatible with coords {coords.shape}")
    n, channels, height, width = source.shape
    out_h, out_w = coords.shape[1:3]
    x = coords.data[..., 0]
    y = coords.data[..., 1]
    xc = np.clip(x, 0, width - 1)
    yc = np.clip(y, 0, height - 1)
    x0 = np.clip(np.floor(xc), 0, max(width - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(yc), 0, max(height - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    wx = (xc - x0)[:, None]
    wy = (yc - y0)[:, None]

    flat = source.data.reshape(n, channels, height * width)

    def pixel_index(yi, xi):
        return np.broadcast_to((yi * width + xi).reshape(n, 1, -1), (n, channels, out_h * out_w))

    corners = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
    indices = [pixel_index(yi, xi) for yi, xi in corners]
    v00, v01, v10, v11 = [np.take_along_axis(flat, idx, axis=2).reshape(n, channels, out_h, out_w)
                          for idx in indices]
    out = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)

    def backward(g):
        grad_source = None
        if source.requires_grad:
            weights = [(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx]
            base = (np.arange(n)[:, None, None] * channels + np.arange(channels)[None, :, None]) * (height * width)
            linear = np.concatenate([(base + idx).ravel() for idx in indices])
            values = np.concatenate([(g * w).ravel() for w in weights])
            grad_source = np.bincount(linear, weights=values, minlength=n * channels * height * width)
            grad_source = grad_source.reshape(source.shape).astype(source.data.dtype)
        grad_coords = None
        if coords.requires_grad:
            dx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
            dy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
            gx = (g * dx).sum(axis=1) * ((x >= 0) & (x <= width - 1))
            gy = (g * dy).sum(axis=1) * ((y >= 0) & (y <= height - 1))
            grad_coords = np.stack([gx, gy], axis=-1).astype(coords.data.dtype)
        return grad_source, grad_coords

    return nd.apply_op("bilinear_sample", out.astype(np.result_type(source.data, coords.data)),
                       (source, coords), backward)


def synthesize_view(source, depth, K: Intrinsics, T) -> Tuple[Tensor, np.ndarray]:
    """Reconstruct the target view from a source frame: reproject then sample."""
    source = nd.as_tensor(source)
    coords, valid = reproject(depth, K, T)
    if coords.shape[0] != source.shape[0]:
        raise nd.ShapeMismatchError(
            f"synthesize_view: {source.shape[0]} source frames for {coords.shape[0]} depth maps")
    return bilinear_sample(source, coords), valid
