"""
Synthetic Scene Oracle
Ray-cast textured planar scenes with exact depth and pose, nighttime
degradations, and on-disk triplet datasets with manifests.
"""
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from tqdm import tqdm

import raster_io
from geometry import (Intrinsics, Pose6, invert_transform, matrix_to_pose, pixel_grid,
                      pose_to_matrix, relative_transform)
from pbr import ReferenceDepthSet

TEXTURE_LATTICE = 32
# textures are indexed by the direction a hit point is seen from this world point;
# it must stay behind every camera center (z >= -0.5 for random_trajectory)
TEXTURE_ORIGIN = np.array([0.0, 0.0, -1.0])
# angular lattice cell in radians; keeps each pixel under ~0.1 cell at 64 px wide
TEXTURE_CELL = 0.2
MIN_SCENE_DEPTH = 0.5
LAYOUTS = ("street", "open")
SPLITS = ("day", "night")
FRAME_INDICES = (-1, 0, 1)


class SceneError(ValueError):
    """Scene description cannot be rendered."""


class DatasetError(IOError):
    """Dataset directory cannot be written or read."""


@dataclass(frozen=True)
class Plane:
    """World-space plane n·X = offset with a procedural texture."""
    normal: Tuple[float, float, float]
    offset: float
    texture_seed: int = 0
    texture_scale: float = TEXTURE_CELL

    def __post_init__(self):
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise SceneError(f"Plane normal must be unit length, got {self.normal}")
        if self.texture_scale <= 0:
            raise SceneError(f"texture_scale must be positive, got {self.texture_scale}")


@dataclass
class SceneSpec:
    planes: List[Plane]
    intrinsics: Intrinsics
    height: int
    width: int
    background_depth: Optional[float] = 40.0
    background_seed: int = 0
    background_texture_scale: float = TEXTURE_CELL
    layout: str = "custom"

    def __post_init__(self):
        self.intrinsics.validate_for(self.height, self.width)
        if self.background_depth is not None and self.background_depth <= MIN_SCENE_DEPTH:
            raise SceneError(f"Background depth must exceed {MIN_SCENE_DEPTH} m, got {self.background_depth}")

    def all_planes(self) -> List[Plane]:
        planes = list(self.planes)
        if self.background_depth is not None:
            planes.append(Plane((0.0, 0.0, 1.0), self.background_depth,
                                self.background_seed, self.background_texture_scale))
        return planes


@dataclass(frozen=True)
class Spot:
    """A saturated disk standing in for a street light or headlight."""
    center: Tuple[float, float]
    radius: float
    intensity: float = 1.0


@dataclass
class DegradeParams:
    gamma: float = 2.2
    gain_jitter: Tuple[float, float] = (0.8, 1.2)
    noise_sigma: float = 0.01
    spot: Optional[Spot] = None


@dataclass
class Triplet:
    """Frames, depths and camera-to-world poses ordered (previous, target, next)."""
    frames: List[np.ndarray]
    depths: List[np.ndarray]
    poses: List[Pose6]
    relative: List[np.ndarray] = field(default_factory=list)


@lru_cache(maxsize=256)
def _lattice(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(0.2, 0.8, size=(3, TEXTURE_LATTICE, TEXTURE_LATTICE))


def texture_coords(points: np.ndarray, scale: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Lattice coordinates of 3×P world points: azimuth and elevation seen from
    TEXTURE_ORIGIN, in units of `scale` radians.

    Texture detail shrinks with distance from the origin, so receding ground
    and walls stay band-limited for any camera at or ahead of it: a pixel
    covers at most 1/(f·scale) lattice cells along the receding direction.
    """
    rel = points - TEXTURE_ORIGIN[:, None]
    return np.arctan2(rel[0], rel[2]) / scale, np.arctan2(rel[1], rel[2]) / scale


def sample_texture(seed: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear value noise on a periodic lattice; returns 3×P colors."""
    lattice = _lattice(seed)
    u0, v0 = np.floor(u), np.floor(v)
    fu, fv = u - u0, v - v0
    i0 = u0.astype(np.int64) % TEXTURE_LATTICE
    j0 = v0.astype(np.int64) % TEXTURE_LATTICE
    i1 = (i0 + 1) % TEXTURE_LATTICE
    j1 = (j0 + 1) % TEXTURE_LATTICE
    return ((1 - fv) * ((1 - fu) * lattice[:, j0, i0] + fu * lattice[:, j0, i1])
            + fv * ((1 - fu) * lattice[:, j1, i0] + fu * lattice[:, j1, i1]))


def render(scene: SceneSpec, pose: Pose6) -> Tuple[np.ndarray, np.ndarray]:
    """
    Ray-cast a scene from a camera-to-world pose.

    Args:
        scene: Planes, intrinsics and resolution
        pose: Camera pose in the world

    Returns:
        (H×W×3 float32 image, H×W float32 depth along the optical axis)
    """
    M = pose_to_matrix(pose)
    R, C = M[:3, :3], M[:3, 3]
    rays = scene.intrinsics.inverse() @ pixel_grid(scene.height, scene.width)
    directions = R @ rays
    count = directions.shape[1]
    best_t = np.full(count, np.inf)
    best_plane = np.full(count, -1)
    planes = scene.all_planes()
    for index, plane in enumerate(planes):
        normal = np.asarray(plane.normal, dtype=np.float64)
        denom = normal @ directions
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (plane.offset - normal @ C) / denom
        hit = (np.abs(denom) > 1e-12) & (t > 0) & (t < best_t)
        best_t[hit] = t[hit]
        best_plane[hit] = index
    if np.any(best_plane < 0):
        raise SceneError("render: some rays hit no plane and the scene has no background")
    if best_t.min() < MIN_SCENE_DEPTH:
        raise SceneError(f"render: geometry closer than {MIN_SCENE_DEPTH} m to the camera")

    points = C[:, None] + directions * best_t
    colors = np.zeros((3, count))
    for index, plane in enumerate(planes):
        selected = best_plane == index
        if not np.any(selected):
            continue
        u, v = texture_coords(points[:, selected], plane.texture_scale)
        colors[:, selected] = sample_texture(plane.texture_seed, u, v)
    image = np.clip(colors.T.reshape(scene.height, scene.width, 3), 0.0, 1.0)
    depth = best_t.reshape(scene.height, scene.width)
    return image.astype(np.float32), depth.astype(np.float32)


def random_scene(seed: int, layout: str = "street", height: int = 64, width: int = 64,
                 intrinsics: Optional[Intrinsics] = None) -> SceneSpec:
    """A ground plane, optional side walls and a textured background, all drawn from `seed`."""
    if layout not in LAYOUTS:
        raise SceneError(f"Unknown layout '{layout}', expected one of {LAYOUTS}")
    rng = np.random.default_rng(seed)
    texture_seeds = rng.integers(0, 2 ** 31, size=4)
    camera_height = rng.uniform(1.2, 1.8)
    planes = [Plane((0.0, -1.0, 0.0), -camera_height, int(texture_seeds[0]))]
    if layout == "street":
        planes.append(Plane((1.0, 0.0, 0.0), -rng.uniform(2.5, 4.0), int(texture_seeds[1])))
        planes.append(Plane((1.0, 0.0, 0.0), rng.uniform(2.5, 4.0), int(texture_seeds[2])))
        background = rng.uniform(25.0, 40.0)
    else:
        background = rng.uniform(30.0, 45.0)
    return SceneSpec(planes=planes, intrinsics=intrinsics or Intrinsics.default_for(height, width),
                     height=height, width=width, background_depth=background,
                     background_seed=int(texture_seeds[3]), layout=layout)


def random_trajectory(seed: int) -> Tuple[Pose6, Pose6]:
    """Center pose and per-frame motion for one triplet."""
    rng = np.random.default_rng(seed)
    center = Pose6((0.0, rng.uniform(-0.05, 0.05), 0.0),
                   (rng.uniform(-0.3, 0.3), 0.0, rng.uniform(0.0, 1.5)))
    motion = Pose6((0.0, rng.uniform(-0.01, 0.01), 0.0),
                   (0.0, 0.0, rng.uniform(0.2, 0.5)))
    return center, motion


def render_triplet(scene: SceneSpec, center_pose: Pose6, motion: Pose6) -> Triplet:
    """Render previous/target/next frames; source poses are center·motion^∓1."""
    center = pose_to_matrix(center_pose)
    step = pose_to_matrix(motion)
    poses = [matrix_to_pose(center @ invert_transform(step)), center_pose, matrix_to_pose(center @ step)]
    frames, depths = [], []
    for pose in poses:
        image, depth = render(scene, pose)
        frames.append(image)
        depths.append(depth)
    relative = [relative_transform(center, pose_to_matrix(poses[0])),
                relative_transform(center, pose_to_matrix(poses[2]))]
    return Triplet(frames, depths, poses, relative)


def degrade(frame: np.ndarray, params: DegradeParams, frame_seed: int) -> np.ndarray:
    """Darken, rescale by a per-frame gain, add noise and an optional light spot."""
    rng = np.random.default_rng(frame_seed)
    low, high = params.gain_jitter
    gain = rng.uniform(low, high) if high > low else low
    out = gain * np.power(np.asarray(frame, dtype=np.float64), params.gamma)
    if params.noise_sigma > 0:
        out = out + rng.normal(0.0, params.noise_sigma, size=out.shape)
    if params.spot is not None:
        height, width = out.shape[:2]
        ys, xs = np.mgrid[0:height, 0:width]
        cx, cy = params.spot.center
        disk = (xs - cx) ** 2 + (ys - cy) ** 2 <= params.spot.radius ** 2
        out[disk] = params.spot.intensity
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class DatasetConfig:
    num_triplets: int = 50
    num_day_triplets: int = 0
    height: int = 64
    width: int = 64
    seed: int = 0
    layout: str = "street"
    reference_layout: str = "street"
    gamma: float = 2.2
    gain_low: float = 0.8
    gain_high: float = 1.2
    noise_sigma: float = 0.01
    spot_probability: float = 0.3

    def __post_init__(self):
        if self.num_triplets <= 0:
            raise DatasetError(f"num_triplets must be positive, got {self.num_triplets}")
        if self.height % 16 or self.width % 16:
            raise DatasetError(f"Resolution must be a multiple of 16, got {self.height}x{self.width}")
        for layout in (self.layout, self.reference_layout):
            if layout not in LAYOUTS:
                raise DatasetError(f"Unknown layout '{layout}', expected one of {LAYOUTS}")

    @property
    def day_count(self) -> int:
        return self.num_day_triplets or self.num_triplets


@dataclass
class ManifestEntry:
    frame_index: int
    intrinsics: Intrinsics
    pose: Pose6
    png: str
    pfm: str


@dataclass
class TripletManifest:
    scene_seed: int
    layout: str
    height: int
    width: int
    entries: List[ManifestEntry]

    def to_text(self) -> str:
        lines = [f"# scene_seed {self.scene_seed} layout {self.layout} height {self.height} width {self.width}"]
        for e in self.entries:
            values = list(e.intrinsics.as_tuple()) + list(e.pose.rotation) + list(e.pose.translation)
            lines.append(" ".join([str(e.frame_index)] + [repr(float(v)) for v in values] + [e.png, e.pfm]))
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str, source: str = "manifest") -> "TripletManifest":
        lines = [line for line in text.splitlines() if line.strip()]
        try:
            header = lines[0].lstrip("#").split()
            meta = dict(zip(header[0::2], header[1::2]))
            entries = []
            for line in lines[1:]:
                parts = line.split()
                if len(parts) != 13:
                    raise ValueError(f"expected 13 fields, got {len(parts)}")
                numbers = [float(p) for p in parts[1:11]]
                entries.append(ManifestEntry(int(parts[0]), Intrinsics(*numbers[:4]),
                                             Pose6(tuple(numbers[4:7]), tuple(numbers[7:10])),
                                             parts[11], parts[12]))
            manifest = cls(int(meta["scene_seed"]), meta["layout"], int(meta["height"]),
                           int(meta["width"]), entries)
        except (IndexError, KeyError, ValueError) as e:
            raise DatasetError(f"{source}: malformed manifest ({e})") from e
        if sorted(e.frame_index for e in manifest.entries) != list(FRAME_INDICES):
            raise DatasetError(f"{source}: manifest must list frames -1, 0 and 1")
        return manifest


def load_manifest(triplet_dir) -> TripletManifest:
    path = Path(triplet_dir) / "manifest.txt"
    if not path.exists():
        raise DatasetError(f"Missing manifest: {path}")
    return TripletManifest.parse(path.read_text(), str(path))


def rerender_from_manifest(triplet_dir) -> List[np.ndarray]:
    """Rebuild the scene from the manifest seed and render every listed pose."""
    manifest = load_manifest(triplet_dir)
    frames = []
    for entry in sorted(manifest.entries, key=lambda e: e.frame_index):
        scene = random_scene(manifest.scene_seed, manifest.layout, manifest.height, manifest.width,
                             entry.intrinsics)
        frames.append(render(scene, entry.pose)[0])
    return frames


def _night_params(cfg: DatasetConfig, rng: np.random.Generator) -> DegradeParams:
    spot = None
    if rng.uniform() < cfg.spot_probability:
        spot = Spot(center=(rng.uniform(0, cfg.width - 1), rng.uniform(0, cfg.height * 0.6)),
                    radius=rng.uniform(0.05, 0.12) * cfg.width)
    return DegradeParams(gamma=cfg.gamma, gain_jitter=(cfg.gain_low, cfg.gain_high),
                         noise_sigma=cfg.noise_sigma, spot=spot)


def _write_triplet(directory: Path, triplet: Triplet, frames: List[np.ndarray], scene: SceneSpec,
                   scene_seed: int):
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for slot, (frame_index, frame, depth, pose) in enumerate(
            zip(FRAME_INDICES, frames, triplet.depths, triplet.poses)):
        png, pfm = f"frame_{slot}.png", f"depth_{slot}.pfm"
        raster_io.write_png(directory / png, frame)
        raster_io.write_pfm(directory / pfm, depth)
        entries.append(ManifestEntry(frame_index, scene.intrinsics, pose, png, pfm))
    manifest = TripletManifest(scene_seed, scene.layout, scene.height, scene.width, entries)
    (directory / "manifest.txt").write_text(manifest.to_text())


def make_dataset(cfg: DatasetConfig, out_dir, progress: bool = True) -> Path:
    """
    Write day and night triplet splits plus the reference depth set.

    Layout: out/dataset.json, out/day/NNNNNN/, out/night/NNNNNN/ and
    out/references/. Every triplet directory holds frame_0..2.png,
    depth_0..2.pfm and manifest.txt.

    Args:
        cfg: Counts, seeds, resolution and degradation settings
        out_dir: Output directory
        progress: Show a progress bar

    Returns:
        Path of the dataset root
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "dataset.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))
    except OSError as e:
        raise DatasetError(f"Cannot write dataset to {out}: {e}") from e

    references = []
    jobs = [("day", i) for i in range(cfg.day_count)] + [("night", i) for i in range(cfg.num_triplets)]
    for split, index in tqdm(jobs, desc="Rendering", disable=not progress):
        split_code = SPLITS.index(split)
        scene_seed = derive_seed(cfg.seed, split_code, index)
        layout = cfg.reference_layout if split == "day" else cfg.layout
        scene = random_scene(scene_seed, layout, cfg.height, cfg.width)
        center, motion = random_trajectory(derive_seed(cfg.seed, split_code, index, 1))
        triplet = render_triplet(scene, center, motion)
        frames = triplet.frames
        if split == "night":
            params = _night_params(cfg, np.random.default_rng(derive_seed(cfg.seed, split_code, index, 2)))
            frames = [degrade(frame, params, derive_seed(cfg.seed, split_code, index, 3, slot))
                      for slot, frame in enumerate(frames)]
        else:
            references.append(triplet.depths[1])
        try:
            _write_triplet(out / split / f"{index:06d}", triplet, frames, scene, scene_seed)
        except OSError as e:
            raise DatasetError(f"Cannot write triplet {split}/{index:06d}: {e}") from e

    ReferenceDepthSet(references, seed=cfg.seed).save(out / "references")
    return out
