"""
Priors-Based Regularization
Scale-normalized depth, coordinate encodings, a small patch discriminator and
least-squares adversarial losses against unpaired reference depths.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

import ndiff as nd
import raster_io
from ndiff import Tensor

DISCRIMINATOR_SLOPE = 0.2
DISCRIMINATOR_WIDTHS = (16, 32)
DISCRIMINATOR_STRIDES = (2, 2, 1)


class PBRError(ValueError):
    """Invalid input to the depth prior."""


def coord_image(height: int, width: int) -> np.ndarray:
    """H×W×2 coordinates: channel 0 = x/(W−1), channel 1 = y/(H−1)."""
    if height < 2 or width < 2:
        raise PBRError(f"coord_image: need at least 2x2, got {height}x{width}")
    xs = np.arange(width) / (width - 1)
    ys = np.arange(height) / (height - 1)
    grid_x, grid_y = np.meshgrid(xs, ys)
    return np.stack([grid_x, grid_y], axis=-1).astype(np.float32)


def normalize_depth(depth):
    """Divide by the spatial mean so every map has mean 1. Works on tensors (N×1×H×W) and arrays."""
    values = depth.data if isinstance(depth, Tensor) else np.asarray(depth)
    if values.size == 0 or not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise PBRError("normalize_depth: depth must be finite and strictly positive")
    if isinstance(depth, Tensor):
        return depth / nd.mean(depth, axis=(-2, -1), keepdims=True)
    return values / values.mean(axis=(-2, -1), keepdims=True)


@dataclass
class DiscriminatorWeights:
    """Parameters of the three-layer 4×4 patch discriminator."""
    params: Dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def initialize(cls, seed: int = 0, widths=DISCRIMINATOR_WIDTHS, std: float = 0.02) -> "DiscriminatorWeights":
        rng = np.random.default_rng(seed)
        channels = [3] + list(widths) + [1]
        params = {}
        for i, (c_in, c_out) in enumerate(zip(channels[:-1], channels[1:]), start=1):
            params[f"w{i}"] = Tensor(rng.normal(0.0, std, size=(c_out, c_in, 4, 4)), requires_grad=True)
            params[f"b{i}"] = Tensor(np.zeros(c_out), requires_grad=True)
        return cls(params)

    @classmethod
    def zeros(cls, widths=DISCRIMINATOR_WIDTHS) -> "DiscriminatorWeights":
        weights = cls.initialize(0, widths)
        for t in weights.params.values():
            t.data[...] = 0.0
        return weights

    def parameters(self) -> List[Tensor]:
        return [self.params[k] for k in sorted(self.params)]


def discriminator_scores(x, params: Dict[str, Tensor]) -> Tensor:
    """Raw score map for an N×3×H×W input."""
    h = nd.leaky_relu(nd.conv2d(x, params["w1"], params["b1"], stride=DISCRIMINATOR_STRIDES[0], padding=1),
                      DISCRIMINATOR_SLOPE)
    h = nd.leaky_relu(nd.conv2d(h, params["w2"], params["b2"], stride=DISCRIMINATOR_STRIDES[1], padding=1),
                      DISCRIMINATOR_SLOPE)
    return nd.conv2d(h, params["w3"], params["b3"], stride=DISCRIMINATOR_STRIDES[2], padding=1)


def discriminator_output_size(size: int) -> int:
    for stride in DISCRIMINATOR_STRIDES:
        size = (size + 2 - 4) // stride + 1
    return size


def discriminator_forward(depth_norm, coords: np.ndarray, weights: DiscriminatorWeights) -> Tensor:
    """
    Score normalized depth maps with their pixel coordinates attached.

    Args:
        depth_norm: N×1×H×W normalized depth
        coords: H×W×2 coordinate image
        weights: Discriminator parameters

    Returns:
        N×1×h×w patch scores
    """
    depth_norm = nd.as_tensor(depth_norm)
    if depth_norm.ndim == 2:
        depth_norm = nd.reshape(depth_norm, (1, 1) + depth_norm.shape)
    coords = np.asarray(coords)
    if depth_norm.shape[2:] != coords.shape[:2]:
        raise nd.ShapeMismatchError(
            f"discriminator_forward: depth {depth_norm.shape[2:]} and coords {coords.shape[:2]} differ")
    n = depth_norm.shape[0]
    coord_channels = np.broadcast_to(coords.transpose(2, 0, 1)[None], (n, 2) + coords.shape[:2])
    x = nd.concat([nd.as_tensor(np.ascontiguousarray(coord_channels), like=depth_norm), depth_norm], axis=1)
    return discriminator_scores(x, weights.params)


def lsgan_discriminator_loss(scores_real, scores_fake) -> Tensor:
    """½·mean((real − 1)²) + ½·mean(fake²)"""
    real = nd.as_tensor(scores_real)
    fake = nd.as_tensor(scores_fake, like=real)
    return 0.5 * nd.mean((real - 1.0) * (real - 1.0)) + 0.5 * nd.mean(fake * fake)


def lsgan_generator_loss(scores_fake) -> Tensor:
    """½·mean((fake − 1)²)"""
    fake = nd.as_tensor(scores_fake)
    return 0.5 * nd.mean((fake - 1.0) * (fake - 1.0))


@dataclass
class ReferenceDepthSet:
    """Unpaired reference depth maps with a seeded sampling order."""
    depths: List[np.ndarray]
    seed: int = 0

    def __post_init__(self):
        if not self.depths:
            raise PBRError("Reference depth set is empty")
        shape = self.depths[0].shape
        for depth in self.depths:
            if depth.shape != shape:
                raise PBRError(f"Reference depths differ in size: {shape} vs {depth.shape}")
            if np.any(depth <= 0):
                raise PBRError("Reference depths must be strictly positive")

    def __len__(self):
        return len(self.depths)

    @property
    def shape(self):
        return self.depths[0].shape

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Draw `count` maps with replacement as an N×1×H×W float32 batch."""
        picks = rng.integers(0, len(self.depths), size=count)
        return np.stack([self.depths[i] for i in picks])[:, None].astype(np.float32)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = []
        for i, depth in enumerate(self.depths):
            name = f"reference_{i:06d}.pfm"
            raster_io.write_pfm(directory / name, depth)
            names.append(name)
        (directory / "manifest.txt").write_text(f"seed {self.seed}\n" + "\n".join(names) + "\n")

    @classmethod
    def load(cls, directory) -> "ReferenceDepthSet":
        directory = Path(directory)
        manifest = directory / "manifest.txt"
        if not manifest.exists():
            raise PBRError(f"No reference manifest in {directory}")
        lines = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
        if not lines or not lines[0].startswith("seed "):
            raise PBRError(f"{manifest}: first line must be 'seed <n>'")
        seed = int(lines[0].split()[1])
        return cls([raster_io.read_pfm(directory / name) for name in lines[1:]], seed=seed)
