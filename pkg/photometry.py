"""
Photometric Losses
SSIM, the SSIM/L1 photometric error and edge-aware depth smoothness.
"""
from dataclasses import dataclass

import numpy as np

import ndiff as nd
from ndiff import Tensor

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    """
    Weights of the combined training objective.

    Args:
        alpha: SSIM share of the photometric error
        eta: Smoothness weight
        xi: Generator (depth prior) weight
        tau: Discriminator weight
    """
    alpha: float = 0.85
    eta: float = 1e-3
    xi: float = 2.5e-4
    tau: float = 2.5e-4

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        for name in ("eta", "xi", "tau"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")


def _batched(image) -> Tensor:
    image = nd.as_tensor(image)
    if image.ndim != 4:
        raise nd.ShapeMismatchError(f"expected an N×C×H×W image, got {image.shape}")
    return image


def ssim_map(a, b) -> Tensor:
    """Per-pixel SSIM over 3×3 reflection-padded windows, averaged over channels (N×1×H×W)."""
    a = _batched(a)
    b = nd.as_tensor(b, like=a)
    if a.shape != b.shape:
        raise nd.ShapeMismatchError(f"ssim_map: shapes {a.shape} and {b.shape} differ")
    a_pad = nd.pad2d(a, 1, 1, 1, 1, mode="reflect")
    b_pad = nd.pad2d(b, 1, 1, 1, 1, mode="reflect")
    mu_a = nd.avg_pool2d(a_pad, 3)
    mu_b = nd.avg_pool2d(b_pad, 3)
    sigma_a = nd.avg_pool2d(a_pad * a_pad, 3) - mu_a * mu_a
    sigma_b = nd.avg_pool2d(b_pad * b_pad, 3) - mu_b * mu_b
    sigma_ab = nd.avg_pool2d(a_pad * b_pad, 3) - mu_a * mu_b
    numerator = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * sigma_ab + SSIM_C2)
    denominator = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (sigma_a + sigma_b + SSIM_C2)
    return nd.mean(numerator / denominator, axis=1, keepdims=True)


def photometric_error(target, recon, alpha: float = 0.85) -> Tensor:
    """
    Per-pixel (alpha/2)·clamp(1 − SSIM, 0, 2) + (1 − alpha)·channel-mean |target − recon|.

    Args:
        target: N×C×H×W target frame
        recon: N×C×H×W reconstruction
        alpha: SSIM share

    Returns:
        N×1×H×W error map
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    target = _batched(target)
    recon = nd.as_tensor(recon, like=target)
    if target.shape != recon.shape:
        raise nd.ShapeMismatchError(f"photometric_error: shapes {target.shape} and {recon.shape} differ")
    l1 = nd.mean(nd.abs_(target - recon), axis=1, keepdims=True)
    if alpha == 0.0:
        return l1
    structural = nd.clamp(1.0 - ssim_map(target, recon), 0.0, 2.0)
    return (alpha / 2.0) * structural + (1.0 - alpha) * l1


def smoothness_loss(depth, image, normalize: bool = True) -> Tensor:
    """
    Edge-aware smoothness of depth, weighted by exp(−|∂I|).

    With `normalize` the depth is divided by its per-sample spatial mean first,
    which makes the loss invariant to global depth scale.
    """
    depth = _batched(depth)
    image = nd.as_tensor(image, like=depth)
    if image.ndim != 4 or image.shape[0] != depth.shape[0] or image.shape[2:] != depth.shape[2:]:
        raise nd.ShapeMismatchError(f"smoothness_loss: depth {depth.shape} and image {image.shape} differ")
    if np.any(depth.data <= 0):
        raise ValueError("smoothness_loss: depth must be strictly positive")
    d = depth / nd.mean(depth, axis=(2, 3), keepdims=True) if normalize else depth

    grad_dx = nd.abs_(d[:, :, :, 1:] - d[:, :, :, :-1])
    grad_dy = nd.abs_(d[:, :, 1:, :] - d[:, :, :-1, :])
    image_dx = nd.mean(nd.abs_(image[:, :, :, 1:] - image[:, :, :, :-1]), axis=1, keepdims=True)
    image_dy = nd.mean(nd.abs_(image[:, :, 1:, :] - image[:, :, :-1, :]), axis=1, keepdims=True)
    return nd.mean(grad_dx * nd.exp(-image_dx)) + nd.mean(grad_dy * nd.exp(-image_dy))
