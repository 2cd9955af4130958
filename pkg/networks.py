"""
Toy Networks
Depth encoder-decoder, pose regressor and the Adam optimizer that trains them.
"""
import hashlib
from typing import Dict, List, Optional, Sequence

import numpy as np

import ndiff as nd
from ndiff import Tensor

LEAKY_SLOPE = 0.01
MIN_DEPTH = 0.5
MAX_DEPTH = 50.0
# D = 1 / (a·s + b): s → 0 gives MAX_DEPTH, s → 1 gives MIN_DEPTH
DEPTH_B = 1.0 / MAX_DEPTH
DEPTH_A = 1.0 / MIN_DEPTH - DEPTH_B
POSE_ROTATION_SCALE = 0.01


class Module:
    """Named parameter container; forward passes accept an optional replacement parameter dict."""

    def __init__(self):
        self.params: Dict[str, Tensor] = {}

    def parameters(self) -> List[Tensor]:
        return [self.params[name] for name in sorted(self.params)]

    def named_parameters(self) -> List[tuple]:
        return [(name, self.params[name]) for name in sorted(self.params)]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        for name, t in self.params.items():
            if name not in state:
                raise KeyError(f"Missing parameter '{name}'")
            value = np.asarray(state[name])
            if value.shape != t.shape:
                raise nd.ShapeMismatchError(f"Parameter '{name}': expected {t.shape}, got {value.shape}")
            t.data = value.astype(t.data.dtype)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name, t in self.named_parameters():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(t.data).tobytes())
        return digest.hexdigest()

    def _add_conv(self, name: str, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                  std: Optional[float] = None):
        std = std if std is not None else np.sqrt(2.0 / (c_in * kernel * kernel))
        self.params[f"{name}.w"] = Tensor(rng.normal(0.0, std, size=(c_out, c_in, kernel, kernel)),
                                          requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x, params: Optional[Dict[str, Tensor]] = None) -> Tensor:
        return self.forward(x, params or self.params)

    def forward(self, x, params: Dict[str, Tensor]) -> Tensor:
        raise NotImplementedError


def _conv(x, params, name, stride=1, padding=1):
    return nd.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, padding=padding)


class DepthNet(Module):
    """
    Four stride-2 encoder stages and a mirrored decoder with nearest
    upsampling and skip connections, ending in a sigmoid depth decode.

    Args:
        seed: Initialization seed
        widths: Encoder channel widths
    """

    def __init__(self, seed: int = 0, widths: Sequence[int] = (16, 32, 64, 128)):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.widths = tuple(widths)
        channels = (3,) + self.widths
        for i in range(4):
            self._add_conv(f"enc{i}", channels[i], channels[i + 1], 3, rng)
        for i in (3, 2, 1):
            self._add_conv(f"dec{i}", self.widths[i] + self.widths[i - 1], self.widths[i - 1], 3, rng)
        self._add_conv("dec0", self.widths[0] + 3, self.widths[0], 3, rng)
        self._add_conv("head", self.widths[0], 1, 3, rng, std=0.01)

    def forward(self, x, params: Dict[str, Tensor]) -> Tensor:
        x = nd.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] % 16 or x.shape[3] % 16:
            raise nd.ShapeMismatchError(f"DepthNet: expected N×3×H×W with H, W multiples of 16, got {x.shape}")
        features = [x]
        h = x
        for i in range(4):
            h = nd.leaky_relu(_conv(h, params, f"enc{i}", stride=2), LEAKY_SLOPE)
            features.append(h)
        for i in (3, 2, 1, 0):
            h = nd.concat([nd.upsample_nearest(h, 2), features[i]], axis=1)
            h = nd.leaky_relu(_conv(h, params, f"dec{i}"), LEAKY_SLOPE)
        s = nd.sigmoid(_conv(h, params, "head"))
        return 1.0 / (DEPTH_A * s + DEPTH_B)


class PoseNet(Module):
    """Frame-pair encoder, global average and a 6-value head; rotation scaled by 0.01."""

    def __init__(self, seed: int = 0, widths: Sequence[int] = (16, 32, 64)):
        super().__init__()
        rng = np.random.default_rng(seed)
        channels = (6,) + tuple(widths)
        self.depth = len(widths)
        for i in range(self.depth):
            self._add_conv(f"enc{i}", channels[i], channels[i + 1], 3, rng)
        self._add_conv("head", channels[-1], 6, 1, rng, std=1e-3)
        self.output_scale = np.array([POSE_ROTATION_SCALE] * 3 + [1.0] * 3)

    def forward(self, x, params: Dict[str, Tensor]) -> Tensor:
        x = nd.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 6:
            raise nd.ShapeMismatchError(f"PoseNet: expected N×6×H×W, got {x.shape}")
        h = x
        for i in range(self.depth):
            h = nd.leaky_relu(_conv(h, params, f"enc{i}", stride=2), LEAKY_SLOPE)
        h = _conv(h, params, "head", padding=0)
        return nd.mean(h, axis=(2, 3)) * self.output_scale.astype(h.data.dtype)


class Adam:
    """
    Adam over a fixed parameter list, updating tensors in place.

    Args:
        params: Leaves to optimize
        lr: Default learning rate
        betas: Moment decay rates
        eps: Denominator guard
    """

    def __init__(self, params: List[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: Optional[float] = None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= update.astype(p.data.dtype)
