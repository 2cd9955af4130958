"""
Gradient Check Sweep
Finite-difference checks for every differentiable operator, loss and network.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

import ndiff as nd
from geometry import Intrinsics, bilinear_sample, pose_vector_to_matrix, reproject
from ndiff import GradCheckReport, OpGraph, grad_check
from networks import DepthNet, PoseNet
from pbr import (DiscriminatorWeights, coord_image, discriminator_forward, lsgan_discriminator_loss,
                 lsgan_generator_loss, normalize_depth)
from photometry import photometric_error, smoothness_loss, ssim_map

TOLERANCE = 1e-4
STEP = 1e-4
# network inputs are redrawn until every leaky unit is this far from its kink
KINK_MARGIN = 10 * STEP
# per-stage width of the networks under check
CHECK_WIDTHS = (2, 2, 2, 2)
NETWORK_PROBES = 48


@dataclass
class SweepCase:
    name: str
    fn: Callable[..., nd.Tensor]
    inputs: Dict[str, np.ndarray]
    step: float = STEP
    directional: bool = False
    wrt: Optional[List[str]] = None
    max_probes: Optional[int] = None

    def graph(self) -> OpGraph:
        return OpGraph(self.name, self.fn, {k: np.shape(v) for k, v in self.inputs.items()})

    def run(self, seed: int = 0) -> GradCheckReport:
        return grad_check(self.graph(), self.inputs, step=self.step, wrt=self.wrt,
                          max_probes=self.max_probes, directional=self.directional, seed=seed)


@dataclass
class SweepResult:
    reports: List[GradCheckReport] = field(default_factory=list)
    tolerance: float = TOLERANCE

    @property
    def failures(self) -> List[GradCheckReport]:
        return [r for r in self.reports if not r.passed(self.tolerance)]

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_text(self) -> str:
        lines = []
        for r in self.reports:
            mark = "✓" if r.passed(self.tolerance) else "✗"
            lines.append(f"{mark} {r.name:<24} max rel error {r.max_error:.2e}")
        return "\n".join(lines)


def _away_from_zero(rng: np.random.Generator, shape, low: float = 0.2, high: float = 1.5) -> np.ndarray:
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _fractional_coords(rng: np.random.Generator, n: int, out_h: int, out_w: int,
                       height: int, width: int) -> np.ndarray:
    """Sampling positions whose fractional parts stay in [0.2, 0.8]."""
    x = rng.integers(0, width - 1, size=(n, out_h, out_w)) + rng.uniform(0.2, 0.8, size=(n, out_h, out_w))
    y = rng.integers(0, height - 1, size=(n, out_h, out_w)) + rng.uniform(0.2, 0.8, size=(n, out_h, out_w))
    return np.stack([x, y], axis=-1)


def _ramp_depth(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Depth whose neighbour differences are all at least 0.1."""
    rows = 0.3 * np.arange(height)[:, None]
    cols = 0.25 * np.arange(width)[None, :]
    return (1.0 + rows + cols + rng.uniform(0.0, 0.05, size=(height, width)))[None, None]


def operator_cases(seed: int = 0) -> List[SweepCase]:
    rng = np.random.default_rng(seed)
    K = Intrinsics.default_for(4, 5)
    lower = rng.normal(size=(3, 4))
    T = np.eye(4)
    T[:3, 3] = [0.05, -0.02, 0.1]
    return [
        SweepCase("sigmoid", nd.sigmoid, {"x": rng.uniform(-2, 2, (3, 4))}),
        SweepCase("leaky_relu", lambda x: nd.leaky_relu(x, 0.01), {"x": _away_from_zero(rng, (3, 4))}),
        SweepCase("exp", nd.exp, {"x": rng.uniform(-1, 1, (3, 4))}),
        SweepCase("log", nd.log, {"x": rng.uniform(0.5, 2, (3, 4))}),
        SweepCase("sqrt", nd.sqrt, {"x": rng.uniform(0.5, 2, (3, 4))}),
        SweepCase("abs", nd.abs_, {"x": _away_from_zero(rng, (3, 4))}),
        SweepCase("mul_div", lambda a, b: a * b / (b + 3.0),
                  {"a": rng.normal(size=(2, 3)), "b": rng.uniform(0.5, 2, (2, 3))}),
        SweepCase("clamp", lambda x: nd.clamp(x, -0.5, 0.5),
                  {"x": np.array([[-1.2, -0.3, 0.1], [0.35, 0.9, -0.05]])}),
        SweepCase("minimum", lambda a, b: nd.minimum(a, b),
                  {"a": lower, "b": lower + _away_from_zero(rng, (3, 4))}),
        SweepCase("conv2d", lambda x, w, b: nd.conv2d(x, w, b, stride=1, padding=1),
                  {"x": rng.normal(size=(1, 2, 5, 5)), "w": rng.normal(size=(3, 2, 3, 3)),
                   "b": rng.normal(size=3)}),
        SweepCase("conv2d_stride2", lambda x, w, b: nd.conv2d(x, w, b, stride=2, padding=1),
                  {"x": rng.normal(size=(1, 2, 6, 6)), "w": rng.normal(size=(2, 2, 4, 4)),
                   "b": rng.normal(size=2)}),
        SweepCase("avg_pool2d", lambda x: nd.avg_pool2d(x, 3, 1), {"x": rng.normal(size=(1, 2, 6, 6))}),
        SweepCase("upsample_nearest", lambda x: nd.upsample_nearest(x, 2), {"x": rng.normal(size=(1, 2, 3, 3))}),
        SweepCase("pad2d_reflect", lambda x: nd.pad2d(x, 1, 1, 2, 1, mode="reflect"),
                  {"x": rng.normal(size=(1, 1, 4, 5))}),
        SweepCase("matmul", nd.matmul, {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(2, 4, 2))}),
        SweepCase("pose_vector_to_matrix", pose_vector_to_matrix,
                  {"pose": np.concatenate([rng.uniform(-0.3, 0.3, (2, 3)), rng.normal(size=(2, 3))], axis=1)}),
        SweepCase("reproject", lambda depth, pose: reproject(depth, K, pose_vector_to_matrix(pose))[0],
                  {"depth": rng.uniform(2, 5, (1, 1, 4, 5)),
                   "pose": np.array([[0.02, -0.01, 0.03, 0.05, -0.02, 0.1]])}),
        SweepCase("reproject_fixed_pose", lambda depth: reproject(depth, K, T)[0],
                  {"depth": rng.uniform(2, 5, (1, 1, 4, 5))}),
        SweepCase("bilinear_sample", bilinear_sample,
                  {"source": rng.uniform(0, 1, (1, 2, 4, 5)), "coords": _fractional_coords(rng, 1, 3, 3, 4, 5)}),
    ]


def loss_cases(seed: int = 0) -> List[SweepCase]:
    rng = np.random.default_rng(seed + 1)
    target = rng.uniform(0.1, 0.9, (1, 3, 5, 5))
    recon = target + _away_from_zero(rng, target.shape, 0.05, 0.3)
    return [
        SweepCase("ssim", ssim_map, {"a": rng.uniform(0.1, 0.9, (1, 2, 5, 5)), "b": rng.uniform(0.1, 0.9, (1, 2, 5, 5))}),
        SweepCase("photometric", lambda target, recon: photometric_error(target, recon, 0.85),
                  {"target": target, "recon": recon}),
        SweepCase("smoothness", smoothness_loss,
                  {"depth": _ramp_depth(rng, 5, 5), "image": rng.uniform(0, 1, (1, 3, 5, 5))}, wrt=["depth"]),
        SweepCase("smoothness_raw", lambda depth, image: smoothness_loss(depth, image, normalize=False),
                  {"depth": _ramp_depth(rng, 5, 5), "image": rng.uniform(0, 1, (1, 3, 5, 5))}, wrt=["depth"]),
        SweepCase("lsgan_discriminator", lsgan_discriminator_loss,
                  {"scores_real": rng.normal(size=(2, 1, 3, 3)), "scores_fake": rng.normal(size=(2, 1, 3, 3))}),
        SweepCase("lsgan_generator", lsgan_generator_loss, {"scores_fake": rng.normal(size=(2, 1, 3, 3))}),
    ]


def _kink_free(case: SweepCase, key: str, draw: Callable[[], np.ndarray], attempts: int = 200) -> SweepCase:
    """Redraw input `key` until every leaky unit sits at least KINK_MARGIN from its kink."""
    graph = case.graph()
    for _ in range(attempts):
        case.inputs[key] = draw()
        if nd.kink_margin(graph, case.inputs) >= KINK_MARGIN:
            return case
    raise nd.NdiffError(f"{case.name}: no '{key}' keeps every unit {KINK_MARGIN} from its kink "
                        f"after {attempts} draws")


def network_cases(seed: int = 0) -> List[SweepCase]:
    rng = np.random.default_rng(seed + 2)
    size = 16
    coords = coord_image(size, size)
    disc = DiscriminatorWeights.initialize(seed, widths=(4, 4), std=0.2)
    depth_net = DepthNet(seed, widths=CHECK_WIDTHS)
    pose_net = PoseNet(seed, widths=CHECK_WIDTHS[:3])

    def discriminator(depth, **params):
        return discriminator_forward(normalize_depth(depth), coords, DiscriminatorWeights(dict(params)))

    def parameters(weights: Dict[str, nd.Tensor]) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in weights.items()}

    def case(name, fn, key, draw, params):
        return _kink_free(SweepCase(name, fn, {key: draw(), **params}, max_probes=NETWORK_PROBES), key, draw)

    return [
        case("discriminator", discriminator, "depth",
             lambda: rng.uniform(1, 10, (1, 1, size, size)), parameters(disc.params)),
        case("depth_net", lambda image, **params: depth_net(image, params), "image",
             lambda: rng.uniform(0, 1, (1, 3, size, size)), depth_net.state_dict()),
        case("pose_net", lambda pair, **params: pose_net(pair, params), "pair",
             lambda: rng.uniform(0, 1, (1, 6, size, size)), pose_net.state_dict()),
    ]


def all_cases(seed: int = 0) -> List[SweepCase]:
    return operator_cases(seed) + loss_cases(seed) + network_cases(seed)


def run_sweep(names: Optional[Sequence[str]] = None, tolerance: float = TOLERANCE, seed: int = 0,
              progress: bool = False) -> SweepResult:
    """
    Check analytic against numeric gradients for every registered case.

    Args:
        names: Restrict to these case names (default: all)
        tolerance: Maximum relative error for a pass
        seed: Seed for inputs and probes
        progress: Print one line per case as it finishes

    Returns:
        SweepResult with one report per case
    """
    cases = all_cases(seed)
    if names:
        known = {case.name for case in cases}
        unknown = sorted(set(names) - known)
        if unknown:
            raise ValueError(f"Unknown gradient check cases {unknown}; choose from {sorted(known)}")
        cases = [case for case in cases if case.name in names]
    result = SweepResult(tolerance=tolerance)
    for case in cases:
        report = case.run(seed)
        result.reports.append(report)
        if progress:
            mark = "✓" if report.passed(tolerance) else "✗"
            print(f"  {mark} {report.name:<24} {report.max_error:.2e}")
    return result
