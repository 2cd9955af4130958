"""
Training Pipeline
Dataset loading, the combined objective, the learning-rate schedule, the
training loop, checkpoints, prediction, evaluation, sweeps and ablations.
"""
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

import mcie
import ndiff as nd
import raster_io
import sbm
from geometry import Intrinsics, pose_vector_to_matrix, reproject, bilinear_sample
from metrics import EvalConfig, MetricsReport, evaluate, reduce_reports
from ndiff import Tensor
from networks import Adam, DepthNet, PoseNet
from pbr import (DiscriminatorWeights, ReferenceDepthSet, coord_image, discriminator_forward,
                 lsgan_discriminator_loss, lsgan_generator_loss, normalize_depth)
from photometry import LossWeights, photometric_error, smoothness_loss
from synthscene import DatasetError, load_manifest
from train_config import ConfigError, TrainConfig, coerce_overrides

CHECKPOINT_MAGIC = b"NDCK"
CHECKPOINT_VERSION = 1
# added to masked-out pixels before the per-pixel minimum over sources
MASKED_PENALTY = 1e3

SWEEP_RANGES = {"sigma": (0.002, 0.01), "epsilon": (10.0, 20.0)}

ABLATION_ROWS: Dict[str, Dict[str, bool]] = {
    "baseline": {"use_pbr": False, "use_mcie": False, "use_sbm": False},
    "pbr_only": {"use_pbr": True, "use_mcie": False, "use_sbm": False},
    "mcie_only": {"use_pbr": False, "use_mcie": True, "use_sbm": False},
    "sbm_only": {"use_pbr": False, "use_mcie": False, "use_sbm": True},
    "full": {"use_pbr": True, "use_mcie": True, "use_sbm": True},
}


class CheckpointError(IOError):
    """Checkpoint file is missing, truncated or from another format version."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, iteration: int, components: Dict[str, float]):
        self.iteration = iteration
        self.components = components
        super().__init__(f"Non-finite loss at iteration {iteration}: {components}")


class ResolutionMismatchError(ValueError):
    """Input image does not match the resolution a checkpoint was trained at."""


# -- data ----------------------------------------------------------------------

@dataclass
class TripletBatch:
    """N×C×H×W float32 frames for one snippet batch plus the target ground-truth depth."""
    previous: np.ndarray
    target: np.ndarray
    following: np.ndarray
    depth: np.ndarray

    @property
    def sources(self) -> List[np.ndarray]:
        return [self.previous, self.following]


class SequenceDataset:
    """
    One split of a dataset written by make_dataset, held in memory as 8-bit frames.

    Args:
        root: Dataset root directory
        split: "day" or "night"
    """

    def __init__(self, root, split: str = "night"):
        self.root = Path(root)
        self.split = split
        split_dir = self.root / split
        if not split_dir.is_dir():
            raise DatasetError(f"No '{split}' split in {self.root}")
        self.directories = sorted(p for p in split_dir.iterdir() if p.is_dir())
        if not self.directories:
            raise DatasetError(f"Split '{split}' in {self.root} has no triplets")

        frames, depths = [], []
        self.intrinsics: Optional[Intrinsics] = None
        for directory in self.directories:
            manifest = load_manifest(directory)
            entries = sorted(manifest.entries, key=lambda e: e.frame_index)
            if self.intrinsics is None:
                self.intrinsics = entries[1].intrinsics
                self.height, self.width = manifest.height, manifest.width
            elif (manifest.height, manifest.width) != (self.height, self.width):
                raise DatasetError(f"{directory}: resolution differs from the rest of the split")
            try:
                triplet = [raster_io.to_uint8(raster_io.read_png(directory / e.png)) for e in entries]
                depth = raster_io.read_pfm(directory / entries[1].pfm)
            except (OSError, raster_io.RasterFormatError) as e:
                raise DatasetError(f"{directory}: {e}") from e
            if any(f.shape[:2] != (self.height, self.width) for f in triplet) or depth.shape != (self.height, self.width):
                raise DatasetError(f"{directory}: raster size does not match the manifest")
            frames.append(np.stack(triplet))
            depths.append(depth)
        self.frames = np.stack(frames)
        self.depths = np.stack(depths).astype(np.float32)

    def __len__(self):
        return len(self.frames)

    def batch(self, indices: Sequence[int]) -> TripletBatch:
        snippet = self.frames[np.asarray(indices)].astype(np.float32) / 255.0
        snippet = snippet.transpose(0, 1, 4, 2, 3)
        return TripletBatch(np.ascontiguousarray(snippet[:, 0]), np.ascontiguousarray(snippet[:, 1]),
                            np.ascontiguousarray(snippet[:, 2]), self.depths[np.asarray(indices)])


def split_indices(count: int, val_fraction: float) -> Tuple[np.ndarray, np.ndarray]:
    """The last `val_fraction` of the split is held out for validation."""
    held_out = int(round(count * val_fraction))
    held_out = min(held_out, count - 1)
    return np.arange(count - held_out), np.arange(count - held_out, count)


# -- models --------------------------------------------------------------------

@dataclass
class Models:
    depth_net: DepthNet
    pose_net: PoseNet
    discriminator: DiscriminatorWeights

    @classmethod
    def create(cls, seed: int) -> "Models":
        return cls(DepthNet(seed), PoseNet(seed + 1), DiscriminatorWeights.initialize(seed + 2))

    def named_groups(self):
        return [("depth", self.depth_net.params), ("pose", self.pose_net.params),
                ("disc", self.discriminator.params)]


# -- objective -----------------------------------------------------------------

def lr_schedule(iteration: int, epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from lr_base to lr_target, halved from halving_epoch on."""
    if iteration < 0:
        raise ConfigError(f"iteration must be non-negative, got {iteration}")
    progress = min(iteration / cfg.warmup_iters, 1.0) if cfg.warmup_iters > 0 else 1.0
    lr = cfg.lr_base + (cfg.lr_target - cfg.lr_base) * progress
    if epoch >= cfg.halving_epoch:
        lr *= 0.5
    return lr


def aggregate_photometric(pe_maps: Sequence[Tensor], masks: Sequence[np.ndarray],
                          aggregation: str = "average") -> Tuple[Tensor, float]:
    """
    Combine per-source masked photometric maps into one scalar.

    "average" averages each pixel over the sources whose mask keeps it;
    "min" takes the per-pixel minimum over kept sources. Pixels no source
    keeps are excluded.

    Returns:
        (scalar loss, fraction of pixels kept by at least one source)
    """
    like = pe_maps[0]
    coverage = np.sum(masks, axis=0)
    kept = (coverage > 0).astype(like.data.dtype)
    count = float(kept.sum())
    if count == 0:
        print("Warning: every pixel is masked; photometric term is 0")
        return nd.mul(nd.sum_(pe_maps[0]), 0.0), 0.0
    if aggregation == "average":
        weighted = pe_maps[0] * masks[0]
        for pe, m in zip(pe_maps[1:], masks[1:]):
            weighted = weighted + pe * m
        per_pixel = weighted / np.maximum(coverage, 1.0).astype(like.data.dtype)
    elif aggregation == "min":
        penalized = [pe + (1.0 - m) * MASKED_PENALTY for pe, m in zip(pe_maps, masks)]
        per_pixel = nd.minimum(*penalized) * kept
    else:
        raise ConfigError(f"Unknown aggregation '{aggregation}'")
    return nd.sum_(per_pixel) / count, count / kept.size


def total_loss(pe_maps: Sequence[Tensor], masks: Sequence[np.ndarray], smoothness: Tensor,
               weights: LossWeights, generator: Optional[Tensor] = None, aggregation: str = "average",
               use_photometric: bool = True) -> Tuple[Tensor, Dict[str, float]]:
    """
    photometric + eta·smoothness + xi·generator, with a per-component breakdown.

    The discriminator term is optimized separately and only reported.
    """
    components: Dict[str, float] = {}
    loss = weights.eta * smoothness
    components["smoothness"] = float(smoothness.data)
    if use_photometric:
        photometric, kept = aggregate_photometric(pe_maps, masks, aggregation)
        loss = loss + photometric
        components["photometric"] = float(photometric.data)
        components["mask_fraction"] = kept
    if generator is not None:
        loss = loss + weights.xi * generator
        components["generator"] = float(generator.data)
    components["total"] = float(loss.data)
    return loss, components


@dataclass
class ForwardPass:
    """One iteration's predictions and loss ingredients."""
    depth: Tensor
    pe_maps: List[Tensor]
    masks: List[np.ndarray]
    smoothness: Tensor
    network_inputs: List[np.ndarray] = field(default_factory=list)


def compute_losses(models: Models, batch: TripletBatch, cfg: TrainConfig, K: Intrinsics,
                   tracker: sbm.StatsTracker) -> ForwardPass:
    """
    Predict depth and poses, warp both sources and build the masked photometric maps.

    Networks always see raw frames. With MCIE on, the photometric maps compare
    enhanced frames while the auto-mask and frame differences use raw ones.
    """
    target = batch.target
    network_inputs = [target]
    depth = models.depth_net(Tensor(target))

    if cfg.use_mcie:
        loss_target, loss_sources = mcie.enhance_batch(target, batch.sources, cfg.sigma,
                                                       cfg.histogram_source, cfg.levels)
    else:
        loss_target, loss_sources = target, batch.sources

    pe_maps, masks = [], []
    for raw_source, loss_source in zip(batch.sources, loss_sources):
        pair = np.concatenate([target, raw_source], axis=1)
        network_inputs.append(pair)
        T = pose_vector_to_matrix(models.pose_net(Tensor(pair)))
        coords, valid = reproject(depth, K, T)
        recon = bilinear_sample(Tensor(loss_source), coords)
        pe = photometric_error(Tensor(loss_target), recon, cfg.alpha)

        if cfg.use_mcie:
            raw_recon = bilinear_sample(Tensor(raw_source), coords.detach())
            pe_raw = photometric_error(Tensor(target), raw_recon, cfg.alpha).data
        else:
            pe_raw = pe.data
        pe_identity = photometric_error(Tensor(target), Tensor(raw_source), cfg.alpha).data
        mask = sbm.auto_mask(pe_raw, pe_identity)

        difference = sbm.pixel_difference(target, raw_source, channel_axis=1)[:, None]
        tracker.update(difference)
        if cfg.use_sbm:
            mask = sbm.combine(mask, tracker.mask(difference))
        masks.append(mask * valid[:, None])
        pe_maps.append(pe)

    smooth = smoothness_loss(depth, Tensor(target), normalize=cfg.smoothness_normalize)
    return ForwardPass(depth, pe_maps, masks, smooth, network_inputs)


class Trainer:
    """
    Owns models, optimizers and statistics for one training stream.

    Args:
        cfg: Validated training configuration
        intrinsics: Camera of the training split
        references: Reference depths for the depth prior (required when use_pbr)
    """

    def __init__(self, cfg: TrainConfig, intrinsics: Intrinsics,
                 references: Optional[ReferenceDepthSet] = None):
        self.cfg = cfg.validate()
        if cfg.use_pbr and references is None:
            raise ConfigError("use_pbr needs a reference depth set")
        self.intrinsics = intrinsics
        self.references = references
        self.models = Models.create(cfg.seed)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.generator_opt = Adam(self.models.depth_net.parameters() + self.models.pose_net.parameters(),
                                  cfg.lr_base, betas)
        self.discriminator_opt = Adam(self.models.discriminator.parameters(), cfg.lr_base, betas)
        self.tracker = sbm.get_stats_tracker(cfg.stats_mode, cfg.beta, cfg.epsilon)
        self.sample_rng = np.random.default_rng([cfg.seed, 0x5EED])
        self.coords = coord_image(cfg.height, cfg.width)
        self.iteration = 0

    def step(self, batch: TripletBatch, lr: float) -> Dict[str, float]:
        """One iteration: discriminator update (if PBR), then depth and pose update."""
        cfg = self.cfg
        forward = compute_losses(self.models, batch, cfg, self.intrinsics, self.tracker)

        generator = None
        discriminator_loss = None
        if cfg.use_pbr:
            reference = self.references.sample(self.sample_rng, batch.target.shape[0])
            depth_norm = normalize_depth(forward.depth)
            self.discriminator_opt.zero_grad()
            real = discriminator_forward(normalize_depth(Tensor(reference)), self.coords, self.models.discriminator)
            fake = discriminator_forward(depth_norm.detach(), self.coords, self.models.discriminator)
            discriminator_loss = lsgan_discriminator_loss(real, fake)
            (cfg.tau * discriminator_loss).backward()
            self.discriminator_opt.step(lr)
            generator = lsgan_generator_loss(
                discriminator_forward(depth_norm, self.coords, self.models.discriminator))

        loss, components = total_loss(forward.pe_maps, forward.masks, forward.smoothness,
                                      cfg.loss_weights(), generator, cfg.aggregation, cfg.use_photometric)
        if discriminator_loss is not None:
            components["discriminator"] = float(discriminator_loss.data)
        if not np.isfinite(components["total"]):
            raise NonFiniteLossError(self.iteration, components)

        self.generator_opt.zero_grad()
        loss.backward()
        self.generator_opt.step(lr)
        self.iteration += 1
        return components


# -- evaluation ----------------------------------------------------------------

def predict_batch(depth_net: DepthNet, images: np.ndarray) -> np.ndarray:
    """N×3×H×W frames to N×H×W depth."""
    return depth_net(Tensor(images)).data[:, 0]


def evaluate_depth_net(depth_net: DepthNet, dataset: SequenceDataset, indices: Sequence[int],
                       eval_cfg: EvalConfig, batch_size: int = 16) -> MetricsReport:
    reports = []
    indices = list(indices)
    for start in range(0, len(indices), batch_size):
        batch = dataset.batch(indices[start:start + batch_size])
        predictions = predict_batch(depth_net, batch.target)
        for pred, gt in zip(predictions, batch.depth):
            reports.append(evaluate(pred, gt, gt > 0, eval_cfg))
    return reduce_reports(reports)


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    models: Models
    history: List[Dict[str, object]]
    metrics: Optional[MetricsReport]
    stats: sbm.EwmaHistogramState
    checkpoint: Optional[Path] = None


def build_reference_set(cfg: TrainConfig, dataset_dir) -> ReferenceDepthSet:
    """Reference depths from rendered day ground truth or from a toy network trained on day frames."""
    if cfg.reference_source == "render":
        return ReferenceDepthSet.load(Path(dataset_dir) / "references")
    print("Training reference depth network on the day split...")
    ref_cfg = replace(cfg, use_pbr=False, use_mcie=False, use_sbm=False, use_photometric=True,
                      epochs=cfg.reference_epochs, val_fraction=0.0)
    result = train(ref_cfg, dataset_dir, split="day")
    day = SequenceDataset(dataset_dir, "day")
    depths = []
    for start in range(0, len(day), 16):
        batch = day.batch(range(start, min(start + 16, len(day))))
        depths.extend(predict_batch(result.models.depth_net, batch.target))
    print(f"✓ Reference depth set: {len(depths)} maps from the toy network")
    return ReferenceDepthSet(depths, seed=cfg.seed)


def _epoch_record(epoch: int, iteration: int, lr: float, sums: Dict[str, float], steps: int,
                  validation: Optional[MetricsReport]) -> Dict[str, object]:
    loss = {key: value / max(steps, 1) for key, value in sorted(sums.items()) if key != "mask_fraction"}
    return {
        "epoch": epoch,
        "iterations": iteration,
        "lr": lr,
        "loss": loss,
        "mask_fraction": sums.get("mask_fraction", 0.0) / max(steps, 1),
        "validation": validation.as_dict() if validation is not None else None,
    }


def train(cfg: TrainConfig, dataset_dir, output_dir=None, split: str = "night",
          references: Optional[ReferenceDepthSet] = None) -> TrainResult:
    """
    Train depth and pose networks on one split of a synthetic dataset.

    Args:
        cfg: Training configuration
        dataset_dir: Root written by make_dataset
        output_dir: Where checkpoint.bin, stats.bin, config.txt and train_log.jsonl go (optional)
        split: Split to train on
        references: Reference depth set (built from the dataset when PBR is on and none is given)

    Returns:
        TrainResult with the trained models and per-epoch history
    """
    cfg.validate()
    dataset = SequenceDataset(dataset_dir, split)
    if (dataset.height, dataset.width) != (cfg.height, cfg.width):
        raise DatasetError(f"Dataset is {dataset.height}x{dataset.width} but the config asks for "
                           f"{cfg.height}x{cfg.width}")
    if cfg.use_pbr and references is None:
        references = build_reference_set(cfg, dataset_dir)
    if references is not None and references.shape != (cfg.height, cfg.width):
        raise DatasetError(f"Reference depths are {references.shape}, training at {cfg.height}x{cfg.width}")

    train_idx, val_idx = split_indices(len(dataset), cfg.val_fraction)
    trainer = Trainer(cfg, dataset.intrinsics, references)

    log_path = None
    if output_dir is not None:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        log_path = output_dir / "train_log.jsonl"
        log_path.write_text("")

    history = []
    validation = None
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(train_idx)
        batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        if cfg.max_iterations_per_epoch > 0:
            batches = batches[:cfg.max_iterations_per_epoch]

        sums: Dict[str, float] = {}
        lr = lr_schedule(trainer.iteration, epoch, cfg)
        for indices in tqdm(batches, desc=f"Epoch {epoch + 1}/{cfg.epochs}", disable=not cfg.progress):
            lr = lr_schedule(trainer.iteration, epoch, cfg)
            for key, value in trainer.step(dataset.batch(indices), lr).items():
                sums[key] = sums.get(key, 0.0) + value

        eval_idx = val_idx if len(val_idx) else train_idx
        validation = evaluate_depth_net(trainer.models.depth_net, dataset, eval_idx, cfg.eval_config())
        record = _epoch_record(epoch, trainer.iteration, lr, sums, len(batches), validation)
        history.append(record)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        print(f"✓ Epoch {epoch + 1}/{cfg.epochs}: loss {record['loss'].get('total', 0.0):.5f}, "
              f"abs_rel {validation.abs_rel:.4f}")

    result = TrainResult(trainer.models, history, validation, trainer.tracker.state)
    if output_dir is not None:
        result.checkpoint = output_dir / "checkpoint.bin"
        save_checkpoint(result.checkpoint, trainer.models, cfg)
        sbm.save_state(trainer.tracker.state, output_dir / "stats.bin")
        cfg.save(output_dir / "config.txt")
        print(f"✓ Saved checkpoint: {result.checkpoint}")
    return result


# -- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    models: Models
    config: TrainConfig

    @property
    def height(self) -> int:
        return self.config.height

    @property
    def width(self) -> int:
        return self.config.width


def save_checkpoint(path, models: Models, cfg: TrainConfig):
    """Magic, version, manifest length, JSON manifest, then little-endian float32 parameters."""
    tensors, blobs = [], []
    for prefix, params in models.named_groups():
        for name in sorted(params):
            data = params[name].data
            tensors.append({"name": f"{prefix}.{name}", "shape": list(data.shape)})
            blobs.append(np.asarray(data, dtype="<f4").tobytes())
    manifest = json.dumps({"version": CHECKPOINT_VERSION, "height": cfg.height, "width": cfg.width,
                           "config": asdict(cfg), "tensors": tensors}, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(manifest))
                           + manifest + b"".join(blobs))


def load_checkpoint(path) -> Checkpoint:
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    if payload[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, length = struct.unpack("<II", payload[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        manifest = json.loads(payload[12:12 + length].decode("utf-8"))
        cfg = TrainConfig(**coerce_overrides(manifest["config"]))
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from e

    models = Models.create(cfg.seed)
    groups = dict(models.named_groups())
    offset = 12 + length
    for entry in manifest["tensors"]:
        prefix, name = entry["name"].split(".", 1)
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        chunk = payload[offset:offset + count * 4]
        if len(chunk) != count * 4:
            raise CheckpointError(f"{path}: truncated at tensor {entry['name']}")
        target = groups.get(prefix, {}).get(name)
        if target is None or target.shape != shape:
            raise CheckpointError(f"{path}: tensor {entry['name']} {shape} does not fit the network")
        target.data = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
        offset += count * 4
    return Checkpoint(models, cfg)


def predict(checkpoint, image: np.ndarray) -> np.ndarray:
    """
    Depth for one H×W×3 frame in [0, 1].

    Args:
        checkpoint: Checkpoint or path to one
        image: Frame at the training resolution

    Returns:
        H×W float32 depth
    """
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[:2] != (checkpoint.height, checkpoint.width):
        raise ResolutionMismatchError(
            f"Image is {image.shape[:2]} but the checkpoint expects {(checkpoint.height, checkpoint.width)}")
    return predict_batch(checkpoint.models.depth_net, image.transpose(2, 0, 1)[None].copy())[0]


def mask_maps(checkpoint, target: np.ndarray, source: np.ndarray, state: sbm.EwmaHistogramState,
              epsilon: float, intrinsics: Optional[Intrinsics] = None) -> Dict[str, np.ndarray]:
    """
    Auto-mask, statistics mask and their product for one H×W×3 frame pair.

    The reconstruction uses the checkpoint's depth and pose networks; the
    statistics mask thresholds the frame difference at the saved histogram's
    epsilon percentile.
    """
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    frames = [np.asarray(f, dtype=np.float32) for f in (target, source)]
    for frame in frames:
        if frame.ndim != 3 or frame.shape[:2] != (checkpoint.height, checkpoint.width):
            raise ResolutionMismatchError(
                f"Frame is {frame.shape[:2]} but the checkpoint expects {(checkpoint.height, checkpoint.width)}")
    K = intrinsics or Intrinsics.default_for(checkpoint.height, checkpoint.width)
    target_t, source_t = [f.transpose(2, 0, 1)[None].copy() for f in frames]
    models = checkpoint.models
    depth = models.depth_net(Tensor(target_t))
    T = pose_vector_to_matrix(models.pose_net(Tensor(np.concatenate([target_t, source_t], axis=1))))
    coords, valid = reproject(depth, K, T)
    recon = bilinear_sample(Tensor(source_t), coords)
    alpha = checkpoint.config.alpha
    pe = photometric_error(Tensor(target_t), recon, alpha).data[0, 0]
    pe_identity = photometric_error(Tensor(target_t), Tensor(source_t), alpha).data[0, 0]
    auto = sbm.auto_mask(pe, pe_identity) * valid[0]
    stats = sbm.stats_mask(sbm.pixel_difference(frames[0], frames[1]), sbm.percentile(state, epsilon))
    return {"auto": auto, "stats": stats, "combined": sbm.combine(auto, stats)}


def evaluate_checkpoint(checkpoint, dataset_dir, split: str = "night",
                        eval_cfg: Optional[EvalConfig] = None) -> MetricsReport:
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    dataset = SequenceDataset(dataset_dir, split)
    if (dataset.height, dataset.width) != (checkpoint.height, checkpoint.width):
        raise ResolutionMismatchError(f"Dataset is {dataset.height}x{dataset.width}, checkpoint "
                                      f"{checkpoint.height}x{checkpoint.width}")
    eval_cfg = eval_cfg or checkpoint.config.eval_config()
    return evaluate_depth_net(checkpoint.models.depth_net, dataset, range(len(dataset)), eval_cfg)


# -- experiments ---------------------------------------------------------------

def sweep(cfg: TrainConfig, dataset_dir, parameter: str, values: Sequence[float]
          ) -> List[Tuple[float, MetricsReport]]:
    """Train once per value of sigma or epsilon; 0 disables the owning module."""
    toggles = {"sigma": "use_mcie", "epsilon": "use_sbm"}
    if parameter not in toggles:
        raise ConfigError(f"Can only sweep {sorted(toggles)}, got '{parameter}'")
    references = ReferenceDepthSet.load(Path(dataset_dir) / "references") if (
        cfg.use_pbr and cfg.reference_source == "render") else None
    results = []
    for value in values:
        run_cfg = replace(cfg, **{toggles[parameter]: value > 0})
        if value > 0:
            run_cfg = replace(run_cfg, **{parameter: float(value)})
        print(f"\n{parameter} = {value}")
        result = train(run_cfg.validate(), dataset_dir, references=references)
        results.append((float(value), result.metrics))
    return results


def ablate(cfg: TrainConfig, dataset_dir, seeds: Sequence[int]) -> Dict[str, List[MetricsReport]]:
    """Validation metrics of each ablation row for every seed."""
    references = None
    results: Dict[str, List[MetricsReport]] = {row: [] for row in ABLATION_ROWS}
    for seed in seeds:
        for row, toggles in ABLATION_ROWS.items():
            run_cfg = replace(cfg, seed=seed, **toggles).validate()
            if run_cfg.use_pbr and references is None:
                references = build_reference_set(run_cfg, dataset_dir)
            print(f"\n{row} (seed {seed})")
            results[row].append(train(run_cfg, dataset_dir, references=references).metrics)
    return results


def ablation_checks(results: Dict[str, List[MetricsReport]], tolerance: float = 0.05) -> Dict[str, bool]:
    """
    Directional checks over ablation results.

    full_beats_baseline: full method has lower abs_rel than baseline on every seed.
    pbr_largest_gain: PBR alone gives the largest single-module gain on a majority of seeds.
    no_component_hurts: no single module worsens baseline abs_rel by more than `tolerance`.
    """
    baseline = [r.abs_rel for r in results["baseline"]]
    singles = ("pbr_only", "mcie_only", "sbm_only")
    seeds = range(len(baseline))
    full = all(results["full"][i].abs_rel < baseline[i] for i in seeds)
    pbr_wins = sum(
        1 for i in seeds
        if min(singles, key=lambda row: results[row][i].abs_rel) == "pbr_only"
    )
    no_harm = all(results[row][i].abs_rel <= baseline[i] * (1.0 + tolerance) for row in singles for i in seeds)
    return {"full_beats_baseline": full,
            "pbr_largest_gain": pbr_wins * 2 > len(baseline),
            "no_component_hurts": no_harm}
