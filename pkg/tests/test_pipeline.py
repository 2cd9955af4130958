"""
Dataset loading, the combined objective, training runs, checkpoints and experiment helpers.
"""
from dataclasses import replace

import numpy as np
import pytest

import pipeline
import sbm
from geometry import Intrinsics
from metrics import MetricsReport
from ndiff import Tensor
from pbr import ReferenceDepthSet
from photometry import LossWeights
from pipeline import (CheckpointError, Models, NonFiniteLossError, ResolutionMismatchError, SequenceDataset,
                      Trainer, ablation_checks, aggregate_photometric, compute_losses, evaluate_checkpoint,
                      evaluate_depth_net, load_checkpoint, lr_schedule, mask_maps, predict, save_checkpoint,
                      split_indices, sweep, total_loss, train)
from synthscene import DatasetConfig, DatasetError, make_dataset
from train_config import ConfigError, TrainConfig


def _report(abs_rel):
    return MetricsReport(abs_rel, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, count=1)


def test_sequence_dataset(tiny_dataset):
    night = SequenceDataset(tiny_dataset, "night")
    assert len(night) == 6
    assert night.intrinsics == Intrinsics.default_for(32, 32)
    batch = night.batch([0, 3])
    assert batch.target.shape == (2, 3, 32, 32) and batch.target.dtype == np.float32
    assert batch.depth.shape == (2, 32, 32)
    assert 0.0 <= batch.previous.min() and batch.following.max() <= 1.0
    assert len(batch.sources) == 2
    assert len(SequenceDataset(tiny_dataset, "day")) == 4
    with pytest.raises(DatasetError):
        SequenceDataset(tiny_dataset, "dusk")


def test_split_indices():
    train_idx, val_idx = split_indices(6, 0.34)
    assert train_idx.tolist() == [0, 1, 2, 3] and val_idx.tolist() == [4, 5]
    train_idx, val_idx = split_indices(3, 0.9)
    assert len(train_idx) == 1
    assert len(split_indices(5, 0.0)[1]) == 0


def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert lr_schedule(0, 0, cfg) == pytest.approx(3e-5)
    assert lr_schedule(250, 0, cfg) == pytest.approx(6.5e-5)
    assert lr_schedule(500, 1, cfg) == pytest.approx(1e-4)
    assert lr_schedule(5000, 14, cfg) == pytest.approx(1e-4)
    assert lr_schedule(5000, 15, cfg) == pytest.approx(5e-5)
    assert lr_schedule(10, 0, replace(cfg, warmup_iters=0)) == pytest.approx(1e-4)
    with pytest.raises(ConfigError):
        lr_schedule(-1, 0, cfg)


def _maps():
    pe_maps = [Tensor(np.full((1, 1, 2, 2), 1.0)), Tensor(np.full((1, 1, 2, 2), 3.0))]
    masks = [np.array([[[[1.0, 1.0], [0.0, 0.0]]]]), np.array([[[[1.0, 0.0], [1.0, 0.0]]]])]
    return pe_maps, masks


def test_average_aggregation_over_kept_sources():
    loss, kept = aggregate_photometric(*_maps(), aggregation="average")
    assert loss.item() == pytest.approx(2.0)
    assert kept == 0.75


def test_min_aggregation_ignores_masked_sources():
    loss, kept = aggregate_photometric(*_maps(), aggregation="min")
    assert loss.item() == pytest.approx(5.0 / 3.0, rel=1e-6)
    assert kept == 0.75
    with pytest.raises(ConfigError):
        aggregate_photometric(*_maps(), aggregation="median")


def test_fully_masked_photometric_term_is_zero(capsys):
    pe_maps, _ = _maps()
    loss, kept = aggregate_photometric(pe_maps, [np.zeros((1, 1, 2, 2))] * 2)
    assert loss.item() == 0.0 and kept == 0.0
    assert "Warning" in capsys.readouterr().out


def test_total_loss_weights_components():
    pe_maps, masks = _maps()
    weights = LossWeights(eta=0.1, xi=0.5)
    loss, components = total_loss(pe_maps, masks, Tensor(2.0), weights, generator=Tensor(0.25))
    assert loss.item() == pytest.approx(2.0 + 0.1 * 2.0 + 0.5 * 0.25)
    assert components["photometric"] == pytest.approx(2.0)
    assert components["generator"] == 0.25
    assert components["total"] == pytest.approx(loss.item())
    loss, components = total_loss(pe_maps, masks, Tensor(2.0), weights, use_photometric=False)
    assert loss.item() == pytest.approx(0.2)
    assert "photometric" not in components


def test_compute_losses_updates_stats_without_masking(tiny_dataset, fast_config):
    dataset = SequenceDataset(tiny_dataset)
    cfg = replace(fast_config, use_sbm=False, use_mcie=False)
    tracker = sbm.get_stats_tracker(cfg.stats_mode, cfg.beta, cfg.epsilon)
    forward = compute_losses(Models.create(0), dataset.batch([0, 1]), cfg, dataset.intrinsics, tracker)
    assert tracker.state.updates == 2
    assert forward.depth.shape == (2, 1, 32, 32)
    assert len(forward.pe_maps) == 2 and len(forward.network_inputs) == 3
    for mask in forward.masks:
        assert mask.shape == (2, 1, 32, 32)
        assert set(np.unique(mask)) <= {0.0, 1.0}


def test_statistics_mask_removes_pixels(tiny_dataset, fast_config):
    dataset = SequenceDataset(tiny_dataset)
    batch = dataset.batch([0, 1])
    models = Models.create(0)
    kept = {}
    for use_sbm in (False, True):
        cfg = replace(fast_config, use_sbm=use_sbm, epsilon=50.0)
        tracker = sbm.get_stats_tracker(cfg.stats_mode, cfg.beta, cfg.epsilon)
        forward = compute_losses(models, batch, cfg, dataset.intrinsics, tracker)
        kept[use_sbm] = sum(m.sum() for m in forward.masks)
    assert kept[True] < kept[False]


def test_trainer_step_updates_every_network(tiny_dataset, fast_config):
    dataset = SequenceDataset(tiny_dataset)
    refs = ReferenceDepthSet.load(tiny_dataset / "references")
    trainer = Trainer(fast_config, dataset.intrinsics, refs)
    before = {"depth": trainer.models.depth_net.fingerprint(), "pose": trainer.models.pose_net.fingerprint(),
              "disc": trainer.models.discriminator.params["w1"].data.copy()}
    components = trainer.step(dataset.batch([0, 1]), 1e-3)
    assert {"photometric", "smoothness", "generator", "discriminator", "total", "mask_fraction"} <= set(components)
    assert all(np.isfinite(v) for v in components.values())
    assert trainer.iteration == 1
    assert trainer.models.depth_net.fingerprint() != before["depth"]
    assert trainer.models.pose_net.fingerprint() != before["pose"]
    assert not np.array_equal(trainer.models.discriminator.params["w1"].data, before["disc"])


def test_trainer_needs_references_for_pbr(fast_config):
    with pytest.raises(ConfigError):
        Trainer(fast_config, Intrinsics.default_for(32, 32))


def test_non_finite_loss_stops_training(tiny_dataset, fast_config, monkeypatch):
    dataset = SequenceDataset(tiny_dataset)
    monkeypatch.setattr(pipeline, "total_loss",
                        lambda *args, **kwargs: (Tensor(np.nan), {"total": float("nan")}))
    trainer = Trainer(replace(fast_config, use_pbr=False), dataset.intrinsics)
    with pytest.raises(NonFiniteLossError) as excinfo:
        trainer.step(dataset.batch([0, 1]), 1e-4)
    assert excinfo.value.iteration == 0


def test_training_is_reproducible(tiny_dataset, fast_config, tmp_path):
    first = train(fast_config, tiny_dataset, tmp_path / "a")
    second = train(fast_config, tiny_dataset, tmp_path / "b")
    log = (tmp_path / "a" / "train_log.jsonl").read_bytes()
    assert log == (tmp_path / "b" / "train_log.jsonl").read_bytes()
    assert first.models.depth_net.fingerprint() == second.models.depth_net.fingerprint()
    for name in ("checkpoint.bin", "stats.bin", "config.txt"):
        assert (tmp_path / "a" / name).exists()
    record = first.history[0]
    assert record["epoch"] == 0 and record["iterations"] == 2
    assert record["lr"] == pytest.approx(lr_schedule(1, 0, fast_config))
    assert {"total", "photometric", "generator"} <= set(record["loss"])
    assert first.metrics.count > 0
    assert first.stats.updates == 4
    assert TrainConfig.load(tmp_path / "a" / "config.txt", use_env=False) == fast_config


def test_train_rejects_resolution_mismatch(tiny_dataset, fast_config):
    with pytest.raises(DatasetError):
        train(replace(fast_config, height=64, width=64), tiny_dataset)


def test_checkpoint_round_trip(tmp_path, fast_config):
    models = Models.create(7)
    path = tmp_path / "checkpoint.bin"
    save_checkpoint(path, models, replace(fast_config, seed=3))
    loaded = load_checkpoint(path)
    assert loaded.config == replace(fast_config, seed=3)
    assert loaded.models.depth_net.fingerprint() == models.depth_net.fingerprint()
    assert loaded.models.pose_net.fingerprint() == models.pose_net.fingerprint()
    np.testing.assert_array_equal(loaded.models.discriminator.params["w2"].data,
                                  models.discriminator.params["w2"].data.astype(np.float32))
    assert (loaded.height, loaded.width) == (32, 32)


def test_corrupt_checkpoints(tmp_path, fast_config):
    path = tmp_path / "checkpoint.bin"
    save_checkpoint(path, Models.create(0), fast_config)
    payload = path.read_bytes()
    with pytest.raises(CheckpointError, match="truncated"):
        (tmp_path / "short.bin").write_bytes(payload[:-10])
        load_checkpoint(tmp_path / "short.bin")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        (tmp_path / "magic.bin").write_bytes(b"XXXX" + payload[4:])
        load_checkpoint(tmp_path / "magic.bin")
    with pytest.raises(CheckpointError, match="version"):
        (tmp_path / "version.bin").write_bytes(payload[:4] + b"\x09" + payload[5:])
        load_checkpoint(tmp_path / "version.bin")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.bin")


def test_predict_and_masks(tmp_path, tiny_dataset, fast_config):
    path = tmp_path / "checkpoint.bin"
    save_checkpoint(path, Models.create(0), fast_config)
    checkpoint = load_checkpoint(path)
    dataset = SequenceDataset(tiny_dataset)
    batch = dataset.batch([2])
    target, source = batch.target[0].transpose(1, 2, 0), batch.following[0].transpose(1, 2, 0)
    depth = predict(path, target)
    assert depth.shape == (32, 32) and depth.min() > 0
    with pytest.raises(ResolutionMismatchError):
        predict(checkpoint, np.zeros((16, 16, 3)))

    state = sbm.update_stats(sbm.EwmaHistogramState(), sbm.pixel_difference(target, source))
    maps = mask_maps(checkpoint, target, source, state, epsilon=20.0)
    assert set(maps) == {"auto", "stats", "combined"}
    for value in maps.values():
        assert value.shape == (32, 32)
    np.testing.assert_array_equal(maps["combined"], maps["auto"] * maps["stats"])
    assert 0.0 < maps["stats"].mean() < 1.0
    with pytest.raises(ResolutionMismatchError):
        mask_maps(checkpoint, target, np.zeros((8, 8, 3)), state, 20.0)


def test_evaluate_checkpoint(tmp_path, tiny_dataset, fast_config):
    path = tmp_path / "checkpoint.bin"
    save_checkpoint(path, Models.create(0), fast_config)
    report = evaluate_checkpoint(path, tiny_dataset)
    assert report.count > 0
    assert 0.0 <= report.delta1 <= report.delta2 <= report.delta3 <= 1.0


def test_sweep_rejects_unknown_parameter(tiny_dataset, fast_config):
    with pytest.raises(ConfigError):
        sweep(fast_config, tiny_dataset, "alpha", [0.5])


def test_ablation_checks():
    results = {
        "baseline": [_report(0.30), _report(0.32), _report(0.31)],
        "pbr_only": [_report(0.22), _report(0.26), _report(0.30)],
        "mcie_only": [_report(0.25), _report(0.28), _report(0.29)],
        "sbm_only": [_report(0.27), _report(0.30), _report(0.32)],
        "full": [_report(0.20), _report(0.24), _report(0.25)],
    }
    assert ablation_checks(results) == {"full_beats_baseline": True, "pbr_largest_gain": True,
                                        "no_component_hurts": True}
    results["full"][1] = _report(0.33)
    results["sbm_only"][2] = _report(0.40)
    results["pbr_only"][0] = _report(0.26)
    assert ablation_checks(results) == {"full_beats_baseline": False, "pbr_largest_gain": False,
                                        "no_component_hurts": False}


@pytest.mark.slow
def test_sweep_trains_once_per_value(tiny_dataset, fast_config):
    results = sweep(fast_config, tiny_dataset, "epsilon", [0, 10, 20])
    assert [value for value, _ in results] == [0.0, 10.0, 20.0]
    assert all(report.count > 0 for _, report in results)


@pytest.mark.slow
def test_ablation_runs_every_row(tiny_dataset, fast_config):
    results = pipeline.ablate(fast_config, tiny_dataset, seeds=[0, 1])
    assert set(results) == set(pipeline.ABLATION_ROWS)
    assert all(len(reports) == 2 for reports in results.values())
    assert set(ablation_checks(results)) == {"full_beats_baseline", "pbr_largest_gain", "no_component_hurts"}


def test_perfect_reconstruction_leaves_only_smoothness():
    pe_maps = [Tensor(np.zeros((1, 1, 2, 2)))] * 2
    masks = [np.ones((1, 1, 2, 2))] * 2
    loss, _ = total_loss(pe_maps, masks, Tensor(0.4), LossWeights(eta=1e-3))
    assert loss.item() == pytest.approx(4e-4)


def test_mcie_never_touches_network_inputs(tiny_dataset, fast_config):
    dataset = SequenceDataset(tiny_dataset)
    batch = dataset.batch([0, 1])
    models = Models.create(0)
    inputs = {}
    for use_mcie in (False, True):
        cfg = replace(fast_config, use_mcie=use_mcie)
        tracker = sbm.get_stats_tracker(cfg.stats_mode, cfg.beta, cfg.epsilon)
        inputs[use_mcie] = compute_losses(models, batch, cfg, dataset.intrinsics, tracker).network_inputs
    for a, b in zip(inputs[False], inputs[True]):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("use_pbr", [False, True])
@pytest.mark.parametrize("use_mcie", [False, True])
@pytest.mark.parametrize("use_sbm", [False, True])
def test_every_module_combination_trains(tiny_dataset, fast_config, use_pbr, use_mcie, use_sbm):
    dataset = SequenceDataset(tiny_dataset)
    cfg = replace(fast_config, use_pbr=use_pbr, use_mcie=use_mcie, use_sbm=use_sbm)
    refs = ReferenceDepthSet.load(tiny_dataset / "references") if use_pbr else None
    trainer = Trainer(cfg, dataset.intrinsics, refs)
    disc_before = trainer.models.discriminator.params["w1"].data.copy()
    components = trainer.step(dataset.batch([0, 1]), 1e-4)
    assert np.isfinite(components["total"])
    assert ("generator" in components) == use_pbr
    # without the prior the discriminator is never updated
    assert np.array_equal(trainer.models.discriminator.params["w1"].data, disc_before) == (not use_pbr)


def test_regularization_only_training_step(tiny_dataset, fast_config):
    dataset = SequenceDataset(tiny_dataset)
    cfg = replace(fast_config, use_photometric=False)
    trainer = Trainer(cfg, dataset.intrinsics, ReferenceDepthSet.load(tiny_dataset / "references"))
    components = trainer.step(dataset.batch([0, 1]), 1e-4)
    assert "photometric" not in components and "generator" in components


def test_prediction_stays_inside_decode_range(tmp_path, tiny_dataset, fast_config):
    path = tmp_path / "checkpoint.bin"
    save_checkpoint(path, Models.create(1), fast_config)
    frame = SequenceDataset(tiny_dataset).batch([0]).target[0].transpose(1, 2, 0)
    first, second = predict(path, frame), predict(path, frame)
    assert first.min() > 0.5 and first.max() < 50.0
    np.testing.assert_array_equal(first, second)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    cfg = DatasetConfig(num_triplets=50, num_day_triplets=1, height=32, width=32, seed=11)
    return make_dataset(cfg, root, progress=False)


def test_photometric_training_lowers_the_loss(small_dataset):
    cfg = TrainConfig(height=32, width=32, epochs=16, batch_size=4, seed=0, warmup_iters=0, val_fraction=0.0,
                      use_pbr=False, use_mcie=False, use_sbm=False, progress=False).validate()
    history = train(cfg, small_dataset).history
    assert history[-1]["iterations"] == 16 * 13
    assert history[-1]["loss"]["total"] < history[0]["loss"]["total"]


@pytest.mark.slow
def test_training_halves_held_out_abs_rel(tmp_path):
    root = make_dataset(DatasetConfig(num_triplets=400, num_day_triplets=1, height=32, width=32, seed=21),
                        tmp_path, progress=False)
    cfg = TrainConfig(height=32, width=32, epochs=30, batch_size=8, seed=0, warmup_iters=0, val_fraction=0.2,
                      use_pbr=False, use_mcie=False, use_sbm=False, progress=False).validate()
    dataset = SequenceDataset(root, "night")
    _, held_out = split_indices(len(dataset), cfg.val_fraction)
    untrained = evaluate_depth_net(Models.create(cfg.seed).depth_net, dataset, held_out, cfg.eval_config())
    trained = train(cfg, root).metrics
    assert trained.abs_rel <= 0.5 * untrained.abs_rel, f"{untrained.abs_rel:.4f} -> {trained.abs_rel:.4f}"


@pytest.mark.slow
def test_ablation_directions_at_full_scale(tmp_path):
    root = make_dataset(DatasetConfig(num_triplets=2000, height=64, width=64, seed=0), tmp_path, progress=False)
    cfg = TrainConfig(height=64, width=64, epochs=20, progress=False).validate()
    results = pipeline.ablate(cfg, root, seeds=[0, 1, 2])
    table = {row: [round(r.abs_rel, 4) for r in reports] for row, reports in results.items()}
    assert ablation_checks(results) == {"full_beats_baseline": True, "pbr_largest_gain": True,
                                        "no_component_hurts": True}, table
