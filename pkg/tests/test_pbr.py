"""
Depth normalization, the coordinate-aware patch discriminator and LSGAN losses.
"""
import numpy as np
import pytest

import ndiff as nd
from ndiff import Tensor
from pbr import (DiscriminatorWeights, PBRError, ReferenceDepthSet, coord_image, discriminator_forward,
                 discriminator_output_size, discriminator_scores, lsgan_discriminator_loss, lsgan_generator_loss,
                 normalize_depth)


def test_coord_image_channels():
    coords = coord_image(4, 5)
    assert coords.shape == (4, 5, 2)
    np.testing.assert_allclose(coords[0, :, 0], [0, 0.25, 0.5, 0.75, 1.0])
    np.testing.assert_allclose(coords[:, 0, 1], [0, 1 / 3, 2 / 3, 1.0], rtol=1e-6)
    with pytest.raises(PBRError):
        coord_image(1, 5)


def test_normalized_depth_has_unit_mean(rng):
    depth = rng.uniform(1, 30, (3, 1, 8, 8))
    np.testing.assert_allclose(normalize_depth(depth).mean(axis=(-2, -1)), 1.0, rtol=1e-12)
    with nd.double_precision():
        out = normalize_depth(Tensor(depth))
    np.testing.assert_allclose(out.data.mean(axis=(-2, -1)), 1.0, rtol=1e-12)


@pytest.mark.parametrize("scale", [0.1, 3.0, 100.0])
def test_normalization_is_scale_invariant(rng, scale):
    depth = rng.uniform(1, 30, (1, 1, 6, 6))
    np.testing.assert_allclose(normalize_depth(scale * depth), normalize_depth(depth), rtol=1e-6)


def test_normalize_rejects_non_positive_depth():
    with pytest.raises(PBRError):
        normalize_depth(np.zeros((2, 2)))
    with pytest.raises(PBRError):
        normalize_depth(np.array([[1.0, np.nan]]))


def test_discriminator_output_shape():
    assert discriminator_output_size(64) == 15
    assert discriminator_output_size(32) == 7
    weights = DiscriminatorWeights.initialize(0)
    scores = discriminator_forward(np.ones((2, 1, 32, 32)), coord_image(32, 32), weights)
    assert scores.shape == (2, 1, 7, 7)


def test_discriminator_sees_coordinates():
    weights = DiscriminatorWeights.initialize(1, std=0.3)
    flat = np.ones((1, 1, 16, 16))
    scores = discriminator_forward(flat, coord_image(16, 16), weights).data
    # identical depth everywhere; any spatial variation comes from the coordinate channels
    assert np.ptp(scores) > 0


def test_discriminator_rejects_mismatched_coords():
    with pytest.raises(nd.ShapeMismatchError):
        discriminator_forward(np.ones((1, 1, 16, 16)), coord_image(8, 8), DiscriminatorWeights.initialize(0))


def test_zero_discriminator_scores_zero():
    scores = discriminator_forward(np.ones((1, 1, 16, 16)), coord_image(16, 16), DiscriminatorWeights.zeros())
    np.testing.assert_array_equal(scores.data, 0.0)
    assert lsgan_discriminator_loss(scores, scores).item() == pytest.approx(0.5)
    assert lsgan_generator_loss(scores).item() == pytest.approx(0.5)


def test_lsgan_constant_scores():
    half = np.full((2, 1, 3, 3), 0.5)
    assert lsgan_discriminator_loss(half, half).item() == 0.25
    assert lsgan_generator_loss(half).item() == 0.125


def test_lsgan_optimum():
    real, fake = np.ones((1, 1, 2, 2)), np.zeros((1, 1, 2, 2))
    assert lsgan_discriminator_loss(real, fake).item() == 0.0
    assert lsgan_generator_loss(real).item() == 0.0


def test_generator_gradient_reaches_depth(rng):
    depth = Tensor(rng.uniform(1, 10, (1, 1, 16, 16)), requires_grad=True)
    weights = DiscriminatorWeights.initialize(2, std=0.2)
    loss = lsgan_generator_loss(discriminator_forward(normalize_depth(depth), coord_image(16, 16), weights))
    loss.backward()
    assert depth.grad is not None and np.abs(depth.grad).sum() > 0


def test_reference_set_sampling_and_files(tmp_path, rng):
    depths = [rng.uniform(1, 40, (8, 8)).astype(np.float32) for _ in range(5)]
    refs = ReferenceDepthSet(depths, seed=9)
    batch = refs.sample(np.random.default_rng(0), 3)
    assert batch.shape == (3, 1, 8, 8) and batch.dtype == np.float32
    refs.save(tmp_path / "refs")
    manifest = (tmp_path / "refs" / "manifest.txt").read_text().splitlines()
    assert manifest[0] == "seed 9"
    assert manifest[1] == "reference_000000.pfm"
    loaded = ReferenceDepthSet.load(tmp_path / "refs")
    assert len(loaded) == 5 and loaded.seed == 9 and loaded.shape == (8, 8)
    np.testing.assert_array_equal(loaded.depths[3], depths[3])


def test_reference_set_validation(tmp_path):
    with pytest.raises(PBRError):
        ReferenceDepthSet([])
    with pytest.raises(PBRError):
        ReferenceDepthSet([np.ones((4, 4)), np.ones((4, 5))])
    with pytest.raises(PBRError):
        ReferenceDepthSet([np.zeros((4, 4))])
    with pytest.raises(PBRError):
        ReferenceDepthSet.load(tmp_path)


def test_interior_scores_follow_a_one_stride_translation(rng):
    x = rng.uniform(0.0, 1.0, (1, 3, 16, 64))
    with nd.double_precision():
        params = DiscriminatorWeights.initialize(5, std=0.2).params
        scores = discriminator_scores(Tensor(x), params).data
        shifted = discriminator_scores(Tensor(np.roll(x, 4, axis=-1)), params).data
    assert scores.shape == (1, 1, 3, 15)
    np.testing.assert_allclose(shifted[..., 4:12], scores[..., 3:11], atol=1e-10)
    assert not np.allclose(shifted[..., 4:12], scores[..., 4:12])
