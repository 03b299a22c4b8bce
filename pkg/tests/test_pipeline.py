import numpy as np
import pytest

from mmvdiff.codec import DEPTH_MAX
from mmvdiff.diffusion import ddim_timesteps, sample_loop
from mmvdiff.errors import ConfigError
from mmvdiff.conditioning import with_dropped
from mmvdiff.pipeline import (MODALITIES, DiffusionModel, config_hash, image_to_modality,
                              modality_to_image)
from mmvdiff.toyscene import make_scene

from models import jitter, small_config

STEPS = 4


@pytest.fixture(scope="module")
def model():
    return jitter(DiffusionModel(small_config()), seed=3)


@pytest.fixture(scope="module")
def prepared(model):
    return model.prepare(make_scene(1, views=2, frames=3, height=16, width=16))


def _single_branch_reference(model, prepared, conds, seed):
    """Run the sampler with a denoiser that ignores the branch flag: CFG of equal branches is that branch."""
    m = len(model.modalities)

    def denoise(latents, t, _conditional):
        return list(model.predict_noise(np.stack(latents), [t] * m, conds).data)

    shape = prepared.latents.shape[1:]
    out = sample_loop(denoise, [shape] * m, ddim_timesteps(model.config.num_train_steps, STEPS),
                      model.schedule, guidance=3.0, seed=seed, dtype=model.dtype,
                      x0_range=model.x0_range)
    return np.stack(out)


def test_sampling_is_bit_reproducible(model, prepared):
    a = model.sample(prepared, steps=STEPS, guidance=2.0, seed=11)
    b = model.sample(prepared, steps=STEPS, guidance=2.0, seed=11)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, model.sample(prepared, steps=STEPS, guidance=2.0, seed=12))


def test_guidance_one_is_the_conditional_branch(model, prepared):
    conds = with_dropped(model.encode_conditions(prepared), ref=True)
    ref = _single_branch_reference(model, prepared, conds, seed=4)
    assert np.array_equal(model.sample(prepared, steps=STEPS, guidance=1.0, seed=4), ref)


def test_guidance_zero_is_the_unconditional_branch(model, prepared):
    conds = with_dropped(model.encode_conditions(prepared), text=True, layout=True, ref=True)
    ref = _single_branch_reference(model, prepared, conds, seed=4)
    assert np.array_equal(model.sample(prepared, steps=STEPS, guidance=0.0, seed=4), ref)


@pytest.mark.parametrize("flags", [dict(use_text=False), dict(use_layout=False), dict(use_ref=True)])
def test_condition_flags_change_the_sample(model, prepared, flags):
    base = model.sample(prepared, steps=STEPS, guidance=1.0, seed=2)
    assert not np.array_equal(base, model.sample(prepared, steps=STEPS, guidance=1.0, seed=2, **flags))


def test_decoded_modalities_have_valid_ranges(model, prepared):
    out = model.decode(model.sample(prepared, steps=STEPS, guidance=1.0))
    assert set(out) == set(MODALITIES)
    assert out["rgb"].shape == (2, 3, 16, 16, 3)
    assert out["rgb"].min() >= 0 and out["rgb"].max() <= 1
    assert out["depth"].min() >= 0
    assert set(np.unique(out["semantic"])) <= set(range(5))


def test_ground_truth_decodes_near_itself(model, prepared):
    out = model.decode(prepared.latents)
    frames = prepared.sample.frames
    assert np.mean((out["rgb"] - frames.rgb) ** 2) < 0.02
    assert np.mean(out["semantic"] == frames.semantic) > 0.8


@pytest.mark.parametrize("name", MODALITIES)
def test_modality_image_round_trip(name, prepared):
    frames = {"rgb": prepared.sample.frames.rgb, "depth": prepared.sample.frames.depth,
              "semantic": prepared.sample.frames.semantic}[name]
    back = image_to_modality(name, modality_to_image(name, frames))
    if name == "depth":
        # sky carries no depth and decodes to the far cap; AbsRel masks it out
        sky = frames == 0
        assert np.all(back[sky] == DEPTH_MAX)
        back, frames = back[~sky], frames[~sky]
    np.testing.assert_allclose(back, frames, rtol=1e-5, atol=1e-6)


def test_frame_size_must_fit_patches():
    model = DiffusionModel(small_config())
    with pytest.raises(ConfigError):
        model.prepare(make_scene(0, views=1, frames=1, height=12, width=16))


def test_config_hash_is_canonical():
    a = small_config().to_dict()
    b = dict(reversed(list(a.items())))
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(small_config(width=32).to_dict())


def test_grey_images_map_to_zero_latents():
    model = DiffusionModel(small_config())
    assert np.abs(model.to_latents(np.full((1, 1, 8, 8, 3), 0.5))).max() < 1e-6


@pytest.mark.parametrize("scale", [1.0, 0.25])
def test_latent_round_trip_and_scale(scale, rng):
    full = DiffusionModel(small_config(latent_channels=192, latent_scale=scale))
    images = rng.uniform(size=(2, 2, 8, 16, 3))
    lat = full.to_latents(images)
    np.testing.assert_allclose(full.from_latents(lat), images, atol=1e-6)
    unit = DiffusionModel(small_config(latent_channels=192, latent_scale=1.0))
    np.testing.assert_allclose(lat, scale * unit.to_latents(images), rtol=1e-6, atol=1e-9)


def test_x0_range_covers_valid_latents(model, rng):
    lo, hi = model.x0_range
    lat = model.to_latents(rng.uniform(size=(2, 3, 16, 16, 3)))
    assert np.all(lat >= lo - 1e-5) and np.all(lat <= hi + 1e-5)
    lat = model.to_latents(np.ones((1, 1, 8, 8, 3)))
    assert lat[..., 0].item() == pytest.approx(hi[0], rel=1e-5)


def test_latent_scale_must_be_positive():
    with pytest.raises(ConfigError):
        small_config(latent_scale=0.0)
