import numpy as np
import pytest

from mmvdiff import tensor as T
from mmvdiff.conditioning import with_dropped
from mmvdiff.errors import ConfigError, ShapeError
from mmvdiff.mmdit import CrossModalBlock, MMDiTConfig
from mmvdiff.pipeline import DiffusionModel, ModelConfig
from mmvdiff.tensor import Tape, Tensor
from mmvdiff.text import ScenePrompt
from mmvdiff.toyscene import CameraRig, LayoutMaps, make_scene
from mmvdiff.toyscene.io import SceneSample

from models import jitter, small_config

@pytest.fixture(scope="module")
def scene():
    return make_scene(5, views=2, frames=3, height=16, width=16)


def _inputs(model, scene, seed=0):
    prep = model.prepare(scene)
    conds = model.encode_conditions(prep)
    x = np.random.default_rng(seed).standard_normal(prep.latents.shape).astype(np.float32)
    return prep, conds, x


def test_config_validation():
    with pytest.raises(ConfigError):
        MMDiTConfig(layers=2, alpha1=3).validate()
    with pytest.raises(ConfigError):
        MMDiTConfig(width=10, heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(modalities=("rgb", "lidar"))


def test_output_shape_and_input_check(scene):
    model = DiffusionModel(small_config())
    _, conds, x = _inputs(model, scene)
    assert model.predict_noise(x, 500, conds).shape == x.shape
    with pytest.raises(ShapeError):
        model.dit(Tensor(np.zeros((2, 2, 3, 2, 2, 32), dtype=np.float32)), conds, 500)


def test_trunk_is_transparent_at_init_for_any_depth(scene):
    outs = []
    for n in (1, 2, 4):
        model = DiffusionModel(small_config(layers=n, alpha1=1, alpha2=1))
        _, conds, x = _inputs(model, scene)
        outs.append(model.predict_noise(x, [100, 400, 900], conds).data)
    np.testing.assert_array_equal(outs[0], outs[1])
    np.testing.assert_array_equal(outs[0], outs[2])


def test_every_block_is_identity_at_init(scene):
    model = DiffusionModel(small_config())
    _, conds, x = _inputs(model, scene)
    dit = model.dit
    rng = np.random.default_rng(1)
    h = Tensor(rng.standard_normal((3, 2, 3, 2, 2, 16)).astype(np.float32))
    t_emb = dit.time(np.array([10, 20, 30]))
    temporal, st = dit.layers[0]
    np.testing.assert_array_equal(temporal[0](h, conds.text_context(), t_emb).data, h.data)
    cells = dit.cell_features(conds.spatial_queries((2, 2)))
    np.testing.assert_array_equal(st(h, cells, t_emb).data, h.data)
    np.testing.assert_array_equal(dit._cross_modal(h, dit.cross_modal[0], t_emb).data, h.data)


def test_execution_trace_interleave(scene):
    model = DiffusionModel(small_config())
    _, conds, x = _inputs(model, scene)
    model.predict_noise(x, 500, conds)
    layer = ["T", "T", "ST"]
    assert model.dit.trace == layer * 2 + ["CM"] + layer * 2 + ["CM"]


@pytest.mark.parametrize("st, cm, expected", [
    (False, False, ["T", "T"] * 4),
    (False, True, ["T", "T"] * 2 + ["CM"] + ["T", "T"] * 2 + ["CM"]),
])
def test_trace_with_blocks_disabled(scene, st, cm, expected):
    model = DiffusionModel(small_config(use_spatiotemporal=st, use_cross_modal=cm))
    _, conds, x = _inputs(model, scene)
    model.predict_noise(x, 500, conds)
    assert model.dit.trace == expected


def test_shared_weights_exist_once_and_heads_are_distinct():
    model = DiffusionModel(small_config())
    dit = model.dit
    shared = dit.shared_parameter_names()
    assert any(n.startswith("layers") for n in shared)
    # one temporal stack per layer regardless of M
    single = DiffusionModel(small_config(modalities=("rgb",))).dit
    assert len(single.shared_parameter_names()) == len(shared)
    ws = [h.linear.weight for h in dit.heads]
    assert len({id(w) for w in ws}) == 3
    assert not np.array_equal(ws[0].data, ws[1].data) and not np.array_equal(ws[1].data, ws[2].data)
    assert len(dit.cross_modal[0]) == 3


def test_modality_loss_reaches_only_its_own_head(scene):
    model = jitter(DiffusionModel(small_config()))
    _, conds, x = _inputs(model, scene)
    params = dict(model.dit.named_parameters())
    with Tape():
        out = model.predict_noise(x, 300, conds)
        loss = T.sum_(T.square(out[0]))
        grads = dict(zip(params, T.backward(loss, list(params.values()))))
    assert np.abs(grads["heads.0.linear.weight"]).max() > 0
    assert not grads["heads.1.linear.weight"].any() and not grads["heads.2.linear.weight"].any()
    assert np.abs(grads["layers.0.0.0.mod.proj.weight"]).max() > 0


def test_gradients_reach_every_used_parameter(scene):
    model = jitter(DiffusionModel(small_config()))
    prep, _, x = _inputs(model, scene)
    named = dict(model.named_parameters())
    with Tape():
        out = model.predict_noise(x, 300, model.encode_conditions(prep))
        grads = T.backward(T.sum_(T.square(out)), list(named.values()))
    dead = [n for n, g in zip(named, grads) if not np.abs(g).max() > 0]
    # null embeddings only enter when a family is dropped
    assert sorted(dead) == ["encoder.null_layout", "encoder.null_text"]
    with Tape():
        conds = with_dropped(model.encode_conditions(prep), text=True, layout=True)
        out = model.predict_noise(x, 300, conds)
        g_null = T.backward(T.sum_(T.square(out)), [named["encoder.null_layout"], named["encoder.null_text"]])
    assert all(np.abs(g).max() > 0 for g in g_null)


def test_single_modality_cross_block_falls_back_to_self_attention():
    rng = np.random.default_rng(0)
    block = CrossModalBlock(8, 2, rng)
    jitter(block)
    h = Tensor(rng.standard_normal((1, 5, 8)).astype(np.float32))
    t_emb = Tensor(rng.standard_normal((1, 8)).astype(np.float32))
    np.testing.assert_array_equal(block(h, [], t_emb).data, block(h, [h], t_emb).data)


def test_single_modality_model_runs(scene):
    model = jitter(DiffusionModel(small_config(modalities=("depth",))))
    _, conds, x = _inputs(model, scene)
    assert model.predict_noise(x, 500, conds).shape == x.shape
    assert "CM" in model.dit.trace


def test_modalities_get_different_predictions(scene):
    model = jitter(DiffusionModel(small_config()))
    _, conds, _ = _inputs(model, scene)
    x = np.broadcast_to(np.random.default_rng(3).standard_normal((1, 2, 3, 2, 2, 16)), (3, 2, 3, 2, 2, 16))
    out = model.predict_noise(np.ascontiguousarray(x, dtype=np.float32), 500, conds).data
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.abs(out[i] - out[j]).max() > 1e-4


def _swap_views(sample: SceneSample) -> SceneSample:
    rig = CameraRig(sample.rig.cameras[::-1])
    prompt = ScenePrompt(list(sample.prompt.caption_tokens), np.asarray(sample.prompt.camera_params)[::-1])
    layout = LayoutMaps(*(m[::-1].copy() for m in sample.layout.as_tuple()))
    frames = type(sample.frames)(*(a[::-1].copy() for a in (sample.frames.rgb, sample.frames.depth,
                                                              sample.frames.semantic)))
    return SceneSample(sample.seed, sample.world, rig, frames, layout, sample.occupancy, prompt, sample.caption)


def test_view_swap_equivariance(scene):
    model = jitter(DiffusionModel(small_config()))
    prep, conds, x = _inputs(model, scene)
    swapped = _swap_views(scene)
    sprep = model.prepare(swapped)
    sconds = model.encode_conditions(sprep)
    a = model.predict_noise(x, 500, conds).data
    b = model.predict_noise(np.ascontiguousarray(x[:, ::-1]), 500, sconds).data
    np.testing.assert_allclose(b, a[:, ::-1], atol=2e-5)
    assert np.abs(a[:, 0] - a[:, 1]).max() > 1e-4
