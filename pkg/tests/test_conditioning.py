import numpy as np
import pytest

from mmvdiff import tensor as T
from mmvdiff.conditioning import (ConditionEncoder, TextCameraEncoder, UnifiedLayoutEncoder, assemble_pre,
                                  conditioning_dropout, draw_dropout, reference_block, with_dropped)
from mmvdiff.errors import ContractError, ShapeError, VocabularyError
from mmvdiff.tensor import Tensor
from mmvdiff.text import ScenePrompt, Vocabulary, default_vocabulary
from mmvdiff.toyscene import LayoutMaps, make_scene


@pytest.fixture(scope="module")
def scene():
    return make_scene(3, views=2, frames=3, height=16, width=16)


@pytest.fixture(scope="module")
def encoder():
    return ConditionEncoder(np.random.default_rng(0), latent_channels=4, text_dim=8, cond_dim=6)


def _rand_maps(rng, v=2, k=3, h=16, w=16):
    return LayoutMaps(*(rng.uniform(size=(v, k, h, w, 3)).astype(np.float32) for _ in range(3)))


# -- text and camera ----------------------------------------------------------------


def test_vocabulary_round_trip_and_unknown_token(tmp_path):
    vocab = default_vocabulary()
    ids = vocab.encode("two red car moving left")
    assert vocab.decode(ids) == "two red car moving left"
    with pytest.raises(VocabularyError):
        vocab.encode("purple car")
    vocab.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt").tokens == vocab.tokens


def test_prompt_validation(scene):
    with pytest.raises(VocabularyError):
        ScenePrompt([10_000], scene.prompt.camera_params).validate(64)
    bad = np.array(scene.prompt.camera_params)
    bad[0, 0] = 0.0
    with pytest.raises(ContractError):
        ScenePrompt([], bad).validate(64)


def test_empty_caption_gives_one_row_per_view(scene):
    enc = TextCameraEncoder(len(default_vocabulary()), 8, np.random.default_rng(0))
    out = enc(ScenePrompt([], scene.prompt.camera_params))
    assert out.shape == (2, 8)
    full = enc(scene.prompt)
    assert full.shape == (2 + len(scene.prompt.caption_tokens), 8)
    np.testing.assert_array_equal(enc(scene.prompt).data, full.data)


def test_token_permutation_permutes_rows(scene):
    enc = TextCameraEncoder(len(default_vocabulary()), 8, np.random.default_rng(0))
    tokens = [3, 7, 11, 2]
    perm = [2, 0, 3, 1]
    a = enc(ScenePrompt(tokens, scene.prompt.camera_params)).data
    b = enc(ScenePrompt([tokens[i] for i in perm], scene.prompt.camera_params)).data
    np.testing.assert_array_equal(b[:2], a[:2])
    np.testing.assert_array_equal(b[2:], a[2:][perm])


def test_text_table_is_frozen():
    enc = TextCameraEncoder(20, 8, np.random.default_rng(0))
    names = [n for n, _ in enc.named_parameters()]
    assert names and all(n.startswith("camera_mlp") for n in names)


# -- layout ---------------------------------------------------------------------------


def test_layout_output_grid(rng):
    enc = UnifiedLayoutEncoder(6, rng)
    assert enc(_rand_maps(rng)).shape == (2, 3, 2, 2, 6)


def test_zero_maps_give_zero_embedding(rng):
    enc = UnifiedLayoutEncoder(6, rng)
    assert all(not p.data.any() for n, p in enc.named_parameters() if n.endswith("bias"))
    assert not enc(LayoutMaps.zeros(2, 3, 16, 16)).data.any()


@pytest.mark.parametrize("edit_frame", [0, 1, 2])
def test_layout_encoder_is_causal(edit_frame):
    rng = np.random.default_rng(edit_frame)
    enc = UnifiedLayoutEncoder(6, rng)
    maps = _rand_maps(rng)
    base = enc(maps).data
    for field in ("box_map", "road_map", "occ_layout_map"):
        edited = _rand_maps(rng)
        for name in ("box_map", "road_map", "occ_layout_map"):
            if name != field:
                setattr(edited, name, getattr(maps, name))
            else:
                arr = getattr(maps, name).copy()
                arr[:, edit_frame:] = getattr(edited, name)[:, edit_frame:]
                setattr(edited, name, arr)
        out = enc(edited).data
        np.testing.assert_array_equal(out[:, :edit_frame], base[:, :edit_frame])
        assert not np.array_equal(out[:, edit_frame], base[:, edit_frame])


def test_swapping_box_and_road_changes_output(rng):
    enc = UnifiedLayoutEncoder(6, rng)
    maps = _rand_maps(rng)
    swapped = LayoutMaps(maps.road_map, maps.box_map, maps.occ_layout_map)
    assert np.abs(enc(maps).data - enc(swapped).data).max() > 1e-4


def test_layout_shape_mismatch(rng):
    maps = _rand_maps(rng)
    maps.road_map = maps.road_map[:, :, :8]
    with pytest.raises(ShapeError):
        UnifiedLayoutEncoder(6, rng)(maps)


def test_codec_layout_encoder(scene):
    enc = ConditionEncoder(np.random.default_rng(0), latent_channels=4, text_dim=8, cond_dim=6,
                           layout_encoder="codec")
    assert enc.layout(scene.layout).shape == (2, 3, 2, 2, 6)
    with pytest.raises(ContractError):
        ConditionEncoder(np.random.default_rng(0), layout_encoder="bogus")


# -- input assembly -------------------------------------------------------------------


def test_reference_block_and_mask(rng):
    shape = (2, 3, 2, 2, 4)
    empty = reference_block(None, shape, np.float32)
    assert empty.shape == (2, 3, 2, 2, 5) and not empty.any()
    ref = rng.standard_normal((2, 1, 2, 2, 4))
    block = reference_block(ref, shape, np.float64)
    np.testing.assert_array_equal(block[:, 0, ..., :4], ref[:, 0])
    assert np.all(block[:, 0, ..., 4] == 1) and not block[:, 1:].any()
    with pytest.raises(ShapeError):
        reference_block(ref[:, :, :1], shape, np.float32)


def test_channel_arithmetic(encoder, scene):
    conds = encoder.encode(scene.prompt, scene.layout)
    x = Tensor(np.zeros((2, 3, 2, 2, 4), dtype=np.float32))
    z = encoder.assemble(conds, x)
    assert z.shape[-1] == encoder.input_channels == encoder.match_dim + 4


def test_reference_edit_touches_only_frame_zero_before_projection(encoder, scene, rng):
    f_layout = encoder.layout(scene.layout)
    shape = (2, 3, 2, 2, 4)
    a = assemble_pre(f_layout, rng.standard_normal((2, 1, 2, 2, 4)), shape).data
    b = assemble_pre(f_layout, rng.standard_normal((2, 1, 2, 2, 4)), shape).data
    diff = np.abs(a - b).max(axis=(0, 2, 3))  # [K, C]
    assert diff[0, 6:10].min() > 0 and not diff[1:].any() and not diff[:, :6].any()


def test_each_term_moves_its_own_channels(encoder, scene, rng):
    conds = encoder.encode(scene.prompt, scene.layout, reference=rng.standard_normal((2, 1, 2, 2, 4)))
    x = Tensor(rng.standard_normal((2, 3, 2, 2, 4)).astype(np.float32))
    base = encoder.assemble(conds, x).data
    cm = encoder.match_dim
    x2 = Tensor(x.data + 1.0)
    moved = np.abs(encoder.assemble(conds, x2).data - base).max(axis=(0, 1, 2, 3))
    assert not moved[:cm].any() and moved[cm:].min() > 0
    for family in ("layout", "ref"):
        dropped = encoder.assemble(with_dropped(conds, **{family: True}), x).data
        moved = np.abs(dropped - base).max(axis=(0, 1, 2, 3))
        assert moved[:cm].max() > 0 and not moved[cm:].any()


# -- dropout --------------------------------------------------------------------------


def test_dropout_extremes(encoder, scene):
    conds = encoder.encode(scene.prompt, scene.layout)
    kept = conditioning_dropout(conds, np.random.default_rng(0), 0.0, 0.0, 0.0)
    assert not any(kept.dropped.values())
    assert kept.text_context().data.shape == conds.text_context().data.shape
    gone = conditioning_dropout(conds, np.random.default_rng(0), 1.0, 1.0, 1.0)
    assert all(gone.dropped.values())
    np.testing.assert_array_equal(gone.layout_features().data, np.broadcast_to(encoder.null_layout.data,
                                                                               conds.f_layout.shape))
    assert gone.text_context().shape == (2, 1, 8)
    assert gone.active_reference() is None and gone.spatial_queries((2, 2)) is None


def test_dropout_rate_monte_carlo():
    rng = np.random.default_rng(42)
    drops = [draw_dropout(rng, 0.1, 0.1, 0.5) for _ in range(10_000)]
    rate = np.mean([d["text"] for d in drops])
    assert 0.09 <= rate <= 0.11
    assert 0.48 <= np.mean([d["ref"] for d in drops]) <= 0.52


def test_dropout_rejects_bad_probability():
    with pytest.raises(ContractError):
        draw_dropout(np.random.default_rng(0), 1.5, 0.1, 0.1)


def test_encoders_are_deterministic(encoder, scene):
    a = encoder.encode(scene.prompt, scene.layout)
    b = encoder.encode(scene.prompt, scene.layout)
    np.testing.assert_array_equal(a.f_text.data, b.f_text.data)
    np.testing.assert_array_equal(a.f_layout.data, b.f_layout.data)


def test_null_embeddings_start_at_zero(encoder):
    assert not encoder.null_text.data.any() and not encoder.null_layout.data.any()
    assert T.DEFAULT_DTYPE == encoder.null_text.data.dtype
