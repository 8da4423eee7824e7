import numpy as np
import pytest

from fusionreid import autodiff as ad
from fusionreid import imageops as iops
from fusionreid import model as md
from fusionreid import textproc as tp
from fusionreid.errors import ConfigError, IntegrityError

from helpers import check_gradients

VOCAB = tp.build_vocab(["a slim person wearing red shirt and blue pants in front"])


def make_model(depth=2, width=32, heads=4, seed=0, patch=16, vocab_size=None):
    enc = md.EncoderConfig(depth=depth, width=width, heads=heads,
                           mlp_ratio=2, max_positions=64)
    cfg = md.ModelConfig(patch_size=patch, caption_len=8,
                         vocab_size=vocab_size or len(VOCAB),
                         image=enc, text=enc, fusion=enc)
    return md.Model(cfg, np.random.default_rng(seed))


def rand_grids(n, seed=0, h=64, w=32, p=16):
    rng = np.random.default_rng(seed)
    return [iops.patchify(rng.uniform(0, 1, (h, w, 3)), p) for _ in range(n)]


def encode_caption(text="a slim person wearing red shirt"):
    return tp.encode(text, VOCAB, 8)


def test_encoder_config_validation():
    with pytest.raises(ConfigError):
        md.EncoderConfig(width=30, heads=4)
    with pytest.raises(ConfigError):
        md.EncoderConfig(depth=-1)


def test_image_encoding_shapes():
    model = make_model()
    enc = model.encode_image(rand_grids(2))
    assert enc.seq.shape == (2, 9, 32)
    assert enc.patch_states().shape == (2, 8, 32)
    assert enc.cls().shape == (2, 32)


def test_image_encoding_deterministic():
    a = make_model().encode_image(rand_grids(1)).seq.data
    b = make_model().encode_image(rand_grids(1)).seq.data
    assert np.array_equal(a, b)


def test_changing_one_patch_moves_cls():
    model = make_model()
    grids = rand_grids(1)
    base = model.encode_image(grids).cls().data.copy()
    grids[0].patches[5] += 0.25
    moved = model.encode_image(grids).cls().data
    assert np.max(np.abs(moved - base)) > 1e-8


def test_depth_zero_image_encoder_is_embedding_only():
    model = make_model(depth=0)
    grids = rand_grids(1)
    enc = model.encode_image(grids)
    w = model.params["img.patch_proj.w"].data
    b = model.params["img.patch_proj.b"].data
    pos = model.params["img.pos"].data
    want_patches = grids[0].patches @ w + b + pos[1:9]
    assert np.allclose(enc.patch_states().data[0], want_patches, atol=1e-12)
    want_cls = model.params["img.cls"].data + pos[0]
    assert np.allclose(enc.cls().data[0], want_cls, atol=1e-12)


def test_masked_patches_use_mask_embedding():
    model = make_model(depth=0)
    grids = rand_grids(1)
    plan = iops.ImageMaskPlan(np.array([3]), "random")
    enc = model.encode_image(grids, plans=[plan])
    pos = model.params["img.pos"].data
    want = model.params["img.mask"].data + pos[4]
    assert np.allclose(enc.patch_states().data[0, 3], want, atol=1e-12)


def test_sequence_overflow_rejected():
    model = make_model(patch=4)  # 16x8=128 patches > 64 positions
    with pytest.raises(ConfigError, match="max_positions"):
        model.encode_image(rand_grids(1, p=4))


def test_text_encoding_shapes_and_padding_insensitivity():
    model = make_model()
    seq = encode_caption("a slim person")
    enc = model.encode_text([seq])
    assert enc.seq.shape == (1, 8, 32)
    base = enc.cls().data.copy()
    altered = seq.copy()
    altered.ids[6] = 5  # a padding slot; attention mask still False there
    moved = model.encode_text([altered]).cls().data
    assert np.array_equal(base, moved)


def test_text_token_order_matters():
    model = make_model()
    a = model.encode_text([encode_caption("red shirt blue pants")]).cls().data
    b = model.encode_text([encode_caption("shirt red blue pants")]).cls().data
    assert np.max(np.abs(a - b)) > 1e-8


def test_fuse_shapes_and_spans():
    model = make_model()
    grids = rand_grids(2)
    txt = model.encode_text([encode_caption(), encode_caption()])
    fused = model.fuse(model.encode_image(grids), txt)
    assert fused.seq.shape == (2, 1 + 8 + 8, 32)
    assert fused.image_span == (1, 9) and fused.text_span == (9, 17)
    assert fused.image_states().shape == (2, 8, 32)


def test_depth_zero_fusion_is_projection():
    model = make_model(depth=0)
    grids = rand_grids(1)
    img = model.encode_image(grids)
    txt = model.encode_text([encode_caption()])
    fused = model.fuse(img, txt)
    want = img.patch_states().data[0] @ model.params["mm.proj_img.w"].data \
        + model.params["mm.proj_img.b"].data
    assert np.allclose(fused.image_states().data[0], want, atol=1e-12)


def test_cross_attention_is_live():
    model = make_model()
    grids = rand_grids(1)
    img = model.encode_image(grids)
    a = model.fuse(img, model.encode_text([encode_caption("red shirt")]))
    img2 = model.encode_image(grids)
    b = model.fuse(img2, model.encode_text([encode_caption("blue pants")]))
    diff = np.abs(a.image_states().data - b.image_states().data)
    assert diff.max() > 1e-8


def test_attention_rows_are_distributions():
    model = make_model()
    enc = model.encode_image(rand_grids(2), collect_attn=True)
    assert len(enc.attention) == 2
    for attn in enc.attention:
        assert np.max(np.abs(attn.sum(axis=-1) - 1.0)) < 1e-10
    txt = model.encode_text([encode_caption("a person")], collect_attn=False)
    fused = model.fuse(model.encode_image(rand_grids(1)), txt)
    assert fused.seq.shape[1] == 17


def test_gradient_flow_through_patch_projection():
    model = make_model(depth=2, width=8, heads=2, patch=4)
    grids = rand_grids(1, h=8, w=8, p=4)  # 4 patches, 48-dim pixels

    wp = model.params["img.patch_proj.w"]
    params = [wp]

    def build():
        img = model.encode_image(grids)
        txt = model.encode_text([encode_caption("a person")])
        fused = model.fuse(img, txt)
        return ad.sum_all(fused.cls())

    check_gradients(build, params)


def test_fd_scale_by():
    x = ad.parameter(np.random.default_rng(0).uniform(-1, 1, (3, 3)))
    s = ad.parameter(np.array(0.7))
    check_gradients(lambda: ad.sum_all(ad.mul(y := ad.scale_by(x, s), y)), [x, s])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    model = make_model(seed=3)
    path = tmp_path / "model.ckpt"
    md.save_checkpoint(path, md.model_arrays(model), extra={"step": 7})
    arrays, extra = md.load_checkpoint(path)
    assert extra == {"step": 7}
    assert set(arrays) == set(model.params)
    for name, arr in arrays.items():
        assert np.array_equal(arr, model.params[name].data)


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    model = make_model(seed=3)
    arrays = md.model_arrays(model).copy()
    arrays["img.cls"] = np.zeros(7)
    with pytest.raises(IntegrityError, match="img.cls"):
        md.load_into_model(model, arrays)


def test_partial_load_for_finetune(tmp_path):
    pre = make_model(seed=1)
    path = tmp_path / "pre.ckpt"
    md.save_checkpoint(path, md.model_arrays(pre))
    arrays, _ = md.load_checkpoint(path)
    tuned = make_model(seed=2)
    tuned.ensure_id_head(10, 32, np.random.default_rng(0))
    loaded = md.load_into_model(tuned, arrays)
    assert "head.id.w" not in loaded
    assert np.array_equal(tuned.params["img.cls"].data, pre.params["img.cls"].data)
    with pytest.raises(IntegrityError):
        md.load_into_model(tuned, arrays, strict=True)


def test_restore_model_recreates_id_head(tmp_path):
    model = make_model(seed=5)
    model.ensure_id_head(12, 32, np.random.default_rng(1))
    path = tmp_path / "tuned.ckpt"
    md.save_checkpoint(path, md.model_arrays(model))
    arrays, _ = md.load_checkpoint(path)
    back = md.restore_model(model.cfg, arrays, np.random.default_rng(9))
    assert back.num_id_classes == 12
    for name in model.params:
        assert np.array_equal(back.params[name].data, model.params[name].data)
