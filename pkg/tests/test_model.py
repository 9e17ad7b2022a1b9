import numpy as np
import pytest

from flamegaze.model import (
    RESOLUTIONS,
    VARIANTS,
    Checkpoint,
    ConfigError,
    GazeNet,
    ModelSpec,
    NonFiniteError,
    build_backbone,
    build_model,
    check_model_gradients,
    dense_fusion_forward,
    flame_forward,
    head_input_width,
    load_checkpoint,
    save_checkpoint,
    stage_shapes,
)
from flamegaze.nncore import ShapeError


def tiny(variant="FLAME", res=30, **kw):
    return GazeNet(ModelSpec.from_preset("tiny", variant=variant, input_resolution=res, **kw))


def batch(rng, n=4, res=30, dtype=np.float32):
    return dict(
        rgb=rng.random((n, res, res, 3)).astype(dtype),
        heatmap=rng.random((n, res, res, 28)).astype(dtype),
        pose=rng.normal(size=(n, 2)) * 0.2,
        landmarks=rng.random((n, 28, 2)) * res,
    )


def run(model, b, train=False):
    return model.forward(b["rgb"], b["heatmap"], b["pose"], b["landmarks"], train=train)


def test_stage_shapes_examples():
    assert stage_shapes(120, (64, 128, 256))[1:] == [(30, 30, 64), (15, 15, 128), (7, 7, 256)]
    assert stage_shapes(60, (64, 128, 256))[-1] == (3, 3, 256)


@pytest.mark.parametrize("cin", [3, 28])
def test_backbone_stage_outputs_match_shape_rule(rng, cin):
    spec = ModelSpec.from_preset("tiny", input_resolution=60, precision="float64")
    bb = build_backbone(spec, in_channels=cin)
    x = rng.random((2, 60, 60, cin))
    shapes = []
    for stage in bb.stages():
        x = stage.forward(x)
        shapes.append(x.shape[1:])
    assert shapes == stage_shapes(60, spec.channels)


def test_head_input_width_full_scale():
    assert head_input_width(ModelSpec(variant="FLAME", input_resolution=120)) == 7 * 7 * 256 + 2 == 12546
    assert head_input_width(ModelSpec(variant="DENSE_FUSION", input_resolution=120)) == 12546 + 256


def test_full_scale_head_layer_width():
    m = build_model(ModelSpec(variant="FLAME", input_resolution=120))
    assert m.children["head"].children["net"].children["fc1"].params["weight"].shape == (12546, 512)


@pytest.mark.parametrize("res", RESOLUTIONS)
@pytest.mark.parametrize("variant", VARIANTS)
def test_every_variant_forward_is_finite(rng, variant, res):
    out = run(tiny(variant, res), batch(rng, res=res))
    assert out.shape == (4, 2) and np.all(np.isfinite(out))


def test_output_is_linear_and_unbounded(rng):
    m = tiny("F_B")
    out_layer = m.children["head"].children["net"].children["out"]
    out_layer.params["bias"][...] = [50.0, -50.0]
    out = run(m, batch(rng))
    assert np.all(out[:, 0] > 40) and np.all(out[:, 1] < -40)


def test_parameter_counts_order():
    counts = {v: tiny(v).num_parameters() for v in VARIANTS}
    assert counts["F_B"] < counts["F_AF"] < counts["F_AO"] < counts["FLAME"]


def test_streams_are_symmetric_but_independent():
    m = tiny("FLAME")
    rgb = dict(m.children["rgb"].named_parameters())
    hm = dict(m.children["hm"].named_parameters())
    assert rgb.keys() == hm.keys()
    for k in rgb:
        if k == "stem.conv.weight":
            assert rgb[k].shape[2] == 3 and hm[k].shape[2] == 28
        else:
            assert rgb[k].shape == hm[k].shape
    assert not np.array_equal(rgb["module1.block1.conv1.weight"], hm["module1.block1.conv1.weight"])


def test_f_ao_equals_zero_excitation_flame(rng):
    flame = tiny("FLAME", zero_excitation=True, precision="float64")
    fao = tiny("F_AO", precision="float64")
    state = {k: v for k, v in flame.state_dict().items() if "transfer." not in k}
    fao.load_state_dict(state)
    b = batch(rng, dtype=np.float64)
    np.testing.assert_array_equal(run(flame, b), run(fao, b))
    np.testing.assert_array_equal(run(flame, b, train=True), run(fao, b, train=True))


def test_f_b_ignores_heatmap_flame_does_not(rng):
    b = batch(rng)
    b2 = dict(b, heatmap=rng.random(b["heatmap"].shape).astype(np.float32))
    fb, flame = tiny("F_B"), tiny("FLAME")
    np.testing.assert_array_equal(run(fb, b), run(fb, b2))
    assert not np.array_equal(run(flame, b), run(flame, b2))
    assert np.all(np.isfinite(fb.forward(b["rgb"], None, b["pose"])))


def test_dense_fusion_branch(rng):
    m = tiny("DENSE_FUSION")
    assert m.children["coords"].out_width == 32
    full = ModelSpec(variant="DENSE_FUSION")
    assert full.coord_widths[-1] == 256 and full.coord_first == 1024
    # zero landmarks through a zero-initialised branch give zero features
    for name, p in m.children["coords"].named_parameters():
        if not name.endswith("gamma"):
            p[...] = 0.0
    out = m.children["coords"].forward(np.zeros((3, 28, 2), np.float32), train=True)
    assert out.shape == (3, 32) and np.all(out == 0)
    b = batch(rng)
    np.testing.assert_array_equal(dense_fusion_forward(m, b["rgb"], b["landmarks"], b["pose"]), run(m, b))
    with pytest.raises(ConfigError):
        dense_fusion_forward(tiny("F_B"), b["rgb"], b["landmarks"], b["pose"])


def test_dense_fusion_uses_landmarks(rng):
    m = tiny("DENSE_FUSION")
    b = batch(rng)
    assert not np.array_equal(run(m, b), run(m, dict(b, landmarks=b["landmarks"] + 1.0)))


def test_eval_is_deterministic_train_is_not(rng):
    m = tiny("FLAME")
    b = batch(rng)
    np.testing.assert_array_equal(run(m, b), run(m, b))
    assert np.array_equal(flame_forward(m, b["rgb"], b["heatmap"], b["pose"]), run(m, b))
    assert not np.array_equal(run(m, b, train=True), run(m, b, train=True))


def test_shape_errors(rng):
    m = tiny("FLAME")
    b = batch(rng)
    with pytest.raises(ShapeError):
        m.forward(b["rgb"][:, :20], b["heatmap"], b["pose"])
    with pytest.raises(ShapeError):
        m.forward(b["rgb"], b["heatmap"][..., :3], b["pose"])
    with pytest.raises(ShapeError):
        m.forward(b["rgb"], b["heatmap"], b["pose"][:2])


def test_nan_guard(rng):
    m = tiny("FLAME")
    b = batch(rng)
    b["rgb"][0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        run(m, b)


@pytest.mark.parametrize(
    "kw",
    [
        dict(variant="F_X"),
        dict(channels=(8, 16)),
        dict(input_resolution=8),
        dict(dropout=1.0),
        dict(precision="float16"),
        dict(mmtm_z_activation="gelu"),
    ],
)
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        ModelSpec.from_preset("tiny", **kw)


def test_unknown_preset():
    with pytest.raises(ConfigError):
        ModelSpec.from_preset("huge")


def test_checkpoint_round_trip_is_byte_exact(tmp_path, rng):
    m = tiny("FLAME")
    run(m, batch(rng), train=True)  # move the BN running stats
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(Checkpoint.from_model(m, epoch=3, seed=7, meta={"note": "x"}), a)
    ck = load_checkpoint(a)
    assert ck.epoch == 3 and ck.seed == 7 and ck.spec == m.spec
    save_checkpoint(ck, b)
    assert a.read_bytes() == b.read_bytes()
    rebuilt = ck.build()
    bt = batch(rng)
    np.testing.assert_array_equal(run(rebuilt, bt), run(m, bt))


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_spec_dict_round_trip():
    spec = ModelSpec.from_preset("tiny", variant="F_AF", input_resolution=60)
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigError):
        ModelSpec.from_dict(dict(spec.to_dict(), bogus=1))


@pytest.mark.parametrize("variant", ["F_B", "DENSE_FUSION"])
def test_whole_model_gradients(variant):
    res = check_model_gradients(variant)
    assert res.checked > 50
    assert res.max_rel_error < 1e-4
