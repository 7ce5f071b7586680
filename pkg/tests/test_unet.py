import numpy as np
import pytest

from mambaseg import nd, unet, weights_io
from mambaseg.nd import ops
from mambaseg.nd.tensor import ShapeError
from mambaseg.unet import ConfigError, ModelConfig

from oracles import rel_err


def small_config(**overrides):
    base = dict(input_h=32, input_w=32, num_classes=2, embed_dim=8, state_size=4)
    base.update(overrides)
    return ModelConfig(**base)


def layer_norm_ref(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


# ---------------------------------------------------------------------------
# configuration

def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        small_config(input_h=33)  # not divisible by patch * 2^stages
    with pytest.raises(ConfigError):
        small_config(num_classes=1)
    with pytest.raises(ConfigError):
        small_config(kernel_size=4)
    with pytest.raises(ConfigError):
        small_config(gate="concat")
    with pytest.raises(ConfigError):
        small_config(depths=(2, 0, 2))
    with pytest.raises(ConfigError):
        small_config(embed_dim=True)


def test_config_json_round_trip():
    cfg = small_config(depths=(1, 2, 1), share_projections=True, gate="add")
    assert unet.config_from_json(unet.config_to_json(cfg)) == cfg


def test_config_json_is_strict():
    with pytest.raises(ConfigError):
        unet.config_from_json('{"input_h": 32, "input_w": 32}')
    with pytest.raises(ConfigError):
        unet.config_from_json(
            '{"input_h": 32, "input_w": 32, "num_classes": 2, "dropout": 0.1}'
        )
    with pytest.raises(ConfigError):
        unet.config_from_json("[]")
    with pytest.raises(ConfigError):
        unet.config_from_json("not json")


# ---------------------------------------------------------------------------
# patch embedding

def test_patch_embed_output_extent(full_scale_trace):
    _, trace, _ = full_scale_trace
    assert trace["embed"] == (56, 56, 96)


def test_patch_embed_constant_image_gives_identical_tokens():
    rng = np.random.default_rng(0)
    w = nd.Tensor(rng.normal(size=(16, 4)))
    b = nd.Tensor(rng.normal(size=4))
    gain, bias = nd.Tensor(np.ones(4)), nd.Tensor(np.zeros(4))
    image = np.full((8, 8, 1), 3.25)
    tokens = unet.patch_embed(image, w, b, gain, bias, 4).data
    assert tokens.shape == (2, 2, 4)
    assert np.ptp(tokens, axis=(0, 1)).max() == 0.0


def test_patch_embed_matches_hand_oracle():
    rng = np.random.default_rng(1)
    image = rng.normal(size=(8, 8, 1))
    w = rng.normal(size=(16, 4))
    b = rng.normal(size=4)
    out = unet.patch_embed(
        image, nd.Tensor(w), nd.Tensor(b), nd.Tensor(np.ones(4)), nd.Tensor(np.zeros(4)), 4
    ).data

    expected = np.empty((2, 2, 4))
    for pi in range(2):
        for pj in range(2):
            vec = [
                image[4 * pi + di, 4 * pj + dj, ch]
                for di in range(4)
                for dj in range(4)
                for ch in range(1)
            ]
            expected[pi, pj] = layer_norm_ref(np.array(vec) @ w + b)
    assert rel_err(out, expected) < 1e-12


def test_patch_embed_rejects_indivisible_extent():
    w = nd.Tensor(np.zeros((16, 4)))
    z = nd.Tensor(np.zeros(4))
    with pytest.raises(ShapeError):
        unet.patch_embed(np.zeros((9, 8, 1)), w, z, z, z, 4)


# ---------------------------------------------------------------------------
# patch merge / expand / fuse

def test_space_to_depth_orders_quadrant_row_major():
    grid = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
    token = unet._space_to_depth(nd.Tensor(grid), 2).data
    assert np.array_equal(token, [[[1.0, 2.0, 3.0, 4.0]]])


def test_depth_to_space_inverts_space_to_depth():
    rng = np.random.default_rng(2)
    x = nd.Tensor(rng.normal(size=(3, 6, 4, 5)))
    back = unet._depth_to_space(unet._space_to_depth(x, 2), 2)
    assert np.array_equal(back.data, x.data)


def test_patch_merge_shapes(full_scale_trace):
    _, trace, _ = full_scale_trace
    assert trace["encoder.1"] == (28, 28, 192)


def test_patch_merge_matches_hand_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 4, 3))
    gain = rng.normal(size=12) + 1.0
    bias = rng.normal(size=12)
    w = rng.normal(size=(12, 6))
    b = rng.normal(size=6)
    out = unet.patch_merge(
        x, nd.Tensor(gain), nd.Tensor(bias), nd.Tensor(w), nd.Tensor(b)
    ).data

    expected = np.empty((2, 2, 6))
    for i in range(2):
        for j in range(2):
            vec = np.concatenate(
                [x[2 * i + di, 2 * j + dj] for di in range(2) for dj in range(2)]
            )
            expected[i, j] = (layer_norm_ref(vec) * gain + bias) @ w + b
    assert rel_err(out, expected) < 1e-12


def test_patch_merge_rejects_odd_extent():
    z = nd.Tensor(np.zeros(4))
    with pytest.raises(ShapeError):
        unet.patch_merge(np.zeros((3, 4, 1)), z, z, nd.Tensor(np.zeros((4, 2))), None)


def test_patch_expand_matches_hand_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(4, 8))
    b = rng.normal(size=8)
    gain = rng.normal(size=2) + 1.0
    bias = rng.normal(size=2)
    out = unet.patch_expand(
        x, nd.Tensor(w), nd.Tensor(b), nd.Tensor(gain), nd.Tensor(bias)
    ).data

    widened = x @ w + b
    expected = np.empty((4, 6, 2))
    for i in range(2):
        for j in range(3):
            for di in range(2):
                for dj in range(2):
                    lo = (di * 2 + dj) * 2
                    block = widened[i, j, lo : lo + 2]
                    expected[2 * i + di, 2 * j + dj] = (
                        layer_norm_ref(block) * gain + bias
                    )
    assert rel_err(out, expected) < 1e-12


def test_patch_expand_rejects_bad_width():
    z2 = nd.Tensor(np.zeros(2))
    with pytest.raises(ShapeError):
        unet.patch_expand(np.zeros((2, 2, 3)), nd.Tensor(np.zeros((3, 6))), z2, z2, z2)


def test_merge_expand_shape_round_trip():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 4, 8))
    merged = unet.patch_merge(
        x,
        nd.Tensor(np.ones(32)),
        nd.Tensor(np.zeros(32)),
        nd.Tensor(rng.normal(size=(32, 16))),
        nd.Tensor(np.zeros(16)),
    )
    assert merged.shape == (3, 2, 16)
    expanded = unet.patch_expand(
        merged,
        nd.Tensor(rng.normal(size=(16, 32))),
        nd.Tensor(np.zeros(32)),
        nd.Tensor(np.ones(8)),
        nd.Tensor(np.zeros(8)),
    )
    assert expanded.shape == x.shape


def test_skip_fuse_selection_and_average():
    rng = np.random.default_rng(6)
    dec = rng.normal(size=(3, 3, 4))
    enc = rng.normal(size=(3, 3, 4))
    eye = np.eye(4)
    select = np.concatenate([eye, np.zeros((4, 4))], axis=0)
    out = unet.skip_fuse(dec, enc, nd.Tensor(select), nd.Tensor(np.zeros(4))).data
    assert rel_err(out, dec) < 1e-15
    average = np.concatenate([eye, eye], axis=0) / 2.0
    out = unet.skip_fuse(dec, enc, nd.Tensor(average), nd.Tensor(np.zeros(4))).data
    assert rel_err(out, (dec + enc) / 2.0) < 1e-15


def test_skip_fuse_gradient_reaches_both_inputs():
    rng = np.random.default_rng(7)
    dec = nd.Tensor(rng.normal(size=(2, 2, 3)), requires_grad=True)
    enc = nd.Tensor(rng.normal(size=(2, 2, 3)), requires_grad=True)
    w = nd.Tensor(rng.normal(size=(6, 3)))
    b = nd.Tensor(np.zeros(3))
    with nd.Tape() as tape:
        loss = ops.sum(unet.skip_fuse(dec, enc, w, b))
    tape.backward(loss)
    assert np.abs(dec.grad).max() > 0
    assert np.abs(enc.grad).max() > 0


def test_skip_fuse_rejects_mismatch():
    with pytest.raises(ShapeError):
        unet.skip_fuse(
            np.zeros((2, 2, 3)), np.zeros((2, 3, 3)),
            nd.Tensor(np.zeros((6, 3))), nd.Tensor(np.zeros(3)),
        )


# ---------------------------------------------------------------------------
# full forward

STAGE_CONFIGS = [
    dict(input_h=32, input_w=32, num_classes=2, embed_dim=8, state_size=4),
    dict(input_h=64, input_w=32, num_classes=3, embed_dim=4, state_size=2),
    dict(input_h=96, input_w=64, num_classes=5, embed_dim=6, state_size=2),
    dict(input_h=32, input_w=32, num_classes=2, embed_dim=4, state_size=2,
         depths=(1, 1, 1), bottleneck_depth=1),
    dict(input_h=64, input_w=64, num_classes=2, embed_dim=4, state_size=2,
         patch_size=2, depths=(2, 2), bottleneck_depth=1),
]


@pytest.mark.parametrize("overrides", STAGE_CONFIGS)
def test_stage_resolution_table(overrides):
    cfg = ModelConfig(**overrides)
    weights = unet.init_weights(cfg, seed=0)
    image = np.random.default_rng(0).normal(
        size=(cfg.input_h, cfg.input_w, cfg.in_channels)
    )
    trace = []
    logits = unet.forward(image, weights, trace=trace)
    assert logits.shape == (cfg.input_h, cfg.input_w, cfg.num_classes)

    trace = dict(trace)
    p, c = cfg.patch_size, cfg.embed_dim
    for s in range(cfg.num_stages):
        down = p << s
        expected = (cfg.input_h // down, cfg.input_w // down, c << s)
        assert trace[f"encoder.{s}"] == expected, s
        assert trace[f"decoder.{cfg.num_stages - 1 - s}"] == expected, s
    bottom = p << cfg.num_stages
    assert trace["bottleneck"] == (
        cfg.input_h // bottom, cfg.input_w // bottom, c << cfg.num_stages
    )
    assert trace["final"] == (cfg.input_h, cfg.input_w, c)


def test_full_scale_stage_table(full_scale_trace):
    _, trace, logits_shape = full_scale_trace
    assert trace["encoder.0"] == (56, 56, 96)
    assert trace["encoder.1"] == (28, 28, 192)
    assert trace["encoder.2"] == (14, 14, 384)
    assert trace["bottleneck"] == (7, 7, 768)
    assert trace["decoder.0"] == (14, 14, 384)
    assert trace["decoder.1"] == (28, 28, 192)
    assert trace["decoder.2"] == (56, 56, 96)
    assert logits_shape == (224, 224, 4)


def test_forward_batched_and_deterministic():
    cfg = small_config()
    weights = unet.init_weights(cfg, seed=3)
    rng = np.random.default_rng(8)
    batch = rng.normal(size=(2, 32, 32, 1))
    out1 = unet.forward(batch, weights).data
    out2 = unet.forward(batch, weights).data
    assert out1.shape == (2, 32, 32, 2)
    assert np.array_equal(out1, out2)
    single = unet.forward(batch[0], weights).data
    assert rel_err(single, out1[0]) < 1e-12


def test_forward_posteriors_sum_to_one():
    cfg = small_config()
    weights = unet.init_weights(cfg, seed=4)
    image = np.random.default_rng(9).normal(size=(32, 32, 1))
    post = ops.softmax(unet.forward(image, weights)).data
    assert np.max(np.abs(post.sum(axis=-1) - 1.0)) < 1e-12


def test_forward_rejects_wrong_geometry():
    cfg = small_config()
    weights = unet.init_weights(cfg, seed=0)
    with pytest.raises(ShapeError):
        unet.forward(np.zeros((64, 64, 1)), weights)
    with pytest.raises(ShapeError):
        unet.forward(np.zeros((32, 32, 2)), weights)


def test_init_is_seed_deterministic():
    cfg = small_config()
    a = unet.init_weights(cfg, seed=11)
    b = unet.init_weights(cfg, seed=11)
    c = unet.init_weights(cfg, seed=12)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert any(
        not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params
    )


def test_parameter_count_matches_weights():
    for overrides in STAGE_CONFIGS[:3]:
        cfg = ModelConfig(**overrides)
        weights = unet.init_weights(cfg, seed=0)
        total = sum(t.size for t in weights.params.values())
        assert total == unet.parameter_count(cfg)


def test_end_to_end_gradients_on_sampled_coordinates():
    cfg = small_config(embed_dim=4, state_size=2)
    weights = unet.init_weights(cfg, seed=5)
    rng = np.random.default_rng(10)
    image = nd.Tensor(rng.normal(size=(32, 32, 1)), requires_grad=True)
    probe = rng.normal(size=(32, 32, cfg.num_classes))

    with nd.Tape() as tape:
        loss = ops.sum(ops.mul(unet.forward(image, weights), probe))
    tape.backward(loss)

    def loss_at(tensor, flat_index, value):
        original = tensor.data.flat[flat_index]
        tensor.data.flat[flat_index] = value
        try:
            return float(np.sum(unet.forward(image.data, weights).data * probe))
        finally:
            tensor.data.flat[flat_index] = original

    names = sorted(weights.params)
    picked = [names[i] for i in rng.choice(len(names), size=18, replace=False)]
    h = 1e-6
    for name in picked + ["<image>"]:
        tensor = image if name == "<image>" else weights.params[name]
        for flat_index in rng.choice(tensor.size, size=3, replace=False):
            base = tensor.data.flat[flat_index]
            g_fd = (
                loss_at(tensor, flat_index, base + h)
                - loss_at(tensor, flat_index, base - h)
            ) / (2 * h)
            g_ad = tensor.grad.flat[flat_index]
            scale = max(abs(g_fd), abs(g_ad), 1e-4)
            assert abs(g_ad - g_fd) / scale < 1e-3, f"{name}[{flat_index}]"


# ---------------------------------------------------------------------------
# serialization

def test_weight_round_trip_and_byte_identity(tmp_path):
    cfg = small_config(depths=(1, 1, 1), bottleneck_depth=1, embed_dim=4)
    weights = unet.init_weights(cfg, seed=6)
    first = tmp_path / "model.munt"
    second = tmp_path / "model2.munt"
    weights_io.save_weights(weights, str(first))
    loaded = weights_io.load_weights(str(first))
    assert loaded.config == cfg
    for name, tensor in weights.params.items():
        assert np.array_equal(loaded.params[name].data, tensor.data), name
        assert loaded.params[name].requires_grad
    weights_io.save_weights(loaded, str(second))
    assert first.read_bytes() == second.read_bytes()


def test_weight_file_size_formula(tmp_path):
    cfg = small_config(depths=(1, 1, 1), bottleneck_depth=1, embed_dim=4)
    weights = unet.init_weights(cfg, seed=0)
    path = tmp_path / "model.munt"
    weights_io.save_weights(weights, str(path))
    assert path.stat().st_size == weights_io.file_size(cfg)


def test_weight_file_rejects_corruption(tmp_path):
    cfg = small_config(depths=(1, 1, 1), bottleneck_depth=1, embed_dim=4)
    weights = unet.init_weights(cfg, seed=7)
    path = tmp_path / "model.munt"
    weights_io.save_weights(weights, str(path))
    blob = bytearray(path.read_bytes())

    bad = tmp_path / "bad.munt"

    bad.write_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(weights_io.WeightFormatError):
        weights_io.load_weights(str(bad))

    versioned = bytearray(blob)
    versioned[4] = 99
    bad.write_bytes(bytes(versioned))
    with pytest.raises(weights_io.WeightFormatError):
        weights_io.load_weights(str(bad))

    bad.write_bytes(bytes(blob[:-20]))
    with pytest.raises(weights_io.WeightFormatError):
        weights_io.load_weights(str(bad))

    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    bad.write_bytes(bytes(flipped))
    with pytest.raises(weights_io.WeightFormatError):
        weights_io.load_weights(str(bad))


def test_model_weights_validates_inventory():
    cfg = small_config()
    weights = unet.init_weights(cfg, seed=0)
    params = weights.named_params()
    params.pop("head.bias")
    with pytest.raises(ShapeError):
        unet.ModelWeights(cfg, params)

    params = weights.named_params()
    params["head.bias"] = nd.Tensor(np.zeros(5))
    with pytest.raises(ShapeError):
        unet.ModelWeights(cfg, params)
