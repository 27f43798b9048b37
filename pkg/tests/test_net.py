import struct

import numpy as np
import pytest

from sasnet import net
from sasnet import tensor as T
from sasnet.net import ParamFormatError, ShapeError


@pytest.fixture(scope="module")
def table1():
    return net.init_params(0)


@pytest.fixture(scope="module")
def toy():
    return net.init_params(3, net.TOY_WIDTHS)


def image(rng, h, w):
    return rng.uniform(0, 1, (3, h, w))


def block_max_oracle(feat, edges):
    c = feat.shape[0]
    out = np.empty((c, 4, 4))
    for ch in range(c):
        for i in range(4):
            for j in range(4):
                out[ch, i, j] = feat[ch, edges[i] : edges[i + 1], edges[j] : edges[j + 1]].max()
    return out


# ---------------------------------------------------------------- parameters


def test_init_is_deterministic():
    a, b = net.init_params(7, net.TOY_WIDTHS), net.init_params(7, net.TOY_WIDTHS)
    assert all(np.array_equal(a[k], b[k]) for k in net.PARAM_NAMES)
    c = net.init_params(8, net.TOY_WIDTHS)
    assert not np.array_equal(a["conv1.w"], c["conv1.w"])


def test_table1_parameter_shapes(table1):
    assert table1["conv1.w"].shape == (96, 3, 11, 11)
    assert table1["conv2.w"].shape == (256, 96, 5, 5)
    assert table1["conv3.w"].shape == (192, 256, 3, 3)
    assert table1["conv4.w"].shape == (192, 192, 3, 3)
    assert table1["conv5.w"].shape == (128, 192, 3, 3)
    assert table1["att.w"].shape == (128, 4, 4)
    assert table1.attention_count == 2048


def test_he_normal_std_at_unit_gain():
    stds = [net.init_params(s, net.TOY_WIDTHS, gain=1.0)["conv1.w"].std() for s in range(10)]
    target = np.sqrt(2 / 363)
    assert abs(np.mean(stds) - target) / target < 0.2


def test_default_gain_scales_the_he_std():
    a = net.init_params(4, net.TOY_WIDTHS, gain=1.0)["conv3.w"]
    b = net.init_params(4, net.TOY_WIDTHS)["conv3.w"]
    np.testing.assert_allclose(b, net.INIT_GAIN * a, rtol=0, atol=1e-15)


def test_label_prior_bias_minimises_constant_loss():
    from sasnet.train import gaussian_label

    y = gaussian_label(17, 17).values
    b = net.label_prior_bias()

    def loss(v):
        return float(T.softplus(-y * v).mean())

    assert loss(b) < loss(b + 1e-3) and loss(b) < loss(b - 1e-3)
    assert -4.0 < b < -3.8


def test_attention_init_and_other_biases(toy):
    assert abs(toy["att.w"].std() - 1 / 16) < 0.01
    for c in net.CONVS:
        assert not toy[f"{c}.b"].any()
    assert float(toy["response.scale"]) > 0


# ---------------------------------------------------------------- shapes


def test_feature_shape_table1_columns():
    inst = [(h, w) for _, h, w in net.feature_shape(255, 255)]
    assert [h for h, _ in inst] == [123, 61, 57, 28, 26, 24, 22]
    ex = [h for _, h, _ in net.feature_shape(127, 127)]
    assert ex == [59, 29, 25, 12, 10, 8, 6]


def test_min_input_gives_one_cell():
    assert net.feature_shape(87, 87)[-1][1:] == (1, 1)
    with pytest.raises(ShapeError, match="^conv5"):
        net.feature_shape(86, 120)


def test_backbone_shapes_full_width(table1):
    rng = np.random.default_rng(0)
    p = table1.leaves()
    assert net.backbone_forward(image(rng, 255, 255), p).shape == (128, 22, 22)
    assert net.backbone_forward(image(rng, 127, 127), p).shape == (128, 6, 6)
    assert net.backbone_forward(image(rng, 127, 103), p).shape == (128, 6, 3)


def test_backbone_rejects_small_input_naming_layer(toy):
    with pytest.raises(ShapeError, match="conv"):
        net.backbone_forward(np.zeros((3, 40, 200)), toy.leaves())


def test_no_relu_after_conv5(toy):
    feat = net.backbone_forward(image(np.random.default_rng(1), 127, 127), toy.leaves()).data
    assert (feat < 0).any()


# ---------------------------------------------------------------- attention


def test_grid_maxpool_constant_and_locality():
    const = np.full((2, 22, 22), 1.5)
    np.testing.assert_array_equal(net.grid_maxpool(const).data, np.full((2, 4, 4), 1.5))
    spike = np.zeros((2, 22, 22))
    spike[1, 0, 0] = 9.0
    out = net.grid_maxpool(spike).data
    assert out[1, 0, 0] == 9.0
    assert np.count_nonzero(out) == 1


def test_grid_maxpool_matches_block_oracle():
    rng = np.random.default_rng(2)
    feat = rng.normal(size=(5, 22, 22))
    np.testing.assert_array_equal(net.grid_maxpool(feat).data, block_max_oracle(feat, [0, 6, 11, 16, 22]))


def test_grid_partition_sizes():
    sizes = np.diff(net.GRID_EDGES)
    assert list(sizes) == [6, 5, 5, 6]


def test_grid_maxpool_wrong_extent():
    with pytest.raises(ShapeError):
        net.grid_maxpool(np.zeros((2, 21, 22)))


def test_attention_zero_weights_give_half(toy):
    p = toy.copy()
    p["att.w"] = np.zeros_like(p["att.w"])
    w = net.attention_forward(np.random.default_rng(3).normal(size=(128, 22, 22)), p.leaves()).data
    np.testing.assert_array_equal(w, np.full(128, 0.5))


def test_attention_matches_dot_product_oracle(toy):
    rng = np.random.default_rng(4)
    feat = rng.normal(size=(128, 22, 22))
    pooled = block_max_oracle(feat, [0, 6, 11, 16, 22])
    expected = [1 / (1 + np.exp(-np.sum(toy["att.w"][i] * pooled[i]))) for i in range(128)]
    got = net.attention_forward(feat, toy.leaves()).data
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)
    assert np.all((got > 0) & (got < 1))


def test_attention_channel_independence(toy):
    rng = np.random.default_rng(5)
    feat = rng.normal(size=(128, 22, 22))
    base = net.attention_forward(feat, toy.leaves()).data
    feat[17] += rng.normal(size=(22, 22)) * 3
    moved = net.attention_forward(feat, toy.leaves()).data
    changed = np.nonzero(moved != base)[0]
    assert list(changed) == [17]


# ---------------------------------------------------------------- forward


@pytest.fixture(scope="module")
def triple():
    rng = np.random.default_rng(6)
    return image(rng, 127, 127), image(rng, 255, 255), image(rng, 255, 255)


def test_square_exemplar_response_shape(toy, triple):
    z, z_sem, x = triple
    resp, w = net.sasnet_forward(z, z_sem, x, toy)
    assert resp.raw.shape == (1, 17, 17)
    assert w.shape == (128,)
    assert np.all((resp.activated > 0) & (resp.activated < 1))


def test_rectangular_exemplar_response_shape(toy):
    rng = np.random.default_rng(7)
    resp = net.bilinear_forward(image(rng, 127, 103), image(rng, 255, 255), toy)
    assert resp.raw.shape == (1, 17, 20)
    assert net.response_shape((103, 127)) == (20, 17)


def test_unit_weights_equal_bilinear_bitwise(toy, triple):
    z, z_sem, x = triple
    resp, _ = net.sasnet_forward(z, z_sem, x, toy, weights=np.ones(128))
    plain = net.bilinear_forward(z, x, toy)
    assert resp.raw.tobytes() == plain.raw.tobytes()
    assert resp.activated.tobytes() == plain.activated.tobytes()


def test_halving_weights_quarters_raw(toy, triple):
    z, z_sem, x = triple
    full, _ = net.sasnet_forward(z, z_sem, x, toy, weights=np.ones(128))
    half, _ = net.sasnet_forward(z, z_sem, x, toy, weights=np.full(128, 0.5))
    np.testing.assert_array_equal(half.raw, 0.25 * full.raw)
    assert half.peak == full.peak


def test_zero_instance_gives_zero_raw(toy):
    rng = np.random.default_rng(8)
    p = toy.copy()
    for c in net.CONVS:
        p[f"{c}.b"] = np.zeros_like(p[f"{c}.b"])
    resp = net.bilinear_forward(image(rng, 127, 127), np.zeros((3, 255, 255)), p)
    assert not resp.raw.any()


def test_activated_argmax_matches_raw(toy, triple):
    z, _, x = triple
    resp = net.bilinear_forward(z, x, toy)
    assert np.argmax(resp.activated) == np.argmax(resp.raw)


def test_exemplar_bounds_checked(toy):
    with pytest.raises(ShapeError):
        net.bilinear_forward(np.zeros((3, 80, 127)), np.zeros((3, 255, 255)), toy)


# ---------------------------------------------------------------- persistence


def test_save_load_roundtrip_bit_exact(tmp_path, table1):
    path = tmp_path / "p.sasn"
    net.save_params(table1, path)
    back = net.load_params(path)
    for k in net.PARAM_NAMES:
        assert back[k].tobytes() == table1[k].tobytes()
        assert back[k].shape == table1[k].shape


def test_file_header_layout(tmp_path, toy):
    path = tmp_path / "p.sasn"
    net.save_params(toy, path)
    raw = path.read_bytes()
    assert raw[:4] == b"SASN"
    assert struct.unpack("<II", raw[4:12]) == (1, len(net.PARAM_NAMES))
    (n,) = struct.unpack("<H", raw[12:14])
    assert raw[14 : 14 + n] == b"conv1.w"


def test_corrupt_magic_rejected(tmp_path, toy):
    path = tmp_path / "p.sasn"
    net.save_params(toy, path)
    path.write_bytes(b"XASN" + path.read_bytes()[4:])
    with pytest.raises(ParamFormatError, match="magic"):
        net.load_params(path, widths=None)


def test_version_and_truncation_rejected(tmp_path, toy):
    path = tmp_path / "p.sasn"
    net.save_params(toy, path)
    good = path.read_bytes()
    path.write_bytes(good[:4] + struct.pack("<I", 2) + good[8:])
    with pytest.raises(ParamFormatError, match="version"):
        net.load_params(path, widths=None)
    path.write_bytes(good[:-5])
    with pytest.raises(ParamFormatError, match="truncated"):
        net.load_params(path, widths=None)
    path.write_bytes(good + b"\0")
    with pytest.raises(ParamFormatError, match="trailing"):
        net.load_params(path, widths=None)


def test_schema_error_names_conv1(tmp_path, table1):
    bad = table1.copy()
    bad["conv1.w"] = bad["conv1.w"][:95]
    bad["conv1.b"] = bad["conv1.b"][:95]
    path = tmp_path / "p.sasn"
    net.save_params(bad, path)
    with pytest.raises(ParamFormatError, match="^conv1"):
        net.load_params(path)


def test_attention_count_enforced(tmp_path, table1):
    tensors = {k: table1[k] for k in net.PARAM_NAMES}
    tensors["att.w"] = np.zeros((128, 4, 3))
    path = tmp_path / "p.sasn"
    net.save_tensors(tensors, path)
    with pytest.raises(ParamFormatError, match="att"):
        net.load_params(path)


def test_widths_inferred(tmp_path, toy):
    path = tmp_path / "p.sasn"
    net.save_params(toy, path)
    assert net.load_params(path, widths=None).widths == net.TOY_WIDTHS
    with pytest.raises(ParamFormatError):
        net.load_params(path)
