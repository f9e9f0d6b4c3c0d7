import numpy as np
import pytest

from maft3d import encode
from maft3d import numcore as nc
from maft3d import scene as sc
from maft3d.numcore import gradient_check


def make_tokens(seed=0, n_points=(80, 140)):
    scene = sc.generate_scene(
        seed,
        sc.GenParams(extent=(5.0, 5.0, 2.5), n_inst=(3, 4), inst_points=n_points, clutter_fraction=0.15),
    )
    tokens, gt = sc.voxelize(scene, 0.08)
    return tokens, gt


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------


def test_backbone_output_width_matches_d():
    tokens, _ = make_tokens(0)
    params = encode.init_backbone(6, 256, np.random.default_rng(0))
    feats = encode.backbone(tokens, params)
    assert feats.shape == (tokens.n_tokens, 256)


def test_backbone_permutation_equivariance():
    tokens, _ = make_tokens(1)
    params = encode.init_backbone(6, 32, np.random.default_rng(1))
    feats = encode.backbone(tokens, params).data

    perm = np.random.default_rng(2).permutation(tokens.n_tokens)
    permuted = sc.SceneTokens(
        positions=tokens.positions[perm].copy(),
        features=tokens.features[perm].copy(),
        token_to_points=[tokens.token_to_points[i] for i in perm],
        bounds=tokens.bounds,
    )
    feats_p = encode.backbone(permuted, params).data
    np.testing.assert_allclose(feats_p, feats[perm], atol=1e-9)


def test_backbone_deterministic():
    tokens, _ = make_tokens(2)
    params = encode.init_backbone(6, 24, np.random.default_rng(3))
    a = encode.backbone(tokens, params).data
    b = encode.backbone(tokens, params).data
    np.testing.assert_array_equal(a, b)


def test_backbone_gradients():
    from dataclasses import replace

    tokens, _ = make_tokens(3)
    params = encode.init_backbone(6, 12, np.random.default_rng(4))
    w = np.random.default_rng(5).normal(size=(tokens.n_tokens, 12))

    def f(x):
        probed = replace(params, w1=nc.reshape(x, params.w1.shape))
        out = encode.backbone(tokens, probed)
        return nc.sum(nc.mul(out, nc.tensor(w)))

    assert gradient_check(f, params.w1.data.copy()) < 1e-4


def test_backbone_empty_errors():
    tokens = sc.SceneTokens(
        positions=np.zeros((0, 3)),
        features=np.zeros((0, 6)),
        token_to_points=[],
        bounds=sc.SceneBounds(np.zeros(3), np.ones(3)),
    )
    params = encode.init_backbone(6, 8, np.random.default_rng(0))
    with pytest.raises(nc.DimensionError):
        encode.backbone(tokens, params)


# ---------------------------------------------------------------------------
# fourier absolute encoding
# ---------------------------------------------------------------------------


def test_ape_zero_position():
    out = encode.fourier_ape(np.zeros((1, 3)), 24, 10000.0).data[0]
    sin_idx = np.arange(0, 24, 2)
    cos_idx = np.arange(1, 24, 2)
    np.testing.assert_array_equal(out[sin_idx], 0.0)
    np.testing.assert_array_equal(out[cos_idx], 1.0)


def test_ape_deterministic_and_bounded():
    pos = np.random.default_rng(0).uniform(size=(50, 3))
    a = encode.fourier_ape(pos, 30, 10000.0).data
    b = encode.fourier_ape(pos, 30, 10000.0).data
    np.testing.assert_array_equal(a, b)
    assert np.abs(a).max() <= 1.0


def test_ape_pads_to_width():
    out = encode.fourier_ape(np.full((2, 3), 0.5), 32, 10000.0)
    assert out.shape == (2, 32)
    np.testing.assert_array_equal(out.data[:, 30:], 0.0)  # 32 = 6*5 + 2 pad


def test_ape_domain_error():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        encode.fourier_ape(np.array([[0.0, 0.5, 1.1]]), 24, 10000.0)


def test_ape_injective_on_grid():
    # per-axis blocks concatenate, so 3D injectivity reduces to per-axis
    # injectivity over the 1e-3 grid of [0, 1]
    grid = np.arange(0, 1001) / 1000.0
    pos = np.zeros((1001, 3))
    pos[:, 0] = grid
    enc = encode.fourier_ape(pos, 24, 10000.0).data[:, : 24 // 6 * 2]
    order = np.lexsort(enc.T[::-1])
    sorted_enc = enc[order]
    gaps = np.abs(np.diff(sorted_enc, axis=0)).max(axis=1)
    assert gaps.min() > 1e-9


def test_ape_differentiable_positions():
    def f(x):
        out = encode.fourier_ape(nc.clip(nc.reshape(x, (4, 3)), 0.0, 1.0), 18, 100.0)
        return nc.sum(nc.mul(out, nc.tensor(np.random.default_rng(9).normal(size=(4, 18)))))

    assert gradient_check(f, np.random.default_rng(8).uniform(0.1, 0.9, size=12)) < 1e-4


# ---------------------------------------------------------------------------
# relative position quantization
# ---------------------------------------------------------------------------


def test_quantize_examples():
    q = np.array([[0.37, 0.0, -5.0]])
    p = np.array([[0.0, 0.0, 0.0]])
    idx = encode.quantize_relative(q, p, 0.1, 48)
    assert idx[0, 0, 0] == 27  # floor(3.7) + 24
    assert idx[0, 0, 1] == 24  # zero displacement lands at L/2
    assert idx[0, 0, 2] == 0  # raw -26 clamps to 0


def test_quantize_upper_clamp():
    idx = encode.quantize_relative(
        np.array([[5.0, 0.0, 0.0]]), np.zeros((1, 3)), 0.1, 48
    )
    assert idx[0, 0, 0] == 47


def test_quantize_translation_invariance():
    rng = np.random.default_rng(0)
    q = rng.uniform(0, 5, size=(7, 3))
    p = rng.uniform(0, 5, size=(40, 3))
    v = np.array([3.0, -1.0, 0.5])
    a = encode.quantize_relative(q, p, 0.1, 48)
    b = encode.quantize_relative(q + v, p + v, 0.1, 48)
    np.testing.assert_array_equal(a, b)


def test_quantize_antisymmetry_before_clamp():
    rng = np.random.default_rng(1)
    # keep displacements inside the unclamped band and off bucket edges
    q = rng.uniform(2.0, 2.3, size=(5, 3))
    p = rng.uniform(2.0, 2.3, size=(11, 3))
    fwd = encode.quantize_relative(q, p, 0.1, 48)
    # swapping the two point sets mirrors the raw index: k -> L-1-k
    bwd = encode.quantize_relative(p, q, 0.1, 48)
    np.testing.assert_array_equal(bwd.transpose(1, 0, 2), 47 - fwd)


def test_quantize_parameter_validation():
    with pytest.raises(ValueError):
        encode.quantize_relative(np.zeros((1, 3)), np.zeros((1, 3)), 0.0, 48)
    with pytest.raises(ValueError):
        encode.quantize_relative(np.zeros((1, 3)), np.zeros((1, 3)), 0.1, 47)


def test_fast_quantize_matches_reference():
    rng = np.random.default_rng(2)
    q = rng.uniform(-4, 4, size=(9, 3))
    p = rng.uniform(-4, 4, size=(33, 3))
    ref = encode.quantize_relative(q, p, 0.1, 48)
    fast = encode.fast_quantize(q, p, 0.1, 48)
    np.testing.assert_array_equal(np.asarray(ref, dtype=np.int64), np.asarray(fast, dtype=np.int64))


# ---------------------------------------------------------------------------
# rpe bias
# ---------------------------------------------------------------------------


def make_rpe(length=8, d=12, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    tables = nc.Tensor(rng.normal(0, scale, size=(3, length, d)), requires_grad=True)
    return encode.RpeTable(tables, 0.25, length)


def test_rpe_bias_hand_example():
    # n=1, N=1, d=1, all table entries 1, f_q=2, f_k=3 -> 3*2 + 3*3 = 15
    table = encode.RpeTable(nc.Tensor(np.ones((3, 4, 1)), requires_grad=True), 0.1, 4)
    idx = np.array([[[1, 2, 0]]])
    bias = encode.rpe_bias(idx, table, nc.tensor([[2.0]]), nc.tensor([[3.0]]), heads=1)
    assert bias.shape == (1, 1, 1)
    assert bias.data[0, 0, 0] == pytest.approx(15.0)


def test_rpe_bias_zero_tables():
    table = encode.RpeTable(nc.Tensor(np.zeros((3, 8, 12)), requires_grad=True), 0.25, 8)
    rng = np.random.default_rng(3)
    idx = rng.integers(0, 8, size=(4, 9, 3))
    bias = encode.rpe_bias(idx, table, nc.tensor(rng.normal(size=(4, 12))), nc.tensor(rng.normal(size=(9, 12))), heads=3)
    np.testing.assert_array_equal(bias.data, np.zeros((3, 4, 9)))


def test_rpe_bias_zero_features():
    table = make_rpe()
    idx = np.random.default_rng(4).integers(0, 8, size=(3, 5, 3))
    bias = encode.rpe_bias(idx, table, nc.zeros((3, 12)), nc.zeros((5, 12)), heads=2)
    np.testing.assert_array_equal(bias.data, np.zeros((2, 3, 5)))


def test_rpe_bias_matches_naive_per_head():
    rng = np.random.default_rng(5)
    length, d, heads, n, big_n = 6, 8, 2, 3, 7
    table = encode.RpeTable(nc.Tensor(rng.normal(size=(3, length, d)), requires_grad=True), 0.2, length)
    idx = rng.integers(0, length, size=(n, big_n, 3))
    fq = rng.normal(size=(n, d))
    fk = rng.normal(size=(big_n, d))
    bias = encode.rpe_bias(idx, table, nc.tensor(fq), nc.tensor(fk), heads=heads).data

    hd = d // heads
    expected = np.zeros((heads, n, big_n))
    for h in range(heads):
        cols = slice(h * hd, (h + 1) * hd)
        for i in range(n):
            for j in range(big_n):
                fpos = sum(table.tables.data[a, idx[i, j, a], cols] for a in range(3))
                expected[h, i, j] = fpos @ fq[i, cols] + fpos @ fk[j, cols]
    np.testing.assert_allclose(bias, expected, atol=1e-12)


def test_rpe_bias_gradients():
    rng = np.random.default_rng(6)
    length, d, heads, n, big_n = 6, 8, 2, 3, 7
    idx = rng.integers(0, length, size=(n, big_n, 3))
    fq0 = rng.normal(size=(n, d))
    fk0 = rng.normal(size=(big_n, d))
    t0 = rng.normal(size=(3, length, d))
    w = rng.normal(size=(heads, n, big_n))

    def f_tables(x):
        table = encode.RpeTable(nc.reshape(x, (3, length, d)), 0.2, length)
        bias = encode.rpe_bias(idx, table, nc.tensor(fq0), nc.tensor(fk0), heads)
        return nc.sum(nc.mul(bias, nc.tensor(w)))

    assert gradient_check(f_tables, t0.ravel()) < 1e-4

    table = encode.RpeTable(nc.tensor(t0), 0.2, length)

    def f_q(x):
        bias = encode.rpe_bias(idx, table, nc.reshape(x, (n, d)), nc.tensor(fk0), heads)
        return nc.sum(nc.mul(bias, nc.tensor(w)))

    assert gradient_check(f_q, fq0.ravel()) < 1e-4

    def f_k(x):
        bias = encode.rpe_bias(idx, table, nc.tensor(fq0), nc.reshape(x, (big_n, d)), heads)
        return nc.sum(nc.mul(bias, nc.tensor(w)))

    assert gradient_check(f_k, fk0.ravel()) < 1e-4


def test_rpe_bias_rejects_out_of_range_index():
    table = make_rpe(length=8)
    idx = np.full((2, 2, 3), 8)
    with pytest.raises(nc.NumericError):
        encode.rpe_bias(idx, table, nc.zeros((2, 12)), nc.zeros((2, 12)), heads=2)


def test_rpe_table_validation():
    with pytest.raises(ValueError):
        encode.RpeTable(nc.zeros((3, 7, 4)), 0.1, 7)  # odd length
    with pytest.raises(ValueError):
        encode.RpeTable(nc.zeros((3, 8, 4)), -0.1, 8)
