"""Anchor masks, attention vs dense references, conv1d, gradients."""

import numpy as np
import pytest

from evret.errors import NumericError, ShapeError
from evret.nn import (
    ALL,
    AnchorMaskSpec,
    ParameterSet,
    Tensor,
    add_attention_params,
    anchor_mask,
    conv1d_forward,
    cross_attention_forward,
    gradient_check,
    load_checkpoint,
    mhsa_forward,
    save_checkpoint,
)
from evret.nn.layers import layer_norm
from evret.nn.params import add_layer_norm


def dense_attention_oracle(x, params, sizes, y=None):
    """Straightforward per-head reference in plain numpy."""

    def softmax(a):
        e = np.exp(a - a.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    src = x if y is None else y
    q = x @ params["wq"] + params["bq"]
    k = src @ params["wk"] + params["bk"]
    v = src @ params["wv"] + params["bv"]
    D = x.shape[1]
    h = len(sizes)
    dh = D // h
    heads = []
    for hi, a in enumerate(sizes):
        sl = slice(hi * dh, (hi + 1) * dh)
        alpha = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        if a is not ALL:
            ii = np.arange(x.shape[0])[:, None]
            jj = np.arange(src.shape[0])[None, :]
            alpha = np.where(np.abs(ii - jj) <= a, alpha, -np.inf)
        heads.append(softmax(alpha) @ v[:, sl])
    return np.concatenate(heads, axis=1) @ params["wo"] + params["bo"]


def make_attention(seed, D, prefix="a"):
    ps = ParameterSet(seed)
    add_attention_params(ps, prefix, D)
    raw = {name.split(".")[-1]: ps[name].data for name, _ in ps.items()}
    return ps, raw


def identity_attention(D, prefix="a"):
    """Zero query/key path, identity value and output projections."""
    ps = ParameterSet(0)
    for n in ("wq", "wk"):
        ps.add_constant(f"{prefix}.{n}", np.zeros((D, D)))
    for n in ("wv", "wo"):
        ps.add_constant(f"{prefix}.{n}", np.eye(D))
    for n in ("bq", "bk", "bv", "bo"):
        ps.add_constant(f"{prefix}.{n}", np.zeros(D))
    return ps


class TestAnchorMask:
    def test_t4_a1(self):
        mask = anchor_mask(4, 1)
        for i in range(4):
            for j in range(4):
                assert mask[i, j] == (abs(i - j) <= 1)

    def test_all_true(self):
        assert anchor_mask(3, ALL).all()

    def test_t64_a9_brute_force(self):
        mask = anchor_mask(64, 9)
        for i in range(64):
            for j in range(64):
                assert mask[i, j] == (abs(i - j) <= 9)

    def test_spec_roundrobin(self):
        spec = AnchorMaskSpec.from_sizes([3, 6, 9, ALL], 4)
        assert spec.sizes == (3, 6, 9, ALL)
        spec = AnchorMaskSpec.from_sizes([2, ALL], 4)
        assert spec.sizes == (2, ALL, 2, ALL)

    def test_bad_anchor(self):
        with pytest.raises(ShapeError):
            AnchorMaskSpec((0,))


class TestMhsa:
    def test_uniform_mean_all(self):
        ps = identity_attention(4)
        x = Tensor(np.arange(12, dtype=float).reshape(3, 4))
        out = mhsa_forward(x, ps, "a", AnchorMaskSpec((ALL, ALL)))
        np.testing.assert_allclose(out.data, np.tile(x.data.mean(0), (3, 1)), atol=1e-12)

    def test_uniform_mean_anchor1(self):
        ps = identity_attention(4)
        x = Tensor(np.arange(12, dtype=float).reshape(3, 4))
        out = mhsa_forward(x, ps, "a", AnchorMaskSpec((1, 1)))
        np.testing.assert_allclose(out.data[0], x.data[:2].mean(0), atol=1e-12)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(11)
        ps, raw = make_attention(11, 8)
        x = rng.normal(size=(5, 8))
        out = mhsa_forward(Tensor(x), ps, "a", AnchorMaskSpec((2, 2)))
        np.testing.assert_allclose(out.data, dense_attention_oracle(x, raw, [2, 2]), atol=1e-6)

    def test_all_heads_match_maskless(self):
        rng = np.random.default_rng(21)
        for _ in range(10):
            T = int(rng.integers(1, 9))
            ps, raw = make_attention(int(rng.integers(0, 1000)), 8)
            x = rng.normal(size=(T, 8))
            out = mhsa_forward(Tensor(x), ps, "a", AnchorMaskSpec((ALL,) * 4))
            ref = dense_attention_oracle(x, raw, [ALL] * 4)
            np.testing.assert_allclose(out.data, ref, atol=1e-6)

    def test_row_stochastic_and_exact_zero(self):
        rng = np.random.default_rng(31)
        ps, _ = make_attention(31, 8)
        x = rng.normal(size=(6, 8))
        _, weights = mhsa_forward(
            Tensor(x), ps, "a", AnchorMaskSpec((1, ALL)), return_weights=True
        )
        mask = anchor_mask(6, 1)
        np.testing.assert_allclose(weights[0].sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(weights[1].sum(axis=1), 1.0, atol=1e-6)
        assert np.all(weights[0][~mask] == 0.0)

    def test_shift_locality(self):
        """Interior outputs shift along with the input when anchors are
        finite (no positional terms inside the attention op)."""
        rng = np.random.default_rng(41)
        ps, _ = make_attention(41, 8)
        x = rng.normal(size=(9, 8))
        spec = AnchorMaskSpec((2, 2))
        out = mhsa_forward(Tensor(x), ps, "a", spec).data
        out_shifted = mhsa_forward(Tensor(x[1:]), ps, "a", spec).data
        for i in range(2, 6):
            np.testing.assert_allclose(out_shifted[i], out[i + 1], atol=1e-10)

    def test_dim_not_divisible(self):
        ps, _ = make_attention(0, 6)
        with pytest.raises(ShapeError):
            mhsa_forward(Tensor(np.zeros((3, 6))), ps, "a", AnchorMaskSpec((1, 1, 1, 1)))


class TestCrossAttention:
    def test_single_key(self):
        ps = identity_attention(4)
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        y = Tensor(np.array([[1.0, 2.0, 3.0, 4.0]]))
        out = cross_attention_forward(x, y, ps, "a", num_heads=2)
        np.testing.assert_allclose(out.data, np.tile(y.data[0], (3, 1)), atol=1e-12)

    def test_self_equivalence(self):
        rng = np.random.default_rng(13)
        ps, _ = make_attention(13, 8)
        x = rng.normal(size=(4, 8))
        self_out = mhsa_forward(Tensor(x), ps, "a", AnchorMaskSpec((ALL, ALL)))
        cross_out = cross_attention_forward(Tensor(x), Tensor(x), ps, "a", num_heads=2)
        np.testing.assert_allclose(self_out.data, cross_out.data, atol=1e-12)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(13)
        ps, raw = make_attention(131, 8)
        x = rng.normal(size=(4, 8))
        y = rng.normal(size=(3, 8))
        out = cross_attention_forward(Tensor(x), Tensor(y), ps, "a", num_heads=2)
        ref = dense_attention_oracle(x, raw, [ALL, ALL], y=y)
        np.testing.assert_allclose(out.data, ref, atol=1e-6)


def conv_oracle(x, kernel, bias):
    T, d_in = x.shape
    K, _, d_out = kernel.shape
    pad = (K - 1) // 2
    out = np.zeros((T, d_out))
    for t in range(T):
        for o in range(d_out):
            acc = bias[o]
            for kk in range(K):
                src = t + kk - pad
                if 0 <= src < T:
                    for c in range(d_in):
                        acc += x[src, c] * kernel[kk, c, o]
            out[t, o] = acc
    return out


class TestConv1d:
    def test_zero_kernel_gives_bias(self):
        x = Tensor(np.random.default_rng(1).normal(size=(5, 3)))
        out = conv1d_forward(x, Tensor(np.zeros((3, 3, 2))), Tensor(np.array([1.5, -2.0])))
        np.testing.assert_allclose(out.data, np.tile([1.5, -2.0], (5, 1)), atol=1e-12)

    def test_identity_kernel(self):
        x = Tensor(np.arange(6, dtype=float).reshape(6, 1))
        kernel = Tensor(np.array([0.0, 1.0, 0.0]).reshape(3, 1, 1))
        out = conv1d_forward(x, kernel, Tensor(np.zeros(1)))
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(6, 2))
        kernel = rng.normal(size=(3, 2, 2))
        bias = rng.normal(size=2)
        out = conv1d_forward(Tensor(x), Tensor(kernel), Tensor(bias))
        np.testing.assert_allclose(out.data, conv_oracle(x, kernel, bias), atol=1e-6)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            conv1d_forward(Tensor(np.zeros((4, 2))), Tensor(np.zeros((2, 2, 1))), Tensor(np.zeros(1)))


class TestGradients:
    def test_quadratic_exact(self):
        ps = ParameterSet(0)
        ps.add("theta", (2, 2))
        err = gradient_check(lambda p: (p["theta"] * p["theta"]).sum(), ps, step=1e-4)
        assert err <= 1e-8

    def test_attention_block_gradients(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(4, 6))
        ps, _ = make_attention(7, 6)
        add_layer_norm(ps, "ln", 6)
        target = rng.normal(size=(4, 6))

        def loss_fn(params):
            h = layer_norm(Tensor(x), params, "ln")
            out = mhsa_forward(h, params, "a", AnchorMaskSpec((1, ALL)))
            diff = out - Tensor(target)
            return (diff * diff).sum()

        assert gradient_check(loss_fn, ps, step=1e-5) <= 1e-6

    def test_conv_and_pool_gradients(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(5, 3))
        ps = ParameterSet(9)
        ps.add("k", (3, 3, 2), fan_in=9)
        ps.add("b", (2,), fan_in=9)

        def loss_fn(params):
            out = conv1d_forward(Tensor(x), params["k"], params["b"])
            return out.max(axis=0).sum() + (out * out).mean()

        assert gradient_check(loss_fn, ps, step=1e-5) <= 1e-6

    def test_non_finite_loss_raises(self):
        ps = ParameterSet(0)
        ps.add_constant("theta", np.array([-1.0]))
        with np.errstate(invalid="ignore"), pytest.raises(NumericError):
            gradient_check(lambda p: p["theta"].log().sum(), ps, step=1e-4)


class TestTensorOps:
    def test_broadcast_add_backward(self):
        ps = ParameterSet(0)
        b = ps.add("b", (3,))
        x = Tensor(np.ones((4, 3)))
        loss = (x + b).sum()
        loss.backward()
        np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])

    def test_getitem_scatter(self):
        ps = ParameterSet(0)
        w = ps.add("w", (5, 2))
        loss = (w[1:3] * w[1:3]).sum()
        loss.backward()
        assert np.all(w.grad[0] == 0) and np.all(w.grad[3:] == 0)
        np.testing.assert_allclose(w.grad[1:3], 2 * w.data[1:3])

    def test_max_ties_first(self):
        ps = ParameterSet(0)
        w = ps.add_constant("w", np.array([[1.0, 1.0, 0.5]]))
        loss = w.max(axis=1).sum()
        loss.backward()
        np.testing.assert_allclose(w.grad, [[1.0, 0.0, 0.0]])

    def test_softmax_logsumexp_consistency(self):
        x = np.array([0.3, -1.2, 2.0])
        t = Tensor(x)
        s = t.softmax(axis=-1).data
        lse = t.logsumexp(axis=-1).data
        np.testing.assert_allclose(s, np.exp(x - lse), atol=1e-12)
        assert abs(s.sum() - 1.0) < 1e-12

    def test_layer_norm_normalizes(self):
        ps = ParameterSet(0)
        add_layer_norm(ps, "ln", 8)
        x = np.random.default_rng(0).normal(size=(3, 8)) * 5 + 2
        out = layer_norm(Tensor(x), ps, "ln").data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=1), 1.0, atol=1e-3)


class TestCheckpoint:
    def test_roundtrip_float32(self, tmp_path):
        ps = ParameterSet(3)
        ps.add("a.w", (3, 4))
        ps.add("a.b", (4,))
        ps.add("c.k", (3, 2, 2), fan_in=6)
        save_checkpoint(ps, tmp_path)
        ps2 = ParameterSet(99)
        ps2.add("a.w", (3, 4))
        ps2.add("a.b", (4,))
        ps2.add("c.k", (3, 2, 2), fan_in=6)
        load_checkpoint(ps2, tmp_path)
        for name, t in ps.items():
            np.testing.assert_array_equal(
                t.data.astype(np.float32), ps2[name].data.astype(np.float32)
            )

    def test_missing_tensor(self, tmp_path):
        from evret.errors import FormatError

        ps = ParameterSet(0)
        ps.add("a.w", (2, 2))
        save_checkpoint(ps, tmp_path)
        ps2 = ParameterSet(0)
        ps2.add("a.w", (2, 2))
        ps2.add("extra", (1,))
        with pytest.raises(FormatError):
            load_checkpoint(ps2, tmp_path)
