"""Mixed-mechanism multi-head attention: head spec validation, the output
recomposition identity, weight sharing, and gradients."""

import numpy as np
import pytest

from multiformer.mhma import (HeadSpec, init_mhma_weights, mhma_forward,
                              mhma_parameters, recompose_check)
from multiformer.oracles import reference_mhsa
from multiformer.tensor import Parameter, Tensor, grad_check, using_dtype
from multiformer.attention import OpCounter

MIXED = [HeadSpec("full"), HeadSpec("local", window=4),
         HeadSpec("conv", kernel=3, stride=2),
         HeadSpec("conv", kernel=3, stride=2)]


class TestHeadSpec:
    @pytest.mark.parametrize("spec,label", [
        (HeadSpec("full"), "full"),
        (HeadSpec("local", window=64), "local(64)"),
        (HeadSpec("conv", kernel=5, stride=2), "conv(5,2)"),
    ])
    def test_labels(self, spec, label):
        assert spec.label() == label

    @pytest.mark.parametrize("kwargs", [
        dict(mechanism="sparse"),
        dict(mechanism="local"),                       # window missing
        dict(mechanism="local", window=5),             # odd window
        dict(mechanism="local", window=4, kernel=3),   # stray field
        dict(mechanism="conv", kernel=3),              # stride missing
        dict(mechanism="conv", kernel=4, stride=2),    # even kernel
        dict(mechanism="conv", kernel=3, stride=0),
        dict(mechanism="full", window=2),
    ])
    def test_rejects_bad_specs(self, kwargs):
        with pytest.raises(ValueError):
            HeadSpec(**kwargs)

    def test_frozen(self):
        spec = HeadSpec("full")
        with pytest.raises(Exception):
            spec.mechanism = "local"


class TestInit:
    def test_shapes_and_grad_flags(self):
        rng = np.random.default_rng(0)
        w = init_mhma_weights(12, MIXED, rng)
        assert w.heads == 4 and w.head_dim == 3
        for h in range(4):
            assert w.wq[h].shape == (12, 3)
            assert w.wk[h].shape == (12, 3)
            assert w.wv[h].shape == (12, 3)
        assert w.wo.shape == (12, 12) and w.bo.shape == (12,)
        params = mhma_parameters("x", w)
        assert all(p.tensor.requires_grad for p in params)

    def test_conv_heads_with_same_shape_share_weights(self):
        rng = np.random.default_rng(1)
        w = init_mhma_weights(8, MIXED, rng)
        assert set(w.conv_params) == {(3, 2)}
        mixed2 = MIXED + [HeadSpec("conv", kernel=5, stride=2)]
        w2 = init_mhma_weights(10, mixed2, rng)
        assert set(w2.conv_params) == {(3, 2), (5, 2)}

    def test_deterministic_for_fixed_seed(self):
        a = init_mhma_weights(8, MIXED, np.random.default_rng(7))
        b = init_mhma_weights(8, MIXED, np.random.default_rng(7))
        assert np.array_equal(a.wo.data, b.wo.data)
        assert np.array_equal(a.wq[2].data, b.wq[2].data)

    def test_parameter_names(self):
        w = init_mhma_weights(8, MIXED[:2], np.random.default_rng(2))
        names = {p.name for p in mhma_parameters("enc0", w)}
        assert "enc0.head0.wq" in names
        assert "enc0.head1.wv" in names
        assert "enc0.wo" in names and "enc0.bo" in names

    def test_conv_weights_appear_once_in_parameters(self):
        w = init_mhma_weights(8, MIXED, np.random.default_rng(3))
        names = [p.name for p in mhma_parameters("l", w)]
        conv_names = [n for n in names if "compress" in n]
        assert sorted(conv_names) == ["l.compress.k3s2.bias",
                                      "l.compress.k3s2.weights"]
        assert len(names) == len(set(names))


class TestForward:
    def test_all_full_heads_match_plain_mhsa(self):
        rng = np.random.default_rng(4)
        specs = [HeadSpec("full")] * 4
        d = 16
        w = init_mhma_weights(d, specs, rng)
        x = rng.normal(size=(2, 9, d))
        keep = np.ones((2, 9), dtype=bool)
        keep[0, 7:] = False
        with using_dtype("float64"):
            out = mhma_forward(Tensor(x), specs, w, keep)
        for b in range(2):
            ref = reference_mhsa(x[b], [t.data for t in w.wq],
                                 [t.data for t in w.wk], [t.data for t in w.wv],
                                 w.wo.data, w.bo.data, valid=keep[b])
            got = out.y.data[b][keep[b]]
            np.testing.assert_allclose(got, ref[keep[b]], atol=1e-12)

    def test_output_recomposes_from_head_terms(self):
        rng = np.random.default_rng(5)
        d = 12
        with using_dtype("float64"):
            w = init_mhma_weights(d, MIXED, rng)
            x = Tensor(rng.normal(size=(7, d)))
            out = mhma_forward(x, MIXED, w, capture=True)
            err = recompose_check(out, w)
        assert err < 1e-10
        total = sum(t.data for t in out.xi) + w.bo.data
        np.testing.assert_allclose(out.y.data, total, atol=1e-10)

    def test_recomposition_float32(self):
        rng = np.random.default_rng(6)
        d = 12
        w = init_mhma_weights(d, MIXED, rng)
        out = mhma_forward(Tensor(rng.normal(size=(2, 7, d))), MIXED, w,
                           capture=True)
        assert recompose_check(out, w) < 1e-5

    def test_capture_off_by_default(self):
        rng = np.random.default_rng(7)
        w = init_mhma_weights(8, MIXED, rng)
        out = mhma_forward(Tensor(rng.normal(size=(5, 8))), MIXED, w)
        assert not out.captured
        assert out.z is None and out.weights is None and out.xi is None
        with pytest.raises(ValueError):
            recompose_check(out, w)

    def test_score_product_accounting(self):
        rng = np.random.default_rng(8)
        d, n = 8, 10
        w = init_mhma_weights(d, MIXED, rng)
        c = OpCounter()
        mhma_forward(Tensor(rng.normal(size=(n, d))), MIXED, w, counter=c)
        half = 2
        local = sum(min(n - 1, i + half) - max(0, i - half) + 1
                    for i in range(n))
        conv = n * 5  # ceil(10/2) compressed keys, two conv heads
        assert c.score_products == n * n + local + 2 * conv

    def test_shared_compression_is_computed_once(self):
        """Two conv heads with one (kernel, stride) read the same compressed
        sequence object, so their attention differs only via projections."""
        rng = np.random.default_rng(9)
        d = 8
        w = init_mhma_weights(d, MIXED, rng)
        x = Tensor(rng.normal(size=(6, d)))
        with using_dtype("float64"):
            out = mhma_forward(x, MIXED, w, capture=True)
        a2, a3 = out.weights[2], out.weights[3]
        assert a2.data.shape == a3.data.shape == (6, 3)

    def test_padding_invariance_at_valid_positions(self):
        """Appending junk frames under a mask must not change outputs at
        valid positions, bit for bit."""
        rng = np.random.default_rng(10)
        d, n = 8, 9
        w = init_mhma_weights(d, MIXED, rng)
        x = rng.normal(size=(n, d))
        junk = rng.normal(size=(5, d)) * 50.0
        keep = np.concatenate([np.ones(n, bool), np.zeros(5, bool)])
        with using_dtype("float64"):
            alone = mhma_forward(Tensor(x), MIXED, w, np.ones(n, bool))
            padded = mhma_forward(Tensor(np.concatenate([x, junk])), MIXED, w,
                                  keep)
        assert np.array_equal(padded.y.data[:n], alone.y.data)

    def test_gradients_through_all_mechanisms(self):
        rng = np.random.default_rng(11)
        d = 8
        with using_dtype("float64"):
            w = init_mhma_weights(d, MIXED, rng)
            x = Tensor(rng.normal(size=(2, 7, d)), requires_grad=True)
            keep = np.ones((2, 7), dtype=bool)
            keep[1, 5:] = False
            params = mhma_parameters("m", w) + [Parameter("x", x)]

            def f():
                out = mhma_forward(x, MIXED, w, keep)
                sel = Tensor(keep[..., None].astype(np.float64))
                return ((out.y * out.y) * sel).sum()

            report = grad_check(f, params, max_samples=8, seed=0)
        assert report.ok, [e.name for e in report.failures()]
