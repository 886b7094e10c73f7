import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from lgsa import tensor as T
from lgsa.gradcheck import gradcheck
from lgsa.network import (
    FusionParams,
    HourglassConfig,
    LGSANet,
    attention_term,
    global_attention,
    grouping_map,
    lgsa_fuse,
    pam_forward,
    preprocess,
    scaled_attention,
    skip_fuse,
    token_grid,
)
from lgsa.selftest import model_loss_check, tiny_model_config


def fusion_params(rng, c, d):
    shapes = ((c, d), (c, d), (c, c), (c, c, 3, 3), (c,))
    return FusionParams(*(T.Tensor(rng.standard_normal(s), requires_grad=True) for s in shapes))


class TestScaledAttention:
    def test_two_token_example(self):
        q = T.Tensor([[1.0], [0.0]])
        v = T.Tensor([[2.0], [4.0]])
        out, sim = scaled_attention(q, q, v)
        assert_allclose(out.data[:, 0], [2.53788, 3.0], atol=1e-5)
        assert_array_equal(sim.data, [[1.0, 0.0], [0.0, 0.0]])

    def test_rows_are_convex_combinations(self):
        rng = np.random.default_rng(0)
        q, k, v = (T.Tensor(rng.standard_normal((6, 4))) for _ in range(3))
        out, _ = scaled_attention(q, k, v)
        assert np.all(out.data >= v.data.min(axis=0) - 1e-12)
        assert np.all(out.data <= v.data.max(axis=0) + 1e-12)

    def test_equal_keys_give_mean_of_values(self):
        rng = np.random.default_rng(1)
        q, v = T.Tensor(rng.standard_normal((5, 3))), T.Tensor(rng.standard_normal((5, 2)))
        k = T.Tensor(np.tile(rng.standard_normal((1, 3)), (5, 1)))
        out, _ = scaled_attention(q, k, v)
        assert_allclose(out.data, np.tile(v.data.mean(axis=0), (5, 1)), atol=1e-14)

    def test_embed_dimension_mismatch(self):
        with pytest.raises(T.ShapeError):
            scaled_attention(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 4))), T.Tensor(np.ones((2, 3))))

    def test_multi_head_splits_channels(self):
        rng = np.random.default_rng(2)
        q, k, v = (T.Tensor(rng.standard_normal((1, 5, 4))) for _ in range(3))
        out, _ = scaled_attention(q, k, v, num_heads=2)
        for h in range(2):
            sl = slice(2 * h, 2 * h + 2)
            ref, _ = scaled_attention(*(T.Tensor(t.data[0, :, sl]) for t in (q, k, v)))
            assert_allclose(out.data[0, :, sl], ref.data, atol=1e-14)


class TestFusion:
    def test_token_grid_cap(self):
        assert token_grid(32, 32, 1024) == (32, 32)
        assert token_grid(64, 64, 1024) == (32, 32)
        assert token_grid(5, 7, 12) == (3, 4)

    def test_all_ones_grouping_reduces_to_global(self):
        rng = np.random.default_rng(3)
        for i in range(10):
            b, c, d = 2, int(rng.integers(2, 5)), int(rng.integers(2, 5))
            hr = T.Tensor(rng.standard_normal((b, c, 6, 6)))
            lr = T.Tensor(rng.standard_normal((b, c, 3, 3)))
            p = fusion_params(rng, c, d)
            fused, sim = lgsa_fuse(hr, lr, T.Tensor(np.ones((b, 1, 6, 6))), p)
            attn, gsim = global_attention(hr, lr, p)
            assert np.max(np.abs(fused.data - skip_fuse(hr, attn, p).data)) <= 1e-12
            assert_array_equal(sim.data, gsim.data)

    def test_zero_grouping_gives_uniform_attention(self):
        rng = np.random.default_rng(4)
        hr = T.Tensor(rng.standard_normal((1, 3, 4, 4)))
        lr = T.Tensor(rng.standard_normal((1, 3, 4, 4)))
        p = fusion_params(rng, 3, 2)
        attn, sim = attention_term(hr, lr, p, T.Tensor(np.zeros((1, 1, 4, 4))))
        assert_array_equal(sim.data, 0.0)
        v = hr.data[0].reshape(3, -1).T @ p.embed_v.data
        assert_allclose(attn.data[0].reshape(3, -1).T, np.tile(v.mean(axis=0), (16, 1)), atol=1e-13)

    def test_background_token_row_is_zero(self):
        rng = np.random.default_rng(5)
        hr = T.Tensor(rng.standard_normal((1, 2, 4, 4)))
        lr = T.Tensor(rng.standard_normal((1, 2, 4, 4)))
        g = np.ones((1, 1, 4, 4))
        g[0, 0, 1, 2] = 0.0
        _, sim = attention_term(hr, lr, fusion_params(rng, 2, 3), T.Tensor(g))
        assert_array_equal(sim.data[0, 1 * 4 + 2], 0.0)
        assert_array_equal(sim.data[0, :, 1 * 4 + 2], 0.0)

    def test_block_gradients(self):
        rng = np.random.default_rng(6)
        hr = T.Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
        lr = T.Tensor(rng.standard_normal((1, 3, 2, 2)), requires_grad=True)
        g = T.Tensor(rng.uniform(0, 1, (1, 1, 2, 2)), requires_grad=True)
        p = fusion_params(rng, 3, 2)
        w = rng.standard_normal((1, 3, 4, 4))

        def fn(a, b, c, *ps):
            out, _ = lgsa_fuse(a, b, c, FusionParams(*ps))
            return T.tsum(T.mul(out, T.Tensor(w)))

        assert gradcheck(fn, [hr, lr, g, *p.__dict__.values()]).rel_error <= 1e-4

    def test_extent_mismatch(self):
        rng = np.random.default_rng(7)
        with pytest.raises(T.ShapeError):
            attention_term(
                T.Tensor(np.ones((1, 2, 4, 4))), T.Tensor(np.ones((2, 2, 4, 4))), fusion_params(rng, 2, 2)
            )


class TestPixelAttention:
    def _maps(self, rng, c=1):
        return (
            T.Tensor(rng.uniform(0, 1, (1, c, 4, 4))),
            T.Tensor(rng.uniform(0, 10, (1, 2, 4, 4))),
            T.Tensor(rng.uniform(0, 1, (1, 2, 4, 4))),
        )

    def _params(self, rng, fin, hidden, scale=1.0):
        shapes = {
            "pam.0.w": (hidden, fin, 3, 3), "pam.0.b": (hidden,),
            "pam.1.w": (hidden, hidden, 3, 3), "pam.1.b": (hidden,),
            "pam.2.w": (1, hidden, 3, 3), "pam.2.b": (1,),
        }
        return {k: T.Tensor(scale * rng.standard_normal(s)) for k, s in shapes.items()}

    def test_zero_parameters_give_half(self):
        rng = np.random.default_rng(8)
        maps = self._maps(rng)
        m, w, f = pam_forward(*maps, self._params(rng, 5, 3, scale=0.0))
        assert_array_equal(w.data, 0.5)
        assert_array_equal(m.data, 0.5 * f.data)

    def test_weights_in_unit_interval_and_shrink(self):
        rng = np.random.default_rng(9)
        # moderate weights keep the sigmoid away from float saturation
        m, w, f = pam_forward(*self._maps(rng), self._params(rng, 5, 3, scale=0.2))
        assert w.shape == (1, 1, 4, 4)
        assert np.all((w.data > 0) & (w.data < 1))
        assert np.all(np.abs(m.data) <= np.abs(f.data))

    def test_spatial_mismatch(self):
        rng = np.random.default_rng(10)
        h, s, o = self._maps(rng)
        with pytest.raises(T.ShapeError):
            pam_forward(h, s, T.Tensor(np.zeros((1, 2, 3, 3))), self._params(rng, 5, 3))

    def test_grouping_map_averages_classes(self):
        m = T.Tensor(np.arange(6 * 4.0).reshape(1, 6, 2, 2))
        g = grouping_map(m, 2)
        assert g.shape == (1, 1, 2, 2)
        assert_allclose(g.data[0, 0], (m.data[0, 0] + m.data[0, 1]) / 2)


@pytest.fixture(scope="module")
def small():
    cfg = HourglassConfig(base_channels=4, embed_dim=4, pam_channels=3, max_tokens=64)
    return LGSANet(cfg, seed=0)


class TestModel:
    def test_required_multiple(self):
        assert HourglassConfig().required_multiple == 64
        assert tiny_model_config().required_multiple == 32

    def test_output_shapes(self, small):
        x = preprocess(np.zeros((128, 128, 3), dtype=np.uint8))
        with T.no_grad():
            lr, hr, diag = small(x)
        for maps in (lr, hr):
            assert maps.heat.shape == (1, 1, 32, 32)
            assert maps.size.shape == (1, 2, 32, 32)
            assert maps.offset.shape == (1, 2, 32, 32)
            assert np.all((maps.heat.data > 0) & (maps.heat.data < 1))
        assert len(diag.sims) == 3
        assert diag.weighting.shape == (1, 1, 32, 32)

    def test_deterministic(self, small):
        x = np.random.default_rng(0).uniform(-1, 1, (1, 3, 64, 64))
        with T.no_grad():
            a = small(x)[1].heat.data.copy()
            b = small(x)[1].heat.data
        assert_array_equal(a, b)
        other = LGSANet(small.cfg, seed=0)
        for k in small.params:
            assert_array_equal(small.params[k].data, other.params[k].data)

    def test_rejects_indivisible_input(self, small):
        with pytest.raises(T.ShapeError, match="multiples of 64"):
            small(np.zeros((1, 3, 96, 96)))

    def test_forced_unit_grouping_equals_global_mode(self):
        cfg = tiny_model_config()
        lgsa = LGSANet(cfg, seed=3)
        glob = LGSANet(tiny_model_config(attention_mode="global"), seed=3)
        for k, p in glob.params.items():
            p.data[...] = lgsa.params[k].data
        x = np.random.default_rng(1).uniform(-1, 1, (2, 3, 32, 32))
        with T.no_grad():
            _, hr_a, _ = lgsa(x, grouping_override=1.0)
            _, hr_b, _ = glob(x)
        for a, b in ((hr_a.heat, hr_b.heat), (hr_a.size, hr_b.size), (hr_a.offset, hr_b.offset)):
            assert np.max(np.abs(a.data - b.data)) <= 1e-12

    def test_parameter_sets_by_mode(self):
        names = {m: set(LGSANet(tiny_model_config(attention_mode=m)).params) for m in ("none", "global", "lgsa")}
        assert not any(n.startswith(("fuse", "pam")) for n in names["none"])
        assert names["global"] - names["none"] == {n for n in names["global"] if n.startswith("fuse")}
        assert {n for n in names["lgsa"] - names["global"]} == {n for n in names["lgsa"] if n.startswith("pam")}

    def test_state_dict_roundtrip(self):
        a, b = LGSANet(tiny_model_config(), seed=1), LGSANet(tiny_model_config(), seed=2)
        b.load_state_dict(a.state_dict())
        for k in a.params:
            assert_array_equal(a.params[k].data, b.params[k].data)
        with pytest.raises(KeyError):
            b.load_state_dict({"nope": np.zeros(1)})

    @pytest.mark.parametrize("kw", [dict(stride=3), dict(num_skip_points=4), dict(attention_mode="x"), dict(num_heads=3)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            HourglassConfig(**kw)

    def test_full_loss_gradient(self):
        err, per = model_loss_check(seed=1, n_coords=3)
        assert err <= 1e-4, max(per, key=per.get)


def test_preprocess_range():
    img = np.array([[[0, 255, 127]]], dtype=np.uint8)
    x = preprocess(img)
    assert x.shape == (1, 3, 1, 1)
    assert_allclose(x[0, :, 0, 0], [-1.0, 1.0, 127 / 127.5 - 1])
