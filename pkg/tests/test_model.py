"""Backend model: every stage against a scalar-loop reference, the spec'd
degenerate cases, shape contracts, and parameter accounting."""

import numpy as np
import pytest

from stacksv import autodiff as ad
from stacksv.checkpoint import read_checkpoint, write_checkpoint
from stacksv.model import (BackendModel, ModelConfig, init_params, large_preset,
                           param_count, param_count_by_group)
from stacksv.verify import full_model_grad_check

from conftest import tiny_config


# ---------------------------------------------------------------------------
# scalar-loop reference implementations (the oracles)
# ---------------------------------------------------------------------------

def softmax_ref(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def vad_ref(x, layer_logits, score_w):
    """x: (C, L, T).  Shared weighted sum over layers, per-layer sigmoid
    frame scores, elementwise rescale."""
    C, L, T = x.shape
    w = softmax_ref(layer_logits)
    merged = np.zeros((C, T))
    for l in range(L):
        merged += w[l] * x[:, l, :]
    out = np.zeros_like(x)
    for l in range(L):
        for t in range(T):
            score = 0.0
            for c in range(C):
                score += score_w[l, c] * merged[c, t]
            alpha = 1.0 / (1.0 + np.exp(-score))
            for c in range(C):
                out[c, l, t] = alpha * x[c, l, t]
    return out


def mca_ref(x, proj_w, proj_b, heads, head_dim):
    """x: (C, L, T); heads: list of (reduce_w, expand_w).  Returns (C, T)."""
    C, L, T = x.shape
    p = np.zeros_like(x)
    for l in range(L):
        for t in range(T):
            p[:, l, t] = proj_w @ x[:, l, t] + proj_b
    scaled = np.zeros_like(p)
    for k, (rw, ew) in enumerate(heads):
        sl = slice(k * head_dim, (k + 1) * head_dim)
        for t in range(T):
            s_avg = np.array([p[sl, l, t].mean() for l in range(L)])
            s_max = np.array([p[sl, l, t].max() for l in range(L)])
            za = ew @ np.maximum(rw @ s_avg, 0.0)
            zm = ew @ np.maximum(rw @ s_max, 0.0)
            gate = 1.0 / (1.0 + np.exp(-(za + zm)))
            for l in range(L):
                scaled[sl, l, t] = p[sl, l, t] * gate[l]
    out = np.zeros((C, T))
    for c in range(C):
        for t in range(T):
            out[c, t] = scaled[c, :, t].max()
    return out


def superb_ref(x, layer_logits):
    w = softmax_ref(layer_logits)
    C, L, T = x.shape
    out = np.zeros((C, T))
    for l in range(L):
        out += w[l] * x[:, l, :]
    return out


def asp_ref(x, hidden_w, hidden_b, score_w, var_floor=1e-9):
    """x: (C, T) -> (2C,) attention-weighted mean and std per channel."""
    C, T = x.shape
    scores = np.zeros((C, T))
    for t in range(T):
        scores[:, t] = score_w @ np.tanh(hidden_w @ x[:, t] + hidden_b)
    out = np.zeros(2 * C)
    for c in range(C):
        alpha = softmax_ref(scores[c])
        mu = float(np.dot(alpha, x[c]))
        ex2 = float(np.dot(alpha, x[c] ** 2))
        out[c] = mu
        out[C + c] = np.sqrt(max(ex2 - mu * mu, var_floor))
    return out


def make_model(cfg, seed=0, randomize=True):
    m = BackendModel(cfg, seed=seed, dtype=np.float64)
    if randomize:
        r = np.random.default_rng(seed + 100)
        for _, t in m.params.items():
            t.data = t.data + r.uniform(-0.3, 0.3, t.data.shape)
    return m


# ---------------------------------------------------------------------------
# attentive VAD
# ---------------------------------------------------------------------------

class TestAttentiveVad:
    def test_zero_parameters_halve_the_input(self, rng):
        cfg = tiny_config()
        m = BackendModel(cfg, seed=0, dtype=np.float64)   # vad params zero-init
        x = ad.Tensor(rng.standard_normal((2, cfg.backbone_dim,
                                           cfg.input_layers, 6)))
        out = m._attentive_vad(x)
        np.testing.assert_array_equal(out.data, x.data / 2.0)

    def test_single_layer_uses_unit_weight(self, rng):
        cfg = tiny_config(input_layers=1)
        m = make_model(cfg)
        w = ad.softmax(m.params["vad.layer_logits"], axis=0)
        assert w.data.shape == (1,) and w.data[0] == pytest.approx(1.0)
        x = rng.standard_normal((1, cfg.backbone_dim, 1, 5))
        out = m._attentive_vad(ad.Tensor(x))
        ref = vad_ref(x[0], m.params["vad.layer_logits"].data,
                      m.params["vad.score"].data)
        np.testing.assert_allclose(out.data[0], ref, atol=1e-12)

    def test_matches_loop_reference(self, rng):
        cfg = tiny_config(backbone_dim=4, num_heads=2, head_dim=2,
                          d2_growth=2, d2_bottleneck=2, input_layers=2)
        m = make_model(cfg, seed=3)
        x = rng.standard_normal((1, 4, 2, 3))
        out = m._attentive_vad(ad.Tensor(x))
        ref = vad_ref(x[0], m.params["vad.layer_logits"].data,
                      m.params["vad.score"].data)
        np.testing.assert_allclose(out.data[0], ref, atol=1e-12)

    def test_output_bounded_by_input(self, rng):
        cfg = tiny_config()
        m = make_model(cfg, seed=7)
        x = rng.standard_normal((3, cfg.backbone_dim, cfg.input_layers, 8)) * 10
        out = m._attentive_vad(ad.Tensor(x))
        assert (np.abs(out.data) <= np.abs(x) + 1e-12).all()


# ---------------------------------------------------------------------------
# dense dilated block
# ---------------------------------------------------------------------------

class TestDenseBlock:
    def test_single_group_layer_equals_plain_conv(self, rng):
        cfg = tiny_config()
        m = make_model(cfg, seed=1)
        z = ad.Tensor(rng.standard_normal((1, cfg.d2_bottleneck,
                                           cfg.input_layers, 6)))
        got = m._md_conv([z], 1, training=True)
        kernel = m.params["d2.conv1_0.weight"]
        direct = ad.conv2d(z, kernel, dilation=(1, 1))
        st = ad.BatchNormState(cfg.d2_growth)
        expect = ad.relu(ad.batch_norm(direct, m.params["d2.norm1.gamma"],
                                       m.params["d2.norm1.beta"], st, True))
        np.testing.assert_allclose(got.data, expect.data, atol=1e-12)

    def test_wrong_group_count_rejected(self, rng):
        cfg = tiny_config()
        m = make_model(cfg)
        z = ad.Tensor(rng.standard_normal((1, cfg.d2_bottleneck, 3, 4)))
        with pytest.raises(ValueError, match="groups"):
            m._md_conv([z, z], 1, training=True)

    def test_delta_kernels_pick_group_centers(self):
        # layer 2 with center-tap-only kernels: output before norm equals the
        # sum of both groups' centers; verify via the conv primitive directly
        rng = np.random.default_rng(5)
        g0 = rng.standard_normal((1, 2, 3, 7))
        g1 = rng.standard_normal((1, 2, 3, 7))
        delta = np.zeros((2, 2, 3, 3))
        for c in range(2):
            delta[c, c, 1, 1] = 1.0
        got = (ad.conv2d(ad.Tensor(g0), ad.Tensor(delta), (1, 1)).data
               + ad.conv2d(ad.Tensor(g1), ad.Tensor(delta), (1, 2)).data)
        np.testing.assert_allclose(got, g0 + g1, atol=1e-12)

    def test_receptive_field_has_no_blind_spots(self):
        # all-ones kernels, dense connectivity with frame dilations 1,2,4,8;
        # an impulse must light up a contiguous frame window at every stage
        T = 61
        impulse = np.zeros((1, 1, 1, T))
        impulse[0, 0, 0, T // 2] = 1.0
        ones = ad.Tensor(np.ones((1, 1, 3, 3)))
        groups = [ad.Tensor(impulse)]
        for i in range(1, 5):
            total = None
            for j, g in enumerate(groups):
                y = ad.conv2d(g, ones, dilation=(1, 2 ** j))
                total = y if total is None else ad.add(total, y)
            groups.append(total)
            support = np.flatnonzero(total.data[0, 0, 0] > 0)
            assert support.size == support[-1] - support[0] + 1, \
                f"gap in receptive field at dense layer {i}"
        # depth-4 window must widen well beyond the plain 3x3 chain
        assert support.size > 2 * 4 * 2 + 1

    def test_zeroed_block_is_identity(self, rng):
        cfg = tiny_config()
        m = BackendModel(cfg, seed=0, dtype=np.float64)
        for name, t in m.params.items():
            if name.startswith("d2."):
                t.data = np.zeros_like(t.data)
        x = ad.Tensor(rng.standard_normal((2, cfg.backbone_dim,
                                           cfg.input_layers, 5)))
        out = m._d2_block(x, training=True)
        np.testing.assert_array_equal(out.data, x.data)

    @pytest.mark.parametrize("L,T", [(13, 150), (25, 7), (1, 1)])
    def test_shape_contract(self, L, T, rng):
        cfg = tiny_config(input_layers=L)
        m = make_model(cfg)
        x = ad.Tensor(rng.standard_normal((1, cfg.backbone_dim, L, T)))
        assert m._d2_block(x, training=True).data.shape == x.data.shape

    def test_block_parameter_count_matches_hand_count(self):
        cfg = ModelConfig()   # stock sizes: 512 backbone, 128 growth
        groups = param_count_by_group(cfg)
        convs = sum(128 * 128 * 9 for i in range(1, 5) for _ in range(i))
        bottleneck = 128 * 512 + 128
        se = 512 * 128 + 128 + 128 * 512 + 512
        norms = 4 * 2 * 128
        assert groups["d2"] == convs + bottleneck + se + norms == 1_672_960


# ---------------------------------------------------------------------------
# layer pooling
# ---------------------------------------------------------------------------

class TestLayerPooling:
    def test_mca_single_layer_is_se_scaled_input(self, rng):
        cfg = tiny_config(input_layers=1)
        m = make_model(cfg, seed=2)
        x = rng.standard_normal((1, cfg.backbone_dim, 1, 4))
        out = m._mca_pool(ad.Tensor(x))
        heads = [(m.params[f"mca.head{k}.reduce.weight"].data,
                  m.params[f"mca.head{k}.expand.weight"].data)
                 for k in range(cfg.num_heads)]
        ref = mca_ref(x[0], m.params["mca.proj.weight"].data,
                      m.params["mca.proj.bias"].data, heads, cfg.head_dim)
        np.testing.assert_allclose(out.data[0], ref, atol=1e-12)
        # max over a singleton layer axis is the SE-scaled projection itself
        assert m.params[f"mca.head0.reduce.weight"].data.shape == (1, 1)

    def test_mca_zero_gates_halve_projected_max(self, rng):
        cfg = tiny_config()
        m = make_model(cfg, seed=4)
        for k in range(cfg.num_heads):
            m.params[f"mca.head{k}.reduce.weight"].data *= 0.0
            m.params[f"mca.head{k}.expand.weight"].data *= 0.0
        x = rng.standard_normal((1, cfg.backbone_dim, cfg.input_layers, 5))
        out = m._mca_pool(ad.Tensor(x))
        proj = np.einsum("oc,clt->olt", m.params["mca.proj.weight"].data, x[0]) \
            + m.params["mca.proj.bias"].data[:, None, None]
        np.testing.assert_allclose(out.data[0], 0.5 * proj.max(axis=1),
                                   atol=1e-12)

    @pytest.mark.parametrize("seed", range(6))
    def test_mca_matches_loop_reference(self, seed):
        rng = np.random.default_rng(seed)
        cfg = tiny_config(input_layers=4)
        m = make_model(cfg, seed=seed)
        x = rng.standard_normal((2, cfg.backbone_dim, 4, 6))
        out = m._mca_pool(ad.Tensor(x))
        heads = [(m.params[f"mca.head{k}.reduce.weight"].data,
                  m.params[f"mca.head{k}.expand.weight"].data)
                 for k in range(cfg.num_heads)]
        for b in range(2):
            ref = mca_ref(x[b], m.params["mca.proj.weight"].data,
                          m.params["mca.proj.bias"].data, heads, cfg.head_dim)
            np.testing.assert_allclose(out.data[b], ref, atol=1e-11)

    def test_mca_bottleneck_floor_at_l1(self):
        cfg = tiny_config(input_layers=1)
        store = init_params(cfg, seed=0, dtype=np.float64)
        assert store["mca.head0.reduce.weight"].data.shape == (1, 1)

    def test_superb_uniform_weights_give_layer_mean(self, rng):
        cfg = tiny_config(pool_mode="superb")
        m = BackendModel(cfg, seed=0, dtype=np.float64)   # logits zero-init
        x = rng.standard_normal((2, cfg.backbone_dim, cfg.input_layers, 5))
        out = m._superb_pool(ad.Tensor(x))
        np.testing.assert_allclose(out.data, x.mean(axis=2), atol=1e-12)

    def test_superb_extreme_logits_select_one_layer(self, rng):
        cfg = tiny_config(pool_mode="superb")
        m = BackendModel(cfg, seed=0, dtype=np.float64)
        logits = np.full(cfg.input_layers, -60.0)
        logits[0] = 60.0
        m.params["superb.layer_logits"].data = logits
        x = rng.standard_normal((1, cfg.backbone_dim, cfg.input_layers, 4))
        out = m._superb_pool(ad.Tensor(x))
        np.testing.assert_allclose(out.data[0], x[0, :, 0, :], atol=1e-10)

    @pytest.mark.parametrize("seed", range(4))
    def test_superb_matches_loop_reference(self, seed):
        rng = np.random.default_rng(seed)
        cfg = tiny_config(pool_mode="superb")
        m = BackendModel(cfg, seed=seed, dtype=np.float64)
        m.params["superb.layer_logits"].data = rng.standard_normal(
            cfg.input_layers)
        x = rng.standard_normal((1, cfg.backbone_dim, cfg.input_layers, 5))
        out = m._superb_pool(ad.Tensor(x))
        ref = superb_ref(x[0], m.params["superb.layer_logits"].data)
        np.testing.assert_allclose(out.data[0], ref, atol=1e-12)


# ---------------------------------------------------------------------------
# attentive statistics pooling
# ---------------------------------------------------------------------------

class TestAttentiveStats:
    def test_zero_attention_equals_plain_mean_std(self, rng):
        cfg = tiny_config()
        m = BackendModel(cfg, seed=0, dtype=np.float64)
        for name in ("asp.hidden.weight", "asp.hidden.bias", "asp.score.weight"):
            m.params[name].data = np.zeros_like(m.params[name].data)
        x = rng.standard_normal((2, cfg.backbone_dim, 7))
        out = m._asp(ad.Tensor(x)).data
        C = cfg.backbone_dim
        np.testing.assert_allclose(out[:, :C], x.mean(axis=2), atol=1e-10)
        np.testing.assert_allclose(out[:, C:], x.std(axis=2), atol=1e-7)

    def test_single_frame_hits_variance_floor(self, rng):
        cfg = tiny_config()
        m = make_model(cfg)
        x = rng.standard_normal((1, cfg.backbone_dim, 1))
        out = m._asp(ad.Tensor(x)).data
        C = cfg.backbone_dim
        np.testing.assert_allclose(out[0, :C], x[0, :, 0], atol=1e-12)
        np.testing.assert_allclose(out[0, C:], np.sqrt(1e-9), rtol=1e-6)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_loop_reference(self, seed):
        rng = np.random.default_rng(seed)
        cfg = tiny_config(backbone_dim=8, num_heads=2, head_dim=4,
                          d2_growth=4, d2_layers=2)
        m = make_model(cfg, seed=seed)
        x = rng.standard_normal((1, 8, 5))
        out = m._asp(ad.Tensor(x)).data[0]
        ref = asp_ref(x[0], m.params["asp.hidden.weight"].data,
                      m.params["asp.hidden.bias"].data,
                      m.params["asp.score.weight"].data)
        np.testing.assert_allclose(out, ref, atol=1e-10)


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

class TestFullPipeline:
    def test_embedding_length_and_eval_determinism(self, rng):
        cfg = tiny_config()
        m = make_model(cfg)
        stack = rng.standard_normal((cfg.input_dim, cfg.input_layers, 9))
        e1 = m.embed(stack)
        e2 = m.embed(stack.copy())
        assert e1.shape == (cfg.embed_dim,)
        assert e1.tobytes() == e2.tobytes()

    @pytest.mark.parametrize("L,T", [(1, 1), (4, 37), (25, 300)])
    def test_shape_contract_across_geometries(self, L, T, rng):
        cfg = tiny_config(input_layers=L)
        m = make_model(cfg)
        out = m.forward(rng.standard_normal((2, cfg.input_dim, L, T)),
                        training=True)
        assert out.data.shape == (2, cfg.embed_dim)

    def test_finite_for_large_inputs(self, rng):
        cfg = tiny_config()
        m = make_model(cfg)
        x = rng.uniform(-10, 10, (3, cfg.input_dim, cfg.input_layers, 20))
        out = m.forward(x, training=True)
        assert np.isfinite(out.data).all()

    def test_input_validation(self, rng):
        cfg = tiny_config()
        m = make_model(cfg)
        with pytest.raises(ValueError, match="does not match"):
            m.forward(rng.standard_normal((1, cfg.input_dim + 1,
                                           cfg.input_layers, 4)))
        with pytest.raises(ValueError, match="batch"):
            m.forward(rng.standard_normal((cfg.input_dim, cfg.input_layers, 4)))

    def test_superb_baseline_parameter_names(self):
        cfg = tiny_config(use_attn_vad=False, use_d2=False, pool_mode="superb")
        names = set(init_params(cfg, dtype=np.float64).names())
        assert names == {
            "front.weight", "front.bias", "superb.layer_logits",
            "asp.hidden.weight", "asp.hidden.bias", "asp.score.weight",
            "embed.weight", "embed.norm.gamma", "embed.norm.beta"}

    def test_full_model_gradients_spec_example(self):
        # 2-sample batch, margin loss, 64-bit, eps 1e-4
        err = full_model_grad_check(seed=0, eps=1e-4)
        assert err < 1e-4

    def test_base_geometry_gradients_sampled(self):
        # stock-size front-end geometry on a short clip; entries subsampled
        cfg = ModelConfig(embed_dim=32)
        err = full_model_grad_check(seed=1, eps=1e-4, cfg=cfg, n_frames=10,
                                    max_entries_per_param=1, n_classes=4)
        assert err < 1e-4


class TestParamCount:
    def test_base_band(self):
        total = param_count(ModelConfig())
        assert 2.5e6 <= total <= 3.3e6

    def test_large_band(self):
        total = param_count(large_preset())
        assert 2.6e6 <= total <= 3.4e6

    def test_disabling_d2_strictly_shrinks(self):
        full = param_count(ModelConfig())
        assert param_count(ModelConfig(use_d2=False)) < full

    def test_store_total_matches_analytic(self):
        cfg = tiny_config()
        assert init_params(cfg, dtype=np.float64).total_count() == \
            param_count(cfg)


class TestCheckpointFormat:
    def test_bit_exact_roundtrip(self, tmp_path, rng):
        cfg = tiny_config()
        m = BackendModel(cfg, seed=5, dtype=np.float32)
        path = tmp_path / "model.upsv"
        write_checkpoint(path, m.state_arrays())
        first = path.read_bytes()
        state = read_checkpoint(path)
        for name, arr in m.state_arrays().items():
            np.testing.assert_array_equal(state[name], arr)
        write_checkpoint(path, state)
        assert path.read_bytes() == first

    def test_magic_and_layout(self, tmp_path):
        path = tmp_path / "one.upsv"
        write_checkpoint(path, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
        blob = path.read_bytes()
        assert blob[:4] == b"UPSV"
        # version, name len, name, rank, extents, 6 floats
        assert len(blob) == 4 + 4 + 4 + 1 + 4 + 8 + 24

    def test_load_shape_mismatch_rejected(self, tmp_path):
        cfg = tiny_config()
        m = BackendModel(cfg, seed=0, dtype=np.float32)
        state = m.state_arrays()
        state["front.weight"] = state["front.weight"][:, :-1]
        path = tmp_path / "bad.upsv"
        write_checkpoint(path, state)
        with pytest.raises(ValueError, match="shape mismatch"):
            m.load_state_arrays(read_checkpoint(path))
