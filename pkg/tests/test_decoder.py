import numpy as np
import pytest

from hirescross import numerics as nx
from hirescross.decoder import (
    DecoderConfig,
    DecoderError,
    HiResVLM,
    ModelConfig,
    attention_mask,
    decoder_forward,
    group_sizes,
    load_checkpoint,
    load_into,
    param_groups,
    save_checkpoint,
)
from hirescross.encoder import EncoderConfig
from hirescross.numerics import Tensor

from conftest import random_inputs, randomize_cross_output, tiny_config


def mca_config():
    # B=2, L_lo+L_T=7, D_dec=8, L_hi=16, D_hi=6, D_cross=4, H_cross=2
    return ModelConfig(
        lo=EncoderConfig(side=28, layers=0, hidden=8, heads=2),
        hi=EncoderConfig(side=56, layers=0, hidden=6, heads=2),
        dec=DecoderConfig(layers=1, hidden=8, heads=2, cross_hidden=4, cross_heads=2, hi_hidden=6, vocab=11, max_text=6),
    )


def layer_states(model, batch=2, seq=7, seed=0):
    rng = np.random.default_rng(seed)
    d = model.cfg.dec
    x = Tensor(rng.normal(size=(batch, seq, d.hidden)))
    x_hi = Tensor(rng.normal(size=(batch, model.cfg.hi.tokens, d.hi_hidden)))
    mask = np.zeros(seq, dtype=bool)
    mask[: model.cfg.lo.tokens] = True
    return x, x_hi, mask


def ln(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + eps)


class TestMsa:
    def test_zero_output_projection_is_identity(self):
        m = HiResVLM(mca_config(), dtype=np.float64)
        m.p("layers.0.wo").data[...] = 0
        x, _, mask = layer_states(m)
        out = m.msa_layer(x, mask, 0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_shape(self):
        m = HiResVLM(mca_config(), dtype=np.float64)
        x, _, mask = layer_states(m)
        assert m.msa_layer(x, mask, 0).shape == (2, 7, 8)

    def test_all_image_mask_with_equal_expert_matches_plain_attention(self):
        m = HiResVLM(mca_config(), dtype=np.float64)
        for w in ("wq", "wk", "wv"):
            m.p(f"layers.0.expert.{w}").data[...] = m.p(f"layers.0.{w}").data
        x, _, _ = layer_states(m)
        mask = np.ones(7, dtype=bool)
        out = m.msa_layer(x, mask, 0).data
        # independent dense reference: full attention, base weights, 2 heads
        h = ln(x.data)
        W = {w: m.p(f"layers.0.{w}").data for w in ("wq", "wk", "wv", "wo")}
        q, k, v = h @ W["wq"], h @ W["wk"], h @ W["wv"]
        heads = []
        for s in (slice(0, 4), slice(4, 8)):
            sc = q[..., s] @ np.swapaxes(k[..., s], -1, -2) / 2.0
            p = np.exp(sc - sc.max(-1, keepdims=True))
            p /= p.sum(-1, keepdims=True)
            heads.append(p @ v[..., s])
        ref = np.concatenate(heads, -1) @ W["wo"] + x.data
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_routing_uses_expert_only_on_image_rows(self):
        m = HiResVLM(mca_config(), dtype=np.float64)
        x, _, mask = layer_states(m)
        before = m.msa_layer(x, mask, 0).data
        # image rows use expert Q and attend only to image keys
        m.p("layers.0.wq").data[...] *= 2.0
        after = m.msa_layer(x, mask, 0).data
        np.testing.assert_array_equal(after[:, :4], before[:, :4])
        assert not np.allclose(after[:, 4:], before[:, 4:])

    def test_mask_length_mismatch(self):
        m = HiResVLM(mca_config(), dtype=np.float64)
        x, _, _ = layer_states(m)
        with pytest.raises(DecoderError):
            m.msa_layer(x, np.ones(5, dtype=bool), 0)

    def test_attention_mask_layout(self):
        allowed = attention_mask(np.array([1, 1, 0, 0, 0], dtype=bool))
        assert allowed[:2].tolist() == [[True, True, False, False, False]] * 2
        assert allowed[2].tolist() == [True, True, True, False, False]
        assert allowed[4].tolist() == [True] * 5

    def test_row_stochastic(self):
        m = HiResVLM(mca_config(), dtype=np.float64)
        x, x_hi, mask = layer_states(m)
        w_self, w_cross = [], []
        m.msa_layer(x, mask, 0, weights_out=w_self)
        m.mca_layer(x, x_hi, 0, weights_out=w_cross)
        for w in (w_self[0], w_cross[0]):
            assert np.all(w >= 0)
            np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


class TestMca:
    @pytest.mark.parametrize("which", ["wo", "wv"])
    def test_identity_delta(self, which):
        m = HiResVLM(mca_config(), dtype=np.float64)
        randomize_cross_output(m)
        m.p(f"layers.0.cross.{which}").data[...] = 0
        x, x_hi, _ = layer_states(m)
        out = m.mca_layer(x, x_hi, 0)
        assert np.array_equal(out.data, x.data)

    def test_shape(self):
        m = HiResVLM(mca_config(), dtype=np.float64)
        x, x_hi, _ = layer_states(m)
        assert x_hi.shape == (2, 16, 6)
        assert m.mca_layer(x, x_hi, 0).shape == (2, 7, 8)

    def test_single_key_closed_form(self):
        m = HiResVLM(mca_config(), dtype=np.float64)
        randomize_cross_output(m)
        x, _, _ = layer_states(m)
        x_hi = Tensor(np.random.default_rng(1).normal(size=(2, 1, 6)))
        out = m.mca_layer(x, x_hi, 0).data
        v = x_hi.data[:, 0] @ m.p("layers.0.cross.wv").data           # (B, D_cross)
        delta = v @ m.p("layers.0.cross.wo").data                       # (B, D_dec)
        np.testing.assert_allclose(out, x.data + delta[:, None, :], atol=1e-12)

    def test_errors(self):
        m = HiResVLM(mca_config(), dtype=np.float64)
        x, _, _ = layer_states(m)
        with pytest.raises(DecoderError):
            m.mca_layer(x, Tensor(np.zeros((2, 16, 5))), 0)
        with pytest.raises(DecoderError):
            m.mca_layer(x, Tensor(np.zeros((2, 0, 6))), 0)


class TestForward:
    def test_logit_shape(self, tiny_model):
        lo, hi, ids = random_inputs(tiny_model.cfg, lt=4)
        assert decoder_forward(tiny_model, (lo, hi), ids).shape == (2, 4, 11)

    def test_zero_cross_output_equals_cross_free_decoder(self):
        cfg = tiny_config(layers=2)
        with_cross = HiResVLM(cfg, seed=7)
        without = HiResVLM(cfg.without_cross(), seed=7)
        lo, hi, ids = random_inputs(cfg, lt=5, dtype=np.float32)
        a = with_cross.forward(lo, hi, ids).data
        b = without.forward(lo, None, ids).data
        assert a.dtype == np.float32
        assert np.max(np.abs(a - b)) <= 1e-6

    def test_deterministic(self):
        cfg = tiny_config()
        lo, hi, ids = random_inputs(cfg, dtype=np.float32)
        a = HiResVLM(cfg, seed=1).forward(lo, hi, ids).data
        b = HiResVLM(cfg, seed=1).forward(lo, hi, ids).data
        assert a.tobytes() == b.tobytes()

    def test_causality(self, tiny_model):
        lo, hi, ids = random_inputs(tiny_model.cfg, lt=5)
        base = tiny_model.forward(lo, hi, ids).data
        for t in range(5):
            pert = ids.copy()
            pert[:, t] = (pert[:, t] + 1) % 11
            out = tiny_model.forward(lo, hi, pert).data
            np.testing.assert_array_equal(out[:, :t], base[:, :t])
            assert np.all(np.abs(out[:, t:] - base[:, t:]).max(-1) > 0)

    def test_cross_attention_reads_everywhere(self):
        rng = np.random.default_rng(0)
        for trial in range(5):
            m = HiResVLM(tiny_config(), seed=trial, dtype=np.float64)
            randomize_cross_output(m, seed=trial)
            lo, hi, ids = random_inputs(m.cfg, lt=4, seed=trial)
            x, mask = m.embed(lo, ids)
            x = m.msa_layer(x, mask, 0)
            x_hi = Tensor(rng.normal(size=(2, m.cfg.hi.tokens, 6)))
            a = m.mca_layer(x, x_hi, 0).data
            b = m.mca_layer(x, Tensor(x_hi.data + rng.normal(scale=0.1, size=x_hi.shape)), 0).data
            assert np.all(np.abs(a - b).max(-1) > 0)

    def test_errors(self, tiny_model):
        lo, hi, ids = random_inputs(tiny_model.cfg, lt=3)
        with pytest.raises(DecoderError):
            tiny_model.forward(lo, hi, np.full((2, 3), 11))
        with pytest.raises(DecoderError):
            tiny_model.forward(lo, hi, np.zeros((2, 7), dtype=int))

    def test_greedy_generate(self, tiny_model):
        lo, hi, ids = random_inputs(tiny_model.cfg, lt=2)
        new = tiny_model.generate(lo, hi, ids, max_new=3)
        assert new.shape == (2, 3)
        # first generated token is the argmax of the forward pass
        np.testing.assert_array_equal(new[:, 0], tiny_model.forward(lo, hi, ids).data[:, -1].argmax(-1))


class TestGradients:
    def _loss(self, model, seed=0):
        lo, hi, ids = random_inputs(model.cfg, lt=3, seed=seed)
        targets = np.roll(ids, -1, axis=1)
        return lambda: nx.cross_entropy(model.forward(lo, hi, ids), targets)

    def test_cross_weights_layer0(self, tiny_model):
        names = [f"dec.layers.0.cross.{w}" for w in ("wq", "wk", "wv", "wo")]
        err = nx.grad_check(self._loss(tiny_model), [tiny_model.params[n] for n in names])
        assert err < 1e-4

    def test_both_encoder_branches(self, tiny_model):
        names = [n for n in tiny_model.params if n.startswith(("lo_enc.blocks", "hi_enc.blocks")) and "mlp" not in n]
        err = nx.grad_check(self._loss(tiny_model, seed=1), [tiny_model.params[n] for n in names])
        assert err < 1e-4

    def test_frozen_parameter_gets_zero(self, tiny_model):
        w = tiny_model.params["dec.layers.0.wq"]
        w.requires_grad = False
        (g,) = nx.gradients(self._loss(tiny_model), [w])
        assert np.all(g == 0)


class TestParamGroups:
    def test_partition(self, tiny_model):
        groups = param_groups(tiny_model)
        names = [n for g in groups.values() for n in g]
        assert sorted(names) == sorted(tiny_model.params)
        assert len(names) == len(set(names))

    def test_cross_group_contents(self, tiny_model):
        cross = set(param_groups(tiny_model)["cross_module"])
        expected = {n for n in tiny_model.params if n.startswith("hi_enc.")}
        expected |= {f"dec.layers.0.cross.{w}" for w in ("ln.g", "ln.b", "wq", "wk", "wv", "wo")}
        assert cross == expected

    def test_expert_group_contents(self, tiny_model):
        expert = param_groups(tiny_model)["visual_expert"]
        assert expert and all(".expert." in n for n in expert)

    def test_sizes_sum(self, tiny_model):
        assert sum(group_sizes(tiny_model).values()) == tiny_model.num_parameters()


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, tiny_model):
        digest = save_checkpoint(tiny_model.params, tmp_path / "m.ckpt")
        state = load_checkpoint(tmp_path / "m.ckpt")
        assert set(state) == set(tiny_model.params)
        for n, t in tiny_model.params.items():
            assert state[n].tobytes() == t.data.tobytes()
        assert len(digest) == 64
        fresh = HiResVLM(tiny_model.cfg, seed=99, dtype=np.float64)
        load_into(fresh, state)
        lo, hi, ids = random_inputs(fresh.cfg)
        np.testing.assert_array_equal(fresh.forward(lo, hi, ids).data, tiny_model.forward(lo, hi, ids).data)

    def test_header_is_little_endian(self, tmp_path):
        save_checkpoint({"a": np.arange(3, dtype=np.float32)}, tmp_path / "a.ckpt")
        blob = (tmp_path / "a.ckpt").read_bytes()
        assert blob[:8] == b"HRXCKPT\0"
        assert blob[8:12] == (1).to_bytes(4, "little")
        assert blob[-4:] == np.float32(2.0).tobytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"nope" * 8)
        with pytest.raises(DecoderError):
            load_checkpoint(tmp_path / "x")
