import math

import numpy as np
import pytest
import torch

from caslayout.nn import functional as F
from caslayout.nn import checkpoint
from caslayout.nn.modules import MLP, Attention, TransformerBlock, init_parameters
from caslayout.nn.optim import ParamStore, adamw_step, decayed_lr

from oracles import gradcheck


@pytest.fixture(autouse=True)
def float64_default():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


CONFIGS = range(10)


def _probe(rng, shape):
    # random projection so every output element contributes to the scalar
    return torch.tensor(rng.normal(size=shape))


class TestGradients:
    @pytest.mark.parametrize("seed", CONFIGS)
    def test_linear(self, seed):
        rng = np.random.default_rng(seed)
        b, i, o = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5)
        probe = _probe(rng, (b, o))
        gradcheck(lambda x, w, c: (F.linear(x, w, c) * probe).sum(),
                  [rng.normal(size=(b, i)), rng.normal(size=(o, i)), rng.normal(size=o)])

    @pytest.mark.parametrize("seed", CONFIGS)
    def test_layer_norm(self, seed):
        rng = np.random.default_rng(100 + seed)
        d = int(rng.integers(2, 7))
        probe = _probe(rng, (3, d))
        gradcheck(lambda x, g, c: (F.layer_norm(x, g, c) * probe).sum(),
                  [rng.normal(size=(3, d)), rng.normal(size=d), rng.normal(size=d)])

    @pytest.mark.parametrize("seed", CONFIGS)
    def test_mlp(self, seed):
        rng = np.random.default_rng(200 + seed)
        dims = [int(v) for v in rng.integers(1, 6, size=3)]
        probe = _probe(rng, (2, dims[-1]))
        params = [rng.normal(size=(dims[1], dims[0])), rng.normal(size=dims[1]),
                  rng.normal(size=(dims[2], dims[1])), rng.normal(size=dims[2])]

        def fn(x, w1, b1, w2, b2):
            return (F.mlp(x, [(w1, b1), (w2, b2)]) * probe).sum()

        gradcheck(fn, [rng.normal(size=(2, dims[0]))] + params)

    @pytest.mark.parametrize("seed", CONFIGS)
    def test_embed(self, seed):
        rng = np.random.default_rng(300 + seed)
        idx = torch.tensor(rng.integers(0, 5, size=4))
        probe = _probe(rng, (4, 3))
        gradcheck(lambda t: (F.embed(idx, t) * probe).sum(), [rng.normal(size=(5, 3))])

    @pytest.mark.parametrize("seed", CONFIGS)
    def test_attention(self, seed):
        rng = np.random.default_rng(400 + seed)
        heads = int(rng.choice([1, 2]))
        width = 2 * heads
        dq, dk = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        nq, nk = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        mask = torch.tensor(rng.random((1, nk)) < 0.8)
        mask[0, 0] = True
        probe = _probe(rng, (1, nq, width))

        def fn(q, kv, wq, wk, wv, wo, bo):
            return (F.attention(q, kv, wq, wk, wv, wo, bo, heads, mask) * probe).sum()

        gradcheck(fn, [
            rng.normal(size=(1, nq, dq)), rng.normal(size=(1, nk, dk)),
            rng.normal(size=(width, dq)), rng.normal(size=(width, dk)), rng.normal(size=(width, dk)),
            rng.normal(size=(width, width)), rng.normal(size=width),
        ])

    @pytest.mark.parametrize("seed", CONFIGS)
    def test_cross_entropy_and_kl(self, seed):
        rng = np.random.default_rng(500 + seed)
        target = torch.tensor(rng.integers(0, 4, size=5))
        w = torch.tensor(rng.random(5) < 0.7)
        gradcheck(lambda z: F.cross_entropy(z, target, w), [rng.normal(size=(5, 4))])
        gradcheck(lambda mu, lv: F.gaussian_kl(mu, lv).sum(), [rng.normal(size=6), rng.normal(size=6)])

    @pytest.mark.parametrize("seed", range(3))
    def test_transformer_block(self, seed):
        rng = np.random.default_rng(600 + seed)
        blk = TransformerBlock(4, 2, {"ctx": 3}).double()
        init_parameters(blk, seed)
        x0 = rng.normal(size=(1, 3, 4))
        ctx = torch.tensor(rng.normal(size=(1, 2, 3)))
        probe = _probe(rng, (1, 3, 4))
        gradcheck(lambda x: (blk(x, None, {"ctx": (ctx, None)}) * probe).sum(), [x0])


class TestOps:
    def test_linear_identity(self):
        x = torch.randn(3, 4)
        assert torch.equal(F.linear(x, torch.eye(4), torch.zeros(4)), x)

    def test_linear_shape_error_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(3, 4\).*\(2, 5\)"):
            F.linear(torch.zeros(3, 4), torch.zeros(2, 5))

    def test_layer_norm_constant_is_zero(self):
        assert torch.equal(F.layer_norm(torch.full((2, 5), 3.7)), torch.zeros(2, 5))

    def test_embed_out_of_range(self):
        with pytest.raises(ValueError):
            F.embed(torch.tensor([3]), torch.zeros(3, 2))

    def test_single_token_attention_is_value_projection(self):
        att = Attention(4, 2)
        init_parameters(att, 0)
        x = torch.randn(1, 1, 4)
        expected = F.linear(F.linear(x, att.wv), att.wo, att.bo)
        assert torch.allclose(att(x, x), expected, atol=1e-12)

    def test_attention_kv_permutation_invariant(self):
        att = Attention(4, 2, 3)
        init_parameters(att, 1)
        q, kv = torch.randn(1, 3, 4), torch.randn(1, 5, 3)
        perm = torch.randperm(5)
        assert torch.allclose(att(q, kv), att(q, kv[:, perm]), atol=1e-12)

    def test_attention_q_permutation_equivariant(self):
        att = Attention(4, 2)
        init_parameters(att, 2)
        x = torch.randn(1, 6, 4)
        mask = torch.tensor([[True, True, False, True, True, False]])
        perm = torch.randperm(6)
        out = att(x, x, mask)
        out_p = att(x[:, perm], x[:, perm], mask[:, perm])
        assert torch.allclose(out[:, perm], out_p, atol=1e-12)

    def test_attention_empty_kv(self):
        att = Attention(4, 2, 3)
        init_parameters(att, 3)
        out = att(torch.randn(2, 3, 4), torch.zeros(2, 0, 3))
        assert out.shape == (2, 3, 4) and torch.equal(out, torch.zeros(2, 3, 4))

    def test_attention_dim_mismatch(self):
        att = Attention(4, 2)
        with pytest.raises(ValueError):
            att(torch.randn(1, 2, 5), torch.randn(1, 2, 4))

    def test_timestep_zero(self):
        emb = F.timestep_embedding(0, 8)
        assert torch.equal(emb, torch.tensor([0.0] * 4 + [1.0] * 4, dtype=torch.float64))

    def test_timestep_closed_form_dim4(self):
        # freqs = 10000^(-k/2) for k = 0, 1 -> 1 and 0.01
        emb = F.timestep_embedding(1, 4).numpy()
        np.testing.assert_allclose(emb, [math.sin(1), math.sin(0.01), math.cos(1), math.cos(0.01)], rtol=0, atol=1e-15)

    def test_timestep_distinct(self):
        embs = F.timestep_embedding(torch.arange(0, 101), 32)
        assert len({tuple(e.tolist()) for e in embs}) == 101

    def test_kl_closed_forms(self):
        assert float(F.gaussian_kl(torch.zeros(3), torch.zeros(3)).sum()) == 0.0
        assert torch.allclose(F.gaussian_kl(torch.ones(3), torch.zeros(3)), torch.full((3,), 0.5))


class TestInit:
    def test_seeded_bit_identical(self):
        a, b = MLP([3, 5, 2]), MLP([3, 5, 2])
        init_parameters(a, 9)
        init_parameters(b, 9)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(pa, pb)

    def test_truncated_std(self):
        m = MLP([256, 256])
        init_parameters(m, 0)
        w = m.layers[0].weight.detach()
        assert float(w.abs().max()) <= 0.04 + 1e-12
        assert torch.equal(m.layers[0].bias, torch.zeros(256))


class TestAdamW:
    def _scalar(self, w0):
        p = torch.nn.Parameter(torch.tensor([w0]))
        return p, ParamStore({"w": p})

    def test_zero_grad_no_decay_is_noop(self):
        p, store = self._scalar(1.5)
        adamw_step(store, {"w": torch.zeros(1)}, lr=0.1, weight_decay=0.0)
        assert p.item() == 1.5

    def test_descends_quadratic(self):
        p, store = self._scalar(1.0)
        adamw_step(store, {"w": 2 * p.detach().clone()}, lr=0.1)
        assert p.item() ** 2 < 1.0

    def test_hand_trace_three_steps(self):
        # f(w) = w^2, w0 = 1, lr = 0.1, wd = 0.01, betas (0.9, 0.999), eps 1e-8
        w, m, v = 1.0, 0.0, 0.0
        trace = []
        for t in (1, 2, 3):
            g = 2 * w
            w *= 1 - 0.1 * 0.01
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
            trace.append(w)
        p, store = self._scalar(1.0)
        got = []
        for _ in range(3):
            adamw_step(store, {"w": 2 * p.detach().clone()}, lr=0.1, weight_decay=0.01)
            got.append(p.item())
        np.testing.assert_allclose(got, trace, rtol=1e-12)

    def test_nonfinite_gradient_fails_fast(self):
        p, store = self._scalar(1.0)
        with pytest.raises(FloatingPointError):
            adamw_step(store, {"w": torch.tensor([float("nan")])}, lr=0.1)
        assert p.item() == 1.0 and store.step_count == 0

    def test_decayed_lr(self):
        assert decayed_lr(1e-4, 255, 0.02, 256) == 1e-4
        assert decayed_lr(1e-4, 512, 0.02, 256) == pytest.approx(1e-4 * 0.98**2)


class TestCheckpoint:
    def test_round_trip_bit_exact(self):
        g = torch.Generator().manual_seed(0)
        tensors = {
            "a": torch.randn(3, 4, generator=g, dtype=torch.float32),
            "b.weight": torch.randn(5, generator=g, dtype=torch.float64),
            "steps": torch.tensor([7, -1], dtype=torch.int64),
            "scalar": torch.tensor(2.5, dtype=torch.float64),
        }
        blob = checkpoint.dumps(tensors, {"stage": 4})
        back, meta = checkpoint.loads(blob)
        assert meta == {"stage": 4}
        assert list(back) == list(tensors)
        for k in tensors:
            assert back[k].dtype == tensors[k].dtype and torch.equal(back[k], tensors[k])
        assert checkpoint.dumps(back, meta) == blob

    def test_header(self):
        blob = checkpoint.dumps({})
        assert blob[:4] == b"CLCK" and int.from_bytes(blob[4:8], "little") == checkpoint.VERSION

    def test_bad_magic(self):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(b"XXXX\x01\x00\x00\x00")

    def test_truncated(self):
        blob = checkpoint.dumps({"a": torch.ones(10)})
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(blob[:-3])
