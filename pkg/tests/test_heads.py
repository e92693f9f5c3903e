import math

import numpy as np
import pytest
import torch

from vqlab.heads import (
    VARIANTS,
    AttentionBlock,
    HeadConfig,
    MultiHeadAttention,
    QueryConditionedHead,
    SetAttention,
    conditional_projection,
    embed_title,
    format_prompt,
)

torch.set_default_dtype(torch.float64)


def contraction_oracle(weight, q, xs):
    """Triple-loop contraction: M[o,i] = sum_c W[o,i,c] q[c]; y = M x."""
    c_out, c_in, c_cond = weight.shape
    n = xs.shape[0]
    out = torch.zeros(n, c_out, dtype=weight.dtype)
    for b in range(n):
        for o in range(c_out):
            acc = 0.0
            for i in range(c_in):
                m = 0.0
                for c in range(c_cond):
                    m += float(weight[o, i, c]) * float(q[c])
                acc += m * float(xs[b, i])
            out[b, o] = acc
    return out


def test_conditional_projection_worked_example():
    # W row-major 0.1*k over a 2x2x2 tensor, q=[1,2], x=[1,1]
    weight = torch.arange(8, dtype=torch.float64).reshape(2, 2, 2) * 0.1
    q = torch.tensor([1.0, 2.0])
    xs = torch.tensor([[1.0, 1.0]])
    out = conditional_projection(weight, q, xs)
    assert torch.allclose(out, torch.tensor([[1.0, 3.4]]), atol=1e-12)


def test_conditional_projection_matches_oracle_100_configs():
    rng = np.random.default_rng(3)
    for _ in range(100):
        c_out, c_in, c_cond = rng.integers(1, 6, size=3)
        n = int(rng.integers(1, 5))
        weight = torch.tensor(rng.standard_normal((c_out, c_in, c_cond)))
        q = torch.tensor(rng.standard_normal(c_cond))
        xs = torch.tensor(rng.standard_normal((n, c_in)))
        got = conditional_projection(weight, q, xs)
        want = contraction_oracle(weight, q, xs)
        assert torch.allclose(got, want, atol=1e-10)


def attention_oracle(x, attn: MultiHeadAttention):
    """Scalar-loop multi-head attention with explicit softmax."""
    n, d = x.shape
    heads = attn.num_heads
    dh = d // heads
    qw, kw, vw = attn.q_proj, attn.k_proj, attn.v_proj
    q = x @ qw.weight.T + qw.bias
    k = x @ kw.weight.T + kw.bias
    v = x @ vw.weight.T + vw.bias
    out = torch.zeros_like(x)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        qe, ke, ve = q[:, sl], k[:, sl], v[:, sl]
        for i in range(n):
            logits = torch.tensor([float(qe[i] @ ke[j]) / math.sqrt(dh) for j in range(n)])
            w = torch.softmax(logits, dim=0)
            out[i, sl] = sum(w[j] * ve[j] for j in range(n))
    return out @ attn.out_proj.weight.T + attn.out_proj.bias


def test_attention_matches_scalar_oracle():
    torch.manual_seed(0)
    attn = MultiHeadAttention(8, 2)
    with torch.no_grad():
        for p in attn.parameters():
            p.copy_(torch.randn_like(p))
    x = torch.randn(5, 8)
    assert torch.allclose(attn(x, x), attention_oracle(x, attn), atol=1e-10)


def test_set_attention_permutation_equivariance():
    torch.manual_seed(1)
    sa = SetAttention(dim=16, num_heads=4, num_layers=2)
    with torch.no_grad():
        for p in sa.parameters():
            p.add_(0.1 * torch.randn_like(p))
    x = torch.randn(7, 16)
    base = sa(x)
    rng = np.random.default_rng(2)
    for _ in range(50):
        perm = torch.tensor(rng.permutation(7))
        assert torch.allclose(sa(x[perm]), base[perm], atol=1e-10)


def test_head_scores_permutation_invariant_per_proposal():
    torch.manual_seed(2)
    for variant in VARIANTS:
        cfg = HeadConfig(variant=variant, feature_dim=16, cond_dim=16, c_out=16, num_heads=4)
        head = QueryConditionedHead(cfg)
        with torch.no_grad():
            for p in head.parameters():
                p.add_(0.05 * torch.randn_like(p))
        xs = torch.randn(6, 16)
        q = torch.randn(16)
        base = head(q, xs).scores
        rng = np.random.default_rng(4)
        for _ in range(50):
            perm = torch.tensor(rng.permutation(6))
            got = head(q, xs[perm]).scores
            assert torch.allclose(got, base[perm], atol=1e-10), variant


def test_attention_block_residual_identity_at_init():
    torch.manual_seed(3)
    block = AttentionBlock(dim=12, num_heads=3)
    x = torch.randn(5, 12)
    assert torch.equal(block(x), x), "zero-init output projections must give exact identity"


def test_all_variants_forward_shapes():
    q = torch.randn(32)
    xs = torch.randn(9, 32)
    for variant in VARIANTS:
        cfg = HeadConfig(variant=variant, feature_dim=32, cond_dim=32, c_out=32)
        out = QueryConditionedHead(cfg)(q, xs)
        assert out.scores.shape == (9,)
        assert out.deltas is None or out.deltas.shape == (9, 4)
        assert torch.all((out.scores >= 0) & (out.scores <= 1))


def test_gradcheck_coco_cond_scores():
    """Analytic grads of the summed scores vs central finite differences."""
    torch.manual_seed(5)
    cfg = HeadConfig(
        variant="coco_cond", feature_dim=8, cond_dim=8, c_out=8,
        num_heads=2, num_attention_layers=1, use_box_refine=False,
    )
    head = QueryConditionedHead(cfg)
    with torch.no_grad():
        for p in head.parameters():
            p.add_(0.1 * torch.randn_like(p))
    xs = torch.randn(4, 8)
    q = torch.randn(8)

    def objective():
        return head(q, xs).scores.sum()

    loss = objective()
    grads = torch.autograd.grad(loss, list(head.parameters()), allow_unused=True)
    eps = 1e-6
    for p, g in zip(head.parameters(), grads):
        if g is None:
            continue
        flat = p.data.view(-1)
        gflat = g.view(-1)
        idxs = range(flat.numel()) if flat.numel() <= 32 else np.random.default_rng(6).choice(
            flat.numel(), 32, replace=False
        )
        for i in idxs:
            orig = float(flat[i])
            flat[i] = orig + eps
            hi = float(objective())
            flat[i] = orig - eps
            lo = float(objective())
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            denom = max(abs(fd), abs(float(gflat[i])), 1e-4)
            assert abs(fd - float(gflat[i])) / denom < 1e-5


def test_title_embedding_deterministic_and_normalized():
    e1 = embed_title("red ring", cond_dim=32, seed=0)
    e2 = embed_title("red ring", cond_dim=32, seed=0)
    e3 = embed_title("blue ring", cond_dim=32, seed=0)
    assert np.array_equal(e1, e2)
    assert not np.array_equal(e1, e3)
    assert float(np.linalg.norm(e1)) == pytest.approx(1.0, abs=1e-9)


def test_prompt_template():
    assert format_prompt("red ring") == "a photo of a red ring"


def test_config_validation():
    with pytest.raises(ValueError):
        HeadConfig(variant="nope")
    with pytest.raises(ValueError):
        HeadConfig(c_out=10, num_heads=4)
