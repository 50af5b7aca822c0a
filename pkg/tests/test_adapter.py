import numpy as np
import pytest

from crossalign import adapter as ad
from crossalign import nn
from crossalign import tensor as T
from crossalign.adapter import AdapterDims, AudioFeatures
from crossalign.params import trainable
from crossalign.rng import SplitMix64
from crossalign.tensor import ShapeError, Tensor, gradcheck

DESK = AdapterDims()


def make(dims=DESK, seed=0):
    return ad.init_adapter(SplitMix64(seed), dims)


def feats(n, dim=32, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(n, dim)))


@pytest.mark.parametrize("n_a", [1, 4, 24, 64])
def test_output_shapes(n_a):
    p = make()
    h = feats(n_a, seed=n_a)
    assert ad.semantic_forward(h, p).shape == (DESK.n_semantic, DESK.dim)
    assert ad.temporal_forward(h, p).shape == (DESK.n_temporal, DESK.dim)
    assert ad.adapter_forward(h, p).shape == (DESK.n_global, DESK.llm_dim)


def test_batched_matches_single():
    p = make()
    h = np.random.default_rng(1).normal(size=(3, 6, 32))
    batched = ad.adapter_forward(Tensor(h), p).data
    for b in range(3):
        assert np.allclose(batched[b], ad.adapter_forward(Tensor(h[b]), p).data, atol=1e-13)


def test_audio_features_wrapper():
    p = make()
    h = feats(5)
    assert np.array_equal(ad.adapter_forward(AudioFeatures(h, source_id=3), p).data,
                          ad.adapter_forward(h, p).data)


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        ad.adapter_forward(feats(4, dim=16), make())


def test_semantic_single_row_collapses_to_value():
    dims = AdapterDims(dim=4, llm_dim=4, n_semantic=3, n_temporal=2, n_global=2, heads=2)
    p = make(dims, seed=2)
    eye = np.eye(4)
    p.mha_semantic.W_V.data[...] = eye
    p.mha_semantic.W_O.data[...] = eye
    r = np.array([[0.5, -1.0, 2.0, 0.25]])
    pre = nn.mha(p.Q_s, Tensor(r), p.mha_semantic) + p.Q_s
    assert np.allclose(pre.data, r + p.Q_s.data, atol=1e-14)
    post = ad.semantic_forward(Tensor(r), p).data
    assert np.allclose(post, nn.layer_norm(Tensor(r + p.Q_s.data), p.ln_semantic).data, atol=1e-12)


def test_semantic_permutation_invariant():
    p = make(seed=3)
    rng = np.random.default_rng(3)
    for _ in range(5):
        h = rng.normal(size=(12, 32))
        perm = rng.permutation(12)
        d = ad.semantic_forward(Tensor(h), p).data - ad.semantic_forward(Tensor(h[perm]), p).data
        assert np.abs(d).max() <= 1e-9


def test_temporal_permutation_sensitive():
    p = make(seed=4)
    rng = np.random.default_rng(4)
    for _ in range(5):
        h = rng.normal(size=(12, 32))
        perm = rng.permutation(12)
        d = ad.temporal_forward(Tensor(h), p).data - ad.temporal_forward(Tensor(h[perm]), p).data
        assert np.linalg.norm(d) > 1e-6


def test_temporal_zero_input_reduces_to_queries():
    p = make(seed=5)
    for t in p.conv.biases + [p.conv.b_merge]:
        t.data[...] = 0.0
    for layer in p.gru.layers:
        for cell in (layer.fwd, layer.bwd):
            cell.b_i.data[...] = 0.0
            cell.b_h.data[...] = 0.0
    p.gru.b_out.data[...] = 0.0
    kv = ad.temporal_encode(Tensor(np.zeros((7, 32))), p)
    assert np.array_equal(kv.data, np.zeros((7, 32)))
    pre = nn.mha(p.Q_t, kv, p.mha_temporal) + p.Q_t
    assert np.array_equal(pre.data, p.Q_t.data)


def test_zero_projection_annihilates():
    p = make(seed=6)
    p.W_p.data[...] = 0.0
    assert np.array_equal(ad.adapter_forward(feats(9), p).data, np.zeros((DESK.n_global, DESK.llm_dim)))


def test_fusion_concat_order_irrelevant():
    p = make(seed=7)
    h = feats(10, seed=7)
    hs, ht = ad.semantic_forward(h, p), ad.temporal_forward(h, p)
    a = ad.fuse_project(hs, ht, p).data
    b = ad.fuse_project(ht, hs, p).data
    assert np.abs(a - b).max() <= 1e-9


def test_forward_deterministic():
    p = make(seed=8)
    h = feats(6, seed=8)
    assert np.array_equal(ad.adapter_forward(h, p).data, ad.adapter_forward(h, p).data)
    q = make(seed=8)
    assert np.array_equal(ad.adapter_forward(h, q).data, ad.adapter_forward(h, p).data)


def test_query_init_scale():
    p = make(AdapterDims(n_global=64), seed=9)
    assert abs(p.Q_g.data.std() - 0.02) < 0.002


def test_linear_projector_gives_one_token():
    proj = ad.init_linear_projector(SplitMix64(0), DESK)
    h = np.random.default_rng(0).normal(size=(2, 5, 32))
    z = ad.encode_audio(Tensor(h), proj).data
    assert z.shape == (2, 1, DESK.llm_dim)
    assert np.allclose(z[:, 0], h.mean(axis=1) @ proj.W.data + proj.b.data, atol=1e-13)


def test_full_stack_gradcheck():
    dims = AdapterDims(dim=8, llm_dim=8, n_semantic=2, n_temporal=2, n_global=2, heads=2)
    p = make(dims, seed=10)
    rng = SplitMix64(10).substream("perturb")
    for name, t in trainable(p).items():
        t.data += rng.substream(name).normal(t.shape, 0.3)
    h = Tensor(np.random.default_rng(10).normal(size=(6, 8)), requires_grad=True)
    w = Tensor(np.random.default_rng(11).normal(size=(2, 8)))
    rep = gradcheck(lambda _: T.reduce_sum(ad.adapter_forward(h, p) * w), {"h_a": h, **trainable(p)},
                    step=1e-4, tol=1e-4)
    assert rep.passed, rep
