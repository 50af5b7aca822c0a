import math

import numpy as np
import pytest

from crossalign import decoder as dec
from crossalign import harness
from crossalign import tensor as T
from crossalign.adapter import AdapterDims, encode_audio, init_adapter
from crossalign.alignment import CmaWeights, EmbeddingBatch, KernelConfig, cma_loss
from crossalign.config import RunConfig
from crossalign.decoder import BOS, EOS, PAD, Batch, LossWeightsTotal, Model
from crossalign.params import trainable
from crossalign.rng import SplitMix64
from crossalign.synth import PROMPT, build_dictionary
from crossalign.tensor import ShapeError, Tensor, gradcheck

K, D, NG = 12, 8, 3


def small_decoder(seed=0, max_len=16, **kw):
    return dec.init_decoder(SplitMix64(seed), K, D, max_len, heads=2, **kw)


def z_audio(seed=0, B=None):
    shape = (NG, D) if B is None else (B, NG, D)
    return Tensor(np.random.default_rng(seed).normal(size=shape))


PROMPT_IDS = np.array([5, 6])


# -- decoder logits -------------------------------------------------------------

def test_logit_shapes():
    d = small_decoder()
    assert dec.decoder_logits(z_audio(), PROMPT_IDS, [3, 4, 7, EOS], d).shape == (4, K)
    assert dec.decoder_logits(z_audio(B=2), PROMPT_IDS, np.array([[3, EOS], [4, 4]]), d).shape == (2, 2, K)


def test_logits_are_causal():
    d = small_decoder(1)
    targets = np.array([3, 4, 7, 8, EOS])
    base = dec.decoder_logits(z_audio(1), PROMPT_IDS, targets, d).data
    for l in range(len(targets)):
        edited = targets.copy()
        edited[l:] = 9
        out = dec.decoder_logits(z_audio(1), PROMPT_IDS, edited, d).data
        assert np.array_equal(out[:l + 1], base[:l + 1])


def test_zero_head_gives_uniform_prediction():
    d = small_decoder(2)
    d.head.data[...] = 0.0
    logits = dec.decoder_logits(z_audio(2), PROMPT_IDS, [3, EOS], d)
    assert np.array_equal(logits.data, np.zeros((2, K)))
    p = np.exp(T.log_softmax(logits, -1).data)
    assert np.allclose(p, 1.0 / K, atol=1e-15)


def test_logit_errors():
    d = small_decoder(max_len=6)
    with pytest.raises(ShapeError):
        dec.decoder_logits(z_audio(), PROMPT_IDS, [3, 4], d)
    with pytest.raises(dec.VocabularyError):
        dec.decoder_logits(z_audio(), PROMPT_IDS, [K], small_decoder())


def test_embeddings_frozen_by_default():
    assert not small_decoder().embed.requires_grad
    assert small_decoder(freeze_embeddings=False).embed.requires_grad


# -- token guide ---------------------------------------------------------------------

def test_guide_score_examples():
    V = Tensor([[1.0], [3.0]])
    assert np.array_equal(dec.guide_scores(Tensor([0.0]), V).data, [1.0, 9.0])
    assert np.array_equal(dec.guide_scores(Tensor([0.0]), V, "l1").data, [1.0, 3.0])
    z = np.array([0.4, -1.0])
    V2 = Tensor(np.array([z, [2.0, 2.0]]))
    for mode in ("sql2", "l1"):
        assert dec.guide_scores(Tensor(z), V2, mode).data[0] == 0.0
    assert abs(dec.guide_scores(Tensor([1.0, 0.0]), Tensor([[2.0, 0.0], [0.0, 1.0]]), "cosine").data[0] + 1.0) <= 1e-15


def test_guide_scores_translation_invariant():
    rng = np.random.default_rng(0)
    z, V, c = rng.normal(size=4), rng.normal(size=(6, 4)), rng.normal(size=4)
    for mode in ("sql2", "l1"):
        a = dec.guide_scores(Tensor(z), Tensor(V), mode).data
        b = dec.guide_scores(Tensor(z + c), Tensor(V + c), mode).data
        assert np.allclose(a, b, atol=1e-12)


def test_cosine_guide_rejects_zero_vector():
    with pytest.raises(ValueError):
        dec.guide_scores(Tensor([0.0, 0.0]), Tensor([[1.0, 0.0]]), "cosine")


def test_guide_rejects_unknown_mode():
    with pytest.raises(ValueError):
        dec.init_guide("l3")


def test_apply_guide_examples():
    z = Tensor([1.0, 1.0])
    assert np.array_equal(dec.apply_guide(z, Tensor([1.0, 9.0]), 0.5).data, [0.5, -3.5])
    logits = Tensor(np.random.default_rng(1).normal(size=(2, 3, 5)))
    scores = Tensor(np.random.default_rng(2).uniform(size=(2, 5)))
    assert np.array_equal(dec.apply_guide(logits, scores, 0.0).data, logits.data)
    out = dec.apply_guide(logits, scores, 0.3).data
    assert np.allclose(out, logits.data - 0.3 * scores.data[:, None, :], atol=1e-15)


def test_guide_prefers_nearer_token_on_ties():
    z = Tensor([2.0, 2.0])
    out = dec.apply_guide(z, Tensor([0.5, 4.0]), 1e-3).data
    assert out[0] > out[1]


def test_argmax_monotone_in_beta():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        logits, scores = rng.normal(size=8), rng.uniform(0, 4, size=8)
        b1, b2 = np.sort(rng.uniform(0, 3, size=2))
        i1 = int(np.argmax(dec.apply_guide(Tensor(logits), Tensor(scores), b1).data))
        i2 = int(np.argmax(dec.apply_guide(Tensor(logits), Tensor(scores), b2).data))
        assert scores[i2] <= scores[i1]


# -- cross-entropy ------------------------------------------------------------------------

def test_ce_examples():
    assert abs(dec.ce_loss(Tensor(np.zeros((1, 4))), [2]).item() - math.log(4)) <= 1e-12
    margin = np.zeros((1, 4))
    margin[0, 1] = 50.0
    assert dec.ce_loss(Tensor(margin), [1]).item() < 1e-20
    hand = dec.ce_loss(Tensor([[1.0, 0.0], [0.0, 1.0]]), [0, 1]).item()
    assert abs(hand - (-math.log(math.e / (math.e + 1)))) <= 1e-12
    assert abs(hand - 0.31326) <= 1e-5


def test_ce_mask():
    logits = Tensor(np.random.default_rng(4).normal(size=(3, 5)))
    full = dec.ce_loss(logits[:2], [1, 2]).item()
    assert abs(dec.ce_loss(logits, [1, 2, PAD], [True, True, False]).item() - full) <= 1e-15
    with pytest.raises(ValueError):
        dec.ce_loss(logits, [1, 2, 3], [False] * 3)


# -- total objective -------------------------------------------------------------------

def small_model(seed=0, guide_mode="sql2"):
    dims = AdapterDims(dim=8, llm_dim=D, n_semantic=2, n_temporal=2, n_global=NG, heads=2)
    adapter = init_adapter(SplitMix64(seed).substream("adapter"), dims)
    guide = dec.init_guide(guide_mode)
    guide.beta.data[...] = 0.3
    return Model(adapter, small_decoder(seed, max_len=NG + 2 + 6), guide)


def small_batch(seed=0):
    rng = np.random.default_rng(seed)
    caps = np.array([[3, 4, 5, EOS, PAD], [6, EOS, PAD, PAD, PAD], [7, 8, 9, 10, EOS]])
    return Batch(rng.normal(size=(3, 5, 8)), caps)


FIXED = KernelConfig("fixed", 1.0)


def test_total_loss_projection_onto_dec():
    model, batch = small_model(), small_batch()
    out = dec.total_loss(batch, model, PROMPT_IDS, LossWeightsTotal(0, 0, 1), kernel=FIXED)
    assert set(out.parts) == {"dec", "total"}
    assert out.total.item() == out.parts["dec"].item()


def test_total_loss_equals_component_sum():
    model, batch = small_model(1), small_batch(1)
    w = CmaWeights(1, 1, 1, 0.5)
    out = dec.total_loss(batch, model, PROMPT_IDS, LossWeightsTotal(1, 1, 1), w, FIXED)
    assert set(out.parts) == {"cs_global", "cs_token", "info_nce", "cma", "tg", "dec", "total"}
    # independent recomputation from the public pieces
    z_a = encode_audio(Tensor(batch.h_a), model.adapter)
    text = EmbeddingBatch(T.take_rows(model.decoder.embed, batch.captions), batch.content_mask)
    cma, _ = cma_loss(EmbeddingBatch(z_a), text, w, FIXED)
    logits = dec.decoder_logits(z_a, PROMPT_IDS, batch.captions, model.decoder)
    scores = dec.guide_scores(z_a.mean(axis=1), model.decoder.embed, "sql2")
    l_tg = dec.ce_loss(dec.apply_guide(logits, scores, model.guide.beta), batch.captions, batch.target_mask)
    l_dec = dec.ce_loss(logits, batch.captions, batch.target_mask)
    expect = cma.item() + l_tg.item() + l_dec.item()
    assert abs(out.total.item() - expect) <= 1e-12
    assert abs(sum(out.parts[k].item() for k in ("cma", "tg", "dec")) - out.total.item()) <= 1e-12


def test_text_tokens_exclude_eos_and_pad():
    batch = small_batch()
    assert batch.content_mask.sum(axis=1).tolist() == [3, 1, 4]
    assert batch.target_mask.sum(axis=1).tolist() == [4, 2, 5]


@pytest.mark.parametrize("mode", ["sql2", "l1", "cosine"])
def test_total_loss_beta_gradcheck(mode):
    model, batch = small_model(2, mode), small_batch(2)
    rep = gradcheck(lambda _: dec.total_loss(batch, model, PROMPT_IDS, kernel=FIXED).total,
                    {"beta": model.guide.beta}, step=1e-5, tol=1e-4)
    assert rep.passed, rep


def test_stop_grad_blocks_guide_path_to_adapter():
    model, batch = small_model(3), small_batch(3)
    w = LossWeightsTotal(1e-9, 1.0, 1e-9)
    params = trainable(model.adapter)
    T.backward(dec.total_loss(batch, model, PROMPT_IDS, w, kernel=FIXED).total)
    flowing = {k: t.grad.copy() for k, t in params.items()}
    model.guide.stop_grad = True
    T.backward(dec.total_loss(batch, model, PROMPT_IDS, w, kernel=FIXED).total)
    assert any(not np.allclose(flowing[k], t.grad) for k, t in params.items())


# -- greedy decoding ----------------------------------------------------------------------

def test_greedy_beta_zero_matches_disabled():
    d = small_decoder(5)
    z = z_audio(5)
    on = dec.init_guide()
    off = dec.init_guide(enabled=False)
    assert dec.greedy_decode(z, PROMPT_IDS, d, on, 6) == dec.greedy_decode(z, PROMPT_IDS, d, off, 6)
    assert dec.greedy_decode(z, PROMPT_IDS, d, None, 6) == dec.greedy_decode(z, PROMPT_IDS, d, off, 6)


def test_greedy_eos_dominant_decoder():
    d = small_decoder(6)
    d.ln_final.gain.data[...] = 0.0
    d.ln_final.bias.data[...] = 1.0
    d.head.data[...] = 0.0
    d.head.data[:, EOS] = 5.0
    assert dec.greedy_decode(z_audio(6), PROMPT_IDS, d, None, 8) == [EOS]


def test_greedy_large_beta_picks_nearest_token():
    d = small_decoder(7)
    d.head.data[...] = 0.0
    t = 9
    z = np.tile(d.embed.data[t], (NG, 1))
    guide = dec.init_guide()
    guide.beta.data[...] = 100.0
    assert dec.greedy_decode(Tensor(z), PROMPT_IDS, d, guide, 1) == [t]


def test_greedy_respects_max_len():
    d = small_decoder(8)
    d.head.data[...] = 0.0
    d.head.data[:, 4] = 1.0
    d.ln_final.gain.data[...] = 0.0
    d.ln_final.bias.data[...] = 1.0
    assert dec.greedy_decode(z_audio(8), PROMPT_IDS, d, None, 3) == [4, 4, 4]
    with pytest.raises(ValueError):
        dec.greedy_decode(z_audio(8), PROMPT_IDS, d, None, 0)


# -- dictionary ------------------------------------------------------------------------------

def test_dictionary_round_trip(tmp_path):
    d = build_dictionary(64)
    path = tmp_path / "dict.tsv"
    d.save(path)
    text = path.read_text(encoding="utf-8")
    assert text.splitlines()[0] == "0\t<pad>"
    assert dec.TokenDictionary.load(path).surfaces == d.surfaces
    assert d.decode(d.encode(["a", "dog", "barks"])) == ["a", "dog", "barks"]
    with pytest.raises(dec.VocabularyError):
        d.id("platypus")


def test_dictionary_rejects_bad_ids():
    with pytest.raises(ValueError):
        dec.TokenDictionary.from_text("0\t<pad>\n2\t<bos>\n")


# -- overfit sanity --------------------------------------------------------------------------

def overfit(cfg, weights, key):
    model = harness.build_model(cfg)
    data = harness.load_split(cfg, "train")
    batch = harness.make_batch(data, np.arange(16))
    prompt = np.array(build_dictionary(cfg.vocab_size).encode(PROMPT))
    opt = harness.AdamW(trainable(model), 3e-3)
    first = None
    for _ in range(200):
        opt.zero_grad()
        out = dec.total_loss(batch, model, prompt, weights)
        first = out.parts[key].item() if first is None else first
        T.backward(out.total)
        opt.step()
    return first, dec.total_loss(batch, model, prompt, weights).parts[key].item()


@pytest.mark.slow
def test_overfit_single_batch_dec():
    cfg = RunConfig(train_size=16, val_size=16, guide_enabled=False)
    first, last = overfit(cfg, LossWeightsTotal(0, 0, 1), "dec")
    assert last < 0.1 * first


@pytest.mark.slow
def test_overfit_single_batch_guided():
    cfg = RunConfig(train_size=16, val_size=16)
    first, last = overfit(cfg, LossWeightsTotal(0, 1, 0), "tg")
    assert last < 0.1 * first
