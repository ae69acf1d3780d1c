import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sharemoe import tensor as tn
from sharemoe.encoder import named_tensors
from sharemoe.seq2seq import (EOS, PAD, SOS, Batch, LossWeights, beam_search, compute_losses, create_model,
                              decoder_forward, exhaustive_search, greedy_search, kd_loss, nll_loss,
                              sequence_log_prob, strip_special, total_loss)
from sharemoe.tensor import Rng, ShapeError, Tensor, UsageError

from conftest import gradcheck, random_batch, tiny_model_config


def model(vocab=5, seed=0, **enc):
    cfg = tiny_model_config(**enc)
    cfg.decoder.vocab = vocab
    return cfg, create_model(cfg, Rng(seed))


def memory(B=1, T=3, d=8, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal((B, T, d)))


# ---------------------------------------------------------------------------
# batches and decoder

def test_batch_layout():
    b = Batch.from_lists([np.ones((9, 2)), np.ones((7, 2))], [[3, 4, 5], [6]])
    np.testing.assert_array_equal(b.y, [[SOS, 3, 4, 5, EOS], [SOS, 6, EOS, PAD, PAD]])
    np.testing.assert_array_equal(b.prefix, [[SOS, 3, 4, 5], [SOS, 6, EOS, PAD]])
    np.testing.assert_array_equal(b.targets, [[3, 4, 5, EOS], [6, EOS, PAD, PAD]])
    np.testing.assert_array_equal(b.target_mask, [[1, 1, 1, 1], [1, 1, 0, 0]])
    np.testing.assert_array_equal(b.x_lens, [9, 7])
    assert b.x[1, 7:].sum() == 0


def test_decoder_is_causal_and_normalised():
    cfg, p = model()
    h = memory()
    mask = np.ones((1, 3), dtype=bool)
    y = np.array([[SOS, 3, 4, 3]])
    a = decoder_forward(y, h, mask, p.decoder, cfg.decoder).data
    y2 = y.copy()
    y2[0, 2] = 2
    b = decoder_forward(y2, h, mask, p.decoder, cfg.decoder).data
    np.testing.assert_array_equal(a[0, :2], b[0, :2])
    assert not np.allclose(a[0, 2:], b[0, 2:])
    probs = tn.softmax(Tensor(a)).data
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)


def test_decoder_reads_the_encoder():
    cfg, p = model()
    mask = np.ones((1, 3), dtype=bool)
    y = np.array([[SOS]])
    a = decoder_forward(y, memory(seed=0), mask, p.decoder, cfg.decoder).data
    b = decoder_forward(y, memory(seed=1), mask, p.decoder, cfg.decoder).data
    assert not np.allclose(a, b)


# ---------------------------------------------------------------------------
# losses

def test_nll_examples():
    V = 5
    assert nll_loss(Tensor(np.zeros((2, 3, V))), np.full((2, 3), 3)).item() == pytest.approx(math.log(V))
    sharp = np.full((1, 2, V), -50.0)
    sharp[0, 0, 3] = sharp[0, 1, 4] = 50.0
    assert nll_loss(Tensor(sharp), np.array([[3, 4]])).item() < 1e-12

    logits = np.array([[[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]]])
    lse = np.log(np.exp(logits).sum(-1))
    ref = -((logits[0, 0, 1] - lse[0, 0]) + (logits[0, 1, 2] - lse[0, 1])) / 2
    assert abs(nll_loss(Tensor(logits), np.array([[1, 2]])).item() - ref) < 1e-12


def test_nll_averages_per_utterance_then_batch():
    logits = np.random.default_rng(0).standard_normal((2, 3, 4))
    t = np.array([[1, 2, 3], [3, 1, 0]])
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=bool)
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    per = [-np.mean([lp[0, s, t[0, s]] for s in range(3)]), -np.mean([lp[1, s, t[1, s]] for s in range(2)])]
    assert nll_loss(Tensor(logits), t, mask).item() == pytest.approx(np.mean(per), abs=1e-12)
    with pytest.raises(UsageError):
        nll_loss(Tensor(logits), t, np.array([[1, 1, 1], [0, 0, 0]], dtype=bool))


def test_kd_examples():
    h = np.random.default_rng(0).standard_normal((3, 4))
    assert kd_loss(Tensor(h), h).item() == 0.0
    unit = np.zeros((3, 4))
    unit[:, 1] = 1.0
    assert kd_loss(Tensor(h + unit), h).item() == pytest.approx(1.0)
    g = np.random.default_rng(1).standard_normal((3, 4))
    assert abs(kd_loss(Tensor(h), g).item() - np.linalg.norm(h - g, axis=1).mean()) < 1e-12
    with pytest.raises(ShapeError):
        kd_loss(Tensor(h), g[:2])


def test_kd_masks_padding_and_freezes_teacher():
    s = tn.parameter(np.random.default_rng(0).standard_normal((2, 3, 4)))
    t = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
    mask = np.array([[1, 1, 0], [1, 1, 1]], dtype=bool)
    norms = np.linalg.norm(s.data, axis=-1)
    ref = (norms[0, :2].mean() + norms[1].mean()) / 2
    loss = kd_loss(s, t, mask)
    assert loss.item() == pytest.approx(ref)
    loss.backward()
    assert t.grad is None
    np.testing.assert_array_equal(s.grad[0, 2], 0.0)


# magnitudes below ~1e-154 square to zero, so the norm cannot see them
kd_values = st.floats(-5, 5).filter(lambda v: v == 0 or abs(v) > 1e-100)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=kd_values), arrays(np.float64, (2, 3), elements=kd_values))
def test_kd_is_non_negative_and_zero_only_at_equality(a, b):
    v = kd_loss(Tensor(a), b).item()
    assert v >= 0
    assert (v == 0) == np.array_equal(a, b)


def test_total_loss_examples():
    nll = Tensor(np.array(2.0))
    bal = [Tensor(np.array(1.0)), Tensor(np.array(1.2))]
    kd = Tensor(np.array(0.5))
    assert total_loss(nll, bal, kd, LossWeights(0.01, 0.005)).item() == pytest.approx(2.0135, abs=1e-12)
    assert total_loss(nll, bal, kd, LossWeights(0.0, 0.0)).item() == 2.0
    ones = [Tensor(np.array(1.0))] * 3
    assert total_loss(nll, ones, None, LossWeights(0.01, 0.005)).item() == pytest.approx(2.01, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 5), st.lists(st.floats(0.5, 4), min_size=1, max_size=3), st.floats(0, 3),
       st.floats(0, 1), st.floats(0, 1))
def test_total_loss_is_linear_in_its_weights(nll, bal, kd, alpha, beta):
    parts = (Tensor(np.array(nll)), [Tensor(np.array(b)) for b in bal], Tensor(np.array(kd)))
    base = total_loss(*parts, LossWeights(0, 0)).item()
    a1 = total_loss(*parts, LossWeights(1, 0)).item() - base
    b1 = total_loss(*parts, LossWeights(0, 1)).item() - base
    got = total_loss(*parts, LossWeights(alpha, beta)).item()
    assert got == pytest.approx(base + alpha * a1 + beta * b1, abs=1e-9)
    assert a1 == pytest.approx(np.mean(bal))
    assert b1 == pytest.approx(kd)


def test_end_to_end_gradcheck_tiny_model():
    cfg, p = model()
    batch = random_batch(cfg)
    w = LossWeights(0.3, 0.2)
    teacher = np.random.default_rng(3).standard_normal((2, 2, 8))
    ref = compute_losses(p, cfg, batch, w, teacher_h=teacher)

    def f():
        f.parts = compute_losses(p, cfg, batch, w, teacher_h=teacher)
        return f.parts.loss

    def pinned():
        for g in range(2):
            np.testing.assert_array_equal(f.parts.enc.stats[g][0].selected, ref.enc.stats[g][0].selected)

    tensors = [(n, t) for n, t in named_tensors(p) if t.requires_grad]
    errs = gradcheck(f, tensors, max_coords=3, check=pinned)
    assert max(errs.values()) < 1e-4


def test_zero_weight_terms_leave_the_tape():
    cfg, p = model()
    parts = compute_losses(p, cfg, random_batch(cfg), LossWeights(0.0, 0.0))
    assert parts.loss.item() == parts.nll
    assert parts.balance_term == parts.kd_term == 0.0


# ---------------------------------------------------------------------------
# search

def utt(T=12, F=8, seed=0):
    return np.random.default_rng(seed).standard_normal((T, F))


@pytest.mark.parametrize("V", [4, 6])
@pytest.mark.parametrize("length_norm", [True, False])
def test_full_beam_matches_exhaustive_enumeration(V, length_norm):
    cfg, p = model(vocab=V, seed=V)
    x = utt(seed=V)
    toks, score = beam_search(x, p, cfg, beam=V ** 3, max_len=3, length_norm=length_norm)
    etoks, escore = exhaustive_search(x, p, cfg, 3, length_norm)
    assert toks == etoks
    assert score == pytest.approx(escore, abs=1e-9)


def test_unit_beam_is_greedy():
    for seed in range(4):
        cfg, p = model(vocab=7, seed=seed)
        x = utt(seed=seed)
        toks, score = beam_search(x, p, cfg, 1, 5)
        gtoks, gtotal = greedy_search(x, p, cfg, 5)
        assert toks == gtoks
        assert score == pytest.approx(gtotal / len(gtoks))


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5))
def test_wider_beam_never_loses_to_greedy(seed, beam):
    cfg, p = model(vocab=6, seed=seed)
    x = utt(seed=seed)
    gtoks, _ = greedy_search(x, p, cfg, 4)
    toks, score = beam_search(x, p, cfg, beam, 4)
    if gtoks[-1] == EOS:
        gscore = sequence_log_prob(x, gtoks, p, cfg) / len(gtoks)
        assert score >= gscore - 1e-12
    assert score == pytest.approx(sequence_log_prob(x, toks, p, cfg) / len(toks), abs=1e-9)


def test_search_is_deterministic_and_validates_arguments():
    cfg, p = model(vocab=6)
    x = utt()
    assert beam_search(x, p, cfg, 3, 4) == beam_search(x, p, cfg, 3, 4)
    with pytest.raises(ValueError):
        beam_search(x, p, cfg, 3, 0)
    with pytest.raises(ValueError):
        beam_search(x, p, cfg, 0, 3)


def test_hypotheses_never_contain_pad_or_sos():
    cfg, p = model(vocab=6, seed=3)
    toks, _ = beam_search(utt(), p, cfg, 4, 6)
    assert PAD not in toks and SOS not in toks
    assert strip_special([SOS, 3, 4, EOS]) == [3, 4]
