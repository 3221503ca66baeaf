import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from p2i.attack import (AttackConfig, Scheme, aligned_ensemble, attack_identity, enhance_prediction,
                        weighted_latent_mean)
from p2i.benchkit import BlobGenerator
from p2i.core import RandomSource, one_hot
from p2i.errors import DegenerateOneHot, EmptyEnsemble, EnhancementTooLarge, NoContributors, ShapeMismatch
from p2i.gateway import Phase, QueryLedger, log_prepare
from p2i.model import EncoderSpec, encode, generate, init_state
from p2i.selection import SelectedTrainingSet, SelectionRecord


def test_zero_enhancement_is_identity():
    p = np.array([0.2, 0.3, 0.5])
    np.testing.assert_array_equal(enhance_prediction(p, 1, 0.0), p)


def test_hand_example():
    out = enhance_prediction(np.array([0.5, 0.3, 0.2]), 0, 0.1)
    np.testing.assert_allclose(out, [0.6, 0.24, 0.16], rtol=0, atol=1e-15)


def test_guards():
    with pytest.raises(EnhancementTooLarge):
        enhance_prediction(np.array([0.5, 0.5]), 0, 0.6)
    with pytest.raises(DegenerateOneHot):
        enhance_prediction(one_hot(0, 3), 0, 0.1)


def test_randomized_enhancement_suite():
    """Target delta, sum, ratio preservation and sign on 10,000 random cases."""
    rng = np.random.default_rng(9)
    start = time.perf_counter()
    for _ in range(10_000):
        c_count = int(rng.integers(2, 20))
        p = rng.dirichlet(np.full(c_count, rng.uniform(0.1, 3)))
        c = int(rng.integers(c_count))
        m = rng.uniform(0, 1 - p[c])
        out = enhance_prediction(p, c, m)
        assert abs((out[c] - p[c]) - m) <= 1e-12
        assert abs(out.sum() - 1) <= 1e-9
        assert out.min() >= 0
        rest = np.delete(np.arange(c_count), c)
        a, b = rest[:-1], rest[1:]
        mask = (p[b] > 1e-300) & (out[b] > 1e-300)
        np.testing.assert_allclose(out[a][mask] / out[b][mask], p[a][mask] / p[b][mask], rtol=1e-9)
    assert time.perf_counter() - start < 10


def brute_force_mean(ws, ps):
    weights = [max(p) for p in ws and ps]
    total = sum(weights)
    out = np.zeros_like(np.asarray(ws[0], dtype=np.float64))
    for w, k in zip(ws, weights):
        for idx in np.ndindex(out.shape):
            out[idx] += k * w[idx] / total
    return out


def test_ensemble_examples():
    w = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(aligned_ensemble([w], [np.array([0.3, 0.7])]), w)
    out = aligned_ensemble([np.array([1.0, 0.0]), np.array([0.0, 1.0])],
                           [np.array([0.8, 0.2]), np.array([0.2, 0.8]) * 0.25 / 0.8 * 0.8 / 0.2 * 0.2])
    # second vector's max is 0.2
    np.testing.assert_allclose(out, [0.8, 0.2], atol=1e-15)
    ws = [np.full(3, k) for k in range(4)]
    same = [np.array([0.6, 0.4])] * 4
    np.testing.assert_allclose(aligned_ensemble(ws, same), np.full(3, 1.5), atol=1e-15)


def test_ensemble_guards():
    with pytest.raises(EmptyEnsemble):
        aligned_ensemble([], [])
    with pytest.raises(ShapeMismatch):
        aligned_ensemble([np.zeros(2)], [])
    with pytest.raises(ValueError):
        weighted_latent_mean([np.zeros(2)], np.array([0.0]))


def test_ensemble_against_brute_force():
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    for _ in range(1000):
        k = int(rng.integers(1, 8))
        ws = [rng.standard_normal((3, 4)) for _ in range(k)]
        ps = [rng.dirichlet(np.ones(5)) for _ in range(k)]
        out = aligned_ensemble(ws, ps)
        np.testing.assert_allclose(out, brute_force_mean(ws, ps), rtol=0, atol=1e-12)
        # permutation
        order = rng.permutation(k)
        np.testing.assert_allclose(aligned_ensemble([ws[i] for i in order], [ps[i] for i in order]),
                                   out, rtol=0, atol=1e-12)
        # positive rescaling of every max-score
        scale = rng.uniform(0.1, 10)
        weights = np.array([p.max() for p in ps]) * scale
        np.testing.assert_allclose(weighted_latent_mean(ws, weights), out, rtol=0, atol=1e-12)
        # convexity
        stack = np.stack(ws)
        assert np.all(out >= stack.min(0) - 1e-12) and np.all(out <= stack.max(0) + 1e-12)
    assert time.perf_counter() - start < 10


@given(st.integers(1, 6), st.integers(0, 2**31))
def test_ensemble_is_convex(k, seed):
    rng = np.random.default_rng(seed)
    ws = [rng.standard_normal(5) for _ in range(k)]
    ps = [rng.dirichlet(np.ones(3)) for _ in range(k)]
    out = aligned_ensemble(ws, ps)
    stack = np.stack(ws)
    assert np.all(out >= stack.min(0) - 1e-12) and np.all(out <= stack.max(0) + 1e-12)


# ---------------------------------------------------------------------------
# attack_identity

C = 4
SPEC = EncoderSpec(num_classes=C, height=8, width=8, channels=1, latent_layers=2, latent_dim=3,
                   stem_channels=4, deconv_widths=(4,), block_widths=(4, 4, 4, 4))


@pytest.fixture(scope="module")
def parts():
    state = init_state(SPEC, RandomSource(0))
    gen = BlobGenerator(2, 3, 1, 8, 8, 1, seed=0)
    rng = np.random.default_rng(1)
    selected = SelectedTrainingSet(C)
    for c in range(C - 1):  # the last identity gets nothing
        for i in range(3):
            p = rng.dirichlet(np.ones(C))
            selected.per_identity[c].append(SelectionRecord(f"img_{c}_{i}", p, c, float(p[c])))
    # a record whose target entry leaves less room than m
    p = np.array([0.98, 0.01, 0.005, 0.005])
    selected.per_identity[0].append(SelectionRecord("saturated", p, 0, 0.98))
    return state, gen, selected


@pytest.mark.parametrize("scheme", list(Scheme))
def test_no_queries_in_any_scheme(parts, scheme):
    state, gen, selected = parts
    ledger = QueryLedger()
    result = attack_identity(0, selected, state, gen, AttackConfig(scheme=scheme), ledger)
    assert ledger[Phase.ATTACK] == 0 and ledger.cost_total() == 0
    np.testing.assert_array_equal(result.image, generate(gen, result.latent))


def test_single_record_reduces_to_one_encode(parts):
    state, gen, _ = parts
    p = np.array([0.4, 0.3, 0.2, 0.1])
    selected = SelectedTrainingSet(C)
    selected.per_identity[1] = [SelectionRecord("only", p, 1, 0.3)]
    result = attack_identity(1, selected, state, gen, AttackConfig(m=0.05))
    _, latent = encode(state, log_prepare(enhance_prediction(p, 1, 0.05)))
    np.testing.assert_allclose(result.latent, latent, rtol=0, atol=1e-6)
    np.testing.assert_allclose(result.image, generate(gen, latent), atol=1e-6)
    assert result.contributors[0].weight == 0.4  # original max confidence


def test_saturated_record_is_clamped(parts):
    state, gen, selected = parts
    result = attack_identity(0, selected, state, gen, AttackConfig(m=0.035))
    used = {k.image_ref: k.m_used for k in result.contributors}
    assert used["saturated"] == pytest.approx(0.02)
    assert all(v == 0.035 for ref, v in used.items() if ref != "saturated")
    assert all(k.weight > 0 for k in result.contributors)


def test_prediction_ensemble_encodes_once(parts):
    state, gen, selected = parts
    records = selected.per_identity[2]
    raw = np.stack([r.prediction for r in records])
    weights = raw.max(1)
    enhanced = np.stack([enhance_prediction(p, 2, 0.035) for p in raw])
    mixed = weights @ enhanced / weights.sum()
    _, expected = encode(state, log_prepare(mixed / mixed.sum()))
    result = attack_identity(2, selected, state, gen, AttackConfig(scheme="prediction_ensemble"))
    np.testing.assert_allclose(result.latent, expected, atol=1e-6)


def test_one_hot_needs_no_records(parts):
    state, gen, selected = parts
    result = attack_identity(C - 1, selected, state, gen, AttackConfig(scheme="one_hot"))
    _, expected = encode(state, log_prepare(one_hot(C - 1, C)))
    np.testing.assert_allclose(result.latent, expected, atol=1e-6)
    with pytest.raises(NoContributors):
        attack_identity(C - 1, selected, state, gen, AttackConfig())


def test_config_guards():
    with pytest.raises(ValueError):
        AttackConfig(m=1.0)
    with pytest.raises(ValueError):
        AttackConfig(scheme="bogus")
    with pytest.raises(ValueError):
        AttackConfig(weights="bogus")
