from itertools import product

import numpy as np
import pytest

from eegtcav.cav import Cav
from eegtcav.concepts import sample_random_concept_sets
from eegtcav.dsp import Window
from eegtcav.errors import ProtocolError, SampleSizeError, ShapeError
from eegtcav.model import BOTTLENECKS, Bottleneck, LhbConfig, bottleneck_gradients, init_weights
from eegtcav.tcav import ActivationCache, TcavHyper, run_tcav, sensitivity, tcav_score

from pipeline import null_concept


def _cav(v):
    v = np.asarray(v, dtype=np.float64)
    return Cav(None, v / np.linalg.norm(v), 0.0, 1.0)


# -- sensitivity and score ---------------------------------------------------


def test_sensitivity_examples():
    cav = _cav([3.0, 4.0])
    assert sensitivity(cav.vector, cav) == pytest.approx(1.0, abs=1e-15)
    axis = _cav([0.0, 1.0, 0.0])
    assert sensitivity([5.0, 0.0, -2.0], axis) == 0.0
    assert sensitivity(-2.0 * cav.vector, cav) == pytest.approx(-2.0, abs=1e-15)


def test_sensitivity_length_mismatch():
    with pytest.raises(ShapeError):
        sensitivity([1.0, 2.0, 3.0], _cav([1.0, 0.0]))


def test_sensitivity_bilinear():
    rng = np.random.default_rng(0)
    for _ in range(50):
        g1, g2, v = rng.integers(-8, 8, (3, 6)).astype(float)
        a, b = rng.integers(-4, 4, 2).astype(float)
        # integer-valued operands keep every product exact
        lhs = sensitivity(a * g1 + b * g2, v)
        assert lhs == a * sensitivity(g1, v) + b * sensitivity(g2, v)


def test_score_examples():
    assert tcav_score([1, 2, 3]) == 1.0
    assert tcav_score([-1, -2]) == 0.0
    assert tcav_score([1, -1, 2, 0]) == 0.5


def test_score_empty():
    with pytest.raises(SampleSizeError):
        tcav_score([])


def test_score_matches_brute_force_on_all_sign_patterns():
    for n in range(1, 11):
        for pattern in product((-1.0, 0.0, 1.0), repeat=n) if n <= 6 else product((-1.0, 1.0), repeat=n):
            count = 0
            for s in pattern:
                if s > 0:
                    count += 1
            assert tcav_score(pattern) == count / n


def test_score_invariant_to_positive_cav_scaling():
    rng = np.random.default_rng(1)
    grads = rng.standard_normal((30, 12))
    v = rng.standard_normal(12)
    base = tcav_score(grads @ v)
    for c in (1e-6, 0.3, 5.0, 1e6):
        assert tcav_score(grads @ (c * v)) == base


# -- protocol on a small untrained model -------------------------------------


def _windows(n, seed, samples=384, label=""):
    rng = np.random.default_rng(seed)
    return [Window(rng.uniform(-0.5, 0.5, (20, samples)).astype(np.float32), 256.0, samples / 256.0, label) for _ in range(n)]


@pytest.fixture(scope="module")
def small():
    w = init_weights(LhbConfig.tiny(), seed=0)
    return w, _windows(12, 0), ("c", _windows(15, 1)), [_windows(10, 10 + i) for i in range(4)]


def test_result_layout(small):
    w, target, concept, randoms = small
    res = run_tcav(w, target, [concept, ("d", _windows(6, 2))], randoms, target_class=1, hyper=TcavHyper(max_examples=8))
    assert [(r.concept_id, r.bottleneck) for r in res] == [(c, b) for c in ("c", "d") for b in BOTTLENECKS]
    for r in res:
        assert r.n_runs == 4 and len(r.baseline_scores) == 4
        assert all(0.0 <= s <= 1.0 for s in r.concept_scores + r.baseline_scores)
        assert r.p_corrected == min(1.0, r.p_raw * 10)
        assert r.direction == ("positive" if r.mean_score > 0.5 else "negative")
        assert r.significant == (r.p_corrected < 0.05)
        assert r.target_class == 1


def test_reproducible(small):
    w, target, concept, randoms = small
    a = run_tcav(w, target, concept, randoms, hyper=TcavHyper(max_examples=8, seed=3))
    b = run_tcav(w, target, concept, randoms, hyper=TcavHyper(max_examples=8, seed=3))
    assert [(r.concept_scores, r.baseline_scores, r.p_raw) for r in a] == [
        (r.concept_scores, r.baseline_scores, r.p_raw) for r in b
    ]


def test_shared_cache_gives_same_results(small):
    w, target, concept, randoms = small
    cache = ActivationCache(w)
    a = run_tcav(w, target, concept, randoms, hyper=TcavHyper(max_examples=8), cache=cache)
    b = run_tcav(w, target, concept, randoms, hyper=TcavHyper(max_examples=8))
    assert [r.concept_scores for r in a] == [r.concept_scores for r in b]


def test_cache_gradients_match_model(small):
    w, target, _, _ = small
    cache = ActivationCache(w, chunk=5)
    for b in (Bottleneck.ENCODER, Bottleneck.SUMMARIZER):
        got = cache.gradients(target, b, 0)
        ref = bottleneck_gradients(w, np.stack([t.data for t in target]), b, 0)
        assert np.allclose(got, ref, atol=1e-12)


def test_protocol_errors(small):
    w, target, concept, randoms = small
    with pytest.raises(ProtocolError):
        run_tcav(w, target, concept, randoms[:1])
    with pytest.raises(IndexError):
        run_tcav(w, target, concept, randoms, target_class=2)
    with pytest.raises(SampleSizeError):
        run_tcav(w, [], concept, randoms)


def test_errors_name_concept_and_bottleneck(small):
    w, target, _, randoms = small
    with pytest.raises(SampleSizeError) as info:
        run_tcav(w, target, ("lonely", _windows(1, 3)), randoms, bottlenecks=["encoder"])
    assert "'lonely' at encoder" in str(info.value)


def test_explicit_multiplicity(small):
    w, target, concept, randoms = small
    res = run_tcav(w, target, concept, randoms, bottlenecks=["summarizer"], hyper=TcavHyper(max_examples=8, multiplicity=7))
    assert res[0].p_corrected == min(1.0, 7 * res[0].p_raw)


# -- planted concepts on the trained synthetic model -------------------------


@pytest.mark.slow
def test_planted_and_opposite_concepts(synthetic_pipeline):
    p = synthetic_pipeline
    randoms = sample_random_concept_sets(p.pool, n_sets=30, max_examples=40, seed=0)
    res = run_tcav(p.weights, p.target, [p.planted, p.opposite], randoms, target_class=0)
    planted = [r for r in res if r.concept_id == "planted"]
    opposite = [r for r in res if r.concept_id == "opposite"]
    assert any(r.significant and r.mean_score >= 0.8 and r.direction == "positive" for r in planted)
    assert any(r.significant and r.direction == "negative" for r in opposite)
    enc = planted[Bottleneck.ENCODER.index]
    assert enc.mean_score >= 0.8 and enc.p_corrected < 0.05


@pytest.mark.slow
def test_null_concept_rarely_significant(synthetic_pipeline):
    p = synthetic_pipeline
    cache = ActivationCache(p.weights)
    rejections = 0
    for seed in range(5):
        randoms = sample_random_concept_sets(p.pool, n_sets=20, max_examples=40, seed=seed)
        res = run_tcav(p.weights, p.target, null_concept(p.pool), randoms, hyper=TcavHyper(seed=seed), cache=cache)
        rejections += any(r.significant for r in res)
    assert rejections <= 1
