import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irmlab import checks
from irmlab.constructions import bayes_coefficients, build_feasible_noninvariant_featurizer
from irmlab.model import EnvironmentParams, EnvironmentSet, InvariantParams, optimal_invariant_predictor
from irmlab.predictors import LinearPredictor
from irmlab.risk import (gh_rule, irm_penalty, irm_penalty_population, logistic_risk_quadrature, mc_risks,
                         penalty_gradient_population, risk_report, risk_variance, zero_one_risk_closed)

# Monte Carlo oracles, n = 1e7, drawn with plain numpy independently of the package
MC_F_MINUS_1 = 0.1588242          # se 1.16e-4
MC_F_MINUS_2 = 0.0226564          # se 4.7e-5
MC_LOGISTIC_3D = (1.8503763401259643, 0.000437833887333418)


def _phi(x):
    return 0.5 * math.erfc(-x / math.sqrt(2))


def test_zero_one_invariant_unit_snr():
    inv = InvariantParams(0.5, [1.0, 0.0], 1.0)
    r = zero_one_risk_closed(optimal_invariant_predictor(inv, 2), EnvironmentParams([3.0, 1.0], 2.0), inv)
    assert abs(r - MC_F_MINUS_1) < 3e-4
    assert r == pytest.approx(_phi(-1.0), abs=1e-15)


def test_zero_one_tie_break():
    inv = InvariantParams(0.3, [0.0, 0.0], 1.0)
    pred = LinearPredictor(np.eye(2), np.zeros((2, 1)), [0.0, 0.0], 0.0)
    assert zero_one_risk_closed(pred, EnvironmentParams([1.0], 1.0), inv) == pytest.approx(0.7, abs=1e-15)


def test_zero_one_degenerate_deterministic():
    inv = InvariantParams(0.5, [0.0], 1.0)
    # s = 0 and a positive bias: everything is predicted +1
    pred = LinearPredictor(np.zeros((1, 1)), np.zeros((1, 1)), [1.0], 2.0)
    assert zero_one_risk_closed(pred, EnvironmentParams([1.0], 1.0), inv) == 0.5
    pred = LinearPredictor(np.zeros((1, 1)), np.ones((1, 1)), [1.0], 0.0)
    # logit = z_e, mean +-mu with mu = 0 and nonzero spread
    assert zero_one_risk_closed(pred, EnvironmentParams([0.0], 1.0), inv) == pytest.approx(0.5)


def test_zero_one_environmental_two():
    inv = InvariantParams(0.5, [0.3], 1.0)
    pred = LinearPredictor(np.zeros((1, 1)), [[1.0, 0.0]], [4.0], 0.0)
    r = zero_one_risk_closed(pred, EnvironmentParams([2.0, 0.0], 1.0), inv)
    assert abs(r - MC_F_MINUS_2) < 3e-4
    assert r == pytest.approx(_phi(-2.0), abs=1e-15)


def test_logistic_zero_classifier_is_log2():
    inv = InvariantParams(0.7, [1.0], 1.0)
    pred = LinearPredictor(np.eye(1), np.zeros((1, 2)), [0.0], 0.0)
    assert logistic_risk_quadrature(pred, EnvironmentParams([1.0, 1.0], 1.0), inv) == pytest.approx(math.log(2),
                                                                                                     abs=1e-14)


def test_logistic_invariant_identical_across_envs():
    inv = InvariantParams(0.4, [0.5, -1.0], 1.3)
    pred = optimal_invariant_predictor(inv, 2)
    vals = {logistic_risk_quadrature(pred, EnvironmentParams(m, v), inv)
            for m, v in (([0.0, 0.0], 1.0), ([5.0, -2.0], 0.1), ([1.0, 1.0], 9.0))}
    assert len(vals) == 1


def test_logistic_random_case_matches_oracle():
    A = [[0.0012301533574825742, 0.2987455375084699], [-0.2741378553622176, -0.8905918387572742]]
    B = [[-0.45467078517172255], [-0.9916465549964624]]
    pred = LinearPredictor(A, B, [0.060143602597438485, 1.3402152455545335], 0.3)
    inv = InvariantParams(0.6, [0.4, -0.2], 1.5)
    val = logistic_risk_quadrature(pred, EnvironmentParams([1.1], 0.7), inv)
    mc, se = MC_LOGISTIC_3D
    assert abs(val - mc) <= 3 * se


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        EnvironmentParams([np.inf], 1.0)
    with pytest.raises(ValueError):
        LinearPredictor(np.eye(1), np.eye(1), [np.nan])


def _adaptive_logistic(m, s, beta_0, eta):
    # independent oracle: adaptive quadrature split at the loss kink
    from scipy.integrate import quad
    from scipy.stats import norm

    total = 0.0
    for y, p in ((1.0, eta), (-1.0, 1.0 - eta)):
        def f(t):
            return np.logaddexp(0.0, -y * (y * m + beta_0 + s * t)) * norm.pdf(t)
        total += p * quad(f, -14, 14, points=[-(y * m + beta_0) / s], limit=400, epsabs=1e-14)[0]
    return total


@pytest.mark.parametrize("scale", [0.5, 1.0, 2.0, 2.8])
def test_quadrature_matches_adaptive_oracle(scale):
    inv = InvariantParams(0.35, [0.8, -0.4], 1.2)
    pred = LinearPredictor([[1.0, 0.5]], [[-0.7, 0.2]], [scale], 0.3)
    env = EnvironmentParams([0.6, 1.0], 0.8)
    m, s = pred.logit_moments(env, inv)
    assert s < 4
    ref = _adaptive_logistic(m, s, 0.3, 0.35)
    assert abs(logistic_risk_quadrature(pred, env, inv) - ref) < 1e-6


def test_gh_rule_moments():
    t, w = gh_rule(64)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    assert w @ t ** 2 == pytest.approx(1.0, abs=1e-12)
    assert w @ t ** 4 == pytest.approx(3.0, abs=1e-11)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_logistic_quadrature_vs_mc(seed):
    rng = np.random.default_rng(seed)
    es = checks.random_envset(rng, d_c=2, d_e=2, E=1)
    pred = checks._random_predictor(rng, 2, 2, k=2)
    est = mc_risks(pred, es[0], es.invariant, 100_000, seed=seed)
    q = logistic_risk_quadrature(pred, es[0], es.invariant)
    assert abs(est.logistic - q) <= 5 * est.logistic_se


# --- penalty -------------------------------------------------------------


def _fd_penalty(pred, env, inv, h=1e-5, nodes=128):
    # brute-force gradient of the quadrature risk in (beta, beta_0)
    g = []
    for i in range(pred.k + 1):
        vals = []
        for sgn in (1, -1):
            beta = pred.beta.copy()
            b0 = pred.beta_0
            if i < pred.k:
                beta[i] += sgn * h
            else:
                b0 += sgn * h
            vals.append(logistic_risk_quadrature(pred.with_classifier(beta, b0), env, inv, nodes))
        g.append((vals[0] - vals[1]) / (2 * h))
    return np.array(g)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_stein_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    es = checks.random_envset(rng, d_c=2, d_e=3, E=1)
    pred = checks._random_predictor(rng, 2, 3, k=3)
    pred = pred.with_classifier(0.5 * pred.beta)
    np.testing.assert_allclose(penalty_gradient_population(pred, es[0], es.invariant, 256),
                               _fd_penalty(pred, es[0], es.invariant, nodes=256), atol=1e-7, rtol=1e-5)


def test_penalty_invariant_is_zero_within_error():
    rng = np.random.default_rng(21)
    es = checks.random_envset(rng, E=3)
    pred = optimal_invariant_predictor(es.invariant, es.d_e)
    for e, env in enumerate(es):
        val, se = irm_penalty(pred, env, es.invariant, 10 ** 6, seed=2, stream=e)
        assert abs(val) <= 3 * se


def test_penalty_feasible_construction_is_zero_within_error():
    rng = np.random.default_rng(22)
    es = checks.random_envset(rng, d_e=5, E=3)
    pred = build_feasible_noninvariant_featurizer(es)
    for e, env in enumerate(es):
        val, se = irm_penalty(pred, env, es.invariant, 10 ** 6, seed=3, stream=e)
        assert abs(val) <= 3 * se
        assert irm_penalty_population(pred, env, es.invariant) < 1e-10


def test_penalty_perturbed_classifier_positive():
    rng = np.random.default_rng(23)
    es = checks.random_envset(rng, E=1)
    pred = optimal_invariant_predictor(es.invariant, es.d_e)
    beta = pred.beta.copy()
    beta[0] += 0.5
    bad = pred.with_classifier(beta)
    val, se = irm_penalty(bad, es[0], es.invariant, 10 ** 6, seed=4)
    assert val > 5 * se
    assert val == pytest.approx(float(_fd_penalty(bad, es[0], es.invariant) @ _fd_penalty(bad, es[0], es.invariant)),
                                abs=4 * se)


@pytest.mark.parametrize("shift", [0.0, 0.05, 0.5])
def test_penalty_standard_error_is_calibrated(shift):
    # spread of the estimate over seeds against the reported error, including
    # the degenerate case of a zero population gradient
    rng = np.random.default_rng(27)
    es = checks.random_envset(rng, E=1)
    pred = optimal_invariant_predictor(es.invariant, es.d_e)
    beta = pred.beta.copy()
    beta[0] += shift
    pred = pred.with_classifier(beta)
    pop = irm_penalty_population(pred, es[0], es.invariant)
    est = np.array([irm_penalty(pred, es[0], es.invariant, 20_000, seed=s) for s in range(200)])
    ratio = est[:, 1].mean() / est[:, 0].std()
    assert 0.8 < ratio < 1.4
    assert abs(est[:, 0].mean() - pop) < 3 * est[:, 0].std() / np.sqrt(200)


def test_penalty_needs_enough_samples():
    inv = InvariantParams(0.5, [1.0], 1.0)
    with pytest.raises(ValueError):
        irm_penalty(optimal_invariant_predictor(inv, 1), EnvironmentParams([1.0], 1.0), inv, n=100)


def test_penalty_independent_of_jobs():
    rng = np.random.default_rng(24)
    es = checks.random_envset(rng, E=1)
    pred = checks._random_predictor(rng, es.d_c, es.d_e, k=2)
    a = irm_penalty(pred, es[0], es.invariant, 150_000, seed=5, jobs=1)
    b = irm_penalty(pred, es[0], es.invariant, 150_000, seed=5, jobs=3)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


# --- variance and reports ---------------------------------------------------


def test_risk_variance_cases():
    rng = np.random.default_rng(25)
    es = checks.random_envset(rng, E=3, equal_var=True)
    assert risk_variance(optimal_invariant_predictor(es.invariant, es.d_e), es) == 0.0
    assert risk_variance(build_feasible_noninvariant_featurizer(es), es) < 1e-10
    inv = InvariantParams(0.5, [0.5], 1.0)
    es2 = EnvironmentSet.from_arrays(inv, [[1.0], [1.0]], [0.5, 2.0])
    pred = LinearPredictor(np.eye(2)[:, :1], np.eye(2)[:, 1:], [1.0, 1.0], 0.0)
    assert risk_variance(pred, es2) > 1e-4
    with pytest.raises(ValueError):
        risk_variance(pred, es2.subset([0]))


def test_risk_report_serialization():
    rng = np.random.default_rng(26)
    es = checks.random_envset(rng, E=2)
    pred = checks._random_predictor(rng, es.d_c, es.d_e, k=2)
    rep = risk_report(pred, es, "mc", n=20_000, seed=1)
    data = json.loads(rep.to_json())
    assert all(e["method"] == "mc" and e["n"] == 20_000 and e["seed"] == 1 and e["zero_one_se"] > 0
               for e in data["entries"])
    lines = rep.to_csv().strip().split("\n")
    assert lines[0].startswith("env,logistic_risk,zero_one_risk") and len(lines) == 3
    q = risk_report(pred, es)
    assert q.risk_variance >= 0 and {e.method for e in q.entries} == {"quadrature"}


# --- strictness of the full-feature Bayes risk -------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_feature_subset_is_strictly_worse(seed):
    rng = np.random.default_rng(seed)
    d_c, d_e = 2, 3
    inv = InvariantParams(rng.uniform(0.3, 0.7), rng.normal(size=d_c), rng.uniform(0.5, 2))
    env = EnvironmentParams(rng.normal(size=d_e), rng.uniform(0.5, 2))
    eye = np.eye(d_c + d_e)
    full_beta, b0 = bayes_coefficients(eye[:, :d_c], eye[:, d_c:], env, inv)
    full = LinearPredictor(eye[:, :d_c], eye[:, d_c:], full_beta, b0)
    keep = rng.permutation(d_c + d_e)[: rng.integers(1, d_c + d_e)]
    S = eye[keep]
    beta, _ = bayes_coefficients(S[:, :d_c], S[:, d_c:], env, inv)
    sub = LinearPredictor(S[:, :d_c], S[:, d_c:], beta, b0)
    margin_log = logistic_risk_quadrature(sub, env, inv, 128) - logistic_risk_quadrature(full, env, inv, 128)
    margin_01 = zero_one_risk_closed(sub, env, inv) - zero_one_risk_closed(full, env, inv)
    # the full-feature Bayes classifier is optimal for both losses
    assert margin_log > -1e-10
    assert margin_01 > -1e-12
    dropped = np.setdiff1d(np.arange(d_c + d_e), keep)
    if np.abs(full_beta[dropped]).max() > 0.1:
        assert margin_log > 0
