"""Self-verification suite run by ``irmlab verify``.

Every check returns a ``CheckResult`` holding what was measured and the
threshold it was held to.  The suite uses fixed seeds and modest sample sizes
so it finishes in well under a minute; the heavier statistical versions live
in the test suite.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import ndtr

from . import constructions, model, nonlinear, risk, trainers
from .model import EnvironmentParams, EnvironmentSet, InvariantParams
from .predictors import LinearPredictor


@dataclass
class CheckResult:
    name: str
    claim: str
    status: str
    measured: float
    threshold: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def random_envset(rng: np.random.Generator, d_c: int = 3, d_e: int = 6, E: int = 3,
                  equal_var: bool = False, eta: float | None = None) -> EnvironmentSet:
    eta = rng.uniform(0.3, 0.7) if eta is None else eta
    inv = InvariantParams(eta, rng.normal(size=d_c), rng.uniform(0.5, 2.0))
    var = np.full(E, rng.uniform(0.5, 2.0)) if equal_var else rng.uniform(0.5, 2.0, size=E)
    return EnvironmentSet.from_arrays(inv, rng.normal(size=(E, d_e)), var)


def _random_predictor(rng, d_c, d_e, k=None):
    k = k or rng.integers(1, d_c + d_e + 1)
    return LinearPredictor(rng.normal(size=(k, d_c)), rng.normal(size=(k, d_e)), rng.normal(size=k),
                           float(rng.normal()))


def _result(name, claim, measured, threshold, le=True):
    ok = measured <= threshold if le else measured >= threshold
    return CheckResult(name, claim, "pass" if ok else "fail", float(measured), float(threshold))


# --------------------------------------------------------------------------


def check_observation_inverse():
    rng = np.random.default_rng(1)
    worst = 0.0
    for kind in ("linear", "nonlinear"):
        m = model.ObservationMap.random(kind, 3, 6, seed=4)
        z_c, z_e = rng.normal(size=(500, 3)), rng.normal(size=(500, 6))
        zc2, ze2 = model.invert_observation(m, m.forward(z_c, z_e))
        worst = max(worst, np.abs(zc2 - z_c).max(), np.abs(ze2 - z_e).max())
    return _result("observation_inverse", "the observation map is injective and inverted exactly", worst, 1e-8)


def check_sampling_determinism():
    rng = np.random.default_rng(2)
    es = random_envset(rng)
    a = model.sample_environment(es, 1, 70_000, seed=9)
    b = model.sample_environment(es, 1, 70_000, seed=9)
    c = model.sample_environment(es, 1, 1000, seed=9)
    diff = max(np.abs(a.z_e - b.z_e).max(), np.abs(a.z_e[:1000] - c.z_e).max())
    return _result("sampling_determinism", "draws depend only on (seed, environment, block)", diff, 0.0)


def check_zero_one_mc():
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(5):
        es = random_envset(rng)
        pred = _random_predictor(rng, es.d_c, es.d_e)
        est = risk.mc_risks(pred, es[0], es.invariant, 200_000, seed=i)
        closed = risk.zero_one_risk_closed(pred, es[0], es.invariant)
        worst = max(worst, abs(est.zero_one - closed) / max(est.zero_one_se, 1e-12))
    return _result("zero_one_closed_vs_mc", "the logit given y is Gaussian, so the 0-1 risk is a normal CDF",
                   worst, 4.0)


def check_penalty_mc():
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(3):
        es = random_envset(rng)
        pred = _random_predictor(rng, es.d_c, es.d_e, k=2)
        val, se = risk.irm_penalty(pred, es[0], es.invariant, 200_000, seed=i)
        pop = risk.irm_penalty_population(pred, es[0], es.invariant)
        worst = max(worst, abs(val - pop) / max(se, 1e-12))
    return _result("penalty_population_vs_mc", "classifier-gradient penalty estimated without bias",
                   worst, 4.0)


def check_stationarity(n_sets: int = 5):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(n_sets):
        es = random_envset(rng, E=int(rng.integers(1, 5)))
        pred = model.optimal_invariant_predictor(es.invariant, es.d_e)
        for obj in trainers.OBJECTIVES:
            rep = trainers.stationarity_check(pred, es, obj, lam=1.0, constrained=False)
            worst = max(worst, rep.featurizer, rep.classifier)
    return _result("invariant_stationarity",
                   "the optimal invariant predictor is a stationary point of every objective", worst, 1e-6)


def check_feasible_construction(n_sets: int = 10):
    rng = np.random.default_rng(6)
    worst_cls, rank_err, risk_viol = 0.0, 0, 0
    for _ in range(n_sets):
        d_e = int(rng.integers(2, 8))
        E = int(rng.integers(1, d_e + 1))
        es = random_envset(rng, d_e=d_e, E=E)
        inv = es.invariant
        pred = constructions.build_feasible_noninvariant_featurizer(es)
        rank_err += pred.rank() != inv.d_c + 1 + d_e - E
        betas = [constructions.bayes_coefficients(pred.A, pred.B, env, inv)[0] for env in es]
        worst_cls = max(worst_cls, max(np.abs(b - pred.beta).max() for b in betas))
        inv_pred = model.optimal_invariant_predictor(inv, d_e)
        for env in es:
            margin = risk.zero_one_risk_closed(inv_pred, env, inv) - risk.zero_one_risk_closed(pred, env, inv)
            risk_viol += margin < -1e-12
    measured = worst_cls + rank_err + risk_viol
    return _result("feasible_noninvariant", "a rank d_c+1+d_e-E featurizer shares one optimal classifier "
                   "and beats the invariant predictor", measured, 1e-8)


def check_environmental_predictor(n: int = 100):
    rng = np.random.default_rng(7)
    violations, checked = 0, 0
    for _ in range(n):
        es = random_envset(rng, d_e=8, E=int(rng.integers(1, 5)), equal_var=True)
        inv = InvariantParams(es.invariant.eta, 0.3 * es.invariant.mu_c, es.invariant.sigma_c_sq)
        es = EnvironmentSet(inv, es.envs)
        sol = constructions.solve_max_projection(es)
        pred = constructions.build_environmental_predictor(es)
        inv_pred = model.optimal_invariant_predictor(inv, es.d_e)
        for env, (c1, c2) in zip(es, constructions.check_thm2_conditions(es, inv, sol)):
            if c1 and c2:
                checked += 1
                violations += not (risk.zero_one_risk_closed(pred, env, inv)
                                   < risk.zero_one_risk_closed(inv_pred, env, inv))
    res = _result("environmental_predictor", "a predictor on environmental features alone beats the "
                  "invariant predictor when the projection is large", violations, 0)
    if checked == 0:
        res.status = "fail"
    return res


def check_trainer_identities():
    rng = np.random.default_rng(8)
    es = random_envset(rng, E=3)
    pe, _ = trainers.train(es, trainers.TrainConfig(objective="erm", max_steps=20, seed=3))
    pi, _ = trainers.train(es, trainers.TrainConfig(objective="irm", lam=0.0, max_steps=20, seed=3))
    diff = max(np.abs(pe.A - pi.A).max(), np.abs(pe.B - pi.B).max(), np.abs(pe.beta - pi.beta).max())
    opt = model.optimal_invariant_predictor(es.invariant, es.d_e)
    move = 0.0
    for obj in trainers.OBJECTIVES:
        p, _ = trainers.train(es, trainers.TrainConfig(objective=obj, lam=1.0, max_steps=100, warm_start=opt,
                                                       frozen=("B",), nodes=128))
        move = max(move, np.abs(p.A - opt.A).max(), np.abs(p.beta - opt.beta).max(), abs(p.beta_0 - opt.beta_0))
    return _result("trainer_identities", "lambda=0 reduces IRM to ERM; the invariant optimum does not move",
                   max(diff, move), 1e-6)


def check_gradients_fd(n: int = 5):
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(n):
        es = random_envset(rng, E=2)
        pred = _random_predictor(rng, es.d_c, es.d_e, k=2)
        _, grads = trainers.objective_gradients(pred, es, "irm", lam=1.0)
        h = 1e-5
        A = pred.A.copy()
        i, j = rng.integers(0, A.shape[0]), rng.integers(0, A.shape[1])
        vals = []
        for sgn in (1, -1):
            A2 = A.copy()
            A2[i, j] += sgn * h
            vals.append(trainers.objective_value(LinearPredictor(A2, pred.B, pred.beta, pred.beta_0), es, "irm", 1.0))
        fd = (vals[0] - vals[1]) / (2 * h)
        worst = max(worst, abs(fd - grads[0][i, j]) / max(abs(fd), 1e-8))
    return _result("gradient_fd", "analytic gradients agree with central differences", worst, 1e-4)


def check_bound_monotonicity():
    bad = 0
    ds = [2, 4, 8, 16, 32]
    for eps in (1.5, 2.0, 3.0):
        p = [nonlinear.p_epsilon(eps, d) for d in ds]
        bad += any(b >= a for a, b in zip(p, p[1:]))
    for d in ds:
        p = [nonlinear.p_epsilon(e, d) for e in (2.0, 2.5, 3.0, 4.0)]
        bad += any(b >= a for a, b in zip(p, p[1:]))
    qs = [nonlinear.q_bound(3, 1.0, dl) for dl in (0.5, 1.0, 2.0, 3.0)]
    bad += any(b >= a for a, b in zip(qs, qs[1:]))
    qk = [nonlinear.q_bound(3, k, 1.0) for k in (0.5, 1.0, 2.0, 4.0)]
    bad += any(b >= a for a, b in zip(qk, qk[1:]))
    return _result("bound_monotonicity", "p_eps falls with d_e and eps; q falls with delta and k", bad, 0)


def check_piecewise_penalty():
    rng = np.random.default_rng(10)
    d_e, eps = 16, 2.0
    inv = InvariantParams(0.5, 0.5 * rng.normal(size=3), 1.0)
    U = np.linalg.qr(rng.normal(size=(d_e, d_e)))[0][:3]
    es = EnvironmentSet.from_arrays(inv, 5 * np.sqrt(d_e) * U, 1.0)
    erm = constructions.erm_env_classifier(es)
    phi = nonlinear.build_phi_epsilon(es, eps)
    pred = nonlinear.erm_piecewise_predictor(phi, inv, erm)
    bound = nonlinear.penalty_bound(es, eps)
    excess = -np.inf
    for e, env in enumerate(es):
        val, se = risk.irm_penalty(pred, env, inv, 200_000, seed=1, stream=e)
        excess = max(excess, val - 3 * se - bound.per_env[e])
    # identical features on both branches for the invariant block
    z_c, z_e = rng.normal(size=(100, 3)), es.envs[0].mu_e + rng.normal(size=(100, d_e))
    f1 = phi.features(z_c, z_e)
    same = float(np.abs(f1[:, :3] - z_c).max())
    return _result("piecewise_penalty_bound", "the ball construction has a penalty of order p_eps^2",
                   max(excess, same - 1e-12), 0.0)


CHECKS = (
    check_observation_inverse, check_sampling_determinism, check_zero_one_mc, check_penalty_mc,
    check_stationarity, check_feasible_construction, check_environmental_predictor, check_trainer_identities,
    check_gradients_fd, check_bound_monotonicity, check_piecewise_penalty,
)


def run_checks(checks=CHECKS) -> list[CheckResult]:
    out = []
    for fn in checks:
        t0 = time.perf_counter()
        try:
            res = fn()
        except Exception as exc:  # a crashing check is a failing check
            res = CheckResult(fn.__name__.removeprefix("check_"), "raised " + type(exc).__name__,
                              "fail", float("nan"), float("nan"))
        res.seconds = round(time.perf_counter() - t0, 3)
        out.append(res)
    return out


def report(results: list[CheckResult]) -> dict:
    return {
        "passed": all(r.passed for r in results),
        "checks": [{k: v for k, v in asdict(r).items() if k != "seconds"} for r in results],
    }
