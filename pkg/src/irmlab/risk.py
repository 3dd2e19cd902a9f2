"""Population and Monte Carlo risk evaluation.

For a linear predictor the logit given ``y`` is a univariate Gaussian, so the
0-1 risk has a closed form and the logistic risk reduces to a 1-D integral
evaluated by Gauss-Hermite quadrature.  The IRM gradient penalty is estimated
by Monte Carlo for any predictor exposing ``features(z_c, z_e)``, ``beta`` and
``beta_0``; for linear predictors a Stein-identity population value is also
available as a cross-check.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from functools import lru_cache

import numpy as np
from scipy.special import expit, ndtr

from .model import BLOCK_SIZE, EnvironmentParams, EnvironmentSet, InvariantParams, _draw_block, block_rng
from .predictors import LinearPredictor

DEFAULT_NODES = 64


@lru_cache(maxsize=16)
def gh_rule(nodes: int = DEFAULT_NODES) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for ``E[g(Z)]``, ``Z ~ N(0, 1)``: ``sum(w * g(t))``."""
    x, w = np.polynomial.hermite.hermgauss(nodes)
    t = np.sqrt(2.0) * x
    w = w / np.sqrt(np.pi)
    t.setflags(write=False)
    w.setflags(write=False)
    return t, w


def softplus(u):
    return np.logaddexp(0.0, u)


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite parameters")


# --------------------------------------------------------------------------
# closed form and quadrature


def zero_one_from_moments(m: float, s: float, beta_0: float, eta: float) -> float:
    """0-1 risk when the logit given ``y`` is ``N(y m + beta_0, s^2)``.

    A zero logit predicts +1, so a ``y = +1`` point errs iff logit < 0 and a
    ``y = -1`` point errs iff logit >= 0.
    """
    if s > 0:
        err_pos = ndtr(-(m + beta_0) / s)
        err_neg = ndtr((-m + beta_0) / s)
    else:
        err_pos = float(m + beta_0 < 0)
        err_neg = float(-m + beta_0 >= 0)
    return float(eta * err_pos + (1.0 - eta) * err_neg)


def zero_one_risk_closed(pred: LinearPredictor, env: EnvironmentParams, inv: InvariantParams) -> float:
    _check_finite(env.mu_e, inv.mu_c)
    m, s = pred.logit_moments(env, inv)
    return zero_one_from_moments(m, s, pred.beta_0, inv.eta)


def logistic_from_moments(m: float, s: float, beta_0: float, eta: float, nodes: int = DEFAULT_NODES) -> float:
    t, w = gh_rule(nodes)
    # loss for y=+1 is softplus(-logit), for y=-1 softplus(logit)
    pos = w @ softplus(-(m + beta_0 + s * t))
    neg = w @ softplus(-m + beta_0 + s * t)
    return float(eta * pos + (1.0 - eta) * neg)


def logistic_risk_quadrature(pred: LinearPredictor, env: EnvironmentParams, inv: InvariantParams,
                             nodes: int = DEFAULT_NODES) -> float:
    _check_finite(env.mu_e, inv.mu_c)
    m, s = pred.logit_moments(env, inv)
    return logistic_from_moments(m, s, pred.beta_0, inv.eta, nodes)


def feature_moments(pred: LinearPredictor, env: EnvironmentParams, inv: InvariantParams):
    """Mean direction ``mu_bar`` and covariance ``Sigma_bar`` of ``Phi`` given ``y``."""
    mu_bar = pred.A @ inv.mu_c + pred.B @ env.mu_e
    cov = inv.sigma_c_sq * pred.A @ pred.A.T + env.sigma_e_sq * pred.B @ pred.B.T
    return mu_bar, cov


def penalty_gradient_population(pred: LinearPredictor, env: EnvironmentParams, inv: InvariantParams,
                                nodes: int = DEFAULT_NODES) -> np.ndarray:
    """Population gradient of ``R^e`` in ``(beta, beta_0)`` via Stein's identity.

    ``E[h(t) Phi | y] = y mu_bar E[h] + Sigma_bar beta E[h']`` with
    ``h = sigmoid(t) - 1{y=1}``.
    """
    t, w = gh_rule(nodes)
    mu_bar, cov = feature_moments(pred, env, inv)
    m, s = pred.logit_moments(env, inv)
    grad = np.zeros(pred.k + 1)
    cov_beta = cov @ pred.beta
    for y, p_y in ((1.0, inv.eta), (-1.0, 1.0 - inv.eta)):
        logits = y * m + pred.beta_0 + s * t
        sig = expit(logits)
        h = w @ (sig - (y > 0))
        dh = w @ (sig * (1.0 - sig))
        grad[:-1] += p_y * (y * mu_bar * h + cov_beta * dh)
        grad[-1] += p_y * h
    return grad


def irm_penalty_population(pred: LinearPredictor, env: EnvironmentParams, inv: InvariantParams,
                           nodes: int = DEFAULT_NODES) -> float:
    g = penalty_gradient_population(pred, env, inv, nodes)
    return float(g @ g)


def risk_variance(pred: LinearPredictor, envset: EnvironmentSet, nodes: int = DEFAULT_NODES) -> float:
    """Population variance of the per-environment logistic risks."""
    if envset.n_envs < 2:
        raise ValueError("risk variance needs at least two environments")
    risks = np.array([logistic_risk_quadrature(pred, env, envset.invariant, nodes) for env in envset])
    return float(np.mean((risks - risks.mean()) ** 2))


# --------------------------------------------------------------------------
# Monte Carlo


@dataclass
class _Accum:
    """Per-group sums needed for means and delete-group jackknife."""

    count: np.ndarray
    loss: np.ndarray
    loss_sq: np.ndarray
    err: np.ndarray
    vsum: np.ndarray      # groups x (k+1)
    vsq: np.ndarray       # groups
    vouter: np.ndarray    # (k+1) x (k+1), summed over all rows


def _block_stats(pred, inv, env, seed, stream, b, n, groups, block_size):
    start = b * block_size
    m = min(block_size, n - start)
    y, z_c, z_e = _draw_block(block_rng(seed, stream, b), block_size, inv, env)
    y, z_c, z_e = y[:m], z_c[:m], z_e[:m]
    phi = pred.features(z_c, z_e)
    logit = phi @ pred.beta + pred.beta_0
    loss = softplus(-y * logit)
    err = np.where(logit >= 0, y < 0, y > 0).astype(float)
    h = expit(logit) - (y > 0)
    v = np.hstack([phi, np.ones((m, 1))]) * h[:, None]
    gid = (np.arange(start, start + m) * groups) // n
    acc = _Accum(
        count=np.bincount(gid, minlength=groups).astype(float),
        loss=np.bincount(gid, loss, minlength=groups),
        loss_sq=np.bincount(gid, loss * loss, minlength=groups),
        err=np.bincount(gid, err, minlength=groups),
        vsum=np.stack([np.bincount(gid, v[:, j], minlength=groups) for j in range(v.shape[1])], axis=1),
        vsq=np.bincount(gid, np.einsum("ij,ij->i", v, v), minlength=groups),
        vouter=v.T @ v,
    )
    return acc


def _accumulate(pred, env, inv, n, seed, stream=0, groups=100, jobs=1, block_size=BLOCK_SIZE) -> _Accum:
    n_blocks = -(-n // block_size)
    groups = min(groups, n)

    def work(b):
        return _block_stats(pred, inv, env, seed, stream, b, n, groups, block_size)

    if jobs > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(work, range(n_blocks)))
    else:
        parts = [work(b) for b in range(n_blocks)]
    # summation in block order keeps results independent of the worker count
    total = parts[0]
    for p in parts[1:]:
        total = _Accum(*(getattr(total, f) + getattr(p, f) for f in total.__dataclass_fields__))
    return total


def _penalty_from_accum(acc: _Accum, se_method: str = "hoeffding") -> tuple[float, float]:
    """Unbiased U-statistic for ``||E v||^2`` and its standard error.

    ``hoeffding`` plugs sample moments into the exact variance of the
    U-statistic with kernel ``a^T b``::

        Var U = 4 (n-2) mu^T S mu / (n (n-1)) + 2 (tr S^2 + 2 mu^T S mu) / (n (n-1))

    which stays valid when ``E v = 0`` and the statistic is degenerate.
    ``jackknife`` is the delete-group jackknife over the accumulation groups;
    it is erratic in that degenerate case.
    """
    n = acc.count.sum()
    S = acc.vsum.sum(axis=0)
    Q = acc.vsq.sum()
    value = (S @ S - Q) / (n * (n - 1))
    if se_method == "hoeffding":
        mu = S / n
        cov = acc.vouter / n - np.outer(mu, mu)
        cov = cov * n / (n - 1)
        tr_sq = float(np.sum(cov * cov))
        # mu_hat^T S mu_hat overshoots mu^T S mu by about tr(S^2) / n
        zeta1 = max(float(mu @ cov @ mu) - tr_sq / n, 0.0)
        zeta2 = tr_sq + 2.0 * zeta1
        var = (4.0 * (n - 2) * zeta1 + 2.0 * zeta2) / (n * (n - 1))
        return float(value), float(np.sqrt(var))
    if se_method != "jackknife":
        raise ValueError(f"unknown se_method {se_method!r}")
    G = acc.count.size
    S_del = S[None, :] - acc.vsum
    n_del = n - acc.count
    theta = (np.einsum("ij,ij->i", S_del, S_del) - (Q - acc.vsq)) / (n_del * (n_del - 1))
    se = np.sqrt((G - 1) / G * np.sum((theta - theta.mean()) ** 2))
    return float(value), float(se)


def irm_penalty(pred, env: EnvironmentParams, inv: InvariantParams, n: int = 10 ** 6, seed: int = 0,
                stream: int = 0, jobs: int = 1, se_method: str = "hoeffding") -> tuple[float, float]:
    """Monte Carlo ``||E[(sigmoid(logit) - 1{y=1}) [Phi, 1]]||^2`` with standard error.

    The bias coordinate is part of the classifier gradient.  Works for any
    predictor with ``features``, ``beta`` and ``beta_0``.
    """
    if n < 10 ** 4:
        raise ValueError("irm_penalty needs n >= 1e4")
    acc = _accumulate(pred, env, inv, n, seed, stream, jobs=jobs)
    return _penalty_from_accum(acc, se_method)


@dataclass(frozen=True)
class MCEstimate:
    logistic: float
    logistic_se: float
    zero_one: float
    zero_one_se: float
    penalty: float
    penalty_se: float
    n: int
    seed: int


def mc_risks(pred, env: EnvironmentParams, inv: InvariantParams, n: int, seed: int,
             stream: int = 0, jobs: int = 1) -> MCEstimate:
    acc = _accumulate(pred, env, inv, n, seed, stream, jobs=jobs)
    N = acc.count.sum()
    loss = acc.loss.sum() / N
    loss_var = max(acc.loss_sq.sum() / N - loss * loss, 0.0)
    err = acc.err.sum() / N
    pen, pen_se = _penalty_from_accum(acc) if N > 1 else (np.nan, np.nan)
    return MCEstimate(
        logistic=float(loss), logistic_se=float(np.sqrt(loss_var / N)),
        zero_one=float(err), zero_one_se=float(np.sqrt(err * (1 - err) / N)),
        penalty=pen, penalty_se=pen_se, n=int(n), seed=int(seed),
    )


# --------------------------------------------------------------------------
# reports


@dataclass
class RiskEntry:
    env: int
    logistic_risk: float
    zero_one_risk: float
    penalty: float
    method: str
    logistic_se: float | None = None
    zero_one_se: float | None = None
    penalty_se: float | None = None
    n: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.method not in ("closed", "quadrature", "mc"):
            raise ValueError(f"unknown method tag {self.method!r}")
        if not self.logistic_risk >= 0:
            raise ValueError("logistic risk must be non-negative")
        if not 0.0 <= self.zero_one_risk <= 1.0:
            raise ValueError("0-1 risk must lie in [0, 1]")


@dataclass
class RiskReport:
    entries: list = field(default_factory=list)
    risk_variance: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.risk_variance is not None and self.risk_variance < 0:
            raise ValueError("variance must be non-negative")

    def to_dict(self) -> dict:
        return {"entries": [asdict(e) for e in self.entries], "risk_variance": self.risk_variance,
                "extra": self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = list(RiskEntry.__dataclass_fields__)
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for e in self.entries:
            writer.writerow(["" if getattr(e, c) is None else getattr(e, c) for c in cols])
        return buf.getvalue()


def risk_report(pred, envset: EnvironmentSet, method: str = "quadrature", n: int = 10 ** 6,
                seed: int = 0, nodes: int = DEFAULT_NODES, jobs: int = 1) -> RiskReport:
    """Per-environment risks; ``quadrature`` uses closed forms, ``mc`` samples."""
    inv = envset.invariant
    entries = []
    for i, env in enumerate(envset):
        if method == "mc":
            est = mc_risks(pred, env, inv, n, seed, stream=i, jobs=jobs)
            entries.append(RiskEntry(i, est.logistic, est.zero_one, est.penalty, "mc",
                                     est.logistic_se, est.zero_one_se, est.penalty_se, n, seed))
        elif method == "quadrature":
            entries.append(RiskEntry(
                i, logistic_risk_quadrature(pred, env, inv, nodes), zero_one_risk_closed(pred, env, inv),
                irm_penalty_population(pred, env, inv, nodes), "quadrature"))
        else:
            raise ValueError(f"unknown method {method!r}")
    risks = np.array([e.logistic_risk for e in entries])
    var = float(np.mean((risks - risks.mean()) ** 2)) if len(entries) > 1 else None
    return RiskReport(entries, var)
