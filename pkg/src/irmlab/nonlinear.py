"""Piecewise featurizer that hides environmental features near the training means.

Inside the union of balls of radius ``sqrt(eps sigma_e^2 d_e)`` around every
``+-mu_e`` the featurizer returns ``[z_c, 0]`` and so acts like the optimal
invariant predictor; outside it returns ``[z_c, z_e]`` and acts like the
pooled ERM classifier.  The module also holds the concentration bounds used to
control this construction and Monte Carlo checks of each.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri_exp
from scipy.stats import chi2, norm

from .constructions import ErmClassifier, closeness_report, erm_env_classifier, sigma_erm
from .model import BLOCK_SIZE, EnvironmentParams, EnvironmentSet, InvariantParams, ObservationMap, _draw_block, block_rng
from .predictors import LinearPredictor
from .risk import RiskEntry, RiskReport, mc_risks, zero_one_from_moments


@dataclass(frozen=True)
class PiecewiseFeaturizer:
    centers: np.ndarray        # 2E x d_e, rows mu_1..mu_E, -mu_1..-mu_E
    radii: np.ndarray          # 2E, radius of each ball
    epsilon: float
    d_c: int
    obs_map: ObservationMap | None = None

    def __post_init__(self):
        if not self.epsilon > 1:
            raise ValueError(f"epsilon must exceed 1, got {self.epsilon!r}")
        c = np.array(self.centers, dtype=float)
        r = np.array(self.radii, dtype=float)
        c.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)
        object.__setattr__(self, "_sq_norms", np.einsum("ij,ij->i", c, c))
        object.__setattr__(self, "_r_sq", r * r)

    @property
    def d_e(self) -> int:
        return self.centers.shape[1]

    @property
    def n_balls(self) -> int:
        return self.centers.shape[0]

    def inside(self, z_e) -> np.ndarray:
        """Whether each row of ``z_e`` lies in some closed ball."""
        z_e = np.atleast_2d(z_e)
        # ||z - c||^2 = ||z||^2 - 2 z.c + ||c||^2, no square roots
        d2 = np.einsum("ij,ij->i", z_e, z_e)[:, None] - 2.0 * z_e @ self.centers.T + self._sq_norms
        return np.any(d2 <= self._r_sq, axis=1)

    def features(self, z_c, z_e) -> np.ndarray:
        z_c = np.atleast_2d(z_c)
        z_e = np.atleast_2d(z_e)
        keep = ~self.inside(z_e)
        return np.hstack([z_c, z_e * keep[:, None]])

    def __call__(self, x) -> np.ndarray:
        if self.obs_map is None:
            raise ValueError("featurizer has no observation map to invert")
        z_c, z_e = self.obs_map.inverse(x)
        return self.features(z_c, z_e)


@dataclass(frozen=True)
class PiecewisePredictor:
    """``Phi_eps`` followed by a linear classifier on ``[z_c, z_e]``."""

    phi: PiecewiseFeaturizer
    beta: np.ndarray
    beta_0: float

    def features(self, z_c, z_e) -> np.ndarray:
        return self.phi.features(z_c, z_e)

    def logit_x(self, x) -> np.ndarray:
        return self.phi(x) @ self.beta + self.beta_0

    def to_dict(self) -> dict:
        return {
            "type": "piecewise",
            "epsilon": self.phi.epsilon,
            "centers": self.phi.centers.tolist(),
            "radii": self.phi.radii.tolist(),
            "beta": np.asarray(self.beta).tolist(),
            "beta_0": float(self.beta_0),
        }


def build_phi_epsilon(envset: EnvironmentSet, epsilon: float, obs_map: ObservationMap | None = None
                      ) -> PiecewiseFeaturizer:
    if not epsilon > 1:
        raise ValueError(f"epsilon must exceed 1, got {epsilon!r}")
    M = envset.means
    d_e = envset.d_e
    r = np.sqrt(epsilon * envset.variances * d_e)
    return PiecewiseFeaturizer(np.vstack([M, -M]), np.concatenate([r, r]), float(epsilon), envset.d_c, obs_map)


def erm_piecewise_predictor(phi: PiecewiseFeaturizer, inv: InvariantParams, erm: ErmClassifier
                            ) -> PiecewisePredictor:
    return PiecewisePredictor(phi, np.concatenate([inv.beta_c, erm.beta_e]), inv.beta_0)


# --------------------------------------------------------------------------
# bounds


def p_epsilon(epsilon: float, d_e: int) -> float:
    """Sub-exponential bound on the chance a training draw leaves its own ball."""
    e1 = epsilon - 1.0
    return float(np.exp(-d_e * min(e1, e1 * e1) / 8.0))


def q_bound(E: int, k: float, delta: float) -> float:
    """Bound on the chance a separated test draw lands in any training ball."""
    if not (delta > 0 and k > 0):
        raise ValueError("q needs delta > 0 and k > 0")
    return float(2.0 * E / (np.sqrt(k * np.pi) * delta) * np.exp(-k * delta * delta))


def chi2_tail(epsilon: float, d_e: int) -> float:
    """``P(||z||^2 >= eps d_e)`` for ``z ~ N(0, I_{d_e})``."""
    return float(chi2.sf(epsilon * d_e, d_e))


def cte_bound(mu, sigma: float, r: float) -> float:
    """Closed bound on ``||E[|z| : ||z - mu|| > r]||^2`` for ``z ~ N(mu, sigma^2 I)``."""
    mu = np.asarray(mu, dtype=float)
    d = mu.size
    t = r / np.sqrt(d)
    mills = np.exp(norm.logpdf(t) - log_ndtr(-t))
    return float(2.0 * d * (sigma * mills) ** 2 + 2.0 * (mu @ mu))


def mills_ratio_sq(epsilon: float, sigma: float) -> float:
    """``[phi(r) / F(-r)]^2`` at ``r = sqrt(eps) sigma``."""
    r = np.sqrt(epsilon) * sigma
    return float(np.exp(2.0 * (norm.logpdf(r) - log_ndtr(-r))))


def mills_bound(epsilon: float, sigma: float) -> float:
    return float(0.5 * np.exp(2.0 * epsilon * (sigma ** 2 - 0.5)) * (epsilon * sigma ** 2 + 1.0))


def penalty_bound_env(env: EnvironmentParams, epsilon: float) -> float:
    d_e = env.d_e
    s2 = env.sigma_e_sq
    inner = d_e * s2 * np.exp(2.0 * epsilon * (s2 - 0.5)) * (epsilon * s2 + 1.0) + 2.0 * (env.mu_e @ env.mu_e)
    return float(p_epsilon(epsilon, d_e) ** 2 * inner)


@dataclass(frozen=True)
class PenaltyBound:
    per_env: tuple
    average: float


def penalty_bound(envset: EnvironmentSet, epsilon: float) -> PenaltyBound:
    """Explicit per-environment bound on the classifier-gradient norm of ``(Phi_eps, beta_ERM)``."""
    if not epsilon > 1:
        raise ValueError(f"epsilon must exceed 1, got {epsilon!r}")
    per = tuple(penalty_bound_env(env, epsilon) for env in envset)
    return PenaltyBound(per, float(np.mean(per)))


# --------------------------------------------------------------------------
# Monte Carlo checks of the bounds


@dataclass(frozen=True)
class Fraction:
    value: float
    std_error: float


def chi2_tail_mc(epsilon: float, d_e: int, n: int, seed: int) -> Fraction:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, d_e, 0xC41])))
    hits = 0
    done = 0
    while done < n:
        m = min(BLOCK_SIZE, n - done)
        z = rng.standard_normal((m, d_e))
        hits += int(np.count_nonzero(np.einsum("ij,ij->i", z, z) >= epsilon * d_e))
        done += m
    p = hits / n
    return Fraction(p, float(np.sqrt(max(p * (1 - p), 1.0 / n) / n)))


@dataclass(frozen=True)
class CteEstimate:
    value: float
    std_error: float
    outside_fraction: float
    n_outside: int


def cte_norm_sq_mc(mu, sigma: float, r: float, n: int, seed: int) -> CteEstimate:
    """Monte Carlo ``||E[|z| : ||z - mu|| > r]||^2`` with a delta-method error."""
    mu = np.asarray(mu, dtype=float)
    d = mu.size
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, d, 0xC7E])))
    s1 = np.zeros(d)
    s2 = np.zeros(d)
    k = 0
    done = 0
    while done < n:
        m = min(BLOCK_SIZE, n - done)
        dz = sigma * rng.standard_normal((m, d))
        out = np.einsum("ij,ij->i", dz, dz) > r * r
        a = np.abs(dz[out] + mu)
        s1 += a.sum(axis=0)
        s2 += (a * a).sum(axis=0)
        k += int(out.sum())
        done += m
    if k < 2:
        raise ValueError("too few samples outside the ball; increase n or shrink r")
    mean = s1 / k
    var = s2 / k - mean ** 2
    value = float(mean @ mean)
    # d/d mean of ||mean||^2 is 2 mean; coordinates treated as independent
    se = float(np.sqrt(np.sum(4.0 * mean ** 2 * var / k)))
    return CteEstimate(value, se, k / n, k)


def truncated_mean_mc(r: float, n: int, seed: int) -> Fraction:
    """Monte Carlo ``E[Z : Z > r]`` for standard normal ``Z`` via inverse-CDF sampling."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x7A1])))
    u = rng.random(n)
    # Z > r has survival ndtr(-r); sample its upper tail by inverting log-survival
    logs = log_ndtr(-r) + np.log1p(-u)
    z = -ndtri_exp(logs)
    return Fraction(float(z.mean()), float(z.std(ddof=1) / np.sqrt(n)))


# --------------------------------------------------------------------------
# test environments


@dataclass(frozen=True)
class TestEnvironmentSpec:
    __test__ = False

    mu_test: np.ndarray
    sigma_test_sq: float
    alpha: np.ndarray | None
    epsilon: float
    delta: float
    k: float
    q: float | None
    c: float
    alpha_scale: float = 1.0
    lhs: float | None = None
    rhs: float | None = None
    gamma: float | None = None
    gamma_near_singular: bool = False
    sigma_erm: float | None = None
    notes: tuple = field(default=())

    @property
    def env(self) -> EnvironmentParams:
        return EnvironmentParams(self.mu_test, self.sigma_test_sq)

    @property
    def separated(self) -> bool:
        return self.delta > 0

    @property
    def risk_lower_bound(self) -> float | None:
        if self.q is None:
            return None
        return float(ndtr(2.0 * self.c) - self.q)

    def to_dict(self) -> dict:
        return {
            "mu_test": self.mu_test.tolist(), "sigma_test_sq": self.sigma_test_sq,
            "alpha": None if self.alpha is None else self.alpha.tolist(), "epsilon": self.epsilon,
            "delta": self.delta, "k": self.k, "q": self.q, "c": self.c, "alpha_scale": self.alpha_scale,
            "lhs": self.lhs, "rhs": self.rhs, "gamma": self.gamma,
            "gamma_near_singular": self.gamma_near_singular, "sigma_erm": self.sigma_erm,
            "notes": list(self.notes),
        }


def separation(envset: EnvironmentSet, mu_test, sigma_test_sq: float, epsilon: float) -> tuple[float, float, float | None]:
    """``(delta, k, q)`` for a test mean; ``q`` is None unless ``delta > 0``."""
    mu_test = np.asarray(mu_test, dtype=float)
    d_e = envset.d_e
    ratios = []
    for env in envset:
        dist = min(np.linalg.norm(mu_test - env.mu_e), np.linalg.norm(mu_test + env.mu_e))
        ratios.append(dist / (env.sigma_e * np.sqrt(d_e)))
    delta = float(min(ratios) - np.sqrt(epsilon))
    k = float(envset.variances.min() / sigma_test_sq)
    q = q_bound(envset.n_envs, k, delta) if delta > 0 else None
    return delta, k, q


def make_test_environment(envset: EnvironmentSet, mu_test, sigma_test_sq: float, epsilon: float,
                     c: float = 1.0) -> TestEnvironmentSpec:
    mu_test = np.array(mu_test, dtype=float)
    delta, k, q = separation(envset, mu_test, sigma_test_sq, epsilon)
    return TestEnvironmentSpec(mu_test, float(sigma_test_sq), None, float(epsilon), delta, k, q, float(c))


def build_reversed_test_env(envset: EnvironmentSet, alpha=None, inv: InvariantParams | None = None,
                            beta_erm=None, c: float = 1.0, epsilon: float = 2.0,
                            sigma_test_sq: float | None = None) -> TestEnvironmentSpec:
    """Test mean ``-sum alpha_e mu_e``, with ``alpha`` scaled up until the risk condition holds.

    The condition is ``sum alpha_e ||mu_e||^2 / sigma_e^2 >= (||mu_c||^2 / sigma_c^2 +
    |beta_0| / 2 + c sigma_ERM) / (1 - gamma)``, with ``sigma_ERM`` evaluated at
    the test variance (the variance of the logit on the test distribution).
    """
    inv = envset.invariant if inv is None else inv
    E = envset.n_envs
    if sigma_test_sq is None:
        sigma_test_sq = float(envset.variances.max())
    if beta_erm is None:
        beta_erm = erm_env_classifier(envset, inv).beta_e
    beta_erm = np.asarray(beta_erm, dtype=float)
    alpha = np.full(E, 1.0 / E) if alpha is None else np.array(alpha, dtype=float)
    if alpha.shape != (E,):
        raise ValueError(f"alpha must have length {E}")
    M = envset.means
    sq = np.einsum("ij,ij->i", M, M) / envset.variances
    if np.all(sq == 0):
        raise ValueError("all environmental means are zero; no reversed environment exists")
    a1 = closeness_report(beta_erm, envset)
    notes = []
    if a1.near_singular:
        notes.append(f"gamma={a1.gamma:.4f} is close to 1; the condition is near-singular")
    if not a1.holds:
        raise ValueError(f"ERM classifier is not gamma-close for any gamma < 1 (gamma={a1.gamma:.4g})")
    s_erm = sigma_erm(inv, beta_erm, sigma_test_sq)
    rhs = (inv.mu_c @ inv.mu_c / inv.sigma_c_sq + abs(inv.beta_0) / 2.0 + c * s_erm) / (1.0 - a1.gamma)
    lhs = float(alpha @ sq)
    scale = 1.0
    if lhs <= 0:
        raise ValueError("alpha gives a non-positive left side; uniform upscaling cannot satisfy the condition")
    if lhs < rhs:
        scale = rhs / lhs
        alpha = alpha * scale
        lhs = float(alpha @ sq)
        notes.append(f"alpha scaled by {scale:.6g} to satisfy the risk condition")
    mu_test = -(alpha @ M)
    delta, k, q = separation(envset, mu_test, sigma_test_sq, epsilon)
    if q is None:
        notes.append("test mean is not separated from the training balls (delta <= 0)")
    return TestEnvironmentSpec(mu_test, float(sigma_test_sq), alpha, float(epsilon), delta, k, q, float(c),
                               float(scale), lhs, float(rhs), a1.gamma, a1.near_singular, s_erm, tuple(notes))


def match_fractions(phi: PiecewiseFeaturizer, env: EnvironmentParams, n: int, seed: int,
                    inv: InvariantParams | None = None, stream: int = 0) -> tuple[Fraction, Fraction]:
    """Fractions of draws routed to the invariant and ERM branches."""
    if n < 10 ** 5:
        raise ValueError("match_fractions needs n >= 1e5")
    inv = InvariantParams(0.5, np.zeros(phi.d_c), 1.0) if inv is None else inv
    inside = 0
    for b in range(-(-n // BLOCK_SIZE)):
        m = min(BLOCK_SIZE, n - b * BLOCK_SIZE)
        _, _, z_e = _draw_block(block_rng(seed, stream, b), BLOCK_SIZE, inv, env)
        inside += int(np.count_nonzero(phi.inside(z_e[:m])))
    p = inside / n
    se = float(np.sqrt(max(p * (1 - p), 1.0 / n) / n))
    return Fraction(p, se), Fraction(1.0 - p, se)


def evaluate_on_test(predictor: PiecewisePredictor, test_spec: TestEnvironmentSpec, inv: InvariantParams,
                     n: int = 10 ** 6, seed: int = 0, jobs: int = 1) -> RiskReport:
    """Monte Carlo risks of the piecewise predictor on the test distribution."""
    if n < 10 ** 5:
        raise ValueError("evaluate_on_test needs n >= 1e5")
    env = test_spec.env
    est = mc_risks(predictor, env, inv, n, seed, stream=0, jobs=jobs)
    _, erm_frac = match_fractions(predictor.phi, env, n, seed, inv)
    # the same draw routed through the full linear ERM predictor
    d_c, d_e = inv.d_c, env.d_e
    full = LinearPredictor(np.eye(d_c + d_e)[:, :d_c], np.eye(d_c + d_e)[:, d_c:], predictor.beta,
                           predictor.beta_0)
    m, s = full.logit_moments(env, inv)
    entry = RiskEntry(0, est.logistic, est.zero_one, est.penalty, "mc", est.logistic_se, est.zero_one_se,
                      est.penalty_se, n, seed)
    extra = {
        "q": test_spec.q, "delta": test_spec.delta, "k": test_spec.k,
        "erm_branch_fraction": erm_frac.value, "erm_branch_se": erm_frac.std_error,
        "risk_lower_bound": test_spec.risk_lower_bound,
        "erm_closed_zero_one": zero_one_from_moments(m, s, predictor.beta_0, inv.eta),
    }
    return RiskReport([entry], None, extra)
