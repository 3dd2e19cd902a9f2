"""Explicit constructions over a set of training environments.

Maximizing projection, the feasible but non-invariant featurizer, the purely
environmental predictor, per-featurizer Bayes coefficients, the pooled ERM
classifier on the environmental block, gamma-closeness and the
non-degeneracy conditions on the environment parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.special import expit

from .model import EnvironmentParams, EnvironmentSet, InvariantParams
from .predictors import LinearPredictor
from .risk import DEFAULT_NODES, gh_rule, softplus

#: smallest/largest singular value ratio below which means count as dependent
INDEPENDENCE_TOL = 1e-8
#: relative cutoff for pseudo-inverses
PINV_RCOND = 1e-10


@dataclass(frozen=True)
class ProjectionSolution:
    """Unit ``p`` with ``p^T mu_e = w_e mu_tilde`` for every environment."""

    p: np.ndarray
    mu_tilde: float
    weighting: str
    weights: np.ndarray

    def residuals(self, means: np.ndarray) -> np.ndarray:
        return means @ self.p - self.weights * self.mu_tilde


def _weights(envset: EnvironmentSet, weighting: str) -> np.ndarray:
    if weighting == "variance":
        return envset.variances
    if weighting == "std":
        return np.sqrt(envset.variances)
    raise ValueError(f"weighting must be 'variance' or 'std', got {weighting!r}")


def check_independent(means: np.ndarray) -> None:
    """Raise if the rows of ``means`` are numerically linearly dependent."""
    E, d_e = means.shape
    if E > d_e:
        raise ValueError(f"{E} means in dimension {d_e} cannot be linearly independent")
    _, s, vt = np.linalg.svd(means)
    if s[0] == 0 or s[-1] <= INDEPENDENCE_TOL * s[0]:
        coeffs = vt[-1] if s[0] > 0 else np.ones(E)
        combo = " + ".join(f"{c:.3g}*mu_{i}" for i, c in enumerate(coeffs) if abs(c) > 1e-3)
        ratio = s[-1] / s[0] if s[0] > 0 else 0.0
        raise ValueError(
            f"environment means are (nearly) linearly dependent: singular value ratio {ratio:.3g}; "
            f"near-dependency {combo} ~ 0")


def solve_max_projection(envset: EnvironmentSet, weighting: str = "variance") -> ProjectionSolution:
    """Largest ``mu_tilde`` admitting a unit ``p`` with ``p^T mu_e = w_e mu_tilde``.

    With ``M^T = QR`` the optimal ``p`` lies in the span of the means, ``p =
    Q c``, and the constraints read ``R^T c = w mu_tilde``.
    """
    M = envset.means
    check_independent(M)
    w = _weights(envset, weighting)
    Q, R = np.linalg.qr(M.T)
    c = np.linalg.solve(R.T, w)
    norm = np.linalg.norm(c)
    p = Q @ (c / norm)
    p.setflags(write=False)
    w = w.copy()
    w.setflags(write=False)
    return ProjectionSolution(p=p, mu_tilde=float(1.0 / norm), weighting=weighting, weights=w)


def orthonormal_complement(means: np.ndarray) -> np.ndarray:
    """Columns spanning the orthogonal complement of the rows of ``means``."""
    E, d_e = means.shape
    Q, _ = np.linalg.qr(means.T, mode="complete")
    return Q[:, E:]


def build_feasible_noninvariant_featurizer(envset: EnvironmentSet, inv: InvariantParams | None = None
                                           ) -> LinearPredictor:
    """Features ``[z_c, p^T z_e, C^T z_e]`` with classifier ``[beta_c, 2 mu_tilde, 0...]``.

    ``C`` completes the span of the means to ``R^{d_e}``.  The Bayes classifier
    on these features is the same in every training environment.
    """
    inv = envset.invariant if inv is None else inv
    sol = solve_max_projection(envset, "variance")
    C = orthonormal_complement(envset.means)
    d_c, d_e = inv.d_c, envset.d_e
    extra = C.shape[1]
    A = np.vstack([np.eye(d_c), np.zeros((1 + extra, d_c))])
    B = np.vstack([np.zeros((d_c, d_e)), sol.p[None, :], C.T])
    beta = np.concatenate([inv.beta_c, [2.0 * sol.mu_tilde], np.zeros(extra)])
    notes = ["feasibility is vacuous with a single environment"] if envset.n_envs == 1 else []
    return LinearPredictor(A, B, beta, inv.beta_0, provenance="feasible-noninvariant", notes=tuple(notes))


def build_environmental_predictor(envset: EnvironmentSet) -> LinearPredictor:
    """``Phi = p^T z_e`` with classifier ``2 mu_tilde`` and the invariant bias."""
    inv = envset.invariant
    sol = solve_max_projection(envset, "variance")
    return LinearPredictor(np.zeros((1, inv.d_c)), sol.p[None, :], [2.0 * sol.mu_tilde], inv.beta_0,
                           provenance="environmental")


def check_thm2_conditions(envset: EnvironmentSet, inv: InvariantParams, sol: ProjectionSolution
                          ) -> list[tuple[bool, bool]]:
    """Per environment: ``sigma_e mu_tilde > snr`` and ``2 sigma_e mu_tilde snr >= |beta_0|``."""
    snr = inv.snr
    out = []
    for env in envset:
        proj = env.sigma_e * sol.mu_tilde
        out.append((bool(proj > snr), bool(2.0 * proj * snr >= abs(inv.beta_0))))
    return out


# --------------------------------------------------------------------------
# non-degeneracy


@dataclass(frozen=True)
class NonDegeneracyReport:
    affine_condition_ok: bool
    variance_ratio_ok: bool
    witnesses: tuple = field(default=())

    @property
    def ok(self) -> bool:
        return self.affine_condition_ok and self.variance_ratio_ok


def _representations(M: np.ndarray, e: int, tol: float, max_subsets: int):
    """Coefficient sets writing ``mu_e`` in terms of the other means.

    With at most ``d_e`` others the minimum-norm coefficients plus the null
    space of the others describe every representation.  With more than
    ``d_e`` others (general position makes every ``d_e``-subset a basis) each
    nonsingular ``d_e``-subset gives one unique coefficient set.
    Yields ``(others, alpha, null_rows)``.
    """
    E, d_e = M.shape
    others = [i for i in range(E) if i != e]
    scale = max(np.abs(M).max(), 1.0)
    if len(others) <= d_e:
        Mo = M[others].T
        alpha = np.linalg.pinv(Mo, rcond=PINV_RCOND) @ M[e]
        if np.linalg.norm(Mo @ alpha - M[e]) > tol * scale * max(1.0, np.linalg.norm(alpha)):
            return
        _, sv, vt = np.linalg.svd(Mo)
        rank = int(np.sum(sv > PINV_RCOND * sv[0])) if sv.size and sv[0] > 0 else 0
        yield others, alpha, vt[rank:]
        return
    for count, sub in enumerate(combinations(others, d_e)):
        if count >= max_subsets:
            return
        Ms = M[list(sub)].T
        sv = np.linalg.svd(Ms, compute_uv=False)
        if sv[-1] <= INDEPENDENCE_TOL * sv[0]:
            continue
        yield list(sub), np.linalg.solve(Ms, M[e]), np.zeros((0, d_e))


def check_nondegeneracy(envset: EnvironmentSet, tol: float = 1e-9, max_subsets: int = 10_000
                        ) -> NonDegeneracyReport:
    """Affine-combination and variance-ratio conditions on the environments.

    A mean that is a linear combination of others violates the affine
    condition when some coefficient set sums to one.  With more than ``d_e``
    other means, coefficient sets are taken over ``d_e``-subsets of them
    (general position); otherwise they are the minimum-norm solution plus the
    null space of the others.  The ratio condition needs two environments
    whose ratio values differ.
    """
    M = envset.means
    var = envset.variances
    witnesses = []
    affine_ok = True
    ratios = {}
    for e in range(envset.n_envs):
        for others, alpha, null in _representations(M, e, tol, max_subsets):
            total = alpha.sum()
            if abs(total - 1.0) <= tol:
                affine_ok = False
                witnesses.append({"env": e, "condition": "affine", "others": others, "alpha": alpha.tolist()})
            else:
                for n in null:
                    if abs(n.sum()) > tol:
                        # move along n until the coefficients sum to one
                        t = (1.0 - total) / n.sum()
                        affine_ok = False
                        witnesses.append({"env": e, "condition": "affine", "others": others,
                                          "alpha": (alpha + t * n).tolist()})
                        break
            for a in [alpha] + [alpha + n for n in null]:
                denom = 1.0 - a.sum()
                if abs(denom) > tol:
                    ratios.setdefault(e, []).append((var[e] - a @ var[others]) / denom)
    if len(ratios) < 2:
        ratio_ok = True
    else:
        allv = np.concatenate([np.asarray(v) for v in ratios.values()])
        spread = allv.max() - allv.min()
        ratio_ok = bool(spread > tol * max(1.0, np.abs(allv).max()))
        if not ratio_ok:
            witnesses.append({"condition": "variance-ratio", "envs": sorted(ratios),
                              "ratio": float(allv.mean())})
    return NonDegeneracyReport(bool(affine_ok), bool(ratio_ok), tuple(witnesses))


# --------------------------------------------------------------------------
# Bayes coefficients and ERM


def bayes_coefficients(A, B, env: EnvironmentParams, inv: InvariantParams) -> tuple[np.ndarray, float]:
    """Optimal logistic classifier on ``Phi = A z_c + B z_e``: ``(2 Sigma^+ mu_bar, beta_0)``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    mu_bar = A @ inv.mu_c + B @ env.mu_e
    cov = inv.sigma_c_sq * A @ A.T + env.sigma_e_sq * B @ B.T
    beta = 2.0 * np.linalg.pinv(cov, rcond=PINV_RCOND, hermitian=True) @ mu_bar
    return beta, inv.beta_0


def _moment_derivs(m, s, beta_0, eta, nodes):
    """Risk and its derivatives in ``(m, s)`` for a Gaussian logit, by quadrature."""
    t, w = gh_rule(nodes)
    out = np.zeros(6)   # L, L_m, L_s, L_mm, L_ms, L_ss
    for y, p in ((1.0, eta), (-1.0, 1.0 - eta)):
        u = y * m + beta_0 + s * t
        sig_neg = expit(-y * u)
        l1 = -y * sig_neg                      # d/du of softplus(-y u)
        l2 = sig_neg * (1.0 - sig_neg)
        out += p * np.array([
            w @ softplus(-y * u),
            y * (w @ l1),
            w @ (l1 * t),
            w @ l2,
            y * (w @ (l2 * t)),
            w @ (l2 * t * t),
        ])
    return out


def pooled_env_risk(beta_e, envset: EnvironmentSet, nodes: int = DEFAULT_NODES, hessian: bool = False):
    """Equal-weight mean of per-env logistic risks for ``beta_c^T z_c + beta_e^T z_e + beta_0``."""
    inv = envset.invariant
    bc = inv.beta_c
    base_m = bc @ inv.mu_c
    base_v = inv.sigma_c_sq * (bc @ bc)
    d = beta_e.size
    val, grad, hess = 0.0, np.zeros(d), np.zeros((d, d))
    for env in envset:
        m = base_m + beta_e @ env.mu_e
        s = np.sqrt(base_v + env.sigma_e_sq * (beta_e @ beta_e))
        L, Lm, Ls, Lmm, Lms, Lss = _moment_derivs(m, s, inv.beta_0, inv.eta, nodes)
        ds = env.sigma_e_sq * beta_e / s
        val += L
        grad += Lm * env.mu_e + Ls * ds
        if hessian:
            d2s = env.sigma_e_sq / s * np.eye(d) - np.outer(ds, ds) / s
            hess += (Lmm * np.outer(env.mu_e, env.mu_e) + Lms * (np.outer(env.mu_e, ds) + np.outer(ds, env.mu_e))
                     + Lss * np.outer(ds, ds) + Ls * d2s)
    E = envset.n_envs
    if hessian:
        return val / E, grad / E, hess / E
    return val / E, grad / E


@dataclass(frozen=True)
class ErmOptConfig:
    max_iter: int = 200
    grad_tol: float = 1e-8
    # large logit scales need more nodes for the optimum to be accurate
    nodes: int = 2 * DEFAULT_NODES
    sigma_sq: float | None = None


@dataclass(frozen=True)
class ErmClassifier:
    beta_e: np.ndarray
    sigma_erm: float
    grad_norm: float
    iterations: int
    converged: bool
    sigma_sq: float

    def __iter__(self):
        return iter((self.beta_e, self.sigma_erm))

    def predictor(self, inv: InvariantParams) -> LinearPredictor:
        d_c, d_e = inv.d_c, self.beta_e.size
        return LinearPredictor(np.eye(d_c + d_e)[:, :d_c], np.eye(d_c + d_e)[:, d_c:],
                               np.concatenate([inv.beta_c, self.beta_e]), inv.beta_0, provenance="erm-pooled")


def default_sigma_sq(envset: EnvironmentSet) -> float:
    """The common training variance, or the largest one when they differ."""
    return float(envset.variances.max())


def sigma_erm(inv: InvariantParams, beta_e, sigma_sq: float) -> float:
    """Logit standard deviation of ``[beta_c, beta_e]`` for isotropic env variance ``sigma_sq``."""
    bc = inv.beta_c
    beta_e = np.asarray(beta_e, dtype=float)
    return float(np.sqrt(inv.sigma_c_sq * (bc @ bc) + sigma_sq * (beta_e @ beta_e)))


def erm_env_classifier(envset: EnvironmentSet, inv: InvariantParams | None = None,
                       opt_config: ErmOptConfig | None = None) -> ErmClassifier:
    """Pooled-risk minimizer over ``beta_e`` with ``beta_c``, ``beta_0`` held fixed.

    Damped Newton with Armijo backtracking on the quadrature objective; the
    problem is convex so this converges to the stated gradient tolerance in a
    handful of steps.
    """
    cfg = opt_config or ErmOptConfig()
    if inv is not None and inv is not envset.invariant:
        envset = EnvironmentSet(inv, envset.envs)
    inv = envset.invariant
    d_e = envset.d_e
    beta = np.mean([2.0 * env.mu_e / env.sigma_e_sq for env in envset], axis=0)
    if inv.sigma_c_sq * (inv.beta_c @ inv.beta_c) == 0 and not np.any(beta):
        beta = 2.0 * envset.envs[0].mu_e / envset.envs[0].sigma_e_sq
    val, grad, hess = pooled_env_risk(beta, envset, cfg.nodes, hessian=True)
    it = 0
    while np.linalg.norm(grad) > cfg.grad_tol and it < cfg.max_iter:
        it += 1
        try:
            step = -np.linalg.solve(hess + 1e-12 * np.eye(d_e), grad)
            if not step @ grad < 0:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = -grad
        t = 1.0
        while True:
            cand = beta + t * step
            cval = pooled_env_risk(cand, envset, cfg.nodes)[0]
            if cval <= val + 1e-4 * t * (step @ grad) or t < 1e-12:
                break
            t *= 0.5
        beta = cand
        val, grad, hess = pooled_env_risk(beta, envset, cfg.nodes, hessian=True)
    gnorm = float(np.linalg.norm(grad))
    sig_sq = default_sigma_sq(envset) if cfg.sigma_sq is None else cfg.sigma_sq
    beta.setflags(write=False)
    return ErmClassifier(beta, sigma_erm(inv, beta, sig_sq), gnorm, it, gnorm <= cfg.grad_tol, sig_sq)


# --------------------------------------------------------------------------
# gamma-closeness


def gamma_closeness(beta, env: EnvironmentParams) -> float:
    """``1 - beta^T mu / (2 mu^T Sigma^{-1} mu)`` for isotropic ``Sigma = sigma_e^2 I``."""
    mu = env.mu_e
    opt = 2.0 * (mu @ mu) / env.sigma_e_sq
    if opt == 0:
        raise ValueError("gamma-closeness is undefined for a zero mean")
    return float(1.0 - np.asarray(beta, dtype=float) @ mu / opt)


@dataclass(frozen=True)
class ClosenessReport:
    gamma: float
    per_env: tuple
    holds: bool
    near_singular: bool


def closeness_report(beta, envset: EnvironmentSet) -> ClosenessReport:
    """Smallest ``gamma`` in ``[0, 1)`` for which ``beta`` is gamma-close on every env."""
    per_env = tuple(gamma_closeness(beta, env) for env in envset)
    gamma = max(0.0, max(per_env))
    return ClosenessReport(gamma, per_env, gamma < 1.0, gamma > 0.99)
