"""Gradient-based training of linear predictors under ERM, IRM and REx.

Population mode evaluates every per-environment risk by Gauss-Hermite
quadrature over the 1-D Gaussian logit, so the objective is deterministic and
smooth.  The IRM penalty is the squared gradient of each environment's risk
with respect to the classifier (bias included).  By default that gradient is
written in closed form through Stein's identity; ``penalty_route="autograd"``
obtains it by double backpropagation instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from scipy.optimize import minimize

from .model import EnvironmentSet, sample_environment
from .predictors import LinearPredictor
from .risk import DEFAULT_NODES, gh_rule

OBJECTIVES = ("erm", "irm", "rex")
BLOCKS = ("A", "B", "beta", "beta_0")
INFINITY = "infinity-schedule"


class TrainingDiverged(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class TrainConfig:
    """Training options.

    ``lam`` is a non-negative penalty weight or ``"infinity-schedule"``, which
    raises the weight tenfold every ``schedule_every`` steps up to
    ``schedule_max``.  With ``warmup_steps > 0`` the first steps use weight 1.
    ``fixed_classifier`` holds ``beta`` at its initial value (ones unless warm
    started) while the featurizer and bias train; ``frozen`` lists blocks that
    never move.  ``optimizer="newton"`` runs an exact-Hessian trust-region
    method (population mode only) and treats ``max_steps`` as its iteration cap.
    """

    objective: str = "erm"
    lam: float | str = 0.0
    learning_rate: float = 0.1
    max_steps: int = 200
    batch: str = "population"
    n_per_env: int = 10_000
    seed: int = 0
    init_scale: float = 0.1
    warm_start: LinearPredictor | None = None
    k: int | None = None
    optimizer: str | None = None
    fixed_classifier: bool = False
    frozen: tuple = ()
    warmup_steps: int = 0
    schedule_every: int = 50
    schedule_max: float = 1e8
    nodes: int = DEFAULT_NODES
    divergence_threshold: float = 1e6
    feasibility_tol: float = 1e-4
    grad_tol: float = 0.0
    penalty_route: str = "closed"

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if isinstance(self.lam, str):
            if self.lam != INFINITY:
                raise ValueError(f"lam must be a number or {INFINITY!r}")
        elif not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError("lam must be non-negative")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.batch not in ("population", "sampled"):
            raise ValueError("batch must be 'population' or 'sampled'")
        if self.optimizer not in (None, "gd", "lbfgs", "adam", "newton"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.penalty_route not in ("closed", "autograd"):
            raise ValueError("penalty_route must be 'closed' or 'autograd'")
        bad = set(self.frozen) - set(BLOCKS)
        if bad:
            raise ValueError(f"unknown blocks in frozen: {sorted(bad)}")

    @property
    def resolved_optimizer(self) -> str:
        if self.optimizer is not None:
            return self.optimizer
        return "gd" if self.batch == "population" else "adam"

    def lam_at(self, step: int) -> float:
        if step < self.warmup_steps:
            return 1.0
        if self.lam == INFINITY:
            phase = (step - self.warmup_steps) // self.schedule_every
            return float(min(10.0 ** phase, self.schedule_max))
        return float(self.lam)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "warm_start"}
        out["frozen"] = list(self.frozen)
        out["warm_start"] = None if self.warm_start is None else self.warm_start.to_dict()
        return out


@dataclass
class Trace:
    rows: list = field(default_factory=list)
    infeasible: bool | None = None
    max_penalty: float | None = None

    COLUMNS = ("step", "lam", "objective", "risk", "penalty", "variance", "grad_norm")

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in self.COLUMNS))
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# torch objective


class _EnvTensors:
    def __init__(self, envset: EnvironmentSet):
        inv = envset.invariant
        self.eta = inv.eta
        self.mu_c = torch.tensor(inv.mu_c, dtype=torch.float64)
        self.sigma_c_sq = inv.sigma_c_sq
        self.mu_e = [torch.tensor(env.mu_e, dtype=torch.float64) for env in envset]
        self.sigma_e_sq = [env.sigma_e_sq for env in envset]
        self.mu_matrix = torch.tensor(envset.means, dtype=torch.float64)
        self.var_vector = torch.tensor(envset.variances, dtype=torch.float64)


def population_risks(A, B, beta, beta_0, env_t: _EnvTensors, nodes: int = DEFAULT_NODES):
    """Per-environment logistic risks as a tensor, by Gauss-Hermite quadrature."""
    t_np, w_np = gh_rule(nodes)
    t = torch.tensor(t_np, dtype=torch.float64)
    w = torch.tensor(w_np, dtype=torch.float64)
    a = A.T @ beta
    b = B.T @ beta
    aa = env_t.sigma_c_sq * (a @ a)
    am = a @ env_t.mu_c
    soft = torch.nn.functional.softplus
    risks = []
    for mu_e, var_e in zip(env_t.mu_e, env_t.sigma_e_sq):
        m = am + b @ mu_e
        s = torch.sqrt(aa + var_e * (b @ b))
        pos = w @ soft(-(m + beta_0 + s * t))
        neg = w @ soft(-m + beta_0 + s * t)
        risks.append(env_t.eta * pos + (1.0 - env_t.eta) * neg)
    return torch.stack(risks)


def population_classifier_grads(A, B, beta, beta_0, env_t: _EnvTensors, nodes: int = DEFAULT_NODES):
    """Per-environment risks and their classifier gradients in closed form.

    Given ``y``, the features ``g`` and the logit ``f`` are jointly Gaussian,
    so ``E[h(f) g] = E[h(f)] E[g] + Cov(g, f) E[h(f) t] / s`` with ``t`` the
    standardized logit.  Returns ``(risks, grad_beta (E x k), grad_beta_0 (E,))``.
    """
    t_np, w_np = gh_rule(nodes)
    t = torch.tensor(t_np, dtype=torch.float64)
    w = torch.tensor(w_np, dtype=torch.float64)
    soft = torch.nn.functional.softplus
    mu_E, var_E = env_t.mu_matrix, env_t.var_vector
    Bb = B.T @ beta
    nu = (A @ env_t.mu_c)[None, :] + mu_E @ B.T                      # E x k
    cov_f = (env_t.sigma_c_sq * (A @ (A.T @ beta)))[None, :] + var_E[:, None] * (B @ Bb)[None, :]
    m = nu @ beta
    s_sq = env_t.sigma_c_sq * ((A.T @ beta) @ (A.T @ beta)) + var_E * (Bb @ Bb)
    s = torch.sqrt(torch.clamp(s_sq, min=1e-300))
    risks = 0.0
    g_beta = 0.0
    g_b0 = 0.0
    for y, p in ((1.0, env_t.eta), (-1.0, 1.0 - env_t.eta)):
        f = (y * m + beta_0)[:, None] + s[:, None] * t[None, :]       # E x nodes
        sig = torch.sigmoid(-y * f)
        e_sig, e_sig_t = sig @ w, (sig * t) @ w
        risks = risks + p * (soft(-y * f) @ w)
        g_beta = g_beta - p * y * (y * nu * e_sig[:, None] + cov_f * (e_sig_t / s)[:, None])
        g_b0 = g_b0 - p * y * e_sig
    return risks, g_beta, g_b0


def sampled_risks(A, B, beta, beta_0, data):
    soft = torch.nn.functional.softplus
    risks = []
    for y, z_c, z_e in data:
        logit = (z_c @ A.T + z_e @ B.T) @ beta + beta_0
        risks.append(soft(-y * logit).mean())
    return torch.stack(risks)


def penalties(risks, beta, beta_0, create_graph=True):
    """Squared classifier-gradient norm of each environment's risk."""
    out = []
    for r in risks:
        g_beta, g_b0 = torch.autograd.grad(r, (beta, beta_0), create_graph=create_graph, retain_graph=True)
        out.append(g_beta @ g_beta + g_b0 * g_b0)
    return torch.stack(out)


def objective_terms(params, risk_fn, objective: str, lam: float, need_penalty=True):
    """Return (objective, risks, penalties, variance)."""
    out = risk_fn(*params)
    risks, closed_pens = out if isinstance(out, tuple) else (out, None)
    mean_risk = risks.mean()
    var = ((risks - mean_risk) ** 2).mean()
    uses_penalty = objective == "irm" and lam > 0
    pens = None
    if need_penalty or uses_penalty:
        pens = closed_pens if closed_pens is not None else penalties(
            risks, params[2], params[3], create_graph=uses_penalty)
    if objective == "erm" or lam == 0:
        obj = mean_risk
    elif objective == "irm":
        obj = (risks + lam * pens).mean()
    else:
        obj = mean_risk + lam * var
    return obj, risks, pens, var


# --------------------------------------------------------------------------
# training


def _init_params(envset: EnvironmentSet, config: TrainConfig):
    d_c, d_e = envset.d_c, envset.d_e
    if config.warm_start is not None:
        ws = config.warm_start
        A, B, beta, beta_0 = ws.A.copy(), ws.B.copy(), ws.beta.copy(), ws.beta_0
        if config.fixed_classifier and config.k is not None and config.k != ws.k:
            raise ValueError("warm start dimension disagrees with k")
    else:
        k = config.k if config.k is not None else d_c + d_e
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, 0x1417])))
        s = config.init_scale
        A = rng.uniform(-s, s, size=(k, d_c))
        B = rng.uniform(-s, s, size=(k, d_e))
        beta = np.ones(k) if config.fixed_classifier else rng.uniform(-s, s, size=k)
        beta_0 = 0.0 if config.fixed_classifier else float(rng.uniform(-s, s))
    frozen = set(config.frozen)
    if config.fixed_classifier:
        frozen.add("beta")
    tensors = []
    for name, val in zip(BLOCKS, (A, B, beta, beta_0)):
        tensors.append(torch.tensor(np.asarray(val, dtype=float), dtype=torch.float64, requires_grad=True))
    trainable = [t for name, t in zip(BLOCKS, tensors) if name not in frozen]
    return tensors, trainable


def _sampled_data(envset: EnvironmentSet, config: TrainConfig):
    data = []
    for e in range(envset.n_envs):
        smp = sample_environment(envset, e, config.n_per_env, config.seed)
        data.append(tuple(torch.tensor(a, dtype=torch.float64) for a in (smp.y, smp.z_c, smp.z_e)))
    return data


def _flat_grad(obj, trainable):
    if not trainable:
        return []
    return list(torch.autograd.grad(obj, trainable))


def _record(trace, step, lam, obj, risks, pens, var, gnorm):
    trace.rows.append({
        "step": step, "lam": lam, "objective": float(obj.detach()), "risk": float(risks.detach().mean()),
        "penalty": float(pens.detach().mean()) if pens is not None else float("nan"),
        "variance": float(var.detach()), "grad_norm": float(gnorm),
    })


def _newton(params, trainable, risk_fn, config: TrainConfig, trace: Trace) -> None:
    """Trust-region Newton on the flattened trainable blocks, in place."""
    if not trainable:
        return
    shapes = [p.shape for p in trainable]
    sizes = [p.numel() for p in trainable]
    lam = float(config.lam)
    index = [i for i, p in enumerate(params) if any(p is q for q in trainable)]

    def unflatten(theta):
        out, i = list(params), 0
        for j, shp, n in zip(index, shapes, sizes):
            out[j] = theta[i:i + n].reshape(shp)
            i += n
        return out

    def f(theta):
        return objective_terms(unflatten(theta), risk_fn, config.objective, lam, need_penalty=False)[0]

    def fun(x):
        return float(f(torch.tensor(x, dtype=torch.float64)).detach())

    def jac(x):
        theta = torch.tensor(x, dtype=torch.float64, requires_grad=True)
        return torch.autograd.grad(f(theta), theta)[0].numpy()

    def hess(x):
        return torch.autograd.functional.hessian(f, torch.tensor(x, dtype=torch.float64),
                                                 vectorize=True).numpy()

    def record(x):
        with torch.no_grad():
            _assign(trainable, x, sizes)
        obj, risks, pens, var = objective_terms(params, risk_fn, config.objective, lam)
        g = jac(x)
        _record(trace, len(trace.rows), lam, obj, risks, pens, var, float(np.linalg.norm(g)))
        if not math.isfinite(float(obj.detach())) or float(obj.detach()) > config.divergence_threshold:
            raise TrainingDiverged(f"objective {float(obj.detach()):.3g} at step {len(trace.rows) - 1}", trace)

    x0 = torch.cat([p.detach().reshape(-1) for p in trainable]).numpy()
    record(x0)
    gtol = config.grad_tol if config.grad_tol > 0 else 1e-9
    res = minimize(fun, x0, jac=jac, hess=hess, method="trust-exact", callback=record,
                   options={"maxiter": config.max_steps, "gtol": gtol})
    with torch.no_grad():
        _assign(trainable, res.x, sizes)


def _assign(trainable, x, sizes):
    i = 0
    for p, n in zip(trainable, sizes):
        p.copy_(torch.tensor(x[i:i + n], dtype=torch.float64).reshape(p.shape))
        i += n


def train(envset: EnvironmentSet, config: TrainConfig) -> tuple[LinearPredictor, Trace]:
    """Optimize the configured objective and return the final predictor with its trace."""
    params, trainable = _init_params(envset, config)
    if config.batch == "population":
        env_t = _EnvTensors(envset)

        if config.penalty_route == "closed":
            def risk_fn(A, B, beta, beta_0):
                risks, gb, g0 = population_classifier_grads(A, B, beta, beta_0, env_t, config.nodes)
                return risks, (gb * gb).sum(1) + g0 * g0
        else:
            def risk_fn(A, B, beta, beta_0):
                return population_risks(A, B, beta, beta_0, env_t, config.nodes)
    else:
        data = _sampled_data(envset, config)

        def risk_fn(A, B, beta, beta_0):
            return sampled_risks(A, B, beta, beta_0, data)

    trace = Trace()
    opt_name = config.resolved_optimizer
    if opt_name == "newton":
        if config.batch != "population":
            raise ValueError("the newton optimizer needs population mode")
        if config.lam == INFINITY or config.warmup_steps:
            raise ValueError("the newton optimizer needs a fixed lam")
        _newton(params, trainable, risk_fn, config, trace)
        return _finish(params, trainable, risk_fn, config, trace)
    lr = config.learning_rate
    torch_opt = None
    if opt_name == "adam" and trainable:
        torch_opt = torch.optim.Adam(trainable, lr=lr)
    elif opt_name == "lbfgs" and trainable:
        torch_opt = torch.optim.LBFGS(trainable, lr=1.0, max_iter=20, history_size=50,
                                      line_search_fn="strong_wolfe", tolerance_grad=1e-12,
                                      tolerance_change=1e-15)

    def evaluate(lam):
        obj, risks, pens, var = objective_terms(params, risk_fn, config.objective, lam)
        grads = _flat_grad(obj, trainable)
        gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        return obj, risks, pens, var, grads, gnorm

    step_size = lr
    for step in range(config.max_steps):
        lam = config.lam_at(step)
        obj, risks, pens, var, grads, gnorm = evaluate(lam)
        _record(trace, step, lam, obj, risks, pens, var, gnorm)
        if not math.isfinite(float(obj.detach())) or float(obj.detach()) > config.divergence_threshold:
            raise TrainingDiverged(f"objective {float(obj.detach()):.3g} at step {step}", trace)
        if not trainable or gnorm <= config.grad_tol:
            break
        if opt_name == "gd":
            # Armijo backtracking; try a larger step first next time
            f0 = float(obj.detach())
            old = [p.detach().clone() for p in trainable]
            t = min(step_size * 2.0, 1e6)
            while True:
                with torch.no_grad():
                    for p, p0, g in zip(trainable, old, grads):
                        p.copy_(p0 - t * g)
                f1 = float(objective_terms(params, risk_fn, config.objective, lam, need_penalty=False)[0].detach())
                if f1 <= f0 - 1e-4 * t * gnorm * gnorm or t < 1e-14:
                    break
                t *= 0.5
            if f1 > f0:
                with torch.no_grad():
                    for p, p0 in zip(trainable, old):
                        p.copy_(p0)
            step_size = t
        elif opt_name == "adam":
            torch_opt.zero_grad()
            for p, g in zip(trainable, grads):
                p.grad = g
            torch_opt.step()
        else:
            def closure():
                torch_opt.zero_grad()
                o = objective_terms(params, risk_fn, config.objective, lam)[0]
                o.backward()
                return o
            torch_opt.step(closure)

    return _finish(params, trainable, risk_fn, config, trace)


def _finish(params, trainable, risk_fn, config, trace):
    lam = config.lam_at(config.max_steps)
    obj, risks, pens, var = objective_terms(params, risk_fn, config.objective, lam)
    grads = _flat_grad(obj, trainable)
    gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    _record(trace, len(trace.rows), lam, obj, risks, pens, var, gnorm)
    if not math.isfinite(float(obj.detach())) or float(obj.detach()) > config.divergence_threshold:
        raise TrainingDiverged(f"objective {float(obj.detach()):.3g} at the final step", trace)
    trace.max_penalty = float(pens.detach().max())
    if config.objective == "irm" and (config.lam == INFINITY or float(config.lam) > 0):
        trace.infeasible = trace.max_penalty > config.feasibility_tol
    A, B, beta, beta_0 = (p.detach().numpy().copy() for p in params)
    pred = LinearPredictor(A, B, beta, float(beta_0), provenance=f"trained-{config.objective}")
    return pred, trace


# --------------------------------------------------------------------------
# stationarity


@dataclass(frozen=True)
class StationarityReport:
    """Population gradient norms of an objective at a predictor.

    ``featurizer`` is the gradient in the block acting on ``z_c``,
    ``classifier`` in ``(beta, beta_0)``, ``env_block`` in the block acting on
    ``z_e``.  ``constrained`` is the part of the risk gradient left after
    removing the span of the feasibility-constraint gradients.
    """

    objective: str
    lam: float
    featurizer: float
    classifier: float
    env_block: float
    constrained: float | None


def _as_tensors(pred: LinearPredictor):
    return [torch.tensor(np.asarray(v, dtype=float), dtype=torch.float64, requires_grad=True)
            for v in (pred.A, pred.B, pred.beta, pred.beta_0)]


def objective_gradients(pred: LinearPredictor, envset: EnvironmentSet, objective: str = "irm",
                        lam: float = 1.0, nodes: int = DEFAULT_NODES):
    """Objective value and exact gradients of the quadrature objective, as numpy arrays."""
    params = _as_tensors(pred)
    env_t = _EnvTensors(envset)

    def risk_fn(A, B, beta, beta_0):
        return population_risks(A, B, beta, beta_0, env_t, nodes)

    obj, risks, pens, var = objective_terms(params, risk_fn, objective, lam)
    grads = torch.autograd.grad(obj, params)
    return float(obj.detach()), [g.numpy().copy() for g in grads]


def objective_value(pred: LinearPredictor, envset: EnvironmentSet, objective: str = "irm",
                    lam: float = 1.0, nodes: int = DEFAULT_NODES) -> float:
    return objective_gradients(pred, envset, objective, lam, nodes)[0]


def _constrained_residual(pred, envset, nodes):
    params = _as_tensors(pred)
    env_t = _EnvTensors(envset)
    sizes = [p.numel() for p in params]

    def unflatten(theta):
        out, i = [], 0
        for p, n in zip(params, sizes):
            out.append(theta[i:i + n].reshape(p.shape))
            i += n
        return out

    theta0 = torch.cat([p.detach().reshape(-1) for p in params])

    def constraint(theta):
        A, B, beta, beta_0 = unflatten(theta)
        risks = population_risks(A, B, beta, beta_0, env_t, nodes)
        gs = []
        for r in risks:
            g_beta, g_b0 = torch.autograd.grad(r, (beta, beta_0), create_graph=True)
            gs.append(torch.cat([g_beta, g_b0.reshape(1)]))
        return torch.cat(gs)

    def mean_risk(theta):
        A, B, beta, beta_0 = unflatten(theta)
        return population_risks(A, B, beta, beta_0, env_t, nodes).mean()

    theta = theta0.clone().requires_grad_(True)
    J = torch.autograd.functional.jacobian(constraint, theta).numpy()
    theta = theta0.clone().requires_grad_(True)
    g = torch.autograd.grad(mean_risk(theta), theta)[0].numpy()
    # least-squares multipliers: remove the row space of J from the gradient
    coef, *_ = np.linalg.lstsq(J.T, g, rcond=None)
    return float(np.linalg.norm(g - J.T @ coef))


def stationarity_check(pred: LinearPredictor, envset: EnvironmentSet, objective: str = "irm",
                       lam: float = 1.0, nodes: int = 2 * DEFAULT_NODES, constrained: bool = True
                       ) -> StationarityReport:
    """Gradient norms of ``objective`` at ``pred``, split by parameter block."""
    _, (gA, gB, gbeta, gb0) = objective_gradients(pred, envset, objective, lam, nodes)
    cls = float(np.sqrt(np.sum(gbeta ** 2) + gb0 ** 2))
    resid = _constrained_residual(pred, envset, nodes) if constrained else None
    return StationarityReport(objective, lam, float(np.linalg.norm(gA)), cls, float(np.linalg.norm(gB)), resid)
