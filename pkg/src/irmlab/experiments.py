"""Batch experiments behind the command-line tool.

Each ``cmd_*`` function takes a plain config dict (defaults filled in by the
matching ``*_config`` helper), writes CSV tables with metadata sidecars and
optional SVG charts into an output directory, and returns a summary dict.
Independent cells run through ``run_cells``, which keeps result order fixed
whatever the number of workers.
"""
from __future__ import annotations

import copy
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy.special import ndtr
from scipy.stats import ortho_group

from . import io
from .constructions import erm_env_classifier, solve_max_projection
from .model import EnvironmentParams, EnvironmentSet, InvariantParams, optimal_invariant_predictor
from .nonlinear import (build_phi_epsilon, build_reversed_test_env, chi2_tail, chi2_tail_mc,
                        erm_piecewise_predictor, evaluate_on_test, match_fractions, p_epsilon,
                        penalty_bound)
from .predictors import LinearPredictor
from .risk import irm_penalty, zero_one_risk_closed
from .trainers import TrainConfig, TrainingDiverged, train


def _rng(*key) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def run_cells(fn, cells, jobs: int = 1) -> list:
    """``[fn(c) for c in cells]``, optionally across processes, in input order."""
    cells = list(cells)
    if jobs <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, cells))


def _merge(defaults: dict, overrides: dict | None) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in (overrides or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


# ==========================================================================
# linear threshold


LINEAR_DEFAULTS = {
    "seed": 0,
    "d_c": 3,
    "d_e": 6,
    "E_values": [1, 2, 3, 4, 5, 6, 7, 8],
    "runs": 5,
    "test_envs": 20,
    "prior": {
        # invariant mean ~ N(0, invariant_scale^2 I); prior mean of mu_e has a
        # fixed norm and a random direction; draws spread mostly orthogonally
        "invariant_scale": 0.35,
        "mean_norm": 4.0,
        "spread_orthogonal": 2.0,
        "spread_along": 0.2,
        "sigma_c_sq": 1.0,
        "sigma_e_sq": 1.0,
        "eta": 0.5,
        "invariant_accuracy": [0.68, 0.76],
        "full_accuracy_min": 0.99,
        "max_tries": 10000,
    },
    "trainer": {
        "lam": 1e6,
        "k": 1,
        "starts": 2,
        "init_scale": 0.1,
        "max_steps": 1000,
        "optimizer": "newton",
    },
    "svg": True,
}


def linear_config(overrides: dict | None = None) -> dict:
    return _merge(LINEAR_DEFAULTS, overrides)


class LinearPrior:
    """Invariant parameters plus a Gaussian prior over environment means."""

    def __init__(self, inv: InvariantParams, mean: np.ndarray, cov: np.ndarray, sigma_e_sq: float,
                 tries: int, full_accuracy: float):
        self.inv = inv
        self.mean = mean
        self.cov = cov
        self.chol = np.linalg.cholesky(cov)
        self.sigma_e_sq = sigma_e_sq
        self.tries = tries
        self.full_accuracy = full_accuracy

    @property
    def invariant_accuracy(self) -> float:
        pred = optimal_invariant_predictor(self.inv, self.mean.size)
        env = EnvironmentParams(np.zeros(self.mean.size), self.sigma_e_sq)
        return float(1.0 - zero_one_risk_closed(pred, env, self.inv))

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mean + rng.standard_normal((n, self.mean.size)) @ self.chol.T

    def envset(self, means: np.ndarray) -> EnvironmentSet:
        return EnvironmentSet.from_arrays(self.inv, means, self.sigma_e_sq)

    def to_dict(self) -> dict:
        return {"invariant": self.inv.to_dict(), "mean": self.mean.tolist(), "cov": self.cov.tolist(),
                "sigma_e_sq": self.sigma_e_sq, "tries": self.tries,
                "invariant_accuracy": self.invariant_accuracy, "full_accuracy": self.full_accuracy}


def _full_feature_accuracy(inv, means, sigma_e_sq):
    # Bayes accuracy with every feature, balanced classes
    snr_sq = inv.snr ** 2 + np.einsum("ij,ij->i", means, means) / sigma_e_sq
    return float(np.mean(ndtr(np.sqrt(snr_sq))))


def draw_linear_prior(cfg: dict) -> LinearPrior:
    """Rejection-sample invariant parameters and an environment-mean prior.

    Accept once the invariant predictor's accuracy lies in the configured
    interval and the all-feature Bayes accuracy, averaged over environments
    drawn from the prior, reaches the configured minimum.
    """
    p = cfg["prior"]
    d_c, d_e = cfg["d_c"], cfg["d_e"]
    rng = _rng(cfg["seed"], 0x5EED, 1)
    lo, hi = p["invariant_accuracy"]
    for tries in range(1, p["max_tries"] + 1):
        mu_c = p["invariant_scale"] * rng.standard_normal(d_c)
        inv = InvariantParams(p["eta"], mu_c, p["sigma_c_sq"])
        u = rng.standard_normal(d_e)
        u /= np.linalg.norm(u)
        mean = p["mean_norm"] * u
        cov = (p["spread_orthogonal"] ** 2 * (np.eye(d_e) - np.outer(u, u))
               + p["spread_along"] ** 2 * np.outer(u, u))
        prior = LinearPrior(inv, mean, cov, p["sigma_e_sq"], tries, 0.0)
        inv_acc = prior.invariant_accuracy
        if not lo <= inv_acc <= hi:
            continue
        full = _full_feature_accuracy(inv, prior.draw(rng, 2000), p["sigma_e_sq"])
        if full >= p["full_accuracy_min"]:
            prior.full_accuracy = full
            return prior
    raise RuntimeError(f"no prior accepted after {p['max_tries']} tries")


def _accuracy(pred: LinearPredictor, inv: InvariantParams, means: np.ndarray, sigma_e_sq: float) -> float:
    return float(np.mean([1.0 - zero_one_risk_closed(pred, EnvironmentParams(mu, sigma_e_sq), inv)
                          for mu in means]))


def fit_linear(envset: EnvironmentSet, objective: str, tcfg: dict, seed: int):
    """Best of ``starts`` trust-region runs, ranked by the final objective value."""
    best = None
    lam = float(tcfg["lam"]) if objective == "irm" else 0.0
    starts = tcfg["starts"] if objective == "irm" else 1
    for s in range(starts):
        cfg = TrainConfig(objective=objective, lam=lam, k=tcfg["k"], fixed_classifier=True,
                          optimizer=tcfg["optimizer"], max_steps=tcfg["max_steps"],
                          init_scale=tcfg["init_scale"], seed=seed * 1000 + s)
        pred, trace = train(envset, cfg)
        val = trace.rows[-1]["objective"]
        if best is None or val < best[2]:
            best = (pred, trace, val)
    return best


def _linear_cell(args):
    cfg, prior, run, E = args
    means_all = prior.draw(_rng(cfg["seed"], 0xE5, run), max(cfg["E_values"]))
    test = prior.draw(_rng(cfg["seed"], 0x7E57, run), cfg["test_envs"])
    envset = prior.envset(means_all[:E])
    rows = []
    for objective in ("irm", "erm"):
        try:
            pred, trace, _ = fit_linear(envset, objective, cfg["trainer"], seed=cfg["seed"] * 100 + run)
            status = "ok"
            if objective == "irm" and trace.infeasible:
                status = "infeasible"
            for shift, sign in (("none", 1.0), ("reversed", -1.0)):
                rows.append((run, E, objective, shift, _accuracy(pred, prior.inv, sign * test, prior.sigma_e_sq),
                             status))
        except TrainingDiverged as exc:
            for shift in ("none", "reversed"):
                rows.append((run, E, objective, shift, float("nan"), f"diverged: {exc}"))
    inv_pred = optimal_invariant_predictor(prior.inv, cfg["d_e"])
    for shift, sign in (("none", 1.0), ("reversed", -1.0)):
        rows.append((run, E, "invariant", shift, _accuracy(inv_pred, prior.inv, sign * test, prior.sigma_e_sq),
                     "ok"))
    return rows


def summarize_linear(rows) -> dict:
    """Mean accuracy per (objective, shift, E) over runs."""
    out: dict = {}
    for run, E, obj, shift, acc, status in rows:
        out.setdefault((obj, shift, E), []).append(acc)
    return {k: float(np.nanmean(v)) for k, v in out.items()}


def cmd_linear_threshold(config: dict | None = None, out: str | Path = "results", jobs: int = 1) -> dict:
    cfg = linear_config(config)
    out = Path(out)
    prior = draw_linear_prior(cfg)
    cells = [(cfg, prior, run, E) for run in range(cfg["runs"]) for E in cfg["E_values"]]
    rows = [r for cell in run_cells(_linear_cell, cells, jobs) for r in cell]
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    io.write_table(out / "linear_threshold.csv", ("run", "E", "objective", "shift", "accuracy", "status"),
                   rows, cfg, cfg["seed"], extra={"prior": prior.to_dict()})
    summary = summarize_linear(rows)
    mean_rows = [(obj, shift, E, summary[(obj, shift, E)])
                 for obj in ("erm", "invariant", "irm") for shift in ("none", "reversed") for E in cfg["E_values"]]
    io.write_table(out / "linear_threshold_mean.csv", ("objective", "shift", "E", "mean_accuracy"),
                   mean_rows, cfg, cfg["seed"])
    if cfg["svg"]:
        Es = cfg["E_values"]
        series = {f"{obj} {shift}": (Es, [summary[(obj, shift, E)] for E in Es])
                  for obj in ("irm", "erm", "invariant") for shift in ("none", "reversed")}
        io.write_svg(out / "linear_threshold.svg",
                     io.svg_line_chart(series, "IRM vs ERM accuracy", "training environments E", "accuracy"))
    io.write_json(out / "linear_threshold.config.json", cfg)
    return {"summary": {f"{k[0]}/{k[1]}/{k[2]}": v for k, v in summary.items()}, "prior": prior.to_dict(),
            "rows": rows}


# ==========================================================================
# mu-tilde sweep


MU_TILDE_DEFAULTS = {
    "seed": 0,
    "d_c": 25,
    "ratios": [2, 4, 8],
    "sigma_sq": [0.5, 1.0, 2.0],
    "runs": 20,
    "E_step": 1,
    "weighting": "variance",
    "base_scale": 1.0,
    "draw_scale": 2.0,
    "max_resample": 100,
    "svg": True,
}


def mu_tilde_config(overrides: dict | None = None) -> dict:
    return _merge(MU_TILDE_DEFAULTS, overrides)


def _independent_prefixes(M: np.ndarray) -> bool:
    # every leading block of rows must be well conditioned, the full block
    # is the worst case because singular values interlace
    s = np.linalg.svd(M, compute_uv=False)
    return s[-1] > 1e-8 * s[0]


def mu_tilde_curve(means: np.ndarray, sigma_sq: float, E_values, weighting: str = "variance") -> np.ndarray:
    """``sigma mu_tilde`` (variance weighting) or ``mu_tilde`` (std weighting) for each prefix size."""
    inv = InvariantParams(0.5, np.zeros(1), 1.0)
    out = []
    for E in E_values:
        envset = EnvironmentSet.from_arrays(inv, means[:E], sigma_sq)
        sol = solve_max_projection(envset, weighting)
        out.append(np.sqrt(sigma_sq) * sol.mu_tilde if weighting == "variance" else sol.mu_tilde)
    return np.array(out)


def _mu_tilde_cell(args):
    cfg, ratio, sigma_sq = args
    d_c = cfg["d_c"]
    d_e = ratio * d_c
    E_values = list(range(1, d_e + 1, cfg["E_step"]))
    curves, resampled = [], 0
    for run in range(cfg["runs"]):
        rng = _rng(cfg["seed"], 0x317, ratio, run)
        for attempt in range(cfg["max_resample"] + 1):
            b = cfg["base_scale"] * rng.standard_normal(d_e)
            M = b + cfg["draw_scale"] * rng.standard_normal((d_e, d_e))
            if _independent_prefixes(M):
                break
            resampled += 1
        else:
            raise RuntimeError("could not draw linearly independent means")
        curves.append(mu_tilde_curve(M, sigma_sq, E_values, cfg["weighting"]))
    curves = np.array(curves)
    return ratio, sigma_sq, E_values, curves, resampled


def crossover(E_values, mean_curve, level: float) -> int | None:
    """First ``E`` at which the mean curve falls below ``level``."""
    for E, v in zip(E_values, mean_curve):
        if v < level:
            return int(E)
    return None


def cmd_mu_tilde_sweep(config: dict | None = None, out: str | Path = "results", jobs: int = 1) -> dict:
    cfg = mu_tilde_config(config)
    out = Path(out)
    cells = [(cfg, r, s) for r in cfg["ratios"] for s in cfg["sigma_sq"]]
    results = run_cells(_mu_tilde_cell, cells, jobs)
    rows, cross_rows, summary = [], [], {}
    ref_dc = math.sqrt(cfg["d_c"])
    for ratio, sigma_sq, E_values, curves, resampled in results:
        d_e = ratio * cfg["d_c"]
        mean = curves.mean(0)
        lo, hi = np.percentile(curves, [2.5, 97.5], axis=0)
        ref = np.sqrt(d_e - np.array(E_values, dtype=float))
        for i, E in enumerate(E_values):
            rows.append((ratio, d_e, sigma_sq, E, mean[i], lo[i], hi[i], ref[i], ref_dc,
                         bool(lo[i] <= ref[i] <= hi[i])))
        detected = crossover(E_values, mean, ref_dc)
        predicted = d_e - sigma_sq * cfg["d_c"]
        rel = (abs(detected - predicted) / predicted) if (detected is not None and predicted > 0) else None
        cross_rows.append((ratio, d_e, sigma_sq, detected, predicted, rel, resampled))
        summary[(ratio, sigma_sq)] = {
            "E": E_values, "mean": mean, "lo": lo, "hi": hi, "ref": ref, "crossover": detected,
            "predicted": predicted, "relative_error": rel, "resampled": resampled,
            "inside_fraction": float(np.mean((lo <= ref) & (ref <= hi))),
        }
    io.write_table(out / "mu_tilde.csv", ("ratio", "d_e", "sigma_sq", "E", "mean", "lo95", "hi95",
                                           "sqrt_de_minus_E", "sqrt_dc", "ref_inside_band"),
                   rows, cfg, cfg["seed"])
    io.write_table(out / "mu_tilde_crossover.csv", ("ratio", "d_e", "sigma_sq", "crossover_E", "predicted",
                                                     "relative_error", "resampled"),
                   cross_rows, cfg, cfg["seed"])
    if cfg["svg"]:
        for s in cfg["sigma_sq"]:
            series, bands = {}, {}
            for r in cfg["ratios"]:
                res = summary[(r, s)]
                name = f"d_e/d_c={r}"
                series[name] = (res["E"], res["mean"])
                bands[name] = (res["E"], res["lo"], res["hi"])
                series[f"sqrt(d_e-E), ratio {r}"] = (res["E"], res["ref"])
            E_max = max(summary[(r, s)]["E"][-1] for r in cfg["ratios"])
            series["sqrt(d_c)"] = ([1, E_max], [ref_dc, ref_dc])
            io.write_svg(out / f"mu_tilde_sigma{s:g}.svg",
                         io.svg_line_chart(series, f"projection magnitude, sigma_e^2={s:g}", "E",
                                           "sigma_e mu_tilde", bands))
    io.write_json(out / "mu_tilde.config.json", cfg)
    return {"cells": summary}


# ==========================================================================
# nonlinear failure


NONLINEAR_DEFAULTS = {
    "seed": 0,
    "d_c": 3,
    "E": 3,
    "epsilons": [1.5, 2.0, 3.0],
    "d_e_values": [8, 16, 32],
    # training means: orthogonal directions with norm mean_ratio * sigma_e * sqrt(d_e)
    "mean_ratio": 5.0,
    "sigma_e_sq": 1.0,
    "invariant_scale": 0.5,
    "eta": 0.5,
    "n": 1_000_000,
    "c": 1.0,
    "svg": False,
}


def nonlinear_config(overrides: dict | None = None) -> dict:
    return _merge(NONLINEAR_DEFAULTS, overrides)


def nonlinear_envset(cfg: dict, d_e: int, cell: int) -> EnvironmentSet:
    rng = _rng(cfg["seed"], 0xF00, d_e, cell)
    inv = InvariantParams(cfg["eta"], cfg["invariant_scale"] * rng.standard_normal(cfg["d_c"]), 1.0)
    U = ortho_group.rvs(d_e, random_state=rng)[:cfg["E"]]
    scale = cfg["mean_ratio"] * math.sqrt(cfg["sigma_e_sq"] * d_e)
    return EnvironmentSet.from_arrays(inv, scale * U, cfg["sigma_e_sq"])


def _nonlinear_cell(args):
    cfg, ie, eps, idx, d_e = args
    n, seed = cfg["n"], cfg["seed"] * 1000 + 10 * idx + ie
    envset = nonlinear_envset(cfg, d_e, idx)
    inv = envset.invariant
    erm = erm_env_classifier(envset)
    phi = build_phi_epsilon(envset, eps)
    pred = erm_piecewise_predictor(phi, inv, erm)
    bound = penalty_bound(envset, eps)
    p_eps = p_epsilon(eps, d_e)
    pen_rows, frac_rows = [], []
    for e, env in enumerate(envset):
        val, se = irm_penalty(pred, env, inv, n, seed=seed, stream=e)
        pen_rows.append((eps, d_e, e, p_eps, bound.per_env[e], val, se, bool(val - 3 * se <= bound.per_env[e])))
        inv_frac, _ = match_fractions(phi, env, n, seed + 7, inv, stream=e)
        frac_rows.append((eps, d_e, e, inv_frac.value, inv_frac.std_error, 1 - p_eps,
                          bool(inv_frac.value + 3 * inv_frac.std_error >= 1 - p_eps)))
    tail = chi2_tail_mc(eps, d_e, n, seed + 11)
    tail_row = (eps, d_e, p_eps, chi2_tail(eps, d_e), tail.value, tail.std_error,
                bool(tail.value - 3 * tail.std_error <= p_eps))
    spec = build_reversed_test_env(envset, inv=inv, beta_erm=erm.beta_e, c=cfg["c"], epsilon=eps)
    inv_pred = optimal_invariant_predictor(inv, d_e)
    inv_train = float(np.mean([zero_one_risk_closed(inv_pred, env, inv) for env in envset]))
    inv_test = zero_one_risk_closed(inv_pred, spec.env, inv)
    if spec.q is not None:
        rep = evaluate_on_test(pred, spec, inv, n, seed + 13)
        entry = rep.entries[0]
        frac = rep.extra["erm_branch_fraction"]
        frac_se = rep.extra["erm_branch_se"]
        lb = spec.risk_lower_bound
        test_row = (eps, d_e, spec.delta, spec.k, spec.q, spec.alpha_scale, spec.gamma, frac, frac_se,
                    bool(frac + 3 * frac_se >= 1 - spec.q), entry.zero_one_risk, entry.zero_one_se,
                    rep.extra["erm_closed_zero_one"], lb, bool(entry.zero_one_risk + 3 * entry.zero_one_se >= lb),
                    inv_train, inv_test)
    else:
        test_row = (eps, d_e, spec.delta, spec.k, None, spec.alpha_scale, spec.gamma, None, None, None,
                    None, None, None, None, None, inv_train, inv_test)
    return pen_rows, frac_rows, tail_row, test_row, erm


def cmd_nonlinear_failure(config: dict | None = None, out: str | Path = "results", jobs: int = 1) -> dict:
    cfg = nonlinear_config(config)
    out = Path(out)
    cells = [(cfg, ie, eps, idx, d_e) for ie, eps in enumerate(cfg["epsilons"])
             for idx, d_e in enumerate(cfg["d_e_values"])]
    results = run_cells(_nonlinear_cell, cells, jobs)
    pen = [r for res in results for r in res[0]]
    frac = [r for res in results for r in res[1]]
    tails = [res[2] for res in results]
    tests = [res[3] for res in results]
    io.write_table(out / "nonlinear_penalty_bound.csv",
                   ("epsilon", "d_e", "env", "p_eps", "bound", "measured", "std_err", "pass"), pen, cfg, cfg["seed"])
    io.write_table(out / "nonlinear_invariant_fraction.csv",
                   ("epsilon", "d_e", "env", "fraction", "std_err", "required", "pass"), frac, cfg, cfg["seed"])
    io.write_table(out / "nonlinear_chi2_tail.csv",
                   ("epsilon", "d_e", "p_eps", "exact", "measured", "std_err", "pass"), tails, cfg, cfg["seed"])
    io.write_table(out / "nonlinear_test_risk.csv",
                   ("epsilon", "d_e", "delta", "k", "q", "alpha_scale", "gamma", "erm_fraction", "erm_fraction_se",
                    "fraction_pass", "zero_one_risk", "risk_se", "erm_closed_risk", "risk_lower_bound", "risk_pass",
                    "invariant_risk_train", "invariant_risk_test"), tests, cfg, cfg["seed"])
    io.write_json(out / "nonlinear.config.json", cfg)
    return {"penalty": pen, "fractions": frac, "tails": tails, "tests": tests,
            "erm": [res[4] for res in results]}


# ==========================================================================
# sampling


SAMPLE_DEFAULTS = {
    "seed": 0,
    "n": 1000,
    "eta": 0.5,
    "mu_c": [0.5, 0.0, 0.0],
    "sigma_c_sq": 1.0,
    "envs": [{"mu_e": [1.0, 0.0, 0.0, 0.0, 0.0, 0.0], "sigma_e_sq": 1.0}],
    "observation": {"kind": "identity", "seed": 0},
}


def sample_config(overrides: dict | None = None) -> dict:
    return _merge(SAMPLE_DEFAULTS, overrides)


def cmd_sample(config: dict | None = None, out: str | Path = "results", jobs: int = 1) -> dict:
    """Draw observations from configured environments into ``samples_env{e}.csv``."""
    from .model import ObservationMap, sample_environment

    cfg = sample_config(config)
    out = Path(out)
    inv = InvariantParams(cfg["eta"], cfg["mu_c"], cfg["sigma_c_sq"])
    envset = EnvironmentSet(inv, tuple(EnvironmentParams(e["mu_e"], e["sigma_e_sq"]) for e in cfg["envs"]))
    obs = cfg["observation"]
    if obs["kind"] == "identity":
        obs_map = ObservationMap.identity(inv.d_c, envset.d_e)
    else:
        obs_map = ObservationMap.random(obs["kind"], inv.d_c, envset.d_e, obs.get("seed", 0))
    files = []
    for e in range(envset.n_envs):
        smp = sample_environment(envset, e, cfg["n"], cfg["seed"], obs_map)
        cols = ["y"] + [f"z_c{i}" for i in range(inv.d_c)] + [f"z_e{i}" for i in range(envset.d_e)] \
            + [f"x{i}" for i in range(smp.x.shape[1])]
        rows = np.column_stack([smp.y, smp.z_c, smp.z_e, smp.x])
        path = io.write_table(out / f"samples_env{e}.csv", cols,
                              ([int(r[0])] + list(r[1:]) for r in rows), cfg, cfg["seed"])
        files.append(str(path))
    io.write_json(out / "sample.config.json", cfg)
    return {"files": files}
