"""Feasible predictors that use environmental features.

With fewer training environments than environmental dimensions, a featurizer
that projects z_e onto one direction keeps a single optimal classifier across
environments (so the IRM penalty is zero) and still beats the invariant
predictor on every training environment.
"""
import numpy as np

from irmlab import checks
from irmlab.constructions import (bayes_coefficients, build_environmental_predictor,
                                  build_feasible_noninvariant_featurizer, solve_max_projection)
from irmlab.model import optimal_invariant_predictor
from irmlab.risk import irm_penalty_population, zero_one_risk_closed

rng = np.random.default_rng(0)
es = checks.random_envset(rng, d_c=3, d_e=6, E=3)
inv = es.invariant

opt = optimal_invariant_predictor(inv, es.d_e)
cons = build_feasible_noninvariant_featurizer(es)
env_only = build_environmental_predictor(es)
sol = solve_max_projection(es)

print(f"mu_tilde = {sol.mu_tilde:.4f}, rank of featurizer = {cons.rank()}")
print("env   invariant  feasible  env-only   penalty(feasible)")
for e, env in enumerate(es):
    print(f"{e:3d}   {zero_one_risk_closed(opt, env, inv):.4f}     "
          f"{zero_one_risk_closed(cons, env, inv):.4f}    {zero_one_risk_closed(env_only, env, inv):.4f}     "
          f"{irm_penalty_population(cons, env, inv):.1e}")

# the per-environment Bayes classifier on the constructed features is the same
for env in es:
    beta, b0 = bayes_coefficients(cons.A, cons.B, env, inv)
    print("per-env classifier:", np.round(beta, 6), round(b0, 6))
