"""A piecewise featurizer with a near-zero IRM penalty that fails under shift.

Inside balls around the training means it behaves like the invariant
predictor; elsewhere it uses ERM's environmental coefficients.  A reversed
test environment lands outside every ball, where ERM's features point the
wrong way.
"""
import numpy as np

from irmlab import nonlinear as nl
from irmlab.constructions import erm_env_classifier
from irmlab.experiments import nonlinear_config, nonlinear_envset
from irmlab.model import optimal_invariant_predictor
from irmlab.risk import irm_penalty, zero_one_risk_closed

cfg = nonlinear_config()
es = nonlinear_envset(cfg, 16, 0)
inv = es.invariant
eps = 2.0

erm = erm_env_classifier(es)
phi = nl.build_phi_epsilon(es, eps)
pred = nl.erm_piecewise_predictor(phi, inv, erm)
bound = nl.penalty_bound(es, eps)

for e, env in enumerate(es):
    val, se = irm_penalty(pred, env, inv, 200_000, seed=1, stream=e)
    frac, _ = nl.match_fractions(phi, env, 200_000, seed=2, inv=inv, stream=e)
    print(f"train env {e}: penalty {val:+.1e} (se {se:.1e}, bound {bound.per_env[e]:.2e}), "
          f"invariant branch {frac.value:.4f} (>= {1 - nl.p_epsilon(eps, 16):.4f})")

spec = nl.build_reversed_test_env(es, inv=inv, beta_erm=erm.beta_e, epsilon=eps)
rep = nl.evaluate_on_test(pred, spec, inv, n=200_000, seed=3)
entry = rep.entries[0]
inv_risk = zero_one_risk_closed(optimal_invariant_predictor(inv, 16), spec.env, inv)
print(f"reversed env: delta={spec.delta:.2f}, q={spec.q:.1e}, ERM branch {rep.extra['erm_branch_fraction']:.4f}")
print(f"0-1 risk {entry.zero_one_risk:.4f} (lower bound {spec.risk_lower_bound:.4f}); invariant predictor {inv_risk:.4f}")
