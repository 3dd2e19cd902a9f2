"""Gaussian latent-variable model: parameters, observation maps and sampling.

A label ``y`` in {+1, -1} is drawn with ``P(y = +1) = eta``.  Given ``y`` the
invariant latents are ``z_c ~ N(y mu_c, sigma_c^2 I)`` and the environmental
latents are ``z_e ~ N(y mu_e, sigma_e^2 I)``; the observation is
``x = f(z_c, z_e)`` for an injective ``f``.  Only ``(mu_e, sigma_e^2)`` change
between environments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .predictors import LinearPredictor

#: rows drawn per RNG block; a block's stream depends only on (seed, stream, block)
BLOCK_SIZE = 1 << 16

#: linear observation maps with a larger 2-norm condition number are rejected
MAX_CONDITION = 1e10


def _frozen_vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


def _positive(value, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return value


@dataclass(frozen=True)
class InvariantParams:
    """Environment-independent parameters ``(eta, mu_c, sigma_c^2)``."""

    eta: float
    mu_c: np.ndarray
    sigma_c_sq: float

    def __post_init__(self):
        eta = float(self.eta)
        if not 0.0 < eta < 1.0:
            raise ValueError(f"eta must lie in (0, 1), got {eta!r}")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "mu_c", _frozen_vector(self.mu_c, "mu_c"))
        object.__setattr__(self, "sigma_c_sq", _positive(self.sigma_c_sq, "sigma_c_sq"))

    @property
    def d_c(self) -> int:
        return self.mu_c.size

    @property
    def sigma_c(self) -> float:
        return float(np.sqrt(self.sigma_c_sq))

    @property
    def beta_c(self) -> np.ndarray:
        return 2.0 * self.mu_c / self.sigma_c_sq

    @property
    def beta_0(self) -> float:
        return float(np.log(self.eta / (1.0 - self.eta)))

    @property
    def snr(self) -> float:
        """Signal-to-noise ratio ``||mu_c|| / sigma_c`` of the invariant block."""
        return float(np.linalg.norm(self.mu_c) / self.sigma_c)

    def to_dict(self) -> dict:
        return {"eta": self.eta, "mu_c": self.mu_c.tolist(), "sigma_c_sq": self.sigma_c_sq}


@dataclass(frozen=True)
class EnvironmentParams:
    """Per-environment mean and isotropic variance of ``z_e``."""

    mu_e: np.ndarray
    sigma_e_sq: float

    def __post_init__(self):
        object.__setattr__(self, "mu_e", _frozen_vector(self.mu_e, "mu_e"))
        object.__setattr__(self, "sigma_e_sq", _positive(self.sigma_e_sq, "sigma_e_sq"))

    @property
    def d_e(self) -> int:
        return self.mu_e.size

    @property
    def sigma_e(self) -> float:
        return float(np.sqrt(self.sigma_e_sq))

    def negated(self) -> "EnvironmentParams":
        return EnvironmentParams(-self.mu_e, self.sigma_e_sq)

    def to_dict(self) -> dict:
        return {"mu_e": self.mu_e.tolist(), "sigma_e_sq": self.sigma_e_sq}


@dataclass(frozen=True)
class EnvironmentSet:
    """The shared invariant parameters plus an ordered list of environments."""

    invariant: InvariantParams
    envs: tuple

    def __post_init__(self):
        envs = tuple(self.envs)
        if not envs:
            raise ValueError("an environment set needs at least one environment")
        d_e = envs[0].d_e
        if any(env.d_e != d_e for env in envs):
            raise ValueError("all environments must share d_e")
        object.__setattr__(self, "envs", envs)

    @classmethod
    def from_arrays(cls, invariant: InvariantParams, means, variances) -> "EnvironmentSet":
        means = np.atleast_2d(np.asarray(means, dtype=float))
        variances = np.broadcast_to(np.asarray(variances, dtype=float), (means.shape[0],))
        envs = tuple(EnvironmentParams(m, v) for m, v in zip(means, variances))
        return cls(invariant, envs)

    def __len__(self) -> int:
        return len(self.envs)

    def __iter__(self) -> Iterator[EnvironmentParams]:
        return iter(self.envs)

    def __getitem__(self, index: int) -> EnvironmentParams:
        return self.envs[index]

    @property
    def n_envs(self) -> int:
        return len(self.envs)

    @property
    def d_c(self) -> int:
        return self.invariant.d_c

    @property
    def d_e(self) -> int:
        return self.envs[0].d_e

    @property
    def means(self) -> np.ndarray:
        """Environment means stacked as an ``E x d_e`` matrix."""
        return np.stack([env.mu_e for env in self.envs])

    @property
    def variances(self) -> np.ndarray:
        return np.array([env.sigma_e_sq for env in self.envs])

    @property
    def mean_sq_norm_avg(self) -> float:
        """Average squared norm of the environmental means."""
        return float(np.mean([env.mu_e @ env.mu_e for env in self.envs]))

    def subset(self, indices: Sequence[int]) -> "EnvironmentSet":
        return EnvironmentSet(self.invariant, tuple(self.envs[i] for i in indices))

    def to_dict(self) -> dict:
        out = self.invariant.to_dict()
        out["envs"] = [env.to_dict() for env in self.envs]
        return out


# --------------------------------------------------------------------------
# observation maps


def cubic(t):
    return t + t ** 3


def cubic_inverse(x):
    """Real root of ``t + t^3 = x``, elementwise.

    Cardano's formula with the cancelling term rewritten, then two Newton
    steps.
    """
    x = np.asarray(x, dtype=float)
    half = 0.5 * np.abs(x)
    root = np.sqrt(half * half + 1.0 / 27.0)
    big = np.cbrt(half + root)
    # half - root suffers cancellation for large |x|
    small = np.cbrt(-(1.0 / 27.0) / (half + root))
    t = np.sign(x) * (big + small)
    for _ in range(2):
        t = t - (t + t ** 3 - x) / (1.0 + 3.0 * t * t)
    return t


@dataclass(frozen=True)
class ObservationMap:
    """Injective map from latents ``[z_c, z_e]`` to observations.

    ``identity``: ``x = z``.  ``linear``: ``x = M z``.  ``nonlinear``:
    ``x = g(M z)`` with ``g`` an elementwise strictly increasing function
    (``t + t^3`` unless another pair is supplied).
    """

    kind: str
    d_c: int
    d_e: int
    matrix: np.ndarray | None = None
    elementwise: Callable | None = field(default=None, compare=False)
    elementwise_inverse: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("identity", "linear", "nonlinear"):
            raise ValueError(f"unknown observation map kind {self.kind!r}")
        d = self.d_c + self.d_e
        if self.kind == "identity":
            object.__setattr__(self, "matrix", None)
        else:
            m = np.eye(d) if self.matrix is None else np.array(self.matrix, dtype=float)
            if m.shape != (d, d):
                raise ValueError(f"matrix must be {d}x{d}, got {m.shape}")
            if not np.all(np.isfinite(m)):
                raise ValueError("matrix must be finite")
            cond = np.linalg.cond(m)
            if not cond < MAX_CONDITION:
                raise ValueError(f"observation matrix is singular or ill-conditioned (cond={cond:.3g})")
            m.setflags(write=False)
            object.__setattr__(self, "matrix", m)
            inv = np.linalg.inv(m)
            inv.setflags(write=False)
            object.__setattr__(self, "_inverse", inv)
        if self.kind == "nonlinear":
            if (self.elementwise is None) != (self.elementwise_inverse is None):
                raise ValueError("supply both elementwise and elementwise_inverse, or neither")
            if self.elementwise is None:
                object.__setattr__(self, "elementwise", cubic)
                object.__setattr__(self, "elementwise_inverse", cubic_inverse)

    @classmethod
    def identity(cls, d_c: int, d_e: int) -> "ObservationMap":
        return cls("identity", d_c, d_e)

    @classmethod
    def random(cls, kind: str, d_c: int, d_e: int, seed: int = 0) -> "ObservationMap":
        """A random well-conditioned map: orthogonal times a mild diagonal scaling."""
        if kind == "identity":
            return cls.identity(d_c, d_e)
        d = d_c + d_e
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0B5]))
        q, r = np.linalg.qr(rng.normal(size=(d, d)))
        q = q * np.sign(np.diag(r))
        scale = rng.uniform(0.5, 2.0, size=d)
        return cls(kind, d_c, d_e, q * scale)

    @property
    def dim(self) -> int:
        return self.d_c + self.d_e

    def forward(self, z_c, z_e) -> np.ndarray:
        z = np.concatenate([np.atleast_2d(z_c), np.atleast_2d(z_e)], axis=-1)
        if self.kind == "identity":
            return z.copy()
        x = z @ self.matrix.T
        if self.kind == "nonlinear":
            x = self.elementwise(x)
        return x

    def inverse(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "identity":
            z = x
        else:
            if self.kind == "nonlinear":
                x = self.elementwise_inverse(x)
            z = x @ self._inverse.T
        return z[:, : self.d_c], z[:, self.d_c:]

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "d_c": self.d_c, "d_e": self.d_e}
        if self.matrix is not None:
            out["matrix"] = self.matrix.tolist()
        return out


def invert_observation(obs_map: ObservationMap, x) -> tuple[np.ndarray, np.ndarray]:
    """Recover ``(z_c, z_e)`` from observations."""
    return obs_map.inverse(x)


# --------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class LatentSample:
    y: int
    z_c: np.ndarray
    z_e: np.ndarray


@dataclass(frozen=True)
class Samples:
    """A batch of draws: labels, latents and observations as arrays."""

    y: np.ndarray
    z_c: np.ndarray
    z_e: np.ndarray
    x: np.ndarray

    def __len__(self) -> int:
        return self.y.size

    def __getitem__(self, i: int) -> tuple[LatentSample, np.ndarray]:
        return LatentSample(int(self.y[i]), self.z_c[i], self.z_e[i]), self.x[i]

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def block_rng(seed: int, stream: int, block: int) -> np.random.Generator:
    """Counter-based generator for one block of one stream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, block])))


def _draw_block(rng, n, inv: InvariantParams, env: EnvironmentParams):
    y = np.where(rng.random(n) < inv.eta, 1.0, -1.0)
    z_c = y[:, None] * inv.mu_c + inv.sigma_c * rng.standard_normal((n, inv.d_c))
    z_e = y[:, None] * env.mu_e + env.sigma_e * rng.standard_normal((n, env.d_e))
    return y, z_c, z_e


def iter_latent_blocks(inv: InvariantParams, env: EnvironmentParams, n: int, seed: int,
                       stream: int = 0, block_size: int = BLOCK_SIZE):
    """Yield ``(y, z_c, z_e)`` blocks totalling ``n`` rows.

    Row ``i`` of the stream is the same whatever block iteration consumes it,
    so sharded Monte Carlo gives results independent of worker count.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    n_blocks = -(-n // block_size)
    for b in range(n_blocks):
        m = min(block_size, n - b * block_size)
        # draw the full block then truncate so the last block's rows match longer runs
        y, z_c, z_e = _draw_block(block_rng(seed, stream, b), block_size, inv, env)
        yield y[:m], z_c[:m], z_e[:m]


def sample_latents(inv: InvariantParams, env: EnvironmentParams, n: int, seed: int,
                   obs_map: ObservationMap | None = None, stream: int = 0) -> Samples:
    parts = list(iter_latent_blocks(inv, env, n, seed, stream))
    y = np.concatenate([p[0] for p in parts])
    z_c = np.concatenate([p[1] for p in parts])
    z_e = np.concatenate([p[2] for p in parts])
    if obs_map is None:
        obs_map = ObservationMap.identity(inv.d_c, env.d_e)
    return Samples(y, z_c, z_e, obs_map.forward(z_c, z_e))


def sample_environment(envset: EnvironmentSet, env_index: int, n: int, seed: int,
                       obs_map: ObservationMap | None = None) -> Samples:
    """Draw ``n`` samples from training environment ``env_index``."""
    if not 0 <= env_index < envset.n_envs:
        raise IndexError(f"env_index {env_index} out of range for {envset.n_envs} environments")
    return sample_latents(envset.invariant, envset.envs[env_index], n, seed, obs_map, stream=env_index)


def optimal_invariant_predictor(inv: InvariantParams, d_e: int) -> LinearPredictor:
    """Featurizer keeping exactly ``z_c`` with the Bayes classifier on it."""
    return LinearPredictor(
        A=np.eye(inv.d_c),
        B=np.zeros((inv.d_c, d_e)),
        beta=inv.beta_c,
        beta_0=inv.beta_0,
        provenance="optimal-invariant",
    )
