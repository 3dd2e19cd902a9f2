"""Linear featurizer-plus-classifier over the latent blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _matrix(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a matrix")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LinearPredictor:
    """``Phi = A z_c + B z_e`` followed by ``logit = beta^T Phi + beta_0``.

    ``provenance`` names the construction or trainer that produced it; ``notes``
    carries free-form remarks (e.g. that feasibility is vacuous).
    """

    A: np.ndarray
    B: np.ndarray
    beta: np.ndarray
    beta_0: float = 0.0
    provenance: str = ""
    notes: tuple = field(default=())

    def __post_init__(self):
        A = _matrix(self.A, "A")
        B = _matrix(self.B, "B")
        beta = np.array(self.beta, dtype=float).reshape(-1)
        if A.shape[0] != B.shape[0]:
            raise ValueError(f"A has {A.shape[0]} rows but B has {B.shape[0]}")
        if beta.size != A.shape[0]:
            raise ValueError(f"beta has length {beta.size}, expected {A.shape[0]}")
        if not np.all(np.isfinite(beta)) or not np.isfinite(self.beta_0):
            raise ValueError("classifier must be finite")
        beta.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "beta_0", float(self.beta_0))
        object.__setattr__(self, "notes", tuple(self.notes))

    @property
    def k(self) -> int:
        return self.A.shape[0]

    @property
    def d_c(self) -> int:
        return self.A.shape[1]

    @property
    def d_e(self) -> int:
        return self.B.shape[1]

    @property
    def a(self) -> np.ndarray:
        """Effective weight on ``z_c``: ``A^T beta``."""
        return self.A.T @ self.beta

    @property
    def b(self) -> np.ndarray:
        """Effective weight on ``z_e``: ``B^T beta``."""
        return self.B.T @ self.beta

    @property
    def featurizer(self) -> np.ndarray:
        return np.hstack([self.A, self.B])

    def rank(self, tol: float = 1e-10) -> int:
        s = np.linalg.svd(self.featurizer, compute_uv=False)
        if s.size == 0 or s[0] == 0:
            return 0
        return int(np.sum(s > tol * s[0]))

    def features(self, z_c, z_e) -> np.ndarray:
        return np.atleast_2d(z_c) @ self.A.T + np.atleast_2d(z_e) @ self.B.T

    def logit(self, z_c, z_e) -> np.ndarray:
        return np.atleast_2d(z_c) @ self.a + np.atleast_2d(z_e) @ self.b + self.beta_0

    def predict(self, z_c, z_e) -> np.ndarray:
        # zero logit predicts +1
        return np.where(self.logit(z_c, z_e) >= 0, 1.0, -1.0)

    def logit_moments(self, env, inv) -> tuple[float, float]:
        """``(m, s)``: given ``y`` the logit is ``N(y m + beta_0, s^2)``."""
        a, b = self.a, self.b
        m = float(a @ inv.mu_c + b @ env.mu_e)
        s = float(np.sqrt(inv.sigma_c_sq * (a @ a) + env.sigma_e_sq * (b @ b)))
        return m, s

    def with_classifier(self, beta, beta_0=None, provenance=None) -> "LinearPredictor":
        return LinearPredictor(self.A, self.B, beta, self.beta_0 if beta_0 is None else beta_0,
                               self.provenance if provenance is None else provenance, self.notes)

    def to_dict(self) -> dict:
        return {
            "type": "linear",
            "provenance": self.provenance,
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "beta": self.beta.tolist(),
            "beta_0": self.beta_0,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LinearPredictor":
        return cls(data["A"], data["B"], data["beta"], data.get("beta_0", 0.0), data.get("provenance", ""),
                   tuple(data.get("notes", ())))
