"""Kernel functions and Gram matrices for the inverter rule families."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

KINDS = ("linear", "polynomial", "gaussian")


@dataclass(frozen=True)
class KernelSpec:
    """``linear``: z'w; ``polynomial``: (z'w + gamma)^beta; ``gaussian``: exp(-|z - w|^2 / gamma)."""

    kind: str = "linear"
    beta: int | None = None
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.kind == "polynomial":
            if not (isinstance(self.beta, (int, np.integer)) and self.beta >= 1):
                raise ValueError("polynomial kernel needs an integer beta >= 1")
            if self.gamma is None or self.gamma < 0:
                raise ValueError("polynomial kernel needs gamma >= 0")
        if self.kind == "gaussian" and not (self.gamma is not None and self.gamma > 0):
            raise ValueError("gaussian kernel needs gamma > 0")

    @classmethod
    def linear(cls) -> "KernelSpec":
        return cls("linear")

    @classmethod
    def polynomial(cls, beta: int, gamma: float) -> "KernelSpec":
        return cls("polynomial", int(beta), float(gamma))

    @classmethod
    def gaussian(cls, gamma: float) -> "KernelSpec":
        return cls("gaussian", None, float(gamma))

    @classmethod
    def parse(cls, text: str) -> "KernelSpec":
        """Parse ``linear``, ``poly:<beta>,<gamma>`` or ``gaussian:<gamma>``."""
        name, _, args = text.strip().partition(":")
        name = name.lower()
        try:
            if name == "linear":
                return cls.linear()
            if name in ("poly", "polynomial"):
                beta, gamma = args.split(",")
                return cls.polynomial(int(beta), float(gamma))
            if name in ("gaussian", "rbf"):
                return cls.gaussian(float(args))
        except ValueError as exc:
            raise ValueError(f"bad kernel spec {text!r}: {exc}") from None
        raise ValueError(f"bad kernel spec {text!r}")

    def with_gamma(self, gamma: float) -> "KernelSpec":
        if self.kind == "linear":
            return self
        return KernelSpec(self.kind, self.beta, float(gamma))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta": self.beta, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(d["kind"], d.get("beta"), d.get("gamma"))

    def __str__(self):
        if self.kind == "linear":
            return "linear"
        if self.kind == "polynomial":
            return f"poly:{self.beta},{self.gamma!r}"
        return f"gaussian:{self.gamma!r}"


def cross_gram(spec: KernelSpec, Z1, Z2) -> np.ndarray:
    """Kernel evaluations between the rows of ``Z1`` and the rows of ``Z2``."""
    Z1 = np.atleast_2d(np.asarray(Z1, dtype=float))
    Z2 = np.atleast_2d(np.asarray(Z2, dtype=float))
    if Z1.shape[1] != Z2.shape[1]:
        raise ValueError(f"feature dimensions differ: {Z1.shape[1]} vs {Z2.shape[1]}")
    if spec.kind == "gaussian":
        return np.exp(-cdist(Z1, Z2, "sqeuclidean") / spec.gamma)
    G = Z1 @ Z2.T
    if spec.kind == "polynomial":
        return (G + spec.gamma) ** spec.beta
    return G


def eval(spec: KernelSpec, z, z_prime) -> float:  # noqa: A001 - mirrors the kernel notation
    z = np.asarray(z, dtype=float).ravel()
    z_prime = np.asarray(z_prime, dtype=float).ravel()
    if z.shape != z_prime.shape:
        raise ValueError(f"dimension mismatch: {z.shape} vs {z_prime.shape}")
    return float(cross_gram(spec, z[None, :], z_prime[None, :])[0, 0])


def gram_matrix(spec: KernelSpec, Z, jitter: float = 0.0) -> np.ndarray:
    """Symmetric T x T Gram matrix with ``jitter`` added to the diagonal."""
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    K = cross_gram(spec, Z, Z)
    K = 0.5 * (K + K.T)
    if jitter:
        K[np.diag_indices_from(K)] += jitter
    return K


def rkhs_norm_sq(spec: KernelSpec, Z, a) -> float:
    a = np.asarray(a, dtype=float)
    return float(a @ gram_matrix(spec, Z) @ a)


def median_sq_distance(Z) -> float:
    """Median pairwise squared distance between rows; 1.0 when undefined or zero."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(Z, "sqeuclidean")))
    return med if med > 0 else 1.0
