"""Unit-input model fingerprints and divergences between them.

Every client's model is probed with the same constant input (the unit
tensor). The softmax of the resulting logits is a small class-profile
vector that travels the network instead of raw model weights; the
feature-extractor output on the same probe serves as an anchor for the
proximal term in local training. Distances between profiles use a
symmetrized KL divergence.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

EPS = 1e-12


def unit_tensor(input_dim: int, fill: float = 1.0) -> np.ndarray:
    """Constant probe input: a single row of `fill`, shape (1, input_dim)."""
    if input_dim < 1:
        raise ValueError("input_dim must be >= 1")
    if not np.isfinite(fill):
        raise ValueError("fill must be finite")
    return np.full((1, input_dim), float(fill), dtype=np.float64)


@dataclass(eq=False)
class UnitRep:
    """Model fingerprint on the unit tensor.

    ``values`` is the softmax class profile (num_classes,), ``features``
    the feature-extractor output (feature_dim,).
    """

    values: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.values.ndim != 1 or self.features.ndim != 1:
            raise ValueError("representation vectors must be 1-d")

    @property
    def scalar_count(self) -> int:
        """Number of scalars transmitted when both vectors are sent."""
        return self.values.size + self.features.size

    def copy(self) -> "UnitRep":
        return UnitRep(self.values.copy(), self.features.copy())


def compute_representation(model: nn.LayeredModel) -> UnitRep:
    """Probe a model with the unit tensor."""
    probe = unit_tensor(model.input_dim)
    values = nn.softmax(nn.forward(model, probe))[0]
    features = nn.feature_forward(model, probe)[0]
    return UnitRep(values, features)


def _clamp_normalize(p: np.ndarray, eps: float) -> np.ndarray:
    """Floor entries at eps and rescale to sum one."""
    q = np.maximum(np.asarray(p, dtype=np.float64), eps)
    return q / q.sum()


def kl_divergence(p: np.ndarray, q: np.ndarray, eps: float = EPS) -> float:
    """KL(p || q) over clamped, renormalized distributions."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    if p.ndim != 1:
        raise ValueError("distributions must be 1-d")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("probabilities must be non-negative")
    pc = _clamp_normalize(p, eps)
    qc = _clamp_normalize(q, eps)
    return float(np.sum(pc * np.log(pc / qc)))


def symmetric_kl(p: np.ndarray, q: np.ndarray, eps: float = EPS) -> float:
    """Half the KL in each direction; the divergence used between clients."""
    return 0.5 * kl_divergence(p, q, eps) + 0.5 * kl_divergence(q, p, eps)


def js_divergence(p: np.ndarray, q: np.ndarray, eps: float = EPS) -> float:
    """Jensen-Shannon divergence (midpoint mixture), kept for comparison."""
    pc = _clamp_normalize(np.asarray(p, dtype=np.float64), eps)
    qc = _clamp_normalize(np.asarray(q, dtype=np.float64), eps)
    m = 0.5 * (pc + qc)
    return 0.5 * float(np.sum(pc * np.log(pc / m))) + 0.5 * float(
        np.sum(qc * np.log(qc / m))
    )


def pair_divergence(a: UnitRep, b: UnitRep) -> float:
    """Divergence between two class profiles."""
    return symmetric_kl(a.values, b.values)


def divergence_matrix(reps: list[UnitRep]) -> np.ndarray:
    """Symmetric matrix of pairwise profile divergences, zero diagonal."""
    m = len(reps)
    out = np.zeros((m, m), dtype=np.float64)
    for i in range(m):
        for j in range(i + 1, m):
            d = pair_divergence(reps[i], reps[j])
            out[i, j] = d
            out[j, i] = d
    return out
