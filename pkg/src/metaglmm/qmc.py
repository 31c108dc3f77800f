"""Quasi-Monte Carlo integration of the random-intercept likelihood.

The random effect is integrated against a single set of standard-normal
nodes ``z_b = Phi^{-1}(u_b)`` built from a one-dimensional Sobol sequence.
Nodes are scaled by ``tau`` at evaluation time, so the same node set serves
every study and every value of ``tau2`` seen during optimisation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .family import FamilySpec, Kind

_BITS = 32
DEFAULT_NODES = 2048


class EvaluationError(FloatingPointError):
    """The integrand is not finite at any node."""


def sobol_sequence(count: int, start: int = 0) -> np.ndarray:
    """Points ``start, ..., start+count-1`` of the unscrambled 1-D Sobol sequence.

    In one dimension every direction number is ``2**-j`` and the sequence is
    generated in Gray-code order, so index 0 is the origin and indices 1..4
    are 0.5, 0.75, 0.25, 0.375.
    """
    return _sobol_ints(count, start) / float(1 << _BITS)


def _sobol_ints(count: int, start: int) -> np.ndarray:
    idx = np.arange(start, start + count, dtype=np.uint64)
    gray = idx ^ (idx >> np.uint64(1))
    # with v_j = 2^(BITS-j), the point is the bit-reversal of the Gray code
    out = np.zeros(count, dtype=np.uint64)
    for j in range(_BITS):
        bit = (gray >> np.uint64(j)) & np.uint64(1)
        out |= bit << np.uint64(_BITS - 1 - j)
    return out


@dataclass(frozen=True, eq=False)
class NodeSet:
    u: np.ndarray
    z: np.ndarray
    seed: int | None = None

    @property
    def B(self) -> int:
        return self.u.shape[0]


def sobol_nodes(B: int = DEFAULT_NODES, seed: int | None = None) -> NodeSet:
    """Standard-normal integration nodes from the first ``B`` Sobol points.

    With ``seed`` set, the points get a random digital shift (XOR with a
    seeded 32-bit mask).  All points are then shifted by ``1/(2B)`` modulo 1,
    which for power-of-two ``B`` turns the unscrambled net into the midpoint
    grid and keeps every point strictly inside (0, 1).
    """
    if B < 2:
        raise ValueError(f"need at least 2 QMC nodes, got {B}")
    ints = _sobol_ints(B, 0)
    if seed is not None:
        mask = np.random.default_rng(seed).integers(0, 1 << _BITS, dtype=np.uint64)
        ints = ints ^ mask
    u = np.mod(ints / float(1 << _BITS) + 0.5 / B, 1.0)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    z = special.ndtri(u)
    u.setflags(write=False)
    z.setflags(write=False)
    return NodeSet(u, z, seed)


def star_discrepancy(points) -> float:
    """Exact star discrepancy of a 1-D point set in [0, 1)."""
    x = np.sort(np.asarray(points, dtype=float))
    n = x.size
    i = np.arange(1, n + 1)
    return float(np.max(np.maximum(i / n - x, x - (i - 1) / n)))


def record_weight(family: FamilySpec, n, person_time, phi) -> float:
    """Multiplier ``n / a(phi)`` in front of the per-record exponent.

    Poisson rate records use the total person-time instead of ``n``.
    """
    if family.kind is Kind.POISSON:
        return float(person_time)
    return float(n) / float(phi if phi is not None else 1.0)


def exponent(kind: Kind, theta, ybar, weight):
    """``weight * (ybar * eta - b(eta))`` with ``eta`` the natural parameter at ``theta``.

    Broadcasts over ``theta``.  Gamma is written through ``theta = log(mu)``:
    ``eta = -exp(-theta)`` and ``b(eta) = theta``.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        if kind is Kind.BINOMIAL:
            core = ybar * theta - np.logaddexp(0.0, theta)
        elif kind is Kind.POISSON:
            core = ybar * theta - np.exp(theta)
        elif kind is Kind.GAMMA:
            core = -ybar * np.exp(-theta) - theta
        else:
            core = ybar * theta - 0.5 * theta * theta
        return weight * core


def log_mean_exp(a, axis=-1):
    """``log(mean(exp(a)))`` along ``axis`` with the max factored out."""
    a = np.asarray(a, dtype=float)
    finite = np.isfinite(a)
    m = np.max(np.where(finite, a, -np.inf), axis=axis, keepdims=True)
    bad = ~np.isfinite(m)
    m = np.where(bad, 0.0, m)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.sum(np.where(finite, np.exp(a - m), 0.0), axis=axis, keepdims=True)
        out = m + np.log(s) - math.log(a.shape[axis])
    out = np.where(bad, -np.inf, out)
    return np.squeeze(out, axis=axis)


def marginal_loglik_study(record, family: FamilySpec, beta, tau2: float, nodes: NodeSet) -> float:
    """QMC log marginal likelihood of one record, up to a parameter-free constant."""
    if tau2 < 0:
        raise ValueError(f"tau2 must be non-negative, got {tau2}")
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (len(record.x),):
        raise ValueError(f"beta has length {beta.size}, record has {len(record.x)} covariates")
    theta = float(np.dot(record.x, beta)) + math.sqrt(tau2) * nodes.z
    w = record_weight(family, record.n, record.person_time, record.phi_hat)
    e = exponent(family.kind, theta, record.ybar, w)
    value = float(log_mean_exp(e))
    if not math.isfinite(value):
        raise EvaluationError(
            f"non-finite likelihood for record {record.record_id} at beta={beta.tolist()}, tau2={tau2}"
        )
    return value
