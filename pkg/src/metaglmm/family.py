"""Exponential-family outcome models used by the aggregate-data likelihood.

Each family is described by its cumulant ``b``, its dispersion function
``a(phi)`` (always the identity here) and the link between the study mean
and the linear predictor.  Binomial, Poisson and normal outcomes use their
canonical links; gamma outcomes use a log link while the likelihood is still
written in the natural parameter ``-1/mu``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import special


class InvalidParameterError(ValueError):
    """A parameter lies outside the admissible domain of a family."""


class BoundaryMeanError(ValueError):
    """A mean sits on the boundary of its domain, so the link is infinite."""


class Kind(enum.Enum):
    BINOMIAL = "binomial"
    POISSON = "poisson"
    GAMMA = "gamma"
    NORMAL = "normal"


class Link(enum.Enum):
    LOGIT = "logit"
    LOG = "log"
    IDENTITY = "identity"
    NEGATIVE_INVERSE = "negative_inverse"


_DEFAULT_LINK = {
    Kind.BINOMIAL: Link.LOGIT,
    Kind.POISSON: Link.LOG,
    Kind.GAMMA: Link.LOG,
    Kind.NORMAL: Link.IDENTITY,
}


@dataclass(frozen=True)
class FamilySpec:
    """Outcome family together with the link used for the mean model."""

    kind: Kind
    link: Link | None = None

    def __post_init__(self):
        kind = Kind(self.kind)
        link = _DEFAULT_LINK[kind] if self.link is None else Link(self.link)
        if link is not _DEFAULT_LINK[kind]:
            raise ValueError(
                f"{kind.value} family requires the {_DEFAULT_LINK[kind].value} link, "
                f"got {link.value}"
            )
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "link", link)

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def has_dispersion(self) -> bool:
        return self.kind in (Kind.GAMMA, Kind.NORMAL)

    @classmethod
    def from_name(cls, name: str) -> "FamilySpec":
        try:
            return cls(Kind(name.strip().lower()))
        except ValueError:
            choices = ", ".join(k.value for k in Kind)
            raise ValueError(f"unknown family {name!r}; expected one of {choices}") from None


BINOMIAL = FamilySpec(Kind.BINOMIAL)
POISSON = FamilySpec(Kind.POISSON)
GAMMA = FamilySpec(Kind.GAMMA)
NORMAL = FamilySpec(Kind.NORMAL)


def cumulant(spec: FamilySpec, eta, exposure=1.0):
    """Cumulant ``b(eta)`` of the family, scaled by ``exposure``.

    Gamma requires ``eta < 0``; an :class:`InvalidParameterError` is raised
    otherwise.
    """
    eta = np.asarray(eta, dtype=float)
    if spec.kind is Kind.BINOMIAL:
        out = np.logaddexp(0.0, eta)
    elif spec.kind is Kind.POISSON:
        out = np.exp(eta)
    elif spec.kind is Kind.GAMMA:
        if np.any(eta >= 0):
            bad = eta[eta >= 0].flat[0] if eta.ndim else float(eta)
            raise InvalidParameterError(
                f"gamma natural parameter must be negative, got {float(bad)!r}"
            )
        out = -np.log(-eta)
    else:
        out = 0.5 * eta * eta
    out = exposure * out
    return float(out) if out.ndim == 0 else out


def mean_from_natural(spec: FamilySpec, eta):
    """First derivative of the cumulant, i.e. the mean at natural parameter ``eta``."""
    eta = np.asarray(eta, dtype=float)
    if spec.kind is Kind.BINOMIAL:
        out = special.expit(eta)
    elif spec.kind is Kind.POISSON:
        out = np.exp(eta)
    elif spec.kind is Kind.GAMMA:
        out = -1.0 / eta
    else:
        out = eta.copy()
    return float(out) if out.ndim == 0 else out


def variance_function(spec: FamilySpec, mu):
    """Second cumulant derivative expressed in terms of the mean."""
    mu = np.asarray(mu, dtype=float)
    if spec.kind is Kind.BINOMIAL:
        out = mu * (1.0 - mu)
    elif spec.kind is Kind.POISSON:
        out = mu.copy()
    elif spec.kind is Kind.GAMMA:
        out = mu * mu
    else:
        out = np.ones_like(mu)
    return float(out) if out.ndim == 0 else out


def link(spec: FamilySpec, mu):
    """Map a mean to the linear-predictor scale, ``theta = g(mu)``."""
    mu = np.asarray(mu, dtype=float)
    if spec.kind is Kind.BINOMIAL:
        if np.any((mu <= 0) | (mu >= 1)):
            raise BoundaryMeanError(f"binomial mean must lie in (0, 1), got {mu}")
        out = special.logit(mu)
    elif spec.kind in (Kind.POISSON, Kind.GAMMA):
        if np.any(mu <= 0):
            raise BoundaryMeanError(f"{spec.name} mean must be positive, got {mu}")
        out = np.log(mu)
    else:
        out = mu.copy()
    return float(out) if out.ndim == 0 else out


def inverse_link(spec: FamilySpec, theta):
    """Mean implied by the linear predictor, ``mu = g^{-1}(theta)``."""
    theta = np.asarray(theta, dtype=float)
    if spec.kind is Kind.BINOMIAL:
        out = special.expit(theta)
    elif spec.kind in (Kind.POISSON, Kind.GAMMA):
        out = np.exp(theta)
    else:
        out = theta.copy()
    return float(out) if out.ndim == 0 else out


def natural_param_from_theta(spec: FamilySpec, theta):
    """Natural parameter at linear predictor ``theta``.

    Identity for the canonical families.  For gamma with a log link the
    natural parameter is ``-1/mu = -exp(-theta)``.
    """
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise InvalidParameterError(f"linear predictor must be finite, got {theta}")
    out = -np.exp(-theta) if spec.kind is Kind.GAMMA else theta.copy()
    return float(out) if out.ndim == 0 else out


def log_base_measure(spec: FamilySpec, y, phi=1.0):
    """The ``c(y, phi)`` term of a single observation's log density.

    Binomial observations are single Bernoulli trials, so ``c`` is zero.
    """
    y = np.asarray(y, dtype=float)
    if spec.kind is Kind.BINOMIAL:
        out = np.zeros_like(y)
    elif spec.kind is Kind.POISSON:
        out = -special.gammaln(y + 1.0)
    elif spec.kind is Kind.GAMMA:
        shape = 1.0 / phi
        out = (shape - 1.0) * np.log(y) - shape * math.log(phi) - special.gammaln(shape)
    else:
        out = -0.5 * y * y / phi - 0.5 * math.log(2.0 * math.pi * phi)
    return float(out) if out.ndim == 0 else out


def linear_predictor(x, beta, v=0.0):
    """``x' beta + v`` for one covariate vector."""
    out = float(np.dot(np.asarray(x, dtype=float), np.asarray(beta, dtype=float))) + v
    if not math.isfinite(out):
        raise InvalidParameterError("linear predictor is not finite")
    return out
