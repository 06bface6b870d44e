"""Probability algebra for multiplexed heralded generation and switch routing.

With M independent modes each firing with probability zeta per shot, the
chance that at least one fires is 1 - (1-zeta)^M, and the chance of exactly
N simultaneous excitations is binomial. Finite heralding efficiency eta_H
penalizes an N-photon retrieval by eta_H^N. Comparing against N independent
sources (zeta^N) gives the multiplexing enhancement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ParameterError
from .geometry import Angle2D, phase_matched_angle

# below this mode count direct products are exact and cheap; above it the
# binomial terms under/overflow and everything moves to log space
_LOG_SPACE_THRESHOLD = 50


@dataclass(frozen=True, slots=True)
class SourceSpec:
    """Parameters of one multiplexed source configuration."""

    zeta: float
    modes: int
    eta_h: float = 1.0
    n_targets: int = 1

    def __post_init__(self):
        if not 0.0 <= self.zeta < 1.0:
            raise ParameterError(f"zeta must be in [0, 1), got {self.zeta}")
        if self.modes < 1:
            raise ParameterError(f"mode count must be >= 1, got {self.modes}")
        if not 0.0 <= self.eta_h <= 1.0:
            raise ParameterError(f"eta_H must be in [0, 1], got {self.eta_h}")
        if not 1 <= self.n_targets <= self.modes:
            raise ParameterError(
                f"target photon number must be in [1, modes], got {self.n_targets}")


def p_at_least_one(zeta: float, modes: int) -> float:
    """Probability 1 - (1 - zeta)^M that any mode fires.

    Evaluated as -expm1(M log1p(-zeta)); stays accurate for zeta*M << 1.
    """
    _check(zeta, modes)
    return -math.expm1(modes * math.log1p(-zeta))


def p_exactly_n(zeta: float, modes: int, n: int) -> float:
    """Binomial probability of exactly N excitations across M modes."""
    _check(zeta, modes)
    if not 0 <= n <= modes:
        raise ParameterError(f"N must be in [0, M], got N={n}, M={modes}")
    if zeta == 0.0:
        return 1.0 if n == 0 else 0.0
    if modes <= _LOG_SPACE_THRESHOLD:
        return math.comb(modes, n) * zeta**n * (1.0 - zeta) ** (modes - n)
    return math.exp(log_p_exactly_n(zeta, modes, n))


def log_p_exactly_n(zeta: float, modes: int, n: int) -> float:
    """log of the binomial pmf, usable up to M ~ 1e4 without overflow."""
    _check(zeta, modes)
    if not 0 <= n <= modes:
        raise ParameterError(f"N must be in [0, M], got N={n}, M={modes}")
    if zeta == 0.0:
        return 0.0 if n == 0 else -math.inf
    log_comb = (math.lgamma(modes + 1) - math.lgamma(n + 1)
                - math.lgamma(modes - n + 1))
    return log_comb + n * math.log(zeta) + (modes - n) * math.log1p(-zeta)


def p_retrieve_n(spec: SourceSpec, n: int | None = None) -> float:
    """Probability of heralding and retrieving exactly N photons.

    eta_H^N * C(M, N) zeta^N (1 - zeta)^(M-N); for N = 0 heralding plays
    no role and this is just (1 - zeta)^M.
    """
    if n is None:
        n = spec.n_targets
    if n == 0:
        return p_exactly_n(spec.zeta, spec.modes, 0)
    return spec.eta_h**n * p_exactly_n(spec.zeta, spec.modes, n)


@dataclass(frozen=True, slots=True)
class EnhancementRow:
    n: int
    p_multiplexed: float
    p_independent: float
    ratio: float
    log10_ratio: float


def enhancement_report(spec: SourceSpec) -> list[EnhancementRow]:
    """Multiplexed vs N-independent-sources rates for N = 1 .. N_targets.

    Ratios are formed in log space so that astronomically small
    independent-source rates do not underflow the comparison.
    """
    rows = []
    for n in range(1, spec.n_targets + 1):
        log_p = n * math.log(spec.eta_h) if spec.eta_h > 0 else -math.inf
        log_p += log_p_exactly_n(spec.zeta, spec.modes, n)
        if spec.zeta > 0:
            log_ind = n * math.log(spec.zeta)
        else:
            log_ind = -math.inf
        log_ratio = log_p - log_ind if math.isfinite(log_ind) else math.nan
        ratio = math.exp(log_ratio) if (math.isfinite(log_ratio)
                                        and log_ratio < 700) else math.inf
        rows.append(EnhancementRow(
            n,
            math.exp(log_p) if math.isfinite(log_p) else 0.0,
            math.exp(log_ind) if math.isfinite(log_ind) else 0.0,
            ratio,
            log_ratio / math.log(10) if math.isfinite(log_ratio) else math.nan,
        ))
    return rows


@dataclass(frozen=True)
class RoutingPlan:
    """Assignment of triggered modes to switch output ports."""

    assignments: tuple[tuple[int, Angle2D, Angle2D], ...]  # (port, trigger, output dir)
    unassigned: tuple[Angle2D, ...]


def default_policy(trigger: Angle2D) -> tuple:
    """Sort key: smallest |theta| first, ties broken lexicographically."""
    return (trigger.norm(), trigger.theta_x, trigger.theta_y)


def route(triggers: list[Angle2D], ports: int, policy=default_policy) -> RoutingPlan:
    """Deterministically assign triggered modes to output ports.

    Each trigger's retrieved photon will emerge at the conjugate angle
    -theta, which is what the switch must collect. Triggers beyond the
    port count are listed unassigned, in policy order.
    """
    if ports < 1:
        raise ParameterError(f"ports must be >= 1, got {ports}")
    ordered = sorted(triggers, key=policy)
    assigned = tuple(
        (port, trig, phase_matched_angle(trig))
        for port, trig in enumerate(ordered[:ports])
    )
    return RoutingPlan(assigned, tuple(ordered[ports:]))


def _check(zeta: float, modes: int):
    if not 0.0 <= zeta < 1.0:
        raise ParameterError(f"zeta must be in [0, 1), got {zeta}")
    if modes < 1:
        raise ParameterError(f"mode count must be >= 1, got {modes}")
