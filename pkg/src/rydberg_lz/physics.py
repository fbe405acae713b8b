"""Landau-Zener pair-transition probabilities in a frozen, uniform gas.

Units at the interface: distances in µm, densities in cm⁻³, slew rates in
V/cm/µs. Internally everything reduces to the dimensionless ratio
(r₀/a_η)⁶ with a_η the Wigner-Seitz radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import adaptive_quad, k_complement

__all__ = [
    "CM3_TO_UM3",
    "MAGIC_ANGLE",
    "CrossingChannel",
    "ChannelSet",
    "default_channel_set",
    "single_channel_set",
    "SweepSpec",
    "GasDensity",
    "R0_MARKER_UM",
    "F_PRIME_REF",
    "r0",
    "r0_from_marker",
    "wigner_seitz_radius",
    "p_lz_single",
    "p_lz_aggregate",
    "erlang_nn_pdf",
    "erlang_nn_cdf",
    "transition_argument",
    "expected_transition",
    "expected_transition_direct",
    "np_count",
    "PairPhysics",
]

# 1 cm⁻³ expressed in µm⁻³.
CM3_TO_UM3 = 1e-12
MAGIC_ANGLE = math.acos(1.0 / math.sqrt(3.0))

# Spatial scale marked on the (0,0) polar plot at F' = 1 V/cm/µs, n = 48.
R0_MARKER_UM = 13.5
F_PRIME_REF = 1.0


# ---------------------------------------------------------------------------
# Angular factors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CrossingChannel:
    """One avoided crossing, labelled by its (m, m') sublevel pair.

    ``f_cubed`` maps the polar angle of the interatomic axis (rad) to the
    angular factor f(θ)³ of the dipole-dipole coupling.
    """

    label: str
    f_cubed: Callable[[np.ndarray], np.ndarray]

    def f_sixth(self, theta) -> np.ndarray:
        fc = self.f_cubed(np.asarray(theta, dtype=float))
        return fc * fc


def _f00(theta):
    return np.cos(theta) ** 2 - 1.0 / 3.0


def _f01(theta):
    return np.sin(theta) * np.cos(theta) / math.sqrt(2.0)


def _f1m1(theta):
    return -0.5 * (np.cos(theta) ** 2 - 1.0 / 3.0)


def _f11(theta):
    return 0.5 * np.sin(theta) ** 2


@dataclass(frozen=True)
class ChannelSet:
    channels: tuple[CrossingChannel, ...]
    # Constant value of Σ f⁶ when it does not depend on θ, else None.
    isotropic_sum: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.channels:
            raise ValueError("a channel set needs at least one channel")
        theta = np.linspace(0.0, math.pi, 201)
        s = self.sum_f6(theta)
        iso = float(s[0]) if np.max(np.abs(s - s[0])) <= 1e-13 * max(abs(s[0]), 1.0) else None
        object.__setattr__(self, "isotropic_sum", iso)

    def sum_f6(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        total = np.zeros_like(theta)
        for ch in self.channels:
            total = total + ch.f_sixth(theta)
        return total

    def __len__(self) -> int:
        return len(self.channels)


def default_channel_set() -> ChannelSet:
    """The nine ns0+ns0 → (n-1)p m + np m' crossings.

    Σ f⁶ = 2/3 for every θ, so the aggregate probability is isotropic.
    """
    chans = [CrossingChannel("0,0", _f00)]
    chans += [CrossingChannel(lbl, _f01) for lbl in ("0,+1", "0,-1", "+1,0", "-1,0")]
    chans += [CrossingChannel(lbl, _f1m1) for lbl in ("+1,-1", "-1,+1")]
    chans += [CrossingChannel(lbl, _f11) for lbl in ("+1,+1", "-1,-1")]
    return ChannelSet(tuple(chans))


def single_channel_set(label: str = "0,0") -> ChannelSet:
    by_label = {ch.label: ch for ch in default_channel_set().channels}
    try:
        return ChannelSet((by_label[label],))
    except KeyError:
        raise ValueError(f"unknown channel {label!r}; known: {sorted(by_label)}") from None


# ---------------------------------------------------------------------------
# Sweep and density
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    """Field slew rate F' with the r₀ ∝ F'^(-1/6) reference point.

    ``f_prime`` may be an array; every function taking a sweep broadcasts
    over it.
    """

    f_prime: float | np.ndarray
    r0_ref: float = R0_MARKER_UM
    f_prime_ref: float = F_PRIME_REF

    def __post_init__(self):
        fp = np.asarray(self.f_prime, dtype=float)
        if np.any(~np.isfinite(fp)) or np.any(fp <= 0):
            raise ValueError("slew rate f_prime must be finite and > 0")
        if not (self.r0_ref > 0 and self.f_prime_ref > 0):
            raise ValueError("r0_ref and f_prime_ref must be > 0")

    def with_f_prime(self, f_prime) -> "SweepSpec":
        return SweepSpec(f_prime, self.r0_ref, self.f_prime_ref)


def r0_from_marker(marker_um: float = R0_MARKER_UM, meaning: str = "f0_contour") -> float:
    """Reference radius r₀(F'_ref) implied by a marked contour radius.

    ``"f0_contour"``: the marker is r₀·f(0) of the (0,0) channel, with
    f(0) = (2/3)^(1/3). ``"r0"``: the marker is r₀ itself.
    """
    if meaning == "f0_contour":
        return marker_um / (2.0 / 3.0) ** (1.0 / 3.0)
    if meaning == "r0":
        return float(marker_um)
    raise ValueError(f"unknown marker meaning {meaning!r}")


def r0(sweep: SweepSpec):
    """r₀(F') in µm."""
    fp = np.asarray(sweep.f_prime, dtype=float)
    out = sweep.r0_ref * (sweep.f_prime_ref / fp) ** (1.0 / 6.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GasDensity:
    eta: float  # cm⁻³

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("density must be >= 0")

    @property
    def wigner_seitz_radius(self) -> float:
        return wigner_seitz_radius(self.eta)


def _eta_um(eta) -> np.ndarray:
    if isinstance(eta, GasDensity):
        eta = eta.eta
    eta = np.asarray(eta, dtype=float)
    if np.any(np.isnan(eta)) or np.any(eta < 0):
        raise ValueError("density must be >= 0")
    return eta * CM3_TO_UM3


def wigner_seitz_radius(eta):
    """a_η in µm, from (4π/3) a_η³ = 1/η."""
    e = _eta_um(eta)
    with np.errstate(divide="ignore"):
        out = np.cbrt(3.0 / (4.0 * math.pi * e))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Single-pair probabilities
# ---------------------------------------------------------------------------

def _check_r(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if np.any(np.isnan(r)) or np.any(r < 0):
        raise ValueError("interatomic distance must be >= 0")
    return r


def _lz_from_exponent(scale6, r) -> np.ndarray:
    # 1 - exp(-scale6 / r^6) with the r -> 0 and scale6 -> 0 limits made explicit.
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        x = scale6 / r ** 6
        p = -np.expm1(-x)
    p = np.where(scale6 == 0, 0.0, np.where(r == 0, 1.0, p))
    return p


def p_lz_single(sweep: SweepSpec, r, theta, channel: CrossingChannel):
    """Adiabatic probability 1 - exp[-(r / (r₀ f(θ)))^-6] for one crossing."""
    r = _check_r(r)
    rr = np.asarray(r0(sweep), dtype=float)
    p = _lz_from_exponent(rr ** 6 * channel.f_sixth(theta), r)
    return float(p) if p.ndim == 0 else p


def p_lz_aggregate(sweep: SweepSpec, r, theta, channels: ChannelSet | None = None):
    """Adiabatic probability through all crossings of ``channels`` in turn.

    The product of diabatic survival factors gives
    1 - exp[-(r/r₀)^-6 Σ f_i(θ)⁶].
    """
    channels = default_channel_set() if channels is None else channels
    r = _check_r(r)
    rr = np.asarray(r0(sweep), dtype=float)
    p = _lz_from_exponent(rr ** 6 * channels.sum_f6(theta), r)
    return float(p) if p.ndim == 0 else p


# ---------------------------------------------------------------------------
# Nearest-neighbour statistics
# ---------------------------------------------------------------------------

def erlang_nn_pdf(eta, r):
    """Nearest-neighbour distance density 4πη r² exp(-(4π/3)η r³), in µm⁻¹."""
    e = _eta_um(eta)
    if np.any(e <= 0):
        raise ValueError("density must be > 0")
    r = _check_r(r)
    out = 4.0 * math.pi * e * r * r * np.exp(-(4.0 * math.pi / 3.0) * e * r ** 3)
    return float(out) if out.ndim == 0 else out


def erlang_nn_cdf(eta, r):
    e = _eta_um(eta)
    if np.any(e <= 0):
        raise ValueError("density must be > 0")
    r = _check_r(r)
    out = -np.expm1(-(4.0 * math.pi / 3.0) * e * r ** 3)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Ensemble average
# ---------------------------------------------------------------------------

def transition_argument(eta, sweep: SweepSpec):
    """(r₀/a_η)⁶ = r₀⁶ ((4π/3) η)², zero for η = 0."""
    e = _eta_um(eta)
    rr = np.asarray(r0(sweep), dtype=float)
    out = rr ** 6 * ((4.0 * math.pi / 3.0) * e) ** 2
    return float(out) if np.ndim(out) == 0 else out


def expected_transition(eta, sweep: SweepSpec, channels: ChannelSet | None = None,
                        *, rtol: float = 1e-10):
    """Ensemble-averaged pair transition probability ⟨P⟩ at density η.

    For a θ-independent channel sum S this is 1 - K(S (r₀/a_η)⁶); otherwise
    ½∫ sinθ [1 - K((r₀/a_η)⁶ Σf⁶(θ))] dθ by adaptive quadrature. Broadcasts
    over η and ``sweep.f_prime``.
    """
    channels = default_channel_set() if channels is None else channels
    x = np.asarray(transition_argument(eta, sweep), dtype=float)
    if channels.isotropic_sum is not None:
        out = np.asarray(k_complement(channels.isotropic_sum * x, rtol=rtol))
    else:
        flat = x.ravel()
        vals = np.empty_like(flat)
        for i, xi in enumerate(flat):
            if xi == 0.0:
                vals[i] = 0.0
                continue
            res = adaptive_quad(
                lambda th, xi=xi: 0.5 * np.sin(th) * k_complement(xi * channels.sum_f6(th), rtol=rtol * 0.1),
                0.0, math.pi, rtol=rtol, points=[MAGIC_ANGLE, math.pi / 2, math.pi - MAGIC_ANGLE])
            vals[i] = res.value
        out = vals.reshape(x.shape)
    return float(out) if out.ndim == 0 else out


def expected_transition_direct(eta: float, sweep: SweepSpec, channels: ChannelSet | None = None,
                               *, rtol: float = 1e-11) -> float:
    """⟨P⟩ by nested adaptive quadrature over (r, θ) of the Erlang density
    times the aggregate probability, without the K(w) reduction.

    Scalar only; meant as an independent check of :func:`expected_transition`.
    """
    channels = default_channel_set() if channels is None else channels
    eta = float(eta.eta if isinstance(eta, GasDensity) else eta)
    if eta == 0.0:
        return 0.0
    fp = float(np.asarray(sweep.f_prime))
    sw = sweep.with_f_prime(fp)
    a = wigner_seitz_radius(eta)
    r_max = a * 41.5 ** (1.0 / 3.0)  # Erlang tail exp(-x³) < 1e-18
    rr = r0(sw)

    def radial(theta: float) -> float:
        s6 = float(channels.sum_f6(theta))
        if s6 == 0.0:
            return 0.0
        soft = rr * s6 ** (1.0 / 6.0)
        pts = [p for p in (0.5 * soft, soft, 2.0 * soft, a) if 0 < p < r_max]
        res = adaptive_quad(lambda r: erlang_nn_pdf(eta, r) * p_lz_aggregate(sw, r, theta, channels),
                            0.0, r_max, rtol=rtol * 0.1, points=pts)
        return res.value

    res = adaptive_quad(
        lambda th: np.array([0.5 * math.sin(t) * radial(t) for t in th]),
        0.0, math.pi, rtol=rtol, points=[MAGIC_ANGLE, math.pi / 2, math.pi - MAGIC_ANGLE])
    return res.value


def np_count(eta, volume_cm3: float, sweep: SweepSpec, channels: ChannelSet | None = None):
    """Expected number of np atoms ½ η V ⟨P⟩."""
    if not volume_cm3 > 0:
        raise ValueError("volume must be > 0")
    e = np.asarray(eta.eta if isinstance(eta, GasDensity) else eta, dtype=float)
    out = 0.5 * e * volume_cm3 * np.asarray(expected_transition(e, sweep, channels))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PairPhysics:
    """r₀ reference point and crossing set shared by every consumer of ⟨P⟩."""

    r0_ref: float = field(default_factory=r0_from_marker)
    f_prime_ref: float = F_PRIME_REF
    channels: ChannelSet = field(default_factory=default_channel_set)

    def sweep(self, f_prime) -> SweepSpec:
        return SweepSpec(f_prime, self.r0_ref, self.f_prime_ref)

    def r0(self, f_prime):
        return r0(self.sweep(f_prime))

    def expected_transition(self, eta, f_prime, *, rtol: float = 1e-10):
        return expected_transition(eta, self.sweep(f_prime), self.channels, rtol=rtol)
