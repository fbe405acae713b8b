"""Shot-to-shot fluctuations of the conversion function.

Scatter of the np-gate signal at fixed total signal is mapped onto the rms
of the two gate conversion factors g_np and g_R through the implicit
relation φ(S^np, S^R, g_np, g_R) = 0, and the resulting signal-to-noise
points are fitted with the Polya law

    g/δg = α S / sqrt(β_eff S² + S),   β_eff = β + α²Γ².

Only the combination β_eff is identifiable, so nothing here reports β or Γ
on their own.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .calibration import NVS, ConversionModel
from .dataset import ShotData
from .numerics import least_squares
from .physics import PairPhysics

__all__ = [
    "REFERENCE_ALPHA",
    "REFERENCE_BETA_EFF",
    "NoiseModel",
    "SignalBin",
    "PhiPartials",
    "NoiseFitResult",
    "polya_snr",
    "bin_by_total",
    "group_bins",
    "phi",
    "phi_partials",
    "delta_g",
    "fit_polya",
    "iterative_fit",
]

REFERENCE_ALPHA = 6.4       # (nV·s)^-1/2
REFERENCE_BETA_EFF = 0.072  # (nV·s)^-1


@dataclass(frozen=True)
class NoiseModel:
    alpha: float     # (nV·s)^-1/2
    beta_eff: float  # (nV·s)^-1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not self.beta_eff >= 0:
            raise ValueError("beta_eff must be >= 0")

    @property
    def gamma_max(self) -> float:
        """Upper bound on the relative volume fluctuation, sqrt(β_eff)/α."""
        return math.sqrt(self.beta_eff) / self.alpha

    def relative_variance(self, s):
        """(δg/g)² = (β_eff + 1/S) / α² for a mean signal S in nV·s."""
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore"):
            return (self.beta_eff + 1.0 / s) / self.alpha ** 2

    def to_dict(self) -> dict:
        return {"alpha_per_sqrt_nVs": self.alpha, "beta_eff_per_nVs": self.beta_eff,
                "gamma_max": self.gamma_max}


def _snr(alpha, beta_eff, s):
    return alpha * s / np.sqrt(beta_eff * s * s + s)


def polya_snr(noise: NoiseModel, s):
    """Signal-to-noise g/δg at mean signal ``s`` (nV·s)."""
    s = np.asarray(s, dtype=float)
    if np.any(~(s > 0)):
        raise ValueError("signal must be > 0")
    out = _snr(noise.alpha, noise.beta_eff, s)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Binning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SignalBin:
    f_prime: float
    s_total_mean: float
    s_total_std: float
    s_np_mean: float
    s_np_std: float
    count: int

    @property
    def s_r_mean(self) -> float:
        return self.s_total_mean - self.s_np_mean


def bin_by_total(data: ShotData, n_bins: int) -> list[SignalBin]:
    """Equal-population bins along S^T with per-bin means and sample stds.

    Bins with fewer than two shots cannot carry a std and are dropped with a
    warning. Shots with different slew rates are not separated here; see
    :func:`iterative_fit` for the per-F' grouping.
    """
    n_bins = int(n_bins)
    if n_bins < 2:
        raise ValueError("need at least two bins")
    if n_bins > len(data) / 2:
        raise ValueError(f"{n_bins} bins for {len(data)} shots leaves fewer than 2 shots per bin")
    s_t = data.s_total
    order = np.argsort(s_t, kind="stable")
    bins = []
    dropped = 0
    for idx in np.array_split(order, n_bins):
        if idx.size < 2:
            dropped += 1
            continue
        bins.append(SignalBin(
            f_prime=float(np.mean(data.f_prime[idx])),
            s_total_mean=float(np.mean(s_t[idx])),
            s_total_std=float(np.std(s_t[idx], ddof=1)),
            s_np_mean=float(np.mean(data.s_np[idx])),
            s_np_std=float(np.std(data.s_np[idx], ddof=1)),
            count=int(idx.size),
        ))
    if dropped:
        warnings.warn(f"dropped {dropped} bins with fewer than 2 shots", RuntimeWarning, stacklevel=2)
    return bins


# ---------------------------------------------------------------------------
# Implicit relation and its differentials
# ---------------------------------------------------------------------------

def phi(s_np, s_r, g_np, g_r, f_prime, physics: PairPhysics | None = None):
    """S^np - ½ (g_R S^R + g_np S^np)/g_np · ⟨P⟩ at density g_R S^R + g_np S^np.

    Signals in nV·s, conversion factors in cm⁻³/(V·s); result in nV·s.
    """
    physics = PairPhysics() if physics is None else physics
    s_np = np.asarray(s_np, dtype=float)
    s_r = np.asarray(s_r, dtype=float)
    g_np = np.asarray(g_np, dtype=float)
    g_r = np.asarray(g_r, dtype=float)
    if np.any(~(g_np > 0)) or np.any(~(g_r > 0)):
        raise ValueError("conversion factors must be > 0")
    eta = (g_r * s_r + g_np * s_np) * NVS
    p = np.asarray(physics.expected_transition(eta, f_prime))
    out = s_np - 0.5 * (eta / g_np) / NVS * p
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PhiPartials:
    """∂φ with respect to S^np (at fixed S^T), S^T (at fixed S^np), g_np and g_R."""

    d_snp: float
    d_st: float
    d_gnp: float
    d_gr: float


def phi_partials(b: SignalBin, g: float, physics: PairPhysics | None = None,
                 rel_step: float = 1e-4) -> PhiPartials:
    """Central differences of φ at a bin centre with g_np = g_R = g."""
    physics = PairPhysics() if physics is None else physics
    s_np, s_t, fp = b.s_np_mean, b.s_total_mean, b.f_prime

    def f(snp, st, gnp, gr):
        return phi(snp, st - snp, gnp, gr, fp, physics)

    h_np = rel_step * max(abs(s_np), 1e-12)
    h_t = rel_step * max(abs(s_t), 1e-12)
    h_g = rel_step * g
    return PhiPartials(
        d_snp=(f(s_np + h_np, s_t, g, g) - f(s_np - h_np, s_t, g, g)) / (2 * h_np),
        d_st=(f(s_np, s_t + h_t, g, g) - f(s_np, s_t - h_t, g, g)) / (2 * h_t),
        d_gnp=(f(s_np, s_t, g + h_g, g) - f(s_np, s_t, g - h_g, g)) / (2 * h_g),
        d_gr=(f(s_np, s_t, g, g + h_g) - f(s_np, s_t, g, g - h_g)) / (2 * h_g),
    )


def delta_g(bins: list[SignalBin], beta_eff: float, which: str, calibration: ConversionModel,
            physics: PairPhysics | None = None, *, partials: list[PhiPartials] | None = None
            ) -> np.ndarray:
    """rms of g_np (``which="np"``) or g_R (``which="R"``) per bin.

    Linearising φ = 0 in a bin gives
    φ_np² δS^np² - φ_T² δS^T² = φ_gnp² δg_np² + φ_gR² δg_R², and the Polya
    law fixes δg_np²/δg_R² = (β_eff + 1/S^np)/(β_eff + 1/S^R). Bins where
    the left-hand side is negative, or with non-positive mean signals,
    come back as NaN.
    """
    if which not in ("np", "R"):
        raise ValueError("which must be 'np' or 'R'")
    if calibration.kind != "linear":
        raise ValueError("the fluctuation analysis is defined for the linear conversion model")
    physics = PairPhysics() if physics is None else physics
    g = calibration.g0
    out = np.full(len(bins), np.nan)
    for i, b in enumerate(bins):
        s_np, s_r = b.s_np_mean, b.s_r_mean
        if not (s_np > 0 and s_r > 0):
            continue
        d = partials[i] if partials is not None else phi_partials(b, g, physics)
        radicand = d.d_snp ** 2 * b.s_np_std ** 2 - d.d_st ** 2 * b.s_total_std ** 2
        if not radicand >= 0:
            continue
        ratio = (beta_eff + 1.0 / s_np) / (beta_eff + 1.0 / s_r)
        if which == "R":
            denom = d.d_gr ** 2 + d.d_gnp ** 2 * ratio
        else:
            denom = d.d_gr ** 2 / ratio + d.d_gnp ** 2
        out[i] = math.sqrt(radicand) / math.sqrt(denom)
    return out


# ---------------------------------------------------------------------------
# Polya fit and iteration
# ---------------------------------------------------------------------------

def fit_polya(s: np.ndarray, snr: np.ndarray) -> NoiseModel:
    """Least-squares fit of α and β_eff to (S, g/δg) points, equal weights.

    The start point comes from the linear relation
    S/(g/δg)² = (β_eff/α²) S + 1/α². A fit that wants β_eff < 0 is redone
    with β_eff pinned to 0.
    """
    s = np.asarray(s, dtype=float)
    y = np.asarray(snr, dtype=float)
    if s.size < 3:
        raise ValueError("need at least three signal-to-noise points")
    slope, intercept = np.polyfit(s, s / y ** 2, 1)
    if intercept > 0:
        a0, b0 = 1.0 / math.sqrt(intercept), max(slope / intercept, 0.0)
    else:
        a0, b0 = float(np.median(y / np.sqrt(s))), 0.0

    def res2(p):
        a, b = p
        if not (a > 0 and b >= 0):
            return np.full(s.size, np.inf)
        return y - _snr(a, b, s)

    r = least_squares(res2, [a0, b0], x_scale=[max(a0, 1e-3), max(b0, 1e-3)])
    a, b = r.params
    if not r.converged or b < 0:
        r1 = least_squares(lambda p: y - _snr(p[0], 0.0, s), [a0], x_scale=[max(a0, 1e-3)])
        a, b = r1.params[0], 0.0
    return NoiseModel(float(a), float(max(b, 0.0)))


@dataclass
class NoiseFitResult:
    model: NoiseModel | None
    converged: bool
    degenerate: bool
    iterations: int
    trace: list[tuple[float, float]] = field(default_factory=list)  # (α, β_eff) per iteration
    bins: list[SignalBin] = field(default_factory=list)
    points: dict[str, np.ndarray] = field(default_factory=dict)
    message: str = ""

    def to_dict(self) -> dict:
        d = {
            "converged": self.converged,
            "degenerate": self.degenerate,
            "iterations": self.iterations,
            "message": self.message,
            "trace": [{"alpha_per_sqrt_nVs": a, "beta_eff_per_nVs": b} for a, b in self.trace],
            "model": None if self.model is None else self.model.to_dict(),
            "bins": [
                {"f_prime_V_per_cm_per_us": b.f_prime, "s_total_mean_nVs": b.s_total_mean,
                 "s_total_std_nVs": b.s_total_std, "s_np_mean_nVs": b.s_np_mean,
                 "s_np_std_nVs": b.s_np_std, "count": b.count,
                 "snr_np": _nan_to_none(self.points.get("snr_np", [math.nan] * len(self.bins))[i]),
                 "snr_R": _nan_to_none(self.points.get("snr_R", [math.nan] * len(self.bins))[i])}
                for i, b in enumerate(self.bins)
            ],
        }
        return d


def _nan_to_none(x):
    x = float(x)
    return None if math.isnan(x) else x


def group_bins(data: ShotData, bins_per_group: int, *, trim_edges: bool = True) -> list[SignalBin]:
    """Equal-population S^T bins within each slew-rate group.

    With ``trim_edges`` the lowest and highest bin of every group are
    discarded. They cover the tails of the S^T distribution, where bins are
    wide and selecting on the observed S^T also selects the detection
    noise, so their scatter is not the unconditional fluctuation the
    linearisation of φ assumes.
    """
    out: list[SignalBin] = []
    for fp in np.unique(data.f_prime):
        sub = data.subset(data.f_prime == fp)
        nb = min(bins_per_group, len(sub) // 2)
        if nb < (4 if trim_edges else 2):
            continue
        bins = bin_by_total(sub, nb)
        out.extend(bins[1:-1] if trim_edges else bins)
    return out


def iterative_fit(
    data: ShotData,
    calibration: ConversionModel,
    physics: PairPhysics | None = None,
    *,
    bins_per_group: int = 50,
    trim_edges: bool = True,
    tol: float = 1e-6,
    max_iter: int = 100,
) -> NoiseFitResult:
    """Self-consistent Polya fit of the conversion fluctuations.

    Shots are grouped by slew rate and binned along S^T within each group
    (see :func:`group_bins`).
    Starting from β_eff = 0 (pure Poisson, constant volume), each round
    computes g/δg for both gates with the current β_eff and refits
    (α, β_eff) to the pooled points, until the relative change of α and of
    β_eff + 1/S (S the median point signal) is below ``tol``.
    """
    physics = PairPhysics() if physics is None else physics
    if len(data) == 0:
        raise ValueError("dataset is empty")
    if calibration.kind != "linear":
        raise ValueError("the fluctuation analysis is defined for the linear conversion model")
    data = data.subset(data.f_prime > 0)
    bins = group_bins(data, bins_per_group, trim_edges=trim_edges)
    g = calibration.g0
    partials = [phi_partials(b, g, physics) for b in bins]
    s_np = np.array([b.s_np_mean for b in bins])
    s_r = np.array([b.s_r_mean for b in bins])

    result = NoiseFitResult(None, False, False, 0, bins=bins)
    beta = 0.0
    prev: NoiseModel | None = None
    for it in range(1, max_iter + 1):
        dg_np = delta_g(bins, beta, "np", calibration, physics, partials=partials)
        dg_r = delta_g(bins, beta, "R", calibration, physics, partials=partials)
        with np.errstate(divide="ignore", invalid="ignore"):
            snr_np = g / dg_np
            snr_r = g / dg_r
        ok = np.isfinite(snr_np) & np.isfinite(snr_r) & (dg_np > 0) & (dg_r > 0)
        result.points = {"s_np": s_np, "snr_np": np.where(ok, snr_np, np.nan),
                         "s_R": s_r, "snr_R": np.where(ok, snr_r, np.nan)}
        if ok.sum() < 2:
            result.degenerate = True
            result.iterations = it
            result.message = f"only {int(ok.sum())} bins with resolvable scatter"
            return result
        s_pts = np.concatenate([s_np[ok], s_r[ok]])
        s_typ = float(np.median(s_pts))
        model = fit_polya(s_pts, np.concatenate([snr_np[ok], snr_r[ok]]))
        result.trace.append((model.alpha, model.beta_eff))
        result.model = model
        result.iterations = it
        if prev is not None:
            da = abs(model.alpha - prev.alpha) / model.alpha
            # β_eff is judged by its share of the variance term β_eff + 1/S,
            # so a β_eff that decays towards 0 still converges.
            db = abs(model.beta_eff - prev.beta_eff) / (model.beta_eff + 1.0 / s_typ)
            if da < tol and db < tol:
                result.converged = True
                result.message = "relative parameter change below tolerance"
                return result
        prev = model
        beta = model.beta_eff
    result.message = "iteration limit reached"
    return result
