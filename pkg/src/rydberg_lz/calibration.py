"""Signal-to-density conversion, its calibration from (S^T, F', S^np)
shots, and model comparison.

Signals are in nV·s at the interface. Conversion coefficients are stored
per V·s: g0 in cm⁻³/(V·s), g1 in cm⁻³/(V·s)².
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .dataset import ShotData
from .numerics import least_squares
from .physics import PairPhysics

__all__ = [
    "NVS",
    "REFERENCE_LINEAR_G0",
    "REFERENCE_LINEAR_G0_STD",
    "REFERENCE_QUADRATIC_G0",
    "REFERENCE_QUADRATIC_G1",
    "ConversionModel",
    "CalibrationFit",
    "FTestResult",
    "g_eval",
    "h_eval",
    "predict_snp",
    "fit",
    "compare_models",
    "finite_sample_uncertainty",
    "bbr_correct",
]

NVS = 1e-9  # V·s per nV·s

REFERENCE_LINEAR_G0 = 4.150e15      # cm⁻³/(V·s)
REFERENCE_LINEAR_G0_STD = 4e12      # cm⁻³/(V·s)
REFERENCE_QUADRATIC_G0 = 3.039e15   # cm⁻³/(V·s)
# Published as 2.80e10 with the signal in µV·s; 2.80e10 * (1e6)**2 per (V·s)².
REFERENCE_QUADRATIC_G1 = 2.80e22    # cm⁻³/(V·s)²


@dataclass(frozen=True)
class ConversionModel:
    """Polynomial conversion g(S) = Σ_k c_k S^(k+1), S in V·s, η in cm⁻³.

    ``coefficients = (g0,)`` is the linear model, ``(g0, g1)`` the quadratic
    one. Longer tuples are accepted; their inverse is found numerically.
    """

    coefficients: tuple[float, ...]

    def __post_init__(self):
        c = tuple(float(x) for x in self.coefficients)
        if not c:
            raise ValueError("need at least g0")
        if not (c[0] > 0 and all(math.isfinite(x) for x in c)):
            raise ValueError("g0 must be > 0 and all coefficients finite")
        object.__setattr__(self, "coefficients", c)

    @classmethod
    def linear(cls, g0: float) -> "ConversionModel":
        return cls((g0,))

    @classmethod
    def quadratic(cls, g0: float, g1: float) -> "ConversionModel":
        return cls((g0, g1))

    @property
    def kind(self) -> str:
        return {1: "linear", 2: "quadratic"}.get(len(self.coefficients),
                                                  f"poly{len(self.coefficients)}")

    @property
    def g0(self) -> float:
        return self.coefficients[0]

    @property
    def g1(self) -> float:
        return self.coefficients[1] if len(self.coefficients) > 1 else 0.0

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "g0_cm3_per_Vs": self.g0}
        if len(self.coefficients) > 1:
            d["g1_cm3_per_Vs2"] = self.g1
        for k, c in enumerate(self.coefficients[2:], start=2):
            d[f"g{k}_cm3_per_Vs{k + 1}"] = c
        return d


def _as_out(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def g_eval(model: ConversionModel, s_total):
    """Density in cm⁻³ for a signal in nV·s."""
    s = np.asarray(s_total, dtype=float)
    if np.any(np.isnan(s)) or np.any(s < 0):
        raise ValueError("signal must be >= 0")
    s = s * NVS
    acc = np.zeros_like(s)
    for c in reversed(model.coefficients):
        acc = (acc + c) * s
    return _as_out(acc)


def h_eval(model: ConversionModel, eta):
    """Signal in nV·s for a density in cm⁻³ (inverse of :func:`g_eval`)."""
    eta = np.asarray(eta, dtype=float)
    if np.any(np.isnan(eta)) or np.any(eta < 0):
        raise ValueError("density must be >= 0")
    c = model.coefficients
    if len(c) == 1:
        s = eta / c[0]
    elif len(c) == 2:
        disc = c[0] * c[0] + 4.0 * c[1] * eta
        if np.any(disc < 0):
            raise ValueError("quadratic conversion has no real inverse at this density")
        # Rationalised positive root, stable for g1 -> 0.
        s = 2.0 * eta / (c[0] + np.sqrt(disc))
    else:
        s = _poly_inverse(model, eta)
    return _as_out(s / NVS)


def _poly_inverse(model: ConversionModel, eta: np.ndarray) -> np.ndarray:
    c = np.asarray(model.coefficients)
    powers = np.arange(1, c.size + 1)
    s = eta / c[0]
    for _ in range(100):
        g = np.sum(c * s[..., None] ** powers, axis=-1)
        dg = np.sum(c * powers * s[..., None] ** (powers - 1), axis=-1)
        if np.any(dg <= 0):
            raise ValueError("conversion is not monotone on the requested range")
        step = (g - eta) / dg
        s = s - step
        if np.all(np.abs(step) <= 1e-15 * np.maximum(np.abs(s), 1e-300)):
            return s
    raise ValueError("polynomial inverse did not converge")


def predict_snp(model: ConversionModel, s_total, f_prime, physics: PairPhysics | None = None):
    """Expected np-gate signal h(½ g(S^T) ⟨P⟩_{g(S^T), F'}), in nV·s."""
    physics = PairPhysics() if physics is None else physics
    eta = np.asarray(g_eval(model, s_total))
    p = np.asarray(physics.expected_transition(eta, f_prime))
    return h_eval(model, 0.5 * eta * p)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

@dataclass
class CalibrationFit:
    model: ConversionModel
    param_std: np.ndarray
    covariance: np.ndarray
    rss: float
    reduced_chi_square: float  # (nV·s)²
    n_shots: int
    converged: bool
    iterations: int
    message: str = ""
    residuals: np.ndarray = field(default=None, repr=False)

    @property
    def noise_estimate(self) -> float:
        """Per-shot noise in nV·s."""
        return math.sqrt(self.reduced_chi_square)

    @property
    def n_params(self) -> int:
        return len(self.model.coefficients)

    @property
    def relative_std(self) -> np.ndarray:
        return self.param_std / np.abs(np.asarray(self.model.coefficients))

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "param_std": [float(x) for x in self.param_std],
            "covariance": [[float(x) for x in row] for row in self.covariance],
            "rss_nVs2": float(self.rss),
            "reduced_chi_square_nVs2": float(self.reduced_chi_square),
            "noise_estimate_nVs": float(self.noise_estimate),
            "n_shots": int(self.n_shots),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "message": self.message,
        }


def _binned_means(data: ShotData, per_group: int = 10) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s_t, fp, s_np = data.s_total, data.f_prime, data.s_np
    groups = np.unique(fp)
    if groups.size > 20:
        edges = np.quantile(1.0 / fp, np.linspace(0, 1, 21))
        labels = np.clip(np.searchsorted(edges, 1.0 / fp, side="right") - 1, 0, 19)
    else:
        labels = np.searchsorted(groups, fp)
    out_t, out_f, out_np = [], [], []
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        idx = idx[np.argsort(s_t[idx], kind="stable")]
        for chunk in np.array_split(idx, min(per_group, idx.size)):
            out_t.append(s_t[chunk].mean())
            out_f.append(fp[chunk].mean())
            out_np.append(s_np[chunk].mean())
    return np.array(out_t), np.array(out_f), np.array(out_np)


def initial_g0(data: ShotData, physics: PairPhysics) -> float:
    """Coarse start value for g0 from a grid scan over binned shot means."""
    s_t, fp, s_np = _binned_means(data)
    grid = np.logspace(12.0, 19.0, 141)
    rss = np.array([np.sum((s_np - predict_snp(ConversionModel.linear(g), s_t, fp, physics)) ** 2)
                    for g in grid])
    return float(grid[int(np.argmin(rss))])


def fit(
    data: ShotData,
    kind: str = "linear",
    physics: PairPhysics | None = None,
    *,
    weights=None,
    init: ConversionModel | None = None,
) -> CalibrationFit:
    """Least-squares calibration of the conversion model on shot data.

    Minimises Σ w_i (S^np_i - predict_snp(S^T_i, F'_i))² over g0 (and g1).
    Uniform weights unless ``weights`` is given.
    """
    physics = PairPhysics() if physics is None else physics
    degree = {"linear": 1, "quadratic": 2}.get(kind)
    if degree is None:
        if isinstance(kind, str) and kind.startswith("poly") and kind[4:].isdigit():
            degree = int(kind[4:])
        else:
            raise ValueError(f"unknown model kind {kind!r}")
    if len(data) == 0:
        raise ValueError("dataset is empty")
    if np.any(data.f_prime <= 0):
        raise ValueError("shots without field sweep (f_prime <= 0) cannot be fitted")
    if np.unique(data.f_prime).size < 2:
        warnings.warn("fewer than two distinct slew rates; g0 and g1 are poorly separated",
                      RuntimeWarning, stacklevel=2)
    w = np.ones(len(data)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (len(data),) or np.any(w < 0):
        raise ValueError("weights must be non-negative, one per shot")
    sqrt_w = np.sqrt(w)

    if init is None:
        g0 = initial_g0(data, physics)
        x0 = np.zeros(degree)
        x0[0] = g0
    else:
        x0 = np.zeros(degree)
        c = np.asarray(init.coefficients)[:degree]
        x0[:c.size] = c
    s_ref = float(np.median(data.s_total)) * NVS
    if not s_ref > 0:
        s_ref = 1e-8
    scale = np.array([x0[0] / s_ref ** k for k in range(degree)])

    s_t, fp, s_np = data.s_total, data.f_prime, data.s_np

    def residuals(params: np.ndarray) -> np.ndarray:
        try:
            model = ConversionModel(tuple(params))
            pred = predict_snp(model, s_t, fp, physics)
        except ValueError:
            return np.full(s_np.size, np.inf)
        return sqrt_w * (s_np - pred)

    res = least_squares(residuals, x0, x_scale=scale)
    model = ConversionModel(tuple(res.params))
    return CalibrationFit(
        model=model,
        param_std=res.param_std,
        covariance=res.covariance,
        rss=res.rss,
        reduced_chi_square=res.reduced_chi_square,
        n_shots=len(data),
        converged=res.converged,
        iterations=res.iterations,
        message=res.message,
        residuals=res.residuals,
    )


@dataclass(frozen=True)
class FTestResult:
    f_statistic: float
    p_value: float
    dof: tuple[int, int]
    threshold: float
    quadratic_preferred: bool

    @property
    def significance(self) -> float:
        return 1.0 - self.p_value

    def to_dict(self) -> dict:
        return {"f_statistic": self.f_statistic, "p_value": self.p_value,
                "significance": self.significance, "dof": list(self.dof),
                "threshold": self.threshold, "quadratic_preferred": self.quadratic_preferred}


def compare_models(fit_linear: CalibrationFit, fit_quadratic: CalibrationFit,
                   n_shots: int | None = None, *, threshold: float = 0.99) -> FTestResult:
    """Nested-model F-test of the quadratic against the linear conversion."""
    n = fit_linear.n_shots if n_shots is None else int(n_shots)
    if fit_quadratic.n_shots != fit_linear.n_shots:
        raise ValueError("both fits must come from the same dataset")
    dof2 = n - 2
    if dof2 < 1:
        raise ValueError("need more than two shots for the F-test")
    rss_l, rss_q = fit_linear.rss, fit_quadratic.rss
    if rss_q == 0.0:
        f_stat = math.inf if rss_l > 0 else 0.0
        p = 0.0 if rss_l > 0 else 1.0
    else:
        f_stat = max(rss_l - rss_q, 0.0) / (rss_q / dof2)
        p = float(stats.f.sf(f_stat, 1, dof2))
    return FTestResult(f_stat, p, (1, dof2), threshold, bool(1.0 - p >= threshold))


def finite_sample_uncertainty(n_atoms: float, expected_p: float) -> tuple[float, float]:
    """Bound on the spread of the sample-mean transition fraction.

    Each of the n/2 pairs is a Bernoulli trial with variance at most 1/4,
    so the standard deviation of the mean is at most ½ / sqrt(n/2).
    Returns (absolute, relative); relative is ``inf`` when ``expected_p`` is 0.
    """
    if not n_atoms >= 2:
        raise ValueError("need at least two atoms")
    absolute = 0.5 / math.sqrt(n_atoms / 2.0)
    relative = absolute / expected_p if expected_p > 0 else math.inf
    return absolute, relative


def bbr_correct(data: ShotData, baseline: ShotData, *, n_bins: int = 20) -> ShotData:
    """Subtract the sweep-independent np population measured without ramp.

    The baseline's mean np signal is tabulated against total signal in
    equal-population bins (anchored at the origin) and interpolated at each
    shot's S^T. The subtracted amount moves from the np gate to the rest so
    S^T is unchanged; corrected np signals are clipped at zero.
    """
    if len(baseline) == 0:
        raise ValueError("baseline dataset is empty")
    order = np.argsort(baseline.s_total, kind="stable")
    chunks = np.array_split(order, max(1, min(n_bins, len(baseline))))
    x = np.array([0.0] + [baseline.s_total[c].mean() for c in chunks])
    y = np.array([0.0] + [baseline.s_np[c].mean() for c in chunks])
    s_t = data.s_total
    lo, hi = baseline.s_total.min(), baseline.s_total.max()
    if len(data) and (s_t.min() < lo or s_t.max() > hi):
        warnings.warn(f"baseline covers S^T in [{lo:.3g}, {hi:.3g}] nV·s; "
                      "dataset values outside are extrapolated", RuntimeWarning, stacklevel=2)
    # Linear extrapolation past the last bin from the final segment's slope.
    slope = (y[-1] - y[-2]) / (x[-1] - x[-2]) if x[-1] > x[-2] else 0.0
    b = np.where(s_t <= x[-1], np.interp(s_t, x, y), y[-1] + slope * (s_t - x[-1]))
    b = np.clip(b, 0.0, None)
    s_np = data.s_np - b
    s_np = np.clip(s_np, 0.0, None)
    removed = data.s_np - s_np
    return ShotData(data.shot_id.copy(), data.f_prime.copy(), s_np, data.s_r + removed)
