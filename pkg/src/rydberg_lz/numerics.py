"""Numerical kernels: adaptive quadrature, the Erlang-averaged exponential
K(w), the Meijer G^{30}_{03} cross-check and a Levenberg-Marquardt solver.

All reductions that feed a reported number go through :func:`math.fsum` or
through sums over intervals sorted by their left endpoint, so results do not
depend on evaluation order.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NumericalError",
    "QuadratureError",
    "QuadResult",
    "adaptive_quad",
    "k_integral",
    "k_complement",
    "meijer_g_3003",
    "LeastSquaresResult",
    "least_squares",
]

EPS = np.finfo(float).eps
SQRT_PI = math.sqrt(math.pi)

# exp(-x) underflows to zero in double precision beyond this argument.
_UNDERFLOW_ARG = 745.0


class NumericalError(RuntimeError):
    """Raised when a numerical routine cannot reach its tolerance."""


class QuadratureError(NumericalError):
    def __init__(self, message: str, result: "QuadResult"):
        super().__init__(f"{message} (value={result.value:.17g}, "
                         f"error={result.error:.3g}, intervals={result.n_intervals}, "
                         f"evaluations={result.n_evals})")
        self.result = result


# ---------------------------------------------------------------------------
# Gauss-Kronrod 7/15 adaptive quadrature
# ---------------------------------------------------------------------------

_XGK = np.array([
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
])
_WGK = np.array([
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
])

# Full symmetric node set on [-1, 1] and matching weights.
_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
_KRONROD_W = np.concatenate([_WGK[:-1], _WGK[::-1]])
_GAUSS_W = np.zeros(15)
_GAUSS_W[[1, 3, 5]] = _WG[:3]
_GAUSS_W[7] = _WG[3]
_GAUSS_W[[9, 11, 13]] = _WG[2::-1]


@dataclass(frozen=True)
class QuadResult:
    value: float
    error: float
    n_intervals: int
    n_evals: int


def _gk15(f: Callable[[np.ndarray], np.ndarray], a: float, b: float) -> tuple[float, float]:
    half = 0.5 * (b - a)
    center = 0.5 * (a + b)
    fx = np.asarray(f(center + half * _NODES), dtype=float)
    if fx.shape != _NODES.shape:
        fx = np.broadcast_to(fx, _NODES.shape)
    kronrod = half * math.fsum(_KRONROD_W * fx)
    gauss = half * math.fsum(_GAUSS_W * fx)
    return kronrod, abs(kronrod - gauss)


def adaptive_quad(
    f: Callable[[np.ndarray], np.ndarray],
    a: float,
    b: float,
    *,
    rtol: float = 1e-10,
    atol: float = 0.0,
    points: Sequence[float] | None = None,
    initial_intervals: int = 1,
    limit: int = 4000,
) -> QuadResult:
    """Globally adaptive Gauss-Kronrod (7, 15) quadrature of ``f`` on [a, b].

    ``f`` is called with a 1-D array of 15 abscissae and must return an array
    of the same shape. The interval with the largest error estimate is
    bisected until the summed estimate is below ``max(atol, rtol*|I|)``.
    ``points`` and ``initial_intervals`` control the starting subdivision.

    Raises
    ------
    QuadratureError
        If ``limit`` intervals are exhausted before convergence, or the
        integrand produced non-finite values.
    """
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError("adaptive_quad needs finite limits")
    if a == b:
        return QuadResult(0.0, 0.0, 0, 0)
    if b < a:
        res = adaptive_quad(f, b, a, rtol=rtol, atol=atol, points=points,
                            initial_intervals=initial_intervals, limit=limit)
        return QuadResult(-res.value, res.error, res.n_intervals, res.n_evals)

    edges = set(np.linspace(a, b, max(int(initial_intervals), 1) + 1).tolist())
    if points is not None:
        edges.update(float(p) for p in points if a < p < b)
    edges = sorted(edges)

    heap: list[tuple[float, float, float, float]] = []
    n_evals = 0
    for lo, hi in zip(edges[:-1], edges[1:]):
        val, err = _gk15(f, lo, hi)
        n_evals += 15
        heapq.heappush(heap, (-err, lo, hi, val))

    def totals() -> tuple[float, float]:
        ordered = sorted(heap, key=lambda item: item[1])
        return (math.fsum(item[3] for item in ordered),
                math.fsum(-item[0] for item in ordered))

    value, error = totals()
    while True:
        if not (math.isfinite(value) and math.isfinite(error)):
            raise QuadratureError("non-finite integrand",
                                  QuadResult(value, error, len(heap), n_evals))
        if error <= max(atol, rtol * abs(value)):
            return QuadResult(value, error, len(heap), n_evals)
        if len(heap) >= limit:
            raise QuadratureError("subdivision limit reached",
                                  QuadResult(value, error, len(heap), n_evals))
        _, lo, hi, _ = heapq.heappop(heap)
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            raise QuadratureError("interval cannot be bisected further",
                                  QuadResult(value, error, len(heap), n_evals))
        for s, e in ((lo, mid), (mid, hi)):
            val, err = _gk15(f, s, e)
            n_evals += 15
            heapq.heappush(heap, (-err, s, e, val))
        value, error = totals()


# ---------------------------------------------------------------------------
# K(w) = int_0^inf exp(-t - w / t^2) dt
# ---------------------------------------------------------------------------

def _check_w(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if np.any(np.isnan(w)):
        raise ValueError("w must not be NaN")
    if np.any(w < 0):
        raise ValueError("w must be >= 0")
    return w


def _log_limits(w: np.ndarray, complement: bool) -> tuple[np.ndarray, np.ndarray]:
    """Integration range in x = ln t.

    Upper end: exp(-t) negligible beyond the integrand peak t* = (2w)^(1/3).
    Lower end: for K the factor exp(-w/t^2) underflows (or t < 1e-19);
    for 1 - K the integrand behaves like t there, so the cut sits well below
    sqrt(w) where its contribution is < 1e-16 relative.
    """
    t_peak = np.cbrt(2.0 * w)
    x_hi = np.log(50.0 + 3.0 * t_peak)
    with np.errstate(divide="ignore"):
        if complement:
            x_lo = 0.5 * np.log(w) - 36.0
        else:
            x_lo = np.maximum(0.5 * np.log(w / (_UNDERFLOW_ARG + 55.0)), -45.0)
    return x_lo, x_hi


def _log_integrand(x: np.ndarray, w: np.ndarray, complement: bool) -> np.ndarray:
    t = np.exp(x)
    with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
        u = w / (t * t)
        if complement:
            return t * np.exp(-t) * -np.expm1(-u)
        return t * np.exp(-t - u)


def _trapezoid_refine(w: np.ndarray, complement: bool, rtol: float,
                      n0: int = 128, max_level: int = 14) -> np.ndarray:
    """Trapezoid rule in x = ln t with step halving until two successive
    levels agree to ``rtol``. The integrand is analytic in a strip around
    the real axis and decays doubly exponentially at both ends of the range,
    so each halving roughly squares the error."""
    out = np.empty_like(w)
    todo = np.arange(w.size)
    x_lo, x_hi = _log_limits(w, complement)
    span = x_hi - x_lo
    h = span / n0
    grid = np.arange(n0 + 1) / n0
    x = x_lo[:, None] + span[:, None] * grid[None, :]
    fx = _log_integrand(x, w[:, None], complement)
    total = h * (fx[:, 1:-1].sum(axis=1) + 0.5 * (fx[:, 0] + fx[:, -1]))
    n = n0
    for _ in range(max_level):
        mids = (np.arange(n) + 0.5) / n
        xm = x_lo[todo, None] + span[todo, None] * mids[None, :]
        fm = _log_integrand(xm, w[todo, None], complement)
        new = 0.5 * total[todo] + 0.5 * h[todo] * fm.sum(axis=1)
        done = np.abs(new - total[todo]) <= rtol * np.abs(new)
        total[todo] = new
        h[todo] *= 0.5
        out[todo[done]] = new[done]
        todo = todo[~done]
        n *= 2
        if todo.size == 0:
            return out
    raise NumericalError(f"K(w) trapezoid refinement did not converge for w={w[todo][:5]}")


def _gk_scalar(w: float, complement: bool, rtol: float, initial_intervals: int) -> float:
    wa = np.array([w])
    x_lo, x_hi = _log_limits(wa, complement)
    peak = math.log(2.0 * w) / 3.0 if w > 0 else 0.0
    points = [p for p in (peak, 0.0) if x_lo[0] < p < x_hi[0]]
    res = adaptive_quad(lambda x: _log_integrand(x, wa, complement),
                        float(x_lo[0]), float(x_hi[0]), rtol=rtol,
                        points=points, initial_intervals=initial_intervals)
    return res.value


def _k_eval(w, complement: bool, rtol: float, method: str, initial_intervals: int):
    w = _check_w(w)
    flat = w.ravel()
    if method == "trapezoid":
        vals = np.empty_like(flat)
        zero = flat == 0.0
        vals[zero] = 0.0 if complement else 1.0
        live = np.flatnonzero(~zero)
        for start in range(0, live.size, 2048):
            idx = live[start:start + 2048]
            vals[idx] = _trapezoid_refine(flat[idx], complement, rtol)
    elif method == "gk":
        vals = np.array([
            (0.0 if complement else 1.0) if wi == 0.0
            else _gk_scalar(float(wi), complement, rtol, initial_intervals)
            for wi in flat
        ])
    else:
        raise ValueError(f"unknown method {method!r}")
    vals = vals.reshape(w.shape)
    return float(vals) if vals.ndim == 0 else vals


def k_integral(w, *, rtol: float = 1e-10, method: str = "trapezoid",
               initial_intervals: int = 1):
    """K(w) = ∫_0^∞ exp(-t - w/t²) dt for w >= 0 (scalar or array).

    K(0) = 1 and K decreases monotonically. ``method`` selects the
    step-halving trapezoid in ln t (vectorised, default) or adaptive
    Gauss-Kronrod (``"gk"``, scalar loop); both reach ``rtol``.
    """
    return _k_eval(w, False, rtol, method, initial_intervals)


def k_complement(w, *, rtol: float = 1e-10, method: str = "trapezoid",
                 initial_intervals: int = 1):
    """1 - K(w), integrated directly as ∫ e^{-t} (1 - e^{-w/t²}) dt.

    Avoids the cancellation of ``1 - k_integral(w)`` when w is small, which
    is where dilute-gas transition probabilities live.
    """
    return _k_eval(w, True, rtol, method, initial_intervals)


def meijer_g_3003(z, *, rtol: float = 1e-10):
    """G^{3,0}_{0,3}(z | -; 0, 1/2, 1) for z >= 0.

    Uses G(z) = sqrt(pi) * K(4 z), which follows from the Mellin-Barnes
    representation; G(0) = Γ(1/2)Γ(1) = sqrt(pi).
    """
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("z must be >= 0")
    return SQRT_PI * k_integral(4.0 * z, rtol=rtol)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt
# ---------------------------------------------------------------------------

@dataclass
class LeastSquaresResult:
    params: np.ndarray
    covariance: np.ndarray
    rss: float
    reduced_chi_square: float
    n_points: int
    converged: bool
    iterations: int
    message: str = ""
    residuals: np.ndarray = field(default=None, repr=False)

    @property
    def param_std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


def _fsum_sq(r: np.ndarray) -> float:
    return math.fsum(r * r)


def _normal_equations(J: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = J.shape[1]
    A = np.empty((p, p))
    g = np.empty(p)
    for i in range(p):
        g[i] = math.fsum(J[:, i] * r)
        for j in range(i, p):
            A[i, j] = A[j, i] = math.fsum(J[:, i] * J[:, j])
    return A, g


def _is_singular(A: np.ndarray, cond_limit: float = 1e12) -> bool:
    d = np.diag(A)
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        return True
    s = 1.0 / np.sqrt(d)
    corr = A * s[:, None] * s[None, :]
    return not np.isfinite(np.linalg.cond(corr)) or np.linalg.cond(corr) > cond_limit


def least_squares(
    fun: Callable[..., np.ndarray],
    x0: Sequence[float],
    args: tuple = (),
    *,
    x_scale: Sequence[float] | None = None,
    max_iter: int = 200,
    xtol: float = 1e-10,
    ftol: float = 1e-12,
    lambda0: float = 1e-3,
) -> LeastSquaresResult:
    """Minimise sum(fun(x, *args)**2) with Levenberg-Marquardt damping.

    The Jacobian is taken by forward differences with step
    sqrt(eps)*max(|z|, 1) in the scaled variables z = x / x_scale. Trial
    points with non-finite residuals are rejected like uphill steps, which
    lets callers encode hard domain limits by returning ``inf``.

    The covariance is rss/(n - p) * (JᵀJ)⁻¹ at the solution. A singular
    normal matrix does not raise; the result comes back with
    ``converged=False`` and a pseudo-inverse covariance.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial parameters must be finite")
    p = x0.size
    scale = np.ones(p) if x_scale is None else np.asarray(x_scale, dtype=float).ravel()
    if scale.shape != (p,) or np.any(scale <= 0):
        raise ValueError("x_scale must be positive, one entry per parameter")

    def resid(z: np.ndarray) -> np.ndarray:
        return np.asarray(fun(z * scale, *args), dtype=float).ravel()

    z = x0 / scale
    r = resid(z)
    n = r.size
    if n < p:
        raise ValueError(f"need at least {p} data points for {p} parameters, got {n}")
    if not np.all(np.isfinite(r)):
        raise ValueError("residuals are not finite at the initial parameters")
    rss = _fsum_sq(r)

    def jacobian(z: np.ndarray, r0: np.ndarray) -> np.ndarray:
        J = np.empty((n, p))
        for j in range(p):
            step = math.sqrt(EPS) * max(abs(z[j]), 1.0)
            zt = z.copy()
            zt[j] += step
            J[:, j] = (resid(zt) - r0) / (zt[j] - z[j])
        return J

    lam = lambda0
    converged = False
    message = "maximum iterations reached"
    it = 0
    for it in range(1, max_iter + 1):
        if rss == 0.0:
            converged, message = True, "zero residual"
            break
        J = jacobian(z, r)
        A, g = _normal_equations(J, r)
        if _is_singular(A):
            message = "singular normal matrix"
            break
        diag = np.diag(A)
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            z_new = z + step
            r_new = resid(z_new)
            rss_new = _fsum_sq(r_new) if np.all(np.isfinite(r_new)) else math.inf
            if rss_new < rss:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # No downhill step at any damping: rss is at its floating-point floor.
            converged, message = True, "no further decrease possible"
            break
        small_step = np.linalg.norm(step) <= xtol * (np.linalg.norm(z) + xtol)
        small_drop = (rss - rss_new) <= ftol * rss
        z, r, rss = z_new, r_new, rss_new
        lam = max(lam / 10.0, 1e-15)
        if small_step or small_drop:
            converged, message = True, ("relative parameter change below xtol"
                                        if small_step else "relative rss change below ftol")
            break

    dof = n - p
    red = rss / dof if dof > 0 else math.nan
    J = jacobian(z, r)
    A, _ = _normal_equations(J, r)
    if _is_singular(A):
        converged = False
        message = "singular normal matrix"
        cov_z = np.linalg.pinv(A)
    else:
        cov_z = np.linalg.inv(A)
    cov_z = 0.5 * (cov_z + cov_z.T) * (red if dof > 0 else math.nan)
    cov = cov_z * scale[:, None] * scale[None, :]
    return LeastSquaresResult(
        params=z * scale,
        covariance=cov,
        rss=rss,
        reduced_chi_square=red,
        n_points=n,
        converged=converged,
        iterations=it,
        message=message,
        residuals=r,
    )
