"""Polynomial replacements for activations, max pooling, and friends.

All fits are Chebyshev interpolations at the degree requested, on a symmetric
interval [-R, R] chosen by calibration.  The monomial form of every fit is
produced through the verified basis conversion in :mod:`polyalg`, so a fit
that survives construction is guaranteed to evaluate like its series.

Max over a window is not a polynomial, so three substitutes are offered:

* ``exact_abs``      -- max(x, y) = (x + y)/2 + |x - y|/2, exact, usable as a
                        reference but not a polynomial.
* ``paper_literal``  -- (x + y)/2 + |x - y|, the same shape with the gap term
                        left unhalved; overshoots the true max by |x - y|/2.
* ``poly_sqrt``      -- the exact_abs form with |g| replaced by a polynomial:
                        |g| = sqrt(g^2) with sqrt fitted on [0, (2R)^2].

A scaled mean (a plain window sum, the degree-1 power mean without the
division) is available as a pooling substitute for networks trained with it.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ValidationError
from .model import ActivationKind, ModelGraph, layer_preactivations
from .polyalg import (
    ChebSeries,
    SparseMultiPoly,
    UniPoly,
    cheb_eval,
    cheb_eval_many,
    cheb_to_monomial,
    compose_uni_with_mp,
    mp_add,
    mp_scale,
    mp_var,
)

SQRT_DEGREE = 20
GRID_POINTS = 10_001
PERCENTILE = 99.5
SAFETY = 1.25
FLOOR_RADIUS = 1.0

MAX_MODES = ("exact_abs", "paper_literal", "poly_sqrt")


@dataclass(frozen=True)
class ApproxSpec:
    """Degree and interval for one layer's replacements."""

    degree: int
    radius: float
    sqrt_degree: int = SQRT_DEGREE

    def __post_init__(self):
        if self.degree < 1:
            raise ValidationError("degree must be at least 1")
        if self.radius <= 0.0:
            raise ValidationError("radius must be positive")
        if self.sqrt_degree < 2:
            raise ValidationError("sqrt_degree must be at least 2")

    @property
    def lo(self) -> float:
        return -self.radius

    @property
    def hi(self) -> float:
        return self.radius


@dataclass(frozen=True)
class FitReport:
    """Fit quality measured on a dense grid over the fitting interval."""

    max_abs_error: float
    mean_abs_error: float
    grid_points: int
    lo: float
    hi: float


def cheb_fit(f, degree: int, lo: float, hi: float) -> ChebSeries:
    """Interpolate ``f`` at the degree+1 Chebyshev nodes of [lo, hi]."""
    if degree < 0:
        raise ValidationError("degree must be non-negative")
    if not lo < hi:
        raise ValidationError(f"empty interval [{lo}, {hi}]")
    n = degree + 1
    theta = np.pi * (2.0 * np.arange(n) + 1.0) / (2.0 * n)
    mid, half = (hi + lo) / 2.0, (hi - lo) / 2.0
    fx = np.asarray(f(mid + half * np.cos(theta)), dtype=np.float64)
    if fx.shape != (n,) or not np.all(np.isfinite(fx)):
        raise ValidationError("function returned non-finite or misshapen values")
    coeffs = (2.0 / n) * (np.cos(np.arange(n)[:, None] * theta[None, :]) @ fx)
    coeffs[0] *= 0.5
    return ChebSeries(tuple(coeffs), lo, hi)


def fit_report(series: ChebSeries, f,
               grid_points: int = GRID_POINTS) -> FitReport:
    xs = np.linspace(series.lo, series.hi, grid_points)
    err = np.abs(cheb_eval_many(series, xs) - f(xs))
    return FitReport(max_abs_error=float(np.max(err)),
                     mean_abs_error=float(np.mean(err)),
                     grid_points=grid_points, lo=series.lo, hi=series.hi)


@lru_cache(maxsize=256)
def _fit_activation(tag: str, leak: float, degree: int, radius: float,
                    grid_points: int):
    kind = ActivationKind(tag, leak)
    series = cheb_fit(kind.apply, degree, -radius, radius)
    poly = cheb_to_monomial(series)
    return series, poly, fit_report(series, kind.apply, grid_points)


def approx_activation(kind: ActivationKind, spec: ApproxSpec,
                      grid_points: int = GRID_POINTS
                      ) -> tuple[UniPoly, FitReport]:
    """Monomial replacement for one activation on the spec's interval.

    Identity is returned exactly (the polynomial x with zero error); every
    other kind goes through fit, verified conversion, and a grid report.
    """
    if kind.tag == "identity":
        return UniPoly((0.0, 1.0)), FitReport(0.0, 0.0, grid_points,
                                              spec.lo, spec.hi)
    _, poly, report = _fit_activation(kind.tag, kind.leak_slope, spec.degree,
                                      spec.radius, grid_points)
    return poly, report


def activation_series(kind: ActivationKind, spec: ApproxSpec) -> ChebSeries:
    """The underlying Chebyshev series, for numerically safe evaluation."""
    if kind.tag == "identity":
        mid = 0.0
        return ChebSeries((mid, spec.radius), spec.lo, spec.hi)
    series, _, _ = _fit_activation(kind.tag, kind.leak_slope, spec.degree,
                                   spec.radius, GRID_POINTS)
    return series


# ---------------------------------------------------------------------------
# max substitutes
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def _sqrt_fit(sqrt_degree: int, radius: float, grid_points: int = GRID_POINTS):
    hi = (2.0 * radius) ** 2
    series = cheb_fit(np.sqrt, sqrt_degree, 0.0, hi)
    report = fit_report(series, np.sqrt, grid_points)
    return series, report


def sqrt_series(spec: ApproxSpec) -> tuple[ChebSeries, FitReport]:
    """sqrt fitted on [0, (2R)^2], the range of a squared pairwise gap."""
    return _sqrt_fit(spec.sqrt_degree, spec.radius)


def pair_gap_poly(spec: ApproxSpec) -> UniPoly:
    """T(g) ~= |g|/2 for |g| <= 2R, as T(g) = S(g^2)/2 with S the sqrt fit.

    Degree 2*sqrt_degree, even powers only.  The conversion goes through the
    identity T_k(2w^2 - 1) = T_2k(w), which turns S's series on [0, (2R)^2]
    into an even series on the symmetric interval [-2R, 2R]; the symmetric
    form avoids the binomial blow-up of converting on a one-sided interval.
    The conversion gate is 1e-4 here rather than the 1e-6 default: a
    degree-40 monomial form costs a few 1e-6 of float64 cancellation no
    matter how exactly it is converted, and the gadget's own sqrt fit error
    (about 5e-2 * R worst case near tied inputs, 2e-4 * R on average) is
    orders of magnitude above that.
    """
    series, _ = sqrt_series(spec)
    even = [0.0] * (2 * series.degree + 1)
    for k, c in enumerate(series.coeffs):
        even[2 * k] = 0.5 * c
    folded = ChebSeries(tuple(even), -2.0 * spec.radius, 2.0 * spec.radius)
    return cheb_to_monomial(folded, tol=1e-4)


def max_pair(x: float, y: float, mode: str, spec: ApproxSpec) -> float:
    """One pairwise max under the chosen substitute."""
    if mode == "exact_abs":
        return (x + y) / 2.0 + abs(x - y) / 2.0
    if mode == "paper_literal":
        return (x + y) / 2.0 + abs(x - y)
    if mode == "poly_sqrt":
        series, _ = sqrt_series(spec)
        return (x + y) / 2.0 + cheb_eval(series, (x - y) ** 2) / 2.0
    raise ValidationError(f"unknown max mode {mode!r}; expected {MAX_MODES}")


def max_pair_poly(spec: ApproxSpec) -> SparseMultiPoly:
    """The poly_sqrt pairwise max as a polynomial in two variables."""
    gap = mp_add(mp_var(2, 0), mp_scale(mp_var(2, 1), -1.0))
    poly = compose_uni_with_mp(pair_gap_poly(spec), gap)
    half_sum = mp_add(mp_scale(mp_var(2, 0), 0.5), mp_scale(mp_var(2, 1), 0.5))
    return mp_add(poly, half_sum)


def max_chain(values, mode: str, spec: ApproxSpec) -> float:
    """Window max as a right fold of pairwise maxes.

    max(x1, ..., xm) = max(x1, max(x2, ..., max(x_{m-1}, x_m))).
    """
    vs = [float(v) for v in values]
    if not vs:
        raise ValidationError("empty window")
    acc = vs[-1]
    for v in vs[-2::-1]:
        acc = max_pair(v, acc, mode, spec)
    return acc


def power_mean_max(values, d: int) -> float:
    """(sum_i x_i^d)^(1/d); at d = 1 the plain window sum (a scaled mean
    without the division), the form a network must be trained with."""
    vs = np.asarray(values, dtype=np.float64)
    if vs.size == 0:
        raise ValidationError("empty window")
    if d == 1:
        return float(np.sum(vs))
    if d < 1 or d % 2 != 0:
        raise ValidationError("degree must be 1 or a positive even number")
    return float(np.sum(vs ** d) ** (1.0 / d))


# ---------------------------------------------------------------------------
# interval calibration
# ---------------------------------------------------------------------------

def calibrate_intervals(m: ModelGraph, inputs: np.ndarray,
                        percentile: float = PERCENTILE,
                        safety: float = SAFETY,
                        floor: float = FLOOR_RADIUS) -> list[float]:
    """Per-layer fit radii from the distribution of pre-activations.

    R_l = max(floor, safety * percentile(|pre-activation|)).  The model must
    already be free of batch_norm layers so the radii line up with the layer
    list the compiler will see.
    """
    if m.has_batch_norm():
        raise ValidationError(
            "calibration needs a folded model; run fold_batch_norm first")
    if not 0.0 < percentile <= 100.0:
        raise ValidationError("percentile must be in (0, 100]")
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] < 1:
        raise ValidationError("calibration needs a non-empty (N, width) batch")
    radii = []
    for trace in layer_preactivations(m, inputs):
        q = float(np.percentile(np.abs(trace), percentile))
        radii.append(max(floor, safety * q))
    return radii


# ---------------------------------------------------------------------------
# experimental: smooth output map
# ---------------------------------------------------------------------------

def exp_series(degree: int, radius: float) -> tuple[ChebSeries, FitReport]:
    """Chebyshev fit of exp on [-R, R]; a building block for replacing the
    output normalisation when class scores rather than an argmax are needed.
    The division by the score total has no polynomial substitute here, so
    this stays out of the compile pipeline."""
    series = cheb_fit(np.exp, degree, -radius, radius)
    return series, fit_report(series, np.exp)
