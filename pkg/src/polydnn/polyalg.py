"""Polynomial representations and exact symbolic arithmetic.

Three representations cover everything the compiler needs:

* ``UniPoly``      -- univariate, dense monomial coefficients, for activation
                      replacements after basis conversion.
* ``ChebSeries``   -- univariate Chebyshev series tied to a fitting interval,
                      the numerically safe form produced by interpolation.
* ``SparseMultiPoly`` -- multivariate, a map from exponent tuples to float
                      coefficients, for fully expanded network polynomials.

Coefficients stay in float64.  The Chebyshev-to-monomial conversion is the one
step where float64 is not enough (the basis change is badly conditioned at
degrees around 30), so it runs in extended precision and is verified against
the source series before anything is returned.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import mpmath
import numpy as np

from .errors import ConditioningError, ExpansionTooLargeError, ValidationError

# Default budgets.  Callers can override per call; the caps exist so a typo in
# a degree or a pathological model fails fast instead of eating the machine.
DEGREE_CAP = 40
TERM_CAP = 5_000_000
CONVERSION_TOL = 1e-6
CONVERSION_SAMPLES = 1000
PRUNE_EPS = 0.0


class ExtrapolationWarning(UserWarning):
    """A Chebyshev series was evaluated outside its fitting interval."""


# ---------------------------------------------------------------------------
# univariate, monomial basis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UniPoly:
    """Univariate polynomial; ``coeffs[j]`` multiplies x**j.

    Trailing zero coefficients are stripped on construction so degree is
    well defined; the zero polynomial is ``(0.0,)``.  Instances are hashable,
    which lets evaluation group nodes that share one activation replacement.
    """

    coeffs: tuple[float, ...]

    def __post_init__(self):
        cs = tuple(float(c) for c in self.coeffs)
        if not cs:
            cs = (0.0,)
        end = len(cs)
        while end > 1 and cs[end - 1] == 0.0:
            end -= 1
        object.__setattr__(self, "coeffs", cs[:end])

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def __call__(self, x: float) -> float:
        return uni_eval(self, x)


def uni_eval(p: UniPoly, x: float) -> float:
    """Evaluate ``p`` at ``x`` by Horner's rule."""
    acc = 0.0
    for c in reversed(p.coeffs):
        acc = acc * x + c
    return acc


def uni_eval_many(p: UniPoly, xs: np.ndarray) -> np.ndarray:
    """Vectorised Horner evaluation; same operation order as ``uni_eval``."""
    xs = np.asarray(xs, dtype=np.float64)
    acc = np.zeros_like(xs)
    for c in reversed(p.coeffs):
        acc = acc * xs + c
    return acc


# ---------------------------------------------------------------------------
# univariate, Chebyshev basis on an interval
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChebSeries:
    """Chebyshev series sum_k c_k T_k(t) with t the affine image of [lo, hi]."""

    coeffs: tuple[float, ...]
    lo: float
    hi: float

    def __post_init__(self):
        if not self.coeffs:
            raise ValidationError("ChebSeries needs at least one coefficient")
        if not (self.lo < self.hi):
            raise ValidationError(
                f"ChebSeries interval is empty: [{self.lo}, {self.hi}]")
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1


def cheb_eval(s: ChebSeries, x: float) -> float:
    """Clenshaw evaluation of ``s`` at ``x``.

    Warns (does not fail) outside [lo, hi]: extrapolated Chebyshev fits
    diverge quickly and the caller should know.
    """
    if x < s.lo or x > s.hi:
        warnings.warn(
            f"evaluating Chebyshev series at {x} outside [{s.lo}, {s.hi}]",
            ExtrapolationWarning,
            stacklevel=2,
        )
    return _clenshaw(s, x)


def cheb_eval_many(s: ChebSeries, xs: np.ndarray) -> np.ndarray:
    """Vectorised Clenshaw; warns once if any point is outside the interval."""
    xs = np.asarray(xs, dtype=np.float64)
    if np.any(xs < s.lo) or np.any(xs > s.hi):
        warnings.warn(
            f"evaluating Chebyshev series outside [{s.lo}, {s.hi}]",
            ExtrapolationWarning,
            stacklevel=2,
        )
    return _clenshaw(s, xs)


def _clenshaw(s: ChebSeries, x):
    t = (2.0 * x - s.lo - s.hi) / (s.hi - s.lo)
    b1 = np.zeros_like(t) if isinstance(t, np.ndarray) else 0.0
    b2 = b1
    for c in s.coeffs[:0:-1]:
        b1, b2 = c + 2.0 * t * b1 - b2, b1
    return s.coeffs[0] + t * b1 - b2


def cheb_to_monomial(
    s: ChebSeries,
    degree_cap: int = DEGREE_CAP,
    tol: float = CONVERSION_TOL,
    samples: int = CONVERSION_SAMPLES,
) -> UniPoly:
    """Convert a Chebyshev series to monomial coefficients in x.

    The change of basis is done in extended precision (mpmath): the T_k
    integer recurrence is exact, and the affine substitution
    t = (2x - lo - hi) / (hi - lo) is carried out as polynomial Horner in
    50+ significant digits before rounding once to float64.  The result is
    then checked against Clenshaw at ``samples`` interval points; if the
    relative disagreement exceeds ``tol`` the conversion is rejected.
    """
    if s.degree > degree_cap:
        raise ValidationError(
            f"degree {s.degree} exceeds conversion cap {degree_cap}")

    with mpmath.workdps(60):
        # Accumulate coefficients in the mapped variable t.
        acc_t = [mpmath.mpf(0)] * (s.degree + 1)
        t_prev = [mpmath.mpf(1)]            # T_0
        t_cur = [mpmath.mpf(0), mpmath.mpf(1)]  # T_1
        for k, c in enumerate(s.coeffs):
            basis = t_prev if k == 0 else t_cur
            if k >= 2:
                # T_{k} = 2 t T_{k-1} - T_{k-2}
                nxt = [mpmath.mpf(0)] * (k + 1)
                for j, b in enumerate(t_cur):
                    nxt[j + 1] += 2 * b
                for j, b in enumerate(t_prev):
                    nxt[j] -= b
                t_prev, t_cur = t_cur, nxt
                basis = t_cur
            cm = mpmath.mpf(c)
            for j, b in enumerate(basis):
                acc_t[j] += cm * b

        # Substitute t = alpha*x + beta by Horner in polynomial space.
        alpha = mpmath.mpf(2) / (mpmath.mpf(s.hi) - mpmath.mpf(s.lo))
        beta = -(mpmath.mpf(s.hi) + mpmath.mpf(s.lo)) / (
            mpmath.mpf(s.hi) - mpmath.mpf(s.lo))
        res = [acc_t[-1]]
        for k in range(len(acc_t) - 2, -1, -1):
            nxt = [mpmath.mpf(0)] * (len(res) + 1)
            for j, r in enumerate(res):
                nxt[j] += r * beta
                nxt[j + 1] += r * alpha
            nxt[0] += acc_t[k]
            res = nxt
        coeffs = tuple(float(r) for r in res)

    p = UniPoly(coeffs)

    # Verify the float64 monomial form really reproduces the series.
    xs = np.linspace(s.lo, s.hi, samples)
    ref = cheb_eval_many(s, xs)
    got = uni_eval_many(p, xs)
    rel = np.abs(got - ref) / (1.0 + np.abs(ref))
    worst = float(np.max(rel))
    if worst > tol:
        raise ConditioningError(
            f"monomial conversion of degree-{s.degree} series on "
            f"[{s.lo}, {s.hi}] is off by {worst:.3e} relative (tolerance "
            f"{tol:.1e}); use a lower degree or a narrower interval")
    return p


# ---------------------------------------------------------------------------
# multivariate, sparse monomial basis
# ---------------------------------------------------------------------------

@dataclass
class SparseMultiPoly:
    """Multivariate polynomial as {exponent tuple: coefficient}.

    Exponent tuples always have length ``num_vars``.  Terms with coefficient
    exactly zero are dropped, so structural equality of two instances means
    equality of the pruned term maps.
    """

    num_vars: int
    terms: dict[tuple[int, ...], float] = field(default_factory=dict)

    def __post_init__(self):
        if self.num_vars < 0:
            raise ValidationError("num_vars must be non-negative")
        clean: dict[tuple[int, ...], float] = {}
        for exps, c in self.terms.items():
            exps = tuple(int(e) for e in exps)
            if len(exps) != self.num_vars:
                raise ValidationError(
                    f"exponent tuple {exps} has length {len(exps)}, "
                    f"expected {self.num_vars}")
            if any(e < 0 for e in exps):
                raise ValidationError(f"negative exponent in {exps}")
            c = float(c)
            if c != 0.0:
                clean[exps] = c
        self.terms = clean

    @property
    def term_count(self) -> int:
        return len(self.terms)

    @property
    def total_degree(self) -> int:
        if not self.terms:
            return 0
        return max(sum(e) for e in self.terms)

    def __add__(self, other: "SparseMultiPoly") -> "SparseMultiPoly":
        return mp_add(self, other)

    def __mul__(self, other: "SparseMultiPoly") -> "SparseMultiPoly":
        return mp_mul(self, other)

    def __call__(self, x) -> float:
        return mp_eval(self, x)


def mp_const(num_vars: int, value: float) -> SparseMultiPoly:
    zero = (0,) * num_vars
    return SparseMultiPoly(num_vars, {zero: float(value)})


def mp_var(num_vars: int, index: int) -> SparseMultiPoly:
    if not 0 <= index < num_vars:
        raise ValidationError(f"variable index {index} out of range")
    exps = tuple(1 if i == index else 0 for i in range(num_vars))
    return SparseMultiPoly(num_vars, {exps: 1.0})


def _check_vars(a: SparseMultiPoly, b: SparseMultiPoly):
    if a.num_vars != b.num_vars:
        raise ValidationError(
            f"mixed variable counts: {a.num_vars} vs {b.num_vars}")


def mp_add(a: SparseMultiPoly, b: SparseMultiPoly,
           prune_eps: float = PRUNE_EPS) -> SparseMultiPoly:
    """Sum of two polynomials; terms with |coeff| <= prune_eps are dropped."""
    _check_vars(a, b)
    out = dict(a.terms)
    for exps, c in b.terms.items():
        s = out.get(exps, 0.0) + c
        if abs(s) <= prune_eps:
            out.pop(exps, None)
        else:
            out[exps] = s
    return SparseMultiPoly(a.num_vars, out)


def mp_scale(a: SparseMultiPoly, factor: float,
             prune_eps: float = PRUNE_EPS) -> SparseMultiPoly:
    factor = float(factor)
    if factor == 0.0:
        return SparseMultiPoly(a.num_vars, {})
    out = {}
    for exps, c in a.terms.items():
        v = c * factor
        if abs(v) > prune_eps:
            out[exps] = v
    return SparseMultiPoly(a.num_vars, out)


def mp_mul(a: SparseMultiPoly, b: SparseMultiPoly,
           term_cap: int = TERM_CAP,
           prune_eps: float = PRUNE_EPS) -> SparseMultiPoly:
    """Exact product; raises if the result would exceed ``term_cap`` terms."""
    _check_vars(a, b)
    out: dict[tuple[int, ...], float] = {}
    for ea, ca in a.terms.items():
        for eb, cb in b.terms.items():
            key = tuple(x + y for x, y in zip(ea, eb))
            s = out.get(key, 0.0) + ca * cb
            if abs(s) <= prune_eps:
                out.pop(key, None)
            else:
                out[key] = s
        if len(out) > term_cap:
            raise ExpansionTooLargeError(
                f"product exceeds the {term_cap}-term budget")
    if len(out) > term_cap:
        raise ExpansionTooLargeError(
            f"product exceeds the {term_cap}-term budget")
    return SparseMultiPoly(a.num_vars, out)


def mp_pow(a: SparseMultiPoly, n: int,
           term_cap: int = TERM_CAP,
           prune_eps: float = PRUNE_EPS) -> SparseMultiPoly:
    """a**n by repeated multiplication (matches the composition code path)."""
    if n < 0:
        raise ValidationError("negative power")
    out = mp_const(a.num_vars, 1.0)
    for _ in range(n):
        out = mp_mul(out, a, term_cap=term_cap, prune_eps=prune_eps)
    return out


def compose_uni_with_mp(p: UniPoly, q: SparseMultiPoly,
                        degree_cap: int | None = DEGREE_CAP,
                        term_cap: int = TERM_CAP,
                        prune_eps: float = PRUNE_EPS) -> SparseMultiPoly:
    """Substitute the multivariate ``q`` into the univariate ``p``.

    Powers of ``q`` are built incrementally, each formed once, and exact-zero
    coefficients of ``p`` skip their contribution entirely.
    """
    if degree_cap is not None and p.degree * q.total_degree > degree_cap:
        raise ValidationError(
            f"composition degree {p.degree}*{q.total_degree} exceeds cap "
            f"{degree_cap}")
    result = mp_const(q.num_vars, p.coeffs[0])
    power = mp_const(q.num_vars, 1.0)
    for j in range(1, p.degree + 1):
        power = mp_mul(power, q, term_cap=term_cap, prune_eps=prune_eps)
        cj = p.coeffs[j]
        if cj != 0.0:
            result = mp_add(result, mp_scale(power, cj, prune_eps),
                            prune_eps=prune_eps)
    return result


def mp_eval(a: SparseMultiPoly, x) -> float:
    """Evaluate at a point, with one power table per variable."""
    xv = np.asarray(x, dtype=np.float64).ravel()
    if xv.shape[0] != a.num_vars:
        raise ValidationError(
            f"point has {xv.shape[0]} coordinates, expected {a.num_vars}")
    max_exp = [0] * a.num_vars
    for exps in a.terms:
        for v, e in enumerate(exps):
            if e > max_exp[v]:
                max_exp[v] = e
    tables = []
    for v in range(a.num_vars):
        tab = [1.0]
        for _ in range(max_exp[v]):
            tab.append(tab[-1] * xv[v])
        tables.append(tab)
    total = 0.0
    for exps, c in a.terms.items():
        prod = c
        for v, e in enumerate(exps):
            if e:
                prod *= tables[v][e]
        total += prod
    return total


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def mp_to_dict(a: SparseMultiPoly) -> dict:
    """Canonical JSON form: terms sorted by exponent tuple."""
    return {
        "num_vars": a.num_vars,
        "terms": [
            {"exps": list(exps), "coeff": a.terms[exps]}
            for exps in sorted(a.terms)
        ],
    }


def mp_from_dict(d: dict) -> SparseMultiPoly:
    try:
        num_vars = int(d["num_vars"])
        terms = {tuple(t["exps"]): float(t["coeff"]) for t in d["terms"]}
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed polynomial dict: {exc}") from exc
    return SparseMultiPoly(num_vars, terms)


def mp_dumps(a: SparseMultiPoly) -> str:
    return json.dumps(mp_to_dict(a))


def mp_loads(s: str) -> SparseMultiPoly:
    return mp_from_dict(json.loads(s))
