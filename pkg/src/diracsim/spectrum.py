"""Eigenvalue asymptotics, far-block diagonalization and the dense eigensolver oracle."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment
from scipy.stats import linregress

from .blockmat import BlockMatrix, dirichlet_theta
from .freebasis import Layout, coincidence_shift, distance_table, perturbed_layout
from .potential import DEFAULT_BRANCH_TOL, DerivedPotential
from .simop import SimilarityResult

NOISE_FLOOR = 1e-12
MIN_FIT_POINTS = 6


# --- eigenvalues -----------------------------------------------------------


def refined_eigenvalues(matrix: np.ndarray, steps: int = 2) -> np.ndarray:
    """Eigenvalues from LAPACK, polished by Newton steps on the bordered system.

    Residuals ``A x - lambda x`` are formed in extended precision, so simple
    eigenvalues end up accurate to about the rounding of their own magnitude
    rather than ``eps * ||A|| * condition``.  Eigenvalues whose bordered system
    is singular (defective or coalescing) keep the LAPACK value.
    """
    a = np.asarray(matrix, dtype=complex)
    size = a.shape[0]
    if size == 0:
        return np.zeros(0, dtype=complex)
    values, vectors = scipy.linalg.eig(a)
    wide = a.astype(np.clongdouble)
    out = np.empty(size, dtype=complex)
    border = np.zeros((size + 1, size + 1), dtype=complex)
    for i in range(size):
        lam = np.clongdouble(values[i])
        x = vectors[:, i].astype(np.clongdouble)
        for _ in range(steps):
            resid = wide @ x - lam * x
            xd = x.astype(complex)
            border[:size, :size] = a - complex(lam) * np.eye(size)
            border[:size, size] = -xd
            border[size, :size] = xd.conj()
            border[size, size] = 0
            rhs = np.concatenate([-resid.astype(complex), [0.0]])
            try:
                step = np.linalg.solve(border, rhs)
            except np.linalg.LinAlgError:
                break
            if not np.all(np.isfinite(step)):
                break
            x = x + step[:size]
            lam = lam + step[size]
        out[i] = complex(lam)
        if not np.isfinite(out[i]) or abs(out[i] - values[i]) > 1e-6 * max(1.0, abs(values[i])):
            out[i] = values[i]
    return out


def eig2(block: np.ndarray):
    """Eigenvalues of a 2x2 block by the closed formula; trace is preserved exactly.

    Returns ``(mu1, mu2, route)``; ``mu1`` is the root continuing the (1,1)
    entry.  When the off-diagonal product dominates the diagonal gap the block
    is first balanced by ``diag(1, sqrt(c/b))`` so both off-diagonal entries
    equal ``sqrt(bc)``.
    """
    a, b = block[0, 0], block[0, 1]
    c, d = block[1, 0], block[1, 1]
    half = 0.5 * (a - d)
    route = "direct"
    if b != 0 and c != 0 and abs(b * c) > abs(half) ** 2:
        s = np.sqrt(c / b)
        b, c = b * s, c / s
        route = "balanced"
    disc = np.sqrt(half * half + b * c)
    mean = 0.5 * (a + d)
    if half != 0 and (disc * np.conj(half)).real < 0:
        disc = -disc
    return mean + disc, mean - disc, route


def tail_eigenvalues(result: SimilarityResult) -> dict:
    """Eigenvalues of each outer block of A0 - V (labels |n| > m)."""
    reduced = result.reduced()
    lay = result.layout
    out = {}
    for lab in lay.labels:
        if abs(lab) <= result.m:
            continue
        blk = reduced.block(lab, lab)
        if blk.shape == (1, 1):
            out[lab] = (complex(blk[0, 0]),)
        else:
            mu1, mu2, _ = eig2(blk)
            out[lab] = (complex(mu1), complex(mu2))
    return out


def central_eigenvalues(result: SimilarityResult) -> np.ndarray:
    reduced = result.reduced()
    idx = np.flatnonzero(result.layout.central(result.m))
    return refined_eigenvalues(reduced.data[np.ix_(idx, idx)])


def reduced_spectrum(result: SimilarityResult) -> np.ndarray:
    """Central eigenvalues together with all tail block eigenvalues."""
    tail = [v for vals in tail_eigenvalues(result).values() for v in vals]
    return np.concatenate([central_eigenvalues(result), np.asarray(tail, dtype=complex)])


def match_multisets(a, b) -> float:
    """Largest distance under the optimal bipartite matching of two equal-size multisets."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if a.shape != b.shape:
        raise ValueError(f"multisets differ in size: {a.size} vs {b.size}")
    if a.size == 0:
        return 0.0
    cost = np.abs(a[:, None] - b[None, :])
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].max())


# --- oracle ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OracleSpectrum:
    values: np.ndarray
    components: dict  # label -> tuple of eigenvalues, ordered like the layout coordinates
    ambiguous: set


def cluster(values: np.ndarray, layout: Layout) -> OracleSpectrum:
    """Assign eigenvalues to components by optimal matching with the diagonal of A0.

    An eigenvalue further than d_min/4 from its coordinate marks that component
    ambiguous; ambiguous components are kept but excluded from residual fits.
    """
    cost = np.abs(values[:, None] - layout.diag[None, :])
    rows, cols = linear_sum_assignment(cost)
    d = distance_table(layout)
    dmin = float(np.min(d[np.isfinite(d)])) if np.isfinite(d).any() else np.inf
    slots = {lab: [None] * len(layout.indices(lab)) for lab in layout.labels}
    ambiguous = set()
    for r, c in zip(rows, cols):
        lab = int(layout.label[c])
        pos = int(np.flatnonzero(layout.indices(lab) == c)[0])
        slots[lab][pos] = complex(values[r])
        if cost[r, c] > dmin / 4:
            ambiguous.add(lab)
    return OracleSpectrum(values, {k: tuple(v) for k, v in slots.items()}, ambiguous)


def oracle_spectrum(derived: DerivedPotential, window: int, a0: BlockMatrix | None = None,
                    q: BlockMatrix | None = None) -> OracleSpectrum:
    """Dense eigensolve of the window matrix A0 - Q, clustered to components."""
    from .blockmat import build_q
    from .freebasis import tilde_free_diagonal

    if a0 is None:
        a0 = tilde_free_diagonal(derived, window)
    if q is None:
        q = build_q(derived, a0.layout)
    values = refined_eigenvalues(a0.data - q.data)
    order = np.lexsort((values.imag, values.real))
    return cluster(values[order], a0.layout)


# --- predictions -----------------------------------------------------------


def first_order(derived: DerivedPotential, n: int) -> tuple:
    bc = derived.bc
    lam = float(bc.ladder(derived.omega, n))
    if bc.kind == "dir":
        theta = dirichlet_theta(derived, abs(2 * n))
        return (lam - derived.nu - theta[2 * n + abs(2 * n)],)
    p1, p4 = derived.spec.mean(1), derived.spec.mean(4)
    if derived.branch == "resonantInteger":
        return (lam - p1, lam - p1)
    return (lam - p1, lam - p4)


def _support(derived: DerivedPotential) -> np.ndarray:
    half = derived.grid // 2
    return np.arange(-half + 1, half)


@dataclass(frozen=True)
class Prediction:
    n: int
    points: tuple
    variants: dict = field(default_factory=dict)  # name -> tuple of points


def asymptotic_prediction(derived: DerivedPotential, n: int) -> Prediction:
    """Second-order prediction of the spectral component n.

    generic per/ap:
        lambda_n - p1(0) - sum_l w q2(-l-e) q3(l+e) / (2 pi (l - 2n) + w beta)
        lambda_n - p4(0) - sum_l w q2(-l-e) q3(l+e) / (2 pi (l - 2n) - w beta)
    The variant ``swapped`` pairs the denominators the other way round.

    resonant per/ap (s = -r; also r = 0 with s = 0, where both points of a component coincide):
        lambda_n - p1(0) - S_n +/- sqrt(q2(-2n-s-e) q3(2n+s+e)),
        S_n = sum_{l != 2n+s} w q2(-l-e) q3(l+e) / (2 pi (l - 2n - s));
    variant ``p4`` uses lambda_n - p4(0) for the second point.

    dir:
        lambda_n - nu - theta_{2n} - (w/pi) sum_{l != 0} theta_{l+2n}^2 / l;
    variant ``unscaled`` drops the w/pi factor.
    """
    omega = derived.omega
    bc = derived.bc
    lam = complex(bc.ladder(omega, n))
    if bc.kind == "dir":
        kmax = derived.grid // 4
        theta = dirichlet_theta(derived, kmax + 2 * abs(n))
        off = kmax + 2 * abs(n)
        ell = np.arange(-kmax, kmax + 1)
        ell = ell[ell != 0]
        tsum = np.sum(theta[ell + 2 * n + off] ** 2 / ell)
        base = lam - derived.nu - theta[2 * n + off]
        main = base - omega / np.pi * tsum
        return Prediction(n, (complex(main),), {"unscaled": (complex(base - tsum),)})

    eps = bc.epsilon
    ell = _support(derived)
    prod = derived.q2(-ell - eps) * derived.q3(ell + eps)
    p1, p4 = derived.spec.mean(1), derived.spec.mean(4)
    beta = derived.beta
    if derived.branch == "generic" and abs(derived.r) >= DEFAULT_BRANCH_TOL:
        s_plus = np.sum(omega * prod / (2 * np.pi * (ell - 2 * n) + omega * beta))
        s_minus = np.sum(omega * prod / (2 * np.pi * (ell - 2 * n) - omega * beta))
        main = (lam - p1 - s_plus, lam - p4 - s_minus)
        swapped = (lam - p1 - s_minus, lam - p4 - s_plus)
        return Prediction(n, tuple(complex(v) for v in main), {"swapped": tuple(complex(v) for v in swapped)})

    s = coincidence_shift(derived)
    idx = 2 * n + s
    keep = ell != idx
    shift = np.sum(omega * prod[keep] / (2 * np.pi * (ell[keep] - idx)))
    split = np.sqrt(complex(derived.q2(-idx - eps) * derived.q3(idx + eps)))
    main = (lam - p1 - shift + split, lam - p1 - shift - split)
    alt = (lam - p1 - shift + split, lam - p4 - shift - split)
    return Prediction(n, tuple(complex(v) for v in main), {"p4": tuple(complex(v) for v in alt)})


def set_distance(a, b) -> float:
    """Max distance under the best pairing of two small point sets (order-free)."""
    return match_multisets(list(a), list(b))


# --- balance check ---------------------------------------------------------


@dataclass(frozen=True)
class BalanceResult:
    balanced: bool
    c: float | None
    C: float | None
    checked: int


def balanced_check(derived: DerivedPotential, n_fit: int, n_max: int | None = None,
                   zero_tol: float = 1e-14) -> BalanceResult:
    """Ratio range of |q3(2n+s+e)| / |q2(-2n-s-e)| over n_fit <= |n| <= n_max."""
    if derived.branch != "resonantInteger":
        raise ValueError("balance is defined for the resonant branch only")
    eps = derived.bc.epsilon
    s = coincidence_shift(derived)
    if n_max is None:
        n_max = derived.grid // 4
    ns = np.array([n for n in range(-n_max, n_max + 1) if abs(n) >= n_fit])
    idx = 2 * ns + s
    a = np.abs(derived.q2(-idx - eps))
    b = np.abs(derived.q3(idx + eps))
    scale = max(float(a.max(initial=0)), float(b.max(initial=0)), 1e-300)
    a_zero = a < zero_tol * scale
    b_zero = b < zero_tol * scale
    if np.any(a_zero & ~b_zero) or np.any(b_zero & ~a_zero):
        return BalanceResult(False, None, None, int(np.sum(~(a_zero & b_zero))))
    live = ~a_zero
    if not live.any():
        return BalanceResult(True, None, None, 0)
    ratio = b[live] / a[live]
    return BalanceResult(True, float(ratio.min()), float(ratio.max()), int(live.sum()))


# --- residual fits ---------------------------------------------------------


@dataclass(frozen=True)
class DecayFit:
    exponent: float | None
    stderr: float | None
    points: int
    classes: dict  # "l2", "l4/3", "l1" -> bool

    @property
    def conclusive(self) -> bool:
        return self.exponent is not None


def fit_decay(ns, values, floor: float = NOISE_FLOOR) -> DecayFit:
    """Least-squares fit of |value| ~ C |n|^{-p} in log-log coordinates."""
    ns = np.abs(np.asarray(ns, dtype=float))
    values = np.abs(np.asarray(values, dtype=float))
    keep = (values > floor) & (ns > 0)
    if keep.sum() < MIN_FIT_POINTS or len(np.unique(ns[keep])) < 3:
        return DecayFit(None, None, int(keep.sum()), {})
    fit = linregress(np.log(ns[keep]), np.log(values[keep]))
    p = -float(fit.slope)
    return DecayFit(p, float(fit.stderr), int(keep.sum()),
                    {"l2": p > 0.5, "l4/3": p > 0.75, "l1": p > 1.0})


# --- report ----------------------------------------------------------------


@dataclass(eq=False)
class SpectralReport:
    bc: str
    branch: str
    window: int
    m: int
    central: list
    tail: dict
    predictions: dict  # n -> Prediction
    oracle: dict  # n -> tuple
    ambiguous: set
    first_residuals: dict  # n -> float
    second_residuals: dict  # n -> float
    variant_residuals: dict  # variant -> {n: float}
    fits: dict  # name -> DecayFit
    preferred_variant: str = "main"

    def rows(self):
        for n in sorted(self.predictions):
            pred = self.predictions[n].points
            orc = self.oracle.get(n, ())
            yield n, pred, orc, self.first_residuals.get(n), self.second_residuals.get(n)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "predicted1_re", "predicted1_im", "predicted2_re", "predicted2_im",
                    "oracle1_re", "oracle1_im", "oracle2_re", "oracle2_im", "first_residual", "second_residual"])
        for n, pred, orc, b, d in self.rows():
            p = list(pred) + [complex("nan")] * (2 - len(pred))
            o = list(orc) + [complex("nan")] * (2 - len(orc))
            w.writerow([n] + [_fmt(x) for v in p[:2] + o[:2] for x in (v.real, v.imag)] + [_fmt(b), _fmt(d)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "bc": self.bc,
            "branch": self.branch,
            "window": self.window,
            "m": self.m,
            "central_count": len(self.central),
            "ambiguous": sorted(self.ambiguous),
            "preferred_variant": self.preferred_variant,
            "fits": {k: {"exponent": f.exponent, "stderr": f.stderr, "points": f.points, "classes": f.classes}
                     for k, f in self.fits.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def build_report(derived: DerivedPotential, result: SimilarityResult, n_range: tuple | None = None,
                 oracle: OracleSpectrum | None = None) -> SpectralReport:
    """Predictions for ``n_range`` (default: every label in the window), oracle values and fits."""
    window = result.layout.window
    if oracle is None:
        oracle = oracle_spectrum(derived, window, result.a0, result.q)
    lo, hi = n_range if n_range is not None else (0, window)
    ns = [n for n in result.layout.labels if lo <= abs(n) <= hi]
    preds = {n: asymptotic_prediction(derived, n) for n in ns}
    first, second = {}, {}
    variants: dict = {}
    for n in ns:
        orc = oracle.components[n]
        first[n] = set_distance(first_order(derived, n), orc)
        second[n] = set_distance(preds[n].points, orc)
        for name, pts in preds[n].variants.items():
            variants.setdefault(name, {})[n] = set_distance(pts, orc)
    clean = [n for n in ns if n not in oracle.ambiguous and n != 0]
    fit_lo = max(lo, 1)
    fit_hi = min(hi, window // 2)
    fit_ns = [n for n in clean if fit_lo <= abs(n) <= fit_hi]
    fits = {
        "first": fit_decay(fit_ns, [first[n] for n in fit_ns]),
        "second": fit_decay(fit_ns, [second[n] for n in fit_ns]),
    }
    for name, vals in variants.items():
        fits[name] = fit_decay(fit_ns, [vals[n] for n in fit_ns])
    preferred = "main"
    main_err = np.median([second[n] for n in fit_ns]) if fit_ns else np.inf
    for name, vals in variants.items():
        err = np.median([vals[n] for n in fit_ns]) if fit_ns else np.inf
        if err < 0.5 * main_err:
            preferred = name
    central = central_eigenvalues(result).tolist()
    return SpectralReport(
        bc=derived.bc.kind, branch=derived.branch, window=window, m=result.m, central=central,
        tail=tail_eigenvalues(result), predictions=preds, oracle=oracle.components,
        ambiguous=set(oracle.ambiguous), first_residuals=first, second_residuals=second,
        variant_residuals=variants, fits=fits, preferred_variant=preferred,
    )


def splitting_errors(derived: DerivedPotential, oracle: OracleSpectrum, ns) -> dict:
    """Relative error of the resonant half-splitting against sqrt(q2 q3) at the matched index."""
    eps = derived.bc.epsilon
    s = coincidence_shift(derived)
    out = {}
    for n in ns:
        idx = 2 * n + s
        pred = abs(np.sqrt(complex(derived.q2(-idx - eps) * derived.q3(idx + eps))))
        a, b = oracle.components[n]
        observed = 0.5 * abs(a - b)
        out[n] = abs(observed - pred) / pred if pred > 0 else float("inf")
    return out


def free_spectrum_layout(derived: DerivedPotential, window: int) -> Layout:
    return perturbed_layout(derived, window)
