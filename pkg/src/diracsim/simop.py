"""Method of similar operators on a finite window.

Two similarity steps turn ``A0 - Q`` into the block operator ``A0 - V``:

1. a coarse step with cut ``k``: ``(A0 - Q)(I + Gamma_k Q) = (I + Gamma_k Q)(A0 - B)``;
2. a fixed-point step with cut ``m``: ``(A0 - B)(I + Gamma_m X) = (I + Gamma_m X)(A0 - J_m X)``
   where ``X = Phi(X)``.

On a finite window both identities hold exactly in matrix algebra, so the
similarity residual of the assembled transform only carries rounding error.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .blockmat import (BlockMatrix, apply_gamma, apply_j, gamma_weights, hs_norm, j_mask)
from .freebasis import Layout, distance_table

log = logging.getLogger(__name__)

DEFAULT_MARGIN = 0.1
DEFAULT_TOL = 1e-13
DEFAULT_MAX_ITER = 200


class SimilarityError(RuntimeError):
    pass


class TrivialCase(Exception):
    """B lives on the central component only; the coarse step is already final."""


class NoConvergence(SimilarityError):
    def __init__(self, message, ratio):
        super().__init__(message)
        self.ratio = ratio


# --- coarse step -----------------------------------------------------------


def choose_k(q: BlockMatrix, margin: float = DEFAULT_MARGIN) -> int:
    """Smallest k with ||Gamma_k Q||_2 <= 1 - margin."""
    window = q.layout.window
    for k in range(window + 1):
        if hs_norm(apply_gamma(q, k)) <= 1.0 - margin:
            return k
    return window


@dataclass(frozen=True, eq=False)
class CoarseStep:
    k: int
    b: BlockMatrix
    gamma_q: BlockMatrix
    correction_nuclear: float  # nuclear norm of B - J_0 Q - Q Gamma_0 Q


def build_b(q: BlockMatrix, k: int, cond_limit: float = 1e12) -> CoarseStep:
    """B = J_k Q + (I + Gamma_k Q)^{-1} (Q Gamma_k Q - (Gamma_k Q) J_k Q)."""
    gq = apply_gamma(q, k)
    jq = apply_j(q, k)
    eye = np.eye(q.layout.dim)
    lhs = eye + gq.data
    if np.linalg.cond(lhs) > cond_limit:
        raise SimilarityError(f"I + Gamma_{k} Q is numerically singular")
    rhs = q.data @ gq.data - gq.data @ jq.data
    b = jq.data + np.linalg.solve(lhs, rhs)
    lead = apply_j(q, 0).data + q.data @ apply_gamma(q, 0).data
    nuclear = float(np.sum(np.linalg.svd(b - lead, compute_uv=False)))
    return CoarseStep(k, q.like(b), gq, nuclear)


# --- weights ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WeightData:
    """Weights indexed by |n| = 0..N+1 (the last entry is the empty tail, zero)."""

    alpha: np.ndarray
    alpha_prime: np.ndarray
    alpha_tilde: np.ndarray
    delta_p: float
    b_star: float  # ||B||_* of the weighted space

    def star_norm(self, x: BlockMatrix) -> float:
        return star_norm(x, self.alpha)


def _row_col_norms(x: BlockMatrix):
    """Squared HS norms of P_n X and X P_n per component label."""
    lay = x.layout
    sq = np.abs(x.data) ** 2
    rows = {lab: float(sq[lay.indices(lab), :].sum()) for lab in lay.labels}
    cols = {lab: float(sq[:, lay.indices(lab)].sum()) for lab in lay.labels}
    return rows, cols


def _tails(norms: dict, window: int) -> np.ndarray:
    """t[n] = sum_{|k| >= n} norms[k] for n = 0..window+1."""
    per_abs = np.zeros(window + 2)
    for lab, v in norms.items():
        per_abs[abs(lab)] += v
    return np.cumsum(per_abs[::-1])[::-1]


def _scale(x: BlockMatrix, alpha: np.ndarray, side: str) -> np.ndarray:
    lay = x.layout
    a = alpha[np.abs(lay.label)]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(a > 0, 1.0 / np.where(a > 0, a, 1.0), 0.0)
    return x.data * (inv[None, :] if side == "right" else inv[:, None])


def star_norm(x: BlockMatrix, alpha: np.ndarray) -> float:
    """max(||sum a_n^{-1} X P_n||_2, ||sum a_n^{-1} P_n X||_2).

    Components with alpha = 0 carry no mass of B; their columns/rows are dropped.
    """
    return max(hs_norm(_scale(x, alpha, "right")), hs_norm(_scale(x, alpha, "left")))


def weights_of(b: BlockMatrix, delta_p: float | None = None) -> WeightData:
    lay = b.layout
    window = lay.window
    norm_b = hs_norm(b)
    rows, cols = _row_col_norms(b)
    tail_r = _tails(rows, window)
    tail_c = _tails(cols, window)
    if norm_b == 0 or max(tail_r[1], tail_c[1]) == 0:
        raise TrivialCase("B is supported on the central component")
    alpha = norm_b ** -0.5 * np.maximum(tail_r, tail_c) ** 0.25
    alpha = np.minimum(alpha, 1.0)

    d = distance_table(lay)
    labels = np.asarray(lay.labels)
    if delta_p is None:
        delta_p = float(np.max(1.0 / d[np.isfinite(d)]))
    abs_lab = np.abs(labels)
    alpha_prime = np.zeros(window + 2)
    for n in range(window):
        inner = abs_lab <= n
        outer = abs_lab > n
        sub = d[np.ix_(outer, inner)]
        alpha_prime[n + 1] = float(np.max(alpha[abs_lab[inner]][None, :] / sub))
    alpha_tilde = delta_p * alpha + alpha_prime
    b_star = star_norm(b, alpha)
    return WeightData(alpha, alpha_prime, alpha_tilde, float(delta_p), b_star)


def choose_m(weights: WeightData) -> int:
    """Smallest m with 4 alpha~_{m+1} ||B||_* < 1 (m = N always qualifies)."""
    window = len(weights.alpha) - 2
    for m in range(window + 1):
        if 4.0 * weights.alpha_tilde[m + 1] * weights.b_star < 1.0:
            return m
    return window


# --- fixed point -----------------------------------------------------------


def phi_map(x: np.ndarray, b: np.ndarray, jm: np.ndarray, gm: np.ndarray) -> np.ndarray:
    """Phi(X) = B Gamma X - (Gamma X)(J B) - (Gamma X) J(B Gamma X) + B on dense arrays."""
    gx = x * gm
    bgx = b @ gx
    return bgx - gx @ (b * jm) - gx @ (bgx * jm) + b


@dataclass(frozen=True, eq=False)
class FixedPointTrace:
    xstar: BlockMatrix
    iterations: int
    residuals: list  # HS norm of X_{i+1} - X_i
    star_steps: list  # *-norm of X_{i+1} - X_i
    ratios: list  # successive *-norm step ratios above the noise floor


def fixed_point(b: BlockMatrix, m: int, weights: WeightData | None = None, tol: float = DEFAULT_TOL,
                max_iter: int = DEFAULT_MAX_ITER) -> FixedPointTrace:
    lay = b.layout
    jm = j_mask(lay, m)
    gm = gamma_weights(lay, m)
    alpha = weights.alpha if weights is not None else None
    x = np.zeros_like(b.data)
    residuals, star_steps = [], []
    scale = max(hs_norm(b), 1.0)
    for it in range(1, max_iter + 1):
        nxt = phi_map(x, b.data, jm, gm)
        diff = nxt - x
        residuals.append(hs_norm(diff))
        if alpha is not None:
            star_steps.append(star_norm(b.like(diff), alpha))
        x = nxt
        if residuals[-1] < tol:
            break
        if not np.isfinite(residuals[-1]):
            break
    else:
        ratio = _ratios(star_steps or residuals, scale)
        raise NoConvergence(f"fixed point did not converge in {max_iter} iterations", max(ratio, default=np.nan))
    if not np.isfinite(residuals[-1]):
        raise NoConvergence("fixed point iteration diverged", float("inf"))
    for i, r in enumerate(residuals):
        log.debug("iteration %d residual %.3e", i + 1, r)
    return FixedPointTrace(b.like(x), it, residuals, star_steps, _ratios(star_steps, scale))


def _ratios(steps, scale, floor=1e-11) -> list:
    out = []
    for prev, cur in zip(steps, steps[1:]):
        if prev > floor * scale and cur > floor * scale:
            out.append(cur / prev)
    return out


# --- assembly --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SimilarityResult:
    k: int
    m: int
    a0: BlockMatrix
    q: BlockMatrix
    b: BlockMatrix
    xstar: BlockMatrix
    v: BlockMatrix
    u: BlockMatrix
    gamma_q: BlockMatrix
    gamma_x: BlockMatrix
    iterations: int
    residuals: list
    ratios: list
    weights: WeightData | None
    similarity_residual: float
    min_singular: float
    correction_nuclear: float
    trivial: bool = False
    notes: list = field(default_factory=list)

    @property
    def layout(self) -> Layout:
        return self.a0.layout

    @property
    def contraction_bound(self) -> float:
        if self.weights is None:
            return 0.0
        return 4.0 * self.weights.alpha_tilde[self.m + 1] * self.weights.b_star

    @property
    def contraction_ratio(self) -> float:
        return max(self.ratios, default=0.0)

    def i_plus_u(self) -> np.ndarray:
        return np.eye(self.layout.dim) + self.u.data

    def reduced(self) -> BlockMatrix:
        """A0 - V, block diagonal outside the central (2m+1)-square."""
        return self.a0 - self.v


def assemble(a0: BlockMatrix, q: BlockMatrix, coarse: CoarseStep, m: int, trace: FixedPointTrace,
             weights: WeightData | None) -> SimilarityResult:
    v = apply_j(trace.xstar, m)
    gx = apply_gamma(trace.xstar, m)
    gq = coarse.gamma_q
    u = q.like(gq.data + gx.data + gq.data @ gx.data)
    eye = np.eye(a0.layout.dim)
    ipu = eye + u.data
    lhs = (a0.data - q.data) @ ipu
    rhs = ipu @ (a0.data - v.data)
    residual = hs_norm(lhs - rhs)
    smin = float(np.linalg.svd(ipu, compute_uv=False)[-1]) if ipu.size else 1.0
    return SimilarityResult(
        k=coarse.k, m=m, a0=a0, q=q, b=coarse.b, xstar=trace.xstar, v=v, u=u, gamma_q=gq, gamma_x=gx,
        iterations=trace.iterations, residuals=trace.residuals, ratios=trace.ratios, weights=weights,
        similarity_residual=residual, min_singular=smin, correction_nuclear=coarse.correction_nuclear,
    )


def run_similarity(a0: BlockMatrix, q: BlockMatrix, margin: float = DEFAULT_MARGIN, tol: float = DEFAULT_TOL,
                   max_iter: int = DEFAULT_MAX_ITER, delta_p: float | None = None,
                   k: int | None = None, m: int | None = None, residual_limit: float | None = None) -> SimilarityResult:
    """Full pipeline: choose k, build B, weights, choose m, iterate, assemble."""
    if k is None:
        k = choose_k(q, margin)
    coarse = build_b(q, k)
    try:
        weights = weights_of(coarse.b, delta_p)
    except TrivialCase:
        trace = FixedPointTrace(coarse.b, 0, [], [], [])
        res = assemble(a0, q, coarse, 0, trace, None)
        res.notes.append("B is central; coarse step is final")
        return SimilarityResult(**{**res.__dict__, "trivial": True})
    if m is None:
        m = choose_m(weights)
    trace = fixed_point(coarse.b, m, weights, tol, max_iter)
    res = assemble(a0, q, coarse, m, trace, weights)
    if residual_limit is not None and res.similarity_residual > residual_limit:
        res.notes.append(f"similarity residual {res.similarity_residual:.3e} above limit {residual_limit:.1e}")
        log.warning(res.notes[-1])
    if res.contraction_ratio > res.contraction_bound + 1e-10:
        res.notes.append(f"observed contraction {res.contraction_ratio:.3e} above bound {res.contraction_bound:.3e}")
    return res


def iteration_log_csv(result: SimilarityResult) -> str:
    lines = ["iteration,residual"]
    lines += [f"{i},{r!r}" for i, r in enumerate(result.residuals, start=1)]
    return "\n".join(lines) + "\n"
