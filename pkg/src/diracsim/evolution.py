"""The group exp(i t L) assembled from block exponentials, and equiconvergence diagnostics.

All operators act on coefficient vectors over the window coordinates of a
:class:`~diracsim.freebasis.Layout`.  ``Z = W (I + U)`` carries the block form
``A0 - V`` to the window matrix ``W (A0 - Q) W^{-1}`` of the original operator;
``W^{-1}`` is the dense inverse of the window matrix of ``W``, so the
conjugation is exact in matrix algebra.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .potential import DerivedPotential, w_fourier_operator
from .simop import SimilarityResult


def exp_block2(block: np.ndarray, t: float) -> np.ndarray:
    """exp(i t M) for a 2x2 matrix M in closed form.

    e^{it(a+d)/2} [cos(rho t) I + i sin(rho t)/rho [[(a-d)/2, b], [c, (d-a)/2]]],
    rho^2 = (a-d)^2/4 + bc; sin(rho t)/rho is t at rho = 0.
    """
    a, b = block[0, 0], block[0, 1]
    c, d = block[1, 0], block[1, 1]
    half = 0.5 * (a - d)
    rho = np.sqrt(complex(half * half + b * c))
    x = rho * t
    if abs(x) < 1e-4:
        # series of sin(x)/x, accurate to well below 1e-16 in this range
        x2 = x * x
        sinc = t * (1 - x2 / 6 + x2 * x2 / 120)
    else:
        sinc = np.sin(x) / rho
    mat = np.array([[half, b], [c, -half]], dtype=complex)
    return np.exp(0.5j * t * (a + d)) * (np.cos(x) * np.eye(2) + 1j * sinc * mat)


def exp_series(mat: np.ndarray, t: float, terms: int = 30) -> np.ndarray:
    """exp(i t M) by its truncated power series (reference only)."""
    out = np.eye(mat.shape[0], dtype=complex)
    term = np.eye(mat.shape[0], dtype=complex)
    for j in range(1, terms):
        term = term @ (1j * t * mat) / j
        out = out + term
    return out


def spectral_gamma(derived: DerivedPotential) -> float:
    """Growth bound of the diagonal free part: max |Im p1(0)|, |Im p4(0)| (or |Im nu|)."""
    if derived.bc.kind == "dir":
        return abs(derived.nu.imag)
    return max(abs(derived.spec.mean(1).imag), abs(derived.spec.mean(4).imag))


@dataclass(frozen=True, eq=False)
class GroupEvaluator:
    derived: DerivedPotential
    result: SimilarityResult
    w: np.ndarray
    w_inv: np.ndarray
    z: np.ndarray  # W (I + U)
    z_inv: np.ndarray  # (I + U)^{-1} W^{-1}
    ipu_inv: np.ndarray
    central_idx: np.ndarray
    central_gen: np.ndarray
    tail_gens: dict  # label -> (indices, block)
    gamma: float

    @classmethod
    def build(cls, derived: DerivedPotential, result: SimilarityResult) -> "GroupEvaluator":
        lay = result.layout
        w = w_fourier_operator(derived, lay)
        w_inv = np.linalg.inv(w)
        ipu = result.i_plus_u()
        ipu_inv = np.linalg.inv(ipu)
        reduced = result.reduced().data
        central_idx = np.flatnonzero(lay.central(result.m))
        tails = {}
        for lab in lay.labels:
            if abs(lab) > result.m:
                idx = lay.indices(lab)
                tails[lab] = (idx, reduced[np.ix_(idx, idx)])
        return cls(derived, result, w, w_inv, w @ ipu, ipu_inv @ w_inv, ipu_inv, central_idx,
                   reduced[np.ix_(central_idx, central_idx)], tails, spectral_gamma(derived))

    @property
    def dim(self) -> int:
        return self.result.layout.dim

    def generator(self) -> np.ndarray:
        """Window matrix W (A0 - Q) W^{-1} of the operator in free coordinates."""
        r = self.result
        return self.w @ (r.a0.data - r.q.data) @ self.w_inv

    def tilde_matrix(self, t: float) -> np.ndarray:
        out = np.zeros((self.dim, self.dim), dtype=complex)
        c = self.central_idx
        out[np.ix_(c, c)] = scipy.linalg.expm(1j * t * self.central_gen)
        for idx, blk in self.tail_gens.values():
            if len(idx) == 1:
                out[idx[0], idx[0]] = np.exp(1j * t * blk[0, 0])
            else:
                out[np.ix_(idx, idx)] = exp_block2(blk, t)
        return out

    def tilde_group(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.tilde_matrix(t) @ x

    def similarity_group(self, t: float, x: np.ndarray) -> np.ndarray:
        """(I + U) T~(t) (I + U)^{-1} x: the group of A0 - Q."""
        return self.result.i_plus_u() @ (self.tilde_group(t, self.ipu_inv @ x))

    def full_group(self, t: float, x: np.ndarray) -> np.ndarray:
        """T(t) x = W (I + U) T~(t) (I + U)^{-1} W^{-1} x."""
        return self.z @ self.tilde_group(t, self.z_inv @ x)

    def truncation_bound(self, x: np.ndarray, t: float, n: int) -> tuple[float, float]:
        """(actual, bound) for dropping all components with |k| > n from Z T~(t) Z^{-1} x."""
        if n < self.result.m:
            raise ValueError(f"n = {n} must be at least m = {self.result.m}")
        lay = self.result.layout
        y = self.z_inv @ x
        keep = np.abs(lay.label) <= n
        full = self.full_group(t, x)
        partial = self.z @ self.tilde_group(t, np.where(keep, y, 0))
        actual = float(np.linalg.norm(full - partial))
        total = 0.0
        for lab, (idx, _) in self.tail_gens.items():
            if abs(lab) > n:
                vk = self.result.v.data[np.ix_(idx, idx)]
                growth = np.exp(2 * abs(t) * (np.linalg.norm(vk, 2) + self.gamma))
                total += growth * float(np.sum(np.abs(y[idx]) ** 2))
        bound = float(np.linalg.norm(self.z, 2) * np.sqrt(total))
        return actual, bound


def smooth_state(layout, width: float = 4.0, seed: int = 0) -> np.ndarray:
    """Deterministic state with Gaussian-decaying random coefficients, unit norm."""
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal(layout.dim) + 1j * rng.standard_normal(layout.dim)
    x = raw * np.exp(-(layout.freq / width) ** 2)
    return x / np.linalg.norm(x)


def ode_reference(generator: np.ndarray, x0: np.ndarray, times, rtol: float = 1e-12, atol: float = 1e-14):
    """Integrate y' = i G y with an adaptive 8th-order Runge-Kutta scheme."""
    from scipy.integrate import solve_ivp

    sol = solve_ivp(lambda _t, y: 1j * (generator @ y), (0.0, float(max(times))), x0.astype(complex),
                    method="DOP853", t_eval=np.asarray(times, dtype=float), rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(sol.message)
    return sol.y.T


def trace_csv(times, states) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "index", "re", "im"])
    for t, state in zip(times, states):
        for i, v in enumerate(state):
            w.writerow([repr(float(t)), i, repr(float(v.real)), repr(float(v.imag))])
    return buf.getvalue()


# --- equiconvergence -------------------------------------------------------


@dataclass(frozen=True)
class EquiconvergenceScan:
    ells: list
    norms: list
    floor: float
    condition: float
    cross_max: float  # max ||Pbar_i Pbar_j||_2 over distinct components
    sum_defect: float  # ||sum Pbar - I||_2

    def nonincreasing(self, slack: float | None = None) -> bool:
        slack = self.floor if slack is None else slack
        return all(b <= a + slack for a, b in zip(self.norms, self.norms[1:]))

    def decrease_factor(self, stop: int | None = None) -> float:
        vals = dict(zip(self.ells, self.norms))
        last = vals[stop] if stop is not None else self.norms[-1]
        return self.norms[0] / max(last, self.floor, 1e-300)

    def to_csv(self) -> str:
        lines = ["ell,hs_norm"] + [f"{ell},{v!r}" for ell, v in zip(self.ells, self.norms)]
        return "\n".join(lines) + "\n"


def component_groups(result: SimilarityResult) -> list:
    """Index sets of the central block and each tail component."""
    lay = result.layout
    groups = [np.flatnonzero(lay.central(result.m))]
    groups += [lay.indices(lab) for lab in lay.labels if abs(lab) > result.m]
    return groups


def equiconvergence_scan(evaluator: GroupEvaluator, stop: int | None = None) -> EquiconvergenceScan:
    """ell -> || W [(I+U) Pi_ell (I+U)^{-1} - Pi_ell] W^{-1} ||_2 for ell = m .. stop.

    ``Pi_ell`` is the projection onto all components with |n| <= ell.
    """
    res = evaluator.result
    lay = res.layout
    stop = lay.window if stop is None else stop
    ipu = res.i_plus_u()
    ipu_inv = evaluator.ipu_inv
    w, w_inv = evaluator.w, evaluator.w_inv
    ells, norms = [], []
    for ell in range(res.m, stop + 1):
        keep = np.abs(lay.label) <= ell
        diff = ipu[:, keep] @ ipu_inv[keep, :]
        diff[np.ix_(keep, keep)] -= np.eye(int(keep.sum()))
        norms.append(float(np.linalg.norm(w @ diff @ w_inv)))
        ells.append(ell)
    z, zi = evaluator.z, evaluator.z_inv
    cond = float(np.linalg.cond(z))
    eps = np.finfo(float).eps
    floor = max(10 * eps * cond * np.sqrt(lay.dim), evaluator.derived.truncation_tail(lay.window) ** 0.5)
    cross, total = resolution_checks(z, zi, component_groups(res))
    return EquiconvergenceScan(ells, norms, floor, cond, cross, total)


def resolution_checks(z: np.ndarray, z_inv: np.ndarray, groups: list) -> tuple[float, float]:
    """max_{i != j} ||Pbar_i Pbar_j||_F and ||sum Pbar - I||_2 with Pbar_i = Z[:, I_i] Z^{-1}[I_i, :].

    ``Pbar_i Pbar_j = Z[:, I_i] M Z^{-1}[I_j, :]`` with ``M = (Z^{-1} Z)[I_i, I_j]``;
    its Frobenius norm is evaluated through the small Gram matrices of the outer factors.
    """
    inner = z_inv @ z
    left = [z[:, g].conj().T @ z[:, g] for g in groups]
    right = [z_inv[g, :] @ z_inv[g, :].conj().T for g in groups]
    cross = 0.0
    for i, gi in enumerate(groups):
        for j, gj in enumerate(groups):
            if i == j:
                continue
            m = inner[np.ix_(gi, gj)]
            val = np.trace(m.conj().T @ left[i] @ m @ right[j]).real
            cross = max(cross, float(np.sqrt(max(val, 0.0))))
    total = float(np.linalg.norm(z @ z_inv - np.eye(z.shape[0]), 2))
    return cross, total
