"""Block operator matrices over a component layout and the transforms J_k, Gamma_k.

``J_k`` keeps the central square (components with ``|n| <= k``) and the
diagonal blocks outside it.  ``Gamma_k`` divides every entry that couples two
different components, at least one of them outside the central square, by the
difference of the corresponding diagonal entries of A0; everything else is
zeroed.  With A0 diagonal this is exactly the solution ``Y`` of
``A0 Y - Y A0 = X - J_k X`` with ``J_k Y = 0``, and it covers the generic
per/ap case (denominators ``lambda_m - lambda_n`` and ``lambda_m - lambda_n -/+ beta``),
the resonant regrouping and the Dirichlet case in one rule.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .freebasis import Layout, distance_table, delta_from_table
from .potential import DerivedPotential, interval_coefficient


class ZeroDenominatorError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class BlockMatrix:
    data: np.ndarray
    layout: Layout

    def __post_init__(self):
        if self.data.shape != (self.layout.dim, self.layout.dim):
            raise ValueError(f"data shape {self.data.shape} does not match layout dim {self.layout.dim}")

    @classmethod
    def zeros(cls, layout: Layout) -> "BlockMatrix":
        return cls(np.zeros((layout.dim, layout.dim), dtype=complex), layout)

    @classmethod
    def identity(cls, layout: Layout) -> "BlockMatrix":
        return cls(np.eye(layout.dim, dtype=complex), layout)

    @property
    def window(self) -> int:
        return self.layout.window

    def block(self, m: int, n: int) -> np.ndarray:
        return self.data[np.ix_(self.layout.indices(m), self.layout.indices(n))]

    def like(self, data) -> "BlockMatrix":
        return BlockMatrix(np.asarray(data, dtype=complex), self.layout)

    def __add__(self, other):
        return self.like(self.data + other.data)

    def __sub__(self, other):
        return self.like(self.data - other.data)

    def __neg__(self):
        return self.like(-self.data)

    def __matmul__(self, other):
        return multiply(self, other)

    def scaled(self, c) -> "BlockMatrix":
        return self.like(c * self.data)


def hs_norm(x: BlockMatrix | np.ndarray) -> float:
    data = x.data if isinstance(x, BlockMatrix) else x
    return float(np.linalg.norm(data))


def op_norm_estimate(x: BlockMatrix | np.ndarray) -> float:
    data = x.data if isinstance(x, BlockMatrix) else x
    if data.size == 0:
        return 0.0
    return float(np.linalg.norm(data, 2))


def multiply(x: BlockMatrix, y: BlockMatrix) -> BlockMatrix:
    return x.like(x.data @ y.data)


def add_scaled(x: BlockMatrix, y: BlockMatrix, alpha=1.0) -> BlockMatrix:
    """x + alpha * y"""
    return x.like(x.data + alpha * y.data)


def j_mask(layout: Layout, k: int) -> np.ndarray:
    c = layout.central(k)
    return layout.same_component() | (c[:, None] & c[None, :])


def gamma_mask(layout: Layout, k: int) -> np.ndarray:
    return ~j_mask(layout, k)


def apply_j(x: BlockMatrix, k: int) -> BlockMatrix:
    return x.like(np.where(j_mask(x.layout, k), x.data, 0))


def gamma_weights(layout: Layout, k: int) -> np.ndarray:
    """Entrywise multipliers of Gamma_k (zero where Gamma_k vanishes)."""
    mask = gamma_mask(layout, k)
    denom = layout.diag[:, None] - layout.diag[None, :]
    if np.any(denom[mask] == 0):
        raise ZeroDenominatorError("zero denominator in Gamma: spectral components overlap")
    out = np.zeros(denom.shape, dtype=complex)
    out[mask] = 1.0 / denom[mask]
    return out


def apply_gamma(x: BlockMatrix, k: int) -> BlockMatrix:
    return x.like(x.data * gamma_weights(x.layout, k))


def free_gamma_mask(layout: Layout, k: int) -> np.ndarray:
    """Support of Gamma_k^0: coordinates whose Fourier indices differ, one of them beyond k."""
    f = layout.freq
    big = np.maximum(np.abs(f)[:, None], np.abs(f)[None, :]) > k
    return (f[:, None] != f[None, :]) & big


def apply_gamma_free(x: BlockMatrix, bc_kind: str, omega: float, k: int = 0) -> BlockMatrix:
    """Gamma_k^0: the transform built on the free operator (denominators lambda_m - lambda_n).

    Components are the free eigenspaces, read off each coordinate's Fourier
    index, so this works on regrouped layouts as well.
    """
    from .potential import BoundaryCondition

    lay = x.layout
    lam = BoundaryCondition(bc_kind).ladder(omega, lay.freq)
    mask = free_gamma_mask(lay, k)
    denom = lam[:, None] - lam[None, :]
    out = np.zeros_like(x.data)
    out[mask] = x.data[mask] / denom[mask]
    return x.like(out)


def gamma_norm(layout: Layout, k: int = 0) -> float:
    """Operator norm of Gamma_k on Hilbert-Schmidt matrices over the window.

    Gamma_k is a Schur multiplier, so its HS norm is the largest multiplier; this
    equals the value obtained by maximising over elementary matrices.
    """
    w = gamma_weights(layout, k)
    return float(np.max(np.abs(w))) if w.size else 0.0


def delta_p(layout: Layout) -> float:
    return delta_from_table(distance_table(layout))


def commutator_residual(a0: BlockMatrix, x: BlockMatrix, k: int) -> float:
    """|| A0 (Gamma_k X) - (Gamma_k X) A0 - (X - J_k X) ||_2"""
    g = apply_gamma(x, k)
    lhs = a0.data @ g.data - g.data @ a0.data
    rhs = x.data - apply_j(x, k).data
    return hs_norm(lhs - rhs)


def build_q(derived: DerivedPotential, layout: Layout) -> BlockMatrix:
    """Matrix of multiplication by [[0, q2], [q3, 0]] in the free coordinates."""
    n = layout.freq
    if derived.bc.kind == "dir":
        # <Q s_n, s_m> = theta_{m+n}
        theta = dirichlet_theta(derived, 2 * layout.window)
        off = 2 * layout.window
        return BlockMatrix(theta[n[:, None] + n[None, :] + off], layout)
    eps = derived.bc.epsilon
    rows, cols = n[:, None], n[None, :]
    pr, pc = layout.part[:, None], layout.part[None, :]
    data = np.where((pr == 1) & (pc == 2), derived.q2(-rows - cols - eps), 0)
    data = data + np.where((pr == 2) & (pc == 1), derived.q3(rows + cols + eps), 0)
    return BlockMatrix(data.astype(complex), layout)


def dirichlet_theta(derived: DerivedPotential, kmax: int) -> np.ndarray:
    """theta_k for k = -kmax..kmax (array index k + kmax).

    Even k: (q2^(-k/2) + q3^(k/2)) / 2.  Odd k: the same with the coefficients of
    q2 e^{-i pi t/omega} and q3 e^{i pi t/omega}; both cases are the interval
    integrals (1/2 omega) int_0^omega (q2 e^{i pi k t/omega} + q3 e^{-i pi k t/omega}).
    """
    ks = np.arange(-kmax, kmax + 1)
    omega = derived.omega
    a = interval_coefficient(derived.q2_table, omega, np.pi * ks)
    b = interval_coefficient(derived.q3_table, omega, -np.pi * ks)
    theta = 0.5 * (a + b)
    even = ks % 2 == 0
    # exact Fourier coefficients where available
    theta[even] = 0.5 * (derived.q2(-ks[even] // 2) + derived.q3(ks[even] // 2))
    return theta


def to_csv(x: BlockMatrix) -> str:
    """Per-entry dump with columns m, n, j, k, re, im (blocks indexed by component labels)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["m", "n", "j", "k", "re", "im"])
    lay = x.layout
    for m in lay.labels:
        rows = lay.indices(m)
        for n in lay.labels:
            cols = lay.indices(n)
            for a, i in enumerate(rows, start=1):
                for b, jj in enumerate(cols, start=1):
                    v = x.data[i, jj]
                    if v != 0:
                        writer.writerow([m, n, a, b, repr(float(v.real)), repr(float(v.imag))])
    return buf.getvalue()


def from_csv(text: str, layout: Layout) -> BlockMatrix:
    data = np.zeros((layout.dim, layout.dim), dtype=complex)
    reader = csv.DictReader(io.StringIO(text))
    for row in reader:
        i = layout.indices(int(row["m"]))[int(row["j"]) - 1]
        j = layout.indices(int(row["n"]))[int(row["k"]) - 1]
        data[i, j] = complex(float(row["re"]), float(row["im"]))
    return BlockMatrix(data, layout)
