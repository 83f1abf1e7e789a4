"""Matrix potentials, their derived phase functions and the gauge transform W.

A potential is ingested as finite Fourier data ``p_j(t) = sum_n pHat_j[n] e^{i 2 pi n t / omega}``
for ``j = 1..4``.  All antiderivatives are then exact trigonometric sums; the
functions ``q_2``, ``q_3`` and the diagonal factors of ``W`` are sampled on a
uniform grid and transformed back with the FFT.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

BC_KINDS = ("per", "ap", "dir")

DEFAULT_GRID = 1024
DEFAULT_BRANCH_TOL = 1e-9
DEFAULT_DELTA_CAP = 1e6


class PotentialError(ValueError):
    """Raised for invalid potential data or unusable derived quantities."""


@dataclass(frozen=True)
class BoundaryCondition:
    kind: str

    def __post_init__(self):
        if self.kind not in BC_KINDS:
            raise PotentialError(f"unknown boundary condition {self.kind!r}; expected one of {BC_KINDS}")

    @property
    def epsilon(self) -> int:
        # ap shifts the Fourier index by one; dir never uses it
        return 1 if self.kind == "ap" else 0

    @property
    def block_size(self) -> int:
        return 1 if self.kind == "dir" else 2

    def ladder(self, omega: float, n):
        """Free eigenvalue(s) lambda_n."""
        n = np.asarray(n, dtype=float)
        if self.kind == "per":
            return 2.0 * np.pi * n / omega
        if self.kind == "ap":
            return np.pi * (2.0 * n + 1.0) / omega
        return np.pi * n / omega


@dataclass(frozen=True)
class PotentialSpec:
    """Sparse Fourier data of ``P(t) = [[p1, p2], [p3, p4]]`` on ``[0, omega]``."""

    omega: float
    coeffs: tuple  # four dicts {index: complex}
    bc: BoundaryCondition

    def __post_init__(self):
        if not (self.omega > 0 and math.isfinite(self.omega)):
            raise PotentialError(f"omega must be positive and finite, got {self.omega}")
        if len(self.coeffs) != 4:
            raise PotentialError("need coefficient maps for p1..p4")

    @classmethod
    def from_maps(cls, omega: float, bc: str | BoundaryCondition,
                  p1: Mapping | None = None, p2: Mapping | None = None,
                  p3: Mapping | None = None, p4: Mapping | None = None) -> "PotentialSpec":
        if isinstance(bc, str):
            bc = BoundaryCondition(bc)
        maps = []
        for p in (p1, p2, p3, p4):
            maps.append({int(k): complex(v) for k, v in (p or {}).items() if complex(v) != 0})
        return cls(float(omega), tuple(maps), bc)

    def mean(self, j: int) -> complex:
        return self.coeffs[j - 1].get(0, 0j)

    @property
    def bandwidth(self) -> int:
        idx = [abs(k) for c in self.coeffs for k in c]
        return max(idx, default=0)

    def coefficient_array(self, j: int, size: int) -> np.ndarray:
        """Coefficients of p_j in FFT order for a grid of ``size`` points."""
        out = np.zeros(size, dtype=complex)
        for k, v in self.coeffs[j - 1].items():
            out[k % size] += v
        return out

    def with_bc(self, kind: str) -> "PotentialSpec":
        return PotentialSpec(self.omega, self.coeffs, BoundaryCondition(kind))


def fourier_coefficient(table: np.ndarray, n):
    """Read coefficient(s) ``n`` from an FFT-ordered table; zero past the Nyquist band."""
    size = table.shape[-1]
    n = np.asarray(n)
    inside = np.abs(n) < size // 2
    vals = table[..., np.mod(n, size)]
    return np.where(inside, vals, 0.0)


def _expm1_ratio(a):
    """(e^{ia} - 1) / (ia), continuous at a = 0."""
    a = np.asarray(a, dtype=complex)
    small = np.abs(a) < 1e-8
    safe = np.where(small, 1.0, a)
    val = np.expm1(1j * safe) / (1j * safe)
    return np.where(small, 1.0 + 0.5j * a, val)


def interval_coefficient(table: np.ndarray, omega: float, kappa):
    """``(1/omega) int_0^omega f(t) e^{i kappa t / omega} dt`` for periodic ``f``.

    ``f`` is given by its FFT-ordered coefficient table; ``kappa`` may be any
    (complex) number, so non-integer frequencies such as the half-integer ones
    needed for the Dirichlet basis are handled exactly.
    """
    size = table.shape[-1]
    j = np.fft.fftfreq(size, d=1.0 / size)
    kappa = np.atleast_1d(np.asarray(kappa, dtype=complex))
    weights = _expm1_ratio(2.0 * np.pi * j[None, :] + kappa[:, None])
    return weights @ table


@dataclass(frozen=True, eq=False)
class DerivedPotential:
    spec: PotentialSpec
    grid: int
    nu: complex
    theta: complex
    beta: complex
    r: complex
    branch: str  # "generic" or "resonantInteger"
    r_int: int | None
    delta_p: float
    t: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)
    psi: np.ndarray = field(repr=False)
    q2_table: np.ndarray = field(repr=False)
    q3_table: np.ndarray = field(repr=False)
    # coefficients of the periodic factors e^{-i I_1} and e^{i I_4}
    w1_table: np.ndarray = field(repr=False)
    w2_table: np.ndarray = field(repr=False)

    @property
    def omega(self) -> float:
        return self.spec.omega

    @property
    def bc(self) -> BoundaryCondition:
        return self.spec.bc

    def q2(self, n):
        return fourier_coefficient(self.q2_table, n)

    def q3(self, n):
        return fourier_coefficient(self.q3_table, n)

    def truncation_tail(self, window: int) -> float:
        """Discarded energy sum_{|j| > 2N} |q2(j)|^2 + |q3(j)|^2."""
        j = np.fft.fftfreq(self.grid, d=1.0 / self.grid)
        mask = np.abs(j) > 2 * window
        return float(np.sum(np.abs(self.q2_table[mask]) ** 2 + np.abs(self.q3_table[mask]) ** 2))

    def summary(self) -> dict:
        return {
            "omega": self.omega,
            "bc": self.bc.kind,
            "grid": self.grid,
            "nu": [self.nu.real, self.nu.imag],
            "theta": [self.theta.real, self.theta.imag],
            "beta": [self.beta.real, self.beta.imag],
            "r": [self.r.real, self.r.imag],
            "branch": self.branch,
            "r_int": self.r_int,
            "delta_p": self.delta_p,
        }


def delta_p_closed_form(omega: float, beta: complex, lmax: int = 4096) -> float:
    """max{omega/2pi, max_l omega/|2 pi l - omega beta|}."""
    ell = np.arange(-lmax, lmax + 1)
    ell = ell[ell != 0]
    return float(max(omega / (2 * np.pi), np.max(omega / np.abs(2 * np.pi * ell - omega * beta))))


def classify_branch(r: complex, tol: float = DEFAULT_BRANCH_TOL) -> tuple[str, int | None]:
    nearest = round(r.real)
    if nearest != 0 and abs(r - nearest) < tol:
        return "resonantInteger", int(nearest)
    return "generic", None


def _trig_samples(table: np.ndarray) -> np.ndarray:
    return np.fft.ifft(table) * table.shape[-1]


def derive(spec: PotentialSpec, grid: int = DEFAULT_GRID, branch_tol: float = DEFAULT_BRANCH_TOL,
           delta_cap: float = DEFAULT_DELTA_CAP) -> DerivedPotential:
    """Compute nu, theta, beta, r, the phases phi/psi and the coefficients of q2, q3."""
    if grid < 4 or grid & (grid - 1):
        raise PotentialError(f"grid size must be a power of two, got {grid}")
    need = 4 * spec.bandwidth + 4
    if grid < need:
        raise PotentialError(f"grid size {grid} too small for bandwidth {spec.bandwidth}; need G >= {need}")

    omega = spec.omega
    p1m, p4m = spec.mean(1), spec.mean(4)
    nu = 0.5 * (p1m + p4m)
    beta = p1m - p4m
    r = omega * beta / (2 * np.pi)
    theta = -np.pi * r

    freq = np.fft.fftfreq(grid, d=1.0 / grid)
    t = np.arange(grid) * omega / grid
    tables = [spec.coefficient_array(j, grid) for j in (1, 2, 3, 4)]

    # periodic antiderivative parts I_j(t) = int_0^t (p_j - pHat_j(0)), I_j(0) = 0
    def periodic_antiderivative(table):
        out = np.zeros_like(table)
        nz = freq != 0
        out[nz] = table[nz] / (2j * np.pi * freq[nz] / omega)
        out[0] = -np.sum(out[nz])
        return _trig_samples(out)

    i1 = periodic_antiderivative(tables[0])
    i4 = periodic_antiderivative(tables[3])
    phi = -0.5 * beta * t - i1
    psi = -0.5 * beta * t + i4
    phase = i1 + i4  # psi - phi, periodic
    p2 = _trig_samples(tables[1])
    p3 = _trig_samples(tables[2])
    q2_table = np.fft.fft(p2 * np.exp(1j * phase)) / grid
    q3_table = np.fft.fft(p3 * np.exp(-1j * phase)) / grid
    w1_table = np.fft.fft(np.exp(-1j * i1)) / grid
    w2_table = np.fft.fft(np.exp(1j * i4)) / grid

    if spec.bc.kind == "dir":
        branch, r_int = "generic", None
        delta_p = omega / np.pi
    else:
        branch, r_int = classify_branch(complex(r), branch_tol)
        if branch == "generic":
            delta_p = delta_p_closed_form(omega, beta)
            if delta_p > delta_cap:
                raise PotentialError(
                    f"r = {complex(r):.6g} is too close to a nonzero integer: delta_P = {delta_p:.3e} exceeds cap {delta_cap:.1e}")
        else:
            delta_p = omega / (2 * np.pi)

    return DerivedPotential(
        spec=spec, grid=grid, nu=complex(nu), theta=complex(theta), beta=complex(beta), r=complex(r),
        branch=branch, r_int=r_int, delta_p=float(delta_p), t=t, phi=phi, psi=psi,
        q2_table=q2_table, q3_table=q3_table, w1_table=w1_table, w2_table=w2_table,
    )


def _phase_at(spec: PotentialSpec, j: int, t: float) -> complex:
    """I_j(t) evaluated directly from the coefficient map."""
    omega = spec.omega
    total = 0j
    for k, v in spec.coeffs[j - 1].items():
        if k != 0:
            lam = 2j * np.pi * k / omega
            total += v * (np.exp(lam * t) - 1.0) / lam
    return total


def sample_w(derived: DerivedPotential, t: float) -> np.ndarray:
    """Diagonal 2x2 matrix of the gauge transform W at time ``t``."""
    omega = derived.omega
    if not (-1e-12 <= t <= omega * (1 + 1e-12)):
        raise PotentialError(f"t = {t} outside [0, omega]")
    i1 = _phase_at(derived.spec, 1, t)
    i4 = _phase_at(derived.spec, 4, t)
    if derived.bc.kind == "dir":
        phi = -0.5 * derived.beta * t - i1
        psi = -0.5 * derived.beta * t + i4
        return np.diag([np.exp(1j * phi), np.exp(1j * psi)])
    # phi - theta t / omega and psi - theta t / omega lose their linear part
    return np.diag([np.exp(-1j * i1), np.exp(1j * i4)])


def w_fourier_operator(derived: DerivedPotential, layout, inverse: bool = False) -> np.ndarray:
    """Matrix of the multiplication operator W (or of 1/W) in the free coordinates.

    Returned as a plain dense array indexed like ``layout``; callers wrap it in a
    :class:`~diracsim.blockmat.BlockMatrix` if they need block access.
    """
    grid = derived.grid
    sign = -1.0 if inverse else 1.0
    if inverse:
        w1 = np.fft.fft(1.0 / (np.fft.ifft(derived.w1_table) * grid)) / grid
        w2 = np.fft.fft(1.0 / (np.fft.ifft(derived.w2_table) * grid)) / grid
    else:
        w1, w2 = derived.w1_table, derived.w2_table
    n = layout.freq
    part = layout.part
    if derived.bc.kind == "dir":
        omega = derived.omega
        diff = n[:, None] - n[None, :]  # m - n with m the row
        ks = np.arange(-2 * layout.window, 2 * layout.window + 1)
        shift = sign * (-0.5 * derived.beta * omega)
        c1 = interval_coefficient(w1, omega, np.pi * ks + shift)
        c2 = interval_coefficient(w2, omega, -np.pi * ks + shift)
        off = 2 * layout.window
        return 0.5 * (c1[diff + off] + c2[diff + off])
    mat = np.zeros((layout.dim, layout.dim), dtype=complex)
    same1 = (part[:, None] == 1) & (part[None, :] == 1)
    same2 = (part[:, None] == 2) & (part[None, :] == 2)
    # <W e_n^1, e_m^1> = w1^(n - m),  <W e_n^2, e_m^2> = w2^(m - n)
    mat[same1] = fourier_coefficient(w1, (n[None, :] - n[:, None]))[same1]
    mat[same2] = fourier_coefficient(w2, (n[:, None] - n[None, :]))[same2]
    return mat


def unitarity_defect(derived: DerivedPotential, layout, tol: float = 1e-14) -> tuple[float, int]:
    """``||W* W - I||_2`` on the interior of the window.

    Rows within the bandwidth of the W coefficients from the window edge are
    excluded (the truncated convolution is never unitary there).  Returns the
    defect and the bandwidth used.
    """
    mags = np.abs(derived.w1_table) ** 2 + np.abs(derived.w2_table) ** 2
    freq = np.fft.fftfreq(derived.grid, d=1.0 / derived.grid).astype(int)
    order = np.argsort(np.abs(freq))
    tail = np.cumsum(mags[order][::-1])[::-1]
    band = int(np.abs(freq[order])[np.argmax(tail < tol ** 2)]) if np.any(tail < tol ** 2) else derived.grid // 2
    w = w_fourier_operator(derived, layout)
    inner = np.abs(layout.freq) <= layout.window - 2 * band
    if not inner.any():
        return float("nan"), band
    gram = (w.conj().T @ w)[np.ix_(inner, inner)]
    return float(np.linalg.norm(gram - np.eye(gram.shape[0]))), band


def potential_matrix(spec: PotentialSpec, layout) -> np.ndarray:
    """Window matrix of multiplication by P(t) in the free coordinates (no gauge)."""
    n = layout.freq
    part = layout.part
    omega = spec.omega
    size = 1
    while size < 8 * (spec.bandwidth + 4 * layout.window + 2):
        size *= 2
    tables = [spec.coefficient_array(j, size) for j in (1, 2, 3, 4)]
    if spec.bc.kind == "dir":
        ks = np.arange(-2 * layout.window, 2 * layout.window + 1)
        off = 2 * layout.window
        i1 = interval_coefficient(tables[0], omega, np.pi * ks)
        i2 = interval_coefficient(tables[1], omega, np.pi * ks)
        i3 = interval_coefficient(tables[2], omega, -np.pi * ks)
        i4 = interval_coefficient(tables[3], omega, -np.pi * ks)
        diff = n[:, None] - n[None, :]
        tot = n[:, None] + n[None, :]
        return 0.5 * (i1[diff + off] + i2[tot + off] + i3[tot + off] + i4[diff + off])
    eps = spec.bc.epsilon
    rows, cols = n[:, None], n[None, :]
    pr, pc = part[:, None], part[None, :]
    mat = np.where((pr == 1) & (pc == 1), fourier_coefficient(tables[0], cols - rows), 0)
    mat = mat + np.where((pr == 2) & (pc == 2), fourier_coefficient(tables[3], rows - cols), 0)
    mat = mat + np.where((pr == 1) & (pc == 2), fourier_coefficient(tables[1], -rows - cols - eps), 0)
    mat = mat + np.where((pr == 2) & (pc == 1), fourier_coefficient(tables[2], rows + cols + eps), 0)
    return mat.astype(complex)


# --- potential file format -------------------------------------------------
#
#   # comment
#   omega 6.283185307179586
#   bc per
#   p1 0 0.3 0.0        <- function, index, real part, imaginary part
#   p2 1 0.5 0
#
# Keywords may appear in any order; repeated coefficient lines add up.


class PotentialParseError(PotentialError):
    def __init__(self, message: str, line: int | None = None, source: str = "<potential>"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.line = line


def parse_potential(text: str, source: str = "<potential>") -> PotentialSpec:
    omega = None
    bc = None
    maps = [dict(), dict(), dict(), dict()]
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0].lower()
        try:
            if key == "omega":
                if len(parts) != 2:
                    raise ValueError("expected 'omega <value>'")
                omega = float(parts[1])
                if not (omega > 0 and math.isfinite(omega)):
                    raise ValueError(f"omega must be positive and finite, got {omega}")
            elif key == "bc":
                if len(parts) != 2:
                    raise ValueError("expected 'bc <per|ap|dir>'")
                bc = BoundaryCondition(parts[1].lower())
            elif key in ("p1", "p2", "p3", "p4"):
                if len(parts) != 4:
                    raise ValueError(f"expected '{key} <index> <re> <im>'")
                idx = int(parts[1])
                val = complex(float(parts[2]), float(parts[3]))
                target = maps[int(key[1]) - 1]
                target[idx] = target.get(idx, 0j) + val
            else:
                raise ValueError(f"unknown keyword {parts[0]!r}")
        except (ValueError, PotentialError) as exc:
            raise PotentialParseError(str(exc), lineno, source) from None
    if omega is None:
        raise PotentialParseError("missing 'omega' line", None, source)
    if bc is None:
        raise PotentialParseError("missing 'bc' line", None, source)
    try:
        return PotentialSpec.from_maps(omega, bc, *maps)
    except PotentialError as exc:
        raise PotentialParseError(str(exc), None, source) from None


def load_potential(path) -> PotentialSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_potential(fh.read(), source=str(path))


def format_potential(spec: PotentialSpec) -> str:
    lines = [f"omega {spec.omega!r}", f"bc {spec.bc.kind}"]
    for j, coeffs in enumerate(spec.coeffs, start=1):
        for k in sorted(coeffs):
            v = coeffs[k]
            lines.append(f"p{j} {k} {v.real!r} {v.imag!r}")
    return "\n".join(lines) + "\n"
