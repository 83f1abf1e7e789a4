"""Free eigenbasis, component layouts and distances between spectral components.

Every matrix in the package is a coordinate matrix over a finite window of the
free eigenbasis ``e_n^1 = (e_{-n}, 0)``, ``e_n^2 = (0, e_n)`` (or ``s_n`` for
Dirichlet).  A :class:`Layout` records, for each coordinate, its Fourier index,
its part (1, 2, or 0 for ``s_n``), the spectral component it belongs to and the
diagonal entry of the unperturbed operator there.  Projections ``P_n`` and
``P_(k)`` are never formed; they are index masks on the component labels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .potential import BoundaryCondition, DerivedPotential


def free_eigenvalue(bc: BoundaryCondition | str, omega: float, n) -> float:
    if isinstance(bc, str):
        bc = BoundaryCondition(bc)
    return bc.ladder(omega, n)


@dataclass(frozen=True, eq=False)
class Layout:
    window: int
    freq: np.ndarray
    part: np.ndarray
    label: np.ndarray
    diag: np.ndarray
    kind: str = "per"
    omega: float = 2 * np.pi
    regrouped: bool = False
    _blocks: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        blocks = {}
        for i, lab in enumerate(self.label.tolist()):
            blocks.setdefault(lab, []).append(i)
        self._blocks.update({k: np.asarray(v) for k, v in blocks.items()})

    @property
    def dim(self) -> int:
        return len(self.freq)

    @property
    def labels(self) -> list[int]:
        return sorted(self._blocks)

    def indices(self, label: int) -> np.ndarray:
        return self._blocks[label]

    def central(self, k: int) -> np.ndarray:
        """Boolean mask of coordinates in the range of P_(k)."""
        return np.abs(self.label) <= k

    def same_component(self) -> np.ndarray:
        return self.label[:, None] == self.label[None, :]

    def component_points(self, label: int) -> np.ndarray:
        return np.unique(self.diag[self.indices(label)])

    def coordinates(self):
        return list(zip(self.freq.tolist(), self.part.tolist()))


def _make(window, freq, part, label, diag, **kw) -> Layout:
    return Layout(window, np.asarray(freq, dtype=int), np.asarray(part, dtype=int),
                  np.asarray(label, dtype=int), np.asarray(diag, dtype=complex), **kw)


def free_layout(bc: BoundaryCondition | str, omega: float, window: int) -> Layout:
    """Layout of the unperturbed operator: component n = eigenspace of lambda_n."""
    if isinstance(bc, str):
        bc = BoundaryCondition(bc)
    ns = np.arange(-window, window + 1)
    lam = bc.ladder(omega, ns)
    if bc.kind == "dir":
        return _make(window, ns, np.zeros_like(ns), ns, lam, kind="dir", omega=omega)
    return _make(window, np.repeat(ns, 2), np.tile([1, 2], len(ns)), np.repeat(ns, 2),
                 np.repeat(lam, 2), kind=bc.kind, omega=omega)


def perturbed_layout(derived: DerivedPotential, window: int) -> Layout:
    """Layout of the diagonal operator A0 whose resolution of identity drives J and Gamma.

    Generic per/ap: component n holds ``e_n^1, e_n^2`` with points
    ``lambda_n - p1(0)``, ``lambda_n - p4(0)``.  Resonant per/ap (r integer,
    nonzero): ``lambda_n - p1(0)`` equals ``lambda_{n-r} - p4(0)``, so component n
    holds ``e_n^1`` and ``e_{n-r}^2`` and is a single point.  Dirichlet: component n
    is ``s_n`` with point ``lambda_n - nu``.
    """
    bc = derived.bc
    omega = derived.omega
    ns = np.arange(-window, window + 1)
    lam = bc.ladder(omega, ns)
    p1m, p4m = derived.spec.mean(1), derived.spec.mean(4)
    if bc.kind == "dir":
        return _make(window, ns, np.zeros_like(ns), ns, lam - derived.nu, kind="dir", omega=omega)
    if derived.branch == "generic":
        diag = np.empty(2 * len(ns), dtype=complex)
        diag[0::2] = lam - p1m
        diag[1::2] = lam - p4m
        return _make(window, np.repeat(ns, 2), np.tile([1, 2], len(ns)), np.repeat(ns, 2), diag,
                     kind=bc.kind, omega=omega)
    shift = -derived.r_int
    freq = np.empty(2 * len(ns), dtype=int)
    freq[0::2] = ns
    freq[1::2] = ns + shift
    diag = np.empty(2 * len(ns), dtype=complex)
    diag[0::2] = lam - p1m
    diag[1::2] = bc.ladder(omega, ns + shift) - p4m
    return _make(window, freq, np.tile([1, 2], len(ns)), np.repeat(ns, 2), diag,
                 kind=bc.kind, omega=omega, regrouped=True)


def coincidence_shift(derived: DerivedPotential) -> int:
    """Offset s with lambda_n - p1(0) = lambda_{n+s} - p4(0) (0 off resonance)."""
    return -derived.r_int if derived.branch == "resonantInteger" else 0


def custom_layout(diag, labels=None) -> Layout:
    """Layout for a small explicit diagonal operator (one coordinate per component by default)."""
    diag = np.asarray(diag, dtype=complex)
    labels = np.arange(len(diag)) if labels is None else np.asarray(labels)
    window = int(np.max(np.abs(labels))) if len(labels) else 0
    return _make(window, labels, np.zeros(len(diag), dtype=int), labels, diag, kind="custom", omega=2 * np.pi)


@dataclass(frozen=True)
class SpectralComponent:
    n: int
    points: tuple


def spectral_components(layout: Layout) -> list[SpectralComponent]:
    return [SpectralComponent(lab, tuple(layout.component_points(lab))) for lab in layout.labels]


class ComponentOverlapError(ValueError):
    pass


def distance_table(layout: Layout) -> np.ndarray:
    """d[m, n] = dist(sigma_m, sigma_n) over the labels of ``layout`` (diagonal set to inf)."""
    labels = layout.labels
    pts = [layout.component_points(lab) for lab in labels]
    size = len(labels)
    d = np.full((size, size), np.inf)
    for a in range(size):
        for b in range(a + 1, size):
            dist = float(np.min(np.abs(pts[a][:, None] - pts[b][None, :])))
            if dist == 0.0:
                raise ComponentOverlapError(
                    f"components {labels[a]} and {labels[b]} overlap; r is a nonzero integer")
            d[a, b] = d[b, a] = dist
    return d


def delta_from_table(d: np.ndarray) -> float:
    return float(np.max(1.0 / d[np.isfinite(d)])) if np.isfinite(d).any() else 0.0


def tilde_free_diagonal(derived: DerivedPotential, window: int):
    """The diagonal operator A0 (shifted free operator) as a BlockMatrix."""
    from .blockmat import BlockMatrix

    layout = perturbed_layout(derived, window)
    return BlockMatrix(np.diag(layout.diag), layout)
