"""Measurable boundary operators at the discrete level.

The trace of a V_h function is its restriction to boundary nodes; the weak
conormal derivative is the boundary part of the volume residual
K c + lam M c - b, i.e. the functional phi -> a(u, phi) - <f, phi> tested
against boundary hat functions.  For a Galerkin solution paired with its own
load this functional vanishes identically, which is the per-sample discrete
form of the homogeneous Neumann/Robin boundary condition.

Boundary norms live in a weighted scale space: the boundary is parameterized
by arclength, expanded in real trigonometric modes made orthonormal for the
spectrally weighted H^{-1/2} inner product, and the k-th coefficient enters
with weight k^{-2}.  The basis is mesh independent, so norms can be compared
across refinement levels; norms do depend on this (fixed) basis choice, null
vectors do not.  On an interval the boundary is two points and the weights
degenerate to {1, 1/4}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fem import FemFunction, assemble_boundary_mass, assemble_mass, assemble_stiffness
from .mesh import Mesh
from .noise import LoadSample
from .sampling import DiscreteSolutionOperator
from .spectral import EigenBasis, TruncatedValue

TRACE = "trace"
FUNCTIONAL = "functional"

_GS_DROP_TOL = 1e-10
# Gauss-Legendre nodes/weights on [0, 1] used for facet integrals of
# piecewise-linear traces against trigonometric modes.
_EDGE_T, _EDGE_W = np.polynomial.legendre.leggauss(8)
_EDGE_T = 0.5 * (_EDGE_T + 1.0)
_EDGE_W = 0.5 * _EDGE_W


@dataclass(frozen=True)
class BoundaryFunction:
    """Values (trace) or dual coefficients (functional) at boundary nodes.

    `node_indices` is the sorted array of boundary node indices; `values`
    aligns with it.  The two representations are never mixed in arithmetic.
    """

    mesh: Mesh
    node_indices: np.ndarray
    values: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in (TRACE, FUNCTIONAL):
            raise ValueError(f"unknown boundary representation {self.kind!r}")
        vals = np.asarray(self.values, dtype=np.float64)
        idx = np.asarray(self.node_indices, dtype=np.int64)
        if vals.shape != idx.shape:
            raise ValueError("values and node_indices differ in length")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "node_indices", idx)

    def _combine(self, other: "BoundaryFunction", coeff: float) -> "BoundaryFunction":
        if self.kind != other.kind:
            raise ValueError("cannot mix trace and functional representations")
        if not np.array_equal(self.node_indices, other.node_indices):
            raise ValueError("boundary functions indexed over different node sets")
        return BoundaryFunction(self.mesh, self.node_indices,
                                self.values + coeff * other.values, self.kind)

    def __add__(self, other):
        return self._combine(other, 1.0)

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def __mul__(self, scalar: float):
        return BoundaryFunction(self.mesh, self.node_indices, self.values * scalar, self.kind)

    __rmul__ = __mul__


def trace(u: FemFunction) -> BoundaryFunction:
    """Restriction of u to the boundary nodes (exact for V_h functions)."""
    idx = u.mesh.boundary_nodes()
    return BoundaryFunction(u.mesh, idx, u.coefficients[idx], TRACE)


def weak_conormal_derivative(
    u: FemFunction,
    load,
    lam: float,
    K: sp.sparray | None = None,
    M: sp.sparray | None = None,
) -> BoundaryFunction:
    """Boundary functional phi_i -> a0(u, phi_i) - <f, phi_i>, i on the boundary.

    This realizes the volume definition of the conormal derivative exactly on
    V_h test functions: d = (K c + lam M c - b) restricted to boundary rows.
    `load` may be a LoadSample or a raw dual vector.
    """
    mesh = u.mesh
    b = load.b if isinstance(load, LoadSample) else np.asarray(load, dtype=np.float64)
    if b.shape != (mesh.n_nodes,):
        raise ValueError("load vector does not match the mesh of u")
    if K is None:
        K = assemble_stiffness(mesh)
    if M is None:
        M = assemble_mass(mesh)
    residual = K @ u.coefficients + lam * (M @ u.coefficients) - b
    idx = mesh.boundary_nodes()
    return BoundaryFunction(mesh, idx, residual[idx], FUNCTIONAL)


def robin_residual(
    u: FemFunction,
    load,
    lam: float,
    beta: float,
    basis: "ScaleSpaceBasis | None" = None,
    K: sp.sparray | None = None,
    M: sp.sparray | None = None,
    R: sp.sparray | None = None,
) -> float:
    """Scale-space norm of d + beta R c on boundary test functions.

    beta = 0 degenerates to the Neumann residual.  For a Galerkin solution
    with its own load the value is at solver-residual level.
    """
    d = weak_conormal_derivative(u, load, lam, K=K, M=M)
    if beta != 0.0:
        if R is None:
            R = assemble_boundary_mass(u.mesh)
        rc = (R @ u.coefficients)[d.node_indices]
        d = BoundaryFunction(u.mesh, d.node_indices, d.values + beta * rc, FUNCTIONAL)
    if basis is None:
        basis = scale_space_basis(u.mesh)
    return scale_space_norm(d, basis).value


# -- scale space --------------------------------------------------------------


@dataclass(frozen=True)
class ScaleSpaceBasis:
    """Ordered boundary basis with H_sc weights k^{-2}.

    2D: arclength trigonometric modes on the closed boundary chain
    (k = 1 constant, then cos/sin pairs of increasing frequency), scaled to
    be orthonormal in the weighted H^{-1/2} inner product.  1D: the two
    endpoint indicators.
    """

    mesh: Mesh
    chain: np.ndarray          # boundary node indices in arclength order
    arclength: np.ndarray      # s-coordinate of each chain node
    perimeter: float
    kappa: np.ndarray          # arclength frequency of mode k
    weights: np.ndarray        # k^{-2}, strictly decreasing

    @property
    def n_modes(self) -> int:
        return self.kappa.size

    def _mode_values(self, s: np.ndarray) -> np.ndarray:
        """L2-orthonormal mode values g_k(s), shape (n_modes, len(s))."""
        P = self.perimeter
        out = np.empty((self.n_modes, s.size))
        out[0] = 1.0 / np.sqrt(P)
        amp = np.sqrt(2.0 / P)
        for k in range(1, self.n_modes):
            j = (k + 1) // 2
            arg = 2.0 * np.pi * j * s / P
            out[k] = amp * (np.cos(arg) if k % 2 == 1 else np.sin(arg))
        return out

    def l2_coefficients(self, g: BoundaryFunction) -> np.ndarray:
        """Coefficients of g against the L2 modes.

        Trace representation: exact facet-wise Gauss integration of the
        piecewise-linear trace.  Functional representation: the duality
        pairing with each mode's nodal interpolant.
        """
        order = _chain_positions(g.node_indices, self.chain)
        vals = g.values[order]
        if self.mesh.dim == 1:
            return vals.copy()
        if g.kind == FUNCTIONAL:
            modes = self._mode_values(self.arclength)
            return modes @ vals
        s0 = self.arclength
        s1 = np.append(self.arclength[1:], self.perimeter)
        v0 = vals
        v1 = np.append(vals[1:], vals[0])
        seg_len = s1 - s0
        # Quadrature points along every facet at once: (n_seg, n_q).
        sq = s0[:, None] + seg_len[:, None] * _EDGE_T[None, :]
        gq = v0[:, None] + (v1 - v0)[:, None] * _EDGE_T[None, :]
        wq = seg_len[:, None] * _EDGE_W[None, :]
        modes = self._mode_values(sq.ravel())
        return modes @ (gq * wq).ravel()

    def h_minus_half_coefficients(self, g: BoundaryFunction) -> np.ndarray:
        """gamma_k = (g, f_k) in the weighted H^{-1/2} inner product."""
        coeff = self.l2_coefficients(g)
        if self.mesh.dim == 1:
            return coeff
        return coeff * (1.0 + self.kappa**2) ** -0.25

    def tail_sq_bound(self, g: BoundaryFunction) -> float:
        """Bound on the squared H_sc contribution of modes beyond n_modes."""
        if self.mesh.dim == 1:
            return 0.0
        if g.kind == TRACE:
            # |gamma_k| <= ||g||_{H^{-1/2}} <= ||g||_{L2(boundary)}
            R = assemble_boundary_mass(self.mesh)
            full = np.zeros(self.mesh.n_nodes)
            full[g.node_indices] = g.values
            bound_sq = float(full @ (R @ full))
        else:
            bound_sq = (2.0 / self.perimeter) * float(np.sum(np.abs(g.values))) ** 2
        return bound_sq / self.n_modes  # sum_{k>K} k^{-2} < 1/K


def _chain_positions(sorted_idx: np.ndarray, chain: np.ndarray) -> np.ndarray:
    """Positions such that sorted_idx[positions] == chain."""
    lookup = {int(v): i for i, v in enumerate(sorted_idx)}
    try:
        return np.array([lookup[int(v)] for v in chain], dtype=np.int64)
    except KeyError as exc:
        raise ValueError("boundary function does not cover the boundary chain") from exc


def boundary_chain(mesh: Mesh) -> tuple[np.ndarray, np.ndarray, float]:
    """Boundary nodes in counterclockwise arclength order.

    Returns (chain node indices, arclength of each chain node, perimeter).
    Requires a single closed boundary loop (simple polygon).
    """
    if mesh.dim == 1:
        idx = mesh.boundary_nodes()
        xs = mesh.nodes[idx, 0]
        order = np.argsort(xs)
        return idx[order], np.array([0.0, 1.0]), 2.0
    neighbors: dict[int, list[int]] = {}
    for i, j in mesh.facet_nodes:
        neighbors.setdefault(int(i), []).append(int(j))
        neighbors.setdefault(int(j), []).append(int(i))
    if any(len(v) != 2 for v in neighbors.values()):
        raise ValueError("boundary is not a single closed loop")
    nodes = np.array(sorted(neighbors))
    coords = mesh.nodes[nodes]
    start = int(nodes[np.lexsort((coords[:, 1], coords[:, 0]))[0]])
    chain = [start]
    prev, cur = None, start
    while True:
        a, b = neighbors[cur]
        nxt = b if a == prev else a
        if nxt == start:
            break
        chain.append(nxt)
        prev, cur = cur, nxt
        if len(chain) > len(nodes):
            raise ValueError("boundary loop does not close")
    if len(chain) != len(nodes):
        raise ValueError("boundary has more than one loop")
    chain = np.array(chain, dtype=np.int64)
    pts = mesh.nodes[chain]
    # counterclockwise orientation via the shoelace area
    area2 = np.sum(pts[:, 0] * np.roll(pts[:, 1], -1) - np.roll(pts[:, 0], -1) * pts[:, 1])
    if area2 < 0:
        chain = np.concatenate([chain[:1], chain[1:][::-1]])
        pts = mesh.nodes[chain]
    seg = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg[:-1])])
    return chain, s, float(seg.sum())


def scale_space_basis(mesh: Mesh, n_modes: int = 33) -> ScaleSpaceBasis:
    """Construct the fixed H_sc basis for a mesh boundary."""
    chain, s, perimeter = boundary_chain(mesh)
    if mesh.dim == 1:
        kappa = np.zeros(2)
        weights = np.array([1.0, 0.25])
        return ScaleSpaceBasis(mesh, chain, s, perimeter, kappa, weights)
    if n_modes < 1:
        raise ValueError("need at least one boundary mode")
    k = np.arange(1, n_modes + 1)
    j = k // 2  # frequency index: 0, 1, 1, 2, 2, ...
    kappa = 2.0 * np.pi * j / perimeter
    return ScaleSpaceBasis(mesh, chain, s, perimeter, kappa, (1.0 * k) ** -2.0)


def scale_space_norm(g: BoundaryFunction, basis: ScaleSpaceBasis) -> TruncatedValue:
    """H_sc norm (sum_k k^{-2} gamma_k^2)^{1/2} with a truncation tail bound.

    The reported tail bounds the squared remainder of the mode sum.
    """
    gamma = basis.h_minus_half_coefficients(g)
    value = float(np.sqrt(np.sum(basis.weights * gamma**2)))
    return TruncatedValue(value, basis.tail_sq_bound(g))


# -- discrete Cameron-Martin system and the measurable trace series -----------


class CameronMartinSystem:
    """Energy-orthonormal image of eigenmode loads under the discrete solve.

    Candidates T_h f_k (f_k the nodal interpolants of exact eigenmodes) are
    orthonormalized in the energy inner product a(u, v) = u^T A v with
    two-pass Gram-Schmidt; numerically dependent candidates (relative norm
    below 1e-10) are dropped.  Against this system a sampled path expands
    with coefficients read off its own load, since a(X_h, e_k) = b^T e_k.
    """

    def __init__(self, op: DiscreteSolutionOperator, basis: EigenBasis, m: int):
        n_free = op.system.n_free
        if m < 0 or m > n_free:
            raise ValueError(f"truncation {m} outside [0, {n_free}]")
        self.op = op
        pts = op.mesh.nodes[:, 0] if op.mesh.dim == 1 else op.mesh.nodes
        A = op.system.A
        vectors = []
        k = 0
        while len(vectors) < m:
            if k >= basis.count:
                raise RuntimeError(
                    f"eigenbasis exhausted after {basis.count} candidates while "
                    f"building {m} energy-orthonormal vectors"
                )
            f_nodal = basis.evaluate(pts, k, k + 1)[0]
            v = op.system.solve_free((op.M @ f_nodal)[op.free])
            norm0 = np.sqrt(v @ (A @ v))
            for _ in range(2):  # reorthogonalize to keep the Gram matrix at identity
                for e in vectors:
                    v = v - (e @ (A @ v)) * e
            norm1 = np.sqrt(max(v @ (A @ v), 0.0))
            if norm1 > _GS_DROP_TOL * max(norm0, 1e-300):
                vectors.append(v / norm1)
            k += 1
        self.vectors = np.column_stack(vectors) if vectors else np.zeros((n_free, 0))

    def coefficients(self, load: LoadSample, m: int | None = None) -> np.ndarray:
        """Path coefficients against the system: e_k^T b on the free dofs."""
        sl = slice(None) if m is None else slice(0, m)
        return self.vectors[:, sl].T @ load.b[self.op.free]

    def partial_sum(self, load: LoadSample, m: int | None = None) -> FemFunction:
        coeff = self.coefficients(load, m)
        sl = slice(None) if m is None else slice(0, m)
        full = np.zeros(self.op.mesh.n_nodes)
        full[self.op.free] = self.vectors[:, sl] @ coeff
        return FemFunction(self.op.mesh, full)


def export_boundary_csv(g: BoundaryFunction, path) -> None:
    """Write a boundary function as 'arclength,value' rows in chain order."""
    chain, s, _ = boundary_chain(g.mesh)
    order = _chain_positions(g.node_indices, chain)
    vals = g.values[order]
    with open(path, "w", encoding="ascii") as f:
        f.write("arclength,value\n")
        for si, vi in zip(s, vals):
            f.write(f"{si:.17g},{vi:.17g}\n")


def measurable_trace_series(
    op: DiscreteSolutionOperator,
    basis: EigenBasis,
    stream,
    m: int,
    system: CameronMartinSystem | None = None,
) -> BoundaryFunction:
    """Trace of the m-term expansion of a freshly sampled path.

    At m = dim(V_h free) the expansion reproduces the path exactly, so the
    series trace coincides with the nodal trace.  Pass a prebuilt
    CameronMartinSystem to amortize the orthonormalization across samples.
    """
    if system is None:
        system = CameronMartinSystem(op, basis, m)
    if m > system.vectors.shape[1]:
        raise ValueError(f"truncation {m} exceeds the prepared system size")
    load = op.sampler.sample(stream)
    return trace(system.partial_sum(load, m))
