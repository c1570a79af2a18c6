"""P1 Lagrange assembly and deterministic solves of -Δu + λu = f.

All three boundary conditions are supported: Dirichlet (enforced by symmetric
elimination of boundary rows and columns), Neumann, and Robin with coefficient
beta > 0.  Element integrals of P1 products are exact closed forms, so no
quadrature error enters the assembled operators.  Loads are dual vectors
b_i = <f, phi_i>, which lets function loads (b = M f_nodal) and sampled
white-noise loads share one solve path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu, cg

from .mesh import Mesh

DIRICHLET = "dirichlet"
NEUMANN = "neumann"
ROBIN = "robin"

# Above this size the solver switches from a direct factorization to
# diagonally preconditioned CG; one factorization serves many backsolves
# below the limit, which is what Monte Carlo needs.
_DIRECT_LIMIT = 200_000
_CG_RTOL = 1e-10
_RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class BoundaryCondition:
    """Boundary operator tag: one of dirichlet/neumann/robin (+ beta)."""

    kind: str
    beta: float | None = None

    def __post_init__(self):
        if self.kind not in (DIRICHLET, NEUMANN, ROBIN):
            raise ValueError(f"unknown boundary condition kind {self.kind!r}")
        if self.kind == ROBIN:
            if self.beta is None or not self.beta > 0:
                raise ValueError("Robin condition requires beta > 0")
        elif self.beta is not None:
            raise ValueError(f"beta is only meaningful for Robin, got kind={self.kind!r}")


def dirichlet() -> BoundaryCondition:
    return BoundaryCondition(DIRICHLET)


def neumann() -> BoundaryCondition:
    return BoundaryCondition(NEUMANN)


def robin(beta: float) -> BoundaryCondition:
    return BoundaryCondition(ROBIN, beta)


@dataclass(frozen=True)
class FemFunction:
    """Element of V_h: nodal coefficients over a mesh."""

    mesh: Mesh
    coefficients: np.ndarray

    def __post_init__(self):
        coeff = np.asarray(self.coefficients, dtype=np.float64)
        if coeff.shape != (self.mesh.n_nodes,):
            raise ValueError(
                f"coefficient length {coeff.shape} does not match node count {self.mesh.n_nodes}"
            )
        object.__setattr__(self, "coefficients", coeff)

    def __add__(self, other: "FemFunction") -> "FemFunction":
        _require_same_mesh(self, other)
        return FemFunction(self.mesh, self.coefficients + other.coefficients)

    def __sub__(self, other: "FemFunction") -> "FemFunction":
        _require_same_mesh(self, other)
        return FemFunction(self.mesh, self.coefficients - other.coefficients)

    def __mul__(self, scalar: float) -> "FemFunction":
        return FemFunction(self.mesh, self.coefficients * scalar)

    __rmul__ = __mul__


def _require_same_mesh(u: FemFunction, v: FemFunction):
    if u.mesh is v.mesh:
        return
    if u.mesh.dim == v.mesh.dim and np.array_equal(u.mesh.nodes, v.mesh.nodes) and np.array_equal(
        u.mesh.elements, v.mesh.elements
    ):
        return
    raise ValueError("FemFunctions live on different meshes")


# -- assembly ----------------------------------------------------------------


def _check_measures(mesh: Mesh) -> np.ndarray:
    meas = mesh.element_measures()
    bad = np.nonzero(meas <= 0)[0]
    if bad.size:
        raise ValueError(f"degenerate element {bad[0]}: measure {meas[bad[0]]!r}")
    return meas


def _scatter(mesh: Mesh, local: np.ndarray) -> sp.csr_array:
    """Accumulate per-element local matrices (m, k, k) into a global CSR."""
    k = mesh.dim + 1
    ii = np.broadcast_to(mesh.elements[:, :, None], local.shape)
    jj = np.broadcast_to(mesh.elements[:, None, :], local.shape)
    n = mesh.n_nodes
    A = sp.coo_array((local.ravel(), (ii.ravel(), jj.ravel())), shape=(n, n))
    return A.tocsr()


def assemble_stiffness(mesh: Mesh) -> sp.csr_array:
    """K_ij = integral of grad(phi_i) . grad(phi_j); exact for P1."""
    meas = _check_measures(mesh)
    m = mesh.n_elements
    if mesh.dim == 1:
        h = meas
        base = np.array([[1.0, -1.0], [-1.0, 1.0]])
        local = base[None, :, :] / h[:, None, None]
    else:
        pts = mesh.nodes[mesh.elements]
        # Gradient of barycentric basis i: rotate opposite edge by 90deg / (2A).
        e0 = pts[:, 2] - pts[:, 1]
        e1 = pts[:, 0] - pts[:, 2]
        e2 = pts[:, 1] - pts[:, 0]
        bx = np.stack([e0[:, 1], e1[:, 1], e2[:, 1]], axis=1)
        by = np.stack([-e0[:, 0], -e1[:, 0], -e2[:, 0]], axis=1)
        inv2A = 1.0 / (2.0 * meas)
        gx = bx * inv2A[:, None]
        gy = by * inv2A[:, None]
        local = (gx[:, :, None] * gx[:, None, :] + gy[:, :, None] * gy[:, None, :]) * meas[
            :, None, None
        ]
    return _scatter(mesh, local)


def assemble_mass(mesh: Mesh) -> sp.csr_array:
    """M_ij = integral of phi_i phi_j; exact degree-2 formulas."""
    meas = _check_measures(mesh)
    if mesh.dim == 1:
        base = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    else:
        base = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    local = base[None, :, :] * meas[:, None, None]
    return _scatter(mesh, local)


def assemble_boundary_mass(mesh: Mesh) -> sp.csr_array:
    """R_ij = integral of phi_i phi_j over the boundary.

    In 1D the boundary measure is the counting measure on the two endpoints,
    so R is an indicator diagonal; in 2D each boundary edge of length L
    contributes the 1D mass matrix L/6 [[2,1],[1,2]].
    """
    n = mesh.n_nodes
    if mesh.dim == 1:
        idx = mesh.facet_nodes[:, 0]
        return sp.coo_array((np.ones(idx.size), (idx, idx)), shape=(n, n)).tocsr()
    lengths = mesh.facet_measures()
    base = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    local = base[None, :, :] * lengths[:, None, None]
    ii = np.broadcast_to(mesh.facet_nodes[:, :, None], local.shape)
    jj = np.broadcast_to(mesh.facet_nodes[:, None, :], local.shape)
    return sp.coo_array((local.ravel(), (ii.ravel(), jj.ravel())), shape=(n, n)).tocsr()


def system_matrix(mesh: Mesh, bc: BoundaryCondition, lam: float) -> sp.csr_array:
    """A = K + lam * M (+ beta * R for Robin), on the full node set."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    A = assemble_stiffness(mesh) + lam * assemble_mass(mesh)
    if bc.kind == ROBIN:
        A = A + bc.beta * assemble_boundary_mass(mesh)
    return A.tocsr()


# -- factorized solves -------------------------------------------------------


def sparse_cholesky(M: sp.sparray) -> sp.csc_array:
    """Lower-triangular sparse L with L L^T = M, in the natural node ordering.

    Uses an LU factorization with diagonal pivoting disabled so that no rows
    are permuted; for a symmetric positive definite M this yields exactly the
    Cholesky factor.  The fixed ordering keeps sampled load vectors
    reproducible across runs.
    """
    Mc = sp.csc_matrix(M)
    lu = splu(Mc, permc_spec="NATURAL", diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))
    if not (np.array_equal(lu.perm_r, np.arange(Mc.shape[0]))
            and np.array_equal(lu.perm_c, np.arange(Mc.shape[0]))):
        raise ValueError("factorization permuted rows: matrix is not SPD in natural order")
    d = lu.U.diagonal()
    if not (d > 0).all():
        raise ValueError("matrix is not positive definite (nonpositive pivot)")
    return (lu.L @ sp.diags_array(np.sqrt(d))).tocsc()


class FactorizedSystem:
    """Shared, reusable solver for A c = b on the free degrees of freedom.

    For Dirichlet problems the boundary rows/columns are eliminated and the
    solution is re-embedded with exact zeros on the boundary.  Instances are
    immutable after construction and safe for repeated backsolves.
    """

    def __init__(self, mesh: Mesh, bc: BoundaryCondition, lam: float):
        self.mesh = mesh
        self.bc = bc
        self.lam = float(lam)
        self.A_full = system_matrix(mesh, bc, lam)
        if bc.kind == DIRICHLET:
            fixed = mesh.boundary_nodes()
            mask = np.ones(mesh.n_nodes, dtype=bool)
            mask[fixed] = False
            self.free = np.nonzero(mask)[0]
        else:
            self.free = np.arange(mesh.n_nodes)
        self.A = self.A_full[np.ix_(self.free, self.free)].tocsc()
        self.n_free = self.free.size
        if self.n_free == 0:
            raise ValueError("no free degrees of freedom (Dirichlet on a boundary-only mesh)")
        if self.n_free <= _DIRECT_LIMIT:
            self._lu = splu(self.A)
            self._diag = None
        else:
            self._lu = None
            self._diag = self.A.diagonal()

    def solve_free(self, b_free: np.ndarray) -> np.ndarray:
        """Solve on free dofs; accepts a vector or a matrix of columns."""
        if self._lu is not None:
            return self._lu.solve(b_free)
        if b_free.ndim == 1:
            return self._cg_one(b_free)
        return np.column_stack([self._cg_one(col) for col in b_free.T])

    def _cg_one(self, b: np.ndarray) -> np.ndarray:
        precond = sp.diags_array(1.0 / self._diag)
        x, info = cg(self.A, b, rtol=_CG_RTOL, atol=0.0, M=precond)
        if info != 0:
            res = np.linalg.norm(self.A @ x - b) / max(np.linalg.norm(b), 1e-300)
            raise RuntimeError(f"CG did not converge (info={info}, residual={res:.3e})")
        return x

    def solve(self, load: np.ndarray) -> np.ndarray:
        """Full-length solution coefficients for a full-length dual load."""
        load = np.asarray(load, dtype=np.float64)
        if load.shape[0] != self.mesh.n_nodes:
            raise ValueError("load vector length does not match node count")
        c = np.zeros(load.shape)
        c[self.free] = self.solve_free(load[self.free])
        return c

    def residual(self, c_free: np.ndarray, b_free: np.ndarray) -> float:
        bnorm = np.linalg.norm(b_free)
        if bnorm == 0:
            return float(np.linalg.norm(self.A @ c_free))
        return float(np.linalg.norm(self.A @ c_free - b_free) / bnorm)


def solve_deterministic(mesh: Mesh, bc: BoundaryCondition, lam: float, load: np.ndarray) -> FemFunction:
    """Ritz-Galerkin solution for a dual-coordinate load vector.

    The relative residual of the reduced system is checked against 1e-10;
    failure raises RuntimeError with the observed value.
    """
    sys = FactorizedSystem(mesh, bc, lam)
    load = np.asarray(load, dtype=np.float64)
    if load.shape != (mesh.n_nodes,):
        raise ValueError(f"load vector length {load.shape} != node count {mesh.n_nodes}")
    b_free = load[sys.free]
    c_free = sys.solve_free(b_free)
    res = sys.residual(c_free, b_free)
    if res > _RESIDUAL_TOL:
        raise RuntimeError(f"solver residual {res:.3e} exceeds {_RESIDUAL_TOL:.0e}")
    c = np.zeros(mesh.n_nodes)
    c[sys.free] = c_free
    return FemFunction(mesh, c)


# -- pointwise evaluation ----------------------------------------------------


def point_evaluation(mesh: Mesh, point) -> tuple[np.ndarray, np.ndarray]:
    """Node indices and barycentric weights of the element containing point.

    Raises ValueError when the point lies outside the closed domain.  On a
    shared face any containing element gives the same interpolated value, so
    the first match is taken.
    """
    p = np.atleast_1d(np.asarray(point, dtype=np.float64))
    if p.shape != (mesh.dim,):
        raise ValueError(f"point must have {mesh.dim} coordinates, got {p.shape}")
    tol = 1e-12 * max(mesh.h, 1.0)
    pts = mesh.nodes[mesh.elements]
    if mesh.dim == 1:
        x = p[0]
        left, right = pts[:, 0, 0], pts[:, 1, 0]
        inside = (x >= left - tol) & (x <= right + tol)
        idx = np.nonzero(inside)[0]
        if idx.size == 0:
            raise ValueError(f"point {x!r} is outside the mesh")
        e = idx[0]
        t = (x - left[e]) / (right[e] - left[e])
        t = min(max(t, 0.0), 1.0)
        return mesh.elements[e], np.array([1.0 - t, t])
    a, b, c = pts[:, 0], pts[:, 1], pts[:, 2]
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    w1 = ((b[:, 0] - p[0]) * (c[:, 1] - p[1]) - (c[:, 0] - p[0]) * (b[:, 1] - p[1])) / det
    w2 = ((c[:, 0] - p[0]) * (a[:, 1] - p[1]) - (a[:, 0] - p[0]) * (c[:, 1] - p[1])) / det
    w3 = 1.0 - w1 - w2
    bary_tol = tol / max(np.sqrt(np.abs(det).min()), tol)
    ok = (w1 >= -bary_tol) & (w2 >= -bary_tol) & (w3 >= -bary_tol)
    idx = np.nonzero(ok)[0]
    if idx.size == 0:
        raise ValueError(f"point {tuple(p)} is outside the mesh")
    e = idx[0]
    w = np.clip(np.array([w1[e], w2[e], w3[e]]), 0.0, None)
    return mesh.elements[e], w / w.sum()


def evaluate(u: FemFunction, point) -> float:
    """Barycentric interpolation of u at a point of the closed domain."""
    idx, w = point_evaluation(u.mesh, point)
    return float(u.coefficients[idx] @ w)


def point_vector(mesh: Mesh, point) -> np.ndarray:
    """Dense vector p with p_i = phi_i(point) (the delta functional on V_h)."""
    idx, w = point_evaluation(mesh, point)
    p = np.zeros(mesh.n_nodes)
    p[idx] = w
    return p


# -- norms -------------------------------------------------------------------


def l2_inner(u: FemFunction, v: FemFunction, M: sp.sparray | None = None) -> float:
    """(u, v) in L2 via the mass matrix: c_u^T M c_v."""
    _require_same_mesh(u, v)
    if M is None:
        M = assemble_mass(u.mesh)
    return float(u.coefficients @ (M @ v.coefficients))


def h1_norm(u: FemFunction, K: sp.sparray | None = None, M: sp.sparray | None = None) -> float:
    """Full H1 norm sqrt(c^T (K + M) c)."""
    if K is None:
        K = assemble_stiffness(u.mesh)
    if M is None:
        M = assemble_mass(u.mesh)
    c = u.coefficients
    val = c @ (K @ c) + c @ (M @ c)
    return float(np.sqrt(max(val, 0.0)))


def l2_norm(u: FemFunction, M: sp.sparray | None = None) -> float:
    return float(np.sqrt(max(l2_inner(u, u, M=M), 0.0)))


# -- quadrature (shared by error measurement and boundary integrals) ---------

# Dunavant 6-point rule, exact through degree 4 on the triangle; weights are
# relative to the element measure.
_TRI_A1 = 0.445948490915965
_TRI_A2 = 0.091576213509771
_TRI_W1 = 0.223381589678011
_TRI_W2 = 0.109951743655322

# 3-point Gauss-Legendre on [0,1], exact through degree 5.
_SEG_T = 0.5 * np.sqrt(0.6)
_SEG_POINTS = np.array([0.5 - _SEG_T, 0.5, 0.5 + _SEG_T])
_SEG_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 18.0


def reference_quadrature(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """(barycentric coordinates (q, dim+1), weights (q,)) with sum(w) = 1."""
    if dim == 1:
        t = _SEG_POINTS
        bary = np.column_stack([1.0 - t, t])
        return bary, _SEG_WEIGHTS.copy()
    a1, a2 = _TRI_A1, _TRI_A2
    bary = np.array(
        [
            [1 - 2 * a1, a1, a1],
            [a1, 1 - 2 * a1, a1],
            [a1, a1, 1 - 2 * a1],
            [1 - 2 * a2, a2, a2],
            [a2, 1 - 2 * a2, a2],
            [a2, a2, 1 - 2 * a2],
        ]
    )
    w = np.array([_TRI_W1] * 3 + [_TRI_W2] * 3)
    return bary, w


def quadrature_points(mesh: Mesh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Physical quadrature data for every element.

    Returns (points, weights, bary) where points has shape
    (n_elements, q, dim), weights (n_elements, q) already includes the
    element measure, and bary is the reference rule shared by all elements.
    """
    bary, w = reference_quadrature(mesh.dim)
    corners = mesh.nodes[mesh.elements]  # (m, k, dim)
    points = np.einsum("qk,mkd->mqd", bary, corners)
    weights = np.abs(mesh.element_measures())[:, None] * w[None, :]
    return points, weights, bary


def element_gradients(mesh: Mesh) -> np.ndarray:
    """Gradient operator G with shape (n_elements, dim+1, dim).

    The (constant) gradient of a P1 function on element e is
    sum_i c[elements[e, i]] * G[e, i, :].
    """
    pts = mesh.nodes[mesh.elements]
    meas = mesh.element_measures()
    if mesh.dim == 1:
        h = meas
        G = np.empty((mesh.n_elements, 2, 1))
        G[:, 0, 0] = -1.0 / h
        G[:, 1, 0] = 1.0 / h
        return G
    e0 = pts[:, 2] - pts[:, 1]
    e1 = pts[:, 0] - pts[:, 2]
    e2 = pts[:, 1] - pts[:, 0]
    inv2A = 1.0 / (2.0 * meas)
    # grad(phi_i) is the opposite edge rotated by +90 degrees, over 2A
    G = np.empty((mesh.n_elements, 3, 2))
    G[:, 0, 0], G[:, 0, 1] = -e0[:, 1] * inv2A, e0[:, 0] * inv2A
    G[:, 1, 0], G[:, 1, 1] = -e1[:, 1] * inv2A, e1[:, 0] * inv2A
    G[:, 2, 0], G[:, 2, 1] = -e2[:, 1] * inv2A, e2[:, 0] * inv2A
    return G


def fem_values_at_quadrature(u_coeff: np.ndarray, mesh: Mesh, bary: np.ndarray) -> np.ndarray:
    """P1 values at the reference quadrature points of each element.

    u_coeff may be a single coefficient vector (n_nodes,) or a stack
    (n_nodes, r); the result has shape (m, q) or (m, q, r).
    """
    local = u_coeff[mesh.elements]  # (m, k) or (m, k, r)
    if local.ndim == 2:
        return np.einsum("qk,mk->mq", bary, local)
    return np.einsum("qk,mkr->mqr", bary, local)


def export_coo(A: sp.sparray, path) -> None:
    """Write a sparse matrix as 'row col value' lines (debugging aid)."""
    coo = sp.coo_array(A)
    with open(path, "w", encoding="ascii") as f:
        for i, j, v in zip(coo.row, coo.col, coo.data):
            f.write(f"{i} {j} {v:.17g}\n")
