"""Path sampling of the discrete solution field and its exact second moments.

A sampled path is X_h = A^{-1} b with b the white-noise load: on V_h the
measurable-extension series collapses to exact finite linear algebra, so no
mode truncation enters a path.  Second moments also have closed discrete
forms (two backsolves against the shared factorization per covariance entry);
Monte Carlo is kept alongside as an independent check, never as the primary
route where the formula exists.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import (
    BoundaryCondition,
    FactorizedSystem,
    FemFunction,
    assemble_boundary_mass,
    assemble_mass,
    assemble_stiffness,
    point_vector,
    DIRICHLET,
    ROBIN,
)
from .mesh import Mesh
from .noise import GaussianStream, LoadSample, LoadSampler

_PROBE_TOL = 1e-10
# Paths per generation batch.  Fixed (never derived from worker counts) so
# that moment reductions group identically in every run.
_BATCH = 256


class DiscreteSolutionOperator:
    """Factorized discrete solve plus the load sampler that feeds it."""

    def __init__(self, mesh: Mesh, bc: BoundaryCondition, lam: float):
        self.mesh = mesh
        self.bc = bc
        self.lam = float(lam)
        self.beta = bc.beta if bc.kind == ROBIN else None
        self.K = assemble_stiffness(mesh)
        self.M = assemble_mass(mesh)
        self.R = assemble_boundary_mass(mesh) if bc.kind == ROBIN else None
        self.system = FactorizedSystem(mesh, bc, lam)
        self.sampler = LoadSampler(mesh, self.M)
        self.M_free = self.M[np.ix_(self.system.free, self.system.free)].tocsr()
        self._probe()

    def _probe(self):
        rng = np.random.Philox(key=np.array([0, 0], dtype=np.uint64))
        probe = ((rng.random_raw(self.system.n_free) >> np.uint64(11)) + 0.5) * 2.0**-53 - 0.5
        sol = self.system.solve_free(probe)
        res = self.system.residual(sol, probe)
        if res > _PROBE_TOL:
            raise RuntimeError(f"factorization probe residual {res:.3e} exceeds {_PROBE_TOL:.0e}")

    @property
    def free(self) -> np.ndarray:
        return self.system.free

    def path_from_load(self, load: LoadSample) -> FemFunction:
        return FemFunction(self.mesh, self.system.solve(load.b))

    def path_from_normals(self, z: np.ndarray) -> FemFunction:
        """Path for injected noise coordinates (exactly linear in z)."""
        load = self.sampler.from_normals(z, GaussianStream(0, 0))
        return self.path_from_load(load)


def sample_path(op: DiscreteSolutionOperator, stream: GaussianStream) -> FemFunction:
    """One realization X_h = A^{-1} b; advances the stream by node count."""
    return op.path_from_load(op.sampler.sample(stream))


def sample_path_with_load(op: DiscreteSolutionOperator, stream: GaussianStream):
    """(X_h, b) drawn jointly, for checks that pair a path with its own load."""
    load = op.sampler.sample(stream)
    return op.path_from_load(load), load


def exact_discrete_covariance(op: DiscreteSolutionOperator, x, y) -> float:
    """Cov(X_h(x), X_h(y)) = p(x)^T A^{-1} M A^{-1} p(y), exactly.

    Dirichlet boundary points evaluate to 0 because their basis support is
    entirely on eliminated rows.
    """
    px = point_vector(op.mesh, x)[op.free]
    py = point_vector(op.mesh, y)[op.free]
    wx = op.system.solve_free(px)
    wy = wx if np.array_equal(px, py) else op.system.solve_free(py)
    return float(wx @ (op.M_free @ wy))


def pointwise_variance_field(op: DiscreteSolutionOperator, chunk: int = 512) -> FemFunction:
    """Nodal variances diag(A^{-1} M A^{-1}), by column-block backsolves."""
    n = op.system.n_free
    var_free = np.empty(n)
    eye_block = np.zeros((n, min(chunk, n)))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        width = stop - start
        block = eye_block[:, :width]
        block[:] = 0.0
        block[np.arange(start, stop), np.arange(width)] = 1.0
        W = op.system.solve_free(block)
        var_free[start:stop] = np.einsum("ij,ij->j", W, op.M_free @ W)
    values = np.zeros(op.mesh.n_nodes)
    values[op.free] = var_free
    return FemFunction(op.mesh, values)


@dataclass(frozen=True)
class MomentReport:
    """Unbiased sample mean/covariance at probe points, with standard errors."""

    points: np.ndarray
    n: int
    mean: np.ndarray
    covariance: np.ndarray
    se_mean: np.ndarray
    se_covariance: np.ndarray
    seed: int
    stream_id: int


def monte_carlo_moments(
    op: DiscreteSolutionOperator, points, n: int, stream: GaussianStream
) -> MomentReport:
    """Sample moments of X_h at evaluation points over n independent paths.

    Paths are generated in fixed-size batches in stream order, and all
    reductions run over the stored path-major array, so results do not depend
    on scheduling.  Standard errors use the Gaussian moment formulas.
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    pts = [np.atleast_1d(np.asarray(p, dtype=np.float64)) for p in points]
    P = np.stack([point_vector(op.mesh, p)[op.free] for p in pts])  # (p, n_free)
    values = np.empty((n, len(pts)))
    done = 0
    while done < n:
        count = min(_BATCH, n - done)
        B = op.sampler.sample_batch(stream, count)[op.free]
        C = op.system.solve_free(B)
        values[done : done + count] = (P @ C).T
        done += count
    mean = values.sum(axis=0) / n
    centered = values - mean
    p = len(pts)
    cov = np.empty((p, p))
    for i in range(p):
        for j in range(i, p):
            cov[i, j] = cov[j, i] = np.sum(centered[:, i] * centered[:, j]) / (n - 1)
    var = np.diag(cov)
    se_mean = np.sqrt(var / n)
    se_cov = np.sqrt((np.outer(var, var) + cov**2) / n)
    return MomentReport(
        points=np.stack(pts),
        n=n,
        mean=mean,
        covariance=cov,
        se_mean=se_mean,
        se_covariance=se_cov,
        seed=stream.seed,
        stream_id=stream.stream_id,
    )
