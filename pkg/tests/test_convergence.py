import numpy as np
import pytest

from whitefem.convergence import (
    _LevelContext,
    deterministic_fem_error,
    fit_rate,
    h1_error_sup_estimate,
    holder_modulus,
    hs_embedding_bound,
    l2_realization_diagnostic,
    truncation_error_closed_form,
)
from whitefem.fem import dirichlet, neumann
from whitefem.mesh import build_interval_mesh, build_rectangle_mesh, refine_uniform
from whitefem.noise import GaussianStream
from whitefem.sampling import DiscreteSolutionOperator
from whitefem.spectral import Interval, Rectangle, eigenpairs


class TestFitRate:
    def test_exact_square_law(self):
        hs = [0.4, 0.2, 0.1, 0.05]
        fit = fit_rate([(h, 3.7 * h**2) for h in hs])
        assert fit.rate == pytest.approx(2.0, abs=1e-10)
        assert fit.residual < 1e-12

    def test_constant_errors_give_zero_slope(self):
        fit = fit_rate([(h, 0.8) for h in (0.4, 0.2, 0.1)])
        assert fit.rate == pytest.approx(0.0, abs=1e-12)

    def test_noisy_cubic_law(self):
        rng = np.random.default_rng(123)
        hs = np.geomspace(0.4, 0.0125, 6)
        levels = [(h, 2.0 * h**3 * (1.0 + 0.01 * rng.standard_normal())) for h in hs]
        fit = fit_rate(levels)
        assert 2.9 < fit.rate < 3.1

    def test_too_few_levels_rejected(self):
        with pytest.raises(ValueError):
            fit_rate([(0.2, 1.0), (0.1, 0.5)])

    def test_nonpositive_error_rejected(self):
        with pytest.raises(ValueError):
            fit_rate([(0.4, 1.0), (0.2, 0.0), (0.1, 0.1)])


class TestDeterministicFemError:
    def test_exact_inclusion_degenerates_to_zero(self):
        # replacing T_h by the exact operator kills every term
        mesh = build_rectangle_mesh(np.pi, np.pi, 4, 4)
        dom = Rectangle(np.pi, np.pi)
        basis = eigenpairs(dom, neumann(), 64)
        ctx = _LevelContext(mesh, neumann(), 1.0)

        def exact_apply(nodal_modes):  # (n_nodes, B): exact solve at the nodes
            return nodal_modes / (basis.mu[None, :64] + 1.0)

        errs = ctx.mode_errors_l2(basis, 1.0, 0, 64, fem_apply=lambda v: exact_apply(v))
        # remaining error is only P1 interpolation of the exact solution
        raw = ctx.mode_errors_l2(basis, 1.0, 0, 64)
        assert (errs <= raw + 1e-15).all()

    def test_exact_values_at_quadrature_give_zero(self):
        # degenerate check bypassing the P1 representation entirely
        mesh = build_rectangle_mesh(np.pi, np.pi, 4, 4)
        dom = Rectangle(np.pi, np.pi)
        basis = eigenpairs(dom, neumann(), 16)
        ctx = _LevelContext(mesh, neumann(), 1.0)
        exact = basis.evaluate(ctx.flat_points, 0, 16) / (basis.mu[:16, None] + 1.0)
        exact_q = np.moveaxis(exact.reshape(16, *ctx.qweights.shape), 0, -1)
        diff = exact_q - exact_q
        errs = np.einsum("mq,mqB->B", ctx.qweights, diff * diff)
        assert np.array_equal(errs, np.zeros(16))

    def test_error_decreases_under_refinement(self):
        dom = Rectangle(np.pi, np.pi)
        meshes = []
        mesh = build_rectangle_mesh(np.pi, np.pi, 4, 4)
        for _ in range(3):
            meshes.append(mesh)
            mesh = refine_uniform(mesh)
        rep = deterministic_fem_error(dom, neumann(), 1.0, 1.1, meshes, basis_count=512)
        errs = [lv.error_sq for lv in rep.levels]
        assert errs[0] > errs[1] > errs[2] > 0

    def test_levels_sorted_by_decreasing_h(self):
        dom = Interval(0.0, 1.0)
        meshes = [build_interval_mesh(0, 1, n) for n in (32, 8, 16)]
        rep = deterministic_fem_error(dom, dirichlet(), 1.0, 0.6, meshes, basis_count=256)
        hs = [lv.h for lv in rep.levels]
        assert hs == sorted(hs, reverse=True)

    def test_1d_dirichlet_study_runs_with_defaults(self):
        dom = Interval(0.0, 1.0)
        meshes = [build_interval_mesh(0, 1, n) for n in (8, 16, 32)]
        rep = deterministic_fem_error(dom, dirichlet(), 1.0, 0.6, meshes, basis_count=400)
        assert rep.basis_count == 400
        assert np.isfinite(rep.fitted_rate)
        assert rep.levels[0].tail_bound > 0

    def test_inadmissible_r_rejected(self):
        dom = Rectangle(1.0, 1.0)
        with pytest.raises(ValueError, match="r"):
            deterministic_fem_error(dom, neumann(), 1.0, -0.1, [build_rectangle_mesh(1, 1, 2, 2)])


@pytest.fixture(scope="module")
def basis():
    return eigenpairs(Rectangle(np.pi, np.pi), neumann(), 4000)


class TestTruncationError:
    def test_zero_truncation_is_total_variance(self, basis):
        r, lam = 1.1, 1.0
        total = truncation_error_closed_form(basis, lam, r, 0)
        expected = np.sum((1.0 + basis.mu) ** -r * (basis.mu + lam) ** -2.0)
        assert total.value == pytest.approx(expected)

    def test_strictly_decreasing_in_m(self, basis):
        vals = [truncation_error_closed_form(basis, 1.0, 1.1, m).value for m in (0, 10, 40, 160, 640)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_monte_carlo_proxy_agreement(self, basis):
        # || X^(M) - X^(m) ||^2 over draws vs closed form of the band (m, M]
        r, lam = 1.1, 1.0
        m, M = 40, 1600
        w = (1.0 + basis.mu[m:M]) ** -r * (basis.mu[m:M] + lam) ** -2.0
        expected = float(np.sum(w))
        n = 10_000
        draws = GaussianStream(99, 0).normals(n * (M - m)).reshape(n, M - m)
        vals = (draws**2) @ w
        se = vals.std(ddof=1) / np.sqrt(n)
        assert abs(vals.mean() - expected) <= 4.0 * se
        closed = (
            truncation_error_closed_form(basis, lam, r, m).value
            - truncation_error_closed_form(basis, lam, r, M).value
        )
        assert closed == pytest.approx(expected)

    def test_tail_bound_dominates_remainder(self, basis):
        big = eigenpairs(Rectangle(np.pi, np.pi), neumann(), 100_000)
        small_val = truncation_error_closed_form(basis, 1.0, 1.1, 0)
        big_val = truncation_error_closed_form(big, 1.0, 1.1, 0)
        assert big_val.value - small_val.value <= small_val.tail_bound

    def test_invalid_m_rejected(self, basis):
        with pytest.raises(ValueError):
            truncation_error_closed_form(basis, 1.0, 1.1, -1)
        with pytest.raises(ValueError):
            truncation_error_closed_form(basis, 1.0, 1.1, basis.count + 1)


class TestL2Diagnostic:
    def test_interval_matches_closed_form(self):
        # sum_k (k^2 + 1)^-2 = (pi/4)(coth pi + pi / sinh^2 pi) - 1/2
        basis = eigenpairs(Interval(0.0, np.pi), dirichlet(), 10_000)
        partial, tail = l2_realization_diagnostic(basis, 1.0)
        closed = (np.pi / 4.0) * (1.0 / np.tanh(np.pi) + np.pi / np.sinh(np.pi) ** 2) - 0.5
        assert partial[-1] == pytest.approx(closed, abs=1e-10)
        # remainder is covered by the tail bound, up to cumsum rounding
        assert closed - partial[-1] <= tail + 1e-12

    def test_increasing_lambda_decreases_terms(self):
        basis = eigenpairs(Interval(0.0, np.pi), dirichlet(), 100)
        p1, _ = l2_realization_diagnostic(basis, 1.0)
        p2, _ = l2_realization_diagnostic(basis, 2.0)
        assert (np.diff(p2) < np.diff(p1)).all()

    def test_2d_certifies_finiteness(self):
        basis = eigenpairs(Rectangle(np.pi, np.pi), neumann(), 20_000)
        partial, tail = l2_realization_diagnostic(basis, 1.0)
        assert np.isfinite(tail)
        assert tail < 0.01 * partial[-1]

    def test_matches_monte_carlo_l2_mass(self):
        # E ||X_h||_L2^2 on a fine mesh vs the spectral series, within 5%
        basis = eigenpairs(Rectangle(np.pi, np.pi), neumann(), 200_000)
        partial, tail = l2_realization_diagnostic(basis, 1.0)
        series = partial[-1]
        mesh = build_rectangle_mesh(np.pi, np.pi, 32, 32)
        op = DiscreteSolutionOperator(mesh, neumann(), 1.0)
        n = 2000
        B = op.sampler.sample_batch(GaussianStream(7, 0), n)
        C = op.system.solve_free(B[op.free])
        vals = np.einsum("ij,ij->j", C, op.M_free @ C)
        se = vals.std(ddof=1) / np.sqrt(n)
        assert abs(vals.mean() - series) <= 0.05 * series + 4.0 * se


@pytest.fixture(scope="module")
def op():
    return DiscreteSolutionOperator(build_rectangle_mesh(np.pi, np.pi, 16, 16), neumann(), 1.0)


class TestHolder:
    def test_coincident_pair_rejected(self, op):
        pairs = [((1.0, 1.0), (1.0, 1.0))] * 5
        with pytest.raises(ValueError, match="coincident"):
            holder_modulus(op, pairs)

    def test_needs_decade_span(self, op):
        x0 = np.array([1.5, 1.5])
        pairs = [(tuple(x0), tuple(x0 + [s, 0])) for s in np.linspace(0.2, 0.4, 6)]
        with pytest.raises(ValueError, match="decade"):
            holder_modulus(op, pairs)

    def test_swap_invariance(self, op):
        x0 = np.array([1.5, 1.5])
        seps = np.geomspace(0.05, 1.0, 6)
        pairs = [(tuple(x0), tuple(x0 + [s, 0])) for s in seps]
        swapped = [(b, a) for a, b in pairs]
        f1 = holder_modulus(op, pairs)
        f2 = holder_modulus(op, swapped)
        assert f1.alpha == pytest.approx(f2.alpha, abs=1e-11)

    def test_needs_five_pairs(self, op):
        with pytest.raises(ValueError):
            holder_modulus(op, [((0.5, 0.5), (1.0, 1.0))] * 4)


class TestUpperBound:
    def test_hs_embedding_bound_converged(self):
        dom = Rectangle(np.pi, np.pi)
        small = hs_embedding_bound(dom, neumann(), 1.1, count=2000)
        big = hs_embedding_bound(dom, neumann(), 1.1, count=8000)
        assert big.value - small.value <= small.tail_bound
        assert big.value + big.tail_bound >= small.value

    def test_sup_estimate_decreases_under_refinement(self):
        dom = Rectangle(np.pi, np.pi)
        m1 = build_rectangle_mesh(np.pi, np.pi, 8, 8)
        m2 = refine_uniform(m1)
        s1 = h1_error_sup_estimate(dom, neumann(), 1.0, m1)
        s2 = h1_error_sup_estimate(dom, neumann(), 1.0, m2)
        assert s2 < s1


class TestMcDeterministicAgreement:
    def test_sampled_moments_match_closed_formula(self):
        # E || X^(M) - X_h^(M) ||^2 in the J-mode truncated H^{-r} seminorm:
        # the sampled mean against the same seminorm evaluated by backsolves.
        # Matching the seminorm on both sides makes the identity exact in
        # expectation, so 4 standard errors is the whole tolerance.
        r, lam = 1.1, 1.0
        M, J, n = 96, 512, 600
        mesh = build_rectangle_mesh(np.pi, np.pi, 16, 16)
        dom = Rectangle(np.pi, np.pi)
        bc = neumann()
        basis = eigenpairs(dom, bc, J)
        ctx = _LevelContext(mesh, bc, lam)

        modes_q = basis.evaluate(ctx.flat_points, 0, J)  # (J, nq)
        loads = ctx.quadrature_loads(modes_q)  # (n_nodes, J)
        w_q = ctx.qweights.ravel()
        weights = (1.0 + basis.mu) ** -r

        # deterministic: c[j, k] = delta_jk/(mu_k+lam) - <T_h e_k, e_j>
        sols = ctx.system.solve(loads[:, :M])  # (n_nodes, M)
        fem_q = np.einsum("qk,mkB->mqB", ctx.bary, sols[mesh.elements]).reshape(-1, M)
        pair = modes_q @ (w_q[:, None] * fem_q)  # (J, M)
        c = -pair
        c[np.arange(M), np.arange(M)] += 1.0 / (basis.mu[:M] + lam)
        det = float(weights @ np.sum(c * c, axis=1))

        stream = GaussianStream(2024, 0)
        vals = np.empty(n)
        for i in range(n):
            xi = stream.normals(M)
            X = ctx.system.solve(loads[:, :M] @ xi)
            xq = np.einsum("qk,mk->mq", ctx.bary, X[mesh.elements]).ravel()
            coeff = modes_q @ (w_q * xq)  # <X_h, e_j> for j < J
            delta = -coeff
            delta[:M] += xi / (basis.mu[:M] + lam)
            vals[i] = weights @ delta**2
        se = vals.std(ddof=1) / np.sqrt(n)
        assert abs(vals.mean() - det) <= 4.0 * se
