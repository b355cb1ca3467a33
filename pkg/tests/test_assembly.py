import numpy as np
import pytest

from gbhfem.assembly import (
    DGPenalty,
    DiscreteField,
    apply_dirichlet,
    assemble,
    assemble_system,
    directional_derivative_check,
    interpolate,
    mass_matrix,
    side_tables,
    volume_tables,
    zero_field,
)
from gbhfem.errors import AssemblyError, ContractError, ParameterError
from gbhfem.femcore import ModelParams, SpaceKind, build_dofmap, d_signed_pow, signed_pow
from gbhfem.mesh import build_structured_mesh, geometry_tables
from gbhfem.problems import AffineExact, Case, ProblemSpec, forcing_from_exact, make_problem

EX1 = ModelParams(nu=2.0, alpha=0.2, beta=0.1, gamma=0.5, delta=1.0)
ALL_SPACES = [SpaceKind.CFEM_P1, SpaceKind.CR, SpaceKind.DG_P1]


def plain_problem(p, dim=2, sigma=10.0, forcing=None, dirichlet=None, quad_order=None):
    return ProblemSpec(
        params=p,
        dim=dim,
        case=Case.CUSTOM,
        forcing=forcing,
        dirichlet=dirichlet,
        discretization=SpaceKind.CFEM_P1,
        penalty=DGPenalty(sigma),
        quad_order=quad_order,
    )


def zero_bc(x):
    return np.zeros(len(np.atleast_2d(x)))


class TestLaplaceReduction:
    def test_zero_field_zero_residual(self):
        mesh = build_structured_mesh(2, 4)
        dm = build_dofmap(mesh, SpaceKind.CFEM_P1)
        p = ModelParams(nu=1.0, alpha=0.0, beta=0.0, gamma=0.5, delta=1.0)
        R, J = assemble(SpaceKind.CFEM_P1, zero_field(dm), plain_problem(p))
        assert np.allclose(R, 0.0, atol=1e-15)
        assert abs(J - J.T).max() < 1e-14

    def test_reference_triangle_stiffness(self):
        # hand-integrated P1 stiffness on the unit reference triangle
        from test_mesh import reference_triangle_mesh

        mesh = reference_triangle_mesh()
        dm = build_dofmap(mesh, SpaceKind.CFEM_P1)
        p = ModelParams(nu=1.0, alpha=0.0, beta=0.0, gamma=0.5, delta=1.0)
        _, J = assemble(SpaceKind.CFEM_P1, zero_field(dm), plain_problem(p))
        expected = 0.5 * np.array([[2.0, -1.0, -1.0], [-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
        assert np.allclose(J.toarray(), expected, atol=1e-14)

    @pytest.mark.parametrize("space", ALL_SPACES)
    def test_jacobian_symmetry_alpha_zero(self, space):
        mesh = build_structured_mesh(2, 4)
        dm = build_dofmap(mesh, space)
        p = ModelParams(nu=2.0, alpha=0.0, beta=0.1, gamma=0.5, delta=1.0)
        prob = plain_problem(p, dirichlet=zero_bc)
        _, J = assemble(space, zero_field(dm), prob)
        assert abs(J - J.T).max() < 1e-11 * abs(J).max()


class TestDGLinearExactness:
    def setup_method(self):
        self.mesh = build_structured_mesh(2, 1)
        self.dm = build_dofmap(self.mesh, SpaceKind.DG_P1)
        self.exact = AffineExact(0.0, (1.0, 0.0))
        self.field = interpolate(self.dm, lambda x: self.exact.value(x))

    def _residual(self, sigma):
        prob = plain_problem(
            EX1,
            sigma=sigma,
            forcing=forcing_from_exact(self.exact, EX1),
            dirichlet=lambda x: self.exact.value(x),
        )
        R, _ = assemble(SpaceKind.DG_P1, self.field, prob)
        return R

    def test_penalty_terms_vanish_for_conforming_linear(self):
        r10 = self._residual(10.0)
        r1000 = self._residual(1000.0)
        assert np.abs(r10 - r1000).max() < 1e-12

    def test_interior_jumps_vanish(self):
        st = side_tables(self.mesh, SpaceKind.DG_P1, 4)
        cd = self.dm.cell_dofs
        up = np.einsum("fqb,fb->fq", st.vals_p, self.field.coeffs[cd[st.cp]])
        um = np.einsum("fqb,fb->fq", st.vals_m, self.field.coeffs[cd[st.cm]])
        assert np.sum(st.w_int * (up - um) ** 2) < 1e-14


class TestConformingEmbedding:
    def test_jump_driven_terms_vanish(self):
        mesh = build_structured_mesh(2, 4)
        cf = build_dofmap(mesh, SpaceKind.CFEM_P1)
        dg = build_dofmap(mesh, SpaceKind.DG_P1)
        prob = make_problem(Case.EX1_POLY, EX1, 2, SpaceKind.CFEM_P1)
        u_cf = interpolate(cf, lambda x: prob.dirichlet(x) + np.prod(x - x**2, axis=1))
        embedded = DiscreteField(dg, u_cf.coeffs[mesh.cells].ravel())

        residuals = []
        for sigma in (10.0, 1000.0):
            dprob = make_problem(Case.EX1_POLY, EX1, 2, SpaceKind.DG_P1, sigma=sigma)
            R, _ = assemble(SpaceKind.DG_P1, embedded, dprob)
            residuals.append(R)
        assert np.abs(residuals[0] - residuals[1]).max() < 1e-12

        st = side_tables(mesh, SpaceKind.DG_P1, 4)
        up = np.einsum("fqb,fb->fq", st.vals_p, embedded.coeffs[dg.cell_dofs[st.cp]])
        um = np.einsum("fqb,fb->fq", st.vals_m, embedded.coeffs[dg.cell_dofs[st.cm]])
        assert np.sum(st.w_int * (up - um) ** 2) < 1e-14


class TestUpwindFormEquivalence:
    """The facet-flux form of the advective trilinear term must match its
    integration-by-parts twin on a 2-cell mesh."""

    def _ibp_advection(self, mesh, dm, field, p, g):
        geom = geometry_tables(mesh)
        vt = volume_tables(mesh, SpaceKind.DG_P1, 6)
        st = side_tables(mesh, SpaceKind.DG_P1, 6)
        cd = dm.cell_dofs
        out = np.zeros(dm.n_dofs)
        delta = p.delta

        # volume: -u w.grad(v) - div(w) u v, with w = (s(u), s(u))
        ue = field.coeffs[cd]
        uq = ue @ vt.vals.T
        grad = np.einsum("cb,cbd->cd", ue, vt.physgrads)
        s = signed_pow(uq, delta)
        div_w = d_signed_pow(uq, delta) * grad.sum(axis=1)[:, None]
        gsum_phi = vt.physgrads.sum(axis=2)  # sum_d grad(phi_k)_d, constant per cell
        loc = -np.einsum("cq,ck->ck", vt.wdet * uq * s, gsum_phi)
        loc -= np.einsum("cq,qk->ck", vt.wdet * div_w * uq, vt.vals)
        np.add.at(out, cd, loc)

        # facets: per side, 1/2 w.n [[u]]_sum v - 1/2 |w.n| (u_ext - u) v
        def facet_side(ct, vals_t, u_ext, nsum, wq):
            ut = np.einsum("fqb,fb->fq", vals_t, field.coeffs[cd[ct]])
            wn = signed_pow(ut, delta) * nsum[:, None]
            term = 0.5 * wn * (ut + u_ext) - 0.5 * np.abs(wn) * (u_ext - ut)
            np.add.at(out, cd[ct], np.einsum("fq,fqk->fk", wq * term, vals_t))

        nsum = st.n_int.sum(axis=1)
        um = np.einsum("fqb,fb->fq", st.vals_m, field.coeffs[cd[st.cm]])
        up = np.einsum("fqb,fb->fq", st.vals_p, field.coeffs[cd[st.cp]])
        facet_side(st.cp, st.vals_p, um, nsum, st.w_int)
        facet_side(st.cm, st.vals_m, up, -nsum, st.w_int)
        gb = g(st.xq_bnd.reshape(-1, mesh.dim)).reshape(st.w_bnd.shape)
        facet_side(st.cb, st.vals_b, gb, st.n_bnd.sum(axis=1), st.w_bnd)
        return p.alpha * out

    def test_flux_and_ibp_forms_agree(self):
        mesh = build_structured_mesh(2, 1)
        dm = build_dofmap(mesh, SpaceKind.DG_P1)
        rng = np.random.default_rng(3)
        field = DiscreteField(dm, rng.normal(size=dm.n_dofs))
        exact = AffineExact(0.3, (0.2, -0.4))
        g = lambda x: exact.value(x)

        def advective_part(alpha):
            p = ModelParams(nu=2.0, alpha=alpha, beta=0.1, gamma=0.5, delta=1.0)
            prob = plain_problem(p, sigma=10.0, dirichlet=g, quad_order=6)
            R, _ = assemble(SpaceKind.DG_P1, field, prob)
            return R

        flux_form = advective_part(0.7) - advective_part(0.0)
        p = ModelParams(nu=2.0, alpha=0.7, beta=0.1, gamma=0.5, delta=1.0)
        ibp_form = self._ibp_advection(mesh, dm, field, p, g)
        assert np.abs(flux_form - ibp_form).max() < 1e-12


class TestJacobianByFiniteDifferences:
    def test_linear_problem_machine_precision(self):
        mesh = build_structured_mesh(2, 4)
        dm = build_dofmap(mesh, SpaceKind.CFEM_P1)
        p = ModelParams(nu=1.0, alpha=0.0, beta=0.0, gamma=0.5, delta=1.0)
        prob = plain_problem(p, dirichlet=zero_bc)
        rng = np.random.default_rng(0)
        field = DiscreteField(dm, rng.normal(size=dm.n_dofs))
        err = directional_derivative_check(SpaceKind.CFEM_P1, field, prob, rng.normal(size=dm.n_dofs))
        assert err < 1e-12

    @pytest.mark.parametrize("space", ALL_SPACES)
    def test_example1_parameters(self, space):
        mesh = build_structured_mesh(2, 3)
        dm = build_dofmap(mesh, space)
        prob = make_problem(Case.EX1_POLY, EX1, 2, space)
        rng = np.random.default_rng(5)
        field = DiscreteField(dm, 0.5 * rng.normal(size=dm.n_dofs))
        err = directional_derivative_check(space, field, prob, rng.normal(size=dm.n_dofs))
        assert err < 1e-5

    @pytest.mark.parametrize("space", ALL_SPACES)
    def test_fractional_delta_sign_changing(self, space):
        p = ModelParams(nu=2.0, alpha=0.2, beta=0.1, gamma=0.5, delta=1.5)
        mesh = build_structured_mesh(2, 3)
        dm = build_dofmap(mesh, space)
        prob = make_problem(Case.EX1_POLY, p, 2, space)
        rng = np.random.default_rng(9)
        coeffs = rng.normal(size=dm.n_dofs)
        assert (coeffs > 0).any() and (coeffs < 0).any()
        field = DiscreteField(dm, coeffs)
        err = directional_derivative_check(space, field, prob, rng.normal(size=dm.n_dofs))
        assert err < 1e-5

    def test_zero_direction_rejected(self):
        mesh = build_structured_mesh(2, 2)
        dm = build_dofmap(mesh, SpaceKind.CFEM_P1)
        prob = make_problem(Case.EX1_POLY, EX1, 2, SpaceKind.CFEM_P1)
        with pytest.raises(ParameterError):
            directional_derivative_check(
                SpaceKind.CFEM_P1, zero_field(dm), prob, np.zeros(dm.n_dofs)
            )


class TestCoercivitySample:
    @pytest.mark.parametrize("space", ALL_SPACES)
    def test_positive_on_random_fields(self, space):
        mesh = build_structured_mesh(2, 4)
        dm = build_dofmap(mesh, space)
        prob = plain_problem(EX1, sigma=10.0, dirichlet=zero_bc)
        rng = np.random.default_rng(42)
        for _ in range(100):
            v = rng.normal(size=dm.n_dofs)
            if space is not SpaceKind.DG_P1:
                v[dm.boundary_dofs] = 0.0
            if not np.any(v):
                continue
            R, _ = assemble(space, DiscreteField(dm, v), prob)
            assert float(R @ v) > 0.0


class TestCRJumps:
    def test_mean_jump_vanishes_on_interior_facets(self):
        mesh = build_structured_mesh(2, 4)
        dm = build_dofmap(mesh, SpaceKind.CR)
        rng = np.random.default_rng(1)
        field = DiscreteField(dm, rng.normal(size=dm.n_dofs))
        st = side_tables(mesh, SpaceKind.CR, 4)
        up = np.einsum("fqb,fb->fq", st.vals_p, field.coeffs[dm.cell_dofs[st.cp]])
        um = np.einsum("fqb,fb->fq", st.vals_m, field.coeffs[dm.cell_dofs[st.cm]])
        mean_jumps = np.einsum("fq,fq->f", st.w_int, up - um)
        assert np.abs(mean_jumps).max() < 1e-12


class TestDirichletRows:
    def _setup(self):
        mesh = build_structured_mesh(2, 2)
        dm = build_dofmap(mesh, SpaceKind.CFEM_P1)
        prob = plain_problem(EX1, forcing=lambda x: np.ones(len(x)))
        field = zero_field(dm)
        R, J = assemble(SpaceKind.CFEM_P1, field, prob)
        return dm, field, R, J

    def test_homogeneous_rows_zero(self):
        dm, field, R, J = self._setup()
        Rb, Jb = apply_dirichlet(R, J, field, zero_bc)
        assert np.allclose(Rb[dm.boundary_dofs], 0.0)

    def test_offset_value(self):
        dm, field, R, J = self._setup()
        field.coeffs[dm.boundary_dofs] = 0.2
        Rb, _ = apply_dirichlet(R, J, field, lambda x: np.full(len(x), 0.5))
        assert np.allclose(Rb[dm.boundary_dofs], -0.3)

    def test_identity_rows(self):
        dm, field, R, J = self._setup()
        _, Jb = apply_dirichlet(R, J, field, zero_bc)
        Jb = Jb.tocsr()
        for b in dm.boundary_dofs:
            row = Jb.getrow(b)
            assert row.nnz == 1
            assert row[0, b] == pytest.approx(1.0)

    def test_dg_rejected(self):
        mesh = build_structured_mesh(2, 2)
        dm = build_dofmap(mesh, SpaceKind.DG_P1)
        with pytest.raises(ContractError):
            apply_dirichlet(np.zeros(dm.n_dofs), None, zero_field(dm), zero_bc)


class TestAssemblyErrors:
    def test_space_mismatch(self):
        mesh = build_structured_mesh(2, 2)
        dm = build_dofmap(mesh, SpaceKind.CR)
        with pytest.raises(AssemblyError):
            assemble(SpaceKind.CFEM_P1, zero_field(dm), plain_problem(EX1))

    def test_non_finite_residual_names_location(self):
        mesh = build_structured_mesh(2, 2)
        dm = build_dofmap(mesh, SpaceKind.CFEM_P1)
        field = zero_field(dm)
        field.coeffs[3] = np.nan
        with pytest.raises(AssemblyError, match="dof"):
            assemble(SpaceKind.CFEM_P1, field, plain_problem(EX1))

    def test_coefficient_length_checked(self):
        mesh = build_structured_mesh(2, 2)
        dm = build_dofmap(mesh, SpaceKind.CFEM_P1)
        with pytest.raises(ParameterError):
            DiscreteField(dm, np.zeros(3))


class TestMassMatrix:
    @pytest.mark.parametrize("space", ALL_SPACES)
    def test_row_sums_fill_domain(self, space):
        # integral of 1 against each test function sums to the box area
        mesh = build_structured_mesh(2, 3)
        dm = build_dofmap(mesh, space)
        M = mass_matrix(dm)
        assert M.sum() == pytest.approx(1.0, rel=1e-12)

    def test_galerkin_orthogonality_reached(self):
        from gbhfem.solver import initial_guess, newton_solve

        prob = make_problem(Case.EX1_POLY, EX1, 2, SpaceKind.CFEM_P1)
        dm = build_dofmap(build_structured_mesh(2, 8), SpaceKind.CFEM_P1)
        uh, rep = newton_solve(SpaceKind.CFEM_P1, prob, initial_guess(dm, prob), tol=1e-6)
        R, _ = assemble_system(SpaceKind.CFEM_P1, uh, prob)
        assert np.linalg.norm(R) <= 1e-6
