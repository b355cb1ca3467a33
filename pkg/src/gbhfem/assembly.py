"""Residual and Jacobian assembly for the three discretizations.

The residual of a coefficient vector u is

    R_k = nu*a(u, phi_k) + alpha*b(u, u, phi_k) - beta*(C(u), phi_k) - (f, phi_k)

with the diffusion form ``a`` depending on the space: the plain (broken)
gradient pairing for continuous P1 and Crouzeix-Raviart, and the symmetric
interior-penalty form plus an upwind advective facet flux for discontinuous
P1.  Jacobians are exact analytic derivatives of R.

Linear pieces (stiffness, facet penalty/consistency, mass) are cached per
mesh so repeated assemblies inside Newton or a time loop only recompute the
nonlinear terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np
import scipy.sparse as sp
from numpy.polynomial.legendre import leggauss

from .errors import AssemblyError, ContractError, ParameterError
from .femcore import (
    DofMap,
    SpaceKind,
    basis_gradients,
    basis_values,
    default_quad_order,
    dof_points,
    quadrature_rule,
    signed_pow,
    d_signed_pow,
)
from .mesh import Mesh, geometry_tables

DEFAULT_PENALTY = 10.0


@dataclass(frozen=True)
class DGPenalty:
    """Interior-penalty scale; the per-facet value is ``sigma / h_facet``."""

    sigma: float = DEFAULT_PENALTY

    def __post_init__(self):
        if not self.sigma > 0:
            raise ParameterError(f"penalty sigma must be positive, got {self.sigma}")


@dataclass(eq=False)
class DiscreteField:
    """Coefficient vector over a :class:`DofMap`."""

    dofmap: DofMap
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.dofmap.n_dofs,):
            raise ParameterError(
                f"coefficient vector has length {self.coeffs.shape}, expected ({self.dofmap.n_dofs},)"
            )

    def copy(self) -> "DiscreteField":
        return DiscreteField(self.dofmap, self.coeffs.copy())


def zero_field(dofmap: DofMap) -> DiscreteField:
    return DiscreteField(dofmap, np.zeros(dofmap.n_dofs))


def interpolate(dofmap: DofMap, fn) -> DiscreteField:
    """Nodal interpolant: evaluate ``fn`` at each dof's point."""
    vals = np.asarray(fn(dof_points(dofmap)), dtype=float)
    return DiscreteField(dofmap, vals)


# ---------------------------------------------------------------------------
# cached cell and facet tables


def volume_tables(mesh: Mesh, space: SpaceKind, order: int):
    key = ("vol", space, order)
    cached = mesh._cache.get(key)
    if cached is not None:
        return cached
    geom = geometry_tables(mesh)
    quad = quadrature_rule(mesh.dim, order)
    vals = basis_values(space, quad.points)           # (nq, nb)
    refgrads = basis_gradients(space, mesh.dim)       # (nb, d)
    physgrads = np.einsum("cij,bj->cbi", geom["inv_T"], refgrads)
    xq = geom["origin"][:, None, :] + np.einsum("cij,qj->cqi", geom["jac"], quad.points)
    wdet = quad.weights[None, :] * geom["det"][:, None]
    nb = vals.shape[1]
    tables = SimpleNamespace(
        quad=quad,
        vals=vals,
        physgrads=physgrads,
        xq=xq,
        wdet=wdet,
        volume=geom["volume"],
        # outer products phi_k*phi_j flattened per point: one GEMM assembles
        # any coefficient-weighted mass-like local matrix
        vals_outer=(vals[:, :, None] * vals[:, None, :]).reshape(len(vals), nb * nb),
        grad_rowsum=physgrads.sum(axis=2),
    )
    mesh._cache[key] = tables
    return tables


def _facet_ref_quad(dim: int, order: int):
    if dim == 2:
        m = (order + 2) // 2
        g, w = leggauss(m)
        pts = 0.5 * (g + 1.0)
        return pts[:, None], w / 2.0, 1.0
    rule = quadrature_rule(2, order)
    return rule.points, rule.weights, 0.5


def facet_tables(mesh: Mesh, order: int):
    """Physical quadrature points/weights and penalty size per facet."""
    key = ("facet", order)
    cached = mesh._cache.get(key)
    if cached is not None:
        return cached
    geom = geometry_tables(mesh)
    ref_pts, ref_w, ref_total = _facet_ref_quad(mesh.dim, order)
    fv = mesh.vertices[mesh.facets]                    # (nf, d, d)
    edges = fv[:, 1:, :] - fv[:, :1, :]                # (nf, d-1, d)
    xq = fv[:, None, 0, :] + np.einsum("qe,fed->fqd", ref_pts, edges)
    wq = ref_w[None, :] * (geom["facet_measure"] / ref_total)[:, None]
    tables = SimpleNamespace(
        xq=xq,
        wq=wq,
        normal=geom["facet_normal"],
        diameter=geom["facet_diameter"],
        interior=np.flatnonzero(~mesh.boundary_flag),
        boundary=np.flatnonzero(mesh.boundary_flag),
    )
    mesh._cache[key] = tables
    return tables


def _side_basis(mesh, space, cells, xq, vol_tables):
    """Trace values/gradients of the given cells' bases at facet points."""
    geom = geometry_tables(mesh)
    rel = xq - geom["origin"][cells][:, None, :]
    lam = np.einsum("fij,fqj->fqi", geom["inv_jac"][cells], rel)
    hats = np.concatenate([1.0 - lam.sum(axis=-1, keepdims=True), lam], axis=-1)
    vals = 1.0 - mesh.dim * hats if space is SpaceKind.CR else hats
    grads = vol_tables.physgrads[cells]
    return vals, grads


def side_tables(mesh: Mesh, space: SpaceKind, order: int):
    """Per-side trace tables of a space on interior and boundary facets."""
    key = ("sides", space, order)
    cached = mesh._cache.get(key)
    if cached is not None:
        return cached
    ft = facet_tables(mesh, order)
    vt = volume_tables(mesh, space, order)
    interior, boundary = ft.interior, ft.boundary
    cp = mesh.facet_cells[interior, 0]
    cm = mesh.facet_cells[interior, 1]
    cb = mesh.facet_cells[boundary, 0]
    vals_p, grads_p = _side_basis(mesh, space, cp, ft.xq[interior], vt)
    vals_m, grads_m = _side_basis(mesh, space, cm, ft.xq[interior], vt)
    vals_b, grads_b = _side_basis(mesh, space, cb, ft.xq[boundary], vt)
    tables = SimpleNamespace(
        ft=ft,
        cp=cp, cm=cm, cb=cb,
        vals_p=vals_p, grads_p=grads_p,
        vals_m=vals_m, grads_m=grads_m,
        vals_b=vals_b, grads_b=grads_b,
        n_int=ft.normal[interior],
        n_bnd=ft.normal[boundary],
        w_int=ft.wq[interior],
        w_bnd=ft.wq[boundary],
        pen_int=1.0 / ft.diameter[interior],
        pen_bnd=1.0 / ft.diameter[boundary],
        xq_bnd=ft.xq[boundary],
    )
    mesh._cache[key] = tables
    return tables


# ---------------------------------------------------------------------------
# linear building blocks (cached)


def _coo_blocks_to_csr(n, blocks):
    rows = np.concatenate([b[0].ravel() for b in blocks])
    cols = np.concatenate([b[1].ravel() for b in blocks])
    vals = np.concatenate([b[2].ravel() for b in blocks])
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def broken_stiffness(dofmap: DofMap, order: int) -> sp.csr_matrix:
    """Cellwise gradient pairing (grad u, grad v); no facet coupling."""
    mesh = dofmap.mesh
    key = ("stiff", dofmap.space, order)
    cached = mesh._cache.get(key)
    if cached is not None:
        return cached
    vt = volume_tables(mesh, dofmap.space, order)
    local = np.einsum("c,cjd,ckd->ckj", vt.volume, vt.physgrads, vt.physgrads)
    cd = dofmap.cell_dofs
    nb = cd.shape[1]
    rows = np.repeat(cd[:, :, None], nb, axis=2)
    cols = np.repeat(cd[:, None, :], nb, axis=1)
    mat = _coo_blocks_to_csr(dofmap.n_dofs, [(rows, cols, local)])
    mesh._cache[key] = mat
    return mat


def mass_matrix(dofmap: DofMap, order: int = 2) -> sp.csr_matrix:
    mesh = dofmap.mesh
    key = ("mass", dofmap.space, order)
    cached = mesh._cache.get(key)
    if cached is not None:
        return cached
    vt = volume_tables(mesh, dofmap.space, order)
    local = np.einsum("cq,qj,qk->ckj", vt.wdet, vt.vals, vt.vals)
    cd = dofmap.cell_dofs
    nb = cd.shape[1]
    rows = np.repeat(cd[:, :, None], nb, axis=2)
    cols = np.repeat(cd[:, None, :], nb, axis=1)
    mat = _coo_blocks_to_csr(dofmap.n_dofs, [(rows, cols, local)])
    mesh._cache[key] = mat
    return mat


def dg_diffusion_matrix(dofmap: DofMap, order: int, sigma: float, with_boundary: bool) -> sp.csr_matrix:
    """Broken stiffness plus symmetric interior-penalty facet terms (unit nu).

    Interior facets carry penalty sigma/h * [u][v] and the symmetric
    consistency pair -({grad u}.n [v] + {grad v}.n [u]); boundary facets,
    when Dirichlet data is imposed weakly, carry twice the penalty and the
    corresponding one-sided consistency pair.
    """
    mesh = dofmap.mesh
    key = ("dgdiff", order, sigma, with_boundary)
    cached = mesh._cache.get(key)
    if cached is not None:
        return cached
    st = side_tables(mesh, SpaceKind.DG_P1, order)
    cd = dofmap.cell_dofs
    nb = cd.shape[1]
    blocks = []

    sides = ((1.0, st.cp, st.vals_p, st.grads_p), (-1.0, st.cm, st.vals_m, st.grads_m))
    gam = sigma * st.pen_int
    for sign_t, ct, vals_t, grads_t in sides:
        gtn = np.einsum("fkd,fd->fk", grads_t, st.n_int)
        rows = np.repeat(cd[ct][:, :, None], nb, axis=2)
        for sign_s, cs, vals_s, grads_s in sides:
            gsn = np.einsum("fjd,fd->fj", grads_s, st.n_int)
            mass_f = np.einsum("fq,fqj,fqk->fkj", st.w_int, vals_s, vals_t)
            int_s = np.einsum("fq,fqj->fj", st.w_int, vals_s)
            int_t = np.einsum("fq,fqk->fk", st.w_int, vals_t)
            loc = (sign_t * sign_s) * gam[:, None, None] * mass_f
            loc -= 0.5 * sign_t * np.einsum("fj,fk->fkj", gsn, int_t)
            loc -= 0.5 * sign_s * np.einsum("fk,fj->fkj", gtn, int_s)
            cols = np.repeat(cd[cs][:, None, :], nb, axis=1)
            blocks.append((rows, cols, loc))

    if with_boundary and len(st.cb):
        gam_b = sigma * st.pen_bnd
        gbn = np.einsum("fkd,fd->fk", st.grads_b, st.n_bnd)
        mass_b = np.einsum("fq,fqj,fqk->fkj", st.w_bnd, st.vals_b, st.vals_b)
        int_b = np.einsum("fq,fqj->fj", st.w_bnd, st.vals_b)
        loc = 2.0 * gam_b[:, None, None] * mass_b
        loc -= np.einsum("fj,fk->fkj", gbn, int_b)
        loc -= np.einsum("fk,fj->fkj", gbn, int_b)
        rows = np.repeat(cd[st.cb][:, :, None], nb, axis=2)
        cols = np.repeat(cd[st.cb][:, None, :], nb, axis=1)
        blocks.append((rows, cols, loc))

    mat = broken_stiffness(dofmap, order) + _coo_blocks_to_csr(dofmap.n_dofs, blocks)
    mesh._cache[key] = mat
    return mat


def _dg_boundary_data_vector(dofmap, order, sigma, dirichlet):
    """Dirichlet-data part of the weak boundary terms (unit nu), to subtract."""
    st = side_tables(dofmap.mesh, SpaceKind.DG_P1, order)
    out = np.zeros(dofmap.n_dofs)
    if not len(st.cb):
        return out
    g = np.asarray(dirichlet(st.xq_bnd.reshape(-1, dofmap.mesh.dim)), dtype=float)
    g = g.reshape(st.xq_bnd.shape[:2])
    if not np.isfinite(g).all():
        raise AssemblyError("boundary datum is undefined on a boundary facet")
    gam_b = sigma * st.pen_bnd
    gbn = np.einsum("fkd,fd->fk", st.grads_b, st.n_bnd)
    loc = 2.0 * gam_b[:, None] * np.einsum("fq,fqk->fk", st.w_bnd * g, st.vals_b)
    loc -= gbn * np.einsum("fq->f", st.w_bnd * g)[:, None]
    np.add.at(out, dofmap.cell_dofs[st.cb], loc)
    return out


def _forcing_vector(dofmap, order, forcing, problem_cache):
    key = ("fvec", dofmap.space, order)
    if problem_cache is not None:
        hit = problem_cache.get(key)
        if hit is not None and hit[0] is dofmap.mesh:
            return hit[1]
    vt = volume_tables(dofmap.mesh, dofmap.space, order)
    out = np.zeros(dofmap.n_dofs)
    if forcing is not None:
        nc, nq, d = vt.xq.shape
        f_q = np.asarray(forcing(vt.xq.reshape(-1, d)), dtype=float).reshape(nc, nq)
        np.add.at(out, dofmap.cell_dofs, np.einsum("cq,qb->cb", vt.wdet * f_q, vt.vals))
    if problem_cache is not None:
        problem_cache[key] = (dofmap.mesh, out)
    return out


# ---------------------------------------------------------------------------
# nonlinear terms


def _volume_nonlinear(dofmap, coeffs, p, order):
    """Advection + reaction residual/Jacobian contributions on cells.

    Same kernels as :func:`gbhfem.femcore.nonlinear_kernels`, restructured as
    matrix products over the quadrature axis so the hot loop stays in BLAS.
    """
    vt = volume_tables(dofmap.mesh, dofmap.space, order)
    cd = dofmap.cell_dofs
    nb = cd.shape[1]
    nc, nq = vt.wdet.shape
    ue = coeffs[cd]
    uq = ue @ vt.vals.T
    s = signed_pow(uq, p.delta)
    ds = d_signed_pow(uq, p.delta)

    source = np.zeros((nc, nq))
    j_weight = np.zeros((nc, nq))
    j_loc = 0.0
    if p.beta != 0.0:
        source -= p.beta * (uq * (1.0 - s) * (s - p.gamma))
        j_weight -= p.beta * ((1.0 - s) * (s - p.gamma) + uq * ds * (1.0 + p.gamma - 2.0 * s))
    if p.alpha != 0.0:
        grad = np.einsum("cb,cbd->cd", ue, vt.physgrads)
        gsum = grad.sum(axis=1)
        source += p.alpha * (s * gsum[:, None])
        j_weight += p.alpha * (ds * gsum[:, None])
        # d/du_j of the advective velocity part: s * sum_d grad(phi_j)_d
        sv = (vt.wdet * s) @ vt.vals
        j_loc = p.alpha * sv[:, :, None] * vt.grad_rowsum[:, None, :]
    r_loc = (vt.wdet * source) @ vt.vals
    j_loc = j_loc + ((vt.wdet * j_weight) @ vt.vals_outer).reshape(nc, nb, nb)
    rows = np.repeat(cd[:, :, None], nb, axis=2)
    cols = np.repeat(cd[:, None, :], nb, axis=1)
    return r_loc, (rows, cols, j_loc)


def _dg_upwind(dofmap, coeffs, p, order, dirichlet):
    """Upwind advective facet flux of the DG form and its Jacobian blocks.

    Per cell side with outward normal n the flux adds
    alpha * 0.5 * (w.n - |w.n|) (u_ext - u) v with w = signed_pow(u, delta)
    in every component, i.e. it acts only where w.n < 0 (inflow).
    """
    mesh = dofmap.mesh
    st = side_tables(mesh, SpaceKind.DG_P1, order)
    cd = dofmap.cell_dofs
    nb = cd.shape[1]
    res = np.zeros(dofmap.n_dofs)
    blocks = []

    def side_terms(ct, vals_t, co, vals_o, nsum, wq, g_ext=None):
        ut = np.einsum("fqb,fb->fq", vals_t, coeffs[cd[ct]])
        if g_ext is None:
            uo = np.einsum("fqb,fb->fq", vals_o, coeffs[cd[co]])
        else:
            uo = g_ext
        s = signed_pow(ut, p.delta)
        ds = d_signed_pow(ut, p.delta)
        wn = s * nsum[:, None]
        upw = 0.5 * (wn - np.abs(wn))
        diff = uo - ut
        r_loc = p.alpha * np.einsum("fq,fqk->fk", wq * upw * diff, vals_t)
        np.add.at(res, cd[ct], r_loc)
        dupw = 0.5 * (1.0 - np.sign(wn)) * ds * nsum[:, None]
        jt = p.alpha * np.einsum(
            "fq,fqj,fqk->fkj", wq * (dupw * diff - upw), vals_t, vals_t
        )
        rows = np.repeat(cd[ct][:, :, None], nb, axis=2)
        cols_t = np.repeat(cd[ct][:, None, :], nb, axis=1)
        blocks.append((rows, cols_t, jt))
        if g_ext is None:
            jo = p.alpha * np.einsum("fq,fqj,fqk->fkj", wq * upw, vals_o, vals_t)
            cols_o = np.repeat(cd[co][:, None, :], nb, axis=1)
            blocks.append((rows, cols_o, jo))

    nsum_int = st.n_int.sum(axis=1)
    side_terms(st.cp, st.vals_p, st.cm, st.vals_m, nsum_int, st.w_int)
    side_terms(st.cm, st.vals_m, st.cp, st.vals_p, -nsum_int, st.w_int)
    if dirichlet is not None and len(st.cb):
        g = np.asarray(dirichlet(st.xq_bnd.reshape(-1, mesh.dim)), dtype=float)
        g = g.reshape(st.xq_bnd.shape[:2])
        side_terms(st.cb, st.vals_b, None, None, st.n_bnd.sum(axis=1), st.w_bnd, g_ext=g)
    return res, blocks


# ---------------------------------------------------------------------------
# public entry points


def _resolve_order(problem):
    order = getattr(problem, "quad_order", None)
    return order if order else default_quad_order(problem.params.delta)


def assemble(space: SpaceKind, field: DiscreteField, problem):
    """Nonlinear residual R and exact Jacobian J at the given field.

    ``problem`` provides ``params``, ``forcing`` and ``dirichlet`` callables
    (either may be ``None``), a ``penalty`` for DG and an optional
    ``quad_order`` override.  Dirichlet data enters the DG assembly weakly
    here; for the other spaces use :func:`apply_dirichlet` afterwards.
    """
    dofmap = field.dofmap
    if dofmap.space is not space:
        raise AssemblyError(f"field lives in {dofmap.space}, not {space}")
    p = problem.params
    order = _resolve_order(problem)
    coeffs = field.coeffs
    cache = getattr(problem, "_cache", None)
    dirichlet = getattr(problem, "dirichlet", None)

    if space is SpaceKind.DG_P1:
        sigma = getattr(problem, "penalty", None) or DGPenalty()
        a_lin = dg_diffusion_matrix(dofmap, order, sigma.sigma, dirichlet is not None)
    else:
        a_lin = broken_stiffness(dofmap, order)

    r_loc, vol_block = _volume_nonlinear(dofmap, coeffs, p, order)
    residual = p.nu * (a_lin @ coeffs)
    np.add.at(residual, dofmap.cell_dofs, r_loc)
    residual -= _forcing_vector(dofmap, order, getattr(problem, "forcing", None), cache)

    blocks = [vol_block]
    if space is SpaceKind.DG_P1:
        if dirichlet is not None:
            gkey = ("gvec", order, sigma.sigma)
            hit = cache.get(gkey) if cache is not None else None
            if hit is not None and hit[0] is dofmap.mesh:
                gvec = hit[1]
            else:
                gvec = _dg_boundary_data_vector(dofmap, order, sigma.sigma, dirichlet)
                if cache is not None:
                    cache[gkey] = (dofmap.mesh, gvec)
            residual -= p.nu * gvec
        if p.alpha != 0.0:
            up_res, up_blocks = _dg_upwind(dofmap, coeffs, p, order, dirichlet)
            residual += up_res
            blocks.extend(up_blocks)

    jac = p.nu * a_lin + _coo_blocks_to_csr(dofmap.n_dofs, blocks)
    jac.sum_duplicates()

    if not np.isfinite(residual).all():
        bad_dof = int(np.flatnonzero(~np.isfinite(residual))[0])
        cells = np.flatnonzero((dofmap.cell_dofs == bad_dof).any(axis=1))
        raise AssemblyError(
            f"non-finite residual entry at dof {bad_dof} (cells {cells[:4].tolist()})"
        )
    return residual, jac


def apply_dirichlet(residual, jac, field: DiscreteField, bc):
    """Replace boundary-dof rows by identity with residual ``coeff - g``."""
    dofmap = field.dofmap
    if dofmap.space is SpaceKind.DG_P1:
        raise ContractError("DG imposes Dirichlet data weakly inside assemble()")
    b = dofmap.boundary_dofs
    pts = dof_points(dofmap)[b]
    g = np.asarray(bc(pts), dtype=float)
    if g.shape != (len(b),) or not np.isfinite(g).all():
        raise AssemblyError("boundary datum undefined at a boundary dof location")
    r = residual.copy()
    r[b] = field.coeffs[b] - g
    keep = np.ones(dofmap.n_dofs)
    keep[b] = 0.0
    ident = np.zeros(dofmap.n_dofs)
    ident[b] = 1.0
    j = sp.diags(keep) @ jac + sp.diags(ident)
    return r, j.tocsr()


def assemble_system(space: SpaceKind, field: DiscreteField, problem):
    """Assemble and, for the strongly constrained spaces, apply Dirichlet rows."""
    residual, jac = assemble(space, field, problem)
    dirichlet = getattr(problem, "dirichlet", None)
    if dirichlet is not None and space is not SpaceKind.DG_P1:
        residual, jac = apply_dirichlet(residual, jac, field, dirichlet)
    return residual, jac


DEFAULT_FD_STEPS = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7)


def directional_derivative_check(space, field, problem, direction, steps=DEFAULT_FD_STEPS):
    """Best finite-difference match of J(u) w over a range of step sizes.

    Returns ``min_t ||(R(u + t*w) - R(u))/t - J(u) w|| / ||J(u) w||``; small
    values certify the analytic Jacobian along the direction ``w``.
    """
    w = np.asarray(direction, dtype=float)
    if w.shape != field.coeffs.shape or not np.any(w):
        raise ParameterError("direction must be a nonzero vector matching the field")
    r0, jac = assemble_system(space, field, problem)
    jw = jac @ w
    denom = np.linalg.norm(jw)
    if denom == 0.0:
        raise ParameterError("J w vanishes; direction lies in the kernel")
    best = np.inf
    for t in steps:
        shifted = DiscreteField(field.dofmap, field.coeffs + t * w)
        rt, _ = assemble_system(space, shifted, problem)
        err = np.linalg.norm((rt - r0) / t - jw) / denom
        best = min(best, err)
    return best
