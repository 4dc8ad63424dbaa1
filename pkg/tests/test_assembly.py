"""Assembly/solve tests: matrix identities against quadrature oracles, the
linear patch test, Galerkin orthogonality, error norms, and the inf-sup
diagnostic.
"""

from __future__ import annotations

import numpy as np
import pytest

from stokesafem.assembly import (
    SolverFailure,
    assemble,
    error_norms,
    inf_sup_constant,
    pressure_l2_sq,
    saddle_matrix,
    solve,
    velocity_energy_sq,
)
from stokesafem.femspace import (
    build_dofmap,
    interpolate,
    p2_grads,
    tri_rule,
)
from stokesafem.mesh import refine, two_triangle_square, unit_square_partition
from stokesafem.problems import ExactSolution, builtin_problems


def uniform_refine(part, levels=1):
    for _ in range(levels):
        part = refine(part, part.leaves)
    return part


@pytest.fixture(scope="module")
def mms():
    return builtin_problems()["smooth-mms"]


@pytest.fixture(scope="module")
def patch():
    return builtin_problems()["linear-patch"]


def quadrature_energy(part, dm, u_coeff):
    """Independent route: integrate |grad u_h|^2 with the quadrature rule."""
    rule = tri_rule()
    xy = part.corner_xy
    b_mat = np.stack([xy[:, 1] - xy[:, 0], xy[:, 2] - xy[:, 0]], axis=2)
    det = b_mat[:, 0, 0] * b_mat[:, 1, 1] - b_mat[:, 0, 1] * b_mat[:, 1, 0]
    binv = np.linalg.inv(b_mat)
    phys = np.einsum("qbk,tkl->tqbl", p2_grads(rule.tri_bary[:, 1:]), binv)
    coeff = u_coeff.reshape(-1, 2)[dm.cell_nodes]
    grads = np.einsum("tbc,tqbl->tqcl", coeff, phys)
    wdet = rule.tri_weights[None, :] * det[:, None]
    return float(np.einsum("tq,tqcl->", wdet, grads * grads))


def test_stiffness_quadratic_form_matches_quadrature_oracle():
    part = uniform_refine(unit_square_partition(), 2)
    dm = build_dofmap(part)
    sysm = assemble(part, dm, lambda xy: np.zeros_like(xy))
    rng = np.random.default_rng(0)
    for _ in range(5):
        v = rng.standard_normal(dm.n_u)
        assert velocity_energy_sq(sysm, v) == pytest.approx(
            quadrature_energy(part, dm, v), rel=1e-12)


def test_stiffness_on_linear_shear_equals_domain_area():
    # grad of (y, 0) has a single unit entry, so its energy equals |domain| = 1
    part = uniform_refine(unit_square_partition(), 1)
    dm = build_dofmap(part)
    sysm = assemble(part, dm, lambda xy: np.zeros_like(xy))
    sol = interpolate(lambda xy: np.stack([xy[:, 1], np.zeros(len(xy))], axis=1),
                      lambda xy: np.zeros(len(xy)), dm)
    assert velocity_energy_sq(sysm, sol.u) == pytest.approx(1.0, rel=1e-13)


def test_divergence_row_sums_vanish_on_interior_velocities():
    # integrating div v against the constant pressure 1 gives the boundary
    # flux, which vanishes for velocities supported away from the boundary
    part = uniform_refine(unit_square_partition(), 2)
    dm = build_dofmap(part)
    sysm = assemble(part, dm, lambda xy: np.zeros_like(xy))
    rng = np.random.default_rng(1)
    ones = np.ones(dm.n_p)
    for _ in range(5):
        v = rng.standard_normal(dm.n_u)
        v[~dm.free_umask] = 0.0
        assert abs(ones @ (sysm.b_mat @ v)) <= 1e-12 * np.abs(v).max()


def test_divergence_matrix_matches_quadrature_oracle():
    part = uniform_refine(unit_square_partition(), 1)
    dm = build_dofmap(part)
    sysm = assemble(part, dm, lambda xy: np.zeros_like(xy))
    # v = (x^2, 0) has div = 2x; against q = x the integral over the unit
    # square is int 2x*x = 2/3
    v = interpolate(lambda xy: np.stack([xy[:, 0] ** 2, np.zeros(len(xy))], axis=1),
                    lambda xy: np.zeros(len(xy)), dm).u
    q = dm.node_xy[: dm.n_p, 0]
    assert q @ (sysm.b_mat @ v) == pytest.approx(2.0 / 3.0, rel=1e-13)


def test_pressure_mass_and_mean_vector():
    part = uniform_refine(unit_square_partition(), 2)
    dm = build_dofmap(part)
    sysm = assemble(part, dm, lambda xy: np.zeros_like(xy))
    ones = np.ones(dm.n_p)
    assert sysm.mean_vec.sum() == pytest.approx(1.0, rel=1e-13)
    assert pressure_l2_sq(sysm, ones) == pytest.approx(1.0, rel=1e-13)
    # mean vector is the mass matrix applied to the constant 1
    assert np.allclose(sysm.mass_p @ ones, sysm.mean_vec, atol=1e-15)


def test_saddle_matrix_is_symmetric(mms):
    part = uniform_refine(unit_square_partition(), 2)
    dm = build_dofmap(part)
    sysm = assemble(part, dm, mms.f, mms.g)
    kkt, _, _ = saddle_matrix(sysm)
    asym = abs(kkt - kkt.T).max()
    assert asym <= 1e-14


def test_zero_data_gives_zero_solution():
    part = uniform_refine(unit_square_partition(), 1)
    dm = build_dofmap(part)
    sysm = assemble(part, dm, lambda xy: np.zeros_like(xy))
    sol = solve(sysm)
    assert np.abs(sol.u).max() <= 1e-12
    assert np.abs(sol.p).max() <= 1e-12


def test_patch_test_reproduces_linear_flow(patch):
    part = patch.make_partition()
    for _ in range(3):
        dm = build_dofmap(part)
        sol = solve(assemble(part, dm, patch.f, patch.g))
        eu, ep = error_norms(sol, patch.exact)
        assert np.hypot(eu, ep) <= 1e-9
        part = refine(part, part.leaves)


def test_solver_residual_is_checked(mms):
    part = uniform_refine(unit_square_partition(), 2)
    dm = build_dofmap(part)
    sol = solve(assemble(part, dm, mms.f, mms.g))
    assert sol.residual <= 1e-9 * (1.0 + 1.0)
    # multiplier of a compatible problem is 0 up to roundoff
    assert abs(sol.mean_multiplier) <= 1e-9


def test_unstable_mesh_warns_and_saddle_is_rank_deficient():
    part = two_triangle_square()
    with pytest.warns(UserWarning, match="stability"):
        dm = build_dofmap(part)
    sysm = assemble(part, dm, lambda xy: np.ones((len(xy), 2)))
    kkt, _, _ = saddle_matrix(sysm)
    assert np.linalg.matrix_rank(kkt.toarray()) < kkt.shape[0]


def test_solver_failure_on_singular_system(mms):
    import dataclasses
    import scipy.sparse as sp

    part = uniform_refine(unit_square_partition(), 1)
    dm = build_dofmap(part)
    sysm = assemble(part, dm, mms.f, mms.g)
    broken = dataclasses.replace(
        sysm, a_mat=sp.csr_matrix(sysm.a_mat.shape))
    with pytest.raises(SolverFailure):
        solve(broken)


def test_galerkin_orthogonality(mms):
    # a(u - u_h, v) - b(v, p - p_h) - b(u - u_h, q) = 0 for all discrete
    # (v, q) with v vanishing on the boundary; the exact-solution integrals
    # are evaluated by quadrature
    part = uniform_refine(unit_square_partition(), 3)
    dm = build_dofmap(part)
    sysm = assemble(part, dm, mms.f, mms.g)
    sol = solve(sysm)
    ex = interpolate(mms.exact.u, mms.exact.p, dm)  # only for scale reference

    rule = tri_rule()
    xy = part.corner_xy
    b_mat = np.stack([xy[:, 1] - xy[:, 0], xy[:, 2] - xy[:, 0]], axis=2)
    det = b_mat[:, 0, 0] * b_mat[:, 1, 1] - b_mat[:, 0, 1] * b_mat[:, 1, 0]
    binv = np.linalg.inv(b_mat)
    wdet = rule.tri_weights[None, :] * det[:, None]
    xq = np.einsum("qv,tvd->tqd", rule.tri_bary, xy).reshape(-1, 2)
    T, nq = part.n_leaves, len(rule.tri_weights)

    grad_ex = np.asarray(mms.exact.grad_u(xq)).reshape(T, nq, 2, 2)
    p_ex = np.asarray(mms.exact.p(xq)).reshape(T, nq)

    phys = np.einsum("qbk,tkl->tqbl", p2_grads(rule.tri_bary[:, 1:]), binv)
    rng = np.random.default_rng(2)
    from stokesafem.femspace import p1_values

    pvals = p1_values(rule.tri_bary[:, 1:])
    scale = np.sqrt(velocity_energy_sq(sysm, ex.u) + pressure_l2_sq(sysm, ex.p))
    for _ in range(10):
        v = rng.standard_normal(dm.n_u)
        v[~dm.free_umask] = 0.0
        q = rng.standard_normal(dm.n_p)
        vg = np.einsum("tbc,tqbl->tqcl", v.reshape(-1, 2)[dm.cell_nodes], phys)
        div_v = vg[:, :, 0, 0] + vg[:, :, 1, 1]
        qv = np.einsum("tb,qb->tq", q[dm.cell_pnodes], pvals)
        # exact-solution side by quadrature
        a_ex = float(np.einsum("tq,tqcl->", wdet, grad_ex * vg))
        b_vq_ex = float((wdet * p_ex * div_v).sum())
        grad_uex_val = grad_ex[:, :, 0, 0] + grad_ex[:, :, 1, 1]
        b_uq_ex = float((wdet * qv * grad_uex_val).sum())
        # discrete side by matrices
        a_h = float(v @ (sysm.a_mat @ sol.u))
        b_vq_h = float(sol.p @ (sysm.b_mat @ v))
        b_uq_h = float(q @ (sysm.b_mat @ sol.u))
        resid = (a_ex - a_h) - (b_vq_ex - b_vq_h) - (b_uq_ex - b_uq_h)
        norm_v = np.sqrt(velocity_energy_sq(sysm, v) + pressure_l2_sq(sysm, q))
        assert abs(resid) <= 1e-8 * max(scale, 1.0) * norm_v


def test_error_norms_zero_for_self(mms):
    part = uniform_refine(unit_square_partition(), 2)
    dm = build_dofmap(part)
    sol = solve(assemble(part, dm, mms.f, mms.g))

    def grad_from_sol(xy):
        from stokesafem.femspace import eval_velocity_gradient
        return eval_velocity_gradient(sol, xy)

    def p_from_sol(xy):
        from stokesafem.femspace import eval_pressure
        return eval_pressure(sol, xy)

    self_exact = ExactSolution(u=lambda xy: np.zeros_like(xy),
                               grad_u=grad_from_sol, p=p_from_sol)
    eu, ep = error_norms(sol, self_exact)
    assert eu <= 1e-10
    assert ep <= 1e-10


def test_error_norm_pressure_alignment_ignores_constants(mms):
    part = uniform_refine(unit_square_partition(), 2)
    dm = build_dofmap(part)
    sol = solve(assemble(part, dm, mms.f, mms.g))
    shifted = ExactSolution(u=mms.exact.u, grad_u=mms.exact.grad_u,
                            p=lambda xy: mms.exact.p(xy) + 17.0)
    eu0, ep0 = error_norms(sol, mms.exact)
    eu1, ep1 = error_norms(sol, shifted)
    assert eu1 == pytest.approx(eu0, rel=1e-12)
    assert ep1 == pytest.approx(ep0, rel=1e-9)


def test_uniform_refinement_error_ratio_is_quadratic(mms):
    # two bisection sweeps halve h, so the gradient error drops ~4x
    part = uniform_refine(unit_square_partition(), 3)
    errs = []
    for _ in range(3):
        dm = build_dofmap(part)
        sol = solve(assemble(part, dm, mms.f, mms.g))
        errs.append(error_norms(sol, mms.exact)[0])
        part = uniform_refine(part, 2)
    ratio = errs[-2] / errs[-1]
    assert ratio == pytest.approx(4.0, rel=0.15)


def test_inf_sup_flags_unstable_mesh():
    part = two_triangle_square()
    with pytest.warns(UserWarning):
        dm = build_dofmap(part)
    sysm = assemble(part, dm, lambda xy: np.zeros_like(xy))
    assert inf_sup_constant(sysm) <= 1e-6


def test_inf_sup_stable_on_nested_compliant_meshes():
    part = unit_square_partition()
    betas = []
    for _ in range(4):
        dm = build_dofmap(part)
        sysm = assemble(part, dm, lambda xy: np.zeros_like(xy))
        assert dm.n_dofs <= 4000
        betas.append(inf_sup_constant(sysm))
        part = uniform_refine(part)
    betas = np.asarray(betas)
    assert (betas >= 0.05).all()
    assert betas.max() / betas.min() <= 2.0


def test_inf_sup_refuses_large_systems(mms):
    part = uniform_refine(unit_square_partition(), 8)
    dm = build_dofmap(part)
    assert dm.n_dofs > 4000
    sysm = assemble(part, dm, mms.f, mms.g)
    with pytest.raises(ValueError, match="4000"):
        inf_sup_constant(sysm)
