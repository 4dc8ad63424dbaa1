"""Assembly and direct solution of the discrete Stokes saddle problem.

The weak form is: velocity gradients tested against velocity gradients,
minus the pressure tested against the test-velocity divergence, with the
velocity divergence constrained to zero and the pressure pinned to zero mean
through a scalar Lagrange multiplier.  Dirichlet velocity data is eliminated
symmetrically via a nodal lift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .femspace import (
    DofMap,
    ScalarField,
    SolutionPair,
    VectorField,
    p2_grads,
    p2_values,
    p1_values,
    tri_rule,
    P2_HESSIANS,
)
from .mesh import Partition

__all__ = [
    "SolverFailure",
    "StokesSystem",
    "assemble",
    "error_norms",
    "inf_sup_constant",
    "pressure_l2_sq",
    "solve",
    "velocity_energy_sq",
]

RESIDUAL_RTOL = 1e-9


class SolverFailure(RuntimeError):
    """Raised when the sparse factorization fails or the residual check trips."""


@dataclass
class ElementGeometry:
    """Per-element affine maps, shared by assembly and the estimators."""

    xy: np.ndarray      # (T, 3, 2) corner coordinates
    b_mat: np.ndarray   # (T, 2, 2) reference-to-physical Jacobian
    binv: np.ndarray    # (T, 2, 2)
    det: np.ndarray     # (T,) Jacobian determinant = 2 * area
    area: np.ndarray    # (T,)


def element_geometry(part: Partition) -> ElementGeometry:
    xy = part.corner_xy
    b_mat = np.stack([xy[:, 1] - xy[:, 0], xy[:, 2] - xy[:, 0]], axis=2)
    det = b_mat[:, 0, 0] * b_mat[:, 1, 1] - b_mat[:, 0, 1] * b_mat[:, 1, 0]
    binv = np.empty_like(b_mat)
    binv[:, 0, 0] = b_mat[:, 1, 1] / det
    binv[:, 0, 1] = -b_mat[:, 0, 1] / det
    binv[:, 1, 0] = -b_mat[:, 1, 0] / det
    binv[:, 1, 1] = b_mat[:, 0, 0] / det
    return ElementGeometry(xy=xy, b_mat=b_mat, binv=binv, det=det, area=0.5 * det)


def quad_points_physical(geo: ElementGeometry, bary: np.ndarray) -> np.ndarray:
    """(T, nq, 2) physical quadrature points."""
    return np.einsum("qv,tvd->tqd", bary, geo.xy)


@dataclass
class StokesSystem:
    """Assembled matrices and data for one partition."""

    partition: Partition
    dofmap: DofMap
    a_mat: sp.csr_matrix     # (n_u, n_u) velocity stiffness
    b_mat: sp.csr_matrix     # (n_p, n_u) divergence pairing
    mass_p: sp.csr_matrix    # (n_p, n_p) pressure mass
    mean_vec: np.ndarray     # (n_p,) integrals of the pressure basis
    rhs: np.ndarray          # (n_u,) load vector
    g_vec: np.ndarray        # (n_u,) Dirichlet lift (zero off the boundary)

    @property
    def n_u(self) -> int:
        return self.dofmap.n_u

    @property
    def n_p(self) -> int:
        return self.dofmap.n_p


def assemble(part: Partition, dm: DofMap, f: VectorField,
             g: VectorField | None = None) -> StokesSystem:
    """Assemble stiffness, divergence, pressure mass, load, and lift.

    Parameters
    ----------
    f : callable mapping (n, 2) points to (n, 2) volume loads
    g : optional callable with the Dirichlet velocity trace; defaults to zero
    """
    geo = element_geometry(part)
    rule = tri_rule()
    nq = len(rule.tri_weights)
    T = part.n_leaves

    ref_grads = p2_grads(rule.tri_bary[:, 1:])          # (nq, 6, 2)
    ref_vals = p2_values(rule.tri_bary[:, 1:])          # (nq, 6)
    pref_vals = p1_values(rule.tri_bary[:, 1:])         # (nq, 3)
    wdet = rule.tri_weights[None, :] * geo.det[:, None]  # (T, nq)

    # physical basis gradients at each quadrature point: (T, nq, 6, 2)
    phys = np.einsum("qbk,tkl->tqbl", ref_grads, geo.binv)

    # scalar quadratic stiffness
    k_loc = np.einsum("tq,tqbl,tqcl->tbc", wdet, phys, phys)
    nn = dm.n_nodes
    rows = np.repeat(dm.cell_nodes, 6, axis=1).reshape(-1)
    cols = np.tile(dm.cell_nodes, (1, 6)).reshape(-1)
    k_scalar = sp.coo_matrix((k_loc.reshape(-1), (rows, cols)), shape=(nn, nn)).tocsr()
    a_mat = sp.kron(k_scalar, sp.identity(2, format="csr"), format="csr")

    # divergence pairing, columns interleaved by velocity component
    bx_loc = np.einsum("tq,qb,tqcx->tbc", wdet, pref_vals,
                       phys[:, :, :, :1]).reshape(T, 3, 6)
    by_loc = np.einsum("tq,qb,tqcx->tbc", wdet, pref_vals,
                       phys[:, :, :, 1:]).reshape(T, 3, 6)
    prow = np.repeat(dm.cell_pnodes, 6, axis=1).reshape(-1)
    ucol = np.tile(dm.cell_nodes, (1, 3)).reshape(-1)
    np_, nu = dm.n_p, dm.n_u
    bx = sp.coo_matrix((bx_loc.reshape(-1), (prow, ucol)), shape=(np_, nn))
    by = sp.coo_matrix((by_loc.reshape(-1), (prow, ucol)), shape=(np_, nn))
    b_mat = (sp.kron(bx.tocsr(), sp.csr_matrix([[1.0, 0.0]]))
             + sp.kron(by.tocsr(), sp.csr_matrix([[0.0, 1.0]]))).tocsr()

    # pressure mass and mean vector
    mp_loc = np.einsum("tq,qb,qc->tbc", wdet, pref_vals, pref_vals)
    prow_m = np.repeat(dm.cell_pnodes, 3, axis=1).reshape(-1)
    pcol_m = np.tile(dm.cell_pnodes, (1, 3)).reshape(-1)
    mass_p = sp.coo_matrix((mp_loc.reshape(-1), (prow_m, pcol_m)),
                           shape=(np_, np_)).tocsr()
    mean_vec = np.asarray(mass_p.sum(axis=1)).ravel()

    # load vector
    xq = quad_points_physical(geo, rule.tri_bary)
    fq = np.asarray(f(xq.reshape(-1, 2)), dtype=float).reshape(T, nq, 2)
    load_loc = np.einsum("tq,qb,tqc->tbc", wdet, ref_vals, fq)   # (T, 6, 2)
    rhs = np.zeros(nu)
    udofs = dm.cell_udofs().reshape(T, 6, 2)
    np.add.at(rhs, udofs.reshape(-1), load_loc.reshape(-1))

    # Dirichlet lift
    g_vec = np.zeros(nu)
    if g is not None and len(dm.boundary_nodes):
        bxy = dm.node_xy[dm.boundary_nodes]
        gv = np.asarray(g(bxy), dtype=float)
        g_vec[2 * dm.boundary_nodes] = gv[:, 0]
        g_vec[2 * dm.boundary_nodes + 1] = gv[:, 1]

    return StokesSystem(partition=part, dofmap=dm, a_mat=a_mat, b_mat=b_mat,
                        mass_p=mass_p, mean_vec=mean_vec, rhs=rhs, g_vec=g_vec)


def saddle_matrix(system: StokesSystem) -> tuple[sp.csc_matrix, np.ndarray, np.ndarray]:
    """Reduced symmetric saddle matrix with the zero-mean multiplier row."""
    dm = system.dofmap
    free = dm.free_umask
    a_ff = system.a_mat[free][:, free]
    b_f = system.b_mat[:, free]
    g_d = system.g_vec[~free]
    r1 = system.rhs[free] - system.a_mat[free][:, ~free] @ g_d
    r2 = system.b_mat[:, ~free] @ g_d
    m = sp.csr_matrix(system.mean_vec[:, None])
    kkt = sp.bmat(
        [[a_ff, -b_f.T, None],
         [-b_f, None, m],
         [None, m.T, None]],
        format="csc",
    )
    rhs = np.concatenate([r1, r2, [0.0]])
    return kkt, rhs, free


def pinned_matrix(system: StokesSystem) -> tuple[sp.csc_matrix, np.ndarray, np.ndarray]:
    """Nonsingular companion system used for factorization only.

    The continuity rows carry an exact rank-1 redundancy: the linear pressure
    basis sums to one, and discrete velocities vanishing on the boundary have
    zero total divergence.  Replacing one continuity row with the pinning
    equation ``p_0 = 0`` therefore yields an equivalent nonsingular system
    while avoiding the dense zero-mean row, whose fill-in makes direct
    factorization blow up on strongly graded meshes.  The zero-mean pressure
    representative is recovered by a constant shift after the solve.
    """
    dm = system.dofmap
    free = dm.free_umask
    a_ff = system.a_mat[free][:, free]
    b_f = system.b_mat[:, free]
    g_d = system.g_vec[~free]
    r1 = system.rhs[free] - system.a_mat[free][:, ~free] @ g_d
    r2 = system.b_mat[:, ~free] @ g_d
    nf = a_ff.shape[0]
    mat = sp.bmat([[a_ff, -b_f.T], [-b_f, None]], format="csr")
    row_scale = np.ones(mat.shape[0])
    row_scale[nf] = 0.0
    mat = sp.diags(row_scale) @ mat
    mat = (mat + sp.coo_matrix(([1.0], ([nf], [nf])), shape=mat.shape)).tocsc()
    rhs = np.concatenate([r1, r2])
    rhs[nf] = 0.0
    return mat, rhs, free


def solve(system: StokesSystem) -> SolutionPair:
    """Sparse direct solve of the saddle problem with residual verification.

    The factorization works on the pinned companion system; the result is
    then shifted to the zero-mean pressure representative and verified
    against the full saddle system including the mean-constraint row.
    """
    pinned, prhs, free = pinned_matrix(system)
    try:
        lu = splu(pinned)
        z = lu.solve(prhs)
    except (RuntimeError, ValueError) as exc:
        raise SolverFailure(f"sparse factorization failed: {exc}") from exc
    if not np.isfinite(z).all():
        raise SolverFailure("sparse factorization produced non-finite values "
                            "(singular saddle matrix)")
    # iterative refinement: strongly graded meshes make the system
    # ill-conditioned; correcting with the existing factorization recovers
    # a small residual at negligible cost
    ptol = RESIDUAL_RTOL * (1.0 + float(np.abs(prhs).max()))
    for _ in range(3):
        r = prhs - pinned @ z
        if float(np.abs(r).max()) <= 0.05 * ptol:
            break
        z = z + lu.solve(r)
        if not np.isfinite(z).all():
            raise SolverFailure("iterative refinement diverged")

    dm = system.dofmap
    nf = int(free.sum())
    u = system.g_vec.copy()
    u[free] = z[:nf]
    p = z[nf:] - (system.mean_vec @ z[nf:]) / system.mean_vec.sum()

    # verify against the saddle system of record; the multiplier absorbs any
    # data incompatibility in the continuity rows (zero for compatible data)
    kkt, rhs, _ = saddle_matrix(system)
    z_full = np.concatenate([z[:nf], p, [0.0]])
    r_cont = (rhs - kkt @ z_full)[nf:nf + dm.n_p]
    m = system.mean_vec
    lam = float(m @ r_cont) / float(m @ m)
    z_full[-1] = lam
    resid = float(np.abs(kkt @ z_full - rhs).max())
    tol = RESIDUAL_RTOL * (1.0 + float(np.abs(rhs).max()))
    if resid > tol:
        raise SolverFailure(
            f"solver residual {resid:.3e} exceeds tolerance {tol:.3e}"
        )
    sol = SolutionPair(u=u, p=p, partition=system.partition, dofmap=dm,
                       residual=resid, mean_multiplier=lam)
    mean = abs(float(system.mean_vec @ p))
    scale = float(np.sqrt(pressure_l2_sq(system, p))) if dm.n_p else 0.0
    assert mean <= 1e-10 * max(scale, 1.0), "discrete pressure mean not zero"
    return sol


def velocity_energy_sq(system: StokesSystem, u: np.ndarray) -> float:
    """Squared gradient seminorm of a velocity coefficient vector."""
    return float(u @ (system.a_mat @ u))


def pressure_l2_sq(system: StokesSystem, p: np.ndarray) -> float:
    return float(p @ (system.mass_p @ p))


def error_norms(sol: SolutionPair, exact) -> tuple[float, float]:
    """Quadrature gradient-seminorm and zero-mean-aligned pressure errors.

    ``exact`` provides vectorized callables ``grad_u`` ((n,2,2) with entry
    [k,l] = d u_k / d x_l) and ``p``.
    """
    part, dm = sol.partition, sol.dofmap
    geo = element_geometry(part)
    rule = tri_rule()
    nq = len(rule.tri_weights)
    T = part.n_leaves
    wdet = rule.tri_weights[None, :] * geo.det[:, None]

    phys = np.einsum("qbk,tkl->tqbl", p2_grads(rule.tri_bary[:, 1:]), geo.binv)
    coeff = sol.u_nodes()[dm.cell_nodes]                     # (T, 6, 2)
    grad_h = np.einsum("tbc,tqbl->tqcl", coeff, phys)        # (T, nq, 2, 2)

    xq = quad_points_physical(geo, rule.tri_bary).reshape(-1, 2)
    grad_ex = np.asarray(exact.grad_u(xq), dtype=float).reshape(T, nq, 2, 2)
    diff = grad_ex - grad_h
    err_u_sq = float(np.einsum("tq,tqcl->", wdet, diff * diff))

    pvals = p1_values(rule.tri_bary[:, 1:])
    p_h = np.einsum("tb,qb->tq", sol.p[dm.cell_pnodes], pvals)
    p_ex = np.asarray(exact.p(xq), dtype=float).reshape(T, nq)
    dp = p_ex - p_h
    total_area = float(geo.area.sum())
    shift = float((wdet * dp).sum()) / total_area
    dp = dp - shift
    err_p_sq = float((wdet * dp * dp).sum())
    return float(np.sqrt(err_u_sq)), float(np.sqrt(err_p_sq))


def inf_sup_constant(system: StokesSystem) -> float:
    """Discrete inf-sup constant via the dense pressure Schur complement.

    Smallest generalized eigenvalue of (B A^-1 B^T) q = lambda M_p q over
    zero-mean pressures, returned as its square root.  Dense diagnostic:
    refuses systems with more than 4000 total dofs.
    """
    dm = system.dofmap
    if dm.n_dofs > 4000:
        raise ValueError(
            f"inf-sup diagnostic is dense; {dm.n_dofs} dofs exceed the 4000 limit"
        )
    free = dm.free_umask
    a_ff = system.a_mat[free][:, free].toarray()
    b_f = system.b_mat[:, free].toarray()
    if a_ff.shape[0] == 0:
        return 0.0
    schur = b_f @ np.linalg.solve(a_ff, b_f.T)
    # orthonormal basis of the zero-mean pressure subspace
    m = system.mean_vec
    q_full, _ = np.linalg.qr(m[:, None], mode="complete")
    z = q_full[:, 1:]
    s_z = z.T @ schur @ z
    m_z = z.T @ system.mass_p.toarray() @ z
    lam = scipy.linalg.eigh(s_z, m_z, eigvals_only=True)
    return float(np.sqrt(max(lam[0], 0.0)))
