"""Taylor-Hood (quadratic velocity / linear pressure) spaces on a partition.

Scalar velocity nodes are the mesh vertices plus one node per edge midpoint;
each carries two interleaved velocity components (dof = 2*node + component).
Pressure nodes are the vertices.  All tables are dense numpy arrays so the
assembly and estimator layers can run vectorized over elements.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mesh import Partition

__all__ = [
    "DofMap",
    "QuadratureRule",
    "SolutionPair",
    "build_dofmap",
    "edge_rule",
    "eval_pressure",
    "eval_velocity",
    "eval_velocity_gradient",
    "interpolate",
    "p1_values",
    "p2_grads",
    "p2_values",
    "prolong",
    "tri_rule",
]

VectorField = Callable[[np.ndarray], np.ndarray]
ScalarField = Callable[[np.ndarray], np.ndarray]


# -- quadrature ----------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    """Reference-cell quadrature: points in barycentric/arclength coordinates.

    Triangle weights sum to the reference measure 1/2, edge weights to 1.
    """

    tri_bary: np.ndarray    # (nq, 3)
    tri_weights: np.ndarray  # (nq,), sum = 1/2
    edge_t: np.ndarray      # (ne,), points in (0, 1)
    edge_weights: np.ndarray  # (ne,), sum = 1


def _build_tri_rule() -> tuple[np.ndarray, np.ndarray]:
    # 12-point rule, exact for polynomials of total degree 6, all weights > 0
    groups3 = [
        (0.873821971016996, 0.063089014491502, 0.050844906370207),
        (0.501426509658179, 0.249286745170910, 0.116786275726379),
    ]
    group6 = (0.053145049844816, 0.310352451033785, 0.082851075618374)
    pts, wts = [], []
    for a, b, w in groups3:
        for lam in ((a, b, b), (b, a, b), (b, b, a)):
            pts.append(lam)
            wts.append(w)
    a, b, w = group6
    c = 1.0 - a - b
    for lam in ((a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)):
        pts.append(lam)
        wts.append(w)
    bary = np.asarray(pts)
    weights = np.asarray(wts)
    weights = weights / weights.sum() * 0.5
    return bary, weights


def _build_edge_rule() -> tuple[np.ndarray, np.ndarray]:
    # 4-point Gauss-Legendre on (0,1), exact for degree 7
    r = np.sqrt(6.0 / 5.0)
    x1 = np.sqrt((3.0 - 2.0 * r) / 7.0)
    x2 = np.sqrt((3.0 + 2.0 * r) / 7.0)
    w1 = (18.0 + np.sqrt(30.0)) / 36.0
    w2 = (18.0 - np.sqrt(30.0)) / 36.0
    x = np.array([-x2, -x1, x1, x2])
    w = np.array([w2, w1, w1, w2])
    return (x + 1.0) / 2.0, w / 2.0


_TRI_BARY, _TRI_W = _build_tri_rule()
_EDGE_T, _EDGE_W = _build_edge_rule()


def tri_rule() -> QuadratureRule:
    """The quadrature rule used throughout (degree-6 triangle, degree-7 edge)."""
    return QuadratureRule(_TRI_BARY.copy(), _TRI_W.copy(),
                          _EDGE_T.copy(), _EDGE_W.copy())


def edge_rule() -> tuple[np.ndarray, np.ndarray]:
    return _EDGE_T.copy(), _EDGE_W.copy()


# -- reference basis -----------------------------------------------------
#
# Barycentric coordinates (l0, l1, l2) = (1-x-y, x, y).  Quadratic nodes:
# 0..2 at the vertices, 3+i at the midpoint of the edge opposite vertex i.

_L_GRADS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def _bary(points: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(points)
    return np.column_stack([1.0 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]])


def p2_values(points: np.ndarray) -> np.ndarray:
    """(n, 6) quadratic basis values at reference points (x, y)."""
    lam = _bary(points)
    out = np.empty((len(lam), 6))
    for i in range(3):
        out[:, i] = lam[:, i] * (2.0 * lam[:, i] - 1.0)
        j, k = (i + 1) % 3, (i + 2) % 3
        out[:, 3 + i] = 4.0 * lam[:, j] * lam[:, k]
    return out


def p2_grads(points: np.ndarray) -> np.ndarray:
    """(n, 6, 2) quadratic basis gradients at reference points."""
    lam = _bary(points)
    out = np.empty((len(lam), 6, 2))
    for i in range(3):
        out[:, i] = (4.0 * lam[:, i] - 1.0)[:, None] * _L_GRADS[i]
        j, k = (i + 1) % 3, (i + 2) % 3
        out[:, 3 + i] = 4.0 * (lam[:, j][:, None] * _L_GRADS[k]
                               + lam[:, k][:, None] * _L_GRADS[j])
    return out


# constant reference Hessians of the 6 quadratic basis functions, (6, 2, 2)
P2_HESSIANS = np.empty((6, 2, 2))
for _i in range(3):
    P2_HESSIANS[_i] = 4.0 * np.outer(_L_GRADS[_i], _L_GRADS[_i])
    _j, _k = (_i + 1) % 3, (_i + 2) % 3
    P2_HESSIANS[3 + _i] = 4.0 * (np.outer(_L_GRADS[_j], _L_GRADS[_k])
                                 + np.outer(_L_GRADS[_k], _L_GRADS[_j]))
del _i, _j, _k


def p1_values(points: np.ndarray) -> np.ndarray:
    """(n, 3) linear basis values at reference points."""
    return _bary(points)


P1_GRADS = _L_GRADS.copy()

# local scalar-node order within an element: vertex nodes then edge nodes,
# edge node 3+i sits at the midpoint of the edge opposite local vertex i
_REF_NODES = np.array([
    [0.0, 0.0], [1.0, 0.0], [0.0, 1.0],
    [0.5, 0.5], [0.0, 0.5], [0.5, 0.0],
])


# -- dof map -------------------------------------------------------------


@dataclass
class DofMap:
    """Global Taylor-Hood numbering over the leaves of one partition."""

    partition: Partition
    vert_ids: np.ndarray        # sorted forest vertex ids active in the snapshot
    edge_verts: np.ndarray      # (nE, 2) sorted vertex pairs, lexicographic
    cell_nodes: np.ndarray      # (T, 6) scalar velocity node per local node
    cell_pnodes: np.ndarray     # (T, 3) pressure node per local vertex
    node_xy: np.ndarray         # (n_nodes, 2) scalar node coordinates
    boundary_nodes: np.ndarray  # scalar node ids on the domain boundary
    meets_stability: bool       # >= 3 leaves, each with an interior vertex

    @property
    def n_vertices(self) -> int:
        return len(self.vert_ids)

    @property
    def n_edges(self) -> int:
        return len(self.edge_verts)

    @property
    def n_nodes(self) -> int:
        return len(self.node_xy)

    @property
    def n_u(self) -> int:
        return 2 * self.n_nodes

    @property
    def n_p(self) -> int:
        return self.n_vertices

    @property
    def n_dofs(self) -> int:
        return self.n_u + self.n_p

    @property
    def boundary_udofs(self) -> np.ndarray:
        b = self.boundary_nodes
        return np.sort(np.concatenate([2 * b, 2 * b + 1]))

    @property
    def free_umask(self) -> np.ndarray:
        mask = np.ones(self.n_u, dtype=bool)
        mask[self.boundary_udofs] = False
        return mask

    def cell_udofs(self) -> np.ndarray:
        """(T, 12) velocity dofs per element, components interleaved."""
        nodes = self.cell_nodes
        out = np.empty((len(nodes), 12), dtype=np.int64)
        out[:, 0::2] = 2 * nodes
        out[:, 1::2] = 2 * nodes + 1
        return out


def _encode(pairs: np.ndarray) -> np.ndarray:
    return pairs[:, 0].astype(np.int64) * (1 << 32) + pairs[:, 1]


def build_dofmap(part: Partition) -> DofMap:
    """Construct the Taylor-Hood dof tables for a conforming partition.

    Emits a warning (and flags the result) when the partition violates the
    discrete pressure-stability requirement: at least three elements, each
    with at least one vertex interior to the domain.
    """
    part.check_conforming()
    tris = part.leaf_tris
    vert_ids = part.active_vert_ids
    vmap = np.full(part.forest.n_vertices, -1, dtype=np.int64)
    vmap[vert_ids] = np.arange(len(vert_ids))

    # deterministic edge numbering: lexicographic in (min, max) vertex id
    local_pairs = np.stack([tris[:, [1, 2]], tris[:, [2, 0]], tris[:, [0, 1]]],
                           axis=1).reshape(-1, 2)
    lo, hi = local_pairs.min(axis=1), local_pairs.max(axis=1)
    codes = lo * (1 << 32) + hi
    uniq = np.unique(codes)
    edge_idx = np.searchsorted(uniq, codes).reshape(-1, 3)
    edge_verts = np.stack([uniq >> 32, uniq & ((1 << 32) - 1)], axis=1)

    nv = len(vert_ids)
    cell_nodes = np.concatenate([vmap[tris], nv + edge_idx], axis=1)
    cell_pnodes = vmap[tris]

    vxy = part.coords(vert_ids)
    exy = 0.5 * (part.coords(edge_verts[:, 0]) + part.coords(edge_verts[:, 1]))
    node_xy = np.vstack([vxy, exy])

    bnd = part.boundary_edge_verts
    bcodes = _encode(np.sort(bnd, axis=1))
    bedge_nodes = nv + np.searchsorted(uniq, bcodes)
    bvert_nodes = np.unique(vmap[bnd])
    boundary_nodes = np.unique(np.concatenate([bvert_nodes, bedge_nodes]))

    interior_vmask = np.ones(nv, dtype=bool)
    interior_vmask[bvert_nodes] = False
    stable = part.n_leaves >= 3 and bool(interior_vmask[cell_pnodes].any(axis=1).all())
    if not stable:
        warnings.warn(
            "partition violates the pressure-stability requirement "
            "(needs >= 3 elements, each touching an interior vertex); "
            "the discrete saddle problem may be singular",
            stacklevel=2,
        )
    return DofMap(
        partition=part,
        vert_ids=vert_ids,
        edge_verts=edge_verts,
        cell_nodes=cell_nodes,
        cell_pnodes=cell_pnodes,
        node_xy=node_xy,
        boundary_nodes=boundary_nodes,
        meets_stability=stable,
    )


# -- solutions -----------------------------------------------------------


@dataclass
class SolutionPair:
    """Coefficient vectors of one discrete velocity/pressure pair."""

    u: np.ndarray
    p: np.ndarray
    partition: Partition
    dofmap: DofMap
    residual: float = 0.0
    mean_multiplier: float = 0.0

    def u_nodes(self) -> np.ndarray:
        """(n_nodes, 2) velocity values by scalar node."""
        return self.u.reshape(-1, 2)


def _pressure_weights(dm: DofMap) -> np.ndarray:
    """Integral of each pressure basis function (row sums of the mass matrix)."""
    areas = dm.partition.areas
    w = np.zeros(dm.n_p)
    np.add.at(w, dm.cell_pnodes, (areas / 3.0)[:, None])
    return w


def interpolate(u_fn: VectorField, p_fn: ScalarField, dm: DofMap) -> SolutionPair:
    """Nodal interpolant with the pressure shifted to zero mean."""
    uvals = np.asarray(u_fn(dm.node_xy), dtype=float)
    u = uvals.reshape(-1)
    p = np.asarray(p_fn(dm.node_xy[: dm.n_p]), dtype=float).copy()
    w = _pressure_weights(dm)
    p -= (w @ p) / w.sum()
    return SolutionPair(u=u, p=p, partition=dm.partition, dofmap=dm)


def prolong(coarse: SolutionPair, fine_dm: DofMap) -> SolutionPair:
    """Exact re-expansion of a coarse solution on a refining partition."""
    cpart = coarse.partition
    fpart = fine_dm.partition
    anc = fpart.ancestor_leaf_in(cpart)   # coarse leaf id per fine leaf
    cpos = np.asarray([cpart.leaf_pos[int(a)] for a in anc], dtype=np.int64)

    cdm = coarse.dofmap
    cxy = cpart.corner_xy[cpos]                       # (T, 3, 2)
    b_mat = np.stack([cxy[:, 1] - cxy[:, 0], cxy[:, 2] - cxy[:, 0]], axis=2)
    binv = np.linalg.inv(b_mat)

    cu = coarse.u_nodes()[cdm.cell_nodes[cpos]]       # (T, 6, 2)
    cp = coarse.p[cdm.cell_pnodes[cpos]]              # (T, 3)

    fnode_xy = fine_dm.node_xy[fine_dm.cell_nodes]    # (T, 6, 2)
    ref = np.einsum("tkl,tnl->tnk", binv, fnode_xy - cxy[:, None, 0])
    ref_flat = ref.reshape(-1, 2)
    vals = p2_values(ref_flat).reshape(len(cpos), 6, 6)     # (T, nodes, basis)
    uvals = np.einsum("tnb,tbc->tnc", vals, cu)             # (T, 6, 2)

    u = np.zeros((fine_dm.n_nodes, 2))
    u[fine_dm.cell_nodes.reshape(-1)] = uvals.reshape(-1, 2)

    fvert_xy = fine_dm.node_xy[fine_dm.cell_pnodes]
    refp = np.einsum("tkl,tnl->tnk", binv, fvert_xy - cxy[:, None, 0])
    pvals = p1_values(refp.reshape(-1, 2)).reshape(len(cpos), 3, 3)
    pcell = np.einsum("tnb,tb->tn", pvals, cp)
    p = np.zeros(fine_dm.n_p)
    p[fine_dm.cell_pnodes.reshape(-1)] = pcell.reshape(-1)

    return SolutionPair(u=u.reshape(-1), p=p, partition=fpart, dofmap=fine_dm)


# -- point evaluation (tree descent; intended for diagnostics/tests) ------


def _locate_ref(sol: SolutionPair, points: np.ndarray):
    part = sol.partition
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    elems = part.locate(pts)
    if (elems < 0).any():
        raise ValueError("points outside the meshed domain")
    pos = np.asarray([part.leaf_pos[int(e)] for e in elems], dtype=np.int64)
    xy = part.corner_xy[pos]
    b_mat = np.stack([xy[:, 1] - xy[:, 0], xy[:, 2] - xy[:, 0]], axis=2)
    binv = np.linalg.inv(b_mat)
    ref = np.einsum("nkl,nl->nk", binv, pts - xy[:, 0])
    return pos, ref, binv


def eval_velocity(sol: SolutionPair, points: np.ndarray) -> np.ndarray:
    pos, ref, _ = _locate_ref(sol, points)
    coeff = sol.u_nodes()[sol.dofmap.cell_nodes[pos]]
    vals = p2_values(ref)
    return np.einsum("nb,nbc->nc", vals, coeff)


def eval_velocity_gradient(sol: SolutionPair, points: np.ndarray) -> np.ndarray:
    """(n, 2, 2) arrays with entry [k, l] = d u_k / d x_l."""
    pos, ref, binv = _locate_ref(sol, points)
    coeff = sol.u_nodes()[sol.dofmap.cell_nodes[pos]]
    grads = np.einsum("nbk,nkl->nbl", p2_grads(ref), binv)
    return np.einsum("nbc,nbl->ncl", coeff, grads)


def eval_pressure(sol: SolutionPair, points: np.ndarray) -> np.ndarray:
    pos, ref, _ = _locate_ref(sol, points)
    coeff = sol.p[sol.dofmap.cell_pnodes[pos]]
    vals = p1_values(ref)
    return np.einsum("nb,nb->n", vals, coeff)
