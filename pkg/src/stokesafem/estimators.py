"""Residual a posteriori error indicators for the discrete Stokes solution.

Three related squared estimators are supported.  All share the core
residual: element terms  h^2 * ||f + laplace(u_h) - grad(p_h)||^2  plus
normal-derivative jumps  h_e * ||[du_h/dn]||^2  over edges interior to the
queried element set.  They differ in how the divergence defect enters:

* ``eta0``  - core residual only;
* ``eta1``  - adds the elementwise divergence misfit ||div u_h||^2;
* ``eta2``  - adds the edge-trace divergence term h * ||div u_h||^2 on each
  element boundary instead.

Element size enters as h = sqrt(area) and edge size as the edge length.
Per-element marking shares attribute each interior-edge jump in full to both
adjacent elements.  Oscillation is the element-size-weighted distance of the
load to elementwise constants (per-component quadrature means).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .assembly import element_geometry, quad_points_physical
from .femspace import (
    P1_GRADS,
    P2_HESSIANS,
    SolutionPair,
    VectorField,
    p2_grads,
    tri_rule,
)
from .mesh import Partition

__all__ = [
    "ESTIMATOR_KINDS",
    "ElementIndicators",
    "compute_indicators",
    "eta",
    "marking_shares",
    "oscillation",
]

ESTIMATOR_KINDS = ("eta0", "eta1", "eta2")


@dataclass
class ElementIndicators:
    """Per-element and per-interior-edge contributions on one partition."""

    partition: Partition
    vol: np.ndarray        # (T,) h^2 ||f + lap u_h - grad p_h||^2 per element
    div_l2: np.ndarray     # (T,) ||div u_h||^2 per element
    div_edge: np.ndarray   # (T,) h * ||div u_h||^2 over the element boundary
    osc: np.ndarray        # (T,) h^2 ||f - mean(f)||^2 per element
    jump: np.ndarray       # (m,) h_e ||[du_h/dn]||^2 per interior edge
    edge_elems: np.ndarray  # (m, 2) leaf positions adjacent to each edge

    @property
    def n_elements(self) -> int:
        return len(self.vol)


def compute_indicators(sol: SolutionPair, f: VectorField) -> ElementIndicators:
    """Evaluate all indicator ingredients for one discrete solution."""
    part, dm = sol.partition, sol.dofmap
    geo = element_geometry(part)
    rule = tri_rule()
    T = part.n_leaves
    nq = len(rule.tri_weights)
    wdet = rule.tri_weights[None, :] * geo.det[:, None]
    area = geo.area
    h_sq = area   # h = sqrt(area), so h^2 is the area itself

    coeff = sol.u_nodes()[dm.cell_nodes]          # (T, 6, 2)
    pcoeff = sol.p[dm.cell_pnodes]                # (T, 3)

    # laplacian of the quadratic velocity is constant per element:
    # lap phi_b = sum_{a,b} (Binv Binv^T)[a,b] * Hess_ref[b][a,b]
    c_mat = np.einsum("tab,tcb->tac", geo.binv, geo.binv)        # (T, 2, 2)
    lap_basis = np.einsum("tab,nab->tn", c_mat, P2_HESSIANS)     # (T, 6)
    lap_u = np.einsum("tn,tnc->tc", lap_basis, coeff)            # (T, 2)

    # gradient of the linear pressure is constant per element
    grad_p = np.einsum("tb,bk,tkl->tl", pcoeff, P1_GRADS, geo.binv)  # (T, 2)

    xq = quad_points_physical(geo, rule.tri_bary)
    fq = np.asarray(f(xq.reshape(-1, 2)), dtype=float).reshape(T, nq, 2)

    resid = fq + (lap_u - grad_p)[:, None, :]
    vol = h_sq * np.einsum("tq,tqc->t", wdet, resid * resid)

    f_mean = np.einsum("tq,tqc->tc", wdet, fq) / area[:, None]
    f_dev = fq - f_mean[:, None, :]
    osc = h_sq * np.einsum("tq,tqc->t", wdet, f_dev * f_dev)

    # velocity gradient at the three element corners (it is affine)
    ref_corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    corner_grads = p2_grads(ref_corners)                          # (3, 6, 2)
    phys = np.einsum("vbk,tkl->tvbl", corner_grads, geo.binv)     # (T, 3, 6, 2)
    grad_v = np.einsum("tbc,tvbl->tvcl", coeff, phys)             # (T, 3, 2, 2)
    div_v = grad_v[:, :, 0, 0] + grad_v[:, :, 1, 1]               # (T, 3)

    # exact integral of the squared affine divergence over the element
    d0, d1, d2 = div_v[:, 0], div_v[:, 1], div_v[:, 2]
    div_l2 = area / 6.0 * (d0 * d0 + d1 * d1 + d2 * d2
                           + d0 * d1 + d1 * d2 + d2 * d0)

    # trace integral over the element boundary, edge by edge
    xy = geo.xy
    h_tau = np.sqrt(area)
    div_edge = np.zeros(T)
    for i, j in ((1, 2), (2, 0), (0, 1)):
        elen = np.linalg.norm(xy[:, i] - xy[:, j], axis=1)
        di, dj = div_v[:, i], div_v[:, j]
        div_edge += elen * (di * di + di * dj + dj * dj) / 3.0
    div_edge *= h_tau

    # normal-derivative jumps across interior edges; the jump of the affine
    # gradient is integrated exactly from its values at the edge endpoints
    e_verts = part.interior_edge_verts
    e_elems = part.interior_edge_elems
    m = len(e_verts)
    jump = np.zeros(m)
    if m:
        tris = part.leaf_tris
        pa = part.coords(e_verts[:, 0])
        pb = part.coords(e_verts[:, 1])
        tang = pb - pa
        elen = np.linalg.norm(tang, axis=1)
        normal = np.stack([tang[:, 1], -tang[:, 0]], axis=1) / elen[:, None]

        def corner_grad(side: int, vert: np.ndarray) -> np.ndarray:
            """Velocity gradient of one adjacent element at one endpoint."""
            elems = e_elems[:, side]
            loc = np.argmax(tris[elems] == vert[:, None], axis=1)
            return grad_v[elems, loc]

        ja = np.einsum("mcl,ml->mc",
                       corner_grad(0, e_verts[:, 0]) - corner_grad(1, e_verts[:, 0]),
                       normal)
        jb = np.einsum("mcl,ml->mc",
                       corner_grad(0, e_verts[:, 1]) - corner_grad(1, e_verts[:, 1]),
                       normal)
        # weighted term h_e * ||J||^2_{L2(e)}; the edge L2 norm of the affine
        # jump contributes one factor elen, the residual weight another
        jump = elen * elen * ((ja * ja).sum(axis=1) + (ja * jb).sum(axis=1)
                              + (jb * jb).sum(axis=1)) / 3.0

    return ElementIndicators(
        partition=part, vol=vol, div_l2=div_l2, div_edge=div_edge, osc=osc,
        jump=jump, edge_elems=e_elems.copy(),
    )


def _subset_mask(ind: ElementIndicators, subset) -> np.ndarray:
    n = ind.n_elements
    if subset is None:
        return np.ones(n, dtype=bool)
    mask = np.zeros(n, dtype=bool)
    subset = np.asarray(list(subset) if not isinstance(subset, np.ndarray) else subset)
    if subset.dtype == bool:
        if len(subset) != n:
            raise ValueError("boolean subset mask has wrong length")
        return subset.copy()
    leaf_pos = ind.partition.leaf_pos
    for e in subset:
        pos = leaf_pos.get(int(e))
        if pos is None:
            raise ValueError(f"element {int(e)} is not a leaf of the partition")
        mask[pos] = True
    return mask


def eta(kind: str, ind: ElementIndicators, subset=None) -> float:
    """Squared estimator over a subset of elements (ids or boolean mask).

    Jump terms are counted only for edges whose *both* neighbors belong to the
    subset, so the value over the full partition includes every interior edge
    exactly once.
    """
    if kind not in ESTIMATOR_KINDS:
        raise ValueError(f"unknown estimator kind {kind!r}")
    mask = _subset_mask(ind, subset)
    total = float(ind.vol[mask].sum())
    if kind == "eta1":
        total += float(ind.div_l2[mask].sum())
    elif kind == "eta2":
        total += float(ind.div_edge[mask].sum())
    if len(ind.jump):
        both = mask[ind.edge_elems[:, 0]] & mask[ind.edge_elems[:, 1]]
        total += float(ind.jump[both].sum())
    return total


def marking_shares(kind: str, ind: ElementIndicators) -> np.ndarray:
    """Per-element shares with each interior-edge jump given to both sides.

    Summing the shares over all elements double-counts every interior edge,
    which is the documented bookkeeping for subset queries:
    sum(shares) = eta(kind, all) + sum of all jump terms.
    """
    if kind not in ESTIMATOR_KINDS:
        raise ValueError(f"unknown estimator kind {kind!r}")
    shares = ind.vol.copy()
    if kind == "eta1":
        shares += ind.div_l2
    elif kind == "eta2":
        shares += ind.div_edge
    if len(ind.jump):
        np.add.at(shares, ind.edge_elems[:, 0], ind.jump)
        np.add.at(shares, ind.edge_elems[:, 1], ind.jump)
    return shares


def oscillation(ind: ElementIndicators, subset=None) -> float:
    """Squared data oscillation over a subset (default: whole partition)."""
    mask = _subset_mask(ind, subset)
    return float(ind.osc[mask].sum())
