"""Necessary conditions on the sensing and communication structure.

Subspaces are returned as orthonormal bases.  Rank decisions use
``sigma > tol * sigma_1``; eigenvalues with ``Re >= -re_tol`` count as
not asymptotically stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from .network import SwitchingNetwork
from .plant import ChannelModel, EstimationModel

RANK_TOL = 1e-9
RE_TOL = 1e-9


class AssumptionError(ValueError):
    """The homogeneous-channel simplification does not hold."""


@dataclass(frozen=True, eq=False)
class SubspaceBasis:
    dim: int
    basis: np.ndarray  # dim x rank, orthonormal columns

    @classmethod
    def zero(cls, dim: int) -> "SubspaceBasis":
        return cls(dim, np.zeros((dim, 0)))

    @classmethod
    def span(cls, vectors, tol: float = RANK_TOL) -> "SubspaceBasis":
        V = np.atleast_2d(np.asarray(vectors, dtype=float))
        if V.size == 0 or V.shape[1] == 0:
            return cls.zero(V.shape[0])
        U, s, _ = np.linalg.svd(V, full_matrices=False)
        r = int(np.sum(s > tol * s[0])) if s[0] > 0 else 0
        return cls(V.shape[0], U[:, :r])

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def is_zero(self) -> bool:
        return self.rank == 0

    def projector(self) -> np.ndarray:
        return self.basis @ self.basis.T

    def contains(self, v, tol: float = 1e-8) -> bool:
        v = np.asarray(v, dtype=float)
        r = v - self.basis @ (self.basis.T @ v)
        return float(np.linalg.norm(r)) <= tol * max(1.0, float(np.linalg.norm(v)))

    def to_dict(self) -> dict:
        return {"dim": self.dim, "rank": self.rank, "basis": self.basis.tolist()}


def _null_space(M: np.ndarray, tol: float) -> np.ndarray:
    """Orthonormal kernel basis with rank decided by sigma > tol * sigma_1."""
    ncol = M.shape[1]
    if M.shape[0] == 0 or not np.any(M):
        return np.eye(ncol, dtype=M.dtype)
    _, s, Vh = np.linalg.svd(M)
    r = int(np.sum(s > tol * s[0]))
    return Vh[r:].conj().T


def observability_matrix(C, A, normalize: bool = True) -> np.ndarray:
    C = np.atleast_2d(np.asarray(C, dtype=float))
    A = np.asarray(A, dtype=float)
    blocks, Ck = [], C
    for _ in range(A.shape[0]):
        nb = np.linalg.norm(Ck)
        blocks.append(Ck / nb if (normalize and nb > 0) else Ck)
        Ck = Ck @ A
    return np.vstack(blocks)


def unobservable_subspace(C, A, tol: float = RANK_TOL) -> SubspaceBasis:
    """Kernel of the stacked observability matrix (each block scaled to unit norm)."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    O = observability_matrix(C, A)
    return SubspaceBasis(n, _null_space(O, tol))


def _eig_clusters(A: np.ndarray, tol: float = 1e-7):
    """Distinct eigenvalues (clustered) with algebraic multiplicities."""
    ev = np.linalg.eigvals(A)
    scale = max(1.0, float(np.abs(ev).max()))
    out: list[list] = []
    for lam in sorted(ev, key=lambda z: (z.real, z.imag)):
        for c in out:
            if abs(lam - c[0]) <= tol * scale:
                c[1] += 1
                break
        else:
            out.append([lam, 1])
    return [(complex(l), m) for l, m in out]


def _real_basis(vectors: list[np.ndarray], n: int, tol: float) -> SubspaceBasis:
    if not vectors:
        return SubspaceBasis.zero(n)
    V = np.hstack(vectors)
    return SubspaceBasis.span(np.hstack([V.real, V.imag]), tol=1e-8)


def undetectable_subspace(C, A_shifted, tol: float = RANK_TOL, re_tol: float = RE_TOL) -> SubspaceBasis:
    """Unobservable modes of (C, A) with Re(lambda) >= -re_tol.

    For each such eigenvalue of algebraic multiplicity m the kernel of
    [(A - lambda I)^m; C; C (A - lambda I); ...; C (A - lambda I)^(m-1)] is
    computed without rescaling the blocks.
    """
    A = np.asarray(A_shifted, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n = A.shape[0]
    vecs = []
    for lam, m in _eig_clusters(A):
        if lam.real < -re_tol:
            continue
        if lam.imag < 0:
            continue  # its conjugate contributes the same real subspace
        Ash = A - lam * np.eye(n)
        rows = [np.linalg.matrix_power(Ash, m)]
        P = np.eye(n, dtype=complex)
        for _ in range(m):
            rows.append(C @ P)
            P = Ash @ P
        K = _null_space(np.vstack(rows), tol)
        if K.shape[1]:
            vecs.append(K)
    return _real_basis(vecs, n, tol)


def intersect(a: SubspaceBasis, b: SubspaceBasis, tol: float = 1e-8) -> SubspaceBasis:
    """Intersection from the kernel of [B_a, -B_b] (principal-angle criterion)."""
    if a.is_zero() or b.is_zero():
        return SubspaceBasis.zero(a.dim)
    M = np.hstack([a.basis, -b.basis])
    _, s, Vh = np.linalg.svd(M)
    s = np.concatenate([s, np.zeros(M.shape[1] - len(s))])
    K = Vh[s <= tol].T
    if K.shape[1] == 0:
        return SubspaceBasis.zero(a.dim)
    return SubspaceBasis.span(a.basis @ K[:a.rank], tol=1e-8)


def is_cyclic(A, tol: float = 1e-7) -> bool:
    """Every eigenvalue has geometric multiplicity one."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    for lam, m in _eig_clusters(A, tol):
        if m == 1:
            continue
        s = np.linalg.svd(A - lam * np.eye(n), compute_uv=False)
        if int(np.sum(s > 1e-6 * max(1.0, s[0]))) < n - 1:
            return False
    return True


def shifted_A(A, net: SwitchingNetwork, k: int) -> np.ndarray:
    """A_k = A + lambda_kk / 2 I."""
    A = np.asarray(A, dtype=float)
    return A + 0.5 * net.generator.Lambda[k - 1, k - 1] * np.eye(A.shape[0])


def common_channel(net: SwitchingNetwork, cm: ChannelModel) -> np.ndarray:
    """The single H shared by all modeled edges; AssumptionError otherwise."""
    H = None
    for e in net.channels():
        He = cm.H[e]
        if H is None:
            H = He
        elif He.shape != H.shape or not np.array_equal(He, H):
            raise AssumptionError(f"channel matrices differ (edge {e}); the analysis needs H_ij = H")
    if H is None:
        raise AssumptionError("network has no edges, H is undefined")
    return H


def network_observability_pair(net: SwitchingNetwork, cm: ChannelModel, A, k: int):
    """(L^k kron H, I_N kron A + lambda_kk / 2 I)."""
    H = common_channel(net, cm)
    A = np.asarray(A, dtype=float)
    N, n = net.N, A.shape[0]
    Hbar = np.kron(net.laplacian(k), H)
    Abar = np.kron(np.eye(N), A) + 0.5 * net.generator.Lambda[k - 1, k - 1] * np.eye(n * N)
    return Hbar, Abar


def laplacian_zero_multiplicity(Lap: np.ndarray, tol: float = RANK_TOL) -> int:
    N = Lap.shape[0]
    if not np.any(Lap):
        return N
    s = np.linalg.svd(Lap, compute_uv=False)
    return N - int(np.sum(s > tol * s[0]))


def node_undetectable(model: EstimationModel, i: int, k: int) -> SubspaceBasis:
    C, _, _ = model.meas.triplet(i, k)
    return undetectable_subspace(C, shifted_A(model.plant.A, model.net, k))


@dataclass
class ProductConditionState:
    k: int
    holds: bool
    intersection_dim: int
    witness: np.ndarray | None

    def to_dict(self):
        return {"state": self.k, "holds": self.holds, "intersection_dim": self.intersection_dim,
                "witness": None if self.witness is None else self.witness.tolist()}


def check_product_condition(model: EstimationModel) -> list[ProductConditionState]:
    """Per state: the unobservable subspace of the network pair meets prod_i C_i^k only at 0."""
    net = model.net
    n, N = model.n, model.N
    out = []
    for k in range(1, model.M + 1):
        Hbar, Abar = network_observability_pair(net, model.chan, model.plant.A, k)
        Obar = unobservable_subspace(Hbar, Abar)
        cols = []
        for i in range(1, N + 1):
            Ci = node_undetectable(model, i, k)
            blk = np.zeros((n * N, Ci.rank))
            blk[(i - 1) * n:i * n] = Ci.basis
            cols.append(blk)
        prod = SubspaceBasis(n * N, np.hstack(cols))
        inter = intersect(Obar, prod)
        w = inter.basis[:, 0] if not inter.is_zero() else None
        out.append(ProductConditionState(k, inter.is_zero(), inter.rank, w))
    return out


@dataclass
class SufficientConditionState:
    k: int
    common_zero: bool            # intersection over nodes is {0}
    channel_ok: dict             # node -> O_H meets C_i^k only at 0
    multiplicity: int
    cyclic: bool
    implied: bool                # sufficiency verdict
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {"state": self.k, "common_intersection_zero": self.common_zero,
                "channel_condition": {str(i): v for i, v in self.channel_ok.items()},
                "laplacian_zero_multiplicity": self.multiplicity, "A_cyclic": self.cyclic,
                "product_condition_implied": self.implied}


def check_sufficient_conditions(model: EstimationModel) -> list[SufficientConditionState]:
    """Per state: common intersection, channel condition, Laplacian zero multiplicity and a sufficiency verdict.

    The verdict also requires A to be cyclic: with repeated eigenvalues of
    geometric multiplicity > 1 the converse can fail.
    """
    net = model.net
    H = common_channel(net, model.chan)
    OH = unobservable_subspace(H, model.plant.A)
    out = []
    for k in range(1, model.M + 1):
        Ak = shifted_A(model.plant.A, net, k)
        Cs = {i: node_undetectable(model, i, k) for i in range(1, model.N + 1)}
        common = None
        for Ci in Cs.values():
            common = Ci if common is None else intersect(common, Ci)
        common_zero = common.is_zero()
        chan = {i: intersect(OH, Ci).is_zero() for i, Ci in Cs.items()}
        mult = laplacian_zero_multiplicity(net.laplacian(k))
        cyc = is_cyclic(Ak)
        implied = common_zero and all(chan.values()) and mult == 1 and cyc
        out.append(SufficientConditionState(k, common_zero, chan, mult, cyc, implied,
                                            {"undetectable_dims": {i: c.rank for i, c in Cs.items()}}))
    return out


def detectability_report(model: EstimationModel) -> dict:
    """JSON-ready summary used by the command line front end."""
    net = model.net
    H = common_channel(net, model.chan)
    OH = unobservable_subspace(H, model.plant.A)
    per_node = {}
    for k in range(1, model.M + 1):
        for i in range(1, model.N + 1):
            per_node[f"{i},{k}"] = node_undetectable(model, i, k).rank
    prod = check_product_condition(model)
    suff = check_sufficient_conditions(model)
    return {
        "undetectable_dims": per_node,
        "channel_unobservable_dim": OH.rank,
        "product_condition": [s.to_dict() for s in prod],
        "sufficient_conditions": [s.to_dict() for s in suff],
        "necessary_condition_holds": all(s.holds for s in prod),
    }
