"""Basis-reduced spatial model on a triangular mesh (PICAR).

The log-susceptibility field is approximated as ``A M delta + omega``:
``A`` interpolates piecewise-linearly from mesh vertices to unit locations,
``M`` holds the leading eigenvectors of the Moran operator of the mesh
adjacency graph and ``delta`` are basis weights with prior
``N(0, tau^-1 (M' Q M)^-1)`` where ``Q = I``.
"""

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import linalg, sparse
from scipy.spatial import ConvexHull, Delaunay, QhullError

from .epimodel import PanelLikelihood, cross_entropy_by_unit
from .errors import DataIOError, InvalidInputError, MeshError
from .mcmc import (
    BoundedTransform,
    Chain,
    McmcConfig,
    _check_start,
    _Recorder,
    adaptive_step,
    initial_beta,
)
from .rng import stream
from .spatial import SpatialUnits

__all__ = [
    "Mesh",
    "PicarBasis",
    "PicarChainState",
    "build_mesh",
    "projector",
    "moran_basis",
    "build_basis",
    "recover_beta",
    "fit_sdsm_picar",
    "delta_prior_logpdf",
    "choose_rank",
    "save_basis",
    "load_basis",
    "TAU_SHAPE",
    "TAU_SCALE",
]

TAU_SHAPE = 0.5
TAU_SCALE = 2000.0
WEIGHT_EPS = 1e-12


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    adjacency: sparse.csr_matrix

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    def edges(self):
        a = sparse.triu(self.adjacency, 1).tocoo()
        return np.column_stack([a.row, a.col])


@dataclass(frozen=True)
class PicarBasis:
    mesh: Mesh
    M: np.ndarray
    A: sparse.csr_matrix
    eigvals: np.ndarray

    @property
    def p(self):
        return self.M.shape[1]

    @property
    def Q(self):
        return sparse.identity(self.mesh.n_vertices, format="csr")

    def design(self):
        """Dense ``A M`` (N x p)."""
        return np.asarray(self.A @ self.M)


@dataclass(frozen=True)
class PicarChainState:
    delta: np.ndarray
    tau: float
    omega: float


def _coords(units):
    return units.coords if isinstance(units, SpatialUnits) else np.asarray(units, float)


def _buffer_ring(points, buffer):
    """Hull vertices offset outward by ``buffer`` with mitred corners."""
    hull = ConvexHull(points)
    ring = points[hull.vertices]  # counter-clockwise
    nxt = np.roll(ring, -1, axis=0)
    edge = nxt - ring
    normal = np.column_stack([edge[:, 1], -edge[:, 0]])
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    n_prev = np.roll(normal, 1, axis=0)
    bis = normal + n_prev
    bis /= np.linalg.norm(bis, axis=1, keepdims=True)
    cos_half = np.einsum("ij,ij->i", bis, normal)
    return ring + bis * (buffer / cos_half)[:, None]


def default_buffer(units):
    xy = _coords(units)
    span = xy.max(axis=0) - xy.min(axis=0)
    return 0.05 * float(np.hypot(*span))


def build_mesh(units, buffer=None):
    """Delaunay mesh of the unit locations plus one buffer ring.

    ``buffer=None`` uses 5% of the bounding-box diagonal; ``0`` adds no ring.
    """
    xy = np.unique(_coords(units), axis=0)
    if xy.shape[0] < 3:
        raise MeshError("need at least three distinct points for a mesh")
    if buffer is None:
        buffer = default_buffer(xy)
    try:
        verts = xy if buffer <= 0 else np.vstack([xy, _buffer_ring(xy, buffer)])
        tri = Delaunay(verts)
    except QhullError as err:
        raise MeshError(f"degenerate point set (collinear?): {err}".splitlines()[0]) from None
    used = np.unique(tri.simplices)
    if used.size != verts.shape[0]:
        raise MeshError("some vertices were dropped by the triangulation")
    simplices = np.sort(tri.simplices, axis=1)
    e = np.vstack([simplices[:, [0, 1]], simplices[:, [1, 2]], simplices[:, [0, 2]]])
    n = verts.shape[0]
    W = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
    W = ((W + W.T) > 0).astype(float)
    return Mesh(verts, simplices, W.tocsr())


def projector(mesh, units):
    """Sparse N x n_v matrix of barycentric interpolation weights."""
    xy = _coords(units)
    tri = Delaunay(mesh.vertices)
    # re-triangulating the same vertices can reorder simplices; use the cached
    # search structure only for locating points and take corners from it
    simplex = tri.find_simplex(xy, tol=1e-9)
    if np.any(simplex < 0):
        bad = np.flatnonzero(simplex < 0)
        raise MeshError(f"{bad.size} location(s) outside the mesh, first at {xy[bad[0]]}")
    T = tri.transform[simplex]
    b = np.einsum("nij,nj->ni", T[:, :2, :], xy - T[:, 2, :])
    w = np.column_stack([b, 1.0 - b.sum(axis=1)])
    w[np.abs(w) < WEIGHT_EPS] = 0.0
    w = np.clip(w, 0.0, None)
    w /= w.sum(axis=1, keepdims=True)
    corners = tri.simplices[simplex]
    rows = np.repeat(np.arange(xy.shape[0]), 3)
    A = sparse.coo_matrix((w.ravel(), (rows, corners.ravel())), shape=(xy.shape[0], mesh.n_vertices))
    A = A.tocsr()
    A.eliminate_zeros()
    return A


def moran_basis(mesh, p):
    """Leading ``p`` eigenvectors of ``P W P`` with ``P = I - 11'/n``.

    Returns ``(M, eigvals)`` with eigenvalues in non-increasing order.
    """
    n = mesh.n_vertices
    if not 1 <= p < n:
        raise InvalidInputError(f"rank must be in 1..{n - 1}, got {p}")
    W = mesh.adjacency.toarray()
    # orthonormal basis H of the complement of the constant vector; the
    # eigenproblem of H'WH is that of P W P with the trivial direction removed
    H = linalg.qr(np.ones((n, 1)), mode="full")[0][:, 1:]
    C = H.T @ W @ H
    C = 0.5 * (C + C.T)
    vals, vecs = linalg.eigh(C, subset_by_index=[n - 1 - p, n - 2])
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], H @ vecs[:, order]
    # fixed sign convention for reproducible output
    flip = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(p)])
    return vecs * flip, vals


def build_basis(mesh_units, rank=50, buffer=None, fit_units=None):
    """Mesh, projector and Moran basis in one call.

    The mesh is built on ``mesh_units``; ``A`` projects ``fit_units``
    (default: the same units).
    """
    mesh = build_mesh(mesh_units, buffer)
    A = projector(mesh, mesh_units if fit_units is None else fit_units)
    M, vals = moran_basis(mesh, min(rank, mesh.n_vertices - 1))
    return PicarBasis(mesh, M, A, vals)


def recover_beta(state, basis, A=None):
    """``exp(A M delta + omega)``."""
    A = basis.A if A is None else A
    return np.exp(np.asarray(A @ (basis.M @ np.asarray(state.delta, float))) + state.omega)


def delta_prior_logpdf(delta, tau, M=None, Q=None):
    """Log density of ``N(0, tau^-1 (M'QM)^-1)`` up to ``-p/2 log(2 pi)``.

    With ``M`` and ``Q`` omitted the precision is ``tau I`` (orthonormal M, Q = I).
    """
    delta = np.asarray(delta, float)
    p = delta.size
    if M is None:
        return 0.5 * p * math.log(tau) - 0.5 * tau * float(delta @ delta)
    P = M.T @ (Q @ M if Q is not None else M)
    sign, logdet = np.linalg.slogdet(P)
    return 0.5 * p * math.log(tau) + 0.5 * logdet - 0.5 * tau * float(delta @ P @ delta)


def _tau_log_prior(tau):
    return (TAU_SHAPE - 1.0) * math.log(tau) - tau / TAU_SCALE


def fit_sdsm_picar(panel, d, kernel, gamma, basis, cfg=None, block_size=10, beta_init=None):
    """Sample ``delta``, ``omega`` and ``tau`` of the basis-reduced model.

    ``delta`` moves in blocks of ``block_size`` coordinates with proposals
    scaled by the likelihood curvature at the start state, so one iteration
    costs ``ceil(p / block_size)`` likelihood evaluations.
    """
    cfg = cfg or McmcConfig()
    t0 = time.perf_counter()
    lik = PanelLikelihood(panel, d, kernel, gamma, cfg.exclude_infected_prev)
    if basis.A.shape[0] != lik.n:
        raise InvalidInputError("projector rows do not match the panel units")
    rng = stream(cfg.seed, "picar")
    tr_omega = BoundedTransform(*cfg.omega_bounds)
    Phi = np.ascontiguousarray(basis.design())
    p = Phi.shape[1]
    blocks = [np.arange(s, min(s + block_size, p)) for s in range(0, p, block_size)]

    beta0 = initial_beta(lik, panel.y) if beta_init is None else beta_init
    x0 = np.log(np.asarray(beta0, float))
    omega = float(np.clip(x0.mean(), tr_omega.lo + 1e-6, tr_omega.hi - 1e-6))
    # least-squares start for delta
    delta, *_ = np.linalg.lstsq(Phi, x0 - omega, rcond=None)
    tau = 1.0 / max(float(np.var(delta)), 1e-6)
    x = Phi @ delta + omega

    def loglik(xv):
        return lik.total(np.exp(xv)) if cfg.use_likelihood else 0.0

    ll = loglik(x)
    _check_start(ll, "SDSM-PICAR")
    info = lik.fisher_log_beta(np.exp(x)) if cfg.use_likelihood else np.zeros(lik.n)
    curv = np.einsum("ij,i,ij->j", Phi, info, Phi)
    base_scale = 1.0 / np.sqrt(curv + tau)

    def log_post():
        return ll + delta_prior_logpdf(delta, tau) + _tau_log_prior(tau)

    log_s_blk = np.full(len(blocks), math.log(2.38 / math.sqrt(block_size)))
    log_s_omega = math.log(cfg.init_step * 0.2)
    log_s_tau = math.log(cfg.init_step)
    acc_blk = np.zeros(len(blocks))
    acc_omega = acc_tau = 0
    rec = _Recorder(cfg, {"delta": (p,), "beta": (lik.n,), "omega": (), "tau": ()})

    for it in range(cfg.n_iter):
        for b, idx in enumerate(blocks):
            step = math.exp(log_s_blk[b]) * base_scale[idx] * rng.standard_normal(idx.size)
            dnew = delta[idx] + step
            xp = x + Phi[:, idx] @ step
            llp = loglik(xp)
            logr = (llp - ll) - 0.5 * tau * (float(dnew @ dnew) - float(delta[idx] @ delta[idx]))
            ok = math.log(rng.random()) < logr
            if ok:
                delta[idx] = dnew
                x, ll = xp, llp
                acc_blk[b] += it >= cfg.burn_in
            log_s_blk[b] = adaptive_step(
                log_s_blk[b], _prob(logr), cfg.target_block, it, cfg.burn_in
            )

        zo = tr_omega.to_real(omega) + math.exp(log_s_omega) * rng.standard_normal()
        wp = tr_omega.from_real(zo)
        xp = x + (wp - omega)
        llp = loglik(xp)
        logr = llp - ll + tr_omega.log_jacobian(wp) - tr_omega.log_jacobian(omega)
        if math.log(rng.random()) < logr:
            omega, x, ll = wp, xp, llp
            acc_omega += it >= cfg.burn_in
        log_s_omega = adaptive_step(log_s_omega, _prob(logr), cfg.target_scalar, it, cfg.burn_in)

        tp = tau * math.exp(math.exp(log_s_tau) * rng.standard_normal())
        dd = float(delta @ delta)
        logr = (
            0.5 * p * math.log(tp / tau)
            - 0.5 * (tp - tau) * dd
            + _tau_log_prior(tp)
            - _tau_log_prior(tau)
            + math.log(tp / tau)
        )
        if math.log(rng.random()) < logr:
            tau = tp
            acc_tau += it >= cfg.burn_in
        log_s_tau = adaptive_step(log_s_tau, _prob(logr), cfg.target_scalar, it, cfg.burn_in)

        if rec.due(it):
            rec.record({"delta": delta, "beta": np.exp(x), "omega": omega, "tau": tau}, log_post())

    n_post = cfg.n_iter - cfg.burn_in
    return Chain(
        model="sdsm-picar",
        ids=panel.ids,
        draws=rec.draws,
        log_post=rec.log_post,
        acceptance={"delta": acc_blk / n_post, "omega": acc_omega / n_post, "tau": acc_tau / n_post},
        step_sizes={"delta": np.exp(log_s_blk), "omega": math.exp(log_s_omega),
                    "tau": math.exp(log_s_tau)},
        config=cfg,
        meta={"gamma": float(gamma), "phi": kernel.phi, "b0": kernel.b0, "rank": p,
              "block_size": block_size, "tau_prior": f"gamma(shape={TAU_SHAPE}, scale={TAU_SCALE})",
              "seconds": time.perf_counter() - t0},
    )


def _prob(logr):
    if logr >= 0:
        return 1.0
    return 0.0 if logr == -math.inf or math.isnan(logr) else math.exp(logr)


def choose_rank(units, panel, d, kernel, gamma, candidates=(25, 50, 100), cfg=None, buffer=None,
                fraction=0.9, seed=0):
    """Pick the basis rank with the lowest held-out cross-entropy.

    Units are split once into fitting and held-out sets; for each candidate
    the reduced model is fitted on the first set and held-out units get
    ``exp(A M delta_mean + omega_mean)``. Their outbreak series are scored
    under the probabilities implied by the full infectious history. Ties go
    to the smaller rank.

    Returns
    -------
    best : int
    scores : dict
        Candidate rank to held-out cross-entropy.
    """
    cfg = cfg or McmcConfig()
    n = units.n
    n_fit = int(round(fraction * n))
    if not 0 < n_fit < n:
        raise InvalidInputError(f"fraction {fraction} leaves an empty side with N={n}")
    perm = stream(seed, "rank-split").permutation(n)
    tr, te = np.sort(perm[:n_fit]), np.sort(perm[n_fit:])
    lik = PanelLikelihood(panel, d, kernel, gamma, cfg.exclude_infected_prev)
    panel_tr, d_tr = panel.subset(tr), d[np.ix_(tr, tr)]
    scores = {}
    for p in sorted(set(int(c) for c in candidates)):
        basis = build_basis(units, rank=p, buffer=buffer, fit_units=units.subset(tr))
        if basis.p != p:
            continue
        chain = fit_sdsm_picar(panel_tr, d_tr, kernel, gamma, basis, cfg)
        beta = np.empty(n)
        beta[tr] = chain.draws["beta"].mean(axis=0)
        A_te = projector(basis.mesh, units.subset(te))
        beta[te] = recover_beta(
            PicarChainState(chain.draws["delta"].mean(axis=0), 1.0, float(chain.draws["omega"].mean())),
            basis, A_te)
        scores[p] = float(cross_entropy_by_unit(panel.y[te], lik.probabilities(beta)[te]).sum())
    if not scores:
        raise InvalidInputError("no candidate rank fits the mesh")
    best = min(scores, key=lambda k: (scores[k], k))
    return best, scores


def save_basis(basis, directory):
    """Write vertices, triangles, eigenvalues, M and A as CSV files."""
    import os

    os.makedirs(directory, exist_ok=True)
    v = basis.mesh.vertices
    np.savetxt(os.path.join(directory, "vertices.csv"), np.column_stack([np.arange(len(v)), v]),
               delimiter=",", header="vertex,x,y", comments="", fmt=["%d", "%.17g", "%.17g"])
    np.savetxt(os.path.join(directory, "triangles.csv"), basis.mesh.triangles,
               delimiter=",", header="a,b,c", comments="", fmt="%d")
    np.savetxt(os.path.join(directory, "eigvals.csv"), basis.eigvals[:, None],
               delimiter=",", header="eigval", comments="", fmt="%.17g")
    for name, mat in (("M", sparse.coo_matrix(basis.M)), ("A", basis.A.tocoo())):
        np.savetxt(os.path.join(directory, f"{name}.csv"),
                   np.column_stack([mat.row, mat.col, mat.data]), delimiter=",",
                   header=f"row,col,value,{mat.shape[0]},{mat.shape[1]}", comments="",
                   fmt=["%d", "%d", "%.17g"])


def load_basis(directory):
    import os

    def read(name):
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise DataIOError(f"missing basis file {path}", path)
        return path

    verts = np.loadtxt(read("vertices.csv"), delimiter=",", skiprows=1, ndmin=2)[:, 1:]
    tris = np.loadtxt(read("triangles.csv"), delimiter=",", skiprows=1, dtype=int, ndmin=2)
    eig = np.loadtxt(read("eigvals.csv"), delimiter=",", skiprows=1, ndmin=1)

    def triplets(name):
        path = read(name)
        with open(path) as fh:
            head = fh.readline().strip().split(",")
        shape = (int(head[3]), int(head[4]))
        t = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return sparse.coo_matrix((t[:, 2], (t[:, 0].astype(int), t[:, 1].astype(int))), shape=shape)

    e = np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [0, 2]]])
    n = verts.shape[0]
    W = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
    W = ((W + W.T) > 0).astype(float).tocsr()
    return PicarBasis(Mesh(verts, tris, W), triplets("M.csv").toarray(), triplets("A.csv").tocsr(), eig)
