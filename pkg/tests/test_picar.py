import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import sparse

from sismap.epimodel import PanelLikelihood, cross_entropy_by_unit
from sismap.errors import InvalidInputError, MeshError
from sismap.mcmc import McmcConfig, fit_sdsm_full, posterior_summary
from sismap.picar import (
    Mesh,
    PicarChainState,
    build_basis,
    build_mesh,
    choose_rank,
    delta_prior_logpdf,
    fit_sdsm_picar,
    load_basis,
    moran_basis,
    projector,
    recover_beta,
    save_basis,
)
from sismap.rng import stream
from sismap.simulate import GpHyperparams, SimScenario, simulate
from sismap.spatial import KernelParams, SpatialUnits, pairwise_distances

import oracles


def random_units(n, seed=0, w=1000.0, h=500.0):
    xy = stream(seed, "picar-units").uniform([0, 0], [w, h], (n, 2))
    return SpatialUnits([f"p{i}" for i in range(n)], xy)


def test_three_points_single_triangle():
    mesh = build_mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), buffer=0)
    assert mesh.triangles.shape == (1, 3)


def test_unit_square_two_triangles():
    mesh = build_mesh(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]), buffer=0)
    assert mesh.triangles.shape[0] == 2
    assert len(mesh.edges()) == 5


def test_delaunay_empty_circumcircle():
    xy = random_units(50, seed=3).coords
    mesh = build_mesh(xy, buffer=0)
    v = mesh.vertices
    for a, b, c in mesh.triangles:
        for k in range(len(v)):
            if k in (a, b, c):
                continue
            assert not oracles.in_circumcircle(v[a], v[b], v[c], v[k])


def test_buffer_ring_encloses_points():
    xy = random_units(40, seed=4).coords
    mesh = build_mesh(xy)
    assert mesh.n_vertices > 40
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    assert np.all(lo < xy.min(axis=0)) and np.all(hi > xy.max(axis=0))


def test_collinear_points_raise():
    with pytest.raises(MeshError):
        build_mesh(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]), buffer=0)
    with pytest.raises(MeshError):
        build_mesh(np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]]), buffer=0)


def test_projector_vertex_and_centroid():
    tri = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]])
    mesh = build_mesh(tri, buffer=0)
    A = projector(mesh, np.array([[3.0, 0.0], [1.0, 1.0]])).toarray()
    assert sorted(A[0]) == [0.0, 0.0, 1.0]
    np.testing.assert_allclose(A[1], [1 / 3] * 3, atol=1e-15)


def test_projector_linear_reproduction():
    units = random_units(60, seed=5)
    mesh = build_mesh(units)
    # random convex combinations of unit pairs lie inside the hull
    rng = stream(6, "pts")
    i, j = rng.integers(0, 60, (2, 200))
    w = rng.random((200, 1))
    pts = w * units.coords[i] + (1 - w) * units.coords[j]
    A = projector(mesh, pts)
    np.testing.assert_allclose(A @ mesh.vertices, pts, atol=1e-10)
    rows = A.toarray()
    assert np.all(rows >= 0)
    np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-12)


def test_projector_rejects_outside_points():
    mesh = build_mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), buffer=0)
    with pytest.raises(MeshError):
        projector(mesh, np.array([[5.0, 5.0]]))


def path_mesh(n):
    W = sparse.diags([np.ones(n - 1), np.ones(n - 1)], [-1, 1]).tocsr()
    return Mesh(np.zeros((n, 2)), np.zeros((0, 3), int), W)


def test_path_graph_moran_vector():
    # on the 3-path, P W P restricted to 1-perp has eigenpairs
    # (0, [1, 0, -1]) and (-4/3, [1, -2, 1])
    M, vals = moran_basis(path_mesh(3), 2)
    assert abs(abs(M[:, 0] @ np.array([1, 0, -1]) / math.sqrt(2)) - 1) < 1e-12
    assert abs(abs(M[:, 1] @ np.array([1, -2, 1]) / math.sqrt(6)) - 1) < 1e-12
    np.testing.assert_allclose(vals, [0.0, -4 / 3], atol=1e-12)


def test_moran_matches_dense_eigendecomposition():
    n = 7
    mesh = path_mesh(n)
    P = np.eye(n) - np.ones((n, n)) / n
    w, v = np.linalg.eigh(P @ mesh.adjacency.toarray() @ P)
    # drop the constant eigenvector, keep the rest in decreasing order
    keep = np.abs(v.T @ np.ones(n)) < 1e-8
    w, v = w[keep][::-1], v[:, keep][:, ::-1]
    # the third eigenvalue is 0 and shares its eigenspace with the constant
    M, vals = moran_basis(mesh, 2)
    np.testing.assert_allclose(vals, w[:2], atol=1e-12)
    np.testing.assert_allclose(np.abs(np.sum(M * v[:, :2], axis=0)), 1.0, atol=1e-10)


def test_basis_contracts():
    units = random_units(120, seed=7)
    for p in (5, 30, 80):
        b = build_basis(units, rank=p)
        np.testing.assert_allclose(b.M.T @ b.M, np.eye(p), atol=1e-10)
        assert np.linalg.norm(b.M.T @ np.ones(b.mesh.n_vertices)) < 1e-10
        assert np.all(np.diff(b.eigvals) <= 1e-12)
    with pytest.raises(InvalidInputError):
        moran_basis(b.mesh, b.mesh.n_vertices)


def test_recover_beta():
    units = random_units(30, seed=8)
    b = build_basis(units, rank=6)
    st0 = PicarChainState(np.zeros(6), 1.0, -0.7)
    np.testing.assert_allclose(recover_beta(st0, b), math.exp(-0.7))
    e = np.zeros(6)
    e[2] = 0.3
    diff = np.log(recover_beta(PicarChainState(e, 1.0, -0.7), b)) + 0.7
    np.testing.assert_allclose(diff, 0.3 * (b.A @ b.M[:, 2]), atol=1e-13)
    delta = stream(9, "d").standard_normal(6)
    want = np.exp(b.A.toarray() @ b.M @ delta - 0.2)
    np.testing.assert_allclose(recover_beta(PicarChainState(delta, 1.0, -0.2), b), want, rtol=1e-12)


def test_delta_prior_density():
    delta = np.array([0.3, -1.0, 0.5])
    M = np.linalg.qr(stream(1, "m").standard_normal((7, 3)))[0]
    tau = 2.5
    want = 0.5 * 3 * math.log(tau) - 0.5 * tau * float(delta @ delta)
    assert delta_prior_logpdf(delta, tau) == pytest.approx(want)
    assert delta_prior_logpdf(delta, tau, M=M, Q=np.eye(7)) == pytest.approx(want)


def test_basis_roundtrip(tmp_path):
    b = build_basis(random_units(40, seed=2), rank=8)
    save_basis(b, tmp_path / "basis")
    c = load_basis(tmp_path / "basis")
    assert np.array_equal(b.M, c.M) and np.array_equal(b.mesh.vertices, c.mesh.vertices)
    assert (b.A != c.A).nnz == 0


def gp_data(n=20, T=100, seed=0):
    units = random_units(n, seed=seed, w=600, h=400)
    sc = SimScenario(units, KernelParams(40.0), 0.05, T, "gp", GpHyperparams(-1.0, 1.0, 300.0), seed=seed)
    beta, panel = simulate(sc)
    return units, beta, panel, pairwise_distances(units)


def test_full_rank_basis_matches_full_model():
    units, beta, panel, d = gp_data()
    kern = KernelParams(40.0)
    b = build_basis(units, rank=10**6)
    assert b.p == b.mesh.n_vertices - 1
    cfg = McmcConfig(n_iter=8000, burn_in=4000, thin=5, seed=1)
    lik = PanelLikelihood(panel, d, kern, 0.05)

    def ce(chain):
        return cross_entropy_by_unit(panel, lik.probabilities(posterior_summary(chain).beta_mean)).sum()

    full = ce(fit_sdsm_full(panel, d, kern, 0.05, cfg))
    red = ce(fit_sdsm_picar(panel, d, kern, 0.05, b, cfg))
    assert red == pytest.approx(full, rel=0.05)


def test_delta_prior_only_scaling():
    # under the prior, sqrt(tau) * delta ~ N(0, (M'QM)^-1) = N(0, I)
    units, beta, panel, d = gp_data(n=15, T=5)
    b = build_basis(units, rank=4)
    cfg = McmcConfig(n_iter=60_000, burn_in=5000, thin=5, seed=2, use_likelihood=False)
    chain = fit_sdsm_picar(panel, d, KernelParams(40.0), 0.05, b, cfg)
    z = chain.draws["delta"] * np.sqrt(chain.draws["tau"])[:, None]
    cov = np.cov(z, rowvar=False)
    np.testing.assert_allclose(cov, np.eye(4), atol=0.15)


def test_picar_determinism():
    units, beta, panel, d = gp_data(n=25, T=30)
    b = build_basis(units, rank=10)
    cfg = McmcConfig(n_iter=300, burn_in=100, seed=5)
    a = fit_sdsm_picar(panel, d, KernelParams(40.0), 0.05, b, cfg)
    c = fit_sdsm_picar(panel, d, KernelParams(40.0), 0.05, b, cfg)
    assert np.array_equal(a.draws["delta"], c.draws["delta"])
    assert np.all(a.draws["tau"] > 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(10, 80), st.integers(0, 10_000))
def test_basis_contract_property(n, seed):
    units = random_units(n, seed=seed)
    b = build_basis(units, rank=min(20, n))
    np.testing.assert_allclose(b.M.T @ b.M, np.eye(b.p), atol=1e-10)
    assert np.linalg.norm(b.M.T @ np.ones(b.mesh.n_vertices)) < 1e-10
    A = b.A.toarray()
    assert np.all(A >= 0) and np.allclose(A.sum(axis=1), 1.0, atol=1e-12)


def test_choose_rank_returns_best_candidate():
    units, beta, panel, d = gp_data(n=40, T=40)
    cfg = McmcConfig(n_iter=400, burn_in=200, seed=3)
    best, scores = choose_rank(units, panel, d, KernelParams(40.0), 0.05, candidates=(4, 8, 16), cfg=cfg)
    assert set(scores) == {4, 8, 16}
    assert scores[best] == min(scores.values())
    assert choose_rank(units, panel, d, KernelParams(40.0), 0.05, candidates=(4, 8, 16), cfg=cfg) == (best, scores)
