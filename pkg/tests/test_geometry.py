import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from confgen.geometry import (
    AssemblyConfig,
    AssemblyError,
    assemble,
    assembly_gradient,
    assembly_log_density_unnorm,
    clamp_distances,
    edge_alphas,
    kabsch_align,
    pairwise_distances,
    read_xyz,
    rmsd,
    write_xyz,
)
from confgen.molgraph import Conformation, expand_graph, make_graph
from oracles import rmsd_bruteforce_quaternions


def chain(symbols):
    return expand_graph(
        make_graph(symbols, [(i, i + 1, "single") for i in range(len(symbols) - 1)])
    )


def rand_rigid(rng):
    ax = rng.normal(size=3)
    ax /= np.linalg.norm(ax)
    th = rng.uniform(0, 2 * np.pi)
    K = np.array([[0, -ax[2], ax[1]], [ax[2], 0, -ax[0]], [-ax[1], ax[0], 0]])
    rot = np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * K @ K
    return rot, rng.normal(size=3) * 4.0


G2 = make_graph(["C", "C"], [(0, 1, "single")])


def test_pairwise_simple():
    R = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    assert np.array_equal(pairwise_distances(R, G2), np.array([1.0]))


def test_pairwise_rigid_invariance():
    g = chain(["C", "O", "C", "N", "C"])
    rng = np.random.default_rng(0)
    R = rng.normal(size=(5, 3)) * 2
    d0 = pairwise_distances(R, g)
    for _ in range(100):
        rot, tr = rand_rigid(rng)
        assert np.max(np.abs(pairwise_distances(R @ rot.T + tr, g) - d0)) < 1e-9


def test_pairwise_matches_double_loop():
    g = chain(["C"] * 5)
    rng = np.random.default_rng(3)
    R = rng.normal(size=(5, 3))
    d = pairwise_distances(R, g)
    for (u, v, _), val in zip(g.edges(), d):
        manual = np.sqrt(sum((R[u][k] - R[v][k]) ** 2 for k in range(3)))
        assert val == pytest.approx(manual, abs=1e-15)


def test_assembly_objective_values():
    # exact realization -> 0
    g = chain(["C", "C", "O"])
    R = np.array([[0.0, 0, 0], [1.5, 0, 0], [1.5, 1.5, 0]])
    d = pairwise_distances(R, g)
    assert assembly_log_density_unnorm(R, d, g) == pytest.approx(0.0, abs=1e-9)
    # single edge: atoms 2.0 apart, target 1.0, alpha 1 -> -1
    R2 = np.array([[0.0, 0, 0], [2.0, 0, 0]])
    assert assembly_log_density_unnorm(R2, np.array([1.0]), G2) == pytest.approx(-1.0, abs=1e-9)


def test_assembly_gradient_matches_fd():
    g = chain(["C", "C", "O", "N"])
    rng = np.random.default_rng(1)
    R = rng.normal(size=(4, 3))
    d = rng.uniform(1.0, 2.5, g.num_edges)
    grad = assembly_gradient(R, d, g)
    h = 1e-6
    fd = np.zeros_like(R)
    for i in range(4):
        for j in range(3):
            Rp, Rm = R.copy(), R.copy()
            Rp[i, j] += h
            Rm[i, j] -= h
            fd[i, j] = (
                assembly_log_density_unnorm(Rp, d, g) - assembly_log_density_unnorm(Rm, d, g)
            ) / (2 * h)
    rel = np.max(np.abs(grad - fd)) / np.max(np.abs(fd))
    assert rel < 1e-6


def test_alpha_by_edge_class():
    g = chain(["C"] * 5)
    cfg = AssemblyConfig()
    alphas = edge_alphas(g, cfg)
    for (u, v, b), a in zip(g.edges(), alphas):
        expect = {"single": 1.0, "virtual_2hop": 0.5, "virtual_3hop": 0.25}[b]
        assert a == expect


def test_assemble_two_atom_basin():
    conf = assemble(np.array([1.5]), G2, seed=1)
    assert np.linalg.norm(conf.coords[0] - conf.coords[1]) == pytest.approx(1.5, abs=1e-3)


def test_assemble_equilateral():
    g = make_graph(["C"] * 3, [(0, 1, "single"), (1, 2, "single"), (0, 2, "single")])
    conf = assemble(np.array([1.0, 1.0, 1.0]), g, seed=2)
    got = pairwise_distances(conf, g)
    assert np.max(np.abs(got - 1.0)) < 1e-2


def test_assemble_infeasible_triangle_still_returns():
    g = make_graph(["C"] * 3, [(0, 1, "single"), (1, 2, "single"), (0, 2, "single")])
    target = np.array([1.0, 3.0, 1.0])  # violates the triangle inequality
    conf = assemble(target, g, seed=3)
    obj = assembly_log_density_unnorm(conf, target, g)
    assert np.all(np.isfinite(conf.coords))
    assert obj < -1e-3


def test_assemble_deterministic():
    g = chain(["C", "O", "C"])
    d = np.array([1.4, 2.3, 1.5])
    a = assemble(d, g, seed=7)
    b = assemble(d, g, seed=7)
    assert np.array_equal(a.coords, b.coords)


def test_assemble_objective_nondecreasing_on_feasible():
    g = chain(["C", "C", "O", "C"])
    rng = np.random.default_rng(5)
    R_true = rng.normal(size=(4, 3))
    d = pairwise_distances(R_true, g)
    cfg = AssemblyConfig(restarts=1, steps=150)
    rng2 = np.random.default_rng(8)
    R = rng2.standard_normal((4, 3)) * cfg.init_scale
    prev = assembly_log_density_unnorm(R, d, g, cfg)
    for _ in range(cfg.steps):
        R = R + cfg.step_size * assembly_gradient(R, d, g, cfg)
        cur = assembly_log_density_unnorm(R, d, g, cfg)
        assert cur >= prev - 1e-12
        prev = cur


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_assemble_recovers_feasible_targets(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 8))
    g = chain(["C"] * n)
    # realizable targets: distances of an actual conformation
    R_true = rng.normal(size=(n, 3)) * 1.2
    d = pairwise_distances(R_true, g)
    conf = assemble(d, g, seed=seed)
    got = pairwise_distances(conf, g)
    assert np.max(np.abs(got - d)) < 1e-2


def test_clamp_distances():
    d = np.array([-0.5, 0.0, 2.0])
    assert np.array_equal(clamp_distances(d, 1e-3), np.array([1e-3, 1e-3, 2.0]))


def test_kabsch_identity():
    rng = np.random.default_rng(0)
    R = rng.normal(size=(5, 3))
    rot, trans, aligned = kabsch_align(R, R)
    assert np.allclose(rot, np.eye(3), atol=1e-12)
    assert np.allclose(trans, 0, atol=1e-12)
    assert np.allclose(aligned, R, atol=1e-12)


def test_kabsch_recovers_rotation():
    rng = np.random.default_rng(1)
    R = rng.normal(size=(6, 3))
    rot0, tr0 = rand_rigid(rng)
    ref = R @ rot0.T + tr0
    rot, trans, aligned = kabsch_align(R, ref)
    assert np.allclose(rot, rot0, atol=1e-9)
    assert rmsd(R, ref) < 1e-9
    assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-9)


def test_kabsch_proper_rotation_on_mirrored_cloud():
    rng = np.random.default_rng(2)
    R = rng.normal(size=(5, 3))
    mirrored = R * np.array([-1.0, 1.0, 1.0])
    rot, _, _ = kabsch_align(R, mirrored)
    assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-9)


def test_kabsch_mask_errors():
    R = np.zeros((3, 3))
    with pytest.raises(ValueError):
        kabsch_align(R, R, mask=np.zeros(3, dtype=bool))


def test_rmsd_matches_quaternion_bruteforce():
    rng = np.random.default_rng(4)
    for seed in range(3):
        A = rng.normal(size=(4, 3))
        B = rng.normal(size=(4, 3))
        ours = rmsd(A, B)
        brute = rmsd_bruteforce_quaternions(A, B, num=1_000_000, seed=seed)
        assert ours <= brute + 1e-12
        assert brute - ours < 1e-3


def test_rmsd_trivial_cases():
    rng = np.random.default_rng(5)
    R = rng.normal(size=(4, 3))
    assert rmsd(R, R) == 0.0
    rot, tr = rand_rigid(rng)
    assert rmsd(R, R @ rot.T + tr) < 1e-9


def test_rmsd_two_atom_closed_form():
    Ra = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    Rb = np.array([[0.0, 0, 0], [2.0, 0, 0]])
    assert rmsd(Ra, Rb) == pytest.approx(0.5, abs=1e-12)


def test_rmsd_pseudometric_properties():
    rng = np.random.default_rng(6)
    for _ in range(10):
        A, B, C = (rng.normal(size=(5, 3)) for _ in range(3))
        ab, ba = rmsd(A, B), rmsd(B, A)
        assert ab == pytest.approx(ba, abs=1e-9)
        assert rmsd(A, B) + rmsd(B, C) >= rmsd(A, C) - 1e-6


def test_heavy_atom_mask_restricts_rmsd():
    g = make_graph(["C", "H", "C"], [(0, 1, "single"), (1, 2, "single")])
    mask = g.heavy_mask()
    assert mask.tolist() == [True, False, True]
    A = np.array([[0.0, 0, 0], [5.0, 5, 5], [2.0, 0, 0]])
    B = np.array([[0.0, 0, 0], [-9.0, 3, 1], [2.0, 0, 0]])
    assert rmsd(A, B, mask) < 1e-12  # hydrogen excluded entirely


def test_xyz_roundtrip(tmp_path):
    g = chain(["C", "O", "C"])
    rng = np.random.default_rng(9)
    entries = [
        ("mol-a", 0, g, Conformation(rng.normal(size=(3, 3)))),
        ("mol-a", 1, g, Conformation(rng.normal(size=(3, 3)))),
        ("mol-b", 0, g, Conformation(rng.normal(size=(3, 3)))),
    ]
    path = tmp_path / "samples.xyz"
    write_xyz(path, entries)
    back = read_xyz(path)
    assert [(b[0], b[1]) for b in back] == [("mol-a", 0), ("mol-a", 1), ("mol-b", 0)]
    assert back[0][2] == ["C", "O", "C"]
    for b, e in zip(back, entries):
        assert np.max(np.abs(b[3].coords - e[3].coords)) < 1e-9
