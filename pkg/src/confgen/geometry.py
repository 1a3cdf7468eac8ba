"""Coordinates from distances and back: the quadratic edge-residual
objective, gradient-ascent assembly, Kabsch alignment, and RMSD.

The assembly objective is the unnormalized conditional log-density of
coordinates given target edge lengths: minus a weighted sum of squared
residuals between realized and target distances, with per-edge weights
set by edge class (real bonds tightest, 3-hop loosest). Ascending it
always yields coordinates, even for unrealizable targets, unlike a
classical distance-geometry solve.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .molgraph import (
    ELEMENTS,
    VIRTUAL_2HOP,
    VIRTUAL_3HOP,
    Conformation,
    MolecularGraph,
)


class AssemblyError(RuntimeError):
    pass


@dataclass
class AssemblyConfig:
    alpha_real: float = 1.0
    alpha_2hop: float = 0.5
    alpha_3hop: float = 0.25
    steps: int = 200
    step_size: float = 0.05
    restarts: int = 3
    init_scale: float = 1.0
    distance_floor: float = 1e-3
    norm_epsilon: float = 1e-12

    def __post_init__(self):
        for name in ("alpha_real", "alpha_2hop", "alpha_3hop", "step_size", "init_scale", "distance_floor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0 or self.restarts < 1:
            raise ValueError("steps must be >= 0 and restarts >= 1")
        if self.norm_epsilon < 0:
            raise ValueError("norm_epsilon must be >= 0")


def edge_alphas(g: MolecularGraph, cfg: AssemblyConfig) -> np.ndarray:
    """Per-edge residual weights by edge class."""
    alphas = np.full(g.num_edges, cfg.alpha_real)
    bt = g.bond_types
    alphas[bt == VIRTUAL_2HOP] = cfg.alpha_2hop
    alphas[bt == VIRTUAL_3HOP] = cfg.alpha_3hop
    return alphas


def pairwise_distances(R: np.ndarray | Conformation, g: MolecularGraph) -> np.ndarray:
    """Euclidean length of every edge of ``g``, in canonical edge order."""
    coords = R.coords if isinstance(R, Conformation) else np.asarray(R, dtype=np.float64)
    if coords.shape != (g.num_atoms, 3):
        raise ValueError(f"coords {coords.shape} for graph with {g.num_atoms} atoms")
    diff = coords[g.edge_index[:, 0]] - coords[g.edge_index[:, 1]]
    return np.sqrt(np.sum(diff * diff, axis=1))


def clamp_distances(d: np.ndarray, floor: float) -> np.ndarray:
    """Raw flow outputs can be nonpositive; assembly needs a positive target."""
    return np.maximum(np.asarray(d, dtype=np.float64), floor)


def _objective_and_grad(
    R: np.ndarray, d: np.ndarray, g: MolecularGraph, alphas: np.ndarray, eps: float
) -> tuple[np.ndarray, np.ndarray]:
    """Batched objective values and gradients.

    ``R`` has shape (..., n, 3); returns values (...,) and grads like R.
    The edge norm uses sqrt(|r|^2 + eps) so coincident atoms stay finite.
    """
    u = g.edge_index[:, 0]
    v = g.edge_index[:, 1]
    diff = R[..., u, :] - R[..., v, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1) + eps)
    resid = dist - d
    val = -np.sum(alphas * resid * resid, axis=-1)
    coef = (-2.0 * alphas * resid / dist)[..., None]
    contrib = coef * diff
    grad = np.zeros_like(R)
    if R.ndim == 2:
        np.add.at(grad, u, contrib)
        np.add.at(grad, v, -contrib)
    else:
        np.add.at(grad, (slice(None), u), contrib)
        np.add.at(grad, (slice(None), v), -contrib)
    return val, grad


def assembly_log_density_unnorm(
    R: np.ndarray | Conformation,
    d: np.ndarray,
    g: MolecularGraph,
    cfg: AssemblyConfig | None = None,
) -> float:
    """-sum_e alpha_e (|r_u - r_v| - d_e)^2; the partition term is dropped."""
    cfg = cfg or AssemblyConfig()
    coords = R.coords if isinstance(R, Conformation) else np.asarray(R, dtype=np.float64)
    val, _ = _objective_and_grad(coords, np.asarray(d, float), g, edge_alphas(g, cfg), cfg.norm_epsilon)
    return float(val)


def assembly_gradient(
    R: np.ndarray | Conformation,
    d: np.ndarray,
    g: MolecularGraph,
    cfg: AssemblyConfig | None = None,
) -> np.ndarray:
    cfg = cfg or AssemblyConfig()
    coords = R.coords if isinstance(R, Conformation) else np.asarray(R, dtype=np.float64)
    _, grad = _objective_and_grad(coords, np.asarray(d, float), g, edge_alphas(g, cfg), cfg.norm_epsilon)
    return grad


def assemble(
    d: np.ndarray,
    g: MolecularGraph,
    cfg: AssemblyConfig | None = None,
    seed=0,
    rng: np.random.Generator | None = None,
) -> Conformation:
    """Gradient-ascent search for coordinates realizing target distances.

    Each restart starts from isotropic Gaussian coordinates and climbs the
    objective for ``cfg.steps`` steps; the best final objective wins, ties
    going to the lowest restart index. Restarts that go non-finite are
    discarded; if all do, AssemblyError is raised.
    """
    cfg = cfg or AssemblyConfig()
    if rng is None:
        base = [int(s) for s in seed] if isinstance(seed, (tuple, list)) else [int(seed or 0)]
        rng = np.random.default_rng(base + [401])
    d = clamp_distances(d, cfg.distance_floor)
    if d.shape != (g.num_edges,):
        raise ValueError(f"distance vector {d.shape} for graph with {g.num_edges} edges")
    alphas = edge_alphas(g, cfg)
    R = rng.standard_normal((cfg.restarts, g.num_atoms, 3)) * cfg.init_scale
    for _ in range(cfg.steps):
        _, grad = _objective_and_grad(R, d, g, alphas, cfg.norm_epsilon)
        R = R + cfg.step_size * grad
        bad = ~np.all(np.isfinite(R.reshape(cfg.restarts, -1)), axis=1)
        if np.any(bad):
            # freeze broken restarts at something finite; they are excluded below
            R[bad] = 0.0
    finals, _ = _objective_and_grad(R, d, g, alphas, cfg.norm_epsilon)
    ok = np.isfinite(finals)
    if not np.any(ok):
        raise AssemblyError("all assembly restarts diverged")
    finals = np.where(ok, finals, -np.inf)
    best = int(np.argmax(finals))
    return Conformation(R[best])


# ---------------------------------------------------------------------------
# Rigid alignment.


def kabsch_align(
    R: np.ndarray | Conformation,
    R_ref: np.ndarray | Conformation,
    mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Proper rotation + translation aligning ``R`` onto ``R_ref``.

    Minimizes the masked RMSD; reflections are excluded by flipping the
    smallest singular direction when needed. Returns (rotation, translation,
    R_aligned) with R_aligned = R @ rotation.T + translation.
    """
    A = R.coords if isinstance(R, Conformation) else np.asarray(R, dtype=np.float64)
    B = R_ref.coords if isinstance(R_ref, Conformation) else np.asarray(R_ref, dtype=np.float64)
    if A.shape != B.shape or A.ndim != 2 or A.shape[1] != 3:
        raise ValueError(f"conformation shapes differ or are not (n, 3): {A.shape} vs {B.shape}")
    if mask is None:
        mask = np.ones(A.shape[0], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (A.shape[0],):
        raise ValueError("mask length must equal atom count")
    if int(mask.sum()) < 1:
        raise ValueError("mask selects no atoms")

    a = A[mask]
    b = B[mask]
    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    H = (a - ca).T @ (b - cb)
    U, S, Vt = np.linalg.svd(H)
    sign = np.sign(np.linalg.det(Vt.T @ U.T))
    if sign == 0:
        sign = 1.0
    D = np.diag([1.0, 1.0, sign])
    rot = Vt.T @ D @ U.T
    trans = cb - rot @ ca
    aligned = A @ rot.T + trans
    return rot, trans, aligned


def rmsd(
    R: np.ndarray | Conformation,
    R_ref: np.ndarray | Conformation,
    mask: np.ndarray | None = None,
) -> float:
    """Kabsch-aligned root-mean-square deviation over masked atoms, in A."""
    B = R_ref.coords if isinstance(R_ref, Conformation) else np.asarray(R_ref, dtype=np.float64)
    if mask is None:
        mask = np.ones(B.shape[0], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    _, _, aligned = kabsch_align(R, R_ref, mask)
    dev = aligned[mask] - B[mask]
    return float(np.sqrt(np.mean(np.sum(dev * dev, axis=1))))


# ---------------------------------------------------------------------------
# XYZ-style text export: per structure, an atom-count line, a comment line
# carrying the molecule id and sample index, then "symbol x y z" rows.


def write_xyz(path: str | Path, entries: list[tuple[str, int, MolecularGraph, Conformation]]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for mol_id, sample_idx, g, conf in entries:
            fh.write(f"{g.num_atoms}\n")
            fh.write(f"id={mol_id} sample={sample_idx}\n")
            for code, row in zip(g.atom_types, conf.coords):
                fh.write(
                    f"{ELEMENTS[int(code)]} {row[0]:.10f} {row[1]:.10f} {row[2]:.10f}\n"
                )


def read_xyz(path: str | Path) -> list[tuple[str, int, list[str], Conformation]]:
    """Parse structures written by :func:`write_xyz`."""
    path = Path(path)
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        n = int(lines[i])
        comment = lines[i + 1]
        fields = dict(part.split("=", 1) for part in comment.split() if "=" in part)
        mol_id = fields.get("id", "")
        sample_idx = int(fields.get("sample", -1))
        symbols = []
        coords = np.zeros((n, 3))
        for k in range(n):
            parts = lines[i + 2 + k].split()
            symbols.append(parts[0])
            coords[k] = [float(x) for x in parts[1:4]]
        out.append((mol_id, sample_idx, symbols, Conformation(coords)))
        i += 2 + n
    return out
