"""Synthetic multi-conformer datasets with verifiably bimodal geometry.

Each molecule is a small chain (or ring with a chain tail) of alternating
C/O atoms with unit-type bonds. A conformer picks one of two joint angles,
chosen so the second-neighbor distances of the two modes differ by exactly
the configured separation, then adds small coordinate jitter. The two-mode
structure makes mode coverage and distance-marginal comparisons easy to
verify on a desk machine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .molgraph import Conformation, MoleculeRecord, make_graph, write_dataset

BOND_LENGTH = 1.5
LOW_MODE_SECOND_NEIGHBOR = 2.1


@dataclass
class ToySpec:
    family: str = "chain"
    num_molecules: int = 100
    atoms_range: tuple[int, int] = (4, 6)
    mode_separation: float = 0.6
    conformers_per_molecule: int = 8
    seed: int = 0
    coord_noise: float = 0.02

    def __post_init__(self):
        if self.family not in ("chain", "ring-tail"):
            raise ValueError(f"unknown family: {self.family!r}")
        lo, hi = self.atoms_range
        if not (3 <= lo <= hi <= 12):
            raise ValueError("atoms_range must lie within [3, 12]")
        if self.family == "ring-tail" and lo < 5:
            # ring of >= 3 plus a tail of >= 2, so a bimodal joint exists
            raise ValueError("ring-tail molecules need at least 5 atoms")
        if self.mode_separation <= 0:
            raise ValueError("mode_separation must be positive")
        hi_d = LOW_MODE_SECOND_NEIGHBOR + self.mode_separation
        if hi_d >= 2.0 * BOND_LENGTH - 0.05:
            raise ValueError("mode_separation too large for the fixed bond length")
        if self.num_molecules < 1 or self.conformers_per_molecule < 1:
            raise ValueError("need at least one molecule and one conformer")
        if self.coord_noise < 0:
            raise ValueError("coord_noise must be >= 0")


def _mode_angles(spec: ToySpec) -> tuple[float, float]:
    """Joint angles whose second-neighbor distances differ by the mode gap."""
    d_low = LOW_MODE_SECOND_NEIGHBOR
    d_high = d_low + spec.mode_separation
    theta_low = 2.0 * math.asin(d_low / (2.0 * BOND_LENGTH))
    theta_high = 2.0 * math.asin(d_high / (2.0 * BOND_LENGTH))
    return theta_low, theta_high


def _chain_coords(n: int, theta: float) -> np.ndarray:
    """Planar zigzag with unit bond length and interior angle theta."""
    pts = np.zeros((n, 3))
    direction = np.array([1.0, 0.0, 0.0])
    turn = math.pi - theta
    for i in range(1, n):
        pts[i] = pts[i - 1] + BOND_LENGTH * direction
        c, s = math.cos(turn), math.sin(turn)
        sgn = 1.0 if i % 2 else -1.0
        direction = np.array(
            [c * direction[0] - sgn * s * direction[1], sgn * s * direction[0] + c * direction[1], 0.0]
        )
    return pts


def _ring_tail_coords(ring: int, tail: int, theta: float) -> np.ndarray:
    """Regular ring in the plane with a zigzag tail grown from atom 0."""
    n = ring + tail
    pts = np.zeros((n, 3))
    radius = BOND_LENGTH / (2.0 * math.sin(math.pi / ring))
    for i in range(ring):
        ang = 2.0 * math.pi * i / ring
        pts[i] = [radius * math.cos(ang), radius * math.sin(ang), 0.0]
    direction = pts[0] / np.linalg.norm(pts[0])
    turn = math.pi - theta
    prev = pts[0]
    for k in range(tail):
        cur = prev + BOND_LENGTH * direction
        pts[ring + k] = cur
        c, s = math.cos(turn), math.sin(turn)
        sgn = 1.0 if k % 2 else -1.0
        direction = np.array(
            [c * direction[0] - sgn * s * direction[1], sgn * s * direction[0] + c * direction[1], 0.0]
        )
        prev = cur
    return pts


def _molecule_topology(spec: ToySpec, n: int, rng: np.random.Generator):
    atoms = [("C" if i % 2 == 0 else "O") for i in range(n)]
    if spec.family == "chain":
        bonds = [(i, i + 1, "single") for i in range(n - 1)]
        meta = ("chain", n, 0)
    else:
        ring = int(rng.integers(3, min(5, n - 2) + 1))
        tail = n - ring
        bonds = [(i, (i + 1) % ring, "single") for i in range(ring)]
        bonds.append((0, ring, "single"))
        bonds.extend((ring + k, ring + k + 1, "single") for k in range(tail - 1))
        meta = ("ring-tail", ring, tail)
    return atoms, bonds, meta


def _conformer(spec: ToySpec, meta, mode_high: bool, rng: np.random.Generator) -> np.ndarray:
    theta_low, theta_high = _mode_angles(spec)
    theta = theta_high if mode_high else theta_low
    kind, a, b = meta
    coords = _chain_coords(a, theta) if kind == "chain" else _ring_tail_coords(a, b, theta)
    if spec.coord_noise > 0:
        coords = coords + rng.normal(scale=spec.coord_noise, size=coords.shape)
    return coords


def generate_toy_dataset(spec: ToySpec) -> list[MoleculeRecord]:
    rng = np.random.default_rng([int(spec.seed), 601])
    records = []
    prefix = "chain" if spec.family == "chain" else "ringtail"
    lo, hi = spec.atoms_range
    for i in range(spec.num_molecules):
        n = int(rng.integers(lo, hi + 1))
        atoms, bonds, meta = _molecule_topology(spec, n, rng)
        graph = make_graph(atoms, bonds)
        confs = []
        for _ in range(spec.conformers_per_molecule):
            mode_high = bool(rng.integers(0, 2))
            confs.append(Conformation(_conformer(spec, meta, mode_high, rng)))
        records.append(
            MoleculeRecord(id=f"{prefix}-{i:04d}", graph=graph, conformations=tuple(confs))
        )
    return records


def cmd_synth(spec: ToySpec, out: str | Path) -> list[MoleculeRecord]:
    records = generate_toy_dataset(spec)
    write_dataset(out, records)
    return records
