"""Ensemble evaluation: coverage, matching, junk fraction, diversity, and
kernel two-sample discrepancies over edge-distance distributions.

Coverage counts reference conformations matched by at least one generated
one under a strict RMSD threshold; the junk fraction counts generated
conformations strictly farther than the threshold from every reference.
A conformation exactly at the threshold is unmatched for coverage and
not junk. Discrepancies use a Gaussian-kernel V-statistic, nonnegative by
construction, with a median-heuristic bandwidth unless fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .geometry import pairwise_distances, rmsd
from .molgraph import ELEMENT_CODES, Conformation, MolecularGraph


class MetricError(ValueError):
    pass


@dataclass
class ConformerSets:
    generated: list[Conformation]
    reference: list[Conformation]
    graph: MolecularGraph
    mask: np.ndarray | None = None

    def heavy_mask(self) -> np.ndarray:
        if self.mask is not None:
            return np.asarray(self.mask, dtype=bool)
        return self.graph.heavy_mask()


@dataclass
class MmdConfig:
    bandwidth: str | float = "median_heuristic"
    atom_filter: tuple[str, ...] = ("C", "O")
    unbiased: bool = False

    def __post_init__(self):
        if isinstance(self.bandwidth, (int, float)) and self.bandwidth <= 0:
            raise ValueError("fixed bandwidth must be positive")


def rmsd_matrix(
    gen: list[Conformation], ref: list[Conformation], mask: np.ndarray
) -> np.ndarray:
    out = np.zeros((len(gen), len(ref)))
    for i, a in enumerate(gen):
        for j, b in enumerate(ref):
            out[i, j] = rmsd(a, b, mask)
    return out


def cov(sets: ConformerSets, delta: float) -> float:
    """Fraction of references with some generated conformation closer than delta."""
    if delta <= 0:
        raise MetricError("delta must be positive")
    if not sets.reference:
        raise MetricError("reference set is empty")
    if not sets.generated:
        raise MetricError("generated set is empty")
    M = rmsd_matrix(sets.generated, sets.reference, sets.heavy_mask())
    matched = np.any(M < delta, axis=0)
    return float(np.sum(matched) / len(sets.reference))


def mat(sets: ConformerSets) -> float:
    """Mean over references of the nearest generated RMSD."""
    if not sets.reference or not sets.generated:
        raise MetricError("both sets must be nonempty")
    M = rmsd_matrix(sets.generated, sets.reference, sets.heavy_mask())
    return float(np.mean(np.min(M, axis=0)))


def junk(sets: ConformerSets, delta: float) -> float:
    """Fraction of generated conformations strictly farther than delta from all references."""
    if delta <= 0:
        raise MetricError("delta must be positive")
    if not sets.generated:
        raise MetricError("generated set is empty")
    if not sets.reference:
        raise MetricError("reference set is empty")
    M = rmsd_matrix(sets.generated, sets.reference, sets.heavy_mask())
    far = np.all(M > delta, axis=1)
    return float(np.sum(far) / len(sets.generated))


def diversity(generated: list[Conformation], mask: np.ndarray) -> tuple[float, float]:
    """Mean and population std of RMSD over unordered generated pairs."""
    n = len(generated)
    if n < 2:
        raise MetricError("need at least two generated conformations")
    vals = []
    for i in range(n):
        for j in range(i + 1, n):
            vals.append(rmsd(generated[i], generated[j], mask))
    vals = np.asarray(vals)
    return float(np.mean(vals)), float(np.std(vals))


# ---------------------------------------------------------------------------
# Kernel two-sample discrepancy.


def _bandwidth(x: np.ndarray, y: np.ndarray, cfg: MmdConfig) -> float:
    if isinstance(cfg.bandwidth, (int, float)):
        return float(cfg.bandwidth)
    if cfg.bandwidth != "median_heuristic":
        raise MetricError(f"unknown bandwidth spec: {cfg.bandwidth!r}")
    pooled = np.vstack([x, y])
    dists = pdist(pooled)
    med = float(np.median(dists)) if dists.size else 0.0
    return med if med > 0 else 1.0


def mmd(x: np.ndarray, y: np.ndarray, cfg: MmdConfig | None = None) -> float:
    """Squared maximum mean discrepancy with a Gaussian kernel.

    The default biased V-statistic is nonnegative; set ``cfg.unbiased`` for
    the U-statistic variant (which may go negative).
    """
    cfg = cfg or MmdConfig()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise MetricError(f"sample dimensions differ: {x.shape} vs {y.shape}")
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise MetricError("both sample sets must be nonempty")
    sigma = _bandwidth(x, y, cfg)
    gamma = 1.0 / (2.0 * sigma * sigma)
    kxx = np.exp(-gamma * cdist(x, x, "sqeuclidean"))
    kyy = np.exp(-gamma * cdist(y, y, "sqeuclidean"))
    kxy = np.exp(-gamma * cdist(x, y, "sqeuclidean"))
    m, n = x.shape[0], y.shape[0]
    if cfg.unbiased:
        if m < 2 or n < 2:
            raise MetricError("unbiased estimator needs at least two samples per set")
        a = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        b = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
        return float(a + b - 2.0 * kxy.mean())
    value = kxx.mean() + kyy.mean() - 2.0 * kxy.mean()
    return float(max(value, 0.0))


def filtered_edge_indices(g: MolecularGraph, atom_filter: tuple[str, ...]) -> np.ndarray:
    """Edges whose both endpoints are in the element filter."""
    codes = {ELEMENT_CODES[sym] for sym in atom_filter}
    keep = []
    for i, (u, v) in enumerate(g.edge_index):
        if int(g.atom_types[u]) in codes and int(g.atom_types[v]) in codes:
            keep.append(i)
    return np.asarray(keep, dtype=np.intp)


@dataclass
class MmdReport:
    edge_indices: np.ndarray
    single: dict[int, float]
    pair: dict[tuple[int, int], float]
    all_edges: float
    bandwidth_spec: str | float

    @property
    def single_values(self) -> np.ndarray:
        return np.asarray(list(self.single.values()))

    @property
    def pair_values(self) -> np.ndarray:
        return np.asarray(list(self.pair.values()))

    def summary(self) -> dict:
        sv, pv = self.single_values, self.pair_values
        return {
            "mmd_single_mean": float(np.mean(sv)),
            "mmd_single_median": float(np.median(sv)),
            "mmd_pair_mean": float(np.mean(pv)) if pv.size else None,
            "mmd_pair_median": float(np.median(pv)) if pv.size else None,
            "mmd_all": self.all_edges,
        }


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["delta", "molecules", "aggregate", "protocol_warnings", "mmd_bandwidth"],
    "properties": {
        "delta": {"type": "number", "exclusiveMinimum": 0},
        "delta_sweep": {"type": "array", "items": {"type": "number"}},
        "mmd_bandwidth": {"type": ["string", "number"]},
        "protocol_warnings": {"type": "array", "items": {"type": "string"}},
        "molecules": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "n_ref", "n_gen", "error"],
                "properties": {
                    "id": {"type": "string"},
                    "n_ref": {"type": "integer", "minimum": 0},
                    "n_gen": {"type": "integer", "minimum": 0},
                    "error": {"type": ["string", "null"]},
                    "cov": {"type": ["number", "null"]},
                    "mat": {"type": ["number", "null"]},
                    "junk": {"type": ["number", "null"]},
                    "diversity_mean": {"type": ["number", "null"]},
                    "diversity_std": {"type": ["number", "null"]},
                    "mmd_single_mean": {"type": ["number", "null"]},
                    "mmd_single_median": {"type": ["number", "null"]},
                    "mmd_pair_mean": {"type": ["number", "null"]},
                    "mmd_pair_median": {"type": ["number", "null"]},
                    "mmd_all": {"type": ["number", "null"]},
                    "cov_sweep": {"type": "object"},
                    "junk_sweep": {"type": "object"},
                },
            },
        },
        "aggregate": {
            "type": "object",
            "patternProperties": {".*": {"type": ["number", "null"]}},
        },
    },
}

_METRIC_FIELDS = (
    "cov",
    "mat",
    "junk",
    "diversity_mean",
    "diversity_std",
    "mmd_single_mean",
    "mmd_single_median",
    "mmd_pair_mean",
    "mmd_pair_median",
    "mmd_all",
)


def evaluate_molecule(
    mol_id: str,
    g: MolecularGraph,
    generated: list[Conformation],
    reference: list[Conformation],
    delta: float,
    delta_sweep: tuple[float, ...] = (),
    mmd_cfg: MmdConfig | None = None,
) -> dict:
    """One report row; failures are captured in the row's error field."""
    mmd_cfg = mmd_cfg or MmdConfig()
    row: dict = {
        "id": mol_id,
        "n_ref": len(reference),
        "n_gen": len(generated),
        "error": None,
    }
    for name in _METRIC_FIELDS:
        row[name] = None
    row["cov_sweep"] = {}
    row["junk_sweep"] = {}
    try:
        sets = ConformerSets(generated, reference, g)
        row["cov"] = cov(sets, delta)
        row["mat"] = mat(sets)
        row["junk"] = junk(sets, delta)
        for dd in delta_sweep:
            row["cov_sweep"][repr(float(dd))] = cov(sets, dd)
            row["junk_sweep"][repr(float(dd))] = junk(sets, dd)
        if len(generated) >= 2:
            dm, dstd = diversity(generated, sets.heavy_mask())
            row["diversity_mean"], row["diversity_std"] = dm, dstd
        # the distance-marginal protocol compares equal-size sets
        rep = mmd_report(generated[: len(reference)], reference, g, mmd_cfg)
        row.update(rep.summary())
    except MetricError as exc:
        row["error"] = str(exc)
    return row


def build_report(
    rows: list[dict],
    delta: float,
    delta_sweep: tuple[float, ...],
    mmd_cfg: MmdConfig,
    protocol_warnings: list[str],
) -> dict:
    """Aggregate per-molecule rows into mean/median columns."""
    aggregate = {}
    for name in _METRIC_FIELDS:
        vals = [r[name] for r in rows if r["error"] is None and r[name] is not None]
        aggregate[f"{name}_mean"] = float(np.mean(vals)) if vals else None
        aggregate[f"{name}_median"] = float(np.median(vals)) if vals else None
    return {
        "delta": delta,
        "delta_sweep": [float(d) for d in delta_sweep],
        "mmd_bandwidth": mmd_cfg.bandwidth,
        "protocol_warnings": protocol_warnings,
        "molecules": rows,
        "aggregate": aggregate,
    }


def mmd_report(
    generated: list[Conformation],
    reference: list[Conformation],
    g: MolecularGraph,
    cfg: MmdConfig | None = None,
) -> MmdReport:
    """Distance-marginal discrepancies over filtered edges.

    Computes one value per single edge (1-D marginals), one per unordered
    edge pair (2-D marginals), and one for the full filtered vector.
    """
    cfg = cfg or MmdConfig()
    if not generated or not reference:
        raise MetricError("both conformer sets must be nonempty")
    keep = filtered_edge_indices(g, cfg.atom_filter)
    if keep.size == 0:
        raise MetricError(f"no edges pass the atom filter {cfg.atom_filter}")
    dg = np.stack([pairwise_distances(c, g)[keep] for c in generated])
    dr = np.stack([pairwise_distances(c, g)[keep] for c in reference])
    single = {}
    for col, edge_idx in enumerate(keep):
        single[int(edge_idx)] = mmd(dg[:, [col]], dr[:, [col]], cfg)
    pair = {}
    for a in range(keep.size):
        for b in range(a + 1, keep.size):
            pair[(int(keep[a]), int(keep[b]))] = mmd(dg[:, [a, b]], dr[:, [a, b]], cfg)
    return MmdReport(
        edge_indices=keep,
        single=single,
        pair=pair,
        all_edges=mmd(dg, dr, cfg),
        bandwidth_spec=cfg.bandwidth,
    )
