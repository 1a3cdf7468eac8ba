"""Molecular graphs, dataset ingestion, and auxiliary-edge expansion.

A molecule is an undirected graph of typed bonds. Before distance modeling,
the graph is expanded: atom pairs exactly 2 (resp. 3) hops apart over real
bonds gain a virtual edge with its own bond-type code, which pins angles
(2-hop) and dihedrals (3-hop) once edge lengths are fixed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ELEMENTS = ("H", "C", "N", "O", "F", "S", "Cl")
ELEMENT_CODES = {sym: i for i, sym in enumerate(ELEMENTS)}
HYDROGEN = ELEMENT_CODES["H"]

REAL_BOND_TYPES = ("single", "double", "triple", "aromatic")
BOND_TYPES = REAL_BOND_TYPES + ("virtual_2hop", "virtual_3hop")
BOND_CODES = {name: i for i, name in enumerate(BOND_TYPES)}
VIRTUAL_2HOP = BOND_CODES["virtual_2hop"]
VIRTUAL_3HOP = BOND_CODES["virtual_3hop"]
NUM_BOND_TYPES = len(BOND_TYPES)
NUM_ELEMENTS = len(ELEMENTS)


class GraphValidationError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class MolecularGraph:
    """Atoms, typed edges in canonical (u < v, sorted) order, and the count.

    ``atom_types`` holds element codes; ``edge_index`` is (E, 2) with
    ``u < v`` per row; ``bond_types`` holds bond-type codes.
    """

    atom_types: np.ndarray
    edge_index: np.ndarray
    bond_types: np.ndarray
    num_atoms: int

    @property
    def num_edges(self) -> int:
        return int(self.edge_index.shape[0])

    def edges(self) -> list[tuple[int, int, str]]:
        return [
            (int(u), int(v), BOND_TYPES[int(b)])
            for (u, v), b in zip(self.edge_index, self.bond_types)
        ]

    def heavy_mask(self) -> np.ndarray:
        return self.atom_types != HYDROGEN


@dataclass(frozen=True)
class Conformation:
    """Cartesian coordinates, one row per atom, in angstroms."""

    coords: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.coords, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise GraphValidationError(f"coords must be (n, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise GraphValidationError("coords contain non-finite entries")
        object.__setattr__(self, "coords", arr)

    @property
    def num_atoms(self) -> int:
        return int(self.coords.shape[0])


@dataclass(frozen=True)
class MoleculeRecord:
    id: str
    graph: MolecularGraph
    conformations: tuple = field(default_factory=tuple)


def make_graph(atom_types, edges) -> MolecularGraph:
    """Build a validated graph from element codes and (u, v, bond) triples.

    Edges are canonicalized to u < v and sorted by (u, v); duplicates are an
    error. ``atom_types`` may be element codes or symbols; ``edges`` entries
    may name the bond or carry its code.
    """
    codes = []
    for a in atom_types:
        if isinstance(a, str):
            if a not in ELEMENT_CODES:
                raise GraphValidationError(f"unknown element symbol: {a!r}")
            codes.append(ELEMENT_CODES[a])
        else:
            a = int(a)
            if not 0 <= a < NUM_ELEMENTS:
                raise GraphValidationError(f"element code out of range: {a}")
            codes.append(a)
    n = len(codes)

    canon = []
    for e in edges:
        u, v, b = e
        u, v = int(u), int(v)
        if isinstance(b, str):
            if b not in BOND_CODES:
                raise GraphValidationError(f"unknown bond type: {b!r}")
            b = BOND_CODES[b]
        b = int(b)
        if not 0 <= b < NUM_BOND_TYPES:
            raise GraphValidationError(f"bond code out of range: {b}")
        if u == v:
            raise GraphValidationError(f"self-loop edge ({u},{v})")
        if not (0 <= u < n and 0 <= v < n):
            raise GraphValidationError(f"edge ({u},{v}) out of range for {n} atoms")
        if u > v:
            u, v = v, u
        canon.append((u, v, b))

    canon.sort(key=lambda t: (t[0], t[1]))
    seen = set()
    for u, v, _ in canon:
        if (u, v) in seen:
            raise GraphValidationError(f"duplicate edge ({u},{v})")
        seen.add((u, v))

    edge_index = np.array([(u, v) for u, v, _ in canon], dtype=np.intp).reshape(-1, 2)
    bond_types = np.array([b for _, _, b in canon], dtype=np.intp)
    g = MolecularGraph(
        atom_types=np.array(codes, dtype=np.intp),
        edge_index=edge_index,
        bond_types=bond_types,
        num_atoms=n,
    )
    g.atom_types.flags.writeable = False
    g.edge_index.flags.writeable = False
    g.bond_types.flags.writeable = False
    return g


def _adjacency_real(g: MolecularGraph) -> list[list[int]]:
    adj: list[list[int]] = [[] for _ in range(g.num_atoms)]
    for (u, v), b in zip(g.edge_index, g.bond_types):
        if int(b) in (VIRTUAL_2HOP, VIRTUAL_3HOP):
            continue
        adj[int(u)].append(int(v))
        adj[int(v)].append(int(u))
    return adj


def shortest_hop_distances(g: MolecularGraph) -> np.ndarray:
    """Unweighted shortest-path hop counts over real bonds, (n, n) ints.

    Raises if the real-bond subgraph is disconnected.
    """
    n = g.num_atoms
    adj = _adjacency_real(g)
    hops = np.full((n, n), -1, dtype=np.intp)
    for src in range(n):
        hops[src, src] = 0
        frontier = [src]
        depth = 0
        while frontier:
            depth += 1
            nxt = []
            for v in frontier:
                for w in adj[v]:
                    if hops[src, w] < 0:
                        hops[src, w] = depth
                        nxt.append(w)
            frontier = nxt
    if np.any(hops < 0):
        raise GraphValidationError("real-bond subgraph is disconnected")
    return hops


def expand_graph(g: MolecularGraph) -> MolecularGraph:
    """Add virtual_2hop / virtual_3hop edges for pairs at hop distance 2 / 3.

    The input must carry only real bond types. Pairs already joined by a
    real bond are never re-labeled; pairs at hop >= 4 stay unconnected.
    Idempotent on its own output via :func:`strip_virtual`.
    """
    for b in g.bond_types:
        if int(b) in (VIRTUAL_2HOP, VIRTUAL_3HOP):
            raise GraphValidationError("expand_graph input already contains virtual edges")
    hops = shortest_hop_distances(g)
    edges = g.edges()
    bonded = {(int(u), int(v)) for (u, v) in g.edge_index}
    n = g.num_atoms
    for u in range(n):
        for v in range(u + 1, n):
            if (u, v) in bonded:
                continue
            if hops[u, v] == 2:
                edges.append((u, v, "virtual_2hop"))
            elif hops[u, v] == 3:
                edges.append((u, v, "virtual_3hop"))
    return make_graph(g.atom_types, edges)


def strip_virtual(g: MolecularGraph) -> MolecularGraph:
    """Drop virtual edges, recovering the real-bond graph."""
    keep = [e for e in g.edges() if e[2] not in ("virtual_2hop", "virtual_3hop")]
    return make_graph(g.atom_types, keep)


def is_expanded(g: MolecularGraph) -> bool:
    return any(int(b) in (VIRTUAL_2HOP, VIRTUAL_3HOP) for b in g.bond_types)


# ---------------------------------------------------------------------------
# Dataset files: JSON Lines, one molecule per line, real bonds only.
# {"id": str, "atoms": ["C", ...], "bonds": [[u, v, "single"], ...],
#  "conformations": [[[x, y, z], ...], ...]}


def _record_from_obj(obj: dict, where: str) -> MoleculeRecord:
    for key in ("id", "atoms", "bonds", "conformations"):
        if key not in obj:
            raise DatasetError(f"{where}: missing field {key!r}")
    try:
        graph = make_graph(obj["atoms"], [tuple(b) for b in obj["bonds"]])
    except (GraphValidationError, TypeError) as exc:
        raise DatasetError(f"{where}: field 'bonds'/'atoms': {exc}") from exc
    for b in graph.bond_types:
        if int(b) in (VIRTUAL_2HOP, VIRTUAL_3HOP):
            raise DatasetError(f"{where}: field 'bonds': virtual bonds may not appear in files")
    confs = []
    for k, c in enumerate(obj["conformations"]):
        arr = np.asarray(c, dtype=np.float64)
        if arr.shape != (graph.num_atoms, 3):
            raise DatasetError(
                f"{where}: field 'conformations'[{k}]: shape {arr.shape} for "
                f"{graph.num_atoms} atoms"
            )
        try:
            confs.append(Conformation(arr))
        except GraphValidationError as exc:
            raise DatasetError(f"{where}: field 'conformations'[{k}]: {exc}") from exc
    # Connectivity check doubles as validation of the real-bond subgraph.
    shortest_hop_distances(graph)
    return MoleculeRecord(id=str(obj["id"]), graph=graph, conformations=tuple(confs))


def parse_dataset(path: str | Path) -> list[MoleculeRecord]:
    """Read and validate a JSONL dataset; errors name the offending line."""
    path = Path(path)
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path} line {lineno}: invalid JSON: {exc}") from exc
            records.append(_record_from_obj(obj, f"{path} line {lineno}"))
    return records


def record_to_obj(rec: MoleculeRecord) -> dict:
    return {
        "id": rec.id,
        "atoms": [ELEMENTS[int(a)] for a in rec.graph.atom_types],
        "bonds": [[u, v, b] for u, v, b in rec.graph.edges()],
        "conformations": [c.coords.tolist() for c in rec.conformations],
    }


def write_dataset(path: str | Path, records: list[MoleculeRecord]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_obj(rec), sort_keys=True))
            fh.write("\n")


# ---------------------------------------------------------------------------
# Disjoint-union batching: several graphs evaluated as one big graph with
# offset indices. Message passing never crosses component boundaries, so the
# union computation equals the per-graph computations run side by side.


@dataclass(frozen=True)
class GraphBatch:
    atom_types: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    bond_types: np.ndarray
    num_atoms: int
    num_edges: int
    node_offsets: np.ndarray
    edge_offsets: np.ndarray
    edge_sample: np.ndarray

    @property
    def num_graphs(self) -> int:
        return len(self.node_offsets) - 1

    def edge_slice(self, i: int) -> slice:
        return slice(int(self.edge_offsets[i]), int(self.edge_offsets[i + 1]))


def make_batch(graphs: list[MolecularGraph]) -> GraphBatch:
    atom_types = []
    eu, ev, bt, es = [], [], [], []
    node_offsets = [0]
    edge_offsets = [0]
    for i, g in enumerate(graphs):
        base = node_offsets[-1]
        atom_types.append(g.atom_types)
        eu.append(g.edge_index[:, 0] + base)
        ev.append(g.edge_index[:, 1] + base)
        bt.append(g.bond_types)
        es.append(np.full(g.num_edges, i, dtype=np.intp))
        node_offsets.append(base + g.num_atoms)
        edge_offsets.append(edge_offsets[-1] + g.num_edges)
    return GraphBatch(
        atom_types=np.concatenate(atom_types) if atom_types else np.zeros(0, dtype=np.intp),
        edge_u=np.concatenate(eu) if eu else np.zeros(0, dtype=np.intp),
        edge_v=np.concatenate(ev) if ev else np.zeros(0, dtype=np.intp),
        bond_types=np.concatenate(bt) if bt else np.zeros(0, dtype=np.intp),
        num_atoms=int(node_offsets[-1]),
        num_edges=int(edge_offsets[-1]),
        node_offsets=np.asarray(node_offsets, dtype=np.intp),
        edge_offsets=np.asarray(edge_offsets, dtype=np.intp),
        edge_sample=np.concatenate(es) if es else np.zeros(0, dtype=np.intp),
    )
