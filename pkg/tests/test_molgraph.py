import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from confgen.molgraph import (
    DatasetError,
    GraphValidationError,
    expand_graph,
    is_expanded,
    make_batch,
    make_graph,
    parse_dataset,
    record_to_obj,
    shortest_hop_distances,
    strip_virtual,
    write_dataset,
    Conformation,
    MoleculeRecord,
)
from oracles import hops_by_matrix_powers


def chain(n, elements=None):
    elements = elements or ["C"] * n
    return make_graph(elements, [(i, i + 1, "single") for i in range(n - 1)])


def test_expand_three_chain_adds_one_2hop():
    g = expand_graph(chain(3))
    assert g.num_edges == 3
    assert g.edges()[1] == (0, 2, "virtual_2hop")


def test_expand_triangle_adds_nothing():
    g = make_graph(["C"] * 3, [(0, 1, "single"), (1, 2, "single"), (0, 2, "single")])
    assert expand_graph(g).num_edges == 3


def test_expand_five_chain_counts():
    g = expand_graph(chain(5))
    kinds = [b for _, _, b in g.edges()]
    assert kinds.count("virtual_2hop") == 3
    assert kinds.count("virtual_3hop") == 2
    assert g.num_edges == 9


def test_hop_distances_basic():
    g = chain(3)
    hops = shortest_hop_distances(g)
    assert hops[0, 2] == 2
    single = make_graph(["C"], [])
    assert shortest_hop_distances(single).shape == (1, 1)


def test_six_cycle_opposite_atoms():
    g = make_graph(["C"] * 6, [(i, (i + 1) % 6, "single") for i in range(6)])
    hops = shortest_hop_distances(g)
    assert hops[0, 3] == 3


def test_expand_idempotent_via_strip():
    g = expand_graph(chain(6))
    again = expand_graph(strip_virtual(g))
    assert g.edges() == again.edges()
    assert is_expanded(g)


def test_expand_rejects_virtual_input_and_disconnected():
    g = expand_graph(chain(3))
    with pytest.raises(GraphValidationError):
        expand_graph(g)
    disconnected = make_graph(["C", "C", "C"], [(0, 1, "single")])
    with pytest.raises(GraphValidationError):
        expand_graph(disconnected)


def test_duplicate_edges_rejected():
    with pytest.raises(GraphValidationError):
        make_graph(["C", "C"], [(0, 1, "single"), (1, 0, "double")])


def test_canonical_ordering():
    g = make_graph(["C", "C", "C"], [(2, 1, "single"), (1, 0, "single")])
    assert g.edges() == [(0, 1, "single"), (1, 2, "single")]


@st.composite
def random_connected_graph(draw):
    n = draw(st.integers(min_value=2, max_value=12))
    extra = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=8))
    rng = np.random.default_rng(draw(st.integers(0, 2**31 - 1)))
    edges = set()
    for v in range(1, n):
        edges.add((int(rng.integers(0, v)), v))
    for u, v in extra:
        if u != v:
            edges.add((min(u, v), max(u, v)))
    return n, sorted(edges)


@settings(max_examples=60, deadline=None)
@given(random_connected_graph())
def test_expansion_matches_bfs_oracle(nv):
    n, edges = nv
    g = make_graph(["C"] * n, [(u, v, "single") for u, v in edges])
    hops = hops_by_matrix_powers(n, edges)
    assert np.array_equal(shortest_hop_distances(g), hops)
    ge = expand_graph(g)
    expect = len(edges)
    for u in range(n):
        for v in range(u + 1, n):
            if (u, v) not in set(edges) and hops[u, v] in (2, 3):
                expect += 1
    assert ge.num_edges == expect
    # hop >= 4 pairs stay unconnected
    pairs = {(u, v) for (u, v, b) in ge.edges()}
    for u in range(n):
        for v in range(u + 1, n):
            if hops[u, v] >= 4:
                assert (u, v) not in pairs


def test_parse_dataset_happy_path(tmp_path):
    path = tmp_path / "d.jsonl"
    obj = {
        "id": "mol-0",
        "atoms": ["C", "O"],
        "bonds": [[0, 1, "single"]],
        "conformations": [[[0.0, 0.0, 0.0], [1.2, 0.0, 0.0]]],
    }
    path.write_text(json.dumps(obj) + "\n")
    recs = parse_dataset(path)
    assert len(recs) == 1
    assert recs[0].graph.num_atoms == 2
    assert recs[0].conformations[0].coords.shape == (2, 3)


def test_parse_dataset_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert parse_dataset(path) == []


def test_parse_dataset_reports_line_and_field(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = {"id": "a", "atoms": ["C", "C"], "bonds": [[0, 1, "single"]], "conformations": []}
    bad = {"id": "b", "atoms": ["C", "C", "C"],
           "bonds": [[0, 5, "single"]], "conformations": []}
    path.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(DatasetError, match=r"line 2.*bonds"):
        parse_dataset(path)


def test_parse_dataset_rejects_malformed_json(tmp_path):
    path = tmp_path / "oops.jsonl"
    path.write_text("{not json}\n")
    with pytest.raises(DatasetError, match="line 1"):
        parse_dataset(path)


def test_parse_serialize_roundtrip(tmp_path):
    g = chain(4, ["C", "O", "N", "C"])
    rec = MoleculeRecord(
        id="m",
        graph=g,
        conformations=(Conformation(np.arange(12, dtype=float).reshape(4, 3) / 7.0),),
    )
    p1 = tmp_path / "a.jsonl"
    write_dataset(p1, [rec])
    back = parse_dataset(p1)
    assert record_to_obj(back[0]) == record_to_obj(rec)
    p2 = tmp_path / "b.jsonl"
    write_dataset(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_virtual_bonds_rejected_in_files(tmp_path):
    path = tmp_path / "v.jsonl"
    obj = {"id": "x", "atoms": ["C", "C", "C"],
           "bonds": [[0, 1, "single"], [1, 2, "single"], [0, 2, "virtual_2hop"]],
           "conformations": []}
    path.write_text(json.dumps(obj) + "\n")
    with pytest.raises(DatasetError, match="virtual"):
        parse_dataset(path)


def test_make_batch_offsets():
    g1 = expand_graph(chain(3))
    g2 = expand_graph(chain(4))
    gb = make_batch([g1, g2])
    assert gb.num_graphs == 2
    assert gb.num_atoms == 7
    assert gb.num_edges == g1.num_edges + g2.num_edges
    assert gb.edge_u[g1.num_edges] >= 3  # second component offset
    assert np.array_equal(np.unique(gb.edge_sample), [0, 1])
