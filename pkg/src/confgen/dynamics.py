"""Message-passing drift network over edge distances.

The network maps (graph, per-edge distances, time) to one real per edge,
the time derivative of that edge's length under the flow. Node features
start from element embeddings; each layer adds aggregated neighbor
messages and applies a two-layer feed-forward map; the head combines the
two endpoint features (symmetrically), the edge feature, and the scalar
time. Aggregations use value-canonical ordering, so relabeling atoms
permutes the output bitwise.

Any object with the same ``eval_batched`` signature can stand in for the
network inside the flow integrator and the trace helpers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .molgraph import (
    NUM_BOND_TYPES,
    NUM_ELEMENTS,
    GraphBatch,
    MolecularGraph,
    make_batch,
)
from .optim import ParameterStore, uniform_init


def _linear(params: ParameterStore, name: str, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{name}_w"]), params[f"{name}_b"])


def _mlp(params: ParameterStore, name: str, x: Tensor) -> Tensor:
    return _linear(params, f"{name}_fc2", ad.softplus(_linear(params, f"{name}_fc1", x)))


@dataclass
class DynamicsNet:
    """Drift network parameters plus the evaluation routine."""

    width: int
    layers: int
    params: ParameterStore
    edge_embed_at_t0: bool = False

    @classmethod
    def create(
        cls,
        width: int = 128,
        layers: int = 3,
        seed: int = 0,
        edge_embed_at_t0: bool = False,
    ) -> "DynamicsNet":
        if layers < 1:
            raise ValueError("need at least one message-passing layer")
        rng = np.random.default_rng([int(seed), 101])
        p = ParameterStore()
        w = width

        def lin(name, fan_in, fan_out):
            p.add(f"{name}_w", uniform_init(rng, (fan_in, fan_out), fan_in))
            p.add(f"{name}_b", uniform_init(rng, (fan_out,), fan_in))

        p.add("node_embed", uniform_init(rng, (NUM_ELEMENTS, w), w))
        p.add("bond_embed", uniform_init(rng, (NUM_BOND_TYPES, w), w))
        lin("edge_fc1", w + 1, w)
        lin("edge_fc2", w, w)
        for l in range(layers):
            lin(f"layer{l}_fc1", w, w)
            lin(f"layer{l}_fc2", w, w)
        lin("head_fc1", 2 * w + 1, w)
        lin("head_fc2", w, 1)
        return cls(width=width, layers=layers, params=p, edge_embed_at_t0=edge_embed_at_t0)

    def hyperparameters(self) -> dict:
        return {
            "width": self.width,
            "layers": self.layers,
            "edge_embed_at_t0": self.edge_embed_at_t0,
        }

    def eval_batched(
        self,
        gb: GraphBatch,
        d: Tensor,
        t: float | Tensor,
        d_start: Tensor | None = None,
    ) -> Tensor:
        """Drift for a disjoint-union batch: one real per union edge.

        ``d_start`` carries the integration's initial state; it is only
        consulted when ``edge_embed_at_t0`` is set, in which case edge
        features are frozen at that state instead of tracking ``d``.
        """
        if d.data.shape != (gb.num_edges,):
            raise ad.ShapeError(
                f"drift: distance vector has shape {d.data.shape}, batch has {gb.num_edges} edges"
            )
        p = self.params
        E, N = gb.num_edges, gb.num_atoms
        de = d_start if (self.edge_embed_at_t0 and d_start is not None) else d

        be = ad.gather_rows(p["bond_embed"], gb.bond_types)
        he = _mlp(p, "edge", ad.concat([be, ad.reshape(de, (E, 1))], axis=1))

        h = ad.gather_rows(p["node_embed"], gb.atom_types)
        both_src = np.concatenate([gb.edge_u, gb.edge_v])
        both_dst = np.concatenate([gb.edge_v, gb.edge_u])
        for l in range(self.layers):
            msg_in = ad.add(ad.gather_rows(h, both_src), ad.concat([he, he], axis=0))
            agg = ad.canonical_segment_sum(ad.softplus(msg_in), both_dst, N)
            h = _mlp(p, f"layer{l}", ad.add(h, agg))

        hu = ad.gather_rows(h, gb.edge_u)
        hv = ad.gather_rows(h, gb.edge_v)
        tt = t if isinstance(t, Tensor) else Tensor(float(t))
        tcol = ad.broadcast_to(ad.reshape(tt, (1, 1)), (E, 1))
        head_in = ad.concat([ad.add(hu, hv), he, tcol], axis=1)
        return ad.reshape(_mlp(p, "head", head_in), (E,))


def dynamics_eval(net, g: MolecularGraph, d: np.ndarray, t: float) -> np.ndarray:
    """Single-graph drift evaluation, returning a plain array."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (g.num_edges,):
        raise ad.ShapeError(f"dynamics_eval: {d.shape} distances for {g.num_edges} edges")
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    gb = make_batch([g])
    with ad.no_grad():
        out = net.eval_batched(gb, Tensor(d), t)
    return out.data.copy()


# ---------------------------------------------------------------------------
# Jacobian machinery. The exact path evaluates the drift on m replicas of
# each graph and seeds a single backward pass with a block-identity pattern;
# that is the vectorized form of m directional derivatives, one per output
# coordinate, and yields the exact Jacobian diagonal.


@dataclass(frozen=True)
class ReplicaPlan:
    """Index bookkeeping for per-sample input replication of a batch."""

    gb_rep: GraphBatch
    rep_src: np.ndarray       # replicated edge slot -> source union edge
    primary_rows: np.ndarray  # replicated rows holding copy 0 of each edge
    diag_rows: np.ndarray     # replicated rows holding J[k, k] per union edge
    seed: np.ndarray          # block-identity backward seed
    edge_sample: np.ndarray   # union edge -> sample index
    num_samples: int


def build_replica_plan(graphs: list[MolecularGraph]) -> ReplicaPlan:
    reps: list[MolecularGraph] = []
    rep_src, primary, diag, seed, edge_sample = [], [], [], [], []
    edge_base = 0
    rep_base = 0
    for i, g in enumerate(graphs):
        m = g.num_edges
        reps.extend([g] * m)
        for k in range(m):
            rep_src.extend(range(edge_base, edge_base + m))
            diag.append(rep_base + k * m + k)
        primary.extend(range(rep_base, rep_base + m))
        seed.append(np.eye(m).reshape(-1))
        edge_sample.extend([i] * m)
        edge_base += m
        rep_base += m * m
    return ReplicaPlan(
        gb_rep=make_batch(reps),
        rep_src=np.asarray(rep_src, dtype=np.intp),
        primary_rows=np.asarray(primary, dtype=np.intp),
        diag_rows=np.asarray(diag, dtype=np.intp),
        seed=np.concatenate(seed) if seed else np.zeros(0),
        edge_sample=np.asarray(edge_sample, dtype=np.intp),
        num_samples=len(graphs),
    )


def drift_and_trace_exact(
    net,
    plan: ReplicaPlan,
    x: Tensor,
    t: float | Tensor,
    create_graph: bool = False,
    x_start: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Copy-0 drift plus per-sample exact Jacobian traces, on the tape.

    ``x`` is the union state (one entry per union edge); the replicated
    evaluation and its backward pass happen on the active tape, so with
    ``create_graph=True`` the traces stay differentiable.
    """
    x_rep = ad.gather_rows(x, plan.rep_src)
    start_rep = None if x_start is None else ad.gather_rows(x_start, plan.rep_src)
    out = net.eval_batched(plan.gb_rep, x_rep, t, d_start=start_rep)
    drift = ad.gather_rows(out, plan.primary_rows)
    (gx,) = ad.grad(out, [x_rep], out_grad=plan.seed, create_graph=create_graph)
    diag = ad.gather_rows(gx, plan.diag_rows)
    traces = ad.scatter_add_rows(diag, plan.edge_sample, plan.num_samples)
    return drift, traces


def jacobian_exact(net, g: MolecularGraph, d: np.ndarray, t: float) -> np.ndarray:
    """Full Jacobian of the drift with respect to ``d``, shape (m, m)."""
    m = g.num_edges
    plan = build_replica_plan([g])
    with Tape():
        dt = Tensor(np.tile(np.asarray(d, dtype=np.float64), m))
        out = net.eval_batched(plan.gb_rep, dt, t)
        (gd,) = ad.grad(out, [dt], out_grad=plan.seed)
    return gd.data.reshape(m, m)


def jacobian_trace(
    net,
    g: MolecularGraph,
    d: np.ndarray,
    t: float,
    mode: str = "exact",
    probes: int = 16,
    rng: np.random.Generator | None = None,
) -> float:
    """Tr(d drift / d distances) for one graph.

    ``mode='exact'`` differentiates every output coordinate and is
    deterministic; ``'hutchinson'`` averages Rademacher quadratic forms
    over ``probes`` draws and converges to the exact value.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (g.num_edges,):
        raise ad.ShapeError(f"jacobian_trace: {d.shape} distances for {g.num_edges} edges")
    if mode == "exact":
        return float(np.trace(jacobian_exact(net, g, d, t)))
    if mode == "hutchinson":
        if probes < 1:
            raise ValueError("need at least one probe")
        if rng is None:
            rng = np.random.default_rng(0)
        gb = make_batch([g])
        total = 0.0
        for _ in range(probes):
            v = rng.integers(0, 2, size=d.shape[0]).astype(np.float64) * 2.0 - 1.0
            with Tape():
                dt = Tensor(d)
                out = net.eval_batched(gb, dt, t)
                (w,) = ad.grad(out, [dt], out_grad=v)
            total += float(np.dot(w.data, v))
        return total / probes
    raise ValueError(f"unknown trace mode: {mode}")
