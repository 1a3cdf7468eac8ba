"""Conditional continuous flow over edge distances.

The flow pushes a standard-normal latent through a fixed-step integration
of the drift network; the exact log-density comes from accumulating the
negative Jacobian trace of the drift along the trajectory (instantaneous
change of variables). The same step grid is used in both directions, so
inverse(forward(z)) differs from z only by integration truncation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import save_checkpoint
from .dynamics import ReplicaPlan, build_replica_plan
from .molgraph import GraphBatch, MolecularGraph, MoleculeRecord, make_batch
from .optim import OptimizationError, adam_step

LOG_2PI = math.log(2.0 * math.pi)


class IntegrationError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, step: int, checkpoint_path=None):
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path


@dataclass
class FlowModel:
    """Drift network plus integration settings defining the distance density."""

    net: object
    t0: float = 0.0
    t1: float = 1.0
    steps: int = 32
    scheme: str = "rk4"
    trace_mode: str = "exact"
    hutchinson_probes: int = 8

    def __post_init__(self):
        if self.t1 <= self.t0:
            raise ValueError("t1 must exceed t0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.scheme not in ("rk4", "euler"):
            raise ValueError(f"unknown scheme: {self.scheme}")
        if self.trace_mode not in ("exact", "hutchinson"):
            raise ValueError(f"unknown trace mode: {self.trace_mode}")


def validate_distances(g: MolecularGraph, d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (g.num_edges,):
        raise ad.ShapeError(f"distance vector {d.shape} for graph with {g.num_edges} edges")
    if not np.all(np.isfinite(d)):
        raise ad.NonFiniteError("distance vector is not finite")
    return d


# ---------------------------------------------------------------------------
# Integration core. ``connected=True`` keeps everything on the ambient tape
# (training); otherwise each stage runs on a private tape and only numbers
# survive, which bounds memory during large inference sweeps.


@dataclass
class _TraceSetup:
    mode: str                       # "none" | "exact" | "hutchinson"
    plan: ReplicaPlan | None = None
    probes: np.ndarray | None = None  # (k, E) Rademacher vectors


def _stage_eval(net, gb, x, t, trace: _TraceSetup, connected: bool, x_start):
    """One drift evaluation plus (optionally) per-sample traces."""

    def run():
        if trace.mode == "exact":
            from .dynamics import drift_and_trace_exact

            return drift_and_trace_exact(
                net, trace.plan, x, t, create_graph=connected, x_start=x_start
            )
        drift = net.eval_batched(gb, x, t, d_start=x_start)
        if trace.mode == "none":
            return drift, None
        acc = None
        for v in trace.probes:
            (w,) = ad.grad(drift, [x], out_grad=v, create_graph=connected)
            contrib = ad.scatter_add_rows(
                ad.mul(w, Tensor(v)), gb.edge_sample, gb.num_graphs
            )
            acc = contrib if acc is None else ad.add(acc, contrib)
        return drift, ad.scale(acc, 1.0 / len(trace.probes))

    if connected:
        return run()
    with Tape():
        drift, tr = run()
    return Tensor(drift.data), (None if tr is None else Tensor(tr.data))


def _integrate(
    net,
    gb: GraphBatch,
    x0: Tensor,
    t_start: float,
    t_end: float,
    steps: int,
    scheme: str,
    trace: _TraceSetup,
    connected: bool,
) -> tuple[Tensor, Tensor | None]:
    """Integrate the drift from t_start to t_end; accumulate -int(trace).

    Returns the final state and, when tracing, the per-sample term to add
    to the latent log-density (this equals minus the trace integral taken
    along increasing time, independent of integration direction).
    """
    h = (t_end - t_start) / steps
    x = x0
    x_start = x0 if getattr(net, "edge_embed_at_t0", False) else None
    ld = None
    if trace.mode != "none":
        ld = Tensor(np.zeros(gb.num_graphs))
    ah = abs(h)
    for k in range(steps):
        t_k = t_start + k * h
        if scheme == "rk4":
            k1, tr1 = _stage_eval(net, gb, x, t_k, trace, connected, x_start)
            x2 = ad.add(x, ad.scale(k1, h / 2))
            k2, tr2 = _stage_eval(net, gb, x2, t_k + h / 2, trace, connected, x_start)
            x3 = ad.add(x, ad.scale(k2, h / 2))
            k3, tr3 = _stage_eval(net, gb, x3, t_k + h / 2, trace, connected, x_start)
            x4 = ad.add(x, ad.scale(k3, h))
            k4, tr4 = _stage_eval(net, gb, x4, t_k + h, trace, connected, x_start)
            incr = ad.add(ad.add(k1, k4), ad.scale(ad.add(k2, k3), 2.0))
            x = ad.add(x, ad.scale(incr, h / 6))
            if ld is not None:
                tsum = ad.add(ad.add(tr1, tr4), ad.scale(ad.add(tr2, tr3), 2.0))
                ld = ad.sub(ld, ad.scale(tsum, ah / 6))
        else:  # euler
            k1, tr1 = _stage_eval(net, gb, x, t_k, trace, connected, x_start)
            x = ad.add(x, ad.scale(k1, h))
            if ld is not None:
                ld = ad.sub(ld, ad.scale(tr1, ah))
        if not np.all(np.isfinite(x.data)):
            raise IntegrationError(f"non-finite state at integration step {k + 1} of {steps}")
    return x, ld


def _trace_setup(model: FlowModel, graphs, gb, rng, want: bool) -> _TraceSetup:
    if not want:
        return _TraceSetup(mode="none")
    if model.trace_mode == "exact":
        return _TraceSetup(mode="exact", plan=build_replica_plan(graphs))
    if rng is None:
        rng = np.random.default_rng(0)
    probes = (
        rng.integers(0, 2, size=(model.hutchinson_probes, gb.num_edges)).astype(np.float64)
        * 2.0
        - 1.0
    )
    return _TraceSetup(mode="hutchinson", probes=probes)


def _gauss_logpdf_terms(gb: GraphBatch, z: Tensor) -> Tensor:
    """Per-sample log N(z; 0, I) over each sample's coordinates."""
    sumsq = ad.scatter_add_rows(ad.square(z), gb.edge_sample, gb.num_graphs)
    m_per = np.diff(gb.edge_offsets).astype(np.float64)
    return ad.sub(Tensor(-0.5 * LOG_2PI * m_per), ad.scale(sumsq, 0.5))


# ---------------------------------------------------------------------------
# Public single-graph operations.


def flow_forward(
    model: FlowModel,
    g: MolecularGraph,
    z: np.ndarray,
    rng: np.random.Generator | None = None,
    want_logdet: bool = True,
) -> tuple[np.ndarray, float]:
    """Push a latent to a distance vector; logdet is the add-to-log-prior term."""
    z = validate_distances(g, z)
    gb = make_batch([g])
    trace = _trace_setup(model, [g], gb, rng, want_logdet)
    x, ld = _integrate(
        model.net, gb, Tensor(z), model.t0, model.t1, model.steps, model.scheme, trace, False
    )
    return x.data.copy(), (float(ld.data[0]) if ld is not None else 0.0)


def flow_inverse(
    model: FlowModel,
    g: MolecularGraph,
    d: np.ndarray,
    rng: np.random.Generator | None = None,
    want_logdet: bool = True,
) -> tuple[np.ndarray, float]:
    """Invert the flow; logdet satisfies log p(d) = log N(z) + logdet."""
    d = validate_distances(g, d)
    gb = make_batch([g])
    trace = _trace_setup(model, [g], gb, rng, want_logdet)
    x, ld = _integrate(
        model.net, gb, Tensor(d), model.t1, model.t0, model.steps, model.scheme, trace, False
    )
    return x.data.copy(), (float(ld.data[0]) if ld is not None else 0.0)


def log_density(
    model: FlowModel,
    g: MolecularGraph,
    d: np.ndarray,
    rng: np.random.Generator | None = None,
) -> float:
    z, ld = flow_inverse(model, g, d, rng=rng)
    m = g.num_edges
    return float(-0.5 * LOG_2PI * m - 0.5 * np.dot(z, z) + ld)


def log_densities(
    model: FlowModel,
    g: MolecularGraph,
    ds: np.ndarray,
    rng: np.random.Generator | None = None,
    chunk: int = 4096,
) -> np.ndarray:
    """log p(d | g) for many distance vectors over one graph, chunked."""
    ds = np.asarray(ds, dtype=np.float64)
    if ds.ndim != 2 or ds.shape[1] != g.num_edges:
        raise ad.ShapeError(f"expected (n, {g.num_edges}) distances, got {ds.shape}")
    out = np.empty(ds.shape[0])
    for lo in range(0, ds.shape[0], chunk):
        block = ds[lo : lo + chunk]
        graphs = [g] * block.shape[0]
        gb = make_batch(graphs)
        trace = _trace_setup(model, graphs, gb, rng, True)
        x, ld = _integrate(
            model.net,
            gb,
            Tensor(block.reshape(-1)),
            model.t1,
            model.t0,
            model.steps,
            model.scheme,
            trace,
            False,
        )
        z = x.data.reshape(block.shape)
        m = g.num_edges
        out[lo : lo + chunk] = (
            -0.5 * LOG_2PI * m - 0.5 * np.sum(z * z, axis=1) + ld.data
        )
    return out


def nll_loss(
    model: FlowModel,
    batch: list[tuple[MolecularGraph, np.ndarray]],
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean negative log-density over (graph, distances) pairs.

    Returns a scalar tensor; call inside a Tape to differentiate with
    respect to the drift parameters.
    """
    if not batch:
        raise ValueError("empty batch")
    graphs = [g for g, _ in batch]
    ds = [validate_distances(g, d) for g, d in batch]
    gb = make_batch(graphs)
    trace = _trace_setup(model, graphs, gb, rng, True)
    connected = _inside_tape()
    x0 = Tensor(np.concatenate(ds))
    z, ld = _integrate(
        model.net, gb, x0, model.t1, model.t0, model.steps, model.scheme, trace, connected
    )
    logp = ad.add(_gauss_logpdf_terms(gb, z), ld)
    loss = ad.negate(ad.mean_(logp))
    ad.require_finite(loss, "nll_loss")
    return loss


def _inside_tape() -> bool:
    return ad._active_tape is not None


# ---------------------------------------------------------------------------
# Training and sampling.


@dataclass
class FlowTrainConfig:
    batch_size: int = 128
    lr: float = 1e-3
    max_steps: int = 1000
    seed: int = 0
    checkpoint_dir: str | None = None
    checkpoint_every: int = 0          # 0: only the final checkpoint
    history_path: str | None = None


def dataset_to_pairs(records: list[MoleculeRecord]) -> list[tuple[MolecularGraph, np.ndarray]]:
    """Expand each record's graph and convert conformations to distances."""
    from .geometry import pairwise_distances
    from .molgraph import expand_graph, is_expanded

    pairs = []
    for rec in records:
        g = rec.graph if is_expanded(rec.graph) else expand_graph(rec.graph)
        for conf in rec.conformations:
            pairs.append((g, pairwise_distances(conf.coords, g)))
    return pairs


def _write_history(path, history):
    import csv
    from pathlib import Path

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        writer.writerows(history)


def train_flow(
    model: FlowModel,
    dataset: list[MoleculeRecord],
    cfg: FlowTrainConfig,
) -> tuple[FlowModel, list[tuple[int, float]]]:
    """Adam on the mean NLL; deterministic given cfg.seed.

    On a non-finite loss or gradient the last finite parameter state is
    restored (and checkpointed when a directory is configured) before
    raising TrainingDiverged.
    """
    pairs = dataset_to_pairs(dataset)
    if not pairs and cfg.max_steps > 0:
        raise ValueError("dataset has no conformations")
    rng = np.random.default_rng([int(cfg.seed), 202])
    params = model.net.params
    history: list[tuple[int, float]] = []
    last_good = params.copy_values()

    def checkpoint(tag):
        if cfg.checkpoint_dir is None:
            return None
        from pathlib import Path

        path = Path(cfg.checkpoint_dir) / f"flow_{tag}.ckpt"
        save_checkpoint(path, params, _flow_hyperparameters(model), cfg.seed)
        return path

    order = np.arange(len(pairs))
    cursor = 0
    for step in range(1, cfg.max_steps + 1):
        if cursor == 0:
            rng.shuffle(order)
        take = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        if cursor >= len(order):
            cursor = 0
        batch = [pairs[i] for i in take]
        step_rng = np.random.default_rng([int(cfg.seed), 203, step])
        try:
            with Tape():
                loss = nll_loss(model, batch, rng=step_rng)
                grads = ad.grad(loss, params.tensors())
            gmap = dict(zip(params.names(), grads))
            adam_step(params, gmap, lr=cfg.lr)
        except (ad.NonFiniteError, OptimizationError, IntegrationError) as exc:
            params.load_values(last_good)
            path = checkpoint("last_good")
            raise TrainingDiverged(
                f"flow training diverged at step {step}: {exc}", step, path
            ) from exc
        history.append((step, float(loss.data)))
        last_good = params.copy_values()
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            checkpoint(f"step{step:06d}")
    checkpoint("final")
    if cfg.history_path:
        _write_history(cfg.history_path, history)
    return model, history


def _flow_hyperparameters(model: FlowModel) -> dict:
    hp = {
        "kind": "flow",
        "t0": model.t0,
        "t1": model.t1,
        "steps": model.steps,
        "scheme": model.scheme,
        "trace_mode": model.trace_mode,
        "hutchinson_probes": model.hutchinson_probes,
    }
    if hasattr(model.net, "hyperparameters"):
        hp["net"] = model.net.hyperparameters()
    return hp


def sample_distances_array(
    model: FlowModel, g: MolecularGraph, n: int, rng: np.random.Generator
) -> np.ndarray:
    """n flow samples for one graph as an (n, m) array; no densities."""
    if n < 1:
        raise ValueError("n must be >= 1")
    m = g.num_edges
    z = rng.standard_normal((n, m))
    gb = make_batch([g] * n)
    x, _ = _integrate(
        model.net,
        gb,
        Tensor(z.reshape(-1)),
        model.t0,
        model.t1,
        model.steps,
        model.scheme,
        _TraceSetup(mode="none"),
        False,
    )
    return x.data.reshape(n, m)


def seed_key(seed, tag: int) -> list[int]:
    """Derive a child seed list from an int or tuple master seed."""
    base = [int(s) for s in seed] if isinstance(seed, (tuple, list)) else [int(seed)]
    return base + [int(tag)]


def sample_distances(
    model: FlowModel, g: MolecularGraph, n: int, seed
) -> list[np.ndarray]:
    """n i.i.d. latent draws pushed through the flow, raw (unclamped)."""
    rng = np.random.default_rng(seed_key(seed, 301))
    arr = sample_distances_array(model, g, n, rng)
    return [arr[i].copy() for i in range(n)]
