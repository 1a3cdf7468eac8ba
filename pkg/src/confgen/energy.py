"""Invariant energy network over conformations and its contrastive training.

Each interaction layer updates atom features by a continuous-filter
convolution over all other atoms: the filter is a feed-forward map of the
radial-basis expansion of the pair distance, so the energy depends on
coordinates only through distances and is invariant to rigid motion by
construction. Pooling uses value-ordered summation, making permutation
invariance bitwise.

Training is a logistic discrimination between reference conformations and
samples from the distance-flow pipeline; the flow's own density cancels
from the objective, so no partition function is ever evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import save_checkpoint
from .molgraph import NUM_ELEMENTS, Conformation, MolecularGraph, MoleculeRecord
from .optim import OptimizationError, ParameterStore, adam_step, uniform_init

TWO_LOG_TWO = 2.0 * np.log(2.0)


@dataclass(frozen=True)
class RbfExpansion:
    """Gaussian radial basis grid on [0, d_max]."""

    num_centers: int = 64
    d_max: float = 10.0
    gamma: float | None = None

    def __post_init__(self):
        if self.num_centers < 2:
            raise ValueError("need at least two centers")
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(0.0, self.d_max, self.num_centers)

    @property
    def width(self) -> float:
        if self.gamma is not None:
            return self.gamma
        spacing = self.d_max / (self.num_centers - 1)
        return 1.0 / (2.0 * spacing * spacing)


@dataclass
class EnergyModel:
    width: int
    layers: int
    rbf: RbfExpansion
    params: ParameterStore

    @classmethod
    def create(
        cls,
        width: int = 128,
        layers: int = 6,
        rbf: RbfExpansion | None = None,
        seed: int = 0,
    ) -> "EnergyModel":
        if layers < 1:
            raise ValueError("need at least one interaction layer")
        rbf = rbf or RbfExpansion()
        rng = np.random.default_rng([int(seed), 102])
        p = ParameterStore()
        w = width

        def lin(name, fan_in, fan_out):
            p.add(f"{name}_w", uniform_init(rng, (fan_in, fan_out), fan_in))
            p.add(f"{name}_b", uniform_init(rng, (fan_out,), fan_in))

        p.add("embed", uniform_init(rng, (NUM_ELEMENTS, w), w))
        for l in range(layers):
            lin(f"filter{l}_fc1", rbf.num_centers, w)
            lin(f"filter{l}_fc2", w, w)
        lin("readout_fc1", w, w)
        lin("readout_fc2", w, 1)
        return cls(width=width, layers=layers, rbf=rbf, params=p)

    def hyperparameters(self) -> dict:
        return {
            "width": self.width,
            "layers": self.layers,
            "rbf_num_centers": self.rbf.num_centers,
            "rbf_d_max": self.rbf.d_max,
            "rbf_gamma": self.rbf.gamma,
        }


def _mlp(p: ParameterStore, name: str, x: Tensor) -> Tensor:
    h = ad.add(ad.matmul(x, p[f"{name}_fc1_w"]), p[f"{name}_fc1_b"])
    return ad.add(ad.matmul(ad.softplus(h), p[f"{name}_fc2_w"]), p[f"{name}_fc2_b"])


def energy_tensor(model: EnergyModel, g: MolecularGraph, R: Tensor) -> Tensor:
    """Scalar energy on the active tape; differentiable in R and parameters."""
    n = g.num_atoms
    if R.data.shape != (n, 3):
        raise ad.ShapeError(f"energy: coords {R.data.shape} for {n} atoms")
    p = model.params
    w = model.width
    K = model.rbf.num_centers

    diff = ad.sub(ad.reshape(R, (n, 1, 3)), ad.reshape(R, (1, n, 3)))
    # small epsilon keeps the diagonal (and coincident atoms) differentiable
    dist = ad.sqrt(ad.add(ad.sum_(ad.square(diff), axis=2), Tensor(1e-12)))
    centered = ad.sub(ad.reshape(dist, (n, n, 1)), Tensor(model.rbf.centers.reshape(1, 1, K)))
    rbf = ad.exp(ad.scale(ad.square(centered), -model.rbf.width))
    rbf2d = ad.reshape(rbf, (n * n, K))

    offdiag = (1.0 - np.eye(n)).reshape(n, n, 1)
    x = ad.gather_rows(p["embed"], g.atom_types)
    for l in range(model.layers):
        filt = ad.reshape(_mlp(p, f"filter{l}", rbf2d), (n, n, w))
        msg = ad.mul(ad.mul(ad.reshape(x, (1, n, w)), filt), Tensor(offdiag))
        x = ad.add(x, ad.ordered_sum(msg, axis=1))
    pooled = ad.ordered_sum(x, axis=0)
    return ad.reshape(_mlp(p, "readout", ad.reshape(pooled, (1, w))), ())


def energy(model: EnergyModel, g: MolecularGraph, R: np.ndarray | Conformation) -> float:
    coords = R.coords if isinstance(R, Conformation) else np.asarray(R, dtype=np.float64)
    with ad.no_grad():
        return float(energy_tensor(model, g, Tensor(coords)).data)


def energy_gradient(
    model: EnergyModel, g: MolecularGraph, R: np.ndarray | Conformation
) -> np.ndarray:
    """d energy / d coordinates via the reverse pass, shape (n, 3)."""
    coords = R.coords if isinstance(R, Conformation) else np.asarray(R, dtype=np.float64)
    with Tape():
        Rt = Tensor(coords)
        e = energy_tensor(model, g, Rt)
        (grad,) = ad.grad(e, [Rt])
    return grad.data.copy()


# ---------------------------------------------------------------------------
# Contrastive objective: logistic discrimination of data against flow
# samples, with the flow density cancelled analytically.


def nce_loss_items(
    model: EnergyModel,
    data: list[tuple[MolecularGraph, np.ndarray]],
    noise: list[tuple[MolecularGraph, np.ndarray]],
) -> Tensor:
    """softplus(E) averaged over data plus softplus(-E) averaged over noise."""
    if not data or not noise:
        raise ValueError("both data and noise sets must be nonempty")
    e_data = [energy_tensor(model, g, Tensor(np.asarray(R, float))) for g, R in data]
    e_noise = [energy_tensor(model, g, Tensor(np.asarray(R, float))) for g, R in noise]
    stack_d = ad.concat([ad.reshape(e, (1,)) for e in e_data], axis=0)
    stack_n = ad.concat([ad.reshape(e, (1,)) for e in e_noise], axis=0)
    loss = ad.add(
        ad.mean_(ad.softplus(stack_d)),
        ad.mean_(ad.softplus(ad.negate(stack_n))),
    )
    ad.require_finite(loss, "nce_loss")
    return loss


def nce_loss(
    model: EnergyModel,
    g: MolecularGraph,
    data_confs: list[Conformation | np.ndarray],
    noise_confs: list[Conformation | np.ndarray],
) -> Tensor:
    """Single-graph form of the contrastive objective."""

    def coords(c):
        return c.coords if isinstance(c, Conformation) else np.asarray(c, float)

    return nce_loss_items(
        model,
        [(g, coords(c)) for c in data_confs],
        [(g, coords(c)) for c in noise_confs],
    )


@dataclass
class EtmTrainConfig:
    batch_size: int = 384
    lr: float = 1e-3
    max_steps: int = 1000
    noise_per_data: int = 1
    seed: int = 0
    checkpoint_dir: str | None = None
    checkpoint_every: int = 0
    history_path: str | None = None


class EtmTrainingDiverged(RuntimeError):
    def __init__(self, message, step, checkpoint_path=None):
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path


def train_etm(
    model: EnergyModel,
    flow,
    dataset: list[MoleculeRecord],
    cfg: EtmTrainConfig,
    assembly_cfg=None,
) -> tuple[EnergyModel, list[tuple[int, float]]]:
    """Contrastive training against fresh flow-pipeline samples.

    The flow stays frozen. Each step pairs ``batch_size`` data conformations
    with ``noise_per_data`` freshly assembled flow samples per data point,
    grouped per molecule so flow sampling stays batched.
    """
    from .flow import sample_distances_array
    from .geometry import AssemblyConfig, assemble, clamp_distances
    from .molgraph import expand_graph, is_expanded

    assembly_cfg = assembly_cfg or AssemblyConfig()
    items: list[tuple[int, MolecularGraph, np.ndarray]] = []
    graphs_by_rec: dict[int, MolecularGraph] = {}
    for ri, rec in enumerate(dataset):
        ge = rec.graph if is_expanded(rec.graph) else expand_graph(rec.graph)
        graphs_by_rec[ri] = ge
        for conf in rec.conformations:
            items.append((ri, ge, conf.coords))
    if not items and cfg.max_steps > 0:
        raise ValueError("dataset has no conformations")

    rng = np.random.default_rng([int(cfg.seed), 205])
    params = model.params
    history: list[tuple[int, float]] = []
    last_good = params.copy_values()

    def checkpoint(tag):
        if cfg.checkpoint_dir is None:
            return None
        from pathlib import Path

        path = Path(cfg.checkpoint_dir) / f"etm_{tag}.ckpt"
        save_checkpoint(path, params, model.hyperparameters(), cfg.seed)
        return path

    for step in range(1, cfg.max_steps + 1):
        take = rng.integers(0, len(items), size=cfg.batch_size)
        data = [(items[i][1], items[i][2]) for i in take]

        # group noise generation by molecule so each flow call is batched
        counts: dict[int, int] = {}
        for i in take:
            ri = items[i][0]
            counts[ri] = counts.get(ri, 0) + cfg.noise_per_data
        noise: list[tuple[MolecularGraph, np.ndarray]] = []
        for ri in sorted(counts):
            gref = graphs_by_rec[ri]
            draw_rng = np.random.default_rng([int(cfg.seed), 206, step, ri])
            ds = sample_distances_array(flow, gref, counts[ri], draw_rng)
            for row in ds:
                conf = assemble(
                    clamp_distances(row, assembly_cfg.distance_floor),
                    gref,
                    assembly_cfg,
                    rng=draw_rng,
                )
                noise.append((gref, conf.coords))
        try:
            with Tape():
                loss = nce_loss_items(model, data, noise)
                grads = ad.grad(loss, params.tensors())
            adam_step(params, dict(zip(params.names(), grads)), lr=cfg.lr)
        except (ad.NonFiniteError, OptimizationError) as exc:
            params.load_values(last_good)
            path = checkpoint("last_good")
            raise EtmTrainingDiverged(
                f"energy training diverged at step {step}: {exc}", step, path
            ) from exc
        history.append((step, float(loss.data)))
        last_good = params.copy_values()
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            checkpoint(f"step{step:06d}")
    checkpoint("final")
    if cfg.history_path:
        from .flow import _write_history

        _write_history(cfg.history_path, history)
    return model, history
