"""Two-stage conformation sampling.

Stage one draws a latent, pushes it through the distance flow, clamps, and
assembles coordinates by gradient ascent. Stage two (optional) runs
overdamped Langevin updates on a combined objective: the learned energy
plus a Monte-Carlo estimate of the negative log of the coordinate
likelihood under the flow, obtained by log-mean-exp over a handful of
fresh distance draws. Distance draws are treated as constants when
differentiating; the partition term of the coordinate conditional is
treated as constant as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .energy import EnergyModel, energy_tensor
from .flow import FlowModel, sample_distances, sample_distances_array, seed_key
from .geometry import (
    AssemblyConfig,
    _objective_and_grad,
    assemble,
    clamp_distances,
    edge_alphas,
)
from .molgraph import Conformation, MolecularGraph


@dataclass
class SamplerConfig:
    assembly: AssemblyConfig = field(default_factory=AssemblyConfig)
    langevin_steps: int = 100
    langevin_step_size: float = 1e-3
    mc_samples: int = 8
    use_etm: bool = True

    def __post_init__(self):
        if self.langevin_steps < 0:
            raise ValueError("langevin_steps must be >= 0")
        if self.langevin_step_size <= 0:
            raise ValueError("langevin_step_size must be positive")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")


@dataclass
class LangevinResult:
    conformation: Conformation
    aborted: bool
    steps_run: int


@dataclass
class SampleResult:
    conformation: Conformation
    distances: np.ndarray          # raw flow output (unclamped)
    stage_one: Conformation
    langevin_aborted: bool = False


def _flow_term(
    R: np.ndarray,
    d_samples: np.ndarray,
    g: MolecularGraph,
    cfg: AssemblyConfig,
    want_grad: bool,
) -> tuple[float, np.ndarray | None]:
    """-log mean_k exp(a_k(R)) over fixed distance draws, plus its gradient.

    a_k is the unnormalized coordinate log-density at target d_k; the
    gradient is the softmax-weighted combination of the per-draw gradients.
    """
    K = d_samples.shape[0]
    alphas = edge_alphas(g, cfg)
    Rb = np.broadcast_to(R, (K,) + R.shape)
    vals, grads = _objective_and_grad(
        Rb.copy(), clamp_distances(d_samples, cfg.distance_floor), g, alphas, cfg.norm_epsilon
    )
    m = np.max(vals)
    w = np.exp(vals - m)
    value = -(m + np.log(np.mean(w)))
    if not want_grad:
        return float(value), None
    soft = w / np.sum(w)
    grad = -np.sum(soft[:, None, None] * grads, axis=0)
    return float(value), grad


def _tilted_value_and_grad(
    flow: FlowModel,
    etm: EnergyModel | None,
    g: MolecularGraph,
    R: np.ndarray,
    d_samples: np.ndarray,
    cfg: SamplerConfig,
    want_grad: bool = True,
) -> tuple[float, np.ndarray | None]:
    value, grad = _flow_term(R, d_samples, g, cfg.assembly, want_grad)
    if cfg.use_etm:
        if etm is None:
            raise ValueError("use_etm is set but no energy model was given")
        if want_grad:
            with Tape():
                Rt = Tensor(R)
                e = energy_tensor(etm, g, Rt)
                (ge,) = ad.grad(e, [Rt])
            value += float(e.data)
            grad = grad + ge.data
        else:
            with ad.no_grad():
                value += float(energy_tensor(etm, g, Tensor(R)).data)
    return value, grad


def tilted_energy(
    flow: FlowModel,
    etm: EnergyModel | None,
    g: MolecularGraph,
    R: np.ndarray | Conformation,
    mc_samples: int = 8,
    seed: int = 0,
    use_etm: bool = True,
    assembly: AssemblyConfig | None = None,
) -> float:
    """Combined energy at R with freshly drawn distance samples."""
    coords = R.coords if isinstance(R, Conformation) else np.asarray(R, dtype=np.float64)
    cfg = SamplerConfig(
        assembly=assembly or AssemblyConfig(), mc_samples=mc_samples, use_etm=use_etm
    )
    rng = np.random.default_rng(seed_key(seed, 502))
    d_samples = sample_distances_array(flow, g, mc_samples, rng)
    value, _ = _tilted_value_and_grad(flow, etm, g, coords, d_samples, cfg, want_grad=False)
    return value


def tilted_energy_fixed(
    flow: FlowModel,
    etm: EnergyModel | None,
    g: MolecularGraph,
    R: np.ndarray | Conformation,
    d_samples: np.ndarray,
    use_etm: bool = True,
    assembly: AssemblyConfig | None = None,
    want_grad: bool = True,
) -> tuple[float, np.ndarray | None]:
    """Deterministic variant with caller-supplied distance draws."""
    coords = R.coords if isinstance(R, Conformation) else np.asarray(R, dtype=np.float64)
    cfg = SamplerConfig(
        assembly=assembly or AssemblyConfig(),
        mc_samples=max(1, int(np.asarray(d_samples).shape[0])),
        use_etm=use_etm,
    )
    return _tilted_value_and_grad(
        flow, etm, g, coords, np.asarray(d_samples, dtype=np.float64), cfg, want_grad
    )


def langevin_dynamics(
    grad_fn,
    R0: np.ndarray,
    steps: int,
    step_size: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, bool, int]:
    """R <- R - (eps/2) grad(R) + sqrt(eps) * standard-normal noise.

    Returns (final state, aborted, steps completed); on a non-finite state
    the last finite iterate is returned with the abort flag set.
    """
    R = np.array(R0, dtype=np.float64)
    half = 0.5 * step_size
    sig = np.sqrt(step_size)
    for k in range(steps):
        g = grad_fn(R, k)
        cand = R - half * g + sig * rng.standard_normal(R.shape)
        if not np.all(np.isfinite(cand)):
            return R, True, k
        R = cand
    return R, False, steps


def langevin_refine(
    flow: FlowModel,
    etm: EnergyModel | None,
    g: MolecularGraph,
    R0: np.ndarray | Conformation,
    cfg: SamplerConfig,
    rng: np.random.Generator | int = 0,
) -> LangevinResult:
    """Stochastic refinement of a stage-one conformation.

    Fresh distance draws enter the objective at every iteration; draws are
    never differentiated through.
    """
    coords = R0.coords if isinstance(R0, Conformation) else np.asarray(R0, dtype=np.float64)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(seed_key(rng, 503))

    def grad_fn(R, k):
        d_samples = sample_distances_array(flow, g, cfg.mc_samples, rng)
        _, grad = _tilted_value_and_grad(flow, etm, g, R, d_samples, cfg, want_grad=True)
        return grad

    final, aborted, steps_run = langevin_dynamics(
        grad_fn, coords, cfg.langevin_steps, cfg.langevin_step_size, rng
    )
    return LangevinResult(Conformation(final), aborted, steps_run)


def sample_conformation(
    flow: FlowModel,
    etm: EnergyModel | None,
    g: MolecularGraph,
    cfg: SamplerConfig,
    seed=0,
) -> SampleResult:
    """Full two-stage pipeline for one conformation; deterministic in seed.

    With ``use_etm`` off the result is bit-identical to clamping a flow
    draw and assembling it with the same seed: stage two is skipped.
    """
    d_raw = sample_distances(flow, g, 1, seed)[0]
    d = clamp_distances(d_raw, cfg.assembly.distance_floor)
    stage_one = assemble(d, g, cfg.assembly, seed=seed)
    if not cfg.use_etm or cfg.langevin_steps == 0:
        return SampleResult(stage_one, d_raw, stage_one, langevin_aborted=False)
    res = langevin_refine(
        flow, etm, g, stage_one, cfg, rng=np.random.default_rng(seed_key(seed, 503))
    )
    return SampleResult(res.conformation, d_raw, stage_one, langevin_aborted=res.aborted)
