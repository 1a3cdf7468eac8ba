"""Command-line surface: synth, preprocess, train-flow, train-etm, sample, eval.

Every command is a pure function of (config file, CLI overrides, input
files, master seed); reruns reproduce outputs byte-for-byte. Timestamps go
only to a ``<output>.log`` sidecar.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    RunConfig,
    config_to_dict,
    load_config,
)
from .dynamics import DynamicsNet
from .energy import EnergyModel, EtmTrainConfig, RbfExpansion, train_etm
from .flow import FlowModel, FlowTrainConfig, train_flow
from .geometry import AssemblyConfig, read_xyz, write_xyz
from .metrics import MmdConfig, build_report, evaluate_molecule, filtered_edge_indices, mmd_report
from .molgraph import (
    ELEMENTS,
    Conformation,
    DatasetError,
    expand_graph,
    parse_dataset,
)
from .sampler import SamplerConfig, sample_conformation
from .synth import ToySpec, cmd_synth


def _write_sidecar(output: str | Path, command: str, cfg: RunConfig | None, extra: dict):
    path = Path(str(output) + ".log")
    path.parent.mkdir(parents=True, exist_ok=True)
    info = {
        "command": command,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "config": config_to_dict(cfg) if cfg is not None else None,
        **extra,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    """CLI flag > config file > default, per key."""
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "jobs", None) is not None:
        cfg = replace(cfg, jobs=args.jobs)
    if getattr(args, "delta", None) is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, delta=args.delta))
    if getattr(args, "delta_sweep", None) is not None:
        sweep = tuple(float(x) for x in args.delta_sweep.split(",") if x.strip())
        cfg = replace(cfg, eval=replace(cfg.eval, delta_sweep=sweep))
    if getattr(args, "use_etm", None) is not None:
        cfg = replace(cfg, sampler=replace(cfg.sampler, use_etm=args.use_etm == "true"))
    if getattr(args, "steps", None) is not None:
        cfg = replace(
            cfg,
            train_flow=replace(cfg.train_flow, max_steps=args.steps),
            train_etm=replace(cfg.train_etm, max_steps=args.steps),
        )
    if getattr(args, "checkpoint_dir", None) is not None:
        cfg = replace(cfg, checkpoint_dir=args.checkpoint_dir)
    if getattr(args, "dataset", None) is not None:
        cfg = replace(cfg, dataset=args.dataset)
    return cfg


def _build_flow(cfg: RunConfig) -> FlowModel:
    net = DynamicsNet.create(
        width=cfg.flow.net.width,
        layers=cfg.flow.net.layers,
        seed=cfg.seed,
        edge_embed_at_t0=cfg.flow.net.edge_embed_at_t0,
    )
    return FlowModel(
        net=net,
        t0=cfg.flow.t0,
        t1=cfg.flow.t1,
        steps=cfg.flow.steps,
        scheme=cfg.flow.scheme,
        trace_mode=cfg.flow.trace_mode,
        hutchinson_probes=cfg.flow.hutchinson_probes,
    )


def flow_model_from_checkpoint(path: str | Path) -> FlowModel:
    store, manifest = load_checkpoint(path)
    hp = manifest["hyperparameters"]
    net_hp = hp.get("net", {})
    net = DynamicsNet.create(
        width=net_hp.get("width", 128),
        layers=net_hp.get("layers", 3),
        seed=manifest.get("rng_seed", 0),
        edge_embed_at_t0=net_hp.get("edge_embed_at_t0", False),
    )
    net.params.load_values(store.copy_values())
    net.params.step_count = store.step_count
    return FlowModel(
        net=net,
        t0=hp.get("t0", 0.0),
        t1=hp.get("t1", 1.0),
        steps=hp.get("steps", 32),
        scheme=hp.get("scheme", "rk4"),
        trace_mode=hp.get("trace_mode", "exact"),
        hutchinson_probes=hp.get("hutchinson_probes", 8),
    )


def energy_model_from_checkpoint(path: str | Path) -> EnergyModel:
    store, manifest = load_checkpoint(path)
    hp = manifest["hyperparameters"]
    model = EnergyModel.create(
        width=hp.get("width", 128),
        layers=hp.get("layers", 6),
        rbf=RbfExpansion(
            num_centers=hp.get("rbf_num_centers", 64),
            d_max=hp.get("rbf_d_max", 10.0),
            gamma=hp.get("rbf_gamma"),
        ),
        seed=manifest.get("rng_seed", 0),
    )
    model.params.load_values(store.copy_values())
    model.params.step_count = store.step_count
    return model


def _etm_from_config(cfg: RunConfig) -> EnergyModel:
    return EnergyModel.create(
        width=cfg.etm.width,
        layers=cfg.etm.layers,
        rbf=RbfExpansion(
            num_centers=cfg.etm.rbf_centers,
            d_max=cfg.etm.rbf_d_max,
            gamma=cfg.etm.rbf_gamma,
        ),
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# Subcommands.


def run_synth(args) -> int:
    spec = ToySpec(
        family=args.family,
        num_molecules=args.num_molecules,
        atoms_range=(args.atoms_min, args.atoms_max),
        mode_separation=args.mode_separation,
        conformers_per_molecule=args.conformers,
        seed=args.seed if args.seed is not None else 0,
        coord_noise=args.coord_noise,
    )
    records = cmd_synth(spec, args.out)
    _write_sidecar(args.out, "synth", None, {"molecules": len(records), "spec": vars(args)})
    print(f"wrote {len(records)} molecules to {args.out}")
    return 0


def run_preprocess(args) -> int:
    records = parse_dataset(args.dataset)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for rec in records:
            ge = expand_graph(rec.graph)
            fh.write(
                json.dumps(
                    {
                        "id": rec.id,
                        "atoms": [ELEMENTS[int(a)] for a in rec.graph.atom_types],
                        "edges": [[u, v, b] for u, v, b in ge.edges()],
                    },
                    sort_keys=True,
                )
            )
            fh.write("\n")
    _write_sidecar(out, "preprocess", None, {"molecules": len(records)})
    print(f"wrote expanded edge lists for {len(records)} molecules to {out}")
    return 0


def run_train_flow(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if cfg.dataset is None:
        raise ConfigError("no dataset given (config key 'dataset' or --dataset)")
    records = parse_dataset(cfg.dataset)
    model = _build_flow(cfg)
    if cfg.train_flow.train_trace_mode:
        model.trace_mode = cfg.train_flow.train_trace_mode
    history_path = args.history or str(Path(cfg.checkpoint_dir) / "flow_history.csv")
    tcfg = FlowTrainConfig(
        batch_size=cfg.train_flow.batch_size,
        lr=cfg.train_flow.lr,
        max_steps=cfg.train_flow.max_steps,
        seed=cfg.seed,
        checkpoint_dir=cfg.checkpoint_dir,
        checkpoint_every=cfg.train_flow.checkpoint_every,
        history_path=history_path,
    )
    _, history = train_flow(model, records, tcfg)
    final = Path(cfg.checkpoint_dir) / "flow_final.ckpt"
    _write_sidecar(final, "train-flow", cfg, {"steps_run": len(history)})
    print(f"trained flow for {len(history)} steps; checkpoint at {final}")
    return 0


def run_train_etm(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if cfg.dataset is None:
        raise ConfigError("no dataset given (config key 'dataset' or --dataset)")
    records = parse_dataset(cfg.dataset)
    flow = flow_model_from_checkpoint(args.flow_checkpoint)
    model = _etm_from_config(cfg)
    history_path = args.history or str(Path(cfg.checkpoint_dir) / "etm_history.csv")
    tcfg = EtmTrainConfig(
        batch_size=cfg.train_etm.batch_size,
        lr=cfg.train_etm.lr,
        max_steps=cfg.train_etm.max_steps,
        noise_per_data=cfg.train_etm.noise_per_data,
        seed=cfg.seed,
        checkpoint_dir=cfg.checkpoint_dir,
        history_path=history_path,
    )
    _, history = train_etm(model, flow, records, tcfg, assembly_cfg=cfg.assembly)
    final = Path(cfg.checkpoint_dir) / "etm_final.ckpt"
    _write_sidecar(final, "train-etm", cfg, {"steps_run": len(history)})
    print(f"trained energy model for {len(history)} steps; checkpoint at {final}")
    return 0


def _sampler_config(cfg: RunConfig) -> SamplerConfig:
    return SamplerConfig(
        assembly=cfg.assembly,
        langevin_steps=cfg.sampler.langevin_steps,
        langevin_step_size=cfg.sampler.langevin_step_size,
        mc_samples=cfg.sampler.mc_samples,
        use_etm=cfg.sampler.use_etm,
    )


def _sample_one_molecule(task):
    (mol_id, graph, n, master_seed, flow, etm, scfg) = task
    ge = expand_graph(graph)
    out = []
    for k in range(n):
        seed = (master_seed, zlib.crc32(mol_id.encode("utf-8")), k)
        res = sample_conformation(flow, etm, ge, scfg, seed=seed)
        out.append((k, res))
    return mol_id, ge, out


def run_sample(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if cfg.dataset is None:
        raise ConfigError("no dataset given (config key 'dataset' or --dataset)")
    records = {rec.id: rec for rec in parse_dataset(cfg.dataset)}
    flow = flow_model_from_checkpoint(args.flow_checkpoint)
    etm = None
    if cfg.sampler.use_etm:
        if not args.etm_checkpoint:
            raise ConfigError("sampler.use_etm is set but no --etm-checkpoint was given")
        etm = energy_model_from_checkpoint(args.etm_checkpoint)

    if args.ids == "all":
        ids = sorted(records)
    else:
        ids = sorted(x for x in args.ids.split(",") if x)
    unknown = [i for i in ids if i not in records]
    if unknown:
        raise DatasetError(f"unknown molecule ids: {unknown}")

    scfg = _sampler_config(cfg)
    tasks = [(mid, records[mid].graph, args.num, cfg.seed, flow, etm, scfg) for mid in ids]
    if cfg.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_sample_one_molecule, tasks))
    else:
        results = [_sample_one_molecule(t) for t in tasks]

    entries = []
    diags = []
    for mol_id, ge, samples in results:
        for k, res in samples:
            entries.append((mol_id, k, ge, res.conformation))
            diags.append(
                {
                    "id": mol_id,
                    "sample": k,
                    "distances": [float(x) for x in res.distances],
                    "stage_one": res.stage_one.coords.tolist(),
                    "langevin_aborted": bool(res.langevin_aborted),
                }
            )
    write_xyz(args.out, entries)
    if args.diagnostics:
        dpath = Path(args.diagnostics)
        dpath.parent.mkdir(parents=True, exist_ok=True)
        with open(dpath, "w", encoding="utf-8") as fh:
            for d in diags:
                fh.write(json.dumps(d, sort_keys=True))
                fh.write("\n")
    _write_sidecar(args.out, "sample", cfg, {"molecules": len(ids), "per_molecule": args.num})
    print(f"wrote {len(entries)} conformations to {args.out}")
    return 0


def _eval_one_molecule(task):
    (mol_id, graph, gen, ref, delta, sweep, mmd_cfg) = task
    ge = expand_graph(graph)
    return evaluate_molecule(mol_id, ge, gen, ref, delta, sweep, mmd_cfg)


def run_eval(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    reference = {rec.id: rec for rec in parse_dataset(args.reference)}
    generated: dict[str, list[tuple[int, Conformation]]] = {}
    for mol_id, sample_idx, symbols, conf in read_xyz(args.generated):
        generated.setdefault(mol_id, []).append((sample_idx, conf))

    unknown = sorted(set(generated) - set(reference))
    if unknown:
        raise DatasetError(f"generated file names unknown molecule ids: {unknown}")

    mmd_cfg = MmdConfig(
        bandwidth=cfg.eval.mmd_bandwidth,
        atom_filter=tuple(cfg.eval.atom_filter),
        unbiased=cfg.eval.mmd_unbiased,
    )
    warnings = []
    tasks = []
    for mol_id in sorted(generated):
        rec = reference[mol_id]
        gen = [c for _, c in sorted(generated[mol_id], key=lambda t: t[0])]
        ref = list(rec.conformations)
        if len(gen) != 2 * len(ref):
            warnings.append(
                f"{mol_id}: generated {len(gen)} conformations for {len(ref)} references "
                f"(coverage protocol expects twice the reference count)"
            )
        tasks.append(
            (mol_id, rec.graph, gen, ref, cfg.eval.delta, tuple(cfg.eval.delta_sweep), mmd_cfg)
        )
    if cfg.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            rows = list(pool.map(_eval_one_molecule, tasks))
    else:
        rows = [_eval_one_molecule(t) for t in tasks]

    report = build_report(rows, cfg.eval.delta, tuple(cfg.eval.delta_sweep), mmd_cfg, warnings)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if args.marginals_csv:
        _write_marginals_csv(args.marginals_csv, tasks, mmd_cfg)
    _write_sidecar(out, "eval", cfg, {"molecules": len(rows)})
    print(f"wrote report for {len(rows)} molecules to {out}")
    return 0


def _write_marginals_csv(path: str | Path, tasks, mmd_cfg: MmdConfig):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["molecule", "edge_u", "edge_v", "bond_type", "mmd_single"])
        for mol_id, graph, gen, ref, _, _, _ in tasks:
            if not gen or not ref:
                continue
            ge = expand_graph(graph)
            if filtered_edge_indices(ge, mmd_cfg.atom_filter).size == 0:
                continue
            rep = mmd_report(gen[: len(ref)], ref, ge, mmd_cfg)
            edges = ge.edges()
            for edge_idx, value in sorted(rep.single.items()):
                u, v, b = edges[edge_idx]
                writer.writerow([mol_id, u, v, b, repr(value)])


# ---------------------------------------------------------------------------
# Argument parsing.


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="JSON run-config file")
    p.add_argument("--seed", type=int, default=None, help="master seed override")
    p.add_argument("--jobs", type=int, default=None, help="molecule-level parallelism")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="confgen",
        description="Two-stage molecular conformation sampling and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a bimodal toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--family", choices=["chain", "ring-tail"], default="chain")
    p.add_argument("--num-molecules", type=int, default=100)
    p.add_argument("--atoms-min", type=int, default=4)
    p.add_argument("--atoms-max", type=int, default=6)
    p.add_argument("--mode-separation", type=float, default=0.6)
    p.add_argument("--conformers", type=int, default=8)
    p.add_argument("--coord-noise", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=run_synth)

    p = sub.add_parser("preprocess", help="dump expanded edge lists")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_preprocess)

    p = sub.add_parser("train-flow", help="train the distance flow")
    _add_common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--checkpoint-dir", default=None)
    p.add_argument("--steps", type=int, default=None, help="training step count override")
    p.add_argument("--history", default=None, help="loss history CSV path")
    p.set_defaults(func=run_train_flow)

    p = sub.add_parser("train-etm", help="train the energy model against the flow")
    _add_common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--flow-checkpoint", required=True)
    p.add_argument("--checkpoint-dir", default=None)
    p.add_argument("--steps", type=int, default=None, help="training step count override")
    p.add_argument("--history", default=None)
    p.set_defaults(func=run_train_etm)

    p = sub.add_parser("sample", help="sample conformations")
    _add_common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--flow-checkpoint", required=True)
    p.add_argument("--etm-checkpoint", default=None)
    p.add_argument("--ids", default="all", help="comma-separated molecule ids, or 'all'")
    p.add_argument("--num", type=int, default=1, help="samples per molecule")
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics", default=None, help="per-sample JSONL diagnostics path")
    p.add_argument("--use-etm", choices=["true", "false"], default=None)
    p.set_defaults(func=run_sample)

    p = sub.add_parser("eval", help="evaluate generated conformations")
    _add_common(p)
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--delta-sweep", default=None, help="comma-separated thresholds")
    p.add_argument("--marginals-csv", default=None)
    p.set_defaults(func=run_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
