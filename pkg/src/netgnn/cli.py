"""Batch command-line entry point.

Subcommands: simulate, train, eval, optimize, whatif (add-users | add-link |
link-failures). A JSON config file can supply any flag's value; explicit
flags override it, and unknown config keys are rejected. Exit codes: 0
success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataio, netsim, optimize as opt, topologies, training
from . import model as mdl
from .errors import ConfigError, DataError, NetgnnError, NumericError
from .graph import random_routing_variants, shortest_path_routing
from .traffic import generate_tm

# defaults applied after merging CLI flags with the config file
_DEFAULTS: dict[str, dict] = {
    "simulate": {
        "topology": "random", "nodes": 8, "extra_edges": None, "topo_seed": None,
        "capacity": 1.0, "routings": 10, "ti": "10", "samples": 1,
        "duration": 16000.0, "warmup": 1000.0, "buffer": 32, "size_dist": "exp",
        "prop_delay": 0.0, "limit": None, "workers": None, "seed": 0, "out": None,
    },
    "train": {
        "data": None, "target": "delay", "steps": 1000, "batch": 32,
        "lr": 0.001, "lr_after": 0.0003, "lr_switch": 60000, "l2": 0.1,
        "eval_every": 1000, "path_dim": 32, "link_dim": 16, "iterations": 8,
        "dropout": 0.5, "transfer_from": None, "seed": 0, "out": None,
    },
    "eval": {
        "ckpt": None, "data": None, "mc": 50, "seed": 0, "out": None,
    },
    "optimize": {
        "ckpt": None, "objective": "mean-delay", "candidates": 100,
        "include_sp": False, "topology": "random", "nodes": 8, "extra_edges": None,
        "topo_seed": None, "capacity": 1.0, "ti": "10", "tm_seed": None,
        "sla_pairs": None, "sla_bound": None, "mc": 50, "verify": False,
        "seed": 0, "out": None,
    },
    "whatif": {
        "mode": None, "ckpt": None, "objective": "mean-delay",
        "topology": "random", "nodes": 8, "extra_edges": None, "topo_seed": None,
        "capacity": 1.0, "ti": "10", "tm_seed": None, "candidates": 20,
        "node_order": None, "factor": 2.5, "bound": None,
        "pairs": "all", "use_sim": False, "duration": 16000.0, "warmup": 1000.0,
        "failures": 1, "trials": 10, "mc": 50, "seed": 0, "out": None,
    },
}


def _parse_ti_list(text: str) -> list[float]:
    text = str(text)
    if ":" in text:
        lo, hi = text.split(":", 1)
        return [float(v) for v in range(int(lo), int(hi) + 1)]
    if "," in text:
        return [float(v) for v in text.split(",")]
    return [float(text)]


def _parse_pair_list(text: str) -> list[tuple[int, int]]:
    pairs = []
    for chunk in text.split(","):
        a, b = chunk.strip().split("-")
        pairs.append((int(a), int(b)))
    return pairs


def _merge_config(args: argparse.Namespace, command: str) -> argparse.Namespace:
    defaults = _DEFAULTS[command]
    file_values = {}
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        with open(args.config, "r", encoding="utf-8") as f:
            try:
                file_values = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, fallback in defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, file_values.get(key, fallback))
    return args


def _build_topology(args):
    if args.topology == "nsf":
        return topologies.nsf_topology(capacity=args.capacity)
    if args.topology != "random":
        raise ConfigError("topology must be 'nsf' or 'random'")
    nodes = int(args.nodes)
    extra = args.extra_edges if args.extra_edges is not None else max(2, nodes // 2)
    topo_seed = args.topo_seed if args.topo_seed is not None else int(args.seed)
    return topologies.random_topology(nodes, int(extra), int(topo_seed),
                                      capacity=args.capacity)


def _derived_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(key))
               .generate_state(1, np.uint64)[0])


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise ConfigError(f"--{name.replace('_', '-')} is required")


def _objective(text: str) -> opt.Objective:
    return opt.Objective(text.replace("-", "_"))


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    _require(args, "out")
    topo = _build_topology(args)
    routing_seed = _derived_seed(args.seed, 1)
    schemes = random_routing_variants(topo, int(args.routings), routing_seed)
    config = netsim.SimConfig(
        duration=float(args.duration), warmup=float(args.warmup),
        buffer_packets=int(args.buffer), packet_size_dist=args.size_dist,
        prop_delay=float(args.prop_delay),
    )
    ti_list = _parse_ti_list(args.ti)
    samples = netsim.generate_dataset(
        topo, schemes, ti_list, int(args.samples), config, int(args.seed),
        limit=args.limit if args.limit is None else int(args.limit),
        workers=args.workers if args.workers is None else int(args.workers),
    )
    records = [dataio.record_from_sample(s) for s in samples]
    count = dataio.write_dataset(records, args.out)
    if not records:
        raise DataError("no samples were produced")
    delays = np.concatenate([r.delay for r in records])
    drops = sum(int(r.dropped.sum()) for r in records)
    print(f"wrote {count} samples to {args.out}")
    print(f"delay mean={delays.mean():.6f} min={delays.min():.6f} "
          f"max={delays.max():.6f} dropped_packets={drops}")
    return 0


def _model_config(args) -> mdl.ModelConfig:
    return mdl.ModelConfig(
        path_state_dim=int(args.path_dim), link_state_dim=int(args.link_dim),
        iterations=int(args.iterations), dropout_rate=float(args.dropout),
    )


def cmd_train(args) -> int:
    _require(args, "data", "out")
    records = dataio.read_dataset(args.data)
    cfg = training.TrainConfig(
        total_steps=int(args.steps), batch_size=int(args.batch), lr=float(args.lr),
        lr_after=float(args.lr_after), lr_switch_step=int(args.lr_switch),
        l2_lambda=float(args.l2), eval_every=int(args.eval_every), seed=int(args.seed),
    )
    os.makedirs(args.out, exist_ok=True)
    if args.transfer_from:
        if args.target != "jitter":
            raise ConfigError("--transfer-from retargets a delay model to jitter")
        result = training.transfer_to_jitter(args.transfer_from, records, cfg,
                                             out_dir=args.out)
    else:
        result = training.train(records, _model_config(args), cfg,
                                target=args.target, out_dir=args.out)
    final_mse = result.loss_curve[-1][2]
    print(f"trained {cfg.total_steps} steps; final smoothed mse {final_mse:.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    _require(args, "ckpt", "data")
    if not os.path.exists(args.ckpt):
        raise DataError(f"no such checkpoint: {args.ckpt}")
    records = dataio.read_dataset(args.data)
    report = training.evaluate(args.ckpt, records, n_mc=int(args.mc), seed=int(args.seed))
    print(report.summary_text(), end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        dataio.atomic_write_text(os.path.join(args.out, "summary.txt"),
                                 report.summary_text())
        dataio.atomic_write_text(os.path.join(args.out, "residuals.csv"),
                                 report.residuals_csv())
    return 0


def _topology_and_tm(args):
    topo = _build_topology(args)
    ti = _parse_ti_list(args.ti)
    if len(ti) != 1:
        raise ConfigError("this subcommand takes a single --ti value")
    tm_seed = args.tm_seed if args.tm_seed is not None else _derived_seed(args.seed, 2)
    tm = generate_tm(topo.node_count, ti[0], int(tm_seed))
    return topo, tm


def _candidate_schemes(topo, count: int, seed: int, include_sp: bool):
    schemes = [shortest_path_routing(topo)] if include_sp else []
    remaining = count - len(schemes)
    if remaining > 0:
        schemes += random_routing_variants(topo, remaining, _derived_seed(seed, 3))
    return schemes


def cmd_optimize(args) -> int:
    _require(args, "ckpt")
    if not os.path.exists(args.ckpt):
        raise DataError(f"no such checkpoint: {args.ckpt}")
    topo, tm = _topology_and_tm(args)
    candidates = _candidate_schemes(topo, int(args.candidates), int(args.seed),
                                    bool(args.include_sp))
    objective = _objective(args.objective)
    if args.sla_pairs:
        _require(args, "sla_bound")
        sla = opt.SlaSpec(pairs=tuple(_parse_pair_list(args.sla_pairs)),
                          delay_bound=float(args.sla_bound))
        report = opt.optimize_with_sla(args.ckpt, topo, tm, candidates, sla, objective,
                                       seed=int(args.seed), n_mc=int(args.mc),
                                       verify_winner=bool(args.verify))
    else:
        report = opt.evaluate_candidates(args.ckpt, topo, tm, candidates, objective,
                                         seed=int(args.seed), n_mc=int(args.mc),
                                         verify_winner=bool(args.verify))
    print(report.summary_text(), end="")
    if report.winner_sim_objective is not None:
        print(f"simulated winner objective: {report.winner_sim_objective:.6f}")
    if args.out:
        dataio.atomic_write_text(args.out, report.to_csv())
    return 0


def cmd_whatif(args) -> int:
    _require(args, "mode")
    topo, tm = _topology_and_tm(args)
    objective = _objective(args.objective)

    if args.mode == "add-users":
        _require(args, "ckpt", "node_order", "bound")
        candidates = _candidate_schemes(topo, int(args.candidates), int(args.seed), True)
        order = [int(x) for x in str(args.node_order).split(",")]
        report = opt.whatif_add_users(args.ckpt, topo, candidates, tm, order,
                                      float(args.factor), float(args.bound),
                                      seed=int(args.seed), objective=objective,
                                      n_mc=int(args.mc))
        breaking = report.first_breaking if report.first_breaking is not None else "never"
        print(f"first user over the bound: {breaking}")
        if args.out:
            dataio.atomic_write_text(args.out, report.to_csv())
        return 0

    if args.mode == "add-link":
        if not args.use_sim:
            _require(args, "ckpt")
        if args.pairs == "all":
            linked = {(l.src, l.dst) for l in topo.links}
            pairs = [(a, b) for a in range(topo.node_count)
                     for b in range(a + 1, topo.node_count)
                     if (a, b) not in linked and (b, a) not in linked]
        else:
            pairs = _parse_pair_list(args.pairs)
        sim_config = netsim.SimConfig(duration=float(args.duration),
                                      warmup=float(args.warmup)) if args.use_sim else None
        report = opt.whatif_add_link(args.ckpt, topo, tm, pairs, objective,
                                     seed=int(args.seed),
                                     candidates_per_option=int(args.candidates),
                                     n_mc=int(args.mc), use_simulator=bool(args.use_sim),
                                     sim_config=sim_config)
        print(report.summary_text(), end="")
        if args.out:
            dataio.atomic_write_text(args.out, report.to_csv())
        return 0

    if args.mode == "link-failures":
        _require(args, "ckpt")
        report = opt.link_failure_sweep(args.ckpt, topo, tm, int(args.failures),
                                        int(args.trials), int(args.candidates),
                                        seed=int(args.seed), objective=objective,
                                        n_mc=int(args.mc))
        print(f"mean optimized {objective.kind}: {report.mean_objective:.6f} "
              f"(max {report.max_objective:.6f}) over {len(report.trials)} trials")
        if args.out:
            dataio.atomic_write_text(args.out, report.to_csv())
        return 0

    raise ConfigError(f"unknown what-if mode {args.mode!r}")


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--config")


def _add_topology_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--topology", choices=["nsf", "random"])
    p.add_argument("--nodes", type=int)
    p.add_argument("--extra-edges", dest="extra_edges", type=int)
    p.add_argument("--topo-seed", dest="topo_seed", type=int)
    p.add_argument("--capacity", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="netgnn")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a labeled dataset")
    _add_topology_flags(p)
    p.add_argument("--routings", type=int)
    p.add_argument("--ti")
    p.add_argument("--samples", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--warmup", type=float)
    p.add_argument("--buffer", type=int)
    p.add_argument("--size-dist", dest="size_dist", choices=["exp", "fixed"])
    p.add_argument("--prop-delay", dest="prop_delay", type=float)
    p.add_argument("--limit", type=int)
    p.add_argument("--workers", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a delay or jitter model")
    p.add_argument("--data")
    p.add_argument("--target", choices=["delay", "jitter"])
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-after", dest="lr_after", type=float)
    p.add_argument("--lr-switch", dest="lr_switch", type=int)
    p.add_argument("--l2", type=float)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--path-dim", dest="path_dim", type=int)
    p.add_argument("--link-dim", dest="link_dim", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--transfer-from", dest="transfer_from")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--mc", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("optimize", help="pick the best routing from candidates")
    p.add_argument("--ckpt")
    p.add_argument("--objective", choices=["mean-delay", "max-delay",
                                           "mean-jitter", "max-jitter"])
    p.add_argument("--candidates", type=int)
    p.add_argument("--include-sp", dest="include_sp", action="store_const", const=True)
    _add_topology_flags(p)
    p.add_argument("--ti")
    p.add_argument("--tm-seed", dest="tm_seed", type=int)
    p.add_argument("--sla-pairs", dest="sla_pairs")
    p.add_argument("--sla-bound", dest="sla_bound", type=float)
    p.add_argument("--mc", type=int)
    p.add_argument("--verify", action="store_const", const=True)
    _add_common(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("whatif", help="what-if analyses")
    p.add_argument("mode", nargs="?", choices=["add-users", "add-link", "link-failures"])
    p.add_argument("--ckpt")
    p.add_argument("--objective", choices=["mean-delay", "max-delay",
                                           "mean-jitter", "max-jitter"])
    _add_topology_flags(p)
    p.add_argument("--ti")
    p.add_argument("--tm-seed", dest="tm_seed", type=int)
    p.add_argument("--candidates", type=int)
    p.add_argument("--node-order", dest="node_order")
    p.add_argument("--factor", type=float)
    p.add_argument("--bound", type=float)
    p.add_argument("--pairs")
    p.add_argument("--use-sim", dest="use_sim", action="store_const", const=True)
    p.add_argument("--duration", type=float)
    p.add_argument("--warmup", type=float)
    p.add_argument("--failures", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--mc", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_whatif)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _merge_config(args, args.command)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except NetgnnError as exc:  # catch-all for subclasses added later
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
