"""Candidate-set routing optimization and what-if analyses.

Optimization here is exhaustive evaluation of a provided candidate set:
every candidate routing is scored by Monte-Carlo-dropout median predictions
(or analytic utilization for the baseline), ranked, and optionally verified
against the simulator.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .errors import ConfigError
from .graph import (RoutingScheme, Topology, apply_link_failures, build_topology,
                    random_routing_variants, shortest_path_routing)
from .netsim import SimConfig, simulate
from .traffic import TrafficMatrix, scale_user_demand

__all__ = [
    "Objective",
    "SlaSpec",
    "CandidateEvaluation",
    "OptimizationReport",
    "evaluate_candidates",
    "link_utilizations",
    "utilization_baseline",
    "optimize_with_sla",
    "link_failure_sweep",
    "whatif_add_users",
    "whatif_add_link",
    "FailureSweepReport",
    "UserSweepReport",
    "LinkPlacementReport",
]

OBJECTIVE_KINDS = ("mean_delay", "max_delay", "mean_jitter", "max_jitter")


@dataclass(frozen=True)
class Objective:
    kind: str

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ConfigError(f"objective must be one of {OBJECTIVE_KINDS}")

    @property
    def metric(self) -> str:
        return "delay" if self.kind.endswith("delay") else "jitter"

    @property
    def is_max(self) -> bool:
        return self.kind.startswith("max")

    def reduce(self, values: np.ndarray, axis=None) -> np.ndarray | float:
        return np.max(values, axis=axis) if self.is_max else np.mean(values, axis=axis)


@dataclass(frozen=True)
class SlaSpec:
    pairs: tuple[tuple[int, int], ...]
    delay_bound: float

    def __post_init__(self):
        if self.delay_bound <= 0:
            raise ConfigError("delay bound must be > 0")
        object.__setattr__(self, "pairs", tuple((int(s), int(d)) for s, d in self.pairs))
        for s, d in self.pairs:
            if s == d:
                raise ConfigError("SLA pairs must have distinct endpoints")


@dataclass
class CandidateEvaluation:
    index: int
    objective_median: float
    objective_lo: float
    objective_hi: float
    sla_ok: bool | None = None


@dataclass
class OptimizationReport:
    objective: Objective
    entries: list[CandidateEvaluation]            # ranked; feasible first when SLA applies
    winner_index: int | None
    infeasible: bool = False
    winner_sim_objective: float | None = None

    def entry_for(self, candidate_index: int) -> CandidateEvaluation:
        for e in self.entries:
            if e.index == candidate_index:
                return e
        raise KeyError(candidate_index)

    def to_csv(self) -> str:
        rows = ["candidate,objective_median,interval_lo,interval_hi,sla_ok"]
        for e in self.entries:
            sla = "" if e.sla_ok is None else str(e.sla_ok).lower()
            rows.append(f"{e.index},{e.objective_median!r},{e.objective_lo!r},"
                        f"{e.objective_hi!r},{sla}")
        return "\n".join(rows) + "\n"

    def summary_text(self) -> str:
        if self.infeasible:
            return "no candidate satisfies the SLA bound\n"
        e = self.entry_for(self.winner_index)
        return (f"winner: candidate {e.index}  {self.objective.kind}="
                f"{e.objective_median:.6f}  95% interval "
                f"[{e.objective_lo:.6f}, {e.objective_hi:.6f}]\n")


def _candidate_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(index,))
               .generate_state(1, np.uint64)[0])


def _load(checkpoint) -> mdl.Checkpoint:
    if isinstance(checkpoint, (str, os.PathLike)):
        return mdl.load_checkpoint(checkpoint)
    return checkpoint


def _predict_pairs(ckpt: mdl.Checkpoint, topology: Topology, tm: TrafficMatrix,
                   scheme: RoutingScheme, n_mc: int, seed: int
                   ) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int]]]:
    """Per-pair MC medians and raw samples in natural label units."""
    enc = mdl.encode_instance(topology, scheme, tm, ckpt.config)
    dist = mdl.predict_mc(ckpt.params, ckpt.config, enc, n_samples=n_mc, seed=seed)
    mean = float(ckpt.meta["label_mean"])
    std = float(ckpt.meta["label_std"])
    return mean + std * dist.median, mean + std * dist.samples, enc.pairs


def _sim_objective(topology: Topology, scheme: RoutingScheme, tm: TrafficMatrix,
                   objective: Objective, sim_config: SimConfig, seed: int) -> float:
    stats = simulate(topology, scheme, tm, sim_config, seed)
    values = stats.mean_delay if objective.metric == "delay" else stats.jitter
    return float(objective.reduce(values))


def evaluate_candidates(checkpoint, topology: Topology, tm: TrafficMatrix,
                        candidates: list[RoutingScheme], objective: Objective,
                        seed: int = 0, n_mc: int = 50, verify_winner: bool = False,
                        sim_config: SimConfig | None = None) -> OptimizationReport:
    """Rank candidates by the objective applied to per-pair MC medians.

    The 95% interval comes from reducing each dropout sample to an objective
    value. Per-candidate MC seeds derive from (seed, candidate index). With
    `verify_winner`, the winner is simulated and its measured objective
    attached to the report.
    """
    ckpt = _load(checkpoint)
    if not candidates:
        raise ConfigError("need at least one candidate")
    if ckpt.meta.get("target", "delay") != objective.metric:
        raise ConfigError(
            f"checkpoint predicts {ckpt.meta.get('target')!r}, objective needs "
            f"{objective.metric!r}")
    for scheme in candidates:
        scheme.validate(topology)

    entries = []
    for i, scheme in enumerate(candidates):
        median, samples, _ = _predict_pairs(ckpt, topology, tm, scheme, n_mc,
                                            _candidate_seed(seed, i))
        per_sample_obj = objective.reduce(samples, axis=1)
        entries.append(CandidateEvaluation(
            index=i,
            objective_median=float(objective.reduce(median)),
            objective_lo=float(np.percentile(per_sample_obj, 2.5)),
            objective_hi=float(np.percentile(per_sample_obj, 97.5)),
        ))
    entries.sort(key=lambda e: (e.objective_median, e.index))
    report = OptimizationReport(objective=objective, entries=entries,
                                winner_index=entries[0].index)
    if verify_winner:
        cfg = sim_config or SimConfig()
        report.winner_sim_objective = _sim_objective(
            topology, candidates[report.winner_index], tm, objective, cfg,
            _candidate_seed(seed, 1_000_000 + report.winner_index))
    return report


def link_utilizations(topology: Topology, tm: TrafficMatrix,
                      scheme: RoutingScheme) -> np.ndarray:
    """Analytic per-link load over capacity, rows ordered by link id."""
    link_ids = sorted(l.id for l in topology.links)
    row_of = {lid: i for i, lid in enumerate(link_ids)}
    load = np.zeros(len(link_ids), dtype=np.float64)
    for (s, d), path in scheme.paths.items():
        rate = tm.rate(s, d)
        for lid in path.link_seq:
            load[row_of[lid]] += rate
    return load / topology.capacity


def utilization_baseline(topology: Topology, tm: TrafficMatrix,
                         candidates: list[RoutingScheme],
                         objective: Objective) -> RoutingScheme:
    """Traditional comparator: min mean utilization for mean-kind objectives,
    min of the most-loaded link for max-kind; first index wins ties."""
    if not candidates:
        raise ConfigError("need at least one candidate")
    best_idx, best_score = 0, None
    for i, scheme in enumerate(candidates):
        scheme.validate(topology)
        util = link_utilizations(topology, tm, scheme)
        score = float(np.max(util) if objective.is_max else np.mean(util))
        if best_score is None or score < best_score:
            best_idx, best_score = i, score
    return candidates[best_idx]


def optimize_with_sla(checkpoint, topology: Topology, tm: TrafficMatrix,
                      candidates: list[RoutingScheme], sla: SlaSpec,
                      objective: Objective, seed: int = 0, n_mc: int = 50,
                      verify_winner: bool = False,
                      sim_config: SimConfig | None = None) -> OptimizationReport:
    """Filter candidates by predicted median delay on the SLA pairs, then
    rank the survivors by the objective over the remaining pairs.

    Infeasibility (no survivor) is a report state, not an error.
    """
    ckpt = _load(checkpoint)
    if objective.metric != "delay":
        raise ConfigError("SLA optimization is defined for delay objectives")
    if ckpt.meta.get("target", "delay") != "delay":
        raise ConfigError("SLA optimization needs a delay checkpoint")
    if not candidates:
        raise ConfigError("need at least one candidate")
    for s, d in sla.pairs:
        if not (0 <= s < topology.node_count and 0 <= d < topology.node_count):
            raise ConfigError(f"SLA pair {(s, d)} outside the topology")
    for scheme in candidates:
        scheme.validate(topology)

    sla_set = set(sla.pairs)
    entries = []
    for i, scheme in enumerate(candidates):
        median, samples, pairs = _predict_pairs(ckpt, topology, tm, scheme, n_mc,
                                                _candidate_seed(seed, i))
        rest = np.asarray([p not in sla_set for p in pairs], dtype=bool)
        if not rest.any():
            raise ConfigError("SLA constrains every pair; nothing left to optimize")
        constrained = ~rest
        ok = bool(np.all(median[constrained] <= sla.delay_bound)) if constrained.any() else True
        per_sample_obj = objective.reduce(samples[:, rest], axis=1)
        entries.append(CandidateEvaluation(
            index=i,
            objective_median=float(objective.reduce(median[rest])),
            objective_lo=float(np.percentile(per_sample_obj, 2.5)),
            objective_hi=float(np.percentile(per_sample_obj, 97.5)),
            sla_ok=ok,
        ))
    entries.sort(key=lambda e: (not e.sla_ok, e.objective_median, e.index))
    feasible = [e for e in entries if e.sla_ok]
    report = OptimizationReport(
        objective=objective, entries=entries,
        winner_index=feasible[0].index if feasible else None,
        infeasible=not feasible,
    )
    if verify_winner and not report.infeasible:
        cfg = sim_config or SimConfig()
        report.winner_sim_objective = _sim_objective(
            topology, candidates[report.winner_index], tm, objective, cfg,
            _candidate_seed(seed, 1_000_000 + report.winner_index))
    return report


# ---------------------------------------------------------------------------
# link failures


@dataclass
class FailureTrial:
    failed_link_ids: tuple[int, ...]
    winner_index: int
    winner_objective: float


@dataclass
class FailureSweepReport:
    objective: Objective
    n_failures: int
    trials: list[FailureTrial]
    mean_objective: float = field(init=False)
    max_objective: float = field(init=False)

    def __post_init__(self):
        values = [t.winner_objective for t in self.trials]
        self.mean_objective = float(np.mean(values))
        self.max_objective = float(np.max(values))

    def to_csv(self) -> str:
        rows = ["trial,failed_links,winner,objective"]
        for i, t in enumerate(self.trials):
            failed = ";".join(map(str, t.failed_link_ids))
            rows.append(f"{i},{failed},{t.winner_index},{t.winner_objective!r}")
        return "\n".join(rows) + "\n"


def _undirected_groups(topology: Topology) -> list[tuple[int, ...]]:
    """Links grouped with their reverse direction; failures take out both."""
    by_pair = {(l.src, l.dst): l.id for l in topology.links}
    groups, seen = [], set()
    for l in topology.links:
        if l.id in seen:
            continue
        rev = by_pair.get((l.dst, l.src))
        group = (l.id,) if rev is None else (l.id, rev)
        seen.update(group)
        groups.append(group)
    return groups


def link_failure_sweep(checkpoint, topology: Topology, tm: TrafficMatrix,
                       n_failures: int, trials: int, candidates_per_trial: int,
                       seed: int = 0, objective: Objective = Objective("mean_delay"),
                       n_mc: int = 50) -> FailureSweepReport:
    """Optimize after `n_failures` random undirected link failures per trial.

    Per trial t, three seeds derive from SeedSequence(seed, spawn_key=(t, k))
    for k = 0 (failure sampling), 1 (candidate generation), 2 (evaluation);
    failure sets that disconnect the graph are resampled up to 200 times.
    """
    ckpt = _load(checkpoint)
    groups = _undirected_groups(topology)
    if n_failures < 0 or n_failures >= len(groups):
        raise ConfigError(f"n_failures must be in 0..{len(groups) - 1}")
    if trials < 1 or candidates_per_trial < 1:
        raise ConfigError("trials and candidates_per_trial must be >= 1")

    results = []
    for trial in range(trials):
        def _seed(k: int) -> int:
            return int(np.random.SeedSequence(entropy=seed, spawn_key=(trial, k))
                       .generate_state(1, np.uint64)[0])

        fail_rng = np.random.default_rng(_seed(0))
        reduced = spine = None
        failed: tuple[int, ...] = ()
        for _ in range(200):
            picks = fail_rng.choice(len(groups), size=n_failures, replace=False)
            failed = tuple(sorted(lid for g in picks for lid in groups[g]))
            try:
                reduced, spine = apply_link_failures(topology, failed)
                break
            except ConfigError:
                reduced = None
        if reduced is None:
            raise ConfigError(
                f"could not find a connected {n_failures}-failure set in 200 draws")
        candidates = random_routing_variants(reduced, candidates_per_trial, _seed(1))
        report = evaluate_candidates(ckpt, reduced, tm, candidates, objective,
                                     seed=_seed(2), n_mc=n_mc)
        winner = report.entry_for(report.winner_index)
        results.append(FailureTrial(failed_link_ids=failed,
                                    winner_index=winner.index,
                                    winner_objective=winner.objective_median))
    return FailureSweepReport(objective=objective, n_failures=n_failures, trials=results)


# ---------------------------------------------------------------------------
# what-if: demand growth


@dataclass
class UserStep:
    users_added: int
    winner_index: int
    objective_value: float
    mean_delay: float
    max_delay: float


@dataclass
class UserSweepReport:
    objective: Objective
    delay_bound: float
    steps: list[UserStep]
    first_breaking: int | None

    def to_csv(self) -> str:
        rows = ["users_added,winner,objective,mean_delay,max_delay"]
        for s in self.steps:
            rows.append(f"{s.users_added},{s.winner_index},{s.objective_value!r},"
                        f"{s.mean_delay!r},{s.max_delay!r}")
        return "\n".join(rows) + "\n"


def whatif_add_users(checkpoint, topology: Topology, candidates: list[RoutingScheme],
                     tm: TrafficMatrix, node_order: list[int], factor: float,
                     delay_bound: float, seed: int = 0,
                     objective: Objective = Objective("mean_delay"),
                     n_mc: int = 50) -> UserSweepReport:
    """Scale demand at each listed node in turn, re-optimizing every step.

    Returns per-step optimized delays and the first user count whose
    optimized objective exceeds `delay_bound` (None when it never does).
    Per-candidate MC seeds depend only on (seed, candidate), so identical
    demand yields identical predictions across steps.
    """
    ckpt = _load(checkpoint)
    if objective.metric != "delay":
        raise ConfigError("user what-if tracks delay objectives")
    if factor <= 0:
        raise ConfigError("factor must be > 0")
    for node in node_order:
        if not (0 <= node < topology.node_count):
            raise ConfigError(f"node {node} outside the topology")

    steps = []
    first_breaking = None
    current = tm
    for users in range(len(node_order) + 1):
        if users > 0:
            current = scale_user_demand(current, node_order[users - 1], factor)
        report = evaluate_candidates(ckpt, topology, current, candidates, objective,
                                     seed=seed, n_mc=n_mc)
        winner = report.entry_for(report.winner_index)
        median, _, _ = _predict_pairs(ckpt, topology, current,
                                      candidates[winner.index], n_mc,
                                      _candidate_seed(seed, winner.index))
        step = UserStep(users_added=users, winner_index=winner.index,
                        objective_value=winner.objective_median,
                        mean_delay=float(np.mean(median)),
                        max_delay=float(np.max(median)))
        steps.append(step)
        if users > 0 and first_breaking is None and step.objective_value > delay_bound:
            first_breaking = users
    return UserSweepReport(objective=objective, delay_bound=delay_bound,
                           steps=steps, first_breaking=first_breaking)


# ---------------------------------------------------------------------------
# what-if: new link placement


@dataclass
class PlacementOption:
    node_pair: tuple[int, int]
    best_objective: float
    winner_index: int


@dataclass
class LinkPlacementReport:
    objective: Objective
    baseline_objective: float
    options: list[PlacementOption]       # ranked ascending by objective
    best_pair: tuple[int, int]
    best_objective: float
    reduction: float                     # (before - after) / before

    def to_csv(self) -> str:
        rows = ["node_a,node_b,best_objective,winner"]
        for o in self.options:
            rows.append(f"{o.node_pair[0]},{o.node_pair[1]},{o.best_objective!r},"
                        f"{o.winner_index}")
        return "\n".join(rows) + "\n"

    def summary_text(self) -> str:
        return (f"best placement: {self.best_pair}  {self.objective.kind} "
                f"{self.baseline_objective:.6f} -> {self.best_objective:.6f} "
                f"({100.0 * self.reduction:.1f}% reduction)\n")


def _with_new_link(topology: Topology, a: int, b: int) -> Topology:
    max_id = max(l.id for l in topology.links)
    capacity = topology.capacity
    links = list(topology.links) + [
        dataclasses.replace(topology.links[0], id=max_id + 1, src=a, dst=b,
                            capacity=capacity),
        dataclasses.replace(topology.links[0], id=max_id + 2, src=b, dst=a,
                            capacity=capacity),
    ]
    return Topology(node_count=topology.node_count, links=tuple(links))


def _best_for_topology(evaluator, topology, tm, objective, seed, candidates_per_option,
                       n_mc, sim_config, ckpt) -> tuple[float, int]:
    candidates = [shortest_path_routing(topology)]
    if candidates_per_option > 1:
        candidates += random_routing_variants(topology, candidates_per_option - 1, seed)
    if evaluator == "model":
        report = evaluate_candidates(ckpt, topology, tm, candidates, objective,
                                     seed=seed, n_mc=n_mc)
        winner = report.entry_for(report.winner_index)
        return winner.objective_median, winner.index
    values = [
        _sim_objective(topology, scheme, tm, objective, sim_config,
                       _candidate_seed(seed, i))
        for i, scheme in enumerate(candidates)
    ]
    best = int(np.argmin(values))
    return float(values[best]), best


def whatif_add_link(checkpoint, topology: Topology, tm: TrafficMatrix,
                    candidate_node_pairs: list[tuple[int, int]],
                    objective: Objective = Objective("mean_delay"), seed: int = 0,
                    candidates_per_option: int = 20, n_mc: int = 50,
                    use_simulator: bool = False,
                    sim_config: SimConfig | None = None) -> LinkPlacementReport:
    """Try a bidirectional link at each candidate pair and re-optimize.

    Candidates per option are the survivors' shortest-path scheme plus random
    variants. The evaluator is the model checkpoint, or the simulator itself
    when `use_simulator` is set (then `checkpoint` may be None).
    """
    if not candidate_node_pairs:
        raise ConfigError("need at least one candidate node pair")
    existing = {(l.src, l.dst) for l in topology.links}
    for a, b in candidate_node_pairs:
        if a == b or not (0 <= a < topology.node_count and 0 <= b < topology.node_count):
            raise ConfigError(f"invalid node pair {(a, b)}")
        if (a, b) in existing or (b, a) in existing:
            raise ConfigError(f"nodes {(a, b)} are already linked")
    evaluator = "sim" if use_simulator else "model"
    ckpt = None if use_simulator else _load(checkpoint)
    if use_simulator and sim_config is None:
        sim_config = SimConfig()

    baseline, _ = _best_for_topology(evaluator, topology, tm, objective, seed,
                                     candidates_per_option, n_mc, sim_config, ckpt)
    options = []
    for a, b in candidate_node_pairs:
        upgraded = _with_new_link(topology, a, b)
        best, winner = _best_for_topology(evaluator, upgraded, tm, objective, seed,
                                          candidates_per_option, n_mc, sim_config, ckpt)
        options.append(PlacementOption(node_pair=(a, b), best_objective=best,
                                       winner_index=winner))
    options.sort(key=lambda o: (o.best_objective, o.node_pair))
    best_opt = options[0]
    return LinkPlacementReport(
        objective=objective,
        baseline_objective=baseline,
        options=options,
        best_pair=best_opt.node_pair,
        best_objective=best_opt.best_objective,
        reduction=(baseline - best_opt.best_objective) / baseline,
    )
