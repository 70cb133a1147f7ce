"""Experiment orchestration: train the victim and the attacker, attack sampled test victims, score.

Every method is run once per victim at the largest budget; the result at a
smaller budget ``b`` is the graph after the first ``min(b, edits made)`` edits.
The policy's choices never depend on the remaining budget and each victim has
its own random stream, so this prefix equals a fresh run at budget ``b``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..baselines import betweenness_edge_attack, edge_betweenness, node_betweenness, random_edge_attack
from ..errors import ConfigError, HetAttackError
from ..hetgraph import EditedGraph, homogenize
from ..n2v import EmbeddingTable, node2vec
from ..policy import HierarchicalPolicy
from ..reinforce import AttackEnv, run_episode, train_attacker
from ..topk import TopKConfig, TypeTrees, refine
from ..victim import BlackBoxOracle, Split, VictimModel, accuracy, stratified_split, train_victim
from .config import ExperimentConfig
from .datasets import Dataset, load_dataset, synth_dataset
from .metrics import classification_metrics
from .report import AttackReport, ReportRow, SweepRow

log = logging.getLogger(__name__)


class StageError(HetAttackError):
    """Failure inside one pipeline stage; ``stage`` names it."""

    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


class stage:
    """Context manager that times a block and tags any failure with the stage name."""

    def __init__(self, name: str, timings: dict | None = None):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, kind, exc, tb):
        if self.timings is not None:
            self.timings[self.name] = self.timings.get(self.name, 0.0) + time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, StageError) and isinstance(exc, Exception):
            raise StageError(self.name, exc) from exc
        return False


@dataclass
class Pipeline:
    """Everything trained or derived once per (config, seed) and shared by all methods."""
    config: ExperimentConfig
    dataset: Dataset
    split: Split
    model: VictimModel
    victims: np.ndarray
    embeddings: EmbeddingTable | None = None
    trees: TypeTrees | None = None
    edge_scores: dict | None = None
    node_scores: np.ndarray | None = None
    policy: HierarchicalPolicy | None = None
    curve: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    @property
    def graph(self):
        return self.dataset.graph

    @property
    def seed(self) -> int:
        return self.config.seed


def load_data(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset.path:
        return load_dataset(cfg.dataset.path)
    return synth_dataset(cfg.dataset.synth, cfg.seed)


def sample_victims(split: Split, n: int, seed: int) -> np.ndarray:
    """Up to ``n`` test nodes, ascending; all of them when the split is small enough."""
    if len(split.test) <= n:
        return np.sort(split.test)
    rng = np.random.default_rng([seed, 1])
    return np.sort(rng.choice(split.test, n, replace=False))


def needs(methods) -> set:
    out = set()
    for m in methods:
        if m.startswith("betweenness"):
            out.add("betweenness")
        if m in ("rl", "krl"):
            out.add("policy")
        if m == "krl":
            out.add("embed")
    return out


def prepare(cfg: ExperimentConfig, stages=None) -> Pipeline:
    """Run the shared stages.  ``stages`` is a subset of {"embed", "betweenness", "policy"}."""
    stages = needs(cfg.methods) if stages is None else set(stages)
    timings: dict = {}
    with stage("data", timings):
        ds = load_data(cfg)
        split = stratified_split(ds.graph, cfg.seed)
    with stage("victim", timings):
        model = train_victim(ds.graph, split, ds.metapaths, cfg.victim, seed=cfg.seed)
        log.info("victim test accuracy %.3f", accuracy(model, ds.graph, split.test))
    pipe = Pipeline(cfg, ds, split, model, sample_victims(split, cfg.victim_sample, cfg.seed), timings=timings)
    if "embed" in stages:
        with stage("embed", timings):
            pipe.embeddings = node2vec(homogenize(ds.graph), cfg.walk)
            pipe.trees = TypeTrees(ds.graph, pipe.embeddings)
    if "betweenness" in stages:
        with stage("betweenness", timings):
            pipe.edge_scores = edge_betweenness(homogenize(ds.graph), cfg.betweenness_batch)
            pipe.node_scores = node_betweenness(pipe.edge_scores, ds.graph.num_nodes)
    if "policy" in stages:
        with stage("policy", timings):
            g = ds.graph
            policy = HierarchicalPolicy.create(g.schema, g.features.shape[1], cfg.policy)
            env = AttackEnv(g, BlackBoxOracle(model), cfg.agent.success_reward)
            train = split.train
            pipe.policy, pipe.curve = train_attacker(env, policy, train, g.labels[train], cfg.agent)
    return pipe


# -- attacking ----------------------------------------------------------------------------------

@dataclass
class Outcome:
    """One victim under one method: predicted label and attacker queries per budget."""
    victim: int
    label: int
    preds: dict
    queries: dict


def _judge(model: VictimModel):
    oracle = BlackBoxOracle(model)
    return lambda graph, v: oracle.query(graph, v, 0).label


def _prefix(graph, edits, n: int, budget: int) -> EditedGraph:
    return EditedGraph(graph, budget, edits[:n])


def _baseline(pipe: Pipeline, method: str, v: int, budgets, judge) -> Outcome:
    g = pipe.graph
    kind, mode = method.split("-")
    preds, queries = {}, {}
    for b in budgets:
        if kind == "random":
            ov = random_edge_attack(g, v, b, mode, np.random.default_rng([pipe.seed, v]))
        else:
            ov = betweenness_edge_attack(g, v, b, mode, pipe.edge_scores, pipe.node_scores)
        preds[b], queries[b] = judge(ov, v), 0
    return Outcome(v, int(g.labels[v]), preds, queries)


def _episode(pipe: Pipeline, v: int, budgets, judge, k_ratio: float | None) -> Outcome:
    g = pipe.graph
    y = int(g.labels[v])
    env = AttackEnv(g, BlackBoxOracle(pipe.model), pipe.config.agent.success_reward)
    hook = None
    if k_ratio is not None:
        tk = TopKConfig(k_ratio=k_ratio, k_min=pipe.config.topk.k_min)
        hook = lambda state, proposal, rng: refine(state, proposal, pipe.trees, env.oracle, y, tk, rng)
    big = max(budgets)
    tr = run_episode(env, pipe.policy, v, y, big, np.random.default_rng([pipe.seed, v]), hook)
    edits = tr.edits
    preds, queries = {}, {}
    for b in budgets:
        n = min(b, len(edits))
        preds[b] = judge(_prefix(g, edits, n, big), v)
        queries[b] = tr.queries[n - 1] if n else 0
    return Outcome(v, y, preds, queries)


def attack_all(pipe: Pipeline, method: str, budgets=None, k_ratio: float | None = None) -> list[Outcome]:
    """Attack every sampled victim independently from the clean graph."""
    budgets = sorted(pipe.config.budgets if budgets is None else budgets)
    if method in ("rl", "krl") and pipe.policy is None:
        raise ConfigError(f"method {method!r} needs a trained policy")
    if method == "krl":
        if pipe.trees is None:
            raise ConfigError("method 'krl' needs node embeddings")
        k_ratio = pipe.config.topk.k_ratio if k_ratio is None else k_ratio
    if method.startswith("betweenness") and pipe.edge_scores is None:
        raise ConfigError(f"method {method!r} needs betweenness scores")
    judge = _judge(pipe.model)
    before = pipe.graph.fingerprint()
    out = []
    for v in pipe.victims.tolist():
        if method in ("rl", "krl"):
            out.append(_episode(pipe, v, budgets, judge, k_ratio if method == "krl" else None))
        else:
            out.append(_baseline(pipe, method, v, budgets, judge))
    if pipe.graph.fingerprint() != before:
        raise HetAttackError(f"base graph changed while running {method!r}")
    return out


def score(pipe: Pipeline, method: str, outcomes: list[Outcome], budgets) -> list[ReportRow]:
    labels = [o.label for o in outcomes]
    rows = []
    for b in budgets:
        m = classification_metrics([o.preds[b] for o in outcomes], labels, pipe.graph.num_classes)
        q = float(np.mean([o.queries[b] for o in outcomes]))
        rows.append(ReportRow(pipe.dataset.name, pipe.seed, b, method, m.accuracy, m.micro_f1, m.macro_f1, q))
    return rows


def clean_row(pipe: Pipeline) -> ReportRow:
    judge = _judge(pipe.model)
    g = pipe.graph
    ov = EditedGraph(g, 1)
    preds = [judge(ov, v) for v in pipe.victims.tolist()]
    m = classification_metrics(preds, g.labels[pipe.victims], g.num_classes)
    return ReportRow(pipe.dataset.name, pipe.seed, 0, "clean", m.accuracy, m.micro_f1, m.macro_f1, 0.0)


def run_experiment(cfg: ExperimentConfig, pipe: Pipeline | None = None) -> AttackReport:
    """Clean row plus one row per (budget, method)."""
    pipe = prepare(cfg) if pipe is None else pipe
    rows = [clean_row(pipe)]
    for method in cfg.methods:
        with stage(f"attack:{method}", pipe.timings):
            rows += score(pipe, method, attack_all(pipe, method), cfg.budgets)
    rows.sort(key=lambda r: (r.budget, cfg.methods.index(r.method) if r.method in cfg.methods else -1))
    return AttackReport(rows, len(pipe.victims), dict(pipe.timings))


def k_sweep(cfg: ExperimentConfig, k_ratios=None, pipe: Pipeline | None = None) -> list[SweepRow]:
    """Attack success rate (1 - accuracy) of ``krl`` per (k_ratio, budget), reusing one trained pipeline."""
    k_ratios = list(cfg.k_ratios if k_ratios is None else k_ratios)
    if not k_ratios:
        raise ConfigError("k_ratios must be nonempty")
    for r in k_ratios:
        TopKConfig(k_ratio=float(r), k_min=cfg.topk.k_min)
    pipe = prepare(cfg, {"embed", "policy"}) if pipe is None else pipe
    rows = []
    for r in k_ratios:
        with stage(f"sweep:{r:g}", pipe.timings):
            outcomes = attack_all(pipe, "krl", k_ratio=float(r))
        for row in score(pipe, "krl", outcomes, cfg.budgets):
            rows.append(SweepRow(row.dataset, row.seed, float(r), row.budget, 1.0 - row.accuracy))
    return rows
