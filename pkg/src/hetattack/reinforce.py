"""Attack environment and the REINFORCE loop that trains the policy.

An edit takes two steps: choose an auxiliary type (reward 0), then choose a
node of that type, which toggles the victim-node edge and queries the oracle.
The node step pays the success constant and ends the episode when the
prediction flips, otherwise it pays the oracle's NLL of the true label.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import ndiff as nd
from .errors import BudgetError, ConfigError, InputError, NonFiniteError, TrainingError
from .hetgraph import EditedGraph, edit_count, toggle_edge
from .policy import CHOOSE_NODE, CHOOSE_TYPE, AttackAction, AttackState, sample_action

log = logging.getLogger(__name__)

SUCCESS = "success"
BUDGET_EXHAUSTED = "budget-exhausted"


@dataclass
class AgentConfig:
    gamma: float = 1.0
    lr: float = 0.01
    epochs: int = 20
    episodes_per_victim: int = 1
    batch_size: int = 8
    success_reward: float = 10.0
    budget: int = 5
    max_train_victims: int = 64
    baseline: bool = False       # subtract the batch-mean return per step index
    optimizer: str = "sgd"       # "sgd" (plain ascent) or "adam"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 1 or self.episodes_per_victim < 1:
            raise ConfigError("need at least one training episode")
        if self.batch_size < 1 or self.budget < 1:
            raise ConfigError("batch size and budget must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class AttackEnv:
    graph: object                 # clean HeteroGraph
    oracle: object                # BlackBoxOracle
    success_reward: float = 10.0

    def reset(self, victim: int, budget: int) -> AttackState:
        return AttackState(EditedGraph(self.graph, budget), int(victim))


@dataclass
class Step:
    state: AttackState
    action: AttackAction
    log_prob: float
    reward: float


@dataclass
class Trajectory:
    victim: int
    true_label: int
    steps: list = field(default_factory=list)
    terminal_flag: str | None = None
    queries: list = field(default_factory=list)   # cumulative oracle queries after each edit
    graph: object = None                           # edited graph after the last step

    @property
    def rewards(self) -> list[float]:
        return [s.reward for s in self.steps]

    @property
    def success(self) -> bool:
        return self.terminal_flag == SUCCESS

    @property
    def edits(self):
        return self.graph.edits if self.graph is not None else ()


def step(env: AttackEnv, state: AttackState, action: AttackAction, true_label: int):
    """Returns (next state, reward, done, terminal flag or None)."""
    if state.phase == CHOOSE_TYPE:
        if action.aux_type is None:
            raise InputError("choose-type phase needs a type action")
        if action.aux_type not in state.graph.schema.auxiliary_types:
            raise InputError(f"{action.aux_type!r} is not an auxiliary type")
        return replace(state, phase=CHOOSE_NODE, pending_type=action.aux_type), 0.0, False, None
    node = action.aux_node
    if node is None:
        raise InputError("choose-node phase needs a node action")
    g = state.graph
    if g.node_type_of[node] != state.pending_type:
        raise InputError(f"node {node} is not of type {state.pending_type!r}")
    rel = g.schema.edge_between(g.schema.primary_type, state.pending_type).name
    try:
        g2 = toggle_edge(g, state.victim, node, rel)
    except BudgetError:
        return replace(state, phase=CHOOSE_TYPE, pending_type=None), 0.0, True, BUDGET_EXHAUSTED
    nxt = AttackState(g2, state.victim)
    res = env.oracle.query(g2, state.victim, true_label)
    if res.label != true_label:
        return nxt, float(env.success_reward), True, SUCCESS
    if edit_count(g2) >= g2.budget:
        return nxt, res.nll, True, BUDGET_EXHAUSTED
    return nxt, res.nll, False, None


def run_episode(env: AttackEnv, policy, victim: int, true_label: int, budget: int, rng,
                refine: Callable | None = None) -> Trajectory:
    """Roll out one attack from the clean graph.

    ``refine(state, proposal, rng) -> node`` optionally replaces the sampled
    node before it is applied (test-time Top-K refinement).
    """
    state = env.reset(victim, budget)
    traj = Trajectory(int(victim), int(true_label))
    start = getattr(env.oracle, "query_count", 0)
    for _ in range(2 * budget):
        action, lp = sample_action(policy, state, rng)
        if state.phase == CHOOSE_NODE and refine is not None:
            chosen = refine(state, action.aux_node, rng)
            if chosen != action.aux_node:
                action = AttackAction(aux_node=int(chosen))
                lp = float(policy.log_prob(policy.params, state, action).data)
        nxt, reward, done, flag = step(env, state, action, true_label)
        traj.steps.append(Step(state, action, lp, reward))
        if nxt.graph is not state.graph:
            traj.queries.append(getattr(env.oracle, "query_count", 0) - start)
        state = nxt
        if done:
            traj.terminal_flag = flag
            break
    if traj.terminal_flag is None:
        traj.terminal_flag = BUDGET_EXHAUSTED
    traj.graph = state.graph
    return traj


def returns(traj_or_rewards, gamma: float) -> np.ndarray:
    """Discounted return from every step: G_t = r_{t+1} + gamma * G_{t+1}."""
    rewards = traj_or_rewards.rewards if isinstance(traj_or_rewards, Trajectory) else traj_or_rewards
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def _weighted_returns(batch, gamma: float, baseline: bool) -> list[np.ndarray]:
    gs = [returns(tr, gamma) for tr in batch]
    if baseline:
        depth = max(len(g) for g in gs)
        means = np.array([np.mean([g[t] for g in gs if len(g) > t]) for t in range(depth)])
        gs = [g - means[:len(g)] for g in gs]
    return gs


def batch_objective(policy, params: dict, batch, gamma: float, baseline: bool = False) -> nd.Tensor:
    """Mean over trajectories of sum_t log pi(a_t | s_t) * G_t."""
    if not batch:
        raise InputError("empty trajectory batch")
    total = None
    for tr, g in zip(batch, _weighted_returns(batch, gamma, baseline)):
        for s, gt in zip(tr.steps, g):
            if gt == 0.0:
                continue
            term = nd.mul(policy.log_prob(params, s.state, s.action), float(gt))
            total = term if total is None else nd.add(total, term)
    if total is None:
        return nd.Tensor(0.0)
    return nd.mul(total, 1.0 / len(batch))


def batch_gradient(policy, batch, gamma: float, baseline: bool = False) -> dict[str, np.ndarray]:
    """Gradient of :func:`batch_objective`, one small tape per step to bound memory."""
    if not batch:
        raise InputError("empty trajectory batch")
    grads = {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in policy.params.items()}
    for tr, g in zip(batch, _weighted_returns(batch, gamma, baseline)):
        for s, gt in zip(tr.steps, g):
            if gt == 0.0:
                continue
            tape = nd.Tape()
            lp = policy.log_prob(tape.watch(policy.params), s.state, s.action)
            for k, gk in nd.backward(tape, lp).items():
                grads[k] += (gt / len(batch)) * gk
    return grads


class _AdamAscent:
    def __init__(self, lr):
        self.adam = nd.Adam(lr=lr)

    def step(self, params, grads):
        return self.adam.step(params, {k: -g for k, g in grads.items()})


def update_policy(policy, batch, alpha: float, gamma: float = 1.0, baseline: bool = False,
                  optimizer=None):
    """One ascent step on the batch objective; returns the updated policy.

    ``policy`` needs ``params``, ``log_prob(params, state, action)`` and
    ``with_params(params)``.  ``optimizer`` (with ``step(params, grads)``)
    replaces plain gradient ascent when given.
    """
    try:
        grads = batch_gradient(policy, batch, gamma, baseline)
    except NonFiniteError as exc:
        raise TrainingError(f"non-finite value while differentiating the policy: {exc}") from exc
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"non-finite policy gradient in {bad}")
    if not any(np.any(g) for g in grads.values()):
        return policy
    if optimizer is not None:
        return policy.with_params(optimizer.step(policy.params, grads))
    return policy.with_params(nd.sgd_step(policy.params, grads, alpha, "ascend"))


@dataclass
class CurveRow:
    epoch: int
    reward: float
    success_rate: float


def train_attacker(env: AttackEnv, policy, victims, labels, config: AgentConfig,
                   curve: list | None = None):
    """REINFORCE over the training victims; returns (policy, learning curve rows)."""
    victims = np.asarray(victims, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(victims) == 0:
        raise ConfigError("no training victims")
    rng = np.random.default_rng(config.seed)
    if len(victims) > config.max_train_victims:
        pick = np.sort(rng.choice(len(victims), config.max_train_victims, replace=False))
        victims, labels = victims[pick], labels[pick]
    opt = _AdamAscent(config.lr) if config.optimizer == "adam" else None
    curve = [] if curve is None else curve
    for epoch in range(config.epochs):
        order = rng.permutation(np.repeat(np.arange(len(victims)), config.episodes_per_victim))
        rewards, wins = [], []
        for start in range(0, len(order), config.batch_size):
            batch = []
            for i in order[start:start + config.batch_size]:
                tr = run_episode(env, policy, int(victims[i]), int(labels[i]), config.budget, rng)
                batch.append(tr)
                rewards.append(sum(tr.rewards))
                wins.append(tr.success)
            policy = update_policy(policy, batch, config.lr, config.gamma, config.baseline, opt)
        row = CurveRow(epoch, float(np.mean(rewards)), float(np.mean(wins)))
        curve.append(row)
        log.info("epoch %d: mean reward %.3f, success %.3f", epoch, row.reward, row.success_rate)
    return policy, curve


def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "reward", "success_rate"])
        for r in curve:
            w.writerow([r.epoch, f"{r.reward:.10g}", f"{r.success_rate:.10g}"])
