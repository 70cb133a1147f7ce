"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that the terminal summary prints at the end
of the run (see conftest.py); run with ``-s`` to also see them inline.
"""
import itertools
import subprocess
import sys
import time

import numpy as np
import pytest

from hetattack import ndiff as nd
from hetattack.baselines import edge_betweenness
from hetattack.bench.config import BASELINES, DEFAULT_K_RATIOS, config_from_dict
from hetattack.bench.experiment import k_sweep, prepare, run_experiment
from hetattack import victim as vm
from hetattack.hetgraph import Metapath, metapath_adjacency
from hetattack.policy import AttackAction
from hetattack.reinforce import returns
from hetattack.topk import brute_force_knn, build, knn

from conftest import PAP, PFP, brute_force_metapath, random_acm_graph
from harness import fuzz_episodes, run_bandit
from test_baselines import brute_betweenness, homog
from test_policy import _gradcheck, small_policy, state_of
from test_reinforce import reinforce_instance, independent_weights
from test_hetgraph import block_pairs

METAPATHS = (PAP, PFP, Metapath(("pa", "pa", "pf", "pf"), "papfp"), Metapath(("pa",), "pa"))

RESULTS = []
SEEDS = range(5)


def record(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    return ok


# -- 1 ---------------------------------------------------------------------------------------------

def test_c1_kdtree_matches_brute_force():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    # coarse integer grid: many exact distance ties exercise the id tie rule
    pts = rng.integers(0, 10, size=(1000, 3)).astype(float)
    ids = rng.permutation(10 ** 6)[:1000]
    tree = build(pts, ids)
    queries = rng.integers(0, 10, size=(1000, 3)) + rng.choice([0.0, 0.5], size=(1000, 3))
    mismatches = sum(knn(tree, q, k) != brute_force_knn(pts, ids, q, k) for q in queries for k in (1, 5, 17))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 30
    assert record(1, ok, f"KD-tree vs brute force: {mismatches} mismatches in 3000 queries, {elapsed:.1f}s (< 30s)")


# -- 2 ---------------------------------------------------------------------------------------------

def test_c2_metapaths_and_betweenness_match_enumeration():
    t0 = time.perf_counter()
    mp_bad = bc_bad = 0
    worst = 0.0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        g = random_acm_graph(rng, int(rng.integers(1, 13)), int(rng.integers(1, 13)), int(rng.integers(1, 6)),
                             p_pa=float(rng.uniform(0.05, 0.6)), p_pf=float(rng.uniform(0.05, 0.6)))
        for mp in METAPATHS:
            mp_bad += block_pairs(g, mp, metapath_adjacency(g, mp)) != brute_force_metapath(g, mp)
        n = int(rng.integers(1, 9))
        edges = [e for e in itertools.combinations(range(n), 2) if rng.random() < rng.uniform(0.2, 0.8)]
        sc = edge_betweenness(homog(n, edges), batch=int(rng.integers(1, 9)))
        ref = brute_betweenness(n, edges)
        if set(sc) != set(ref):
            bc_bad += 1
            continue
        for e, v in ref.items():
            worst = max(worst, abs(sc[e] - float(v)))
        bc_bad += any(abs(sc[e] - float(v)) > 1e-9 for e, v in ref.items())
    elapsed = time.perf_counter() - t0
    ok = mp_bad == 0 and bc_bad == 0 and elapsed < 60
    assert record(2, ok, f"metapath adjacency {mp_bad} mismatches over 200 graphs x 4 metapaths, betweenness {bc_bad}/200 "
                         f"(max |err| {worst:.1e} vs exact rationals), {elapsed:.1f}s (< 60s)")


# -- 3 ---------------------------------------------------------------------------------------------

def _victim_error(seed):
    rng = np.random.default_rng(seed)
    g = random_acm_graph(rng, n_paper=6, n_author=4, n_field=2, f=3)
    params = vm.init_params(3, 3, 2, 4, 3, rng)
    x = g.features[g.primary_ids]
    seg = vm._metapath_segments(g, (PAP, PFP))
    y = g.labels[g.primary_ids]

    def f(p):
        return nd.cross_entropy(vm.batched_logits(p, x, seg), y)

    tape = nd.Tape()
    analytic = nd.backward(tape, f(tape.watch(params)))
    numeric = nd.finite_difference_grad(lambda p: float(f(p).data), params)
    return nd.max_relative_error(analytic, numeric)


def _typenet_error(seed):
    rng = np.random.default_rng(seed)
    g = random_acm_graph(rng, n_paper=5, n_author=4, n_field=2, f=2)
    pol = small_policy(g, seed)
    pol.params["type.W_out"] = rng.normal(size=pol.params["type.W_out"].shape)
    return _gradcheck(pol, state_of(g, victim=seed % 5), AttackAction(aux_type=("Author", "Field")[seed % 2]))


def _actionnet_error(seed):
    rng = np.random.default_rng(seed)
    g = random_acm_graph(rng, n_paper=5, n_author=4, n_field=2, f=2)
    pol = small_policy(g, seed)
    pol.params["act.W2"] = rng.normal(size=pol.params["act.W2"].shape)
    node = int(g.node_ids_by_type["Author"][seed % 4])
    return _gradcheck(pol, state_of(g, victim=seed % 5, pending="Author"), AttackAction(aux_node=node))


def _objective_error(seed):
    from hetattack.reinforce import batch_gradient
    pol, batch, gamma, baseline = reinforce_instance(seed)
    weights = independent_weights(batch, gamma, baseline)
    numeric = {k: np.zeros_like(v) for k, v in pol.params.items()}
    for tr, ws in zip(batch, weights):
        for s, w in zip(tr.steps, ws):
            d = nd.finite_difference_grad(lambda p: float(pol.log_prob(p, s.state, s.action).data), pol.params)
            for k in numeric:
                numeric[k] += w * d[k]
    return nd.max_relative_error(batch_gradient(pol, batch, gamma, baseline), numeric)


def test_c3_gradient_checks():
    nets = {"victim": [_victim_error(s) for s in range(50)],
            "TypeNet": [_typenet_error(s) for s in range(50)],
            "ActionNet": [_actionnet_error(s) for s in range(50)],
            "REINFORCE objective": [_objective_error(s) for s in range(50)]}
    passed = {k: sum(e < 1e-4 for e in v) for k, v in nets.items()}
    ok = all(p == 50 for p in passed.values())
    worst = {k: max(v) for k, v in nets.items()}
    detail = ", ".join(f"{k} {passed[k]}/50" for k in nets)
    detail += " (max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + "; bound 1e-4)"
    assert record(3, ok, detail)


# -- 4 ---------------------------------------------------------------------------------------------

def test_c4_bandit():
    t0 = time.perf_counter()
    wins = sum(max(run_bandit(seed, updates=500)) > 0.9 for seed in range(10))
    elapsed = time.perf_counter() - t0
    ok = wins >= 9 and elapsed < 60
    assert record(4, ok, f"bandit better-arm prob > 0.9 within 500 updates in {wins}/10 seeds (>= 9), {elapsed:.1f}s")


# -- 5 ---------------------------------------------------------------------------------------------

def test_c5_mdp_contract():
    violations = fuzz_episodes(10 ** 4, seed=0)
    kinds = sorted({v[1] for v in violations})
    assert record(5, not violations, f"10^4 fuzzed episodes, {len(violations)} violations {kinds if kinds else ''}".rstrip())


# -- 6 ---------------------------------------------------------------------------------------------

def test_c6_returns_identity():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        rewards = rng.normal(scale=5.0, size=int(rng.integers(1, 12)))
        rewards[rng.random(len(rewards)) < 0.3] = 0.0
        gamma = float(rng.uniform(0.0, 1.0)) or 1.0
        g = returns(list(rewards), gamma)
        nxt = np.append(g[1:], 0.0)
        worst = max(worst, float(np.max(np.abs(g - (rewards + gamma * nxt)))))
    example = returns([0.0, 10.0], 0.9).tolist()
    ok = worst <= 1e-12 and example == [9.0, 10.0]
    assert record(6, ok, f"max |G_t - (r + gamma G_t+1)| = {worst:.1e} over 1000 trajectories (<= 1e-12); "
                         f"[0, 10] with gamma 0.9 -> {example}")


# -- 7, 8, 9: the synthetic benchmark over five seeds -------------------------------------------

@pytest.fixture(scope="module")
def benchmark():
    out = {}
    for seed in SEEDS:
        cfg = config_from_dict({"seed": seed})
        t0 = time.perf_counter()
        pipe = prepare(cfg)
        report = run_experiment(cfg, pipe)
        t_run = time.perf_counter() - t0
        t1 = time.perf_counter()
        sweep = k_sweep(cfg, DEFAULT_K_RATIOS, pipe=pipe)
        out[seed] = dict(cfg=cfg, report=report, sweep=sweep, t_run=t_run, t_sweep=time.perf_counter() - t1)
    return out


@pytest.mark.slow
def test_c7_attack_ordering(benchmark):
    lines, wins, clean_ok = [], 0, True
    for seed, b in benchmark.items():
        rep = b["report"]
        acc = {r.method: r.accuracy for r in rep.rows if r.budget == 5}
        clean = rep.row(0, "clean").accuracy
        clean_ok &= clean >= 0.85
        base = min(acc[m] for m in BASELINES)
        win = acc["krl"] < acc["rl"] < base
        wins += win
        lines.append(f"seed {seed}: clean {clean:.3f} krl {acc['krl']:.3f} rl {acc['rl']:.3f} "
                     f"min-baseline {base:.3f} {'ok' if win else 'out of order'}")
    total = sum(b["t_run"] for b in benchmark.values())
    total_all = total + sum(b["t_sweep"] for b in benchmark.values())
    ok = clean_ok and wins >= 4 and total < 15 * 60
    for line in lines:
        print("   ", line)
    assert record(7, ok, f"krl < rl < min(baselines) at budget 5 in {wins}/5 seeds (>= 4); clean accuracy >= 0.85 "
                         f"{'in all seeds' if clean_ok else 'VIOLATED'}; five full runs {total:.0f}s "
                         f"({total_all:.0f}s with the K sweeps, limit 900s)")


def _sweep_table(sweep):
    """{ratio: {budget: success}}"""
    table = {}
    for r in sweep:
        table.setdefault(r.k_ratio, {})[r.budget] = r.success_rate
    return table


@pytest.mark.slow
def test_c8_k_sweep_trend(benchmark):
    ratios = sorted(DEFAULT_K_RATIOS)
    tables = {seed: _sweep_table(b["sweep"]) for seed, b in benchmark.items()}
    budgets = sorted(tables[0][ratios[0]])
    mean = {(r, bud): np.mean([tables[s][r][bud] for s in tables]) for r in ratios for bud in budgets}
    mono = all(mean[(ratios[-1], bud)] >= mean[(ratios[0], bud)] for bud in budgets)
    slope_wins = abs_wins = 0
    for seed, tab in tables.items():
        curve = [np.mean([tab[r][bud] for bud in budgets]) for r in ratios]
        gains = np.diff(curve)
        slopes = gains / np.diff(ratios)
        slope_wins += int(np.argmax(slopes)) == 0
        abs_wins += int(np.argmax(gains)) == 0
        print(f"    seed {seed}: success by ratio {[round(float(c), 3) for c in curve]}, "
              f"gain per unit ratio {[round(float(s), 1) for s in slopes]}, absolute gain {[round(float(g), 3) for g in gains]}")
    per_budget = ", ".join(f"b={bud}: {mean[(ratios[0], bud)]:.3f} -> {mean[(ratios[-1], bud)]:.3f}" for bud in budgets)
    print(f"    absolute-difference reading: largest step between the two smallest ratios in {abs_wins}/5 seeds")
    ok = mono and slope_wins >= 3
    assert record(8, ok, f"mean success at 0.01 >= at 0.0002 for every budget: {mono} ({per_budget}); "
                         f"largest marginal gain (per unit ratio) between the two smallest ratios in "
                         f"{slope_wins}/5 seeds (>= 3) [absolute step: {abs_wins}/5]")


@pytest.mark.slow
def test_c9_micro_f1_equals_accuracy(benchmark, tmp_path):
    from hetattack.bench.report import read_report
    rows = bad = 0
    for seed, b in benchmark.items():
        path = tmp_path / f"r{seed}.csv"
        b["report"].write(path)
        for r in read_report(path).rows:     # the emitted file, not just the in-memory rows
            rows += 1
            bad += r.micro_f1 != r.accuracy
    assert record(9, bad == 0 and rows > 0, f"micro-F1 == accuracy on {rows - bad}/{rows} emitted rows")


# -- 10 ----------------------------------------------------------------------------------------------

@pytest.mark.slow
def test_c10_bench_run_is_deterministic(benchmark, tmp_path):
    outs = []
    for name in ("a", "b"):
        res = subprocess.run([sys.executable, "-m", "hetattack.cli", "run", "--seed", "0", "--out", str(tmp_path / name)],
                             capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        outs.append((tmp_path / name / "results.csv").read_bytes())
    same_cli = outs[0] == outs[1]
    same_inproc = outs[0] == benchmark[0]["report"].to_csv().encode()
    ok = same_cli and same_inproc
    assert record(10, ok, f"two 'bench run --seed 0' invocations byte-identical: {same_cli}; "
                          f"identical to the in-process seed-0 report: {same_inproc}")
