import math

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from hetattack.bench.config import METHODS, ExperimentConfig, config_from_dict, dump_config, load_config
from hetattack.bench.datasets import AuxSpec, SynthSpec, load_dataset, save_dataset, synth_dataset
from hetattack.bench.experiment import (
    StageError, attack_all, clean_row, k_sweep, prepare, run_experiment, sample_victims, score,
)
from hetattack.bench.metrics import classification_metrics
from hetattack.bench.report import AttackReport, ReportRow, markdown_table, read_report, sweep_csv
from hetattack.errors import ConfigError, DatasetReferenceError, InputError, ParseError
from hetattack.victim import accuracy

from conftest import TINY_CONFIG

# -- synthetic data ------------------------------------------------------------------------------

def test_synth_schema_mirrors_acm():
    ds = synth_dataset(SynthSpec(aux={"Author": AuxSpec(300, 2.0), "Field": AuxSpec(60)}), 0)
    g = ds.graph
    assert g.schema.node_types == ("Paper", "Author", "Field")
    assert g.schema.primary_type == "Paper"
    assert {m.name for m in ds.metapaths} == {"pap", "pfp"}
    assert {t: len(v) for t, v in g.node_ids_by_type.items()} == {"Paper": 600, "Author": 300, "Field": 60}
    assert g.num_classes == 3
    assert np.bincount(g.labels[g.primary_ids]).tolist() == [200, 200, 200]


def test_synth_is_deterministic():
    a = synth_dataset(SynthSpec(n_primary=90), 4).graph
    b = synth_dataset(SynthSpec(n_primary=90), 4).graph
    c = synth_dataset(SynthSpec(n_primary=90), 5).graph
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()


def test_full_homophily_shares_no_aux_node_across_classes():
    ds = synth_dataset(SynthSpec(n_primary=120, homophily=1.0), 0)
    g = ds.graph
    for t in g.schema.auxiliary_types:
        rel = g.schema.edge_between("Paper", t).name
        for a in g.node_ids_by_type[t].tolist():
            papers = g.neighbors(a, rel)
            assert len(set(g.labels[papers].tolist())) <= 1


def test_min_degree_top_up():
    spec = SynthSpec(n_primary=60, aux={"Author": AuxSpec(200, 1.0, min_degree=2), "Field": AuxSpec(5)})
    g = synth_dataset(spec, 0).graph
    for a in g.node_ids_by_type["Author"].tolist():
        assert len(g.neighbors(a, "pa")) >= 2


@pytest.mark.parametrize("kwargs", [dict(n_classes=0), dict(homophily=1.5), dict(n_primary=2),
                                    dict(aux={}), dict(aux={"Author": AuxSpec(2)}),
                                    dict(aux={"Author": AuxSpec(10), "Area": AuxSpec(10)})])
def test_synth_rejects_degenerate_specs(kwargs):
    with pytest.raises(ConfigError):
        synth_dataset(SynthSpec(**kwargs), 0)


def test_default_benchmark_victim_accuracy():
    cfg = ExperimentConfig()
    ds = synth_dataset(cfg.dataset.synth, 0)
    from hetattack.victim import stratified_split, train_victim
    split = stratified_split(ds.graph, 0)
    model = train_victim(ds.graph, split, ds.metapaths, cfg.victim, seed=0)
    assert accuracy(model, ds.graph, split.test) >= 0.85


# -- dataset files -------------------------------------------------------------------------------

def small_dataset():
    return synth_dataset(SynthSpec(n_primary=30, aux={"Author": AuxSpec(20, 2.0), "Field": AuxSpec(4)}), 0)


def test_dataset_round_trip(tmp_path):
    ds = small_dataset()
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.graph.fingerprint() == ds.graph.fingerprint()
    assert back.metapaths == ds.metapaths
    assert back.name == ds.name


def test_missing_labels_file(tmp_path):
    save_dataset(small_dataset(), tmp_path / "d")
    (tmp_path / "d" / "labels.tsv").unlink()
    with pytest.raises(DatasetReferenceError):
        load_dataset(tmp_path / "d")


def test_malformed_row_reports_line(tmp_path):
    save_dataset(small_dataset(), tmp_path / "d")
    path = tmp_path / "d" / "edges.tsv"
    lines = path.read_text().splitlines()
    lines[2] = "1\tnot-a-number\tpa"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as info:
        load_dataset(tmp_path / "d")
    assert info.value.lineno == 3


def test_dangling_edge(tmp_path):
    save_dataset(small_dataset(), tmp_path / "d")
    with open(tmp_path / "d" / "edges.tsv", "a") as fh:
        fh.write("0\t9999\tpa\n")
    with pytest.raises(DatasetReferenceError):
        load_dataset(tmp_path / "d")


# -- metrics -------------------------------------------------------------------------------------

def test_metrics_perfect():
    m = classification_metrics([0, 1, 2], [0, 1, 2])
    assert (m.accuracy, m.micro_f1, m.macro_f1) == (1.0, 1.0, 1.0)


def test_metrics_hand_example():
    m = classification_metrics([0, 0], [0, 1], num_classes=3)
    assert m.accuracy == 0.5 and m.micro_f1 == 0.5
    assert abs(m.macro_f1 - (2 / 3) / 3) <= 1e-15


def test_metrics_errors():
    with pytest.raises(InputError):
        classification_metrics([0, 1], [0])
    with pytest.raises(InputError):
        classification_metrics([], [])
    with pytest.raises(InputError):
        classification_metrics([3], [0], num_classes=3)


@given(st.integers(1, 6).flatmap(lambda c: st.tuples(
    st.just(c), st.lists(st.tuples(st.integers(0, c - 1), st.integers(0, c - 1)), min_size=1, max_size=60))))
@settings(max_examples=300, deadline=None)
def test_micro_f1_is_accuracy(case):
    c, pairs = case
    preds, labels = zip(*pairs)
    m = classification_metrics(preds, labels, c)
    assert m.micro_f1 == m.accuracy
    assert 0.0 <= m.macro_f1 <= 1.0


# -- config --------------------------------------------------------------------------------------

def test_default_config():
    cfg = ExperimentConfig()
    assert cfg.budgets == [1, 3, 5]
    assert cfg.methods == list(METHODS)
    assert cfg.victim_sample == 200
    assert cfg.topk.k_ratio == 0.005


def test_config_yaml_round_trip(tmp_path):
    cfg = config_from_dict({"seed": 7, "agent": {"epochs": 2}, "budgets": [5, 1]})
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    back = load_config(path)
    assert back == cfg
    assert back.budgets == [1, 5] and back.agent.epochs == 2 and back.agent.seed == 7 and back.walk.seed == 7


@pytest.mark.parametrize("data", [{"bogus": 1}, {"agent": {"bogus": 1}}, {"budgets": []}, {"budgets": [0]},
                                  {"methods": []}, {"methods": ["nope"]}, {"k_ratios": [0.0]},
                                  {"dataset": {"synth": {"bogus": 1}}}, {"agent": "x"}, {"victim_sample": 0}])
def test_config_rejects(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("budgets: [1,\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(bad)


# -- experiment ----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny():
    cfg = config_from_dict(TINY_CONFIG)
    return cfg, prepare(cfg, {"embed", "betweenness", "policy"})


def test_victim_sample_is_capped(tiny):
    cfg, pipe = tiny
    assert len(pipe.victims) == 8 and set(pipe.victims.tolist()) <= set(pipe.split.test.tolist())
    assert sample_victims(pipe.split, 1000, 0).tolist() == sorted(pipe.split.test.tolist())


def test_report_shape_and_clean_row(tiny):
    cfg, pipe = tiny
    rep = run_experiment(cfg, pipe)
    assert len(rep.rows) == len(cfg.budgets) * len(cfg.methods) + 1
    clean = rep.row(0, "clean")
    assert clean.accuracy == accuracy(pipe.model, pipe.graph, pipe.victims)
    for r in rep.rows:
        assert r.micro_f1 == r.accuracy
        assert 0 <= r.accuracy <= 1 and 0 <= r.macro_f1 <= 1


@pytest.mark.parametrize("method", METHODS)
def test_budget_prefix_equals_fresh_run(tiny, method):
    cfg, pipe = tiny
    together = attack_all(pipe, method, [1, 2, 3])
    for b in (1, 2, 3):
        alone = attack_all(pipe, method, [b])
        assert [o.preds[b] for o in together] == [o.preds[b] for o in alone]
        assert [o.queries[b] for o in together] == [o.queries[b] for o in alone]


def test_queries_are_monotone_in_budget(tiny):
    cfg, pipe = tiny
    for o in attack_all(pipe, "krl", [1, 2, 3]):
        assert o.queries[1] <= o.queries[2] <= o.queries[3]


def test_base_graph_untouched(tiny):
    cfg, pipe = tiny
    before = pipe.graph.fingerprint()
    for m in METHODS:
        attack_all(pipe, m, [3])
    assert pipe.graph.fingerprint() == before


def test_methods_need_their_stages():
    cfg = config_from_dict(dict(TINY_CONFIG, methods=["random-add"]))
    pipe = prepare(cfg)
    assert pipe.policy is None and pipe.trees is None and pipe.edge_scores is None
    with pytest.raises(ConfigError):
        attack_all(pipe, "rl")
    with pytest.raises(ConfigError):
        attack_all(pipe, "betweenness-add")


def test_k_sweep_rows(tiny):
    cfg, pipe = tiny
    rows = k_sweep(cfg, [0.0002, 0.002, 0.01], pipe=pipe)
    assert len(rows) == 3 * len(cfg.budgets)
    assert all(0.0 <= r.success_rate <= 1.0 for r in rows)


def test_k_sweep_minimum_k_matches_explicit_k_min(tiny):
    cfg, pipe = tiny
    # 80 authors and 6 fields: both ratios give K = k_min = 1
    a = k_sweep(cfg, [0.0002], pipe=pipe)
    b = k_sweep(cfg, [0.001], pipe=pipe)
    assert [r.success_rate for r in a] == [r.success_rate for r in b]


def test_k_sweep_rejects_empty(tiny):
    cfg, pipe = tiny
    with pytest.raises(ConfigError):
        k_sweep(cfg, [], pipe=pipe)


def test_experiment_is_deterministic():
    cfg = config_from_dict(TINY_CONFIG)
    assert run_experiment(cfg).to_csv() == run_experiment(cfg).to_csv()


def test_stage_errors_are_tagged(tmp_path):
    cfg = config_from_dict({"dataset": {"path": str(tmp_path / "nowhere")}})
    with pytest.raises(StageError) as info:
        prepare(cfg)
    assert info.value.stage == "data"
    assert str(info.value).startswith("[data]")


# -- report --------------------------------------------------------------------------------------

def test_report_csv_round_trip(tmp_path):
    rows = [ReportRow("d", 0, 0, "clean", 1.0, 1.0, 1.0, 0.0), ReportRow("d", 0, 1, "rl", 0.5, 0.5, 0.25, 1.5)]
    rep = AttackReport(rows, 2)
    rep.write(tmp_path / "r.csv")
    back = read_report(tmp_path / "r.csv")
    assert back.rows == rows and back.n_victims == 2
    assert back.to_csv() == rep.to_csv()


def test_report_parse_errors(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ParseError):
        read_report(p)
    p.write_text("dataset,seed,budget,method,accuracy,micro_f1,macro_f1,mean_queries\nd,0,x,rl,1,1,1,0\n")
    with pytest.raises(ParseError) as info:
        read_report(p)
    assert info.value.lineno == 2


def test_markdown_table_alignment():
    text = markdown_table(["name", "value"], [["a", "1.5"], ["bb", "10"]])
    assert text.splitlines() == ["| name | value |", "|------|------:|", "| a    |   1.5 |", "| bb   |    10 |"]


def test_sweep_csv_format():
    from hetattack.bench.report import SweepRow
    assert sweep_csv([SweepRow("d", 1, 0.0002, 3, 0.25)]) == "dataset,seed,k_ratio,budget,success_rate\nd,1,0.0002,3,0.250000\n"
