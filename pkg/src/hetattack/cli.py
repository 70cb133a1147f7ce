"""``bench`` command line: train, embed, attack, run, sweep and report."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .bench.config import METHODS, ExperimentConfig, load_config
from .bench.experiment import (
    StageError, attack_all, clean_row, k_sweep, needs, prepare, run_experiment, score, stage,
)
from .bench.report import AttackReport, read_report, sweep_csv
from .errors import HetAttackError
from .n2v import save_embeddings
from .policy import save_policy
from .reinforce import write_curve
from .victim import save_victim

log = logging.getLogger("bench")


def _config(args) -> ExperimentConfig:
    with stage("config"):
        cfg = load_config(args.config) if args.config else ExperimentConfig().with_seed(0)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> None:
    cfg = _config(args)
    pipe = prepare(cfg, {"policy"})
    out = _out(args)
    save_victim(out / "victim.params", pipe.model)
    save_policy(out / "policy.params", pipe.policy)
    write_curve(out / "curve.csv", pipe.curve)
    print(f"wrote {out / 'victim.params'}, {out / 'policy.params'}, {out / 'curve.csv'}")


def cmd_embed(args) -> None:
    cfg = _config(args)
    pipe = prepare(cfg, {"embed"})
    out = _out(args)
    save_embeddings(out / "embeddings.tsv", pipe.embeddings)
    print(f"wrote {out / 'embeddings.tsv'}")


def cmd_attack(args) -> None:
    cfg = _config(args)
    pipe = prepare(cfg, needs([args.method]))
    rows = [clean_row(pipe)] + score(pipe, args.method, attack_all(pipe, args.method, [args.budget]), [args.budget])
    report = AttackReport(rows, len(pipe.victims))
    out = _out(args)
    path = out / f"attack-{args.method}-{args.budget}.csv"
    report.write(path)
    sys.stdout.write(report.to_csv())


def cmd_run(args) -> None:
    cfg = _config(args)
    report = run_experiment(cfg)
    out = _out(args)
    report.write(out / "results.csv")
    (out / "results.md").write_text(report.to_markdown())
    (out / "timings.csv").write_text(report.timings_csv())
    sys.stdout.write(report.to_markdown())


def cmd_sweep(args) -> None:
    cfg = _config(args)
    rows = k_sweep(cfg, args.k_ratios)
    out = _out(args)
    text = sweep_csv(rows)
    (out / "sweep.csv").write_text(text)
    sys.stdout.write(text)


def cmd_report(args) -> None:
    report = read_report(args.input)
    sys.stdout.write(report.to_markdown() if args.format == "md" else report.to_csv())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description="Black-box evasion attack benchmark on heterogeneous graphs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config (defaults are used for missing keys)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", default="bench-out", help="output directory (default: bench-out)")

    sp = sub.add_parser("train", help="train the victim and the attack policy; write checkpoints")
    common(sp)
    sp.set_defaults(func=cmd_train)
    sp = sub.add_parser("embed", help="compute node2vec embeddings of the clean graph")
    common(sp)
    sp.set_defaults(func=cmd_embed)
    sp = sub.add_parser("attack", help="run one method at one budget")
    common(sp)
    sp.add_argument("--method", required=True, choices=METHODS)
    sp.add_argument("--budget", required=True, type=int)
    sp.set_defaults(func=cmd_attack)
    sp = sub.add_parser("run", help="full experiment: every method at every budget")
    common(sp)
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("sweep", help="attack success rate of krl across K ratios")
    common(sp)
    sp.add_argument("--k-ratios", type=float, nargs="+", help="K as a fraction of each auxiliary type's size")
    sp.set_defaults(func=cmd_sweep)
    sp = sub.add_parser("report", help="render a results CSV")
    sp.add_argument("--in", dest="input", required=True, help="results CSV written by 'bench run'")
    sp.add_argument("--format", choices=("md", "csv"), default="md")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "budget", None) is not None and args.budget < 1:
        parser.error("--budget must be a positive integer")
    try:
        args.func(args)
    except StageError as exc:
        print(f"bench {args.command}: error {exc}", file=sys.stderr)
        return 1
    except HetAttackError as exc:
        print(f"bench {args.command}: error [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"bench {args.command}: error [io] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
