"""Command-line entry point.

Subcommands: train, eval, ablate, analyze, gradcheck. Exit codes:
0 success, 1 runtime failure, 2 config error. Every command that writes
artifacts copies the resolved config into the output directory.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import model as md
from .config import ConfigError, RunConfig, build_dataset, load_config, resolve_output_dir
from .episodes import EpisodeSpec, substream
from .evaluate import evaluate, variation_csv, variation_suite
from .gradcheck import primitive_checks
from .trainer import ablation_csv, run_ablation, train


def _write_config_copy(cfg: RunConfig) -> Path:
    out = resolve_output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump_yaml())
    return out


def _load_trained(cfg: RunConfig, checkpoint: str) -> md.ModelParams:
    params = md.init_model(substream(cfg.seed, "init"), cfg.model)
    md.apply_variant(params, cfg.ablation)
    md.load_model(checkpoint, params)
    return params


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _write_config_copy(cfg)
    result = train(cfg)
    print(f"trained {cfg.ablation} for {len(result.log_rows) - 1} epochs "
          f"in {result.seconds:.1f}s")
    print(f"log: {result.log_path}")
    if result.best_epoch >= 0:
        print(f"best checkpoint: {result.best_path} "
              f"(val_acc={result.best_val_acc:.4f} at epoch {result.best_epoch})")
    else:
        print(f"best checkpoint: {result.best_path} "
              f"(no validation epochs ran; final weights kept)")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _write_config_copy(cfg)
    params = _load_trained(cfg, args.checkpoint)
    dataset = build_dataset(cfg)
    spec = EpisodeSpec(way=cfg.eval.way, shot=cfg.eval.shot,
                       queries=cfg.eval.queries, split="novel")
    report = evaluate(params, dataset, spec, n_tasks=cfg.eval.n_tasks,
                      seed=cfg.seed, variant=cfg.ablation)
    path = out / "eval.csv"
    path.write_text(report.csv())
    print(f"{report.n_tasks} tasks: accuracy {report.mean_accuracy:.4f} "
          f"+/- {report.ci95:.4f}")
    print(f"wrote {path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _write_config_copy(cfg)
    rows = run_ablation(cfg)
    path = out / "ablation.csv"
    path.write_text(ablation_csv(rows))
    print(f"wrote {path}")
    for row in rows:
        print(f"  {row['variant']}: 1-shot {row['1shot_acc']:.4f} "
              f"5-shot {row['5shot_acc']:.4f}")
    return 0


def cmd_analyze(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _write_config_copy(cfg)
    params = _load_trained(cfg, args.checkpoint)
    dataset = build_dataset(cfg)
    reports = variation_suite(params, dataset, "novel", cfg.analysis.way,
                              cfg.analysis.shot, cfg.analysis.probes, cfg.seed)
    path = out / "variation.csv"
    path.write_text(variation_csv(reports))
    for rep in reports:
        print(f"  {rep.stage}: intra={rep.intra:.5g} inter={rep.inter:.5g} "
              f"ratio={rep.ratio:.5g}")
    print(f"wrote {path}")
    return 0


def cmd_gradcheck(args) -> int:
    results = primitive_checks(seed=args.seed)
    results.append(md.tiny_episode_gradcheck())
    failed = 0
    for res in results:
        print(res.line())
        failed += 0 if res.passed else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewrec",
        description="Few-shot classification via bi-directional feature reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", required=True, help="run config YAML")
        p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                       help="override a config key (repeatable)")

    p = sub.add_parser("train", help="train one model variant")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the novel split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and score every variant")
    common(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("analyze", help="feature variation stats per pipeline stage")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all primitives")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failures map to exit 1
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
