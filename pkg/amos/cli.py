"""
命令行入口：gen-data / pretrain / probe / export / check-grad
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from amos.errors import AmosError, ConfigError
from amos.settings import TrainConfig, resolve_config, write_snapshot

logger = logging.getLogger("amos")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(out_dir: Optional[Path], verbose: bool) -> None:
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(stream)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(out_dir / "run.log", encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(file_handler)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amos", description="Adversarial multi-head ELECTRA-style pretraining at desk scale")
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser, out_default: str) -> None:
        sub.add_argument("--config", type=Path, default=None, help="JSON config file")
        sub.add_argument("--out", type=Path, default=Path(out_default), help="output directory")
        sub.add_argument("--seed", type=int, default=None, help="seed override")
        sub.add_argument("--verbose", action="store_true", help="debug logging")

    gen = commands.add_parser("gen-data", help="generate the synthetic corpus and vocab")
    common(gen, "data")

    pretrain = commands.add_parser("pretrain", help="joint generator/discriminator pretraining")
    common(pretrain, "output/pretrain")
    pretrain.add_argument("--mode", default=None, help="curriculum mode override, e.g. single_head:3")
    pretrain.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")

    probe = commands.add_parser("probe", help="linear probes on frozen features")
    common(probe, "output/probe")
    probe.add_argument("--checkpoint", type=Path, required=True)
    probe.add_argument("--source", action="append", default=None,
                       help="feature source (generator:<d>, generator_trunk:<l>, discriminator:<l>); repeatable")
    probe.add_argument("--workers", type=int, default=1)

    export = commands.add_parser("export", help="plot-ready CSVs and charts from metrics files")
    common(export, "output/analysis")
    export.add_argument("--metrics", type=Path, nargs="+", required=True)

    check = commands.add_parser("check-grad", help="finite-difference check of the full joint loss")
    common(check, "output/check-grad")
    check.add_argument("--mode", default=None)
    check.add_argument("--epsilon", type=float, default=None)
    return parser


def _resolve(args: argparse.Namespace) -> TrainConfig:
    overrides = {"seed": args.seed, "mode": getattr(args, "mode", None)}
    return resolve_config(args.config, overrides)


def _progress() -> bool:
    return sys.stderr.isatty()


def cmd_gen_data(args: argparse.Namespace, config: TrainConfig) -> int:
    from amos.data import GrammarSpec, build_vocab, generate_synthetic_corpus

    spec = GrammarSpec(min_length=config.min_length, max_length=config.max_length,
                       label_prior=config.label_prior,
                       seed=args.seed if args.seed is not None else config.data_seed)
    corpus_path = args.out / "corpus.txt"
    generate_synthetic_corpus(spec, config.corpus_size, corpus_path, progress=_progress())
    vocab = build_vocab(corpus_path)
    vocab.save(args.out / "vocab.txt")
    logger.info("wrote %d sequences and a vocab of %d tokens to %s", config.corpus_size, len(vocab), args.out)
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace, config: TrainConfig) -> int:
    from amos.trainer import run_pretraining

    result = run_pretraining(config, args.out, resume=str(args.resume) if args.resume else None,
                             progress=_progress(),
                             config_path=str(args.config) if args.config else None)
    print(f"checkpoint: {result.checkpoint}")
    print(f"metrics: {result.metrics} ({result.records} records)")
    return EXIT_OK


def cmd_probe(args: argparse.Namespace, config: TrainConfig) -> int:
    from amos.probe import FeatureSource, run_probe_suite

    sources = [FeatureSource.parse(s) for s in args.source] if args.source else None
    reports = run_probe_suite(args.checkpoint, config.corpus, config.vocab, sources=sources,
                              out_path=args.out / "probe_report.csv", workers=args.workers,
                              progress=_progress())
    for report in reports:
        print(f"{report.task} {report.source}: test {report.test_acc:.4f} "
              f"(majority {report.majority_baseline:.4f}, random init {report.randinit_baseline:.4f})")
    return EXIT_OK


def cmd_export(args: argparse.Namespace, config: TrainConfig) -> int:
    from amos.analysis import export_analysis, render_charts

    export = export_analysis(args.metrics, args.out)
    chart = render_charts(args.metrics, args.out / "charts.png")
    for path in [export.histogram, *export.gamma, export.accuracy, chart]:
        if path is not None:
            print(path)
    return EXIT_OK


def cmd_check_grad(args: argparse.Namespace, config: TrainConfig) -> int:
    from amos.gradcheck import DEFAULT_EPSILON, TOLERANCE, run_gradient_suite

    result = run_gradient_suite(config, epsilon=args.epsilon or DEFAULT_EPSILON)
    for owner, error in sorted(result.group_errors.items()):
        print(f"{owner}: {error:.3e}")
    print(f"max relative error: {result.max_error:.3e}")
    for failure in result.report.failures:
        print(f"failure: {failure}")
    return EXIT_OK if result.passed(TOLERANCE) else EXIT_FAILURE


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "export": cmd_export,
    "check-grad": cmd_check_grad,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    # 配置校验通过之前不创建输出目录
    setup_logging(None, args.verbose)
    try:
        config = _resolve(args)
        setup_logging(args.out, args.verbose)
        write_snapshot(config, args.out)
        return COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AmosError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as exc:
        from error_logger import ErrorLogger

        # pretrain 在训练循环内已写过报告
        if args.command != "pretrain":
            log = ErrorLogger.create_error_log(error=exc, stage=args.command, run_params=vars(args))
            ErrorLogger.save_to_file(log, str(args.out / "logs"))
        print(f"error[internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
