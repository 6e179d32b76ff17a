"""Command-line entry point: run pipeline stages, the end-to-end driver, and
the ablation matrix over a JSON config.

Exit codes: 0 success, 1 usage error, 2 missing dependency artifact,
3 provider exhaustion, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .pipeline import (ABLATIONS, STAGE_ORDER, MissingArtifactError, PipelineConfig,
                       ProviderExhaustedError, StaleArtifactError, UsageError,
                       run_ablation, run_pipeline, run_stage)
from .training import NumericalError

log = logging.getLogger("ndrkit")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_MISSING_ARTIFACT = 2
EXIT_PROVIDER = 3
EXIT_NUMERICAL = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we reserve that
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="pipeline config (JSON)")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY.PATH=VALUE",
                        help="override a config field by dotted path (repeatable)")
    parser.add_argument("--force", action="store_true",
                        help="run even if upstream artifacts are stale")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap within-stage parallelism (provider max_in_flight)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ndrkit",
                     description="narrative-driven recommendation pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_stage = sub.add_parser("stage", help="run one pipeline stage")
    p_stage.add_argument("name", choices=STAGE_ORDER)
    _add_common(p_stage)

    p_all = sub.add_parser("pipeline", help="run every stage in order")
    _add_common(p_all)

    p_abl = sub.add_parser("ablation", help="run an ablated pipeline variant")
    p_abl.add_argument("which", choices=list(ABLATIONS))
    _add_common(p_abl)
    return parser


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config, overrides=args.overrides)
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg.raw["provider"]["max_in_flight"] = min(
            cfg.raw["provider"]["max_in_flight"], args.threads)
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _load_config(args)
        if args.command == "stage":
            run_stage(args.name, cfg, force=args.force)
        elif args.command == "pipeline":
            run_pipeline(cfg, force=args.force)
        elif args.command == "ablation":
            table = run_ablation(args.which, cfg, force=args.force)
            print(table.to_text())
        return EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingArtifactError, StaleArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except ProviderExhaustedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
