"""``asuka-lab <subcommand> --config PATH [--set key=value ...] --seed N``

Exit codes: 0 ok, 2 invalid configuration or inputs, 3 runtime failure,
4 external service failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import traceback
from pathlib import Path

import httpx

from .checkpoint import FrozenViolationError
from .config import ConfigError, load_config
from .judge import JudgeTransportError
from .pipeline import (COMMANDS, SUBCOMMANDS, ExternalServiceError, Run, UsageError, new_run_dir, write_manifest,
                       write_snapshot)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_EXTERNAL = 0, 2, 3, 4

log = logging.getLogger("asuka_lab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="asuka-lab", description="Toy-scale inpainting research pipeline.")
    sub = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, default=None, help="YAML config (defaults apply when omitted)")
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, e.g. --set align.steps=200 (repeatable)")
        s.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
        s.add_argument("--run-root", type=Path, default=None, help="parent of the run directory")
        s.add_argument("--resume", type=Path, default=None, metavar="RUN_DIR",
                       help="continue a partial run in RUN_DIR from its last checkpoint")
        if name == "mask-gen":
            s.add_argument("--n", type=int, default=100)
        if name == "report":
            s.add_argument("--run", type=Path, required=True, help="finished run directory to summarise")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        if getattr(args, "n", 1) < 1:
            raise ConfigError(["--n: must be at least 1"])
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"cannot read config: {e}", file=sys.stderr)
        return EXIT_VALIDATION

    if args.resume:
        if not (args.resume / "config.yaml").exists():
            print(f"--resume: {args.resume} is not a run directory", file=sys.stderr)
            return EXIT_VALIDATION
        run_dir = args.resume
    else:
        run_dir = new_run_dir(args.run_root or cfg.run_root, cfg)
    run = Run(run_dir, args.subcommand, cfg, resume=bool(args.resume))
    write_snapshot(run)
    kwargs = {}
    if args.subcommand == "mask-gen":
        kwargs["n"] = args.n
    if args.subcommand == "report":
        kwargs["target"] = args.run

    t0 = time.time()
    code, status, metrics = EXIT_OK, "ok", {}
    try:
        metrics = COMMANDS[args.subcommand](cfg, run, **kwargs)
    except (UsageError, ConfigError) as e:
        code, status = EXIT_VALIDATION, "invalid"
        print(f"error: {e}", file=sys.stderr)
    except (JudgeTransportError, ExternalServiceError, httpx.HTTPError) as e:
        code, status = EXIT_EXTERNAL, "external-failure"
        print(f"external service error: {e}", file=sys.stderr)
    except (FrozenViolationError, Exception) as e:  # anything else is a runtime failure
        code, status = EXIT_RUNTIME, "failed"
        traceback.print_exc()
        print(f"runtime error: {e}", file=sys.stderr)
    write_manifest(run, metrics, status)
    (run.dir / "timing.json").write_text(json.dumps({"started": t0, "finished": time.time(),
                                                     "seconds": round(time.time() - t0, 3)}))
    log.info("%s -> %s (%s)", args.subcommand, run.dir, status)
    print(run.dir)
    return code


if __name__ == "__main__":
    sys.exit(main())
