"""Command-line entry points.

Every command works on a run directory (``--run``). Settings resolve in order:
built-in defaults, the configuration recorded in the run manifest, ``--config
<file>`` (flat ``key = value`` lines) and finally ``--key value`` flags.

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 missing
prerequisite artifact or configuration-hash mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from typing import Optional, Sequence

from . import pipeline
from .datamodel import _coerce, parse_config_text
from .errors import ConfigError, HashMismatch, MissingArtifact, StageOrderError

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_PREREQ = 0, 1, 2, 3

COMMANDS = ("pretrain-encoder", "align", "train-diffusion", "sample", "evaluate", "plot")


def _add_config_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("configuration keys")
    for f in dataclasses.fields(pipeline.RunConfig):
        names = [f"--{f.name}"]
        if "_" in f.name:
            names.append(f"--{f.name.replace('_', '-')}")
        g.add_argument(*names, dest=f"key_{f.name}", default=None, metavar=str(f.type).upper().replace(" ", ""))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semtok", description="Tokenizer alignment and latent diffusion runs.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--run", required=True, help="run directory")
        p.add_argument("--config", default=None, help="flat key = value configuration file")
        p.add_argument("--force", action="store_true", help="overwrite an artifact made under another config")
        p.add_argument("--log-level", default="WARNING")
        if name == "align":
            p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
        if name == "sample":
            p.add_argument("--steps", dest="key_sample_steps", default=None, help="alias of --sample_steps")
            p.add_argument("--cfg", dest="key_cfg_scale", default=None, help="alias of --cfg_scale")
        _add_config_flags(p)
    return parser


def resolve_config(args, manifest_config: Optional[dict] = None):
    fields = {f.name: f for f in dataclasses.fields(pipeline.RunConfig)}
    values = {k: v for k, v in (manifest_config or {}).items() if k in fields}
    rc = pipeline.RunConfig(**values)
    if args.config:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        file_rc = parse_config_text(text, pipeline.RunConfig)
        given = {line.split("=", 1)[0].strip() for line in text.splitlines()
                 if "=" in line.split("#", 1)[0]}
        rc = dataclasses.replace(rc, **{k: getattr(file_rc, k) for k in given})
    overrides = {}
    for name, f in fields.items():
        raw = getattr(args, f"key_{name}", None)
        if raw is not None:
            overrides[name] = _coerce(raw, str(f.type), name)
    return dataclasses.replace(rc, **overrides)


def dispatch(args, run: pipeline.RunDir, rc) -> pipeline.PhaseResult:
    if args.command == "pretrain-encoder":
        return pipeline.pretrain_phase(run, rc, args.force)
    if args.command == "align":
        return pipeline.align_phase(run, rc, args.stage, args.force)
    if args.command == "train-diffusion":
        return pipeline.diffusion_phase(run, rc, args.force)
    if args.command == "sample":
        return pipeline.sample_phase(run, rc, args.force)
    if args.command == "evaluate":
        return pipeline.evaluate_phase(run, rc, args.force)
    return pipeline.plot_phase(run, rc, args.force)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(message)s")
    run = pipeline.RunDir(args.run)
    try:
        with run.lock():
            rc = resolve_config(args, run.manifest().get("config"))
            pipeline.tokenizer_config(rc)
            pipeline.sampler_config(rc)
            run.create()
            result = dispatch(args, run, rc)
    except ConfigError as exc:
        print(f"semtok {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, HashMismatch, StageOrderError) as exc:
        print(f"semtok {args.command}: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except Exception as exc:  # noqa: BLE001 - every other failure maps to one exit code
        print(f"semtok {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    state = "up to date" if result.skipped else "done"
    print(f"{result.name}: {state} ({', '.join(result.artifacts[:3])}{' ...' if len(result.artifacts) > 3 else ''})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
