"""Command-line entry point: ``compfuse {flops,gradcheck,train,generate}``.

Exit codes: 0 success, 1 a check failed, 2 usage or config error (including a
missing checkpoint or image). ``--config`` defaults to ``$COMPFUSE_CONFIG``
when set; otherwise built-in defaults are used.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config

CONFIG_ENV = "COMPFUSE_CONFIG"

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: str | None
    seed: int
    out: str
    version: str


def describe_version() -> str:
    """``git describe``-style version; falls back to the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _config_path(args) -> str | None:
    return args.config if args.config is not None else os.environ.get(CONFIG_ENV) or None


def _load(args) -> RunConfig:
    path = _config_path(args)
    if path is not None and not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    return load_config(path)


def cmd_flops(args) -> int:
    from .cost import VARIANTS, analytic_flops, compare_variants, to_csv, to_table, variant_config

    cfg = _load(args).pipeline
    if args.ntext < 0 or args.ntext > cfg.max_text:
        raise ConfigError("ntext", f"must lie in [0, {cfg.max_text}], got {args.ntext}")
    if args.variant is not None:
        if args.variant not in VARIANTS:
            raise ConfigError("variant", f"must be one of {VARIANTS}")
        reports = [analytic_flops(variant_config(cfg, args.variant), args.ntext)]
    else:
        reports = compare_variants(cfg, args.ntext)
    text = to_csv(reports) if args.csv else to_table(reports)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import pipeline_suite

    cfg = _load(args).pipeline
    results = pipeline_suite(cfg, seed=args.seed, probes=args.probes)
    failed = False
    for r in results:
        bad = r.failing(args.tolerance)
        status = "FAIL" if bad else "ok"
        print(f"{r.group:<16} {status:<4} max_rel_err={r.max_error:.3e} probes={r.probes}")
        for name, err in sorted(bad.items()):
            print(f"    {name}: {err:.3e}")
        failed |= bool(bad)
    return EXIT_CHECK if failed else EXIT_OK


def _write_manifest(out: Path, manifest: RunManifest) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2) + "\n")


def cmd_train(args) -> int:
    from .train import run_curriculum

    run = _load(args)
    tcfg = run.train
    if args.seed is not None:
        tcfg.seed = args.seed
    stages = (1, 2, 3) if args.stage == "all" else (int(args.stage),)
    out = Path(args.out)
    _write_manifest(
        out,
        RunManifest(
            command=" ".join(["compfuse", *sys.argv[1:]]) if args.argv is None else " ".join(args.argv),
            config=_config_path(args),
            seed=tcfg.seed,
            out=str(out),
            version=describe_version(),
        ),
    )
    params = None
    if stages[0] != 1 and args.init is not None:
        params = _load_checkpoint(args.init)
    res = run_curriculum(run.pipeline, tcfg, out, stages=stages, params=params)
    for st, ck in zip(res.stages, res.checkpoints):
        first, last = (st.losses[0], st.losses[-1]) if st.losses else (float("nan"),) * 2
        print(f"stage {st.stage}: loss {first:.4f} -> {last:.4f}  {ck}")
    return EXIT_OK


def _load_checkpoint(path: str):
    from .checkpoint import load_checkpoint

    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_generate(args) -> int:
    from .llm import decode_text, prompt_ids
    from .pipeline import generate
    from .vision import load_image

    params = _load_checkpoint(args.checkpoint)
    if not Path(args.image).is_file():
        raise UsageError(f"image not found: {args.image}")
    ids = generate(params, load_image(args.image), prompt_ids(args.prompt), max_steps=args.max_steps)
    print("ids:", " ".join(map(str, ids)))
    print("text:", decode_text(ids))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="compfuse", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", default=None, help=f"key-value config file (default: ${CONFIG_ENV})")
        return p

    p = with_config(sub.add_parser("flops", help="closed-form multiply-add report"))
    p.add_argument("--ntext", type=int, default=16)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--variant", default=None, help="baseline|compress|cross|decoder|combined")
    g.add_argument("--all", action="store_true", help="all five variants (default)")
    p.add_argument("--csv", action="store_true")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(fn=cmd_flops)

    p = with_config(sub.add_parser("gradcheck", help="finite-difference check of every parameter group"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--probes", type=int, default=100)
    p.set_defaults(fn=cmd_gradcheck)

    p = with_config(sub.add_parser("train", help="run training stages"))
    p.add_argument("--stage", choices=("1", "2", "3", "all"), default="all")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--init", default=None, help="checkpoint to resume from (stages 2, 3)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="greedy generation from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help=".ppm (P6) or .npy (H, W, 3) in [0, 1]")
    p.add_argument("--prompt", default="")
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(fn=cmd_generate)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors already
        return int(e.code or 0)
    args.argv = None if argv is None else ["compfuse", *argv]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
