"""Command-line entry point: ``p2i <subcommand> [flags]``.

Exit status is 0 on success, 1 on a domain error (a JSON object with
``error`` and ``message`` goes to stderr) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .attack import Scheme
from .errors import MissingCheckpoint, P2IError

logger = logging.getLogger("p2i")


def _ids(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--ids expects comma-separated integers: {exc}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="p2i", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, needs_data=False, needs_checkpoint=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="RunConfig JSON (defaults to the upstream one)")
        p.add_argument("--out-dir", type=Path, required=True)
        p.add_argument("--force", action="store_true", help="replace an existing output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker threads across identities")
        if needs_data:
            p.add_argument("--data-manifest", type=Path, required=True,
                           help="upstream stage directory or its manifest.json")
        if needs_checkpoint:
            p.add_argument("--checkpoint", type=Path, required=True,
                           help="train directory or checkpoint path")
        return p

    command("bench-init", "render the benchmark and train its classifiers")
    command("select", "score public images with the target and keep the top n", needs_data=True)
    command("train", "fit the encoder on the selected set", needs_data=True)
    p = command("attack", "reconstruct identities from a trained encoder",
                needs_data=True, needs_checkpoint=True)
    p.add_argument("--scheme", choices=[s.value for s in Scheme], default=Scheme.ALIGNED_ENSEMBLE.value)
    p.add_argument("--m", type=float, default=None, help="enhancement (defaults to the config)")
    p.add_argument("--ids", type=_ids, default=None, help="comma-separated identities")
    command("eval", "score reconstructions with the evaluation classifier", needs_data=True)
    p = command("interpolate", "latent distance traces along the target dimension",
                needs_data=True, needs_checkpoint=True)
    p.add_argument("--ids", type=_ids, default=None, help="comma-separated identities")
    p = command("report", "per-phase target query counts")
    p.add_argument("--data-manifest", type=Path, action="append", required=True,
                   help="stage directory to account for (repeatable)")
    command("e2e", "run every stage under one config")
    return parser


def run(args: argparse.Namespace) -> None:
    pipeline.pin_torch_threads()
    upstream = getattr(args, "data_manifest", None)
    if isinstance(upstream, list):
        upstream = upstream[0]
    if args.command in ("attack", "interpolate"):
        # the checkpoint guard comes first: nothing useful happens without one
        ckpt = pipeline.resolve_checkpoint(args.checkpoint)
        if not Path(str(ckpt) + ".json").exists():
            raise MissingCheckpoint(f"no checkpoint at {ckpt}")
    cfg = pipeline.resolve_config(args.config, upstream if args.command != "bench-init" else None)
    out = pipeline.prepare_out_dir(args.out_dir, args.command, args.force)
    if args.command == "bench-init":
        result = pipeline.bench_init(cfg, out)
    elif args.command == "select":
        result = {"selected": len(pipeline.select(cfg, args.data_manifest, out))}
    elif args.command == "train":
        result = pipeline.train(cfg, args.data_manifest, out)
        result = {k: result[k] for k in ("steps", "checkpoint_hash", "generator_unchanged")}
    elif args.command == "attack":
        results = pipeline.attack(cfg, args.checkpoint, args.data_manifest, out,
                                  args.scheme, args.m, args.ids, args.jobs)
        result = {"attacked": len(results), "scheme": args.scheme}
    elif args.command == "eval":
        result = pipeline.evaluate_stage(cfg, args.data_manifest, out).summary()
    elif args.command == "interpolate":
        result = pipeline.interpolate(cfg, args.checkpoint, args.data_manifest, out, args.ids)
        result = {"mean_spearman": result["mean_spearman"], "traces": len(result["identities"])}
    elif args.command == "report":
        result = pipeline.report(cfg, args.data_manifest, out)
    else:
        result = pipeline.e2e(cfg, out, args.jobs)
    print(json.dumps(result, indent=2))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        run(args)
    except P2IError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
