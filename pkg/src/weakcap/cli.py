"""Command-line entry point: ``weakcap <subcommand> [options]``.

Exit status: 0 success, 1 usage error, 2 data or configuration error,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from . import kglink, metrics, pipeline, synth
from .config import REQUIRED_INPUTS, RunConfig, load_config
from .errors import ConfigError, DivergenceError, WeakcapError

log = logging.getLogger("weakcap")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
LOCK_NAME = ".lock"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="weakcap", description="Weakly supervised video captioning by progressive refinement.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def staged(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="run configuration file")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", help="output directory (default: the configured output)")
        sp.add_argument("--force", action="store_true", help="replace an existing output directory")
        return sp

    staged("ingest", "parse the corpus into a vocabulary and triplet store")
    staged("build-kg", "assemble the knowledge graph and write an untrained checkpoint")
    staged("train-kg", "train the knowledge-graph embeddings")
    staged("train", "run the full refinement loop")
    sp = sub.add_parser("caption", help="caption videos with a trained checkpoint")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--checkpoint", required=True, help="captioning checkpoint (.wclm)")
    sp.add_argument("--kg", required=True, help="knowledge-graph checkpoint (.wckg)")
    sp.add_argument("--videos", required=True, help="file with one video id per line")
    sp.add_argument("--output", required=True, help="captions JSON-lines file to write")
    sp = sub.add_parser("evaluate", help="score candidate captions against references")
    sp.add_argument("--cand", required=True)
    sp.add_argument("--refs", required=True)
    sp.add_argument("--report", help="also write the report to this file")
    sp = sub.add_parser("synth", help="write the deterministic toy dataset")
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    return p


def _apply_threads():
    value = os.environ.get("WEAKCAP_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"WEAKCAP_THREADS must be a positive integer, got {value!r}", "WEAKCAP_THREADS") from None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.debug("threadpoolctl unavailable; WEAKCAP_THREADS only bounds our own workers")
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def _prepare_dir(out: Path, force: bool):
    if out.exists() and any(out.iterdir()):
        if (out / LOCK_NAME).exists():
            raise WeakcapError(f"{out} is locked by another run (remove {out / LOCK_NAME} if stale)")
        if not force:
            raise WeakcapError(f"{out} is not empty; pass --force to replace it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


@contextlib.contextmanager
def run_lock(out: Path):
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise WeakcapError(f"{out} is locked by another run") from None
    with os.fdopen(fd, "w") as f:
        f.write(f"{os.getpid()}\n")
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.output = str(Path(args.out).resolve())
    return cfg


def _staged(args):
    cfg = _config(args)
    cfg.check_paths(REQUIRED_INPUTS if args.command == "train" else ("corpus", "embeddings"))
    out = Path(cfg.output)
    _prepare_dir(out, args.force)
    with run_lock(out):
        (out / "config.cfg").write_text(cfg.dumps(), encoding="utf-8")
        if args.command == "train":
            result = pipeline.train(cfg, out)
            print(json.dumps({"best_iteration": result.best_iteration,
                              "best_cider": result.history[result.best_iteration - 1]["cider"],
                              "iterations": len(result.history)}, sort_keys=True))
            return
        data = pipeline.ingest(cfg)
        if args.command == "ingest":
            pipeline.write_ingest(out, data)
            print(json.dumps({"objects": data.vocab.n_objects, "actions": data.vocab.n_actions,
                              "relations": len(data.vocab.relations), "triplets": len(data.triplets),
                              "skipped": len(data.skipped)}, sort_keys=True))
            return
        model = pipeline.build_kg(cfg, data, steps=0 if args.command == "build-kg" else None)
        kglink.save_kg(model, out / "kg.wckg")
        print(json.dumps({"entities": len(model.entities), "relations": len(model.relations),
                          "triplets": len(model.triplets), "s_max": model.s_max}, sort_keys=True))


def _caption(args):
    cfg = _config(args)
    cfg.check_paths(("corpus", "embeddings", "features"))
    rows = pipeline.caption(cfg, args.checkpoint, args.kg, pipeline.read_id_list(args.videos))
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _evaluate(args):
    report = metrics.evaluate(args.cand, args.refs)
    text = json.dumps(report, indent=1, sort_keys=True)
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")


def _synth(args):
    out = Path(args.out)
    _prepare_dir(out, args.force)
    synth.make_toy(out, seed=args.seed)


COMMANDS = {
    "ingest": _staged,
    "build-kg": _staged,
    "train-kg": _staged,
    "train": _staged,
    "caption": _caption,
    "evaluate": _evaluate,
    "synth": _synth,
}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        sys.stderr.write(parser.format_help())
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _apply_threads():
            COMMANDS[args.command](args)
    except DivergenceError as exc:
        log.error("diverged: %s", exc)
        return EXIT_DIVERGED
    except ConfigError as exc:
        log.error("configuration error [%s]: %s", exc.key, exc)
        return EXIT_DATA
    except (WeakcapError, ValueError, OSError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run_cli())
