"""Command-line runner: ``legofl {pretrain,prune,run,compare}``.

Exit codes: 0 ok, 2 config error, 3 missing input, 4 schema mismatch,
5 numeric failure.  Only ``LEGOFL_OUT`` and ``LEGOFL_THREADS`` are read from
the environment; flags take precedence over both.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRESETS, ExperimentConfig, load_config, preset
from .errors import ConfigError, LegoError, MissingInputError, SchemaError
from .evalio import EvalSuite, evaluate, read_header, read_metrics, write_metrics
from .federation import build_clients, make_corpus, pretrain, run_experiment
from .mathcore import Rng

log = logging.getLogger("legofl")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_SCHEMA, EXIT_NUMERIC = 0, 2, 3, 4, 5
INCOMPLETE = "INCOMPLETE"


# ---------------------------------------------------------------- utilities


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class OutDir:
    """Output directory with an INCOMPLETE marker until the ``with`` block exits cleanly."""

    def __init__(self, root: Path, command: str, configs: list[tuple[str, ExperimentConfig]]):
        self.root = root
        self.command = command
        self.configs = configs
        self.files: list[Path] = []

    def __enter__(self) -> "OutDir":
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / INCOMPLETE).write_text(f"{self.command} did not finish; outputs here are partial\n")
        return self

    def add(self, path: Path) -> Path:
        self.files.append(Path(path))
        return path

    def manifest(self, status: str, error: str | None = None) -> Path:
        outputs = {
            str(p.relative_to(self.root)): sha256(p)
            for p in sorted(set(self.files))
            if p.exists()
        }
        doc = {
            "tool": "legofl",
            "version": __version__,
            "command": self.command,
            "status": status,
            "configs": {label: cfg.to_dict() for label, cfg in self.configs},
            "outputs": outputs,
        }
        if error:
            doc["error"] = error
        path = self.root / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.manifest("complete")
            (self.root / INCOMPLETE).unlink(missing_ok=True)
        else:
            self.manifest("incomplete", f"{exc_type.__name__}: {exc}")
        return False


def _threads(args) -> int:
    raw = args.threads if args.threads is not None else os.environ.get("LEGOFL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"thread count must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("thread count must be at least 1")
    return n


def _configs(args) -> list[tuple[str, ExperimentConfig]]:
    if args.config and args.preset:
        raise ConfigError("pass either --config or --preset, not both")
    if args.config:
        cfgs = [(None, load_config(args.config))]
    elif args.preset:
        cfgs = preset(args.preset)
    else:
        raise ConfigError("one of --config or --preset is required")
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfgs = [(label, cfg.replace(seed=args.seed)) for label, cfg in cfgs]
    return [(label or cfg.name, cfg) for label, cfg in cfgs]


def _out_root(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out or os.environ.get("LEGOFL_OUT") or cfg.output_dir)


def _base_path(args, cfg: ExperimentConfig) -> str | None:
    path = args.base if getattr(args, "base", None) else cfg.pretrain.checkpoint
    if path and not Path(path).exists():
        raise MissingInputError(f"checkpoint not found: {path}")
    return path


def _base_for(args, cfg: ExperimentConfig, out: OutDir | None):
    """Load the base named by ``--base`` or the config, else pretrain one."""
    path = _base_path(args, cfg)
    if path:
        base = load_checkpoint(path)
        if base.config != cfg.model:
            raise ConfigError(f"base checkpoint {path} does not match the model section of the config")
        return base, []
    if not cfg.pretrain.enabled:
        raise MissingInputError("no base checkpoint given and pretraining is disabled")
    base, curve = pretrain(cfg, make_corpus(cfg), Rng(cfg.seed, ("base",)))
    if out is not None:
        _write_pretrain(out, base, curve)
    return base, curve


def _write_pretrain(out: OutDir, base, curve) -> None:
    from .plotting import plot_curve

    out.add(save_checkpoint(base, out.root / "base.ckpt"))
    path = out.root / "pretrain_loss.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(curve, start=1):
            w.writerow([i, repr(float(v))])
    out.add(path)
    if curve:
        out.add(plot_curve(curve, out.root / "pretrain_loss.png"))


# ----------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    (label, cfg), *_ = _configs(args)
    with OutDir(_out_root(args, cfg), "pretrain", [(label, cfg)]) as out:
        corpus = make_corpus(cfg)
        base, curve = pretrain(cfg, corpus, Rng(cfg.seed, ("base",)))
        _write_pretrain(out, base, curve)
        if curve:
            print(f"pretrained {len(curve)} steps: loss {curve[0]:.4f} -> {curve[-1]:.4f}")
    print(f"wrote {out.root}")
    return EXIT_OK


def cmd_prune(args) -> int:
    (label, cfg), *_ = _configs(args)
    _base_path(args, cfg)
    with OutDir(_out_root(args, cfg), "prune", [(label, cfg)]) as out:
        base, _ = _base_for(args, cfg, out)
        corpus = make_corpus(cfg)
        state = build_clients(cfg, base, corpus, Rng(cfg.seed, ("experiment",)))
        suite = EvalSuite.from_corpus(corpus, cfg.model.vocab_size)
        records = [evaluate(state.global_model, suite, subject="global")]
        for c in state.clients:
            out.add(save_checkpoint(c.model, out.root / "pruned" / f"client_{c.id}.ckpt"))
            records.append(evaluate(c.model, suite, subject=c.id))
        out.add(write_metrics(records, out.root / "metrics.csv"))
        for r in records:
            print(f"{r.subject:>8}  sparsity-pruned loss {r.average:.4f}")
    return EXIT_OK


def _run_one(out: OutDir, sub: Path, cfg: ExperimentConfig, base, threads: int):
    from .plotting import plot_rounds

    res = run_experiment(cfg, base, threads=threads)
    for c, m in zip(res.clients, res.pruned):
        out.add(save_checkpoint(m, sub / "checkpoints" / "pruned" / f"client_{c.id}.ckpt"))
    for k, g in enumerate(res.round_globals, start=1):
        out.add(save_checkpoint(g, sub / "checkpoints" / f"round_{k:03d}" / "global.ckpt"))
    out.add(save_checkpoint(res.final_model, sub / "checkpoints" / "final.ckpt"))
    out.add(write_metrics(res.records, sub / "metrics.csv"))
    out.add(plot_rounds(res.records, sub / "rounds.png", title=cfg.name))
    return res


def stage_table(res) -> list[dict]:
    """One row per client: sparsity, and loss after pruning, after the last local fine-tune and after the last global update."""
    rows = []
    for c in res.clients:
        hist = {}
        for r in c.history:
            hist.setdefault(r.stage, []).append(r.average)
        rows.append({
            "client": c.id,
            "sparsity": round(c.sparsity_level, 6),
            "pruned": hist["pruned"][0],
            "fine_tuned": hist["fine_tuned"][-1] if "fine_tuned" in hist else float("nan"),
            "globally_updated": hist["globally_updated"][-1] if "globally_updated" in hist else float("nan"),
        })
    return rows


def _write_rows(path: Path, rows: list[dict]) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path


def cmd_run(args) -> int:
    from .plotting import plot_stage_table

    configs = _configs(args)
    threads = _threads(args)
    suite = len(configs) > 1
    _base_path(args, configs[0][1])
    with OutDir(_out_root(args, configs[0][1]), "run", configs) as out:
        base, _ = _base_for(args, configs[0][1], out)
        summary, bars = [], []
        for label, cfg in configs:
            sub = out.root / label if suite else out.root
            if base.config != cfg.model:
                raise ConfigError(f"{label}: model section differs from the shared base")
            res = _run_one(out, sub, cfg, base, threads)
            table = stage_table(res)
            out.add(_write_rows(sub / "stages.csv", table))
            glob = [r.average for r in res.records if r.subject == "global"]
            summary.append({"label": label, "excluded": " ".join(map(str, cfg.exclude_clients)),
                            "global_round0": glob[0], "global_final": glob[-1]})
            bars += [(f"{label}:{t['client']}", t) for t in table]
            print(f"{label}: global loss {glob[0]:.4f} -> {glob[-1]:.4f} over {cfg.federation.rounds} rounds")
            for t in table:
                print(f"  client {t['client']} sparsity {t['sparsity']:.2f}: pruned {t['pruned']:.4f}"
                      f"  fine-tuned {t['fine_tuned']:.4f}  global {t['globally_updated']:.4f}")
        out.add(_write_rows(out.root / "summary.csv", summary))
        out.add(plot_stage_table(bars, out.root / "stages.png", title=args.preset or configs[0][1].name))
    return EXIT_OK


def compare_rows(paths) -> tuple[list[str], list[dict]]:
    """Final global row of each metrics file, with the average's delta to the first file."""
    header = None
    rows = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise MissingInputError(f"metrics file not found: {p}")
        h = read_header(p)
        if header is None:
            header = h
        elif h != header:
            raise SchemaError(f"{p}: header {h} does not match {header}")
        recs = [r for r in read_metrics(p) if r.subject == "global"] or read_metrics(p)
        if not recs:
            raise SchemaError(f"{p}: no metric rows")
        last = max(recs, key=lambda r: r.round)
        label = p.parent.name if p.name == "metrics.csv" else p.stem
        rows.append({"label": label, "round": last.round, **last.values, "average": last.average})
    domains = header[3:-1]
    for r in rows:
        r["delta"] = r["average"] - rows[0]["average"]
    return ["label", "round", *domains, "average", "delta"], rows


def cmd_compare(args) -> int:
    if len(args.metrics) < 2:
        raise ConfigError("compare needs at least two metrics files")
    cols, rows = compare_rows(args.metrics)
    widths = {c: max(len(c), *(len(_fmt(r[c])) for r in rows)) for c in cols}
    print("  ".join(c.rjust(widths[c]) for c in cols))
    for r in rows:
        print("  ".join(_fmt(r[c]).rjust(widths[c]) for c in cols))
    if args.out or os.environ.get("LEGOFL_OUT"):
        root = Path(args.out or os.environ["LEGOFL_OUT"])
        root.mkdir(parents=True, exist_ok=True)
        _write_rows(root / "comparison.csv", rows)
        from .plotting import plot_stage_table

        plot_stage_table([(r["label"], {"globally_updated": r["average"]}) for r in rows], root / "comparison.png")
    return EXIT_OK


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="legofl", description="Prune, federate and recombine tiny language models.")
    p.add_argument("--version", action="version", version=f"legofl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, base=True):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--preset", choices=PRESETS, help="named experiment preset")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory (env LEGOFL_OUT)")
        sp.add_argument("--threads", help="worker threads for local training (env LEGOFL_THREADS)")
        if base:
            sp.add_argument("--base", help="base model checkpoint; skips pretraining")

    common(sub.add_parser("pretrain", help="train the dense base model"), base=False)
    common(sub.add_parser("prune", help="prune the base into client models"))
    common(sub.add_parser("run", help="full federated experiment"))
    c = sub.add_parser("compare", help="tabulate final global metrics of several runs")
    c.add_argument("metrics", nargs="+", help="metrics.csv files")
    c.add_argument("--out", help="also write comparison.csv and a figure here")
    return p


COMMANDS = {"pretrain": cmd_pretrain, "prune": cmd_prune, "run": cmd_run, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except LegoError as e:
        for line in (e.problems if isinstance(e, ConfigError) else [str(e)]):
            print(f"legofl: error: {line}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
