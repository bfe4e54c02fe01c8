"""Command-line entry point: ``gsdtta <subcommand> ...``.

Exit codes: 0 success, 2 usage/config error, 3 accuracy gate failure,
4 I/O error, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import shutil
import subprocess
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, nn
from .adapt import (
    VARIANTS,
    AdaptationError,
    AdaptConfig,
    ConfigError,
    StreamItem,
    ablation_table,
    adapt_stream,
    run_variants,
)
from .graph import GraphConfig, GraphError, build_outlier_aware_graph
from .pointcloud import (
    CORRUPTIONS,
    DEFAULT_SEVERITY,
    FAMILY_NAMES,
    Corruption,
    CorruptionSpec,
    Family,
    PointCloudError,
    corrupt,
    load_xyz,
    read_manifest,
    synth_chair,
    synth_dataset,
    synth_shape,
    ShapeFamily,
    write_dataset,
)
from .spectral import SpectralError, energy_profile, gft, graph_basis

log = logging.getLogger("gsdtta")

EXIT_OK, EXIT_USAGE, EXIT_GATE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5
THREADS_ENV = "GSDTTA_THREADS"


class UsageError(Exception):
    pass


class GateFailure(Exception):
    pass


class Outputs:
    """Tracks files a command creates so a failed run leaves nothing behind."""

    def __init__(self, root: Path, force: bool = False, must_be_new: bool = False):
        self.root = Path(root)
        self.created_root = not self.root.exists()
        if must_be_new and not self.created_root and any(self.root.iterdir()) and not force:
            raise FileExistsError(f"{self.root} exists and is not empty; pass --force to overwrite")
        self.root.mkdir(parents=True, exist_ok=True)
        self.paths: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.paths.append(p)
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text)
        return p

    def write_json(self, name: str, doc) -> Path:
        return self.write_text(name, json.dumps(doc, indent=1, sort_keys=True) + "\n")

    def cleanup(self) -> None:
        if self.created_root:
            shutil.rmtree(self.root, ignore_errors=True)
            return
        for p in self.paths:
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def read_run_config(path) -> dict:
    """Parse a JSON object or ``key = value`` lines (``#`` comments allowed)."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return doc
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_adapt_config(args) -> AdaptConfig:
    raw = read_run_config(args.config) if getattr(args, "config", None) else {}
    raw.update(_parse_sets(getattr(args, "set", None)))
    if getattr(args, "no_gsdps", False):
        raw["enable_gsdps"] = False
    if getattr(args, "no_gsgma", False):
        raw["enable_gsgma"] = False
    if getattr(args, "no_eigenmap", False):
        raw["eigenmap_guided"] = False
    if getattr(args, "batch_size", None):
        raw["batch_size"] = args.batch_size
    return AdaptConfig.from_mapping(raw)


def _run_json(out: Outputs, command: str, args, config: Optional[dict] = None) -> None:
    # execution-only flags stay out so reports match across thread counts
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "threads", "force", "log_level")}
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in resolved.items()}
    doc = {"command": command, "args": resolved, "version": version_string()}
    if config is not None:
        doc["config"] = config
    out.write_json("run.json", doc)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None else repr(float(x)) if isinstance(x, float) else str(x)


# ----------------------------------------------------------------------------
# Subcommands


def cmd_make_dataset(args) -> int:
    families = [Family.parse(n) for n in args.classes.split(",")] if args.classes else list(Family)
    out = Outputs(args.out, force=args.force, must_be_new=True)
    try:
        items = synth_dataset(families, args.train_per_class, args.test_per_class, args.points, args.seed)
        meta = {
            "classes": [f.name.lower() for f in families],
            "seed": args.seed,
            "n_points": args.points,
        }
        for split in ("train", "test"):
            out.paths.append(out.root / split)
        manifest = write_dataset(out.root, items, meta)
        manifest.save(out.path("manifest.json"))
        _run_json(out, "make-dataset", args)
    except BaseException:
        out.cleanup()
        raise
    print(f"wrote {len(manifest.split('train'))} train + {len(manifest.split('test'))} test clouds to {out.root}")
    return EXIT_OK


def _load_split(manifest, split, centered=True):
    clouds = [manifest.load(e) for e in manifest.split(split)]
    return [c.centered() for c in clouds] if centered else clouds


def cmd_train_source(args) -> int:
    if args.epochs < 1:
        raise UsageError("no training performed: --epochs must be >= 1")
    manifest = read_manifest(args.manifest)
    train = _load_split(manifest, "train")
    test = _load_split(manifest, "test")
    if not train:
        raise UsageError(f"{args.manifest} has no train split")
    n_classes = int(max(c.label for c in train + test)) + 1
    cfg = nn.TrainConfig(args.epochs, args.lr, args.weight_decay, args.batch_size, args.seed, args.label_smoothing)
    out = Outputs(args.out, force=args.force)
    try:
        state, history = nn.train_source(train, cfg, test or None, n_classes)
        nn.save_checkpoint(state, out.path("model.ckpt"))
        header = ["epoch", "loss", "train_acc"] + (["test_acc"] if test else [])
        out.write_text("train_log.csv", _csv_text(header, [[_fmt(r[h]) for h in header] for r in history]))
        _run_json(out, "train-source", args)
    except BaseException:
        out.cleanup()
        raise
    acc = history[-1].get("test_acc")
    print(f"clean test accuracy: {acc if acc is not None else float('nan'):.4f}")
    if acc is not None and acc < args.gate:
        raise GateFailure(f"clean test accuracy {acc:.4f} is below the gate {args.gate:.2f}")
    return EXIT_OK


def _parse_kinds(text: str) -> list[str]:
    if text in ("all", ""):
        return list(CORRUPTIONS)
    kinds = [k.strip() for k in text.split(",")]
    for k in kinds:
        Corruption(k)
    return kinds


def _parse_severities(items) -> dict:
    sev = dict(DEFAULT_SEVERITY)
    for item in items or []:
        key, value = item.split("=", 1)
        Corruption(key)
        sev[key] = float(value)
    return sev


def cmd_corrupt(args) -> int:
    manifest = read_manifest(args.manifest)
    kinds = _parse_kinds(args.kinds)
    severity = _parse_severities(args.severity)
    src = [(e, manifest.load(e)) for e in manifest.split(args.split)]
    if not src:
        raise UsageError(f"{args.manifest} has no {args.split!r} split")
    out = Outputs(args.out, force=args.force, must_be_new=True)
    try:
        entries = []
        for kind in kinds:
            items = [
                ("test", corrupt(cloud, CorruptionSpec(kind, severity[kind], args.seed * 100003 + i)))
                for i, (_, cloud) in enumerate(src)
            ]
            sub = write_dataset(out.root / kind, items, corruption=kind, severity=severity[kind])
            out.paths.append(out.root / kind)
            for e in sub.entries:
                entries.append(type(e)(f"{kind}/{e.path}", e.label, e.split, kind, severity[kind]))
        from .pointcloud import Manifest

        Manifest(entries, out.root, {"kinds": kinds, "severity": {k: severity[k] for k in kinds}, "seed": args.seed}).save(
            out.path("manifest.json")
        )
        _run_json(out, "corrupt", args)
    except BaseException:
        out.cleanup()
        raise
    print(f"wrote {len(entries)} corrupted clouds ({len(kinds)} kinds) to {out.root}")
    return EXIT_OK


def _stream_items(manifest) -> list[StreamItem]:
    items = []
    for e in manifest.entries:
        if e.split != "test":
            continue
        items.append(StreamItem(manifest.load(e).centered(), e.corruption or "clean"))
    if not items:
        raise UsageError("manifest has no test entries")
    return items


def _accuracy_rows(result) -> list[list]:
    table = result.accuracy_table()
    rows = [[k, v["n"], v["source"], v["adapted"]] for k, v in table.items()]
    mean = result.mean_accuracy()
    rows.append(["mean", sum(v["n"] for v in table.values()), mean["source"], mean["adapted"]])
    return rows


def _markdown(header, rows) -> str:
    def cell(x):
        return f"{100 * x:.2f}" if isinstance(x, float) else str(x)

    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(cell(x) for x in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def _report(result, cfg: AdaptConfig) -> dict:
    return {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "batches": result.batches,
        "accuracy": result.accuracy_table(),
        "mean": result.mean_accuracy(),
    }


def _diagnostics_csv(result) -> str:
    header = ["batch", "corruption", "step", "phase", "L_pl", "L_ent", "L_div", "L_cd", "agreement"]
    rows = []
    for b in result.batches:
        for s in b["steps"]:
            rows.append(
                [b["index"], b["corruption"] or "", s["step"], s["phase"]]
                + [_fmt(s[k]) for k in ("pl", "ent", "div", "cd", "agreement")]
            )
    return _csv_text(header, rows)


def cmd_adapt(args) -> int:
    cfg = resolve_adapt_config(args)
    model = nn.load_checkpoint(args.checkpoint)
    items = _stream_items(read_manifest(args.manifest))
    out = Outputs(args.out, force=args.force)
    try:
        result = adapt_stream(items, model, cfg, args.threads)
        out.write_json("report.json", _report(result, cfg))
        out.write_text("diagnostics.csv", _diagnostics_csv(result))
        _run_json(out, "adapt", args, cfg.to_dict())
    except BaseException:
        out.cleanup()
        raise
    mean = result.mean_accuracy()
    print(f"mean accuracy: source-only {mean['source']:.4f}, adapted {mean['adapted']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_adapt_config(args)
    model = nn.load_checkpoint(args.checkpoint)
    items = _stream_items(read_manifest(args.manifest))
    out = Outputs(args.out, force=args.force)
    try:
        names = list(VARIANTS) if args.ablation else ["full"]
        results = run_variants(items, model, cfg, names, args.threads)
        main = results["full"]
        header = ["corruption", "n", "source_only", "adapted"]
        rows = _accuracy_rows(main)
        out.write_text("accuracy.csv", _csv_text(header, [[_fmt(x) for x in r] for r in rows]))
        out.write_text("accuracy.md", _markdown(header, rows))
        out.write_json("report.json", _report(main, cfg))
        out.write_text("diagnostics.csv", _diagnostics_csv(main))
        if args.ablation:
            table = ablation_table(results)
            kinds = list(main.accuracy_table())
            aheader = ["variant", "mean"] + kinds
            arows = [[r[h] for h in aheader] for r in table]
            out.write_text("ablation.csv", _csv_text(aheader, [[_fmt(x) for x in r] for r in arows]))
            out.write_text("ablation.md", _markdown(aheader, arows))
        _run_json(out, "eval", args, cfg.to_dict())
    except BaseException:
        out.cleanup()
        raise
    sys.stdout.write(_markdown(["corruption", "n", "source_only", "adapted"], rows))
    return EXIT_OK


def _spectrum_inputs(args):
    if args.shape == "chair":
        return [("chair", synth_chair(args.points, args.seed))]
    if args.shape:
        return [(args.shape, synth_shape(ShapeFamily(Family.parse(args.shape), args.points), args.seed))]
    clouds = []
    for p in args.inputs:
        clouds.append((Path(p).stem, load_xyz(p)))
    if not clouds:
        raise UsageError("spectrum needs --shape or at least one XYZ file")
    return clouds


def cmd_spectrum(args) -> int:
    gcfg = GraphConfig(args.k, args.delta, args.gamma)
    inputs = _spectrum_inputs(args)
    out = Outputs(args.out, force=args.force)
    summary = []
    try:
        for name, cloud in inputs:
            cloud = cloud.centered()
            basis = graph_basis(build_outlier_aware_graph(cloud, gcfg))
            coeffs = gft(cloud, basis)
            profile = energy_profile(coeffs)
            energy = coeffs**2
            rows = [
                [i, _fmt(float(basis.eigenvalues[i]))] + [_fmt(float(e)) for e in energy[i]] + [_fmt(float(profile[i]))]
                for i in range(cloud.n)
            ]
            header = ["index", "eigenvalue", "energy_x", "energy_y", "energy_z", "cumulative"]
            out.write_text(f"{name}_spectrum.csv", _csv_text(header, rows))
            cut = math.ceil(0.1 * cloud.n)
            summary.append((name, cut, float(profile[cut - 1])))
        _run_json(out, "spectrum", args)
    except BaseException:
        out.cleanup()
        raise
    for name, cut, frac in summary:
        print(f"{name}: cumulative energy fraction over the lowest {cut} components = {frac:.4f}")
    return EXIT_OK


# ----------------------------------------------------------------------------


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _add_adapt_options(p):
    p.add_argument("--config", help="run config (JSON object or key=value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--no-gsdps", action="store_true", help="disable spectral point shift")
    p.add_argument("--no-gsgma", action="store_true", help="disable model adaptation")
    p.add_argument("--no-eigenmap", action="store_true", help="pseudo-labels from deep descriptors only")
    p.add_argument("--force", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsdtta", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or CPU count)")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="synthesize the shape dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--classes", help=f"comma list from {','.join(FAMILY_NAMES)}")
    p.add_argument("--train-per-class", type=int, default=200)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train-source", help="train the source classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--label-smoothing", type=float, default=nn.TrainConfig.label_smoothing)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gate", type=float, default=0.95, help="minimum clean test accuracy")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("corrupt", help="write corrupted copies of a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--kinds", default="all", help=f"comma list from {','.join(CORRUPTIONS)}")
    p.add_argument("--severity", action="append", metavar="KIND=VALUE")
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("adapt", help="run test-time adaptation over a manifest")
    _add_adapt_options(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="source-only vs adapted accuracy table")
    _add_adapt_options(p)
    p.add_argument("--ablation", action="store_true", help="also run the five-variant ablation")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("spectrum", help="graph spectral energy profile per cloud")
    p.add_argument("inputs", nargs="*", help="XYZ files")
    p.add_argument("--shape", help=f"synthesize instead: chair or one of {','.join(FAMILY_NAMES)}")
    p.add_argument("--points", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=0.6)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_spectrum)
    return parser


# order matters: several of these subclass ValueError
_ERROR_MAP = (
    (GateFailure, EXIT_GATE, "gate failure"),
    ((OSError, json.JSONDecodeError, nn.CheckpointError, PointCloudError), EXIT_IO, "I/O error"),
    ((ArithmeticError, GraphError, SpectralError, AdaptationError, nn.NumericError), EXIT_NUMERIC, "numeric failure"),
    ((UsageError, ConfigError, ValueError, KeyError), EXIT_USAGE, "error"),
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is None:
        args.threads = default_threads()
    try:
        # BLAS stays single-threaded so results never depend on --threads
        with threadpool_limits(limits=1):
            return args.func(args)
    except Exception as exc:
        for types, code, prefix in _ERROR_MAP:
            if isinstance(exc, types):
                print(f"{prefix}: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
