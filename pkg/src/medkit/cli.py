"""Command-line front end.

Every invocation produces one JSON run report (``schema_version`` 1). Only
the ``generated_at`` key varies between identical runs; exit status is 0 iff
the report lists no errors.

Global options may also come from the environment: ``MEDKIT_OUTPUT_DIR``,
``MEDKIT_JOBS``, ``MEDKIT_SEED``, ``MEDKIT_JUDGE`` and ``MEDKIT_CONFIG``.
Command-line values win over the environment, which wins over ``--config``.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__, volume
from .jsonl import JsonlError, write_json
from .stages import DEFAULT_OUTPUT, STAGES, StageError

SCHEMA_VERSION = 1
ENV_PREFIX = "MEDKIT_"
PATH_KEYS = ("input", "pred", "gold", "volume", "labels", "projection")

log = logging.getLogger("medkit")


class ConfigError(ValueError):
    pass


class RunReport:
    def __init__(self, command: str):
        self.command = command
        self.stages: List[dict] = []
        self.errors: List[dict] = []

    def record(self, name: str, kind: str, fn, params: dict, jobs: int) -> bool:
        try:
            stats = fn(params, jobs=jobs)
        except (StageError, JsonlError, volume.VolumeError, ValueError, KeyError, OSError, RuntimeError) as exc:
            msg = f"{type(exc).__name__}: {exc}"
            self.stages.append({"name": name, "type": kind, "status": "error", "error": msg})
            self.errors.append({"stage": name, "message": msg})
            return False
        self.stages.append({"name": name, "type": kind, "status": "ok", "stats": stats})
        return True

    def fail(self, stage: Optional[str], message: str) -> None:
        self.errors.append({"stage": stage, "message": message})

    @property
    def exit_code(self) -> int:
        return 1 if self.errors else 0

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "tool_version": __version__,
            "command": self.command,
            "generated_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "stages": self.stages,
            "errors": self.errors,
        }


# -- pipeline ---------------------------------------------------------------

def load_pipeline_config(path) -> dict:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    stages = cfg.get("stages", [])
    if not isinstance(stages, list):
        raise ConfigError("'stages' must be a list")
    names = set()
    for i, st in enumerate(stages):
        if not isinstance(st, dict) or "type" not in st:
            raise ConfigError(f"stage #{i} needs a 'type'")
        if st["type"] not in STAGES:
            raise ConfigError(f"stage #{i}: unknown type {st['type']!r}")
        name = st.setdefault("name", st["type"])
        if name in names:
            raise ConfigError(f"duplicate stage name {name!r}")
        names.add(name)
    return cfg


def _resolve_params(st: dict, base: Path, out_dir: Path, produced: dict) -> dict:
    params = {k: v for k, v in st.items() if k not in ("name", "type")}
    for key in PATH_KEYS:
        v = params.get(key)
        if isinstance(v, str):
            if v.startswith("@"):
                ref = v[1:]
                if ref not in produced:
                    raise StageError(f"{key} refers to stage {ref!r} which has not produced output")
                params[key] = produced[ref]
            elif not Path(v).is_absolute():
                params[key] = str(base / v)
    kind, name = st["type"], st["name"]
    if kind == "drr":
        params["out_prefix"] = str(out_dir / params.get("out_prefix", name))
    elif "output" in params:
        params["output"] = str(out_dir / params["output"])
    else:
        params["output"] = str(out_dir / DEFAULT_OUTPUT[kind].format(name=name))
    return params


def run_pipeline(config_path, output_dir=None, jobs: int = 1, seed: Optional[int] = None):
    """Run every stage in order; returns (exit_code, report_path, report_dict)."""
    report = RunReport("run")
    config_path = Path(config_path)
    try:
        cfg = load_pipeline_config(config_path)
    except ConfigError as exc:
        report.fail(None, str(exc))
        out = Path(output_dir or ".")
        out.mkdir(parents=True, exist_ok=True)
        path = out / "report.json"
        data = report.to_dict()
        write_json(path, data)
        return report.exit_code, path, data
    base = config_path.parent
    out_dir = Path(output_dir) if output_dir else base / cfg.get("output_dir", "out")
    out_dir.mkdir(parents=True, exist_ok=True)
    produced = {}
    for st in cfg.get("stages", []):
        try:
            params = _resolve_params(st, base, out_dir, produced)
        except StageError as exc:
            report.fail(st["name"], str(exc))
            break
        if not report.record(st["name"], st["type"], STAGES[st["type"]], params, jobs):
            break
        outs = report.stages[-1]["stats"].get("outputs") or []
        if outs:
            produced[st["name"]] = outs[0]
    data = report.to_dict()
    data["seed"] = cfg.get("seed", seed)
    path = out_dir / "report.json"
    write_json(path, data)
    return report.exit_code, path, data


# -- phantoms ---------------------------------------------------------------

def make_phantom(kind: str, out_prefix, size: int = 32, seed: int = 0, with_labels: bool = False) -> List[str]:
    """Write a synthetic CT (and optional label volume) as header + raw pairs."""
    rng = np.random.default_rng(seed)
    if kind == "slab":
        hu = np.zeros((size, size, 100), dtype=np.int16)
        labels = np.zeros_like(hu)
        labels[size // 4: size // 2, size // 4: size // 2, 40:60] = 1
    elif kind == "sphere":
        g = np.arange(size) - (size - 1) / 2.0
        x, y, z = np.meshgrid(g, g, g, indexing="ij")
        r2 = x * x + y * y + z * z
        hu = np.where(r2 <= (0.35 * size) ** 2, 0, -1000).astype(np.int16)
        labels = (r2 <= (0.15 * size) ** 2).astype(np.int16)
        labels[: size // 4, : size // 4, : size // 4] = 2
    elif kind == "random":
        hu = rng.integers(-1000, 1001, size=(size, size, size)).astype(np.int16)
        labels = rng.integers(0, 4, size=(size, size, size)).astype(np.int16)
        labels[rng.random(labels.shape) < 0.9] = 0
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    prefix = Path(out_prefix)
    written = [str(volume.save_volume(volume.make_volume(hu), prefix.with_name(prefix.name + ".json")))]
    if with_labels:
        written.append(str(volume.save_volume(volume.make_volume(labels),
                                              prefix.with_name(prefix.name + ".labels.json"))))
    return written


# -- argument parsing -------------------------------------------------------

def _global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="JSON config (pipeline for `run`, option defaults otherwise)")
    parser.add_argument("--output-dir", default=d)
    parser.add_argument("--jobs", type=int, default=d)
    parser.add_argument("--seed", type=int, default=d)
    parser.add_argument("--report", default=d, help="write the run report here instead of stderr")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)

    p = argparse.ArgumentParser(prog="medkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"medkit {__version__}")
    _global_options(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    cur = sub.add_parser("curate", parents=[common], help="quality filters, dedup, tags, CoT validation")
    cur.add_argument("action", choices=["filter", "dedup", "tags", "cot"])
    cur.add_argument("--input")
    cur.add_argument("--output")

    pk = sub.add_parser("pack", parents=[common], help="best-fit sequence packing")
    pk.add_argument("--max-len", type=int)
    pk.add_argument("--input")
    pk.add_argument("--output")

    dr = sub.add_parser("drr", parents=[common], help="radiograph + label boxes from a CT volume")
    dr.add_argument("--volume")
    dr.add_argument("--labels")
    dr.add_argument("--projection", help="projection config JSON")
    dr.add_argument("--axis", choices=["X", "Y", "Z"])
    dr.add_argument("--angle", type=float, dest="angle_deg")
    dr.add_argument("--step-mm", type=float)
    dr.add_argument("--rotate-about", choices=["X", "Y", "Z"])
    dr.add_argument("--i0", type=float)
    dr.add_argument("--mu-water", type=float)
    dr.add_argument("--format", choices=["pgm", "png"])
    dr.add_argument("--no-invert", action="store_true", default=None)
    dr.add_argument("--out-prefix")

    mt = sub.add_parser("metrics", parents=[common], help="Dice/IoU on RLE masks, Precision@IoU on boxes")
    mt.add_argument("kind", choices=["seg", "det"])
    mt.add_argument("--input")
    mt.add_argument("--thresh", type=float)
    mt.add_argument("--output")

    ev = sub.add_parser("eval", parents=[common], help="document benchmark and report-text scoring")
    ev.add_argument("task", choices=["ltr-full", "ltr-simple", "ltr-complex", "gmd", "report-metrics"])
    ev.add_argument("--pred")
    ev.add_argument("--gold")
    ev.add_argument("--output")
    ev.add_argument("--judge", help="external judge command (JSON on stdin, {score} on stdout)")

    rn = sub.add_parser("run", parents=[common], help="run a pipeline config")
    rn.add_argument("pipeline", nargs="?", help="pipeline config (defaults to --config)")

    ph = sub.add_parser("phantom", parents=[common], help="write a synthetic test volume")
    ph.add_argument("kind", choices=["slab", "sphere", "random"])
    ph.add_argument("--size", type=int)
    ph.add_argument("--labels", action="store_true", default=None)
    ph.add_argument("--out-prefix")
    return p


_DEFAULTS = {"jobs": 1, "seed": 0, "output_dir": ".", "thresh": 0.5, "format": "pgm", "size": 32}


def _apply_layers(args: argparse.Namespace) -> argparse.Namespace:
    env = {
        "output_dir": os.environ.get(ENV_PREFIX + "OUTPUT_DIR"),
        "jobs": os.environ.get(ENV_PREFIX + "JOBS"),
        "seed": os.environ.get(ENV_PREFIX + "SEED"),
        "judge": os.environ.get(ENV_PREFIX + "JUDGE"),
        "config": os.environ.get(ENV_PREFIX + "CONFIG"),
    }
    for key, val in env.items():
        if val is not None and getattr(args, key, None) is None and (key != "judge" or hasattr(args, "judge")):
            setattr(args, key, int(val) if key in ("jobs", "seed") else val)
    if args.config and args.command != "run":
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        section = cfg.get(args.command, cfg) if isinstance(cfg, dict) else {}
        for key, val in section.items():
            key = key.replace("-", "_")
            if hasattr(args, key) and getattr(args, key) is None:
                setattr(args, key, val)
    for key, val in _DEFAULTS.items():
        if key == "output_dir" and args.command == "run":
            continue  # the pipeline config supplies it
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, val)
    return args


def _out(args, value: Optional[str], default_name: str) -> str:
    path = Path(value or default_name)
    return str(path if path.is_absolute() or value else Path(args.output_dir) / path)


def _emit(report_dict: dict, args) -> None:
    text = json.dumps(report_dict, ensure_ascii=False, sort_keys=True, indent=2)
    if getattr(args, "report", None):
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text + "\n")
    else:
        print(text, file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _apply_layers(args)
    except ConfigError as exc:
        print(f"medkit: {exc}", file=sys.stderr)
        return 2

    if args.command == "run":
        cfg = args.pipeline or args.config
        if not cfg:
            parser.error("run needs a pipeline config")
        code, path, data = run_pipeline(cfg, output_dir=args.output_dir, jobs=args.jobs, seed=args.seed)
        print(str(path))
        if args.report:
            _emit(data, args)
        return code

    report = RunReport(args.command)
    if args.command == "curate":
        name = args.action
        params = {"input": args.input, "output": _out(args, args.output, f"{name}.jsonl")}
        report.record(name, name, STAGES[name], params, args.jobs)
    elif args.command == "pack":
        params = {"input": args.input, "max_len": args.max_len, "output": _out(args, args.output, "plan.json")}
        report.record("pack", "pack", STAGES["pack"], params, args.jobs)
    elif args.command == "drr":
        proj = args.projection
        overrides = {k: getattr(args, k) for k in ("axis", "angle_deg", "step_mm", "rotate_about", "i0")
                     if getattr(args, k) is not None}
        if overrides:
            base = {}
            if isinstance(proj, str):
                base = json.loads(Path(proj).read_text())
            elif isinstance(proj, dict):
                base = proj
            proj = {**base, **overrides}
        params = {"volume": args.volume, "labels": args.labels, "projection": proj,
                  "out_prefix": _out(args, args.out_prefix, "drr"), "format": args.format,
                  "invert": not args.no_invert}
        if args.mu_water is not None:
            params["mu_water"] = args.mu_water
        report.record("drr", "drr", STAGES["drr"], params, args.jobs)
    elif args.command == "metrics":
        params = {"kind": args.kind, "input": args.input, "thresh": args.thresh,
                  "output": _out(args, args.output, f"metrics-{args.kind}.json")}
        report.record("metrics", "metrics", STAGES["metrics"], params, args.jobs)
    elif args.command == "eval":
        params = {"task": args.task, "pred": args.pred, "gold": args.gold, "judge": args.judge,
                  "output": _out(args, args.output, f"eval-{args.task}.json")}
        report.record("eval", "eval", STAGES["eval"], params, args.jobs)
    elif args.command == "phantom":
        try:
            written = make_phantom(args.kind, _out(args, args.out_prefix, args.kind), args.size, args.seed,
                                   bool(args.labels))
            report.stages.append({"name": "phantom", "type": "phantom", "status": "ok",
                                  "stats": {"seed": args.seed, "outputs": written}})
        except (ValueError, OSError) as exc:
            report.fail("phantom", str(exc))
    _emit(report.to_dict(), args)
    return report.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
