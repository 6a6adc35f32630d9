"""Command-line entry point: ``ridgeflow {extract,synth,bench,validate}``.

Exit codes: 0 success, 1 failed validation group, 2 I/O or parse error,
3 invalid configuration. Every command writes a JSON manifest holding the
fully materialised configuration, so a run can be replayed by passing the
manifest's ``config`` back in as a config file.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import tomli

from . import __version__
from .bench import (Shape, SyntheticSpec, bandwidth_rule, convergence_experiment, generate,
                    scms_gap_experiment, trial_seed)
from .density import PointCloud, write_csv
from .flows import FlowParams, resolve_threads
from .pipeline import ExtractionConfig, extract

EXIT_OK, EXIT_FAILED, EXIT_IO, EXIT_CONFIG = 0, 1, 2, 3
VERSION_TAG = f"v{__version__}"

PRESETS = {
    "gap": {},
    "convergence": {"shape": "circle", "n_list": [200, 800, 3200], "trials": 5},
    "convergence-small": {"shape": "circle", "n_list": [200, 800], "trials": 3},
}
CONVERGENCE_DEFAULTS = {"shape": "circle", "n_list": [200, 800, 3200], "trials": 5,
                        "bandwidth_c": 0.7, "algorithm": "scms", "noise_sigma": 0.05,
                        "base_seed": 0}
GAP_DEFAULTS = {"scms_scale": 0.01, "alg1_a": 0.1, "max_iters": 20000}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _io_error(message):
    return CliError(message, EXIT_IO)


def _config_error(message):
    return CliError(message, EXIT_CONFIG)


def load_config_file(path) -> dict:
    """Read a TOML (or ``.json``) config file into a dict."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise _io_error(f"{path}: {exc.strerror or exc}")
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw.decode("utf-8"))
            if isinstance(data, dict) and "config" in data and "command" in data:
                data = data["config"]  # a manifest
        else:
            data = tomli.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise _io_error(f"{path}:{exc.lineno}: {exc.msg}")
    except tomli.TOMLDecodeError as exc:
        raise _io_error(f"{path}: {exc}")
    except UnicodeDecodeError as exc:
        raise _io_error(f"{path}: not UTF-8 ({exc.reason})")
    if not isinstance(data, dict):
        raise _config_error(f"{path}: top level must be a table")
    return data


def _reject_unknown(data: dict, allowed, where: str):
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise _config_error(f"unknown key(s) in {where}: {', '.join(unknown)}")


def extraction_config_from(data: dict) -> ExtractionConfig:
    """Build an :class:`ExtractionConfig` from a parsed mapping, strictly."""
    fields = {f.name for f in dataclasses.fields(ExtractionConfig)}
    _reject_unknown(data, fields, "config")
    data = dict(data)
    flow = data.pop("flow", {}) or {}
    if not isinstance(flow, dict):
        raise _config_error("'flow' must be a table")
    _reject_unknown(flow, {f.name for f in dataclasses.fields(FlowParams)}, "[flow]")
    try:
        return ExtractionConfig(flow=FlowParams(**flow), **data)
    except (TypeError, ValueError) as exc:
        raise _config_error(f"invalid config: {exc}")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(path, command: str, config: dict, **extra):
    manifest = {"command": command, "version": VERSION_TAG, "config": config, **extra}
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_extract(args) -> int:
    data = load_config_file(args.config) if args.config else {}
    config = extraction_config_from(data)
    if args.threads is not None:
        config.threads = args.threads
    try:
        cloud = PointCloud.from_csv(args.input)
    except OSError as exc:
        raise _io_error(f"{args.input}: {exc.strerror or exc}")
    except ValueError as exc:
        raise _io_error(str(exc))
    try:
        config.validate_for(cloud.d)
    except ValueError as exc:
        raise _config_error(str(exc))

    result = extract(cloud, config)
    out = Path(args.out_dir)
    try:
        result.write(out)
        replay = config.as_dict()
        replay["threads"] = None  # results do not depend on the worker count
        _write_manifest(out / "manifest.json", "extract", replay,
                        input=str(args.input), input_sha256=_sha256(args.input),
                        outputs=["ridge_points.csv", "per_start.csv", "summary.json"],
                        summary=result.summary())
    except OSError as exc:
        raise _io_error(f"{out}: {exc.strerror or exc}")
    print(f"{len(result.ridge_points)} ridge points from {cloud.n} samples -> {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        spec = SyntheticSpec(Shape(args.shape), args.n, args.noise, args.seed)
    except ValueError as exc:
        raise _config_error(f"invalid spec: {exc}")
    cloud, truth = generate(spec)
    out = Path(args.out)
    stem = out.with_suffix("")
    truth_path = stem.parent / f"{stem.name}_truth.csv"
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        cloud.to_csv(out)
        write_csv(truth_path, ["x1", "x2"], truth.points)
        _write_manifest(stem.parent / f"{stem.name}_manifest.json", "synth",
                        {"shape": spec.shape.value, "n": spec.n, "noise_sigma": spec.noise_sigma,
                         "seed": spec.seed},
                        outputs=[out.name, truth_path.name],
                        exclusions=[[list(map(float, c)), float(r)] for c, r in truth.exclusions])
    except OSError as exc:
        raise _io_error(f"{out}: {exc.strerror or exc}")
    print(f"wrote {cloud.n} points to {out}")
    return EXIT_OK


def _bench_convergence(params: dict, out: Path, threads):
    try:
        shape = Shape(params["shape"])
        template = ExtractionConfig(threads=threads)
        rows = convergence_experiment(shape, params["n_list"], bandwidth_rule(params["bandwidth_c"]),
                                      params["algorithm"], int(params["trials"]),
                                      float(params["noise_sigma"]), int(params["base_seed"]),
                                      template)
    except (TypeError, ValueError) as exc:
        raise _config_error(f"invalid bench config: {exc}")
    trials = int(params["trials"])
    header = ["n", "h", "median_dh"] + [f"trial_{t + 1}" for t in range(trials)]
    write_csv(out / "convergence.csv", header, [[r.n, r.h, r.median_dh, *r.trial_dh] for r in rows])
    seeds = {str(n): [trial_seed(int(params["base_seed"]), n, t) for t in range(trials)]
             for n in params["n_list"]}
    return ["convergence.csv"], {"seeds": seeds}


def _bench_gap(params: dict, out: Path, threads):
    try:
        report = scms_gap_experiment(scms_scale=float(params["scms_scale"]),
                                     alg1_a=float(params["alg1_a"]),
                                     max_iters=int(params["max_iters"]), threads=threads)
    except (TypeError, ValueError) as exc:
        raise _config_error(f"invalid bench config: {exc}")
    rows = list(report.as_dict().items())
    write_csv(out / "gap_report.csv", ["metric", "value"], rows)
    return ["gap_report.csv"], {"report": report.as_dict()}


def cmd_bench(args) -> int:
    if args.preset not in PRESETS:
        raise _config_error(f"unknown preset {args.preset!r}; choose from {', '.join(PRESETS)}")
    defaults = GAP_DEFAULTS if args.preset == "gap" else CONVERGENCE_DEFAULTS
    params = {**defaults, **PRESETS[args.preset]}
    if args.config:
        data = load_config_file(args.config)
        _reject_unknown(data, defaults, "bench config")
        params.update(data)
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise _io_error(f"{out}: {exc.strerror or exc}")
    runner = _bench_gap if args.preset == "gap" else _bench_convergence
    outputs, extra = runner(params, out, args.threads)
    _write_manifest(out / "manifest.json", "bench", {"preset": args.preset, **params},
                    outputs=outputs, **extra)
    print(f"bench {args.preset} -> {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    from .validate import run_all

    results = run_all(fault=args.inject_fault)
    ok = all(r.passed for r in results)
    if args.json:
        print(json.dumps({"passed": ok, "groups": [r.as_dict() for r in results]}, indent=2))
    else:
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'} {r.group:12s} worst={r.worst:.3e} tol={r.tolerance:.1e}")
    return EXIT_OK if ok else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ridgeflow", description="Density ridge extraction.")
    parser.add_argument("--version", action="version", version=VERSION_TAG)
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $RIDGE_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract ridge points from a CSV point cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--config", default=None, help="TOML config (or a JSON manifest)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("synth", help="sample a synthetic point cloud")
    p.add_argument("--shape", default="circle", help=", ".join(s.value for s in Shape))
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="run a benchmark preset")
    p.add_argument("--preset", required=True, help=", ".join(PRESETS))
    p.add_argument("--config", default=None, help="TOML overrides for the preset")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("validate", help="run the built-in invariant checks")
    p.add_argument("--json", action="store_true")
    p.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None and args.threads < 1:
            raise _config_error("--threads must be positive")
        if args.threads is None and os.environ.get("RIDGE_THREADS"):
            try:
                args.threads = resolve_threads()
            except ValueError as exc:
                raise _config_error(str(exc))
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
