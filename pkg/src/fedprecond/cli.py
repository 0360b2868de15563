"""Command-line entry point: ``fedprecond run | diag | plotdata | validate-config``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import struct
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import config_hash, config_to_dict, parse_config
from .dataplane import gen_quadratics
from .diagnostics import covariance_reduction_mc, divergence_trace, noise_isotropy
from .engine import METRIC_FIELDS, MetricsRecord, Simulation
from .errors import ClientFailure, ConfigError, FedPrecondError
from .numkit import RngStream

log = logging.getLogger("fedprecond")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
FPW1_MAGIC = b"FPW1"


def format_value(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".17g")


def metrics_csv(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for r in records:
        row = r.as_dict()
        writer.writerow([format_value(row[f]) for f in METRIC_FIELDS])
    return buf.getvalue()


def metrics_jsonl(records: list[MetricsRecord], error: dict | None = None) -> str:
    lines = [json.dumps({"type": "metrics", **r.as_dict()}) for r in records]
    if error is not None:
        lines.append(json.dumps(error))
    return "".join(line + "\n" for line in lines)


def weights_bytes(w: np.ndarray) -> bytes:
    return FPW1_MAGIC + struct.pack("<I", w.size) + np.asarray(w, dtype="<f8").tobytes()


def read_weights(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FPW1_MAGIC:
        raise ConfigError(f"{path}: not an FPW1 weights file")
    (d,) = struct.unpack_from("<I", raw, 4)
    return np.frombuffer(raw, dtype="<f8", count=d, offset=8).astype(np.float64)


class AtomicOutputs:
    """Stage output files in temporaries and rename them into place together."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.staged: list[tuple[str, Path]] = []

    def stage(self, name: str, data: str | bytes) -> None:
        mode = "wb" if isinstance(data, bytes) else "w"
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.out_dir)
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        self.staged.append((name, Path(tmp)))

    def commit(self) -> list[str]:
        paths = []
        for name, tmp in self.staged:
            final = self.out_dir / name
            os.replace(tmp, final)
            paths.append(str(final))
        self.staged.clear()
        return paths

    def discard(self) -> None:
        for _, tmp in self.staged:
            tmp.unlink(missing_ok=True)
        self.staged.clear()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def cmd_run(config_path, out_dir, seed: int | None = None) -> int:
    started = _now()
    try:
        cfg = parse_config(config_path)
        if seed is not None:
            cfg = cfg.replace(seed=seed)
        sim = Simulation(cfg)
    except (FedPrecondError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = AtomicOutputs(out)
    records: list[MetricsRecord] = []
    error = None
    try:
        for rec in sim.run():
            records.append(rec)
    except ClientFailure as exc:
        error = exc.to_record()

    manifest = {
        "config_hash": config_hash(cfg),
        "config": config_to_dict(cfg),
        "artifact_version": __version__,
        "started_at": started,
        "status": "ok" if error is None else "aborted",
    }
    try:
        outputs.stage("metrics.jsonl", metrics_jsonl(records, error))
        if error is None:
            outputs.stage("metrics.csv", metrics_csv(records))
            if cfg.save_weights:
                outputs.stage("final_weights.bin", weights_bytes(sim.server.w))
        manifest["outputs"] = [str(out / name) for name, _ in outputs.staged] + [str(out / "manifest.json")]
        manifest["finished_at"] = _now()
        outputs.stage("manifest.json", json.dumps(manifest, indent=2) + "\n")
        outputs.commit()
    except BaseException:
        outputs.discard()
        raise
    if error is not None:
        print(f"error: run aborted: {error['message']}", file=sys.stderr)
        return EXIT_ABORT
    print(f"wrote {len(records)} records to {out}")
    return EXIT_OK


def _write_json(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    outputs = AtomicOutputs(path.parent)
    outputs.stage(path.name, json.dumps(payload, indent=2) + "\n")
    outputs.commit()


def _report_verdict(report, tolerance: float, out) -> int:
    ok = report.max_abs_dev <= tolerance
    payload = {**report.to_dict(), "tolerance": tolerance, "pass": ok}
    if out:
        _write_json(out, payload)
    print(f"max_abs_dev={report.max_abs_dev:.6g} trace_per_dim={report.trace_per_dim:.6g} "
          f"tolerance={tolerance:g} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_diag(args) -> int:
    try:
        if args.check == "covreduce":
            d, m = args.dim, args.clients
            if args.cov == "identity":
                covs = [np.eye(d)] * m
            else:
                covs = [np.diag(np.r_[100.0, np.ones(d - 1)])] * m
            rng = RngStream(args.seed, "diag/covreduce")
            report = covariance_reduction_mc(m, covs, np.zeros(d), args.samples, rng)
            return _report_verdict(report, args.tolerance, args.out)

        if args.check == "isotropy":
            root = RngStream(args.seed, "diag/isotropy")
            quad = gen_quadratics(args.clients, args.dim, args.mu, args.L, args.hetero, root.derive("testbed"))
            w = quad.w_star if args.at == "optimum" else np.zeros(args.dim)
            report = noise_isotropy(quad, w, None, args.samples, root.derive("samples"), args.noise)
            return _report_verdict(report, args.tolerance, args.out)

        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        trace = divergence_trace(cfg, args.probe)
        text = "".join(json.dumps(r) + "\n" for r in trace.to_records())
        if args.out:
            out = Path(args.out)
            out.parent.mkdir(parents=True, exist_ok=True)
            staged = AtomicOutputs(out.parent)
            staged.stage(out.name, text)
            staged.commit()
        else:
            sys.stdout.write(text)
        return EXIT_OK
    except FedPrecondError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _run_name(path: Path) -> str:
    return path.parent.name if path.stem == "metrics" and path.parent.name else path.stem


def _read_metrics(path: Path) -> list[dict]:
    if path.suffix == ".jsonl":
        rows = []
        for line in path.read_text().splitlines():
            rec = json.loads(line)
            if rec.get("type") == "metrics":
                rows.append({k: format_value(v) for k, v in rec.items() if k != "type"})
        return rows
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_plotdata(paths, fields, out) -> int:
    rows = []
    names = [_run_name(Path(p)) for p in paths]
    if len(set(names)) != len(names):
        names = [str(Path(p)) for p in paths]
    for name, p in zip(names, paths):
        try:
            records = _read_metrics(Path(p))
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        available = [f for f in METRIC_FIELDS if f != "round"]
        for f in fields:
            if f not in available:
                print(f"error: unknown field {f!r}; available fields: {', '.join(available)}", file=sys.stderr)
                return EXIT_CONFIG
        for rec in records:
            for f in fields:
                rows.append((name, int(rec["round"]), f, rec[f]))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["run", "round", "field", "value"])
    writer.writerows(rows)
    if out:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        staged = AtomicOutputs(out.parent)
        staged.stage(out.name, buf.getvalue())
        staged.commit()
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_validate(config_path) -> int:
    try:
        cfg = parse_config(config_path)
    except (FedPrecondError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps({"config_hash": config_hash(cfg), "config": config_to_dict(cfg)}, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedprecond", description="Preconditioned federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")

    diag = sub.add_parser("diag", help="statistical diagnostics")
    checks = diag.add_subparsers(dest="check", required=True)
    cov = checks.add_parser("covreduce", help="whitened averaged-gradient covariance vs I/m^2")
    cov.add_argument("--clients", "-m", type=int, default=4)
    cov.add_argument("--dim", type=int, default=2)
    cov.add_argument("--cov", choices=("identity", "aniso"), default="identity")
    iso = checks.add_parser("isotropy", help="whitened gradient-noise covariance on the quadratic testbed")
    iso.add_argument("--clients", "-m", type=int, default=8)
    iso.add_argument("--dim", type=int, default=4)
    iso.add_argument("--mu", type=float, default=0.1)
    iso.add_argument("--L", type=float, default=1.0)
    iso.add_argument("--hetero", type=float, default=1.0)
    iso.add_argument("--noise", type=float, default=1.0)
    iso.add_argument("--at", choices=("optimum", "generic"), default="optimum")
    for p, tol in ((cov, 0.02), (iso, 0.05)):
        p.add_argument("--samples", type=int, default=100_000)
        p.add_argument("--tolerance", type=float, default=tol)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="write the report as JSON")
    div = checks.add_parser("divergence", help="model divergence trace with plug-in bounds")
    div.add_argument("--config", required=True)
    div.add_argument("--out", default=None, help="JSONL output (default: stdout)")
    div.add_argument("--seed", type=int, default=None)
    div.add_argument("--probe", type=int, default=32, help="minibatches per client for the local-variance estimate")

    plot = sub.add_parser("plotdata", help="merge metrics files into long-format CSV")
    plot.add_argument("metrics", nargs="+")
    plot.add_argument("--fields", required=True, help="comma-separated metric names")
    plot.add_argument("--out", default=None)

    val = sub.add_parser("validate-config", help="parse a config and print it with defaults applied")
    val.add_argument("--config", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if args.command == "run":
        return cmd_run(args.config, args.out, args.seed)
    if args.command == "diag":
        return cmd_diag(args)
    if args.command == "plotdata":
        fields = [f.strip() for f in args.fields.split(",") if f.strip()]
        return cmd_plotdata(args.metrics, fields, args.out)
    return cmd_validate(args.config)


if __name__ == "__main__":
    sys.exit(main())
