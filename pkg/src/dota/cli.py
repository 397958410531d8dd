"""Command line surface for the dose pipeline.

Subcommands: ``gen`` (synthetic dataset), ``train``, ``predict``,
``eval`` (gamma + relative error), ``sweep`` (hyperparameter grid) and
``bench`` (inference latency). Exit codes: 0 success, 1 eval threshold
not met, 2 usage error, 3 data error, 4 numeric failure. Every
artifact-producing run writes one JSON manifest alongside its outputs.
``DOTA_THREADS`` caps internal thread pools.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import GammaCriteria, format_report, gamma_pass_rate, relative_error
from .grids import DataError, DoseGrid, read_dose, read_geometry, write_dose, write_grid
from .model import DoseTransformer, ModelConfig
from .physics import PHANTOM_LAYOUTS, PhantomSpec, generate_dataset, generate_phantom
from .tensor import ConfigurationError, DimensionError, UsageError
from .training import (
    NumericsError,
    TrainConfig,
    format_sweep_table,
    hyperparameter_sweep,
    train,
)

EXIT_OK = 0
EXIT_THRESHOLD = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


# ---------------------------------------------------------------------------
# key=value config files


def parse_kv_file(path) -> dict[str, str]:
    """Parse a plain-text config file of ``key = value`` lines.

    Blank lines and ``#`` comments are ignored.
    """
    entries: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def _coerce(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        parts = [p.strip() for p in value.split(",")]
        kind = type(default[0])
        return tuple(kind(p) for p in parts)
    return value


def _config_from_file(cls, path):
    base = cls()
    if path is None:
        return base
    entries = parse_kv_file(path)
    known = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in entries.items():
        if key not in known:
            raise ConfigurationError(f"{path}: unknown {cls.__name__} key {key!r}")
        try:
            kwargs[key] = _coerce(value, known[key])
        except (ValueError, TypeError) as exc:
            raise ConfigurationError(f"{path}: bad value for {key!r}: {exc}") from exc
    merged = {**{k: v for k, v in known.items()}, **kwargs}
    return cls(**merged)


def load_model_config(path) -> ModelConfig:
    return _config_from_file(ModelConfig, path)


def load_train_config(path) -> TrainConfig:
    return _config_from_file(TrainConfig, path)


# ---------------------------------------------------------------------------
# manifests


def write_manifest(target_dir_or_file, command, args, inputs, outputs, config=None,
                   started=None) -> Path:
    target = Path(target_dir_or_file)
    if target.is_dir():
        path = target / "manifest.json"
    else:
        path = target.with_name(target.name + ".manifest.json")
    payload = {
        "command": command,
        "tool_version": __version__,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "config": config or {},
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "started_unix": started,
        "elapsed_seconds": None if started is None else time.time() - started,
    }
    path.write_text(json.dumps(payload, sort_keys=True, indent=2, default=str) + "\n")
    return path


def _parse_triple(text, kind, what):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ConfigurationError(f"{what} needs three comma-separated values, got {text!r}")
    return tuple(kind(p) for p in parts)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    started = time.time()
    spec = PhantomSpec(seed=args.seed, layout=args.phantom)
    shape = _parse_triple(args.shape, int, "--shape")
    spacing = _parse_triple(args.spacing, float, "--spacing")
    files = generate_dataset(
        args.count,
        spec,
        args.out,
        energies_per_geometry=args.energies_per_geometry,
        shape=shape,
        spacing=spacing,
        beam_fwhm_mm=args.fwhm,
        noise_level=args.noise,
        mask_fraction=args.mask_threshold,
    )
    write_manifest(
        Path(args.out),
        "gen",
        args,
        inputs=[],
        outputs=files,
        config={"phantom": dataclasses.asdict(spec), "shape": shape, "spacing": spacing},
        started=started,
    )
    print(f"wrote {len(files)} files to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise DataError(f"data directory {data_dir} does not exist")
    model_config = load_model_config(args.model_config)
    train_config = load_train_config(args.train_config)
    log = None if args.quiet else print
    result = train(
        model_config,
        train_config,
        data_dir,
        args.out,
        resume=args.resume,
        log=log,
    )
    write_manifest(
        Path(args.out),
        "train",
        args,
        inputs=[data_dir],
        outputs=[result.best_checkpoint, result.last_checkpoint, result.metrics_path],
        config={
            "model": model_config.to_dict(),
            "train": train_config.to_dict(),
            "seeds": {"train": train_config.seed},
        },
        started=started,
    )
    print(
        f"trained {result.epochs_run} epochs ({result.steps} steps); "
        f"best validation MSE {result.best_val_mse:.6g}; "
        f"checkpoint {result.best_checkpoint}"
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    started = time.time()
    model = DoseTransformer.from_checkpoint(args.ckpt)
    geometry = read_geometry(args.geometry)
    dose = model.predict(geometry, args.energy)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dose(out, dose)
    write_manifest(
        out,
        "predict",
        args,
        inputs=[args.ckpt, args.geometry],
        outputs=[out],
        config={"model": model.config.to_dict()},
        started=started,
    )
    print(f"wrote dose ({dose.values.max():.4g} max) to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    predicted = read_dose(args.pred)
    reference = read_dose(args.ref)
    criteria = GammaCriteria(
        dta_mm=args.dta, dose_fraction=args.dd / 100.0, masked=args.masked
    )
    report = gamma_pass_rate(predicted, reference, criteria)
    rho = relative_error(predicted, reference)
    print(format_report(report, rho))
    outputs = []
    if args.gamma_out:
        gamma_path = Path(args.gamma_out)
        write_grid(gamma_path, report.gamma.astype(np.float32), predicted.spacing)
        outputs.append(gamma_path)
        write_manifest(
            gamma_path,
            "eval",
            args,
            inputs=[args.pred, args.ref],
            outputs=outputs,
            started=started,
        )
    if args.min_pass_rate is not None and report.pass_rate < args.min_pass_rate:
        print(
            f"pass rate {report.pass_rate:.4f}% below threshold {args.min_pass_rate}%",
            file=sys.stderr,
        )
        return EXIT_THRESHOLD
    return EXIT_OK


def _parse_grid_spec(text) -> dict:
    grid = {}
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigurationError(f"bad --grid-spec entry {part!r}, expected name=v1,v2")
        name, values = part.split("=", 1)
        name = name.strip()
        if name not in ("N", "K", "N_h"):
            raise ConfigurationError(f"--grid-spec axis must be one of N, K, N_h; got {name!r}")
        grid[name] = tuple(int(v) for v in values.split(","))
    if not grid:
        raise ConfigurationError("--grid-spec is empty")
    return grid


def cmd_sweep(args) -> int:
    started = time.time()
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise DataError(f"data directory {data_dir} does not exist")
    model_config = load_model_config(args.model_config)
    train_config = load_train_config(args.train_config)
    grid = _parse_grid_spec(args.grid_spec) if args.grid_spec else None
    rows = hyperparameter_sweep(
        data_dir,
        args.out,
        model_config,
        train_config,
        grid=grid,
        test_dir=args.test_data,
        log=None if args.quiet else print,
    )
    table = format_sweep_table(rows)
    print(table)
    out_dir = Path(args.out)
    table_path = out_dir / "results.txt"
    table_path.write_text(table + "\n")
    write_manifest(
        out_dir,
        "sweep",
        args,
        inputs=[data_dir] + ([args.test_data] if args.test_data else []),
        outputs=[table_path] + [Path(r["checkpoint"]) for r in rows],
        config={"train": train_config.to_dict(), "base_model": model_config.to_dict()},
        started=started,
    )
    return EXIT_OK


def cmd_bench(args) -> int:
    started = time.time()
    if args.runs < 30:
        raise ConfigurationError("bench needs at least 30 timed runs for stable stats")
    model = DoseTransformer.from_checkpoint(args.ckpt)
    cfg = model.config
    spec = PhantomSpec(seed=args.seed, layout="slabs")
    batches = [int(b) for b in args.batch.split(",")]
    lines = []
    results = {}
    for batch in batches:
        x = np.stack(
            [
                generate_phantom(spec, (cfg.L, cfg.H, cfg.W), sample_index=i).values
                for i in range(batch)
            ]
        )
        energies = np.linspace(*cfg.energy_range, batch + 2)[1:-1]
        for _ in range(args.warmup):
            model.predict_batch(x, energies)
        times = []
        for _ in range(args.runs):
            t0 = time.perf_counter()
            model.predict_batch(x, energies)
            times.append((time.perf_counter() - t0) / batch * 1000.0)
        mean = float(np.mean(times))
        std = float(np.std(times))
        results[batch] = (mean, std)
        lines.append(
            f"batch {batch}: per-sample {mean:8.2f} ms (std {std:6.2f} ms, "
            f"{args.runs} runs after {args.warmup} warmup)"
        )
    text = "\n".join(lines)
    print(text)
    if args.out:
        out = Path(args.out)
        out.write_text(text + "\n")
        write_manifest(out, "bench", args, inputs=[args.ckpt], outputs=[out], started=started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dota",
        description="Transformer-based proton dose prediction at desk scale.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset with the transport oracle")
    gen.add_argument("--count", type=int, required=True, help="number of geometries")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--phantom", choices=PHANTOM_LAYOUTS, default="blobs")
    gen.add_argument("--out", required=True)
    gen.add_argument("--energies-per-geometry", type=int, default=4)
    gen.add_argument("--shape", default="64,16,8", help="L,H,W voxels")
    gen.add_argument("--spacing", default="3,1,3", help="mm per voxel, beam axis first")
    gen.add_argument("--fwhm", type=float, default=10.0, help="beam FWHM at entry (mm)")
    gen.add_argument("--noise", type=float, default=0.0, help="pseudo-MC noise level")
    gen.add_argument("--mask-threshold", type=float, default=0.006,
                     help="zero dose below this fraction of max")
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train a model on a generated dataset")
    tr.add_argument("--data", required=True)
    tr.add_argument("--model-config", default=None, help="key=value file for ModelConfig")
    tr.add_argument("--train-config", default=None, help="key=value file for TrainConfig")
    tr.add_argument("--out", required=True)
    tr.add_argument("--resume", default=None, help="resume from a last.ckpt")
    tr.add_argument("--quiet", action="store_true")
    tr.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="predict dose for a geometry file")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--geometry", required=True)
    pr.add_argument("--energy", type=float, required=True, help="beam energy (MeV)")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("eval", help="gamma analysis and relative error of two dose files")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--ref", required=True)
    ev.add_argument("--dd", type=float, default=1.0, help="dose difference (%% of max ref)")
    ev.add_argument("--dta", type=float, default=3.0, help="distance to agreement (mm)")
    ev.add_argument("--masked", action="store_true",
                    help="zero predicted dose below 0.01%% of max first")
    ev.add_argument("--gamma-out", default=None, help="write the gamma grid here")
    ev.add_argument("--min-pass-rate", type=float, default=None,
                    help="exit 1 if the pass rate falls below this percentage")
    ev.set_defaults(func=cmd_eval)

    sw = sub.add_parser("sweep", help="train over a hyperparameter grid")
    sw.add_argument("--data", required=True)
    sw.add_argument("--out", required=True)
    sw.add_argument("--grid-spec", default=None,
                    help="e.g. 'N=1,2;K=8,10,16;N_h=8,16' (default: that grid)")
    sw.add_argument("--model-config", default=None)
    sw.add_argument("--train-config", default=None)
    sw.add_argument("--test-data", default=None, help="report test MSE on this dataset")
    sw.add_argument("--quiet", action="store_true")
    sw.set_defaults(func=cmd_sweep)

    be = sub.add_parser("bench", help="measure inference latency")
    be.add_argument("--ckpt", required=True)
    be.add_argument("--batch", default="1,8", help="comma list of batch sizes")
    be.add_argument("--runs", type=int, default=30, help="timed runs per batch (min 30)")
    be.add_argument("--warmup", type=int, default=5)
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--out", default=None, help="also write the report here")
    be.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse signals usage errors by exiting
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except (DataError, FileNotFoundError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, UsageError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
