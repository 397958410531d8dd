"""Training loop: MSE objective, LAMB updates, halving LR schedule.

Everything here is deterministic for a given seed: the validation split,
per-epoch shuffles, augmentation coins and dropout draws all derive from
dedicated, indexed RNG streams, so a rerun reproduces checkpoints byte
for byte.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .grids import DataError, DoseGrid, GeometryGrid, read_dose, read_geometry
from .model import DoseTransformer, ModelConfig, load_checkpoint, parameter_shapes, save_checkpoint
from .physics import mask_low_dose
from .tensor import Tensor

_f32 = np.float32


class NumericsError(RuntimeError):
    """Optimization hit non-finite values; carries the offending tensor name."""


@dataclass
class TrainConfig:
    batch_size: int = 8
    initial_lr: float = 1e-3
    lr_halving_period: int = 4
    epochs: int = 20
    weight_decay: float = 0.01
    seed: int = 0
    validation_fraction: float = 0.1
    augment: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    trust_clip: float = 10.0
    early_stop_patience: int = 5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_schedule(epoch: int, initial_lr: float = 1e-3, halving_period: int = 4) -> float:
    """Learning rate for an epoch: halved every ``halving_period`` epochs."""
    return initial_lr * 0.5 ** (epoch // halving_period)


def mse_loss(predicted: Tensor, target) -> Tensor:
    """Mean over all voxels of the squared difference (differentiable)."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=_f32))
    diff = T.sub(predicted, target)
    return T.mean_(T.mul(diff, diff))


# ---------------------------------------------------------------------------
# LAMB optimizer


@dataclass
class OptimizerState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: dict[str, Tensor]) -> "OptimizerState":
        return cls(
            m={k: np.zeros(p.shape, _f32) for k, p in params.items()},
            v={k: np.zeros(p.shape, _f32) for k, p in params.items()},
        )


def lamb_step(
    params: dict[str, Tensor],
    state: OptimizerState,
    lr: float,
    *,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-6,
    weight_decay: float = 0.01,
    trust: bool = True,
    trust_clip: float = 10.0,
) -> None:
    """One layer-wise adaptive update from the gradients on ``params``.

    Adam-style moments with bias correction, decoupled weight decay, and
    a per-tensor trust ratio ||p|| / ||update|| (1 when either norm is
    zero, clipped above at ``trust_clip``). Non-finite gradients abort
    the step before any parameter is touched.
    """
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            bad = int((~np.isfinite(p.grad)).sum())
            raise NumericsError(
                f"non-finite gradient in {name!r} ({bad}/{p.grad.size} entries) at "
                f"step {state.step + 1}"
            )
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    b1, b2 = _f32(beta1), _f32(beta2)
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros(p.shape, _f32)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (m / _f32(bc1)) / (np.sqrt(v / _f32(bc2)) + _f32(eps))
        if weight_decay:
            update = update + _f32(weight_decay) * p.data
        ratio = 1.0
        if trust:
            wn = float(np.sqrt((p.data.astype(np.float64) ** 2).sum()))
            un = float(np.sqrt((update.astype(np.float64) ** 2).sum()))
            if wn > 0.0 and un > 0.0:
                ratio = min(wn / un, trust_clip)
        p.data -= _f32(lr * ratio) * update


# ---------------------------------------------------------------------------
# data plumbing


def augment_rotate180(x: GeometryGrid, y: DoseGrid, coin: bool) -> tuple[GeometryGrid, DoseGrid]:
    """Rotate both blocks 180 degrees within every beam's-eye-view slice."""
    if not coin:
        return x, y
    return (
        GeometryGrid(rotate180_values(x.values), x.spacing),
        DoseGrid(rotate180_values(y.values), y.spacing, y.energy),
    )


def rotate180_values(values: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(values[:, ::-1, ::-1])


def mask_noise(d: DoseGrid, threshold_fraction: float) -> DoseGrid:
    """Zero out dose below ``threshold_fraction`` of the block maximum."""
    return DoseGrid(mask_low_dose(d.values, threshold_fraction), d.spacing, d.energy)


class DosePairDataset:
    """All (geometry, energy, dose) pairs found in a generated directory."""

    def __init__(self, data_dir):
        data_dir = Path(data_dir)
        if not data_dir.is_dir():
            raise DataError(f"dataset directory {data_dir} does not exist")
        geom_paths = sorted(data_dir.glob("geom_*.dgrd"))
        if not geom_paths:
            raise DataError(f"no geometry files (geom_*.dgrd) in {data_dir}")
        self.spacing = None
        self.geometries: list[np.ndarray] = []
        self.pairs: list[tuple[int, np.ndarray, float]] = []
        for gi, gp in enumerate(geom_paths):
            geom = read_geometry(gp)
            if self.spacing is None:
                self.spacing = geom.spacing
            self.geometries.append(geom.values)
            stem = gp.stem.split("_")[1]
            dose_paths = sorted(data_dir.glob(f"dose_{stem}_*.dgrd"))
            if not dose_paths:
                raise DataError(f"geometry {gp} has no dose files")
            for dp in dose_paths:
                dose = read_dose(dp)
                if dose.values.shape != geom.values.shape:
                    raise DataError(f"{dp}: dose shape differs from geometry {gp}")
                self.pairs.append((gi, dose.values, dose.energy))
        self.shape = self.geometries[0].shape

    def __len__(self) -> int:
        return len(self.pairs)

    def batch(self, indices, flips=None):
        """Assemble (x, y, energies) arrays for the given pair indices."""
        xs, ys, es = [], [], []
        for pos, idx in enumerate(indices):
            gi, dose, energy = self.pairs[idx]
            x = self.geometries[gi]
            y = dose
            if flips is not None and flips[pos]:
                x = rotate180_values(x)
                y = rotate180_values(y)
            xs.append(x)
            ys.append(y)
            es.append(energy)
        return np.stack(xs), np.stack(ys), np.asarray(es, _f32)


def split_indices(n: int, validation_fraction: float, seed: int):
    """Disjoint train/validation index lists, seeded and reproducible."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xA11,)))
    order = rng.permutation(n)
    n_val = max(1, int(round(n * validation_fraction)))
    if n_val >= n:
        raise DataError(f"dataset of {n} pairs is too small to split")
    return list(order[n_val:]), list(order[:n_val])


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    metrics_path: Path
    history: list[dict] = field(default_factory=list)
    best_val_mse: float = float("inf")
    epochs_run: int = 0
    steps: int = 0


def evaluate_mse(model: DoseTransformer, dataset: DosePairDataset, indices, batch_size: int = 8) -> float:
    """Mean MSE over the given pairs, inference mode (no dropout)."""
    total = 0.0
    with T.no_grad():
        for start in range(0, len(indices), batch_size):
            chunk = indices[start : start + batch_size]
            x, y, e = dataset.batch(chunk)
            out = model.forward(x, e, training=False)
            diff = out.data.astype(np.float64) - y
            total += float((diff * diff).mean() * len(chunk))
    return total / len(indices)


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    data_dir,
    out_dir,
    resume=None,
    log=None,
) -> TrainResult:
    """Fit the model on a generated dataset directory.

    Writes ``best.ckpt`` (lowest validation MSE), ``last.ckpt`` (with
    optimizer state, resumable), and appends one ``metrics.csv`` line per
    epoch: ``epoch,lr,train_mse,val_mse,seconds``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = DosePairDataset(data_dir)
    if dataset.shape != (model_config.L, model_config.H, model_config.W):
        raise DataError(
            f"dataset blocks {dataset.shape} do not match model config "
            f"({model_config.L}, {model_config.H}, {model_config.W})"
        )
    train_idx, val_idx = split_indices(
        len(dataset), train_config.validation_fraction, train_config.seed
    )

    start_epoch = 0
    best_val = float("inf")
    if resume is not None:
        model, state, start_epoch, best_val = _load_train_state(resume, model_config)
    else:
        model = DoseTransformer(model_config, seed=train_config.seed)
        state = OptimizerState.fresh(model.params)

    result = TrainResult(
        best_checkpoint=out_dir / "best.ckpt",
        last_checkpoint=out_dir / "last.ckpt",
        metrics_path=out_dir / "metrics.csv",
        best_val_mse=best_val,
    )
    stagnant = 0
    for epoch in range(start_epoch, train_config.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, train_config.initial_lr, train_config.lr_halving_period)
        epoch_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=train_config.seed, spawn_key=(epoch, 0xB))
        )
        order = epoch_rng.permutation(len(train_idx))
        flips_all = (
            epoch_rng.random(len(train_idx)) < 0.5
            if train_config.augment
            else np.zeros(len(train_idx), bool)
        )
        dropout_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=train_config.seed, spawn_key=(epoch, 0xD))
        )
        running, seen = 0.0, 0
        for start in range(0, len(order), train_config.batch_size):
            sel = order[start : start + train_config.batch_size]
            indices = [train_idx[i] for i in sel]
            x, y, e = dataset.batch(indices, flips=flips_all[sel])
            out = model.forward(x, e, training=True, rng=dropout_rng)
            loss = mse_loss(out, y)
            for p in model.params.values():
                p.grad = None
            T.backward(loss)
            lamb_step(
                model.params,
                state,
                lr,
                beta1=train_config.beta1,
                beta2=train_config.beta2,
                eps=train_config.eps,
                weight_decay=train_config.weight_decay,
                trust_clip=train_config.trust_clip,
            )
            running += loss.item() * len(indices)
            seen += len(indices)
        train_mse = running / max(seen, 1)
        val_mse = evaluate_mse(model, dataset, val_idx, train_config.batch_size)
        seconds = time.perf_counter() - t0
        with open(result.metrics_path, "a") as fh:
            fh.write(f"{epoch},{lr:.8g},{train_mse:.8g},{val_mse:.8g},{seconds:.3f}\n")
        result.history.append(
            {"epoch": epoch, "lr": lr, "train_mse": train_mse, "val_mse": val_mse}
        )
        if log is not None:
            log(
                f"epoch {epoch:3d}  lr {lr:.2e}  train {train_mse:.6f}  "
                f"val {val_mse:.6f}  ({seconds:.1f}s)"
            )
        if val_mse < result.best_val_mse:
            result.best_val_mse = val_mse
            stagnant = 0
            save_checkpoint(result.best_checkpoint, model_config, model.params)
        else:
            stagnant += 1
        _save_train_state(result.last_checkpoint, model_config, model, state, epoch, result.best_val_mse)
        result.epochs_run = epoch + 1
        if stagnant >= train_config.early_stop_patience:
            break
    result.steps = state.step
    if not result.best_checkpoint.exists():
        save_checkpoint(result.best_checkpoint, model_config, model.params)
    return result


def _save_train_state(path, config, model, state: OptimizerState, epoch: int, best_val: float):
    tensors = dict(model.params)
    for name, m in state.m.items():
        tensors[f"opt.m.{name}"] = m
    for name, v in state.v.items():
        tensors[f"opt.v.{name}"] = v
    tensors["opt.step"] = np.array(float(state.step), _f32)
    tensors["train.epoch"] = np.array(float(epoch), _f32)
    tensors["train.best_val"] = np.array(best_val if np.isfinite(best_val) else -1.0, _f32)
    save_checkpoint(path, config, tensors)


def _load_train_state(path, expected_config: ModelConfig):
    config, arrays = load_checkpoint(path)
    if config != expected_config:
        raise DataError(f"resume checkpoint {path} was trained with a different config")
    params = {
        name: Tensor(arrays[name], requires_grad=True) for name in parameter_shapes(config)
    }
    model = DoseTransformer(config, params)
    state = OptimizerState(
        m={name: arrays[f"opt.m.{name}"] for name in params},
        v={name: arrays[f"opt.v.{name}"] for name in params},
        step=int(arrays["opt.step"]),
    )
    best_val = float(arrays["train.best_val"])
    if best_val < 0:
        best_val = float("inf")
    start_epoch = int(arrays["train.epoch"]) + 1
    return model, state, start_epoch, best_val


# ---------------------------------------------------------------------------
# hyperparameter sweep

SWEEP_GRID = {"N": (1, 2, 4), "K": (8, 10, 16), "N_h": (8, 16)}


def hyperparameter_sweep(
    data_dir,
    out_dir,
    base_model_config: ModelConfig,
    train_config: TrainConfig,
    grid: dict | None = None,
    test_dir=None,
    log=None,
) -> list[dict]:
    """Train one model per hyperparameter combination, identically.

    Returns rows sorted by MSE ascending; every row carries its full
    configuration. The reported MSE comes from ``test_dir`` when given,
    otherwise from the validation split.
    """
    grid = dict(SWEEP_GRID) if grid is None else grid
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    from .tensor import ConfigurationError

    for n in grid.get("N", (base_model_config.N,)):
        for k in grid.get("K", (base_model_config.K,)):
            for nh in grid.get("N_h", (base_model_config.N_h,)):
                try:
                    cfg = base_model_config.with_overrides(N=n, K=k, N_h=nh)
                except ConfigurationError as exc:
                    if log is not None:
                        log(f"skip N={n} K={k} N_h={nh}: {exc}")
                    continue
                run_dir = out_dir / f"sweep_N{n}_K{k}_Nh{nh}"
                result = train(cfg, train_config, data_dir, run_dir, log=log)
                row = {
                    "N": n,
                    "K": k,
                    "N_h": nh,
                    "val_mse": result.best_val_mse,
                    "checkpoint": str(result.best_checkpoint),
                }
                if test_dir is not None:
                    model = DoseTransformer.from_checkpoint(result.best_checkpoint)
                    test_set = DosePairDataset(test_dir)
                    row["test_mse"] = evaluate_mse(
                        model, test_set, list(range(len(test_set)))
                    )
                rows.append(row)
    key = "test_mse" if test_dir is not None else "val_mse"
    rows.sort(key=lambda r: r[key])
    return rows


def format_sweep_table(rows: list[dict]) -> str:
    if not rows:
        return "no sweep rows"
    has_test = "test_mse" in rows[0]
    header = "N   K   N_h  val_mse" + ("      test_mse" if has_test else "")
    lines = [header]
    for r in rows:
        line = f"{r['N']:<3d} {r['K']:<3d} {r['N_h']:<4d} {r['val_mse']:<12.6g}"
        if has_test:
            line += f" {r['test_mse']:<12.6g}"
        lines.append(line)
    return "\n".join(lines)
