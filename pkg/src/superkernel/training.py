"""Optimizer, schedule, datasets, checkpoints and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .nn import Module
from .tensor import NonFiniteError, Tape, Tensor, cross_entropy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 1e-4
    eps: float = 1e-8
    batch_size: int = 100
    epochs: int = 1600
    total_steps: int | None = None  # overrides epochs when set
    warmup_ratio: float = 0.05
    seed: int = 0
    precision: str = "f32"
    grad_clip: float | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if not (self.lr > 0 and self.batch_size > 0 and self.epochs > 0 and self.weight_decay >= 0):
            raise ValueError("learning rate, batch size and epochs must be positive")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError(f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must be in [0, 1), got {self.betas}")

    def steps_for(self, n_examples: int) -> int:
        if self.total_steps is not None:
            return self.total_steps
        return self.epochs * math.ceil(n_examples / self.batch_size)


FINETUNE_DEFAULTS = TrainConfig(epochs=800)


# ---------------------------------------------------------------------------
# AdamW + schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    rejected: int = 0


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    weight_decay: float = 1e-4,
    eps: float = 1e-8,
) -> bool:
    """One decoupled-weight-decay Adam update in place. Returns False if rejected."""
    if not all(np.isfinite(g).all() for g in grads.values()):
        state.rejected += 1
        logger.warning("adamw: non-finite gradient, step rejected (%d so far)", state.rejected)
        return False
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            if p.shape != g.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != param shape {p.shape}")
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        data = p.data * (1.0 - lr * weight_decay)
        data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = data.astype(p.dtype, copy=False)
    return True


def cosine_warmup_lr(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then half-cosine down to 0 at ``total_steps``."""
    if step >= total_steps:
        return 0.0
    warm = warmup_ratio * total_steps
    if step < warm:
        return base_lr * step / warm
    span = total_steps - warm
    progress = (step - warm) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / (total + 1e-12)
    return total


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.mean, self.std)

    def standardized(self, mean=None, std=None) -> "Dataset":
        """Per-channel standardization; constants default to this split's statistics."""
        x = self.images.astype(np.float64)
        if mean is None:
            mean = x.mean(axis=(0, 2, 3))
            std = x.std(axis=(0, 2, 3))
        mean = np.asarray(mean, dtype=np.float64)
        std = np.asarray(std, dtype=np.float64)
        out = (x - mean[None, :, None, None]) / std[None, :, None, None]
        return Dataset(out.astype(np.float32), self.labels, mean, std)


CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class CifarFormatError(ValueError):
    pass


def read_cifar_batch(path, limit: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Read one CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CIFAR-10 batch file not found: {path}")
    size = path.stat().st_size
    if size == 0 or size % CIFAR_RECORD:
        expected = (size // CIFAR_RECORD + 1) * CIFAR_RECORD
        raise CifarFormatError(
            f"{path}: size {size} bytes is not a multiple of {CIFAR_RECORD} (expected e.g. {expected})"
        )
    raw = np.fromfile(path, dtype=np.uint8, count=-1 if limit is None else limit * CIFAR_RECORD)
    raw = raw.reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        bad = int(np.argmax(labels > 9))
        raise CifarFormatError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    images = raw[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(directory, n_train: int | None = None, n_test: int | None = None) -> tuple[Dataset, Dataset]:
    """Load the binary CIFAR-10 release, scaled to [0, 1] and standardized by train statistics."""
    directory = Path(directory)
    imgs, labs = [], []
    remaining = n_train
    for name in CIFAR_TRAIN_FILES:
        if remaining is not None and remaining <= 0:
            break
        x, y = read_cifar_batch(directory / name, limit=remaining)
        imgs.append(x)
        labs.append(y)
        if remaining is not None:
            remaining -= len(y)
    x_test, y_test = read_cifar_batch(directory / CIFAR_TEST_FILE, limit=n_test)
    train = Dataset(np.concatenate(imgs).astype(np.float32) / 255.0, np.concatenate(labs)).standardized()
    test = Dataset(x_test.astype(np.float32) / 255.0, y_test).standardized(train.mean, train.std)
    return train, test


def write_cifar_batch(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 (N,3,32,32) images in the CIFAR-10 binary record layout."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    rec.tofile(path)


def _shape_mask(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0 + rng.uniform(-0.1, 0.1) * size
    half = size * rng.uniform(0.25, 0.4)
    w = max(1.0, size / 8.0)
    if kind == 0:  # horizontal bar
        m = np.abs(yy - c) < w
    elif kind == 1:  # vertical bar
        m = np.abs(xx - c) < w
    elif kind == 2:  # diagonal
        m = np.abs(yy - xx) < w
    elif kind == 3:  # anti-diagonal
        m = np.abs(yy + xx - (size - 1)) < w
    elif kind == 4:  # filled square
        m = (np.abs(yy - c) < half) & (np.abs(xx - c) < half)
    elif kind == 5:  # square outline
        inner = (np.abs(yy - c) < half - w) & (np.abs(xx - c) < half - w)
        m = (np.abs(yy - c) < half) & (np.abs(xx - c) < half) & ~inner
    elif kind == 6:  # plus
        m = (np.abs(yy - c) < w) | (np.abs(xx - c) < w)
    elif kind == 7:  # x-cross
        m = (np.abs(yy - xx) < w) | (np.abs(yy + xx - (size - 1)) < w)
    elif kind == 8:  # disk
        m = (yy - c) ** 2 + (xx - c) ** 2 < half**2
    else:  # checkerboard
        cell = max(1, size // 4)
        m = ((yy // cell + xx // cell) % 2) == 0
    return m


def synthetic_dataset(n: int, seed=0, size: int = 8) -> Dataset:
    """Balanced 10-class dataset of coloured parametric shapes on a noisy background."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 10).astype(np.int64)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i, k in enumerate(labels):
        mask = _shape_mask(int(k), size, rng)
        fg = rng.uniform(0.6, 1.0, size=3)
        bg = rng.uniform(0.0, 0.3, size=3)
        img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
        img += rng.normal(0.0, 0.05, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle for one epoch; a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    per_epoch = max(1, n // batch_size)
    epoch, k = divmod(step, per_epoch)
    order = epoch_order(n, seed, epoch)
    return order[k * batch_size : (k + 1) * batch_size]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

FORMAT = "superkernel-checkpoint/1"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _write_blob(path: Path, arrays: dict[str, np.ndarray]) -> list[dict]:
    records = []
    offset = 0
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            le = np.asarray(arr).astype(np.asarray(arr).dtype.newbyteorder("<"), copy=False)
            buf = le.tobytes(order="C")
            fh.write(buf)
            records.append(
                {"path": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(buf)}
            )
            offset += len(buf)
    return records


def _read_blob(path: Path, records: list[dict]) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    out = {}
    for r in records:
        chunk = raw[r["offset"] : r["offset"] + r["nbytes"]]
        if len(chunk) != r["nbytes"]:
            raise ValueError(f"{path}: truncated record {r['path']}")
        out[r["path"]] = np.frombuffer(chunk, dtype=np.dtype(r["dtype"])).reshape(r["shape"]).copy()
    return out


@dataclass
class Checkpoint:
    manifest: dict
    params: dict[str, np.ndarray]
    optimizer: AdamWState | None = None

    @property
    def step(self) -> int:
        return int(self.manifest.get("step", 0))

    @property
    def config(self) -> dict:
        return self.manifest["config"]


def save_checkpoint(
    directory,
    params: dict[str, np.ndarray],
    config: dict,
    step: int = 0,
    optimizer: AdamWState | None = None,
    extra: dict | None = None,
) -> Path:
    """Write ``manifest.json`` + ``params.bin`` (+ ``optim.bin``) into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    config = _jsonable(config)
    manifest = {
        "format": FORMAT,
        "config": config,
        "config_hash": config_hash(config),
        "step": step,
        "params": _write_blob(directory / "params.bin", params),
    }
    if optimizer is not None:
        blobs = {f"m/{k}": v for k, v in optimizer.m.items()}
        blobs.update({f"v/{k}": v for k, v in optimizer.v.items()})
        manifest["optimizer"] = {
            "t": optimizer.t,
            "rejected": optimizer.rejected,
            "records": _write_blob(directory / "optim.bin", blobs),
        }
    manifest.update(extra or {})
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, directory / "manifest.json")
    return directory


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{directory}: unknown checkpoint format {manifest.get('format')!r}")
    if config_hash(manifest["config"]) != manifest["config_hash"]:
        raise ValueError(f"{directory}: manifest config does not match its recorded hash")
    params = _read_blob(directory / "params.bin", manifest["params"])
    opt = None
    if "optimizer" in manifest:
        blobs = _read_blob(directory / "optim.bin", manifest["optimizer"]["records"])
        opt = AdamWState(
            m={k[2:]: v for k, v in blobs.items() if k.startswith("m/")},
            v={k[2:]: v for k, v in blobs.items() if k.startswith("v/")},
            t=manifest["optimizer"]["t"],
            rejected=manifest["optimizer"]["rejected"],
        )
    return Checkpoint(manifest, params, opt)


class ConfigMismatchError(ValueError):
    def __init__(self, expected: str, found: str, what: str = "checkpoint"):
        self.expected = expected
        self.found = found
        super().__init__(f"{what} config hash {found} does not match expected {expected}")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class Task(Protocol):
    model: Module

    def loss(self, images: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> Tensor: ...

    def config_dict(self) -> dict: ...


class TrainingDiverged(RuntimeError):
    pass


def random_hflip(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Mirror each image left-right with probability 1/2."""
    flip = rng.random(len(images)) < 0.5
    out = images.copy()
    out[flip] = out[flip][..., ::-1]
    return out


@dataclass
class ClassifierTask:
    model: Module
    config: dict = field(default_factory=dict)
    hflip: bool = False

    def loss(self, images, labels, rng):
        if self.hflip:
            images = random_hflip(images, rng)
        return cross_entropy(self.model(images, rng), labels)

    def config_dict(self) -> dict:
        return self.config


@dataclass
class MAETask:
    model: Module
    config: dict = field(default_factory=dict)

    def loss(self, images, labels, rng):
        return self.model(images, rng, rng).loss

    def config_dict(self) -> dict:
        return self.config


METRIC_FIELDS = ("step", "lr", "loss", "split")


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, 7])


@dataclass
class TrainResult:
    losses: list[float]
    final_step: int
    checkpoints: list[Path]


def train_loop(
    task: Task,
    dataset: Dataset,
    steps: int,
    config: TrainConfig,
    out_dir=None,
    resume: Checkpoint | None = None,
    total_steps: int | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Run ``steps`` optimizer updates (counting from 0, or from ``resume``).

    Writes ``metrics.csv`` (append-only) and checkpoints under ``out_dir``.
    Data order, masking and dropout depend only on (seed, step), so a resumed
    run replays an uninterrupted one exactly.
    """
    model = task.model
    params = dict(model.named_parameters())
    state = AdamWState()
    start = 0
    run_config = {"model": task.config_dict(), "train": _jsonable(config)}
    total = total_steps or config.total_steps or steps
    if resume is not None:
        expected = config_hash(run_config)
        if resume.manifest["config_hash"] != expected:
            raise ConfigMismatchError(expected, resume.manifest["config_hash"])
        model.load_state_dict(resume.params)
        state = resume.optimizer or AdamWState()
        start = resume.step
        total = resume.manifest.get("total_steps", total)
    out = Path(out_dir) if out_dir is not None else None
    saved: list[Path] = []

    def checkpoint(step: int):
        if out is None:
            return
        path = save_checkpoint(
            out / f"step_{step:06d}",
            model.state_dict(),
            run_config,
            step=step,
            optimizer=state,
            extra={"seed": config.seed, "rng": {"kind": "counter", "seed": config.seed, "step": step}, "total_steps": total},
        )
        saved.append(path)

    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        mpath = out / "metrics.csv"
        new = not mpath.exists()
        metrics = open(mpath, "a", newline="")
        writer = csv.writer(metrics)
        if new:
            writer.writerow(METRIC_FIELDS)
    if resume is None:
        checkpoint(0)

    losses: list[float] = []
    bad = 0
    model.train()
    try:
        for step in range(start, steps):
            lr = cosine_warmup_lr(step, total, config.lr, config.warmup_ratio)
            idx = batch_indices(len(dataset), config.batch_size, config.seed, step)
            with Tape() as tape:
                try:
                    loss = task.loss(dataset.images[idx], dataset.labels[idx], step_rng(config.seed, step))
                    value = loss.item()
                except NonFiniteError:
                    value = float("nan")
                if not math.isfinite(value):
                    bad += 1
                    logger.warning("non-finite loss at step %d", step + 1)
                    if bad >= 2:
                        raise TrainingDiverged(f"non-finite loss twice in a row at step {step + 1}")
                    continue
                bad = 0
                grads = tape.backward(loss)
            named = {k: grads[p] for k, p in params.items() if p in grads}
            if config.grad_clip:
                clip_grad_norm(named, config.grad_clip)
            adamw_step(params, named, state, lr, config.betas, config.weight_decay, config.eps)
            losses.append(value)
            if metrics is not None:
                writer.writerow((step + 1, repr(lr), repr(value), "train"))
                metrics.flush()
            if on_step is not None:
                on_step(step + 1, value)
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                checkpoint(step + 1)
    finally:
        if metrics is not None:
            metrics.close()
    if steps > start and not (config.checkpoint_every and steps % config.checkpoint_every == 0):
        checkpoint(steps)
    model.eval()
    return TrainResult(losses, max(steps, start), saved)


def evaluate_accuracy(model: Module, dataset: Dataset, batch_size: int = 250) -> float:
    model.eval()
    correct = 0
    for i in range(0, len(dataset), batch_size):
        logits = model(dataset.images[i : i + batch_size])
        correct += int((logits.data.argmax(axis=1) == dataset.labels[i : i + batch_size]).sum())
    return correct / len(dataset)
