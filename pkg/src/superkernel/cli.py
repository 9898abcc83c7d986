"""Command-line entry points: verify, pretrain, finetune, probe, bench.

Configuration is a JSON document of flat dotted keys (``"model.d_model": 64``);
nested objects are flattened on load. Command-line flags and ``--set key=value``
override single keys. Every command writes ``run_manifest.json`` into its
output directory before producing any other artifact.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .kernels import DEFAULT_BUDGET_BYTES, KernelBudgetError, KernelSpec, KernelTensorPlan, kernel_tensor_bytes
from .superposition import SuperpositionLayer, inner_apply
from .tensor import as_tensor, cross_entropy, precision
from .training import (
    ClassifierTask,
    ConfigMismatchError,
    Dataset,
    MAETask,
    TrainConfig,
    config_hash,
    evaluate_accuracy,
    load_checkpoint,
    load_cifar10,
    read_cifar_batch,
    synthetic_dataset,
    train_loop,
)
from .verify import all_passed, run_suites
from .vit import MAE, EncoderConfig, MAEConfig, ViTClassifier, init_from_pretrained

logger = logging.getLogger("superkernel")

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "precision": "f32",
    "model.variant": "standard",
    "model.d_model": 256,
    "model.mlp_dim": 512,
    "model.n_layers": 8,
    "model.n_heads": 8,
    "model.patch_size": 4,
    "model.image_size": 32,
    "model.sigma": 1.0,
    "model.scaling": None,
    "model.dropout": 0.1,
    "model.mlp_dropout": 0.1,
    "decoder.d_model": 192,
    "decoder.mlp_dim": 384,
    "decoder.n_layers": 6,
    "decoder.n_heads": 8,
    "mae.mask_ratio": 0.75,
    "finetune.n_layers": 6,
    "train.lr": 1e-3,
    "train.beta1": 0.9,
    "train.beta2": 0.95,
    "train.weight_decay": 1e-4,
    "train.batch_size": 100,
    "train.epochs": 1600,
    "train.steps": None,
    "train.warmup_ratio": 0.05,
    "train.grad_clip": None,
    "train.checkpoint_every": 0,
    "train.hflip": False,
    "data.source": "synthetic",
    "data.path": None,
    "data.n_train": None,
    "data.n_test": None,
}

COMMAND_DEFAULTS = {"finetune": {"train.epochs": 800}}
ARCH_KEYS = ("model.variant", "model.d_model", "model.mlp_dim", "model.n_heads", "model.patch_size", "model.image_size", "model.sigma", "model.scaling")


class UsageError(Exception):
    """Bad configuration or arguments; reported without a traceback."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, path + "."))
        else:
            out[path] = value
    return out


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise UsageError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, int) and isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, str) and isinstance(value, str):
        return value
    raise UsageError(f"{key} expects {type(default).__name__}, got {value!r}")


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise UsageError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve_config(command: str, path: str | None, overrides: list[tuple[str, object]]) -> dict:
    cfg = dict(DEFAULTS)
    cfg.update(COMMAND_DEFAULTS.get(command, {}))
    layers = [flatten(json.loads(Path(path).read_text()))] if path else []
    layers.append(dict(overrides))
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise UsageError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value)
    if cfg["precision"] not in ("f32", "f64"):
        raise UsageError(f"precision must be f32 or f64, got {cfg['precision']!r}")
    return cfg


def encoder_config(cfg: dict, n_layers: int | None = None) -> EncoderConfig:
    return EncoderConfig(
        d_model=cfg["model.d_model"],
        mlp_dim=cfg["model.mlp_dim"],
        n_layers=cfg["model.n_layers"] if n_layers is None else n_layers,
        n_heads=cfg["model.n_heads"],
        variant=cfg["model.variant"],
        scaling=cfg["model.scaling"],
        sigma=cfg["model.sigma"],
        dropout=cfg["model.dropout"],
        mlp_dropout=cfg["model.mlp_dropout"],
        patch_size=cfg["model.patch_size"],
        image_size=cfg["model.image_size"],
    )


def mae_config(cfg: dict) -> MAEConfig:
    enc = encoder_config(cfg)
    dec = EncoderConfig(
        d_model=cfg["decoder.d_model"],
        mlp_dim=cfg["decoder.mlp_dim"],
        n_layers=cfg["decoder.n_layers"],
        n_heads=cfg["decoder.n_heads"],
        variant=cfg["model.variant"],
        scaling=cfg["model.scaling"],
        sigma=cfg["model.sigma"],
        dropout=cfg["model.dropout"],
        mlp_dropout=cfg["model.mlp_dropout"],
        patch_size=cfg["model.patch_size"],
        image_size=cfg["model.image_size"],
    )
    return MAEConfig(encoder=enc, decoder=dec, mask_ratio=cfg["mae.mask_ratio"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        lr=cfg["train.lr"],
        betas=(cfg["train.beta1"], cfg["train.beta2"]),
        weight_decay=cfg["train.weight_decay"],
        batch_size=cfg["train.batch_size"],
        epochs=cfg["train.epochs"],
        total_steps=cfg["train.steps"],
        warmup_ratio=cfg["train.warmup_ratio"],
        seed=cfg["seed"],
        precision=cfg["precision"],
        grad_clip=cfg["train.grad_clip"],
        checkpoint_every=cfg["train.checkpoint_every"],
    )


def arch_hash(cfg: dict) -> str:
    return config_hash({k: cfg[k] for k in ARCH_KEYS})


def load_data(cfg: dict) -> tuple[Dataset, Dataset]:
    source = cfg["data.source"]
    if source == "cifar10":
        if not cfg["data.path"]:
            raise UsageError("data.source=cifar10 needs data.path pointing at the binary batches")
        if cfg["model.image_size"] != 32:
            raise UsageError("CIFAR-10 images are 32x32; set model.image_size=32")
        return load_cifar10(cfg["data.path"], cfg["data.n_train"], cfg["data.n_test"])
    if source == "synthetic":
        size = cfg["model.image_size"]
        train = synthetic_dataset(cfg["data.n_train"] or 2000, seed=cfg["seed"], size=size).standardized()
        test = synthetic_dataset(cfg["data.n_test"] or 500, seed=cfg["seed"] + 10_000, size=size)
        return train, test.standardized(train.mean, train.std)
    raise UsageError(f"unknown data.source {source!r} (synthetic or cifar10)")


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config: dict
    seed: int
    out_dir: str
    argv: list[str] = field(default_factory=list)
    started_at: str = field(default_factory=_now)
    finished_at: str | None = None
    exit_code: int | None = None

    @property
    def path(self) -> Path:
        return Path(self.out_dir) / "run_manifest.json"

    def write(self) -> None:
        Path(self.out_dir).mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    def finish(self, code: int) -> None:
        self.finished_at = _now()
        self.exit_code = code
        self.write()


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary PGM, intensities scaled so the largest entry is 255."""
    values = np.asarray(values, dtype=np.float64)
    top = values.max(initial=0.0)
    scaled = np.zeros(values.shape) if top <= 0 else np.clip(values / top, 0.0, 1.0) * 255.0
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.rint(scaled).astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def write_csv_matrix(path, values: np.ndarray) -> None:
    np.savetxt(path, np.asarray(values, dtype=np.float64), delimiter=",", fmt="%.10g")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=float))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_verify(args, cfg: dict, out: Path) -> int:
    suites = [s for item in args.suite for s in item.split(",") if s]
    try:
        results = run_suites(suites or ["all"], seed=cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ok = all_passed(results)
    report = {
        "precision": cfg["precision"],
        "seed": cfg["seed"],
        "passed": ok,
        "suites": {name: [c.as_dict() for c in checks] for name, checks in results.items()},
    }
    _write_json(out / "verify_report.json", report)
    for name, checks in results.items():
        for c in checks:
            status = {True: "PASS", False: "FAIL", None: "INFO"}[c.passed]
            print(f"{status} {name}/{c.name}: {c.value:.6g} ({c.threshold})")
    print("verify:", "all checks passed" if ok else "FAILURES present")
    return 0 if ok else 1


def _steps(cfg: dict, tc: TrainConfig, n: int) -> int:
    return tc.steps_for(n)


def cmd_pretrain(args, cfg: dict, out: Path) -> int:
    train, _ = load_data(cfg)
    tc = train_config(cfg)
    mae = MAE(mae_config(cfg), np.random.default_rng(cfg["seed"]))
    task_cfg = {"kind": "mae", "arch_hash": arch_hash(cfg), "config": cfg, "data": {"mean": _list(train.mean), "std": _list(train.std)}}
    task = MAETask(mae, task_cfg)
    resume = load_checkpoint(args.resume) if args.resume else None
    steps = _steps(cfg, tc, len(train))
    try:
        result = train_loop(task, train, steps, tc, out, resume=resume, total_steps=steps, on_step=_progress(steps))
    except ConfigMismatchError as exc:
        print(f"error: checkpoint config hash {exc.found} != run config hash {exc.expected}", file=sys.stderr)
        return 2
    summary = {"steps": result.final_step, "first_loss": _first(result.losses), "final_loss": _last(result.losses)}
    _write_json(out / "summary.json", summary)
    print(f"pretrain: {result.final_step} steps, loss {summary['first_loss']} -> {summary['final_loss']}")
    return 0


def cmd_finetune(args, cfg: dict, out: Path) -> int:
    enc = encoder_config(cfg, n_layers=cfg["finetune.n_layers"])
    model = ViTClassifier(enc, np.random.default_rng(cfg["seed"]))
    copied: list[str] = []
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        source = ck.config.get("model", {})
        found, expected = source.get("arch_hash"), arch_hash(cfg)
        if found != expected:
            print(f"error: checkpoint architecture hash {found} != config architecture hash {expected}", file=sys.stderr)
            return 2
        try:
            copied = init_from_pretrained(model, ck.params, source["config"]["model.n_layers"])
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    train, test = load_data(cfg)
    tc = train_config(cfg)
    task_cfg = {
        "kind": "classifier",
        "arch_hash": arch_hash(cfg),
        "config": cfg,
        "init": str(args.checkpoint) if args.checkpoint else None,
        "data": {"mean": _list(train.mean), "std": _list(train.std)},
    }
    task = ClassifierTask(model, task_cfg, hflip=cfg["train.hflip"])
    resume = load_checkpoint(args.resume) if args.resume else None
    steps = _steps(cfg, tc, len(train))
    try:
        result = train_loop(task, train, steps, tc, out, resume=resume, total_steps=steps, on_step=_progress(steps))
    except ConfigMismatchError as exc:
        print(f"error: checkpoint config hash {exc.found} != run config hash {exc.expected}", file=sys.stderr)
        return 2
    accuracy = evaluate_accuracy(model, test)
    test_loss = _eval_loss(model, test)
    with open(out / "metrics.csv", "a", newline="") as fh:
        csv.writer(fh).writerow((result.final_step, 0.0, repr(test_loss), "test"))
    summary = {
        "steps": result.final_step,
        "copied_parameters": len(copied),
        "first_loss": _first(result.losses),
        "final_loss": _last(result.losses),
        "test_loss": test_loss,
        "test_accuracy": accuracy,
        "n_train": len(train),
        "n_test": len(test),
    }
    _write_json(out / "summary.json", summary)
    print(f"finetune: {result.final_step} steps, held-out accuracy {accuracy:.4f} on {len(test)} images")
    return 0


def _eval_loss(model, data: Dataset, batch: int = 250) -> float:
    total = 0.0
    for i in range(0, len(data), batch):
        logits = model(data.images[i : i + batch])
        total += cross_entropy(logits, data.labels[i : i + batch]).item() * len(data.labels[i : i + batch])
    return total / len(data)


def parse_layers(text: str | None, n_layers: int) -> list[int]:
    """'1-3,5' -> [1, 2, 3, 5] (1-based); None means every layer."""
    if not text:
        return list(range(1, n_layers + 1))
    layers: list[int] = []
    for part in text.split(","):
        lo, _, hi = part.partition("-")
        try:
            a, b = int(lo), int(hi or lo)
        except ValueError as exc:
            raise UsageError(f"bad --layers value {text!r}") from exc
        layers.extend(range(a, b + 1))
    bad = [x for x in layers if not 1 <= x <= n_layers]
    if bad:
        raise UsageError(f"layer(s) {bad} out of range 1..{n_layers}")
    return layers


def _probe_images(args, cfg: dict, manifest_cfg: dict) -> np.ndarray:
    size = cfg["model.image_size"]
    if args.images:
        path = Path(args.images)
        if path.suffix == ".npy":
            images = np.load(path)
        else:
            images, _ = read_cifar_batch(path, limit=args.index + 1)
        if images.ndim == 3:
            images = images[None]
        if not 0 <= args.index < len(images):
            raise UsageError(f"--index {args.index} out of range for {len(images)} images")
        img = images[args.index : args.index + 1]
        img = img.astype(np.float64) / 255.0 if img.dtype == np.uint8 else img.astype(np.float64)
    else:
        img = synthetic_dataset(args.index + 1, seed=cfg["seed"], size=size).images[args.index : args.index + 1].astype(np.float64)
    stats = manifest_cfg.get("data", {})
    if stats.get("mean") is not None:
        mean, std = np.asarray(stats["mean"]), np.asarray(stats["std"])
        img = (img - mean[None, :, None, None]) / std[None, :, None, None]
    return img


def cmd_probe(args, cfg: dict, out: Path) -> int:
    ck = load_checkpoint(args.checkpoint)
    model_cfg = ck.config.get("model", {})
    if "config" not in model_cfg:
        raise UsageError(f"{args.checkpoint}: manifest carries no model configuration")
    src = dict(model_cfg["config"])
    if model_cfg.get("kind") == "classifier":
        n_layers = src["finetune.n_layers"]
    else:
        n_layers = src["model.n_layers"]
    layers = parse_layers(args.layers, n_layers)
    enc = encoder_config(src, n_layers=n_layers)
    model = ViTClassifier(enc, np.random.default_rng(0))
    if model_cfg.get("kind") == "classifier":
        model.load_state_dict(ck.params)
    else:
        try:
            init_from_pretrained(model, ck.params, n_layers)
        except ValueError as exc:
            raise UsageError(f"cannot probe this checkpoint at full sequence length: {exc}") from exc
    model.eval()
    images = _probe_images(args, src, model_cfg)
    trace: list = []
    model.features(images, trace=trace)

    grid = enc.image_size // enc.patch_size
    report = {"checkpoint": str(args.checkpoint), "variant": enc.variant, "layers": {}, "max_row_sum_error": 0.0}
    for layer in layers:
        t = trace[layer - 1]
        maps = t.maps.data[0].astype(np.float64)  # (n, S, S)
        ldir = out / f"layer_{layer:02d}"
        ldir.mkdir(parents=True, exist_ok=True)
        entry = {}
        for h, m in enumerate(maps):
            write_csv_matrix(ldir / f"head_{h}.csv", m)
            write_pgm(ldir / f"head_{h}.pgm", m)
            cls = m[0, 1:].reshape(grid, grid)
            write_csv_matrix(ldir / f"cls_head_{h}.csv", cls)
            write_pgm(ldir / f"cls_head_{h}.pgm", cls)
            if args.raw_scores:
                write_csv_matrix(ldir / f"scores_head_{h}.csv", t.scores.data[0, h])
        avg = maps.mean(axis=0)
        write_csv_matrix(ldir / "mean.csv", avg)
        write_pgm(ldir / "mean.pgm", avg)
        write_csv_matrix(ldir / "cls_mean.csv", avg[0, 1:].reshape(grid, grid))
        write_pgm(ldir / "cls_mean.pgm", avg[0, 1:].reshape(grid, grid))
        entry["row_sum_error"] = float(np.abs(maps.sum(axis=-1) - 1.0).max())
        if args.raw_scores:
            s = t.scores.data[0].astype(np.float64)
            entry["score_asymmetry"] = float(np.abs(s - s.swapaxes(-1, -2)).max())
        report["layers"][layer] = entry
        report["max_row_sum_error"] = max(report["max_row_sum_error"], entry["row_sum_error"])
    _write_json(out / "probe_report.json", report)
    print(f"probe: wrote {len(layers)} layer(s) x {enc.n_heads} head(s) to {out}")
    return 0


def parse_grid(text: str) -> list[tuple[int, int, int]]:
    points = []
    for item in text.split(";"):
        if not item.strip():
            continue
        try:
            B, S, D = (int(v) for v in item.split(","))
        except ValueError as exc:
            raise UsageError(f"grid points are B,S,D separated by ';', got {item!r}") from exc
        points.append((B, S, D))
    return points


BENCH_FIELDS = ("B", "S", "D", "H", "mode", "status", "estimate_bytes", "peak_bytes", "reps", "min_s", "median_s", "max_abs_diff")


def cmd_bench(args, cfg: dict, out: Path) -> int:
    spec = KernelSpec.gaussian(args.sigma) if args.kernel == "gaussian" else KernelSpec.linear()
    rng = np.random.default_rng(cfg["seed"])
    rows = []
    for B, S, D in parse_grid(args.grid):
        X = as_tensor(rng.normal(size=(B, S, D)))
        W = as_tensor(rng.normal(0.0, 1.0 / D, size=(args.heads, S, D, D)))
        layer = SuperpositionLayer(W_inner=W, inner_spec=spec)
        itemsize = X.data.itemsize
        estimate = kernel_tensor_bytes((B, S, D), (B, S, D), itemsize)
        br, bR = min(args.block_rows, S), min(args.block_refs, S)
        plans = {
            "materialized": (KernelTensorPlan(materialize=True), estimate),
            "streamed": (KernelTensorPlan(br, bR, materialize=False), B * br * bR * D * D * itemsize),
        }
        results = {}
        for mode, (plan, peak) in plans.items():
            row = {"B": B, "S": S, "D": D, "H": args.heads, "mode": mode, "estimate_bytes": estimate, "peak_bytes": peak, "reps": 0}
            times = []
            try:
                for _ in range(args.reps):
                    t0 = time.perf_counter()
                    psi = inner_apply(layer, X, plan, budget_bytes=args.budget_bytes).data
                    times.append(time.perf_counter() - t0)
                results[mode] = psi
                row.update(status="ok", reps=len(times), min_s=min(times), median_s=statistics.median(times))
            except KernelBudgetError as exc:
                row.update(status="refused", estimate_bytes=exc.estimate_bytes, min_s="", median_s="")
            row["max_abs_diff"] = ""
            rows.append(row)
            print(f"bench B={B} S={S} D={D} {mode}: {row['status']} (estimate {estimate} bytes)")
        if len(results) == 2:
            diff = float(np.abs(results["materialized"] - results["streamed"]).max())
            rows[-1]["max_abs_diff"] = rows[-2]["max_abs_diff"] = diff
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return 0


def _list(x):
    return None if x is None else [float(v) for v in np.asarray(x)]


def _first(xs):
    return xs[0] if xs else None


def _last(xs):
    return xs[-1] if xs else None


def _progress(total: int):
    every = max(1, total // 10)

    def report(step: int, loss: float):
        if step % every == 0 or step == total:
            logger.info("step %d/%d loss %.5f", step, total, loss)

    return report


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

COMMANDS = {
    "verify": cmd_verify,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "probe": cmd_probe,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flat dotted keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--out", help="output directory (default runs/<command>)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="superkernel", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[common], help="run equivalence and counting suites")
    p.add_argument("--suite", action="append", default=[], help="superposition|conv|embed|variance|params|bspline|all")

    p = sub.add_parser("pretrain", parents=[common], help="MAE pretraining")
    p.add_argument("--resume", help="checkpoint directory to continue from")

    p = sub.add_parser("finetune", parents=[common], help="class-token classifier training")
    p.add_argument("--checkpoint", help="pretrain checkpoint directory for layer-prefix initialization")
    p.add_argument("--resume", help="finetune checkpoint directory to continue from")

    p = sub.add_parser("probe", parents=[common], help="dump attention heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", help=".npy array (N,3,H,W) or CIFAR-10 .bin batch; default a synthetic image")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--layers", help="1-based layers, e.g. '1-6' or '1,3'")
    p.add_argument("--raw-scores", action="store_true", help="also write pre-softmax scores")

    p = sub.add_parser("bench", parents=[common], help="materialized vs streamed kernel tensor timing")
    p.add_argument("--grid", default="1,8,8;2,16,16;4,64,256", help="points B,S,D separated by ';'")
    p.add_argument("--kernel", choices=("linear", "gaussian"), default="linear")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--heads", type=int, default=1, help="inner output width H")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--block-rows", type=int, default=16)
    p.add_argument("--block-refs", type=int, default=16)
    p.add_argument("--budget-bytes", type=int, default=DEFAULT_BUDGET_BYTES)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = [parse_override(s) for s in args.set]
        if args.seed is not None:
            overrides.append(("seed", args.seed))
        if args.precision is not None:
            overrides.append(("precision", args.precision))
        cfg = resolve_config(args.command, args.config, overrides)
    except (UsageError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or Path("runs") / args.command)
    manifest = RunManifest(args.command, args.config, cfg, cfg["seed"], str(out), argv)
    manifest.write()
    try:
        with precision(cfg["precision"]):
            code = COMMANDS[args.command](args, cfg, out)
    except (UsageError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = 2
    manifest.finish(code)
    return code


if __name__ == "__main__":
    sys.exit(main())
