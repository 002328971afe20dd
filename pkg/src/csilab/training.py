"""Training harness: Adam, warm-up cosine scheduling, NMSE evaluation,
checkpointing, and curve logging.

The reference recipe trains with Adam (beta1 = 0.9, beta2 = 0.999,
eps = 1e-8) on MSE loss for 2500 epochs at batch 200. The cosine scheduler
ramps the learning rate linearly from zero to gamma_max over the first
T_w epochs, then anneals to gamma_min:

    lr(t) = gamma_min + (gamma_max - gamma_min) / 2
            * (1 + cos((t - T_w) / (T - T_w) * pi))

The constant baseline runs a fixed 1e-3. Training is a pure function of
(config, dataset, seed): shuffles derive from (seed, epoch), so repeat
runs produce bit-identical logs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autograd import Tensor, backward, mse_loss, no_grad
from .channel import denormalize_images, nmse
from .errors import (
    CorruptHeaderError,
    TrainingDivergedError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .models import ModelConfig, build_model

CHECKPOINT_MAGIC = "CSICKPT"
CHECKPOINT_VERSION = 1

SCHEDULER_COSINE = "cosine"
SCHEDULER_CONST = "const"


@dataclass(frozen=True)
class TrainConfig:
    """Full training recipe; defaults are the reference settings."""

    epochs: int = 2500
    warmup_epochs: int = 30
    gamma_max: float = 2e-3
    gamma_min: float = 5e-5
    scheduler: str = SCHEDULER_COSINE
    const_lr: float = 1e-3
    batch_size: int = 200
    seed: int = 0
    eval_every: int = 10

    def __post_init__(self):
        if self.scheduler not in (SCHEDULER_COSINE, SCHEDULER_CONST):
            raise ValueError(f"scheduler must be 'cosine' or 'const', got {self.scheduler!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warm-up must satisfy 0 <= T_w < epochs")
        if not self.gamma_max > self.gamma_min > 0:
            raise ValueError("need gamma_max > gamma_min > 0")
        if self.const_lr <= 0:
            raise ValueError("const_lr must be positive")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "warmup_epochs": self.warmup_epochs,
            "gamma_max": self.gamma_max,
            "gamma_min": self.gamma_min,
            "scheduler": self.scheduler,
            "const_lr": self.const_lr,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "eval_every": self.eval_every,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def lr_at(t, cfg):
    """Learning rate at epoch index t, valid on 0 <= t <= epochs."""
    if t < 0 or t > cfg.epochs:
        raise ValueError(f"epoch index {t} outside [0, {cfg.epochs}]")
    if cfg.scheduler == SCHEDULER_CONST:
        return cfg.const_lr
    tw, total = cfg.warmup_epochs, cfg.epochs
    if t < tw:
        return cfg.gamma_max * t / tw
    return cfg.gamma_min + 0.5 * (cfg.gamma_max - cfg.gamma_min) * (
        1.0 + math.cos((t - tw) / (total - tw) * math.pi)
    )


class Adam:
    """Adam with bias correction over a named parameter list."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(f"non-finite gradient in {name}")
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            # theta -= lr * (m/c1) / (sqrt(v/c2) + eps), minimal temporaries
            denom = np.sqrt(v)
            denom *= 1.0 / math.sqrt(c2)
            denom += self.eps
            np.divide(m, denom, out=denom)
            denom *= lr / c1
            p.data -= denom

    def zero_grad(self):
        for _name, p in self.params:
            p.grad = None

    def state(self):
        return {
            "step": self.t,
            "m": {n: a.copy() for n, a in self.m.items()},
            "v": {n: a.copy() for n, a in self.v.items()},
        }


@dataclass
class CurveRow:
    epoch: int
    lr: float
    train_loss: float
    val_nmse_db: Optional[float] = None


@dataclass
class CurveLog:
    """Per-epoch training history; exported as CSV."""

    rows: list = field(default_factory=list)
    init_val_nmse_db: Optional[float] = None

    CSV_HEADER = "epoch,lr,train_loss,val_nmse_db"

    def to_csv(self, path):
        lines = [self.CSV_HEADER]
        for r in self.rows:
            val = "" if r.val_nmse_db is None else repr(float(r.val_nmse_db))
            lines.append(f"{r.epoch},{r.lr!r},{r.train_loss!r},{val}")
        Path(path).write_text("\n".join(lines) + "\n")
        return Path(path)

    @classmethod
    def from_csv(cls, path):
        text = Path(path).read_text().strip().splitlines()
        if not text or text[0] != cls.CSV_HEADER:
            raise ValueError(f"{path}: expected header {cls.CSV_HEADER!r}")
        rows = []
        for line in text[1:]:
            epoch, lr, loss, val = line.split(",")
            rows.append(
                CurveRow(int(epoch), float(lr), float(loss), float(val) if val else None)
            )
        return cls(rows)


@dataclass
class Checkpoint:
    """Model state plus enough context to rebuild and resume."""

    kind: str
    model_config: ModelConfig
    epoch: int
    arrays: dict
    optimizer: Optional[dict] = None
    rng_state: dict = field(default_factory=dict)
    val_nmse_db: Optional[float] = None


def _model_batches(count, batch_size):
    for start in range(0, count, batch_size):
        yield start, min(start + batch_size, count)


def reconstruct(model, ds, batch_size=256):
    """Eval-mode reconstruction of a dataset, as denormalized complex H_a."""
    if ds.count == 0:
        raise ValueError("empty dataset")
    outs = []
    with no_grad():
        for a, b in _model_batches(ds.count, batch_size):
            out = model.forward(Tensor(ds.images[a:b]), training=False)
            outs.append(out.data)
    return denormalize_images(np.concatenate(outs, axis=0), ds.norm)


def evaluate(model, ds, batch_size=256):
    """Mean NMSE of the model over a dataset, in dB (computed on
    denormalized channels)."""
    est = reconstruct(model, ds, batch_size)
    return nmse(ds.channels(), est).db


def train(model, train_ds, cfg, val_ds=None):
    """Run the full training loop; returns (best checkpoint, curve log).

    Per epoch: seeded shuffle, minibatch MSE steps with lr_at(epoch),
    then a validation NMSE pass every ``eval_every`` epochs (and on the
    final epoch). The checkpoint captures the best-validation state seen,
    starting from the untrained model.
    """
    if train_ds.count == 0:
        raise ValueError("empty training dataset")
    if val_ds is not None and val_ds.count == 0:
        raise ValueError("empty validation dataset")
    if val_ds is not None and val_ds.norm != train_ds.norm:
        raise ValueError(
            f"datasets must share normalization, got {train_ds.norm} vs {val_ds.norm}"
        )

    adam = Adam(model.parameters())
    images = train_ds.images
    count = train_ds.count

    def snapshot(epoch, val_db):
        return Checkpoint(
            kind=model.kind,
            model_config=model.config,
            epoch=epoch,
            arrays={n: a.copy() for n, a in model.state_arrays()},
            optimizer=adam.state(),
            rng_state={"scheme": "per-epoch-derived", "seed": cfg.seed, "epoch": epoch},
            val_nmse_db=val_db,
        )

    init_val = evaluate(model, val_ds) if val_ds is not None else None
    best = snapshot(-1, init_val)
    best_val = init_val if init_val is not None else math.inf

    log = CurveLog(init_val_nmse_db=init_val)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(count)
        loss_sum = 0.0
        for a, b in _model_batches(count, cfg.batch_size):
            x = Tensor(images[perm[a:b]])
            out = model.forward(x, training=True)
            loss = mse_loss(out, x)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                raise TrainingDivergedError(f"loss became {loss_value} at epoch {epoch}")
            backward(loss)
            adam.step(lr)
            adam.zero_grad()
            loss_sum += loss_value * (b - a)
        train_loss = loss_sum / count

        val_db = None
        if val_ds is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            val_db = evaluate(model, val_ds)
            if val_db < best_val:
                best_val = val_db
                best = snapshot(epoch, val_db)
        log.rows.append(CurveRow(epoch, lr, train_loss, val_db))

    if val_ds is None:
        best = snapshot(cfg.epochs - 1, None)
    return best, log


def _header_path(path):
    return Path(str(path) + ".json")


def save_checkpoint(ckpt, path):
    """Write the f32 payload to ``path`` and the JSON manifest sidecar."""
    path = Path(path)
    chunks = []
    offset = 0

    def add_tensor(name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr)
        if arr.dtype != np.float32:
            raise ValueError(f"checkpoint stores float32 tensors, {name} is {arr.dtype}")
        raw = arr.astype("<f4").tobytes()
        entry = {"name": name, "shape": list(arr.shape), "offset": offset}
        offset += len(raw)
        chunks.append(raw)
        return entry

    tensors = [add_tensor(n, a) for n, a in ckpt.arrays.items()]
    opt = None
    if ckpt.optimizer is not None:
        opt_tensors = [add_tensor(f"adam.m.{n}", a) for n, a in ckpt.optimizer["m"].items()]
        opt_tensors += [add_tensor(f"adam.v.{n}", a) for n, a in ckpt.optimizer["v"].items()]
        opt = {"step": int(ckpt.optimizer["step"]), "tensors": opt_tensors}

    manifest = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "kind": ckpt.kind,
        "config": ckpt.model_config.to_dict(),
        "epoch": int(ckpt.epoch),
        "val_nmse_db": ckpt.val_nmse_db,
        "rng_state": ckpt.rng_state,
        "tensors": tensors,
        "optimizer": opt,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    _header_path(path).write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def _read_tensors(entries, raw, path):
    out = {}
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        nbytes = int(np.prod(shape)) * 4 if shape else 4
        a, b = int(e["offset"]), int(e["offset"]) + nbytes
        if b > len(raw):
            raise TruncatedPayloadError(f"{path}: tensor {e['name']} overruns payload")
        out[e["name"]] = np.frombuffer(raw[a:b], dtype="<f4").reshape(shape).copy()
    return out


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint."""
    path = Path(path)
    hpath = _header_path(path)
    if not hpath.exists():
        raise CorruptHeaderError(f"missing manifest sidecar {hpath}")
    try:
        manifest = json.loads(hpath.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptHeaderError(f"unreadable manifest {hpath}: {e}") from e
    if not isinstance(manifest, dict) or manifest.get("magic") != CHECKPOINT_MAGIC:
        raise CorruptHeaderError(f"bad magic in {hpath}")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"checkpoint version {manifest.get('version')!r}, this build reads {CHECKPOINT_VERSION}"
        )
    try:
        kind = manifest["kind"]
        config = ModelConfig.from_dict(manifest["config"])
        epoch = int(manifest["epoch"])
        entries = manifest["tensors"]
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptHeaderError(f"manifest {hpath} lacks required fields: {e}") from e

    raw = path.read_bytes()
    expected = sum(int(np.prod(e["shape"])) * 4 for e in entries)
    opt_manifest = manifest.get("optimizer")
    if opt_manifest:
        expected += sum(int(np.prod(e["shape"])) * 4 for e in opt_manifest["tensors"])
    if len(raw) != expected:
        raise TruncatedPayloadError(f"{path}: payload is {len(raw)} bytes, manifest promises {expected}")

    arrays = _read_tensors(entries, raw, path)
    optimizer = None
    if opt_manifest:
        opt_arrays = _read_tensors(opt_manifest["tensors"], raw, path)
        optimizer = {
            "step": int(opt_manifest["step"]),
            "m": {k[len("adam.m."):]: v for k, v in opt_arrays.items() if k.startswith("adam.m.")},
            "v": {k[len("adam.v."):]: v for k, v in opt_arrays.items() if k.startswith("adam.v.")},
        }
    return Checkpoint(
        kind=kind,
        model_config=config,
        epoch=epoch,
        arrays=arrays,
        optimizer=optimizer,
        rng_state=manifest.get("rng_state", {}),
        val_nmse_db=manifest.get("val_nmse_db"),
    )


def rebuild_model(ckpt, dtype=np.float32):
    """Instantiate the checkpointed model and load all stored state."""
    model = build_model(ckpt.kind, ckpt.model_config, rng=0, dtype=dtype)
    model.load_state(ckpt.arrays)
    return model
