"""Classifier training loop, evaluation, checkpoints and curve logs."""

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import DatasetIndex, LabeledBatch, load_split
from .errors import CheckpointFormatError, CheckpointIntegrityError, NonFiniteError, TrainingDiverged
from .models import build, predict
from .optim import Adam, bce_loss

logger = logging.getLogger(__name__)

MAGIC = b"ACDLCKPT1\n"
FORMAT_VERSION = 1
CURVE_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainRun:
    model_tag: str = "cnn"
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss: str = "bce"
    augmentation: dict = None
    keep_best: bool = True
    curves: list = field(default_factory=list)
    best_epoch: int = None
    best_val_acc: float = None

    def validate(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.loss != "bce":
            raise ValueError(f"classifier loss must be 'bce', got {self.loss!r}")


def _as_batch(split, model, params):
    if isinstance(split, LabeledBatch):
        return split
    if isinstance(split, DatasetIndex):
        return load_split(split, model.input_spec[:2], params)
    images, labels = split
    return LabeledBatch(np.asarray(images), np.asarray(labels, dtype=np.int64))


def _bce_value(scores, labels):
    with T.no_grad():
        return bce_loss(T.Tensor(scores, dtype=np.float64), labels).item()


def train_classifier(model, train, val, run, params=None, log=None):
    """Minibatch Adam on BCE with a full eval-mode validation pass per epoch.

    ``train``/``val`` are :class:`DatasetIndex`, :class:`LabeledBatch` or
    ``(images, labels)``.  With ``run.keep_best`` the parameters of the epoch
    with the highest validation accuracy (earliest on ties) are restored at
    the end.  Returns ``(model, run)``.
    """
    run.validate()
    log = log or logger.info
    train, val = _as_batch(train, model, params), _as_batch(val, model, params)
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and val splits must be non-empty")
    rng = np.random.default_rng(run.seed)
    opt = Adam(model.parameters(), lr=run.lr, beta1=run.beta1, beta2=run.beta2, eps=run.eps)
    best = None
    n = len(train)
    for epoch in range(1, run.epochs + 1):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        try:
            for start in range(0, n, run.batch_size):
                idx = order[start:start + run.batch_size]
                y = train.labels[idx]
                out = model(train.images[idx], training=True, rng=rng)
                loss = bce_loss(out, y)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                correct += int(np.sum((out.data.reshape(-1) >= 0.5) == y))
            pred, scores = predict(model, val.images, run.batch_size)
            val_loss = _bce_value(scores, val.labels)
        except NonFiniteError as exc:
            raise TrainingDiverged(epoch, str(exc)) from exc
        stats = EpochStats(epoch, total / n, correct / n, val_loss, float(np.mean(pred == val.labels)))
        if not all(math.isfinite(v) for v in (stats.train_loss, stats.val_loss)):
            raise TrainingDiverged(epoch, "non-finite loss")
        run.curves.append(stats)
        log(f"epoch={epoch} split=train loss={stats.train_loss:.6f} acc={stats.train_acc:.6f}")
        log(f"epoch={epoch} split=val loss={stats.val_loss:.6f} acc={stats.val_acc:.6f}")
        if run.best_val_acc is None or stats.val_acc > run.best_val_acc:
            run.best_val_acc, run.best_epoch = stats.val_acc, epoch
            if run.keep_best:
                best = _state(model)
    if best is not None:
        _restore(model, best)
    return model, run


def _state(model):
    return ({k: p.data.copy() for k, p in model.parameters().items()},
            {k: b.copy() for k, b in model.buffers().items()})


def _restore(model, state):
    params, buffers = state
    for k, p in model.parameters().items():
        p.data[...] = params[k]
    for k, b in model.buffers().items():
        b[...] = buffers[k]


@dataclass
class EvalResult:
    labels: np.ndarray
    scores: np.ndarray
    predictions: np.ndarray
    paths: list


def evaluate(model, split, params=None, batch_size=64):
    """Eval-mode ``(labels, scores, predictions)`` over ``split`` in index order."""
    batch = _as_batch(split, model, params)
    if len(batch) == 0:
        raise ValueError("cannot evaluate an empty split")
    pred, scores = predict(model, batch.images, batch_size)
    return EvalResult(batch.labels.copy(), scores, pred, list(batch.paths))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model, path, metadata=None):
    """Write magic, manifest length (u64 LE), JSON manifest, float32 LE payload."""
    entries, chunks, offset = [], [], 0
    tensors = [("param", k, p.data) for k, p in model.parameters().items()]
    tensors += [("buffer", k, b) for k, b in model.buffers().items()]
    for kind, name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(arr.shape),
                        "dtype": "float32", "offset": offset})
        chunks.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "architecture": {"tag": model.tag, "config": model.config},
        "tensors": entries,
        "metadata": metadata or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks))
    tmp.replace(path)
    return path


def read_checkpoint(path):
    """Parse and validate a checkpoint; returns ``(manifest, {name: float32 array})``."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        if blob.startswith(b"ACDLCKPT"):
            raise CheckpointFormatError(f"{path}: unsupported checkpoint version {blob[:10]!r}")
        raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointIntegrityError(f"{path}: truncated before manifest length")
    (mlen,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    if len(blob) < pos + mlen:
        raise CheckpointIntegrityError(f"{path}: truncated manifest ({len(blob) - pos} of {mlen} bytes)")
    try:
        manifest = json.loads(blob[pos:pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable manifest: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {manifest.get('format_version')!r}")
    payload = blob[pos + mlen:]
    expected = sum(4 * math.prod(e["shape"]) for e in manifest["tensors"])
    if len(payload) != expected:
        raise CheckpointIntegrityError(
            f"{path}: manifest describes {expected} payload bytes, file has {len(payload)}")
    arrays, offset = {}, 0
    for e in manifest["tensors"]:
        if e["dtype"] != "float32" or e["offset"] != offset:
            raise CheckpointIntegrityError(f"{path}: inconsistent manifest entry {e['name']!r}")
        count = math.prod(e["shape"])
        arrays[e["name"]] = np.frombuffer(payload, "<f4", count, offset).reshape(e["shape"]).astype(np.float32)
        offset += 4 * count
    return manifest, arrays


def load_checkpoint(path, with_manifest=False):
    """Rebuild the architecture and copy the stored tensors in bitwise."""
    manifest, arrays = read_checkpoint(path)
    arch = manifest["architecture"]
    model = build(arch["tag"], arch["config"])
    expected = {**{k: p.data for k, p in model.parameters().items()}, **model.buffers()}
    if set(expected) != set(arrays):
        missing, extra = sorted(set(expected) - set(arrays)), sorted(set(arrays) - set(expected))
        raise CheckpointIntegrityError(f"{path}: tensor names disagree (missing {missing}, extra {extra})")
    for name, target in expected.items():
        if target.shape != arrays[name].shape:
            raise CheckpointIntegrityError(f"{path}: {name} has shape {arrays[name].shape}, expected {target.shape}")
        target[...] = arrays[name]
    return (model, manifest) if with_manifest else model


# ---------------------------------------------------------------------------
# curve logs
# ---------------------------------------------------------------------------

def log_curves(run, path):
    """One CSV row per epoch, 6-decimal fixed point."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for s in run.curves:
            w.writerow([s.epoch] + [f"{v:.6f}" for v in (s.train_loss, s.train_acc, s.val_loss, s.val_acc)])
    return path


def read_curves(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochStats(int(r["epoch"]), *(float(r[k]) for k in CURVE_HEADER[1:])) for r in rows]
