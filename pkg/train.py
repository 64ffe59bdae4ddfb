"""
Training Module - Weighted pose loss, Adam, learning-rate schedule, flip
augmentation, epoch loop and checkpoint persistence
"""
import json
import logging
import os
import queue
import struct
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

import tensor as T
from tensor import Tensor
from config import ModelConfig, TrainConfig
from data import Dataset
from dcgct import (
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION, CheckpointError, DatasetError, GradientError,
    NumericalError, ShapeError, __version__, worker_count,
)
from metrics import mpjpe
from model import DCGCT, ModelParams, forward, init_params
from skeleton import SkeletonTopology, flip_pose

log = logging.getLogger("dcgct.train")


def weighted_pose_loss(pred: Tensor, target, weights: Sequence[float]) -> Tensor:
    """
    Mean over the batch of (1/N)·Σ_i θ_i·‖Y_i − Ŷ_i‖₂

    Args:
        pred: Tensor [B, N, 3]
        target: [B, N, 3] array or Tensor
        weights: θ, length N

    Returns:
        Scalar Tensor
    """
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"loss: prediction {pred.shape} vs target {target.shape}")
    theta = np.asarray(weights, dtype=pred.dtype)
    if theta.shape != (pred.shape[-2],):
        raise ShapeError(f"loss: {theta.size} joint weights for {pred.shape[-2]} joints")
    distances = T.joint_norm(pred - target)
    return T.mean(distances * Tensor(theta, dtype=pred.dtype))


def lr_at_epoch(epoch: int, cfg: TrainConfig, frames: int = 1) -> float:
    """lr0 · per_epoch_decay^e · five_epoch_decay^⌊e/5⌋"""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.resolved_lr0(frames) * cfg.per_epoch_decay ** epoch * cfg.five_epoch_decay ** (epoch // 5)


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "OptimizerState":
        return cls(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)


def collect_grads(params) -> Dict[str, Optional[np.ndarray]]:
    return {name: t.grad for name, t in params.items()}


def optimizer_step(params, grads: Mapping[str, Optional[np.ndarray]], state: OptimizerState, lr: float):
    """
    Bias-corrected adaptive-moment update, in place

    Args:
        params: ModelParams or mapping name -> Tensor
        grads: name -> gradient array, one per parameter
        state: Moments and step counter (updated)
        lr: Step size
    """
    tensors = dict(params.items())
    missing = [name for name in tensors if grads.get(name) is None]
    if missing:
        raise GradientError(f"missing gradients for {len(missing)} parameter(s), e.g. {missing[0]}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name, t in tensors.items():
        g = np.asarray(grads[name], dtype=t.dtype)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m.astype(t.dtype), v.astype(t.dtype)
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        t.data = (t.data - lr * update).astype(t.dtype)


def augment_batch(inputs: np.ndarray, targets: np.ndarray, topo: SkeletonTopology,
                  rng: np.random.Generator, probability: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """Flip each sample's 2D input and 3D target together with the given probability"""
    inputs, targets = inputs.copy(), targets.copy()
    flips = rng.random(len(inputs)) < probability
    for i in np.flatnonzero(flips):
        inputs[i] = flip_pose(inputs[i], topo)
        targets[i] = flip_pose(targets[i], topo)
    return inputs, targets


@dataclass
class TrainReport:
    epochs: List[Dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mpjpe_mm: Optional[float] = None
    final_train_mpjpe_mm: Optional[float] = None
    checkpoint_path: Optional[str] = None

    def to_dict(self) -> Dict:
        return {
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "best_val_mpjpe_mm": self.best_val_mpjpe_mm,
            "final_train_mpjpe_mm": self.final_train_mpjpe_mm,
            "checkpoint_path": self.checkpoint_path,
        }


def predict_dataset(model: DCGCT, dataset: Dataset, batch_size: int = 256, flip_test: bool = False) -> np.ndarray:
    """Eval-mode predictions [B, N, 3] in dataset order"""
    if len(dataset) == 0:
        return np.zeros((0, model.cfg.joints, 3), dtype=np.float32)
    outputs = []
    for idx in dataset.batches(batch_size):
        outputs.append(model.predict(dataset.inputs(idx), flip_test=flip_test))
    return np.concatenate(outputs)


BATCH_THREAD_NAME = "dcgct-batches"
PUT_POLL_SECONDS = 0.05


def _prepare_batch(dataset: Dataset, cfg: TrainConfig, idx: np.ndarray, rng: np.random.Generator):
    inputs, targets = dataset.inputs(idx), dataset.targets(idx)
    if cfg.flip_augment:
        inputs, targets = augment_batch(inputs, targets, dataset.topology, rng)
    return inputs, targets


def _put(out: queue.Queue, item, stop: threading.Event) -> bool:
    """Blocking put that gives up once stop is set; False when abandoned"""
    while not stop.is_set():
        try:
            out.put(item, timeout=PUT_POLL_SECONDS)
            return True
        except queue.Full:
            continue
    return False


def _batch_producer(dataset: Dataset, cfg: TrainConfig, rng: np.random.Generator, out: queue.Queue,
                    stop: threading.Event):
    """Single worker; shuffle and flips draw from one generator in batch order"""
    try:
        for idx in dataset.batches(cfg.batch_size, rng):
            if stop.is_set() or not _put(out, _prepare_batch(dataset, cfg, idx, rng), stop):
                return
    except Exception as e:  # surfaced to the consumer
        _put(out, e, stop)
        return
    _put(out, None, stop)


def _pool_producer(dataset: Dataset, cfg: TrainConfig, jobs: queue.Queue, out: queue.Queue,
                   stop: threading.Event):
    """One of several workers sharing (indices, seed) jobs; output follows completion order"""
    try:
        while not stop.is_set():
            try:
                idx, seed = jobs.get_nowait()
            except queue.Empty:
                break
            if not _put(out, _prepare_batch(dataset, cfg, idx, np.random.default_rng(seed)), stop):
                return
    except Exception as e:
        _put(out, e, stop)
        return
    _put(out, None, stop)


def _epoch_batches(dataset: Dataset, cfg: TrainConfig, rng: np.random.Generator):
    """
    Batches prepared ahead on worker threads through a bounded queue

    Determinism mode runs one worker and yields batches in shuffle order. With
    determinism off and DCGCT_THREADS > 1 the shuffle and per-batch flip seeds
    are drawn up front, the workers share the batches and the consumer takes
    them as they complete. Workers are stopped and joined however the consumer
    leaves, including on an exception or close().
    """
    q: queue.Queue = queue.Queue(maxsize=cfg.queue_size)
    stop = threading.Event()
    threads = 1 if cfg.determinism else worker_count()
    if threads <= 1:
        workers = [threading.Thread(target=_batch_producer, args=(dataset, cfg, rng, q, stop),
                                    name=BATCH_THREAD_NAME, daemon=True)]
    else:
        jobs: queue.Queue = queue.Queue()
        for idx in dataset.batches(cfg.batch_size, rng):
            jobs.put((idx, int(rng.integers(2 ** 32))))
        workers = [threading.Thread(target=_pool_producer, args=(dataset, cfg, jobs, q, stop),
                                    name=BATCH_THREAD_NAME, daemon=True) for _ in range(threads)]
    for worker in workers:
        worker.start()
    running = len(workers)
    try:
        while running:
            item = q.get()
            if item is None:
                running -= 1
                continue
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
        for worker in workers:
            worker.join()


def train(model: DCGCT, dataset: Dataset, cfg: TrainConfig, val: Optional[Dataset] = None,
          out_dir: Optional[str] = None, quiet: bool = False) -> TrainReport:
    """
    Train in place; keeps the best-by-validation parameters

    Per epoch: seeded shuffle, optional paired flip, forward, weighted loss,
    backward, Adam step, then validation MPJPE. Writes log.jsonl and best.ckpt
    into out_dir when given.

    Args:
        model: Model to train (params mutated)
        dataset: Training set, arity must match model config
        cfg: Training config
        val: Validation set (defaults to the training set)
        out_dir: Output directory for log and checkpoint
        quiet: Disable progress bars

    Returns:
        TrainReport
    """
    cfg.validate()
    if len(dataset) == 0:
        raise DatasetError("training dataset is empty")
    if dataset.frames != model.cfg.frames:
        raise ShapeError(f"dataset has {dataset.frames} frame(s), model expects {model.cfg.frames}")
    val = val if val is not None else dataset
    if len(val) and val.frames != model.cfg.frames:
        raise ShapeError(f"validation set has {val.frames} frame(s), model expects {model.cfg.frames}")

    weights = cfg.resolved_weights(model.cfg.joints)
    rng = np.random.default_rng(cfg.seed)
    dropout_rng = np.random.default_rng(cfg.seed + 1)
    state = OptimizerState.from_config(cfg)
    report = TrainReport()
    log_path = ckpt_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "log.jsonl")
        ckpt_path = os.path.join(out_dir, "best.ckpt")
        open(log_path, "w").close()

    show_bar = not quiet and sys.stderr.isatty()
    n_batches = int(np.ceil(len(dataset) / cfg.batch_size))
    best = None

    for epoch in range(cfg.epochs):
        start = time.time()
        lr = lr_at_epoch(epoch, cfg, model.cfg.frames)
        losses = []
        producer = _epoch_batches(dataset, cfg, rng)
        batches = tqdm(producer, total=n_batches, disable=not show_bar, desc=f"epoch {epoch}", leave=False)
        try:
            for inputs, targets in batches:
                model.params.zero_grad()
                with T.recording() as tape:
                    pred = forward(inputs, model.params, model.cfg, model.adjacency, "train", dropout_rng)
                    loss = weighted_pose_loss(pred, targets, weights)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericalError(f"NaN/Inf loss at epoch {epoch} (lr {lr:.3g}, batch of {len(inputs)})")
                T.backward(tape, loss)
                optimizer_step(model.params, collect_grads(model.params), state, lr)
                losses.append(value)
                batches.set_postfix(loss=f"{value:.2f}")
        finally:
            batches.close()
            producer.close()

        val_mpjpe = mpjpe(predict_dataset(model, val), val.targets()) if len(val) else float("nan")
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "val_mpjpe_mm": val_mpjpe,
            "wall_ms": int((time.time() - start) * 1000),
        }
        report.epochs.append(record)
        log.info(f"[TRAIN] epoch {epoch}: lr={lr:.3g} loss={record['train_loss']:.3f} val_mpjpe={val_mpjpe:.2f}mm")
        if log_path:
            with open(log_path, "a") as f:
                f.write(json.dumps(record) + "\n")

        if best is None or val_mpjpe < best:
            best = val_mpjpe
            report.best_epoch = epoch
            report.best_val_mpjpe_mm = val_mpjpe
            if ckpt_path:
                save_checkpoint(model.params, state, model.cfg, ckpt_path, train_cfg=cfg,
                                extra={"epoch": epoch, "val_mpjpe_mm": val_mpjpe})
                report.checkpoint_path = ckpt_path

    report.final_train_mpjpe_mm = mpjpe(predict_dataset(model, dataset), dataset.targets())
    log.info(f"[TRAIN] done: best epoch {report.best_epoch}, final train MPJPE {report.final_train_mpjpe_mm:.2f}mm")
    return report


# Checkpoints
#
# Layout: magic (8 bytes) | header length (uint32 LE) | JSON header | float32 LE blob.
# The header lists every tensor as {name, shape, offset} with offsets in floats.
# Batch-norm running stats are held in float64 and stored rounded to float32;
# loading widens them back, so they round-trip to float32 precision only.

@dataclass
class Checkpoint:
    params: ModelParams
    opt_state: Optional[OptimizerState]
    model_cfg: ModelConfig
    train_cfg: Optional[TrainConfig] = None
    extra: Dict = field(default_factory=dict)


def save_checkpoint(params: ModelParams, opt_state: Optional[OptimizerState], cfg: ModelConfig, path: str,
                    train_cfg: Optional[TrainConfig] = None, extra: Optional[Dict] = None):
    entries: List[Tuple[str, np.ndarray]] = [(f"param/{n}", t.data) for n, t in params.items()]
    for name, s in params.stats.items():
        if s.ready:
            entries.append((f"stats/{name}/mean", s.mean))
            entries.append((f"stats/{name}/var", s.var))
    if opt_state is not None:
        for name in params.names():
            if name in opt_state.m:
                entries.append((f"adam_m/{name}", opt_state.m[name]))
                entries.append((f"adam_v/{name}", opt_state.v[name]))

    manifest, offset = [], 0
    for name, arr in entries:
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(arr.size)

    header = {
        "format_version": CHECKPOINT_VERSION,
        "toolkit_version": __version__,
        "config": cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "optimizer": None if opt_state is None else {
            "step": opt_state.step, "beta1": opt_state.beta1, "beta2": opt_state.beta2, "eps": opt_state.eps},
        "extra": extra or {},
        "tensors": manifest,
        "blob_floats": offset,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for _, arr in entries:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)
    log.debug(f"Saved checkpoint {path} ({offset} floats)")


def load_checkpoint(path: str, expected_cfg: Optional[ModelConfig] = None) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint

    Args:
        path: Checkpoint file
        expected_cfg: When given, the stored model config must equal it

    Returns:
        Checkpoint with float32 parameters and float32-rounded running stats
    """
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")

    prefix = len(CHECKPOINT_MAGIC) + 4
    if len(raw) < prefix:
        raise CheckpointError("truncated checkpoint: missing header")
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (header_len,) = struct.unpack("<I", raw[len(CHECKPOINT_MAGIC):prefix])
    if len(raw) < prefix + header_len:
        raise CheckpointError("truncated checkpoint: header cut short")
    try:
        header = json.loads(raw[prefix:prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}")

    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {header.get('format_version')} "
                              f"is not supported (expected {CHECKPOINT_VERSION})")
    blob = raw[prefix + header_len:]
    if len(blob) < 4 * header["blob_floats"]:
        raise CheckpointError(f"truncated checkpoint: {len(blob)} of {4 * header['blob_floats']} payload bytes")
    floats = np.frombuffer(blob, dtype="<f4", count=header["blob_floats"])

    cfg = ModelConfig.from_dict(header["config"])
    if expected_cfg is not None and expected_cfg.to_dict() != cfg.to_dict():
        raise CheckpointError("config mismatch: checkpoint was written for a different model config")

    with T.precision(np.float32):
        params = init_params(cfg)
    found = {}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        found[entry["name"]] = floats[entry["offset"]:entry["offset"] + size].reshape(entry["shape"]).copy()

    for name, t in params.items():
        arr = found.get(f"param/{name}")
        if arr is None or arr.shape != t.shape:
            raise CheckpointError(f"config mismatch: tensor {name} missing or has the wrong shape")
        t.data = arr.astype(np.float32)
    if len(params.tensors) != len([k for k in found if k.startswith("param/")]):
        raise CheckpointError("config mismatch: checkpoint holds tensors the config does not define")
    for name, s in params.stats.items():
        mean, var = found.get(f"stats/{name}/mean"), found.get(f"stats/{name}/var")
        if mean is not None and var is not None:
            s.mean, s.var = mean.astype(np.float64), var.astype(np.float64)

    opt_state = None
    if header.get("optimizer"):
        o = header["optimizer"]
        opt_state = OptimizerState(beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"])
        for name in params.names():
            if f"adam_m/{name}" in found:
                opt_state.m[name] = found[f"adam_m/{name}"]
                opt_state.v[name] = found[f"adam_v/{name}"]

    train_cfg = TrainConfig.from_dict(header["train_config"]) if header.get("train_config") else None
    return Checkpoint(params, opt_state, cfg, train_cfg, header.get("extra", {}))
