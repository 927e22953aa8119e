"""Training loop (Adam), checkpoints, gradient checking, inference and the
plain-residual ablation baseline."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import backward
from .model import forward, init_params, predict
from .types import FeatureSequence, ModelConfig, ModelParams, SegmentSet

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"UCLFCKPT"
CHECKPOINT_VERSION = 1
EARLY_STOP_MIN_IMPROVEMENT = 1e-5
# denominator floor for relative gradient errors; below it the check is absolute
GRAD_REL_FLOOR = 1e-3


class TrainingError(RuntimeError):
    pass


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        """In-place update of ``params`` (name -> array)."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            params[k] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class Checkpoint:
    params: ModelParams
    config: ModelConfig
    adam_m: dict
    adam_v: dict
    adam_step: int
    epoch: int
    rng_state: dict
    loss_history: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


# -- checkpoint container ---------------------------------------------------
#
# layout (little-endian):
#   8s   magic "UCLFCKPT"
#   u32  version
#   u32  header length n
#   n    UTF-8 JSON header: config, epoch, adam_step, rng_state, loss_history,
#        metadata, params [[name, shape], ...]
#   f64  parameter values, declared order, each array row-major
#   f64  Adam first moments, same order (zeros before the first step)
#   f64  Adam second moments, same order

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = ckpt.params.names()
    header = {
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "adam_step": ckpt.adam_step,
        "rng_state": ckpt.rng_state,
        "loss_history": ckpt.loss_history,
        "metadata": ckpt.metadata,
        "params": [[n, list(ckpt.params[n].shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    for source in (ckpt.params.arrays, ckpt.adam_m, ckpt.adam_v):
        for n in names:
            arr = source.get(n)
            if arr is None:
                arr = np.zeros_like(ckpt.params[n])
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + n])
    offset = 16 + n
    blocks = []
    for _ in range(3):
        block = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            block[name] = arr.reshape(shape).astype(np.float64)
            offset += 8 * count
        blocks.append(block)
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes")
    params, m, v = blocks
    if header["adam_step"] == 0:
        m, v = {}, {}
    return Checkpoint(ModelParams(params), ModelConfig.from_dict(header["config"]), m, v,
                      header["adam_step"], header["epoch"], header["rng_state"],
                      header["loss_history"], header["metadata"])


# -- training ---------------------------------------------------------------

def _shuffle_rng(config):
    return np.random.default_rng([config.seed, 1])


def _check_dims(config, dataset):
    for seq, _ in dataset:
        if seq.feature_dim != config.input_dim:
            raise ValueError(f"{seq.id}: feature_dim {seq.feature_dim} does not match "
                             f"config input_dim {config.input_dim}")


def _dump_nonfinite(out_dir, batch, fp):
    info = {"samples": [seq.id for seq, _ in batch],
            "breakdown": {"cls": fp.breakdown.cls, "reg": fp.breakdown.reg,
                          "cacl": fp.breakdown.cacl, "total": fp.breakdown.total}}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "nonfinite_dump.json").write_text(json.dumps(info, indent=1))
    return info


def train(config: ModelConfig, dataset, out_dir=None, resume: Checkpoint = None,
          params: ModelParams = None) -> Checkpoint:
    """Run (or continue) training up to ``config.epochs`` epochs.

    With ``out_dir`` a checkpoint is written after every epoch. Passing
    ``resume`` continues from a saved state; the result is identical to an
    uninterrupted run with the same config.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    _check_dims(config, dataset)
    rng = _shuffle_rng(config)
    opt = Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon)
    if resume is not None:
        params = resume.params.copy()
        opt.m = {k: v.copy() for k, v in resume.adam_m.items()}
        opt.v = {k: v.copy() for k, v in resume.adam_v.items()}
        opt.t = resume.adam_step
        rng.bit_generator.state = resume.rng_state
        epoch = resume.epoch
        history = list(resume.loss_history)
        metadata = dict(resume.metadata)
    else:
        params = (init_params(config) if params is None else params).copy()
        epoch = 0
        history = []
        metadata = {}
    if config.ablation:
        metadata["ablation"] = "residual_conv"
        metadata["cacl_weight_forced_zero"] = True

    def snapshot():
        return Checkpoint(params.copy(), config, {k: v.copy() for k, v in opt.m.items()},
                          {k: v.copy() for k, v in opt.v.items()}, opt.t, epoch,
                          rng.bit_generator.state, list(history), dict(metadata))

    while epoch < config.epochs:
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            fp = forward(params, batch, config)
            if not math.isfinite(fp.breakdown.total):
                info = _dump_nonfinite(out_dir, batch, fp)
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}: {info}")
            grads = backward(fp)
            opt.step(params.arrays, grads)
            epoch_losses.append(fp.breakdown.total)
        epoch += 1
        mean_loss = sum(epoch_losses) / len(epoch_losses)
        history.append({"epoch": epoch, "mean_loss": mean_loss, "step_losses": epoch_losses})
        log.info("epoch %d  loss %.6f", epoch, mean_loss)
        if out_dir is not None:
            save_checkpoint(snapshot(), Path(out_dir) / "checkpoint.bin")
        w = config.early_stop_window
        if w and len(history) >= 2 * w:
            recent = sum(h["mean_loss"] for h in history[-w:]) / w
            before = sum(h["mean_loss"] for h in history[-2 * w:-w]) / w
            if before - recent < EARLY_STOP_MIN_IMPROVEMENT:
                log.info("early stop at epoch %d", epoch)
                metadata["early_stopped_at"] = epoch
                break
    return snapshot()


def ablation_baseline(config: ModelConfig, dataset, out_dir=None) -> Checkpoint:
    """Same pipeline with CaP layers swapped for residual conv blocks and no CaCL."""
    return train(config.replace(ablation=True, cacl_weight=0.0), dataset, out_dir)


def infer(ckpt: Checkpoint, dataset) -> dict:
    _check_dims(ckpt.config, dataset)
    return {seq.id: predict(seq, ckpt.params, ckpt.config) for seq, _ in dataset}


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple
    analytic: float
    numeric: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(a, n, floor=GRAD_REL_FLOOR):
    if a == 0 and n == 0:
        return 0.0
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(loss_fn, arrays: dict, grads: dict, step=1e-6, tolerance=1e-5,
                    max_coords=None, seed=0, floor=GRAD_REL_FLOOR) -> GradCheckReport:
    """Compare ``grads`` with central differences of ``loss_fn(arrays)``.

    With ``max_coords`` set, a seeded random subset of coordinates is checked.
    """
    coords = [(name, idx) for name, arr in arrays.items() for idx in np.ndindex(arr.shape)]
    if max_coords is not None and len(coords) > max_coords:
        pick = np.random.default_rng(seed).choice(len(coords), max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst = (0.0, None, 0.0, 0.0)
    for name, idx in coords:
        arr = arrays[name]
        orig = arr[idx]
        arr[idx] = orig + step
        plus = loss_fn(arrays)
        arr[idx] = orig - step
        minus = loss_fn(arrays)
        arr[idx] = orig
        numeric = (plus - minus) / (2 * step)
        analytic = float(grads[name][idx])
        err = relative_error(analytic, numeric, floor)
        if err > worst[0] or worst[1] is None:
            worst = (err, (name, idx), analytic, numeric)
    return GradCheckReport(worst[0], worst[1], worst[2], worst[3], len(coords), tolerance)


def grad_check(config: ModelConfig, sample, step=1e-6, tolerance=1e-5, params=None,
               max_coords=None, seed=0) -> GradCheckReport:
    """Finite-difference check of the full objective on one sample."""
    params = (init_params(config) if params is None else params).copy()
    batch = [sample]
    grads = backward(forward(params, batch, config))

    def loss_fn(arrays):
        return forward(ModelParams(arrays), batch, config).loss.item()

    return check_gradients(loss_fn, params.arrays, grads, step, tolerance, max_coords, seed)


def gradcheck_fixture(config: ModelConfig, num_instants=8, seed=0):
    """Random sample and jittered parameters for :func:`grad_check`.

    Segment edges are fractional and all biases nonzero, so no ReLU, max or
    interval-endpoint comparison sits exactly on a kink.
    """
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(num_instants, config.input_dim))
    seq = FeatureSequence(f"gradcheck{seed}", feats, 1.0, float(num_instants))
    a = rng.uniform(0.15, 0.35) * num_instants
    b = rng.uniform(0.6, 0.85) * num_instants
    gt = SegmentSet(((a, b),))
    params = init_params(config, seed=seed)
    for name, arr in params.items():
        arr += rng.normal(0.0, 0.1, size=arr.shape)
    return (seq, gt), params
