"""
Training for the TAGS toolkit
Reverse-mode gradients, Adam, the epoch loop, checkpoints and metrics
"""

import csv
import json
import logging
import os
import struct
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from core.config import RunConfig, TrainConfig
from core.errors import RuntimeFailure, ValidationError
from core.status_bar import StatusBar
from modules.data_io import VideoSample
from modules.labels import ScaleTargets, assign_all_scales
from modules.losses import TERMS, total_loss
from modules.model import DTYPE, TagsModel, build_model

logger = logging.getLogger(f"tags.{__name__}")

CHECKPOINT_MAGIC = b"TAGC"
CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ("epoch",) + TERMS + ("total",)


class NonFiniteGradientError(RuntimeFailure):
    """A gradient or parameter stopped being finite"""

    def __init__(self, name: str, what: str = "gradient"):
        super().__init__(f"non-finite {what} in tensor '{name}'")
        self.name = name


class TrainingDiverged(RuntimeFailure):
    """Loss became non-finite; the last good checkpoint is kept"""

    def __init__(self, epoch: int, checkpoint: Optional[Path]):
        super().__init__(f"non-finite loss in epoch {epoch}; last good checkpoint: {checkpoint}")
        self.epoch = epoch
        self.checkpoint = checkpoint


class CheckpointFormatError(ValidationError):
    """Checkpoint file is malformed or does not fit the model"""


class KeyMismatchError(ValidationError):
    """Parameter, gradient and optimiser tables disagree on names"""


# Gradients

def backward(loss: torch.Tensor, params: "OrderedDict[str, torch.Tensor]",
             retain_graph: bool = False) -> "OrderedDict[str, torch.Tensor]":
    """Exact gradients of a scalar loss for every named tensor

    Tensors the loss does not reach get zeros.
    """
    names = list(params)
    tensors = [params[n] for n in names]
    if loss.requires_grad:
        raw = torch.autograd.grad(loss, tensors, allow_unused=True, retain_graph=retain_graph)
    else:
        raw = [None] * len(tensors)
    grads = OrderedDict()
    for name, tensor, g in zip(names, tensors, raw):
        g = torch.zeros_like(tensor) if g is None else g.detach()
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradientError(name)
        grads[name] = g
    return grads


# Optimiser

@dataclass
class AdamState:
    """Moment estimates per tensor and the step counter"""
    step: int = 0
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: "OrderedDict[str, torch.Tensor]", grads: Dict[str, torch.Tensor],
              state: AdamState, config: TrainConfig) -> Tuple["OrderedDict[str, torch.Tensor]", AdamState]:
    """One bias-corrected Adam update, applied in place"""
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise KeyMismatchError(f"parameter and gradient names differ: {missing[:3]}")
    if state.m and set(state.m) != set(params):
        raise KeyMismatchError("optimiser state does not match the parameter table")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name, param in params.items():
            g = grads[name]
            m = state.m.get(name)
            v = state.v.get(name)
            m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
            v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
            state.m[name], state.v[name] = m, v
            param -= config.lr * (m / c1) / (torch.sqrt(v / c2) + config.adam_eps)
            if not bool(torch.isfinite(param).all()):
                raise NonFiniteGradientError(name, "parameter")
    return params, state


# Checkpoints

def save_checkpoint(path, params: "OrderedDict[str, torch.Tensor]", meta: dict) -> Path:
    """Write the TAGC file atomically (temp file, then rename)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        values = tensor.detach().cpu().numpy().astype("<f8", copy=False)
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", values.ndim) + struct.pack(f"<{values.ndim}I", *values.shape))
        chunks.append(np.ascontiguousarray(values).tobytes())
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(blob)) + blob)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"{self.path}: truncated at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def load_checkpoint(path) -> Tuple["OrderedDict[str, torch.Tensor]", dict]:
    """Read tensors (float64) and the JSON metadata back"""
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a TAGC checkpoint")
    version, count = reader.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(reader.take(8 * n), dtype="<f8").reshape(shape)
        tensors[name] = torch.from_numpy(values.astype(np.float64))
    (blob_len,) = reader.unpack("<I")
    meta = json.loads(reader.take(blob_len).decode("utf-8"))
    return tensors, meta


def checkpoint_meta(model: TagsModel, classes: Sequence[str], config: RunConfig) -> dict:
    """Model shape and run config, without paths or the worker count"""
    settings = config.to_dict()
    settings.pop("paths", None)
    settings["train"].pop("workers", None)
    return {
        "config": settings,
        "model": {"in_dim": model.in_dim, "num_classes": model.num_classes, "T": model.T,
                  "classes": list(classes)},
    }


def load_model(path) -> Tuple[TagsModel, RunConfig, List[str]]:
    """Rebuild a model from a checkpoint; returns (model, config, class names)"""
    tensors, meta = load_checkpoint(path)
    try:
        config = RunConfig.from_dict(meta["config"])
        spec = meta["model"]
        model = TagsModel(spec["in_dim"], spec["num_classes"], spec["T"], config.encoder)
    except KeyError as e:
        raise CheckpointFormatError(f"{path}: metadata lacks {e}") from e
    own = model.named_tensors()
    if list(own) != list(tensors):
        raise CheckpointFormatError(f"{path}: tensor names do not match the model")
    with torch.no_grad():
        for name, param in own.items():
            if tuple(param.shape) != tuple(tensors[name].shape):
                raise CheckpointFormatError(f"{path}: '{name}' has shape {tuple(tensors[name].shape)}")
            param.copy_(tensors[name])
    return model, config, list(spec["classes"])


# Training loop

@dataclass
class TrainResult:
    model: TagsModel
    history: List[Dict[str, float]]
    checkpoint: Path
    metrics: Path


def _video_step(model: TagsModel, params, sample: VideoSample,
                targets: Dict[int, ScaleTargets], config: RunConfig):
    features = torch.as_tensor(sample.features.values, dtype=DTYPE)
    breakdown = total_loss(model(features), targets, config.loss, model.projections)
    if not bool(torch.isfinite(breakdown.total)):
        return None, breakdown
    return backward(breakdown.total, params), breakdown


def batch_gradients(model: TagsModel, samples: Sequence[VideoSample],
                    targets: Sequence[Dict[int, ScaleTargets]], config: RunConfig,
                    pool: Optional[ThreadPoolExecutor] = None):
    """Mean of per-video gradients, reduced in batch order

    Any worker count produces identical sums. Returns (grads, per-video
    term totals) or (None, totals) when a loss is non-finite.
    """
    params = model.named_tensors()
    jobs = [(model, params, s, t, config) for s, t in zip(samples, targets)]
    if pool is None:
        results = [_video_step(*job) for job in jobs]
    else:
        results = list(pool.map(lambda job: _video_step(*job), jobs))
    terms = [br.term_totals() for _, br in results]
    if any(g is None for g, _ in results):
        return None, terms
    grads = OrderedDict((name, torch.zeros_like(p)) for name, p in params.items())
    for g, _ in results:
        for name in grads:
            grads[name] += g[name]
    for name in grads:
        grads[name] /= len(results)
    return grads, terms


def write_metrics(history: List[Dict[str, float]], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(row[k]) if k != "epoch" else row[k]) for k in METRIC_COLUMNS})
    return path


def check_dataset(samples: Sequence[VideoSample], T: int):
    if not samples:
        raise ValidationError("training set is empty")
    dims = {s.features.dim for s in samples}
    if len(dims) != 1:
        raise ValidationError(f"videos do not share one feature dimension: {sorted(dims)}")
    bad = [s.features.video_id for s in samples if s.features.T != T]
    if bad:
        raise ValidationError(f"{len(bad)} videos do not have T={T} snippets (first: {bad[0]})")


def train(samples: Sequence[VideoSample], classes: Sequence[str], config: RunConfig, out_dir,
          status: Optional[StatusBar] = None, show_progress: bool = False) -> TrainResult:
    """Seeded mini-batch Adam over the summed multi-scale loss"""
    config.validate()
    tc = config.train
    check_dataset(samples, tc.T)
    status = status or StatusBar("TRAIN")
    out_dir = Path(out_dir)
    ckpt_path = out_dir / "checkpoint.tagc"
    metrics_path = out_dir / "metrics.csv"

    torch.manual_seed(tc.seed)
    model = build_model(samples[0].features.dim, len(classes), tc.T, config.encoder, tc.seed)
    meta = checkpoint_meta(model, classes, config)
    params = model.named_tensors()
    targets = [assign_all_scales(s.annotation, tc.T, model.scales, classes, model.mask_design)
               for s in samples]
    save_checkpoint(ckpt_path, params, meta)

    rng = np.random.default_rng(tc.seed)
    state = AdamState()
    history: List[Dict[str, float]] = []
    pool = ThreadPoolExecutor(max_workers=tc.workers) if tc.workers > 1 else None
    status.set_message(f"{len(samples)} videos, {len(params)} tensors, {tc.epochs} epochs")
    try:
        for epoch in tqdm(range(1, tc.epochs + 1), desc="epochs", unit="ep", disable=not show_progress):
            order = rng.permutation(len(samples))
            sums = dict.fromkeys(TERMS + ("total",), 0.0)
            for start in range(0, len(order), tc.batch_size):
                idx = order[start:start + tc.batch_size]
                grads, terms = batch_gradients(model, [samples[i] for i in idx],
                                               [targets[i] for i in idx], config, pool)
                if grads is None:
                    raise TrainingDiverged(epoch, ckpt_path)
                adam_step(params, grads, state, tc)
                for row in terms:
                    for key in sums:
                        sums[key] += row[key]
            record = {"epoch": epoch, **{k: v / len(samples) for k, v in sums.items()}}
            history.append(record)
            save_checkpoint(ckpt_path, params, meta)
            status.set_progress(epoch / tc.epochs, f"epoch {epoch}/{tc.epochs}")
            logger.info("epoch %d  " + "  ".join(f"{k}=%.5f" for k in TERMS + ("total",)),
                        epoch, *(record[k] for k in TERMS + ("total",)))
    finally:
        if pool is not None:
            pool.shutdown()
        write_metrics(history, metrics_path)

    status.set_message(f"checkpoint written to {ckpt_path}")
    return TrainResult(model, history, ckpt_path, metrics_path)
