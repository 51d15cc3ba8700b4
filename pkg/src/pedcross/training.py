"""BCE objective, RMSProp, the epoch loop, and checkpoint persistence.

Training is deliberately sequential: batches accumulate per-sample gradients
in sample-index order and a single generator drives shuffling and dropout, so
a run is reproducible bit for bit and can resume from a checkpoint mid-way.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimMismatch, DivergedLoss, EmptyDataset, IoError
from .metrics import auc
from .model import ModelConfig, build_model, forward, predict
from .tensor import Tape, Tensor, backward
from .tensor_io import tensor_from_bytes, tensor_to_bytes

_CLAMP = 1e-7
MAGIC = b"PIPC"
VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 10
    epochs: int = 300
    l2_lambda: float = 1e-4
    rho: float = 0.9
    eps: float = 1e-8
    seed: int = 0
    # optional early exit once validation clears both bars; left unset the
    # loop always runs the full epoch budget
    target_val_acc: Optional[float] = None
    target_val_auc: Optional[float] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def reference_alpha_train(**overrides) -> TrainConfig:
    base = dict(lr=5e-5, batch_size=10, epochs=300, l2_lambda=1e-4)
    base.update(overrides)
    return TrainConfig(**base)


def reference_beta_train(**overrides) -> TrainConfig:
    base = dict(lr=4e-5, batch_size=6, epochs=400, l2_lambda=1e-4)
    base.update(overrides)
    return TrainConfig(**base)


def desk_train(**overrides) -> TrainConfig:
    base = dict(lr=1e-3, batch_size=10, epochs=100, l2_lambda=1e-4)
    base.update(overrides)
    return TrainConfig(**base)


def bce_loss(p, y) -> float:
    """Mean binary cross-entropy with probabilities clamped away from {0,1}."""
    p = np.clip(np.asarray(p, dtype=np.float64), _CLAMP, 1.0 - _CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def l2_penalty(w, lam: float = 1e-4) -> float:
    """lam * sum of squares; applied to the output-layer weights only."""
    arr = w.data if isinstance(w, Tensor) else np.asarray(w)
    return float(lam * np.sum(np.square(arr, dtype=np.float64)))


@dataclass
class OptimState:
    lr: float
    rho: float = 0.9
    eps: float = 1e-8
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, lr: float, rho: float = 0.9,
                   eps: float = 1e-8) -> "OptimState":
        v = {n: np.zeros(t.dims, dtype=t.dtype) for n, t in params.items()}
        return cls(lr=lr, rho=rho, eps=eps, v=v)


def rmsprop_step(params: dict, grads: dict, state: OptimState) -> None:
    """In-place update: v <- rho v + (1-rho) g^2; w <- w - lr g/(sqrt(v)+eps).

    A parameter without a gradient entry decays its accumulator and keeps
    its value, matching a zero gradient.
    """
    for name, t in params.items():
        v = state.v[name]
        g = grads.get(name)
        if g is None:
            v *= state.rho
            continue
        g = np.asarray(g, dtype=t.dtype)
        if g.shape != t.dims:
            raise DimMismatch(f"{name}: grad {g.shape} vs param {t.dims}")
        v *= state.rho
        v += (1.0 - state.rho) * np.square(g)
        t.data -= state.lr * g / (np.sqrt(v) + state.eps)


def score_samples(samples, params: dict, config: ModelConfig) -> np.ndarray:
    """Evaluation-mode probabilities for a list of samples."""
    return np.array([forward(s, params, config).data.item()
                     for s in samples], dtype=np.float64)


def batch_loss(samples, params: dict, config: ModelConfig,
               lam: float) -> float:
    """Evaluation-mode objective on a batch: mean BCE plus the L2 term."""
    scores = score_samples(samples, params, config)
    labels = [s.label for s in samples]
    return bce_loss(scores, labels) + l2_penalty(params["out/fc/W"], lam)


def train_batch(batch, params: dict, model_config: ModelConfig,
                config: TrainConfig, state: OptimState, rng) -> tuple:
    """One optimizer step over a batch; returns (per-sample losses, hits)."""
    acc = {}
    losses = []
    hits = 0
    for s in batch:
        tape = Tape()
        p = forward(s, params, model_config, training=True, rng=rng,
                    tape=tape)
        loss = tape.bce(p, float(s.label))
        lval = loss.data.item()
        if not np.isfinite(lval):
            raise DivergedLoss(f"loss became {lval}")
        losses.append(lval)
        hits += int(predict(p.data.item()) == s.label)
        grads = backward(loss, tape)
        for name, t in params.items():
            g = grads.get(t)
            if g is None:
                continue
            if name in acc:
                acc[name] += g
            else:
                acc[name] = g.copy()
    scale = 1.0 / len(batch)
    gbatch = {n: a * scale for n, a in acc.items()}
    if config.l2_lambda > 0 and "out/fc/W" in gbatch:
        gbatch["out/fc/W"] = (gbatch["out/fc/W"]
                              + 2.0 * config.l2_lambda
                              * params["out/fc/W"].data)
    rmsprop_step(params, gbatch, state)
    return losses, hits


def _validate(samples, params, config) -> dict:
    scores = score_samples(samples, params, config)
    labels = np.array([s.label for s in samples])
    hits = sum(int(predict(p) == y) for p, y in zip(scores, labels))
    row = {"val_loss": bce_loss(scores, labels),
           "val_acc": hits / len(samples)}
    row["val_auc"] = (auc(scores, labels)
                      if len(set(labels.tolist())) == 2 else None)
    return row


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    epoch: int                      # epochs completed so far
    history: list
    rng_state: dict
    best_epoch: int
    best_metrics: dict
    params: dict                    # name -> Tensor, last state
    best_params: dict               # name -> ndarray snapshot
    opt_v: dict                     # name -> ndarray accumulator
    version: int = VERSION

    def best_tensors(self) -> dict:
        return {n: Tensor(a.copy(), requires_grad=True)
                for n, a in self.best_params.items()}


def train(dataset: dict, model_config: ModelConfig, config: TrainConfig,
          resume_from: Optional[Checkpoint] = None, log=None) -> Checkpoint:
    """Minibatch loop with fixed shuffling, best-validation snapshotting.

    dataset maps split names to sample lists and must provide "train" and
    "val".  Resuming continues the interrupted trajectory exactly.
    """
    train_set = dataset.get("train") or []
    val_set = dataset.get("val") or []
    if not train_set or not val_set:
        raise EmptyDataset("need non-empty train and val splits")

    if resume_from is not None:
        params = resume_from.params
        state = OptimState(lr=config.lr, rho=config.rho, eps=config.eps,
                           v=resume_from.opt_v)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume_from.rng_state
        history = list(resume_from.history)
        start = resume_from.epoch
        best_epoch = resume_from.best_epoch
        best_metrics = dict(resume_from.best_metrics)
        best_params = dict(resume_from.best_params)
        best_loss = best_metrics.get("val_loss", np.inf)
    else:
        params = build_model(model_config, config.seed)
        state = OptimState.for_params(params, config.lr, config.rho,
                                      config.eps)
        rng = np.random.default_rng([config.seed, 1])
        history = []
        start = 0
        best_epoch = -1
        best_metrics = {}
        best_params = {}
        best_loss = np.inf

    n = len(train_set)
    for epoch in range(start, config.epochs):
        order = rng.permutation(n)
        losses = []
        hits = 0
        for lo in range(0, n, config.batch_size):
            batch = [train_set[i] for i in order[lo:lo + config.batch_size]]
            bl, bh = train_batch(batch, params, model_config, config, state,
                                 rng)
            losses.extend(bl)
            hits += bh
        for name, t in params.items():
            if not np.all(np.isfinite(t.data)):
                raise DivergedLoss(f"parameter {name} left finite range "
                                   f"in epoch {epoch}")
        row = {"epoch": epoch,
               "train_loss": float(np.mean(losses)),
               "train_acc": hits / n}
        row.update(_validate(val_set, params, model_config))
        history.append(row)
        if log is not None:
            log(row)
        if row["val_loss"] < best_loss:
            best_loss = row["val_loss"]
            best_epoch = epoch
            best_metrics = dict(row)
            best_params = {n2: t.data.copy() for n2, t in params.items()}
        if (config.target_val_acc is not None
                and config.target_val_auc is not None
                and row["val_acc"] >= config.target_val_acc
                and row["val_auc"] is not None
                and row["val_auc"] >= config.target_val_auc):
            break

    completed = history[-1]["epoch"] + 1 if history else 0
    return Checkpoint(model_config=model_config, train_config=config,
                      epoch=completed, history=history,
                      rng_state=rng.bit_generator.state,
                      best_epoch=best_epoch, best_metrics=best_metrics,
                      params=params, best_params=best_params,
                      opt_v=state.v)


def save_checkpoint(ck: Checkpoint, path) -> None:
    blobs = []
    index = []
    off = 0

    def add(name, arr):
        nonlocal off
        b = tensor_to_bytes(np.ascontiguousarray(arr))
        index.append([name, off, len(b)])
        blobs.append(b)
        off += len(b)

    for n in sorted(ck.params):
        add("last/" + n, ck.params[n].data)
    for n in sorted(ck.best_params):
        add("best/" + n, ck.best_params[n])
    for n in sorted(ck.opt_v):
        add("opt/" + n, ck.opt_v[n])
    header = {"version": ck.version,
              "model_config": ck.model_config.to_dict(),
              "train_config": ck.train_config.to_dict(),
              "epoch": ck.epoch,
              "history": ck.history,
              "rng_state": ck.rng_state,
              "best_epoch": ck.best_epoch,
              "best_metrics": ck.best_metrics,
              "index": index}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<HI", VERSION, len(hb)) + hb
                + b"".join(blobs))


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:4] != MAGIC:
        raise IoError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise IoError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[10:10 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IoError(f"corrupt checkpoint header: {e}") from e
    base = 10 + hlen
    params = {}
    best = {}
    opt_v = {}
    for name, off, _length in header["index"]:
        arr, _ = tensor_from_bytes(blob, base + off)
        if name.startswith("last/"):
            params[name[5:]] = Tensor(arr, requires_grad=True)
        elif name.startswith("best/"):
            best[name[5:]] = arr
        elif name.startswith("opt/"):
            opt_v[name[4:]] = arr
        else:
            raise IoError(f"unknown blob section for {name!r}")
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        train_config=TrainConfig.from_dict(header["train_config"]),
        epoch=header["epoch"], history=header["history"],
        rng_state=header["rng_state"], best_epoch=header["best_epoch"],
        best_metrics=header["best_metrics"], params=params,
        best_params=best, opt_v=opt_v, version=version)
