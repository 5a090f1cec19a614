"""Epoch loop: shuffle -> batches -> forward/loss/backward/Adam -> validation -> schedule & checkpoint."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import ops
from ..models.graph import LayerGraph, forward
from .adam import AdamState, adam_step
from .checkpoint import CheckpointError, dump_json, pack_table, read_container, unpack_table, write_container
from .schedule import PlateauTracker, TrainConfig

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_acc", "lr")


class TrainingError(RuntimeError):
    pass


@dataclass
class ArrayDataset:
    """In-memory samples. ``x`` is uint8 (N, C, *spatial) scaled to [0, 1] per batch;
    ``y`` holds 0/1 labels (classification) or class-index masks (segmentation)."""

    x: np.ndarray
    y: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.x)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        xb = self.x[idx]
        if xb.dtype == np.uint8:
            xb = xb.astype(np.float32) / np.float32(255.0)
        return np.ascontiguousarray(xb, dtype=np.float32), self.y[idx]


def _is_segmenter(model: LayerGraph) -> bool:
    return model.config.get("family") == "unet"


def batch_loss(model: LayerGraph, out, y):
    if _is_segmenter(model):
        return ops.pixel_ce_loss(out, y)
    return ops.bce_loss(out, y)


def evaluate(model: LayerGraph, data: ArrayDataset, batch_size: int) -> tuple[float, float, np.ndarray]:
    """Infer-mode loss, accuracy and per-sample outputs (probabilities or predicted masks)."""
    total, correct, count = 0.0, 0, 0
    outputs = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        xb, yb = data.batch(idx)
        out = forward(model, xb, "infer").output
        loss = batch_loss(model, out, yb)
        total += loss.data.item() * len(idx)
        if _is_segmenter(model):
            pred = out.data.argmax(axis=1)
            correct += int((pred == yb).sum())
            count += yb.size
            outputs.append(pred.astype(np.uint8))
        else:
            p = ops._sigmoid(out.data.reshape(-1).astype(np.float64))
            correct += int(((p >= 0.5).astype(int) == yb).sum())
            count += len(idx)
            outputs.append(p)
    return total / len(data), correct / count, np.concatenate(outputs)


@dataclass
class TrainingSession:
    model: LayerGraph
    config: TrainConfig
    adam: AdamState
    tracker: PlateauTracker
    rng: np.random.Generator
    history: list[dict] = field(default_factory=list)
    epoch: int = 0
    stopped: bool = False
    best_epoch: int | None = None
    best_value: float = float("inf")
    best_params: dict[str, np.ndarray] | None = None
    best_buffers: dict[str, np.ndarray] | None = None

    @classmethod
    def start(cls, model: LayerGraph, config: TrainConfig) -> "TrainingSession":
        return cls(model, config, AdamState(), PlateauTracker.from_config(config), np.random.default_rng(config.seed))

    # -- state snapshots ------------------------------------------------
    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for node, st in self.model.bn_state.items():
            out[f"{node}.running_mean"] = st.mean.copy()
            out[f"{node}.running_var"] = st.var.copy()
        return out

    def load_buffers(self, bufs: dict[str, np.ndarray]) -> None:
        for node, st in self.model.bn_state.items():
            st.mean = bufs[f"{node}.running_mean"].astype(np.float32)
            st.var = bufs[f"{node}.running_var"].astype(np.float32)

    def restore_best(self) -> None:
        if self.best_params is None:
            return
        for k, v in self.best_params.items():
            self.model.params[k].data = v.copy()
        self.load_buffers(self.best_buffers)

    # -- persistence ------------------------------------------------------
    def save(self, path) -> None:
        params = {k: p.data for k, p in self.model.params.items()}
        optim = {f"m.{k}": v for k, v in self.adam.m.items()} | {f"v.{k}": v for k, v in self.adam.v.items()}
        sections = [
            ("ARCH", self.model.to_descriptor().encode()),
            ("PARM", pack_table(params)),
            ("BUFS", pack_table(self.buffers())),
            ("OPTM", dump_json({"step": self.adam.step, "beta1": self.adam.beta1, "beta2": self.adam.beta2,
                                "eps": self.adam.eps}) + b"\n" + pack_table(optim)),
        ]
        if self.best_params is not None:
            sections.append(("BEST", pack_table(self.best_params | {f"buf:{k}": v for k, v in self.best_buffers.items()})))
        state = {
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "stopped": self.stopped,
            "history": self.history,
            "tracker": self.tracker.state_dict(),
            "best_epoch": self.best_epoch,
            "best_value": self.best_value if math.isfinite(self.best_value) else None,
            "rng": self.rng.bit_generator.state,
        }
        sections.append(("STAT", dump_json(state)))
        write_container(path, sections)

    @classmethod
    def load(cls, path) -> "TrainingSession":
        sec = read_container(path)
        for tag in ("ARCH", "PARM", "BUFS", "OPTM", "STAT"):
            if tag not in sec:
                raise CheckpointError(f"{path}: missing section {tag}")
        model = LayerGraph.from_descriptor(sec["ARCH"].decode())
        params = unpack_table(sec["PARM"])
        if set(params) != set(model.params):
            raise CheckpointError(f"{path}: parameter names do not match the architecture")
        for k, v in params.items():
            if v.shape != model.params[k].shape:
                raise CheckpointError(f"{path}: parameter {k} has shape {v.shape}, expected {model.params[k].shape}")
            model.params[k].data = v
        head, _, table = sec["OPTM"].partition(b"\n")
        ometa = json.loads(head)
        moments = unpack_table(table)
        adam = AdamState(ometa["beta1"], ometa["beta2"], ometa["eps"], ometa["step"])
        for k, v in moments.items():
            kind, name = k.split(".", 1)
            (adam.m if kind == "m" else adam.v)[name] = v
        state = json.loads(sec["STAT"])
        config = TrainConfig(**state["config"])
        tracker = PlateauTracker(**state["tracker"])
        rng = np.random.default_rng()
        rng.bit_generator.state = state["rng"]
        s = cls(model, config, adam, tracker, rng, state["history"], state["epoch"], state["stopped"],
                state["best_epoch"], state["best_value"] if state["best_value"] is not None else float("inf"))
        s.load_buffers(unpack_table(sec["BUFS"]))
        if "BEST" in sec:
            best = unpack_table(sec["BEST"])
            s.best_params = {k: v for k, v in best.items() if not k.startswith("buf:")}
            s.best_buffers = {k[4:]: v for k, v in best.items() if k.startswith("buf:")}
        return s


def write_history_csv(history: list[dict], path) -> None:
    lines = [",".join(HISTORY_FIELDS)]
    for row in history:
        lines.append(",".join(repr(row[f]) if isinstance(row[f], float) else str(row[f]) for f in HISTORY_FIELDS))
    Path(path).write_text("\n".join(lines) + "\n")


def train_epoch(session: TrainingSession, train: ArrayDataset) -> float:
    model, cfg = session.model, session.config
    order = session.rng.permutation(len(train))
    lr = session.tracker.lr
    total = 0.0
    for b, start in enumerate(range(0, len(train), cfg.batch_size)):
        idx = order[start : start + cfg.batch_size]
        xb, yb = train.batch(idx)
        fp = forward(model, xb, "train")
        with fp.tape:
            loss = batch_loss(model, fp.output, yb)
        value = loss.data.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at epoch {session.epoch + 1}, batch {b}")
        fp.tape.zero_grad()
        grads = fp.tape.backward(loss)
        adam_step(model.params, grads, session.adam, lr)
        total += value * len(idx)
    return total / len(train)


def fit(
    model: LayerGraph | None,
    train: ArrayDataset,
    val: ArrayDataset,
    config: TrainConfig | None = None,
    out_dir=None,
    session: TrainingSession | None = None,
    restore_best: bool = True,
) -> TrainingSession:
    """Train until ``config.max_epochs`` or early stopping.

    Pass ``session`` (e.g. from :meth:`TrainingSession.load`) to resume; its
    ``config.max_epochs`` may be raised before calling. With ``out_dir``,
    ``last.ckpt``, ``best.ckpt`` and ``history.csv`` are written every epoch.
    """
    if session is None:
        if model is None or config is None:
            raise ValueError("fit needs a model and config, or a session to resume")
        session = TrainingSession.start(model, config)
    model, cfg = session.model, session.config
    if not _is_segmenter(model):
        for name, ds in (("train", train), ("val", val)):
            if len(set(np.asarray(ds.y).tolist())) < 2:
                raise ValueError(f"{name} split must contain both classes")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    while session.epoch < cfg.max_epochs and not session.stopped:
        lr = session.tracker.lr
        train_loss = train_epoch(session, train)
        val_loss, val_acc, _ = evaluate(model, val, cfg.batch_size)
        session.epoch += 1
        monitored = val_loss if cfg.monitor == "val_loss" else train_loss
        session.tracker.update(monitored)
        row = {"epoch": session.epoch, "train_loss": train_loss, "val_loss": val_loss, "val_acc": val_acc, "lr": lr}
        session.history.append(row)
        log.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.3f lr %.1e", *[row[f] for f in HISTORY_FIELDS])
        if val_loss < session.best_value:
            session.best_value = val_loss
            session.best_epoch = session.epoch
            session.best_params = {k: p.data.copy() for k, p in model.params.items()}
            session.best_buffers = session.buffers()
            if out:
                session.save(out / "best.ckpt")
        if session.tracker.should_stop:
            session.stopped = True
        if out:
            session.save(out / "last.ckpt")
            write_history_csv(session.history, out / "history.csv")
    if restore_best:
        session.restore_best()
    return session
