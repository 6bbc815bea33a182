"""Three-stage training with periodic prototype projection, plus evaluation.

One cycle is a stage-1 epoch (encoder, prototypes, and scaling grids learn;
head frozen) followed by a stage-3 epoch (head learns under L1; everything
else frozen). Every ``projection_period`` cycles the projection step runs
between the two stages, so the head epoch always sees current prototypes.
After the best-validation snapshot is restored, a final projection and a few
extra head epochs make the returned model explanation-ready.

The ``standard_nn`` baseline runs the same loop shape with two plain
cross-entropy epochs per cycle and no prototype machinery.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint
from .data.types import DatasetSplit, SplitPart
from .encoder import ConfigError, NumericError
from .losses import LossConfig, stage1_loss, stage3_loss
from .model import MODEL_KINDS, ModelConfig, _ModelBase, build_model, make_model_config

log = logging.getLogger(__name__)

TRANSFER_MODES = ("none", "frozen", "unfrozen")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str = "proto_channel"
    encoder_channels: tuple[int, ...] = (8, 16, 32)
    encoder_pools: tuple[int, ...] | None = None  # per-stage pool sizes, default all 2
    embedding_hw: tuple[int, int] = (2, 2)
    per_class: int = 5
    location_scaling: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 32
    learning_rate: float = 0.001
    projection_period: int = 3
    max_cycles: int = 40
    final_stage3_epochs: int = 10
    early_stop_cycles: int = 8
    seed: int = 0
    dropout: float = 0.2
    negative_slope: float = 0.01
    epsilon: float = 1e-4
    grad_clip: float = 5.0
    transfer: str = "none"
    pretrained_checkpoint: str | None = None

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model_kind {self.model_kind!r}")
        if self.projection_period < 1:
            raise ConfigError("projection_period must be >= 1")
        if self.transfer not in TRANSFER_MODES:
            raise ConfigError(f"unknown transfer mode {self.transfer!r}")
        if self.transfer != "none" and not self.pretrained_checkpoint:
            raise ConfigError("transfer mode requires pretrained_checkpoint")
        if self.encoder_pools is not None and len(self.encoder_pools) != len(self.encoder_channels):
            raise ConfigError(
                f"encoder_pools has {len(self.encoder_pools)} entries for "
                f"{len(self.encoder_channels)} stages"
            )

    def model_config(self, data: DatasetSplit) -> ModelConfig:
        h, w, c = data.shape
        return make_model_config(
            kind=self.model_kind,
            input_hw=(h, w),
            num_channels=c,
            num_classes=data.k,
            encoder_channels=self.encoder_channels,
            encoder_pools=self.encoder_pools,
            embedding_hw=self.embedding_hw,
            per_class=self.per_class,
            location_scaling=self.location_scaling,
            epsilon=self.epsilon,
            negative_slope=self.negative_slope,
            dropout=self.dropout,
        )


@dataclass
class Metrics:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray
    plus_minus_one: float | None = None

    def to_dict(self) -> dict:
        out = {
            "accuracy": self.accuracy,
            "per_class": [float(v) for v in self.per_class],
            "confusion": self.confusion.tolist(),
        }
        if self.plus_minus_one is not None:
            out["plus_minus_one"] = self.plus_minus_one
        return out


@dataclass
class TrainResult:
    model: _ModelBase
    history: list[dict]
    best_val_accuracy: float


def cyclic_adjacency(first: int, last: int) -> dict[int, set[int]]:
    """Neighbors of each label on the cycle first..last; other labels exact-only."""
    if last <= first:
        raise ValueError("cyclic range needs last > first")
    span = last - first + 1
    return {
        k: {first + (k - first - 1) % span, first + (k - first + 1) % span}
        for k in range(first, last + 1)
    }


def _tensors(part: SplitPart) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.from_numpy(part.images), torch.from_numpy(part.labels)


def predict_logits(model: _ModelBase, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            outs.append(model.forward_full(images[start : start + batch_size]).logits)
    return torch.cat(outs, dim=0)


def evaluate(
    model: _ModelBase,
    part: SplitPart,
    adjacency: dict[int, set[int]] | None = None,
    batch_size: int = 256,
) -> Metrics:
    """Argmax accuracy, per-class accuracy, confusion matrix, optional +-1 accuracy."""
    if len(part) == 0:
        raise ValueError("cannot evaluate an empty split")
    images, labels = _tensors(part)
    preds = predict_logits(model, images, batch_size).argmax(dim=1).numpy()
    truth = labels.numpy()
    k = model.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (truth, preds), 1)
    counts = confusion.sum(axis=1)
    per_class = np.divide(
        np.diag(confusion), counts, out=np.zeros(k, dtype=np.float64), where=counts > 0
    )
    accuracy = float((preds == truth).mean())
    pm1 = None
    if adjacency is not None:
        ok = preds == truth
        for lab, neighbors in adjacency.items():
            mask = truth == lab
            for n in neighbors:
                ok |= mask & (preds == n)
        pm1 = float(ok.mean())
    return Metrics(accuracy=accuracy, per_class=per_class, confusion=confusion, plus_minus_one=pm1)


def _set_requires_grad(params, flag: bool) -> None:
    for p in params:
        p.requires_grad_(flag)


def _snapshot(model: _ModelBase) -> dict:
    return copy.deepcopy(model.state_dict())


def _clip(params, limit: float) -> None:
    if limit > 0:
        torch.nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], limit)


class _Trainer:
    """Owns one model plus its optimizers for the duration of a run."""

    def __init__(self, cfg: TrainConfig, data: DatasetSplit):
        self.cfg = cfg
        self.data = data
        torch.manual_seed(cfg.seed)
        self.model = build_model(cfg.model_config(data), cfg.seed)
        self.frozen_encoder = False
        if cfg.transfer != "none":
            self._load_pretrained_encoder()
        self.train_images, self.train_labels = _tensors(data.train)
        self.train_ids = torch.from_numpy(data.train.ids)
        self.order_gen = torch.Generator().manual_seed(cfg.seed + 0x5EED)
        params1 = [p for p in self.model.stage1_parameters() if p.requires_grad]
        self.opt1 = torch.optim.Adam(params1, lr=cfg.learning_rate)
        self.params1 = params1
        params3 = self.model.stage3_parameters()
        self.opt3 = torch.optim.Adam(params3, lr=cfg.learning_rate) if params3 else None
        self.params3 = params3

    def _load_pretrained_encoder(self) -> None:
        pretrained = load_checkpoint(self.cfg.pretrained_checkpoint)
        ours = self.model.model_config.encoder
        theirs = pretrained.model_config.encoder
        same = (
            ours.input_hw == theirs.input_hw
            and ours.stages == theirs.stages
            and ours.embedding_hw == theirs.embedding_hw
            and ours.in_channels == theirs.in_channels
        )
        if not same:
            raise ConfigError(
                f"pretrained encoder architecture mismatch: {theirs} vs expected {ours}"
            )
        self.model.encoder.load_state_dict(pretrained.encoder.state_dict())
        if self.cfg.transfer == "frozen":
            _set_requires_grad(self.model.encoder.parameters(), False)
            self.frozen_encoder = True

    def _batches(self, n: int):
        order = torch.randperm(n, generator=self.order_gen)
        for start in range(0, n, self.cfg.batch_size):
            yield order[start : start + self.cfg.batch_size]

    def _check_finite(self, loss: torch.Tensor, cycle: int, stage: str) -> None:
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite {stage} loss at cycle {cycle}")

    def stage1_epoch(self, cycle: int) -> dict[str, float]:
        model = self.model
        _set_requires_grad(self.params3, False)
        sums: dict[str, float] = {}
        count = 0
        for idx in self._batches(len(self.data.train)):
            xb, yb = self.train_images[idx], self.train_labels[idx]
            try:
                out = model.forward_full(xb, training=True)
            except NumericError as err:
                raise DivergenceError(f"{err} at cycle {cycle}") from err
            if model.kind == "standard_nn":
                loss = F.cross_entropy(out.logits, yb)
                parts = {"cross_entropy": float(loss.detach())}
            else:
                loss, parts = stage1_loss(out.logits, yb, out.distances, model.bank, self.cfg.loss)
            self._check_finite(loss, cycle, "stage-1")
            self.opt1.zero_grad()
            loss.backward()
            _clip(self.params1, self.cfg.grad_clip)
            self.opt1.step()
            parts["total"] = float(loss.detach())
            for key, value in parts.items():
                sums[key] = sums.get(key, 0.0) + value
            count += 1
        _set_requires_grad(self.params3, True)
        return {f"stage1_{k}": v / count for k, v in sums.items()}

    def cached_max_sims(self) -> torch.Tensor:
        """Max-similarity vectors for the whole train split (dropout off).

        Valid until encoder/prototype parameters change; stage-3 epochs only
        move the head, so one cache serves consecutive head epochs.
        """
        chunks = []
        with torch.no_grad():
            for start in range(0, len(self.data.train), 256):
                xb = self.train_images[start : start + 256]
                chunks.append(self.model.forward_full(xb).max_sims)
        return torch.cat(chunks, dim=0)

    def stage3_epoch(self, cycle: int, max_sims: torch.Tensor) -> dict[str, float]:
        sums: dict[str, float] = {}
        count = 0
        for idx in self._batches(len(self.data.train)):
            logits = self.model.head(max_sims[idx])
            loss, parts = stage3_loss(
                logits, self.train_labels[idx], self.model.head.psi, self.cfg.loss.l1
            )
            self._check_finite(loss, cycle, "stage-3")
            self.opt3.zero_grad()
            loss.backward()
            _clip(self.params3, self.cfg.grad_clip)
            self.opt3.step()
            parts["total"] = float(loss.detach())
            for key, value in parts.items():
                sums[key] = sums.get(key, 0.0) + value
            count += 1
        return {f"stage3_{k}": v / count for k, v in sums.items()}

    def all_train_embeddings(self) -> torch.Tensor:
        chunks = []
        with torch.no_grad():
            for start in range(0, len(self.data.train), 256):
                xb = self.train_images[start : start + 256]
                chunks.append(self.model.embed(xb, training=False))
        return torch.cat(chunks, dim=0)

    def project(self) -> None:
        self.model.bank.project(self.all_train_embeddings(), self.train_labels, self.train_ids)

    def run(self, history_path: Path | None = None) -> TrainResult:
        cfg = self.cfg
        history: list[dict] = []
        best_acc, best_cycle, best_state = -1.0, 0, _snapshot(self.model)
        is_proto = self.model.kind != "standard_nn"
        for cycle in range(1, cfg.max_cycles + 1):
            record: dict = {"cycle": cycle}
            record.update(self.stage1_epoch(cycle))
            projected = False
            if is_proto and cycle % cfg.projection_period == 0:
                self.project()
                projected = True
            if is_proto:
                record.update(self.stage3_epoch(cycle, self.cached_max_sims()))
            else:
                record.update({f"extra_{k}": v for k, v in self.stage1_epoch(cycle).items()})
            record["projected"] = projected
            val = evaluate(self.model, self.data.validation, batch_size=256)
            record["val_accuracy"] = val.accuracy
            history.append(record)
            log.info(
                "cycle %d: val accuracy %.4f%s", cycle, val.accuracy, " (projected)" if projected else ""
            )
            if val.accuracy > best_acc:
                best_acc, best_cycle, best_state = val.accuracy, cycle, _snapshot(self.model)
            if cycle - best_cycle >= cfg.early_stop_cycles:
                log.info("early stop at cycle %d (best cycle %d)", cycle, best_cycle)
                break
        self.model.load_state_dict(best_state)
        if is_proto:
            self.project()
            max_sims = self.cached_max_sims()
            for extra in range(cfg.final_stage3_epochs):
                record = {"cycle": f"final_{extra + 1}"}
                record.update(self.stage3_epoch(cfg.max_cycles + extra, max_sims))
                val = evaluate(self.model, self.data.validation, batch_size=256)
                record["val_accuracy"] = val.accuracy
                history.append(record)
        final_val = evaluate(self.model, self.data.validation, batch_size=256)
        history.append({"cycle": "final", "val_accuracy": final_val.accuracy})
        if history_path is not None:
            history_path.parent.mkdir(parents=True, exist_ok=True)
            with open(history_path, "w") as fh:
                for record in history:
                    fh.write(json.dumps(record) + "\n")
        self.model.eval()
        return TrainResult(model=self.model, history=history, best_val_accuracy=best_acc)


def train(cfg: TrainConfig, data: DatasetSplit, history_path: str | Path | None = None) -> TrainResult:
    """Run the configured training schedule; deterministic given cfg.seed."""
    trainer = _Trainer(cfg, data)
    return trainer.run(Path(history_path) if history_path else None)


def train_transfer(cfg: TrainConfig, data: DatasetSplit, history_path: str | Path | None = None) -> TrainResult:
    """Transfer-mode entry point; cfg.transfer must be frozen or unfrozen."""
    if cfg.transfer == "none":
        raise ConfigError("train_transfer requires cfg.transfer of frozen or unfrozen")
    return train(cfg, data, history_path)
