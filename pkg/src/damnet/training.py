"""Training and evaluation drivers shared by the CLI and the test suites."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .metrics import ConfusionMatrix, compute_all
from .network import Network, TrainRecord, save_checkpoint
from .optim import SgdState
from .synth import Sample
from .tensor import LabelMap


def worker_count() -> int:
    """Worker cap from DAM_THREADS (default 1 = sequential)."""
    raw = os.environ.get("DAM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"DAM_THREADS must be an integer, got {raw!r}")


@dataclass
class TrainingConfig:
    batch_size: int = 4
    iterations: int = 1000
    val_interval: int = 200
    selection: str = "mean_iou"   # or "f1" for two-class runs

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 0 or self.val_interval < 1:
            raise ConfigError("bad training config")
        if self.selection not in ("mean_iou", "f1"):
            raise ConfigError(f"unknown selection metric {self.selection!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        return cls(batch_size=int(d.get("batch_size", 4)),
                   iterations=int(d.get("iterations", 1000)),
                   val_interval=int(d.get("val_interval", 200)),
                   selection=d.get("selection", "mean_iou"))


def evaluate(net: Network, samples: list[Sample]) -> dict[str, float]:
    """Forward every sample and score predictions against the ground truth.

    Runs up to DAM_THREADS samples concurrently; per-sample forwards are
    pure, and integer confusion counts merge order-independently, so the
    result does not depend on the worker count.
    """
    if not samples:
        raise ConfigError("nothing to evaluate")
    cm = ConfusionMatrix(net.num_classes)
    ignore = net.loss_cfg.ignore_label

    def one(sample: Sample) -> tuple[LabelMap, LabelMap]:
        predicted = net.predict(sample.depth)
        truth = net.labels_at_output(
            LabelMap(sample.labels.labels, ignore_label=ignore))
        return predicted, truth

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(one, samples))
    else:
        pairs = [one(s) for s in samples]
    for predicted, truth in pairs:
        cm.accumulate(predicted, truth)
    scores = compute_all(cm)
    scores["_confusion"] = cm   # type: ignore[assignment]
    return scores


def selection_score(scores: dict, selection: str, num_classes: int) -> float:
    if selection == "f1":
        if num_classes != 2:
            raise ConfigError("f1 selection needs exactly two classes")
        return scores["f1"]
    return scores["mean_iou"]


def train_loop(net: Network, optimizer: SgdState, cfg: TrainingConfig,
               train_samples: list[Sample], val_samples: list[Sample],
               out_dir=None, log_every: int = 0) -> tuple[list[TrainRecord], float | None]:
    """Run the iteration loop with periodic validation and checkpointing.

    Batches are drawn from a stream seeded by the network seed, so a rerun
    with the same inputs reproduces the record stream exactly. Checkpoints:
    ``checkpoint_init`` before the first step, ``checkpoint_best`` whenever
    the selection score improves, ``checkpoint_final`` at the end. The log
    file contains no wall-clock times, keeping reruns byte-identical.
    """
    if not train_samples:
        raise ConfigError("empty training split")
    out = Path(out_dir) if out_dir is not None else None
    log_lines: list[str] = []
    records: list[TrainRecord] = []
    best_score: float | None = None

    if out is not None:
        save_checkpoint(out / "checkpoint_init", net, optimizer)
    if cfg.iterations == 0:
        return records, best_score

    start_iter = optimizer.iter
    data_rng = np.random.default_rng([net.spec.seed, 0xDA7A])
    for _ in range(start_iter):   # resumed runs continue the batch stream
        data_rng.integers(0, len(train_samples), size=cfg.batch_size)
    started = time.perf_counter()

    for local_step in range(cfg.iterations):
        idx = data_rng.integers(0, len(train_samples), size=cfg.batch_size)
        batch = [(train_samples[i].depth, train_samples[i].labels) for i in idx]
        record = net.train_step(batch, optimizer)
        record.wall_time = time.perf_counter() - started

        is_last = local_step == cfg.iterations - 1
        if val_samples and (optimizer.iter % cfg.val_interval == 0 or is_last):
            scores = evaluate(net, val_samples)
            score = selection_score(scores, cfg.selection, net.num_classes)
            record.val_score = score
            optimizer.observe_validation(score)
            if best_score is None or score > best_score:
                best_score = score
                if out is not None:
                    save_checkpoint(out / "checkpoint_best", net, optimizer,
                                    best_score=best_score)
        records.append(record)
        log_lines.append(record.log_line())
        if log_every and (optimizer.iter % log_every == 0 or is_last):
            print(f"iter {record.iteration:6d}  loss {record.loss:.6f}  "
                  f"lr {record.learning_rate:.6g}"
                  + (f"  val {record.val_score:.4f}" if record.val_score is not None else ""))

    if out is not None:
        save_checkpoint(out / "checkpoint_final", net, optimizer,
                        best_score=best_score)
        mode = "a" if start_iter > 0 and (out / "train_log.tsv").exists() else "w"
        with open(out / "train_log.tsv", mode, encoding="utf-8") as fh:
            if mode == "w":
                fh.write("iteration\tloss\tdata_loss\tdecay_loss\tlearning_rate\tval_score\n")
            for line in log_lines:
                fh.write(line + "\n")
    return records, best_score
