"""Pretraining, fine-tuning, evaluation and heatmap export."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .autodiff import Tape, Tensor, avg_pool_2x2, backward
from .config import BackboneConfig, LossConfig, TrainConfig
from .data import FoldSplit, Sample, augment, batch_images, crop, write_pgm
from .losses import JointLoss, cross_entropy, joint_loss
from .model import (
    IdenNet,
    PretrainNet,
    Variant,
    build_model,
    extract_heatmap,
    freeze_feature_extractors,
    load_pretrained_and_share,
)
from .optim import SGD, lr_schedule

log = logging.getLogger(__name__)

EPOCH_FIELDS = ("epoch", "lr", "l_emo", "l_id", "total", "train_acc")


@dataclass
class StepLog:
    epoch: int
    step: int
    lr: float
    total: float
    l_emo: float
    l_id: float
    correct: int
    count: int


@dataclass
class EpochLog:
    epoch: int
    lr: float
    l_emo: float
    l_id: float
    total: float
    train_acc: float


def write_metrics(path: str | Path, epochs: Sequence[EpochLog]) -> None:
    lines = ["\t".join(EPOCH_FIELDS)]
    for e in epochs:
        lines.append(f"{e.epoch}\t{e.lr:.6g}\t{e.l_emo:.8g}\t{e.l_id:.8g}\t{e.total:.8g}\t{e.train_acc:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metrics(path: str | Path) -> list[EpochLog]:
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    out = []
    for row in rows:
        ep, lr, le, li, tot, acc = row.split("\t")
        out.append(EpochLog(int(ep), float(lr), float(le), float(li), float(tot), float(acc)))
    return out


# ---------------------------------------------------------------------------
# trainers


class Trainer:
    """Mini-batch SGD loop with resumable state.

    Batch order within an epoch is a permutation seeded by (seed, epoch);
    crops and dropout draw from ``self.rng``, whose state is checkpointed.
    """

    def __init__(self, net, samples: Sequence[Sample], cfg: TrainConfig, seed: int | None = None):
        if not samples:
            raise ValueError("cannot train on an empty dataset")
        self.net = net
        self.samples = list(samples)
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        self.rng = np.random.default_rng(self.seed)
        self.opt = SGD(net.parameters(), cfg.momentum, cfg.weight_decay)
        self.epoch = 0
        self.step_in_epoch = 0
        self.steps: list[StepLog] = []
        self.epochs: list[EpochLog] = []

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.samples) / self.cfg.batch_size)

    @property
    def crop_mode(self) -> str:
        return "train" if self.cfg.train_crop == "random" else "eval"

    def lr(self) -> float:
        return lr_schedule(self.epoch, self.cfg.epochs, self.cfg.base_lr)

    def _batch_indices(self) -> np.ndarray:
        perm = np.random.default_rng([self.seed, self.epoch]).permutation(len(self.samples))
        bs = self.cfg.batch_size
        return perm[self.step_in_epoch * bs : (self.step_in_epoch + 1) * bs]

    def _forward(self, idx: np.ndarray) -> tuple[JointLoss, np.ndarray, np.ndarray]:
        raise NotImplementedError

    def step(self) -> StepLog:
        idx = self._batch_indices()
        lr = self.lr()
        with Tape() as tape:
            loss, logits, labels = self._forward(idx)
        backward(loss.total, tape)
        self.opt.step(lr)
        self.opt.zero_grad()
        total, l_emo, l_id = loss.values()
        correct = int((logits.argmax(axis=1) == labels).sum())
        entry = StepLog(self.epoch, self.step_in_epoch, lr, total, l_emo, l_id, correct, len(idx))
        self.steps.append(entry)
        self.step_in_epoch += 1
        if self.step_in_epoch == self.steps_per_epoch:
            self._close_epoch()
        return entry

    def _close_epoch(self) -> None:
        rows = [s for s in self.steps if s.epoch == self.epoch]
        n = sum(s.count for s in rows)
        mean = lambda attr: sum(getattr(s, attr) * s.count for s in rows) / n  # noqa: E731
        self.epochs.append(EpochLog(self.epoch, rows[-1].lr, mean("l_emo"), mean("l_id"), mean("total"),
                                    sum(s.correct for s in rows) / n))
        self.epoch += 1
        self.step_in_epoch = 0

    def run_epoch(self) -> EpochLog:
        start = self.epoch
        while self.epoch == start:
            self.step()
        return self.epochs[-1]

    def train(self, epochs: int | None = None, on_epoch: Callable[[EpochLog], bool | None] | None = None) -> None:
        """Run until ``epochs`` (default: the configured total) have completed.

        ``on_epoch`` may return True to stop early.
        """
        end = self.cfg.epochs if epochs is None else epochs
        while self.epoch < end:
            entry = self.run_epoch()
            log.info("epoch %d lr %.4g loss %.4f (emo %.4f id %.4g) acc %.3f", entry.epoch, entry.lr,
                     entry.total, entry.l_emo, entry.l_id, entry.train_acc)
            if on_epoch is not None and on_epoch(entry):
                break

    def state_meta(self) -> dict:
        return {"epoch": self.epoch, "step_in_epoch": self.step_in_epoch, "seed": self.seed,
                "rng_state": self.rng.bit_generator.state, "train_config": asdict(self.cfg)}

    def restore(self, ckpt: ckpt_io.Checkpoint) -> None:
        ckpt_io.load_state(self.net, ckpt.tensors)
        self.opt.velocity = {k: v.copy() for k, v in ckpt.velocity().items()}
        meta = ckpt.meta
        self.epoch = int(meta["epoch"])
        self.step_in_epoch = int(meta["step_in_epoch"])
        self.seed = int(meta["seed"])
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = meta["rng_state"]


class PretrainTrainer(Trainer):
    """Single-task training of a stream with block 3 and one classifier."""

    def __init__(self, net: PretrainNet, samples, cfg: TrainConfig, seed: int | None = None):
        super().__init__(net, samples, cfg, seed)
        labels = _task_labels(self.samples, net.task)
        if labels.max() >= net.num_classes:
            raise ValueError(f"label {labels.max()} exceeds the {net.num_classes}-way head")
        self.labels = labels

    def _forward(self, idx):
        imgs = Tensor(batch_images([self.samples[i] for i in idx], self.crop_mode, self.rng))
        logits = self.net(imgs, "train", self.rng, self.cfg.dropout)
        loss = cross_entropy(logits, self.labels[idx])
        return JointLoss(loss, loss, None), logits.data, self.labels[idx]

    def checkpoint(self) -> ckpt_io.Checkpoint:
        return ckpt_io.from_pretrain(self.net, self.opt.velocity, **self.state_meta())


class FinetuneTrainer(Trainer):
    """Joint-loss training of an :class:`IdenNet`.

    With ``features`` (pooled stream outputs aligned with ``samples``) the
    frozen streams are skipped entirely; this needs centre crops and frozen
    extractors, since only then are stream outputs fixed per sample.
    """

    def __init__(self, model: IdenNet, samples, cfg: TrainConfig, loss_cfg: LossConfig | None = None,
                 features: dict[str, np.ndarray] | None = None, seed: int | None = None):
        super().__init__(model, samples, cfg, seed)
        self.loss_cfg = loss_cfg or LossConfig()
        self.expr = np.array([s.expression_label for s in self.samples])
        self.ident = np.array([s.identity_label for s in self.samples])
        if features is not None:
            if cfg.train_crop != "center":
                raise ValueError("precomputed features need centre crops during training")
            if not all(s.frozen for s in model.streams()):
                raise ValueError("precomputed features need frozen feature extractors")
        self.features = features

    def _forward(self, idx):
        model: IdenNet = self.net
        if self.features is not None:
            pe = Tensor(self.features["emotion"][idx])
            pi = Tensor(self.features["identity"][idx]) if model.identity is not None else None
            out = model.head_pooled(pe, pi, "train", self.rng, self.cfg.dropout)
        else:
            imgs = Tensor(batch_images([self.samples[i] for i in idx], self.crop_mode, self.rng))
            out = model(imgs, "train", self.rng, self.cfg.dropout)
        id_labels = self.ident[idx] if out.id_logits is not None else None
        loss = joint_loss(out.emo_logits, self.expr[idx], out.id_logits, id_labels, self.loss_cfg)
        return loss, out.emo_logits.data, self.expr[idx]

    def checkpoint(self) -> ckpt_io.Checkpoint:
        return ckpt_io.from_model(self.net, self.opt.velocity, **self.state_meta())


def _task_labels(samples: Sequence[Sample], task: str) -> np.ndarray:
    if task == "emotion":
        return np.array([s.expression_label for s in samples])
    return np.array([s.identity_label for s in samples])


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    """Confusion matrix (rows: true class) plus optional per-fold accuracies."""

    confusion: np.ndarray
    fold_accuracies: list[float] = field(default_factory=list)

    @classmethod
    def from_predictions(cls, labels, predictions, num_classes: int) -> "EvalReport":
        cm = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
        return cls(cm)

    @classmethod
    def merge(cls, reports: Sequence["EvalReport"]) -> "EvalReport":
        return cls(sum(r.confusion for r in reports), [r.accuracy for r in reports])

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.total)

    @property
    def per_class_accuracy(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.confusion) / np.maximum(rows, 1), np.nan)

    @property
    def mean_fold_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies)) if self.fold_accuracies else self.accuracy

    def to_text(self) -> str:
        k = self.confusion.shape[0]
        lines = [f"accuracy\t{self.accuracy:.6f}", f"samples\t{self.total}"]
        if self.fold_accuracies:
            lines.append("fold_accuracies\t" + "\t".join(f"{a:.6f}" for a in self.fold_accuracies))
            lines.append(f"mean_fold_accuracy\t{self.mean_fold_accuracy:.6f}")
        lines.append("per_class_accuracy\t" + "\t".join(f"{a:.6f}" for a in self.per_class_accuracy))
        lines.append("confusion\t" + "\t".join(f"pred{j}" for j in range(k)))
        for i in range(k):
            lines.append(f"true{i}\t" + "\t".join(str(int(v)) for v in self.confusion[i]))
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def predict(model: IdenNet, samples: Sequence[Sample], features: dict[str, np.ndarray] | None = None,
            batch_size: int = 128) -> np.ndarray:
    """Expression logits in eval mode with centre crops."""
    out = []
    for start in range(0, len(samples), batch_size):
        sl = slice(start, start + batch_size)
        if features is not None:
            pe = Tensor(features["emotion"][sl])
            pi = Tensor(features["identity"][sl]) if model.identity is not None else None
            res = model.head_pooled(pe, pi, "eval")
        else:
            res = model(Tensor(batch_images(samples[sl], "eval")), "eval")
        out.append(res.emo_logits.data)
    return np.concatenate(out)


def evaluate(model: IdenNet, samples: Sequence[Sample], features: dict[str, np.ndarray] | None = None,
             batch_size: int = 128) -> EvalReport:
    if not samples:
        raise ValueError("cannot evaluate on an empty set")
    logits = predict(model, samples, features, batch_size)
    labels = [s.expression_label for s in samples]
    return EvalReport.from_predictions(labels, logits.argmax(axis=1), model.num_expressions)


def pretrain_accuracy(net: PretrainNet, samples: Sequence[Sample], batch_size: int = 128) -> float:
    labels = _task_labels(samples, net.task)
    correct = 0
    for start in range(0, len(samples), batch_size):
        logits = net(Tensor(batch_images(samples[start : start + batch_size], "eval")), "eval")
        correct += int((logits.data.argmax(axis=1) == labels[start : start + batch_size]).sum())
    return correct / len(samples)


def pooled_stream_features(stream, samples: Sequence[Sample], batch_size: int = 128) -> np.ndarray:
    """Eval-mode stream output after block 2, centre-cropped and 2x2 pooled."""
    out = []
    for start in range(0, len(samples), batch_size):
        imgs = Tensor(batch_images(samples[start : start + batch_size], "eval"))
        out.append(avg_pool_2x2(stream.features(imgs, "eval")).data)
    return np.concatenate(out)


def precompute_features(emotion_net: PretrainNet, identity_net: PretrainNet | None,
                        samples: Sequence[Sample]) -> dict[str, np.ndarray]:
    feats = {"emotion": pooled_stream_features(emotion_net.stream, samples)}
    if identity_net is not None:
        feats["identity"] = pooled_stream_features(identity_net.stream, samples)
    return feats


# ---------------------------------------------------------------------------
# pipelines


@dataclass
class PretrainResult:
    net: PretrainNet
    best: ckpt_io.Checkpoint
    best_epoch: int
    history: list[EpochLog]
    val_accuracy: list[float]


def pretrain(task: str, samples: Sequence[Sample], backbone: BackboneConfig, cfg: TrainConfig,
             num_classes: int | None = None, out_dir: str | Path | None = None) -> PretrainResult:
    """Train one stream (plus block 3 and a classifier) on expressions or identities.

    A ``cfg.val_fraction`` share of samples is held out; the returned
    network holds the weights of the best validation epoch (earliest on ties).
    """
    if not samples:
        raise ValueError("cannot pretrain on an empty dataset")
    labels = _task_labels(samples, task)
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(samples))
    n_val = int(round(cfg.val_fraction * len(samples))) if len(samples) > 1 else 0
    val = [samples[i] for i in order[:n_val]]
    train = [samples[i] for i in order[n_val:]]
    if cfg.augment:
        train = augment(train)

    net = PretrainNet(task, backbone, num_classes, rng)
    trainer = PretrainTrainer(net, train, cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    best, best_acc, best_epoch, val_acc = None, -1.0, -1, []
    for _ in range(cfg.epochs):
        entry = trainer.run_epoch()
        acc = pretrain_accuracy(net, val) if val else entry.train_acc
        val_acc.append(acc)
        ck = trainer.checkpoint()
        ck.meta["val_accuracy"] = acc
        if out is not None:
            ckpt_io.save(out / f"pretrain_{task}_epoch{entry.epoch:03d}.ckpt", ck)
        if acc > best_acc:
            best, best_acc, best_epoch = ck, acc, entry.epoch
        log.info("pretrain %s epoch %d: loss %.4f train %.3f val %.3f", task, entry.epoch, entry.total,
                 entry.train_acc, acc)
    ckpt_io.load_state(net, best.tensors)
    if out is not None:
        ckpt_io.save(out / f"pretrain_{task}_best.ckpt", best)
        write_metrics(out / f"pretrain_{task}_metrics.tsv", trainer.epochs)
    return PretrainResult(net, best, best_epoch, trainer.epochs, val_acc)


@dataclass
class FinetuneResult:
    report: EvalReport
    fold_reports: list[EvalReport]
    histories: list[list[EpochLog]]
    checkpoints: list[ckpt_io.Checkpoint]


def finetune(variant, emotion_net: PretrainNet, identity_net: PretrainNet | None,
             samples: Sequence[Sample], folds: FoldSplit, cfg: TrainConfig, loss_cfg: LossConfig | None = None,
             out_dir: str | Path | None = None, features: dict[str, np.ndarray] | None = None,
             fold_ids: Sequence[int] | None = None) -> FinetuneResult:
    """Cross-validated fine-tuning of one variant.

    For each fold: build the variant, load the pretrained streams and share
    block 3 into the fusion block, freeze the extractors, train on the
    other folds with the joint loss and evaluate the final model on the
    held-out fold. Fold ``f`` uses seed ``cfg.seed ^ f``.
    """
    variant = Variant.parse(variant)
    if not variant.has_identity_stream and identity_net is not None:
        warnings.warn(f"variant {variant.value} has no identity stream; identity checkpoint ignored",
                      stacklevel=2)
        identity_net = None
    if variant.has_identity_stream and identity_net is None:
        raise ValueError(f"variant {variant.value} needs an identity checkpoint")
    if features is not None and cfg.augment:
        raise ValueError("precomputed features cannot be combined with augmentation")
    num_expressions = max(s.expression_label for s in samples) + 1
    num_identities = max(s.identity_label for s in samples) + 1
    if loss_cfg is None:
        loss_cfg = LossConfig(num_expressions=num_expressions, num_identities=num_identities)
    num_expressions = max(num_expressions, loss_cfg.num_expressions)
    num_identities = max(num_identities, loss_cfg.num_identities)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    index = {id(s): k for k, s in enumerate(samples)}
    reports, histories, ckpts = [], [], []
    for fold in (range(folds.k) if fold_ids is None else fold_ids):
        seed = cfg.seed ^ fold
        train, test = folds.split(samples, fold)
        if cfg.augment:
            train = augment(train)
        model = build_model(variant, emotion_net.backbone, num_expressions,
                            num_identities if variant.has_identity_head else None, np.random.default_rng(seed))
        load_pretrained_and_share(model, emotion_net, identity_net)
        freeze_feature_extractors(model)
        train_feats = test_feats = None
        if features is not None:
            tr = np.array([index[id(s)] for s in train])
            te = np.array([index[id(s)] for s in test])
            train_feats = {k: v[tr] for k, v in features.items()}
            test_feats = {k: v[te] for k, v in features.items()}
        trainer = FinetuneTrainer(model, train, cfg, loss_cfg, train_feats, seed=seed)
        trainer.train()
        report = evaluate(model, test, test_feats)
        log.info("%s fold %d: accuracy %.4f", variant.value, fold, report.accuracy)
        ck = trainer.checkpoint()
        ck.meta.update(fold=fold, test_accuracy=report.accuracy)
        if out is not None:
            ckpt_io.save(out / f"finetune_{variant.value}_fold{fold:02d}.ckpt", ck)
            write_metrics(out / f"finetune_{variant.value}_fold{fold:02d}_metrics.tsv", trainer.epochs)
        reports.append(report)
        histories.append(trainer.epochs)
        ckpts.append(ck)
    merged = EvalReport.merge(reports)
    if out is not None:
        merged.write(out / f"finetune_{variant.value}_report.tsv")
    return FinetuneResult(merged, reports, histories, ckpts)


def heatmap_export(model: IdenNet, samples: Sequence[Sample], out_dir: str | Path,
                   figure: bool = True) -> list[Path]:
    """Write the centre-cropped input and its fusion-block heatmap per sample.

    Heatmaps are 8-bit PGMs, 0 for the lowest response and 255 for the
    highest. ``index.tsv`` maps each sample to its true and predicted class.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create heatmap directory {out}: {exc}") from exc
    written: list[Path] = []
    rows = ["index\tsource\texpression_label\tprediction\tinput\theatmap"]
    inputs, maps, titles = [], [], []
    for start in range(0, len(samples), 64):
        chunk = samples[start : start + 64]
        res = model(Tensor(batch_images(chunk, "eval")), "eval")
        heat = extract_heatmap(res.fusion_maps)
        preds = res.emo_logits.data.argmax(axis=1)
        for j, s in enumerate(chunk):
            k = start + j
            img = crop(s.image, "eval")
            hm = np.rint(heat[j] * 255).astype(np.uint8)
            in_path, hm_path = out / f"input_{k:05d}.pgm", out / f"heatmap_{k:05d}.pgm"
            write_pgm(in_path, img)
            write_pgm(hm_path, hm)
            written += [in_path, hm_path]
            rows.append(f"{k}\t{s.path or ''}\t{s.expression_label}\t{int(preds[j])}\t{in_path.name}\t{hm_path.name}")
            inputs.append(img)
            maps.append(heat[j])
            titles.append(f"true {s.expression_label} / pred {int(preds[j])}")
    index = out / "index.tsv"
    index.write_text("\n".join(rows) + "\n", encoding="utf-8")
    written.append(index)
    if figure and samples:
        from .plotting import plot_heatmaps

        plot_heatmaps(inputs, maps, titles, out / "heatmaps.png")
    return written
