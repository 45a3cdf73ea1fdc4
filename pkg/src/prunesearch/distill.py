"""Knowledge transfer: teacher pretraining, soft-target matching, students.

Three transfer modes are supported for a derived architecture: plain training
from scratch ("none"), training from teacher-sliced weights ("init"), and
soft-target distillation from the frozen teacher ("kd").
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import restore_rng, rng_state
from .config import TrainConfig
from .data import Dataset, iter_batches
from .distributions import DerivedArch
from .search import SGD, DivergenceError, cosine_lr
from .supernet import ConvNet, SuperNetSpec, forward_fixed, instantiate_derived

TRANSFER_MODES = ("none", "init", "kd")


@dataclass
class KDSpec:
    temperature: float = 4.0
    mix: float = 0.9  # weight on the true-label cross-entropy term
    mode: str = "kd"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.mix <= 1.0:
            raise ValueError(f"mix must lie in [0,1], got {self.mix}")
        if self.mode not in TRANSFER_MODES:
            raise ValueError(f"mode must be one of {TRANSFER_MODES}, got {self.mode!r}")


def _np_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def match_loss(student_logits: Tensor, teacher_logits, temperature: float) -> Tensor:
    """Mean soft-target cross-entropy at the given temperature.

    The teacher side is treated as constant: only the student logits carry
    gradient.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    t_data = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t_data.shape != student_logits.shape:
        raise ValueError(
            f"logit shapes differ: student {student_logits.shape}, teacher {t_data.shape}")
    soft_targets = Tensor(_np_softmax(t_data / temperature))
    log_probs = ad.log_softmax(student_logits * (1.0 / temperature), axis=-1)
    return ad.neg(ad.mul(soft_targets, log_probs).sum(axis=1).mean())


def kd_loss(student_logits: Tensor, teacher_logits, labels, spec: KDSpec) -> Tensor:
    """mix * CE(student, labels) + (1 - mix) * match_loss."""
    if spec.mix == 1.0:
        return ad.cross_entropy(student_logits, labels)
    if spec.mix == 0.0:
        return match_loss(student_logits, teacher_logits, spec.temperature)
    ce = ad.cross_entropy(student_logits, labels)
    soft = match_loss(student_logits, teacher_logits, spec.temperature)
    return ad.add(ce * spec.mix, soft * (1.0 - spec.mix))


def evaluate_accuracy(net: ConvNet, ds: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in eval mode (running batch-norm statistics)."""
    correct = 0
    rng = np.random.default_rng(0)  # unused: eval batches neither shuffle nor augment
    with ad.no_grad():
        for x, y in iter_batches(ds, batch_size, rng, train=False):
            logits = forward_fixed(net, Tensor(x), training=False)
            correct += int((np.argmax(logits.data, axis=1) == y).sum())
    return correct / len(ds)


class FitRun:
    """Resumable plain/KD training of a fixed-size network."""

    def __init__(self, net: ConvNet, train_ds: Dataset, cfg: TrainConfig,
                 rng: np.random.Generator, teacher: ConvNet | None = None,
                 kd_spec: KDSpec | None = None):
        if (teacher is None) != (kd_spec is None):
            raise ValueError("teacher and kd_spec go together")
        self.net = net
        self.train_ds = train_ds
        self.cfg = cfg
        self.rng = rng
        self.teacher = teacher
        self.kd_spec = kd_spec
        self.sgd = SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                       weight_decay=cfg.weight_decay)
        self.epoch = 0
        self.history: list[dict] = []

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        arrays = {name: t.data for name, t in self.net.named_parameters().items()}
        arrays.update(self.net.named_buffers())
        arrays.update(self.sgd.state_arrays(list(self.net.named_parameters())))
        meta = {"epoch": self.epoch, "rng": rng_state(self.rng), "history": self.history}
        return meta, arrays

    def restore(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.net.named_parameters().items():
            t.data = arrays[name].copy()
        self.net.load_buffers({k: arrays[k] for k in self.net.named_buffers()})
        self.sgd.load_state_arrays(list(self.net.named_parameters()), arrays)
        self.epoch = meta["epoch"]
        self.history = [dict(h) for h in meta["history"]]
        self.rng = restore_rng(meta["rng"])

    def run_epoch(self) -> dict:
        cfg = self.cfg
        self.sgd.lr = cosine_lr(self.epoch, cfg.epochs, cfg.lr, cfg.lr_min)
        losses = []
        correct = total = 0
        for x, y in iter_batches(self.train_ds, cfg.batch_size, self.rng, train=True):
            xt = Tensor(x)
            self.sgd.zero_grad()
            logits = forward_fixed(self.net, xt, training=True)
            if self.teacher is None:
                loss = ad.cross_entropy(logits, y)
            else:
                with ad.no_grad():
                    teacher_logits = forward_fixed(self.teacher, xt, training=False)
                loss = kd_loss(logits, teacher_logits, y, self.kd_spec)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"training loss diverged at epoch {self.epoch}")
            loss.backward()
            self.sgd.step()
            losses.append(loss.item())
            correct += int((np.argmax(logits.data, axis=1) == y).sum())
            total += len(y)
        row = {"epoch": self.epoch, "train_loss": float(np.mean(losses)),
               "train_acc": correct / total}
        self.history.append(row)
        self.epoch += 1
        return row

    def run(self, on_epoch=None) -> None:
        while self.epoch < self.cfg.epochs:
            self.run_epoch()
            if on_epoch is not None:
                on_epoch(self)


def train_teacher(spec: SuperNetSpec, train_ds: Dataset, cfg: TrainConfig,
                  seed: int) -> FitRun:
    """Standard classification training of the unpruned full-size network."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    net = ConvNet(spec, rng)
    run = FitRun(net, train_ds, cfg, rng)
    run.run()
    return run


def build_student(teacher: ConvNet, arch: DerivedArch, mode: str,
                  rng: np.random.Generator) -> ConvNet:
    if mode not in TRANSFER_MODES:
        raise ValueError(f"mode must be one of {TRANSFER_MODES}, got {mode!r}")
    init = "slice_from_teacher" if mode == "init" else "random"
    return instantiate_derived(teacher, arch, init, rng)


def train_student(teacher: ConvNet, arch: DerivedArch, train_ds: Dataset,
                  cfg: TrainConfig, kd_spec: KDSpec, seed: int) -> FitRun:
    """Train a derived network under the spec's transfer mode.

    Modes "none" and "init" train with plain cross-entropy; "kd" distills
    fresh teacher logits per batch (teacher frozen, eval mode).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    student = build_student(teacher, arch, kd_spec.mode, rng)
    if kd_spec.mode == "kd":
        run = FitRun(student, train_ds, cfg, rng, teacher=teacher, kd_spec=kd_spec)
    else:
        run = FitRun(student, train_ds, cfg, rng)
    run.run()
    return run
