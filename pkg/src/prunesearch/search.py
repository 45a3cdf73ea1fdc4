"""The search loop: alternating weight and architecture updates.

Each iteration takes one SGD step on the supernet weights from the training
split's cross-entropy, then one Adam step on the distribution logits from the
validation split's penalized loss. The temperature decays linearly per epoch;
per-epoch metrics and a resumable state snapshot are produced throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import restore_rng, rng_state
from .config import ExperimentConfig
from .cost import CostSpec, LayerCostTable, cost_loss, e_cost, f_cost, max_arch
from .data import Dataset, iter_batches, split_stratified
from .distributions import (
    ArchParams,
    DerivedArch,
    TemperatureSchedule,
    derive,
    mean_discrepancy,
)
from .supernet import ConvNet, SuperNetSpec, build_arch_params, forward_search

METRICS_FIELDS = ["epoch", "train_loss", "val_ce", "cost_loss", "e_cost", "f_cost",
                  "discrepancy", "tau"]


class DivergenceError(RuntimeError):
    """Raised when a loss goes non-finite; state is checkpointable."""


def split_dataset(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint stratified split of the training set, deterministic per seed."""
    return split_stratified(ds, fraction, np.random.default_rng(seed))


def cosine_lr(epoch: int, total_epochs: int, lr_max: float = 0.1,
              lr_min: float = 0.0) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


class SGD:
    """SGD with classic momentum: v <- m*v + (g + wd*p); p <- p - lr*v."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v

    def state_arrays(self, names: list[str]) -> dict[str, np.ndarray]:
        return {f"opt.sgd.v.{n}": v for n, v in zip(names, self.velocity)}

    def load_state_arrays(self, names: list[str], arrays: dict[str, np.ndarray]) -> None:
        self.velocity = [arrays[f"opt.sgd.v.{n}"].copy() for n in names]


class Adam:
    """Adam with bias correction; weight decay folded into the gradient."""

    def __init__(self, params: list[Tensor], lr: float = 0.001,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.001):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self, names: list[str]) -> dict[str, np.ndarray]:
        out = {}
        for n, m, v in zip(names, self.m, self.v):
            out[f"opt.adam.m.{n}"] = m
            out[f"opt.adam.v.{n}"] = v
        return out

    def load_state_arrays(self, names: list[str], arrays: dict[str, np.ndarray]) -> None:
        self.m = [arrays[f"opt.adam.m.{n}"].copy() for n in names]
        self.v = [arrays[f"opt.adam.v.{n}"].copy() for n in names]


@dataclass
class SearchResult:
    arch: DerivedArch
    metrics: list[dict]
    net: ConvNet
    arch_params: ArchParams
    max_flops: float


class _WrappingBatches:
    """Endless batch stream: reshuffles whenever the underlying set runs out."""

    def __init__(self, ds: Dataset, batch_size: int, rng: np.random.Generator):
        self.ds = ds
        self.batch_size = batch_size
        self.rng = rng
        self._iter = iter_batches(ds, batch_size, rng, train=True)

    def next(self):
        try:
            return next(self._iter)
        except StopIteration:
            self._iter = iter_batches(self.ds, self.batch_size, self.rng, train=True)
            return next(self._iter)


class SearchRun:
    """Resumable state machine for one search phase."""

    def __init__(self, cfg: ExperimentConfig, spec: SuperNetSpec,
                 train_ds: Dataset, val_ds: Dataset, seed: int,
                 init_arrays: dict[str, np.ndarray] | None = None):
        se = cfg.search
        self.cfg = cfg
        self.spec = spec
        self.train_ds = train_ds
        self.val_ds = val_ds
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.net = ConvNet(spec, self.rng)
        if init_arrays is not None:
            named = self.net.named_parameters()
            for name, tensor in named.items():
                tensor.data = init_arrays[name].copy()
            self.net.load_buffers({k: init_arrays[k] for k in self.net.named_buffers()})
        self.arch = build_arch_params(spec,
                                      search_width=se.axes in ("width", "both"),
                                      search_depth=se.axes in ("depth", "both"))
        self.table = LayerCostTable(spec)
        self.max_flops = f_cost(max_arch(spec), self.table)
        target = se.flop_target if se.flop_target > 0 else se.flop_target_ratio * self.max_flops
        self.cost_spec = CostSpec(target_flops=target, toleration=se.toleration,
                                  lambda_cost=se.lambda_cost)
        self.tau_schedule = TemperatureSchedule(se.tau_start, se.tau_end, se.epochs)
        self.sgd = SGD(self.net.parameters(), lr=se.weight_lr,
                       momentum=se.weight_momentum, weight_decay=se.weight_decay)
        self.adam = Adam(self.arch.parameters(), lr=se.arch_lr,
                         betas=(se.arch_beta1, se.arch_beta2),
                         weight_decay=se.arch_weight_decay)
        self.epoch = 0
        self.metrics: list[dict] = []
        self._val_stream: _WrappingBatches | None = None

    # -- persistence --------------------------------------------------------

    def _param_names(self) -> tuple[list[str], list[str]]:
        net_names = list(self.net.named_parameters())
        arch_names = list(self.arch.named_parameters())
        return net_names, arch_names

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        arrays: dict[str, np.ndarray] = {}
        for name, t in self.net.named_parameters().items():
            arrays[name] = t.data
        for name, buf in self.net.named_buffers().items():
            arrays[name] = buf
        for name, t in self.arch.named_parameters().items():
            arrays[name] = t.data
        net_names, arch_names = self._param_names()
        arrays.update(self.sgd.state_arrays(net_names))
        arrays.update(self.adam.state_arrays(arch_names))
        meta = {
            "epoch": self.epoch,
            "adam_t": self.adam.t,
            "rng": rng_state(self.rng),
            "metrics": self.metrics,
            "max_flops": self.max_flops,
        }
        return meta, arrays

    def restore(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.net.named_parameters().items():
            t.data = arrays[name].copy()
        self.net.load_buffers({k: arrays[k] for k in self.net.named_buffers()})
        for name, t in self.arch.named_parameters().items():
            t.data = arrays[name].copy()
        net_names, arch_names = self._param_names()
        self.sgd.load_state_arrays(net_names, arrays)
        self.adam.load_state_arrays(arch_names, arrays)
        self.adam.t = meta["adam_t"]
        self.epoch = meta["epoch"]
        self.metrics = [dict(m) for m in meta["metrics"]]
        self.rng = restore_rng(meta["rng"])
        self._val_stream = None

    # -- training -----------------------------------------------------------

    def weights_step(self, x: np.ndarray, y: np.ndarray, tau: float) -> float:
        """One SGD update of the supernet weights from the training loss.

        Gradients the loss pushes into the architecture logits are discarded,
        never applied.
        """
        se = self.cfg.search
        self.sgd.zero_grad()
        self.adam.zero_grad()
        logits = forward_search(self.net, Tensor(x), self.arch, tau,
                                se.samples_per_layer, self.rng, training=True)
        loss = ad.cross_entropy(logits, y)
        if not np.isfinite(loss.data):
            raise DivergenceError(f"training loss diverged at epoch {self.epoch}")
        loss.backward()
        self.sgd.step()
        self.adam.zero_grad()
        return loss.item()

    def arch_step(self, x: np.ndarray, y: np.ndarray, tau: float) -> tuple[float, float]:
        """One Adam update of the logits from the penalized validation loss.

        The weights receive gradients from the validation pass but are never
        stepped by it; those gradients are cleared afterwards.
        """
        se = self.cfg.search
        self.sgd.zero_grad()
        logits = forward_search(self.net, Tensor(x), self.arch, tau,
                                se.samples_per_layer, self.rng, training=True)
        ce = ad.cross_entropy(logits, y)
        e = e_cost(self.arch, self.table)
        f = f_cost(derive(self.arch), self.table)
        penalty = cost_loss(e, f, self.cost_spec)
        loss = ce if se.lambda_cost == 0.0 else ad.add(ce, penalty * se.lambda_cost)
        if not np.isfinite(loss.data):
            raise DivergenceError(f"validation loss diverged at epoch {self.epoch}")
        loss.backward()
        self.adam.step()
        self.sgd.zero_grad()
        return ce.item(), penalty.item()

    def run_epoch(self) -> dict:
        se = self.cfg.search
        tau = self.tau_schedule.value(self.epoch)
        self.sgd.lr = cosine_lr(self.epoch, se.epochs, se.weight_lr, se.weight_lr_min)
        if self._val_stream is None:
            self._val_stream = _WrappingBatches(self.val_ds, se.batch_size, self.rng)

        train_losses, val_ces, cost_losses = [], [], []
        for x, y in iter_batches(self.train_ds, se.batch_size, self.rng, train=True):
            train_losses.append(self.weights_step(x, y, tau))
            xv, yv = self._val_stream.next()
            ce_v, penalty = self.arch_step(xv, yv, tau)
            val_ces.append(ce_v)
            cost_losses.append(penalty)

        derived = derive(self.arch)
        row = {
            "epoch": self.epoch,
            "train_loss": float(np.mean(train_losses)),
            "val_ce": float(np.mean(val_ces)),
            "cost_loss": float(np.mean(cost_losses)),
            "e_cost": e_cost(self.arch, self.table).item(),
            "f_cost": f_cost(derived, self.table),
            "discrepancy": mean_discrepancy(self.arch),
            "tau": tau,
        }
        self.metrics.append(row)
        self.epoch += 1
        return row

    def run(self, on_epoch=None) -> SearchResult:
        while self.epoch < self.cfg.search.epochs:
            self.run_epoch()
            if on_epoch is not None:
                on_epoch(self)
        return self.result()

    def result(self) -> SearchResult:
        arch = derive(self.arch)
        arch.flops = f_cost(arch, self.table)
        return SearchResult(arch=arch, metrics=self.metrics, net=self.net,
                            arch_params=self.arch, max_flops=self.max_flops)
