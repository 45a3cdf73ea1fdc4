"""Learnable width/depth distributions and their Gumbel-Softmax relaxation.

A width distribution holds one logit per candidate channel count of a conv
layer; a depth distribution holds one logit per possible layer count of a
stage. Sampling is softened with Gumbel noise at temperature tau so the
classification loss can move the logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GUMBEL_EPS = 1e-12


class WidthDistribution:
    """Logits over a sorted set of candidate output-channel counts."""

    def __init__(self, candidates: list[int], logits: np.ndarray | None = None):
        candidates = [int(c) for c in candidates]
        if len(candidates) < 2:
            raise ValueError(f"need at least 2 width candidates, got {candidates}")
        if any(c <= 0 for c in candidates):
            raise ValueError(f"width candidates must be positive, got {candidates}")
        if sorted(set(candidates)) != candidates:
            raise ValueError(f"width candidates must be strictly increasing, got {candidates}")
        self.candidates = candidates
        init = np.zeros(len(candidates)) if logits is None else np.asarray(logits, dtype=np.float64)
        self.logits = Tensor(init, requires_grad=True)


class DepthDistribution:
    """Logits over depths 1..L for a stage of L conv layers."""

    def __init__(self, num_layers: int, logits: np.ndarray | None = None):
        if num_layers < 1:
            raise ValueError(f"stage needs at least 1 layer, got {num_layers}")
        self.num_layers = num_layers
        init = np.zeros(num_layers) if logits is None else np.asarray(logits, dtype=np.float64)
        self.logits = Tensor(init, requires_grad=True)


@dataclass
class GumbelSample:
    """One softened draw from a width distribution.

    ``scaled_logits`` are (log p + gumbel)/tau on the graph; ``indices`` and
    ``weights`` are filled by ``sample_subset``. ``candidates`` mirrors the
    source distribution so consumers can map indices to channel counts.
    """

    scaled_logits: Tensor
    p_hat: Tensor
    tau: float
    candidates: list[int]
    indices: list[int] | None = None
    weights: Tensor | None = None

    @property
    def selected_channels(self) -> list[int]:
        if self.indices is None:
            raise ValueError("subset not sampled yet")
        return [self.candidates[i] for i in self.indices]

    @property
    def max_selected(self) -> int:
        return max(self.selected_channels)


@dataclass
class TemperatureSchedule:
    """Linear decay from ``start`` at epoch 0 to ``end`` at the final epoch."""

    start: float = 10.0
    end: float = 0.1
    total_epochs: int = 1

    def value(self, epoch: int) -> float:
        if self.total_epochs <= 1:
            return self.end
        frac = min(max(epoch / (self.total_epochs - 1), 0.0), 1.0)
        return self.start + (self.end - self.start) * frac


@dataclass
class DerivedArch:
    """A concrete (width per layer, depth per stage) selection."""

    widths: list[int]
    depths: list[int]
    flops: float | None = None


@dataclass
class ArchParams:
    """All searchable distributions of one supernet, in layer/stage order.

    ``widths`` is flat across stages (stage-major). Disabling an axis fixes
    the corresponding choices at their maximum (full width / full depth).
    """

    widths: list[WidthDistribution]
    depths: list[DepthDistribution]
    search_width: bool = True
    search_depth: bool = True

    def parameters(self) -> list[Tensor]:
        params = []
        if self.search_width:
            params.extend(d.logits for d in self.widths)
        if self.search_depth:
            params.extend(d.logits for d in self.depths)
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        if self.search_width:
            named.update({f"alpha.{i}": d.logits for i, d in enumerate(self.widths)})
        if self.search_depth:
            named.update({f"beta.{s}": d.logits for s, d in enumerate(self.depths)})
        return named


def width_probs(dist: WidthDistribution) -> Tensor:
    """Candidate probabilities softmax(alpha), on the graph."""
    return ad.softmax(dist.logits)


def depth_probs(dist: DepthDistribution) -> Tensor:
    return ad.softmax(dist.logits)


def _gumbel_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    u = np.clip(rng.random(size), GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    return -np.log(-np.log(u))


def _soft_weights(logits: Tensor, tau: float, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    noise = Tensor(_gumbel_noise(rng, logits.shape[0]))
    scaled = ad.add(ad.log_softmax(logits), noise) * (1.0 / tau)
    return scaled, ad.softmax(scaled)


def gumbel_soft_sample(dist: WidthDistribution, tau: float, rng: np.random.Generator) -> GumbelSample:
    """Draw soft candidate weights p_hat; the subset is selected separately."""
    scaled, p_hat = _soft_weights(dist.logits, tau, rng)
    return GumbelSample(scaled_logits=scaled, p_hat=p_hat, tau=tau, candidates=dist.candidates)


def sample_subset(sample: GumbelSample, k: int, rng: np.random.Generator) -> GumbelSample:
    """Pick k distinct candidate indices proportional to p_hat, renormalizing
    after each draw, and attach the re-normalized on-graph weights."""
    n = len(sample.candidates)
    if not 1 <= k <= n:
        raise ValueError(f"subset size {k} out of range for {n} candidates")
    probs = sample.p_hat.data.copy()
    indices: list[int] = []
    for _ in range(k):
        total = probs.sum()
        cdf = np.cumsum(probs / total)
        idx = int(np.searchsorted(cdf, rng.random(), side="right"))
        idx = min(idx, n - 1)
        indices.append(idx)
        probs[idx] = 0.0
    weights = ad.softmax(ad.take(sample.scaled_logits, indices))
    return GumbelSample(
        scaled_logits=sample.scaled_logits,
        p_hat=sample.p_hat,
        tau=sample.tau,
        candidates=sample.candidates,
        indices=indices,
        weights=weights,
    )


def depth_soft_sample(dist: DepthDistribution, tau: float, rng: np.random.Generator) -> Tensor:
    """Soft depth weights q_hat over 1..L; all terms are kept (no subset)."""
    _, q_hat = _soft_weights(dist.logits, tau, rng)
    return q_hat


def fixed_width_sample(dist: WidthDistribution) -> GumbelSample:
    """Degenerate sample pinned at the largest candidate (axis disabled)."""
    n = len(dist.candidates)
    one_hot = np.zeros(n)
    one_hot[-1] = 1.0
    return GumbelSample(
        scaled_logits=Tensor(np.zeros(n)),
        p_hat=Tensor(one_hot),
        tau=1.0,
        candidates=dist.candidates,
        indices=[n - 1],
        weights=Tensor(np.ones(1)),
    )


def fixed_depth_weights(num_layers: int) -> Tensor:
    """One-hot depth weights at full depth (axis disabled)."""
    q = np.zeros(num_layers)
    q[-1] = 1.0
    return Tensor(q)


def _argmax_prefer_last(values: np.ndarray) -> int:
    return values.size - 1 - int(np.argmax(values[::-1]))


def derive(arch: ArchParams) -> DerivedArch:
    """Argmax selection: widest/deepest candidate wins ties."""
    widths = []
    for d in arch.widths:
        if arch.search_width:
            widths.append(d.candidates[_argmax_prefer_last(d.logits.data)])
        else:
            widths.append(d.candidates[-1])
    depths = []
    for d in arch.depths:
        if arch.search_depth:
            depths.append(_argmax_prefer_last(d.logits.data) + 1)
        else:
            depths.append(d.num_layers)
    return DerivedArch(widths=widths, depths=depths)


def discrepancy(dist: WidthDistribution) -> float:
    """Gap between the top two candidate probabilities (confidence measure)."""
    p = np.sort(width_probs(dist).data)
    return float(p[-1] - p[-2])


def mean_discrepancy(arch: ArchParams) -> float:
    if not arch.search_width or not arch.widths:
        return 0.0
    return float(np.mean([discrepancy(d) for d in arch.widths]))
