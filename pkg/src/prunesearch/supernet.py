"""The transformable CNN.

One maximal-width network carries every candidate sub-network: a layer's
candidate widths are realized by slicing the first channels of its full
output, aligned to a common channel count by channel-wise interpolation
(adaptive average pooling over the channel axis) and combined as a convex
sum. Stage outputs are likewise aggregated over all candidate depths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .distributions import (
    ArchParams,
    DepthDistribution,
    DerivedArch,
    GumbelSample,
    WidthDistribution,
    depth_soft_sample,
    fixed_depth_weights,
    fixed_width_sample,
    gumbel_soft_sample,
    sample_subset,
)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass
class LayerSpec:
    """Geometry of one conv layer at its maximal width."""

    c_out: int
    kernel: int = 3
    stride: int = 1
    padding: int | None = None
    candidates: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.padding is None:
            self.padding = self.kernel // 2
        if self.candidates and max(self.candidates) > self.c_out:
            raise ValueError(
                f"candidate width {max(self.candidates)} exceeds layer width {self.c_out}"
            )


@dataclass
class SuperNetSpec:
    """Maximal layout: input geometry, conv stages, classifier width."""

    in_channels: int
    image_size: int
    num_classes: int
    stages: list[list[LayerSpec]]

    def all_layers(self) -> list[LayerSpec]:
        return [l for stage in self.stages for l in stage]

    def layer_input_channels(self) -> list[int]:
        """Maximal input channel count of each layer, stage-major."""
        c = self.in_channels
        out = []
        for spec in self.all_layers():
            out.append(c)
            c = spec.c_out
        return out

    def final_channels(self) -> int:
        return self.stages[-1][-1].c_out


def candidate_widths(c_out: int, ratios: list[float]) -> list[int]:
    """round(ratio * width) per ratio, deduplicated, each at least 1."""
    cands = sorted({max(1, round(r * c_out)) for r in ratios})
    return cands


class ConvUnit:
    """One conv + batch-norm block (weights at the unit's full width)."""

    def __init__(self, spec: LayerSpec, c_in: int, rng: np.random.Generator):
        self.spec = spec
        self.c_in = c_in
        fan_in = c_in * spec.kernel * spec.kernel
        self.weight = Tensor(
            rng.standard_normal((spec.c_out, c_in, spec.kernel, spec.kernel))
            * np.sqrt(2.0 / fan_in),
            requires_grad=True,
        )
        self.gamma = Tensor(np.ones(spec.c_out), requires_grad=True)
        self.beta = Tensor(np.zeros(spec.c_out), requires_grad=True)
        self.bn = BatchNormState.create(spec.c_out)


class ConvNet:
    """A plain CNN (stages of ConvUnits, global pooling, linear head).

    Serves both as the supernet (at maximal layout) and as a concrete
    derived/student network (at exact sizes).
    """

    def __init__(self, spec: SuperNetSpec, rng: np.random.Generator):
        self.spec = spec
        self.stages: list[list[ConvUnit]] = []
        c = spec.in_channels
        for stage in spec.stages:
            units = []
            for layer in stage:
                units.append(ConvUnit(layer, c, rng))
                c = layer.c_out
            self.stages.append(units)
        d = spec.final_channels()
        self.head_w = Tensor(rng.standard_normal((spec.num_classes, d)) * np.sqrt(1.0 / d),
                             requires_grad=True)
        self.head_b = Tensor(np.zeros(spec.num_classes), requires_grad=True)

    def units(self) -> list[ConvUnit]:
        return [u for stage in self.stages for u in stage]

    def parameters(self) -> list[Tensor]:
        params = []
        for u in self.units():
            params.extend([u.weight, u.gamma, u.beta])
        params.extend([self.head_w, self.head_b])
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for si, stage in enumerate(self.stages):
            for li, u in enumerate(stage):
                named[f"s{si}.l{li}.conv_w"] = u.weight
                named[f"s{si}.l{li}.bn_gamma"] = u.gamma
                named[f"s{si}.l{li}.bn_beta"] = u.beta
        named["head.w"] = self.head_w
        named["head.b"] = self.head_b
        return named

    def named_buffers(self) -> dict[str, np.ndarray]:
        buffers = {}
        for si, stage in enumerate(self.stages):
            for li, u in enumerate(stage):
                buffers[f"s{si}.l{li}.bn_mean"] = u.bn.running_mean
                buffers[f"s{si}.l{li}.bn_var"] = u.bn.running_var
        return buffers

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for si, stage in enumerate(self.stages):
            for li, u in enumerate(stage):
                u.bn.running_mean = buffers[f"s{si}.l{li}.bn_mean"].copy()
                u.bn.running_var = buffers[f"s{si}.l{li}.bn_var"].copy()


def build_arch_params(spec: SuperNetSpec, search_width: bool = True,
                      search_depth: bool = True) -> ArchParams:
    """Fresh (uniform) distributions matching the supernet layout."""
    widths = [WidthDistribution(l.candidates) for l in spec.all_layers()]
    depths = [DepthDistribution(len(stage)) for stage in spec.stages]
    return ArchParams(widths=widths, depths=depths,
                      search_width=search_width, search_depth=search_depth)


def cwi(x: Tensor, c_target: int) -> Tensor:
    """Channel-wise interpolation: align x[N,C,H,W] to c_target channels.

    Output channel i is the mean of input channels [floor(i*C/T),
    ceil((i+1)*C/T)); identity when C == c_target; adds no parameters.
    """
    if x.ndim != 4:
        raise ValueError(f"cwi expects x[N,C,H,W], got {x.shape}")
    return ad.adaptive_avg_pool_axis(x, 1, c_target)


def _scalar_at(vec: Tensor, i: int) -> Tensor:
    return ad.take(vec, [i]).reshape(())


def forward_layer_search(unit: ConvUnit, x: Tensor, sample: GumbelSample,
                         training: bool = True) -> Tensor:
    """Eq.-style fragment aggregation for one layer.

    Runs the full-width convolution once, batch-normalizes, slices the first
    C_j channels per sampled candidate, aligns every fragment to the widest
    sampled count via cwi and returns their convex combination. The result
    has max(selected) channels; no activation is applied here.
    """
    if sample.indices is None or not sample.indices:
        raise ValueError("layer sample has no selected subset")
    c_in = x.shape[1]
    if c_in > unit.c_in:
        raise ValueError(f"input has {c_in} channels but layer holds only {unit.c_in}")
    w = unit.weight if c_in == unit.c_in else ad.narrow(unit.weight, 1, c_in)
    full = ad.conv2d(x, w, stride=unit.spec.stride, padding=unit.spec.padding)
    normed = ad.batch_norm(full, unit.gamma, unit.beta, unit.bn, training,
                           momentum=BN_MOMENTUM, eps=BN_EPS)
    target = sample.max_selected
    out = None
    for pos, idx in enumerate(sample.indices):
        c_j = sample.candidates[idx]
        frag = normed if c_j == normed.shape[1] else ad.narrow(normed, 1, c_j)
        aligned = cwi(frag, target)
        term = ad.mul(aligned, _scalar_at(sample.weights, pos))
        out = term if out is None else ad.add(out, term)
    return out


def _align_spatial(x: Tensor, hw: tuple[int, int]) -> Tensor:
    if x.shape[2] != hw[0]:
        x = ad.adaptive_avg_pool_axis(x, 2, hw[0])
    if x.shape[3] != hw[1]:
        x = ad.adaptive_avg_pool_axis(x, 3, hw[1])
    return x


def forward_stage_search(units: list[ConvUnit], x: Tensor,
                         samples: list[GumbelSample], q_hat: Tensor,
                         training: bool = True) -> Tensor:
    """Depth aggregation over one stage.

    Layers run sequentially (ReLU between them); each layer's activated
    output is a candidate stage output. All are cwi-aligned to the widest
    sampled channel count (and, under heterogeneous strides, average-pooled
    to the last layer's spatial size) and summed with the soft depth weights.
    """
    if len(units) != len(samples) or q_hat.shape != (len(units),):
        raise ValueError("stage expects one sample per layer and matching depth weights")
    outputs = []
    h = x
    for unit, sample in zip(units, samples):
        h = ad.relu(forward_layer_search(unit, h, sample, training))
        outputs.append(h)
    c_out = max(o.shape[1] for o in outputs)
    final_hw = (outputs[-1].shape[2], outputs[-1].shape[3])
    total = None
    for l, o in enumerate(outputs):
        aligned = _align_spatial(cwi(o, c_out), final_hw)
        term = ad.mul(aligned, _scalar_at(q_hat, l))
        total = term if total is None else ad.add(total, term)
    return total


def draw_layer_sample(dist_w: WidthDistribution, tau: float, k: int,
                      rng: np.random.Generator) -> GumbelSample:
    soft = gumbel_soft_sample(dist_w, tau, rng)
    return sample_subset(soft, min(k, len(dist_w.candidates)), rng)


def forward_search(net: ConvNet, x: Tensor, arch: ArchParams, tau: float,
                   k: int, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Full stochastic forward pass: per-layer width samples and per-stage
    depth weights are drawn in a fixed order (layers then depth, stage-major)
    so a seeded generator reproduces the pass exactly."""
    h = x
    layer_idx = 0
    for si, units in enumerate(net.stages):
        samples = []
        for _ in units:
            if arch.search_width:
                samples.append(draw_layer_sample(arch.widths[layer_idx], tau, k, rng))
            else:
                samples.append(fixed_width_sample(arch.widths[layer_idx]))
            layer_idx += 1
        if arch.search_depth:
            q_hat = depth_soft_sample(arch.depths[si], tau, rng)
        else:
            q_hat = fixed_depth_weights(len(units))
        h = forward_stage_search(units, h, samples, q_hat, training)
    pooled = ad.global_avg_pool(h)
    c_cur = pooled.shape[1]
    head_w = net.head_w if c_cur == net.head_w.shape[1] else ad.narrow(net.head_w, 1, c_cur)
    return ad.linear(pooled, head_w, net.head_b)


def forward_fixed(net: ConvNet, x: Tensor, training: bool = False) -> Tensor:
    """Ordinary CNN forward at the net's concrete sizes: no sampling, no cwi."""
    h = x
    for units in net.stages:
        for unit in units:
            h = ad.conv2d(h, unit.weight, stride=unit.spec.stride, padding=unit.spec.padding)
            h = ad.batch_norm(h, unit.gamma, unit.beta, unit.bn, training,
                              momentum=BN_MOMENTUM, eps=BN_EPS)
            h = ad.relu(h)
    return ad.linear(ad.global_avg_pool(h), net.head_w, net.head_b)


def derived_spec(spec: SuperNetSpec, arch: DerivedArch) -> SuperNetSpec:
    """Concrete layout for a (widths, depths) selection."""
    if len(arch.widths) != len(spec.all_layers()) or len(arch.depths) != len(spec.stages):
        raise ValueError("derived arch does not match the supernet layout")
    stages = []
    flat = 0
    for si, stage in enumerate(spec.stages):
        depth = arch.depths[si]
        if not 1 <= depth <= len(stage):
            raise ValueError(f"stage {si}: depth {depth} out of range")
        layers = []
        for li, layer in enumerate(stage):
            width = arch.widths[flat]
            if li < depth:
                if width > layer.c_out or width < 1:
                    raise ValueError(f"layer {flat}: width {width} out of range")
                layers.append(LayerSpec(c_out=width, kernel=layer.kernel,
                                        stride=layer.stride, padding=layer.padding))
            flat += 1
        stages.append(layers)
    return SuperNetSpec(in_channels=spec.in_channels, image_size=spec.image_size,
                        num_classes=spec.num_classes, stages=stages)


def instantiate_derived(supernet: ConvNet, arch: DerivedArch, init: str,
                        rng: np.random.Generator) -> ConvNet:
    """Concrete network for a derived architecture.

    ``init='random'`` draws fresh He-scaled weights; ``init='slice_from_teacher'``
    copies the first chosen-count channels of the supernet's weights along
    both axes (and the first chosen-depth layers per stage), head included.
    """
    if init not in ("random", "slice_from_teacher"):
        raise ValueError(f"unknown init mode {init!r}")
    spec = derived_spec(supernet.spec, arch)
    net = ConvNet(spec, rng)
    if init == "random":
        return net
    for si, src_stage in enumerate(supernet.stages):
        dst_units = net.stages[si]
        for li, dst in enumerate(dst_units):
            src = src_stage[li]
            co, ci = dst.spec.c_out, dst.c_in
            dst.weight.data = src.weight.data[:co, :ci].copy()
            dst.gamma.data = src.gamma.data[:co].copy()
            dst.beta.data = src.beta.data[:co].copy()
            dst.bn.running_mean = src.bn.running_mean[:co].copy()
            dst.bn.running_var = src.bn.running_var[:co].copy()
    d = spec.final_channels()
    net.head_w.data = supernet.head_w.data[:, :d].copy()
    net.head_b.data = supernet.head_b.data.copy()
    return net
