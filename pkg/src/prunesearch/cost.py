"""FLOP accounting for derived architectures and architecture distributions.

``f_cost`` walks a concrete selection; ``e_cost`` is the exact expectation of
that walk under the per-layer width softmaxes and per-stage depth softmaxes
(a multiply-add counts as 2 FLOPs throughout). The expectation factorizes
because widths and depths are independent across layers/stages, but input
width and input spatial size of a layer are tracked jointly as a mixture so
the result matches brute-force enumeration exactly, mid-stage strides and
cross-stage depth truncation included.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import ArchParams, DerivedArch, depth_probs, width_probs
from .supernet import LayerSpec, SuperNetSpec


@dataclass
class CostSpec:
    """Target FLOP band (1 +- toleration) * target and the penalty weight."""

    target_flops: float
    toleration: float = 0.05
    lambda_cost: float = 2.0

    def __post_init__(self):
        if self.target_flops <= 0:
            raise ValueError("target_flops must be positive")
        if not 0.0 <= self.toleration <= 1.0:
            raise ValueError(f"toleration must lie in [0,1], got {self.toleration}")


class LayerCostTable:
    """Per-layer FLOP formulas for one supernet layout."""

    def __init__(self, spec: SuperNetSpec):
        self.spec = spec

    @staticmethod
    def out_hw(layer: LayerSpec, h: int, w: int) -> tuple[int, int]:
        return (
            (h + 2 * layer.padding - layer.kernel) // layer.stride + 1,
            (w + 2 * layer.padding - layer.kernel) // layer.stride + 1,
        )

    @staticmethod
    def conv_flops(layer: LayerSpec, c_in: int, c_out: int, h_in: int, w_in: int) -> float:
        ho, wo = LayerCostTable.out_hw(layer, h_in, w_in)
        return 2.0 * c_out * c_in * layer.kernel * layer.kernel * ho * wo

    def gap_flops(self, c: int, h: int, w: int) -> float:
        return float(c * h * w)

    def head_flops(self, c: int) -> float:
        return 2.0 * self.spec.num_classes * c


def max_arch(spec: SuperNetSpec) -> DerivedArch:
    """The unpruned selection: every layer at c_out, every stage at full depth."""
    return DerivedArch(widths=[l.c_out for l in spec.all_layers()],
                       depths=[len(stage) for stage in spec.stages])


def uniform_ratio_arch(spec: SuperNetSpec, ratio: float) -> DerivedArch:
    """Pre-defined pruning baseline: the same width ratio at every layer."""
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must lie in (0,1], got {ratio}")
    return DerivedArch(widths=[max(1, round(ratio * l.c_out)) for l in spec.all_layers()],
                       depths=[len(stage) for stage in spec.stages])


def f_cost(arch: DerivedArch, table: LayerCostTable) -> float:
    """Actual FLOPs of a derived architecture (executed layers + pool + head)."""
    spec = table.spec
    c, h, w = spec.in_channels, spec.image_size, spec.image_size
    total = 0.0
    flat = 0
    for si, stage in enumerate(spec.stages):
        depth = arch.depths[si]
        if not 1 <= depth <= len(stage):
            raise ValueError(f"stage {si}: depth {depth} out of range [1, {len(stage)}]")
        for li, layer in enumerate(stage):
            if li < depth:
                width = arch.widths[flat]
                total += table.conv_flops(layer, c, width, h, w)
                h, w = table.out_hw(layer, h, w)
                c = width
            flat += 1
    total += table.gap_flops(c, h, w)
    total += table.head_flops(c)
    return total


def _one_hot(n: int, i: int) -> Tensor:
    v = np.zeros(n)
    v[i] = 1.0
    return Tensor(v)


def _merge(entries: list[tuple[int, int, int, Tensor]]) -> list[tuple[int, int, int, Tensor]]:
    """Coalesce mixture entries sharing the same (channels, h, w) key."""
    merged: dict[tuple[int, int, int], Tensor] = {}
    for c, h, w, p in entries:
        key = (c, h, w)
        merged[key] = p if key not in merged else ad.add(merged[key], p)
    return [(c, h, w, p) for (c, h, w), p in merged.items()]


def e_cost(arch: ArchParams, table: LayerCostTable) -> Tensor:
    """Exact expected FLOPs under the architecture distributions, on the graph.

    Uses the noise-free softmax probabilities, never the sampled weights, so
    the value is a deterministic function of the logits.
    """
    spec = table.spec
    one = Tensor(np.ones(()))
    incoming: list[tuple[int, int, int, Tensor]] = [
        (spec.in_channels, spec.image_size, spec.image_size, one)
    ]
    total = None
    flat = 0
    for si, stage in enumerate(spec.stages):
        n_layers = len(stage)
        if arch.search_depth:
            q = depth_probs(arch.depths[si])
        else:
            q = _one_hot(n_layers, n_layers - 1)
        probs = []
        for layer in stage:
            dist = arch.widths[flat]
            if arch.search_width:
                probs.append(width_probs(dist))
            else:
                probs.append(_one_hot(len(dist.candidates), len(dist.candidates) - 1))
            flat += 1

        layer_inputs = incoming
        stage_out: list[tuple[int, int, int, Tensor]] = []
        for li, layer in enumerate(stage):
            exec_p = ad.take(q, list(range(li, n_layers))).sum()
            cands = arch.widths[flat - n_layers + li].candidates
            layer_cost = None
            next_inputs = []
            for c_in, h, w, p_in in layer_inputs:
                fvec = Tensor(np.array(
                    [table.conv_flops(layer, c_in, c_out, h, w) for c_out in cands]))
                term = ad.mul((probs[li] * fvec).sum(), p_in)
                layer_cost = term if layer_cost is None else ad.add(layer_cost, term)
                ho, wo = table.out_hw(layer, h, w)
                for j, c_out in enumerate(cands):
                    next_inputs.append((c_out, ho, wo, ad.mul(p_in, ad.take(probs[li], [j]).sum())))
            contrib = ad.mul(layer_cost, exec_p)
            total = contrib if total is None else ad.add(total, contrib)

            # next_inputs is the exact joint (width of layer li, spatial after
            # layers 0..li): it feeds layer li+1 and, weighted by the depth
            # probability q[li], the stage output mixture
            next_inputs = _merge(next_inputs)
            q_li = ad.take(q, [li]).sum()
            for c_out, h, w, p in next_inputs:
                stage_out.append((c_out, h, w, ad.mul(p, q_li)))
            layer_inputs = next_inputs
        incoming = _merge(stage_out)

    gap_head = None
    for c, h, w, p in incoming:
        fl = Tensor(np.asarray(table.gap_flops(c, h, w) + table.head_flops(c)))
        term = ad.mul(p, fl)
        gap_head = term if gap_head is None else ad.add(gap_head, term)
    return ad.add(total, gap_head)


def cost_loss(e: Tensor, f: float, spec: CostSpec) -> Tensor:
    """Piecewise band penalty: +log(E) above (1+t)R, -log(E) below (1-t)R,
    zero inside the closed band. The branch is chosen by the actual cost f;
    gradients flow only through log(E)."""
    hi = (1.0 + spec.toleration) * spec.target_flops
    lo = (1.0 - spec.toleration) * spec.target_flops
    if f > hi:
        return ad.log(e)
    if f < lo:
        return ad.neg(ad.log(e))
    return Tensor(np.zeros(()))


def val_loss(logits: Tensor, labels, e: Tensor, f: float, spec: CostSpec) -> Tensor:
    """Mean cross-entropy plus lambda_cost * cost_loss."""
    ce = ad.cross_entropy(logits, labels)
    if spec.lambda_cost == 0.0:
        return ce
    return ad.add(ce, cost_loss(e, f, spec) * spec.lambda_cost)
