"""Static multiply-accumulate and parameter accounting.

Counting rules per layer kind, with ``D`` the output side length:

- standard / grouped conv: ``H*H * (I/G) * O * D*D``
- depthwise conv: ``H*H * I * D*D``
- pointwise conv: ``I * O * D*D``
- learned group conv: kept (output, input) connections times ``D*D``
- linear: ``I * O`` (plus ``O`` bias parameters)
- batch norm: 2 parameters per channel, 2 MACs per normalized element

A batch norm feeding a learned group convolution normalizes only the
channels gathered by its groups once the layer is condensed, so its MACs
are counted over ``min(I, kept connections)`` channels.  Its parameters
are always counted over all channels.  Pooling MACs are opt-in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .arch import LayerGraph, LayerNode
from .compression import expand_mask, prune_target_total
from .errors import ContractError

MASK_MODES = ("final", "current")
WEIGHT_KINDS = ("conv", "conv_grouped", "conv_depthwise", "conv_pointwise", "learned_group_conv", "linear")


@dataclass(frozen=True)
class CostEntry:
    layer: str
    kind: str
    macs: int
    params: int
    saturated: bool = False


@dataclass
class CostReport:
    entries: list = field(default_factory=list)
    flop_convention: int = 1
    variant: str = ""

    @property
    def total_macs(self) -> int:
        return int(sum(e.macs for e in self.entries))

    @property
    def total_flops(self) -> int:
        return self.flop_convention * self.total_macs

    @property
    def total_params(self) -> int:
        return int(sum(e.params for e in self.entries))

    def subtotal(self, kinds=WEIGHT_KINDS) -> tuple:
        """(MACs, params) over the given layer kinds; defaults to weight layers only."""
        picked = [e for e in self.entries if e.kind in kinds]
        return int(sum(e.macs for e in picked)), int(sum(e.params for e in picked))

    def by_kind(self) -> dict:
        out = {}
        for e in self.entries:
            macs, params = out.get(e.kind, (0, 0))
            out[e.kind] = (macs + e.macs, params + e.params)
        return out

    @property
    def saturated_layers(self) -> list:
        return [e.layer for e in self.entries if e.saturated]

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "flop_convention": self.flop_convention,
            "total_flops": self.total_flops,
            "total_macs": self.total_macs,
            "total_params": self.total_params,
            "by_kind": {k: {"macs": m, "params": p} for k, (m, p) in self.by_kind().items()},
            "saturated_layers": self.saturated_layers,
            "layers": [
                {"layer": e.layer, "kind": e.kind, "macs": e.macs, "params": e.params,
                 "saturated": e.saturated}
                for e in self.entries
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self, per_layer: bool = False) -> str:
        lines = []
        if per_layer:
            lines.append(f"{'layer':<16} {'kind':<20} {'MACs':>12} {'params':>9}")
            for e in self.entries:
                flag = " *" if e.saturated else ""
                lines.append(f"{e.layer:<16} {e.kind:<20} {e.macs:>12,d} {e.params:>9,d}{flag}")
            lines.append("")
        lines.append(f"{'kind':<20} {'MACs':>12} {'params':>9}")
        for kind, (m, p) in sorted(self.by_kind().items()):
            lines.append(f"{kind:<20} {m:>12,d} {p:>9,d}")
        lines.append(
            f"total {self.variant}: {self.total_flops / 1e6:.2f}M FLOPs "
            f"(mac={self.flop_convention}), {self.total_params / 1e6:.4f}M params"
        )
        if self.saturated_layers:
            lines.append(f"{len(self.saturated_layers)} learned group conv layers hit the keep-p floor")
        return "\n".join(lines)


def _group_sizes(out_channels: int, groups: int) -> np.ndarray:
    return np.bincount(np.arange(out_channels) % groups, minlength=groups)


def _lgc_connections(node: LayerNode, masks: str) -> tuple:
    """(kept (output, input) connections, kept (group, input) pairs, saturated)."""
    st = node.lgc
    sizes = _group_sizes(st.out_channels, st.groups)
    if masks == "current":
        kept = st.mask.sum(axis=1)
        return int(expand_mask(st.mask, st.out_channels).sum()), int(kept.sum()), False
    target = prune_target_total(st)
    # never report more connections than the current mask holds
    kept = np.minimum(st.in_channels - np.asarray(target.per_group), st.mask.sum(axis=1))
    return int((kept * sizes).sum()), int(kept.sum()), target.saturated


def count_costs(graph: LayerGraph, flop_convention: int = 1, masks: str = "final",
                include_pooling: bool = False) -> CostReport:
    """Itemized cost of one forward pass of ``graph`` on a single image.

    ``masks="final"`` counts every learned group convolution at its fully
    condensed size; ``"current"`` uses the masks as they stand.
    """
    if flop_convention not in (1, 2):
        raise ContractError("flop_convention is 1 or 2")
    if masks not in MASK_MODES:
        raise ContractError(f"masks must be one of {MASK_MODES}")
    shapes = {graph.input_name: graph.spec.input_shape}
    for node in graph.nodes:
        shapes[node.name] = node.out_shape
    consumers = {}
    for node in graph.nodes:
        for src in node.inputs:
            consumers.setdefault(src, []).append(node)

    lgc_info = {n.name: _lgc_connections(n, masks) for n in graph.lgc_nodes()}
    report = CostReport(flop_convention=flop_convention, variant=graph.spec.variant)
    for node in graph.nodes:
        out = node.out_shape
        spatial = int(np.prod(out[1:])) if len(out) > 1 else 1
        in_shape = shapes[node.inputs[0]] if node.inputs else ()
        macs = params = 0
        saturated = False
        kind = node.kind
        if kind in ("conv", "conv_grouped", "conv_depthwise", "conv_pointwise"):
            cfg = node.cfg
            h2 = cfg.kernel_size ** 2
            if kind == "conv_depthwise":
                params = h2 * cfg.in_channels
            elif kind == "conv_pointwise":
                params = cfg.in_channels * cfg.out_channels
            else:
                params = h2 * cfg.group_in * cfg.out_channels
            macs = params * spatial
        elif kind == "learned_group_conv":
            conns, _, saturated = lgc_info[node.name]
            params = conns
            macs = conns * spatial
        elif kind in ("bn_act", "batch_norm"):
            channels = out[0]
            params = 2 * channels
            normed = channels
            for nxt in consumers.get(node.name, []):
                if nxt.kind == "learned_group_conv":
                    normed = min(channels, lgc_info[nxt.name][1])
            macs = 2 * normed * spatial
        elif kind == "linear":
            w = node.params["weight"]
            params = w.size + (node.params["bias"].size if "bias" in node.params else 0)
            macs = w.size
        elif kind == "avg_pool" and include_pooling:
            macs = int(np.prod(out)) * node.attrs["window"] ** 2
        elif kind == "global_avg_pool" and include_pooling:
            macs = int(np.prod(in_shape))
        report.entries.append(CostEntry(node.name, kind, int(macs), int(params), bool(saturated)))
    return report


def reduction(baseline: CostReport, proposed: CostReport) -> dict:
    """Percent reduction of FLOPs and parameters, rounded to two decimals."""
    return {
        "flops_pct": round(100.0 * (1.0 - proposed.total_flops / baseline.total_flops), 2),
        "params_pct": round(100.0 * (1.0 - proposed.total_params / baseline.total_params), 2),
    }
