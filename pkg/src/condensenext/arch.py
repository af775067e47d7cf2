"""CondenseNet baseline and CondenseNeXt model graphs.

Both networks share the DenseNet macro-topology used for CIFAR: a 3x3 stem
convolution, stages of densely connected blocks separated by 2x2 average
pooling, and a BN -> activation -> global pool -> dropout -> linear head.
Each block consumes the concatenation of every earlier feature map in its
stage and appends ``growth`` new channels.

Baseline block:   BN-ReLU-LGC(1x1) -> BN-ReLU-grouped 3x3
CondenseNeXt:     BN-ReLU6-LGC(1x1) -> BN-ReLU6-depthwise 3x3 -> BN-ReLU6-pointwise 1x1
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ops
from .compression import LgcState, expand_mask
from .errors import ConfigError, ShapeError, TrainingError
from .ops import BatchNormState, ConvConfig
from .tensor import Tensor, concat

VARIANTS = ("condensenet_baseline", "condensenext")
_VARIANT_ALIASES = {"baseline": "condensenet_baseline", "condensenet": "condensenet_baseline"}


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "condensenext"
    stages: tuple = (14, 14, 14)
    growth: tuple = (8, 16, 32)
    groups: int = 4
    condensation_factor: int = 4
    pruning_p: int = 4
    num_classes: int = 10
    input_shape: tuple = (3, 32, 32)
    init_channels: int | None = None
    bottleneck: int = 4
    rule: str | None = None

    def __post_init__(self):
        variant = _VARIANT_ALIASES.get(self.variant, self.variant)
        object.__setattr__(self, "variant", variant)
        object.__setattr__(self, "stages", tuple(int(s) for s in self.stages))
        object.__setattr__(self, "growth", tuple(int(g) for g in self.growth))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if not self.stages or len(self.stages) != len(self.growth):
            raise ConfigError("stages and growth must be non-empty and of equal length")
        if any(s < 1 for s in self.stages) or any(g < 1 for g in self.growth):
            raise ConfigError("block counts and growth rates must be positive")
        if self.groups < 1 or self.condensation_factor < 1 or self.bottleneck < 1:
            raise ConfigError("groups, condensation_factor and bottleneck must be positive")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.pruning_p < 0:
            raise ConfigError("p must be non-negative")
        if len(self.input_shape) != 3:
            raise ConfigError("input_shape is (channels, height, width)")
        if self.rule is not None and self.rule not in ("eq4", "condense"):
            raise ConfigError(f"unknown pruning rule {self.rule!r}")
        for k in self.growth:
            if k % self.groups or (self.bottleneck * k) % self.groups:
                raise ConfigError(f"growth {k} (bottleneck {self.bottleneck * k}) not divisible by G={self.groups}")
        if self.stem_channels % self.groups:
            raise ConfigError(f"stem channels {self.stem_channels} not divisible by G={self.groups}")
        if self.variant == "condensenext" and self.effective_rule == "eq4":
            for k in self.growth:
                if self.pruning_p > self.bottleneck * k:
                    raise ConfigError(f"p={self.pruning_p} exceeds cardinality {self.bottleneck * k}")
        d = self.input_shape[1]
        for _ in range(len(self.stages) - 1):
            d //= 2
            if d < 1:
                raise ConfigError("input too small for the number of stages")

    @property
    def stem_channels(self) -> int:
        return self.init_channels if self.init_channels is not None else 2 * self.growth[0]

    @property
    def effective_rule(self) -> str:
        if self.rule is not None:
            return self.rule
        return "eq4" if self.variant == "condensenext" else "condense"

    def stage_input_channels(self) -> list:
        out, c = [], self.stem_channels
        for n, k in zip(self.stages, self.growth):
            out.append(c)
            c += n * k
        return out

    @property
    def final_channels(self) -> int:
        return self.stem_channels + sum(n * k for n, k in zip(self.stages, self.growth))

    # plain-text key = value form -------------------------------------------
    def to_text(self) -> str:
        lines = [
            f"variant = {self.variant}",
            f"stages = {','.join(map(str, self.stages))}",
            f"growth = {','.join(map(str, self.growth))}",
            f"groups = {self.groups}",
            f"condensation_factor = {self.condensation_factor}",
            f"p = {self.pruning_p}",
            f"classes = {self.num_classes}",
            f"input = {','.join(map(str, self.input_shape))}",
            f"bottleneck = {self.bottleneck}",
        ]
        if self.init_channels is not None:
            lines.append(f"init_channels = {self.init_channels}")
        if self.rule is not None:
            lines.append(f"rule = {self.rule}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ModelSpec":
        kv = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            kv[key] = value
        fields_ = {}
        ints = lambda v: tuple(int(s) for s in v.replace(" ", "").split(",") if s)  # noqa: E731
        mapping = {
            "variant": ("variant", str),
            "stages": ("stages", ints),
            "growth": ("growth", ints),
            "groups": ("groups", int),
            "condensation_factor": ("condensation_factor", int),
            "p": ("pruning_p", int),
            "classes": ("num_classes", int),
            "input": ("input_shape", ints),
            "init_channels": ("init_channels", int),
            "bottleneck": ("bottleneck", int),
            "rule": ("rule", str),
        }
        for key, value in kv.items():
            if key not in mapping:
                raise ConfigError(f"unknown configuration key {key!r}")
            name, conv = mapping[key]
            try:
                fields_[name] = conv(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
        fields_.update(overrides)
        return cls(**fields_)

    @classmethod
    def from_file(cls, path, **overrides) -> "ModelSpec":
        return cls.from_text(Path(path).read_text(), **overrides)


def default_spec(variant: str = "condensenext", **overrides) -> ModelSpec:
    """The CondenseNet-86 CIFAR configuration (3 x 14 blocks, growth 8/16/32, G=4)."""
    return ModelSpec(variant=variant, **overrides)


# --------------------------------------------------------------------------
# graph
# --------------------------------------------------------------------------

@dataclass
class LayerNode:
    name: str
    kind: str
    inputs: list
    out_shape: tuple
    cfg: ConvConfig | None = None
    params: dict = field(default_factory=dict)
    bn: BatchNormState | None = None
    lgc: LgcState | None = None
    attrs: dict = field(default_factory=dict)


@dataclass
class LayerGraph:
    spec: ModelSpec
    nodes: list
    input_name: str = "input"
    dropout_rate: float = 0.1
    lgc_gather: bool | None = None  # None picks per layer from mask density

    def __post_init__(self):
        self._index = {n.name: n for n in self.nodes}
        last = {}
        for pos, node in enumerate(self.nodes):
            for src in node.inputs:
                last[src] = pos
        self._last_use = last

    def node(self, name: str) -> LayerNode:
        return self._index[name]

    @property
    def output_name(self) -> str:
        return self.nodes[-1].name

    def parameters(self) -> list:
        """(name, Tensor) pairs in declaration order."""
        out = []
        for node in self.nodes:
            for key, t in node.params.items():
                out.append((f"{node.name}.{key}", t))
            if node.bn is not None:
                out.append((f"{node.name}.weight", node.bn.gamma))
                out.append((f"{node.name}.bias", node.bn.beta))
        return out

    def buffers(self) -> list:
        out = []
        for node in self.nodes:
            if node.bn is not None:
                out.append((f"{node.name}.running_mean", node.bn.running_mean))
                out.append((f"{node.name}.running_var", node.bn.running_var))
        return out

    def lgc_nodes(self) -> list:
        return [n for n in self.nodes if n.lgc is not None]

    def param_masks(self) -> dict:
        """Map id(weight tensor) -> (O, I) keep-mask for every learned group convolution."""
        return {
            id(n.params["weight"]): expand_mask(n.lgc.mask, n.lgc.out_channels)
            for n in self.lgc_nodes()
        }

    def zero_grad(self):
        for _, t in self.parameters():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.parameters())


def _conv_weight(rng, shape, fan_out) -> Tensor:
    std = math.sqrt(2.0 / fan_out)
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True)


class _Builder:
    def __init__(self, spec: ModelSpec, seed: int):
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self.nodes = []

    def add(self, name, kind, inputs, out_shape, **kw):
        node = LayerNode(name, kind, list(inputs), tuple(out_shape), **kw)
        self.nodes.append(node)
        return name

    def bn_act(self, name, src, shape):
        """Batch norm followed by the variant's activation, as one fused node."""
        act = "relu6" if self.spec.variant == "condensenext" else "relu"
        return self.add(name, "bn_act", [src], shape, bn=BatchNormState.create(shape[0], name),
                        attrs={"act": act})

    def conv(self, name, src, cfg: ConvConfig, shape_in):
        c, h, w = shape_in
        out = (cfg.out_channels, cfg.output_size(h), cfg.output_size(w))
        if cfg.mode == "depthwise":
            fan_out = cfg.kernel_size ** 2
        elif cfg.mode == "pointwise":
            fan_out = cfg.out_channels
        else:
            fan_out = cfg.group_out * cfg.kernel_size ** 2
        weight = _conv_weight(self.rng, cfg.weight_shape, fan_out)
        weight.name = f"{name}.weight"
        kind = {"standard": "conv", "grouped": "conv_grouped", "depthwise": "conv_depthwise",
                "pointwise": "conv_pointwise"}[cfg.mode]
        return self.add(name, kind, [src], out, cfg=cfg, params={"weight": weight}), out

    def lgc(self, name, src, shape_in, out_channels):
        spec = self.spec
        c, h, w = shape_in
        weight = _conv_weight(self.rng, (out_channels, c), out_channels)
        weight.name = f"{name}.weight"
        state = LgcState(
            layer_id=name, groups=spec.groups, in_channels=c, out_channels=out_channels,
            pruning_p=spec.pruning_p, condensation_factor=spec.condensation_factor,
            rule=spec.effective_rule,
        )
        cfg = ConvConfig(1, c, out_channels, groups=1, mode="pointwise")
        out = (out_channels, h, w)
        return self.add(name, "learned_group_conv", [src], out, cfg=cfg,
                        params={"weight": weight}, lgc=state), out


def _build(spec: ModelSpec, seed: int) -> LayerGraph:
    b = _Builder(spec, seed)
    cin, hh, ww = spec.input_shape
    stem_cfg = ConvConfig(3, cin, spec.stem_channels, padding=1)
    feat, shape = b.conv("stem.conv", "input", stem_cfg, spec.input_shape)
    for s, (blocks, k) in enumerate(zip(spec.stages, spec.growth)):
        if s > 0:
            c, h, w = shape
            shape = (c, h // 2, w // 2)
            feat = b.add(f"t{s}.pool", "avg_pool", [feat], shape, attrs={"window": 2, "stride": 2})
        for j in range(blocks):
            pre = f"s{s}.b{j}"
            c, h, w = shape
            width = spec.bottleneck * k
            x = b.bn_act(f"{pre}.bn1", feat, shape)
            x, mid = b.lgc(f"{pre}.lgc", x, shape, width)
            x = b.bn_act(f"{pre}.bn2", x, mid)
            if spec.variant == "condensenext":
                dw = ConvConfig(3, width, width, groups=width, padding=1, mode="depthwise")
                x, mid = b.conv(f"{pre}.dw", x, dw, mid)
                x = b.bn_act(f"{pre}.bn3", x, mid)
                pw = ConvConfig(1, width, k, mode="pointwise")
                x, new = b.conv(f"{pre}.pw", x, pw, mid)
            else:
                gc = ConvConfig(3, width, k, groups=spec.groups, padding=1, mode="grouped")
                x, new = b.conv(f"{pre}.gconv", x, gc, mid)
            shape = (c + k, h, w)
            feat = b.add(f"{pre}.cat", "concat", [feat, x], shape)
    c, h, w = shape
    x = b.bn_act("head.bn", feat, shape)
    x = b.add("head.pool", "global_avg_pool", [x], (c,))
    x = b.add("head.dropout", "dropout", [x], (c,))
    bound = 1.0 / math.sqrt(c)
    wt = Tensor(b.rng.uniform(-bound, bound, (spec.num_classes, c)).astype(np.float32),
                requires_grad=True, name="head.fc.weight")
    bt = Tensor(b.rng.uniform(-bound, bound, spec.num_classes).astype(np.float32),
                requires_grad=True, name="head.fc.bias")
    b.add("head.fc", "linear", [x], (spec.num_classes,), params={"weight": wt, "bias": bt})
    return LayerGraph(spec, b.nodes)


def build_baseline(spec: ModelSpec, seed: int = 0) -> LayerGraph:
    """CondenseNet: learned group 1x1 convolutions followed by grouped 3x3 convolutions."""
    if spec.variant != "condensenet_baseline":
        raise ConfigError(f"build_baseline needs variant condensenet_baseline, got {spec.variant}")
    return _build(spec, seed)


def build_condensenext(spec: ModelSpec, seed: int = 0) -> LayerGraph:
    """CondenseNeXt: the grouped 3x3 becomes a depthwise 3x3 + pointwise 1x1 pair."""
    if spec.variant != "condensenext":
        raise ConfigError(f"build_condensenext needs variant condensenext, got {spec.variant}")
    return _build(spec, seed)


def build(spec: ModelSpec, seed: int = 0) -> LayerGraph:
    return _build(spec, seed)


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------

def _run_node(node: LayerNode, args: list, training: bool, graph: LayerGraph, seed):
    kind = node.kind
    if kind == "conv":
        return ops.conv2d_standard(args[0], node.params["weight"], node.cfg)
    if kind == "conv_grouped":
        return ops.conv2d_grouped(args[0], node.params["weight"], node.cfg)
    if kind == "conv_depthwise":
        return ops.conv2d_depthwise(args[0], node.params["weight"], node.cfg)
    if kind == "conv_pointwise":
        return ops.conv2d_pointwise(args[0], node.params["weight"])
    if kind == "learned_group_conv":
        return ops.learned_group_conv(args[0], node.params["weight"], node.lgc.mask, graph.lgc_gather)
    if kind == "bn_act":
        return ops.bn_act(args[0], node.bn, training, node.attrs["act"])
    if kind == "batch_norm":
        return ops.batch_norm(args[0], node.bn, training)
    if kind == "relu6":
        return ops.relu6(args[0])
    if kind == "relu":
        return ops.relu(args[0])
    if kind == "concat":
        return concat(args, axis=1)
    if kind == "avg_pool":
        return ops.avg_pool(args[0], node.attrs["window"], node.attrs["stride"])
    if kind == "global_avg_pool":
        return ops.global_avg_pool(args[0])
    if kind == "dropout":
        return ops.dropout(args[0], graph.dropout_rate, training, seed)
    if kind == "linear":
        return ops.linear(args[0], node.params["weight"], node.params.get("bias"))
    raise ConfigError(f"unknown layer kind {kind!r}")


def forward(graph: LayerGraph, x: Tensor, training: bool = False, seed: int | None = None,
            check_finite: bool = False) -> Tensor:
    """Evaluate the graph on a (batch, C, H, W) input and return (batch, classes) logits.

    ``seed`` drives dropout in training mode.  With ``check_finite`` the first
    layer emitting a NaN or infinity raises ``TrainingError`` naming it.
    Intermediate activations are dropped once their last consumer has run;
    backward rules keep only the arrays they need.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.data.ndim != 4 or tuple(x.shape[1:]) != graph.spec.input_shape:
        raise ShapeError(f"input {x.shape} does not match (N,) + {graph.spec.input_shape}")
    values = {graph.input_name: x}
    last = graph._last_use
    for pos, node in enumerate(graph.nodes):
        out = _run_node(node, [values[s] for s in node.inputs], training, graph, seed)
        if check_finite and not np.all(np.isfinite(out.data)):
            raise TrainingError(f"non-finite values first produced by layer {node.name!r} ({node.kind})")
        values[node.name] = out
        for src in node.inputs:
            if last.get(src) == pos and src != graph.input_name:
                done = values.pop(src)
                if done is not out:  # identity ops hand their input through
                    done.data = None
    return values[graph.output_name]
