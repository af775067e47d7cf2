"""Group-wise L1 pruning of learned group convolutions.

A learned group convolution (LGC) is a 1x1 convolution whose output
channels are split into ``G`` groups (output ``j`` belongs to group
``j % G``).  Pruning removes whole (group, input channel) connections: the
group stops reading that input channel.  Importance of a connection is the
L1 norm of the group's weights on that input, summed over the group's
output units.

Two pruning targets are supported:

``eq4``
    CondenseNeXt.  With cardinality ``C`` equal to the layer's output
    channels and pruning hyper-parameter ``p``, the layer prunes
    ``G * C_x = I*C - p*I`` connections in total, ``C_x`` per group.
``condense``
    CondenseNet baseline.  Each group keeps ``I / condensation_factor``
    inputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor

RULES = ("eq4", "condense")


@dataclass
class LgcState:
    layer_id: str
    groups: int
    in_channels: int
    out_channels: int
    pruning_p: int = 4
    condensation_factor: int = 4
    rule: str = "eq4"
    mask: np.ndarray | None = None
    stage_index: int = 0
    l1_scores: np.ndarray | None = None

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigError(f"unknown pruning rule {self.rule!r}")
        if self.groups < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("groups and channel counts must be positive")
        if self.condensation_factor < 1:
            raise ConfigError("condensation_factor must be positive")
        if self.mask is None:
            self.mask = np.ones((self.groups, self.in_channels), dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (self.groups, self.in_channels):
                raise ContractError(f"mask shape {self.mask.shape} != {(self.groups, self.in_channels)}")

    @property
    def cardinality(self) -> int:
        return self.out_channels

    @property
    def pruned_per_group(self) -> np.ndarray:
        return (~self.mask).sum(axis=1)

    @property
    def kept_per_group(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @property
    def final_stage(self) -> int:
        return max(self.condensation_factor - 1, 0)

    def copy(self) -> "LgcState":
        return dataclasses.replace(
            self,
            mask=self.mask.copy(),
            l1_scores=None if self.l1_scores is None else self.l1_scores.copy(),
        )


@dataclass(frozen=True)
class PruneTarget:
    """Pruning target of one layer.

    ``total`` and ``per_group_raw`` are the unclamped counts; ``per_group``
    is what the layer will actually prune after clamping to capacity.
    """

    total: int
    per_group_raw: tuple
    per_group: tuple
    saturated: bool

    @property
    def effective_total(self) -> int:
        return int(sum(self.per_group))


def _balanced(total: int, groups: int) -> list:
    base, rem = divmod(total, groups)
    return [base + (1 if g < rem else 0) for g in range(groups)]


def prune_target_total(state: LgcState) -> PruneTarget:
    i, g = state.in_channels, state.groups
    if state.rule == "condense":
        cf = state.condensation_factor
        per = (cf - 1) * (i // cf) if cf > 1 else 0
        per_group = tuple([per] * g)
        return PruneTarget(per * g, per_group, per_group, False)

    c, p = state.cardinality, state.pruning_p
    if p < 0:
        raise ConfigError("pruning hyper-parameter p must be non-negative")
    if p > c:
        raise ConfigError(f"p={p} exceeds cardinality C={c}")
    total = i * (c - p)
    raw = _balanced(total, g)
    # keep at least p connections per group
    cap = max(i - p, 0)
    clamped = tuple(min(r, cap) for r in raw)
    return PruneTarget(total, tuple(raw), clamped, any(r > cap for r in raw))


def _weights_array(weights) -> np.ndarray:
    return weights.data if isinstance(weights, Tensor) else np.asarray(weights)


def l1_group_scores(weights, state: LgcState) -> np.ndarray:
    """(G, I) matrix of summed |w| over each group's output units; pruned entries read 0."""
    w = _weights_array(weights)
    if w.shape != (state.out_channels, state.in_channels):
        raise ContractError(
            f"weights {w.shape} do not match layer {state.layer_id!r} "
            f"({state.out_channels}, {state.in_channels})"
        )
    aw = np.abs(w.astype(np.float64))
    scores = np.zeros((state.groups, state.in_channels))
    for g in range(state.groups):
        scores[g] = aw[g::state.groups].sum(axis=0)
    scores[~state.mask] = 0.0
    return scores


def select_prune(weights, state: LgcState, stage: int) -> LgcState:
    """Advance pruning to condensing ``stage`` (1-based) and return the new state.

    The cumulative pruned count per group becomes
    ``floor(stage * target / (condensation_factor - 1))``; the lowest-scoring
    kept inputs go first, ties broken by lower input index.  Weights of the
    newly pruned connections are zeroed in place when ``weights`` is a
    Tensor or writable array.
    """
    last = state.final_stage
    if not 1 <= stage <= last:
        raise ContractError(f"stage {stage} outside [1, {last}]")
    target = prune_target_total(state)
    scores = l1_group_scores(weights, state)
    new = state.copy()
    new.l1_scores = scores
    for g in range(state.groups):
        goal = (stage * target.per_group[g]) // last
        need = goal - int((~new.mask[g]).sum())
        if need <= 0:
            continue
        kept = np.flatnonzero(new.mask[g])
        order = kept[np.argsort(scores[g, kept], kind="stable")]
        new.mask[g, order[:need]] = False
    new.stage_index = max(state.stage_index, stage)

    w = _weights_array(weights)
    if w.flags.writeable:
        w *= expand_mask(new.mask, state.out_channels).astype(w.dtype)
    return new


def expand_mask(mask: np.ndarray, out_channels: int) -> np.ndarray:
    return mask[np.arange(out_channels) % mask.shape[0]]


def trigger_epochs(total_epochs: int, condensation_factor: int, fraction: float = 0.5) -> dict:
    """Map epoch -> condensing stage for the whole run.

    When two stages land on the same epoch only the later one is kept; the
    cumulative rule in ``select_prune`` makes that equivalent.
    """
    stages = max(condensation_factor - 1, 0)
    out = {}
    for k in range(1, stages + 1):
        out[int(np.floor(k * total_epochs * fraction / stages))] = k
    return out


def prune_schedule(epoch: int, total_epochs: int, condensation_factor: int,
                   fraction: float = 0.5) -> int | None:
    """Condensing stage to apply at the start of ``epoch``, or None.

    Stage ``k`` fires at ``floor(k * total * fraction / (factor - 1))``; with
    the default fraction 0.5 every stage lands in the first half of training
    and the second half keeps the masks fixed.
    """
    if not 0 <= epoch < total_epochs:
        return None
    return trigger_epochs(total_epochs, condensation_factor, fraction).get(epoch)
