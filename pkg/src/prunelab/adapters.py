"""Low-rank adapter reparametrizations of frozen linear layers.

Four kinds are supported.  ``lora`` is the classic additive update
y = Wx + (alpha/r) * B(Ax); merging it into a pruned W densifies the
sparsity pattern, so it is the one non-mergeable kind.  ``lora_prune``
trains exactly like ``lora`` but masks BA at merge time, which changes
the function the network computes.  ``masked_lora`` applies the mask
during the forward pass, y = (W + (alpha/r) * (M o BA)) x, so merging
is lossless and sparsity-preserving.  ``mult_lora`` is multiplicative,
y = [(BA) o W] x, initialized so BA is the all-ones matrix; zeros of W
stay zero under the merge W <- (BA) o W.

Additive kinds zero-initialize B (the attach identity is exact);
``mult_lora`` uses B = A = ones/sqrt(r).  No rescale is applied to the
multiplicative kind: any factor other than one would break its attach
identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .sparsity import SparsityMask
from .tensor import Parameter, Tensor

__all__ = ["ADAPTER_KINDS", "AdapterPair", "MergeReport", "attach", "merge"]

ADAPTER_KINDS = ("lora", "lora_prune", "mult_lora", "masked_lora")
_NEEDS_MASK = {"lora_prune", "masked_lora"}

# The variant (ones + BA) o W parametrization of the multiplicative kind;
# kept selectable but non-default.
MULT_VARIANT_OFFSET = "offset_ones"
MULT_VARIANT_DIRECT = "direct"


@dataclass
class MergeReport:
    kind: str
    mergeable: bool
    support_before: np.ndarray
    support_after: np.ndarray
    max_forward_deviation: float

    @property
    def support_preserved(self) -> bool:
        return bool(np.all(self.support_after <= self.support_before))


@dataclass
class AdapterPair:
    """Low-rank factors bound to one frozen weight matrix."""

    kind: str
    weight: Parameter              # frozen base W, shape (n, m)
    b: Parameter                   # (n, r)
    a: Parameter                   # (r, m)
    rank: int
    alpha: float
    owner: str = ""
    mask: Optional[SparsityMask] = None
    mult_variant: str = MULT_VARIANT_DIRECT
    _mask_f: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def trainable_entries(self) -> int:
        return self.b.size + self.a.size

    def _mask_tensor(self) -> Tensor:
        if self._mask_f is None:
            self._mask_f = self.mask.astype(self.weight.data.dtype)
        return Tensor(self._mask_f)

    def effective_weight(self) -> Tensor:
        """The merged-form weight as a graph node (one add per forward)."""
        ba = T.matmul(self.b, self.a)
        if self.kind == "masked_lora":
            delta = T.mul(self._mask_tensor(), T.mul(ba, self.scale))
            return T.add(self.weight, delta)
        if self.kind == "mult_lora":
            if self.mult_variant == MULT_VARIANT_OFFSET:
                ba = T.add(ba, Tensor(np.ones_like(self.weight.data)))
            return T.mul(ba, self.weight)
        raise ContractError(f"kind {self.kind} has no fused effective weight")

    def forward(self, x: Tensor) -> Tensor:
        """Adapter-reparametrized linear map for row-major inputs ``x``."""
        if x.data.ndim != 2 or x.data.shape[1] != self.weight.data.shape[1]:
            raise DimensionError(
                f"adapter input shape {x.data.shape} incompatible with weight {self.weight.data.shape}"
            )
        if self.kind in ("lora", "lora_prune"):
            # Factor-wise: B(Ax) without ever materializing BA.
            base = T.linear(x, self.weight)
            down = T.linear(x, self.a)
            up = T.linear(down, self.b)
            return T.add(base, T.mul(up, self.scale))
        return T.linear(x, self.effective_weight())


def attach(
    weight: Parameter,
    kind: str,
    rank: int = 16,
    alpha: float = 32.0,
    rng: Optional[np.random.Generator] = None,
    mask: Optional[SparsityMask] = None,
    owner: str = "",
    mult_variant: str = MULT_VARIANT_DIRECT,
) -> AdapterPair:
    """Create an adapter pair whose attach leaves the layer function unchanged."""
    if kind not in ADAPTER_KINDS:
        raise ConfigError(f"unknown adapter kind {kind!r}; expected one of {ADAPTER_KINDS}")
    if weight.data.ndim != 2:
        raise ConfigError("adapters attach to 2-D weights")
    if weight.requires_grad:
        raise ContractError("base weight must be frozen before attaching an adapter")
    n, m = weight.data.shape
    if not 1 <= rank <= min(n, m):
        raise ConfigError(f"rank must lie in [1, {min(n, m)}], got {rank}")
    needs = kind in _NEEDS_MASK
    if needs and mask is None:
        raise ConfigError(f"kind {kind!r} requires the weight's sparsity mask")
    if kind == "lora" and mask is not None:
        raise ConfigError("plain lora takes no mask")
    if mask is not None and mask.shape != weight.data.shape:
        raise DimensionError(f"mask shape {mask.shape} != weight shape {weight.data.shape}")

    dtype = weight.data.dtype
    if kind == "mult_lora" and mult_variant == MULT_VARIANT_DIRECT:
        fill = 1.0 / np.sqrt(rank)
        b0 = np.full((n, rank), fill, dtype=dtype)
        a0 = np.full((rank, m), fill, dtype=dtype)
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        b0 = np.zeros((n, rank), dtype=dtype)
        a0 = rng.normal(0.0, 0.02, size=(rank, m)).astype(dtype)
    return AdapterPair(
        kind=kind,
        weight=weight,
        b=Parameter(b0, "adapter"),
        a=Parameter(a0, "adapter"),
        rank=rank,
        alpha=alpha,
        owner=owner,
        mask=mask if kind != "lora" else None,
        mult_variant=mult_variant,
    )


def _max_relative_deviation(pair_forward, merged_w: np.ndarray, probes: np.ndarray) -> float:
    worst = 0.0
    for x in probes:
        y_adapter = pair_forward(Tensor(x)).data
        y_merged = x @ merged_w.T
        denom = max(float(np.abs(y_adapter).max()), 1e-12)
        worst = max(worst, float(np.abs(y_adapter - y_merged).max()) / denom)
    return worst


def merge(pair: AdapterPair, n_probes: int = 10, probe_seed: int = 0):
    """Fold the adapter into a plain weight matrix.

    Returns ``(merged_weights, MergeReport)``.  The report records the
    worst relative deviation between the adapter forward and the merged
    plain-linear forward on random probe inputs; for ``lora_prune`` this
    deviation is the pruning-the-update penalty, for the sparsity-
    preserving kinds it is float noise.
    """
    w = pair.weight.data
    scale = pair.scale
    ba = pair.b.data @ pair.a.data
    if pair.kind == "lora":
        merged = w + scale * ba
        mergeable = False
    elif pair.kind in ("lora_prune", "masked_lora"):
        mvals = pair.mask.astype(w.dtype)
        merged = w + scale * (mvals * ba)
        mergeable = True
    else:  # mult_lora
        if pair.mult_variant == MULT_VARIANT_OFFSET:
            ba = ba + 1.0
        merged = ba * w
        mergeable = True

    rng = np.random.default_rng(probe_seed)
    probes = rng.normal(size=(n_probes, 3, w.shape[1])).astype(w.dtype)
    dev = _max_relative_deviation(pair.forward, merged, probes)
    report = MergeReport(
        kind=pair.kind,
        mergeable=mergeable,
        support_before=(w != 0),
        support_after=(merged != 0),
        max_forward_deviation=dev,
    )
    return merged, report
