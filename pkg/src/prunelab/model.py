"""A miniature decoder-only transformer with group-tagged parameters.

Blocks are pre-norm: LayerNorm -> causal attention -> residual,
LayerNorm -> MLP (gelu) -> residual, with a final LayerNorm before an
untied linear head.  Token embeddings are learned; positions use fixed
sinusoidal encodings so the model owns exactly one embedding table.

Every parameter carries one group tag (bias / ln / head / embedding /
linear-weight / adapter).  The prunable set is all linear weight
matrices inside the blocks; the embedding table and the head are never
pruned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .tensor import Parameter, Tensor

__all__ = [
    "GROUP_TAGS",
    "MiniGPTConfig",
    "MiniGPT",
    "init_model",
    "forward_loss",
    "perplexity",
    "param_groups",
    "parameter_count",
]

GROUP_TAGS = ("bias", "ln", "head", "embedding", "linear-weight", "adapter")


@dataclass
class MiniGPTConfig:
    vocab_size: int = 256
    context_length: int = 32
    d_model: int = 256
    n_heads: int = 8
    n_layers: int = 1
    d_ff: int = 1024
    seed: int = 0
    use_bias: bool = True

    def __post_init__(self):
        dims = (self.vocab_size, self.context_length, self.d_model, self.n_heads, self.n_layers, self.d_ff)
        if any(d <= 0 for d in dims):
            raise ConfigError(f"all model dimensions must be positive, got {self}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")


def _sinusoidal(context: int, d: int) -> np.ndarray:
    pos = np.arange(context, dtype=np.float64)[:, None]
    idx = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (idx // 2)) / d)
    enc = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return enc.astype(np.float32)


class MiniGPT:
    """Transformer with an ordered, tagged parameter table.

    ``params`` maps parameter name to :class:`Parameter` in declaration
    order.  ``prunable_layer_names`` lists the block linear weights in
    the order they are applied during a forward pass; ``block_of`` maps
    each of those names to its block index.
    """

    def __init__(self, config: MiniGPTConfig, params: Dict[str, Parameter]):
        self.config = config
        self.params = params
        self.adapters: Dict[str, object] = {}
        self._pos = _sinusoidal(config.context_length, config.d_model)
        self.prunable_layer_names: List[str] = []
        self.block_of: Dict[str, int] = {}
        for i in range(config.n_layers):
            for sub in ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc_in", "mlp.fc_out"):
                name = f"blocks.{i}.{sub}.w"
                self.prunable_layer_names.append(name)
                self.block_of[name] = i

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self):
        return self.params.items()

    def total_entries(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_trainable(self, names: Sequence[str]):
        wanted = set(names)
        for name, p in self.params.items():
            p.requires_grad = name in wanted

    def freeze_all(self):
        for p in self.params.values():
            p.requires_grad = False

    def clone(self) -> "MiniGPT":
        params = {}
        for name, p in self.params.items():
            q = Parameter(p.data.copy(), p.tag, trainable=p.requires_grad)
            q.mask = None if p.mask is None else p.mask.copy()
            params[name] = q
        return MiniGPT(self.config, params)

    # -- forward ------------------------------------------------------------

    def _apply_linear(self, prefix: str, x: Tensor, capture: Optional[dict]) -> Tensor:
        wname = prefix + ".w"
        if capture is not None and wname in capture:
            capture[wname].append(x.data)
        adapter = self.adapters.get(wname)
        b = self.params.get(prefix + ".b")
        if adapter is not None:
            y = adapter.forward(x)
            return T.add(y, b) if b is not None else y
        return T.linear(x, self.params[wname], b)

    def forward(self, tokens: np.ndarray, capture: Optional[dict] = None) -> Tensor:
        """Logits for a token matrix [B, T], flattened to (B*T, vocab)."""
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise DataError(f"expected a [B, T] token matrix, got shape {tokens.shape}")
        B, S = tokens.shape
        if S > cfg.context_length:
            raise DataError(f"sequence length {S} exceeds context_length {cfg.context_length}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise DataError("token id outside [0, vocab_size)")

        h = cfg.n_heads
        dh = cfg.d_model // h
        scale = Tensor(np.asarray(1.0 / math.sqrt(dh), dtype=np.float32))
        causal = np.triu(np.full((S, S), -1e30, dtype=np.float32), k=1)
        causal_t = Tensor(causal)

        x = T.embedding(self.params["wte"], tokens.reshape(-1))
        pos = np.tile(self._pos[:S], (B, 1))
        x = T.add(x, Tensor(pos))

        for i in range(cfg.n_layers):
            pre = f"blocks.{i}"
            a = T.layer_norm(x, self.params[f"{pre}.ln1.g"], self.params[f"{pre}.ln1.b"])
            q = self._apply_linear(f"{pre}.attn.q", a, capture)
            k = self._apply_linear(f"{pre}.attn.k", a, capture)
            v = self._apply_linear(f"{pre}.attn.v", a, capture)
            q = T.transpose(T.reshape(q, (B, S, h, dh)), (0, 2, 1, 3))
            k = T.transpose(T.reshape(k, (B, S, h, dh)), (0, 2, 3, 1))
            v = T.transpose(T.reshape(v, (B, S, h, dh)), (0, 2, 1, 3))
            att = T.mul(T.matmul(q, k), scale)
            att = T.add(att, causal_t)
            att = T.softmax(att)
            y = T.matmul(att, v)
            y = T.reshape(T.transpose(y, (0, 2, 1, 3)), (B * S, cfg.d_model))
            o = self._apply_linear(f"{pre}.attn.o", y, capture)
            x = T.add(x, o)

            m = T.layer_norm(x, self.params[f"{pre}.ln2.g"], self.params[f"{pre}.ln2.b"])
            m = self._apply_linear(f"{pre}.mlp.fc_in", m, capture)
            m = T.gelu(m)
            m = self._apply_linear(f"{pre}.mlp.fc_out", m, capture)
            x = T.add(x, m)

        x = T.layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"])
        return T.linear(x, self.params["head"])


def init_model(config: MiniGPTConfig, seed: Optional[int] = None) -> MiniGPT:
    """Deterministically initialized model; LN scales 1, biases 0."""
    if seed is None:
        seed = config.seed
    rng = np.random.default_rng(seed)
    d, ff, V = config.d_model, config.d_ff, config.vocab_size

    def normal(shape):
        return rng.normal(0.0, 0.02, size=shape).astype(np.float32)

    params: Dict[str, Parameter] = {}
    params["wte"] = Parameter(normal((V, d)), "embedding")

    def add_linear(prefix, n_out, n_in):
        params[prefix + ".w"] = Parameter(normal((n_out, n_in)), "linear-weight")
        if config.use_bias:
            params[prefix + ".b"] = Parameter(np.zeros(n_out, dtype=np.float32), "bias")

    def add_ln(prefix):
        params[prefix + ".g"] = Parameter(np.ones(d, dtype=np.float32), "ln")
        params[prefix + ".b"] = Parameter(np.zeros(d, dtype=np.float32), "ln")

    for i in range(config.n_layers):
        pre = f"blocks.{i}"
        add_ln(f"{pre}.ln1")
        for sub in ("attn.q", "attn.k", "attn.v", "attn.o"):
            add_linear(f"{pre}.{sub}", d, d)
        add_ln(f"{pre}.ln2")
        add_linear(f"{pre}.mlp.fc_in", ff, d)
        add_linear(f"{pre}.mlp.fc_out", d, ff)
    add_ln("ln_f")
    params["head"] = Parameter(normal((V, d)), "head")
    return MiniGPT(config, params)


def parameter_count(config: MiniGPTConfig) -> int:
    """Closed-form parameter count for a config (matches init_model).

    vocab*d (embedding) + vocab*d (head) + 2d (final LN), plus per
    block: 4d^2 + 2*d*d_ff for the six linear weights, 4d for the two
    LayerNorms, and (5d + d_ff) of biases when biases are enabled.
    """
    d, ff, V, L = config.d_model, config.d_ff, config.vocab_size, config.n_layers
    per_block = 4 * d * d + 2 * d * ff + 4 * d
    if config.use_bias:
        per_block += 4 * d + ff + d
    return 2 * V * d + 2 * d + L * per_block


def forward_loss(model: MiniGPT, batch: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy over all positions of [B, T] tokens."""
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] < 2:
        raise DataError(f"batch must be [B, T] with T >= 2, got shape {batch.shape}")
    inputs = batch[:, :-1]
    targets = batch[:, 1:]
    logits = model.forward(inputs)
    return T.cross_entropy(logits, targets.reshape(-1).astype(np.int64))


def perplexity(model: MiniGPT, corpus: np.ndarray, batch_windows: int = 64) -> float:
    """exp(mean next-token NLL) over non-overlapping context windows."""
    corpus = np.asarray(corpus)
    if corpus.ndim != 1 or corpus.size < 2:
        raise DataError("perplexity needs a flat token stream of length >= 2")
    C = model.config.context_length
    n_windows = (corpus.size - 1) // C
    if n_windows == 0:
        # Shorter than one full window: evaluate what is there.
        windows = corpus[None, :]
        n_windows = 1
    else:
        idx = np.arange(n_windows)[:, None] * C + np.arange(C + 1)[None, :]
        windows = corpus[idx]
    total_nll = 0.0
    total_pred = 0
    for start in range(0, n_windows, batch_windows):
        chunk = windows[start : start + batch_windows]
        loss = forward_loss(model, chunk)
        preds = chunk.shape[0] * (chunk.shape[1] - 1)
        total_nll += loss.item() * preds
        total_pred += preds
    return float(np.exp(total_nll / total_pred))


def param_groups(model: MiniGPT, selector):
    """Parameters whose tag is in ``selector`` and their count fraction.

    Returns ``(named, fraction)`` where ``named`` is the ordered list of
    (name, Parameter) pairs selected.
    """
    selector = set(selector)
    if not selector:
        raise ConfigError("selector must name at least one parameter group")
    unknown = selector - set(GROUP_TAGS)
    if unknown:
        raise ConfigError(f"unknown parameter group(s): {sorted(unknown)}")
    named = [(n, p) for n, p in model.params.items() if p.tag in selector]
    selected = sum(p.size for _, p in named)
    return named, selected / model.total_entries()
