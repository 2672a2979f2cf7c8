"""Decoder-only transformer with named parameters and freeze policies.

GPT-2-family shape: learned absolute position embeddings, pre-LN blocks,
fused QKV projection, tanh-GELU MLP, final layer norm, linear LM head.
Parameter names are canonical and stable (``block.3.attn.w_qkv``,
``final_ln.gain``, ``lm_head.w``); checkpoints and freeze policies key on
them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tape, TensorNode
from .errors import ConfigError, DataError, PolicyError

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_len: int
    d_model: int
    n_heads: int
    n_layers: int
    tie_embeddings: bool = False
    eps_ln: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "context_len", "d_model", "n_heads", "n_layers"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"ModelConfig.{name} must be a positive integer, got {v!r}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.n_layers < 2:
            # the freeze policy talks about the final two blocks; L=1 has no
            # meaningful split between frozen and trainable depth
            raise ConfigError(f"n_layers must be >= 2, got {self.n_layers}")
        if self.eps_ln <= 0:
            raise ConfigError(f"eps_ln must be positive, got {self.eps_ln}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class FreezePolicy:
    """Which parameters a phase may update."""

    variant: str
    k: int = 2

    _VARIANTS = ("all_trainable", "last_k_blocks_plus_head")

    def __post_init__(self):
        if self.variant not in self._VARIANTS:
            raise ConfigError(f"unknown freeze policy {self.variant!r}; one of {self._VARIANTS}")
        if self.variant == "last_k_blocks_plus_head" and self.k < 1:
            raise ConfigError(f"freeze policy k must be >= 1, got {self.k}")

    @classmethod
    def all_trainable(cls) -> "FreezePolicy":
        return cls("all_trainable")

    @classmethod
    def last_k_blocks_plus_head(cls, k: int = 2) -> "FreezePolicy":
        return cls("last_k_blocks_plus_head", k)


class TransformerModel:
    """Holds the parameter map plus a log of fine-tuning phases applied."""

    def __init__(self, config: ModelConfig, params: dict[str, TensorNode],
                 phases_done: list[str] | None = None):
        self.config = config
        self.params = params
        self.phases_done: list[str] = list(phases_done or [])

    @property
    def dtype(self):
        return self.params["tok_emb.w"].dtype

    def parameter_names(self) -> list[str]:
        return list(self.params)

    def param_count(self) -> int:
        return sum(p.values.size for p in self.params.values())

    # ----- forward ---------------------------------------------------------

    def forward(self, tokens: np.ndarray, tape: Tape | None = None) -> TensorNode:
        """Next-token logits, shape (B, T, V). Strictly causal."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise DataError(f"forward expects a B x T token matrix, got shape {tokens.shape}")
        b, t = tokens.shape
        cfg = self.config
        if t == 0 or t > cfg.context_len:
            raise DataError(f"sequence length {t} outside [1, {cfg.context_len}]")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise DataError(
                f"token ids outside [0, {cfg.vocab_size}): "
                f"min={tokens.min()}, max={tokens.max()}"
            )
        p = self.params
        tok = ag.embedding(p["tok_emb.w"], tokens, tape)
        pos = ag.embedding(p["pos_emb.w"], np.arange(t), tape)
        x = ag.add(tok, pos, tape)  # (B,T,d), positions broadcast over batch
        for i in range(cfg.n_layers):
            x = self._block(x, i, b, t, tape)
        x = ag.layer_norm(x, p["final_ln.gain"], p["final_ln.bias"], cfg.eps_ln, tape)
        flat = ag.reshape(x, (b * t, cfg.d_model), tape)
        if cfg.tie_embeddings:
            head = ag.transpose(p["tok_emb.w"], (1, 0), tape)
        else:
            head = p["lm_head.w"]
        logits = ag.matmul(flat, head, tape)
        return ag.reshape(logits, (b, t, cfg.vocab_size), tape)

    def _linear(self, x, w_name: str, b_name: str | None, b: int, t: int,
                tape: Tape | None):
        d_in = x.shape[-1]
        d_out = self.params[w_name].shape[-1]
        h = ag.reshape(x, (b * t, d_in), tape)
        h = ag.matmul(h, self.params[w_name], tape)
        if b_name is not None:
            h = ag.add(h, self.params[b_name], tape)
        return ag.reshape(h, (b, t, d_out), tape)

    def _block(self, x, i: int, b: int, t: int, tape: Tape | None):
        cfg = self.config
        p = self.params
        pre = f"block.{i}"
        h = ag.layer_norm(x, p[f"{pre}.ln1.gain"], p[f"{pre}.ln1.bias"], cfg.eps_ln, tape)
        qkv = self._linear(h, f"{pre}.attn.w_qkv", f"{pre}.attn.b_qkv", b, t, tape)
        d = cfg.d_model
        heads = []
        for part, start in (("q", 0), ("k", d), ("v", 2 * d)):
            s = ag.slice_lastdim(qkv, start, start + d, tape)
            s = ag.reshape(s, (b, t, cfg.n_heads, cfg.head_dim), tape)
            heads.append(ag.transpose(s, (0, 2, 1, 3), tape))
        att = ag.causal_attention(heads[0], heads[1], heads[2], tape)
        att = ag.transpose(att, (0, 2, 1, 3), tape)
        att = ag.reshape(att, (b, t, d), tape)
        att = self._linear(att, f"{pre}.attn.w_out", f"{pre}.attn.b_out", b, t, tape)
        x = ag.add(x, att, tape)
        h = ag.layer_norm(x, p[f"{pre}.ln2.gain"], p[f"{pre}.ln2.bias"], cfg.eps_ln, tape)
        h = self._linear(h, f"{pre}.mlp.w_in", f"{pre}.mlp.b_in", b, t, tape)
        h = ag.gelu(h, tape)
        h = self._linear(h, f"{pre}.mlp.w_out", f"{pre}.mlp.b_out", b, t, tape)
        return ag.add(x, h, tape)

    # ----- decoding --------------------------------------------------------

    def greedy_generate(self, prompt, max_new: int, eos_id: int | None = None) -> list[int]:
        """Append argmax tokens until max_new or eos_id. Deterministic."""
        out = [int(x) for x in prompt]
        if not out:
            raise DataError("greedy_generate needs a non-empty prompt")
        if max_new < 0:
            raise DataError(f"max_new must be >= 0, got {max_new}")
        if len(out) + max_new > self.config.context_len:
            raise DataError(
                f"prompt ({len(out)}) + max_new ({max_new}) exceeds "
                f"context_len ({self.config.context_len})"
            )
        for _ in range(max_new):
            logits = self.forward(np.asarray([out], dtype=np.int64)).values
            nxt = int(np.argmax(logits[0, -1]))
            out.append(nxt)
            if eos_id is not None and nxt == eos_id:
                break
        return out


def init_model(config: ModelConfig, dtype=np.float32) -> TransformerModel:
    """Seeded Gaussian init (std 0.02); LN gains 1, biases 0, other biases 0."""
    rng = np.random.default_rng(config.seed)
    d, v, ctx = config.d_model, config.vocab_size, config.context_len

    def gauss(*shape):
        return rng.normal(0.0, INIT_STD, size=shape).astype(dtype)

    def zeros(*shape):
        return np.zeros(shape, dtype=dtype)

    def ones(*shape):
        return np.ones(shape, dtype=dtype)

    spec: list[tuple[str, np.ndarray]] = [
        ("tok_emb.w", gauss(v, d)),
        ("pos_emb.w", gauss(ctx, d)),
    ]
    for i in range(config.n_layers):
        pre = f"block.{i}"
        spec += [
            (f"{pre}.ln1.gain", ones(d)),
            (f"{pre}.ln1.bias", zeros(d)),
            (f"{pre}.attn.w_qkv", gauss(d, 3 * d)),
            (f"{pre}.attn.b_qkv", zeros(3 * d)),
            (f"{pre}.attn.w_out", gauss(d, d)),
            (f"{pre}.attn.b_out", zeros(d)),
            (f"{pre}.ln2.gain", ones(d)),
            (f"{pre}.ln2.bias", zeros(d)),
            (f"{pre}.mlp.w_in", gauss(d, 4 * d)),
            (f"{pre}.mlp.b_in", zeros(4 * d)),
            (f"{pre}.mlp.w_out", gauss(4 * d, d)),
            (f"{pre}.mlp.b_out", zeros(d)),
        ]
    spec += [
        ("final_ln.gain", ones(d)),
        ("final_ln.bias", zeros(d)),
    ]
    if not config.tie_embeddings:
        spec.append(("lm_head.w", gauss(d, v)))
    params = {name: TensorNode(vals, requires_grad=True, name=name) for name, vals in spec}
    return TransformerModel(config, params)


def select_trainable(model: TransformerModel, policy: FreezePolicy) -> set[str]:
    """Names the policy allows the optimizer to touch; the rest stay frozen."""
    names = set(model.params)
    if policy.variant == "all_trainable":
        return names
    k = policy.k
    n = model.config.n_layers
    if k > n:
        raise PolicyError(f"freeze policy wants the last {k} blocks but model has {n}")
    picked = set()
    for i in range(n - k, n):
        picked |= {name for name in names if name.startswith(f"block.{i}.")}
    picked |= {name for name in names if name.startswith("final_ln.")}
    if model.config.tie_embeddings:
        warnings.warn(
            "tie_embeddings=true: the LM head is the token embedding, so this "
            "freeze policy also unfreezes tok_emb.w",
            UserWarning, stacklevel=2)
        picked.add("tok_emb.w")
    else:
        picked |= {name for name in names if name.startswith("lm_head.")}
    return picked
