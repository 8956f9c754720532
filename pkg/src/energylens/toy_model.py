"""A tiny deterministic autoregressive decoder for desk-scale experiments.

Not a real transformer: each layer is an affine map plus tanh, with an
additive causal mix of a decay-weighted average over earlier positions.
That is enough structure to give every layer a distinct last-position
hidden state with causal dependencies, which is all the decoding loop
needs. Token id 0 is reserved as end-of-sequence.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .lens import LayerStack, UnembeddingHead

MIX_DECAY = 0.5


class ContextOverflowError(ValueError):
    """Token sequence exceeds the model's context limit."""


@dataclass(frozen=True)
class ToyModelConfig:
    num_layers: int
    hidden_dim: int
    vocab_size: int
    context_limit: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.hidden_dim < 2:
            raise ValueError("hidden_dim must be >= 2")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2 (id 0 is reserved for EOS)")
        if self.context_limit < 4:
            raise ValueError("context_limit must be >= 4")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")


@dataclass(frozen=True)
class PromptTokens:
    """Visual-token stand-ins followed by text tokens; only the id ranges differ."""

    visual_tokens: tuple[int, ...] = ()
    text_tokens: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "visual_tokens", tuple(self.visual_tokens))
        object.__setattr__(self, "text_tokens", tuple(self.text_tokens))
        if len(self.tokens) < 1:
            raise ValueError("prompt must contain at least one token")

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.visual_tokens + self.text_tokens

    def validate_for(self, config: "ToyModelConfig") -> None:
        if len(self.tokens) > config.context_limit:
            raise ContextOverflowError(
                f"prompt length {len(self.tokens)} exceeds context_limit "
                f"{config.context_limit}"
            )
        bad = [t for t in self.tokens if not 0 <= t < config.vocab_size]
        if bad:
            raise ValueError(f"token ids out of vocabulary range: {bad[:5]}")


class ToyModel:
    """Parameters plus the forward pass; immutable after construction."""

    def __init__(self, config, layer_weights, layer_biases, layer_mixes, head):
        self.config = config
        self.layer_weights = layer_weights  # (L, f, f)
        self.layer_biases = layer_biases  # (L, f)
        self.layer_mixes = layer_mixes  # (L, f)
        self.head = head
        for arr in (layer_weights, layer_biases, layer_mixes):
            arr.setflags(write=False)

    @property
    def eos_id(self) -> int:
        return 0

    def parameter_digest(self) -> str:
        """Checksum over all parameters, for determinism checks."""
        h = hashlib.sha256()
        for arr in (self.layer_weights, self.layer_biases, self.layer_mixes, self.head.matrix):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _stream(seed: int, index: int) -> np.random.Generator:
    # Philox is counter-based: (seed, stream index) keys each tensor
    # independently, so parameter fills are order-independent.
    return np.random.Generator(np.random.Philox(key=[seed, index]))


def build_toy_model(config: ToyModelConfig) -> ToyModel:
    """Fill parameters deterministically from the config seed."""
    if not isinstance(config, ToyModelConfig):
        config = ToyModelConfig(**config)
    L, f, v = config.num_layers, config.hidden_dim, config.vocab_size
    head = UnembeddingHead(_stream(config.seed, 0).standard_normal((v, f)))
    weights = _stream(config.seed, 1).standard_normal((L, f, f)) / np.sqrt(f)
    biases = 0.1 * _stream(config.seed, 2).standard_normal((L, f))
    mixes = _stream(config.seed, 3).uniform(-0.5, 0.5, (L, f))
    return ToyModel(config, weights, biases, mixes, head)


def _check_tokens(model: ToyModel, token_ids) -> np.ndarray:
    ids = np.asarray(list(token_ids), dtype=np.int64)
    if ids.size < 1:
        raise ValueError("token sequence must be non-empty")
    if ids.size > model.config.context_limit:
        raise ContextOverflowError(
            f"sequence length {ids.size} exceeds context_limit {model.config.context_limit}"
        )
    if (ids < 0).any() or (ids >= model.config.vocab_size).any():
        raise ValueError("token id out of vocabulary range")
    return ids


def forward_all(model: ToyModel, token_ids) -> np.ndarray:
    """Hidden states for every position and layer, shape (T, L, hidden_dim).

    Positions are computed strictly left to right, so states at position
    t depend only on tokens up to t (causality by construction).
    """
    ids = _check_tokens(model, token_ids)
    cfg = model.config
    L, f = cfg.num_layers, cfg.hidden_dim
    # Embeddings are tied to the unembedding head's rows.
    emb = model.head.matrix[ids]
    states = np.zeros((ids.size, L, f))
    # Decayed running average of earlier positions, per layer.
    mix_num = np.zeros((L, f))
    mix_den = 0.0
    for t in range(ids.size):
        h = emb[t]
        prefix = mix_num / mix_den if mix_den > 0 else np.zeros((L, f))
        for k in range(L):
            h = np.tanh(model.layer_weights[k] @ h + model.layer_biases[k])
            h = h + model.layer_mixes[k] * prefix[k]
            states[t, k] = h
        mix_num = MIX_DECAY * mix_num + states[t]
        mix_den = MIX_DECAY * mix_den + 1.0
    return states


def forward_last(model: ToyModel, token_ids) -> LayerStack:
    """Per-layer hidden states at the last position only."""
    states = forward_all(model, token_ids)
    return LayerStack(hidden=states[-1], layer_offset=1)
