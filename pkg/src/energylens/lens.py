"""Layer-wise logit-lens projection and minimal-energy layer selection.

Every layer's last-position hidden state is projected through the shared
unembedding head; the layer whose logit vector has the lowest energy
(highest logsumexp) supplies the next-token logits. Selection is re-run
from scratch at every decoding step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import argmin_tiebreak_high, energy


@dataclass(frozen=True)
class UnembeddingHead:
    """Vocabulary projection matrix, shape (vocab_size, hidden_dim)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix)
        if m.ndim != 2:
            raise ValueError("head matrix must be 2-D (vocab_size x hidden_dim)")
        if m.shape[0] < 2 or m.shape[1] < 1:
            raise ValueError("head needs vocab_size >= 2 and hidden_dim >= 1")
        if not np.isfinite(m).all():
            raise ValueError("head matrix must be finite")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def vocab_size(self) -> int:
        return self.matrix.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class LayerStack:
    """Per-layer hidden states at the last context position, shape (L, hidden_dim).

    layer_offset records whether an embedding-output row was excluded
    upstream (1 if it was): with offset 1, row 0 is the output of the
    first post-attention layer, not the embedding.
    """

    hidden: np.ndarray
    layer_offset: int = 0

    def __post_init__(self):
        h = np.asarray(self.hidden)
        if h.ndim != 2 or h.shape[0] < 1 or h.shape[1] < 1:
            raise ValueError("layer stack must be 2-D with at least one layer")
        if not np.isfinite(h).all():
            raise ValueError("layer stack must be finite")
        if self.layer_offset not in (0, 1):
            raise ValueError("layer_offset must be 0 or 1")
        h = h.copy()
        h.setflags(write=False)
        object.__setattr__(self, "hidden", h)

    @property
    def num_layers(self) -> int:
        return self.hidden.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.hidden.shape[1]


@dataclass(frozen=True)
class LayerSelection:
    """Outcome of one minimal-energy selection step.

    chosen_layer indexes `energies` (0-based); ties resolve to the
    highest index, i.e. the layer nearest the supervised final one.
    """

    chosen_layer: int
    energies: np.ndarray
    next_token_logits: np.ndarray


def project_layer(head: UnembeddingHead, hidden) -> np.ndarray:
    """Logit vector head @ hidden for one layer's hidden state."""
    h = np.asarray(hidden)
    if h.ndim != 1 or h.shape[0] != head.hidden_dim:
        raise ValueError(
            f"hidden state length {h.shape} does not match head hidden_dim {head.hidden_dim}"
        )
    return head.matrix @ h


def project_stack(head: UnembeddingHead, stack: LayerStack) -> np.ndarray:
    """Logit vectors of every layer, shape (L, vocab_size).

    Row k equals project_layer(head, stack.hidden[k]) bit for bit, so
    per-layer and stacked paths never disagree.
    """
    if stack.hidden_dim != head.hidden_dim:
        raise ValueError(
            f"stack hidden_dim {stack.hidden_dim} does not match head {head.hidden_dim}"
        )
    return np.stack([head.matrix @ row for row in stack.hidden])


def layer_energies(head: UnembeddingHead, stack: LayerStack) -> np.ndarray:
    """Energy of every layer's projected logits, one pass, no layer skipped."""
    logits = project_stack(head, stack)
    return np.array([energy(row) for row in logits])


def select_from_logits(layer_logits: np.ndarray) -> LayerSelection:
    """Pick the minimal-energy row of an (L, vocab_size) logit matrix."""
    logits = np.asarray(layer_logits)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ValueError("need a 2-D (layers x vocab) logit matrix")
    energies = np.array([energy(row) for row in logits])
    chosen = argmin_tiebreak_high(energies)
    return LayerSelection(
        chosen_layer=chosen,
        energies=energies,
        next_token_logits=np.asarray(logits[chosen], dtype=np.float64),
    )


def select_layer(head: UnembeddingHead, stack: LayerStack) -> LayerSelection:
    """Project the stack and select the minimal-energy layer.

    Deterministic for identical inputs; meant to be re-run per decoding
    step, never cached across steps.
    """
    return select_from_logits(project_stack(head, stack))
