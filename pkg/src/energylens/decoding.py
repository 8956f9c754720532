"""Autoregressive generation: greedy, nucleus, and energy-guided strategies.

A source supplies per-layer logit rows for the last position given the
current token sequence; the toy model computes them, a trace replays
recorded ones. Each generated step lands in a GenerationRecord so the
report pipeline can analyse confidence, chosen layers and energies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import toy_model as toy
from .lens import LayerStack, project_stack, select_from_logits
from .numerics import softmax
from .traceio import Trace

STRATEGIES = ("greedy", "nucleus", "energy")


class TraceExhaustedError(RuntimeError):
    """Replay asked for more steps than the trace recorded."""


@dataclass(frozen=True)
class DecodeParams:
    strategy: str = "greedy"
    max_new_tokens: int = 16
    top_p: float = 1.0
    temperature: float = 1.0
    rng_seed: int = 0
    # optional combination: top-p sampling over the selected layer's
    # distribution instead of argmax (energy strategy only)
    nucleus_on_selected: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")
        if not self.temperature > 0.0:
            raise ValueError("temperature must be > 0")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must fit in 64 unsigned bits")
        if self.nucleus_on_selected and self.strategy != "energy":
            raise ValueError("nucleus_on_selected only combines with the energy strategy")


@dataclass(frozen=True)
class StepRecord:
    token: int
    confidence: float
    chosen_layer: int
    energies: tuple[float, ...] | None = None


@dataclass
class GenerationRecord:
    strategy: str
    steps: list[StepRecord] = field(default_factory=list)
    # Replay only: number of steps whose chosen token differed from the
    # trace's recorded continuation. Disagreement is data, not an error.
    divergences: int = 0

    @property
    def tokens(self) -> list[int]:
        return [s.token for s in self.steps]

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "strategy": self.strategy,
                "divergences": self.divergences,
                "steps": [
                    {
                        "token": s.token,
                        "confidence": s.confidence,
                        "chosen_layer": s.chosen_layer,
                        "energies": list(s.energies) if s.energies is not None else None,
                    }
                    for s in self.steps
                ],
            },
            sort_keys=True,
        )


def record_from_json_line(line: str) -> GenerationRecord:
    obj = json.loads(line)
    steps = [
        StepRecord(
            token=int(s["token"]),
            confidence=float(s["confidence"]),
            chosen_layer=int(s["chosen_layer"]),
            energies=tuple(s["energies"]) if s.get("energies") is not None else None,
        )
        for s in obj["steps"]
    ]
    return GenerationRecord(
        strategy=obj["strategy"], steps=steps, divergences=int(obj.get("divergences", 0))
    )


class ToyModelSource:
    """Recomputes the layer stack for every step from a toy model."""

    def __init__(self, model: toy.ToyModel):
        self.model = model
        self.eos_id = model.eos_id
        self.continuation = None

    @property
    def num_layers(self) -> int:
        return self.model.config.num_layers

    def layer_logits(self, tokens) -> np.ndarray:
        stack = toy.forward_last(self.model, tokens)
        return project_stack(self.model.head, stack)


class TraceSource:
    """Serves the recorded per-step, per-layer logit rows of a trace.

    Steps are addressed by how far the token sequence has grown past the
    recorded prompt; the stacks always follow the recording
    (teacher-forced), so replayed strategies may diverge from the
    recorded continuation without invalidating later steps.
    """

    def __init__(self, trace: Trace):
        self.trace = trace
        self.eos_id = None  # real tokenizers own EOS; replay runs the recording out
        self.continuation = trace.header.continuation_tokens

    @property
    def prompt(self) -> tuple[int, ...]:
        return self.trace.header.prompt_tokens

    @property
    def num_layers(self) -> int:
        return self.trace.header.num_layers

    @property
    def num_steps(self) -> int:
        return self.trace.header.num_steps

    def layer_logits(self, tokens) -> np.ndarray:
        step = len(tokens) - len(self.prompt)
        if step < 0:
            raise ValueError("token sequence shorter than the recorded prompt")
        if step >= self.trace.header.num_steps:
            raise TraceExhaustedError(
                f"trace records {self.trace.header.num_steps} steps, step {step} requested"
            )
        if self.trace.header.payload_kind == "logits":
            return np.asarray(self.trace.payload[step], dtype=np.float64)
        stack = LayerStack(self.trace.payload[step], self.trace.header.layer_offset)
        return project_stack(self.trace.head, stack)


class FinalLayerBroadcastSource:
    """Wrapper that makes every layer emit the final layer's row.

    Under it, energy-guided decoding must degrade to exactly standard
    final-layer decoding.
    """

    def __init__(self, inner):
        self.inner = inner
        self.eos_id = inner.eos_id
        self.continuation = inner.continuation

    @property
    def num_layers(self) -> int:
        return self.inner.num_layers

    def layer_logits(self, tokens) -> np.ndarray:
        rows = self.inner.layer_logits(tokens)
        return np.broadcast_to(rows[-1], rows.shape)


def nucleus_sample(probs: np.ndarray, top_p: float, rng: np.random.Generator):
    """Sample from the smallest descending-probability prefix with mass >= top_p.

    Returns (token, confidence) where confidence is the token's
    probability under the renormalized nucleus distribution.
    """
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    cut = int(np.searchsorted(csum, top_p, side="left"))
    cut = min(cut, probs.size - 1)
    kept = order[: cut + 1]
    kept_probs = probs[kept] / probs[kept].sum()
    u = rng.random()
    pick = int(np.searchsorted(np.cumsum(kept_probs), u, side="right"))
    pick = min(pick, kept.size - 1)
    return int(kept[pick]), float(kept_probs[pick])


def _run(source, prompt, params: DecodeParams, pick):
    tokens = list(prompt)
    record = GenerationRecord(strategy=params.strategy)
    for _ in range(params.max_new_tokens):
        rows = source.layer_logits(tokens)
        step = pick(rows)
        record.steps.append(step)
        cont = source.continuation
        if cont is not None:
            i = len(record.steps) - 1
            if i < len(cont) and step.token != cont[i]:
                record.divergences += 1
        tokens.append(step.token)
        if source.eos_id is not None and step.token == source.eos_id:
            break
    return tokens[len(prompt) :], record


def decode_greedy(source, prompt, params: DecodeParams):
    """Argmax of the final layer's softmax at every step."""

    def pick(rows):
        final = np.asarray(rows[-1], dtype=np.float64)
        probs = softmax(final / params.temperature)
        token = int(np.argmax(final))
        return StepRecord(
            token=token, confidence=float(probs[token]), chosen_layer=len(rows) - 1
        )

    return _run(source, prompt, params, pick)


def decode_nucleus(source, prompt, params: DecodeParams):
    """Seeded top-p sampling over the final layer's distribution."""
    rng = np.random.default_rng(params.rng_seed)

    def pick(rows):
        final = np.asarray(rows[-1], dtype=np.float64)
        probs = softmax(final / params.temperature)
        token, confidence = nucleus_sample(probs, params.top_p, rng)
        return StepRecord(token=token, confidence=confidence, chosen_layer=len(rows) - 1)

    return _run(source, prompt, params, pick)


def decode_energy(source, prompt, params: DecodeParams):
    """Decoding over the minimal-energy layer, re-selected per step.

    Token choice on the selected layer is greedy argmax by default;
    params.nucleus_on_selected switches it to seeded top-p sampling.
    """
    rng = np.random.default_rng(params.rng_seed) if params.nucleus_on_selected else None

    def pick(rows):
        sel = select_from_logits(rows)
        probs = softmax(sel.next_token_logits / params.temperature)
        if rng is not None:
            token, confidence = nucleus_sample(probs, params.top_p, rng)
        else:
            token = int(np.argmax(sel.next_token_logits))
            confidence = float(probs[token])
        return StepRecord(
            token=token,
            confidence=confidence,
            chosen_layer=sel.chosen_layer,
            energies=tuple(float(e) for e in sel.energies),
        )

    return _run(source, prompt, params, pick)


_DECODERS = {"greedy": decode_greedy, "nucleus": decode_nucleus, "energy": decode_energy}


def decode(source, prompt, params: DecodeParams):
    """Dispatch on params.strategy."""
    return _DECODERS[params.strategy](source, prompt, params)
