"""Capture per-layer last-token hidden states from a causal LM, step by
step along its own greedy continuation, and write a version-1 trace.

The model runs exactly as the runtime exposes it; hidden states are
stored untouched. Whether the runtime applies its final layer-norm
before the vocabulary head is detected empirically on the first step
and recorded in the trace header's norm flag rather than silently
assumed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .writer import (
    NORM_APPLIED,
    NORM_NOT_APPLIED,
    TracePayload,
    write_trace_file,
)


class UnsupportedModelError(RuntimeError):
    """The runtime does not expose what the trace format needs."""


@dataclass
class ExportSpec:
    model: str  # hub id or local path
    output_path: str
    prompt_text: str | None = None
    prompt_ids: list[int] | None = None
    max_new_tokens: int = 32
    include_visual: bool = True
    # leading prompt tokens that stand in for image features; dropped
    # when include_visual is False (no-op for plain text prompts)
    num_visual_tokens: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if (self.prompt_text is None) == (self.prompt_ids is None):
            raise ValueError("provide exactly one of prompt_text / prompt_ids")
        if self.num_visual_tokens < 0:
            raise ValueError("num_visual_tokens must be >= 0")


def _load_model(spec: ExportSpec):
    from transformers import AutoModelForCausalLM

    try:
        model = AutoModelForCausalLM.from_pretrained(spec.model)
    except Exception as e:
        raise UnsupportedModelError(f"cannot load model {spec.model!r}: {e}") from e
    return model.to(spec.device).eval()


def _prompt_ids(spec: ExportSpec) -> list[int]:
    if spec.prompt_ids is not None:
        ids = [int(t) for t in spec.prompt_ids]
    else:
        from transformers import AutoTokenizer

        try:
            tokenizer = AutoTokenizer.from_pretrained(spec.model)
        except Exception as e:
            raise UnsupportedModelError(
                f"cannot load a tokenizer for {spec.model!r} (pass --prompt-ids "
                f"to skip tokenization): {e}"
            ) from e
        ids = tokenizer(spec.prompt_text, return_tensors=None)["input_ids"]
    if not spec.include_visual and spec.num_visual_tokens:
        ids = ids[spec.num_visual_tokens :]
    if not ids:
        raise ValueError("prompt is empty after preprocessing")
    return ids


def _unembedding_matrix(model) -> np.ndarray:
    embedding = model.get_output_embeddings()
    if embedding is None or not hasattr(embedding, "weight"):
        raise UnsupportedModelError("model exposes no output embedding matrix")
    bias = getattr(embedding, "bias", None)
    if bias is not None and float(bias.detach().abs().max()) > 0:
        raise UnsupportedModelError(
            "output embedding carries a bias; the v1 trace format stores only "
            "the matrix, so final-layer replay would not match the runtime"
        )
    return embedding.weight.detach().cpu().numpy().astype(np.float32)


def capture(model, prompt_ids, max_new_tokens: int, device: str = "cpu"):
    """Greedy stepwise capture.

    Returns (steps, continuation, layer_offset, norm_flag) where steps
    is (max_new_tokens, L, f_dim) float32 of last-position hidden
    states, excluding the embedding output when the runtime reports it.
    """
    num_layers = int(model.config.num_hidden_layers)
    head = _unembedding_matrix(model)
    ids = list(prompt_ids)
    steps = []
    continuation = []
    norm_flag = None
    with torch.no_grad():
        for _ in range(max_new_tokens):
            out = model(
                torch.tensor([ids], dtype=torch.long, device=device),
                output_hidden_states=True,
            )
            hidden = getattr(out, "hidden_states", None)
            if not hidden:
                raise UnsupportedModelError(
                    "runtime did not expose hidden states (output_hidden_states)"
                )
            if len(hidden) == num_layers + 1:
                layer_offset = 1
                layers = hidden[1:]
            elif len(hidden) == num_layers:
                layer_offset = 0
                layers = hidden
            else:
                raise UnsupportedModelError(
                    f"runtime returned {len(hidden)} hidden states for "
                    f"{num_layers} layers"
                )
            last = np.stack(
                [h[0, -1, :].detach().cpu().float().numpy() for h in layers]
            ).astype(np.float32)
            steps.append(last)
            logits = out.logits[0, -1].detach().cpu().float().numpy()
            if norm_flag is None:
                projected = head.astype(np.float64) @ last[-1].astype(np.float64)
                close = np.allclose(projected, logits, atol=1e-3, rtol=1e-4)
                norm_flag = NORM_APPLIED if close else NORM_NOT_APPLIED
            next_id = int(np.argmax(logits))
            continuation.append(next_id)
            ids.append(next_id)
    return np.stack(steps), continuation, layer_offset, norm_flag


def export(spec: ExportSpec) -> int:
    """Run the model and write the trace; returns the byte count."""
    model = _load_model(spec)
    prompt = _prompt_ids(spec)
    limit = getattr(model.config, "max_position_embeddings", None)
    if limit is not None and len(prompt) + spec.max_new_tokens > limit:
        raise ValueError(
            f"prompt ({len(prompt)}) + max_new_tokens ({spec.max_new_tokens}) "
            f"exceeds the model context of {limit}"
        )
    steps, continuation, layer_offset, norm_flag = capture(
        model, prompt, spec.max_new_tokens, spec.device
    )
    payload = TracePayload(
        model_label=spec.model,
        layer_offset=layer_offset,
        norm_flag=norm_flag,
        prompt_tokens=prompt,
        continuation_tokens=continuation,
        head=_unembedding_matrix(model),
        steps=steps,
    )
    return write_trace_file(payload, spec.output_path)
