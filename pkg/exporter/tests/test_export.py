import hashlib

import numpy as np
import pytest
import torch
from transformers import GPT2Config, GPT2LMHeadModel

import energylens
from energylens import decoding
from traceexport import ExportSpec, UnsupportedModelError, capture, export


@pytest.fixture(scope="module")
def tiny_model_dir(tmp_path_factory):
    """A tiny randomly initialized GPT-2-architecture causal LM on disk.

    Loaded via from_pretrained like any hub model, so the export path is
    identical to a real one, minus the download.
    """
    torch.manual_seed(1234)
    config = GPT2Config(
        n_layer=2,
        n_embd=32,
        n_head=2,
        vocab_size=128,
        n_positions=128,
        bos_token_id=0,
        eos_token_id=0,
    )
    model = GPT2LMHeadModel(config).eval()
    path = tmp_path_factory.mktemp("tiny-model")
    model.save_pretrained(path)
    return str(path)


PROMPT = [11, 47, 3, 99]


def run_export(tiny_model_dir, out_path, steps=32, **overrides):
    spec = ExportSpec(
        model=tiny_model_dir,
        output_path=str(out_path),
        prompt_ids=PROMPT,
        max_new_tokens=steps,
        **overrides,
    )
    return export(spec), spec


def test_export_parses_in_engine_and_header_invariants(tiny_model_dir, tmp_path):
    out = tmp_path / "run.trace"
    nbytes, spec = run_export(tiny_model_dir, out)
    assert out.stat().st_size == nbytes

    trace = energylens.read_trace(out)
    h = trace.header
    assert h.num_layers == 2
    assert h.hidden_dim == 32
    assert h.vocab_size == 128
    assert h.num_steps == 32
    assert h.layer_offset == 1  # embedding output excluded
    assert h.payload_kind == "hidden_states"
    assert h.model_label == spec.model
    assert h.prompt_tokens == tuple(PROMPT)
    assert len(h.continuation_tokens) == 32
    assert trace.head.matrix.shape == (128, 32)
    assert trace.payload.shape == (32, 2, 32)
    # GPT-2 applies its final layer-norm before the head; the exporter
    # must have detected that
    assert h.norm_flag == 1


def test_final_layer_greedy_replay_reproduces_continuation(tiny_model_dir, tmp_path):
    out = tmp_path / "run.trace"
    run_export(tiny_model_dir, out)
    source = decoding.TraceSource(energylens.read_trace(out))
    tokens, record = decoding.decode_greedy(
        source,
        source.prompt,
        decoding.DecodeParams(strategy="greedy", max_new_tokens=32),
    )
    assert tokens == list(source.continuation)  # 32/32 steps
    assert record.divergences == 0


def test_export_is_deterministic(tiny_model_dir, tmp_path):
    a = tmp_path / "a.trace"
    b = tmp_path / "b.trace"
    run_export(tiny_model_dir, a)
    run_export(tiny_model_dir, b)
    digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
    assert digest(a) == digest(b)


def test_no_visual_is_noop_on_text_only_prompt(tiny_model_dir, tmp_path):
    a = tmp_path / "default.trace"
    b = tmp_path / "novisual.trace"
    run_export(tiny_model_dir, a)
    run_export(tiny_model_dir, b, include_visual=False)  # num_visual_tokens = 0
    assert a.read_bytes() == b.read_bytes()


def test_no_visual_drops_leading_tokens(tiny_model_dir, tmp_path):
    out = tmp_path / "dropped.trace"
    run_export(tiny_model_dir, out, include_visual=False, num_visual_tokens=2)
    trace = energylens.read_trace(out)
    assert trace.header.prompt_tokens == tuple(PROMPT[2:])


def test_hidden_states_match_direct_forward(tiny_model_dir, tmp_path):
    # the trace stores states exactly as the runtime exposes them
    out = tmp_path / "run.trace"
    run_export(tiny_model_dir, out, steps=4)
    trace = energylens.read_trace(out)
    model = GPT2LMHeadModel.from_pretrained(tiny_model_dir).eval()
    ids = list(PROMPT)
    with torch.no_grad():
        for step in range(4):
            hs = model(torch.tensor([ids]), output_hidden_states=True).hidden_states
            expected = np.stack(
                [h[0, -1].float().numpy() for h in hs[1:]]
            ).astype(np.float32)
            assert trace.payload[step].tobytes() == expected.tobytes()
            ids.append(int(trace.header.continuation_tokens[step]))


def test_context_overflow_rejected(tiny_model_dir, tmp_path):
    with pytest.raises(ValueError, match="context"):
        run_export(tiny_model_dir, tmp_path / "x.trace", steps=1000)


def test_spec_validation(tmp_path):
    with pytest.raises(ValueError):
        ExportSpec(model="m", output_path="o", prompt_ids=[1], max_new_tokens=0)
    with pytest.raises(ValueError):
        ExportSpec(model="m", output_path="o")  # neither prompt form
    with pytest.raises(ValueError):
        ExportSpec(model="m", output_path="o", prompt_text="hi", prompt_ids=[1])


def test_missing_model_is_explicit_error(tmp_path):
    spec = ExportSpec(
        model=str(tmp_path / "nope"),
        output_path=str(tmp_path / "x.trace"),
        prompt_ids=[1],
    )
    with pytest.raises(UnsupportedModelError, match="cannot load model"):
        export(spec)


class _NoHiddenStates:
    """Stub runtime that never exposes hidden states."""

    class config:
        num_hidden_layers = 2

    class _Out:
        hidden_states = None

    def get_output_embeddings(self):
        class E:
            weight = torch.zeros(4, 2)
            bias = None

        return E()

    def __call__(self, *a, **k):
        return self._Out()


def test_runtime_without_hidden_states_is_unsupported():
    with pytest.raises(UnsupportedModelError, match="hidden states"):
        capture(_NoHiddenStates(), [1, 2], max_new_tokens=1)


def test_biased_head_is_unsupported(tiny_model_dir, tmp_path):
    model = GPT2LMHeadModel.from_pretrained(tiny_model_dir).eval()
    biased = torch.nn.Linear(32, 128, bias=True)
    with torch.no_grad():
        biased.weight.copy_(model.lm_head.weight)
        biased.bias.fill_(0.25)
    model.set_output_embeddings(biased)
    with pytest.raises(UnsupportedModelError, match="bias"):
        capture(model, PROMPT, max_new_tokens=1)


def test_cli_round_trip(tiny_model_dir, tmp_path, capsys):
    from traceexport.cli import main

    out = tmp_path / "cli.trace"
    code = main(
        [
            "--model", tiny_model_dir,
            "--prompt-ids", ",".join(str(t) for t in PROMPT),
            "--max-new-tokens", "8",
            "--out", str(out),
        ]
    )
    assert code == 0
    assert "wrote" in capsys.readouterr().out
    trace = energylens.read_trace(out)
    assert trace.header.num_steps == 8

    code = main(["--model", str(tmp_path / "missing"), "--prompt-ids", "1", "--out", str(out)])
    assert code == 2
