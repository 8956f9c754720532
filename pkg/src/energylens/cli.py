"""Batch command-line surface.

Subcommands: decode (toy model), replay (trace), eval-pope / eval-mme /
eval-mmvp, chair, report. Artifacts are written atomically; failures
print a machine-readable JSON error to stderr. Exit codes: 0 success,
1 usage error, 2 data error, 3 protocol violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from . import chair as chair_mod
from . import decoding, evalharness, reports, toy_model, traceio

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_PROTOCOL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_decode_params(p, default_max_new=16):
    p.add_argument("--strategy", choices=decoding.STRATEGIES, default="greedy")
    p.add_argument("--max-new-tokens", type=int, default=default_max_new)
    p.add_argument("--top-p", type=float, default=1.0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0, help="PRNG seed (sampling only)")
    p.add_argument(
        "--energy-nucleus",
        action="store_true",
        help="with --strategy energy: top-p sample over the selected layer",
    )


def _params(args, max_new=None) -> decoding.DecodeParams:
    return decoding.DecodeParams(
        strategy=args.strategy,
        max_new_tokens=max_new if max_new is not None else args.max_new_tokens,
        top_p=args.top_p,
        temperature=args.temperature,
        rng_seed=args.seed,
        nucleus_on_selected=getattr(args, "energy_nucleus", False),
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="energylens", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decode", help="generate from the bundled toy model")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--hidden-dim", type=int, default=8)
    p.add_argument("--vocab", type=int, default=32)
    p.add_argument("--context-limit", type=int, default=64)
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--prompt", help="comma-separated token ids")
    p.add_argument("--prompt-file", help="JSONL file, one {\"prompt\": [ids...]} per line")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="output records JSONL")
    _add_decode_params(p)

    p = sub.add_parser("replay", help="re-decode a recorded trace offline")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True, help="output records JSONL")
    p.add_argument(
        "--max-new-tokens",
        type=int,
        default=0,
        help="0 means every recorded step",
    )
    p.add_argument("--strategy", choices=decoding.STRATEGIES, default="energy")
    p.add_argument("--top-p", type=float, default=1.0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--energy-nucleus", action="store_true",
                   help="with --strategy energy: top-p sample over the selected layer")

    for name in ("eval-pope", "eval-mmvp"):
        p = sub.add_parser(name, help="score a balanced yes/no question file")
        p.add_argument("--dataset", required=True, help="questions JSONL")
        p.add_argument("--answers", required=True, help="answers JSONL")
        p.add_argument("--parse-rule", choices=evalharness.PARSE_RULES, default="first-word")
        p.add_argument("--label", default=name.split("-", 1)[1])
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--out", required=True, help="metrics CSV")
        p.add_argument("--out-jsonl", help="optional full-precision JSONL")

    p = sub.add_parser("eval-mme", help="score the two-questions-per-image protocol")
    p.add_argument("--dataset", required=True)
    p.add_argument("--answers", required=True)
    p.add_argument("--parse-rule", choices=evalharness.PARSE_RULES, default="first-word")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--out-jsonl", help="optional full-precision JSONL")

    p = sub.add_parser("chair", help="caption hallucination scores")
    p.add_argument("--captions", required=True, help="JSONL of image/caption")
    p.add_argument("--annotations", required=True, help="ground-truth objects per image")
    p.add_argument("--vocab", required=True, help="synonym list")
    p.add_argument("--max-new-tokens", type=int, default=64, help="recorded in the report only")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="emit figure data (CSV)")
    p.add_argument("--kde", action="store_true")
    p.add_argument("--calibration", action="store_true")
    p.add_argument("--layer-histogram", action="store_true")
    p.add_argument("--energy-samples", action="store_true")
    p.add_argument("--transfer", action="store_true")
    p.add_argument("--yes-ratio", action="store_true")
    p.add_argument("--dataset", help="questions JSONL (kde/calibration/yes-ratio)")
    p.add_argument("--answers", help="answers JSONL (kde/calibration)")
    p.add_argument("--answers-a", help="first run for --transfer (e.g. with visual input)")
    p.add_argument("--answers-b", help="second run for --transfer (e.g. without)")
    p.add_argument(
        "--run",
        action="append",
        default=[],
        metavar="LABEL=DATASET:ANSWERS",
        help="labelled runs for --yes-ratio (repeatable)",
    )
    p.add_argument("--records", help="records JSONL from decode/replay")
    p.add_argument("--parse-rule", choices=evalharness.PARSE_RULES, default="first-word")
    p.add_argument("--out-dir", required=True)
    return parser


def _parse_prompt(text: str):
    try:
        ids = [int(t) for t in text.split(",") if t.strip() != ""]
    except ValueError:
        raise UsageError(f"--prompt must be comma-separated integers, got {text!r}")
    if not ids:
        raise UsageError("--prompt must contain at least one token id")
    return ids


def _load_prompts(args):
    if (args.prompt is None) == (args.prompt_file is None):
        raise UsageError("decode needs exactly one of --prompt / --prompt-file")
    if args.prompt is not None:
        return [_parse_prompt(args.prompt)]
    prompts = []
    with open(args.prompt_file, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if not isinstance(obj, dict) or "prompt" not in obj:
                raise ValueError(f"prompt file line {lineno} lacks a 'prompt' field")
            prompts.append([int(t) for t in obj["prompt"]])
    if not prompts:
        raise ValueError("prompt file contains no prompts")
    return prompts


def _records_jsonl(records) -> str:
    return "\n".join(r.to_json_line() for r in records) + "\n"


def _cmd_decode(args) -> int:
    config = toy_model.ToyModelConfig(
        num_layers=args.layers,
        hidden_dim=args.hidden_dim,
        vocab_size=args.vocab,
        context_limit=args.context_limit,
        seed=args.model_seed,
    )
    model = toy_model.build_toy_model(config)
    prompts = _load_prompts(args)
    base = _params(args)

    def one(indexed):
        i, prompt = indexed
        # Per-item seeds keep reruns identical for any --jobs value.
        params = decoding.DecodeParams(
            strategy=base.strategy,
            max_new_tokens=base.max_new_tokens,
            top_p=base.top_p,
            temperature=base.temperature,
            rng_seed=(base.rng_seed + i) % 2**64,
            nucleus_on_selected=base.nucleus_on_selected,
        )
        _, record = decoding.decode(decoding.ToyModelSource(model), prompt, params)
        return record

    jobs = max(1, args.jobs)
    if jobs == 1:
        records = [one(x) for x in enumerate(prompts)]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(one, enumerate(prompts)))
    reports.atomic_write_text(args.out, _records_jsonl(records))
    return EXIT_OK


def _cmd_replay(args) -> int:
    trace = traceio.read_trace(args.trace)
    source = decoding.TraceSource(trace)
    max_new = args.max_new_tokens or trace.header.num_steps
    if max_new > trace.header.num_steps:
        raise ValueError(
            f"--max-new-tokens {max_new} exceeds the {trace.header.num_steps} recorded steps"
        )
    params = decoding.DecodeParams(
        strategy=args.strategy,
        max_new_tokens=max_new,
        top_p=args.top_p,
        temperature=args.temperature,
        rng_seed=args.seed,
        nucleus_on_selected=args.energy_nucleus,
    )
    _, record = decoding.decode(source, source.prompt, params)
    reports.atomic_write_text(args.out, _records_jsonl([record]))
    return EXIT_OK


def _load_pairs(args):
    items, item_errors = evalharness.load_pope_jsonl(args.dataset)
    answers, answer_errors = evalharness.load_answers_jsonl(args.answers)
    problems = [f"{args.dataset}:{n}: {m}" for n, m in item_errors]
    problems += [f"{args.answers}:{n}: {m}" for n, m in answer_errors]
    if problems:
        raise ValueError("; ".join(problems))
    if not items:
        raise ValueError(f"{args.dataset} contains no items")
    return evalharness.join_answers(
        items, answers, args.parse_rule, jobs=max(1, getattr(args, "jobs", 1))
    )


def _cmd_eval_pope(args) -> int:
    pairs = _load_pairs(args)
    bundle = evalharness.compute_metrics(pairs)
    reports.write_metrics_csv(args.out, {args.label: bundle}, args.parse_rule)
    if args.out_jsonl:
        reports.write_metrics_jsonl(args.out_jsonl, {args.label: bundle}, args.parse_rule)
    return EXIT_OK


def _cmd_eval_mme(args) -> int:
    pairs = _load_pairs(args)
    score = evalharness.compute_mme(pairs)
    reports.write_mme_csv(args.out, score)
    if args.out_jsonl:
        reports.write_mme_jsonl(args.out_jsonl, score)
    return EXIT_OK


def _cmd_chair(args) -> int:
    vocab = chair_mod.load_vocabulary(args.vocab)
    truth = chair_mod.load_annotations(args.annotations)
    captions = chair_mod.load_captions(args.captions)
    if not captions:
        raise ValueError(f"{args.captions} contains no captions")
    missing = sorted({image for image, _ in captions} - truth.keys())
    if missing:
        raise ValueError(f"captions reference unannotated images: {missing[:10]}")
    scores = chair_mod.score_corpus(
        ((image, caption, truth[image]) for image, caption in captions), vocab
    )
    payload = {
        "chair_s": scores.chair_s,
        "chair_i": scores.chair_i,
        "mentioned_total": scores.mentioned_total,
        "hallucinated_total": scores.hallucinated_total,
        "captions": scores.captions,
        "captions_with_hallucination": scores.captions_with_hallucination,
        "degenerate": scores.degenerate,
        "max_new_tokens": args.max_new_tokens,
    }
    reports.atomic_write_text(args.out, json.dumps(payload, sort_keys=True) + "\n")
    return EXIT_OK


def _load_records(path):
    with open(path, "r", encoding="utf-8") as f:
        return [decoding.record_from_json_line(line) for line in f if line.strip()]


def _cmd_report(args) -> int:
    out = args.out_dir.rstrip("/")
    os.makedirs(out, exist_ok=True)
    wrote = []

    if args.kde or args.calibration:
        if not (args.dataset and args.answers):
            raise UsageError("--kde/--calibration need --dataset and --answers")
        items, _ = evalharness.load_pope_jsonl(args.dataset)
        answers, _ = evalharness.load_answers_jsonl(args.answers)
        pairs = evalharness.join_answers(items, answers, args.parse_rule)
        if args.kde:
            samples = {
                v: [a.confidence for _, a in pairs if a.verdict == v] for v in ("yes", "no")
            }
            samples = {v: s for v, s in samples.items() if s}
            reports.write_confidence_samples_csv(f"{out}/confidence_samples.csv", samples)
            wrote.append("confidence_samples.csv")
            reports.write_kde_csv(f"{out}/confidence_kde.csv", samples)
            wrote.append("confidence_kde.csv")
        if args.calibration:
            rows, flags = evalharness.accuracy_vs_confidence(pairs)
            reports.write_calibration_csv(f"{out}/calibration.csv", rows, flags)
            wrote.append("calibration.csv")

    if args.layer_histogram or args.energy_samples:
        if not args.records:
            raise UsageError("--layer-histogram/--energy-samples need --records")
        records = _load_records(args.records)
        if args.layer_histogram:
            reports.write_layer_histogram_csv(f"{out}/layer_selection_histogram.csv", records)
            wrote.append("layer_selection_histogram.csv")
        if args.energy_samples:
            reports.write_energy_samples_csv(f"{out}/layer_energy_samples.csv", records)
            wrote.append("layer_energy_samples.csv")

    if args.transfer:
        if not (args.answers_a and args.answers_b):
            raise UsageError("--transfer needs --answers-a and --answers-b")
        a, _ = evalharness.load_answers_jsonl(args.answers_a)
        b, _ = evalharness.load_answers_jsonl(args.answers_b)
        parsed_a = {
            k: evalharness.ParsedAnswer(
                verdict=evalharness.parse_answer(t, args.parse_rule), raw_text=t, confidence=c
            )
            for k, (t, c) in a.items()
        }
        parsed_b = {
            k: evalharness.ParsedAnswer(
                verdict=evalharness.parse_answer(t, args.parse_rule), raw_text=t, confidence=c
            )
            for k, (t, c) in b.items()
        }
        counts = evalharness.yes_ratio_transfer(parsed_a, parsed_b)
        reports.write_transfer_csv(f"{out}/transfer.csv", counts)
        wrote.append("transfer.csv")

    if args.yes_ratio:
        if not args.run:
            raise UsageError("--yes-ratio needs at least one --run LABEL=DATASET:ANSWERS")
        bundles = {}
        for spec in args.run:
            if "=" not in spec or ":" not in spec.split("=", 1)[1]:
                raise UsageError(f"--run must look like LABEL=DATASET:ANSWERS, got {spec!r}")
            label, rest = spec.split("=", 1)
            dataset, answers_path = rest.split(":", 1)
            items, _ = evalharness.load_pope_jsonl(dataset)
            answers, _ = evalharness.load_answers_jsonl(answers_path)
            if not items:
                raise ValueError(f"{dataset} contains no items")
            bundles[label] = evalharness.compute_metrics(
                evalharness.join_answers(items, answers, args.parse_rule)
            )
        reports.write_yes_ratio_csv(f"{out}/yes_ratio.csv", bundles)
        wrote.append("yes_ratio.csv")

    if not wrote:
        raise UsageError("report: select at least one output")
    return EXIT_OK


_COMMANDS = {
    "decode": _cmd_decode,
    "replay": _cmd_replay,
    "eval-pope": _cmd_eval_pope,
    "eval-mmvp": _cmd_eval_pope,
    "eval-mme": _cmd_eval_mme,
    "chair": _cmd_chair,
    "report": _cmd_report,
}


def _fail(code: int, kind: str, message: str, command: str | None) -> int:
    print(
        json.dumps(
            {"error": kind, "message": message, "command": command}, sort_keys=True
        ),
        file=sys.stderr,
    )
    return code


def main(argv=None) -> int:
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        return _COMMANDS[command](args)
    except UsageError as e:
        return _fail(EXIT_USAGE, "usage", str(e), command)
    except evalharness.ProtocolViolationError as e:
        return _fail(EXIT_PROTOCOL, "protocol-violation", str(e), command)
    except (
        OSError,
        ValueError,
        json.JSONDecodeError,
        decoding.TraceExhaustedError,
    ) as e:
        return _fail(EXIT_DATA, type(e).__name__, str(e), command)


if __name__ == "__main__":
    sys.exit(main())
