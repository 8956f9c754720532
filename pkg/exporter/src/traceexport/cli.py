"""Command line: trace-export --model <id-or-path> --prompt-ids 1,2,3 --out run.trace"""

from __future__ import annotations

import argparse
import sys

from .export import ExportSpec, UnsupportedModelError, export


def build_parser():
    p = argparse.ArgumentParser(prog="trace-export", description=__doc__)
    p.add_argument("--model", required=True, help="hub id or local model path")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--prompt", help="prompt text (needs the model's tokenizer)")
    group.add_argument("--prompt-file", help="file whose contents are the prompt text")
    group.add_argument("--prompt-ids", help="comma-separated token ids, no tokenizer needed")
    p.add_argument("--max-new-tokens", type=int, default=32)
    p.add_argument("--no-visual", action="store_true",
                   help="drop the leading visual tokens (see --num-visual-tokens)")
    p.add_argument("--num-visual-tokens", type=int, default=0,
                   help="how many leading prompt tokens are visual stand-ins")
    p.add_argument("--device", default="cpu")
    p.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    prompt_text = args.prompt
    if args.prompt_file:
        with open(args.prompt_file, "r", encoding="utf-8") as f:
            prompt_text = f.read()
    prompt_ids = None
    if args.prompt_ids:
        prompt_ids = [int(t) for t in args.prompt_ids.split(",") if t.strip()]
    spec = ExportSpec(
        model=args.model,
        output_path=args.out,
        prompt_text=prompt_text,
        prompt_ids=prompt_ids,
        max_new_tokens=args.max_new_tokens,
        include_visual=not args.no_visual,
        num_visual_tokens=args.num_visual_tokens,
        device=args.device,
    )
    try:
        n = export(spec)
    except (UnsupportedModelError, ValueError, OSError) as e:
        print(f"trace-export: {e}", file=sys.stderr)
        return 2
    print(f"wrote {n} bytes to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
