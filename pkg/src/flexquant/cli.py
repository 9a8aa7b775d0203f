"""Command-line entry point: ``flexquant <command> ...``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import corpus
from .analyzer import DEFAULT_BINS, SwitchPlan, build_ladder_plan
from .checkpoint import load_model, save_model
from .engine import (
    DecodeTrace,
    GenerationConfig,
    generate,
    generate_static,
    sweep_corpus,
    sweep_csv,
    traffic_report,
)
from .errors import FlexQuantError
from .metrics import evaluate
from .model import FP_BITS, ModelConfig, TinyTransformer
from .quantizer import ASYMMETRIC, MODES
from .scheduler import ABSOLUTE, PREFILL, SchedulerConfig

REPORT_COLUMNS = (
    "token_index", "token_id", "ppl_entropy", "fault_tolerance", "moving_average",
    "effective_bits", "weight_bytes_touched", "elapsed_ns", "switch_layer", "switch_from", "switch_to",
)


def _rung(text: str) -> int:
    return FP_BITS if text.lower() in ("fp", "fp16", "16") else int(text)


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _read_prompt(args) -> list[int]:
    if args.prompt_file:
        return corpus.encode(Path(args.prompt_file).read_text(encoding="utf-8"))
    return corpus.corpus_prompts(args.corpus_prompt + 1, args.prompt_len)[args.corpus_prompt]


def _gen_config(args) -> GenerationConfig:
    sched = SchedulerConfig(
        window_len=args.window,
        theta=args.theta,
        threshold_mode=args.threshold_mode,
        layers_per_switch=args.layers_per_switch,
    )
    return GenerationConfig(max_new_tokens=args.max_new, eos_token=args.eos, scheduler=sched,
                            start_bits=_rung(args.start_rung))


def _add_generation_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="weights container file")
    p.add_argument("--plan", help="switch plan file (omit to analyze on the fly)")
    p.add_argument("--prompt-file", help="UTF-8 text prompt; defaults to a corpus slice")
    p.add_argument("--corpus-prompt", type=int, default=0, help="corpus slice index when no prompt file")
    p.add_argument("--prompt-len", type=int, default=32)
    p.add_argument("--max-new", type=int, default=64)
    p.add_argument("--theta", type=float, default=1.0)
    p.add_argument("--threshold-mode", choices=(PREFILL, ABSOLUTE), default=PREFILL)
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--layers-per-switch", type=int, default=1)
    p.add_argument("--start-rung", default="8", help="fp or 8")
    p.add_argument("--eos", type=int, default=None)


def _load_plan(args, model: TinyTransformer) -> SwitchPlan:
    if args.plan:
        return SwitchPlan.load(args.plan)
    return build_ladder_plan(model.linear_weights(), mode=model.config.quant_mode)


def cmd_init(args) -> int:
    cfg = ModelConfig(d_model=args.d_model, n_heads=args.n_heads, n_layers=args.n_layers,
                      ffn_dim=args.ffn_dim, max_seq_len=args.max_seq_len, quant_mode=args.quant_mode)
    model = TinyTransformer.random(cfg, seed=args.seed, grid_exact=args.grid_exact)
    save_model(model, args.out)
    print(f"wrote {args.out}: {len(model.linears)} linear layers, "
          f"{sum(l.param_count for l in model.linears.values())} quantizable parameters")
    return 0


def cmd_analyze(args) -> int:
    model = load_model(args.model)
    ladder = [FP_BITS] + sorted(set(_int_list(args.bits)), reverse=True)
    plan = build_ladder_plan(model.linear_weights(), ladder, args.bins, model.config.quant_mode)
    plan.save(args.out)
    print(f"wrote {args.out}: {len(plan)} transitions over ladder {ladder}")
    return 0


def cmd_generate(args) -> int:
    model = load_model(args.model)
    plan = _load_plan(args, model)
    prompt = _read_prompt(args)
    seq, trace = generate(prompt, model, plan, _gen_config(args))
    if args.trace:
        trace.write(args.trace)
    out = seq[len(prompt):]
    print(json.dumps({
        "generated": out,
        "text": corpus.decode(out),
        # strict JSON has no infinity literal
        "threshold": trace.threshold if math.isfinite(trace.threshold) else repr(trace.threshold),
        "switches": len(trace.switch_events()),
        "final_effective_bits": model.effective_bits(),
    }, allow_nan=False))
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    plan = _load_plan(args, model)
    prompt = _read_prompt(args)
    cfg = _gen_config(args)
    ref, _ = generate_static(prompt, model, FP_BITS, cfg)
    seq, trace = generate(prompt, model, plan, cfg)
    text = corpus.corpus_tokens() if not args.eval_file else corpus.encode(Path(args.eval_file).read_text())
    report = evaluate(trace, seq[len(prompt):], ref[len(prompt):], model, text)
    sys.stdout.write(report.to_text())
    return 0


def cmd_bench(args) -> int:
    model = load_model(args.model)
    plan = _load_plan(args, model)
    prompts = corpus.corpus_prompts(args.prompts, args.prompt_len)
    rows = sweep_corpus(prompts, model, plan, _int_list(args.sweep), _gen_config(args))
    table = sweep_csv(rows)
    if args.out:
        Path(args.out).write_text(table)
    sys.stdout.write(table)
    if args.breakdown:
        _, trace = generate(prompts[0], model, plan, _gen_config(args))
        rep = traffic_report(trace)
        print(f"# latency breakdown over {len(trace)} tokens (ns): "
              + ", ".join(f"{k}={v}" for k, v in rep.buckets_ns.items())
              + f"; measured={rep.measured_total_ns}; ppl_entropy_share={rep.ppl_entropy_share:.4f}")
    return 0


def trace_to_csv(trace: DecodeTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in trace:
        events = r.switch_event or [None]
        for ev in events:
            w.writerow([
                r.token_index, r.token_id, r.ppl_entropy, r.fault_tolerance,
                "" if r.moving_average is None else r.moving_average,
                r.effective_bits, r.weight_bytes_touched, r.elapsed_ns,
                ev["layer_id"] if ev else "", ev["from_bits"] if ev else "", ev["to_bits"] if ev else "",
            ])
    return buf.getvalue()


def cmd_report(args) -> int:
    table = trace_to_csv(DecodeTrace.read(args.trace))
    if args.out:
        Path(args.out).write_text(table)
    else:
        sys.stdout.write(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flexquant", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write a seeded random fixture model")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-exact", action="store_true")
    p.add_argument("--quant-mode", choices=MODES, default=ASYMMETRIC)
    p.add_argument("--d-model", type=int, default=ModelConfig.d_model)
    p.add_argument("--n-heads", type=int, default=ModelConfig.n_heads)
    p.add_argument("--n-layers", type=int, default=ModelConfig.n_layers)
    p.add_argument("--ffn-dim", type=int, default=ModelConfig.ffn_dim)
    p.add_argument("--max-seq-len", type=int, default=ModelConfig.max_seq_len)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("analyze", help="per-layer KL analysis -> switch plan")
    p.add_argument("--model", required=True)
    p.add_argument("--bits", default="8,4")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("generate", help="dynamic-precision greedy generation")
    _add_generation_args(p)
    p.add_argument("--trace", help="write per-token JSON-lines trace here")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="generation metrics against the fp reference")
    _add_generation_args(p)
    p.add_argument("--eval-file", help="text for perplexity (default: bundled corpus)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="switching-speed sweep")
    _add_generation_args(p)
    p.add_argument("--sweep", default="1,5,10,20,40")
    p.add_argument("--prompts", type=int, default=20)
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--breakdown", action="store_true", help="also print a latency breakdown")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="render a trace file as CSV")
    p.add_argument("--trace", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FlexQuantError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
