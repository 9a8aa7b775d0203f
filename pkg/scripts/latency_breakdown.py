"""Per-bucket latency and weight traffic for static and dynamic runs.

    python scripts/latency_breakdown.py --max-new 128
"""

import argparse
import math

import numpy as np

from flexquant.analyzer import build_ladder_plan
from flexquant.corpus import corpus_prompts
from flexquant.engine import GenerationConfig, generate, generate_static, traffic_report
from flexquant.model import FP_BITS, ModelConfig, TinyTransformer
from flexquant.scheduler import ABSOLUTE, SchedulerConfig


def summarise(name, trace):
    rep = traffic_report(trace)
    tpot = np.mean([r.elapsed_ns for r in trace.records[1:]]) / 1e6
    buckets = " ".join(f"{k}={v / rep.measured_total_ns:6.1%}" for k, v in rep.buckets_ns.items())
    print(f"{name:<14} tpot={tpot:6.2f}ms  bytes/token={rep.total_weight_bytes / len(trace):>10.0f}  "
          f"coverage={rep.coverage:.4f}  {buckets}")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--max-new", type=int, default=128)
    ap.add_argument("--window", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    model = TinyTransformer.random(ModelConfig(), seed=args.seed)
    plan = build_ladder_plan(model.linear_weights())
    prompt = corpus_prompts(20, 32)[0]
    cfg = GenerationConfig(max_new_tokens=args.max_new)
    for rung in (FP_BITS, 8, 4):
        summarise(f"static {rung}", generate_static(prompt, model, rung, cfg)[1])
    summarise("dynamic", generate(prompt, model, plan, cfg)[1])
    forced = SchedulerConfig(window_len=args.window, theta=math.inf, threshold_mode=ABSOLUTE)
    summarise("forced", generate(prompt, model, plan, GenerationConfig(args.max_new, scheduler=forced))[1])


if __name__ == "__main__":
    main()
