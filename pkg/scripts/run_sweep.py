"""Switching-speed sweep on the fixture model.

Forces one layer down a rung every ``speed`` tokens and scores each run
against fp greedy output, averaged over corpus prompts. Writes a CSV.

    python scripts/run_sweep.py --speeds 1,5,10,20,40 --out sweep.csv
"""

import argparse
import sys

from flexquant.analyzer import build_ladder_plan
from flexquant.corpus import corpus_prompts
from flexquant.engine import GenerationConfig, sweep_corpus, sweep_csv
from flexquant.model import ModelConfig, TinyTransformer


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--speeds", default="1,5,10,20,40")
    ap.add_argument("--prompts", type=int, default=20)
    ap.add_argument("--prompt-len", type=int, default=32)
    ap.add_argument("--max-new", type=int, default=64)
    ap.add_argument("--start-rung", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out")
    args = ap.parse_args(argv)

    model = TinyTransformer.random(ModelConfig(), seed=args.seed)
    plan = build_ladder_plan(model.linear_weights())
    cfg = GenerationConfig(max_new_tokens=args.max_new, start_bits=args.start_rung)
    rows = sweep_corpus(corpus_prompts(args.prompts, args.prompt_len), model, plan,
                        [int(s) for s in args.speeds.split(",")], cfg)
    table = sweep_csv(rows)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)
    sys.stdout.write(table)


if __name__ == "__main__":
    main()
