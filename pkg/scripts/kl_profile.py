"""Per-layer KL at 8 and 4 bits for the fixture model, in plan order."""

import argparse

from flexquant.analyzer import analyze_model, build_ladder_plan
from flexquant.model import ModelConfig, TinyTransformer
from flexquant.quantizer import MODES


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--bins", type=int, default=2048)
    ap.add_argument("--mode", choices=MODES, default=MODES[0])
    args = ap.parse_args(argv)

    model = TinyTransformer.random(ModelConfig(quant_mode=args.mode), seed=args.seed)
    weights = model.linear_weights()
    kl = {b: {r.layer_id: r.kl for r in analyze_model(weights, b, args.bins, args.mode)} for b in (8, 4)}
    print(f"{'layer':<22}{'kl@8':>12}{'kl@4':>12}{'ratio':>8}")
    for e in build_ladder_plan(weights, bins=args.bins, mode=args.mode).for_start(16)[: len(weights)]:
        k = e.layer_id
        print(f"{k:<22}{kl[8][k]:>12.5f}{kl[4][k]:>12.5f}{kl[4][k] / kl[8][k]:>8.1f}")


if __name__ == "__main__":
    main()
