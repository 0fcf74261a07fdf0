"""Shrink V3-Large toward a latency target with the synthetic capacity oracle."""

import argparse

from mnv3.cost import count, pixel1_profile
from mnv3.model import build
from mnv3.search import CapacityOracle, SearchConfig, netadapt_run, profile_latency_fn, trajectory_to_csv
from mnv3.spec import builtin_spec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", default="v3-large")
    ap.add_argument("--fraction", type=float, default=0.85, help="target as a fraction of seed latency")
    ap.add_argument("--out", help="trajectory CSV path")
    args = ap.parse_args()
    seed = builtin_spec(args.model)
    latency = profile_latency_fn(pixel1_profile())
    target = args.fraction * latency(seed)
    result = netadapt_run(seed, CapacityOracle(), latency, SearchConfig(target))
    for spec in result.specs:
        build(spec)
    text = trajectory_to_csv(result.trajectory)
    print(text, end="")
    print(f"# seed {latency(seed):.2f} ms -> {result.state.latency:.2f} ms "
          f"(target {target:.2f}, reached {result.reached}), "
          f"MAdds {count(seed).total_madds / 1e6:.1f}M -> {count(result.spec).total_madds / 1e6:.1f}M, "
          f"{len(result.specs)} specs built")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)


if __name__ == "__main__":
    main()
