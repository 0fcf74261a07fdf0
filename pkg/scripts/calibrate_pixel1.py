"""Fit the linear latency model to the reference Pixel-1 timings and report held-out error."""

import argparse

from mnv3.cost import calibrate_profile, estimate_latency, reference_pairs
from mnv3.reference import V3_REFERENCE


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", help="write the full-data profile here")
    args = ap.parse_args()
    pairs = reference_pairs()
    print(f"{'config':<22} {'measured':>9} {'held-out':>9} {'err':>7}")
    for i, (model, res, mult, *_rest) in enumerate(V3_REFERENCE):
        profile = calibrate_profile(pairs[:i] + pairs[i + 1:])
        report, ms = pairs[i]
        est = estimate_latency(report, profile)
        print(f"{model + f' {res}/{mult:g}':<22} {ms:>9.1f} {est:>9.2f} {est / ms - 1:>+7.1%}")
    full = calibrate_profile(pairs, name="pixel1")
    print()
    print(full.dumps(), end="")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(full.dumps())


if __name__ == "__main__":
    main()
