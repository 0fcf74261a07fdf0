"""Counted MAdds/params for every reference V3 configuration, next to the published values."""

import argparse

from mnv3.cost import count
from mnv3.reference import V3_REFERENCE
from mnv3.spec import resolve_spec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tol", type=float, default=0.03)
    args = ap.parse_args()
    print(f"{'config':<22} {'MAdds':>8} {'ref':>6} {'err':>7}   {'params':>7} {'ref':>5} {'err':>7}")
    for model, res, mult, madds, params, _ in V3_REFERENCE:
        r = count(resolve_spec(model, mult, res))
        m, p = r.total_madds / 1e6, r.total_params / 1e6
        em, ep = m / madds - 1, p / params - 1
        flag = "" if max(abs(em), abs(ep)) <= args.tol else "  <-- outside tolerance"
        print(f"{model + f' {res}/{mult:g}':<22} {m:>8.1f} {madds:>6} {em:>+7.1%}   "
              f"{p:>7.3f} {params:>5} {ep:>+7.1%}{flag}")


if __name__ == "__main__":
    main()
