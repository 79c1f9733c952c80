"""Why an asymmetric loss picks a surface instead of averaging two.

A pixel on a depth edge is ambiguous: with probability p1 its true depth is
the foreground d1, otherwise the background d2. This script tabulates the
expected loss of a constant prediction for a few losses and shows where each
one is minimised.

    python demos/expected_loss.py --p1 0.3 --gamma 2
"""

import argparse

import numpy as np

from twise.ambiguity import AmbiguityModel, expected_loss, gamma_threshold, minimizer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--p1", type=float, default=0.3, help="foreground probability")
    ap.add_argument("--gamma", type=float, default=2.0)
    ap.add_argument("--d1", type=float, default=10.0)
    ap.add_argument("--d2", type=float, default=20.0)
    args = ap.parse_args()

    model = AmbiguityModel.binary(args.d1, args.d2, args.p1)
    grid = np.linspace(args.d1 - 2, args.d2 + 2, 9)
    print(f"ambiguity: d={model.depths}, p={model.probs}\n")
    print("prediction " + "".join(f"{k:>10s}" for k in ("sq", "abs", "ale", "rale")))
    for x in grid:
        vals = [expected_loss(model, k, args.gamma, x) for k in ("sq", "abs", "ale", "rale")]
        print(f"{x:10.2f} " + "".join(f"{v:10.3f}" for v in vals))

    print()
    for kind in ("sq", "abs", "ale", "rale"):
        m = minimizer(model, kind, args.gamma)
        tie = " (tie)" if m.is_tie else ""
        print(f"{kind:>4s} is minimised at {m.d_star:.3f}{tie}")

    # squared error lands between the surfaces; the linear losses sit on one
    th = gamma_threshold(args.p1, 1 - args.p1)
    th_r = gamma_threshold(args.p1, 1 - args.p1, "rale")
    print(f"\nALE returns the foreground once gamma > {th:.3f}; "
          f"RALE returns the background once gamma > {th_r:.3f}")


if __name__ == "__main__":
    main()
