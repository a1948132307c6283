"""Fit population chi_para of five iron-rich nuclei against post-mortem iron content.

    python scripts/reproduce_iron_regression.py [--out regression.json]
"""
import argparse
import json

import numpy as np

from chisep_atlas.roi import IRON_NUCLEI, fit_regression, reference_iron_points


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", help="write the fit as JSON here")
    args = ap.parse_args()

    x, y = reference_iron_points()
    res = fit_regression(x, y)
    print(f"{'nucleus':<18}{'iron mg/100g':>14}{'chi_para ppb':>14}{'fitted':>10}")
    for name, xi, yi, fi in zip(IRON_NUCLEI, x, y, res.predict(x)):
        print(f"{name:<18}{xi:>14.2f}{yi:>14.1f}{fi:>10.1f}")
    print()
    print(f"chi_para = {res.slope:.2f} x iron {res.intercept:+.1f}   (R^2 = {res.r_squared:.3f}, n = {res.n})")
    print(f"slope      95% CI [{res.ci95_slope[0]:.2f}, {res.ci95_slope[1]:.2f}]  p = {res.p_slope:.2g}")
    print(f"intercept  95% CI [{res.ci95_intercept[0]:.1f}, {res.ci95_intercept[1]:.1f}]  p = {res.p_intercept:.2g}")
    grid = np.linspace(x.min(), x.max(), 5)
    lo, hi = res.confidence_band(grid)
    print("\nconfidence band of the mean line:")
    for g, a, b in zip(grid, lo, hi):
        print(f"  iron {g:5.2f}: [{a:6.1f}, {b:6.1f}] ppb")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(res.to_dict(), fh, indent=1)


if __name__ == "__main__":
    main()
