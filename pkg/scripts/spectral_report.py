"""Compare the spectral shape of perturbation sets against their clean images.

Loads a UEDS dataset and one or more UEPD perturbation files, computes the
radially averaged power spectrum of each and the relative spectral density
R(f) = log2(P_delta / P_x), and prints a per-band summary. Camouflaged noise
concentrates more of its relative power in the low-frequency bands.
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ueforge.data import load_dataset
from ueforge.diagnostics import (mean_power_spectrum, radial_profile,
                                 relative_spectral_density)
from ueforge.generation import load_perturbations


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data", required=True, help="UEDS dataset path")
    parser.add_argument("--perturb", nargs="+", required=True,
                        help="UEPD files to profile (label=path or bare path)")
    parser.add_argument("--out", default=None, help="optional CSV output")
    args = parser.parse_args()

    ds = load_dataset(args.data)
    p_x = radial_profile(mean_power_spectrum(ds.images))
    n_bins = len(p_x.power)
    low = max(1, n_bins // 4)

    lines = [("label", "bin", "psd", "rsd")]
    print(f"{len(ds)} images, {n_bins} radial bins, low band = bins [0,{low})")
    for item in args.perturb:
        label, _, path = item.rpartition("=")
        label = label or os.path.basename(path)
        ps = load_perturbations(path)
        p_d = radial_profile(mean_power_spectrum(ps.deltas))
        rsd = relative_spectral_density(p_d, p_x)
        for b in range(n_bins):
            lines.append((label, b, f"{p_d.power[b]:.6e}", f"{rsd[b]:.6f}"))
        valid = ~np.isnan(rsd)
        low_mean = np.mean(rsd[:low][valid[:low]])
        high_mean = np.mean(rsd[low:][valid[low:]])
        print(f"  {label}: mean R(f) low {low_mean:+.3f}  "
              f"high {high_mean:+.3f}  (low - high {low_mean - high_mean:+.3f})")

    if args.out:
        import csv
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh).writerows(lines)
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
