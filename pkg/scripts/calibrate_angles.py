"""Regenerate src/hcm/data/angle_calibration.toml.

Computes the angle-mapping constant for every (n_clusters, r_tau, zeta)
combination used by the built-in scenarios, plus any extra combinations
given on the command line as n:r_tau:zeta.
"""

import argparse
from pathlib import Path

from hcm.clusters import calibrate_angle_constant
from hcm.scenarios import builtin_scenarios

OUT = Path(__file__).resolve().parents[1] / "src" / "hcm" / "data" / "angle_calibration.toml"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("extra", nargs="*", help="n:r_tau:zeta triples")
    ap.add_argument("--draws", type=int, default=20000)
    args = ap.parse_args()

    combos = set()
    for sc in builtin_scenarios().values():
        for p in (sc.los, sc.nlos):
            combos.add((p.n_clusters, p.r_tau, p.per_cluster_shadow_sigma))
    for item in args.extra:
        n, r, z = item.split(":")
        combos.add((int(n), float(r), float(z)))

    lines = ["# Angle-mapping constant C per (n_clusters, r_tau, zeta).",
             "# generated by scripts/calibrate_angles.py; median spread matches sigma.", ""]
    for n, r, z in sorted(combos):
        c = calibrate_angle_constant(n, r, z, draws=args.draws)
        lines += ["[[entry]]", f"n_clusters = {n}", f"r_tau = {r}", f"zeta = {z}", f"C = {c:.6f}", ""]
        print(f"n={n} r_tau={r} zeta={z}: C={c:.6f}")
    OUT.write_text("\n".join(lines), encoding="utf-8")


if __name__ == "__main__":
    main()
