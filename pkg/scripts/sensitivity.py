"""Worst-case change in differential height when ISA constants are perturbed."""

import argparse
import sys

from baroloc.atmo import DEFAULT_PERTURBATIONS, isa_sensitivity, sensitivity_scenario


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--max-dh", type=float, default=15.0, help="largest |delta h| in the scenario, m")
    p.add_argument("--lapse", type=float, default=DEFAULT_PERTURBATIONS["lapse_rate"])
    p.add_argument("--gas", type=float, default=DEFAULT_PERTURBATIONS["gas_constant"])
    p.add_argument("--gravity", type=float, default=DEFAULT_PERTURBATIONS["gravity"])
    args = p.parse_args(argv)
    rows = sensitivity_scenario(max_dh=args.max_dh)
    pert = {"lapse_rate": args.lapse, "gas_constant": args.gas, "gravity": args.gravity}
    for name, frac in pert.items():
        print(f"{name:<13} +/-{frac:<7g} {isa_sensitivity(rows, {name: frac}) * 100:8.3f} cm")
    print(f"{'all':<13} {'':<9} {isa_sensitivity(rows, pert) * 100:8.3f} cm  (|dh| <= {args.max_dh:g} m)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
