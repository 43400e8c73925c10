"""MountainCar benchmark: P_0(total reward <= gamma) for a fixed neural controller.

With the verified controller file (not shipped) and gamma = 90 this is the
published setting; without it, build the demo controller first:

    python scripts/make_demo_controller.py
    python scripts/run_mountaincar.py --controller scripts/configs/demo_controller.json --gamma 81
"""

import argparse
import json

from neural_bridge import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--controller", required=True, help="337-value controller weight file")
    ap.add_argument("--gamma", type=float, default=90.0)
    ap.add_argument("--gamma-test", type=float, nargs="+")
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--methods", nargs="+", default=["nb"], choices=["nb", "b", "ams", "mc"])
    ap.add_argument("--budget", type=int, default=101_000, help="shared query budget for AMS and MC")
    ap.add_argument("--p-reference", type=float, default=1.6e-5, help="rough p used to size AMS")
    ap.add_argument("--truth", help="truth JSON written by `estimate truth`")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="results/mountaincar")
    args = ap.parse_args()

    raw = {
        "schema_version": 1, "name": "mountaincar", "environment": "mountaincar", "gamma": args.gamma,
        "gamma_test": args.gamma_test or [args.gamma], "methods": args.methods, "trials": args.trials,
        "seed": args.seed, "workers": args.workers, "output_dir": args.out, "controller": args.controller,
        "budget": args.budget, "p_reference": args.p_reference,
    }
    if args.truth:
        raw["truth"] = args.truth
    res = cli.run_experiment(cli.ExperimentConfig.from_dict(raw))
    for row in res["summary"]:
        print(json.dumps(cli.clean_json(row)))
    print(f"reports in {res['out']}")


if __name__ == "__main__":
    main()
