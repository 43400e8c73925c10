"""Write the energy-pumping demo controller as a 337-value weight file.

    python scripts/make_demo_controller.py --out scripts/configs/demo_controller.json
"""

import argparse
from pathlib import Path

from neural_bridge.envs import demo_controller, save_controller


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="scripts/configs/demo_controller.json")
    ap.add_argument("--gain", type=float, default=200.0, help="velocity gain of the first hidden unit")
    args = ap.parse_args()
    ctrl = demo_controller(args.gain)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_controller(ctrl, out)
    print(f"wrote {out} ({ctrl.n_params} parameters, sha256 {ctrl.checksum[:16]}...)")


if __name__ == "__main__":
    main()
