"""Tracker grid {instance, pixel, hybrid} x {+-mutual, +-temporal} over the presets."""
import argparse
import json

from vpstrack import experiments
from vpstrack.instance_tracker import load_checkpoint
from vpstrack.simulator import PRESETS


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", help="trained head; a 50-epoch head is trained if omitted")
    ap.add_argument("--flow-sigma", type=float, default=1.5)
    ap.add_argument("--presets", default=",".join(PRESETS))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write rows here")
    args = ap.parse_args()

    params = load_checkpoint(args.checkpoint) if args.checkpoint else experiments.train_head(epochs=50, seed=args.seed)
    presets = args.presets.split(",")
    rows = experiments.ablate_trackers(params, presets, args.flow_sigma, seed=args.seed)
    print("mode\tmutual\ttemporal\t" + "\t".join(presets) + "\tmean")
    for r in rows:
        vals = "\t".join(f"{r['vpq'][p]:.2f}" for p in presets)
        print(f"{r['mode']}\t{int(r['mutual_check'])}\t{int(r['temporal'])}\t{vals}\t{r['mean']:.2f}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=1, sort_keys=True)


if __name__ == "__main__":
    main()
