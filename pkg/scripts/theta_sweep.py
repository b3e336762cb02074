"""VPQ on a preset as the temporal-rescue threshold varies."""
import argparse

from vpstrack import experiments
from vpstrack.instance_tracker import load_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default="occlusion_reappear")
    ap.add_argument("--checkpoint")
    ap.add_argument("--flow-sigma", type=float, default=0.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    params = load_checkpoint(args.checkpoint) if args.checkpoint else experiments.train_head(epochs=50, seed=args.seed)
    rows = experiments.theta_sweep(params, args.preset, experiments.THETAS, args.flow_sigma, seed=args.seed)
    print("mode\t" + "\t".join(f"theta={t}" for t in experiments.THETAS) + "\tspread")
    for r in rows:
        v = [r["vpq"][t] for t in experiments.THETAS]
        print(r["mode"] + "\t" + "\t".join(f"{x:.2f}" for x in v) + f"\t{max(v) - min(v):.3f}")


if __name__ == "__main__":
    main()
