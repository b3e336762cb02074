"""Train the embedding head on distinct-shapes pairs and report held-out accuracy per chunk."""
import argparse

from vpstrack.instance_tracker import TrainConfig, roi_accuracy, save_checkpoint, train
from vpstrack.simulator import distinct_shapes_pairs, training_pairs


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--train-pairs", type=int, default=200)
    ap.add_argument("--held-out", type=int, default=50)
    ap.add_argument("--epochs", type=int, default=500)
    ap.add_argument("--chunk", type=int, default=50)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--d-embed", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="head.vpse")
    args = ap.parse_args()

    data = training_pairs(distinct_shapes_pairs(args.train_pairs, seed=args.seed + 1))
    held = training_pairs(distinct_shapes_pairs(args.held_out, seed=args.seed + 2))
    cfg = TrainConfig(lr=args.lr, epochs=args.chunk, seed=args.seed, d_embed=args.d_embed)
    params = None
    print("epoch\tloss\theld_out_acc")
    for done in range(args.chunk, args.epochs + 1, args.chunk):
        res = train(data, cfg, params)
        params = res.params
        print(f"{done}\t{res.loss_trace[-1]:.6f}\t{roi_accuracy(held, params):.4f}")
    save_checkpoint(params, args.out)
    print(f"saved {args.out}")


if __name__ == "__main__":
    main()
