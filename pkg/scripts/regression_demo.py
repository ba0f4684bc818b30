"""Tune the flips of a fixed 70-140 degree echo and compare with the grid optimum."""

import argparse

import numpy as np

from seqsearch.gridsearch import grid_preset, run_grid
from seqsearch.optim import TrainConfig, train
from seqsearch.population import sample_population
from seqsearch.scheduler import argmax_path, fixed_space, realize
from seqsearch.sequence import describe, hahn_echo


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--batch", type=int, default=100)
    ap.add_argument("--population", type=int, default=10_000)
    args = ap.parse_args()

    ref = run_grid(grid_preset("E1"), sample_population(2000, 0), "E1", top_k=1).optimum
    print(f"grid optimum: ({ref['theta1']:g}, {ref['theta2']:g}) loss {ref['loss']:.6g}")

    space = fixed_space(hahn_echo(70, 140, 180))
    cfg = TrainConfig(epochs=args.epochs, batch=args.batch, population=args.population, seed=0)

    def progress(row):
        if row["epoch"] % 25 == 0:
            flips = np.degrees(space.flip[:, 0])
            print(f"epoch {row['epoch']:4d}  loss {row['total']:.6f}  flips ({flips[0]:.2f}, {flips[1]:.2f})",
                  flush=True)

    train(space, sample_population(args.population, 1), cfg, progress=progress)
    print("final:", describe(realize(space, argmax_path(space))))


if __name__ == "__main__":
    main()
