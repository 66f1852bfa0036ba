"""Regenerate the bundled demonstration CSVs under src/stablenode/data/shapes."""

from stablenode.dataset import bundled_shapes_dir, handwriting_shape, save_demos

SEEDS = {"angle": 11, "hook": 23}


def main():
    for name, seed in SEEDS.items():
        demos = handwriting_shape(name, n_demos=7, dt=0.01, seed=seed)
        save_demos(bundled_shapes_dir() / name, demos)
        print(name, [len(tr) for tr in demos])


if __name__ == "__main__":
    main()
