"""Walk a material from a mirror to itself and watch the noising process.

Every inversion chain anneals along a straight path in material space that
starts at the shared near-mirror endpoint and ends at the object's actual
material; the number of steps grows with the distance to the mirror. This
demo renders each step of that path for one material, once clean and once
with the keyed Gaussian noise used during sampling, and writes the two
strips stacked into a single image: top row clean, bottom row noisy,
leftmost column the mirror endpoint.

Usage: python demos/schedule_walk.py [-o DIR] [--seed N] [--size N]
"""

import argparse
import os

import numpy as np

from refmap import envmap as em
from refmap.brdf import ReflectanceParams
from refmap.diffusion import forward_sample

from material_grid import bandlimited_env

GUTTER = 3


def strip(maps, size):
    tiles = []
    for rmap in maps:
        tiles.append(rmap.values)
        tiles.append(np.zeros((size, GUTTER, 3)))
    return np.concatenate(tiles[:-1], axis=1)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("-o", "--output", default="demo_out/schedule_walk")
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--size", type=int, default=72, help="map resolution per tile")
    args = ap.parse_args()
    os.makedirs(args.output, exist_ok=True)

    rng = np.random.default_rng(args.seed)
    env = bandlimited_env(rng, 6, 24)
    psi = ReflectanceParams(0.0, 0.8, 0.3)

    clean = forward_sample(env, [psi], sigma=0.0, seed=args.seed,
                           resolution=args.size, k_max=8)
    noisy = forward_sample(env, [psi], sigma=0.1, seed=args.seed,
                           resolution=args.size, k_max=8)
    table = clean.schedule.table[0]
    for k, step in enumerate(table):
        print(f"k={k}: metallic={step.metallic:.2f} "
              f"roughness={step.roughness:.2f} specular={step.specular:.2f}")

    top = strip(clean.maps[0], args.size)
    bottom = strip(noisy.maps[0], args.size)
    sheet = np.concatenate(
        [top, np.zeros((GUTTER, top.shape[1], 3)), bottom], axis=0
    )
    em.write_png(os.path.join(args.output, "walk.png"), em.tonemap_ldr(sheet))
    print(f"wrote {clean.schedule.k_total + 1} schedule steps to {args.output}/")


if __name__ == "__main__":
    main()
