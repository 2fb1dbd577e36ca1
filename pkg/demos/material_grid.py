"""One illumination seen through a grid of materials.

Renders the same random environment into a sphere-of-normals map for every
(metallic, roughness) pair on a small grid and writes a single contact
sheet. Reading across a row shows the specular lobe widening until the
mirror image dissolves into diffuse shading; switching rows shows how
metals tint the reflection by their own albedo while dielectrics keep a
separate white highlight.

Usage: python demos/material_grid.py [-o DIR] [--seed N] [--size N]
"""

import argparse
import os

import numpy as np

from refmap import envmap as em
from refmap import render, sh
from refmap.brdf import ReflectanceParams

ROUGHNESS = (0.05, 0.2, 0.4, 0.7, 1.0)
METALLIC = (0.0, 1.0)
GUTTER = 3


def bandlimited_env(rng, degree, height):
    coeffs = rng.normal(size=(3, (degree + 1) ** 2))
    coeffs[:, 0] = np.abs(coeffs[:, 0]) + 4.0 * degree + 4.0
    field = sh.reconstruct(sh.ShCoefficients(degree, coeffs), height, 2 * height)
    return em.EnvironmentMap(np.clip(field, 1e-3, None))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("-o", "--output", default="demo_out/material_grid")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--size", type=int, default=96, help="map resolution per tile")
    args = ap.parse_args()
    os.makedirs(args.output, exist_ok=True)

    rng = np.random.default_rng(args.seed)
    env = bandlimited_env(rng, 6, 32)
    albedo = np.array([0.9, 0.6, 0.3])

    rows = []
    for metallic in METALLIC:
        tiles = []
        for roughness in ROUGHNESS:
            psi = ReflectanceParams(metallic, roughness, 0.5)
            rmap = render.render_reflectance_map(psi, albedo, env, args.size)
            tiles.append(rmap.values)
            print(f"rendered metallic={metallic:.0f} roughness={roughness:.2f}")
            tiles.append(np.zeros((args.size, GUTTER, 3)))
        rows.append(np.concatenate(tiles[:-1], axis=1))
        rows.append(np.zeros((GUTTER, rows[-1].shape[1], 3)))
    sheet = np.concatenate(rows[:-1], axis=0)

    em.write_png(os.path.join(args.output, "grid.png"), em.tonemap_ldr(sheet))
    em.write_png(os.path.join(args.output, "environment.png"), em.tonemap_ldr(env))
    em.write_pfm(os.path.join(args.output, "environment.pfm"), env.data)
    print(f"wrote contact sheet and environment to {args.output}/")


if __name__ == "__main__":
    main()
