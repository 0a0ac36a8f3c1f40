#!/usr/bin/env python3
"""Writes the bundled 256x256 toy images to data/toy/hr (deterministic)."""

import argparse
import pathlib

import numpy as np
from PIL import Image, ImageDraw

SIZE = 256


def value_noise(rng, octaves=5, base=4):
    """Perlin-like texture: bicubically upsampled random grids, octave-summed."""
    out = np.zeros((SIZE, SIZE))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = base * 2**o
        grid = rng.random((cells, cells)).astype(np.float32)
        up = Image.fromarray(grid, mode="F").resize((SIZE, SIZE), Image.BICUBIC)
        out += amp * np.asarray(up, dtype=np.float64)
        total += amp
        amp *= 0.55
    out /= total
    return (out - out.min()) / (out.max() - out.min())


def colorize(t, c0, c1):
    t = t[..., None]
    return (1 - t) * np.array(c0) + t * np.array(c1)


def checker(rng):
    y, x = np.mgrid[0:SIZE, 0:SIZE]
    cell = 16
    t = ((x // cell + y // cell) % 2).astype(np.float64)
    return colorize(t, (0.1, 0.15, 0.5), (0.95, 0.85, 0.3))


def gradient(rng):
    y, x = np.mgrid[0:SIZE, 0:SIZE] / (SIZE - 1)
    return np.stack([x, 0.5 * (x + y), 1 - y], axis=-1)


def rings(rng):
    y, x = np.mgrid[0:SIZE, 0:SIZE] - SIZE / 2
    r = np.hypot(x, y)
    t = 0.5 + 0.5 * np.sin(r / 3.5)
    return colorize(t, (0.9, 0.2, 0.2), (0.2, 0.9, 0.8))


def texture(rng):
    return np.stack([value_noise(rng) for _ in range(3)], axis=-1)


def stripes(rng):
    y, x = np.mgrid[0:SIZE, 0:SIZE]
    t = 0.5 + 0.5 * np.sign(np.sin((x * 0.8 + y * 0.6) / 4.0))
    return colorize(t, (0.05, 0.05, 0.05), (0.9, 0.9, 0.95))


def shapes(rng, count=40):
    img = Image.new("RGB", (SIZE * 4, SIZE * 4), (128, 128, 128))
    draw = ImageDraw.Draw(img)
    for _ in range(count):
        x0, y0 = rng.integers(0, SIZE * 4, 2)
        w, h = rng.integers(40, 260, 2)
        color = tuple(int(c) for c in rng.integers(0, 256, 3))
        if rng.random() < 0.5:
            draw.ellipse([x0, y0, x0 + w, y0 + h], fill=color)
        else:
            draw.rectangle([x0, y0, x0 + w, y0 + h], fill=color)
    # Supersampled drawing gives antialiased edges.
    img = img.resize((SIZE, SIZE), Image.LANCZOS)
    return np.asarray(img, dtype=np.float64) / 255.0


def mixed(rng):
    t = value_noise(rng, octaves=4, base=8)
    y, x = np.mgrid[0:SIZE, 0:SIZE]
    board = ((x // 24 + y // 24) % 2).astype(np.float64)
    return colorize(0.6 * board + 0.4 * t, (0.2, 0.1, 0.05), (1.0, 0.95, 0.8))


GENERATORS = [
    ("00_checker", checker),
    ("01_gradient", gradient),
    ("02_rings", rings),
    ("03_texture", texture),
    ("04_stripes", stripes),
    ("05_shapes", shapes),
    ("06_shapes", lambda rng: shapes(rng, 60)),
    ("07_mixed", mixed),
]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/toy/hr")
    parser.add_argument("--seed", type=int, default=2024)
    args = parser.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (name, fn) in enumerate(GENERATORS):
        rng = np.random.default_rng(args.seed + i)
        img = np.clip(fn(rng), 0.0, 1.0)
        Image.fromarray(np.round(img * 255).astype(np.uint8), mode="RGB").save(out / f"{name}.png")


if __name__ == "__main__":
    main()
