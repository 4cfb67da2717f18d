"""
Procedural shape masks.

Each generator takes the object extent ``size`` (pixels) and a seeded
generator and returns a boolean mask of shape [size, size]. The tight
bounding box of the mask becomes the ground-truth box once the mask is
placed in a scene.
"""

import numpy as np

from core.utils.errors import RenderError

SHAPES = {}


def register(name):
    def decorator(func):
        SHAPES[name] = func
        return func

    return decorator


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centre = (size - 1) / 2.0
    return yy, xx, centre


def _stroke(size):
    return max(2.0, size / 6.0)


@register("disk")
def disk(size, rng):
    yy, xx, c = _grid(size)
    return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2


@register("ring")
def ring(size, rng):
    yy, xx, c = _grid(size)
    d2 = (yy - c) ** 2 + (xx - c) ** 2
    outer = size / 2.0
    return (d2 <= outer**2) & (d2 >= (0.55 * outer) ** 2)


@register("cross")
def cross(size, rng):
    yy, xx, c = _grid(size)
    t = _stroke(size) / 2.0
    return (np.abs(yy - c) <= t) | (np.abs(xx - c) <= t)


@register("bar")
def bar(size, rng):
    yy, xx, c = _grid(size)
    t = _stroke(size)
    # orientation is the only random part
    return np.abs(xx - c) <= t if rng.random() < 0.5 else np.abs(yy - c) <= t


@register("triangle")
def triangle(size, rng):
    yy, xx, c = _grid(size)
    return 2.0 * np.abs(xx - c) <= yy + 1.0


@register("checker")
def checker(size, rng):
    yy, xx, _ = _grid(size)
    cell = max(2, size // 4)
    return ((yy // cell + xx // cell) % 2) == 0


@register("diamond")
def diamond(size, rng):
    yy, xx, c = _grid(size)
    return np.abs(yy - c) + np.abs(xx - c) <= size / 2.0


@register("saltire")
def saltire(size, rng):
    yy, xx, _ = _grid(size)
    t = _stroke(size) / 2.0
    return (np.abs(yy - xx) <= t) | (np.abs(yy + xx - (size - 1)) <= t)


@register("frame")
def frame(size, rng):
    yy, xx, _ = _grid(size)
    t = _stroke(size)
    edge = np.minimum(np.minimum(yy, xx), np.minimum(size - 1 - yy, size - 1 - xx))
    return edge < t


@register("stripes")
def stripes(size, rng):
    yy, xx, _ = _grid(size)
    band = max(2, size // 5)
    return (yy // band) % 2 == 0


@register("corner")
def corner(size, rng):
    yy, xx, _ = _grid(size)
    t = _stroke(size)
    return (xx < t) | (yy >= size - t)


@register("tee")
def tee(size, rng):
    yy, xx, c = _grid(size)
    t = _stroke(size)
    return (yy < t) | (np.abs(xx - c) <= t / 2.0)


def render_mask(name, size, rng):
    mask = SHAPES[name](int(size), rng)
    if not mask.any():
        raise RenderError(f"shape {name} produced an empty mask at size {size}")
    return mask
