"""
Point-sampled orthographic rasterizer for the two camera views.

Geometry is reduced to a label mask first (0 background, 1 socket, 2 peg),
then shaded with a palette drawn from render_seed. Changing the seed changes
appearance only; masks are identical across seeds.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from residrl.seeding import make_rng

BACKGROUND, SOCKET, PEG = 0, 1, 2

_RENDER_STREAM = 7


@dataclass(frozen=True)
class Palette:
    background: float
    socket: float
    peg: float
    stripe_amplitude: float
    stripe_period_mm: float
    stripe_phase: float


def quantize(values) -> np.ndarray:
    """Snap intensities onto the k/255 grid so uint8 storage is exact."""
    return np.round(np.clip(values, 0.0, 1.0) * 255.0) / 255.0


def palette(render_seed: int) -> Palette:
    rng = make_rng(render_seed, _RENDER_STREAM)
    return Palette(
        background=float(quantize(rng.uniform(0.05, 0.35))),
        socket=float(rng.uniform(0.40, 0.65)),
        peg=float(quantize(rng.uniform(0.75, 0.95))),
        stripe_amplitude=float(rng.uniform(0.03, 0.10)),
        stripe_period_mm=float(rng.uniform(3.0, 8.0)),
        stripe_phase=float(rng.uniform(0.0, 2.0 * np.pi)),
    )


def pixel_centers(center, fov_mm: float, size: int) -> np.ndarray:
    """World (x, y) of each pixel centre, shape (size, size, 2); row 0 is the top of the image.

    `center` is (x, y, theta): the camera frame is rotated by theta degrees.
    """
    cx, cy, theta = (float(v) for v in center)
    coords = (np.arange(size) + 0.5) / size * fov_mm - fov_mm / 2.0
    u, v = np.meshgrid(coords, -coords)
    rad = np.deg2rad(theta)
    c, s = np.cos(rad), np.sin(rad)
    wx = cx + c * u - s * v
    wy = cy + s * u + c * v
    return np.stack([wx, wy], axis=-1)


def _inside(world: np.ndarray, box) -> np.ndarray:
    x, y = world[..., 0], world[..., 1]
    return (x >= box[0]) & (x <= box[1]) & (y >= box[2]) & (y <= box[3])


def rasterize(world: np.ndarray, peg_box: Optional[np.ndarray], socket_boxes: Optional[np.ndarray]) -> np.ndarray:
    labels = np.zeros(world.shape[:2], dtype=np.uint8)
    if socket_boxes is not None:
        for box in socket_boxes:
            labels[_inside(world, box)] = SOCKET
    # peg occludes the socket
    if peg_box is not None:
        labels[_inside(world, peg_box)] = PEG
    return labels


def shade(labels: np.ndarray, world: np.ndarray, pal: Palette) -> np.ndarray:
    image = np.full(labels.shape, pal.background, dtype=np.float64)
    stripes = pal.socket + pal.stripe_amplitude * np.sin(
        2.0 * np.pi * world[..., 0] / pal.stripe_period_mm + pal.stripe_phase
    )
    image = np.where(labels == SOCKET, stripes, image)
    image = np.where(labels == PEG, pal.peg, image)
    return quantize(image)


def to_uint8(images) -> np.ndarray:
    return np.round(np.asarray(images) * 255.0).astype(np.uint8)


def from_uint8(images) -> np.ndarray:
    return np.asarray(images, dtype=np.float64) / 255.0


def write_pgm(path, image) -> Path:
    """Binary greyscale dump for debugging."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = to_uint8(image) if np.asarray(image).dtype != np.uint8 else np.asarray(image)
    height, width = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width)
