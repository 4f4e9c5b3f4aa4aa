import numpy as np

from warpagg.imaging import Image


def blob_image(size: int = 32, seed: int = 0, n_blobs: int = 4) -> Image:
    """Smooth positive test image: Gaussian bumps well inside the frame on a
    mid-gray background (near-constant at the borders)."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), 0.45)
    for _ in range(n_blobs):
        cx = rng.uniform(0.3, 0.7) * (size - 1)
        cy = rng.uniform(0.3, 0.7) * (size - 1)
        sig = rng.uniform(0.12, 0.2) * size
        amp = rng.uniform(-0.35, 0.45)
        img += amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sig**2))
    return Image(np.clip(img, 0.02, 0.98))


def ring_landmarks(count: int = 8, radius: float = 0.55, seed: int | None = None) -> np.ndarray:
    """Well-spread control points on a circle, optionally jittered."""
    ang = np.linspace(0.0, 2 * np.pi, count, endpoint=False)
    pts = radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    if seed is not None:
        pts = pts + np.random.default_rng(seed).uniform(-0.08, 0.08, pts.shape)
    return pts
