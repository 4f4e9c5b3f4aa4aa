"""Pluggable face-embedding interface with a deterministic toy network.

The embedder maps an image to a unit-norm identity vector and exposes the
analytic gradient of any embedding-space direction w.r.t. the input pixels.
Weights are fixed pseudo-random functions of the seed; nothing is trained.
The stack is conv3x3 -> tanh -> avgpool4 -> conv3x3 -> tanh -> avgpool4 ->
affine -> l2-normalize, smooth everywhere so finite-difference checks are
clean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imaging import Image


def _conv3_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 same-padding convolution; x (Cin,H,W), w (Cout,Cin,3,3)."""
    cin, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.empty((w.shape[0], h, wd))
    for o in range(w.shape[0]):
        acc = np.zeros((h, wd))
        for i in range(cin):
            for dy in range(3):
                for dx in range(3):
                    acc += w[o, i, dy, dx] * xp[i, dy : dy + h, dx : dx + wd]
        out[o] = acc + b[o]
    return out


def _conv3_same_input_grad(g: np.ndarray, w: np.ndarray, cin: int) -> np.ndarray:
    """Adjoint of :func:`_conv3_same` w.r.t. the input."""
    cout, h, wd = g.shape
    gp = np.pad(g, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((cin, h, wd))
    for o in range(cout):
        for i in range(cin):
            for dy in range(3):
                for dx in range(3):
                    # forward read offset (dy-1, dx-1) scatters back reversed
                    out[i] += w[o, i, dy, dx] * gp[o, 2 - dy : 2 - dy + h, 2 - dx : 2 - dx + wd]
    return out


def _avgpool(x: np.ndarray, k: int) -> np.ndarray:
    c, h, wd = x.shape
    return x.reshape(c, h // k, k, wd // k, k).mean(axis=(2, 4))


def _avgpool_grad(g: np.ndarray, k: int) -> np.ndarray:
    c, h, wd = g.shape
    return np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)


@dataclass(frozen=True)
class ToyEmbedder:
    """Deterministic stand-in for a pretrained face recognizer."""

    seed: int = 0
    n_z: int = 128
    input_size: tuple[int, int] = (64, 64)  # (height, width)
    weights: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        h, w = self.input_size
        if h % 16 or w % 16:
            raise ValueError("input size must be divisible by 16 (two 4x pools)")
        rng = np.random.default_rng(self.seed)
        feat = 8 * (h // 16) * (w // 16)
        wts = {
            "c1w": rng.normal(0.0, 0.6, (4, 1, 3, 3)),
            "c1b": rng.normal(0.0, 0.1, 4),
            "c2w": rng.normal(0.0, 0.45, (8, 4, 3, 3)),
            "c2b": rng.normal(0.0, 0.1, 8),
            "pw": rng.normal(0.0, 1.0 / np.sqrt(feat), (self.n_z, feat)),
            "pb": rng.normal(0.0, 0.01, self.n_z),
        }
        object.__setattr__(self, "weights", wts)

    def _check(self, img: Image) -> None:
        if (img.height, img.width) != self.input_size:
            raise ValueError(
                f"image is {img.height}x{img.width}, embedder expects "
                f"{self.input_size[0]}x{self.input_size[1]}"
            )

    def _forward(self, img: Image) -> dict:
        w = self.weights
        x = (2.0 * img.data - 1.0)[None]
        a1 = _conv3_same(x, w["c1w"], w["c1b"])
        t1 = np.tanh(a1)
        p1 = _avgpool(t1, 4)
        a2 = _conv3_same(p1, w["c2w"], w["c2b"])
        t2 = np.tanh(a2)
        p2 = _avgpool(t2, 4)
        feat = p2.ravel()
        y = w["pw"] @ feat + w["pb"]
        norm = float(np.linalg.norm(y))
        return {"t1": t1, "t2": t2, "p2shape": p2.shape, "y": y, "norm": norm}


def embed(e: ToyEmbedder, img: Image) -> np.ndarray:
    """Unit-norm identity vector for the image."""
    e._check(img)
    cache = e._forward(img)
    return cache["y"] / cache["norm"]


def embed_input_grad(e: ToyEmbedder, img: Image, cotangent: np.ndarray) -> np.ndarray:
    """d <cotangent, embed(img)> / d img, shape (H, W)."""
    e._check(img)
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != (e.n_z,):
        raise ValueError(f"cotangent must have shape ({e.n_z},)")
    w = e.weights
    c = e._forward(img)
    y, norm = c["y"], c["norm"]
    z = y / norm
    gy = (cot - (cot @ z) * z) / norm
    gfeat = w["pw"].T @ gy
    gp2 = gfeat.reshape(c["p2shape"])
    gt2 = _avgpool_grad(gp2, 4)
    ga2 = gt2 * (1.0 - c["t2"] ** 2)
    gp1 = _conv3_same_input_grad(ga2, w["c2w"], 4)
    gt1 = _avgpool_grad(gp1, 4)
    ga1 = gt1 * (1.0 - c["t1"] ** 2)
    gx = _conv3_same_input_grad(ga1, w["c1w"], 1)
    return 2.0 * gx[0]


def embedding_distance(z1: np.ndarray, z2: np.ndarray) -> float:
    """Euclidean distance between two embeddings."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise ValueError(f"embedding shapes differ: {z1.shape} vs {z2.shape}")
    return float(np.linalg.norm(z1 - z2))
