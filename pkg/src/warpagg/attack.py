"""Iterative sign-gradient manipulation of landmark control points.

Each branch warps the input so its embedding moves away from the original
image and every previously generated branch, stopping once the minimum
embedding distance reaches the configured threshold (or the iteration cap,
which is flagged rather than treated as failure). Displacements are clipped
per coordinate to a fixed radius so faces stay plausible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .embedder import ToyEmbedder, embed, embed_input_grad
from .imaging import Image, resize_bilinear, resize_bilinear_vjp
from .tps import warp_image, warp_vjp

logger = logging.getLogger(__name__)

_ZERO_DIST = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    branches: int = 3             # number of manipulated faces to generate
    distance_threshold: float = 0.6   # minimum embedding separation (tau)
    clip_radius: float = 0.05     # per-coordinate displacement bound (delta)
    step_size: float = 0.005      # sign-step length (epsilon)
    max_iters: int = 100
    tps_lambda: float = 1e-6

    def __post_init__(self) -> None:
        if self.branches < 1:
            raise ValueError("branches must be >= 1")
        if self.distance_threshold < 0:
            raise ValueError("distance_threshold must be >= 0")
        if self.clip_radius <= 0:
            raise ValueError("clip_radius must be > 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass(frozen=True)
class ManipulatedFace:
    """One branch: the warped image plus the control points that made it."""

    image: Image
    control_source: np.ndarray    # original landmarks P, (L,2)
    control_target: np.ndarray    # manipulated landmarks, (L,2)
    displacement: np.ndarray      # control_target - control_source
    iterations_used: int
    hit_max_iters: bool = False


def delta_from_landmarks(points: np.ndarray, fraction: float = 0.05) -> float:
    """Clip radius as a fraction of the landmark bounding-box width."""
    points = np.asarray(points, dtype=np.float64)
    width = float(points[:, 0].max() - points[:, 0].min())
    if width <= 0:
        raise ValueError("landmark bounding box has zero width")
    return fraction * width


def _embed_warped(emb: ToyEmbedder, warped: Image) -> np.ndarray:
    eh, ew = emb.input_size
    if (warped.height, warped.width) != (eh, ew):
        warped = resize_bilinear(warped, ew, eh)
    return embed(emb, warped)


def attack_cost(emb: ToyEmbedder, img: Image, points: np.ndarray,
                points_moved: np.ndarray, peer_embeddings: np.ndarray,
                lam: float = 1e-6) -> float:
    """Sum of embedding distances from the candidate warp to every peer."""
    peers = np.atleast_2d(np.asarray(peer_embeddings, dtype=np.float64))
    if peers.shape[0] == 0:
        raise ValueError("peer set must be nonempty")
    z = _embed_warped(emb, warp_image(img, points, points_moved, lam))
    return float(np.linalg.norm(peers - z, axis=1).sum())


def cost_grad(emb: ToyEmbedder, img: Image, points: np.ndarray,
              points_moved: np.ndarray, peer_embeddings: np.ndarray,
              lam: float = 1e-6) -> np.ndarray:
    """Gradient of :func:`attack_cost` w.r.t. the moved landmarks, (L,2).

    Chains the embedding input gradient through the warp VJP; distances of
    exactly zero contribute a zero subgradient.
    """
    peers = np.atleast_2d(np.asarray(peer_embeddings, dtype=np.float64))
    if peers.shape[0] == 0:
        raise ValueError("peer set must be nonempty")
    warped = warp_image(img, points, points_moved, lam)
    eh, ew = emb.input_size
    resized = warped if (warped.height, warped.width) == (eh, ew) else resize_bilinear(warped, ew, eh)
    z = embed(emb, resized)
    diffs = z[None, :] - peers
    dists = np.linalg.norm(diffs, axis=1)
    scale = np.where(dists > _ZERO_DIST, 1.0 / np.maximum(dists, _ZERO_DIST), 0.0)
    cot_z = (diffs * scale[:, None]).sum(axis=0)
    g_pixels = embed_input_grad(emb, resized, cot_z)
    if resized is not warped:
        g_pixels = resize_bilinear_vjp(warped, ew, eh, g_pixels)
    return warp_vjp(img, points, points_moved, g_pixels, lam)


def fgsm_step(points_moved: np.ndarray, grad: np.ndarray, step_size: float) -> np.ndarray:
    """Move every coordinate by +-step_size following the gradient sign."""
    return points_moved + step_size * np.sign(grad)


def clip_displacement(points_moved: np.ndarray, points: np.ndarray,
                      radius: float) -> np.ndarray:
    """Project so each coordinate of the displacement lies in [-radius, radius]."""
    return points + np.clip(points_moved - points, -radius, radius)


def generate_adversarial_set(emb: ToyEmbedder, img: Image, points: np.ndarray,
                             cfg: AttackConfig, on_step=None) -> list[ManipulatedFace]:
    """Generate ``cfg.branches`` manipulated faces, each separated from the
    original and all earlier branches by at least the distance threshold
    (or flagged after ``max_iters``)."""
    return _generate(emb, img, points, cfg, _raw_update, on_step)


def _raw_update(points, points_moved, grad, cfg, context) -> np.ndarray:
    stepped = fgsm_step(points_moved, grad, cfg.step_size)
    return clip_displacement(stepped, points, cfg.clip_radius)


def _generate(emb: ToyEmbedder, img: Image, points: np.ndarray,
              cfg: AttackConfig, update, on_step, context=None) -> list[ManipulatedFace]:
    points = np.asarray(points, dtype=np.float64)
    peer_z = [_embed_warped(emb, img)]
    faces: list[ManipulatedFace] = []
    for k in range(cfg.branches):
        peers = np.stack(peer_z)
        moved = points.copy()
        warped = warp_image(img, points, moved, cfg.tps_lambda)
        z = _embed_warped(emb, warped)
        iters = 0
        flagged = False
        while float(np.linalg.norm(peers - z, axis=1).min()) < cfg.distance_threshold:
            if iters >= cfg.max_iters:
                flagged = True
                logger.warning("branch %d hit max_iters=%d", k, cfg.max_iters)
                break
            g = cost_grad(emb, img, points, moved, peers, cfg.tps_lambda)
            moved = update(points, moved, g, cfg, context)
            warped = warp_image(img, points, moved, cfg.tps_lambda)
            z = _embed_warped(emb, warped)
            iters += 1
            if on_step is not None:
                on_step(k, iters, float(np.linalg.norm(peers - z, axis=1).sum()))
        faces.append(
            ManipulatedFace(
                image=warped,
                control_source=points.copy(),
                control_target=moved,
                displacement=moved - points,
                iterations_used=iters,
                hit_max_iters=flagged,
            )
        )
        peer_z.append(z)
    return faces
