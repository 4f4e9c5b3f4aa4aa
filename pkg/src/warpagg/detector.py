"""Heatmap landmark detector: a small trainable encoder-decoder with two
downsampling and two upsampling stages plus skip connections, ending in one
nonnegative response map per landmark (softplus keeps every map strictly
positive so the weighted-mean decode is always defined).

Parameters are stored float32 (the checkpoint payload dtype); all math runs
in float64. The backward pass returns analytic parameter gradients for a
cotangent on the heatmaps, chainable with the soft-argmax Jacobian so a
landmark-space loss trains the network end to end.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import Image, from_pixel, to_pixel

CHECKPOINT_MAGIC = b"WAGGDET1"
FORMAT_VERSION = 1

_CHANNELS = {"enc1": 4, "enc2": 8, "mid": 8, "dec1": 8}


class DegenerateHeatmapError(ValueError):
    """A response map has no mass; its weighted mean is undefined."""


class CheckpointFormatError(ValueError):
    """Checkpoint bytes do not parse as a known detector checkpoint."""


def _conv3(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """3x3 same-pad convolution via an im2col GEMM; returns (out, cols)."""
    cin, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    cols = win.transpose(1, 2, 0, 3, 4).reshape(h * wd, cin * 9)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.T.reshape(w.shape[0], h, wd), cols


def _conv3_backward(g: np.ndarray, cols: np.ndarray, w: np.ndarray, cin: int):
    """Gradients of a _conv3 layer: (d weight, d bias, d input)."""
    cout, h, wd = g.shape
    gm = g.reshape(cout, h * wd)
    gw = (gm @ cols).reshape(w.shape)
    gb = g.sum(axis=(1, 2))
    dcols = (gm.T @ w.reshape(cout, -1)).reshape(h, wd, cin, 3, 3)
    buf = np.zeros((cin, h + 2, wd + 2))
    for dy in range(3):
        for dx in range(3):
            buf[:, dy : dy + h, dx : dx + wd] += dcols[:, :, :, dy, dx].transpose(2, 0, 1)
    return gw, gb, buf[:, 1 : 1 + h, 1 : 1 + wd]


def _pool2(x: np.ndarray) -> np.ndarray:
    c, h, wd = x.shape
    return x.reshape(c, h // 2, 2, wd // 2, 2).mean(axis=(2, 4))


def _pool2_backward(g: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0


def _up2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _up2_backward(g: np.ndarray) -> np.ndarray:
    c, h, wd = g.shape
    return g.reshape(c, h // 2, 2, wd // 2, 2).sum(axis=(2, 4))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class ToyDetector:
    """Trainable stand-in for a full hourglass landmark network."""

    num_landmarks: int
    input_size: tuple[int, int] = (64, 64)  # (height, width)
    seed: int = 0
    params: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        h, w = self.input_size
        if h % 4 or w % 4:
            raise ValueError("input size must be divisible by 4 (two 2x pools)")
        if self.num_landmarks < 1:
            raise ValueError("need at least one landmark map")
        if self.params is None:
            object.__setattr__(self, "params", _init_params(self.num_landmarks, self.seed))


def _init_params(num_landmarks: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)

    def conv_init(cout, cin, std=None):
        std = std if std is not None else 1.0 / np.sqrt(cin * 9)
        return (
            rng.normal(0.0, std, (cout, cin, 3, 3)).astype(np.float32),
            np.zeros(cout, dtype=np.float32),
        )

    p = {}
    p["enc1.w"], p["enc1.b"] = conv_init(_CHANNELS["enc1"], 1)
    p["enc2.w"], p["enc2.b"] = conv_init(_CHANNELS["enc2"], _CHANNELS["enc1"])
    p["mid.w"], p["mid.b"] = conv_init(_CHANNELS["mid"], _CHANNELS["enc2"])
    p["dec1.w"], p["dec1.b"] = conv_init(_CHANNELS["dec1"], _CHANNELS["mid"] + _CHANNELS["enc2"])
    p["out.w"], p["out.b"] = conv_init(num_landmarks, _CHANNELS["dec1"] + _CHANNELS["enc1"], std=0.01)
    # start with low, near-uniform response so untrained decodes sit mid-image
    p["out.b"] -= 4.0
    return p


def _check_input(det: ToyDetector, img: Image) -> None:
    if (img.height, img.width) != det.input_size:
        raise ValueError(
            f"image is {img.height}x{img.width}, detector expects "
            f"{det.input_size[0]}x{det.input_size[1]}"
        )


def forward_cached(det: ToyDetector, img: Image):
    """Forward pass returning (heatmaps, cache for the backward pass)."""
    _check_input(det, img)
    p = {k: v.astype(np.float64) for k, v in det.params.items()}
    x = img.data[None]
    a1, cols1 = _conv3(x, p["enc1.w"], p["enc1.b"])
    e1 = np.tanh(a1)
    p1 = _pool2(e1)
    a2, cols2 = _conv3(p1, p["enc2.w"], p["enc2.b"])
    e2 = np.tanh(a2)
    p2 = _pool2(e2)
    am, colsm = _conv3(p2, p["mid.w"], p["mid.b"])
    m = np.tanh(am)
    c1 = np.concatenate([_up2(m), e2], axis=0)
    ad, colsd = _conv3(c1, p["dec1.w"], p["dec1.b"])
    d1 = np.tanh(ad)
    c2 = np.concatenate([_up2(d1), e1], axis=0)
    pre, colso = _conv3(c2, p["out.w"], p["out.b"])
    heat = np.logaddexp(0.0, pre)
    cache = {
        "p64": p, "e1": e1, "e2": e2, "m": m, "d1": d1, "pre": pre,
        "cols1": cols1, "cols2": cols2, "colsm": colsm, "colsd": colsd,
        "colso": colso,
    }
    return heat, cache


def predict_heatmaps(det: ToyDetector, img: Image) -> np.ndarray:
    """Nonnegative response maps, shape (L, H, W), same spatial size as input."""
    heat, _ = forward_cached(det, img)
    return heat


def detector_backward(det: ToyDetector, cache: dict, cotangent: np.ndarray) -> dict:
    """Parameter gradients of <cotangent, heatmaps> given a cached forward."""
    if cache is None:
        raise ValueError("forward cache required; call forward_cached first")
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != cache["pre"].shape:
        raise ValueError(f"cotangent shape {cot.shape} != heatmap shape {cache['pre'].shape}")
    p = cache["p64"]
    grads: dict[str, np.ndarray] = {}

    gpre = cot * _sigmoid(cache["pre"])
    n_dec1, n_enc1 = _CHANNELS["dec1"], _CHANNELS["enc1"]
    n_mid, n_enc2 = _CHANNELS["mid"], _CHANNELS["enc2"]
    grads["out.w"], grads["out.b"], gc2 = _conv3_backward(
        gpre, cache["colso"], p["out.w"], n_dec1 + n_enc1)
    gd1 = _up2_backward(gc2[:n_dec1])
    ge1_skip = gc2[n_dec1:]
    gad = gd1 * (1.0 - cache["d1"] ** 2)
    grads["dec1.w"], grads["dec1.b"], gc1 = _conv3_backward(
        gad, cache["colsd"], p["dec1.w"], n_mid + n_enc2)
    gm = _up2_backward(gc1[:n_mid])
    ge2_skip = gc1[n_mid:]
    gam = gm * (1.0 - cache["m"] ** 2)
    grads["mid.w"], grads["mid.b"], gp2 = _conv3_backward(
        gam, cache["colsm"], p["mid.w"], n_enc2)
    ge2 = _pool2_backward(gp2) + ge2_skip
    ga2 = ge2 * (1.0 - cache["e2"] ** 2)
    grads["enc2.w"], grads["enc2.b"], gp1 = _conv3_backward(
        ga2, cache["cols2"], p["enc2.w"], n_enc1)
    ge1 = _pool2_backward(gp1) + ge1_skip
    ga1 = ge1 * (1.0 - cache["e1"] ** 2)
    grads["enc1.w"], grads["enc1.b"], _ = _conv3_backward(
        ga1, cache["cols1"], p["enc1.w"], 1)
    return grads


def soft_argmax(heat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Intensity-weighted centroid of each map, in normalized coordinates.

    Returns (landmarks (L,2), per-map mass (L,)). All-zero maps raise
    :class:`DegenerateHeatmapError`; negative values are invalid input.
    """
    heat = np.asarray(heat, dtype=np.float64)
    if heat.ndim != 3:
        raise ValueError("heatmap stack must have shape (L, H, W)")
    if heat.min() < 0:
        raise ValueError("heatmaps must be nonnegative")
    n, h, w = heat.shape
    mass = heat.sum(axis=(1, 2))
    if np.any(mass <= 0.0):
        bad = int(np.argmin(mass))
        raise DegenerateHeatmapError(f"map {bad} has zero total mass")
    us = np.arange(h, dtype=np.float64)
    vs = np.arange(w, dtype=np.float64)
    ys = (heat.sum(axis=2) @ us) / mass
    xs = (heat.sum(axis=1) @ vs) / mass
    return from_pixel(np.stack([xs, ys], axis=-1), w, h), mass


def soft_argmax_vjp(heat: np.ndarray, d_landmarks: np.ndarray) -> np.ndarray:
    """Cotangent on the heatmaps for a cotangent on the decoded landmarks."""
    heat = np.asarray(heat, dtype=np.float64)
    n, h, w = heat.shape
    pts, mass = soft_argmax(heat)
    pix = to_pixel(pts, w, h)
    d = np.asarray(d_landmarks, dtype=np.float64)
    dxs = d[:, 0] * 2.0 / (w - 1)
    dys = d[:, 1] * 2.0 / (h - 1)
    us = np.arange(h, dtype=np.float64)
    vs = np.arange(w, dtype=np.float64)
    gx = (vs[None, None, :] - pix[:, 0, None, None]) * (dxs / mass)[:, None, None]
    gy = (us[None, :, None] - pix[:, 1, None, None]) * (dys / mass)[:, None, None]
    return gx + gy


def render_gaussian_heatmaps(points: np.ndarray, sigma: float, height: int,
                             width: int) -> np.ndarray:
    """Unnormalized Gaussian bump per landmark, truncated at 4*sigma."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pts = np.asarray(points, dtype=np.float64)
    pix = to_pixel(pts, width, height)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    d2 = (xs[None] - pix[:, 0, None, None]) ** 2 + (ys[None] - pix[:, 1, None, None]) ** 2
    heat = np.exp(-d2 / (2.0 * sigma * sigma))
    heat[d2 > (4.0 * sigma) ** 2] = 0.0
    return heat


def checkpoint_bytes(det: ToyDetector, meta: dict | None = None) -> bytes:
    """Serialize: magic, manifest length, JSON manifest, little-endian float32
    payload in manifest tensor order."""
    names = sorted(det.params)
    manifest = {
        "format_version": FORMAT_VERSION,
        "input_size": list(det.input_size),
        "num_landmarks": det.num_landmarks,
        "seed": det.seed,
        "tensors": [{"name": n, "shape": list(det.params[n].shape)} for n in names],
        "meta": meta or {},
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(det.params[n], dtype="<f4").tobytes() for n in names
    )
    return CHECKPOINT_MAGIC + struct.pack("<I", len(mbytes)) + mbytes + payload


def parse_checkpoint(blob: bytes) -> tuple[ToyDetector, dict]:
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic; not a detector checkpoint")
    (mlen,) = struct.unpack("<I", blob[8:12])
    try:
        manifest = json.loads(blob[12 : 12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable manifest: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported format version {manifest.get('format_version')}")
    params = {}
    offset = 12 + mlen
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(blob):
            raise CheckpointFormatError("payload shorter than manifest promises")
        params[entry["name"]] = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape).copy()
        offset = end
    det = ToyDetector(
        num_landmarks=manifest["num_landmarks"],
        input_size=tuple(manifest["input_size"]),
        seed=manifest["seed"],
        params=params,
    )
    return det, manifest.get("meta", {})


def save_detector(det: ToyDetector, path, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(det, meta))


def load_detector(path) -> tuple[ToyDetector, dict]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such checkpoint: {p}")
    return parse_checkpoint(p.read_bytes())
