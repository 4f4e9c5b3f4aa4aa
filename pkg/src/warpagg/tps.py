"""Thin-plate-spline fitting and image warping driven by landmark control
points, plus the vector-Jacobian product of the warp w.r.t. the control
points (adjoint through the interpolation solve).

The kernel is U(r) = r^2 log r^2 with U(0) = 0. A fit maps source points to
target points; warping is backward: the output image samples the input
through the spline fitted from the *manipulated* landmarks back to the
originals, so landmark content ends up at its manipulated location.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import Image, normalized_grid, sample_grid

DEFAULT_LAMBDA = 1e-6
_COND_LIMIT = 1e12
_RETRY_LAMBDA = 1e-4
_TINY_SQ = 1e-30


class DegenerateControlPointsError(ValueError):
    """Control points too degenerate (collinear/coincident) to fit a spline."""


@dataclass(frozen=True)
class TpsTransform:
    """Fitted spline: affine part (2,3) as rows (const, x, y) per output
    coordinate, kernel weights (L,2), anchored at ``control_points`` (L,2)."""

    control_points: np.ndarray
    affine: np.ndarray
    kernel_weights: np.ndarray
    regularization: float


def _kernel_sq(s: np.ndarray) -> np.ndarray:
    """U as a function of squared distance s: s*log(s), 0 at s=0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        u = s * np.log(s)
    return np.where(s > _TINY_SQ, u, 0.0)


def _kernel_dcoef(s: np.ndarray) -> np.ndarray:
    """dU/d(point) = coef * (difference vector), coef = 2*(log s + 1)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        c = 2.0 * (np.log(s) + 1.0)
    return np.where(s > _TINY_SQ, c, 0.0)


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def _system_matrix(cpts: np.ndarray, lam: float) -> np.ndarray:
    n = cpts.shape[0]
    a = np.zeros((n + 3, n + 3))
    a[:n, :n] = _kernel_sq(_pairwise_sq(cpts, cpts)) + lam * np.eye(n)
    a[:n, n] = 1.0
    a[:n, n + 1 :] = cpts
    a[n, :n] = 1.0
    a[n + 1 :, :n] = cpts.T
    return a


def _features(pts: np.ndarray, cpts: np.ndarray) -> np.ndarray:
    """Feature matrix [U(|p-c_j|^2) ... 1 x y], shape (N, L+3)."""
    n = pts.shape[0]
    phi = np.empty((n, cpts.shape[0] + 3))
    phi[:, : cpts.shape[0]] = _kernel_sq(_pairwise_sq(pts, cpts))
    phi[:, cpts.shape[0]] = 1.0
    phi[:, cpts.shape[0] + 1 :] = pts
    return phi


def fit_tps(source: np.ndarray, target: np.ndarray, lam: float = 0.0) -> TpsTransform:
    """Fit the spline mapping ``source`` onto ``target``.

    ``lam`` adds a ridge on the kernel block; with lam=0 the fit interpolates
    the targets exactly. Degenerate configurations retry once with a larger
    ridge, then raise :class:`DegenerateControlPointsError`.
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 2 or src.shape != dst.shape:
        raise ValueError("source and target must both have shape (L, 2)")
    n = src.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 control points, got {n}")
    if lam < 0:
        raise ValueError("regularization must be >= 0")

    rhs = np.zeros((n + 3, 2))
    rhs[:n] = dst
    for attempt_lam in (lam, max(lam, _RETRY_LAMBDA)):
        a = _system_matrix(src, attempt_lam)
        if np.linalg.cond(a) < _COND_LIMIT:
            sol = np.linalg.solve(a, rhs)
            return TpsTransform(
                control_points=src.copy(),
                affine=sol[n:].T.copy(),
                kernel_weights=sol[:n].copy(),
                regularization=attempt_lam,
            )
    raise DegenerateControlPointsError(
        "control points are collinear or coincident; spline system is singular"
    )


def eval_tps(t: TpsTransform, pts: np.ndarray) -> np.ndarray:
    """Apply the fitted mapping to points (N,2) -> (N,2)."""
    pts = np.asarray(pts, dtype=np.float64)
    params = np.vstack([t.kernel_weights, t.affine.T])
    return _features(pts, t.control_points) @ params


def eval_tps_point_jacobian(t: TpsTransform, pts: np.ndarray) -> np.ndarray:
    """d eval_tps / d point, shape (N, 2, 2): jac[n, out, in]."""
    pts = np.asarray(pts, dtype=np.float64)
    d = pts[:, None, :] - t.control_points[None, :, :]
    s = np.einsum("njk,njk->nj", d, d)
    coef = _kernel_dcoef(s)
    jac = np.einsum("jo,nj,nji->noi", t.kernel_weights, coef, d)
    jac += t.affine[:, 1:][None, :, :]
    return jac


def warp_image(img: Image, points: np.ndarray, points_moved: np.ndarray,
               lam: float = DEFAULT_LAMBDA) -> Image:
    """Warp so content at ``points`` appears at ``points_moved``.

    Backward warp: fit moved->original, pull each output pixel from the
    spline-mapped location in the input (clamped bilinear sampling).
    """
    t = fit_tps(points_moved, points, lam)
    grid = normalized_grid(img.width, img.height)
    src = eval_tps(t, grid)
    vals, _ = sample_grid(img.data, src)
    return Image(np.clip(vals.reshape(img.height, img.width), 0.0, 1.0))


def invert_landmarks(points: np.ndarray, points_moved: np.ndarray,
                     predicted: np.ndarray, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Map predictions made on the warped image back to the original frame.

    Exactly undoes the manipulation at the control points (up to the ridge).
    """
    t = fit_tps(points_moved, points, lam)
    return eval_tps(t, predicted)


def warp_vjp(img: Image, points: np.ndarray, points_moved: np.ndarray,
             cotangent: np.ndarray, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Gradient of <cotangent, warp_image(img, points, points_moved)> w.r.t.
    ``points_moved``, shape (L, 2).

    Chains the bilinear sampling gradient with both dependencies of the
    spline on the moved landmarks: the feature kernels at the evaluation
    grid, and the interpolation system itself (adjoint solve of the same
    symmetric matrix; the right-hand side does not depend on the moved
    points).
    """
    pts = np.asarray(points, dtype=np.float64)
    moved = np.asarray(points_moved, dtype=np.float64)
    cot = np.asarray(cotangent, dtype=np.float64).ravel()
    if cot.size != img.width * img.height:
        raise ValueError("cotangent must match image dimensions")
    n = moved.shape[0]

    t = fit_tps(moved, pts, lam)
    cpts = t.control_points
    grid = normalized_grid(img.width, img.height)
    phi = _features(grid, cpts)
    params = np.vstack([t.kernel_weights, t.affine.T])  # (L+3, 2)
    src = phi @ params
    _, grads = sample_grid(img.data, src, with_grad=True)
    q = cot[:, None] * grads  # (Npix, 2): d objective / d sampled location

    # Direct term: kernel features depend on the moved control points.
    diff = grid[:, None, :] - cpts[None, :, :]  # (Npix, L, 2)
    s = np.einsum("pjk,pjk->pj", diff, diff)
    coef = _kernel_dcoef(s)
    qw = q @ t.kernel_weights.T  # (Npix, L)
    m1 = qw * coef
    col = m1.sum(axis=0)
    grad = cpts * col[:, None] - m1.T @ grid

    # Adjoint term: parameters solve A(moved) params = rhs.
    v = phi.T @ q  # (L+3, 2) = d objective / d params
    a = _system_matrix(cpts, t.regularization)
    lam_adj = np.linalg.solve(a, v)  # A is symmetric
    m = -lam_adj @ params.T  # (L+3, L+3) = d objective / d A

    # Kernel block: A_ij = U(|c_i - c_j|^2) for i != j.
    s_cc = _pairwise_sq(cpts, cpts)
    coef_cc = _kernel_dcoef(s_cc)
    np.fill_diagonal(coef_cc, 0.0)
    w2 = (m[:n, :n] + m[:n, :n].T) * coef_cc
    row = w2.sum(axis=1)
    grad += cpts * row[:, None] - w2 @ cpts

    # Border blocks: columns/rows (1, x, y); only x and y vary.
    grad[:, 0] += m[:n, n + 1] + m[n + 1, :n]
    grad[:, 1] += m[:n, n + 2] + m[n + 2, :n]
    return grad
