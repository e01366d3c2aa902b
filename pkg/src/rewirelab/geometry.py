"""Representation-space diagnostics: log-space isotropy score, pairwise
cosine statistics, silhouette-based cluster separation, and a 2-D PCA
projection with CSV/SVG export.

All isotropy arithmetic stays in log space; the raw score underflows
64-bit floats for strongly anisotropic spaces.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .rng import child_rng


class EigenConvergenceError(RuntimeError):
    """Jacobi sweeps exhausted before the off-diagonal norm fell below tolerance."""

    def __init__(self, residual, sweeps):
        super().__init__(f"Jacobi iteration did not converge after {sweeps} sweeps "
                         f"(off-diagonal norm {residual:.3e})")
        self.residual = residual


def jacobi_eigh(S: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with eigenvectors in columns,
    sorted by descending eigenvalue.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"need a square matrix, got shape {S.shape}")
    d = S.shape[0]
    A = S.copy()
    V = np.eye(d)
    if d == 1:
        return A.diagonal().copy(), V

    def offdiag_norm(M):
        off = M - np.diag(M.diagonal())
        return float(np.sqrt((off * off).sum()))

    for _ in range(max_sweeps):
        if offdiag_norm(A) <= tol:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = 0.5 * (A[q, q] - A[p, p]) / apq
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = A[:, p].copy()
                rot_q = A[:, q].copy()
                A[:, p] = c * rot_p - s * rot_q
                A[:, q] = s * rot_p + c * rot_q
                row_p = A[p, :].copy()
                row_q = A[q, :].copy()
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                vec_p = V[:, p].copy()
                V[:, p] = c * vec_p - s * V[:, q]
                V[:, q] = s * vec_p + c * V[:, q]
    else:
        residual = offdiag_norm(A)
        if residual > tol:
            raise EigenConvergenceError(residual, max_sweeps)

    eigvals = A.diagonal().copy()
    order = np.argsort(eigvals)[::-1]
    return eigvals[order], V[:, order]


@dataclass
class IsotropyReport:
    log_is: float
    eigen_spectrum: np.ndarray
    argmin_direction: tuple  # (eigenvector index, sign)
    argmax_direction: tuple


def _logsumexp_rows(x: np.ndarray) -> np.ndarray:
    """Column-wise logsumexp of an (n, k) matrix of exponents."""
    m = x.max(axis=0)
    return m + np.log(np.exp(x - m).sum(axis=0))


def log_isotropy(V: np.ndarray) -> IsotropyReport:
    """Natural log of the min/max eigen-direction score ratio.

    Directions are both signs of each unit eigenvector of V^T V; the
    per-direction score is logsumexp over rows of m^T v, so magnitudes far
    below float underflow remain representable.
    """
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] < 2 or V.shape[1] < 2:
        raise ValueError(f"need an (n>=2, d>=2) matrix, got shape {V.shape}")
    if not np.isfinite(V).all():
        raise ValueError("representation matrix contains non-finite entries")
    n, d = V.shape
    if n < d:
        warnings.warn(f"only {n} rows for {d} dimensions; eigen-directions may be unstable")

    eigvals, eigvecs = jacobi_eigh(V.T @ V)
    projections = V @ eigvecs  # (n, d): row i dotted with each eigenvector
    plus = _logsumexp_rows(projections)
    minus = _logsumexp_rows(-projections)
    scores = np.concatenate([plus, minus])
    arg_lo = int(np.argmin(scores))
    arg_hi = int(np.argmax(scores))

    def direction(flat_idx):
        return (flat_idx % d, +1 if flat_idx < d else -1)

    return IsotropyReport(
        log_is=float(scores[arg_lo] - scores[arg_hi]),
        eigen_spectrum=eigvals,
        argmin_direction=direction(arg_lo),
        argmax_direction=direction(arg_hi),
    )


@dataclass
class CosineStats:
    mean: float
    std: float
    within_class_mean: float = None
    between_class_mean: float = None


def _normalize_rows(V):
    norms = np.linalg.norm(V, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm row; cosine statistics undefined")
    return V / norms[:, None]


def cosine_stats(V: np.ndarray, labels=None, exact_limit: int = 2000,
                 n_samples: int = 1_000_000, seed: int = 0) -> CosineStats:
    """Mean/std of pairwise cosines; exact up to exact_limit rows, sampled beyond."""
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] < 2:
        raise ValueError(f"need at least 2 rows, got shape {V.shape}")
    n = V.shape[0]
    U = _normalize_rows(V)
    if n <= exact_limit:
        G = U @ U.T
        iu = np.triu_indices(n, k=1)
        cosines = G[iu]
        pair_labels = (iu[0], iu[1])
    else:
        rng = child_rng(seed, "cosine-sample")
        ii = rng.integers(0, n, size=n_samples)
        jj = rng.integers(0, n, size=n_samples)
        valid = ii != jj
        ii, jj = ii[valid], jj[valid]
        cosines = (U[ii] * U[jj]).sum(axis=1)
        pair_labels = (ii, jj)

    stats = CosineStats(mean=float(cosines.mean()), std=float(cosines.std()))
    if labels is not None:
        labels = np.asarray(labels)
        same = labels[pair_labels[0]] == labels[pair_labels[1]]
        if same.any():
            stats.within_class_mean = float(cosines[same].mean())
        if (~same).any():
            stats.between_class_mean = float(cosines[~same].mean())
    return stats


def cluster_separation(V: np.ndarray, labels) -> float:
    """Mean silhouette over rows with cosine distance."""
    V = np.asarray(V, dtype=np.float64)
    labels = np.asarray(labels)
    if V.ndim != 2 or labels.shape != (V.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match {V.shape[0]} rows")
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("silhouette needs at least 2 classes")
    if counts.min() < 2:
        thin = classes[counts < 2]
        raise ValueError(f"silhouette needs >= 2 members per class; degenerate: {list(thin)}")

    U = _normalize_rows(V)
    D = 1.0 - U @ U.T
    n = V.shape[0]
    scores = np.empty(n)
    masks = {c: labels == c for c in classes}
    for i in range(n):
        own = masks[labels[i]].copy()
        own[i] = False
        a = D[i, own].mean()
        b = min(D[i, masks[c]].mean() for c in classes if c != labels[i])
        scores[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(scores.mean())


def point_silhouettes(V: np.ndarray, labels) -> np.ndarray:
    """Per-point silhouette values (same convention as cluster_separation)."""
    V = np.asarray(V, dtype=np.float64)
    labels = np.asarray(labels)
    U = _normalize_rows(V)
    D = 1.0 - U @ U.T
    classes = np.unique(labels)
    out = np.empty(V.shape[0])
    for i in range(V.shape[0]):
        own = labels == labels[i]
        own[i] = False
        a = D[i, own].mean()
        b = min(D[i, labels == c].mean() for c in classes if c != labels[i])
        out[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return out


def project2d(V: np.ndarray) -> np.ndarray:
    """Centered PCA onto the top-2 principal axes.

    Axis signs are fixed by making each axis's largest-magnitude loading
    positive, so the projection is fully deterministic.
    """
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[1] < 2:
        raise ValueError(f"need an (n, d>=2) matrix, got shape {V.shape}")
    X = V - V.mean(axis=0)
    cov = X.T @ X
    if not cov.any():
        raise ValueError("rank-0 matrix; no principal axes")
    eigvals, eigvecs = jacobi_eigh(cov)
    axes = eigvecs[:, :2].copy()
    for k in range(2):
        lead = np.argmax(np.abs(axes[:, k]))
        if axes[lead, k] < 0:
            axes[:, k] = -axes[:, k]
    return X @ axes


PALETTE = (
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
    "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac",
)


def write_projection_csv(path, coords, labels):
    coords = np.asarray(coords)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "label"])
        for (x, y), lab in zip(coords, labels):
            writer.writerow([f"{x:.6g}", f"{y:.6g}", lab])


def write_scatter_svg(path, coords, labels, title=""):
    """Self-contained 800x800 SVG scatter, one palette color per label."""
    coords = np.asarray(coords, dtype=np.float64)
    labels = list(labels)
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    spread = np.where(hi - lo > 0, hi - lo, 1.0)
    margin, size = 40.0, 800.0
    inner = size - 2 * margin

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0f}" height="{size:.0f}" '
        f'viewBox="0 0 {size:.0f} {size:.0f}">',
        f'<rect width="{size:.0f}" height="{size:.0f}" fill="white"/>',
    ]
    if title:
        lines.append(f'<text x="{size / 2:.0f}" y="24" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="16">{title}</text>')
    for (x, y), lab in zip(coords, labels):
        px = margin + (x - lo[0]) / spread[0] * inner
        py = size - margin - (y - lo[1]) / spread[1] * inner
        color = PALETTE[int(lab) % len(PALETTE)]
        lines.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" fill="{color}" fill-opacity="0.75"/>')
    lines.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
