"""Machine-checkable identity and style fidelity scores."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage

from .data import IdentityTemplate, to_unit_range
from .errors import ContractError


def _as_unit(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 3 and image.shape[-1] != 3:
        return to_unit_range(image)
    return np.clip(image, 0.0, 1.0)


def _otsu(values: np.ndarray, bins: int = 64) -> float:
    hist, edges = np.histogram(values, bins=bins)
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mu0 = m0 / np.maximum(w0, 1)
    mu1 = (m0[-1] - m0) / np.maximum(w1, 1)
    between = w0 * w1 * (mu0 - mu1) ** 2
    return float(centers[int(np.argmax(between))])


def silhouette(image: np.ndarray, min_contrast: float = 0.35) -> np.ndarray:
    """Foreground mask: pixels far from the border colour, largest component, holes filled.

    A 3x3 median filter first suppresses texture (hatching) and pixel noise.
    """
    img = ndimage.median_filter(_as_unit(image), size=(3, 3, 1), mode="nearest")
    border = np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]])
    bg = np.median(border, axis=0)
    dist = np.linalg.norm(img - bg, axis=-1)
    thr = max(_otsu(dist), min_contrast)
    mask = ndimage.binary_opening(dist > thr)
    labels, n = ndimage.label(mask)
    if n == 0:
        return mask
    sizes = ndimage.sum(mask, labels, index=np.arange(1, n + 1))
    mask = labels == (int(np.argmax(sizes)) + 1)
    return ndimage.binary_fill_holes(mask)


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def _shift(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    out[max(dy, 0): h + min(dy, 0), max(dx, 0): w + min(dx, 0)] = mask[max(-dy, 0): h + min(-dy, 0), max(-dx, 0): w + min(-dx, 0)]
    return out


def identity_score(image: np.ndarray, template: IdentityTemplate, search: int = 1) -> float:
    """IoU between the image's silhouette and the template, after aligning centroids.

    The centroid plays the role of the anchor landmark; a +-``search`` pixel
    refinement absorbs rounding. An empty silhouette scores 0.
    """
    mask = silhouette(image)
    ref = template.reference if template.reference is not None else template.silhouette
    if mask.shape != ref.shape:
        raise ContractError(f"image size {mask.shape} does not match template {ref.shape}")
    if not mask.any():
        return 0.0
    ys, xs = np.nonzero(mask)
    offset = np.rint(template.centroid - np.array([ys.mean(), xs.mean()])).astype(int)
    best = 0.0
    for dy in range(-search, search + 1):
        for dx in range(-search, search + 1):
            moved = _shift(mask, int(offset[0]) + dy, int(offset[1]) + dx)
            best = max(best, _iou(moved, ref))
    return best


# --------------------------------------------------------------------------- style


HIST_BINS = 4
LUMA = np.array([0.299, 0.587, 0.114])


def _soft_histogram(img: np.ndarray, bins: int = HIST_BINS) -> np.ndarray:
    """RGB histogram with trilinear vote splitting, so near-bin colours are not cut apart by the grid."""
    pos = np.clip(img.reshape(-1, 3) * bins - 0.5, 0.0, bins - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, bins - 1)
    frac = pos - lo
    hist = np.zeros(bins**3)
    for corner in range(8):
        pick = [(corner >> k) & 1 for k in range(3)]
        idx = np.where(pick, hi, lo)
        w = np.prod(np.where(pick, frac, 1.0 - frac), axis=1)
        hist += np.bincount((idx[:, 0] * bins + idx[:, 1]) * bins + idx[:, 2], weights=w, minlength=bins**3)
    return hist / hist.sum()


def style_features(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(soft colour histogram over a 4x4x4 RGB grid, share of edge energy in four directions).

    The edge shares (horizontal, vertical, diagonal, anti-diagonal) sum to one:
    they describe texture orientation, not contrast, so sampling grain does
    not swamp a hatching pattern.
    """
    img = _as_unit(image)
    lum = img @ LUMA
    edges = np.array([
        np.abs(np.diff(lum, axis=1)).mean(),
        np.abs(np.diff(lum, axis=0)).mean(),
        np.abs(lum[1:, 1:] - lum[:-1, :-1]).mean(),
        np.abs(lum[1:, :-1] - lum[:-1, 1:]).mean(),
    ])
    total = edges.sum()
    return _soft_histogram(img), (edges / total if total > 0 else edges)


class StyleReference:
    """Mean features of a held-out set of style images."""

    def __init__(self, images: Sequence[np.ndarray]):
        if len(images) == 0:
            raise ContractError("style reference set is empty")
        feats = [style_features(im) for im in images]
        self.hist = np.mean([f[0] for f in feats], axis=0)
        self.edges = np.mean([f[1] for f in feats], axis=0)

    def score(self, image: np.ndarray) -> float:
        hist, edges = style_features(image)
        # both are total-variation distances in [0, 1]
        d_hist = 0.5 * np.abs(hist - self.hist).sum()
        d_edge = 0.5 * np.abs(edges - self.edges).sum()
        return float(np.clip(1.0 - 0.5 * (d_hist + d_edge), 0.0, 1.0))


def style_score(image: np.ndarray, reference: StyleReference | Sequence[np.ndarray]) -> float:
    """1 - mean of the colour and edge-orientation distances to the reference mean, in [0, 1]."""
    if not isinstance(reference, StyleReference):
        reference = StyleReference(reference)
    return reference.score(image)
