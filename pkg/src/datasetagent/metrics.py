"""Dataset quality metrics.

Log bases: DSE is in bits (log2); DDC and IDDE are in nats.
"""

from __future__ import annotations

import csv
import math
import random
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    BothEmpty,
    DegenerateVector,
    EmptyEdgeSet,
    ImageTooSmall,
    IngestMismatch,
    MetricError,
    SampleTooLarge,
    UnsupportedSupport,
)

SMALL_AREA = 32**2
LARGE_AREA = 96**2
PARTIAL_OCCLUSION = 0.3
SEVERE_OCCLUSION = 0.6

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2, SSIM_L = 0.01, 0.03, 255.0


def _proportions(counts: Sequence[float]) -> np.ndarray:
    c = np.asarray(counts, dtype=np.float64)
    if c.ndim != 1 or c.size < 1:
        raise MetricError("need at least one count")
    if np.any(c < 0):
        raise MetricError("counts must be non-negative")
    total = c.sum()
    if total <= 0:
        raise MetricError("counts sum to zero")
    return c / total


def cbi(counts: Sequence[float]) -> float:
    """Class balance index: std-dev of class proportions around 1/K (lower is better)."""
    p = _proportions(counts)
    k = p.size
    return float(math.sqrt(np.mean((p - 1.0 / k) ** 2)))


def pcb(pixel_counts: Sequence[float]) -> float:
    """Pixel category balance: 1 minus the pixel-level class balance deviation."""
    r = _proportions(pixel_counts)
    k = r.size
    return float(1.0 - math.sqrt(np.sum((r - 1.0 / k) ** 2) / k))


def dse(source_counts: Sequence[float]) -> float:
    """Data source entropy in bits."""
    p = _proportions(source_counts)
    p = p[p > 0]
    return float(max(0.0, -np.sum(p * np.log2(p))))


def ddc(p: Sequence[float], q: Sequence[float]) -> float:
    """KL(P || Q) in nats between aligned categorical distributions."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise MetricError("P and Q must be aligned 1-D distributions")
    for name, d in (("P", p), ("Q", q)):
        if np.any(d < 0) or abs(d.sum() - 1.0) > 1e-9:
            raise MetricError(f"{name} is not a probability distribution")
    support = p > 0
    if np.any(q[support] == 0):
        raise UnsupportedSupport("Q is zero where P is positive")
    return float(max(0.0, np.sum(p[support] * np.log(p[support] / q[support]))))


def area_bucket(area: float) -> str:
    if area < SMALL_AREA:
        return "small"
    if area > LARGE_AREA:
        return "large"
    return "medium"


def idde(areas: Iterable[float]) -> float:
    """Entropy (nats) of the small/medium/large split of instance areas."""
    areas = list(areas)
    if not areas:
        raise MetricError("no instance areas")
    counts = {"small": 0, "medium": 0, "large": 0}
    for a in areas:
        counts[area_bucket(a)] += 1
    p = np.array([c for c in counts.values() if c], dtype=np.float64) / len(areas)
    return float(max(0.0, -np.sum(p * np.log(p))))


def bqi(ious: Iterable[float]) -> float:
    """Full credit for IoU > 0.7, half credit for 0.5 < IoU <= 0.7."""
    ious = np.asarray(list(ious), dtype=np.float64)
    if ious.size == 0:
        raise MetricError("no IoU samples")
    full = np.count_nonzero(ious > 0.7)
    half = np.count_nonzero((ious > 0.5) & (ious <= 0.7))
    return float((full + 0.5 * half) / ious.size)


def osr(levels: Iterable[float]) -> float:
    """Fraction of samples with any occlusion."""
    levels = np.asarray(list(levels), dtype=np.float64)
    if levels.size == 0:
        raise MetricError("no occlusion levels")
    return float(np.count_nonzero(levels > 0) / levels.size)


def occlusion_severity(level: float) -> str:
    if level > SEVERE_OCCLUSION:
        return "severe"
    if level > PARTIAL_OCCLUSION:
        return "partial"
    if level > 0:
        return "slight"
    return "none"


def occlusion_breakdown(levels: Iterable[float]) -> dict[str, int]:
    out = {"none": 0, "slight": 0, "partial": 0, "severe": 0}
    for lv in levels:
        out[occlusion_severity(lv)] += 1
    return out


def sdi(features: Sequence[Sequence[float]]) -> float:
    """1 minus the mean cosine similarity over ordered pairs i != j."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise MetricError("SDI needs at least two feature vectors")
    norms = np.linalg.norm(f, axis=1)
    if np.any(norms == 0):
        raise DegenerateVector("zero-norm feature vector")
    unit = f / norms[:, None]
    sim = unit @ unit.T
    n = f.shape[0]
    off_diag = sim.sum() - np.trace(sim)
    return float(1.0 - off_diag / (n * (n - 1)))


def acs_dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum() + b.sum())
    if total == 0:
        raise BothEmpty("both masks are empty")
    return float(2 * np.count_nonzero(a & b) / total)


def to_gray(image: np.ndarray) -> np.ndarray:
    """Luma (BT.601 weights) as float64; grayscale input passes through."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 3:
        if x.shape[2] == 1:
            return x[..., 0]
        return 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]
    return x


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Mean SSIM over all 11x11 Gaussian windows fully inside the image."""
    a, b = to_gray(img_a), to_gray(img_b)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ImageTooSmall(f"{a.shape} is smaller than the {SSIM_WINDOW}px window")
    g = gaussian_window()
    half = SSIM_WINDOW // 2

    def local_mean(x):
        y = ndimage.correlate1d(x, g, axis=0, mode="constant")
        y = ndimage.correlate1d(y, g, axis=1, mode="constant")
        return y[half:-half, half:-half]

    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a**2
    var_b = local_mean(b * b) - mu_b**2
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def boundary_pixels(labels: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbour (inside the image) carrying a different label."""
    lab = np.asarray(labels)
    edge = np.zeros(lab.shape, dtype=bool)
    dv = lab[1:, :] != lab[:-1, :]
    dh = lab[:, 1:] != lab[:, :-1]
    edge[1:, :] |= dv
    edge[:-1, :] |= dv
    edge[:, 1:] |= dh
    edge[:, :-1] |= dh
    return edge


def gradient_magnitude(gray: np.ndarray) -> np.ndarray:
    """L2 norm of the 3x3 Sobel gradient with edge-replicated borders."""
    g = np.asarray(gray, dtype=np.float64)
    gx = ndimage.sobel(g, axis=1, mode="nearest")
    gy = ndimage.sobel(g, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def esi(gray: np.ndarray, edges: np.ndarray) -> float:
    """Mean Sobel gradient magnitude over the edge pixels ``edges`` (bool mask)."""
    edges = np.asarray(edges, dtype=bool)
    g = to_gray(gray)
    if edges.shape != g.shape:
        raise MetricError("edge mask and image differ in size")
    if not edges.any():
        raise EmptyEdgeSet("no edge pixels")
    return float(gradient_magnitude(g)[edges].mean())


def histogram_features(image: np.ndarray, bins: int = 64, size: int = 32) -> np.ndarray:
    """Default SDI extractor: grayscale histogram of the image resized to size x size."""
    from .tools import resize

    small = resize(np.asarray(image), (size, size), "bilinear")
    gray = np.floor(to_gray(small) + 0.5).clip(0, 255)
    hist, _ = np.histogram(gray, bins=bins, range=(0, 256))
    return hist.astype(np.float64)


HISTOGRAM_EXTRACTOR_ID = "gray-hist64@32x32"


# ------------------------------------------------------------------- ALR


def alr_manifest(
    items: Sequence[tuple[str, str]], sample_n: int, seed: int, path: str | Path | None = None
) -> list[tuple[str, str]]:
    """Seeded uniform sample (without replacement) of (image_id, label) pairs.

    When ``path`` is given the sample is written as a TSV with an empty verdict
    column for inspectors to fill in.
    """
    if sample_n > len(items):
        raise SampleTooLarge(f"sample of {sample_n} from {len(items)} items")
    ordered = sorted(items)
    sample = random.Random(seed).sample(ordered, sample_n)
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["image_id", "label", "verdict"])
            for image_id, label in sample:
                w.writerow([image_id, label, ""])
    return sample


_TRUE = {"1", "true", "yes", "y", "correct", "ok"}
_FALSE = {"0", "false", "no", "n", "incorrect", "wrong"}


def read_verdicts(path: str | Path) -> dict[str, bool]:
    verdicts = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            v = (row.get("verdict") or "").strip().lower()
            if v in _TRUE:
                verdicts[row["image_id"]] = True
            elif v in _FALSE:
                verdicts[row["image_id"]] = False
            else:
                raise IngestMismatch(f"unreadable verdict {v!r} for {row.get('image_id')}")
    return verdicts


def alr_ingest(verdicts: Mapping[str, bool], manifest: Sequence[tuple[str, str]]) -> float:
    """Fraction of inspected labels judged correct."""
    known = {image_id for image_id, _ in manifest}
    unknown = sorted(set(verdicts) - known)
    if unknown:
        raise IngestMismatch(f"verdicts for images not in the manifest: {unknown[:5]}")
    if not verdicts:
        raise MetricError("no verdicts")
    return sum(1 for v in verdicts.values() if v) / len(verdicts)
