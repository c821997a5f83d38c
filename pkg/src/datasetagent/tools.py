"""Image-processing and validation kernels invoked by tool plans.

Images are ``uint8`` numpy arrays shaped (H, W) or (H, W, C). Every kernel
returns a new array and leaves its input untouched.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from scipy import ndimage

from . import formats
from .errors import DegenerateCrop, ToolError, Unreadable, UnsupportedConversion, ZeroVariance
from .geometry import NormalizedBox, box_problem
from .validation import Violation


class Interpolation(str, enum.Enum):
    BILINEAR = "bilinear"
    BICUBIC = "bicubic"


class ColorSpace(str, enum.Enum):
    RGB = "RGB"
    HSV = "HSV"
    LAB = "LAB"


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(values, 0.0, 255.0) + 0.5).astype(np.uint8)


# ---------------------------------------------------------------- size changes


def crop_rect(image: np.ndarray, rect: tuple[int, int, int, int]) -> np.ndarray:
    x0, y0, x1, y1 = rect
    h, w = image.shape[:2]
    x0, x1 = max(0, x0), min(w, x1)
    y0, y1 = max(0, y0), min(h, y1)
    if x1 - x0 < 1 or y1 - y0 < 1:
        raise DegenerateCrop(f"crop rect {rect} is empty on a {w}x{h} image")
    return image[y0:y1, x0:x1].copy()


def crop(image: np.ndarray, box: NormalizedBox) -> np.ndarray:
    h, w = image.shape[:2]
    return crop_rect(image, box.pixel_rect(w, h))


def _catmull_rom(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    near = ((a + 2) * t - (a + 3)) * t * t + 1
    far = ((a * t - 5 * a) * t + 8 * a) * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _resample_matrix(n_in: int, n_out: int, interp: Interpolation) -> np.ndarray:
    """(n_out, n_in) weights; half-pixel centres, out-of-range taps clamped to the edge."""
    mat = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    if interp == Interpolation.BILINEAR:
        taps = [(0, 1 - frac), (1, frac)]
    else:
        taps = [(k, _catmull_rom(frac - k)) for k in (-1, 0, 1, 2)]
    rows = np.arange(n_out)
    for offset, weight in taps:
        idx = np.clip(base + offset, 0, n_in - 1)
        np.add.at(mat, (rows, idx), weight)
    return mat


def resize(
    image: np.ndarray, size: tuple[int, int], interp: Interpolation | str = Interpolation.BILINEAR
) -> np.ndarray:
    """Resize to ``size`` = (width, height).

    Bicubic uses the Catmull-Rom kernel (a = -0.5). No antialiasing prefilter is
    applied when shrinking.
    """
    interp = Interpolation(interp)
    w_out, h_out = size
    if w_out < 1 or h_out < 1:
        raise ToolError(f"target size {size} must be at least 1x1")
    h_in, w_in = image.shape[:2]
    wy = _resample_matrix(h_in, h_out, interp)
    wx = _resample_matrix(w_in, w_out, interp)
    src = image.astype(np.float64)
    if src.ndim == 2:
        out = wy @ src @ wx.T
    else:
        out = np.einsum("ij,jkc,lk->ilc", wy, src, wx)
    return _to_uint8(out)


def resize_nearest(labels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resampling for label maps and masks (half-pixel centres)."""
    w_out, h_out = size
    h_in, w_in = labels.shape[:2]
    ys = np.minimum(((np.arange(h_out) + 0.5) * h_in / h_out).astype(int), h_in - 1)
    xs = np.minimum(((np.arange(w_out) + 0.5) * w_in / w_out).astype(int), w_in - 1)
    return labels[ys][:, xs].copy()


# ----------------------------------------------------------------- colour

_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_SRGB = np.linalg.inv(_SRGB_TO_XYZ)
_D65_WHITE = _SRGB_TO_XYZ.sum(axis=1)
_DELTA = 6 / 29


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0, 1] -> CIELAB (L in [0, 100]) under D65."""
    c = np.asarray(rgb, dtype=np.float64)
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _SRGB_TO_XYZ.T / _D65_WHITE
    f = np.where(xyz > _DELTA**3, np.cbrt(xyz), xyz / (3 * _DELTA**2) + 4 / 29)
    L = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16) / 116
    fx = fy + lab[..., 1] / 500
    fz = fy - lab[..., 2] / 200
    f = np.stack([fx, fy, fz], axis=-1)
    xyz = np.where(f > _DELTA, f**3, 3 * _DELTA**2 * (f - 4 / 29)) * _D65_WHITE
    lin = np.clip(xyz @ _XYZ_TO_SRGB.T, 0.0, None)
    rgb = np.where(lin <= 0.0031308, 12.92 * lin, 1.055 * lin ** (1 / 2.4) - 0.055)
    return np.clip(rgb, 0.0, 1.0)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0, 1] -> (H degrees in [0, 360), S in [0, 1], V in [0, 1])."""
    c = np.asarray(rgb, dtype=np.float64)
    r, g, b = c[..., 0], c[..., 1], c[..., 2]
    v = c.max(axis=-1)
    delta = v - c.min(axis=-1)
    s = np.where(v > 0, delta / np.where(v > 0, v, 1), 0.0)
    safe = np.where(delta > 0, delta, 1)
    h = np.where(
        v == r,
        ((g - b) / safe) % 6,
        np.where(v == g, (b - r) / safe + 2, (r - g) / safe + 4),
    )
    h = np.where(delta > 0, h * 60.0, 0.0)
    return np.stack([h % 360.0, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0] % 360.0, hsv[..., 1], hsv[..., 2]
    c = v * s
    hp = h / 60.0
    x = c * (1 - np.abs(hp % 2 - 1))
    m = v - c
    sector = np.floor(hp).astype(int) % 6
    zeros = np.zeros_like(c)
    table = [(c, x, zeros), (x, c, zeros), (zeros, c, x), (zeros, x, c), (x, zeros, c), (c, zeros, x)]
    rgb = np.zeros(hsv.shape)
    for k, (r, g, b) in enumerate(table):
        sel = sector == k
        rgb[..., 0] = np.where(sel, r, rgb[..., 0])
        rgb[..., 1] = np.where(sel, g, rgb[..., 1])
        rgb[..., 2] = np.where(sel, b, rgb[..., 2])
    return rgb + m[..., None]


def convert_color_space(image: np.ndarray, src: ColorSpace | str, dst: ColorSpace | str) -> np.ndarray:
    """8-bit colour conversion between RGB and HSV/LAB.

    HSV is stored as (H/2, S*255, V*255); LAB as (L*255/100, a+128, b+128).
    """
    src, dst = ColorSpace(src), ColorSpace(dst)
    if image.ndim != 3 or image.shape[2] != 3:
        raise UnsupportedConversion("colour conversion needs a 3-channel image")
    if src == dst:
        return image.copy()
    x = image.astype(np.float64)
    if src == ColorSpace.RGB and dst == ColorSpace.HSV:
        hsv = rgb_to_hsv(x / 255.0)
        h = np.floor(hsv[..., 0] / 2 + 0.5) % 180
        return _to_uint8(np.stack([h, hsv[..., 1] * 255, hsv[..., 2] * 255], axis=-1))
    if src == ColorSpace.RGB and dst == ColorSpace.LAB:
        lab = rgb_to_lab(x / 255.0)
        return _to_uint8(np.stack([lab[..., 0] * 255 / 100, lab[..., 1] + 128, lab[..., 2] + 128], axis=-1))
    if src == ColorSpace.HSV and dst == ColorSpace.RGB:
        hsv = np.stack([x[..., 0] * 2, x[..., 1] / 255, x[..., 2] / 255], axis=-1)
        return _to_uint8(hsv_to_rgb(hsv) * 255)
    if src == ColorSpace.LAB and dst == ColorSpace.RGB:
        lab = np.stack([x[..., 0] * 100 / 255, x[..., 1] - 128, x[..., 2] - 128], axis=-1)
        return _to_uint8(lab_to_rgb(lab) * 255)
    raise UnsupportedConversion(f"{src.value} -> {dst.value} is not supported")


# Reference (mean, std) per LAB channel; None keeps the channel's own spread.
LAB_REFERENCE = ((50.0, 20.0), (0.0, None), (0.0, None))


def normalize_color(image: np.ndarray, reference=LAB_REFERENCE) -> np.ndarray:
    """Standardize each LAB channel and map it onto reference statistics."""
    gray = image.ndim == 2
    rgb = np.repeat(image[:, :, None], 3, axis=2) if gray else image
    lab = rgb_to_lab(rgb.astype(np.float64) / 255.0)
    out = np.empty_like(lab)
    for ch, (mean_ref, std_ref) in enumerate(reference):
        v = lab[..., ch]
        mu, sd = v.mean(), v.std()
        if sd > 1e-12 and std_ref is not None:
            out[..., ch] = (v - mu) / sd * std_ref + mean_ref
        else:
            out[..., ch] = v - mu + mean_ref
    out[..., 0] = np.clip(out[..., 0], 0, 100)
    result = _to_uint8(lab_to_rgb(out) * 255)
    return result[..., 0] if gray else result


# --------------------------------------------------------- value rescaling


def normalize_pixels(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) / 255.0


def standardize_pixels(image: np.ndarray) -> np.ndarray:
    """Per-channel zero mean, unit population standard deviation."""
    x = np.asarray(image, dtype=np.float64)
    chans = x[..., None] if x.ndim == 2 else x
    mean = chans.mean(axis=(0, 1))
    std = chans.std(axis=(0, 1))
    if np.any(std == 0):
        raise ZeroVariance(f"constant channel(s): {np.flatnonzero(std == 0).tolist()}")
    out = (chans - mean) / std
    return out[..., 0] if x.ndim == 2 else out


# ------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentSpec:
    """One augmentation. ``kind`` is rotate, flip_h, flip_v, gaussian_noise or pad_crop.

    ``crop`` for pad_crop is a pixel rect (x0, y0, x1, y1) in the padded image;
    when omitted the original frame is cut back out.
    """

    kind: str
    degrees: int = 90
    sigma: float = 1.0
    seed: int = 0
    pad: int = 0
    crop: tuple[int, int, int, int] | None = None

    def __post_init__(self):
        if self.kind not in ("rotate", "flip_h", "flip_v", "gaussian_noise", "pad_crop"):
            raise ValueError(f"unknown augmentation {self.kind!r}")
        if self.kind == "rotate" and self.degrees not in (90, 180, 270):
            raise ValueError("rotation must be 90, 180 or 270 degrees")
        if self.kind == "gaussian_noise" and not self.sigma > 0:
            raise ValueError("noise sigma must be positive")
        if self.kind == "pad_crop" and self.pad < 0:
            raise ValueError("padding must be non-negative")


def augment(image: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    if spec.kind == "rotate":
        return np.rot90(image, k=spec.degrees // 90).copy()
    if spec.kind == "flip_h":
        return image[:, ::-1].copy()
    if spec.kind == "flip_v":
        return image[::-1].copy()
    if spec.kind == "gaussian_noise":
        rng = np.random.default_rng(spec.seed)
        return _to_uint8(image.astype(np.float64) + rng.normal(0.0, spec.sigma, image.shape))
    # pad_crop
    p = spec.pad
    widths = ((p, p), (p, p)) + (((0, 0),) if image.ndim == 3 else ())
    padded = np.pad(image, widths, mode="reflect") if p else image
    h, w = image.shape[:2]
    rect = spec.crop if spec.crop is not None else (p, p, p + w, p + h)
    return crop_rect(padded, rect)


# -------------------------------------------------------------- validation


def validate_annotation_file(
    path: str | Path, fmt: str, image_dims: tuple[int, int], class_names: Sequence[str]
) -> list[Violation]:
    """Check an emitted YOLO/VOC/COCO file against the class list and image bounds.

    ``image_dims`` is (width, height); COCO files use their own per-image sizes
    and fall back to it only when a size is missing.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise Unreadable(str(path)) from exc
    fmt = fmt.upper()
    if fmt == "YOLO":
        return _validate_yolo(text, class_names)
    if fmt == "VOC":
        return _validate_voc(text, image_dims, class_names)
    if fmt == "COCO":
        return _validate_coco(text, image_dims, class_names)
    raise ValueError(f"unknown annotation format {fmt!r}")


_EPS = 1e-6


def _validate_yolo(text: str, class_names) -> list[Violation]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        where = f"line {lineno}"
        if len(parts) != 5:
            out.append(Violation(where, "parse", f"{len(parts)} fields"))
            continue
        try:
            idx = int(parts[0])
            cx, cy, w, h = (float(v) for v in parts[1:])
        except ValueError:
            out.append(Violation(where, "parse", line))
            continue
        if not 0 <= idx < len(class_names):
            out.append(Violation(where, "unknown-class", str(idx)))
        if w <= 0 or h <= 0:
            out.append(Violation(where, "degenerate-box"))
        if (
            cx - w / 2 < -_EPS
            or cy - h / 2 < -_EPS
            or cx + w / 2 > 1 + _EPS
            or cy + h / 2 > 1 + _EPS
        ):
            out.append(Violation(where, "out-of-bounds"))
    return out


def _validate_voc(text: str, image_dims, class_names) -> list[Violation]:
    try:
        parsed = formats.parse_voc(text)
    except Exception as exc:  # noqa: BLE001 - any parse failure is a violation
        return [Violation("document", "parse", str(exc))]
    out = []
    W, H = image_dims
    if (parsed["width"], parsed["height"]) != (W, H):
        out.append(Violation("size", "dims", f"{parsed['width']}x{parsed['height']} != {W}x{H}"))
    names = set(class_names)
    for i, (name, x0, y0, x1, y1) in enumerate(parsed["objects"]):
        where = f"object {i}"
        if name not in names:
            out.append(Violation(where, "unknown-class", name))
        if not (1 <= x0 <= x1 <= W and 1 <= y0 <= y1 <= H):
            out.append(Violation(where, "out-of-bounds"))
    return out


def _validate_coco(text: str, image_dims, class_names) -> list[Violation]:
    try:
        doc = formats.parse_coco(text)
    except Exception as exc:  # noqa: BLE001
        return [Violation("document", "parse", str(exc))]
    out = []
    names = set(class_names)
    cat_ids = {}
    for c in doc["categories"]:
        if c.get("name") not in names:
            out.append(Violation(f"category {c.get('id')}", "unknown-class", str(c.get("name"))))
        cat_ids[c.get("id")] = c.get("name")
    images = {}
    for img in doc["images"]:
        if img.get("id") in images:
            out.append(Violation(f"image {img.get('id')}", "duplicate-id"))
        images[img.get("id")] = (img.get("width", image_dims[0]), img.get("height", image_dims[1]))
    seen = set()
    for a in doc["annotations"]:
        aid = a.get("id")
        where = f"annotation {aid}"
        if aid in seen:
            out.append(Violation(where, "duplicate-id"))
        seen.add(aid)
        if a.get("category_id") not in cat_ids:
            out.append(Violation(where, "unknown-class", str(a.get("category_id"))))
        if a.get("image_id") not in images:
            out.append(Violation(where, "unknown-image", str(a.get("image_id"))))
            continue
        W, H = images[a["image_id"]]
        try:
            x, y, w, h = (float(v) for v in a["bbox"])
        except (KeyError, TypeError, ValueError):
            out.append(Violation(where, "parse", "bbox"))
            continue
        if w <= 0 or h <= 0:
            out.append(Violation(where, "degenerate-box"))
        if x < -_EPS or y < -_EPS or x + w > W + _EPS or y + h > H + _EPS:
            out.append(Violation(where, "out-of-bounds"))
    return out


def validate_mask(
    mask: np.ndarray,
    image_dims: tuple[int, int],
    hole_max: int = 16,
    jag_ratio: float = 4.0,
) -> list[Violation]:
    """Flag small enclosed holes, jagged regions and size mismatches in a mask.

    ``mask`` is a binary mask or a class-index map (0 = background);
    ``image_dims`` is (width, height).
    """
    mask = np.asarray(mask)
    W, H = image_dims
    if mask.shape[:2] != (H, W):
        return [Violation("mask", "dims", f"{mask.shape[1]}x{mask.shape[0]} != {W}x{H}")]
    labels = mask.astype(np.int64)
    out = []
    four = ndimage.generate_binary_structure(2, 1)

    background, n_bg = ndimage.label(labels == 0, structure=four)
    if n_bg:
        border = set(np.unique(np.concatenate(
            [background[0], background[-1], background[:, 0], background[:, -1]]
        )).tolist())
        sizes = ndimage.sum_labels(np.ones_like(background), background, index=np.arange(1, n_bg + 1))
        for comp in range(1, n_bg + 1):
            if comp in border or sizes[comp - 1] >= hole_max:
                continue
            region = background == comp
            ring = ndimage.binary_dilation(region, structure=four) & ~region
            owners = np.unique(labels[ring])
            if len(owners) == 1:
                out.append(
                    Violation("mask", "hole", f"{int(sizes[comp - 1])} px enclosed by class {int(owners[0])}")
                )

    for value in np.unique(labels):
        if value == 0:
            continue
        region = labels == value
        interior = ndimage.binary_erosion(region, structure=four, border_value=0)
        boundary = int(np.count_nonzero(region & ~interior))
        ys, xs = np.nonzero(region)
        bw, bh = int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)
        ratio = boundary / (2 * (bw + bh))
        if ratio > jag_ratio:
            out.append(Violation("mask", "jagged", f"class {int(value)} boundary ratio {ratio:.2f}"))
    return out


# ------------------------------------------------------------------ registry


@dataclass(frozen=True)
class ToolSpec:
    op: str
    func: Callable[..., np.ndarray]
    params: tuple[str, ...]
    geometric: bool
    description: str


def _op_crop(image, box):
    return crop(image, NormalizedBox.from_seq(box))


def _op_resize(image, width, height, interp="bicubic"):
    return resize(image, (int(width), int(height)), interp)


def _op_color_normalize(image):
    return normalize_color(image)


def _op_flip_h(image):
    return augment(image, AugmentSpec("flip_h"))


def _op_flip_v(image):
    return augment(image, AugmentSpec("flip_v"))


def _op_rotate(image, degrees):
    return augment(image, AugmentSpec("rotate", degrees=int(degrees)))


def _op_noise(image, sigma, seed):
    return augment(image, AugmentSpec("gaussian_noise", sigma=float(sigma), seed=int(seed)))


TOOL_REGISTRY: dict[str, ToolSpec] = {
    t.op: t
    for t in (
        ToolSpec("crop", _op_crop, ("box",), True, "cut out a normalized box"),
        ToolSpec("resize", _op_resize, ("width", "height", "interp"), True, "resample to a fixed size"),
        ToolSpec("color_normalize", _op_color_normalize, (), False, "LAB colour normalization"),
        ToolSpec("flip_h", _op_flip_h, (), True, "mirror left-right"),
        ToolSpec("flip_v", _op_flip_v, (), True, "mirror top-bottom"),
        ToolSpec("rotate", _op_rotate, ("degrees",), True, "rotate counter-clockwise by a right angle"),
        ToolSpec("gaussian_noise", _op_noise, ("sigma", "seed"), False, "add seeded Gaussian noise"),
    )
}


@dataclass(frozen=True)
class ToolStep:
    op: str
    params: dict[str, Any] = field(default_factory=dict)
    justification: str = ""

    def to_dict(self) -> dict:
        return {"op": self.op, "params": dict(self.params), "justification": self.justification}


def check_step(step: ToolStep) -> list[Violation]:
    spec = TOOL_REGISTRY.get(step.op)
    if spec is None:
        return [Violation("op", "unknown-tool", step.op)]
    unknown = set(step.params) - set(spec.params)
    out = [Violation(f"{step.op}.{p}", "unknown-parameter") for p in sorted(unknown)]
    if step.op == "crop":
        box = step.params.get("box")
        if not isinstance(box, (list, tuple)) or len(box) != 4 or box_problem(box):
            out.append(Violation("crop.box", "invalid-box", json.dumps(box)))
    return out


def run_step(image: np.ndarray, step: ToolStep) -> np.ndarray:
    spec = TOOL_REGISTRY.get(step.op)
    if spec is None:
        raise ToolError(f"unknown tool {step.op!r}")
    try:
        return spec.func(image, **step.params)
    except ToolError:
        raise
    except (TypeError, ValueError) as exc:
        raise ToolError(f"{step.op}: {exc}") from exc


def run_plan(image: np.ndarray, steps: Sequence[ToolStep]) -> np.ndarray:
    for step in steps:
        image = run_step(image, step)
    return image
