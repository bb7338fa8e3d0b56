"""Dense optical flow: estimation, color coding, resizing, and file I/O.

Flow is estimated with the classic Horn-Schunck variational scheme and
rendered with the Middlebury color wheel (hue = direction, saturation =
magnitude, zero flow = white). An approximate inverse of the rendering is
provided so color-space errors can be interpreted as motion errors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, DimensionError, NonFiniteError

DEFAULT_ALPHA = 15.0
DEFAULT_ITERATIONS = 200

FLO_MAGIC = b"PIEH"


@dataclass
class FlowField:
    """Per-pixel displacement in pixels per frame pair."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise DimensionError(f"flow components disagree: {self.u.shape} vs {self.v.shape}")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise NonFiniteError("flow field contains non-finite values")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.u ** 2 + self.v ** 2)


# ---------------------------------------------------------------------------
# Horn-Schunck estimation
# ---------------------------------------------------------------------------


def _neighbor_average(a: np.ndarray) -> np.ndarray:
    """4-neighbor mean with edge replication."""
    p = np.pad(a, 1, mode="edge")
    return 0.25 * (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:])


def estimate_flow_hs(frame_a: np.ndarray, frame_b: np.ndarray,
                     alpha: float = DEFAULT_ALPHA,
                     iterations: int = DEFAULT_ITERATIONS) -> FlowField:
    """Horn-Schunck flow between two grayscale frames in [0,1].

    Spatial derivatives are central differences of the frame average; the
    temporal derivative is the plain frame difference. ``iterations``
    Jacobi sweeps relax u <- ubar - Ix*(Ix*ubar + Iy*vbar + It)/(alpha^2 +
    Ix^2 + Iy^2) (and symmetrically for v) from a zero initialization.
    """
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"frame sizes disagree: {a.shape} vs {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise NonFiniteError("frames contain non-finite pixels")
    if alpha <= 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    if iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")

    avg = 0.5 * (a + b)
    ix = np.gradient(avg, axis=1)
    iy = np.gradient(avg, axis=0)
    it = b - a

    denom = alpha ** 2 + ix ** 2 + iy ** 2
    u = np.zeros_like(a)
    v = np.zeros_like(a)
    for _ in range(iterations):
        ubar = _neighbor_average(u)
        vbar = _neighbor_average(v)
        common = (ix * ubar + iy * vbar + it) / denom
        u = ubar - ix * common
        v = vbar - iy * common
    return FlowField(u, v)


# ---------------------------------------------------------------------------
# Middlebury color coding
# ---------------------------------------------------------------------------

# color-wheel sector lengths between the six anchor colors
_SECTORS = (("RY", 15), ("YG", 6), ("GC", 4), ("CB", 11), ("BM", 13), ("MR", 6))


def _color_wheel() -> np.ndarray:
    total = sum(n for _, n in _SECTORS)
    wheel = np.zeros((total, 3))
    col = 0
    ry, yg, gc, cb, bm, mr = (n for _, n in _SECTORS)
    wheel[col:col + ry, 0] = 1.0
    wheel[col:col + ry, 1] = np.arange(ry) / ry
    col += ry
    wheel[col:col + yg, 0] = 1.0 - np.arange(yg) / yg
    wheel[col:col + yg, 1] = 1.0
    col += yg
    wheel[col:col + gc, 1] = 1.0
    wheel[col:col + gc, 2] = np.arange(gc) / gc
    col += gc
    wheel[col:col + cb, 1] = 1.0 - np.arange(cb) / cb
    wheel[col:col + cb, 2] = 1.0
    col += cb
    wheel[col:col + bm, 2] = 1.0
    wheel[col:col + bm, 0] = np.arange(bm) / bm
    col += bm
    wheel[col:col + mr, 2] = 1.0 - np.arange(mr) / mr
    wheel[col:col + mr, 0] = 1.0
    return wheel


WHEEL = _color_wheel()
MAGNITUDE_FLOOR = 1e-6


def auto_max_magnitude(flow: FlowField) -> float:
    """Robust normalizer: 99th-percentile magnitude, floored at 1e-6."""
    return max(float(np.percentile(flow.magnitude(), 99.0)), MAGNITUDE_FLOOR)


def flow_to_color(flow: FlowField, max_magnitude: float | None = None) -> np.ndarray:
    """Render a flow field as an [H,W,3] image in [0,1].

    Direction picks the hue from the 55-entry Middlebury wheel via
    atan2(-v,-u); magnitude relative to ``max_magnitude`` (auto: robust
    percentile) sets the saturation, clamped at 1. Zero flow is white.
    """
    if max_magnitude is None:
        max_magnitude = auto_max_magnitude(flow)
    if max_magnitude <= 0:
        raise ConfigError(f"max_magnitude must be positive, got {max_magnitude}")
    mag = np.clip(flow.magnitude() / max_magnitude, 0.0, 1.0)
    angle = np.arctan2(-flow.v, -flow.u) / np.pi  # in (-1, 1]
    n = WHEEL.shape[0]
    fk = (angle + 1.0) / 2.0 * (n - 1)
    k0 = np.floor(fk).astype(np.int64) % n
    k1 = (k0 + 1) % n
    frac = (fk - np.floor(fk))[..., None]
    col = (1.0 - frac) * WHEEL[k0] + frac * WHEEL[k1]
    img = 1.0 - mag[..., None] * (1.0 - col)
    return np.clip(img, 0.0, 1.0)


def color_to_flow(image: np.ndarray, max_magnitude: float) -> FlowField:
    """Approximate inverse of :func:`flow_to_color`.

    Scans a dense set of wheel directions, picking per pixel the direction
    (and least-squares magnitude) whose rendering best matches the color.
    Round-trips within ~7 degrees / 5% magnitude over the usable range.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"flow image must be [H,W,3], got {img.shape}")
    n = WHEEL.shape[0]
    samples_per_sector = 4
    fk = np.linspace(0.0, n - 1, n * samples_per_sector, endpoint=True)
    k0 = np.floor(fk).astype(np.int64) % n
    k1 = (k0 + 1) % n
    frac = (fk - np.floor(fk))[:, None]
    cand_colors = (1.0 - frac) * WHEEL[k0] + frac * WHEEL[k1]  # [K,3]
    cand_angles = (fk / (n - 1)) * 2.0 - 1.0  # atan2(-v,-u)/pi

    resid = 1.0 - img  # [H,W,3]; equals m*(1 - wheel color) under the encoding
    basis = 1.0 - cand_colors  # [K,3]
    denom = np.maximum((basis ** 2).sum(axis=1), 1e-12)  # [K]
    proj = np.einsum("hwc,kc->hwk", resid, basis)
    mags = np.clip(proj / denom, 0.0, 1.0)  # [H,W,K]
    errs = (
        (resid ** 2).sum(axis=2)[..., None]
        - 2.0 * mags * proj
        + (mags ** 2) * denom
    )
    best = errs.argmin(axis=2)
    h, w = img.shape[:2]
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    m = mags[ii, jj, best] * max_magnitude
    ang = cand_angles[best] * np.pi
    u = -m * np.cos(ang)
    v = -m * np.sin(ang)
    return FlowField(u, v)


# ---------------------------------------------------------------------------
# Resizing
# ---------------------------------------------------------------------------


def resize_bilinear(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-center alignment.

    Accepts [H,W] or [H,W,C]; returns the same rank.
    """
    if target_h < 1 or target_w < 1:
        raise ConfigError(f"target size must be >= 1, got {target_h}x{target_w}")
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    if (h, w) == (target_h, target_w):
        out = img.copy()
        return out[..., 0] if squeeze else out

    ys = (np.arange(target_h) + 0.5) * (h / target_h) - 0.5
    xs = (np.arange(target_w) + 0.5) * (w / target_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]

    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out[..., 0] if squeeze else out


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Read an 8-bit PNG/PPM as float in [0,1]: [H,W] gray or [H,W,3]."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, ValueError) as e:
        raise DataError(f"unreadable image {path}: {e}") from e
    return arr


def write_image(path, image: np.ndarray) -> None:
    """Write a float image in [0,1] ([H,W] or [H,W,3]) as 8-bit PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode="RGB" if data.ndim == 3 else "L").save(path, format="PNG")


def write_flo(path, flow: FlowField) -> None:
    """Write raw flow: magic "PIEH", int32 width/height, float32 (u,v) pairs."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(struct.pack("<ii", flow.width, flow.height))
        interleaved = np.stack([flow.u, flow.v], axis=-1).astype("<f4")
        f.write(interleaved.tobytes())


def read_flo(path) -> FlowField:
    try:
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != FLO_MAGIC:
                raise DataError(f"{path}: bad flow magic {magic!r}")
            w, h = struct.unpack("<ii", f.read(8))
            raw = np.frombuffer(f.read(w * h * 2 * 4), dtype="<f4")
    except (OSError, struct.error) as e:
        raise DataError(f"unreadable flow file {path}: {e}") from e
    if raw.size != w * h * 2:
        raise DataError(f"{path}: truncated flow payload")
    uv = raw.reshape(h, w, 2).astype(np.float64)
    return FlowField(uv[..., 0], uv[..., 1])
