"""Dataset plumbing: manifests, time windows, folds, and synthetic data.

Real data follows a Brain4cars-style layout: per sample, one directory of
inside (driver) frames at 25 fps and one of outside (road) frames at
30 fps, indexed by a JSON-lines manifest. The maneuver happens right after
the final frame, so time windows are anchored to the end of each video.

A synthetic two-stream generator produces the same layout at desk scale:
inside clips show a textured head blob whose lateral sweep encodes the
class, outside clips show a global motion pattern (translation for lane
changes, vertical shear for turns, near-zero for straight). In
"complementary" mode one class pair is made identical inside and a
different pair identical outside, so only both streams together separate
all five classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import DataError, ManeuverError
from .flow import read_image, write_image

INSIDE_FPS = 25
OUTSIDE_FPS = 30
FRAME_PATTERN = "%06d.png"


class ManeuverClass(IntEnum):
    GO_STRAIGHT = 0
    LEFT_LANE_CHANGE = 1
    LEFT_TURN = 2
    RIGHT_LANE_CHANGE = 3
    RIGHT_TURN = 4


MIRROR_MAP = {
    ManeuverClass.GO_STRAIGHT: ManeuverClass.GO_STRAIGHT,
    ManeuverClass.LEFT_LANE_CHANGE: ManeuverClass.RIGHT_LANE_CHANGE,
    ManeuverClass.RIGHT_LANE_CHANGE: ManeuverClass.LEFT_LANE_CHANGE,
    ManeuverClass.LEFT_TURN: ManeuverClass.RIGHT_TURN,
    ManeuverClass.RIGHT_TURN: ManeuverClass.LEFT_TURN,
}

_LABEL_NAMES = {c.name.lower(): c for c in ManeuverClass}


def parse_label(text: str) -> ManeuverClass:
    key = text.strip().lower().replace(" ", "_").replace("-", "_")
    if key not in _LABEL_NAMES:
        raise DataError(f"unknown maneuver label {text!r}")
    return _LABEL_NAMES[key]


class WindowTooShort(ManeuverError):
    """Exclusion signal: the sample cannot fill the requested window."""


@dataclass
class ManeuverSample:
    """One synchronized two-stream recording."""

    sample_id: str
    label: ManeuverClass
    inside_dir: Path
    outside_dir: Path
    inside_frames: int
    outside_frames: int
    inside_fps: int = INSIDE_FPS
    outside_fps: int = OUTSIDE_FPS

    @property
    def duration(self) -> float:
        return min(self.inside_frames / self.inside_fps,
                   self.outside_frames / self.outside_fps)


@dataclass
class Manifest:
    samples: list[ManeuverSample]
    excluded: list[tuple[str, str]]  # (sample_id, reason)

    def __len__(self) -> int:
        return len(self.samples)


def _count_frames(directory: Path) -> int:
    if not directory.is_dir():
        return 0
    return sum(1 for p in directory.iterdir() if p.suffix == ".png")


def load_manifest(path) -> Manifest:
    """Read a JSON-lines manifest, dropping single-stream records.

    Each line holds: id, label, inside, outside (directories relative to
    the manifest), and optional inside_fps/outside_fps overrides. Records
    whose streams are missing or empty are excluded with a reason;
    malformed lines and unknown labels are hard errors.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    samples: list[ManeuverSample] = []
    excluded: list[tuple[str, str]] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed JSON: {e}") from e
            if not isinstance(rec, dict) or "id" not in rec or "label" not in rec:
                raise DataError(f"{path}:{lineno}: record needs 'id' and 'label'")
            label = parse_label(str(rec["label"]))
            sid = str(rec["id"])
            missing = [k for k in ("inside", "outside") if not rec.get(k)]
            if missing:
                excluded.append((sid, f"missing stream(s): {', '.join(missing)}"))
                continue
            inside_dir = base / rec["inside"]
            outside_dir = base / rec["outside"]
            n_in = _count_frames(inside_dir)
            n_out = _count_frames(outside_dir)
            if n_in == 0 or n_out == 0:
                empty = [name for name, n in (("inside", n_in), ("outside", n_out)) if n == 0]
                excluded.append((sid, f"empty stream(s): {', '.join(empty)}"))
                continue
            samples.append(ManeuverSample(
                sample_id=sid, label=label,
                inside_dir=inside_dir, outside_dir=outside_dir,
                inside_frames=n_in, outside_frames=n_out,
                inside_fps=int(rec.get("inside_fps", INSIDE_FPS)),
                outside_fps=int(rec.get("outside_fps", OUTSIDE_FPS)),
            ))
    return Manifest(samples, excluded)


def load_frame_dir(directory, count: int | None = None) -> np.ndarray:
    """Read numbered PNG frames into [T,H,W] (gray) or [T,H,W,3]."""
    directory = Path(directory)
    paths = sorted(p for p in directory.iterdir() if p.suffix == ".png")
    if count is not None:
        paths = paths[:count]
    if not paths:
        raise DataError(f"no frames in {directory}")
    return np.stack([read_image(p) for p in paths])


# ---------------------------------------------------------------------------
# Time windows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeWindow:
    """Seconds relative to maneuver onset (the end of the video).

    The window always starts at -5 s; ``end`` in {-5..0} closes it. Frames
    at or after the end boundary are never used.
    """

    end: int = 0
    START = -5

    def __post_init__(self):
        if not self.START <= self.end <= 0:
            raise DataError(f"window end must lie in [{self.START}, 0], got {self.end}")


INSIDE_CLIP_LEN = 16


def window_frames(sample: ManeuverSample, window: TimeWindow, stream: str,
                  interval: int = 5, mode: str = "eval",
                  rng: np.random.Generator | None = None):
    """Frame indices for one sample under a time window.

    inside: 16 indices, one per equal slice of the window (slice center in
    eval mode, uniform random within the slice in train mode); windows
    shorter than 16 frames repeat the last index. Returns a list.

    outside: 5 input indices spaced exactly ``interval`` frames apart plus
    the target index ``interval`` after the last input. In eval mode the
    inputs end as late as the window allows and the target clamps to the
    last available frame; in train mode the clip start is drawn uniformly
    among positions where the target exists. Returns (inputs, target).

    Raises :class:`WindowTooShort` when the sample cannot fill the window.
    """
    if mode not in ("train", "eval"):
        raise DataError(f"mode must be train or eval, got {mode!r}")
    if mode == "train" and rng is None:
        raise DataError("train-mode windowing needs an rng")
    if stream == "inside":
        n_frames, fps = sample.inside_frames, sample.inside_fps
    elif stream == "outside":
        n_frames, fps = sample.outside_frames, sample.outside_fps
    else:
        raise DataError(f"stream must be inside or outside, got {stream!r}")

    usable = n_frames + window.end * fps  # frames 0 .. usable-1 lie before the boundary
    lo = max(0, n_frames + (TimeWindow.START * fps))

    if stream == "inside":
        if usable - lo < 1:
            raise WindowTooShort(
                f"{sample.sample_id}: inside window [{TimeWindow.START},{window.end}]s empty")
        span = usable - lo
        if span < INSIDE_CLIP_LEN:
            idx = list(range(lo, usable))
            idx += [usable - 1] * (INSIDE_CLIP_LEN - len(idx))
            return idx
        edges = lo + np.floor(np.arange(INSIDE_CLIP_LEN + 1) * span / INSIDE_CLIP_LEN).astype(int)
        idx = []
        for a, b in zip(edges[:-1], edges[1:]):
            b = max(b, a + 1)
            if mode == "train":
                idx.append(int(rng.integers(a, b)))
            else:
                idx.append(int((a + b - 1) // 2))
        return idx

    # outside
    span_needed = 5 * interval
    if interval < 1:
        raise DataError(f"interval must be >= 1, got {interval}")
    if usable - lo < span_needed:
        raise WindowTooShort(
            f"{sample.sample_id}: outside window has {max(usable - lo, 0)} frames, "
            f"needs {span_needed} for interval {interval}")
    if mode == "eval":
        start = usable - span_needed
        inputs = [start + k * interval for k in range(5)]
        target = min(start + span_needed, usable - 1)
    else:
        latest = usable - 1 - span_needed
        if latest < lo:
            raise WindowTooShort(
                f"{sample.sample_id}: no full training clip fits interval {interval}")
        start = int(rng.integers(lo, latest + 1))
        inputs = [start + k * interval for k in range(5)]
        target = start + span_needed
    return inputs, target


# ---------------------------------------------------------------------------
# Cross-validation folds
# ---------------------------------------------------------------------------


@dataclass
class FoldSplit:
    assignments: dict[str, int]
    k: int

    def fold_of(self, sample_id: str) -> int:
        return self.assignments[sample_id]

    def test_ids(self, fold: int) -> list[str]:
        return [s for s, f in self.assignments.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [s for s, f in self.assignments.items() if f != fold]


def make_folds(samples: list[ManeuverSample], k: int = 5, seed: int = 0) -> FoldSplit:
    """Deterministic stratified split into k folds.

    Per-class members are shuffled by the seed and dealt round-robin with
    a rolling fold pointer, so both global and per-class fold sizes differ
    by at most one.
    """
    if len(samples) < k:
        raise DataError(f"need at least {k} samples for {k} folds, got {len(samples)}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[str]] = {}
    for s in samples:
        by_class.setdefault(int(s.label), []).append(s.sample_id)
    assignments: dict[str, int] = {}
    pointer = 0
    for label in sorted(by_class):
        ids = by_class[label]
        order = rng.permutation(len(ids))
        for i in order:
            assignments[ids[int(i)]] = pointer % k
            pointer += 1
    return FoldSplit(assignments, k)


# ---------------------------------------------------------------------------
# Mirroring
# ---------------------------------------------------------------------------


def mirror_label(label: ManeuverClass) -> ManeuverClass:
    return MIRROR_MAP[ManeuverClass(label)]


def mirror_sample(clip: np.ndarray, label) -> tuple[np.ndarray, ManeuverClass]:
    """Horizontal flip (last axis is width) with the matching label swap."""
    flipped = np.flip(clip, axis=-1).copy()
    return flipped, mirror_label(label)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Desk-scale two-stream corpus parameters."""

    per_class: int = 12
    inside_size: tuple[int, int] = (36, 36)
    outside_size: tuple[int, int] = (28, 44)
    duration_range: tuple[float, float] = (2.0, 5.0)
    inside_fps: int = INSIDE_FPS
    outside_fps: int = OUTSIDE_FPS
    noise_inside: float = 0.02
    noise_outside: float = 0.03
    lane_speed: float = 0.55       # px/frame of outside translation
    turn_speed: float = 0.85       # peak px/frame of outside shear
    sweep_small: float = 0.14      # head sweep for lane changes, frame widths
    sweep_large: float = 0.30      # head sweep for turns, frame widths
    drift_noise: float = 0.02      # random-walk jitter of outside motion, px/frame
    complementary: bool = False


def _smooth_texture(h: int, w: int, rng: np.random.Generator, n_blobs: int = 14) -> np.ndarray:
    img = np.zeros((h, w))
    ys, xs = np.mgrid[0:h, 0:w]
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        s = rng.uniform(2.0, 6.0)
        img += rng.uniform(0.3, 1.0) * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * s * s))
    img -= img.min()
    img /= max(img.max(), 1e-9)
    return 0.15 + 0.7 * img


def _sample_canvas(canvas: np.ndarray, y_coords: np.ndarray, x_coords: np.ndarray) -> np.ndarray:
    """Bilinear lookup of fractional coordinates, clamped at the border."""
    h, w = canvas.shape
    y0 = np.clip(np.floor(y_coords).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(x_coords).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(y_coords - y0, 0.0, 1.0)
    fx = np.clip(x_coords - x0, 0.0, 1.0)
    top = canvas[y0, x0] * (1 - fx) + canvas[y0, x1] * fx
    bot = canvas[y1, x0] * (1 - fx) + canvas[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _head_sweep_px(label: ManeuverClass, cfg: SyntheticConfig) -> float:
    w = cfg.inside_size[1]
    small, large = cfg.sweep_small * w, cfg.sweep_large * w
    if cfg.complementary:
        # turns left become indistinguishable from lane changes left inside
        sweeps = {0: 0.0, 1: -small, 2: -small, 3: +small, 4: +large}
    else:
        sweeps = {0: 0.0, 1: -small, 2: -large, 3: +small, 4: +large}
    return sweeps[int(label)]


def _outside_motion(label: ManeuverClass, cfg: SyntheticConfig) -> tuple[str, float]:
    """(pattern, speed): translation for lane changes, shear for turns."""
    if cfg.complementary:
        # turns right move exactly like lane changes right outside
        table = {
            0: ("still", 0.0),
            1: ("translate", +cfg.lane_speed),
            2: ("shear", +cfg.turn_speed),
            3: ("translate", -cfg.lane_speed),
            4: ("translate", -cfg.lane_speed),
        }
    else:
        table = {
            0: ("still", 0.0),
            1: ("translate", +cfg.lane_speed),
            2: ("shear", +cfg.turn_speed),
            3: ("translate", -cfg.lane_speed),
            4: ("shear", -cfg.turn_speed),
        }
    return table[int(label)]


def render_inside_clip(label: ManeuverClass, n_frames: int, cfg: SyntheticConfig,
                       rng: np.random.Generator) -> np.ndarray:
    """Grayscale [T,H,W] driver stream: textured head blob sweeping laterally."""
    h, w = cfg.inside_size
    background = _smooth_texture(h, w, rng) * 0.45
    ys, xs = np.mgrid[0:h, 0:w]
    sweep = _head_sweep_px(label, cfg) * rng.uniform(0.85, 1.15)
    cy = h * 0.5 + rng.uniform(-1.5, 1.5)
    cx0 = w * 0.5 + rng.uniform(-1.5, 1.5)
    radius = 0.115 * w
    ring_freq = rng.uniform(1.2, 1.8)
    # the head turn ramps up over the clip's final 60%
    t_axis = np.linspace(0.0, 1.0, n_frames)
    ramp = np.clip((t_axis - 0.4) / 0.6, 0.0, 1.0)
    ramp = ramp * ramp * (3 - 2 * ramp)  # smoothstep
    frames = np.empty((n_frames, h, w))
    for t in range(n_frames):
        cx = cx0 + sweep * ramp[t] + rng.normal(0.0, 0.15)
        r2 = (ys - cy) ** 2 + (xs - cx) ** 2
        blob = np.exp(-r2 / (2 * radius ** 2))
        texture = 0.5 + 0.5 * np.cos(np.sqrt(r2) * ring_freq)
        frame = background + blob * (0.35 + 0.45 * texture)
        frame += rng.normal(0.0, cfg.noise_inside, size=frame.shape)
        frames[t] = np.clip(frame, 0.0, 1.0)
    return frames


def render_outside_clip(label: ManeuverClass, n_frames: int, cfg: SyntheticConfig,
                        rng: np.random.Generator) -> np.ndarray:
    """Grayscale [T,H,W] road stream moved by the class's global motion."""
    h, w = cfg.outside_size
    pattern, speed = _outside_motion(label, cfg)
    margin = int(abs(speed) * n_frames + 8)
    canvas = _smooth_texture(h + 2 * margin, w + 2 * margin, rng,
                             n_blobs=18 + (h + w) // 4)
    ys, xs = np.mgrid[0:h, 0:w]
    frames = np.empty((n_frames, h, w))
    offset = 0.0
    for t in range(n_frames):
        if t > 0:
            offset += speed + rng.normal(0.0, cfg.drift_noise)
        if pattern == "shear":
            # horizontal displacement grows toward the bottom of the frame
            dx = offset * (0.25 + 0.75 * ys / max(h - 1, 1))
        else:
            dx = np.full((h, w), offset)
        frame = _sample_canvas(canvas, ys + margin, xs + margin - dx)
        frame += rng.normal(0.0, cfg.noise_outside, size=frame.shape)
        frames[t] = np.clip(frame, 0.0, 1.0)
    return frames


def synthesize_sample(label: ManeuverClass, cfg: SyntheticConfig,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(inside [T,H,W], outside [T,H,W]) for one random duration."""
    duration = rng.uniform(*cfg.duration_range)
    n_in = max(int(round(duration * cfg.inside_fps)), 1)
    n_out = max(int(round(duration * cfg.outside_fps)), 1)
    inside = render_inside_clip(label, n_in, cfg, rng)
    outside = render_outside_clip(label, n_out, cfg, rng)
    return inside, outside


def generate_synthetic_corpus(config: SyntheticConfig, out_dir, seed: int = 0) -> Path:
    """Write a full corpus (frames + manifest) and return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for cls in ManeuverClass:
        for i in range(config.per_class):
            sid = f"{cls.name.lower()}_{i:03d}"
            inside, outside = synthesize_sample(cls, config, rng)
            for t in range(inside.shape[0]):
                write_image(out_dir / sid / "inside" / (FRAME_PATTERN % t), inside[t])
            for t in range(outside.shape[0]):
                write_image(out_dir / sid / "outside" / (FRAME_PATTERN % t), outside[t])
            records.append({
                "id": sid,
                "label": cls.name.lower(),
                "inside": f"{sid}/inside",
                "outside": f"{sid}/outside",
                "inside_fps": config.inside_fps,
                "outside_fps": config.outside_fps,
            })
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest_path
