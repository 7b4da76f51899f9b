"""Synthetic apical four-chamber video clips with labels and structure masks.

Each clip shows four elliptical chambers (LV, RV, LA, RA) with bright walls
on a dark background. Radii pulse sinusoidally with the beat. Two anomaly
populations are available:

* ``structural``: a hole in the septum wall between the two atria.
* ``motion``: the right-side chambers barely contract.

Clips are written as ``.echoclip`` binaries next to a ``manifest.json``.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .errors import DataError, FormatError, ParameterError

CLASSES = ("normal", "structural", "motion")
STRUCTURES = ("LV", "RV", "LA", "RA")
LV, RV, LA, RA = range(4)

ECHOCLIP_MAGIC = b"ECH1"

# Rendering intensities and wall thickness (normalized units).
BACKGROUND = 0.08
BLOOD = 0.12
TISSUE = 0.8
WALL = 0.03
# Threshold halfway between blood and tissue, used to segment reconstructions.
WALL_MIDPOINT = 0.5 * (BLOOD + TISSUE)


@dataclass(frozen=True)
class ClipParams:
    chamber_centers: tuple  # 4 x (x, y)
    chamber_radii: tuple  # 4 x (rx, ry)
    beat_period: int
    contraction_amplitude: tuple  # 4
    phase_offsets: tuple  # 4
    septum_gap: float
    noise_sigma: float
    seed: int

    def validate(self) -> None:
        centers = np.asarray(self.chamber_centers, dtype=float)
        radii = np.asarray(self.chamber_radii, dtype=float)
        amp = np.asarray(self.contraction_amplitude, dtype=float)
        phase = np.asarray(self.phase_offsets, dtype=float)
        if centers.shape != (4, 2) or radii.shape != (4, 2) or amp.shape != (4,) or phase.shape != (4,):
            raise ParameterError("expected 4 chambers")
        if np.any(centers < 0) or np.any(centers > 1):
            raise ParameterError("chamber centers must lie in [0, 1]^2")
        if np.any(radii < 0.05) or np.any(radii > 0.3):
            raise ParameterError("chamber radii must lie in [0.05, 0.3]")
        if np.any(amp < 0) or np.any(amp > 0.5):
            raise ParameterError("contraction amplitude must lie in [0, 0.5]")
        if np.any(phase < 0) or np.any(phase >= 2 * np.pi):
            raise ParameterError("phase offsets must lie in [0, 2pi)")
        if int(self.beat_period) < 1:
            raise ParameterError("beat_period must be a positive integer")
        if not 0.0 <= self.noise_sigma <= 0.2:
            raise ParameterError("noise_sigma must lie in [0, 0.2]")
        if self.septum_gap < 0:
            raise ParameterError("septum_gap must be non-negative")
        if min_chamber_margin(self) <= 0:
            raise ParameterError("chambers overlap at maximum dilation")


def min_chamber_margin(params: ClipParams) -> float:
    """Smallest pairwise separation between the walled chambers' bounding boxes.

    Axis-aligned ellipses sit inside their bounding boxes, so a positive
    margin guarantees the dilated chambers (walls included) are disjoint.
    """
    c = np.asarray(params.chamber_centers, dtype=float)
    r = np.asarray(params.chamber_radii, dtype=float) + WALL
    best = np.inf
    for a in range(4):
        for b in range(a + 1, 4):
            gap = np.abs(c[a] - c[b]) - (r[a] + r[b])
            best = min(best, float(gap.max()))
    return best


@dataclass(frozen=True)
class VideoClip:
    frames: np.ndarray  # N x H x W x C, float32 in [0, 1]

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4:
            raise DataError(f"clip must be N x H x W x C, got shape {f.shape}")
        if f.shape[0] < 2:
            raise DataError("clip needs at least 2 frames")

    @property
    def shape(self):
        return self.frames.shape


@dataclass(frozen=True)
class ClipLabel:
    cls: str
    ef_analog: float
    masks: np.ndarray  # 4 x N x H x W, uint8


@dataclass
class GeneratorConfig:
    """Population ranges for the synthetic generator."""

    nominal_centers: tuple = ((0.66, 0.33), (0.34, 0.33), (0.64, 0.75), (0.36, 0.75))
    center_jitter: float = 0.01
    radii_low: tuple = ((0.09, 0.13), (0.08, 0.12), (0.08, 0.07), (0.08, 0.07))
    radii_high: tuple = ((0.115, 0.18), (0.11, 0.17), (0.1, 0.1), (0.1, 0.1))
    beat_period_range: tuple = (8, 12)
    amplitude_low: tuple = (0.15, 0.2, 0.12, 0.12)
    amplitude_high: tuple = (0.4, 0.35, 0.2, 0.2)
    motion_amplitude_range: tuple = (0.03, 0.11)
    structural_gap_threshold: float = 0.02
    structural_gap_range: tuple = (0.035, 0.07)
    noise_range: tuple = (0.05, 0.12)

    @property
    def motion_threshold(self) -> float:
        """Right-chamber amplitude at or below which a clip counts as motion-anomalous."""
        return 0.5 * 0.5 * (self.amplitude_low[RV] + self.amplitude_high[RV])

    def validate(self) -> None:
        if self.motion_amplitude_range[1] > self.motion_threshold:
            raise ParameterError("motion amplitudes must sit below the motion threshold")
        if self.amplitude_low[RV] <= self.motion_threshold:
            raise ParameterError("normal right-chamber amplitudes must exceed the motion threshold")
        if self.structural_gap_range[0] < self.structural_gap_threshold:
            raise ParameterError("structural gaps must reach the structural threshold")


def classify(params: ClipParams, gen: GeneratorConfig) -> str:
    if params.septum_gap >= gen.structural_gap_threshold:
        return "structural"
    if params.contraction_amplitude[RV] <= gen.motion_threshold:
        return "motion"
    return "normal"


def sample_params(cls: str, rng: np.random.Generator, gen: GeneratorConfig | None = None,
                  max_tries: int = 100) -> ClipParams:
    """Draw a valid ClipParams for the requested class."""
    gen = gen or GeneratorConfig()
    if cls not in CLASSES:
        raise ParameterError(f"unknown class {cls!r}")
    for _ in range(max_tries):
        centers = np.asarray(gen.nominal_centers) + rng.uniform(-gen.center_jitter, gen.center_jitter, (4, 2))
        radii = rng.uniform(gen.radii_low, gen.radii_high)
        amp = rng.uniform(gen.amplitude_low, gen.amplitude_high)
        phase = rng.uniform(0, 2 * np.pi, 4)
        lo, hi = gen.beat_period_range
        period = int(rng.integers(lo, hi + 1))
        noise = float(rng.uniform(*gen.noise_range))
        gap = 0.0
        if cls == "structural":
            gap = float(rng.uniform(*gen.structural_gap_range))
        elif cls == "motion":
            amp[RV] = rng.uniform(*gen.motion_amplitude_range)
            amp[RA] = 0.5 * amp[RV]
        # ventricles share a phase, atria lag by half a cycle
        phase[RV] = phase[LV]
        phase[LA] = (phase[LV] + np.pi) % (2 * np.pi)
        phase[RA] = phase[LA]
        params = ClipParams(
            chamber_centers=tuple(map(tuple, centers.tolist())),
            chamber_radii=tuple(map(tuple, radii.tolist())),
            beat_period=period,
            contraction_amplitude=tuple(amp.tolist()),
            phase_offsets=tuple(phase.tolist()),
            septum_gap=gap,
            noise_sigma=noise,
            seed=int(rng.integers(0, 2**63 - 1)),
        )
        try:
            params.validate()
        except ParameterError:
            continue
        return params
    raise ParameterError("could not sample non-overlapping chambers")


def chamber_scale(params: ClipParams, k: int, t: float) -> float:
    """Radius multiplier of chamber ``k`` at frame ``t``; 1 at full dilation."""
    a = params.contraction_amplitude[k]
    phase = 2 * np.pi * t / params.beat_period + params.phase_offsets[k]
    return 1.0 - a * 0.5 * (1.0 - np.cos(phase))


def _grid(h: int, w: int):
    y = (np.arange(h) + 0.5) / h
    x = (np.arange(w) + 0.5) / w
    return np.meshgrid(x, y)


def _ellipse(xx, yy, center, radii, scale, pad=0.0):
    rx = radii[0] * scale + pad
    ry = radii[1] * scale + pad
    return ((xx - center[0]) / rx) ** 2 + ((yy - center[1]) / ry) ** 2 <= 1.0


def chamber_mask(params: ClipParams, k: int, scale: float, size: tuple[int, int]) -> np.ndarray:
    xx, yy = _grid(*size)
    return _ellipse(xx, yy, params.chamber_centers[k], params.chamber_radii[k], scale)


def _septum_geometry(params: ClipParams):
    c = params.chamber_centers
    r = params.chamber_radii
    xs = 0.5 * (c[LA][0] + c[RA][0])
    ys = 0.5 * (c[LA][1] + c[RA][1])
    half_w = max(WALL, 0.5 * (c[LA][0] - r[LA][0] - c[RA][0] - r[RA][0]) + WALL)
    top = min(c[LA][1] - r[LA][1], c[RA][1] - r[RA][1]) - WALL
    bottom = max(c[LA][1] + r[LA][1], c[RA][1] + r[RA][1]) + WALL
    return xs, ys, half_w, top, bottom


def _tissue(params: ClipParams, xx, yy, t: float) -> np.ndarray:
    tissue = np.zeros(xx.shape, dtype=bool)
    interiors = np.zeros(xx.shape, dtype=bool)
    for k in range(4):
        s = chamber_scale(params, k, t)
        inner = _ellipse(xx, yy, params.chamber_centers[k], params.chamber_radii[k], s)
        outer = _ellipse(xx, yy, params.chamber_centers[k], params.chamber_radii[k], s, pad=WALL)
        tissue |= outer
        interiors |= inner
    xs, ys, half_w, top, bottom = _septum_geometry(params)
    tissue |= (np.abs(xx - xs) <= half_w) & (yy >= top) & (yy <= bottom)
    tissue &= ~interiors
    if params.septum_gap > 0:
        c = params.chamber_centers
        hole = (xx >= c[RA][0]) & (xx <= c[LA][0]) & (np.abs(yy - ys) <= params.septum_gap)
        tissue &= ~hole
    return tissue


def septum_profile(params: ClipParams, size: tuple[int, int], t: float = 0.0) -> np.ndarray:
    """Tissue occupancy down the septum centre line, restricted to the septum's extent."""
    h, w = size
    xs, _, _, top, bottom = _septum_geometry(params)
    yy = (np.arange(h) + 0.5) / h
    xx = np.full_like(yy, xs)
    col = _tissue(params, xx[:, None], yy[:, None], t)[:, 0]
    keep = (yy >= top) & (yy <= bottom)
    return col[keep]


def render_clip(params: ClipParams, n_frames: int, size: tuple[int, int],
                gen: GeneratorConfig | None = None) -> tuple[VideoClip, ClipLabel]:
    gen = gen or GeneratorConfig()
    params.validate()
    h, w = size
    if n_frames < params.beat_period:
        raise ParameterError("n_frames must cover at least one beat period")
    if not (32 <= h <= 256 and 32 <= w <= 256):
        raise ParameterError("frame size must lie in [32, 256]")

    rng = np.random.default_rng(params.seed)
    # 2x supersampling, box-downsampled, keeps thin septum walls from aliasing
    sxx, syy = _grid(2 * h, 2 * w)
    xx, yy = _grid(h, w)
    frames = np.empty((n_frames, h, w, 1), dtype=np.float32)
    masks = np.zeros((4, n_frames, h, w), dtype=np.uint8)
    for n in range(n_frames):
        tissue = _tissue(params, sxx, syy, n)
        blood = np.zeros_like(tissue)
        for k in range(4):
            s = chamber_scale(params, k, n)
            blood |= _ellipse(sxx, syy, params.chamber_centers[k], params.chamber_radii[k], s)
            masks[k, n] = _ellipse(xx, yy, params.chamber_centers[k], params.chamber_radii[k], s)
        img = np.full(tissue.shape, BACKGROUND)
        img[blood] = BLOOD
        img[tissue] = TISSUE
        img = img.reshape(h, 2, w, 2).mean(axis=(1, 3))
        speckle = np.clip(1.0 + params.noise_sigma * rng.standard_normal((h, w)), 0.0, None)
        img = img * speckle + 0.25 * params.noise_sigma * np.abs(rng.standard_normal((h, w)))
        frames[n, :, :, 0] = np.clip(img, 0.0, 1.0)

    label = ClipLabel(cls=classify(params, gen), ef_analog=ef_from_masks(masks, params.beat_period), masks=masks)
    return VideoClip(frames), label


def ef_from_masks(masks: np.ndarray, beat_period: int | None = None) -> float:
    """Fractional LV area change, (max - min) / max, over the first beat.

    Frame phases repeat exactly every ``beat_period`` frames, so passing None
    (use every stored frame) gives the same value for any clip covering a beat.
    """
    lv = masks[LV] if beat_period is None else masks[LV, :beat_period]
    area = lv.reshape(lv.shape[0], -1).sum(axis=1).astype(np.float64)
    if area.max() == 0:
        return 0.0
    return float((area.max() - area.min()) / area.max())


def ef_closed_form(amplitude: float) -> float:
    """Fractional area change of an ellipse whose semi-axes shrink by ``amplitude``."""
    return 1.0 - (1.0 - amplitude) ** 2


# ---------------------------------------------------------------------------
# .echoclip binary format


def write_echoclip(path, frames: np.ndarray, masks: np.ndarray) -> None:
    frames = np.asarray(frames, dtype="<f4")
    n, h, w, c = frames.shape
    masks = np.asarray(masks, dtype=np.uint8)
    if masks.shape != (4, n, h, w):
        raise DataError(f"masks must have shape {(4, n, h, w)}, got {masks.shape}")
    with open(path, "wb") as fh:
        fh.write(ECHOCLIP_MAGIC)
        fh.write(struct.pack("<4I", n, h, w, c))
        fh.write(frames.tobytes(order="C"))
        fh.write(masks.tobytes(order="C"))


def read_echoclip(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != ECHOCLIP_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    n, h, w, c = struct.unpack_from("<4I", data, 4)
    off = 20
    n_f = n * h * w * c
    n_m = 4 * n * h * w
    if len(data) != off + 4 * n_f + n_m:
        raise FormatError(f"{path}: truncated or oversized payload")
    frames = np.frombuffer(data, dtype="<f4", count=n_f, offset=off).reshape(n, h, w, c).astype(np.float32)
    masks = np.frombuffer(data, dtype=np.uint8, count=n_m, offset=off + 4 * n_f).reshape(4, n, h, w).copy()
    return frames, masks


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetConfig:
    n_normal: int = 10
    n_abnormal: int = 10
    anomaly: str = "structural"
    n_frames: int = 16
    size: int = 64
    split: tuple = (0.8, 0.1, 0.1)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def validate(self) -> None:
        if self.n_normal < 1 or self.n_abnormal < 1:
            raise ParameterError("need at least one clip per class")
        if self.anomaly not in ("structural", "motion"):
            raise ParameterError(f"anomaly must be structural or motion, got {self.anomaly!r}")
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ParameterError("split fractions must be three non-negative numbers summing to 1")
        self.generator.validate()

    def to_json(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        gen = GeneratorConfig(**{k: _tuplify(v) for k, v in d.pop("generator", {}).items()})
        return cls(generator=gen, **{k: _tuplify(v) for k, v in d.items()})


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def split_counts(total: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of ``total`` into the given fractions."""
    raw = [total * f for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (counts[i] - raw[i], i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


@dataclass(frozen=True)
class ClipRecord:
    id: str
    file: str
    cls: str
    ef_analog: float
    split: str


@dataclass
class DatasetManifest:
    root: Path
    config: DatasetConfig
    seed: int
    clips: list

    def split(self, name: str) -> list:
        return [c for c in self.clips if c.split == name]

    def load(self, record: ClipRecord) -> tuple[np.ndarray, np.ndarray]:
        return read_echoclip(self.root / record.file)


def generate_dataset(config: DatasetConfig, seed: int, out) -> DatasetManifest:
    """Render every clip and write ``manifest.json`` plus one ``.echoclip`` per clip."""
    config.validate()
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc

    root_seq = np.random.SeedSequence(seed)
    order_seq, *clip_seqs = root_seq.spawn(1 + config.n_normal + config.n_abnormal)
    plan = ["normal"] * config.n_normal + [config.anomaly] * config.n_abnormal
    size = (config.size, config.size)

    records = []
    for idx, (cls, seq) in enumerate(zip(plan, clip_seqs)):
        rng = np.random.default_rng(seq)
        params = sample_params(cls, rng, config.generator)
        period = min(params.beat_period, config.n_frames)
        if period != params.beat_period:
            params = ClipParams(**{**asdict(params), "beat_period": period})
        clip, label = render_clip(params, config.n_frames, size, config.generator)
        if label.cls != cls:
            raise ParameterError(f"sampled {label.cls} clip when asking for {cls}")
        clip_id = f"clip{idx:05d}"
        write_echoclip(out / f"{clip_id}.echoclip", clip.frames, label.masks)
        records.append([clip_id, cls, label.ef_analog])

    # shuffle each class, interleave, then cut contiguous splits so every split is near-balanced
    order_rng = np.random.default_rng(order_seq)
    by_class = {}
    for rec in records:
        by_class.setdefault(rec[1], []).append(rec)
    queues = [list(order_rng.permutation(len(v))) for v in by_class.values()]
    groups = list(by_class.values())
    interleaved = []
    while any(queues):
        for g, q in zip(groups, queues):
            if q:
                interleaved.append(g[q.pop(0)])
    n_train, n_val, _ = split_counts(len(interleaved), config.split)
    split_of = {}
    for pos, rec in enumerate(interleaved):
        split_of[rec[0]] = "train" if pos < n_train else "val" if pos < n_train + n_val else "test"

    clips = [ClipRecord(id=r[0], file=f"{r[0]}.echoclip", cls=r[1], ef_analog=r[2], split=split_of[r[0]])
             for r in records]
    manifest = {
        "version": 1,
        "seed": int(seed),
        "config": config.to_json(),
        "clips": [asdict(c) for c in clips],
    }
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, out / "manifest.json")
    return DatasetManifest(root=out, config=config, seed=seed, clips=clips)


def load_dataset(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest.json in {root}")
    try:
        doc = json.loads(path.read_text())
        clips = [ClipRecord(**c) for c in doc["clips"]]
        config = DatasetConfig.from_json(doc["config"])
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed manifest {path}: {exc}") from exc
    return DatasetManifest(root=root, config=config, seed=doc.get("seed", 0), clips=clips)


# ---------------------------------------------------------------------------
# temporal sampling and spatial augmentation


@dataclass
class AugmentConfig:
    """Frame sampling and crop sizes; defaults are desk scale (no resize, full-frame crop)."""

    window: int = 16
    n_sample: int = 16
    eval_stride: int = 1
    resize: int | None = None
    crop: int | None = None
    flips: bool = True

    @classmethod
    def paper_scale(cls) -> "AugmentConfig":
        return cls(window=48, n_sample=16, eval_stride=4, resize=144, crop=112, flips=True)


def _resize(frames: np.ndarray, size: int | None, order: int = 1) -> np.ndarray:
    if size is None or (frames.shape[1] == size and frames.shape[2] == size):
        return frames
    zoom = [1.0] * frames.ndim
    zoom[1] = size / frames.shape[1]
    zoom[2] = size / frames.shape[2]
    return ndimage.zoom(frames, zoom, order=order, grid_mode=True, mode="nearest")


def eval_indices(n_frames: int, cfg: AugmentConfig) -> np.ndarray:
    idx = np.arange(cfg.n_sample) * cfg.eval_stride
    if idx[-1] >= n_frames:
        raise DataError(f"clip has {n_frames} frames, eval sampling needs {idx[-1] + 1}")
    return idx


def eval_transform(frames: np.ndarray, cfg: AugmentConfig, order: int = 1) -> np.ndarray:
    """Eval-mode spatial path: resize then center crop. Works on frame stacks or mask stacks."""
    out = _resize(frames, cfg.resize, order)
    if cfg.crop is not None:
        h, w = out.shape[1:3]
        top = (h - cfg.crop) // 2
        left = (w - cfg.crop) // 2
        out = out[:, top:top + cfg.crop, left:left + cfg.crop]
    return out


def sample_and_augment(clip, rng: np.random.Generator, train_mode: bool,
                       cfg: AugmentConfig | None = None) -> VideoClip:
    cfg = cfg or AugmentConfig()
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
    n = frames.shape[0]
    if not train_mode:
        out = eval_transform(frames[eval_indices(n, cfg)], cfg)
        return VideoClip(np.ascontiguousarray(out, dtype=np.float32))

    if n < cfg.window:
        raise DataError(f"clip has {n} frames, window needs {cfg.window}")
    stride = max(cfg.window // cfg.n_sample, 1)
    start = int(rng.integers(0, n - cfg.window + 1))
    out = _resize(frames[start + np.arange(cfg.n_sample) * stride], cfg.resize)
    if cfg.crop is not None:
        h, w = out.shape[1:3]
        top = int(rng.integers(0, h - cfg.crop + 1))
        left = int(rng.integers(0, w - cfg.crop + 1))
        out = out[:, top:top + cfg.crop, left:left + cfg.crop]
    if cfg.flips:
        if rng.random() < 0.5:
            out = out[:, :, ::-1]
        if rng.random() < 0.5:
            out = out[:, ::-1]
    return VideoClip(np.ascontiguousarray(out, dtype=np.float32))


def iter_clips(manifest: DatasetManifest, split: str) -> Iterator[tuple[ClipRecord, np.ndarray, np.ndarray]]:
    for rec in manifest.split(split):
        frames, masks = manifest.load(rec)
        yield rec, frames, masks
