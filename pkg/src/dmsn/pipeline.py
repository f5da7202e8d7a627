"""Dataset handling and evaluation protocol.

Covers clip segmentation, ordinal pain-level quantization, clip labeling,
median video aggregation, subject-exclusive cross-validation folds, the error
metrics, a seeded synthetic-video generator, and the tab-separated clip
manifest format.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensorfile

PSPI_TO_ORDINAL = (0, 1, 2, 3, 4, 4, 5, 5, 5, 5, 5, 5, 5, 5, 5, 5)

BDI_BANDS = (("minimal", 0, 13), ("mild", 14, 19),
             ("moderate", 20, 28), ("severe", 29, 63))


class ManifestError(ValueError):
    """Malformed manifest line; message cites the line number."""


class DatasetError(ValueError):
    """Dataset contents violate a protocol precondition."""


def quantize_pspi(level: int) -> int:
    """Map a 0-15 pain level onto the 6-step ordinal scale."""
    if not 0 <= int(level) <= 15 or int(level) != level:
        raise ValueError(f"pain level must be an integer in 0..15, got {level!r}")
    return PSPI_TO_ORDINAL[int(level)]


def clip_label(frame_labels, order: str = "quantize-then-average") -> float:
    """Scalar label for a clip from its per-frame pain levels.

    Default quantizes each frame to the ordinal scale first and averages the
    result; ``average-then-quantize`` is the reverse reading.
    """
    if len(frame_labels) == 0:
        raise ValueError("clip_label needs at least one frame label")
    if order == "quantize-then-average":
        return float(np.mean([quantize_pspi(v) for v in frame_labels]))
    if order == "average-then-quantize":
        return float(quantize_pspi(int(round(float(np.mean(frame_labels))))))
    raise ValueError(f"unknown labeling order {order!r}")


def bdi_severity_band(score) -> str:
    """Depression severity band for a 0-63 inventory score."""
    if not 0 <= score <= 63:
        raise ValueError(f"score must be in 0..63, got {score!r}")
    for name, _, hi in BDI_BANDS:
        if score <= hi:
            return name
    raise AssertionError("unreachable")


def aggregate_video_score(clip_scores) -> float:
    """Median of the clip scores; even counts take the middle-pair mean."""
    if len(clip_scores) == 0:
        raise ValueError("aggregate_video_score needs at least one score")
    return float(np.median(np.asarray(clip_scores, dtype=np.float64)))


def metric_mae(pred, truth) -> float:
    p, t = _paired(pred, truth)
    return float(np.mean(np.abs(p - t)))


def metric_mse(pred, truth) -> float:
    p, t = _paired(pred, truth)
    return float(np.mean((p - t) ** 2))


def metric_rmse(pred, truth) -> float:
    return float(np.sqrt(metric_mse(pred, truth)))


def _paired(pred, truth):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise ValueError(f"metric inputs must be equal nonempty lengths, "
                         f"got {p.shape} vs {t.shape}")
    return p, t


@dataclass
class VideoRecord:
    """One source video: frames plus either a video-scalar or per-frame labels."""

    subject_id: str
    video_id: str
    frames: np.ndarray                  # (3, frame_count, h, w)
    label_kind: str = "video"           # "video" | "frame"
    video_label: float | None = None
    frame_labels: list[int] | None = None

    def __post_init__(self):
        if self.label_kind == "frame":
            if self.frame_labels is None or \
                    len(self.frame_labels) != self.frames.shape[1]:
                raise DatasetError(
                    f"video {self.video_id}: per-frame labels must match the "
                    f"{self.frames.shape[1]} frames")
        elif self.label_kind == "video":
            if self.video_label is None:
                raise DatasetError(f"video {self.video_id}: missing scalar label")
        else:
            raise DatasetError(f"label_kind must be 'video' or 'frame', "
                               f"got {self.label_kind!r}")


@dataclass
class Clip:
    subject_id: str
    video_id: str
    clip_index: int
    label: float
    data: np.ndarray | None = None      # (3, clip_len, h, w)
    tensor_file: str | None = None


@dataclass
class ClipDataset:
    clip_len: int
    clips: list[Clip] = field(default_factory=list)
    short_video_warning: bool = False

    def subjects(self) -> list[str]:
        return sorted({c.subject_id for c in self.clips})

    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clips], dtype=np.float64)

    def clip_arrays(self) -> list[np.ndarray]:
        missing = [c for c in self.clips if c.data is None]
        if missing:
            raise DatasetError(f"clip {missing[0].video_id}:"
                               f"{missing[0].clip_index} has no loaded tensor")
        return [c.data for c in self.clips]

    def subset(self, subjects) -> "ClipDataset":
        keep = set(subjects)
        return ClipDataset(self.clip_len,
                           [c for c in self.clips if c.subject_id in keep])


def segment_clips(video: VideoRecord, clip_len: int,
                  label_order: str = "quantize-then-average"):
    """Non-overlapping ``clip_len`` windows from frame 0; the remainder drops.

    Returns ``(clips, short_warning)`` -- the warning flags a video shorter
    than one clip.
    """
    if clip_len < 1:
        raise ValueError(f"clip_len must be >= 1, got {clip_len}")
    frame_count = video.frames.shape[1]
    count = frame_count // clip_len
    clips = []
    for k in range(count):
        lo, hi = k * clip_len, (k + 1) * clip_len
        if video.label_kind == "frame":
            label = clip_label(video.frame_labels[lo:hi], label_order)
        else:
            label = float(video.video_label)
        clips.append(Clip(video.subject_id, video.video_id, k, label,
                          data=video.frames[:, lo:hi]))
    return clips, count == 0


def dataset_from_videos(videos, clip_len: int,
                        label_order: str = "quantize-then-average") -> ClipDataset:
    ds = ClipDataset(clip_len)
    for video in videos:
        clips, short = segment_clips(video, clip_len, label_order)
        ds.clips.extend(clips)
        ds.short_video_warning |= short
    return ds


@dataclass(frozen=True)
class FoldPlan:
    """Ordered leave-one-subject-out folds: (train subjects, test subjects)."""

    folds: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]


def loso_splits(dataset: ClipDataset) -> FoldPlan:
    """One fold per subject, lexicographic; that subject's clips are the test set."""
    subjects = dataset.subjects()
    if len(subjects) < 2:
        raise DatasetError(f"leave-one-subject-out needs >= 2 subjects, "
                           f"got {len(subjects)}")
    folds = tuple(
        (tuple(s for s in subjects if s != test), (test,))
        for test in subjects)
    return FoldPlan(folds)


# -- synthetic clip generator -------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Moving-bump surrogate videos whose motion speed encodes the label.

    Each video renders a Gaussian bump traveling on a circle; the per-frame
    displacement is ``step_per_unit * label`` pixels, so a zero label means a
    static bump and motion statistics grow affinely with the label.
    """

    clip_count: int = 64
    clip_len: int = 16
    height: int = 32
    width: int = 32
    subjects: int = 4
    clips_per_video: int = 1
    label_min: float = 0.0
    label_max: float = 4.0
    step_per_unit: float = 1.0
    bump_sigma: float = 2.5
    seed: int = 0

    def __post_init__(self):
        if self.clip_count < 1 or self.clip_len < 1:
            raise ValueError("clip_count and clip_len must be >= 1")
        if self.subjects < 1 or self.clips_per_video < 1:
            raise ValueError("subjects and clips_per_video must be >= 1")
        if self.label_max < self.label_min:
            raise ValueError("label_max must be >= label_min")


def _synth_video(cfg: SynthConfig, rng: np.random.Generator, subject: str,
                 video: str) -> VideoRecord:
    frames = cfg.clip_len * cfg.clips_per_video
    label = float(rng.uniform(cfg.label_min, cfg.label_max))
    radius = max(4.0, min(cfg.height, cfg.width) / 5.0)
    step = cfg.step_per_unit * label
    # chord of `step` pixels per frame along a circle of this radius
    dtheta = 2.0 * np.arcsin(min(1.0, step / (2.0 * radius)))
    theta0 = rng.uniform(0, 2 * np.pi)
    cy = cfg.height / 2.0 + rng.uniform(-1.0, 1.0)
    cx = cfg.width / 2.0 + rng.uniform(-1.0, 1.0)
    amplitude = rng.uniform(0.5, 1.0, size=3)
    ys = np.arange(cfg.height, dtype=np.float64)[:, None]
    xs = np.arange(cfg.width, dtype=np.float64)[None, :]
    data = np.empty((3, frames, cfg.height, cfg.width), dtype=np.float32)
    for t in range(frames):
        theta = theta0 + t * dtheta
        py = cy + radius * np.sin(theta)
        px = cx + radius * np.cos(theta)
        bump = np.exp(-((ys - py) ** 2 + (xs - px) ** 2)
                      / (2.0 * cfg.bump_sigma ** 2))
        for ch in range(3):
            data[ch, t] = amplitude[ch] * bump
    return VideoRecord(subject, video, data, "video", video_label=label)


def synth_generate(cfg: SynthConfig) -> ClipDataset:
    """Deterministic synthetic dataset; same seed gives bitwise-identical clips."""
    rng = np.random.default_rng(cfg.seed)
    video_count = -(-cfg.clip_count // cfg.clips_per_video)  # ceil
    videos = []
    for v in range(video_count):
        subject = f"s{v % cfg.subjects + 1:03d}"
        videos.append(_synth_video(cfg, rng, subject, f"v{v + 1:04d}"))
    ds = dataset_from_videos(videos, cfg.clip_len)
    ds.clips = ds.clips[:cfg.clip_count]
    return ds


def mean_frame_displacement(clip: np.ndarray) -> float:
    """Mean per-frame centroid travel of one clip; the motion statistic the
    generator encodes the label into."""
    intensity = clip.astype(np.float64).sum(axis=0)       # (t, h, w)
    t, h, w = intensity.shape
    mass = intensity.sum(axis=(1, 2))
    ys = np.arange(h)[None, :, None]
    xs = np.arange(w)[None, None, :]
    cy = (intensity * ys).sum(axis=(1, 2)) / mass
    cx = (intensity * xs).sum(axis=(1, 2)) / mass
    if t < 2:
        return 0.0
    return float(np.mean(np.hypot(np.diff(cy), np.diff(cx))))


def format_synth_config(cfg: SynthConfig) -> str:
    """key=value text form of a generator configuration."""
    pairs = [(name, getattr(cfg, name)) for name in (
        "clip_count", "clip_len", "height", "width", "subjects",
        "clips_per_video", "label_min", "label_max", "step_per_unit",
        "bump_sigma", "seed")]
    return "".join(f"{k}={v}\n" for k, v in pairs)


def parse_synth_config(text: str) -> SynthConfig:
    kwargs = {}
    ints = {"clip_count", "clip_len", "height", "width", "subjects",
            "clips_per_video", "seed"}
    floats = {"label_min", "label_max", "step_per_unit", "bump_sigma"}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"synth config line {lineno} is not key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in ints:
            kwargs[key] = int(value)
        elif key in floats:
            kwargs[key] = float(value)
        else:
            raise ValueError(f"synth config line {lineno}: unknown key {key!r}")
    return SynthConfig(**kwargs)


# -- manifest ------------------------------------------------------------------

_MANIFEST_FIELDS = 5


def save_manifest(dataset: ClipDataset, manifest_path, data_dir=None) -> None:
    """Write the manifest and any in-memory clip tensors next to it.

    One tab-separated line per clip: subject, video, clip index, tensor file
    (relative to the manifest), label at 6 significant digits.
    """
    manifest_path = os.fspath(manifest_path)
    base = os.path.dirname(manifest_path) or "."
    data_dir = os.fspath(data_dir) if data_dir is not None else base
    os.makedirs(data_dir, exist_ok=True)
    lines = []
    for clip in dataset.clips:
        tensor_file = clip.tensor_file
        if tensor_file is None:
            tensor_file = os.path.join(
                os.path.relpath(data_dir, base),
                f"{clip.video_id}_{clip.clip_index:03d}.dmsn")
            tensor_file = os.path.normpath(tensor_file)
        out_path = os.path.normpath(os.path.join(base, tensor_file))
        if clip.data is not None:
            tensorfile.write_tensor(out_path, clip.data[None])
        lines.append("\t".join([clip.subject_id, clip.video_id,
                                str(clip.clip_index), tensor_file,
                                f"{clip.label:.6g}"]))
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
        if lines:
            fh.write("\n")


def load_manifest(path, load_tensors: bool = True) -> ClipDataset:
    """Parse a manifest; malformed lines fail with their line number."""
    path = os.fspath(path)
    base = os.path.dirname(path) or "."
    clips = []
    clip_len = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != _MANIFEST_FIELDS:
                raise ManifestError(f"line {lineno}: expected "
                                    f"{_MANIFEST_FIELDS} tab-separated fields, "
                                    f"got {len(parts)}")
            subject, video, index_text, tensor_file, label_text = parts
            try:
                index = int(index_text)
                label = float(label_text)
            except ValueError:
                raise ManifestError(f"line {lineno}: bad numeric field") from None
            data = None
            if load_tensors:
                tensor = tensorfile.read_tensor(os.path.join(base, tensor_file))
                data = tensor[0]
                if clip_len is None:
                    clip_len = data.shape[1]
                elif data.shape[1] != clip_len:
                    raise ManifestError(f"line {lineno}: clip length "
                                        f"{data.shape[1]} != {clip_len}")
            clips.append(Clip(subject, video, index, label, data=data,
                              tensor_file=tensor_file))
    return ClipDataset(clip_len or 0, clips)
