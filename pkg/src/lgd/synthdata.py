"""Deterministic synthetic videos, frame samplers and augmentation.

Two labelling tasks are available.

``composition`` (default)
    Every video shows moving shapes of two kinds out of four. The video is
    split into three equal phases showing kind A, then B, then A again. The
    label is the unordered pair {A, B} (six classes), so a single frame is
    consistent with three labels and only evidence gathered across frames
    decides the class. The label ignores frame order.

``motion``
    All shapes share one velocity; the label is the motion class
    (0 horizontal, 1 up, 2 down, 3 static). Left and right motion share a
    class so that horizontal flips never change the label.

All shape kinds are left-right symmetric. Frames wrap around at the borders,
so without noise frame ``t + 1`` is frame ``t`` rolled by the velocity.
"""

from __future__ import annotations

import itertools
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .seeding import stream

SHAPES = ("square", "cross", "plus", "ring")
PAIRS = tuple(itertools.combinations(range(len(SHAPES)), 2))
MOTION_CLASSES = ("horizontal", "up", "down", "static")


@dataclass
class SyntheticVideoSpec:
    num_videos: int = 360
    length: int = 24
    height: int = 32
    width: int = 32
    num_shapes: int = 1
    shape_size: int = 11
    max_speed: int = 2
    noise: float = 0.05
    task: str = "composition"
    phases: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("composition", "motion"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.shape_size > min(self.height, self.width):
            raise ValueError(f"shape size {self.shape_size} exceeds frame {self.height}x{self.width}")
        if self.shape_size < 3:
            raise ValueError("shape_size must be >= 3")
        if self.num_videos < 1 or self.length < 1 or self.num_shapes < 1:
            raise ValueError("num_videos, length and num_shapes must be >= 1")
        if self.task == "composition" and self.length < self.phases:
            raise ValueError("composition videos need at least one frame per phase")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    @property
    def num_classes(self):
        return len(PAIRS) if self.task == "composition" else len(MOTION_CLASSES)


@dataclass
class VideoDataset:
    """Videos as uint8 ``(N, L, H, W)`` grayscale plus integer labels."""

    videos: np.ndarray
    labels: np.ndarray
    num_classes: int
    latents: list = field(default_factory=list)
    spec: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx)
        lat = [self.latents[i] for i in idx] if self.latents else []
        return VideoDataset(self.videos[idx], self.labels[idx], self.num_classes, lat, self.spec)


def shape_mask(kind, size):
    r = (size - 1) / 2
    yy, xx = np.mgrid[:size, :size] - r
    if kind == "square":
        return np.ones((size, size), bool)
    if kind == "disc":
        return yy ** 2 + xx ** 2 <= r ** 2 + 0.5
    if kind == "cross":
        t = max(1, size // 6)
        return (np.abs(yy - xx) <= t) | (np.abs(yy + xx) <= t)
    if kind == "plus":
        t = max(1, size // 6)
        return (np.abs(yy) <= t) | (np.abs(xx) <= t)
    if kind == "ring":
        m = np.ones((size, size), bool)
        b = max(1, size // 4)
        m[b:size - b, b:size - b] = False
        return m
    raise ValueError(f"unknown shape {kind!r}")


def motion_label(velocity):
    vy, vx = velocity
    if vy == 0 and vx == 0:
        return 3
    if vy == 0:
        return 0
    return 1 if vy < 0 else 2


def label_from_latents(latent, task):
    if task == "composition":
        return PAIRS.index(tuple(sorted(latent["pair"])))
    return motion_label(latent["velocity"])


def flip_latents(latent, width):
    """Latents of the horizontally mirrored video."""
    out = dict(latent)
    vy, vx = latent["velocity"]
    out["velocity"] = (vy, -vx)
    out["positions"] = [(y, width - 1 - x) for y, x in latent["positions"]]
    return out


def phase_of(t, length, phases):
    return (t * phases) // length


def _velocity_for(label, max_speed, rng):
    speed = int(rng.integers(1, max_speed + 1))
    if label == 0:
        return (0, speed * int(rng.choice([-1, 1])))
    if label == 1:
        return (-speed, int(rng.integers(-1, 2)))
    if label == 2:
        return (speed, int(rng.integers(-1, 2)))
    return (0, 0)


def render(latent, spec):
    """Render one clean float frame stack (L, H, W) in [0, 1] from latents."""
    L, H, W = spec.length, spec.height, spec.width
    frames = np.zeros((L, H, W))
    s = spec.shape_size
    vy, vx = latent["velocity"]
    for t in range(L):
        kind = latent["kinds"][t]
        mask = shape_mask(SHAPES[kind], s)
        canvas = np.zeros((H, W))
        for (y, x), inten in zip(latent["positions"], latent["intensity"]):
            layer = np.zeros((H, W))
            layer[:s, :s] = mask * inten
            # centre the shape on (y, x) then move it t steps
            layer = np.roll(layer, (y - s // 2 + vy * t, x - s // 2 + vx * t), axis=(0, 1))
            canvas = np.maximum(canvas, layer)
        frames[t] = canvas
    return frames


def _latent(label, spec, rng):
    if spec.task == "composition":
        a, b = PAIRS[label]
        if rng.random() < 0.5:
            a, b = b, a
        kinds = [a if phase_of(t, spec.length, spec.phases) % 2 == 0 else b for t in range(spec.length)]
        velocity = (int(rng.integers(-spec.max_speed, spec.max_speed + 1)),
                    int(rng.integers(-spec.max_speed, spec.max_speed + 1)))
        pair = (a, b)
    else:
        velocity = _velocity_for(label, spec.max_speed, rng)
        kind = int(rng.integers(len(SHAPES)))
        kinds = [kind] * spec.length
        pair = None
    positions = [(int(rng.integers(spec.height)), int(rng.integers(spec.width))) for _ in range(spec.num_shapes)]
    intensity = [float(rng.uniform(0.6, 1.0)) for _ in range(spec.num_shapes)]
    return {"label": label, "pair": pair, "kinds": kinds, "velocity": velocity,
            "positions": positions, "intensity": intensity}


def video_seed(master, index):
    return zlib.crc32(struct.pack("<qq", int(master), int(index)))


def generate(spec):
    """Balanced dataset: class ``i % K`` for video ``i``, each video from its own seed."""
    K = spec.num_classes
    videos = np.zeros((spec.num_videos, spec.length, spec.height, spec.width), np.uint8)
    labels = np.zeros(spec.num_videos, np.int64)
    latents = []
    for i in range(spec.num_videos):
        rng = stream(video_seed(spec.seed, i), "video")
        label = i % K
        lat = _latent(label, spec, rng)
        frames = render(lat, spec)
        if spec.noise > 0:
            frames = frames + spec.noise * rng.standard_normal(frames.shape)
        videos[i] = np.clip(np.rint(frames * 255), 0, 255).astype(np.uint8)
        labels[i] = label
        latents.append(lat)
    return VideoDataset(videos, labels, K, latents, asdict(spec))


def split(dataset, test_fraction=1 / 3):
    """Deterministic split keeping classes balanced: every ``k``-th block of K videos goes to test."""
    K = dataset.num_classes
    n = len(dataset)
    every = max(2, int(round(1 / test_fraction)))
    block = np.arange(n) // K
    test = block % every == every - 1
    return dataset.subset(np.flatnonzero(~test)), dataset.subset(np.flatnonzero(test))


# samplers

def snippet_bounds(length, T):
    return [((s * length) // T, ((s + 1) * length) // T) for s in range(T)]


def sample_snippets(length, T, mode="center", rng=None):
    """One frame index per snippet after splitting ``length`` frames into T equal snippets.

    Snippet ``s`` covers ``[floor(s L / T), floor((s + 1) L / T))``. ``center``
    takes its middle frame (lower middle for even lengths); ``random`` draws
    uniformly inside it.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if length < T:
        raise ValueError(f"video of {length} frames is shorter than T={T}")
    out = []
    for lo, hi in snippet_bounds(length, T):
        if mode == "center":
            out.append(lo + (hi - lo - 1) // 2)
        elif mode == "random":
            out.append(int(rng.integers(lo, hi)))
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return np.array(out)


def snippet_positions(length, T, n):
    """Frame indices for ``n`` uniformly placed snippet samples, shape (n, T).

    Sample ``i`` takes offset ``floor((i + 0.5) * len / n)`` inside every snippet.
    """
    if length < T:
        raise ValueError(f"video of {length} frames is shorter than T={T}")
    rows = []
    for i in range(n):
        rows.append([lo + min(hi - lo - 1, int((i + 0.5) * (hi - lo) / n)) for lo, hi in snippet_bounds(length, T)])
    return np.array(rows)


def sample_clip(length, T, mode="center", rng=None):
    """Start index of a T-frame window: uniform for ``random``, middle for ``center``."""
    if length < T:
        raise ValueError(f"video of {length} frames is shorter than T={T}")
    if mode == "random":
        start = int(rng.integers(0, length - T + 1))
    elif mode == "center":
        start = (length - T) // 2
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return np.arange(start, start + T)


def clip_starts(length, T, n):
    """``n`` starts evenly spaced over ``[0, length - T]`` (rounded half up)."""
    if length < T:
        raise ValueError(f"video of {length} frames is shorter than T={T}")
    if n == 1:
        return np.array([(length - T) // 2])
    return np.floor(np.linspace(0, length - T, n) + 0.5).astype(int)


def to_input(frames_u8):
    """uint8 frames (T, H, W) -> float (3, T, H, W) in [-1, 1], gray replicated to 3 channels."""
    x = frames_u8.astype(np.float64) / 127.5 - 1.0
    return np.repeat(x[None], 3, axis=0)


def augment(sample, crop=None, flip=False, rng=None):
    """Apply one crop and one horizontal-flip decision to every frame of ``sample`` (C, T, H, W).

    ``flip`` may be True/False (forced) or ``"random"`` (coin from ``rng``).
    ``crop`` is an (h, w) size; its offset is drawn from ``rng`` (centred without one).
    """
    sample = np.asarray(sample)
    H, W = sample.shape[-2:]
    if crop is not None:
        ch, cw = crop
        if ch > H or cw > W:
            raise ValueError(f"crop {crop} larger than frame {(H, W)}")
        if rng is None:
            y0, x0 = (H - ch) // 2, (W - cw) // 2
        else:
            y0, x0 = int(rng.integers(0, H - ch + 1)), int(rng.integers(0, W - cw + 1))
        sample = sample[..., y0:y0 + ch, x0:x0 + cw]
    if flip == "random":
        flip = bool(rng.random() < 0.5)
    if flip:
        sample = sample[..., ::-1]
    return np.ascontiguousarray(sample)


# binary file format
# header: magic(8) version(u32) dtype code(u8) pad(3) N(u64) L H W(u32 x3) K(u32) meta_len(u64)
_MAGIC = b"LGDDATA\x00"
_VERSION = 1
_HEADER = struct.Struct("<8sIB3xQIIIIQ")


def save_dataset(ds, path):
    meta = json.dumps({"spec": ds.spec}, sort_keys=True).encode()
    n, L, H, W = ds.videos.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, 1, n, L, H, W, ds.num_classes, len(meta)))
        f.write(meta)
        f.write(np.ascontiguousarray(ds.videos, dtype="u1").tobytes())
        f.write(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())


def load_dataset(path):
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, dtype, n, L, H, W, K, meta_len = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a dataset file")
        if version != _VERSION or dtype != 1:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        meta = json.loads(f.read(meta_len))
        raw = f.read(n * L * H * W)
        lab = f.read(8 * n)
        if len(raw) != n * L * H * W or len(lab) != 8 * n:
            raise ValueError(f"{path}: truncated payload")
    videos = np.frombuffer(raw, np.uint8).reshape(n, L, H, W).copy()
    labels = np.frombuffer(lab, "<i8").astype(np.int64)
    return VideoDataset(videos, labels, K, [], meta.get("spec", {}))
