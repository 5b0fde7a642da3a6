"""Synthetic skeleton-action corpus.

Each episode renders a stick figure performing a parametric motion over a
class-specific background. Motion-defined classes share one background and
differ only in how the figure moves; context-defined classes share one idle
motion and differ only in their background texture; the mixed class varies
both. Poses returned with an episode are the exact joint trace that was
rasterised, so they stand in for an off-the-shelf pose estimator.

I-frames are structural: every ``gop_len``-th frame, starting at 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig
from .containers import load_arrays, save_arrays
from .exceptions import DataShapeError

FORMAT_VERSION = 1
KINDS = ("motion", "context", "mixed")


@dataclass(frozen=True)
class ActionClass:
    name: str
    kind: str
    motion: str
    background: str


TAXONOMY = (
    ActionClass("wave_fast_up", "motion", "wave_fast_up", "studio"),
    ActionClass("wave_fast_down", "motion", "wave_fast_down", "studio"),
    ActionClass("squat_fast_down", "motion", "squat_fast_down", "studio"),
    ActionClass("squat_fast_up", "motion", "squat_fast_up", "studio"),
    ActionClass("meadow", "context", "idle", "meadow"),
    ActionClass("pool", "context", "idle", "pool"),
    ActionClass("court", "context", "idle", "court"),
    ActionClass("jumping_jack", "mixed", "jumping_jack", "stage"),
)

BACKGROUND_RGB = (0.30, 0.30, 0.34)
BACKGROUND_TEXTURE = 0.05

# body-15 layout: head, neck, r-arm (3), l-arm (3), pelvis, r-leg (3), l-leg (3)
BONES = ((0, 1), (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7), (1, 8),
         (8, 9), (9, 10), (10, 11), (8, 12), (12, 13), (13, 14))


@dataclass
class Episode:
    frames: np.ndarray          # [L, Ch, H, W] in [0, 1]
    poses: np.ndarray           # [L, 2N] normalised (x, y) pairs
    iframe_indices: list
    label: int
    class_kind: str
    seed: int
    episode_id: int = -1

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class ClipSample:
    clip: np.ndarray            # [T, Ch, H, W]
    pose_in: np.ndarray         # [T, 2N]
    pose_future: np.ndarray     # [T', 2N]
    iframes: list               # of [Ch, H, W]
    future_clip: np.ndarray     # [T', Ch, H, W]
    current_target: np.ndarray  # [T, Ch, H, W], never augmented
    label: int
    episode_id: int = -1
    start: int = 0
    iframe_indices: list = field(default_factory=list)


# ---------------------------------------------------------------- rendering

def _limb(root, upper, lower, angle_upper, angle_lower):
    """Two-segment limb; angles in radians measured from straight down."""
    elbow = root + upper * np.array([math.sin(angle_upper), math.cos(angle_upper)])
    tip = elbow + lower * np.array([math.sin(angle_lower), math.cos(angle_lower)])
    return elbow, tip


# Asymmetric strokes: the fast half takes this share of the period. A motion and
# its time reversal visit the same poses equally often, so only the ordering of
# frames tells them apart.
FAST_SHARE = 0.25
_STROKES = {
    "wave_fast_up": ("wave", FAST_SHARE),
    "wave_fast_down": ("wave", 1 - FAST_SHARE),
    "squat_fast_down": ("squat", FAST_SHARE),
    "squat_fast_up": ("squat", 1 - FAST_SHARE),
}


def _stroke(phase: float, rise: float) -> float:
    """Periodic 0 -> 1 -> 0 profile whose rise takes ``rise`` of the period."""
    x = (phase / (2 * math.pi)) % 1.0
    t = x / rise if x < rise else 1 - (x - rise) / (1 - rise)
    return t * t * (3 - 2 * t)


def _skeleton(motion: str, phase: float, amp: float) -> np.ndarray:
    """Local joint layout in figure units (y down, pelvis at origin)."""
    s = math.sin(phase)
    c = math.cos(phase)
    dy = 0.0
    squash = 1.0
    r_arm = (0.25, 0.1)
    l_arm = (-0.25, -0.1)
    r_leg = (0.12, 0.0)
    l_leg = (-0.12, 0.0)
    knee_bend = 0.0
    torso_lean = 0.0
    base, u = motion, None
    if motion in _STROKES:
        base, rise = _STROKES[motion]
        u = _stroke(phase, rise)
    if base == "wave":
        lift = s if u is None else 2 * u - 1
        r_arm = (1.6 + 0.9 * amp * lift, 1.8 + 1.2 * amp * lift)
        l_arm = (-0.2, -0.1)
    elif base == "squat":
        depth = 0.5 * amp * (1 - c) if u is None else amp * u
        knee_bend = 1.1 * depth
        dy = 0.32 * depth
        r_arm = (1.0 + 0.5 * depth, 1.4 + 0.3 * depth)
        l_arm = (-(1.0 + 0.5 * depth), -(1.4 + 0.3 * depth))
    elif motion == "spin":
        squash = c
        r_arm = (1.5, 1.6)
        l_arm = (-1.5, -1.6)
    elif motion == "jump":
        air = abs(s) * amp
        dy = -0.35 * air
        knee_bend = 0.9 * air
        r_arm = (2.6 * air + 0.2, 2.8 * air + 0.2)
        l_arm = (-(2.6 * air + 0.2), -(2.8 * air + 0.2))
    elif motion == "jumping_jack":
        open_ = 0.5 * amp * (1 - c)
        r_arm = (0.3 + 2.4 * open_, 0.3 + 2.6 * open_)
        l_arm = (-(0.3 + 2.4 * open_), -(0.3 + 2.6 * open_))
        r_leg = (0.1 + 0.35 * open_, 0.1 + 0.35 * open_)
        l_leg = (-(0.1 + 0.35 * open_), -(0.1 + 0.35 * open_))
    elif motion == "idle":
        sway = 0.08 * amp * s
        torso_lean = sway
        r_arm = (0.2 + sway, 0.15 + sway)
        l_arm = (-0.2 + sway, -0.15 + sway)
    else:
        raise ValueError(f"unknown motion {motion!r}")

    joints = np.zeros((15, 2))
    pelvis = np.array([0.0, dy])
    neck = pelvis + 0.42 * np.array([math.sin(torso_lean), -math.cos(torso_lean)])
    head = neck + np.array([0.0, -0.14])
    joints[0], joints[1], joints[8] = head, neck, pelvis
    joints[2] = neck + np.array([0.1, 0.02])
    joints[5] = neck + np.array([-0.1, 0.02])
    joints[3], joints[4] = _limb(joints[2], 0.17, 0.16, *r_arm)
    joints[6], joints[7] = _limb(joints[5], 0.17, 0.16, *l_arm)
    joints[9] = pelvis + np.array([0.07, 0.0])
    joints[12] = pelvis + np.array([-0.07, 0.0])
    joints[10], joints[11] = _limb(joints[9], 0.22, 0.22, r_leg[0] + knee_bend, r_leg[1] - knee_bend)
    joints[13], joints[14] = _limb(joints[12], 0.22, 0.22, l_leg[0] - knee_bend, l_leg[1] + knee_bend)
    # feet stay planted unless the motion lifts the body
    if base == "squat":
        lift = joints[[11, 14], 1].max() - 0.44
        joints[:, 1] -= lift
    joints[:, 0] *= squash
    return joints


def _resample_joints(joints15: np.ndarray, n: int) -> np.ndarray:
    if n <= 15:
        return joints15[:n]
    extra = []
    k = 0
    while len(extra) < n - 15:
        a, b = BONES[k % len(BONES)]
        extra.append(0.5 * (joints15[a] + joints15[b]))
        k += 1
    return np.concatenate([joints15, np.array(extra)], axis=0)


def _bones_for(n: int):
    bones = [b for b in BONES if max(b) < n]
    if not bones:
        bones = [(i, i + 1) for i in range(n - 1)]
    return bones


def _background(name: str, h: int, w: int, shift: float) -> np.ndarray:
    """Grey-blue backdrop; context scenes differ by a faint texture only."""
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    amp = BACKGROUND_TEXTURE
    if name == "studio":
        t = 0.2 * (yy - 0.5)
    elif name == "meadow":
        t = np.sin(2 * math.pi * (4 * yy + shift))
    elif name == "pool":
        t = 2.0 * ((np.floor(4 * xx + shift) + np.floor(4 * yy)) % 2) - 1.0
    elif name == "court":
        t = np.sin(2 * math.pi * (3 * (xx + yy) + shift))
    elif name == "stage":
        t = np.sin(2 * math.pi * (4 * xx + shift))
    else:
        raise ValueError(f"unknown background {name!r}")
    base = np.array(BACKGROUND_RGB)[:, None, None]
    return (base + amp * t[None]).astype(np.float64)


def render_background(class_id: int, cfg: ModelConfig, seed: int) -> np.ndarray:
    """Background image [Ch, H, W]; motion classes ignore ``seed``."""
    cls = TAXONOMY[class_id]
    h, w = cfg.frame_size
    shift = 0.0 if cls.kind == "motion" else float(np.random.default_rng(seed).uniform(0, 1))
    rgb = _background(cls.background, h, w, shift)
    return _to_channels(rgb, cfg.channels)


def _to_channels(rgb: np.ndarray, channels: int) -> np.ndarray:
    if channels == 3:
        return rgb
    gray = rgb.mean(axis=0, keepdims=True)
    return np.repeat(gray, channels, axis=0)


def _rasterise(points: np.ndarray, bones, h: int, w: int, radius: float) -> np.ndarray:
    """Soft coverage in [0, 1] of thick segments through ``points`` (pixel units)."""
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    pix = np.stack([xx.ravel(), yy.ravel()], axis=1)
    a = points[[b[0] for b in bones]]
    b = points[[b[1] for b in bones]]
    ab = b - a
    denom = np.maximum((ab ** 2).sum(axis=1), 1e-12)
    t = ((pix[:, None, :] - a[None]) * ab[None]).sum(axis=2) / denom
    t = np.clip(t, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    dist = np.sqrt(((pix[:, None, :] - closest) ** 2).sum(axis=2)).min(axis=1)
    joint_dist = np.sqrt(((pix[:, None, :] - points[None]) ** 2).sum(axis=2)).min(axis=1)
    dist = np.minimum(dist, joint_dist - 0.3)
    return np.clip(radius + 0.5 - dist, 0.0, 1.0).reshape(h, w)


def _episode_rng(class_id: int, seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(class_id), 7919]))


def generate_episode(class_id: int, seed: int, length: int, cfg: ModelConfig) -> Episode:
    """Render one deterministic episode of ``length`` frames."""
    if not 0 <= class_id < len(TAXONOMY):
        raise DataShapeError(f"class_id {class_id} not in taxonomy of {len(TAXONOMY)} classes")
    if length < cfg.min_episode_len:
        raise DataShapeError(
            f"episode length {length} < {cfg.min_episode_len} (clip span + future length)")
    cls = TAXONOMY[class_id]
    rng = _episode_rng(class_id, seed)
    h, w = cfg.frame_size
    n = cfg.num_joints

    period = rng.uniform(20.0, 30.0)
    phase0 = rng.uniform(0, 2 * math.pi)
    amp = rng.uniform(0.85, 1.15)
    centre_x = rng.uniform(0.38, 0.62)
    scale = rng.uniform(0.9, 1.05)
    drift = rng.uniform(-0.03, 0.03)
    colour = np.clip(np.array([0.95, 0.92, 0.85]) + rng.uniform(-0.01, 0.01, size=3), 0, 1)
    colour = _to_channels(colour[:, None, None], cfg.channels)[:, 0, 0]
    noise = rng.normal(0.0, 0.015, size=(length, cfg.channels, h, w))

    background = render_background(class_id, cfg, seed)
    bones = _bones_for(n)
    figure_h = 0.62 * scale
    frames = np.empty((length, cfg.channels, h, w))
    poses = np.empty((length, 2 * n))
    for t in range(length):
        local = _skeleton(cls.motion, phase0 + 2 * math.pi * t / period, amp)
        local = _resample_joints(local, n)
        xy = np.empty_like(local)
        xy[:, 0] = centre_x + drift * math.sin(2 * math.pi * t / length) + figure_h * local[:, 0]
        xy[:, 1] = 0.56 + figure_h * local[:, 1]
        xy = np.clip(xy, 0.02, 0.98)
        poses[t] = xy.ravel()
        cover = _rasterise(xy * np.array([w, h]), bones, h, w, radius=0.9)
        frame = background * (1 - cover) + colour[:, None, None] * cover
        frames[t] = frame + noise[t]
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
    return Episode(
        frames=frames,
        poses=poses.astype(np.float32),
        iframe_indices=list(range(0, length, cfg.gop_len)),
        label=class_id,
        class_kind=cls.kind,
        seed=int(seed),
    )


# ---------------------------------------------------------------- sampling

def extract_iframes(ep: Episode, window) -> list:
    """Frames at I-frame positions inside ``window`` (a range or (lo, hi) pair)."""
    lo, hi = (window.start, window.stop) if isinstance(window, range) else window
    if lo < 0 or hi > len(ep) or lo > hi:
        raise DataShapeError(f"window [{lo}, {hi}) outside episode of length {len(ep)}")
    return [ep.frames[i] for i in ep.iframe_indices if lo <= i < hi]


def clip_indices(start: int, cfg: ModelConfig) -> tuple[list, list]:
    current = [start + k * cfg.frame_stride for k in range(cfg.clip_len)]
    future = [current[-1] + 1 + k for k in range(cfg.future_len)]
    return current, future


def sample_clip(ep: Episode, start: int, cfg: ModelConfig) -> ClipSample:
    """Cut the strided current clip at ``start`` plus its contiguous future."""
    if start < 0 or start + cfg.clip_span + cfg.future_len > len(ep):
        raise DataShapeError(
            f"start {start} leaves no room for span {cfg.clip_span} + future {cfg.future_len} "
            f"in episode of length {len(ep)}")
    current, future = clip_indices(start, cfg)
    lo, hi = start, start + cfg.clip_span
    inside = [i for i in ep.iframe_indices if lo <= i < hi]
    clip = ep.frames[current]
    return ClipSample(
        clip=clip,
        pose_in=ep.poses[current],
        pose_future=ep.poses[future],
        iframes=extract_iframes(ep, (lo, hi)),
        future_clip=ep.frames[future],
        current_target=clip.copy(),
        label=ep.label,
        episode_id=ep.episode_id,
        start=start,
        iframe_indices=inside,
    )


def max_start(ep_len: int, cfg: ModelConfig) -> int:
    return ep_len - cfg.clip_span - cfg.future_len


def random_clip(ep: Episode, cfg: ModelConfig, rng: np.random.Generator) -> ClipSample:
    return sample_clip(ep, int(rng.integers(0, max_start(len(ep), cfg) + 1)), cfg)


# ------------------------------------------------------------ augmentation

CROP_SCALE = (0.8, 1.0)
FLIP_P = 0.5
BLUR_SIGMA = (0.0, 1.0)
JITTER = 0.1


def _draw_params(rng: np.random.Generator, h: int, w: int, crop_only: bool) -> dict:
    s = rng.uniform(*CROP_SCALE)
    ch, cw = max(2, int(round(s * h))), max(2, int(round(s * w)))
    params = {
        "top": int(rng.integers(0, h - ch + 1)),
        "left": int(rng.integers(0, w - cw + 1)),
        "size": (ch, cw),
        "flip": False,
        "sigma": 0.0,
        "brightness": 0.0,
        "contrast": 1.0,
    }
    if not crop_only:
        params["flip"] = bool(rng.uniform() < FLIP_P)
        params["sigma"] = float(rng.uniform(*BLUR_SIGMA))
        params["brightness"] = float(rng.uniform(-JITTER, JITTER))
        params["contrast"] = float(rng.uniform(1 - JITTER, 1 + JITTER))
    return params


def _apply(frames: np.ndarray, p: dict) -> np.ndarray:
    """Apply one parameter draw to a stack [..., Ch, H, W]."""
    lead = frames.shape[:-3]
    ch_, h, w = frames.shape[-3:]
    x = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32)).reshape(-1, ch_, h, w)
    top, left = p["top"], p["left"]
    sh, sw = p["size"]
    x = x[:, :, top:top + sh, left:left + sw]
    if (sh, sw) != (h, w):
        x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    if p["flip"]:
        x = torch.flip(x, dims=[-1])
    if p["sigma"] > 1e-3:
        radius = 2
        grid = torch.arange(-radius, radius + 1, dtype=torch.float32)
        kernel = torch.exp(-0.5 * (grid / p["sigma"]) ** 2)
        kernel = kernel / kernel.sum()
        kx = kernel.view(1, 1, 1, -1).repeat(ch_, 1, 1, 1)
        ky = kernel.view(1, 1, -1, 1).repeat(ch_, 1, 1, 1)
        x = F.pad(x, (radius, radius, radius, radius), mode="replicate")
        x = F.conv2d(F.conv2d(x, kx, groups=ch_), ky, groups=ch_)
    if p["brightness"] != 0.0 or p["contrast"] != 1.0:
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        x = (x - mean) * p["contrast"] + mean + p["brightness"]
    x = x.clamp(0.0, 1.0)
    return x.reshape(*lead, ch_, h, w).numpy()


def augment_frames(frames: np.ndarray, rng: np.random.Generator, mode: str = "finetune") -> np.ndarray:
    """One shared augmentation draw over a clip ``[T, Ch, H, W]``."""
    if mode not in ("pretrain", "finetune", "retrieval"):
        raise ValueError(f"unknown augmentation mode {mode!r}")
    h, w = frames.shape[-2:]
    return _apply(frames, _draw_params(rng, h, w, mode == "retrieval"))


def augment_clip(sample: ClipSample, rng: np.random.Generator, mode: str = "pretrain") -> ClipSample:
    """Augment the input clip and its I-frames; targets and poses are untouched.

    ``pretrain``/``finetune`` apply crop, flip, blur and colour jitter with one
    draw shared by every frame of the clip and fresh draws per I-frame.
    ``retrieval`` applies the random crop only.
    """
    if mode not in ("pretrain", "finetune", "retrieval"):
        raise ValueError(f"unknown augmentation mode {mode!r}")
    crop_only = mode == "retrieval"
    h, w = sample.clip.shape[-2:]
    clip = _apply(sample.clip, _draw_params(rng, h, w, crop_only))
    iframes = [_apply(f, _draw_params(rng, h, w, crop_only)) for f in sample.iframes]
    return replace(sample, clip=clip, iframes=iframes)


# ------------------------------------------------------------ corpus on disk

def default_classes() -> list:
    return list(range(len(TAXONOMY)))


def episode_seed(base_seed: int, class_id: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(class_id), int(index)]).generate_state(1)[0])


def split_indices(labels, seed: int, test_fraction: float = 0.2) -> tuple[list, list]:
    """Stratified, seed-deterministic train/test split over episode positions."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 104729]))
    train, test = [], []
    for c in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        test += idx[:n_test].tolist()
        train += idx[n_test:].tolist()
    return sorted(train), sorted(test)


@dataclass
class Corpus:
    """Episodes plus the recorded train/test split."""

    episodes: list
    train_idx: list
    test_idx: list
    classes: list
    cfg: ModelConfig
    root: Path | None = None

    @property
    def train(self) -> list:
        return [self.episodes[i] for i in self.train_idx]

    @property
    def test(self) -> list:
        return [self.episodes[i] for i in self.test_idx]

    @property
    def labels(self) -> np.ndarray:
        return np.array([ep.label for ep in self.episodes])

    def kinds(self) -> dict:
        return {c: TAXONOMY[c].kind for c in self.classes}


def make_corpus(cfg: ModelConfig, classes=None, episodes_per_class: int = 25, seed: int = 0,
                length: int | None = None) -> Corpus:
    """Generate a corpus in memory (no files)."""
    classes = default_classes() if classes is None else list(classes)
    length = cfg.episode_len if length is None else length
    episodes = []
    for c in classes:
        for i in range(episodes_per_class):
            ep = generate_episode(c, episode_seed(seed, c, i), length, cfg)
            ep.episode_id = len(episodes)
            episodes.append(ep)
    train, test = split_indices([ep.label for ep in episodes], seed)
    return Corpus(episodes, train, test, classes, cfg)


def manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()


def build_dataset(cfg: ModelConfig, out_dir, classes=None, episodes_per_class: int = 25,
                  seed: int = 0, length: int | None = None) -> dict:
    """Write every episode plus ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    if episodes_per_class < 1:
        raise DataShapeError("episodes_per_class must be >= 1")
    corpus = make_corpus(cfg, classes, episodes_per_class, seed, length)
    test = set(corpus.test_idx)
    entries = []
    for i, ep in enumerate(corpus.episodes):
        name = f"episode_{i:05d}.safetensors"
        meta = {"label": ep.label, "class_kind": ep.class_kind, "seed": ep.seed,
                "format_version": FORMAT_VERSION}
        save_arrays(out / name, {
            "frames": ep.frames,
            "poses": ep.poses,
            "iframe_indices": np.asarray(ep.iframe_indices, dtype=np.int64),
        }, meta)
        entries.append({"file": name, "label": ep.label, "class_kind": ep.class_kind,
                        "seed": ep.seed, "length": len(ep),
                        "split": "test" if i in test else "train"})
    manifest = {
        "format_version": FORMAT_VERSION,
        "base_seed": int(seed),
        "classes": [{"id": c, "name": TAXONOMY[c].name, "kind": TAXONOMY[c].kind}
                    for c in corpus.classes],
        "frame_size": list(cfg.frame_size),
        "num_joints": cfg.num_joints,
        "gop_len": cfg.gop_len,
        "episodes": entries,
    }
    (out / "manifest.json").write_bytes(manifest_bytes(manifest))
    return manifest


def load_dataset(root, cfg: ModelConfig) -> Corpus:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataShapeError(f"{path}: unsupported dataset format {manifest.get('format_version')}")
    if tuple(manifest["frame_size"]) != tuple(cfg.frame_size) or manifest["num_joints"] != cfg.num_joints:
        raise DataShapeError(f"{path}: dataset geometry does not match the model config")
    episodes, train, test = [], [], []
    for i, entry in enumerate(manifest["episodes"]):
        arrays, meta = load_arrays(root / entry["file"])
        ep = Episode(
            frames=arrays["frames"],
            poses=arrays["poses"],
            iframe_indices=arrays["iframe_indices"].tolist(),
            label=int(meta["label"]),
            class_kind=meta["class_kind"],
            seed=int(meta["seed"]),
            episode_id=i,
        )
        episodes.append(ep)
        (test if entry["split"] == "test" else train).append(i)
    classes = [c["id"] for c in manifest["classes"]]
    return Corpus(episodes, train, test, classes, cfg, root)
