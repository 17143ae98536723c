"""Synthetic paired audio-video benchmark data and pixel-space corruptions.

Clips are class prototypes modulated over time plus gaussian pixel noise,
so distribution shift is controllable; the paired audio predictions come
from the synthetic audio oracle with a controllable hit rate. Severity
constants for the corruption operators are implementation-defined knobs.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .audiomap import AudioTopK, load_audio_predictions, save_audio_predictions, synth_audio_oracle
from .model import VideoClip

CORRUPTION_KINDS = ("gaussian", "shot", "impulse", "salt", "pepper", "contrast")

# Index 0 is unused; entries 1..5 are the severity levels.
GAUSSIAN_SIGMA = (None, 0.04, 0.06, 0.08, 0.09, 0.10)
SHOT_LAMBDA = (None, 60.0, 25.0, 12.0, 5.0, 3.0)
PIXEL_FRACTION = (None, 0.01, 0.02, 0.03, 0.05, 0.07)
CONTRAST_SCALE = (None, 0.75, 0.5, 0.4, 0.3, 0.15)


class IntegrityError(RuntimeError):
    """Stored dataset bytes do not match their manifest."""


def default_audio_vocab() -> dict[str, list[str]]:
    """Eight activity classes, each with audio labels that carry the
    class's own word stem so the lexical mapper can recover them."""
    return {
        "barking": ["Bark", "Barking dog", "Bark bow-wow"],
        "drumming": ["Drum", "Drumming", "Drum roll"],
        "frying": ["Frying", "Frying food", "Frying sizzle"],
        "raining": ["Rain", "Raining", "Raindrop"],
        "sanding": ["Sanding", "Sanding wood", "Sander"],
        "howling": ["Howl", "Howling", "Howling wolf"],
        "tapping": ["Tap", "Tapping", "Tapping click"],
        "giggling": ["Giggle", "Giggling", "Giggling laugh"],
    }


@dataclass
class DatasetSpec:
    num_classes: int = 8
    train_per_class: int = 12
    test_per_class: int = 6
    clip_shape: tuple[int, int, int, int] = (32, 4, 4, 2)  # (t_total, h, w, c_in)
    prototype_scale: float = 0.32
    noise_scale: float = 0.02
    audio_vocab: dict[str, list[str]] = field(default_factory=default_audio_vocab)
    audio_quality: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("need at least one sample per class and split")
        if self.num_classes != len(self.audio_vocab):
            raise ValueError(f"{self.num_classes} classes but "
                             f"{len(self.audio_vocab)} vocabulary entries")
        t, h, w, c = self.clip_shape
        if t < 16:
            raise ValueError("clips need at least 16 frames")
        if not 0.0 <= self.audio_quality <= 1.0:
            raise ValueError("audio_quality must be in [0, 1]")

    @property
    def class_names(self) -> list[str]:
        return list(self.audio_vocab.keys())

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes, "train_per_class": self.train_per_class,
                "test_per_class": self.test_per_class, "clip_shape": list(self.clip_shape),
                "prototype_scale": self.prototype_scale, "noise_scale": self.noise_scale,
                "audio_vocab": self.audio_vocab, "audio_quality": self.audio_quality,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(num_classes=int(d["num_classes"]),
                   train_per_class=int(d["train_per_class"]),
                   test_per_class=int(d["test_per_class"]),
                   clip_shape=tuple(int(v) for v in d["clip_shape"]),
                   prototype_scale=float(d["prototype_scale"]),
                   noise_scale=float(d["noise_scale"]),
                   audio_vocab={k: list(v) for k, v in d["audio_vocab"].items()},
                   audio_quality=float(d["audio_quality"]),
                   seed=int(d["seed"]))


@dataclass
class CorruptionSpec:
    kind: str
    severity: int = 5

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption {self.kind!r}; "
                             f"choose from {CORRUPTION_KINDS}")
        if not 1 <= self.severity <= 5:
            raise ValueError("severity must be in 1..5")


@dataclass
class GeneratedDataset:
    spec: DatasetSpec
    train: list[VideoClip]
    test: list[VideoClip]
    audio: dict[str, AudioTopK]  # test-sample fixtures


def _make_prototypes(spec: DatasetSpec, rng: np.random.Generator) -> Optional[np.ndarray]:
    """Class prototypes in pixel space; None when the separation check fails."""
    t, h, w, c = spec.clip_shape
    protos = 0.5 + spec.prototype_scale * rng.uniform(-1.0, 1.0, (spec.num_classes, h, w, c))
    flat = protos.reshape(spec.num_classes, -1)
    for i in range(spec.num_classes):
        for j in range(i + 1, spec.num_classes):
            if np.linalg.norm(flat[i] - flat[j]) <= 4.0 * spec.noise_scale:
                return None
    return protos


def gen_dataset(spec: DatasetSpec) -> GeneratedDataset:
    """Generate train/test clips plus per-test-sample audio fixtures.

    Prototypes are redrawn with the next seed when the pairwise
    separation check fails; ten failures raise.
    """
    protos = None
    for attempt in range(10):
        rng = np.random.default_rng(spec.seed + attempt)
        protos = _make_prototypes(spec, rng)
        if protos is not None:
            break
    if protos is None:
        raise ValueError("could not draw separated class prototypes in 10 attempts")
    t, h, w, c = spec.clip_shape
    depth = rng.uniform(0.2, 0.5, spec.num_classes)
    freq = rng.integers(1, 3, spec.num_classes)
    phase = rng.uniform(0.0, 2 * np.pi, spec.num_classes)
    frames_axis = np.arange(t) / t

    def make_clip(class_idx: int, sample_id: str) -> VideoClip:
        mod = 1.0 - depth[class_idx] * (0.5 + 0.5 * np.sin(
            2 * np.pi * freq[class_idx] * frames_axis + phase[class_idx]))
        clip = protos[class_idx][None, :, :, :] * mod[:, None, None, None]
        clip = clip + rng.normal(0.0, spec.noise_scale, clip.shape)
        return VideoClip(frames=np.clip(clip, 0.0, 1.0), sample_id=sample_id,
                         ground_truth=class_idx)

    train = [make_clip(ci, f"train-{ci:02d}-{i:03d}")
             for ci in range(spec.num_classes) for i in range(spec.train_per_class)]
    test = [make_clip(ci, f"test-{ci:02d}-{i:03d}")
            for ci in range(spec.num_classes) for i in range(spec.test_per_class)]
    audio = {clip.sample_id: synth_audio_oracle(clip.ground_truth, spec.audio_quality,
                                                spec.audio_vocab, rng,
                                                sample_id=clip.sample_id)
             for clip in test}
    return GeneratedDataset(spec=spec, train=train, test=test, audio=audio)


def corrupt(clip: VideoClip, spec: CorruptionSpec, rng: np.random.Generator) -> VideoClip:
    """Apply one corruption to the clip's pixels and clamp back to [0, 1]."""
    x = clip.frames
    s = spec.severity
    if spec.kind == "gaussian":
        out = x + rng.normal(0.0, GAUSSIAN_SIGMA[s], x.shape)
    elif spec.kind == "shot":
        lam = SHOT_LAMBDA[s]
        out = rng.poisson(x * lam) / lam
    elif spec.kind in ("impulse", "salt", "pepper"):
        flat = x.reshape(-1).copy()
        n_draw = int(round(PIXEL_FRACTION[s] * flat.size))
        idx = rng.integers(0, flat.size, n_draw)  # with replacement; collisions shrink coverage
        if spec.kind == "impulse":
            flat[idx] = rng.integers(0, 2, n_draw).astype(np.float64)
        elif spec.kind == "salt":
            flat[idx] = 1.0
        else:
            flat[idx] = 0.0
        out = flat.reshape(x.shape)
    elif spec.kind == "contrast":
        channel_mean = x.mean(axis=(0, 1, 2), keepdims=True)
        out = (x - channel_mean) * CONTRAST_SCALE[s] + channel_mean
    else:  # unreachable; CorruptionSpec validates
        raise ValueError(f"unknown corruption {spec.kind!r}")
    return VideoClip(frames=np.clip(out, 0.0, 1.0), sample_id=clip.sample_id,
                     ground_truth=clip.ground_truth)


_MAGIC = b"AVTC"
_HEADER_VERSION = 1


def _write_clip_bin(path: Path, frames: np.ndarray) -> None:
    header = _MAGIC + struct.pack("<II", _HEADER_VERSION, frames.ndim)
    header += struct.pack(f"<{frames.ndim}I", *frames.shape)
    payload = frames.astype("<f8").tobytes(order="C")
    path.write_bytes(header + payload)


def _read_clip_bin(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    if blob[:4] != _MAGIC:
        raise IntegrityError(f"{path}: bad magic")
    version, ndim = struct.unpack("<II", blob[4:12])
    if version != _HEADER_VERSION:
        raise IntegrityError(f"{path}: unsupported header version {version}")
    dims = struct.unpack(f"<{ndim}I", blob[12:12 + 4 * ndim])
    payload = blob[12 + 4 * ndim:]
    expected = int(np.prod(dims)) * 8
    if len(payload) != expected:
        raise IntegrityError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()


def save_dataset(ds: GeneratedDataset, path: str | Path) -> None:
    """Write manifest + per-clip binary tensors + audio fixture JSONL."""
    root = Path(path)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    entries = []
    for split, clips in (("train", ds.train), ("test", ds.test)):
        for clip in clips:
            rel = f"clips/{clip.sample_id}.bin"
            _write_clip_bin(root / rel, clip.frames)
            digest = hashlib.sha256((root / rel).read_bytes()).hexdigest()
            entries.append({"sample_id": clip.sample_id, "split": split,
                            "label": clip.ground_truth, "file": rel,
                            "shape": list(clip.frames.shape), "sha256": digest})
    save_audio_predictions(ds.audio, root / "audio.jsonl")
    manifest = {"format_version": 1, "spec": ds.spec.to_dict(),
                "clips": entries, "audio_file": "audio.jsonl"}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(path: str | Path) -> GeneratedDataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format_version") != 1:
        raise IntegrityError(f"unsupported dataset format {manifest.get('format_version')}")
    spec = DatasetSpec.from_dict(manifest["spec"])
    train: list[VideoClip] = []
    test: list[VideoClip] = []
    for entry in manifest["clips"]:
        file_path = root / entry["file"]
        digest = hashlib.sha256(file_path.read_bytes()).hexdigest()
        if digest != entry["sha256"]:
            raise IntegrityError(f"{file_path}: checksum mismatch")
        frames = _read_clip_bin(file_path)
        if list(frames.shape) != entry["shape"]:
            raise IntegrityError(f"{file_path}: manifest shape {entry['shape']} "
                                 f"does not match payload {list(frames.shape)}")
        clip = VideoClip(frames=frames, sample_id=entry["sample_id"],
                         ground_truth=entry["label"])
        (train if entry["split"] == "train" else test).append(clip)
    audio = load_audio_predictions(root / manifest["audio_file"])
    return GeneratedDataset(spec=spec, train=train, test=test, audio=audio)
