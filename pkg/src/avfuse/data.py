"""Synthetic class-conditional multimodal data and the on-disk dataset format.

Each sample couples an audio feature sequence with a vision feature
sequence. A per-class prototype lives in a shared latent space; every sample
mixes that shared latent (weight `redundancy`) with a modality-private
latent (weight `1 - redundancy`), scales the mix by the per-modality signal
strength, projects it through fixed random maps into temporally smoothed
sequences, and adds gaussian observation noise. Group ids play the role of
actor identities: a group offset shifts the shared latent, and groups never
straddle split boundaries.

On disk a dataset directory holds one subdirectory per split (train/val/
test), each with a `manifest.json` (schema version, task mode, feature dims,
sample records) and one CSV matrix per modality per sample: rows are
timesteps, columns are features, plain decimal ASCII with 17 significant
digits so parsed values round-trip bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Rng

SPLITS = ("train", "val", "test")
SCHEMA_VERSION = 1


class DatasetError(RuntimeError):
    pass


@dataclass
class Sample:
    audio: np.ndarray
    vision: np.ndarray
    label: float | int
    group: int


@dataclass
class SynthSpec:
    """Knobs of the synthetic family; every field has a working default."""

    task: str = "classification"
    classes: int = 4
    n_audio: int = 64
    d_audio: int = 10
    n_vision: int = 15
    d_vision: int = 35
    strength_audio: float = 1.0
    strength_vision: float = 1.0
    redundancy: float = 0.7
    noise_std: float = 1.0
    within_std: float = 0.5
    group_scale: float = 0.3
    latent_dim: int = 16
    groups: int = 24
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 400
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise ValueError(f"task must be classification or regression, got {self.task!r}")
        for name in ("strength_audio", "strength_vision", "redundancy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.groups < 3:
            raise ValueError(f"need at least 3 groups for disjoint splits, got {self.groups}")


@dataclass
class Dataset:
    task: str
    classes: int | None
    n_audio: int
    d_audio: int
    n_vision: int
    d_vision: int
    splits: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Sample]:
        return self.splits[name]


def _smooth(seq: np.ndarray) -> np.ndarray:
    """Moving average of window 3 along the time axis, edge-clamped."""
    padded = np.pad(seq, ((1, 1), (0, 0)), mode="edge")
    return (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0


def generate(spec: SynthSpec) -> Dataset:
    """Deterministically synthesize group-disjoint train/val/test splits."""
    root = Rng(spec.seed)
    L = spec.latent_dim
    proto_rng = root.split("prototypes")
    if spec.task == "classification":
        prototypes = proto_rng.gaussian((spec.classes, L))
    else:
        direction = proto_rng.gaussian((L,))
    map_rng = root.split("maps")
    map_audio = map_rng.gaussian((L, spec.n_audio * spec.d_audio)) / np.sqrt(L)
    map_vision = map_rng.gaussian((L, spec.n_vision * spec.d_vision)) / np.sqrt(L)
    group_offsets = root.split("groups").gaussian((spec.groups, L)) * spec.group_scale

    counts = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    split_groups = _partition_groups(spec.groups, counts, root.split("group_split"))

    ds = Dataset(spec.task, spec.classes if spec.task == "classification" else None,
                 spec.n_audio, spec.d_audio, spec.n_vision, spec.d_vision)
    rho = spec.redundancy
    for split, n in counts.items():
        samples = []
        owned = split_groups[split]
        for i in range(n):
            srng = root.split("sample", split, i)
            group = owned[srng.integer(len(owned))]
            if spec.task == "classification":
                label = srng.integer(spec.classes)
                anchor = prototypes[label]
            else:
                label = srng.uniform() * 6.0 - 3.0
                anchor = (label / 3.0) * direction
            shared = anchor + spec.within_std * srng.gaussian((L,)) + group_offsets[group]
            lat_audio = spec.strength_audio * (rho * shared + (1.0 - rho) * srng.gaussian((L,)))
            lat_vision = spec.strength_vision * (rho * shared + (1.0 - rho) * srng.gaussian((L,)))
            audio = _smooth((lat_audio @ map_audio).reshape(spec.n_audio, spec.d_audio))
            vision = _smooth((lat_vision @ map_vision).reshape(spec.n_vision, spec.d_vision))
            audio = audio + spec.noise_std * srng.gaussian(audio.shape)
            vision = vision + spec.noise_std * srng.gaussian(vision.shape)
            samples.append(Sample(audio, vision, label, int(group)))
        ds.splits[split] = samples
    return ds


def _partition_groups(n_groups: int, counts: dict, rng: Rng) -> dict:
    """Assign every group to exactly one split, proportionally to its size."""
    order = rng.permutation(n_groups)
    total = sum(counts.values())
    shares = {}
    used = 0
    names = list(counts)
    for name in names[:-1]:
        k = max(1, round(n_groups * counts[name] / total)) if counts[name] > 0 else 0
        shares[name] = k
        used += k
    shares[names[-1]] = max(1 if counts[names[-1]] > 0 else 0, n_groups - used)
    if sum(shares.values()) > n_groups:
        raise DatasetError(f"cannot give {len(names)} splits disjoint groups out of {n_groups}")
    out = {}
    lo = 0
    for name in names:
        out[name] = [int(g) for g in order[lo:lo + shares[name]]]
        lo += shares[name]
    return out


# ---------------------------------------------------------------------------
# persistence


def save_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    for split, samples in ds.splits.items():
        split_dir = directory / split
        split_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for i, s in enumerate(samples):
            audio_name = f"audio_{i:05d}.csv"
            vision_name = f"vision_{i:05d}.csv"
            np.savetxt(split_dir / audio_name, s.audio, fmt="%.17g", delimiter=",")
            np.savetxt(split_dir / vision_name, s.vision, fmt="%.17g", delimiter=",")
            records.append({
                "id": i,
                "group": int(s.group),
                "label": s.label if isinstance(s.label, int) else float(s.label),
                "audio_path": audio_name,
                "vision_path": vision_name,
            })
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "task": ds.task,
            "classes": ds.classes,
            "n_audio": ds.n_audio,
            "d_audio": ds.d_audio,
            "n_vision": ds.n_vision,
            "d_vision": ds.d_vision,
            "samples": records,
        }
        (split_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return directory


def _load_matrix(path: Path, shape: tuple[int, int]) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"manifest references missing file {path}")
    arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    if arr.shape != shape:
        raise DatasetError(f"{path} has shape {arr.shape}, manifest says {shape}")
    return arr


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    ds = None
    for split in SPLITS:
        manifest_path = directory / split / "manifest.json"
        if not manifest_path.exists():
            raise DatasetError(f"missing manifest {manifest_path}")
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as e:
            raise DatasetError(f"corrupt manifest {manifest_path}: {e}") from e
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise DatasetError(f"{manifest_path} has unsupported schema "
                               f"{manifest.get('schema_version')!r}")
        if ds is None:
            ds = Dataset(manifest["task"], manifest["classes"],
                         manifest["n_audio"], manifest["d_audio"],
                         manifest["n_vision"], manifest["d_vision"])
        samples = []
        for rec in manifest["samples"]:
            audio = _load_matrix(directory / split / rec["audio_path"],
                                 (ds.n_audio, ds.d_audio))
            vision = _load_matrix(directory / split / rec["vision_path"],
                                  (ds.n_vision, ds.d_vision))
            label = rec["label"]
            if ds.task == "classification":
                label = int(label)
            samples.append(Sample(audio, vision, label, int(rec["group"])))
        ds.splits[split] = samples
    return ds


# ---------------------------------------------------------------------------
# standardization


STD_FLOOR = 1e-8


def standardize(ds: Dataset) -> tuple[Dataset, dict]:
    """Z-score all splits with per-feature statistics from the train split.

    Features whose train std falls below the 1e-8 floor are treated as
    constant and standardized to exactly zero.
    """
    train = ds.splits.get("train")
    if not train:
        raise DatasetError("standardize needs a non-empty train split")
    stats = {}
    for modality in ("audio", "vision"):
        stacked = np.concatenate([getattr(s, modality) for s in train], axis=0)
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        stats[modality] = {"mean": mean, "std": np.maximum(std, STD_FLOOR),
                           "constant": std < STD_FLOOR}

    def apply(x, st):
        out = (x - st["mean"]) / st["std"]
        out[:, st["constant"]] = 0.0
        return out

    out_ds = Dataset(ds.task, ds.classes, ds.n_audio, ds.d_audio, ds.n_vision, ds.d_vision)
    for split, samples in ds.splits.items():
        out_ds.splits[split] = [
            Sample(apply(s.audio, stats["audio"]), apply(s.vision, stats["vision"]),
                   s.label, s.group)
            for s in samples
        ]
    return out_ds, stats


def stack_batch(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack samples into (audio, vision, labels) arrays for the model."""
    audio = np.stack([s.audio for s in samples])
    vision = np.stack([s.vision for s in samples])
    labels = np.array([s.label for s in samples])
    return audio, vision, labels
