"""Dataset definition, on-disk formats, ingestion, and the synthetic generator.

Feature files use the LEFX container, one per video per granularity:

    magic "LEFX" (4 bytes), u32 LE version = 1, u32 LE T, u32 LE D,
    then T*D little-endian float32, row-major.

A dataset directory holds manifest.json plus a features/ tree. The manifest
records dims, class names, splits (id, label, file paths per granularity), an
optional generator spec, and a sha256 checksum over its own canonical JSON
(checksum field excluded) so accidental edits are caught on read.

The synthetic generator plants a class prototype into k_informative of the T
fine rows per video and fills the rest with distractor prototypes; the coarse
stream is a fixed random linear projection of the fine stream, rescaled per
class so the projected class-signal norm equals coarse_snr. All draws come
from the SplitMix64 stream documented in rng.py, with per-video streams
seeded by dataset_seed XOR global video index.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .model import DataError
from .rng import SplitMix64

LEFX_MAGIC = b"LEFX"
LEFX_VERSION = 1
MANIFEST_VERSION = 1

# generation redraws a video's noise until the signal-placement invariant
# holds; only meaningful when the planted signal clears the noise floor
_PLACEMENT_MIN_SNR = 4.0
_PLACEMENT_ATTEMPTS = 100


@dataclass
class VideoSample:
    id: str
    label: int
    coarse: np.ndarray  # (T, coarse_dim) float32
    fine: np.ndarray    # (T, fine_dim) float32


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    seq_len: int = 16
    coarse_dim: int = 16
    fine_dim: int = 64
    k_informative: int = 3
    fine_snr: float = 6.0
    coarse_snr: float = 1.5
    distractor_scale: float = 1.0
    seed: int = 2024

    def __post_init__(self):
        if not 1 <= self.k_informative <= self.seq_len:
            raise DataError(f"k_informative must be in [1, {self.seq_len}], "
                            f"got {self.k_informative}")
        # degenerate no-signal spec: both SNRs zero is allowed
        if self.fine_snr == 0.0:
            if self.coarse_snr != 0.0:
                raise DataError("fine_snr 0 (no signal) requires coarse_snr 0")
        elif self.coarse_snr >= self.fine_snr:
            raise DataError(f"coarse_snr ({self.coarse_snr}) must be below "
                            f"fine_snr ({self.fine_snr})")
        if self.num_classes < 2:
            raise DataError(f"need at least 2 classes, got {self.num_classes}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)


@dataclass
class ManifestEntry:
    id: str
    label: int
    coarse_path: str
    fine_path: str


@dataclass
class DatasetManifest:
    version: int
    num_classes: int
    seq_len: int
    coarse_dim: int
    fine_dim: int
    class_names: list[str]
    splits: dict[str, list[ManifestEntry]]
    generator_spec: dict | None = None

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "num_classes": self.num_classes,
            "seq_len": self.seq_len,
            "coarse_dim": self.coarse_dim,
            "fine_dim": self.fine_dim,
            "class_names": self.class_names,
            "splits": {name: [asdict(e) for e in entries]
                       for name, entries in self.splits.items()},
            "generator_spec": self.generator_spec,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        splits = {name: [ManifestEntry(**e) for e in entries]
                  for name, entries in d["splits"].items()}
        return cls(version=d["version"], num_classes=d["num_classes"],
                   seq_len=d["seq_len"], coarse_dim=d["coarse_dim"],
                   fine_dim=d["fine_dim"], class_names=d["class_names"],
                   splits=splits, generator_spec=d.get("generator_spec"))


def _manifest_checksum(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------------------
# LEFX feature files
# ---------------------------------------------------------------------------

def write_lefx(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim != 2:
        raise DataError(f"LEFX stores (T, D) arrays, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(LEFX_MAGIC)
        fh.write(struct.pack("<III", LEFX_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_lefx(path: str | Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != LEFX_MAGIC:
        raise DataError(f"{path}: not a LEFX file (bad magic)")
    version, rows, cols = struct.unpack("<III", raw[4:16])
    if version != LEFX_VERSION:
        raise DataError(f"{path}: unsupported LEFX version {version}")
    expected = 16 + rows * cols * 4
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {rows}x{cols}, "
                        f"file has {len(raw)}")
    arr = np.frombuffer(raw[16:], dtype="<f4").reshape(rows, cols)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite feature values")
    return arr.copy()


# ---------------------------------------------------------------------------
# dataset directory
# ---------------------------------------------------------------------------

class Dataset:
    """Manifest plus lazy, validated access to per-video feature files."""

    def __init__(self, manifest: DatasetManifest, root: Path):
        self.manifest = manifest
        self.root = Path(root)

    def split_names(self) -> list[str]:
        return list(self.manifest.splits)

    def load_entry(self, entry: ManifestEntry) -> VideoSample:
        coarse = read_lefx(self.root / entry.coarse_path)
        fine = read_lefx(self.root / entry.fine_path)
        m = self.manifest
        if coarse.shape != (m.seq_len, m.coarse_dim) or fine.shape != (m.seq_len, m.fine_dim):
            raise DataError(
                f"video {entry.id}: feature shapes {coarse.shape}/{fine.shape} do not "
                f"match manifest ({m.seq_len}, {m.coarse_dim})/({m.seq_len}, {m.fine_dim})")
        return VideoSample(id=entry.id, label=entry.label, coarse=coarse, fine=fine)

    def load_split(self, name: str) -> list[VideoSample]:
        return [self.load_entry(e) for e in self.manifest.splits[name]]


def write_dataset(manifest: DatasetManifest, samples: dict[str, list[VideoSample]],
                  root: str | Path) -> Dataset:
    """Write feature files + checksummed manifest.json under `root`."""
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    ids_seen: set[str] = set()
    for name, entries in manifest.splits.items():
        for entry, sample in zip(entries, samples[name]):
            if entry.id in ids_seen:
                raise DataError(f"duplicate video id {entry.id!r} across splits")
            ids_seen.add(entry.id)
            write_lefx(root / entry.coarse_path, sample.coarse)
            write_lefx(root / entry.fine_path, sample.fine)
    payload = manifest.to_dict()
    payload["checksum"] = _manifest_checksum(manifest.to_dict())
    with open(root / "manifest.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    return Dataset(manifest, root)


def read_dataset(root: str | Path) -> Dataset:
    """Open a dataset directory, validating the manifest checksum."""
    root = Path(root)
    try:
        payload = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DataError(f"no manifest.json under {root}") from exc
    if payload.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {payload.get('version')!r}")
    declared = payload.pop("checksum", None)
    actual = _manifest_checksum(payload)
    if declared != actual:
        raise DataError(f"manifest checksum mismatch under {root}: "
                        f"declared {declared!r}, computed {actual!r}")
    manifest = DatasetManifest.from_dict(payload)
    ids: set[str] = set()
    for name, entries in manifest.splits.items():
        for e in entries:
            if e.id in ids:
                raise DataError(f"video id {e.id!r} appears in multiple splits")
            ids.add(e.id)
            if e.label >= manifest.num_classes:
                raise DataError(f"video {e.id}: label {e.label} out of range")
    return Dataset(manifest, root)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

def _unit_rows(rng: SplitMix64, n: int, dim: int) -> np.ndarray:
    rows = rng.gaussian(n * dim).reshape(n, dim)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _generate_video(rng: SplitMix64, spec: SyntheticSpec, label: int,
                    protos: np.ndarray, distractors: np.ndarray,
                    projection: np.ndarray, coarse_scale: np.ndarray,
                    ) -> tuple[np.ndarray, np.ndarray]:
    t, df, dc = spec.seq_len, spec.fine_dim, spec.coarse_dim
    positions = rng.sample_without_replacement(spec.k_informative, t)
    informative = np.zeros(t, dtype=bool)
    informative[positions] = True
    enforce = spec.fine_snr >= _PLACEMENT_MIN_SNR

    for attempt in range(_PLACEMENT_ATTEMPTS):
        fine = np.empty((t, df))
        which = rng.integers(t, len(distractors))
        noise = rng.gaussian(t * df).reshape(t, df)
        for row in range(t):
            base = (spec.fine_snr * protos[label] if informative[row]
                    else spec.distractor_scale * distractors[which[row]])
            fine[row] = base + noise[row]
        if not enforce:
            break
        inner = fine @ protos[label]
        threshold = 3.0 * np.abs(inner[~informative]).mean()
        if np.all(inner[informative] > threshold) and np.all(inner[~informative] <= threshold):
            break
    else:
        raise DataError(f"signal placement unsatisfiable after {_PLACEMENT_ATTEMPTS} "
                        f"redraws (spec {spec})")

    coarse = coarse_scale[label] * (fine @ projection) + rng.gaussian(t * dc).reshape(t, dc)
    return coarse.astype(np.float32), fine.astype(np.float32)


def generate_synthetic(spec: SyntheticSpec, sizes: dict[str, int],
                       root: str | Path) -> Dataset:
    """Generate per-split videos and write the dataset directory.

    Labels are assigned round-robin within each split, so per-split class
    counts differ by at most one whenever the size divides evenly. Video
    streams are SplitMix64(spec.seed ^ global_index), with the global index
    running over splits in the order given.
    """
    for name, count in sizes.items():
        if count < 1:
            raise DataError(f"split {name!r} must hold at least 1 video, got {count}")
    shared = SplitMix64(spec.seed)
    protos = _unit_rows(shared, spec.num_classes, spec.fine_dim)
    distractors = _unit_rows(shared, spec.num_classes, spec.fine_dim)
    projection = shared.gaussian(spec.fine_dim * spec.coarse_dim).reshape(
        spec.fine_dim, spec.coarse_dim) / np.sqrt(spec.fine_dim)
    # per-class rescale so the projected class signal lands at coarse_snr
    proj_norm = np.linalg.norm(protos @ projection, axis=1)
    if spec.fine_snr > 0:
        coarse_scale = spec.coarse_snr / (spec.fine_snr * proj_norm)
    else:
        coarse_scale = np.zeros(spec.num_classes)  # no signal to project

    splits: dict[str, list[ManifestEntry]] = {}
    samples: dict[str, list[VideoSample]] = {}
    global_index = 0
    for name, count in sizes.items():
        entries, rows = [], []
        for i in range(count):
            label = i % spec.num_classes
            vid = f"{name}{i:05d}"
            vrng = SplitMix64(spec.seed ^ global_index)
            coarse, fine = _generate_video(vrng, spec, label, protos,
                                           distractors, projection, coarse_scale)
            entries.append(ManifestEntry(
                id=vid, label=label,
                coarse_path=f"features/{vid}.coarse.lefx",
                fine_path=f"features/{vid}.fine.lefx"))
            rows.append(VideoSample(id=vid, label=label, coarse=coarse, fine=fine))
            global_index += 1
        splits[name] = entries
        samples[name] = rows

    manifest = DatasetManifest(
        version=MANIFEST_VERSION, num_classes=spec.num_classes,
        seq_len=spec.seq_len, coarse_dim=spec.coarse_dim, fine_dim=spec.fine_dim,
        class_names=[f"class{i:02d}" for i in range(spec.num_classes)],
        splits=splits, generator_spec=spec.to_dict())
    return write_dataset(manifest, samples, root)


# ---------------------------------------------------------------------------
# external import
# ---------------------------------------------------------------------------

def import_external(coarse_dir: str | Path, fine_dir: str | Path,
                    labels_file: str | Path, split: str = "all",
                    num_classes: int | None = None) -> DatasetManifest:
    """Build a manifest over existing LEFX files without copying them.

    Expects <id>.lefx (or <id>.coarse.lefx / <id>.fine.lefx) per video in
    each directory and a labels CSV with header "id,label". Paths in the
    returned manifest are absolute.
    """
    coarse_dir, fine_dir = Path(coarse_dir), Path(fine_dir)

    def index_dir(d: Path, granularity: str) -> dict[str, Path]:
        out: dict[str, Path] = {}
        for p in sorted(d.glob("*.lefx")):
            stem = p.name[:-len(".lefx")]
            for suffix in (f".{granularity}", ""):
                if suffix and stem.endswith(suffix):
                    stem = stem[:-len(suffix)]
                    break
            out[stem] = p
        return out

    coarse_files = index_dir(coarse_dir, "coarse")
    fine_files = index_dir(fine_dir, "fine")

    labels: dict[str, int] = {}
    lines = Path(labels_file).read_text().splitlines()
    if not lines or lines[0].strip().lower() != "id,label":
        raise DataError(f"{labels_file}: expected CSV header 'id,label'")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        vid, _, label = line.partition(",")
        vid = vid.strip()
        if vid not in coarse_files or vid not in fine_files:
            raise DataError(f"{labels_file}:{lineno}: unknown video id {vid!r} "
                            f"(no matching feature files)")
        labels[vid] = int(label)

    dims: tuple[int, int, int] | None = None  # (T, coarse_dim, fine_dim)
    offenders: list[str] = []
    entries: list[ManifestEntry] = []
    for vid in sorted(labels):
        coarse = read_lefx(coarse_files[vid])
        fine = read_lefx(fine_files[vid])
        if coarse.shape[0] != fine.shape[0]:
            offenders.append(f"{vid}: T {coarse.shape[0]} vs {fine.shape[0]}")
            continue
        this = (coarse.shape[0], coarse.shape[1], fine.shape[1])
        if dims is None:
            dims = this
        elif this != dims:
            offenders.append(f"{vid}: dims {this} vs {dims}")
            continue
        entries.append(ManifestEntry(id=vid, label=labels[vid],
                                     coarse_path=str(coarse_files[vid].resolve()),
                                     fine_path=str(fine_files[vid].resolve())))
    if offenders:
        raise DataError("inconsistent feature dimensions: " + "; ".join(offenders))
    if not entries:
        raise DataError("no videos to import")
    n_classes = num_classes if num_classes is not None else max(labels.values()) + 1
    return DatasetManifest(
        version=MANIFEST_VERSION, num_classes=n_classes,
        seq_len=dims[0], coarse_dim=dims[1], fine_dim=dims[2],
        class_names=[f"class{i:02d}" for i in range(n_classes)],
        splits={split: entries}, generator_spec=None)
