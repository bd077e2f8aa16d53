"""Procedural ellipsoid phantoms and a bit-exact volume file format.

Each foreground class gets 1-3 ellipsoids whose edge is a linear intensity
ramp of half-width ``softness`` (in normalised radius units) around the
surface.  The label is the noiseless "inside" test, so with zero noise, unit
contrast and the per-volume nuisance terms (contrast jitter, intensity offset,
linear bias field) switched off, a binary phantom thresholded at 0.5
reproduces its label.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

VOLUME_MAGIC = "SDCLVOL"
VOLUME_VERSION = 1
SPLITS = ("labeled", "unlabeled", "test")


class VolumeFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DataSpecError(ValueError):
    pass


@dataclass
class VolumeRecord:
    """One volume.  Unlabeled records hide their label from ``.label``.

    The generator keeps the ground truth of unlabeled volumes for offline
    oracle evaluation only; it is reachable through :func:`hidden_label`.
    """

    id: str
    image: np.ndarray
    split: str
    num_classes: int
    _label: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataSpecError(f"unknown split {self.split!r}")
        if self.split != "unlabeled" and self._label is None:
            raise DataSpecError(f"{self.split} volume {self.id} needs a label")
        if not np.isfinite(self.image).all():
            raise DataSpecError(f"volume {self.id} has non-finite intensities")
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise DataSpecError(f"volume {self.id} has intensities outside [0, 1]")
        if self._label is not None:
            if self._label.shape != self.image.shape:
                raise DataSpecError(f"volume {self.id}: label shape {self._label.shape} != image shape {self.image.shape}")
            if self._label.size and self._label.max() >= self.num_classes:
                raise DataSpecError(f"volume {self.id}: label value {self._label.max()} >= K={self.num_classes}")

    @property
    def label(self) -> np.ndarray:
        if self.split == "unlabeled":
            raise AttributeError(f"unlabeled volume {self.id} exposes no label")
        return self._label

    @property
    def has_label(self) -> bool:
        return self.split != "unlabeled"

    def __eq__(self, other):
        if not isinstance(other, VolumeRecord):
            return NotImplemented
        same_label = (self._label is None and other._label is None) or (
            self._label is not None and other._label is not None and np.array_equal(self._label, other._label)
        )
        return (
            self.id == other.id
            and self.split == other.split
            and self.num_classes == other.num_classes
            and self.image.shape == other.image.shape
            and self.image.tobytes() == other.image.tobytes()
            and same_label
        )


def hidden_label(record: VolumeRecord) -> np.ndarray | None:
    return record._label


@dataclass
class DatasetSpec:
    n_labeled: int = 4
    n_unlabeled: int = 20
    n_test: int = 4
    shape: tuple[int, int, int] = (32, 32, 32)
    num_classes: int = 2
    ellipsoids_per_class: tuple[int, int] = (1, 3)
    radius_range: tuple[float, float] = (4.0, 9.0)
    contrast: float = 0.6
    noise_sigma: float = 0.1
    softness: float = 0.15
    foreground_fraction: tuple[float, float] = (0.01, 0.6)
    # per-volume nuisance: contrast scale factor range, background offset, bias-field amplitude
    contrast_jitter: float = 0.5
    offset_jitter: float = 0.1
    bias_amplitude: float = 0.15
    seed: int = 0

    def validate(self) -> None:
        if self.n_labeled < 2:
            raise DataSpecError(f"need at least 2 labeled volumes, got {self.n_labeled}")
        if self.n_unlabeled < 2:
            raise DataSpecError(f"need at least 2 unlabeled volumes, got {self.n_unlabeled}")
        if self.n_test < 0:
            raise DataSpecError("n_test must be >= 0")
        if self.num_classes < 2:
            raise DataSpecError(f"class count must be >= 2, got {self.num_classes}")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise DataSpecError(f"shape must be three positive extents, got {self.shape}")
        lo, hi = self.ellipsoids_per_class
        if not 1 <= lo <= hi:
            raise DataSpecError(f"bad ellipsoid count range {self.ellipsoids_per_class}")
        r_lo, r_hi = self.radius_range
        if not 0 < r_lo <= r_hi:
            raise DataSpecError(f"bad radius range {self.radius_range}")
        extents = [n for n in self.shape if n > 1]
        if r_hi > min(extents) / 2:
            raise DataSpecError(f"max radius {r_hi} exceeds half the smallest extent {min(extents)}")
        if not 0 <= self.contrast <= 1:
            raise DataSpecError("contrast must lie in [0, 1]")
        if self.noise_sigma < 0 or self.softness <= 0:
            raise DataSpecError("noise_sigma must be >= 0 and softness > 0")
        if not 0 <= self.contrast_jitter < 1:
            raise DataSpecError("contrast_jitter must lie in [0, 1)")
        if self.offset_jitter < 0 or self.bias_amplitude < 0:
            raise DataSpecError("offset_jitter and bias_amplitude must be >= 0")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataSpecError(f"unknown dataset keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def _ellipsoid_field(shape, center, radii) -> np.ndarray:
    """1 - normalised radius: positive inside, zero on the surface."""
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return 1.0 - np.sqrt(r2)


def _phantom(spec: DatasetSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    shape = spec.shape
    flat = [n == 1 for n in shape]
    label = np.zeros(shape, dtype=np.uint8)
    level = np.zeros(shape)
    for c in range(1, spec.num_classes):
        soft = np.zeros(shape)
        for _ in range(int(rng.integers(spec.ellipsoids_per_class[0], spec.ellipsoids_per_class[1] + 1))):
            radii = [1.0 if f else rng.uniform(*spec.radius_range) for f in flat]
            center = [0.0 if f else rng.uniform(r, n - 1 - r) for f, r, n in zip(flat, radii, shape)]
            fld = _ellipsoid_field(shape, center, radii)
            soft = np.maximum(soft, np.clip(0.5 + fld / (2 * spec.softness), 0.0, 1.0))
        inside = soft > 0.5
        label[inside] = c
        level = np.maximum(level, soft * (c / (spec.num_classes - 1)))
    contrast = spec.contrast * rng.uniform(1.0 - spec.contrast_jitter, 1.0)
    image = (1.0 - contrast) / 2 + contrast * level + rng.uniform(-spec.offset_jitter, spec.offset_jitter)
    if spec.bias_amplitude > 0:
        # smooth linear ramp along a random direction, spanning [-amp, amp] across the volume
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        grids = np.meshgrid(*[np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in shape], indexing="ij")
        ramp = sum(d * g for d, g in zip(direction, grids)) / np.sqrt(3.0)
        image = image + spec.bias_amplitude * ramp
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=shape)
    return np.clip(image, 0.0, 1.0), label


def generate_volume(spec: DatasetSpec, index: int, split: str, max_tries: int = 50) -> VolumeRecord:
    # Each volume draws from its own stream keyed by (seed, index).
    rng = np.random.default_rng([spec.seed & 0xFFFF_FFFF_FFFF_FFFF, index])
    lo, hi = spec.foreground_fraction
    for _ in range(max_tries):
        image, label = _phantom(spec, rng)
        frac = float(np.count_nonzero(label)) / label.size
        if lo <= frac <= hi:
            return VolumeRecord(f"vol_{index:04d}", image, split, spec.num_classes, label)
    raise DataSpecError(f"could not meet foreground fraction {spec.foreground_fraction} in {max_tries} draws")


def generate(spec: DatasetSpec) -> list[VolumeRecord]:
    """Labeled, then unlabeled, then test volumes; deterministic per (seed, index)."""
    spec.validate()
    splits = ["labeled"] * spec.n_labeled + ["unlabeled"] * spec.n_unlabeled + ["test"] * spec.n_test
    return [generate_volume(spec, i, s) for i, s in enumerate(splits)]


def by_split(records: list[VolumeRecord], split: str) -> list[VolumeRecord]:
    return [r for r in records if r.split == split]


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------


def volume_bytes(record: VolumeRecord) -> bytes:
    label = hidden_label(record)
    header = [
        f"{VOLUME_MAGIC} {VOLUME_VERSION}",
        f"id={record.id}",
        f"split={record.split}",
        f"shape={','.join(str(n) for n in record.image.shape)}",
        f"K={record.num_classes}",
        "dtype=float64-le",
        f"has_label={int(label is not None)}",
        "label_dtype=uint8",
        "end_header",
    ]
    blob = ("\n".join(header) + "\n").encode("ascii") + record.image.astype("<f8").tobytes()
    if label is not None:
        blob += label.astype(np.uint8).tobytes()
    return blob


def write_volume(record: VolumeRecord, path: str | Path) -> None:
    Path(path).write_bytes(volume_bytes(record))


def volume_from_bytes(blob: bytes) -> VolumeRecord:
    marker = b"end_header\n"
    first_line = blob.split(b"\n", 1)[0]
    if first_line.split(b" ")[0] != VOLUME_MAGIC.encode():
        raise VolumeFormatError(f"bad magic {first_line[:16]!r}, expected {VOLUME_MAGIC!r}", 0)
    version_field = first_line[len(VOLUME_MAGIC) + 1 :]
    if version_field != str(VOLUME_VERSION).encode():
        raise VolumeFormatError(f"unsupported version {version_field!r}, expected {VOLUME_VERSION}", len(VOLUME_MAGIC) + 1)
    end = blob.find(marker)
    if end < 0:
        raise VolumeFormatError("header terminator not found", len(blob))
    fields: dict[str, str] = {}
    pos = len(first_line) + 1
    for line in blob[pos:end].decode("ascii").splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise VolumeFormatError(f"malformed header line {line!r}", pos)
        fields[key] = value
        pos += len(line) + 1
    required = ("id", "split", "shape", "K", "dtype", "has_label")
    missing = [k for k in required if k not in fields]
    if missing:
        raise VolumeFormatError(f"header missing fields {missing}", end)
    if fields["dtype"] != "float64-le":
        raise VolumeFormatError(f"unsupported dtype {fields['dtype']!r}", end)
    shape = tuple(int(n) for n in fields["shape"].split(","))
    n_vox = int(np.prod(shape))
    has_label = fields["has_label"] == "1"
    offset = end + len(marker)
    expected = n_vox * 8 + (n_vox if has_label else 0)
    actual = len(blob) - offset
    if actual != expected:
        raise VolumeFormatError(f"payload length mismatch: expected {expected} bytes, got {actual}", offset)
    image = np.frombuffer(blob, dtype="<f8", count=n_vox, offset=offset).astype(np.float64).reshape(shape)
    label = None
    if has_label:
        label = np.frombuffer(blob, dtype=np.uint8, count=n_vox, offset=offset + 8 * n_vox).reshape(shape).copy()
    return VolumeRecord(fields["id"], image, fields["split"], int(fields["K"]), label)


def read_volume(path: str | Path) -> VolumeRecord:
    return volume_from_bytes(Path(path).read_bytes())


def write_dataset(records: list[VolumeRecord], out_dir: str | Path, spec: DatasetSpec | None = None) -> Path:
    """Write every volume plus a JSON manifest (ids, splits, relative paths)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        name = f"{rec.id}.vol"
        write_volume(rec, out_dir / name)
        entries.append({"id": rec.id, "split": rec.split, "path": name})
    manifest = {"format": VOLUME_MAGIC, "version": VOLUME_VERSION, "volumes": entries}
    if spec is not None:
        manifest["spec"] = spec.to_dict()
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_dataset(manifest_path: str | Path) -> list[VolumeRecord]:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    records = []
    for entry in manifest["volumes"]:
        rec = read_volume(manifest_path.parent / entry["path"])
        if rec.id != entry["id"] or rec.split != entry["split"]:
            raise DataSpecError(f"manifest entry {entry} disagrees with file header ({rec.id}, {rec.split})")
        records.append(rec)
    return records
