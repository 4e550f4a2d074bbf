"""Frame records, manifests, PPM images and preprocessing.

A corpus is a directory holding ``manifest.csv`` plus the images it
references.  Manifest columns::

    frame_id,image,brake_n,gas_n,velocity_kmh,steering_deg,accel_long_g,accel_lat_g,label

``image`` is relative to the manifest; ``label`` is -1 (left), 1 (right)
or 0 (keep).  Images are binary PPM (P6, maxval 255).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import INDEX_TO_LABEL, LABEL_TO_INDEX

MANIFEST_HEADER = [
    "frame_id",
    "image",
    "brake_n",
    "gas_n",
    "velocity_kmh",
    "steering_deg",
    "accel_long_g",
    "accel_lat_g",
    "label",
]
IMU_COLUMNS = MANIFEST_HEADER[2:8]
CROP_TOP = 134
CROP_BOTTOM = 68
STD_GUARD = 1e-9


class DatasetError(Exception):
    pass


class ManifestError(DatasetError):
    pass


class LabelError(ManifestError):
    pass


class MissingImageError(DatasetError, FileNotFoundError):
    pass


class ImageFormatError(DatasetError):
    pass


@dataclass
class FrameRecord:
    frame_id: str
    image: Path
    imu: np.ndarray
    label: int


@dataclass
class Manifest:
    path: Path
    records: list[FrameRecord]
    split: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


@dataclass
class FrameSet:
    """Decoded frames held in memory; images stay uint8 until batched."""

    images: np.ndarray  # N x 3 x H x W, uint8
    imus: np.ndarray  # N x 6, float64
    labels: np.ndarray  # N, values in {-1, 1, 0}
    frame_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_indices(self) -> np.ndarray:
        return np.array([LABEL_TO_INDEX[int(v)] for v in self.labels], dtype=np.int64)

    def float_images(self, idx=slice(None)) -> np.ndarray:
        return self.images[idx].astype(np.float32) * np.float32(1 / 255)

    def subset(self, idx) -> FrameSet:
        idx = np.asarray(idx, dtype=np.int64)
        return FrameSet(self.images[idx], self.imus[idx], self.labels[idx], [self.frame_ids[i] for i in idx])


# ---------------------------------------------------------------------------
# labels


def encode_label(label: int) -> np.ndarray:
    """-1 -> [1,0,0], 1 -> [0,1,0], 0 -> [0,0,1]."""
    if isinstance(label, bool) or label not in LABEL_TO_INDEX:
        raise LabelError(f"label must be one of -1, 1, 0; got {label!r}")
    out = np.zeros(3, dtype=np.float32)
    out[LABEL_TO_INDEX[int(label)]] = 1.0
    return out


def decode_label(onehot) -> int:
    return INDEX_TO_LABEL[int(np.argmax(onehot))]


# ---------------------------------------------------------------------------
# preprocessing


def crop_image(image: np.ndarray, top: int = CROP_TOP, bottom: int = CROP_BOTTOM) -> np.ndarray:
    """Drop ``top`` rows from the top and ``bottom`` rows from the bottom of a C x H x W image."""
    h = image.shape[-2]
    if top < 0 or bottom < 0 or top + bottom >= h:
        raise ValueError(f"crop top={top} bottom={bottom} leaves nothing of height {h}")
    return image[..., top : h - bottom, :]


@dataclass
class ImuNormalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, imus: np.ndarray) -> ImuNormalizer:
        imus = np.asarray(imus, dtype=np.float64)
        return cls(imus.mean(axis=0), imus.std(axis=0))

    def __call__(self, imu: np.ndarray) -> np.ndarray:
        return normalize_imu(imu, self)

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["mean", "std"])
            for m, s in zip(self.mean, self.std):
                w.writerow([f"{m:.17g}", f"{s:.17g}"])

    @classmethod
    def load(cls, path) -> ImuNormalizer:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["mean", "std"] or len(rows) != 7:
            raise DatasetError(f"{path}: expected header mean,std and 6 rows")
        vals = np.array([[float(a), float(b)] for a, b in rows[1:]])
        return cls(vals[:, 0], vals[:, 1])


def normalize_imu(imu: np.ndarray, normalizer: ImuNormalizer) -> np.ndarray:
    """Z-score per channel; channels with (near) zero training spread map to 0."""
    imu = np.asarray(imu, dtype=np.float64)
    live = normalizer.std >= STD_GUARD
    safe = np.where(live, normalizer.std, 1.0)
    return np.where(live, (imu - normalizer.mean) / safe, 0.0)


# ---------------------------------------------------------------------------
# PPM


def write_ppm(path, image: np.ndarray) -> None:
    """Write a 3 x H x W image (uint8, or floats in [0, 1]) as binary P6."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected 3 x H x W image, got {img.shape}")
    _, h, w = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes())


def read_ppm_u8(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise MissingImageError(f"{path}: no such image") from None
    if buf[:2] != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (magic {buf[:2]!r})")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: malformed PPM header")
        tokens.append(int(buf[start:pos]))
    w, h, maxval = tokens
    if maxval != 255 or w < 1 or h < 1:
        raise ImageFormatError(f"{path}: unsupported PPM {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace byte ends the header
    need = w * h * 3
    if len(buf) - pos < need:
        raise ImageFormatError(f"{path}: pixel data truncated ({len(buf) - pos} of {need} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).transpose(2, 0, 1).copy()


def read_image(path) -> np.ndarray:
    """Decode a PPM to a float32 3 x H x W array in [0, 1]."""
    return read_ppm_u8(path).astype(np.float32) / np.float32(255.0)


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, records: list[FrameRecord]) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            rel = Path(r.image)
            if rel.is_absolute():
                rel = rel.relative_to(path.parent.resolve())
            w.writerow([r.frame_id, rel.as_posix(), *(f"{v:.6f}" for v in r.imu), int(r.label)])


def load_manifest(path, split: str = "") -> Manifest:
    """Parse and validate a manifest; image paths are resolved and must exist."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise ManifestError(f"{path}: manifest not found") from None
    with fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != MANIFEST_HEADER:
        raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
    records = []
    seen = set()
    for i, row in enumerate(rows[1:], start=1):
        where = f"{path}: row {i} (line {i + 1})"
        if len(row) != len(MANIFEST_HEADER):
            raise ManifestError(f"{where}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
        fid, img = row[0], row[1]
        try:
            imu = np.array([float(v) for v in row[2:8]])
        except ValueError:
            raise ManifestError(f"{where}: IMU fields must be numbers") from None
        if not np.all(np.isfinite(imu)):
            raise ManifestError(f"{where}: IMU fields must be finite")
        try:
            label = int(row[8])
        except ValueError:
            raise LabelError(f"{where}: label {row[8]!r} is not -1, 0 or 1") from None
        if label not in LABEL_TO_INDEX:
            raise LabelError(f"{where}: label {label} is not -1, 0 or 1")
        if fid in seen:
            raise ManifestError(f"{where}: duplicate frame id {fid!r}")
        seen.add(fid)
        image = path.parent / img
        if not image.is_file():
            raise MissingImageError(f"{where}: image {image} does not exist")
        records.append(FrameRecord(fid, image, imu, label))
    return Manifest(path, records, split)


def load_frames(manifest: Manifest | str | Path, crop: tuple[int, int] = (0, 0)) -> FrameSet:
    """Decode every image of a manifest, optionally cropping (top, bottom) rows."""
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    if not manifest.records:
        raise DatasetError(f"{manifest.path}: manifest has no frames")
    images = []
    for r in manifest.records:
        img = read_ppm_u8(r.image)
        if crop != (0, 0):
            img = crop_image(img, *crop)
        if images and img.shape != images[0].shape:
            raise ImageFormatError(f"{r.image}: size {img.shape[1:]} differs from {images[0].shape[1:]}")
        images.append(img)
    return FrameSet(
        np.stack(images),
        np.stack([r.imu for r in manifest.records]),
        np.array([r.label for r in manifest.records], dtype=np.int64),
        [r.frame_id for r in manifest.records],
    )


def class_counts(labels) -> dict[int, int]:
    labels = list(labels)
    return {lab: labels.count(lab) for lab in (-1, 1, 0)}


def prevalence(labels) -> float:
    counts = class_counts(labels)
    return max(counts.values()) / max(1, sum(counts.values()))
