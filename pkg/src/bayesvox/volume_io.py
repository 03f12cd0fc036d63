"""Volumes on disk and in memory: z-scoring, subvolume tiling, the SVOL
container, synthetic labeled phantoms, and quality-corruption transforms.

The synthetic generator builds concentric ellipsoidal shells: class 0 fills
the exterior, classes 1..C-1 nest inward, each class keeps at least 1% voxel
occupancy (geometry is redrawn up to 10 times otherwise). Intensities are
evenly spaced per-class means plus Gaussian noise; geometry and noise draw
from independent streams spawned off one seed, so label volumes do not
depend on the noise level.

SVOL files: magic ``SVOL1``, little-endian u32 D,H,W, u8 dtype tag
(0=float32, 1=int32), u8 payload kind (0=intensity, 1=labels,
2=probability, the latter followed by u32 class count), u32 meta-block
length plus UTF-8 ``key=value`` lines, then raw voxels with x (the W axis)
fastest.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

__all__ = [
    "DataError",
    "Volume",
    "LabeledVolume",
    "Subvolume",
    "SynthConfig",
    "zscore",
    "split_subvolumes",
    "reassemble",
    "synth_generate",
    "corrupt",
    "write_svol",
    "read_svol",
]

QUALITY_LABELS = ("good", "bad", "unlabeled")
CORRUPTION_KINDS = ("noise", "blur", "ghost")
GHOST_SHIFT = 8  # voxels, along the first axis


class DataError(ValueError):
    """Bad volume data or file contents (CLI exit code 2)."""


@dataclass
class Volume:
    """Scalar intensity volume plus free-form provenance metadata."""

    data: np.ndarray  # (D, H, W)
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise DataError(f"Volume: expected 3-d intensities, got shape {self.data.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabeledVolume:
    """Volume with integer class labels; class 0 is background/unknown."""

    volume: Volume
    labels: np.ndarray
    quality_label: str = "unlabeled"

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.shape != self.volume.data.shape:
            raise DataError(
                f"LabeledVolume: label extents {self.labels.shape} do not match "
                f"volume extents {self.volume.data.shape}"
            )
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise DataError(f"LabeledVolume: labels must be integers, got {self.labels.dtype}")
        if self.quality_label not in QUALITY_LABELS:
            raise DataError(f"LabeledVolume: quality_label must be one of {QUALITY_LABELS}")


@dataclass
class Subvolume:
    """One tile of a split volume; ``coords`` are grid indices, not voxels."""

    coords: tuple[int, int, int]
    data: np.ndarray
    labels: np.ndarray | None = None


def zscore(v: Volume) -> Volume:
    """Center and scale intensities to mean 0, standard deviation 1."""
    data = v.data.astype(np.float64)
    std = data.std()
    if std == 0:
        raise DataError("zscore: constant volume has no scale")
    out = (data - data.mean()) / std
    return Volume(out.astype(np.float32), meta=dict(v.meta))


def split_subvolumes(v: Volume | LabeledVolume, side: int) -> list[Subvolume]:
    """Tile into non-overlapping cubes of ``side``, lexicographic grid order."""
    if side < 1:
        raise DataError(f"split_subvolumes: side must be >= 1, got {side}")
    labeled = isinstance(v, LabeledVolume)
    data = v.volume.data if labeled else v.data
    for axis, extent in enumerate(data.shape):
        if extent % side != 0:
            raise DataError(
                f"split_subvolumes: axis {axis} extent {extent} not divisible by side {side}"
            )
    parts = []
    nd, nh, nw = (e // side for e in data.shape)
    for i in range(nd):
        for j in range(nh):
            for k in range(nw):
                sl = (
                    slice(i * side, (i + 1) * side),
                    slice(j * side, (j + 1) * side),
                    slice(k * side, (k + 1) * side),
                )
                parts.append(
                    Subvolume(
                        coords=(i, j, k),
                        data=data[sl].copy(),
                        labels=v.labels[sl].copy() if labeled else None,
                    )
                )
    return parts


def reassemble(parts, dims: tuple[int, int, int]) -> np.ndarray:
    """Inverse of :func:`split_subvolumes`; placement comes from coordinates.

    Accepts Subvolume objects or (coords, block) pairs. Blocks may carry a
    leading channel axis (per-class probabilities); the result then does too.
    """
    normalized = []
    for p in parts:
        if isinstance(p, Subvolume):
            normalized.append((tuple(p.coords), np.asarray(p.data)))
        else:
            coords, block = p
            normalized.append((tuple(coords), np.asarray(block)))
    if not normalized:
        raise DataError("reassemble: no parts given")
    first = normalized[0][1]
    side = first.shape[-1]
    channels = first.shape[0] if first.ndim == 4 else None
    grid = tuple(e // side for e in dims)
    if any(e % side for e in dims):
        raise DataError(f"reassemble: dims {dims} not divisible by tile side {side}")
    expected = {(i, j, k) for i in range(grid[0]) for j in range(grid[1]) for k in range(grid[2])}
    shape = dims if channels is None else (channels,) + tuple(dims)
    out = np.empty(shape, dtype=first.dtype)
    seen = set()
    for coords, block in normalized:
        if coords in seen:
            raise DataError(f"reassemble: duplicate tile at {coords}")
        if coords not in expected:
            raise DataError(f"reassemble: tile {coords} outside grid {grid}")
        seen.add(coords)
        sl = tuple(slice(c * side, (c + 1) * side) for c in coords)
        if channels is None:
            out[sl] = block
        else:
            out[(slice(None),) + sl] = block
    missing = expected - seen
    if missing:
        raise DataError(f"reassemble: missing tile at {sorted(missing)[0]}")
    return out


# -- synthetic phantoms --------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Geometry and intensity model of one synthetic labeled volume.

    The last four fields define the acquisition-site character (intensity
    scale and shell geometry); shifting them emulates data from a different
    site without touching the class structure.
    """

    side: int = 64
    num_classes: int = 8
    noise_sigma: float = 0.1
    seed: int = 0
    intensity_lo: float = 0.0
    intensity_hi: float = 1.0
    axis_lo: float = 0.74
    axis_hi: float = 0.88
    center_jitter: float = 0.04
    inner_radius: float = 0.4

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError(f"SynthConfig: num_classes must be >= 2, got {self.num_classes}")
        if self.side < 4:
            raise DataError(f"SynthConfig: side must be >= 4, got {self.side}")
        if self.noise_sigma < 0:
            raise DataError(f"SynthConfig: noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0 < self.inner_radius < 1:
            raise DataError(f"SynthConfig: inner_radius must lie in (0,1), got {self.inner_radius}")
        if not 0 < self.axis_lo <= self.axis_hi:
            raise DataError(f"SynthConfig: bad axis range [{self.axis_lo}, {self.axis_hi}]")
        if self.intensity_hi <= self.intensity_lo:
            raise DataError("SynthConfig: intensity_hi must exceed intensity_lo")


def synth_generate(cfg: SynthConfig) -> LabeledVolume:
    """Deterministic labeled phantom; geometry redrawn until every class holds >= 1%."""
    geo_rng, noise_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2)
    )
    side = cfg.side
    c = cfg.num_classes
    axes = np.arange(side, dtype=np.float64)
    min_count = math.ceil(0.01 * side**3)
    labels = None
    for _ in range(10):
        center = side / 2.0 + geo_rng.uniform(-cfg.center_jitter, cfg.center_jitter, 3) * side
        semi = geo_rng.uniform(cfg.axis_lo, cfg.axis_hi, 3) * side / 2.0
        dist2 = (
            ((axes - center[0]) / semi[0])[:, None, None] ** 2
            + ((axes - center[1]) / semi[1])[None, :, None] ** 2
            + ((axes - center[2]) / semi[2])[None, None, :] ** 2
        )
        r = np.sqrt(dist2)
        thresholds = np.linspace(1.0, cfg.inner_radius, c - 1)
        cand = np.zeros((side, side, side), dtype=np.int32)
        for k, thr in enumerate(thresholds):
            cand[r <= thr] = k + 1
        counts = np.bincount(cand.reshape(-1), minlength=c)
        if counts.min() >= min_count:
            labels = cand
            break
    if labels is None:
        raise DataError(
            f"synth_generate: could not give all {c} classes >= 1% occupancy "
            f"in 10 attempts (seed {cfg.seed})"
        )
    means = np.linspace(cfg.intensity_lo, cfg.intensity_hi, c)
    intensity = means[labels] + cfg.noise_sigma * noise_rng.standard_normal(labels.shape)
    meta = {
        "source_id": f"synth-{cfg.seed}",
        "synthetic_seed": str(cfg.seed),
        "corruption": "none",
    }
    return LabeledVolume(
        volume=Volume(intensity.astype(np.float32), meta=meta),
        labels=labels,
        quality_label="good",
    )


def corrupt(lv: LabeledVolume, kind: str, severity: float, seed: int | None = None) -> LabeledVolume:
    """Degrade intensities (labels untouched) and mark the result bad quality.

    noise: add Gaussian with sd = severity * std(volume).
    blur:  apply a 3^3 box filter round(severity) times (half rounds up).
    ghost: add severity-weighted copy shifted 8 voxels along the first axis
           (wrapping, like a phase-encode ghost).

    Deterministic: the noise stream is derived from the volume's stored seed,
    the kind, and the severity unless an explicit seed is given.
    """
    if kind not in CORRUPTION_KINDS:
        raise DataError(f"corrupt: unknown kind {kind!r}, expected one of {CORRUPTION_KINDS}")
    if severity <= 0:
        raise DataError(f"corrupt: severity must be positive, got {severity}")
    data = lv.volume.data.astype(np.float64)
    if kind == "noise":
        if seed is None:
            base = int(lv.volume.meta.get("synthetic_seed", "0"))
            entropy = [base, CORRUPTION_KINDS.index(kind), int(round(severity * 1e6))]
            rng = np.random.default_rng(np.random.SeedSequence(entropy))
        else:
            rng = np.random.default_rng(seed)
        out = data + severity * data.std() * rng.standard_normal(data.shape)
    elif kind == "blur":
        reps = int(math.floor(severity + 0.5))  # round half up, not banker's
        out = data
        for _ in range(reps):
            out = uniform_filter(out, size=3, mode="nearest")
    else:
        out = data + severity * np.roll(data, GHOST_SHIFT, axis=0)
    meta = dict(lv.volume.meta)
    meta["corruption"] = f"{kind}:{severity:g}"
    return LabeledVolume(
        volume=Volume(out.astype(np.float32), meta=meta),
        labels=lv.labels.copy(),
        quality_label="bad",
    )


# -- SVOL container ------------------------------------------------------

SVOL_MAGIC = b"SVOL1"
_DTYPE_TAGS = {0: "<f4", 1: "<i4"}
_KIND_CODES = {"intensity": 0, "labels": 1, "probability": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


def write_svol(path, array: np.ndarray, kind: str, meta: dict[str, str] | None = None):
    """Write one volume; intensity/probability as float32, labels as int32."""
    if kind not in _KIND_CODES:
        raise DataError(f"write_svol: unknown payload kind {kind!r}")
    array = np.asarray(array)
    if kind == "probability":
        if array.ndim != 4:
            raise DataError(f"write_svol: probability payload must be (C, D, H, W), got {array.shape}")
        dims = array.shape[1:]
        wire = array.astype("<f4")
        tag = 0
    elif kind == "labels":
        if array.ndim != 3:
            raise DataError(f"write_svol: labels payload must be (D, H, W), got {array.shape}")
        dims = array.shape
        wire = array.astype("<i4")
        tag = 1
    else:
        if array.ndim != 3:
            raise DataError(f"write_svol: intensity payload must be (D, H, W), got {array.shape}")
        dims = array.shape
        wire = array.astype("<f4")
        tag = 0
    meta = meta or {}
    lines = []
    for key, value in meta.items():
        if "\n" in key or "\n" in str(value) or "=" in key:
            raise DataError(f"write_svol: metadata key/value {key!r} not encodable")
        lines.append(f"{key}={value}\n")
    meta_block = "".join(lines).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(SVOL_MAGIC)
        fh.write(struct.pack("<3I", *dims))
        fh.write(struct.pack("<BB", tag, _KIND_CODES[kind]))
        if kind == "probability":
            fh.write(struct.pack("<I", array.shape[0]))
        fh.write(struct.pack("<I", len(meta_block)))
        fh.write(meta_block)
        fh.write(wire.tobytes())  # C order: W (x) fastest


def read_svol(path) -> tuple[np.ndarray, str, dict[str, str]]:
    """Read a volume back as (array, kind, meta); inverse of :func:`write_svol`."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:5] != SVOL_MAGIC:
        raise DataError(f"read_svol: {path.name}: bad magic {raw[:5]!r}")
    off = 5
    dims = struct.unpack_from("<3I", raw, off)
    off += 12
    tag, kind_code = struct.unpack_from("<BB", raw, off)
    off += 2
    if tag not in _DTYPE_TAGS:
        raise DataError(f"read_svol: {path.name}: unknown dtype tag {tag}")
    if kind_code not in _KIND_NAMES:
        raise DataError(f"read_svol: {path.name}: unknown payload kind {kind_code}")
    kind = _KIND_NAMES[kind_code]
    shape: tuple[int, ...] = dims
    if kind == "probability":
        (n_classes,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = (n_classes,) + dims
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta: dict[str, str] = {}
    for line in raw[off : off + meta_len].decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value
    off += meta_len
    count = int(np.prod(shape))
    expected = count * 4
    if len(raw) - off != expected:
        raise DataError(
            f"read_svol: {path.name}: payload holds {len(raw) - off} bytes, expected {expected}"
        )
    arr = np.frombuffer(raw, dtype=_DTYPE_TAGS[tag], count=count, offset=off).reshape(shape)
    return arr.astype(arr.dtype.newbyteorder("=")), kind, meta
