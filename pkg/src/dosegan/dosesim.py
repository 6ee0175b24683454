"""Synthetic phantoms, count-thinning dose reduction and the on-disk dataset.

Dataset directory layout::

    manifest               JSON text, see DatasetManifest
    vol_<id>_s.raw         standard-dose volume
    vol_<id>_l<drf>.raw    low-dose volume at one dose reduction factor

Volumes are little-endian float32 in [N=1, C=1, D, H, W] order (W fastest).
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .rng import Rng

DRF_LEVELS: tuple[int, ...] = (4, 10, 20, 50, 100)
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest"
SPLITS = ("train", "val", "test")
_RAW_DTYPE = np.dtype("<f4")


class DatasetError(Exception):
    """Malformed or inconsistent dataset directory."""


class DatasetVersionError(DatasetError):
    pass


def drf_class(drf: int) -> int:
    try:
        return DRF_LEVELS.index(int(drf))
    except ValueError:
        raise ValueError(f"dose reduction factor must be one of {DRF_LEVELS}, got {drf}") from None


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and uptake of a torso-like phantom.

    Ellipsoid semi-axes are fractions of the extent; lesion radii are voxels.
    """

    extent: int = 32
    body_center_jitter: float = 0.03
    body_semi_axes: tuple[float, float, float] = (0.44, 0.30, 0.38)
    body_axis_jitter: float = 0.04
    base_uptake: float = 1.0
    organ_count: int = 3
    organ_semi_axis_range: tuple[float, float] = (0.06, 0.13)
    organ_uptake_range: tuple[float, float] = (1.5, 4.0)
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_radius_range: tuple[float, float] = (1.5, 3.0)
    lesion_uptake: float = 6.0
    smoothing_sigma: float = 0.8

    def __post_init__(self):
        for name in ("body_semi_axes", "organ_semi_axis_range", "organ_uptake_range",
                     "lesion_count_range", "lesion_radius_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def validate(self) -> "PhantomSpec":
        if self.extent <= 0 or self.extent % 32:
            raise ValueError(f"extent must be a positive multiple of 32, got {self.extent}")
        if min(self.body_semi_axes) <= 0:
            raise ValueError("degenerate body geometry: semi-axes must be positive")
        lo, hi = self.organ_semi_axis_range
        if self.organ_count and not 0 < lo <= hi:
            raise ValueError("degenerate organ geometry: semi-axis range must be positive")
        if self.base_uptake <= 0 or self.lesion_uptake <= 0 or min(self.organ_uptake_range) <= 0:
            raise ValueError("uptakes must be positive")
        if self.organ_count < 0 or not 0 <= self.lesion_count_range[0] <= self.lesion_count_range[1]:
            raise ValueError("counts must be non-negative and ranges ordered")
        rlo, rhi = self.lesion_radius_range
        if not 0 < rlo <= rhi:
            raise ValueError("lesion radius range must be positive and ordered")
        if self.smoothing_sigma < 0:
            raise ValueError("smoothing_sigma must be >= 0")
        return self

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class Phantom:
    volume: np.ndarray
    body_mask: np.ndarray
    lesion_mask: np.ndarray
    lesion_radii: list[float] = field(default_factory=list)


def _grid(extent: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return np.meshgrid(*(np.arange(extent, dtype=np.float64),) * 3, indexing="ij")


def _ellipsoid(grid, center, semi_axes) -> np.ndarray:
    z, y, x = grid
    r = ((z - center[0]) / semi_axes[0]) ** 2 + ((y - center[1]) / semi_axes[1]) ** 2 \
        + ((x - center[2]) / semi_axes[2]) ** 2
    return r <= 1.0


def generate_phantom(spec: PhantomSpec, rng: Rng) -> Phantom:
    """Render one phantom: body ellipsoid, organ ellipsoids, spherical lesions, light blur."""
    spec.validate()
    e = spec.extent
    grid = _grid(e)
    mid = (e - 1) / 2
    center = mid + rng.uniform(-1, 1, 3) * spec.body_center_jitter * e
    axes = (np.array(spec.body_semi_axes) + rng.uniform(-1, 1, 3) * spec.body_axis_jitter) * e
    axes = np.maximum(axes, 1.0)
    body = _ellipsoid(grid, center, axes)
    vol = body * spec.base_uptake

    lo, hi = spec.organ_semi_axis_range
    for _ in range(spec.organ_count):
        o_axes = rng.uniform(lo, hi, 3) * e
        # organ centres lie well inside the body
        direction = rng.normal(size=3)
        direction /= max(np.linalg.norm(direction), 1e-12)
        o_center = center + direction * rng.uniform(0, 0.5) * axes
        organ = _ellipsoid(grid, o_center, o_axes) & body
        vol = np.where(organ, spec.base_uptake * rng.uniform(*spec.organ_uptake_range), vol)

    n_lesions = int(rng.integers(spec.lesion_count_range[0], spec.lesion_count_range[1] + 1))
    lesion_mask = np.zeros((e, e, e), dtype=bool)
    inner = _ellipsoid(grid, center, axes * 0.7)
    candidates = np.argwhere(inner)
    placed: list[tuple[np.ndarray, float]] = []
    z, y, x = grid
    for _ in range(n_lesions):
        radius = float(rng.uniform(*spec.lesion_radius_range))
        for _attempt in range(100):
            c = candidates[int(rng.integers(0, len(candidates)))].astype(np.float64)
            if all(np.linalg.norm(c - pc) >= radius + pr + 1 for pc, pr in placed):
                break
        else:
            continue
        placed.append((c, radius))
        lesion_mask |= (z - c[0]) ** 2 + (y - c[1]) ** 2 + (x - c[2]) ** 2 <= radius**2
    vol = np.where(lesion_mask, spec.base_uptake * spec.lesion_uptake, vol)

    if spec.smoothing_sigma > 0:
        vol = ndimage.gaussian_filter(vol, spec.smoothing_sigma, mode="constant", cval=0.0)
    vol = np.maximum(vol, 0.0).astype(np.float32)
    return Phantom(vol, body, lesion_mask, [r for _, r in placed])


def simulate_low_dose(y_s: np.ndarray, drf: int, rng: Rng, kappa: float = 1000.0) -> np.ndarray:
    """Count-thinned low-dose volume with the same expectation as ``y_s``.

    Each voxel draws Poisson(y_s * kappa / drf) counts, rescaled by drf / kappa.
    """
    drf_class(drf)
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    y = np.asarray(y_s, dtype=np.float64)
    if (y < 0).any():
        raise ValueError("standard-dose volume has negative voxels")
    counts = rng.poisson(y * (kappa / drf))
    return (counts * (drf / kappa)).astype(np.float32)


def normalize(volume: np.ndarray, max_value: float) -> np.ndarray:
    """Scale to [0, 1] by the dataset's global maximum, clamping outliers."""
    if not max_value > 0:
        raise ValueError(f"normalization max must be positive, got {max_value}")
    return np.clip(np.asarray(volume, dtype=np.float32) / np.float32(max_value), 0.0, 1.0)


def denormalize(volume: np.ndarray, max_value: float) -> np.ndarray:
    if not max_value > 0:
        raise ValueError(f"normalization max must be positive, got {max_value}")
    return np.asarray(volume, dtype=np.float32) * np.float32(max_value)


# ----------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class ManifestEntry:
    file: str
    kind: str  # "s" standard dose, "l" low dose
    volume_id: int
    drf: int | None
    seed: int
    split: str


@dataclass
class DatasetManifest:
    extent: int
    norm_max: float
    kappa: float
    entries: list[ManifestEntry]
    version: int = FORMAT_VERSION
    phantom: dict | None = None

    def to_json(self) -> str:
        doc = {
            "format": "dosegan-dataset",
            "version": self.version,
            "extent": self.extent,
            "norm_max": self.norm_max,
            "kappa": self.kappa,
            "phantom": self.phantom,
            "entries": [asdict(e) for e in self.entries],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        if doc.get("format") != "dosegan-dataset":
            raise DatasetError("not a dataset manifest")
        if doc.get("version") != FORMAT_VERSION:
            raise DatasetVersionError(f"manifest version {doc.get('version')} != supported {FORMAT_VERSION}")
        return cls(
            extent=int(doc["extent"]),
            norm_max=float(doc["norm_max"]),
            kappa=float(doc["kappa"]),
            entries=[ManifestEntry(**e) for e in doc["entries"]],
            version=doc["version"],
            phantom=doc.get("phantom"),
        )

    def validate(self) -> None:
        names = [e.file for e in self.entries]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise DatasetError(f"duplicate file names in manifest: {dup[:3]}")
        for e in self.entries:
            if e.split not in SPLITS:
                raise DatasetError(f"{e.file}: unknown split {e.split!r}")
            if e.kind == "l":
                drf_class(e.drf)
            elif e.kind != "s":
                raise DatasetError(f"{e.file}: unknown kind {e.kind!r}")


@dataclass
class VolumePair:
    """One low-/standard-dose example in raw (denormalized) units."""

    x: np.ndarray
    y_s: np.ndarray
    y_c: int
    drf_value: int
    seed: int
    volume_id: int
    split: str = "train"


class Dataset:
    def __init__(self, manifest: DatasetManifest, volumes: dict[str, np.ndarray]):
        self.manifest = manifest
        self.volumes = volumes

    def volume_ids(self, split: str) -> list[int]:
        return sorted({e.volume_id for e in self.manifest.entries if e.split == split})

    def pairs(self, split: str, drf: int | None = None) -> list[VolumePair]:
        """All (lPET, sPET) pairs of a split, ordered by volume id then DRF."""
        std = {e.volume_id: e for e in self.manifest.entries if e.kind == "s"}
        out = []
        for e in self.manifest.entries:
            if e.kind != "l" or e.split != split or (drf is not None and e.drf != drf):
                continue
            s = std[e.volume_id]
            out.append(VolumePair(self.volumes[e.file], self.volumes[s.file], drf_class(e.drf),
                                  e.drf, e.seed, e.volume_id, e.split))
        out.sort(key=lambda p: (p.volume_id, p.drf_value))
        return out

    def pair(self, volume_id: int, drf: int) -> VolumePair:
        for p in self.pairs(self._split_of(volume_id), drf):
            if p.volume_id == volume_id:
                return p
        raise KeyError((volume_id, drf))

    def _split_of(self, volume_id: int) -> str:
        for e in self.manifest.entries:
            if e.volume_id == volume_id:
                return e.split
        raise KeyError(volume_id)


def generate_dataset(
    spec: PhantomSpec,
    seed: int,
    split_plan: dict[str, int] | None = None,
    kappa: float = 1000.0,
    drfs: tuple[int, ...] = DRF_LEVELS,
) -> Dataset:
    """Phantoms for every split, each with one low-dose copy per DRF."""
    spec.validate()
    plan = {"train": 64, "val": 16, "test": 16} if split_plan is None else dict(split_plan)
    root = Rng(seed)
    entries: list[ManifestEntry] = []
    volumes: dict[str, np.ndarray] = {}
    vid = 0
    for split in SPLITS:
        for _ in range(plan.get(split, 0)):
            vrng = root.split(f"volume{vid}")
            sp = generate_phantom(spec, vrng.split("phantom")).volume
            name = f"vol_{vid:04d}_s.raw"
            volumes[name] = sp
            entries.append(ManifestEntry(name, "s", vid, None, seed, split))
            for d in drfs:
                lname = f"vol_{vid:04d}_l{d}.raw"
                volumes[lname] = simulate_low_dose(sp, d, vrng.split(f"drf{d}"), kappa)
                entries.append(ManifestEntry(lname, "l", vid, d, seed, split))
            vid += 1
    if not volumes:
        raise ValueError("split plan produces no volumes")
    norm_max = float(max(v.max() for n, v in volumes.items() if n.endswith("_s.raw")))
    manifest = DatasetManifest(spec.extent, norm_max, float(kappa), entries, phantom=spec.to_dict())
    return Dataset(manifest, volumes)


def write_dataset(dataset: Dataset, directory: str | os.PathLike) -> Path:
    manifest = dataset.manifest
    manifest.validate()
    out = Path(directory)
    out.mkdir(exist_ok=True)
    e = manifest.extent
    for entry in manifest.entries:
        vol = np.asarray(dataset.volumes[entry.file], dtype=_RAW_DTYPE)
        if vol.size != e**3:
            raise DatasetError(f"{entry.file}: volume has {vol.size} voxels, extent {e} needs {e**3}")
        (out / entry.file).write_bytes(vol.tobytes(order="C"))
    (out / MANIFEST_NAME).write_text(manifest.to_json(), encoding="utf-8")
    return out


def read_dataset(directory: str | os.PathLike) -> Dataset:
    root = Path(directory)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no manifest in {root}")
    manifest = DatasetManifest.from_json(path.read_text(encoding="utf-8"))
    manifest.validate()
    e = manifest.extent
    expected = e**3 * _RAW_DTYPE.itemsize
    volumes = {}
    for entry in manifest.entries:
        f = root / entry.file
        if not f.is_file():
            raise FileNotFoundError(f"missing volume file {f}")
        raw = f.read_bytes()
        if len(raw) != expected:
            raise DatasetError(f"size mismatch for {entry.file}: {len(raw)} bytes, expected {expected}")
        volumes[entry.file] = np.frombuffer(raw, dtype=_RAW_DTYPE).reshape(e, e, e).astype(np.float32)
    return Dataset(manifest, volumes)
