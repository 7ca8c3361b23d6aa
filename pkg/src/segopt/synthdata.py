"""Synthetic nested-region dataset generator and on-disk format.

Each case is a 2-D or 3-D grid holding three concentric ellipsoids
painted over background 0: the outer shell is label 2 (edema), the middle
label 3 (non-enhancing core) and the innermost label 1 (enhancing tumor),
so the evaluation regions nest as ET ⊆ TC ⊆ WT by construction.  A
configurable fraction of cases omits the innermost region entirely,
mimicking datasets where some cases have no enhancing tumor.

Per-voxel features are a per-class intensity template plus Gaussian noise.
Subgroups differ by template contrast; giving a rare subgroup a smaller
contrast makes it systematically harder, which is the lever the
distributionally robust training demo exploits.  With zero noise the
labels are exactly recoverable by nearest-template classification.

On disk a dataset is a JSON manifest plus two raw flat files per case:
features as little-endian float32, labels as uint8.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .losses import LabelMap
from .numerics import Rng, require_finite

__all__ = [
    "MANIFEST_VERSION",
    "MANIFEST_NAME",
    "NUM_CLASSES",
    "FEATURE_WIDTH",
    "SynthConfig",
    "Case",
    "CaseEntry",
    "DatasetManifest",
    "templates_for",
    "generate",
    "read_manifest",
    "load",
]

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
NUM_CLASSES = 4
FEATURE_WIDTH = 4  # one channel per class template

# Default contrast for subgroups beyond the first; small enough to be
# measurably harder under noise, large enough to stay learnable.
DEFAULT_MINOR_CONTRAST = 0.6


@dataclass
class Case:
    """One training/evaluation case: per-voxel features plus its label map.

    The subgroup tag is carried through for reporting only; nothing in
    training may condition on it.
    """

    case_id: str
    features: np.ndarray  # [V, F] float64
    labels: LabelMap
    subgroup: str = ""

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, dtype=np.float64)
        if f.ndim != 2:
            raise ValueError(f"features must be [V, F], got shape {f.shape}")
        require_finite(f, f"features of case {self.case_id!r}")
        if f.shape[0] != self.labels.num_voxels:
            raise ValueError(
                f"case {self.case_id!r}: {f.shape[0]} feature rows vs "
                f"{self.labels.num_voxels} labels"
            )
        self.features = f

    @property
    def num_voxels(self) -> int:
        return self.labels.num_voxels


@dataclass
class SynthConfig:
    grid: tuple[int, ...]
    subgroup_cases: dict  # subgroup name -> case count
    sigma: float = 0.3
    no_et_fraction: float = 0.0
    seed: int = 0
    spacing_mm: tuple[float, ...] | None = None
    subgroup_contrast: dict | None = None  # name -> contrast; defaults applied

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if len(self.grid) not in (2, 3):
            raise ValueError(f"grid must be 2-D or 3-D, got {len(self.grid)} axes")
        if any(not 1 <= g <= 32 for g in self.grid):
            raise ValueError(f"grid extents must lie in [1, 32], got {self.grid}")
        if not self.subgroup_cases:
            raise ValueError("at least one subgroup is required")
        for name, count in self.subgroup_cases.items():
            if not name:
                raise ValueError("subgroup names must be nonempty")
            if count < 0:
                raise ValueError(f"subgroup {name!r} has negative case count {count}")
        if sum(self.subgroup_cases.values()) < 1:
            raise ValueError("total case count must be >= 1")
        if not self.sigma >= 0:
            raise ValueError(f"noise level must be >= 0, got {self.sigma}")
        if not 0.0 <= self.no_et_fraction <= 1.0:
            raise ValueError(f"no-ET fraction must lie in [0, 1], got {self.no_et_fraction}")
        if self.spacing_mm is None:
            self.spacing_mm = (1.0,) * len(self.grid)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != len(self.grid):
            raise ValueError("spacing must have one entry per grid axis")
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing must be positive, got {self.spacing_mm}")

    def contrasts(self) -> dict:
        """Per-subgroup template contrast; first subgroup 1.0, later ones
        shrunken unless overridden."""
        out = {}
        for i, name in enumerate(self.subgroup_cases):
            out[name] = 1.0 if i == 0 else DEFAULT_MINOR_CONTRAST
        if self.subgroup_contrast:
            for name, value in self.subgroup_contrast.items():
                if name not in out:
                    raise ValueError(f"contrast given for unknown subgroup {name!r}")
                if not value > 0:
                    raise ValueError(f"contrast for {name!r} must be positive, got {value}")
                out[name] = float(value)
        return out


@dataclass
class CaseEntry:
    case_id: str
    subgroup: str
    feature_file: str
    label_file: str
    grid: tuple[int, ...]


@dataclass
class DatasetManifest:
    version: int
    num_classes: int
    feature_width: int
    spacing_mm: tuple[float, ...]
    cases: list = field(default_factory=list)
    root: str = ""  # directory the file names are relative to

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "num_classes": self.num_classes,
            "feature_width": self.feature_width,
            "spacing_mm": list(self.spacing_mm),
            "cases": [
                {
                    "id": c.case_id,
                    "subgroup": c.subgroup,
                    "features": c.feature_file,
                    "labels": c.label_file,
                    "grid": list(c.grid),
                }
                for c in self.cases
            ],
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def templates_for(contrast: float) -> np.ndarray:
    """Per-class intensity templates, one feature channel per class.

    At full contrast row l is exactly e_l.  Reduced contrast shrinks the
    separation between templates and bleeds the lost signal into the next
    channel, the way a weaker acquisition both dims and smears.  The bled
    mass is what makes a low-contrast subgroup systematically harder
    rather than merely noisier: a model fit to full-contrast cases reads
    the bled channel as evidence for the wrong class, a mistake that
    reweighting the fit can actually repair.
    """
    eye = np.eye(NUM_CLASSES, FEATURE_WIDTH)
    return contrast * eye + (1.0 - contrast) * np.roll(eye, 1, axis=1)


def _paint_ellipsoid(labels_grid: np.ndarray, center, semi_axes, value: int) -> None:
    coords = np.ogrid[tuple(slice(0, s) for s in labels_grid.shape)]
    q = sum(((c - mu) / r) ** 2 for c, mu, r in zip(coords, center, semi_axes))
    labels_grid[q <= 1.0] = value


def _case_labels(grid: tuple, rng: Rng, with_et: bool) -> np.ndarray:
    ndim = len(grid)
    # Same center for all shells guarantees geometric nesting; per-axis
    # radius ratios keep the boundaries non-spherical.
    center = [g / 2.0 + (rng.uniform(1)[0] - 0.5) * g / 3.0 for g in grid]
    wt = [(0.55 + 0.30 * rng.uniform(1)[0]) * g / 2.0 for g in grid]
    tc = [(0.55 + 0.20 * rng.uniform(1)[0]) * r for r in wt]
    et = [(0.50 + 0.20 * rng.uniform(1)[0]) * r for r in tc]
    if min(et) < 0.5:
        raise ValueError(
            f"grid {grid} is too small to hold three nested regions"
        )
    labels_grid = np.zeros(grid, dtype=np.int64)
    _paint_ellipsoid(labels_grid, center, wt, 2)
    _paint_ellipsoid(labels_grid, center, tc, 3)
    if with_et:
        _paint_ellipsoid(labels_grid, center, et, 1)
    return labels_grid.reshape(-1)


def generate(config: SynthConfig, out_dir) -> DatasetManifest:
    """Write a dataset under out_dir and return its manifest.

    Deterministic: the same config (seed included) produces byte-identical
    files.  The no-ET fraction is applied per subgroup by rounding, with
    the affected cases chosen by the seeded RNG.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = Rng(config.seed)
    contrasts = config.contrasts()
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        num_classes=NUM_CLASSES,
        feature_width=FEATURE_WIDTH,
        spacing_mm=config.spacing_mm,
        root=str(out_dir),
    )
    for name, count in config.subgroup_cases.items():
        templates = templates_for(contrasts[name])
        n_no_et = int(round(config.no_et_fraction * count))
        no_et = np.zeros(count, dtype=bool)
        no_et[rng.permutation(count)[:n_no_et]] = True
        for idx in range(count):
            case_id = f"{name}_{idx:03d}"
            labels = _case_labels(config.grid, rng, with_et=not no_et[idx])
            noise = rng.normal((labels.size, FEATURE_WIDTH), scale=config.sigma)
            features = templates[labels] + noise
            feat_name = f"{case_id}_features.f32"
            lab_name = f"{case_id}_labels.u8"
            features.astype("<f4").tofile(os.path.join(out_dir, feat_name))
            labels.astype(np.uint8).tofile(os.path.join(out_dir, lab_name))
            manifest.cases.append(CaseEntry(case_id, name, feat_name, lab_name, config.grid))
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        fh.write(manifest.to_json())
    return manifest


def _require_keys(doc: dict, keys, where: str) -> None:
    missing = [k for k in keys if k not in doc]
    if missing:
        raise ValueError(f"{where} is missing required fields {missing}")


def read_manifest(manifest_path) -> DatasetManifest:
    """Parse and validate a manifest file without touching the case files."""
    manifest_path = str(manifest_path)
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    with open(manifest_path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValueError(f"manifest {manifest_path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ValueError(f"manifest {manifest_path} is not a JSON object")
    _require_keys(doc, ("version", "num_classes", "feature_width", "spacing_mm", "cases"),
                  f"manifest {manifest_path}")
    if doc["version"] != MANIFEST_VERSION:
        raise ValueError(
            f"unsupported manifest version {doc['version']!r}, expected {MANIFEST_VERSION}"
        )
    manifest = DatasetManifest(
        version=int(doc["version"]),
        num_classes=int(doc["num_classes"]),
        feature_width=int(doc["feature_width"]),
        spacing_mm=tuple(float(s) for s in doc["spacing_mm"]),
        root=os.path.dirname(manifest_path),
    )
    for entry in doc["cases"]:
        _require_keys(entry, ("id", "subgroup", "features", "labels", "grid"),
                      f"case entry in {manifest_path}")
        manifest.cases.append(CaseEntry(
            case_id=str(entry["id"]),
            subgroup=str(entry["subgroup"]),
            feature_file=str(entry["features"]),
            label_file=str(entry["labels"]),
            grid=tuple(int(g) for g in entry["grid"]),
        ))
    return manifest


def load(manifest_path) -> list:
    """Read a dataset back as a list of cases, validating sizes on the way."""
    manifest = read_manifest(manifest_path)
    root = manifest.root
    num_classes = manifest.num_classes
    feature_width = manifest.feature_width
    cases = []
    for entry in manifest.cases:
        grid = entry.grid
        n_vox = int(np.prod(grid))
        feat_path = os.path.join(root, entry.feature_file)
        lab_path = os.path.join(root, entry.label_file)
        for path in (feat_path, lab_path):
            if not os.path.exists(path):
                raise FileNotFoundError(f"case file not found: {path}")
        expected = n_vox * feature_width * 4
        actual = os.path.getsize(feat_path)
        if actual != expected:
            raise ValueError(
                f"size mismatch in {feat_path}: {actual} bytes, expected {expected}"
            )
        if os.path.getsize(lab_path) != n_vox:
            raise ValueError(
                f"size mismatch in {lab_path}: {os.path.getsize(lab_path)} bytes, "
                f"expected {n_vox}"
            )
        features = np.fromfile(feat_path, dtype="<f4").astype(np.float64)
        labels = np.fromfile(lab_path, dtype=np.uint8).astype(np.int64)
        cases.append(Case(
            case_id=entry.case_id,
            features=features.reshape(n_vox, feature_width),
            labels=LabelMap(labels, num_classes, grid),
            subgroup=entry.subgroup,
        ))
    return cases
