"""Seeded synthetic SPECT DaT phantom generator and volume I/O.

Stands in for access-restricted clinical data: a brain ellipsoid at low
uptake, an occipital reference region, and two striatal complexes (caudate
head plus putamen tail forming a crescent). NC subjects get symmetric
full-intensity crescents; PD subjects have the putamen tail depleted on one
or both sides, leaving an oval caudate remnant.

Volumes are written as raw little-endian float32 (x fastest) with a JSON
sidecar carrying extents, voxel size, and provenance.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .filters import gaussian_smooth

LABEL_NC = "NC"
LABEL_PD = "PD"

BACKGROUND_UPTAKE = 1.0


@dataclass(frozen=True)
class Grid:
    extents: tuple[int, int, int]  # (Z, Y, X)
    voxel_mm: tuple[float, float, float]

    @property
    def fov_mm(self) -> tuple[float, float, float]:
        return tuple(n * v for n, v in zip(self.extents, self.voxel_mm))


GRIDS = {
    "full": Grid((91, 109, 91), (2.0, 2.0, 2.0)),
    "half": Grid((46, 55, 46), (4.0, 4.0, 4.0)),
}


def resolve_grid(grid) -> Grid:
    if isinstance(grid, Grid):
        return grid
    if grid not in GRIDS:
        raise ConfigError(f"unknown grid {grid!r}; expected one of {tuple(GRIDS)}")
    return GRIDS[grid]


@dataclass
class Volume:
    """A 3D scalar field with voxel spacing metadata."""

    data: np.ndarray  # (Z, Y, X)
    voxel_mm: tuple[float, float, float]
    meta: dict = field(default_factory=dict)

    @property
    def extents(self) -> tuple[int, ...]:
        return self.data.shape


# ---------------------------------------------------------------------------
# Template geometry, versioned. Offsets are mm from the FOV center per axis
# (z, y, x); the striatum is placed so that it spans transaxial slices 35-48
# on the full grid, where the evaluation window lives. x offsets are given
# for the left structure; the right one is its mirror image.
# ---------------------------------------------------------------------------

TEMPLATE_VERSION = 1

BRAIN_SEMI_MM = (70.0, 90.0, 72.0)
CAUDATE_OFFSET_MM = (-8.0, 25.0, -15.0)
CAUDATE_SEMI_MM = (9.0, 10.0, 7.0)
PUTAMEN_OFFSET_MM = (-8.0, -2.0, -24.0)
PUTAMEN_SEMI_MM = (10.0, 17.0, 8.0)
OCCIPITAL_Z_MM = (-18.0, 2.0)  # box, offsets from center
OCCIPITAL_Y_MM = (-79.0, -55.0)
OCCIPITAL_X_MM = (-20.0, 20.0)


@dataclass(frozen=True)
class StriatalTemplate:
    brain: np.ndarray
    caudate_left: np.ndarray
    caudate_right: np.ndarray
    putamen_left: np.ndarray
    putamen_right: np.ndarray
    occipital: np.ndarray

    @property
    def striatum(self) -> np.ndarray:
        return (
            self.caudate_left | self.caudate_right | self.putamen_left | self.putamen_right
        )


def _axis_centers(grid: Grid):
    return [
        (np.arange(n) + 0.5) * v - 0.5 * n * v  # mm relative to FOV center
        for n, v in zip(grid.extents, grid.voxel_mm)
    ]


def _ellipsoid(coords, offset, semi) -> np.ndarray:
    cz, cy, cx = coords
    zz = ((cz - offset[0]) / semi[0]) ** 2
    yy = ((cy - offset[1]) / semi[1]) ** 2
    xx = ((cx - offset[2]) / semi[2]) ** 2
    return (zz[:, None, None] + yy[None, :, None] + xx[None, None, :]) <= 1.0


def _symmetrized(mask: np.ndarray) -> np.ndarray:
    return mask | np.flip(mask, axis=2)


def striatal_template(grid) -> StriatalTemplate:
    """Boolean structure masks on the given grid; exact mirror pairs in x."""
    g = resolve_grid(grid)
    coords = _axis_centers(g)
    brain = _symmetrized(_ellipsoid(coords, (0.0, 0.0, 0.0), BRAIN_SEMI_MM))
    caudate_left = _ellipsoid(coords, CAUDATE_OFFSET_MM, CAUDATE_SEMI_MM)
    putamen_left = _ellipsoid(coords, PUTAMEN_OFFSET_MM, PUTAMEN_SEMI_MM)
    cz, cy, cx = coords
    occ = (
        ((cz >= OCCIPITAL_Z_MM[0]) & (cz <= OCCIPITAL_Z_MM[1]))[:, None, None]
        & ((cy >= OCCIPITAL_Y_MM[0]) & (cy <= OCCIPITAL_Y_MM[1]))[None, :, None]
        & ((cx >= OCCIPITAL_X_MM[0]) & (cx <= OCCIPITAL_X_MM[1]))[None, None, :]
    )
    t = StriatalTemplate(
        brain=brain,
        caudate_left=caudate_left,
        caudate_right=np.flip(caudate_left, axis=2),
        putamen_left=putamen_left,
        putamen_right=np.flip(putamen_left, axis=2),
        occipital=_symmetrized(occ),
    )
    for name in ("brain", "caudate_left", "putamen_left", "occipital"):
        if not getattr(t, name).any():
            raise ShapeError(
                f"grid extents {g.extents} too small to contain template structure {name!r}"
            )
    return t


@dataclass(frozen=True)
class SubjectParams:
    """Generator parameters for one subject; PD iff any depletion > 0."""

    label: str
    striatal_gain: float
    depletion_left: float
    depletion_right: float
    laterality: str  # none | left | right | both
    noise_seed: int
    noise_level: float
    blur_fwhm_mm: float

    def __post_init__(self):
        depleted = self.depletion_left > 0 or self.depletion_right > 0
        if (self.label == LABEL_PD) != depleted:
            raise ConfigError(
                f"label {self.label} inconsistent with depletions "
                f"({self.depletion_left}, {self.depletion_right})"
            )


@dataclass(frozen=True)
class PhantomConfig:
    cohort_size: int = 607
    class_ratio: tuple[int, int] = (448, 159)  # PD : NC
    grid: str = "full"
    striatal_gain_range: tuple[float, float] = (3.5, 4.5)
    depletion_range: tuple[float, float] = (0.25, 0.6)
    asymmetry_probability: float = 0.5
    noise_level: float = 0.05
    blur_fwhm_mm: float = 8.0
    seed: int = 0

    def __post_init__(self):
        for name in ("striatal_gain_range", "depletion_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"{name} is empty: ({lo}, {hi})")
        if not 0.0 <= self.asymmetry_probability <= 1.0:
            raise ConfigError("asymmetry_probability must be in [0, 1]")
        if self.cohort_size < 2:
            raise ConfigError("cohort_size must be >= 2")

    def class_counts(self) -> tuple[int, int]:
        """(n_pd, n_nc) scaled from the configured ratio."""
        r_pd, r_nc = self.class_ratio
        n_pd = self.cohort_size * r_pd // (r_pd + r_nc)
        return n_pd, self.cohort_size - n_pd


def sample_subject_params(label: str, rng: np.random.Generator, config: PhantomConfig) -> SubjectParams:
    gain = float(rng.uniform(*config.striatal_gain_range))
    d_left = d_right = 0.0
    laterality = "none"
    if label == LABEL_PD:
        d = float(rng.uniform(*config.depletion_range))
        if rng.random() < config.asymmetry_probability:
            laterality = "left" if rng.random() < 0.5 else "right"
            if laterality == "left":
                d_left = d
            else:
                d_right = d
        else:
            laterality = "both"
            d_left = d
            d_right = float(rng.uniform(*config.depletion_range))
    return SubjectParams(
        label=label,
        striatal_gain=gain,
        depletion_left=d_left,
        depletion_right=d_right,
        laterality=laterality,
        noise_seed=int(rng.integers(2**63)),
        noise_level=config.noise_level,
        blur_fwhm_mm=config.blur_fwhm_mm,
    )


def generate_phantom(
    params: SubjectParams, grid="full", return_prenorm: bool = False
):
    """Deterministically synthesize one subject volume.

    Returns (Volume normalized to [0,1], striatal ground-truth mask); with
    return_prenorm also the pre-normalization field for analytic checks.
    """
    g = resolve_grid(grid)
    t = striatal_template(g)
    vol = np.zeros(g.extents, dtype=np.float64)
    vol[t.brain] = BACKGROUND_UPTAKE
    gain = params.striatal_gain
    np.maximum(vol, np.where(t.caudate_left | t.caudate_right, gain, 0.0), out=vol)
    np.maximum(
        vol, np.where(t.putamen_left, gain * (1.0 - params.depletion_left), 0.0), out=vol
    )
    np.maximum(
        vol, np.where(t.putamen_right, gain * (1.0 - params.depletion_right), 0.0), out=vol
    )
    if params.blur_fwhm_mm > 0:
        vol = gaussian_smooth(vol, params.blur_fwhm_mm, g.voxel_mm)
    if params.depletion_left == params.depletion_right:
        # construction is mirror-symmetric; make the noiseless field exactly so
        vol = 0.5 * (vol + np.flip(vol, axis=2))
    if params.noise_level > 0:
        rng = np.random.default_rng(params.noise_seed)
        vol = vol + params.noise_level * np.sqrt(np.maximum(vol, 0.0)) * rng.standard_normal(
            vol.shape
        )
    np.maximum(vol, 0.0, out=vol)
    pre_norm = vol.copy() if return_prenorm else None
    lo, hi = vol.min(), vol.max()
    if hi <= lo:
        raise ShapeError("generated field is constant; template does not fit the grid")
    vol = (vol - lo) / (hi - lo)
    mask = t.striatum
    zs = np.nonzero(mask.any(axis=(1, 2)))[0]
    meta = {
        "template_version": TEMPLATE_VERSION,
        "params": asdict(params),
        "striatal_slices": [int(zs.min()), int(zs.max())],
    }
    volume = Volume(data=vol.astype(np.float32), voxel_mm=g.voxel_mm, meta=meta)
    if return_prenorm:
        return volume, mask, pre_norm
    return volume, mask


# ---------------------------------------------------------------------------
# Volume I/O: <base>.raw (little-endian float32, x fastest) + <base>.json
# ---------------------------------------------------------------------------


def save_volume(volume: Volume, base_path) -> None:
    base = Path(base_path)
    base.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(volume.data, dtype="<f4")
    base.with_suffix(".raw").write_bytes(data.tobytes())
    sidecar = {
        "extents": list(volume.data.shape),
        "voxel_mm": list(volume.voxel_mm),
        "dtype": "float32",
        "order": "zyx-x-fastest",
        "provenance": volume.meta,
    }
    base.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def load_volume(base_path) -> Volume:
    base = Path(base_path)
    sidecar_path = base.with_suffix(".json")
    raw_path = base.with_suffix(".raw")
    if not sidecar_path.exists() or not raw_path.exists():
        raise ConfigError(f"{base}: missing .raw/.json volume pair")
    sidecar = json.loads(sidecar_path.read_text())
    extents = tuple(int(e) for e in sidecar["extents"])
    raw = raw_path.read_bytes()
    expected = int(np.prod(extents)) * 4
    if len(raw) != expected:
        raise ConfigError(
            f"{raw_path}: payload is {len(raw)} bytes, sidecar declares {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(extents).astype(np.float32)
    return Volume(
        data=data,
        voxel_mm=tuple(float(v) for v in sidecar["voxel_mm"]),
        meta=sidecar.get("provenance", {}),
    )


def import_external(base_path) -> Volume:
    """Load an externally produced raw+sidecar volume and min-max normalize it."""
    vol = load_volume(base_path)
    lo, hi = float(vol.data.min()), float(vol.data.max())
    if hi <= lo:
        raise ConfigError(f"{base_path}: constant volume cannot be normalized")
    vol.data = ((vol.data - lo) / (hi - lo)).astype(np.float32)
    vol.meta = dict(vol.meta, normalized="minmax-unit")
    return vol


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    label: str
    volume: str  # path base relative to the cohort dir
    mask: str | None
    params: SubjectParams


def build_cohort(config: PhantomConfig, out_dir, save_masks: bool = True):
    """Generate the full cohort deterministically and write its manifest.

    Each subject derives an independent substream from (seed, subject index),
    so generation order (or parallelism) cannot change the data.
    """
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    if save_masks:
        (out / "masks").mkdir(parents=True, exist_ok=True)
    n_pd, n_nc = config.class_counts()
    labels = [LABEL_PD] * n_pd + [LABEL_NC] * n_nc
    order_rng = np.random.default_rng((config.seed, 0xC0))
    order_rng.shuffle(labels)
    grid = resolve_grid(config.grid)
    records: list[SubjectRecord] = []
    for i, label in enumerate(labels):
        sid = f"s{i:04d}"
        rng = np.random.default_rng((config.seed, i))
        params = sample_subject_params(label, rng, config)
        volume, mask = generate_phantom(params, grid)
        vol_base = f"volumes/{sid}"
        save_volume(volume, out / vol_base)
        mask_base = None
        if save_masks:
            mask_base = f"masks/{sid}"
            save_volume(
                Volume(
                    data=mask.astype(np.float32),
                    voxel_mm=grid.voxel_mm,
                    meta={"kind": "striatal-ground-truth", "subject_id": sid},
                ),
                out / mask_base,
            )
        records.append(
            SubjectRecord(subject_id=sid, label=label, volume=vol_base, mask=mask_base, params=params)
        )
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for r in records:
            fh.write(json.dumps(
                {
                    "subject_id": r.subject_id,
                    "label": r.label,
                    "volume": r.volume,
                    "mask": r.mask,
                    "params": asdict(r.params),
                },
                sort_keys=True,
            ) + "\n")
    return records


def load_cohort(cohort_dir) -> list[SubjectRecord]:
    manifest = Path(cohort_dir) / "manifest.jsonl"
    if not manifest.exists():
        raise ConfigError(f"{manifest}: cohort manifest not found")
    records = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        records.append(
            SubjectRecord(
                subject_id=d["subject_id"],
                label=d["label"],
                volume=d["volume"],
                mask=d.get("mask"),
                params=SubjectParams(**d["params"]),
            )
        )
    return records
