"""Synthetic phantoms, rasterization, measurement noise, and datasets.

Phantoms are collections of 1 to 4 low-conductivity inclusions inside the
unit disk.  Convex families (circle, triangle, square) appear in groups of
2 to 4; concave families (five-pointed star, L, T, V) appear alone.  Images
follow the time-difference convention: pixel values are the conductivity
change from the homogeneous background, so background pixels are exactly 0
and inclusions sit near inclusion_sigma - background_sigma.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path as FsPath

import numpy as np
from matplotlib.path import Path as PolyPath
from scipy.spatial import cKDTree

from .errors import ContractError, GenerationError
from .fem import (
    KIND_DIFFERENCE,
    ForwardSolver,
    MeasurementFrame,
    StimulationProtocol,
    time_difference,
)
from .mesh import Mesh, build_disk_mesh

BACKGROUND_SIGMA = 0.6
INCLUSION_SIGMA = 0.003

CONVEX_FAMILIES = ("circle", "triangle", "square")
CONCAVE_FAMILIES = ("star5", "L", "T", "V")

# (family, inclusion count) pairs covered by the generators
SETTINGS: tuple[tuple[str, int], ...] = tuple(
    [(f, n) for f in CONVEX_FAMILIES for n in (2, 3, 4)]
    + [(f, 1) for f in CONCAVE_FAMILIES]
)

# rotations are sampled over one fundamental domain of each family's symmetry
ROTATION_RANGE = {
    "circle": 0.0,
    "triangle": 2.0 * np.pi / 3.0,
    "square": np.pi / 2.0,
    "star5": 2.0 * np.pi / 5.0,
    "L": 2.0 * np.pi,
    "T": 2.0 * np.pi,
    "V": 2.0 * np.pi,
}

CONTAINMENT_MARGIN = 0.05  # clearance to the boundary, in domain radii


def _polygon_centroid(verts: np.ndarray) -> tuple[np.ndarray, float]:
    x, y = verts[:, 0], verts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return np.array([cx, cy]), area


def _canonical(verts_raw) -> np.ndarray:
    """Center a polygon at its area centroid and scale max radius to 1."""
    verts = np.asarray(verts_raw, dtype=np.float64)
    centroid, area = _polygon_centroid(verts)
    if area < 0:
        verts = verts[::-1]
    verts = verts - centroid
    return verts / np.linalg.norm(verts, axis=1).max()


def _star5_vertices() -> np.ndarray:
    angles = np.pi / 2 + np.arange(10) * (np.pi / 5)
    radii = np.where(np.arange(10) % 2 == 0, 1.0, 0.382)
    return np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])


UNIT_POLYGONS: dict[str, np.ndarray] = {
    "triangle": _canonical(
        [(0.0, 1.0), (-np.sqrt(3) / 2, -0.5), (np.sqrt(3) / 2, -0.5)]
    ),
    "square": _canonical(
        [(2**-0.5, 2**-0.5), (-(2**-0.5), 2**-0.5),
         (-(2**-0.5), -(2**-0.5)), (2**-0.5, -(2**-0.5))]
    ),
    "star5": _canonical(_star5_vertices()),
    "L": _canonical([(0, 0), (2, 0), (2, 1), (1, 1), (1, 2), (0, 2)]),
    "T": _canonical(
        [(0, 3), (0, 2), (1, 2), (1, 0), (2, 0), (2, 2), (3, 2), (3, 3)]
    ),
    "V": _canonical(
        [(1.0, 0.0), (2.0, 2.0), (1.55, 2.0), (1.0, 0.72), (0.45, 2.0), (0.0, 2.0)]
    ),
}


@dataclass(frozen=True)
class Shape:
    """One inclusion: a canonical unit outline, scaled/rotated/translated."""

    family: str
    center: tuple[float, float]
    scale: float
    rotation: float = 0.0

    def __post_init__(self):
        if self.family not in CONVEX_FAMILIES + CONCAVE_FAMILIES:
            raise ContractError(f"unknown shape family {self.family!r}")
        if self.scale <= 0:
            raise ContractError("shape scale must be > 0")

    def polygon(self) -> np.ndarray | None:
        """Transformed vertices, or None for circles."""
        if self.family == "circle":
            return None
        unit = UNIT_POLYGONS[self.family]
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        return self.scale * (unit @ rot.T) + np.asarray(self.center)

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.family == "circle":
            d = points - np.asarray(self.center)
            return (d * d).sum(axis=1) <= self.scale**2
        return PolyPath(self.polygon()).contains_points(points)

    @property
    def bounding_radius(self) -> float:
        # canonical outlines have max vertex radius 1, so this covers both cases
        return self.scale

    def max_extent(self) -> float:
        """Distance from the origin to the farthest point of the shape."""
        if self.family == "circle":
            return float(np.linalg.norm(self.center)) + self.scale
        return float(np.linalg.norm(self.polygon(), axis=1).max())


@dataclass(frozen=True)
class Phantom:
    shapes: tuple[Shape, ...]
    background_sigma: float = BACKGROUND_SIGMA
    inclusion_sigma: float = INCLUSION_SIGMA

    def __post_init__(self):
        if len(self.shapes) > 4:
            raise ContractError("phantoms carry at most 4 inclusions")

    @property
    def delta_sigma(self) -> float:
        return self.inclusion_sigma - self.background_sigma

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        inside = np.zeros(len(points), dtype=bool)
        for shape in self.shapes:
            inside |= shape.contains(points)
        return inside

    def to_json_dict(self) -> dict:
        return {
            "shapes": [
                {
                    "family": s.family,
                    "center": [s.center[0], s.center[1]],
                    "scale": s.scale,
                    "rotation": s.rotation,
                }
                for s in self.shapes
            ],
            "background_sigma": self.background_sigma,
            "inclusion_sigma": self.inclusion_sigma,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "Phantom":
        return Phantom(
            shapes=tuple(
                Shape(s["family"], tuple(s["center"]), s["scale"], s["rotation"])
                for s in d["shapes"]
            ),
            background_sigma=d["background_sigma"],
            inclusion_sigma=d["inclusion_sigma"],
        )


def _scale_range(family: str, count: int) -> tuple[float, float]:
    if family in CONCAVE_FAMILIES:
        return (0.3, 0.5)
    # smaller inclusions when more must fit
    return (0.15, 0.3) if count <= 3 else (0.12, 0.25)


def sample_phantom(
    setting: tuple[str, int],
    rng: np.random.Generator,
    max_restarts: int = 100,
    max_tries_per_shape: int = 100,
) -> Phantom:
    """Draw one phantom for a (family, count) setting.

    Shapes are placed sequentially; the center radius is capped so every
    vertex keeps the containment margin, and bounding circles must be
    disjoint, which guarantees pairwise non-overlap.
    """
    family, count = setting
    if setting not in SETTINGS:
        raise ContractError(f"setting {setting!r} is not one of {len(SETTINGS)}")

    rot_range = ROTATION_RANGE[family]
    lo, hi = _scale_range(family, count)
    for _ in range(max_restarts):
        placed: list[Shape] = []
        ok = True
        for _ in range(count):
            for _ in range(max_tries_per_shape):
                scale = rng.uniform(lo, hi)
                rotation = rng.uniform(0.0, rot_range) if rot_range > 0 else 0.0
                r_max = 1.0 - CONTAINMENT_MARGIN - scale
                r = r_max * np.sqrt(rng.uniform())
                theta = rng.uniform(0.0, 2.0 * np.pi)
                cand = Shape(
                    family=family,
                    center=(r * np.cos(theta), r * np.sin(theta)),
                    scale=scale,
                    rotation=rotation,
                )
                if all(
                    np.hypot(
                        cand.center[0] - p.center[0], cand.center[1] - p.center[1]
                    )
                    >= cand.bounding_radius + p.bounding_radius
                    for p in placed
                ):
                    placed.append(cand)
                    break
            else:
                ok = False
                break
        if ok:
            return Phantom(shapes=tuple(placed))
    raise GenerationError(
        f"could not place {count} {family} shapes within the retry budget"
    )


def phantom_to_field(phantom: Phantom, mesh: Mesh) -> np.ndarray:
    """Per-element absolute conductivity: inclusion value inside shapes."""
    sigma = np.full(mesh.n_elements, phantom.background_sigma)
    inside = phantom.contains(mesh.element_centroids())
    sigma[inside] = phantom.inclusion_sigma
    return sigma


def homogeneous_field(mesh: Mesh, background: float = BACKGROUND_SIGMA) -> np.ndarray:
    return np.full(mesh.n_elements, background)


# ---------------------------------------------------------------------------
# pixel images


@dataclass
class PixelImage:
    """Square image of time-difference conductivity; 0 outside the disk."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ContractError("images must be square 2-D arrays")
        if self.mask.shape != self.values.shape:
            raise ContractError("mask shape differs from image shape")

    @property
    def grid(self) -> int:
        return self.values.shape[0]


def pixel_centers(grid: int, radius: float = 1.0) -> np.ndarray:
    """(grid, grid, 2) physical coordinates; row 0 is the top of the image."""
    if grid < 8:
        raise ContractError("grid must be at least 8")
    step = 2.0 * radius / grid
    xs = -radius + (np.arange(grid) + 0.5) * step
    ys = radius - (np.arange(grid) + 0.5) * step
    xx, yy = np.meshgrid(xs, ys)
    return np.stack([xx, yy], axis=-1)


def disk_mask(grid: int, radius: float = 1.0) -> np.ndarray:
    pts = pixel_centers(grid, radius)
    return (pts**2).sum(axis=-1) <= radius**2


def rasterize_idw(
    values: np.ndarray,
    mesh: Mesh,
    grid: int,
    k: int = 4,
    power: int = 2,
) -> PixelImage:
    """Inverse-distance interpolation from element centroids to pixels.

    Each in-disk pixel averages its k nearest centroids with weights
    d^-power; a pixel landing exactly on a centroid copies that value.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (mesh.n_elements,):
        raise ContractError("values length does not match element count")
    pts = pixel_centers(grid, mesh.radius)
    mask = disk_mask(grid, mesh.radius)
    flat_pts = pts[mask]
    tree = cKDTree(mesh.element_centroids())
    dist, idx = tree.query(flat_pts, k=min(k, mesh.n_elements))
    dist = dist.reshape(len(flat_pts), -1)
    idx = idx.reshape(len(flat_pts), -1)
    out = np.zeros(len(flat_pts))
    exact = dist[:, 0] == 0.0
    out[exact] = values[idx[exact, 0]]
    rest = ~exact
    w = dist[rest] ** (-float(power))
    out[rest] = (w * values[idx[rest]]).sum(axis=1) / w.sum(axis=1)
    img = np.zeros((grid, grid))
    img[mask] = out
    return PixelImage(img, mask)


def rasterize_truth(phantom: Phantom, grid: int) -> PixelImage:
    """Analytic ground-truth label image: delta-sigma inside shapes, else 0."""
    pts = pixel_centers(grid)
    mask = disk_mask(grid)
    img = np.zeros((grid, grid))
    if phantom.shapes:
        inside = phantom.contains(pts.reshape(-1, 2)).reshape(grid, grid)
        img[inside & mask] = phantom.delta_sigma
    return PixelImage(img, mask)


def add_noise_snr(
    frame: MeasurementFrame, snr_db: float, rng: np.random.Generator
) -> MeasurementFrame:
    """Additive white Gaussian noise at a target signal-to-noise ratio."""
    if np.isposinf(snr_db):
        return MeasurementFrame(frame.values.copy(), kind=frame.kind)
    if not np.isfinite(snr_db):
        raise ContractError("snr_db must be finite or +inf")
    rms_signal = float(np.sqrt(np.mean(frame.values**2)))
    if rms_signal == 0.0:
        raise ContractError("cannot scale noise to an all-zero frame")
    rms_noise = rms_signal * 10.0 ** (-snr_db / 20.0)
    noise = rng.normal(0.0, rms_noise, size=frame.values.shape)
    return MeasurementFrame(frame.values + noise, kind=frame.kind)


# ---------------------------------------------------------------------------
# dataset generation


@dataclass
class DatasetConfig:
    # entries are SETTINGS indices or (family, count) pairs; None = all 13
    settings: tuple | None = None
    per_setting: int = 200
    grid: int = 64
    base_seed: int = 0
    fine_refinement: int = 4
    coarse_refinement: int = 2
    n_electrodes: int = 16
    drive_current: float = 0.01
    contact_impedance: float = 1e-2
    background_sigma: float = BACKGROUND_SIGMA
    inclusion_sigma: float = INCLUSION_SIGMA
    tv_lambda: float | None = None  # None: scale-relative default
    pdipm_max_outer: int = 40

    def setting_list(self) -> list[tuple[str, int]]:
        if self.settings is None:
            return list(SETTINGS)
        out = []
        for s in self.settings:
            if isinstance(s, int):
                if not 0 <= s < len(SETTINGS):
                    raise ContractError(f"setting index {s} out of range")
                out.append(SETTINGS[s])
                continue
            pair = (str(s[0]), int(s[1]))
            if pair not in SETTINGS:
                raise ContractError(f"setting {pair!r} is not recognized")
            out.append(pair)
        return out


DATASET_SCHEMA_VERSION = 1


def record_seed(base_seed: int, index: int) -> int:
    return (int(base_seed) ^ int(index)) & 0xFFFFFFFFFFFFFFFF


def generate_dataset(config: DatasetConfig, out_dir: str | FsPath) -> dict:
    """Generate records and write them to a dataset directory.

    Each record: sample a phantom, solve the forward problem on the fine
    mesh with and without inclusions, take the time-difference frame, run
    pre-imaging against the coarse-mesh Jacobian, rasterize both images.
    Sequential and fully seeded, so reruns are byte-identical.
    """
    from .preimage import PreimageSolver  # heavier import kept off module load

    out = FsPath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    settings = config.setting_list()

    protocol = StimulationProtocol(
        n_electrodes=config.n_electrodes, drive_current=config.drive_current
    )
    fine = build_disk_mesh(
        refinement=config.fine_refinement, n_electrodes=config.n_electrodes
    )
    coarse = build_disk_mesh(
        refinement=config.coarse_refinement, n_electrodes=config.n_electrodes
    )
    fine_solver = ForwardSolver(fine, protocol, config.contact_impedance)
    pre = PreimageSolver(
        coarse,
        protocol=protocol,
        contact_impedance=config.contact_impedance,
        background_sigma=config.background_sigma,
        grid=config.grid,
        tv_lambda=config.tv_lambda,
        max_outer=config.pdipm_max_outer,
    )
    v_ref = fine_solver.forward(
        homogeneous_field(fine, config.background_sigma)
    )

    n_records = len(settings) * config.per_setting
    sig_path = out / "sigma_true.f32"
    ini_path = out / "initial.f32"
    vol_path = out / "voltage.f32"
    ph_path = out / "phantoms.jsonl"

    voltages = np.empty((n_records, protocol.n_measurements), dtype=np.float64)
    manifest = {
        "schema_version": DATASET_SCHEMA_VERSION,
        "complete": False,
        "n_records": n_records,
        "grid": config.grid,
        "base_seed": config.base_seed,
        "per_setting": config.per_setting,
        "settings": [list(s) for s in settings],
        "n_measurements": protocol.n_measurements,
        "n_electrodes": config.n_electrodes,
        "drive_current": config.drive_current,
        "contact_impedance": config.contact_impedance,
        "fine_refinement": config.fine_refinement,
        "coarse_refinement": config.coarse_refinement,
        "background_sigma": config.background_sigma,
        "inclusion_sigma": config.inclusion_sigma,
        "image_scale": config.background_sigma,
        "dtype": "<f4",
        "files": {
            "sigma_true": "sigma_true.f32",
            "initial": "initial.f32",
            "voltage": "voltage.f32",
            "phantoms": "phantoms.jsonl",
        },
    }

    def write_manifest():
        with open(out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    write_manifest()  # partial marker until generation finishes
    try:
        with open(sig_path, "wb") as f_sig, open(ini_path, "wb") as f_ini, open(
            vol_path, "wb"
        ) as f_vol, open(ph_path, "w") as f_ph:
            index = 0
            for setting in settings:
                for _ in range(config.per_setting):
                    seed = record_seed(config.base_seed, index)
                    rng = np.random.default_rng(seed)
                    phantom = _sample_with_overrides(setting, rng, config)
                    sigma2 = phantom_to_field(phantom, fine)
                    v_inc = fine_solver.forward(sigma2)
                    v_diff = time_difference(v_inc, v_ref)
                    initial = pre.reconstruct(v_diff)
                    truth = rasterize_truth(phantom, config.grid)

                    truth.values.astype("<f4").tofile(f_sig)
                    initial.values.astype("<f4").tofile(f_ini)
                    v_diff.values.astype("<f4").tofile(f_vol)
                    voltages[index] = v_diff.values
                    meta = {"index": index, "seed": seed, "setting": list(setting)}
                    meta.update(phantom.to_json_dict())
                    f_ph.write(json.dumps(meta, sort_keys=True) + "\n")
                    index += 1
    except OSError:
        write_manifest()
        raise

    vm = voltages.mean(axis=0)
    vs = voltages.std(axis=0)
    manifest["voltage_mean"] = vm.tolist()
    manifest["voltage_std"] = np.maximum(vs, 1e-12).tolist()
    manifest["complete"] = True
    write_manifest()
    return manifest


def _sample_with_overrides(
    setting: tuple[str, int], rng: np.random.Generator, config: DatasetConfig
) -> Phantom:
    ph = sample_phantom(setting, rng)
    if (
        config.background_sigma != BACKGROUND_SIGMA
        or config.inclusion_sigma != INCLUSION_SIGMA
    ):
        ph = Phantom(
            shapes=ph.shapes,
            background_sigma=config.background_sigma,
            inclusion_sigma=config.inclusion_sigma,
        )
    return ph


@dataclass
class Dataset:
    """In-memory view of a dataset directory."""

    manifest: dict
    sigma_true: np.ndarray  # (n, grid, grid) float32
    initial: np.ndarray  # (n, grid, grid) float32
    voltage: np.ndarray  # (n, n_measurements) float32

    def __len__(self) -> int:
        return self.sigma_true.shape[0]


def load_dataset(path: str | FsPath) -> Dataset:
    path = FsPath(path)
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    if not manifest.get("complete", False):
        raise ContractError(f"dataset at {path} is marked incomplete")
    n = manifest["n_records"]
    g = manifest["grid"]
    m = manifest["n_measurements"]
    sig = np.fromfile(path / manifest["files"]["sigma_true"], dtype="<f4")
    ini = np.fromfile(path / manifest["files"]["initial"], dtype="<f4")
    vol = np.fromfile(path / manifest["files"]["voltage"], dtype="<f4")
    if sig.size != n * g * g or ini.size != n * g * g or vol.size != n * m:
        raise ContractError("dataset file sizes do not match the manifest")
    return Dataset(
        manifest=manifest,
        sigma_true=sig.reshape(n, g, g),
        initial=ini.reshape(n, g, g),
        voltage=vol.reshape(n, m),
    )


def load_phantoms(path: str | FsPath) -> list[dict]:
    out = []
    with open(FsPath(path) / "phantoms.jsonl") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
