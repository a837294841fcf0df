"""Deterministic synthetic scenes: radar returns, camera-proxy volumes,
and occupancy ground truth.

Scenes place axis-aligned box objects on the BEV grid; radar points are
drawn inside object footprints with Gaussian position jitter and
class-dependent RCS, plus uniform low-RCS clutter. The camera proxy is a
one-hot class encoding mixed by a fixed orthogonal matrix, then degraded
by elementwise dropout and additive noise scaled by the scene condition.

Randomness comes from numpy's PCG64 generator; the draw order below is
part of the format, so a (config, seed) pair fully determines the scene.
The channel-mixing matrix depends only on config.seed, not the scene
seed, so every scene of a dataset shares one camera encoding.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .fusion import VolumeFeatures
from .grid import GridSpec, RadarPoint
from .occupancy import OccupancyVolume

CONDITION_SCALES = {"clear": 1.0, "rain": 2.0, "night": 3.0}

# clutter returns are weak reflectors regardless of class
CLUTTER_RCS_MEAN = -20.0
CLUTTER_RCS_SPREAD = 2.0

# amplitude of the mixed one-hot camera encoding; keeps the decode head
# reachable within a short AdamW schedule at the default learning rate
CAMERA_ENCODING_SCALE = 6.0


@dataclass(frozen=True)
class SceneConfig:
    spec: GridSpec
    depth: int
    num_classes: int
    n_objects_min: int
    n_objects_max: int
    footprint_min: int
    footprint_max: int
    rcs_means: tuple[float, ...]
    rcs_spreads: tuple[float, ...]
    points_per_object: float
    pos_jitter: float
    clutter_rate: float
    cam_dropout: float
    cam_noise: float
    condition: str = "clear"
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 semantic classes")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if len(self.rcs_means) != self.num_classes or \
                len(self.rcs_spreads) != self.num_classes:
            raise ValueError("per-class RCS tables must have num_classes entries")
        if min(self.points_per_object, self.clutter_rate) < 0:
            raise ValueError("rates must be nonnegative")
        if not (0 <= self.cam_dropout <= 1):
            raise ValueError("dropout must be a probability")
        if self.cam_noise < 0 or self.pos_jitter < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.condition not in CONDITION_SCALES:
            raise ValueError(f"unknown condition '{self.condition}'")
        if not (0 <= self.n_objects_min <= self.n_objects_max):
            raise ValueError("bad object count range")
        if self.footprint_min < 1 or self.footprint_min > self.footprint_max:
            raise ValueError("bad footprint range")
        if self.footprint_max > min(self.spec.height, self.spec.width):
            raise ValueError("footprint exceeds grid extent")

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(f"class{i}" for i in range(self.num_classes))

    @property
    def dynamic_class_ids(self) -> tuple[int, ...]:
        # synthetic convention: the lower half of the id range is "dynamic"
        return tuple(range((self.num_classes + 1) // 2))

    @property
    def cam_channels(self) -> int:
        return self.num_classes + 1


def default_scene_config(seed: int = 0, condition: str = "clear") -> SceneConfig:
    spec = GridSpec(0.0, 16.0, 0.0, 16.0, 1.0)
    return SceneConfig(
        spec=spec,
        depth=4,
        num_classes=5,
        n_objects_min=2,
        n_objects_max=4,
        footprint_min=2,
        footprint_max=5,
        rcs_means=(-12.0, -5.0, 2.0, 9.0, 16.0),
        rcs_spreads=(1.5, 1.5, 1.5, 1.5, 1.5),
        points_per_object=10.0,
        pos_jitter=0.3,
        clutter_rate=5.0,
        cam_dropout=0.2,
        cam_noise=0.1,
        condition=condition,
        seed=seed,
    )


@dataclass
class Scene:
    points: list[RadarPoint]
    camera: VolumeFeatures
    gt: OccupancyVolume
    seed: int
    index: int = 0


def mixing_matrix(config: SceneConfig) -> np.ndarray:
    """Scaled-orthogonal (K+1)x(K+1) channel mixing, fixed by config.seed."""
    rng = np.random.default_rng(config.seed)
    raw = rng.normal(size=(config.cam_channels, config.cam_channels))
    q, r = np.linalg.qr(raw)
    # fix the sign convention so the factorization is unique
    return CAMERA_ENCODING_SCALE * q * np.sign(np.diag(r))


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Build one scene; all randomness flows from `seed` (plus config.seed
    for the shared camera mixing)."""
    spec = config.spec
    h, w, z_cells = spec.height, spec.width, config.depth
    cs = spec.cell_size
    rng = np.random.default_rng(seed)

    labels = np.full((z_cells, h, w), config.num_classes, dtype=np.int32)
    taken = np.zeros((h, w), dtype=bool)
    objects = []
    n_obj = int(rng.integers(config.n_objects_min, config.n_objects_max + 1))
    for _ in range(n_obj):
        cls = int(rng.integers(0, config.num_classes))
        fw = int(rng.integers(config.footprint_min, config.footprint_max + 1))
        fh = int(rng.integers(config.footprint_min, config.footprint_max + 1))
        z_top = int(rng.integers(1, z_cells + 1))
        # footprints never overlap; give up on a crowded grid after 20 tries
        for _ in range(20):
            col0 = int(rng.integers(0, w - fw + 1))
            row0 = int(rng.integers(0, h - fh + 1))
            if not taken[row0:row0 + fh, col0:col0 + fw].any():
                taken[row0:row0 + fh, col0:col0 + fw] = True
                labels[:z_top, row0:row0 + fh, col0:col0 + fw] = cls
                objects.append((cls, row0, col0, fh, fw, z_top))
                break

    points: list[RadarPoint] = []
    for cls, row0, col0, fh, fw, z_top in objects:
        x_lo = spec.x_min + col0 * cs
        y_lo = spec.y_min + row0 * cs
        n_pts = int(rng.poisson(config.points_per_object))
        for _ in range(n_pts):
            x = rng.uniform(x_lo, x_lo + fw * cs) + rng.normal(0.0, config.pos_jitter)
            y = rng.uniform(y_lo, y_lo + fh * cs) + rng.normal(0.0, config.pos_jitter)
            z = rng.uniform(0.0, z_top * cs)
            rcs = rng.normal(config.rcs_means[cls], config.rcs_spreads[cls])
            points.append(RadarPoint(x, y, z, rcs,
                                     rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)))
    n_clutter = int(rng.poisson(config.clutter_rate))
    for _ in range(n_clutter):
        points.append(RadarPoint(
            rng.uniform(spec.x_min, spec.x_max),
            rng.uniform(spec.y_min, spec.y_max),
            rng.uniform(0.0, z_cells * cs),
            rng.normal(CLUTTER_RCS_MEAN, CLUTTER_RCS_SPREAD),
            rng.normal(0.0, 1.0),
            rng.normal(0.0, 1.0),
        ))

    onehot = np.zeros((config.cam_channels, z_cells, h, w), dtype=np.float64)
    zz, yy, xx = np.indices(labels.shape)
    onehot[labels, zz, yy, xx] = 1.0
    cam = np.einsum("ck,kzhw->czhw", mixing_matrix(config), onehot)
    scale = CONDITION_SCALES[config.condition]
    keep = rng.random(cam.shape) >= min(1.0, config.cam_dropout * scale)
    noise = rng.normal(0.0, 1.0, size=cam.shape) * (config.cam_noise * scale)
    cam = (cam * keep + noise).astype(np.float32)

    gt = OccupancyVolume(labels, config.class_names, config.num_classes,
                         config.dynamic_class_ids)
    return Scene(points, VolumeFeatures(cam), gt, int(seed))


def decode_camera(camera: VolumeFeatures, config: SceneConfig) -> np.ndarray:
    """Invert the channel mixing and take the per-voxel argmax class."""
    mix = mixing_matrix(config)
    scores = np.einsum("kc,czhw->kzhw", mix.T, camera.data.astype(np.float64))
    return np.argmax(scores, axis=0).astype(np.int32)


def scene_seed(dataset_seed: int, index: int) -> int:
    """Per-scene seed derived by hashing (dataset seed, scene index)."""
    return int(np.random.SeedSequence((dataset_seed, index)).generate_state(1)[0])


@dataclass
class SceneDataset:
    scenes: list[Scene]
    train_indices: list[int]
    val_indices: list[int]

    @property
    def train(self) -> list[Scene]:
        return [self.scenes[i] for i in self.train_indices]

    @property
    def val(self) -> list[Scene]:
        return [self.scenes[i] for i in self.val_indices]


def generate_dataset(config: SceneConfig, n_scenes: int, seed: int) -> SceneDataset:
    """Generate scenes 0..n-1 and split train/val by index parity (even
    indices train, odd validate). No scene appears in both splits."""
    if n_scenes < 2:
        raise ValueError("need at least 2 scenes to form a split")
    scenes = []
    for i in range(n_scenes):
        scene = generate_scene(config, scene_seed(seed, i))
        scene.index = i
        scenes.append(scene)
    train = [i for i in range(n_scenes) if i % 2 == 0]
    val = [i for i in range(n_scenes) if i % 2 == 1]
    return SceneDataset(scenes, train, val)


# ---------------------------------------------------------------------------
# Scene bundle and config serialization
# ---------------------------------------------------------------------------

def scene_config_to_kv(config: SceneConfig) -> dict[str, str]:
    spec = config.spec
    return {
        "grid.x_min": repr(spec.x_min), "grid.x_max": repr(spec.x_max),
        "grid.y_min": repr(spec.y_min), "grid.y_max": repr(spec.y_max),
        "grid.cell_size": repr(spec.cell_size),
        "depth": str(config.depth),
        "num_classes": str(config.num_classes),
        "n_objects_min": str(config.n_objects_min),
        "n_objects_max": str(config.n_objects_max),
        "footprint_min": str(config.footprint_min),
        "footprint_max": str(config.footprint_max),
        "rcs_means": ",".join(repr(v) for v in config.rcs_means),
        "rcs_spreads": ",".join(repr(v) for v in config.rcs_spreads),
        "points_per_object": repr(config.points_per_object),
        "pos_jitter": repr(config.pos_jitter),
        "clutter_rate": repr(config.clutter_rate),
        "cam_dropout": repr(config.cam_dropout),
        "cam_noise": repr(config.cam_noise),
        "condition": config.condition,
        "seed": str(config.seed),
    }


def scene_config_from_kv(kv: dict[str, str]) -> SceneConfig:
    spec = GridSpec(
        float(kv["grid.x_min"]), float(kv["grid.x_max"]),
        float(kv["grid.y_min"]), float(kv["grid.y_max"]),
        float(kv["grid.cell_size"]),
    )
    return SceneConfig(
        spec=spec,
        depth=int(kv["depth"]),
        num_classes=int(kv["num_classes"]),
        n_objects_min=int(kv["n_objects_min"]),
        n_objects_max=int(kv["n_objects_max"]),
        footprint_min=int(kv["footprint_min"]),
        footprint_max=int(kv["footprint_max"]),
        rcs_means=tuple(float(v) for v in kv["rcs_means"].split(",")),
        rcs_spreads=tuple(float(v) for v in kv["rcs_spreads"].split(",")),
        points_per_object=float(kv["points_per_object"]),
        pos_jitter=float(kv["pos_jitter"]),
        clutter_rate=float(kv["clutter_rate"]),
        cam_dropout=float(kv["cam_dropout"]),
        cam_noise=float(kv["cam_noise"]),
        condition=kv.get("condition", "clear"),
        seed=int(kv.get("seed", "0")),
    )


def save_scene(directory: str | Path, scene: Scene, config: SceneConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    formats.save_points_csv(directory / "points.csv", scene.points)
    formats.write_bfg(directory / "camera.bfg", scene.camera.data)
    formats.write_bfg(directory / "gt.bfg",
                      scene.gt.labels[None].astype(np.float32))
    kv = scene_config_to_kv(config)
    kv["scene_seed"] = str(scene.seed)
    kv["scene_index"] = str(scene.index)
    formats.save_kv(directory / "scene.cfg", kv)


def load_scene(directory: str | Path) -> tuple[Scene, SceneConfig]:
    directory = Path(directory)
    kv = formats.load_kv(directory / "scene.cfg")
    config = scene_config_from_kv(kv)
    rows = formats.load_points_csv(directory / "points.csv")
    points = [RadarPoint(*row) for row in rows]
    camera = VolumeFeatures(formats.read_bfg(directory / "camera.bfg"))
    gt_raw = formats.read_bfg(directory / "gt.bfg")
    if gt_raw.shape[0] != 1:
        raise ValueError(f"{directory}/gt.bfg: label volume must have C=1")
    gt = OccupancyVolume(
        np.rint(gt_raw[0]).astype(np.int32), config.class_names,
        config.num_classes, config.dynamic_class_ids,
    )
    scene = Scene(points, camera, gt, int(kv.get("scene_seed", "0")),
                  int(kv.get("scene_index", "0")))
    return scene, config
