"""End-to-end pipeline: pillarize -> densify -> amplify -> fuse ->
height re-project -> concatenate -> occupancy head, plus training and
evaluation loops.

Ablation flags swap stages for identities (densifier/amplifier) or zero
the radar BEV map entirely (camera-only); each flag combination is meant
to be trained as its own model, not toggled on trained weights.
"""

from __future__ import annotations

import copy
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .amplify import AmplifierParams, amplify_backward, amplify_cached, init_amplifier
from .densify import DensifierConfig, DensifyPlan, apply_plan, build_plan, \
    default_config as default_densifier_config, densify_backward
from .fusion import FusionParams, collapse_height, concat_volume, \
    cross_modal_fuse_backward, cross_modal_fuse_cached, height_reproject, init_fusion
from .grid import GridSpec, PillarGrid, PointEncoder, bucket_points, bucket_rcs, \
    encode_pillar, encode_pillar_backward, init_point_encoder
from .nn import LinearLayer, adamw_init, adamw_step, cross_entropy_loss, init_linear
from .occupancy import MetricsReport, iou_counts, occupancy_head, \
    occupancy_head_backward, predict, report_from_counts
from .synth import Scene


@dataclass(frozen=True)
class PipelineConfig:
    spec: GridSpec
    depth: int
    num_classes: int
    dens: DensifierConfig
    c_rad: int = 16
    enc_hidden: int = 16
    amp_hidden: int = 16
    d_model: int = 32
    k_points: int = 4
    c_fused: int = 32
    lr: float = 4e-4
    weight_decay: float = 1e-2
    steps: int = 500
    batch_size: int = 8
    seed: int = 0
    enable_densifier: bool = True
    enable_amplifier: bool = True
    radar_enabled: bool = True
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.c_fused % self.depth != 0:
            raise ValueError(
                f"fused channels {self.c_fused} not divisible by depth {self.depth}"
            )
        for name in ("c_rad", "enc_hidden", "amp_hidden", "d_model", "k_points",
                     "depth", "num_classes", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def c_img(self) -> int:
        # camera proxy volumes are mixed one-hot class encodings
        return self.num_classes + 1

    @property
    def c_img_bev(self) -> int:
        return self.c_img * self.depth

    @property
    def c_star(self) -> int:
        return self.c_fused // self.depth

    @property
    def head_in(self) -> int:
        return self.c_star + self.c_img


def default_pipeline_config(spec: GridSpec | None = None, **overrides) -> PipelineConfig:
    spec = spec or GridSpec(0.0, 16.0, 0.0, 16.0, 1.0)
    dens = overrides.pop("dens", default_densifier_config(spec.cell_size))
    return PipelineConfig(spec=spec, depth=overrides.pop("depth", 4),
                          num_classes=overrides.pop("num_classes", 5),
                          dens=dens, **overrides)


@dataclass
class ModelParams:
    """Every learnable layer of the pipeline, with gradients."""

    encoder: PointEncoder
    amp: AmplifierParams
    fuse: FusionParams
    head: LinearLayer

    def named_layers(self) -> list[tuple[str, LinearLayer]]:
        layers = [("enc.l1", self.encoder.layer1), ("enc.l2", self.encoder.layer2),
                  ("amp.phi1", self.amp.phi1), ("amp.phi2", self.amp.phi2),
                  ("amp.proj", self.amp.proj)]
        layers += [(f"fuse.{k}", v) for k, v in self.fuse.layers().items()]
        layers.append(("head.cls", self.head))
        return layers

    def zero_grads(self) -> None:
        for _, layer in self.named_layers():
            layer.zero_grad()

    def param_arrays(self) -> list[np.ndarray]:
        out = []
        for _, layer in self.named_layers():
            out.extend([layer.weights, layer.bias])
        return out

    def grad_arrays(self) -> list[np.ndarray]:
        out = []
        for _, layer in self.named_layers():
            out.extend([layer.grad_weights, layer.grad_bias])
        return out

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)


def init_model(config: PipelineConfig, dtype=np.float32) -> ModelParams:
    """Seeded initialization; layer order below is part of the contract."""
    rng = np.random.default_rng(config.seed)
    encoder = init_point_encoder(config.enc_hidden, config.c_rad, rng, dtype)
    amp = init_amplifier(config.c_rad, config.amp_hidden, rng, dtype)
    fuse = init_fusion(config.c_img_bev, config.c_rad, config.d_model,
                       config.k_points, config.c_fused, config.depth, rng, dtype)
    head = init_linear(config.head_in, config.num_classes + 1, rng, dtype)
    return ModelParams(encoder, amp, fuse, head)


@contextmanager
def _stage(name: str):
    try:
        yield
    except Exception as exc:
        raise type(exc)(f"{name}: {exc}") from exc


@dataclass
class SceneCache:
    """Parameter-independent per-scene structures reused across steps."""

    buckets: dict
    pillar_rcs: dict
    plan: DensifyPlan | None
    img_bev: np.ndarray
    labels_flat: np.ndarray


def build_scene_cache(scene: Scene, config: PipelineConfig) -> SceneCache:
    buckets = {}
    rcs = {}
    plan = None
    if config.radar_enabled:
        buckets = bucket_points(scene.points, config.spec)
        rcs = bucket_rcs(scene.points, config.spec)
        if config.enable_densifier:
            skeleton = PillarGrid(
                config.spec, config.c_rad,
                {k: np.zeros(config.c_rad, dtype=np.float32) for k in buckets},
                rcs,
            )
            plan = build_plan(skeleton, config.dens)
    img_bev = collapse_height(scene.camera)
    labels_flat = scene.gt.labels.reshape(-1)
    return SceneCache(buckets, rcs, plan, img_bev, labels_flat)


def _check_scene(scene: Scene, config: PipelineConfig) -> None:
    cam = scene.camera
    if cam.channels != config.c_img or cam.depth != config.depth:
        raise ValueError(
            f"camera volume {cam.channels}x{cam.depth} incompatible with "
            f"config C_I={config.c_img}, Z={config.depth}"
        )
    if (cam.height, cam.width) != (config.spec.height, config.spec.width):
        raise ValueError("camera volume footprint does not match the grid")


def _forward_full(scene: Scene, params: ModelParams, config: PipelineConfig,
                  static: SceneCache | None = None):
    """Forward pass returning (logits, caches needed by _backward_full)."""
    _check_scene(scene, config)
    if static is None:
        static = build_scene_cache(scene, config)
    caches: dict = {"static": static}

    rad_bev = np.zeros(
        (config.c_rad, config.spec.height, config.spec.width),
        dtype=params.head.weights.dtype,
    )
    if config.radar_enabled:
        with _stage("pillarize"):
            if params.encoder.channels != config.c_rad:
                raise ValueError(
                    f"encoder emits {params.encoder.channels} channels, "
                    f"config expects C_R={config.c_rad}"
                )
            enc_caches = {}
            cells = {}
            for key in sorted(static.buckets):
                feature, cache = encode_pillar(params.encoder, static.buckets[key])
                cells[key] = feature
                enc_caches[key] = cache
            pillar_grid = PillarGrid(config.spec, config.c_rad, cells,
                                     static.pillar_rcs, validate=False)
            caches["enc"] = enc_caches
        with _stage("densify"):
            if config.enable_densifier:
                dens_grid = apply_plan(static.plan, pillar_grid.cells)
            else:
                dens_grid = pillar_grid
        with _stage("amplify"):
            dens_keys = dens_grid.occupied()
            if dens_keys:
                krs = np.asarray([k[0] for k in dens_keys])
                kcs = np.asarray([k[1] for k in dens_keys])
                for i, key in enumerate(dens_keys):
                    rad_bev[:, key[0], key[1]] = dens_grid.cells[key]
            else:
                krs = kcs = np.asarray([], dtype=np.int64)
            caches["dens_idx"] = (dens_keys, krs, kcs)
            if config.enable_amplifier and dens_keys:
                dens_rows = rad_bev[:, krs, kcs].T.copy()
                amp_rows, amp_cache = amplify_cached(params.amp, dens_rows)
                caches["amp"] = (dens_rows, amp_cache)
                rad_bev[:, krs, kcs] = amp_rows.T

    with _stage("fuse"):
        fused, fuse_cache = cross_modal_fuse_cached(static.img_bev, rad_bev,
                                                    params.fuse)
        caches["fuse"] = (rad_bev, fuse_cache)
    with _stage("height_reproject"):
        volume = height_reproject(fused, config.depth)
    with _stage("concat"):
        feats3d = concat_volume(volume, scene.camera)
        caches["feats3d"] = feats3d
    with _stage("occupancy_head"):
        logits = occupancy_head(feats3d, params.head)
    return logits, caches


def forward(scene: Scene, params: ModelParams, config: PipelineConfig) -> np.ndarray:
    """Run the module chain on one scene; returns (K+1) x Z x H x W logits."""
    logits, _ = _forward_full(scene, params, config)
    return logits


def _backward_full(params: ModelParams, config: PipelineConfig, caches: dict,
                   d_logits: np.ndarray) -> None:
    """Accumulate parameter gradients for one scene."""
    static: SceneCache = caches["static"]
    d_feats3d = occupancy_head_backward(caches["feats3d"], params.head, d_logits)
    d_volume = d_feats3d[: config.c_star]
    h, w = config.spec.height, config.spec.width
    d_fused = np.ascontiguousarray(d_volume).reshape(config.c_fused, h, w)
    rad_bev, fuse_cache = caches["fuse"]
    _, d_rad_bev = cross_modal_fuse_backward(static.img_bev, rad_bev,
                                             params.fuse, d_fused, fuse_cache)
    if not config.radar_enabled:
        return
    dens_keys, krs, kcs = caches["dens_idx"]
    if config.enable_amplifier and dens_keys:
        dens_rows, amp_cache = caches["amp"]
        upstream_rows = d_rad_bev[:, krs, kcs].T.copy()
        d_rows = amplify_backward(params.amp, dens_rows, upstream_rows, amp_cache)
        d_dens = np.zeros_like(d_rad_bev)
        d_dens[:, krs, kcs] = d_rows.T
    else:
        d_dens = d_rad_bev
    if config.enable_densifier and static.plan is not None:
        d_pillars = densify_backward(static.plan, d_dens)
    else:
        d_pillars = {key: d_dens[:, key[0], key[1]] for key in dens_keys}
    enc_caches = caches["enc"]
    for key in sorted(enc_caches):
        encode_pillar_backward(params.encoder, enc_caches[key], d_pillars[key])


def scene_loss(logits: np.ndarray, labels_flat: np.ndarray):
    """Mean cross entropy over all voxels (free class supervised)."""
    k1 = logits.shape[0]
    rows = logits.reshape(k1, -1).T
    loss, grad_rows = cross_entropy_loss(rows, labels_flat)
    return loss, grad_rows.T.reshape(logits.shape)


@dataclass
class TrainResult:
    params: ModelParams
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    diverged: bool = False


def train(scenes: list[Scene], config: PipelineConfig,
          checkpoint_dir: str | Path | None = None) -> TrainResult:
    """Deterministic AdamW training over the scene list.

    Batches cycle through the scenes in order; the loss curve records the
    batch-mean loss per step. On a non-finite loss the loop aborts and the
    parameters from the last finite-loss step are returned.
    """
    if not scenes:
        raise ValueError("training requires at least one scene")
    statics = [build_scene_cache(s, config) for s in scenes]
    params = init_model(config)
    state = adamw_init(params.param_arrays(), config.lr, config.weight_decay)
    curve: list[tuple[int, float]] = []
    last_finite = params.copy()
    n = len(scenes)
    for step in range(config.steps):
        params.zero_grads()
        total = 0.0
        diverged = False
        with np.errstate(over="ignore", invalid="ignore"):
            for j in range(config.batch_size):
                idx = (step * config.batch_size + j) % n
                logits, caches = _forward_full(scenes[idx], params, config,
                                               statics[idx])
                if not np.isfinite(logits).all():
                    diverged = True
                    break
                loss, d_logits = scene_loss(logits, statics[idx].labels_flat)
                total += loss
                _backward_full(params, config, caches,
                               d_logits / config.batch_size)
        mean_loss = total / config.batch_size
        if diverged or not np.isfinite(mean_loss):
            return TrainResult(last_finite, curve, diverged=True)
        curve.append((step, float(mean_loss)))
        last_finite = params.copy()
        adamw_step(params.param_arrays(), params.grad_arrays(), state)
        if (checkpoint_dir is not None and config.checkpoint_interval > 0
                and (step + 1) % config.checkpoint_interval == 0):
            path = Path(checkpoint_dir) / f"step_{step + 1:05d}.ckpt"
            save_checkpoint(path, params, state)
    return TrainResult(params, curve)


def evaluate(params: ModelParams, scenes: list[Scene],
             config: PipelineConfig) -> MetricsReport:
    """Dataset-level metrics: intersection/union counts are summed across
    scenes before dividing."""
    if not scenes:
        raise ValueError("evaluation requires at least one scene")
    classes = range(config.num_classes)
    total_i: dict[int, int] = {c: 0 for c in classes}
    total_u: dict[int, int] = {c: 0 for c in classes}
    gt0 = scenes[0].gt
    for scene in scenes:
        logits = forward(scene, params, config)
        pred = predict(logits, scene.gt.class_names, scene.gt.dynamic_class_ids)
        inters, unions = iou_counts(pred, scene.gt, classes)
        for c in classes:
            total_i[c] += inters[c]
            total_u[c] += unions[c]
    return report_from_counts(total_i, total_u, gt0.dynamic_class_ids,
                              gt0.class_names)


# ---------------------------------------------------------------------------
# Checkpoints and config files
# ---------------------------------------------------------------------------

def params_to_sections(params: ModelParams) -> dict[str, np.ndarray]:
    sections = {}
    for name, layer in params.named_layers():
        sections[f"{name}.w"] = layer.weights
        sections[f"{name}.b"] = layer.bias
    return sections


def params_from_sections(sections: dict[str, np.ndarray],
                         config: PipelineConfig) -> ModelParams:
    params = init_model(config)
    for name, layer in params.named_layers():
        for suffix, attr in ((".w", "weights"), (".b", "bias")):
            key = name + suffix
            if key not in sections:
                raise ValueError(f"checkpoint is missing section '{key}'")
            arr = sections[key]
            expected = getattr(layer, attr)
            if arr.shape != expected.shape:
                raise ValueError(
                    f"section '{key}': checkpoint dims {arr.shape} vs "
                    f"config dims {expected.shape}"
                )
            setattr(layer, attr, arr.astype(expected.dtype))
    return params


def save_checkpoint(path: str | Path, params: ModelParams, state=None) -> None:
    sections = params_to_sections(params)
    # lets consumers rebuild FusionParams without the pipeline config
    sections["meta.reproject_depth"] = np.asarray(
        [params.fuse.reproject_depth], dtype=np.float32)
    if state is not None:
        names = []
        for name, _ in params.named_layers():
            names.extend([f"{name}.w", f"{name}.b"])
        for pname, m, v in zip(names, state.m, state.v):
            sections[f"optim.{pname}.m"] = m
            sections[f"optim.{pname}.v"] = v
        sections["optim.t"] = np.asarray([state.t], dtype=np.float32)
    formats.write_sections(path, sections)


def load_checkpoint(path: str | Path, config: PipelineConfig):
    """Returns (params, adamw_state_or_None)."""
    sections = formats.read_sections(path)
    params = params_from_sections(sections, config)
    state = None
    if "optim.t" in sections:
        state = adamw_init(params.param_arrays(), config.lr, config.weight_decay)
        state.t = int(sections["optim.t"][0])
        names = []
        for name, _ in params.named_layers():
            names.extend([f"{name}.w", f"{name}.b"])
        state.m = [sections[f"optim.{n}.m"].astype(np.float32) for n in names]
        state.v = [sections[f"optim.{n}.v"].astype(np.float32) for n in names]
    return params, state


def pipeline_config_to_kv(config: PipelineConfig) -> dict[str, str]:
    spec = config.spec
    dens = config.dens
    return {
        "grid.x_min": repr(spec.x_min), "grid.x_max": repr(spec.x_max),
        "grid.y_min": repr(spec.y_min), "grid.y_max": repr(spec.y_max),
        "grid.cell_size": repr(spec.cell_size),
        "depth": str(config.depth),
        "num_classes": str(config.num_classes),
        "c_rad": str(config.c_rad),
        "enc_hidden": str(config.enc_hidden),
        "amp_hidden": str(config.amp_hidden),
        "d_model": str(config.d_model),
        "k_points": str(config.k_points),
        "c_fused": str(config.c_fused),
        "dens.sigma_base": repr(dens.sigma_base),
        "dens.rcs_ref": repr(dens.rcs_ref),
        "dens.rcs_gain": repr(dens.rcs_gain),
        "dens.sigma_min": repr(dens.sigma_min),
        "dens.sigma_max": repr(dens.sigma_max),
        "dens.window_radius": str(dens.window_radius),
        "lr": repr(config.lr),
        "weight_decay": repr(config.weight_decay),
        "steps": str(config.steps),
        "batch_size": str(config.batch_size),
        "seed": str(config.seed),
        "enable_densifier": str(int(config.enable_densifier)),
        "enable_amplifier": str(int(config.enable_amplifier)),
        "radar_enabled": str(int(config.radar_enabled)),
        "checkpoint_interval": str(config.checkpoint_interval),
    }


def pipeline_config_from_kv(kv: dict[str, str]) -> PipelineConfig:
    spec = GridSpec(
        float(kv["grid.x_min"]), float(kv["grid.x_max"]),
        float(kv["grid.y_min"]), float(kv["grid.y_max"]),
        float(kv["grid.cell_size"]),
    )
    dens = DensifierConfig(
        sigma_base=float(kv["dens.sigma_base"]),
        rcs_ref=float(kv["dens.rcs_ref"]),
        rcs_gain=float(kv["dens.rcs_gain"]),
        sigma_min=float(kv["dens.sigma_min"]),
        sigma_max=float(kv["dens.sigma_max"]),
        window_radius=int(kv["dens.window_radius"]),
    )
    def flag(name, default="1"):
        return bool(int(kv.get(name, default)))
    return PipelineConfig(
        spec=spec, depth=int(kv["depth"]), num_classes=int(kv["num_classes"]),
        dens=dens,
        c_rad=int(kv.get("c_rad", "16")),
        enc_hidden=int(kv.get("enc_hidden", "16")),
        amp_hidden=int(kv.get("amp_hidden", "16")),
        d_model=int(kv.get("d_model", "32")),
        k_points=int(kv.get("k_points", "4")),
        c_fused=int(kv.get("c_fused", "32")),
        lr=float(kv.get("lr", "4e-4")),
        weight_decay=float(kv.get("weight_decay", "1e-2")),
        steps=int(kv.get("steps", "500")),
        batch_size=int(kv.get("batch_size", "8")),
        seed=int(kv.get("seed", "0")),
        enable_densifier=flag("enable_densifier"),
        enable_amplifier=flag("enable_amplifier"),
        radar_enabled=flag("radar_enabled"),
        checkpoint_interval=int(kv.get("checkpoint_interval", "0")),
    )
