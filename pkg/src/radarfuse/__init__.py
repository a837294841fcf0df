"""Radar feature enrichment and camera-radar BEV fusion for occupancy prediction."""

__version__ = "0.1.0"

from .grid import GridSpec, PillarGrid, PointEncoder, RadarPoint, cell_index, \
    init_point_encoder, pillarize, sparsify, to_dense
from .densify import DensifierConfig, WeightWindow, default_config, densify, \
    gaussian_window, sigma_from_rcs
from .amplify import AmplifierParams, amplify, amplify_backward, amplify_grid, \
    channel_probabilities, init_amplifier
from .fusion import FusionParams, VolumeFeatures, bilinear_sample, collapse_height, \
    concat_volume, cross_modal_fuse, height_reproject, init_fusion
from .occupancy import MetricsReport, OccupancyVolume, miou, occupancy_head, \
    predict, relative_gain
from .synth import Scene, SceneConfig, decode_camera, default_scene_config, \
    generate_dataset, generate_scene
from .pipeline import ModelParams, PipelineConfig, TrainResult, \
    default_pipeline_config, evaluate, forward, init_model, load_checkpoint, \
    save_checkpoint, train
