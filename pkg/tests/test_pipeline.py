"""End-to-end pipeline tests: composition against hand-chained public ops,
ablation identities, training determinism, and checkpoint round trips."""

import dataclasses

import numpy as np
import pytest

from radarfuse import synth
from radarfuse.densify import densify
from radarfuse.fusion import VolumeFeatures, collapse_height, concat_volume, \
    cross_modal_fuse, height_reproject
from radarfuse.grid import pillarize, to_dense
from radarfuse.amplify import amplify_grid
from radarfuse.occupancy import iou_counts, occupancy_head, predict, \
    report_from_counts
from radarfuse.pipeline import (
    default_pipeline_config,
    evaluate,
    forward,
    init_model,
    load_checkpoint,
    params_from_sections,
    params_to_sections,
    pipeline_config_from_kv,
    pipeline_config_to_kv,
    save_checkpoint,
    train,
)


def tiny_scenes(n=2, seed=0, **overrides):
    config = dataclasses.replace(synth.default_scene_config(seed=seed),
                                 **overrides)
    return [synth.generate_scene(config, synth.scene_seed(seed, i))
            for i in range(n)], config


class TestForward:
    def test_output_shape_contract(self):
        scenes, _ = tiny_scenes()
        config = default_pipeline_config()
        logits = forward(scenes[0], init_model(config), config)
        assert logits.shape == (6, 4, 16, 16)
        assert np.isfinite(logits).all()

    def test_zero_path_gives_head_bias(self):
        scenes, _ = tiny_scenes()
        config = default_pipeline_config(radar_enabled=False,
                                         enable_densifier=False,
                                         enable_amplifier=False)
        params = init_model(config)
        params.head.bias[:] = np.arange(6, dtype=np.float32)
        scene = scenes[0]
        scene.camera = VolumeFeatures(np.zeros_like(scene.camera.data))
        logits = forward(scene, params, config)
        for c in range(6):
            assert (logits[c] == np.float32(c)).all()

    def test_matches_hand_composition(self):
        """Pipeline forward equals the scripted chain of public module ops."""
        scenes, _ = tiny_scenes(seed=3)
        config = default_pipeline_config()
        params = init_model(config)
        scene = scenes[0]
        got = forward(scene, params, config)

        grid = pillarize(scene.points, config.spec, params.encoder)
        grid = densify(grid, config.dens)
        grid = amplify_grid(params.amp, grid)
        rad_bev = to_dense(grid)
        img_bev = collapse_height(scene.camera)
        fused = cross_modal_fuse(img_bev, rad_bev, params.fuse)
        volume = height_reproject(fused, config.depth)
        feats = concat_volume(volume, scene.camera)
        want = occupancy_head(feats, params.head)
        np.testing.assert_array_equal(got, want)

    def test_ablation_identity_raw_pillars(self):
        """Both enrichment flags off: the radar path is exactly the raw
        pillarized BEV features."""
        scenes, _ = tiny_scenes(seed=4)
        config = default_pipeline_config(enable_densifier=False,
                                         enable_amplifier=False)
        params = init_model(config)
        scene = scenes[0]
        got = forward(scene, params, config)

        rad_bev = to_dense(pillarize(scene.points, config.spec, params.encoder))
        img_bev = collapse_height(scene.camera)
        fused = cross_modal_fuse(img_bev, rad_bev, params.fuse)
        feats = concat_volume(height_reproject(fused, config.depth), scene.camera)
        want = occupancy_head(feats, params.head)
        np.testing.assert_array_equal(got, want)

    def test_camera_only_ignores_radar(self):
        scenes, _ = tiny_scenes(seed=5)
        config = default_pipeline_config(radar_enabled=False)
        params = init_model(config)
        a = forward(scenes[0], params, config)
        no_radar = dataclasses.replace(scenes[0], points=[])
        b = forward(no_radar, params, config)
        np.testing.assert_array_equal(a, b)

    def test_stage_name_attached_to_errors(self):
        scenes, _ = tiny_scenes()
        config = default_pipeline_config()
        params = init_model(config)
        bad = dataclasses.replace(config, c_rad=8)  # params built for 16
        with pytest.raises(ValueError, match="pillarize"):
            forward(scenes[0], params, bad)

    def test_camera_dims_validated(self):
        scenes, _ = tiny_scenes()
        config = default_pipeline_config(num_classes=4)
        with pytest.raises(ValueError, match="camera volume"):
            forward(scenes[0], init_model(config), config)


class TestTrain:
    def test_zero_lr_keeps_parameters(self):
        scenes, _ = tiny_scenes()
        config = default_pipeline_config(steps=3, batch_size=2, lr=0.0,
                                         weight_decay=0.0)
        result = train(scenes, config)
        fresh = init_model(config)
        for a, b in zip(result.params.param_arrays(), fresh.param_arrays()):
            np.testing.assert_array_equal(a, b)

    def test_same_seed_bit_identical(self):
        scenes, _ = tiny_scenes()
        config = default_pipeline_config(steps=5, batch_size=2, seed=8)
        a = train(scenes, config)
        b = train(scenes, config)
        for pa, pb in zip(a.params.param_arrays(), b.params.param_arrays()):
            np.testing.assert_array_equal(pa, pb)
        assert a.loss_curve == b.loss_curve

    def test_loss_curve_is_monotone_in_step_index(self):
        scenes, _ = tiny_scenes()
        config = default_pipeline_config(steps=4, batch_size=2)
        result = train(scenes, config)
        assert [s for s, _ in result.loss_curve] == [0, 1, 2, 3]

    def test_divergence_aborts_with_last_finite_params(self):
        scenes, _ = tiny_scenes()
        config = default_pipeline_config(steps=30, batch_size=2, lr=1e8)
        result = train(scenes, config)
        assert result.diverged
        assert len(result.loss_curve) < 30
        for arr in result.params.param_arrays():
            assert np.isfinite(arr).all()

    def test_empty_dataset_rejected(self):
        config = default_pipeline_config()
        with pytest.raises(ValueError):
            train([], config)

    def test_checkpoint_interval_writes_files(self, tmp_path):
        scenes, _ = tiny_scenes()
        config = default_pipeline_config(steps=4, batch_size=2,
                                         checkpoint_interval=2)
        train(scenes, config, checkpoint_dir=tmp_path)
        assert (tmp_path / "step_00002.ckpt").exists()
        assert (tmp_path / "step_00004.ckpt").exists()


class TestEvaluate:
    def test_empty_dataset_rejected(self):
        config = default_pipeline_config()
        with pytest.raises(ValueError):
            evaluate(init_model(config), [], config)

    def test_aggregation_matches_count_summation_oracle(self):
        scenes, _ = tiny_scenes(n=3, seed=6)
        config = default_pipeline_config()
        params = init_model(config)
        report = evaluate(params, scenes, config)

        total_i = {c: 0 for c in range(5)}
        total_u = {c: 0 for c in range(5)}
        for scene in scenes:
            pred = predict(forward(scene, params, config),
                           scene.gt.class_names, scene.gt.dynamic_class_ids)
            inters, unions = iou_counts(pred, scene.gt, range(5))
            for c in range(5):
                total_i[c] += inters[c]
                total_u[c] += unions[c]
        want = report_from_counts(total_i, total_u,
                                  scenes[0].gt.dynamic_class_ids)
        assert report.per_class_iou == pytest.approx(want.per_class_iou)
        assert report.miou == pytest.approx(want.miou)
        assert report.intersections == want.intersections


class TestCheckpoints:
    def test_round_trip_with_optimizer_state(self, tmp_path):
        scenes, _ = tiny_scenes()
        config = default_pipeline_config(steps=3, batch_size=2)
        result = train(scenes, config)
        path = tmp_path / "model.ckpt"
        from radarfuse.nn import adamw_init
        state = adamw_init(result.params.param_arrays())
        state.t = 3
        save_checkpoint(path, result.params, state)
        params2, state2 = load_checkpoint(path, config)
        for a, b in zip(result.params.param_arrays(), params2.param_arrays()):
            np.testing.assert_array_equal(a, b)
        assert state2.t == 3

    def test_dim_mismatch_names_both_dims(self):
        config = default_pipeline_config()
        sections = params_to_sections(init_model(config))
        other = dataclasses.replace(config, c_rad=8)
        with pytest.raises(ValueError, match=r"\(16, 16\).*\(8, 16\)"):
            params_from_sections(sections, other)

    def test_missing_section_rejected(self):
        config = default_pipeline_config()
        sections = params_to_sections(init_model(config))
        del sections["head.cls.w"]
        with pytest.raises(ValueError, match="head.cls.w"):
            params_from_sections(sections, config)


class TestConfigSerialization:
    def test_kv_round_trip(self):
        config = default_pipeline_config(steps=77, lr=3e-3, seed=5,
                                         enable_amplifier=False)
        back = pipeline_config_from_kv(pipeline_config_to_kv(config))
        assert back == config

    def test_dimension_chain_validated(self):
        with pytest.raises(ValueError, match="divisible"):
            default_pipeline_config(c_fused=30)
