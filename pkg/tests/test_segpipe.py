import numpy as np
import pytest

from oarseg.errors import ConfigError, TrainError
from oarseg.grids import BBox, Mask, StructureId, Volume, connected_components
from oarseg.phantom import PhantomSpec, PhantomStructure, generate_case
from oarseg.preprocess import CropSpec
from oarseg.segpipe import (
    PipelineModel,
    STRUCTURE_DEFAULTS,
    StructureConfig,
    TrainConfig,
    extract_target_mask,
    extract_target_volume,
    infer_structure,
    postprocess_islands,
    preprocess_case,
    train_stage,
)

from conftest import random_mask

# desk-scale setup: 32^3 frame, 16^3 box, tiny network
TINY_SPEC = PhantomSpec(
    dims=(32, 32, 32),
    structures=(PhantomStructure(
        name="brainstem",
        semi_axes_mm=((4.0, 6.0), (3.5, 5.5), (3.0, 5.0)),
        center_jitter_mm=2.0,
    ),),
    seed=11,
)
TINY_STRUCT = StructureConfig(
    id=StructureId.BRAINSTEM, box_size=(16, 16, 16), crop_group=1,
    locnet_input=(8, 8, 8),
)
TINY_CROP = CropSpec((32, 32, 32))


def tiny_cases(n, offset=0):
    cases = []
    for i in range(n):
        img, masks = generate_case(TINY_SPEC, offset + i)
        cases.append((img, masks["brainstem"]))
    return cases


class TestStructureDefaults:
    def test_table_values(self):
        assert STRUCTURE_DEFAULTS[StructureId.MANDIBLE].box_size == (144, 144, 112)
        assert STRUCTURE_DEFAULTS[StructureId.MANDIBLE].segnet_z_halved
        assert STRUCTURE_DEFAULTS[StructureId.MANDIBLE].crop_group == 2
        assert STRUCTURE_DEFAULTS[StructureId.CHIASM].box_size == (32, 32, 16)
        assert STRUCTURE_DEFAULTS[StructureId.CHIASM].crop_group == 1
        for cfg in STRUCTURE_DEFAULTS.values():
            assert all(s % 8 == 0 for s in cfg.box_size)
            assert cfg.prob_threshold == 0.5

    def test_bad_box_size_rejected(self):
        with pytest.raises(ConfigError):
            StructureConfig(StructureId.CHIASM, (30, 32, 16), 1)

    def test_batch_must_be_one(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch=2)


class TestExtractTargetVolume:
    def test_brainstem_window_shape(self):
        cfg = STRUCTURE_DEFAULTS[StructureId.BRAINSTEM]
        frame = Volume(np.zeros((384, 384, 224), np.float32))
        out = extract_target_volume(frame, BBox((100, 100, 70), (56, 56, 80)), cfg)
        assert out.dims == (56, 56, 80)

    def test_mandible_z_halving(self):
        cfg = STRUCTURE_DEFAULTS[StructureId.MANDIBLE]
        frame = Volume(np.zeros((384, 384, 224), np.float32), (1, 1, 1))
        out = extract_target_volume(frame, BBox((100, 100, 50), (144, 144, 112)), cfg)
        assert out.dims == (144, 144, 56)
        assert out.spacing == (1.0, 1.0, 2.0)

    def test_mandible_mask_majority(self):
        cfg = STRUCTURE_DEFAULTS[StructureId.MANDIBLE]
        gt = Mask(np.zeros((384, 384, 224), bool))
        gt.data[100:200, 100:200, 50:130] = True
        out = extract_target_mask(gt, BBox((100, 100, 50), (144, 144, 112)), cfg)
        assert out.dims == (144, 144, 56)
        assert out.data[0, 0, 0]

    def test_size_mismatch_rejected(self):
        cfg = STRUCTURE_DEFAULTS[StructureId.BRAINSTEM]
        frame = Volume(np.zeros((384, 384, 224), np.float32))
        with pytest.raises(ConfigError):
            extract_target_volume(frame, BBox((0, 0, 0), (56, 56, 72)), cfg)


class TestIslandRemoval:
    def _mask_with_components(self, sizes):
        m = Mask(np.zeros((64, 64, 8), bool))
        x = 0
        for s in sizes:
            # build a 1-voxel-high strip of s voxels, isolated from the others
            m.data[x, :s, 0] = True if s <= 64 else None
            x += 2
        return m

    def test_single_component_unchanged(self, rng):
        m = Mask(np.zeros((16, 16, 16), bool))
        m.data[4:9, 4:9, 4:9] = True
        out = postprocess_islands(m)
        assert np.array_equal(out.data, m.data)

    def test_100_plus_5_removes_island(self):
        m = Mask(np.zeros((30, 30, 4), bool))
        m.data[0:10, 0:10, 0] = True      # 100 voxels
        m.data[20:25, 20, 0] = True       # 5 voxels: 5 < 10.5
        out = postprocess_islands(m)
        assert out.count() == 100
        assert len(connected_components(out)) == 1

    def test_100_plus_12_keeps_both(self):
        m = Mask(np.zeros((30, 30, 4), bool))
        m.data[0:10, 0:10, 0] = True      # 100 voxels
        m.data[20:26, 20:22, 0] = True    # 12 voxels: 12 >= 11.2
        out = postprocess_islands(m)
        assert out.count() == 112
        assert len(connected_components(out)) == 2

    def test_exact_ten_percent_kept(self):
        m = Mask(np.zeros((30, 30, 4), bool))
        m.data[0:9, 0:10, 0] = True       # 90
        m.data[20:25, 20:22, 0] = True    # 10; total 100, 10 >= 10.0 kept
        out = postprocess_islands(m)
        assert out.count() == 100

    def test_never_removes_largest_component(self):
        # eleven equal components, each under 10% of the total
        m = Mask(np.zeros((64, 8, 4), bool))
        for i in range(11):
            m.data[4 * i:4 * i + 2, 0:5, 0] = True
        out = postprocess_islands(m)
        assert out.count() == m.count()  # tied largest: all kept

    def test_never_increases_foreground(self, rng):
        for _ in range(25):
            m = random_mask(rng, (12, 12, 12), p=0.2)
            out = postprocess_islands(m)
            assert out.count() <= m.count()
            assert not (out.data & ~m.data).any()

    def test_empty_mask_ok(self):
        out = postprocess_islands(Mask(np.zeros((4, 4, 4), bool)))
        assert out.count() == 0


class TestTrainStage:
    def test_epochs_zero_returns_initialized_model(self):
        cases = tiny_cases(2)
        tcfg = TrainConfig(epochs=0, seed=3, base_channels=2, levels=3)
        net, trace = train_stage("seg", cases, TINY_STRUCT, tcfg)
        assert trace == []
        from oarseg.nn3d import UNet, UNetConfig
        ref = UNet.initialized(UNetConfig(levels=3, base_channels=2), seed=3)
        for name in ref.params:
            assert np.array_equal(net.params[name], ref.params[name])

    def test_identical_seed_identical_trace_and_model(self):
        cases = tiny_cases(2)
        tcfg = TrainConfig(epochs=3, seed=5, base_channels=2, levels=3)
        net1, trace1 = train_stage("seg", cases, TINY_STRUCT, tcfg)
        net2, trace2 = train_stage("seg", cases, TINY_STRUCT, tcfg)
        assert trace1 == trace2
        for name in net1.params:
            assert np.array_equal(net1.params[name], net2.params[name])

    def test_trace_finite_and_decreasing_overall(self):
        cases = tiny_cases(1)
        tcfg = TrainConfig(epochs=40, seed=0, base_channels=2, levels=3)
        net, trace = train_stage("seg", cases, TINY_STRUCT, tcfg)
        assert all(np.isfinite(trace))
        assert trace[-1] < trace[0]

    def test_loc_stage_shapes_and_training(self):
        cases = tiny_cases(2)
        tcfg = TrainConfig(epochs=2, seed=1, base_channels=2, levels=3)
        net, trace = train_stage("loc", cases, TINY_STRUCT, tcfg)
        assert len(trace) == 4
        assert all(np.isfinite(trace))

    def test_empty_gt_cases_skipped_with_warning(self, caplog):
        cases = tiny_cases(1)
        empty = (cases[0][0], Mask(np.zeros((32, 32, 32), bool)))
        tcfg = TrainConfig(epochs=1, seed=0, base_channels=2, levels=3)
        with caplog.at_level("WARNING"):
            net, trace = train_stage("seg", [empty, cases[0]], TINY_STRUCT, tcfg)
        assert len(trace) == 1
        assert any("empty" in r.message for r in caplog.records)

    def test_all_empty_raises(self):
        img, _ = generate_case(TINY_SPEC, 0)
        empty = Mask(np.zeros((32, 32, 32), bool))
        with pytest.raises(TrainError):
            train_stage("seg", [(img, empty)], TINY_STRUCT, TrainConfig(epochs=1))

    def test_jitter_augmentation_changes_windows_not_determinism(self):
        cases = tiny_cases(2)
        tcfg = TrainConfig(epochs=2, seed=5, base_channels=2, levels=3, augment_jitter=2)
        net1, trace1 = train_stage("seg", cases, TINY_STRUCT, tcfg)
        net2, trace2 = train_stage("seg", cases, TINY_STRUCT, tcfg)
        assert trace1 == trace2
        tcfg0 = TrainConfig(epochs=2, seed=5, base_channels=2, levels=3, augment_jitter=0)
        _, trace0 = train_stage("seg", cases, TINY_STRUCT, tcfg0)
        assert trace0 != trace1


class TestPreprocessCase:
    def test_identity_geometry_passthrough(self):
        img, masks = generate_case(TINY_SPEC, 0)
        # phantom intensities are already in [0,1]; treat them as HU for shape tests
        norm, crop_box, out_masks = preprocess_case(img, TINY_CROP,
                                                    {"brainstem": masks["brainstem"]})
        assert norm.dims == (32, 32, 32)
        assert crop_box.min == (0, 0, 0)
        assert out_masks["brainstem"].dims == (32, 32, 32)

    def test_crop_and_pad_geometry(self):
        img = Volume(np.zeros((40, 28, 36), np.float32), (1, 1, 1))
        norm, crop_box, _ = preprocess_case(img, TINY_CROP)
        assert norm.dims == (32, 32, 32)
        # y axis is smaller than the window: negative offset means padding
        assert crop_box.min[1] < 0


class TestInference:
    @pytest.fixture(scope="class")
    def trained(self):
        cases = tiny_cases(4)
        prepped = []
        for img, gt in cases:
            norm, _, msk = preprocess_case(img, TINY_CROP, {"s": gt})
            prepped.append((norm, msk["s"]))
        tcfg = TrainConfig(epochs=60, seed=2, base_channels=4, levels=3)
        locnet, _ = train_stage("loc", prepped, TINY_STRUCT, tcfg)
        segnet, _ = train_stage("seg", prepped, TINY_STRUCT, tcfg)
        return PipelineModel(TINY_STRUCT, TINY_CROP, locnet, segnet)

    def test_output_shapes_and_frames(self, trained):
        img, _ = generate_case(TINY_SPEC, 100)
        result = infer_structure(img, trained)
        assert result.mask_iso.dims == (32, 32, 32)
        assert result.mask_raw.dims == img.dims
        assert result.mask_iso.spacing == (1.0, 1.0, 1.0)

    def test_foreground_confined_to_located_box(self, trained):
        img, _ = generate_case(TINY_SPEC, 101)
        result = infer_structure(img, trained)
        outside = result.mask_iso.data.copy()
        outside[result.box.slices()] = False
        assert not outside.any()

    def test_bitwise_reproducible(self, trained):
        img, _ = generate_case(TINY_SPEC, 102)
        r1 = infer_structure(img, trained)
        r2 = infer_structure(img, trained)
        assert r1.mask_iso.data.tobytes() == r2.mask_iso.data.tobytes()
        assert r1.mask_raw.data.tobytes() == r2.mask_raw.data.tobytes()

    def test_held_out_case_overlaps_truth(self, trained):
        from oarseg.metrics import dsc_ppv_sen
        img, masks = generate_case(TINY_SPEC, 103)
        result = infer_structure(img, trained)
        dsc, _, _ = dsc_ppv_sen(result.mask_iso, masks["brainstem"])
        assert dsc > 0.5  # smoke-level quality; the acceptance suite asserts >= 0.8

    def test_locnet_input_consistency_enforced(self):
        bad = StructureConfig(StructureId.BRAINSTEM, (16, 16, 16), 1,
                              locnet_input=(16, 16, 16))
        from oarseg.nn3d import UNet, UNetConfig
        net = UNet.initialized(UNetConfig(base_channels=2), seed=0)
        with pytest.raises(ConfigError):
            PipelineModel(bad, TINY_CROP, net, net)
