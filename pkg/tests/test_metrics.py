import math
import os

import numpy as np
import pandas as pd
import pytest

from conftest import tiny_config
from data_builder import SceneSpec, generate_tiny_scene
from dataset_io import load_dataset
from errors import ConfigurationError, DimensionMismatchError, EmptySupervisionWarning, EmptyValidityError, \
    ResolutionMismatchError
from metrics import ABLATION_VARIANTS, LPIPS_UNAVAILABLE, REPORT_COLUMNS, drms, evaluate, fusion_ablation, psnr, \
    variant_config
from trainer import TrainConfig, initialize_state


class TestPsnr:
    def test_identical_is_exact(self, rng):
        img = rng.uniform(0, 1, size=(4, 4, 3))
        assert psnr(img, img) == math.inf

    def test_known_values(self):
        gt = np.zeros((4, 4, 3))
        assert psnr(gt, gt + 0.1) == pytest.approx(20.0)
        assert psnr(gt, gt + np.sqrt(2.5e-4)) == pytest.approx(36.02, abs=0.01)

    def test_symmetric(self, rng):
        a = rng.uniform(0, 1, size=(5, 5, 3))
        b = rng.uniform(0, 1, size=(5, 5, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            psnr(np.zeros((2, 2, 3)), np.zeros((2, 2)))


class TestDrms:
    def test_known_values(self, rng):
        gt = rng.uniform(1, 4, size=(4, 4))
        valid = np.ones((4, 4), dtype=bool)
        assert drms(gt, gt, valid) == 0.0
        assert drms(gt, gt + 0.1, valid) == pytest.approx(0.1)
        half = gt.copy()
        half[:2] += 0.2
        assert drms(gt, half, valid) == pytest.approx(0.1414, abs=1e-4)

    def test_symmetric_and_scales_exactly(self, rng):
        gt = rng.uniform(1, 4, size=(6, 6))
        pred = rng.uniform(1, 4, size=(6, 6))
        valid = rng.random((6, 6)) < 0.6
        valid[0, 0] = True
        assert drms(gt, pred, valid) == drms(pred, gt, valid)
        assert drms(4.0 * gt, 4.0 * pred, valid) == 4.0 * drms(gt, pred, valid)

    def test_invalid_pixels_ignored(self, rng):
        gt = rng.uniform(1, 4, size=(3, 3))
        valid = np.zeros((3, 3), dtype=bool)
        valid[1] = True
        pred = gt.copy()
        pred[0] += 10.0
        assert drms(gt, pred, valid) == 0.0

    def test_empty_validity(self):
        with pytest.raises(EmptyValidityError):
            drms(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2), dtype=bool))


class TestEvaluate:
    def test_identity_deformation_is_time_invariant_on_static_scene(self, static_dataset):
        state = initialize_state(static_dataset, tiny_config())
        report = evaluate(state, static_dataset, 'train')
        assert len(report) == len(static_dataset.split('train'))
        spread = report.table.groupby('view')['psnr'].agg(lambda v: v.max() - v.min())
        assert (spread <= 1e-6).all()
        assert (report.table['drms'] >= 0).all()

    def test_empty_split_warns(self, tiny_dataset, tmp_path):
        state = initialize_state(tiny_dataset, tiny_config())
        with pytest.warns(EmptySupervisionWarning):
            report = evaluate(state, tiny_dataset, 'holdout', out_dir=str(tmp_path))
        assert len(report) == 0
        assert math.isnan(report.mean_psnr)
        assert os.path.exists(os.path.join(str(tmp_path), 'holdout_report.csv'))

    def test_resolution_mismatch(self, tiny_dataset):
        state = initialize_state(tiny_dataset, tiny_config())
        state.resolution = (32, 32)
        with pytest.raises(ResolutionMismatchError):
            evaluate(state, tiny_dataset, 'eval')

    def test_report_files(self, tiny_dataset, tmp_path):
        state = initialize_state(tiny_dataset, tiny_config())
        report = evaluate(state, tiny_dataset, 'eval', out_dir=str(tmp_path))
        table = pd.read_csv(os.path.join(str(tmp_path), 'eval_report.csv'))
        assert list(table.columns) == REPORT_COLUMNS
        assert len(table) == len(tiny_dataset.split('eval'))
        assert (table['lpips'] == LPIPS_UNAVAILABLE).all()
        with open(os.path.join(str(tmp_path), 'eval_summary.txt'), encoding='utf-8') as f:
            summary = f.read()
        assert 'Mean PSNR' in summary and 'LPIPS' in summary
        assert np.isfinite(report.mean_drms)


class TestAblationVariants:
    def test_variant_weights(self):
        base = TrainConfig()
        rgb = variant_config(base, 'rgb', 1)
        assert rgb.lambda2 == 0.0 and rgb.lambda4 == 0.0 and not rgb.init_from_depth and rgb.seed == 1
        depth = variant_config(base, 'rgb+depth', 2)
        assert depth.lambda2 == 0.0 and depth.lambda4 == base.lambda4
        assert variant_config(base, 'rgb+depth+event', 0) == base

    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            variant_config(TrainConfig(), 'events-only', 0)

    @pytest.mark.slow
    def test_fusion_ablation_tables(self, tiny_dataset, tmp_path):
        runs, summary = fusion_ablation(tiny_dataset, tiny_config(), str(tmp_path), seeds=(0, 1))
        assert len(runs) == 2 * len(ABLATION_VARIANTS)
        assert list(summary['variant']) == list(ABLATION_VARIANTS)
        assert np.isfinite(runs['psnr']).all() and (runs['drms'] >= 0).all()
        assert os.path.exists(os.path.join(str(tmp_path), 'ablation_summary.csv'))
        assert len(pd.read_csv(os.path.join(str(tmp_path), 'ablation_runs.csv'))) == len(runs)


@pytest.mark.slow
class TestFusionTrend:
    # bounding box of the plate and both orbits
    SCENE_DIAMETER = float(np.linalg.norm([2.4, 2.4, 1.55]))

    @pytest.fixture(scope='class')
    def orbit_dataset(self, tmp_path_factory):
        out = tmp_path_factory.mktemp('orbit_full')
        return load_dataset(generate_tiny_scene(SceneSpec(), str(out)))

    def test_each_modality_lowers_depth_error(self, orbit_dataset, tmp_path):
        _, summary = fusion_ablation(orbit_dataset, TrainConfig(checkpoint_interval=0), str(tmp_path),
                                     seeds=(0, 1, 2))
        summary = summary.set_index('variant')
        drms_means = [summary.loc[variant, 'drms'] for variant in ABLATION_VARIANTS]
        assert drms_means[0] > drms_means[1] > drms_means[2]

        full = summary.loc['rgb+depth+event']
        assert full['psnr'] >= 30.0
        assert full['drms'] <= 0.02 * self.SCENE_DIAMETER
