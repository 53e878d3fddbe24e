import math
import os
import shutil
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd

# Add the parent directory to the path so we can import our modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config.experiment import parse_config
from core.bitstream import BitMode
from core.channel_model import ArrayGeometry, DatasetConfig, generate_dataset
from core.evaluator import (CSV_COLUMNS, NMSE_FLOOR_DB, MetricsReport, allocate_bits,
                            attention_distance, ber_sweep, bpd_of, default_splits, evaluate_model, nmse,
                            param_count, phase_nmse, plot_script, reports_frame, run_comparison,
                            weight_attention, write_suite)
from core.exceptions import ConfigError, InvalidArgumentError
from core.feedback_models import ModelConfig, Variant, build_model
from utils.rng import keyed_rng


def tiny_dataset():
    cfg = DatasetConfig(geometry=ArrayGeometry(n_tx=8, n_rx=1), n_groups=30, users_per_group=2, seed=4)
    return generate_dataset(cfg, threads=1)


def untrained(variant=Variant.COCSINET, users=2, bits=4, **overrides):
    cfg = ModelConfig(variant=variant, n_rx=1, n_tx=8, feedback_bits=bits, n_users=users, **overrides)
    return build_model(cfg, keyed_rng(0))


class TestMetrics(unittest.TestCase):
    """Test cases for NMSE and related metrics"""

    def setUp(self):
        rng = keyed_rng(0, 41)
        self.H = rng.standard_normal((5, 2, 4)) + 1j * rng.standard_normal((5, 2, 4))
        self.H_hat = self.H + 0.3 * (rng.standard_normal((5, 2, 4)) + 1j * rng.standard_normal((5, 2, 4)))

    def test_identities(self):
        self.assertEqual(nmse(self.H, self.H), NMSE_FLOOR_DB)
        self.assertAlmostEqual(nmse(self.H, np.zeros_like(self.H)), 0.0, delta=1e-9)
        self.assertAlmostEqual(nmse(self.H, 2 * self.H), 0.0, delta=1e-9)
        self.assertAlmostEqual(nmse(np.ones((1, 4)), 0.5 * np.ones((1, 4))), 10 * math.log10(0.25), places=9)

    def test_scale_invariance(self):
        base = nmse(self.H, self.H_hat)
        for c in (0.1, 10.0):
            self.assertAlmostEqual(nmse(c * self.H, c * self.H_hat), base, delta=1e-9)

    def test_matches_scalar_loop(self):
        ratios = []
        for b in range(self.H.shape[0]):
            error = sum(abs(self.H_hat[b].flat[i] - self.H[b].flat[i]) ** 2 for i in range(self.H[b].size))
            power = sum(abs(v) ** 2 for v in self.H[b].flat)
            ratios.append(error / power)
        self.assertAlmostEqual(nmse(self.H, self.H_hat), 10 * math.log10(np.mean(ratios)), places=9)

    def test_zero_norm_samples_are_excluded(self):
        H = np.concatenate([np.zeros((1, 2, 4)), self.H])
        H_hat = np.concatenate([np.ones((1, 2, 4)), self.H_hat])
        with self.assertLogs('core.evaluator', level='WARNING'):
            self.assertAlmostEqual(nmse(H, H_hat), nmse(self.H, self.H_hat), places=12)
        with self.assertRaises(InvalidArgumentError):
            nmse(self.H, self.H_hat[:, :1])

    def test_phase_nmse(self):
        phase = np.angle(self.H)
        magnitude = np.abs(self.H)
        self.assertEqual(phase_nmse(phase, phase, magnitude, self.H), NMSE_FLOOR_DB)
        masked = magnitude.copy()
        masked[:, 0, 0] = 0.0
        shifted = phase.copy()
        shifted[:, 0, 0] += math.pi
        self.assertEqual(phase_nmse(phase, shifted, masked, self.H), NMSE_FLOOR_DB)
        error = phase - np.angle(self.H_hat)
        expected = np.mean(np.sum((error * magnitude) ** 2, axis=(1, 2)) / np.sum(magnitude ** 2, axis=(1, 2)))
        self.assertAlmostEqual(phase_nmse(phase, np.angle(self.H_hat), magnitude, self.H),
                               10 * math.log10(expected), places=9)

    def test_attention_profile(self):
        model = untrained()
        profile = weight_attention(model.encoder_list[0])
        self.assertEqual(profile.values.shape, (8,))
        self.assertEqual(profile.values.max(), 1.0)
        self.assertEqual(attention_distance(profile, profile), 0.0)
        self.assertGreater(attention_distance(profile, weight_attention(model.encoder_list[1])), 0.0)
        self.assertEqual(list(profile.to_frame().columns), ['index', 'w_normalized'])

    def test_accounting(self):
        model = untrained()
        self.assertEqual(param_count(model), model.param_count())
        self.assertAlmostEqual(bpd_of(model), 4 / 8)


class TestEvaluation(unittest.TestCase):
    """Test cases for evaluation through the bit path"""

    @classmethod
    def setUpClass(cls):
        cls.dataset = tiny_dataset()

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_zero_ber_matches_clean_evaluation(self):
        model = untrained()
        clean = evaluate_model(model, self.dataset, "test", eval_seed=3)
        again = evaluate_model(model, self.dataset, "test", ber=0.0, corruption_seed=5, eval_seed=3)
        self.assertEqual(clean.nmse_db, again.nmse_db)
        np.testing.assert_array_equal(clean.reconstruction.magnitude, again.reconstruction.magnitude)

    def test_ber_sweep(self):
        model = untrained()
        reports = ber_sweep(model, self.dataset, [0.0, 0.1, 0.5], n_seeds=3, model_tag="coop")
        self.assertEqual([r.ber for r in reports], [0.0, 0.1, 0.5])
        self.assertAlmostEqual(reports[0].nmse_db, evaluate_model(model, self.dataset, "test").nmse_db, places=9)
        with self.assertRaises(InvalidArgumentError):
            ber_sweep(model, self.dataset, [0.1], n_seeds=0)

    def test_phase_model_reports_both_metrics(self):
        model = untrained(Variant.MDPF2, users=1)
        result = evaluate_model(model, self.dataset, "test")
        self.assertFalse(math.isnan(result.phase_nmse_db))
        self.assertFalse(math.isnan(result.nmse_db))
        self.assertEqual(result.reconstruction.phase.shape[1], 1)

    def test_allocate_bits(self):
        def family(variant):
            return lambda bits: untrained(variant, users=1, bits=bits)

        splits = default_splits(8, BitMode.BINARIZE, 1)
        self.assertEqual(splits[0], (0, 8))
        self.assertEqual(splits[-1], (8, 0))
        best, table = allocate_bits(8, family(Variant.ALONE), family(Variant.MDPF2), self.dataset, splits)
        self.assertEqual(list(table.columns), ['mag_bits', 'phase_bits', 'nmse_db'])
        row = table.loc[table['nmse_db'].idxmin()]
        self.assertEqual(best, (int(row['mag_bits']), int(row['phase_bits'])))
        with self.assertRaises(InvalidArgumentError):
            allocate_bits(8, family(Variant.ALONE), family(Variant.MDPF2), self.dataset, [(3, 3)])

    def test_write_suite(self):
        reports = [MetricsReport('demo', name, 0.1, -3.0, seed=s, seconds=1.5)
                   for name in ('alone', 'cocsinet') for s in (0, 1)]
        written = write_suite('demo', reports, Path(self.temp_dir), deterministic=True)
        names = sorted(p.name for p in written)
        self.assertEqual(names, ['demo-alone.csv', 'demo-cocsinet.csv', 'demo.csv', 'demo.gp'])
        merged = pd.read_csv(Path(self.temp_dir) / 'demo.csv')
        self.assertEqual(list(merged.columns), CSV_COLUMNS)
        self.assertTrue((merged['seconds'] == 0.0).all())
        script = plot_script('demo', {'alone': 'demo-alone.csv'})
        self.assertIn("'demo-alone.csv' using 3:4", script)
        self.assertEqual(len(reports_frame(reports)), 4)


class TestComparisons(unittest.TestCase):
    """Test cases for comparison suites at toy scale"""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def toy_config(self, *extra):
        overrides = ['dataset.n_tx=8', 'dataset.n_groups=24', 'train.epochs=1', 'train.batch_size=4',
                     'eval.seeds=0', 'eval.bpd_list=0.5', 'train.deterministic=true', *extra]
        return parse_config(None, overrides)

    def test_coop_vs_alone(self):
        cfg = self.toy_config()
        reports = run_comparison('coop_vs_alone', cfg, out_dir=Path(self.temp_dir), threads=2)
        self.assertEqual([r.model for r in reports], ['alone', 'cocsinet'])
        self.assertTrue((Path(self.temp_dir) / 'coop_vs_alone.csv').is_file())
        self.assertTrue((Path(self.temp_dir) / 'coop_vs_alone.gp').is_file())
        again = run_comparison('coop_vs_alone', cfg, threads=1)
        self.assertEqual([r.nmse_db for r in reports], [r.nmse_db for r in again])

    def test_lstm_suite_needs_receive_rows(self):
        with self.assertRaises(ConfigError):
            run_comparison('lstm_vs_fc', self.toy_config())

    def test_unknown_suite(self):
        with self.assertRaises(InvalidArgumentError):
            run_comparison('nonsense', self.toy_config())

    def test_finetune_suite_rows(self):
        cfg = self.toy_config('finetune.n_samples_list=0, 4', 'finetune.epochs=1')
        reports = run_comparison('finetune', cfg)
        self.assertEqual([r.model for r in reports],
                         ['original', 'mismatch', 'finetune-0', 'finetune-0-original',
                          'finetune-4', 'finetune-4-original'])
        self.assertEqual(reports[1].nmse_db, reports[2].nmse_db)


if __name__ == '__main__':
    unittest.main()
