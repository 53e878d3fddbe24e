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

from core.channel_model import ArrayGeometry, DatasetConfig, generate_dataset
from core.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint
from core.exceptions import ConfigError, ContractError, FormatError, InvalidArgumentError, \
    MissingArtifactError, UnsupportedVersionError
from core.feedback_models import ModelConfig, Variant, build_model
from core.trainer import (TRAINLOG_COLUMNS, EpochRecord, TrainConfig, TrainLog, fine_tune, load_model_checkpoint,
                          load_training_state, resume, train)
from utils.rng import STREAM_INIT, keyed_rng


def tiny_dataset(**overrides):
    fields = dict(geometry=ArrayGeometry(n_tx=8, n_rx=1), n_groups=30, users_per_group=2, seed=3)
    fields.update(overrides)
    return generate_dataset(DatasetConfig(**fields), threads=1)


def tiny_model(seed=0, **overrides):
    fields = dict(variant=Variant.COCSINET, n_rx=1, n_tx=8, feedback_bits=4, n_users=2)
    fields.update(overrides)
    return build_model(ModelConfig(**fields), keyed_rng(seed, STREAM_INIT))


class TestTrainConfig(unittest.TestCase):
    def test_batch_norm_needs_batches_of_two(self):
        with self.assertRaises(ConfigError) as ctx:
            TrainConfig(batch_size=1)
        self.assertEqual(ctx.exception.key, "train.batch_size")

    def test_negative_learning_rate(self):
        with self.assertRaises(ConfigError):
            TrainConfig(lr=-0.1)


class TestTraining(unittest.TestCase):
    """Test cases for the training loop and checkpoints"""

    @classmethod
    def setUpClass(cls):
        cls.dataset = tiny_dataset()

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.cfg = TrainConfig(batch_size=5, epochs=3, seed=0)

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_train_writes_checkpoints_and_log(self):
        out = Path(self.temp_dir)
        model, log = train(tiny_model(), self.dataset, self.cfg, out_dir=out)
        self.assertEqual([r.epoch for r in log.records], [1, 2, 3])
        self.assertIn(log.best_epoch, (1, 2, 3))
        self.assertTrue((out / "best.cocw").is_file())
        self.assertTrue((out / "last.cocw").is_file())

        restored, metadata = load_model_checkpoint(out / "best.cocw")
        self.assertEqual(metadata['tag'], 'best')
        self.assertEqual(int(metadata['epoch']), log.best_epoch)
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(restored.state_dict()[name], value)

        tensors, _ = load_checkpoint(out / "last.cocw")
        self.assertIn('adam.t', tensors)
        frame = log.to_frame(deterministic=True)
        self.assertEqual(list(frame.columns), TRAINLOG_COLUMNS)
        self.assertTrue((frame['seconds'] == 0.0).all())

    def test_training_is_reproducible(self):
        a, log_a = train(tiny_model(), self.dataset, self.cfg)
        b, log_b = train(tiny_model(), self.dataset, self.cfg)
        self.assertEqual([r.train_loss for r in log_a.records], [r.train_loss for r in log_b.records])
        for name, value in a.state_dict().items():
            np.testing.assert_array_equal(b.state_dict()[name], value)

    def test_zero_learning_rate_keeps_weights(self):
        model = tiny_model()
        before = {name: p.data.copy() for name, p in model.named_parameters()}
        train(model, self.dataset, TrainConfig(batch_size=5, epochs=2, lr=0.0))
        for name, p in model.named_parameters():
            np.testing.assert_array_equal(p.data, before[name])

    def test_empty_validation_falls_back_to_training_loss(self):
        dataset = tiny_dataset(n_groups=20, split_fractions=(0.8, 0.0, 0.2))
        with self.assertLogs('core.trainer', level='WARNING'):
            _, log = train(tiny_model(), dataset, TrainConfig(batch_size=4, epochs=1))
        self.assertEqual(log.records[0].val_loss, log.records[0].train_loss)

    def test_fine_tune(self):
        model, _ = train(tiny_model(), self.dataset, TrainConfig(batch_size=5, epochs=1))
        state = model.state_dict()
        same, log = fine_tune(model, self.dataset, 0, self.cfg)
        self.assertEqual(log.records, [])
        for name, value in same.state_dict().items():
            np.testing.assert_array_equal(value, state[name])
        with self.assertRaises(InvalidArgumentError):
            fine_tune(model, self.dataset, 10 ** 6, self.cfg)
        _, log = fine_tune(model, tiny_dataset(seed=9), 10, TrainConfig(batch_size=5, epochs=2))
        self.assertEqual(len(log.records), 2)

    def test_resume_restores_optimizer_state(self):
        out = Path(self.temp_dir)
        n_batches = len(self.dataset.split_indices("train")) // 5
        train(tiny_model(), self.dataset, TrainConfig(batch_size=5, epochs=2, seed=0), out_dir=out)
        model, adam, metadata = load_training_state(out / "last.cocw")
        self.assertEqual(metadata['epoch'], '2')
        self.assertEqual(adam.t, 2 * n_batches)
        self.assertEqual(set(adam.m), {name for name, _ in model.named_parameters()})
        self.assertTrue(any(np.any(m != 0) for m in adam.m.values()))

        _, log = resume(out / "last.cocw", self.dataset, self.cfg, out_dir=out)
        self.assertEqual([r.epoch for r in log.records], [3])
        self.assertIn(log.best_epoch, (1, 2, 3))
        _, adam, metadata = load_training_state(out / "last.cocw")
        self.assertEqual((adam.t, metadata['epoch']), (3 * n_batches, '3'))

        _, uninterrupted = train(tiny_model(), self.dataset, self.cfg)
        self.assertAlmostEqual(log.records[0].train_loss, uninterrupted.records[2].train_loss, places=4)

        _, finished = resume(out / "last.cocw", self.dataset, self.cfg)
        self.assertEqual(finished.records, [])
        with self.assertRaises(ContractError):
            load_training_state(out / "best.cocw")

    def test_appended_log_keeps_earlier_epochs(self):
        path = Path(self.temp_dir) / "trainlog.csv"
        TrainLog([EpochRecord(1, 0.5, 0.6, 1.0), EpochRecord(2, 0.4, 0.5, 1.0)]).save_csv(path)
        TrainLog([EpochRecord(2, 0.3, 0.4, 1.0), EpochRecord(3, 0.2, 0.3, 1.0)]).save_csv(path, append=True)
        frame = pd.read_csv(path)
        self.assertEqual(list(frame['epoch']), [1, 2, 3])
        self.assertEqual(list(frame['train_loss']), [0.5, 0.3, 0.2])
        TrainLog().save_csv(path, append=True)
        self.assertEqual(len(pd.read_csv(path)), 3)

    def test_missing_checkpoint(self):
        with self.assertRaises(MissingArtifactError) as ctx:
            load_model_checkpoint(Path(self.temp_dir) / "absent.cocw")
        self.assertEqual(ctx.exception.category, "missing-checkpoint")


class TestCheckpointCodec(unittest.TestCase):
    """Test cases for the COCW format"""

    def test_round_trip_with_metadata(self):
        tensors = {'w': np.arange(6, dtype=np.float32).reshape(2, 3), 'scalar': np.float32(2.5)}
        restored, metadata = decode_checkpoint(encode_checkpoint(tensors, {'tag': 'best', 'note': 'ü'}))
        np.testing.assert_array_equal(restored['w'], tensors['w'])
        self.assertEqual(restored['scalar'].shape, ())
        self.assertEqual(metadata, {'tag': 'best', 'note': 'ü'})

    def test_malformed_inputs(self):
        data = encode_checkpoint({'w': np.ones(4, dtype=np.float32)})
        with self.assertRaises(FormatError):
            decode_checkpoint(data[:-1])
        with self.assertRaises(FormatError):
            decode_checkpoint(data + b"\x00")
        with self.assertRaises(FormatError):
            decode_checkpoint(b"NOPE" + data[4:])
        with self.assertRaises(UnsupportedVersionError):
            decode_checkpoint(data[:4] + (2).to_bytes(2, "little") + data[6:])


if __name__ == '__main__':
    unittest.main()
