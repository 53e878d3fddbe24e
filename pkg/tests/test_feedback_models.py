import json
import math
import os
import sys
import unittest
from dataclasses import replace

import numpy as np

# Add the parent directory to the path so we can import our modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core import autograd as ag
from core.autograd import Tensor
from core.bitstream import BitMode
from core.exceptions import ConfigError, ContractError
from core.feedback_models import (CooperativeModel, FeedbackBatch, IndependentModel, ModelConfig,
                                  PhaseFeedbackModel, Variant, build_benchmarks, build_model)
from core.layers import BatchNorm, Mode, ParamSet
from utils.rng import keyed_rng


def tiny_model_config(**overrides) -> ModelConfig:
    fields = dict(variant=Variant.COCSINET, n_rx=1, n_tx=8, feedback_bits=4, n_users=2)
    fields.update(overrides)
    return ModelConfig(**fields)


def tiny_batch(size=6, users=2, n_rx=1, n_tx=8, seed=0) -> FeedbackBatch:
    rng = keyed_rng(seed, 31)
    magnitude = rng.uniform(0.0, 1.0, (size, users, n_rx, n_tx))
    phase = rng.uniform(-math.pi, math.pi, (size, users, n_rx, n_tx))
    return FeedbackBatch(magnitude, phase)


class TestModelConfig(unittest.TestCase):
    """Test cases for model configuration rules"""

    def test_cooperation_needs_two_users(self):
        with self.assertRaises(ConfigError):
            tiny_model_config(n_users=1)
        with self.assertRaises(ConfigError):
            tiny_model_config(variant=Variant.BENCHMARK3, n_users=1)

    def test_quantize_bits_must_divide(self):
        cfg = tiny_model_config(bit_mode=BitMode.QUANTIZE, bits_per_value=4, feedback_bits=6)
        with self.assertRaises(ConfigError):
            build_model(cfg, keyed_rng(0))

    def test_lstm_needs_receive_rows(self):
        with self.assertRaises(ConfigError):
            build_model(tiny_model_config(lstm_refine=True), keyed_rng(0))

    def test_json_round_trip(self):
        cfg = tiny_model_config(variant=Variant.MDPF2, n_users=1, bit_mode=BitMode.QUANTIZE, feedback_bits=8)
        self.assertEqual(ModelConfig.from_json(cfg.to_json()), cfg)


class TestFeedbackModels(unittest.TestCase):
    """Test cases for encoder/decoder assemblies"""

    def test_every_variant_trains_and_decodes(self):
        batch = tiny_batch()
        for variant in Variant:
            users = 1 if variant.is_phase else 2
            model = build_model(tiny_model_config(variant=variant, n_users=users), keyed_rng(0, 1))
            outputs = model(batch, Mode.TRAIN, keyed_rng(1))
            loss = model.loss(batch, outputs)
            loss.backward()
            for name, tensor in ParamSet.from_module(model):
                self.assertIsNotNone(tensor.grad, f"{variant.value}: {name}")

            bits = model.emit_bits(batch, keyed_rng(2))
            self.assertEqual(bits.shape, (6, users, 4), variant.value)
            self.assertTrue(set(np.unique(bits)) <= {0, 1})
            recon = model.decode_bits(bits)
            if variant.is_phase:
                self.assertIsNone(recon.magnitude)
                self.assertEqual(recon.phase.shape, (6, 1, 1, 8))
                self.assertTrue(np.all(np.abs(recon.phase) <= math.pi + 1e-6))
            else:
                self.assertEqual(recon.magnitude.shape, (6, users, 1, 8))
                self.assertTrue(np.all((recon.magnitude >= 0) & (recon.magnitude <= 1)))

    def test_quantized_feedback_is_deterministic(self):
        cfg = tiny_model_config(bit_mode=BitMode.QUANTIZE, bits_per_value=2, feedback_bits=8)
        model = build_model(cfg, keyed_rng(0))
        batch = tiny_batch()
        np.testing.assert_array_equal(model.emit_bits(batch), model.emit_bits(batch))
        self.assertEqual(model.emit_bits(batch).shape, (6, 2, 8))

    def test_same_seed_same_weights(self):
        a = build_model(tiny_model_config(), keyed_rng(5))
        b = build_model(tiny_model_config(), keyed_rng(5))
        for name, value in a.state_dict().items():
            np.testing.assert_array_equal(value, b.state_dict()[name])

    def test_cooperative_model_checks_user_count(self):
        model = build_model(tiny_model_config(), keyed_rng(0))
        with self.assertRaises(ContractError):
            model(tiny_batch(users=3), Mode.INFER, keyed_rng(1))
        with self.assertRaises(ContractError):
            model.decode_bits(np.zeros((2, 2, 5), dtype=np.uint8))

    def test_independent_model_uses_leading_users(self):
        model = build_model(tiny_model_config(variant=Variant.ALONE, n_users=1), keyed_rng(0))
        self.assertEqual(model.emit_bits(tiny_batch(users=2), keyed_rng(1)).shape, (6, 1, 4))

    def test_lstm_refinement(self):
        cfg = tiny_model_config(n_rx=2, n_tx=4, lstm_refine=True)
        model = build_model(cfg, keyed_rng(0))
        plain = build_model(replace(cfg, lstm_refine=False), keyed_rng(0))
        self.assertGreater(model.param_count(), plain.param_count())
        batch = tiny_batch(n_rx=2, n_tx=4)
        outputs = model(batch, Mode.TRAIN, keyed_rng(1))
        self.assertEqual(outputs.magnitude[0].shape, (6, 2, 4))
        recon = model.decode_bits(model.emit_bits(batch, keyed_rng(2)))
        self.assertTrue(np.all((recon.magnitude >= 0) & (recon.magnitude <= 1)))

    def test_benchmark_topologies(self):
        cfg = tiny_model_config()
        rng = keyed_rng(0)
        b1, b2, b3 = (build_benchmarks(which, cfg, rng) for which in (1, 2, 3))
        self.assertIsInstance(b1, IndependentModel)
        self.assertGreater(b2.param_count(), b1.param_count())
        self.assertIsInstance(b3, CooperativeModel)
        self.assertEqual(len(b3.shared_decoders), 2)
        self.assertEqual(b1.feedback_bits, b3.feedback_bits)
        cooperative = build_model(cfg, rng)
        self.assertEqual(len(cooperative.shared_decoders), 1)
        self.assertGreater(cooperative.param_count(), b1.param_count())

    def test_tied_weights_are_shared(self):
        untied = build_model(tiny_model_config(), keyed_rng(0))
        tied = build_model(tiny_model_config(tied=True), keyed_rng(0))
        self.assertLess(tied.param_count(), untied.param_count())
        self.assertIs(tied.encoders[0], tied.encoders[1])
        names = [name for name, _ in tied.named_parameters()]
        self.assertEqual(len(names), len(set(names)))
        tied.load_state_dict(tied.state_dict())

    def test_tied_batch_norm_sees_all_users_at_once(self):
        model = build_model(tiny_model_config(tied=True), keyed_rng(0))
        batch = tiny_batch()
        encoder = model.encoders[0]
        norm = next(layer for layer in encoder.body if isinstance(layer, BatchNorm))
        stacked = Tensor(np.concatenate(model.encoder_inputs(batch), axis=0).astype(ag.get_default_dtype()))
        first_dense = encoder.dense_layers()[0](stacked, Mode.INFER).data
        expected = (1.0 - norm.momentum) * first_dense.mean(axis=0)

        outputs = model(batch, Mode.TRAIN, keyed_rng(1))
        np.testing.assert_allclose(norm.running_mean, expected, rtol=1e-4, atol=1e-6)
        self.assertEqual([m.shape for m in outputs.magnitude], [(6, 1, 8), (6, 1, 8)])
        model.loss(batch, outputs).backward()
        for name, p in model.named_parameters():
            self.assertIsNotNone(p.grad, name)

    def test_phase_model_inputs(self):
        batch = tiny_batch(users=1)
        mdpf2 = build_model(tiny_model_config(variant=Variant.MDPF2, n_users=1), keyed_rng(0))
        naive = build_model(tiny_model_config(variant=Variant.NAIVE, n_users=1), keyed_rng(0))
        self.assertIsInstance(mdpf2, PhaseFeedbackModel)
        self.assertEqual(mdpf2.encoder_inputs(batch)[0].shape, (6, 16))
        self.assertEqual(naive.encoder_inputs(batch)[0].shape, (6, 8))
        self.assertTrue(np.all(np.abs(naive.encoder_inputs(batch)[0]) <= 1.0))

    def test_topology_metadata(self):
        model = build_model(tiny_model_config(), keyed_rng(0))
        topology = json.loads(model.topology())
        self.assertEqual(topology['params'], model.param_count())
        self.assertIn('encoders.0', topology['dense'])
        self.assertEqual(topology['dense']['encoders.0'][0], [8, 16])
        self.assertFalse(any(key.startswith('_') for key in topology['dense']))


if __name__ == '__main__':
    unittest.main()
