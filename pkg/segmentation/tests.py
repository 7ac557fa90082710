# ============================================================================
# 📌 SEGMENTATION TESTS: network, losses, optimizers, checkpoints, trainer
# ============================================================================

import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from autograd import ops
from autograd.tensor import Tape, Tensor, backward, precision
from episodes.folds import fold_for_class
from episodes.sampler import EpisodeConfig, sample_episode
from utils.exceptions import ConfigurationError, DataError, NonFiniteError, ShapeError
from volumes.phantoms import generate_phantoms
from volumes.records import PhantomSpec, VolumeKind

from .checkpoints import (
    CheckpointVersionError, CorruptCheckpointError, encode_checkpoint, load_checkpoint, save_checkpoint,
)
from .config import LossConfig, ModelConfig, TrainConfig
from .network import (
    combine_support, encode_masked, init_params, model_gradient_check, prototype, segment,
)
from .objectives import (
    MissingPrototypeError, PrototypeRegistry, class_balance_weight, nn_loss, total_loss,
    update_registry, weighted_ce,
)
from .optim import Adam, SGDMomentum, clip_grad_norm, make_optimizer
from .trainer import TrainLog, log_path_for, phase_one, phase_two, train_fold

TINY = ModelConfig(levels=2, base_channels=4, proto_dim=8, input_size=(32, 32))
DATA = generate_phantoms(PhantomSpec(n_classes=3, n_patients=3, dims=(16, 32, 32), seed=4))


def random_slice(seed, shape=(1, 32, 32)):
    return Tensor(np.random.default_rng(seed).random(shape))


def bce_oracle(pred, target, eps=1e-7):
    p = np.clip(pred, eps, 1 - eps)
    return float(np.mean(-(target * np.log(p) + (1 - target) * np.log(1 - p))))


# ============================================================================
# TEST 1: CONFIG + NETWORK
# ============================================================================
class ModelConfigTests(SimpleTestCase):

    def test_full_scale_preset(self):
        cfg = ModelConfig(full_scale=True)
        self.assertEqual(cfg.bottleneck_channels, 1024)
        self.assertEqual(cfg.proto_dim, 64)

    def test_default_bottleneck(self):
        self.assertEqual(ModelConfig().bottleneck_channels, 64)

    def test_invalid_values(self):
        with self.assertRaises(ConfigurationError):
            ModelConfig(levels=1)
        with self.assertRaises(ConfigurationError):
            ModelConfig(base_channels=1)
        with self.assertRaises(ConfigurationError):
            ModelConfig(input_size=(60, 60))


class InitTests(SimpleTestCase):

    def test_same_seed_same_params(self):
        self.assertTrue(init_params(TINY, 3).equals(init_params(TINY, 3)))
        self.assertFalse(init_params(TINY, 3).equals(init_params(TINY, 4)))

    def test_biases_zero_and_partition(self):
        params = init_params(TINY, 0)
        for name, tensor in params.named().items():
            if name.endswith(".bias"):
                self.assertFalse(tensor.data.any())
        self.assertTrue(all(n.startswith("theta.") for n in params.theta))
        self.assertTrue(all(n.startswith("phi.") for n in params.phi))
        self.assertIn("theta.proto.weight", params.theta)
        self.assertIn("phi.head.weight", params.phi)
        self.assertFalse(set(params.theta) & set(params.phi))

    def test_weight_variance_matches_fan_in(self):
        params = init_params(ModelConfig(), 0)
        pooled = []
        for name, tensor in params.named().items():
            if not name.endswith(".weight"):
                continue
            fan_in = np.prod(tensor.shape[1:])
            normalized = tensor.data.astype(np.float64) / math.sqrt(2.0 / fan_in)
            pooled.append(normalized.ravel())
            if tensor.size >= 2000:
                self.assertAlmostEqual(normalized.var(), 1.0, delta=0.2, msg=name)
        self.assertAlmostEqual(np.concatenate(pooled).var(), 1.0, delta=0.05)


class ForwardTests(SimpleTestCase):
    """
    🧠 PURPOSE: Masked U-Net shapes, ranges and mask semantics
    WHY: The support mask is the only way the model sees the target organ
    """

    def setUp(self):
        self.params = init_params(TINY, 1)
        self.image = random_slice(0)

    def test_segment_shape_and_range(self):
        probs = segment(self.params, self.image, random_slice(1)).numpy()
        self.assertEqual(probs.shape, (1, 32, 32))
        self.assertTrue(np.all(probs > 0) and np.all(probs < 1))

    def test_all_ones_mask_equals_plain_unet(self):
        """
        📌 TEST: Segment with an all-ones support mask
        EXPECTED: Bit-for-bit the unmasked U-Net forward
        """
        ones = Tensor(np.ones((1, 32, 32)))
        masked = segment(self.params, self.image, ones).numpy()
        plain = segment(self.params, self.image, None).numpy()
        np.testing.assert_array_equal(masked, plain)
        b_masked, _ = encode_masked(self.params, self.image, ones)
        b_plain, _ = encode_masked(self.params, self.image, None)
        np.testing.assert_array_equal(b_masked.numpy(), b_plain.numpy())

    def test_zero_mask_annihilates_masked_stages(self):
        bottleneck, skips = encode_masked(self.params, self.image, Tensor(np.zeros((1, 32, 32))))
        self.assertFalse(bottleneck.numpy().any())
        self.assertTrue(skips[0].numpy().any())

    def test_bottleneck_extent(self):
        cfg = ModelConfig(levels=3, base_channels=2, proto_dim=4, input_size=(32, 32))
        bottleneck, skips = encode_masked(init_params(cfg, 0), self.image, random_slice(2))
        self.assertEqual(bottleneck.shape, (1, 8, 8, 8))
        self.assertEqual(len(skips), 3)

    def test_prototype_is_deterministic(self):
        mask = random_slice(3)
        first = prototype(self.params, self.image, mask).numpy()
        second = prototype(self.params, self.image, mask).numpy()
        self.assertEqual(first.shape, (8,))
        np.testing.assert_array_equal(first, second)

    def test_prototype_length_follows_proto_dim(self):
        cfg = ModelConfig(levels=2, base_channels=2, proto_dim=64, input_size=(16, 16))
        proto = prototype(init_params(cfg, 0), random_slice(0, (1, 16, 16)), random_slice(1, (1, 16, 16)))
        self.assertEqual(proto.shape, (64,))

    def test_mask_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            segment(self.params, self.image, Tensor(np.ones((1, 16, 16))))

    def test_mask_downsampling_keeps_coverage(self):
        mask = np.zeros((1, 1, 8, 8))
        mask[0, 0, 5, 2] = 0.25
        pooled = ops.maxpool2(ops.maxpool2(Tensor(mask))).numpy()
        self.assertGreater(pooled[0, 0, 1, 0], 0)


class GradientPartitionTests(SimpleTestCase):

    def test_prototype_grads_only_reach_theta(self):
        """
        📌 TEST: Backward from an episode prototype
        EXPECTED: Encoder (theta) grads only, decoder (phi) untouched
        """
        params = init_params(TINY, 2)
        with Tape():
            backward(ops.tensor_sum(prototype(params, random_slice(0), random_slice(1))))
        self.assertTrue(any(t.grad.any() for t in params.theta.values()))
        self.assertFalse(any(t.grad.any() for t in params.phi.values()))

    def test_segment_grads_reach_both(self):
        params = init_params(TINY, 2)
        with Tape():
            backward(ops.tensor_sum(segment(params, random_slice(0), random_slice(1))))
        self.assertTrue(any(t.grad.any() for t in params.theta.values()))
        self.assertTrue(all(params.phi[n].grad.any() for n in params.phi if n.endswith(".weight")))

    def test_end_to_end_finite_differences(self):
        result = model_gradient_check(seed=0)
        self.assertTrue(result.passed, f"rel error {result.max_rel_error:.3e}")


class CombineSupportTests(SimpleTestCase):

    def test_single_mask_is_itself(self):
        mask = Tensor((np.random.default_rng(0).random((1, 8, 8)) > 0.5))
        np.testing.assert_array_equal(combine_support([(mask, VolumeKind.FULL)]).numpy(), mask.numpy())

    def test_mean_of_full_and_boxes(self):
        full = np.zeros((1, 4, 4))
        full[0, 1, 1] = 1
        box = np.zeros((1, 4, 4))
        box[0, 0:3, 0:3] = 1
        support = [(Tensor(full), VolumeKind.FULL)] + [(Tensor(box), VolumeKind.BOX)] * 3
        combined = combine_support(support).numpy()
        self.assertEqual(combined[0, 1, 1], 1.0)
        self.assertEqual(combined[0, 0, 0], 0.75)
        self.assertEqual(combined[0, 3, 3], 0.0)

    def test_order_does_not_matter(self):
        rng = np.random.default_rng(1)
        support = [(Tensor(rng.random((1, 6, 6)) > 0.5), VolumeKind.FULL) for _ in range(4)]
        np.testing.assert_array_equal(combine_support(support).numpy(), combine_support(support[::-1]).numpy())

    def test_empty_support(self):
        with self.assertRaises(ConfigurationError):
            combine_support([])


# ============================================================================
# TEST 2: OBJECTIVES
# ============================================================================
class NearestNeighbourLossTests(SimpleTestCase):
    """
    📐 PURPOSE: nn_loss reference values and invariances
    WHY: Phase 1 trains the encoder on nothing else
    """

    def test_single_class_registry_is_zero(self):
        registry = PrototypeRegistry()
        registry.update(1, np.array([0.3, -1.0, 2.0]))
        self.assertEqual(nn_loss(Tensor([1.0, 2.0, 3.0]), registry, 1).item(), 0.0)

    def test_equal_similarities_give_log_k(self):
        with precision(np.float64):
            registry = PrototypeRegistry()
            for k in range(1, 5):
                registry.update(k, np.array([0.0, 1.0, 0.0]))
            loss = nn_loss(Tensor([1.0, 0.0, 0.0]), registry, 2).item()
        self.assertAlmostEqual(loss, math.log(4), places=6)
        self.assertAlmostEqual(loss, 1.386294, places=6)

    def test_two_class_value(self):
        """
        📌 TEST: Two registry entries at a known angle
        EXPECTED: nn_loss equals 0.313262
        """
        with precision(np.float64):
            registry = PrototypeRegistry()
            registry.update(1, np.array([1.0, 0.0]))
            registry.update(2, np.array([0.0, 1.0]))
            loss = nn_loss(Tensor([1.0, 0.0]), registry, 1).item()
        self.assertAlmostEqual(loss, 0.313262, places=6)

    def test_registry_scale_invariance(self):
        rng = np.random.default_rng(0)
        p_hat = Tensor(rng.normal(size=6))
        registry = PrototypeRegistry()
        for k in (1, 2, 3):
            registry.update(k, rng.normal(size=6))
        before = nn_loss(p_hat, registry, 2).item()
        registry.set(3, registry.get(3) * 7.5)
        self.assertAlmostEqual(nn_loss(p_hat, registry, 2).item(), before, places=5)

    def test_loss_is_non_negative(self):
        rng = np.random.default_rng(5)
        registry = PrototypeRegistry()
        for k in (1, 2, 3, 4):
            registry.update(k, rng.normal(size=4))
        for _ in range(20):
            self.assertGreaterEqual(nn_loss(Tensor(rng.normal(size=4)), registry, 3).item(), 0.0)

    def test_missing_class(self):
        registry = PrototypeRegistry()
        registry.update(1, np.ones(3))
        with self.assertRaises(MissingPrototypeError):
            nn_loss(Tensor(np.ones(3)), registry, 2)


class RegistryTests(SimpleTestCase):

    def test_first_update_copies(self):
        registry = update_registry(PrototypeRegistry(), 3, np.array([1.0, 2.0]))
        np.testing.assert_array_equal(registry.get(3), [1.0, 2.0])
        self.assertEqual(registry.counts[3], 1)

    def test_fixed_point(self):
        registry = PrototypeRegistry(momentum=0.9)
        value = np.array([0.5, -0.25, 2.0])
        for _ in range(50):
            update_registry(registry, 1, value)
        np.testing.assert_allclose(registry.get(1), value, rtol=1e-6)
        self.assertEqual(registry.counts[1], 50)

    def test_moving_average(self):
        registry = PrototypeRegistry(momentum=0.9)
        registry.update(1, np.array([0.0]))
        registry.update(1, np.array([10.0]))
        self.assertAlmostEqual(float(registry.get(1)[0]), 1.0, places=5)


class WeightedCrossEntropyTests(SimpleTestCase):
    """
    ⚖️ PURPOSE: Class-balanced cross-entropy values and beta rules
    WHY: Organs cover a few percent of a slice
    """

    def test_single_pixel_value(self):
        with precision(np.float64):
            loss = weighted_ce(Tensor([[[0.5]]]), Tensor([[[1.0]]]), LossConfig(beta_mode="fixed", beta=2.0)).item()
        self.assertAlmostEqual(loss, 2 * math.log(2), places=6)
        self.assertAlmostEqual(loss, 1.386294, places=6)

    def test_unit_beta_is_plain_bce(self):
        """
        📌 TEST: Weighted CE with beta = 1 on 100 random cases
        EXPECTED: Equal to plain binary cross-entropy
        """
        rng = np.random.default_rng(0)
        cfg = LossConfig(beta_mode="fixed", beta=1.0)
        with precision(np.float64):
            for _ in range(100):
                pred = rng.uniform(0.01, 0.99, size=(1, 5, 7))
                target = (rng.random((1, 5, 7)) < 0.3).astype(np.float64)
                loss = weighted_ce(Tensor(pred), Tensor(target), cfg).item()
                self.assertAlmostEqual(loss, bce_oracle(pred, target), delta=1e-6)

    def test_perfect_prediction_is_near_zero(self):
        eps = 1e-7
        target = np.zeros((1, 4, 4))
        target[0, :2] = 1
        pred = np.where(target > 0, 1 - eps, eps)
        with precision(np.float64):
            loss = weighted_ce(Tensor(pred), Tensor(target), LossConfig(beta_mode="fixed", beta=3.0)).item()
        self.assertLessEqual(loss, 2 * eps * 3.0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        pred = rng.uniform(0.05, 0.95, size=(1, 1, 30))
        target = (rng.random((1, 1, 30)) < 0.4).astype(np.float64)
        order = rng.permutation(30)
        with precision(np.float64):
            a = weighted_ce(Tensor(pred), Tensor(target)).item()
            b = weighted_ce(Tensor(pred[..., order]), Tensor(target[..., order])).item()
        self.assertAlmostEqual(a, b, places=10)

    def test_inverse_frequency_beta(self):
        target = np.zeros((1, 4, 4))
        self.assertEqual(class_balance_weight(target), 1.0)
        target[0, 0, :4] = 1
        self.assertEqual(class_balance_weight(target), 3.0)
        target = np.zeros((1, 32, 32))
        target[0, 0, 0] = 1
        self.assertEqual(class_balance_weight(target), 100.0)
        self.assertEqual(class_balance_weight(np.ones((1, 2, 2))), 1.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            weighted_ce(Tensor(np.full((1, 2, 2), 0.5)), Tensor(np.zeros((1, 2, 3))))

    def test_total_loss(self):
        self.assertEqual(total_loss(0.0, 1.5), 1.5)
        self.assertEqual(total_loss(1.5, 0.0), 1.5)
        self.assertAlmostEqual(total_loss(0.313262, 1.386294), 1.699556, places=6)


# ============================================================================
# TEST 3: OPTIMIZERS
# ============================================================================
class OptimizerTests(SimpleTestCase):

    def _quadratic_grad(self, w):
        with Tape():
            backward(ops.tensor_sum(w * w))

    def test_zero_lr_leaves_params(self):
        for optimizer in (SGDMomentum(0.0), Adam(0.0)):
            w = Tensor([1.5, -2.0], requires_grad=True)
            self._quadratic_grad(w)
            optimizer.step({"w": w})
            np.testing.assert_array_equal(w.numpy(), np.array([1.5, -2.0], dtype=np.float32))

    def test_sgd_single_step(self):
        w = Tensor([1.0], requires_grad=True)
        self._quadratic_grad(w)
        SGDMomentum(0.1).step({"w": w})
        self.assertAlmostEqual(w.item(), 0.8, places=6)
        self.assertFalse(w.grad.any())

    def test_adam_converges_on_quadratic(self):
        with precision(np.float64):
            w = Tensor([1.0], requires_grad=True)
            optimizer = Adam(0.1)
            for _ in range(500):
                self._quadratic_grad(w)
                optimizer.step({"w": w})
        self.assertLess(abs(w.item()), 1e-3)

    def test_missing_grad(self):
        with self.assertRaises(ConfigurationError):
            SGDMomentum(0.1).step({"w": Tensor([1.0])})

    def test_clip_grad_norm(self):
        w = Tensor([0.0, 0.0], requires_grad=True)
        w.grad[:] = [3.0, 4.0]
        self.assertAlmostEqual(clip_grad_norm({"w": w}, 1.0), 5.0, places=5)
        self.assertAlmostEqual(float(np.linalg.norm(w.grad)), 1.0, places=4)
        w.grad[:] = [3.0, 4.0]
        clip_grad_norm({"w": w}, 0)
        np.testing.assert_array_equal(w.grad, [3.0, 4.0])

    def test_factory(self):
        self.assertIsInstance(make_optimizer(TrainConfig(optimizer="sgd")), SGDMomentum)
        self.assertIsInstance(make_optimizer(TrainConfig()), Adam)


# ============================================================================
# TEST 4: CHECKPOINTS
# ============================================================================
class CheckpointTests(SimpleTestCase):
    """
    💾 PURPOSE: FSPM round trips and corruption errors
    WHY: eval and predict only ever see the checkpoint
    """

    def setUp(self):
        self.params = init_params(TINY, 7)
        self.registry = PrototypeRegistry()
        self.registry.update(2, np.arange(8.0))
        self.registry.update(5, -np.arange(8.0))
        self.meta = {"config": '{"model": {}}', "digest": "ab" * 32, "test_class": 1}

    def test_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(self.params, self.registry, Path(tmp) / "m.fspm", self.meta)
            loaded = load_checkpoint(path)
            self.assertTrue(loaded.params.equals(self.params))
            self.assertEqual(list(loaded.params.theta), list(self.params.theta))
            self.assertEqual(list(loaded.params.phi), list(self.params.phi))
            self.assertEqual(loaded.registry.classes, [2, 5])
            np.testing.assert_array_equal(loaded.registry.get(5), self.registry.get(5))
            self.assertEqual(loaded.meta_text("digest"), "ab" * 32)
            self.assertEqual(loaded.meta_text("test_class"), "1")
            self.assertEqual(loaded.params.config.levels, TINY.levels)
            self.assertEqual(loaded.params.config.proto_dim, TINY.proto_dim)
            self.assertEqual(encode_checkpoint(loaded.params, loaded.registry, self.meta), path.read_bytes())

    def test_truncated_file_is_corrupt(self):
        data = encode_checkpoint(self.params, self.registry)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "cut.fspm"
            path.write_bytes(data[:len(data) // 2])
            with self.assertRaises(CorruptCheckpointError):
                load_checkpoint(path)

    def test_version_mismatch(self):
        """
        📌 TEST: FSPM bytes with the version field bumped
        EXPECTED: CheckpointVersionError
        """
        data = bytearray(encode_checkpoint(self.params, self.registry))
        data[4] = 2
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "v2.fspm"
            path.write_bytes(bytes(data))
            with self.assertRaises(CheckpointVersionError):
                load_checkpoint(path)

    def test_magic_checked(self):
        data = b"XXXX" + encode_checkpoint(self.params, self.registry)[4:]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.fspm"
            path.write_bytes(data)
            with self.assertRaises(CorruptCheckpointError):
                load_checkpoint(path)


# ============================================================================
# TEST 5: TRAINER
# ============================================================================
class PhaseTests(SimpleTestCase):

    def setUp(self):
        self.fold = fold_for_class(3, 3, 3)
        self.episode = sample_episode(self.fold, DATA, EpisodeConfig(query_size=2, seed=1), 0)
        self.params = init_params(TINY, 0)
        self.optimizer = make_optimizer(TrainConfig(lr=1e-2))
        self.loss_cfg = LossConfig()

    def _snapshot(self):
        return {n: t.data.copy() for n, t in self.params.named().items()}

    def test_phase_one_moves_only_theta(self):
        registry = PrototypeRegistry()
        # Seed another class so the loss has a gradient.
        registry.update(99, np.random.default_rng(0).normal(size=8))
        before = self._snapshot()
        phase_one(self.params, registry, self.episode, self.optimizer, self.loss_cfg, 5.0)
        after = self._snapshot()
        self.assertTrue(any(not np.array_equal(before[n], after[n]) for n in self.params.theta))
        self.assertTrue(all(np.array_equal(before[n], after[n]) for n in self.params.phi))
        self.assertIn(self.episode.class_id, registry)

    def test_phase_two_moves_theta_and_phi_not_registry(self):
        registry = PrototypeRegistry()
        registry.update(self.episode.class_id, np.ones(8))
        entries = registry.snapshot()
        before = self._snapshot()
        loss, beta = phase_two(self.params, self.episode, self.optimizer, self.loss_cfg, 5.0)
        after = self._snapshot()
        self.assertTrue(np.isfinite(loss) and beta >= 1.0)
        self.assertTrue(any(not np.array_equal(before[n], after[n]) for n in self.params.theta))
        self.assertTrue(any(not np.array_equal(before[n], after[n]) for n in self.params.phi))
        np.testing.assert_array_equal(registry.get(self.episode.class_id), entries[self.episode.class_id])


class TrainFoldTests(SimpleTestCase):
    """
    🏋️ PURPOSE: Whole-fold training runs, logs and failure modes
    WHY: This is the loop every experiment spends its time in
    """

    def setUp(self):
        self.fold = fold_for_class(3, 3, 3)
        self.episode_cfg = EpisodeConfig(query_size=2, seed=2)

    def test_zero_episodes_returns_init(self):
        result = train_fold(self.fold, DATA, TINY, self.episode_cfg, TrainConfig(episodes=0, seed=9))
        self.assertTrue(result.params.equals(init_params(TINY, 9)))
        self.assertEqual(len(result.log.records), 0)
        self.assertEqual(len(result.registry), 0)

    def test_runs_are_reproducible(self):
        """
        📌 TEST: Two trainings from the same config and seed
        EXPECTED: Identical loss traces and checkpoint bytes; the JSONL log replays the trace
        """
        cfg = TrainConfig(episodes=3, seed=1, weak_support=True)
        with tempfile.TemporaryDirectory() as tmp:
            first = train_fold(self.fold, DATA, TINY, self.episode_cfg, cfg, checkpoint_path=Path(tmp) / "a.fspm")
            second = train_fold(self.fold, DATA, TINY, self.episode_cfg, cfg, checkpoint_path=Path(tmp) / "b.fspm")
            self.assertEqual(first.log.loss_trace(), second.log.loss_trace())
            self.assertEqual((Path(tmp) / "a.fspm").read_bytes(), (Path(tmp) / "b.fspm").read_bytes())
            written = TrainLog.read_jsonl(log_path_for(Path(tmp) / "a.fspm"))
            self.assertEqual(written.loss_trace(), first.log.loss_trace())

    def test_registry_only_holds_train_classes(self):
        result = train_fold(self.fold, DATA, TINY, self.episode_cfg, TrainConfig(episodes=6, seed=3))
        self.assertTrue(set(result.registry.classes) <= set(self.fold.train_classes))
        self.assertEqual([r.episode for r in result.log.records], list(range(6)))
        for record in result.log.records:
            self.assertNotEqual(record.class_id, self.fold.test_class)
            self.assertTrue(np.isfinite(record.nn_loss) and np.isfinite(record.wce_loss))

    def test_divergence_aborts_with_episode_and_tensor(self):
        """
        📌 TEST: SGD with an absurd step size and no clipping
        EXPECTED: NonFiniteError carrying the episode index and the tensor name,
                  with exactly the completed episodes in the training log
        """
        cfg = TrainConfig(episodes=5, seed=1, optimizer="sgd", lr=1e38, momentum=0.0, clip_norm=0.0)
        with tempfile.TemporaryDirectory() as tmp:
            checkpoint = Path(tmp) / "diverged.fspm"
            with self.assertRaises(NonFiniteError) as caught:
                train_fold(self.fold, DATA, TINY, self.episode_cfg, cfg, checkpoint_path=checkpoint)
            error = caught.exception
            self.assertIn(error.episode, range(5))
            self.assertTrue(error.tensor_name)
            # 📜 SNAPSHOT: Completed episodes were logged, the failing one was not
            logged = TrainLog.read_jsonl(log_path_for(checkpoint))
            self.assertEqual([r.episode for r in logged.records], list(range(error.episode)))

    def test_non_finite_parameter_is_named(self):
        params = init_params(TINY, 2)
        name = next(iter(params.theta))
        params.theta[name].data[...] = np.nan
        with self.assertRaises(NonFiniteError) as caught:
            train_fold(self.fold, DATA, TINY, self.episode_cfg, TrainConfig(episodes=2, seed=2), params=params)
        self.assertEqual(caught.exception.episode, 0)
        self.assertEqual(caught.exception.tensor_name, name)

    def test_unwritable_log_is_data_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            blocker = Path(tmp) / "blocker"
            blocker.write_text("not a directory")
            with self.assertRaises(DataError):
                train_fold(self.fold, DATA, TINY, self.episode_cfg, TrainConfig(episodes=1),
                           checkpoint_path=blocker / "m.fspm")
