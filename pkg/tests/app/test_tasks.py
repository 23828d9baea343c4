import numpy as np

import tests
from tests import tiny_task, tiny_train, tiny_vit
from vipamin_app.errors import ParameterError
from vipamin_app.tasks import (atom_basis, discriminative_basis, few_shot_sample, make_pretrain_task,
                               make_shifted_task, pretrain_backbone, vit_config_for)
from vipamin_app.vit import FrozenBackbone


class TestTasks(tests.TestCase):
    def setUp(self):
        self.pretrain = tiny_task(seed=5)

    def test_sizes(self):
        dataset = make_pretrain_task(self.pretrain)
        self.assertEqual((30, 4, 4), dataset.images.shape)
        self.assertEqual(18, len(dataset.train))
        self.assertEqual(6, len(dataset.val))
        self.assertEqual(6, len(dataset.test))
        np.testing.assert_array_equal([6, 6, 6], dataset.class_counts("train"))

    def test_deterministic(self):
        first = make_pretrain_task(self.pretrain)
        second = make_pretrain_task(self.pretrain)
        np.testing.assert_array_equal(first.images, second.images)
        other = make_pretrain_task(tiny_task(seed=6))
        self.assertFalse(np.array_equal(first.images, other.images))

    def test_zero_shift_matches_pretraining(self):
        pretrain = make_pretrain_task(self.pretrain)
        shifted = make_shifted_task(tiny_task(seed=5, shift_angle=0.0), self.pretrain)
        np.testing.assert_array_equal(pretrain.images, shifted.images)
        np.testing.assert_array_equal(pretrain.labels, shifted.labels)
        np.testing.assert_array_equal(pretrain.splits, shifted.splits)

    def test_orthogonal_shift(self):
        a = discriminative_basis(self.pretrain)
        shifted = discriminative_basis(tiny_task(seed=9, shift_angle=np.pi / 2), self.pretrain)
        np.testing.assert_allclose(a.T @ shifted, np.zeros((2, 2)), atol=1e-12)
        np.testing.assert_allclose(shifted.T @ shifted, np.eye(2), atol=1e-12)

    def test_basis_orthonormal(self):
        q = atom_basis(self.pretrain)
        np.testing.assert_allclose(q.T @ q, np.eye(4), atol=1e-12)

    def test_shift_angle_monotone(self):
        a = discriminative_basis(self.pretrain)
        overlaps = [np.linalg.norm(a.T @ discriminative_basis(tiny_task(shift_angle=t), self.pretrain))
                    for t in (0.0, 0.5, 1.0, 1.5)]
        self.assertEqual(sorted(overlaps, reverse=True), overlaps)

    def test_no_noise(self):
        dataset = make_pretrain_task(tiny_task(noise_sigma=0.0))
        train = dataset.train
        for label in range(3):
            members = train.images[train.labels == label]
            np.testing.assert_array_equal(np.broadcast_to(members[0], members.shape), members)

    def test_signal_subspace(self):
        spec = tiny_task(noise_sigma=0.0)
        dataset = make_shifted_task(tiny_task(noise_sigma=0.0, shift_angle=0.7), spec)
        atoms = discriminative_basis(tiny_task(shift_angle=0.7), spec)
        patches = dataset.images.reshape(-1, 4)
        np.testing.assert_allclose(patches - patches @ atoms @ atoms.T, np.zeros_like(patches), atol=1e-12)

    def test_shifted_mismatch(self):
        with self.assertRaises(ParameterError):
            make_shifted_task(tiny_task(signal_rank=1), self.pretrain)

    def test_shape_location(self):
        spec = tiny_task(kind="shape-location", num_classes=4, noise_sigma=0.0)
        dataset = make_pretrain_task(spec)
        for label in range(4):
            image = dataset.images[dataset.labels == label][0]
            norms = np.linalg.norm(image, axis=1)
            self.assertEqual(label, int(np.argmax(norms)))
            self.assertAlmostEqual(3.0, norms[label])
            self.assertEqual(3, int(np.sum(norms < 1e-12)))

    def test_shape_orientation(self):
        dataset = make_pretrain_task(tiny_task(kind="shape-orientation", noise_sigma=0.0))
        norms = np.linalg.norm(dataset.images, axis=2)
        np.testing.assert_array_equal(np.ones(len(dataset.labels)), np.sum(norms > 1e-12, axis=1))


class TestFewShot(tests.TestCase):
    def setUp(self):
        self.dataset = make_pretrain_task(tiny_task(num_classes=3))

    def test_sizes(self):
        sample = few_shot_sample(self.dataset, 1)
        self.assertEqual(3, len(sample.train))
        np.testing.assert_array_equal([1, 1, 1], sample.class_counts("train"))
        np.testing.assert_array_equal(self.dataset.test.images, sample.test.images)
        self.assertEqual(len(self.dataset.val), len(sample.val))

    def test_subset_and_seeded(self):
        sample = few_shot_sample(self.dataset, 4, seed=3)
        train = self.dataset.train.images.reshape(len(self.dataset.train), -1)
        for image in sample.train.images.reshape(12, -1):
            self.assertTrue(np.any(np.all(train == image, axis=1)))
        np.testing.assert_array_equal(sample.images, few_shot_sample(self.dataset, 4, seed=3).images)

    def test_too_few(self):
        with self.assertRaises(ParameterError):
            few_shot_sample(self.dataset, 7)


class TestPretrain(tests.TestCase):
    def test_vit_config_for(self):
        config = vit_config_for(tiny_task(num_classes=5, patch_grid=(1, 3)), tiny_vit())
        self.assertEqual((1, 3), config.patch_grid)
        self.assertEqual(5, config.num_classes)

    def test_zero_epochs(self):
        spec = tiny_task()
        backbone = pretrain_backbone(spec, tiny_vit(), tiny_train(epochs=0, seed=4))
        self.assertEqual(FrozenBackbone.random(tiny_vit(), seed=4).digest(), backbone.digest())

    def test_pretrain(self):
        spec = tiny_task()
        backbone = pretrain_backbone(spec, tiny_vit(), tiny_train(epochs=1))
        self.assertEqual((8, 3), backbone.head_w.shape)
        self.assertNotEqual(FrozenBackbone.random(tiny_vit()).digest(), backbone.digest())
