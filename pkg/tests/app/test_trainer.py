import numpy as np
from mock import patch

import tests
from tests import perturbed_backbone, tiny_task, tiny_train, tiny_vit
from vipamin_app.config import BackboneSource, ExperimentConfig, InitConfig, SweepConfig
from vipamin_app.diagnostics import deep_projection_energy
from vipamin_app.errors import DivergenceError, ParameterError
from vipamin_app.tasks import make_pretrain_task
from vipamin_app.trainer import (EpochMetrics, OptimizerState, RunRecord, SweepCell, adamw_step, diagnostic_batch,
                                 fine_tune, fit_backbone, linear_probe_accuracy, loss_and_grads, lp_ratio, lr_schedule,
                                 cell_seed, select_best, sweep, train)
from vipamin_app.vit import FrozenBackbone, embed_batch, forward_deep


def tiny_run(**kwargs):
    values = dict(initializer="xavier", backbone=BackboneSource(path="backbone.vipt"), task=tiny_task(),
                  init=InitConfig(n_p=2), train=tiny_train(epochs=2))
    values.update(kwargs)
    return ExperimentConfig(**values)


class TestSchedule(tests.TestCase):
    def test_boundaries(self):
        self.assertEqual(0.0, lr_schedule(0, 10, 2, 1.0))
        self.assertEqual(0.5, lr_schedule(1, 10, 2, 1.0))
        self.assertEqual(1.0, lr_schedule(2, 10, 2, 1.0))
        self.assertAlmostEqual(0.5, lr_schedule(6, 10, 2, 1.0))
        self.assertAlmostEqual(0.0, lr_schedule(10, 10, 2, 1.0))

    def test_no_warmup(self):
        self.assertEqual(0.1, lr_schedule(0, 4, 0, 0.1))
        self.assertAlmostEqual(0.05, lr_schedule(2, 4, 0, 0.1))

    def test_out_of_range(self):
        with self.assertRaises(ParameterError):
            lr_schedule(11, 10, 2, 1.0)
        with self.assertRaises(ParameterError):
            lr_schedule(-1, 10, 2, 1.0)


class TestAdamW(tests.TestCase):
    def test_first_step(self):
        params = {"w": np.array([1.0, -2.0, 0.5])}
        grads = {"w": np.array([0.5, -3.0, 2.0])}
        new, state = adamw_step(params, grads, OptimizerState.zeros_like(params), 0.1)
        np.testing.assert_allclose(new["w"], params["w"] - 0.1 * grads["w"] / (np.abs(grads["w"]) + 1e-8),
                                   rtol=1e-9)
        self.assertEqual(1, state.step)

    def test_decay_only(self):
        params = {"w": np.array([[1.0, -2.0], [3.0, 0.25]])}
        zero = {"w": np.zeros((2, 2))}
        state = OptimizerState.zeros_like(params)
        current = params
        for lr in (0.1, 0.2, 0.3):
            current, state = adamw_step(current, zero, state, lr, weight_decay=0.5)
        np.testing.assert_allclose(current["w"], params["w"] * 0.95 * 0.9 * 0.85)
        self.assertEqual(3, state.step)

    def test_shape_mismatch(self):
        params = {"w": np.zeros(3)}
        with self.assertRaises(ParameterError):
            adamw_step(params, {"w": np.zeros(2)}, OptimizerState.zeros_like(params), 0.1)


class TestEpochMetrics(tests.TestCase):
    def test_row(self):
        metrics = EpochMetrics(epoch=3, train_loss=0.5, train_accuracy=0.75, val_accuracy=0.5, learning_rate=0.01,
                               entropy=1.2, energy=0.3, energy_bias=0.4, layer_energies=[0.3, 0.2], seconds=1.5)
        row = metrics.to_row()
        self.assertEqual(0.2, row["energy_layer_1"])
        self.assertEqual(metrics, EpochMetrics.from_row(row))
        self.assertNotIn("seconds", metrics.to_row(include_timing=False))
        row = metrics.to_row()
        del row["energy_layer_0"], row["energy_layer_1"]
        self.assertIsNone(EpochMetrics.from_row(row).layer_energies)


class TestTrain(tests.TestCase):
    def setUp(self):
        self.backbone = perturbed_backbone(tiny_vit())
        self.dataset = make_pretrain_task(tiny_task())

    def test_zero_epochs(self):
        record = train(tiny_run(train=tiny_train(epochs=0)), self.backbone, self.dataset)
        self.assertEqual(1, len(record.epochs))
        self.assertEqual(0, record.best_epoch)
        self.assertEqual("finished", record.status)
        # A zero head gives uniform predictions.
        self.assertAlmostEqual(np.log(3), record.epochs[0].train_loss)
        self.assertAlmostEqual(1.0 / 3, record.test_accuracy)

    def test_epochs(self):
        record = train(tiny_run(), self.backbone, self.dataset)
        self.assertEqual([0, 1, 2], [m.epoch for m in record.epochs])
        self.assertAlmostEqual(0.0, record.epochs[-1].learning_rate)
        self.assertEqual(3, len(record.entropy_reports))
        self.assertEqual((2, 8), record.final_params["prompts"].shape)
        self.assertIn(record.best_epoch, (0, 1, 2))
        self.assertTrue(0.0 <= record.test_accuracy <= 1.0)
        for m in record.epochs:
            self.assertTrue(0.0 <= m.energy <= 1.0 + 1e-9)
            self.assertTrue(0.0 <= m.entropy <= np.log(5) + 1e-9)
        self.assertEqual(3, len(record.to_dict()["epochs"]))

    def test_deterministic(self):
        run = tiny_run()
        first = train(run, self.backbone, self.dataset)
        second = train(run, self.backbone, self.dataset)
        self.assertEqual(first.to_dict(include_timing=False), second.to_dict(include_timing=False))
        np.testing.assert_array_equal(first.final_params["prompts"], second.final_params["prompts"])

    def test_backbone_unchanged(self):
        before = self.backbone.digest(include_head=True)
        train(tiny_run(), self.backbone, self.dataset)
        self.assertEqual(before, self.backbone.digest(include_head=True))

    def test_single_class(self):
        # Matched-only, one token per prompt, one prompt.
        dataset = make_pretrain_task(tiny_task(num_classes=1))
        run = tiny_run(initializer="vipamin", init=InitConfig(n_p=1, k=1, **{"lambda": 0.0}))
        record = train(run, self.backbone, dataset)
        for m in record.epochs:
            self.assertLess(abs(m.train_loss), 1e-6)
            self.assertEqual(1.0, m.train_accuracy)
        self.assertEqual(0, record.best_epoch)
        self.assertEqual(1.0, record.test_accuracy)

        initial = record.checkpoint["prompts"]
        self.assertEqual((1, 8), initial.shape)
        e0_mean = embed_batch(dataset.train.images, self.backbone).mean(axis=0)
        self.assertLess(np.abs(e0_mean - initial[0]).max(axis=1).min(), 1e-12)

        # Zero gradients leave only the decoupled weight decay.
        tc = run.train
        steps = tc.epochs * int(np.ceil(len(dataset.train) / tc.batch_size))
        expected = initial.copy()
        for step in range(1, steps + 1):
            lr = lr_schedule(step, steps, 0, tc.learning_rate)
            expected = expected - lr * tc.weight_decay * expected
        np.testing.assert_allclose(expected, record.final_params["prompts"], rtol=1e-12)
        np.testing.assert_array_equal(np.zeros((8, 1)), record.final_params["head.weight"])

    def test_deep(self):
        run = tiny_run(mode="deep")
        record = train(run, self.backbone, self.dataset)
        self.assertEqual((2, 2, 8), record.final_params["prompts"].shape)
        self.assertEqual(2, len(record.epochs[0].layer_energies))
        self.assertEqual(record.epochs[0].energy, record.epochs[0].layer_energies[0])
        # Per-block energies come from the rows each block sees after the prompts are replaced.
        final = record.final_params["prompts"]
        e0 = embed_batch(diagnostic_batch(self.dataset.train, run.train), self.backbone)
        _, trace = forward_deep(list(final), e0, self.backbone)
        expected = [r.value for r in deep_projection_energy(trace, final, self.backbone)]
        np.testing.assert_allclose(expected, record.final.layer_energies, rtol=1e-10)
        np.testing.assert_array_equal(np.broadcast_to(final[1], (len(e0), 2, 8)), trace.records[1].z_in[:, :2])

    def test_given_prompts(self):
        prompts = np.random.default_rng(0).standard_normal((3, 8))
        record = train(tiny_run(train=tiny_train(epochs=0)), self.backbone, self.dataset, prompts=prompts)
        np.testing.assert_array_equal(prompts, record.final_params["prompts"])

    def test_divergence(self):
        with patch("vipamin_app.trainer.backward", return_value=(float("nan"), None)):
            with self.assertRaises(DivergenceError) as context:
                train(tiny_run(), self.backbone, self.dataset)
        self.assertEqual(0, context.exception.step)
        self.assertEqual("diverged", context.exception.record.status)
        self.assertEqual(1, len(context.exception.record.epochs))

    def test_loss_and_grads(self):
        images, labels = self.dataset.train.images[:4], self.dataset.train.labels[:4]
        head = (np.zeros((8, 3)), np.zeros(3))
        loss, grads = loss_and_grads(np.ones((2, 8)), head, (images, labels), self.backbone)
        self.assertAlmostEqual(np.log(3), loss)
        self.assertEqual({"prompts", "head.weight", "head.bias"}, set(grads))
        with self.assertRaises(ParameterError):
            loss_and_grads(np.ones((2, 8)), head, (images[:0], labels[:0]), self.backbone)
        with patch("vipamin_app.trainer.backward", return_value=(float("inf"), None)):
            with self.assertRaises(DivergenceError):
                loss_and_grads(np.ones((2, 8)), head, (images, labels), self.backbone, step=7)

    def test_diagnostic_batch(self):
        config = tiny_train(diagnostic_samples=5)
        batch = diagnostic_batch(self.dataset.train, config)
        self.assertEqual((5, 4, 4), batch.shape)
        np.testing.assert_array_equal(batch, diagnostic_batch(self.dataset.train, config))
        self.assertEqual(18, len(diagnostic_batch(self.dataset.train, tiny_train(diagnostic_samples=100))))


def cell(val, learning_rate, k=2, lam=0.5, n_p=4, error=None):
    records = [RunRecord(run_id=None, initializer="vipamin", mode="shallow", best_val_accuracy=val,
                         test_accuracy=val)]
    return SweepCell(k=k, lam=lam, learning_rate=learning_rate, n_p=n_p, records=records, error=error)


class TestSweep(tests.TestCase):
    def setUp(self):
        self.backbone = perturbed_backbone(tiny_vit())
        self.dataset = make_pretrain_task(tiny_task())

    def test_select_best(self):
        cells = [cell(0.5, 0.1, k=8), cell(0.5, 0.1, k=2, lam=1.0), cell(0.5, 0.5, k=2, lam=0.0), cell(0.4, 0.01),
                 cell(0.9, 0.01, error="diverged")]
        best = select_best(cells)
        self.assertIs(cells[1], best)
        self.assertIsNone(select_best([]))
        self.assertIsNone(select_best(cells[-1:]))

    def test_cell_row(self):
        row = cell(0.5, 0.1).to_row()
        self.assertEqual(0.5, row["val_accuracy"])
        self.assertEqual(0.5, row["test_accuracy"])
        failed = cell(0.5, 0.1, error="diverged").to_row()
        self.assertIsNone(failed["val_accuracy"])
        self.assertIsNone(failed["test_accuracy"])

    @patch("vipamin_app.trainer.train")
    def test_grid(self, mock_train):
        mock_train.side_effect = lambda run, backbone, dataset: RunRecord(
            run_id=None, initializer=run.initializer, mode=run.mode, best_val_accuracy=run.train.learning_rate,
            test_accuracy=0.5)
        run = tiny_run(initializer="vipamin", init=InitConfig(n_p=2, k=1),
                       sweep=SweepConfig(k_pool=[1, 2], lambda_pool=[0.0, 1.0], lr_pool=[0.01, 0.1]))
        result = sweep(run, self.backbone, self.dataset)
        self.assertEqual(8, len(result.cells))
        self.assertEqual(8, mock_train.call_count)
        self.assertEqual((1, 0.0, 0.1), (result.best.k, result.best.lam, result.best.learning_rate))
        self.assertEqual(1, result.best_config.init.k)
        self.assertEqual(0.0, result.best_config.init.lam)
        self.assertEqual(0.1, result.best_config.train.learning_rate)

    @patch("vipamin_app.trainer.train")
    def test_seeds_and_failures(self, mock_train):
        calls = []

        def fake_train(run, backbone, dataset):
            calls.append((run.train.seed, run.init.seed))
            if run.train.learning_rate == 0.1:
                raise DivergenceError("non-finite loss", step=3)
            return RunRecord(run_id=None, initializer=run.initializer, mode=run.mode,
                             best_val_accuracy=0.9 - 0.1 * run.init.n_p, test_accuracy=0.5)

        mock_train.side_effect = fake_train
        run = tiny_run(sweep=SweepConfig(lr_pool=[0.01, 0.1], n_p_pool=[1, 2], seeds=[0, 1]))
        result = sweep(run, self.backbone, self.dataset)
        # xavier has no k or lambda axis.
        self.assertEqual(4, len(result.cells))
        self.assertEqual([None], list({c.k for c in result.cells}))
        self.assertEqual(2, len([c for c in result.cells if c.error]))
        self.assertAlmostEqual(0.8, result.best.val_accuracy)
        self.assertEqual((0.01, 1), (result.best.learning_rate, result.best.n_p))
        # Failed cells stop at their first seed.
        self.assertEqual(6, len(calls))
        train_seeds = [train_seed for train_seed, _ in calls]
        self.assertEqual(len(train_seeds), len(set(train_seeds)))
        self.assertTrue(all(train_seed == init_seed for train_seed, init_seed in calls))

    def test_cell_seed(self):
        self.assertEqual(cell_seed(0, 3), cell_seed(0, 3))
        self.assertNotEqual(cell_seed(0, 0), cell_seed(0, 1))
        self.assertNotEqual(cell_seed(0, 1), cell_seed(1, 0))
        self.assertTrue(0 <= cell_seed(5, 2) < 2 ** 32)

    @patch("vipamin_app.trainer.train")
    def test_cells_draw_own_streams(self, mock_train):
        mock_train.side_effect = lambda run, backbone, dataset: RunRecord(
            run_id=None, initializer=run.initializer, mode=run.mode, best_val_accuracy=0.5, test_accuracy=0.5)
        run = tiny_run(train=tiny_train(seed=4), sweep=SweepConfig(lr_pool=[0.01, 0.05, 0.1]))
        result = sweep(run, self.backbone, self.dataset)
        self.assertEqual([0, 1, 2], [c.index for c in result.cells])
        seeds = [call[0][0].train.seed for call in mock_train.call_args_list]
        self.assertEqual([cell_seed(4, i) for i in range(3)], seeds)
        self.assertEqual(3, len(set(seeds)))
        self.assertEqual(cell_seed(4, result.best.index), result.best_config.train.seed)
        mock_train.reset_mock()
        sweep(run, self.backbone, self.dataset)
        self.assertEqual(seeds, [call[0][0].train.seed for call in mock_train.call_args_list])

    def test_real_cells(self):
        run = tiny_run(train=tiny_train(epochs=1), sweep=SweepConfig(lr_pool=[0.01, 0.05]))
        result = sweep(run, self.backbone, self.dataset)
        self.assertEqual(2, len(result.cells))
        self.assertIsNotNone(result.best)
        self.assertTrue(all(c.error is None for c in result.cells))


class TestFitBackbone(tests.TestCase):
    def test_fit(self):
        dataset = make_pretrain_task(tiny_task())
        backbone = FrozenBackbone.random(tiny_vit(num_classes=2))
        fitted = fit_backbone(backbone, dataset, tiny_train())
        self.assertEqual((8, 3), fitted.head_w.shape)
        self.assertNotEqual(backbone.digest(), fitted.digest())

    def test_frozen_attention_biases(self):
        dataset = make_pretrain_task(tiny_task())
        fitted = fit_backbone(FrozenBackbone.random(tiny_vit(attention_bias=False)), dataset, tiny_train())
        for w in fitted.blocks:
            np.testing.assert_array_equal(np.zeros(8), w.b_q)
            np.testing.assert_array_equal(np.zeros(8), w.b_v)
        self.assertTrue(np.any(fitted.blocks[0].b_out != 0))

    def test_linear_probe(self):
        dataset = make_pretrain_task(tiny_task())
        value = linear_probe_accuracy(perturbed_backbone(tiny_vit()), dataset)
        self.assertTrue(0.0 <= value <= 1.0)

    def test_fine_tune(self):
        dataset = make_pretrain_task(tiny_task())
        backbone = perturbed_backbone(tiny_vit())
        tuned, value = fine_tune(backbone, dataset, tiny_train())
        self.assertTrue(0.0 <= value <= 1.0)
        self.assertNotEqual(backbone.digest(), tuned.digest())

    @patch("vipamin_app.trainer.fine_tune")
    @patch("vipamin_app.trainer.linear_probe_accuracy")
    def test_lp_ratio(self, mock_linear_probe, mock_fine_tune):
        mock_linear_probe.return_value = 0.6
        mock_fine_tune.return_value = (None, 0.8)
        self.assertAlmostEqual(0.75, lp_ratio(None, None, tiny_train()))
        mock_fine_tune.return_value = (None, 0.0)
        self.assertTrue(np.isnan(lp_ratio(None, None, tiny_train())))
