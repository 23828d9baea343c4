"""
Qualitative trend checks at desk scale. Each takes minutes; run with VIPAMIN_SLOW=1.
Set VIPAMIN_TREND_RESULTS to a file path to keep the measured values as JSON.
"""
import math
import os
import unittest

import numpy as np

import tests
from vipamin_app.config import (BackboneSource, ExperimentConfig, InitConfig, PretrainSpec, SweepConfig, TaskSpec,
                                 TrainConfig)
from vipamin_app.tasks import few_shot_sample, make_pretrain_task, make_shifted_task, pretrain_backbone
from vipamin_app.trainer import accuracy, sweep, train
from vipamin_app.utility import write_json

SLOW = os.environ.get("VIPAMIN_SLOW") == "1"
RESULTS_PATH = os.environ.get("VIPAMIN_TREND_RESULTS")
SEEDS = (0, 1, 2)


def shape_location(shift_angle, **kwargs):
    values = dict(kind="shape-location", num_classes=16, samples_per_class=50, val_per_class=10, test_per_class=20,
                  shift_angle=shift_angle)
    values.update(kwargs)
    return TaskSpec(**values)


@unittest.skipUnless(SLOW, "set VIPAMIN_SLOW=1 to run trend checks")
class TestTrends(tests.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.spec = PretrainSpec()
        cls.backbone = pretrain_backbone(cls.spec.task, cls.spec.vit, cls.spec.train)
        cls.shifted = shape_location(math.pi / 2)
        cls.results = {"seeds": list(SEEDS), "pretrain": cls.spec.model_dump(mode="json"),
                       "backbone_digest": cls.backbone.digest()}

    @classmethod
    def tearDownClass(cls):
        if RESULTS_PATH:
            write_json(RESULTS_PATH, cls.results)

    def run_config(self, initializer, seed, task, mode="shallow", **init):
        return ExperimentConfig(initializer=initializer, mode=mode, backbone=BackboneSource(path="backbone.vipt"),
                                pretrain_task=self.spec.task, task=task, init=InitConfig(n_p=8, seed=seed, **init),
                                train=TrainConfig(seed=seed, learning_rate=0.01, epochs=30, warmup_epochs=3))

    def train(self, initializer, seed, task=None, dataset=None, mode="shallow", **init):
        task = task or self.shifted
        dataset = dataset or make_shifted_task(task, self.spec.task)
        return train(self.run_config(initializer, seed, task, mode, **init), self.backbone, dataset)

    def record(self, name, records):
        self.results[name] = [{"test_accuracy": r.test_accuracy, "best_val_accuracy": r.best_val_accuracy,
                               "energy": r.final.energy, "entropy": r.final.entropy,
                               "layer_energies": r.final.layer_energies} for r in records]

    def test_pretraining_accuracy(self):
        test_accuracy = accuracy(self.backbone, make_pretrain_task(self.spec.task).test)
        self.results["pretrain_test_accuracy"] = test_accuracy
        self.assertGreaterEqual(test_accuracy, 0.95)

    def test_shifted_task_learnable(self):
        records = [self.train("xavier", seed) for seed in SEEDS]
        self.record("shifted_xavier", records)
        self.assertGreater(np.mean([r.test_accuracy for r in records]), 2.0 / 16)

    def test_collapse_avoidance(self):
        vipamin = [self.train("vipamin", seed, k=2, lam=1.0) for seed in SEEDS]
        xavier = [self.train("xavier", seed) for seed in SEEDS]
        self.record("collapse_vipamin", vipamin)
        self.record("collapse_xavier", xavier)
        self.assertGreaterEqual(sum(v.final.energy < x.final.energy for v, x in zip(vipamin, xavier)), 2)
        for record in xavier:
            self.assertGreaterEqual(record.final.energy, 0.95)

    def test_specialization(self):
        vipamin = [self.train("vipamin", seed, k=2) for seed in SEEDS]
        xavier = [self.train("xavier", seed) for seed in SEEDS]
        self.record("specialization_vipamin", vipamin)
        self.record("specialization_xavier", xavier)
        self.assertGreaterEqual(np.mean([r.final.entropy for r in xavier]) -
                                np.mean([r.final.entropy for r in vipamin]), 0.1)

    def test_few_shot_ordering(self):
        results = {"vipamin": [], "spt-rand": [], "xavier": []}
        for seed in SEEDS:
            dataset = few_shot_sample(make_shifted_task(self.shifted, self.spec.task), 8, seed)
            for initializer in results:
                init = {"k": 2} if initializer == "vipamin" else {}
                results[initializer].append(self.train(initializer, seed, dataset=dataset, **init))
        for name, records in results.items():
            self.record("few_shot_%s" % name, records)
        means = {name: np.mean([r.test_accuracy for r in records]) for name, records in results.items()}
        self.assertGreaterEqual(means["vipamin"], means["spt-rand"])
        self.assertGreaterEqual(means["spt-rand"], means["xavier"])
        self.assertGreaterEqual(means["vipamin"] - means["xavier"], 0.02)

    def test_hyperparameter_roles(self):
        grid = SweepConfig(k_pool=[2, 8], lambda_pool=[0.0, 0.5, 1.0], lr_pool=[0.01], seeds=list(SEEDS))
        best = {}
        for shift_angle, check in ((math.pi / 2, self.assertGreaterEqual), (0.0, self.assertLessEqual)):
            task = shape_location(shift_angle)
            run = self.run_config("vipamin", 0, task).model_copy(update={"sweep": grid})
            result = sweep(run, self.backbone, make_shifted_task(task, self.spec.task))
            best[task.label] = result.best.to_row()
            self.results["sweep_best"] = best
            check(result.best.lam, 0.5)

    def test_deep_energy_pattern(self):
        records = [self.train("xavier", seed, mode="deep") for seed in SEEDS]
        self.record("deep_xavier", records)
        wins = sum(r.final.layer_energies[0] > max(r.final.layer_energies[1:]) for r in records)
        self.assertGreaterEqual(wins, 2)
