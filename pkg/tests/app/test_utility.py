import os
import shutil
import tempfile
from unittest import TestCase

import numpy as np

from vipamin_app.utility import ensure_dir, format_mean_std, read_csv, read_json, to_jsonable, write_csv, write_json


class TestUtility(TestCase):
    def setUp(self):
        self.data_path = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.data_path, ignore_errors=True)

    def test_to_jsonable(self):
        self.assertEqual({"a": [1, 2.5, None], "b": True, "3": [None, None]},
                         to_jsonable({"a": (np.int64(1), np.float64(2.5), float("nan")), "b": np.bool_(True),
                                      3: np.array([np.inf, -np.inf])}))
        self.assertEqual("text", to_jsonable("text"))
        self.assertEqual(7, to_jsonable(7))

    def test_json(self):
        filepath = os.path.join(self.data_path, "x.json")
        write_json(filepath, {"values": np.arange(3.0), "missing": float("nan")})
        self.assertEqual({"values": [0.0, 1.0, 2.0], "missing": None}, read_json(filepath))

    def test_csv(self):
        filepath = os.path.join(self.data_path, "x.csv")
        write_csv(filepath, [{"epoch": 0, "loss": 1.0 / 3}, {"epoch": 1, "loss": None, "note": "late"}])
        rows = read_csv(filepath)
        self.assertEqual(2, len(rows))
        self.assertEqual(1.0 / 3, rows[0]["loss"])
        self.assertIsNone(rows[0]["note"])
        self.assertIsNone(rows[1]["loss"])
        self.assertEqual("late", rows[1]["note"])
        self.assertEqual(1.0, rows[1]["epoch"])

    def test_ensure_dir(self):
        path = os.path.join(self.data_path, "a", "b")
        self.assertEqual(path, ensure_dir(path))
        self.assertTrue(os.path.isdir(path))
        ensure_dir(path)

    def test_format_mean_std(self):
        self.assertEqual("0.5000 ± 0.1000", format_mean_std([0.4, 0.6]))
        self.assertEqual("1.0000 ± 0.0000", format_mean_std([1.0]))
