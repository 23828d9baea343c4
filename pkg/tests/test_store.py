import os
import shutil
import tempfile

import tests
from vipamin_store import RunStore, main


class TestRunStore(tests.TestCase):
    def setUp(self):
        self.data_path = tempfile.mkdtemp()
        self.db_filepath = os.path.join(self.data_path, "vipamin.db")

    def tearDown(self):
        shutil.rmtree(self.data_path, ignore_errors=True)

    def test_persist(self):
        self.assertFalse(os.path.exists(self.db_filepath))
        with RunStore(self.data_path) as store:
            self.assertEqual(self.db_filepath, store.db_filepath)
            # Created
            self.assertTrue(os.path.exists(self.db_filepath))
            store.add("run-1", "train", "/runs/run-1")

        # Still exists after close
        self.assertTrue(os.path.exists(self.db_filepath))
        with RunStore(self.data_path) as store:
            self.assertTrue("run-1" in store)

    def test_creates_out_dir(self):
        out_dir = os.path.join(self.data_path, "nested", "runs")
        with RunStore(out_dir) as store:
            self.assertTrue(os.path.exists(store.db_filepath))

    def test_contains(self):
        with RunStore(self.data_path) as store:
            store.add("run-1", "train", "/runs/run-1")
            self.assertTrue("run-1" in store)
            self.assertFalse("run-2" in store)
            self.assertTrue(store.contains("run-1"))
            self.assertTrue(store.contains("run-1", True))
            self.assertFalse(store.contains("run-1", False))

    def test_add_item(self):
        with RunStore(self.data_path) as store:
            store.add("run-1", "train", "/runs/run-1")
            (run_id, command, status, path, active, created, last_update) = store["run-1"]
            self.assertEqual("train", command)
            self.assertEqual("running", status)
            self.assertEqual("/runs/run-1", path)
            self.assertTrue(active)
            self.assertIsNotNone(created)

    def test_missing_item(self):
        with RunStore(self.data_path) as store:
            with self.assertRaises(KeyError):
                store["run-1"]

    def test_delete_and_reuse(self):
        with RunStore(self.data_path) as store:
            store.add("run-1", "train", "/runs/run-1")
            del store["run-1"]
            self.assertFalse("run-1" in store)
            self.assertTrue(store.contains("run-1", False))
            # Reactivate
            store.add("run-1", "sweep", "/runs/run-1", status="finished")
            (run_id, command, status, path, active, created, last_update) = store["run-1"]
            self.assertTrue(active)
            self.assertEqual("sweep", command)
            self.assertEqual("finished", status)

    def test_touch(self):
        with RunStore(self.data_path) as store:
            store.add("run-1", "train", "/runs/run-1")
            store.touch("run-1", "diverged")
            self.assertEqual("diverged", store["run-1"][2])
            store.touch("run-1")
            self.assertEqual("diverged", store["run-1"][2])

    def test_iter_and_delete_all(self):
        with RunStore(self.data_path) as store:
            store.add("run-1", "train", "/runs/run-1")
            store.add("run-2", "init", "/runs/run-2")
            self.assertEqual(["run-1", "run-2"], sorted(row[0] for row in store))
            store.delete_all()
            self.assertFalse("run-1" in store)
            self.assertFalse("run-2" in store)
            self.assertEqual(2, len(list(store)))


class TestMain(tests.TestCase):
    def setUp(self):
        self.data_path = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.data_path, ignore_errors=True)

    def test_delete(self):
        with RunStore(self.data_path) as store:
            store.add("run-1", "train", "/runs/run-1")
        self.assertEqual(0, main(["list", "--out", self.data_path]))
        self.assertEqual(0, main(["delete", "run-1", "--out", self.data_path]))
        with RunStore(self.data_path) as store:
            self.assertFalse("run-1" in store)

    def test_delete_all(self):
        with RunStore(self.data_path) as store:
            store.add("run-1", "train", "/runs/run-1")
        self.assertEqual(0, main(["delete-all", "--out", self.data_path]))
        with RunStore(self.data_path) as store:
            self.assertFalse("run-1" in store)

    def test_missing_out_dir(self):
        self.assertEqual(4, main(["list", "--out", os.path.join(self.data_path, "missing")]))
