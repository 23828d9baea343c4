import csv
import json
import logging
import math
import os
from numbers import Number

import numpy as np

log = logging.getLogger(__name__)


def to_jsonable(obj):
    """
    Converts numpy scalars and arrays, tuples and non-finite floats into JSON-friendly values.

    Non-finite floats become None.
    """
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, Number):
        value = float(obj)
        if isinstance(obj, int):
            return obj
        return value if math.isfinite(value) else None
    return obj


def write_json(filepath, obj):
    with open(filepath, "w") as f:
        json.dump(to_jsonable(obj), f, indent=2, sort_keys=True)
    log.debug("Wrote %s", filepath)
    return filepath


def read_json(filepath):
    with open(filepath) as f:
        return json.load(f)


def write_csv(filepath, rows, fieldnames=None):
    """
    Writes a list of dicts as CSV. Columns are the union of the row keys in first-seen order.
    """
    if fieldnames is None:
        fieldnames = []
        for row in rows:
            for key in row:
                if key not in fieldnames:
                    fieldnames.append(key)
    with open(filepath, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_value(v) for k, v in row.items()})
    log.debug("Wrote %s rows to %s", len(rows), filepath)
    return filepath


def _csv_value(value):
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def read_csv(filepath):
    """
    Reads a CSV written by write_csv; numeric cells become floats, empty cells None.
    """
    with open(filepath, newline="") as f:
        return [{k: _parse_value(v) for k, v in row.items()} for row in csv.DictReader(f)]


def _parse_value(value):
    if value == "":
        return None
    try:
        return float(value)
    except ValueError:
        return value


def ensure_dir(path):
    if not os.path.exists(path):
        os.makedirs(path)
    return path


def format_mean_std(values):
    """
    "mean ± std" with the population standard deviation.
    """
    return "%.4f ± %.4f" % (float(np.mean(values)), float(np.std(values)))
