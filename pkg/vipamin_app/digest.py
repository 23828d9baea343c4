import collections.abc
import hashlib

import numpy as np


def to_hash_identifier(prefix, parts):
    """
    Return an identifier composed of the prefix and a short hash of the parts.
    """
    hash_parts = hashlib.sha256("".join([str(part) for part in parts if part is not None]).encode("utf-8"))
    return "%s-%s" % (prefix, hash_parts.hexdigest()[:12])


def digest_bytes(data):
    return hashlib.sha256(data).hexdigest()


def digest_array(a):
    """
    SHA-256 of a float64 array's little-endian, row-major bytes.
    """
    return digest_bytes(np.ascontiguousarray(a, dtype="<f8").tobytes())


def digest_arrays(arrays):
    """
    SHA-256 over named arrays in the given order; names and shapes are hashed along with the bytes.

    :param arrays: mapping or sequence of (name, array) pairs.
    """
    items = arrays.items() if isinstance(arrays, collections.abc.Mapping) else arrays
    h = hashlib.sha256()
    for name, a in items:
        a = np.ascontiguousarray(a, dtype="<f8")
        h.update(("%s:%s;" % (name, ",".join(str(n) for n in a.shape))).encode("utf-8"))
        h.update(a.tobytes())
    return h.hexdigest()
