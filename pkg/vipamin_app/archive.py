"""
Tensor archive: a portable container for float64 tensors.

Layout (all integers little-endian):

    magic        8 bytes   b"VIPAMIN\\x01"
    header_len   8 bytes   uint64
    header_hash  32 bytes  SHA-256 of the header bytes
    header       header_len bytes of UTF-8 JSON
    padding      zeros up to the next multiple of 64
    payload      tensors, each row-major "<f8", starting on a 64-byte boundary

The header holds format_version, one entry per tensor (name, shape, dtype, offset,
nbytes, sha256; offsets relative to the payload start) and free-form metadata.
"""
import hashlib
import json
import logging
import struct
from collections import OrderedDict

import numpy as np

from .config import VitConfig
from .errors import ArchiveError, ParameterError
from .tasks import Dataset
from .utility import to_jsonable
from .vit import FrozenBackbone, PromptSet

log = logging.getLogger(__name__)

MAGIC = b"VIPAMIN\x01"
FORMAT_VERSION = 1
ALIGNMENT = 64
DTYPE = "<f8"
PREFIX = struct.Struct("<8sQ32s")


def _aligned(n):
    return (n + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def write_archive(filepath, tensors, metadata=None):
    """
    :param tensors: mapping (or pair sequence) of name -> array, written in order.
    :param metadata: JSON-serializable dict stored in the header.
    :return: filepath
    """
    items = list(tensors.items()) if hasattr(tensors, "items") else list(tensors)
    entries, blocks, offset = [], [], 0
    for name, a in items:
        data = np.ascontiguousarray(a, dtype=DTYPE)
        raw = data.tobytes()
        entries.append({"name": name, "shape": list(data.shape), "dtype": DTYPE, "offset": offset,
                        "nbytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest()})
        blocks.append((offset, raw))
        offset = _aligned(offset + len(raw))
    if len({e["name"] for e in entries}) != len(entries):
        raise ParameterError("duplicate tensor names")
    header = json.dumps({"format_version": FORMAT_VERSION, "tensors": entries,
                         "metadata": to_jsonable(metadata or {})}, sort_keys=True).encode("utf-8")
    prefix = PREFIX.pack(MAGIC, len(header), hashlib.sha256(header).digest())
    start = _aligned(len(prefix) + len(header))
    try:
        with open(filepath, "wb") as f:
            f.write(prefix)
            f.write(header)
            f.write(b"\x00" * (start - len(prefix) - len(header)))
            position = 0
            for block_offset, raw in blocks:
                f.write(b"\x00" * (block_offset - position))
                f.write(raw)
                position = block_offset + len(raw)
    except OSError as e:
        raise ArchiveError("Cannot write %s: %s" % (filepath, e))
    log.debug("Wrote %s tensors to %s", len(entries), filepath)
    return filepath


def read_header(filepath):
    """
    Reads and verifies the header.

    :return: (header dict, payload start offset, file bytes)
    """
    try:
        with open(filepath, "rb") as f:
            data = f.read()
    except OSError as e:
        raise ArchiveError("Cannot read %s: %s" % (filepath, e))
    if len(data) < PREFIX.size:
        raise ArchiveError("%s is truncated" % filepath)
    magic, header_len, header_hash = PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ArchiveError("%s is not a tensor archive" % filepath)
    header_bytes = data[PREFIX.size:PREFIX.size + header_len]
    if len(header_bytes) != header_len:
        raise ArchiveError("%s has a truncated header" % filepath)
    if hashlib.sha256(header_bytes).digest() != header_hash:
        raise ArchiveError("%s header digest mismatch" % filepath)
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except ValueError as e:
        raise ArchiveError("%s has an unreadable header: %s" % (filepath, e))
    if header.get("format_version") != FORMAT_VERSION:
        raise ArchiveError("%s has unsupported format version %s" % (filepath, header.get("format_version")))
    return header, _aligned(PREFIX.size + header_len), data


def read_archive(filepath):
    """
    :return: (OrderedDict name -> array, metadata dict)
    """
    header, start, data = read_header(filepath)
    payload_len = len(data) - start
    tensors = OrderedDict()
    end_of_previous = 0
    for entry in sorted(header["tensors"], key=lambda e: e["offset"]):
        if entry["dtype"] != DTYPE:
            raise ArchiveError("%s: unsupported dtype %s" % (entry["name"], entry["dtype"]))
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if entry["nbytes"] != count * 8:
            raise ArchiveError("%s: size %s does not match shape %s" % (entry["name"], entry["nbytes"], entry["shape"]))
        if entry["offset"] < end_of_previous or entry["offset"] % ALIGNMENT:
            raise ArchiveError("%s: overlapping or misaligned offset %s" % (entry["name"], entry["offset"]))
        if entry["offset"] + entry["nbytes"] > payload_len:
            raise ArchiveError("%s: payload truncated" % entry["name"])
        raw = data[start + entry["offset"]:start + entry["offset"] + entry["nbytes"]]
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise ArchiveError("%s: digest mismatch in %s" % (entry["name"], filepath))
        tensors[entry["name"]] = np.frombuffer(raw, dtype=DTYPE).reshape(entry["shape"]).astype(np.float64)
        end_of_previous = entry["offset"] + entry["nbytes"]
    ordered = OrderedDict((e["name"], tensors[e["name"]]) for e in header["tensors"])
    return ordered, header["metadata"]


def _kind(metadata, expected, filepath):
    if metadata.get("kind") != expected:
        raise ArchiveError("%s holds %s, expected %s" % (filepath, metadata.get("kind"), expected))


def save_backbone(filepath, backbone, metadata=None):
    meta = {"kind": "backbone", "vit": backbone.config.model_dump(), "digest": backbone.digest()}
    meta.update(metadata or {})
    return write_archive(filepath, backbone.to_params(), meta)


def load_backbone(filepath):
    tensors, metadata = read_archive(filepath)
    _kind(metadata, "backbone", filepath)
    backbone = FrozenBackbone.from_params(VitConfig.model_validate(metadata["vit"]), tensors)
    if backbone.digest() != metadata["digest"]:
        raise ArchiveError("%s: backbone digest mismatch" % filepath)
    return backbone


def save_prompts(filepath, prompts, metadata=None):
    """
    :param prompts: PromptSet (shallow) or list of PromptSets (deep).
    """
    if isinstance(prompts, PromptSet):
        layers = [prompts]
        mode = "shallow"
    else:
        layers = list(prompts)
        mode = "deep"
    meta = {"kind": "prompts", "mode": mode, "provenance": layers[0].provenance,
            "layers": [p.metadata for p in layers]}
    meta.update(metadata or {})
    tensors = [("prompts" if mode == "shallow" else "prompts.%s" % i, p.prompts) for i, p in enumerate(layers)]
    return write_archive(filepath, tensors, meta)


def load_prompts(filepath):
    tensors, metadata = read_archive(filepath)
    _kind(metadata, "prompts", filepath)
    layer_metadata = metadata.get("layers") or [{}] * len(tensors)
    if metadata["mode"] == "shallow":
        return PromptSet(prompts=tensors["prompts"], provenance=metadata["provenance"], metadata=layer_metadata[0])
    return [PromptSet(prompts=tensors["prompts.%s" % i], provenance=metadata["provenance"], deep_layer=i,
                      metadata=layer_metadata[i])
            for i in range(len(tensors))]


def save_checkpoint(filepath, params, metadata=None):
    meta = {"kind": "checkpoint"}
    meta.update(metadata or {})
    return write_archive(filepath, params, meta)


def load_checkpoint(filepath):
    tensors, metadata = read_archive(filepath)
    _kind(metadata, "checkpoint", filepath)
    return tensors, metadata


def save_dataset(filepath, dataset):
    return write_archive(filepath, [("images", dataset.images), ("labels", dataset.labels),
                                    ("splits", dataset.splits)],
                         {"kind": "dataset", "num_classes": dataset.num_classes, "name": dataset.name})


def load_dataset(filepath):
    tensors, metadata = read_archive(filepath)
    _kind(metadata, "dataset", filepath)
    return Dataset(images=tensors["images"], labels=tensors["labels"].astype(np.int64),
                   splits=tensors["splits"].astype(np.int64), num_classes=metadata["num_classes"],
                   name=metadata["name"])

