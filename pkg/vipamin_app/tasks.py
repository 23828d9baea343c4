"""
Synthetic pretraining and distribution-shifted downstream tasks.

Images are (num_patches x patch_dim) matrices. Class content lives in a rank-r
subspace of patch space spanned by the discriminative atoms A(theta) =
cos(theta) A + sin(theta) A_perp, where A and A_perp are disjoint blocks of one
seeded orthonormal basis. theta = 0 reproduces the pretraining geometry and
theta = pi/2 makes every discriminative direction orthogonal to it. This rotation
model of task dissimilarity is a construction of this package.
"""
import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import ParameterError
from .trainer import fit_backbone
from .vit import FrozenBackbone

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SHAPE_AMPLITUDE = 3.0


@dataclass(frozen=True)
class Split:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class Dataset:
    """
    :param images: samples x num_patches x patch_dim.
    :param labels: class index per sample.
    :param splits: split index per sample (0 train, 1 val, 2 test).
    """
    images: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    num_classes: int
    name: str = "task"

    def split(self, tag):
        mask = self.splits == SPLITS.index(tag)
        return Split(images=self.images[mask], labels=self.labels[mask])

    @property
    def train(self):
        return self.split("train")

    @property
    def val(self):
        return self.split("val")

    @property
    def test(self):
        return self.split("test")

    def class_counts(self, tag):
        return np.bincount(self.split(tag).labels, minlength=self.num_classes)


def atom_basis(spec):
    """
    Seeded orthonormal basis of patch space; its first 2r columns are (A, A_perp).
    """
    patch_dim = spec.patch_size * spec.patch_size
    rng = np.random.default_rng([spec.seed, 7919])
    q, r = np.linalg.qr(rng.standard_normal((patch_dim, patch_dim)))
    return q * np.sign(np.diag(r))


def discriminative_basis(spec, pretrain_spec=None):
    """
    Discriminative atoms A(theta) of spec (patch_dim x r), with geometry taken from pretrain_spec.
    """
    geometry = pretrain_spec or spec
    q = atom_basis(geometry)
    r = spec.signal_rank
    a, a_perp = q[:, :r], q[:, r:2 * r]
    return np.cos(spec.shift_angle) * a + np.sin(spec.shift_angle) * a_perp


def nuisance_basis(spec, pretrain_spec=None):
    geometry = pretrain_spec or spec
    r = spec.signal_rank
    return atom_basis(geometry)[:, r:2 * r]


def _class_codes(spec, geometry):
    rng = np.random.default_rng([geometry.seed, 104729])
    num_patches = spec.patch_grid[0] * spec.patch_grid[1]
    if spec.kind == "gaussian-clusters":
        return rng.standard_normal((spec.num_classes, num_patches, spec.signal_rank))
    if spec.kind == "shape-location":
        code = rng.standard_normal(spec.signal_rank)
        return SHAPE_AMPLITUDE * code / np.linalg.norm(code)
    codes = rng.standard_normal((spec.num_classes, spec.signal_rank))
    return SHAPE_AMPLITUDE * codes / np.linalg.norm(codes, axis=1, keepdims=True)


def _class_images(spec, codes, atoms, label, count, rng):
    num_patches = spec.patch_grid[0] * spec.patch_grid[1]
    r = spec.signal_rank
    content = np.zeros((count, num_patches, r))
    if spec.kind == "gaussian-clusters":
        content[:] = codes[label]
    elif spec.kind == "shape-location":
        content[:, label] = codes
    else:
        locations = rng.integers(0, num_patches, size=count)
        content[np.arange(count), locations] = codes[label]
    return content @ atoms.T


def _generate(spec, geometry, nuisance_sigma):
    atoms = discriminative_basis(spec, geometry)
    nuisance = nuisance_basis(spec, geometry)
    codes = _class_codes(spec, geometry)
    patch_dim = spec.patch_size * spec.patch_size
    num_patches = spec.patch_grid[0] * spec.patch_grid[1]
    rng = np.random.default_rng(spec.seed)
    images, labels, splits = [], [], []
    for split_index, count in enumerate((spec.samples_per_class, spec.val_per_class, spec.test_per_class)):
        for label in range(spec.num_classes):
            if count == 0:
                continue
            x = _class_images(spec, codes, atoms, label, count, rng)
            if spec.noise_sigma > 0:
                x = x + spec.noise_sigma * rng.standard_normal((count, num_patches, patch_dim))
            if nuisance_sigma > 0:
                x = x + nuisance_sigma * rng.standard_normal((count, num_patches, spec.signal_rank)) @ nuisance.T
            images.append(x)
            labels.append(np.full(count, label, dtype=np.int64))
            splits.append(np.full(count, split_index, dtype=np.int64))
    log.debug("Generated %s samples for %s", sum(len(l) for l in labels), spec.label)
    return Dataset(images=np.concatenate(images), labels=np.concatenate(labels), splits=np.concatenate(splits),
                   num_classes=spec.num_classes, name=spec.label)


def make_pretrain_task(spec):
    """
    Pretraining task: discriminative atoms A, plus nuisance_sigma variation along A_perp.
    """
    if spec.shift_angle != 0:
        log.debug("Ignoring shift_angle %s of pretraining spec", spec.shift_angle)
        spec = spec.model_copy(update={"shift_angle": 0.0})
    return _generate(spec, spec, spec.nuisance_sigma)


def make_shifted_task(spec, pretrain_spec):
    """
    Downstream task whose discriminative atoms are rotated by spec.shift_angle away from
    the pretraining atoms. Geometry (atoms and class codes) comes from pretrain_spec;
    samples come from spec.seed.
    """
    if spec.signal_rank != pretrain_spec.signal_rank or spec.patch_size != pretrain_spec.patch_size:
        raise ParameterError("shifted task must share signal_rank and patch_size with the pretraining task")
    return _generate(spec, pretrain_spec, spec.nuisance_sigma)


def few_shot_sample(dataset, k_shot, seed=0):
    """
    Keeps exactly k_shot training samples per class, drawn without replacement; val and test untouched.
    """
    rng = np.random.default_rng(seed)
    train_indices = np.flatnonzero(dataset.splits == 0)
    keep = []
    for label in range(dataset.num_classes):
        members = train_indices[dataset.labels[train_indices] == label]
        if len(members) < k_shot:
            raise ParameterError("class %s has %s training samples, fewer than k_shot=%s"
                                 % (label, len(members), k_shot))
        keep.append(members[rng.permutation(len(members))[:k_shot]])
    mask = dataset.splits != 0
    mask[np.concatenate(keep)] = True
    return replace(dataset, images=dataset.images[mask], labels=dataset.labels[mask], splits=dataset.splits[mask],
                   name="%s/%s-shot" % (dataset.name, k_shot))


def vit_config_for(spec, vit_config):
    """
    vit_config with grid, patch size and class count taken from the task.
    """
    return vit_config.model_copy(update={"patch_grid": tuple(spec.patch_grid), "patch_size": spec.patch_size,
                                         "num_classes": spec.num_classes})


def pretrain_backbone(spec, vit_config, train_config):
    """
    Full-parameter training on the pretraining task. The result is the frozen backbone
    every downstream run starts from.
    """
    config = vit_config_for(spec, vit_config)
    backbone = FrozenBackbone.random(config, seed=train_config.seed)
    dataset = make_pretrain_task(spec)
    backbone = fit_backbone(backbone, dataset, train_config)
    log.info("Pretrained backbone %s", backbone.digest())
    return backbone
