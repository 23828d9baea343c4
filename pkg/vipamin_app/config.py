"""
Configuration models and the YAML config loader.

The grammar is documented in docs/config.md.
"""
import logging
import math
import os
from typing import List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

log = logging.getLogger(__name__)

LAMBDA_POOL = (0.0, 0.5, 1.0)
WEIGHT_DECAY = 0.01
BATCH_SIZE = 32

DESK_LR_POOL = (0.001, 0.005, 0.01, 0.05)

INITIALIZERS = ("xavier", "spt-rand", "vipamin", "vipamin-deep")
# Module ablations, resolved to vipamin with lambda pinned.
ABLATION_METHODS = {"vipamin-match": 0.0, "vipamin-orth": 1.0}
MATCH_FEATURES = ("key", "query", "value", "embedding", "attention")


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class VitConfig(_Model):
    depth: int = Field(4, ge=1)
    embed_dim: int = Field(32, ge=1)
    num_heads: int = Field(4, ge=1)
    patch_grid: Tuple[int, int] = (4, 4)
    patch_size: int = Field(4, ge=1)
    ffn_hidden: int = Field(64, ge=1)
    num_classes: int = Field(8, ge=1)
    attention_bias: bool = True
    ln_eps: float = Field(1e-6, gt=0)
    # Scale of the random positional embeddings, comparable to the patch embeddings.
    pos_embed_std: float = Field(0.5, gt=0)

    @model_validator(mode="after")
    def _check_heads(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim %s not divisible by num_heads %s" % (self.embed_dim, self.num_heads))
        if min(self.patch_grid) < 1:
            raise ValueError("patch_grid must be positive")
        return self

    @property
    def num_patches(self):
        return self.patch_grid[0] * self.patch_grid[1]

    @property
    def token_count(self):
        """
        N_e, including the class token.
        """
        return self.num_patches + 1

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads


class TaskSpec(_Model):
    name: Optional[str] = None
    kind: Literal["gaussian-clusters", "shape-location", "shape-orientation"] = "gaussian-clusters"
    num_classes: int = Field(8, ge=1)
    samples_per_class: int = Field(200, ge=1)
    val_per_class: int = Field(20, ge=0)
    test_per_class: int = Field(50, ge=0)
    patch_grid: Tuple[int, int] = (4, 4)
    patch_size: int = Field(4, ge=1)
    signal_rank: int = Field(4, ge=1)
    shift_angle: float = Field(0.0, ge=0.0, le=math.pi / 2 + 1e-12)
    noise_sigma: float = Field(0.1, ge=0.0)
    nuisance_sigma: float = Field(0.0, ge=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_geometry(self):
        patch_dim = self.patch_size * self.patch_size
        if 2 * self.signal_rank > patch_dim:
            raise ValueError("signal_rank %s needs patch_dim >= %s" % (self.signal_rank, 2 * self.signal_rank))
        if self.kind == "shape-location" and self.num_classes != self.patch_grid[0] * self.patch_grid[1]:
            raise ValueError("shape-location needs one class per grid cell (%s)"
                             % (self.patch_grid[0] * self.patch_grid[1]))
        return self

    @property
    def label(self):
        return self.name or "%s@%.3f" % (self.kind, self.shift_angle)


class InitConfig(_Model):
    n_p: int = Field(8, ge=1)
    k: int = Field(2, ge=1)
    lam: float = Field(0.5, ge=0.0, le=1.0, alias="lambda")
    batch_size: int = Field(256, ge=1)
    seed: int = 0
    key_bias: bool = False
    match_feature: Literal["key", "query", "value", "embedding", "attention"] = "key"
    orth_bias: Literal["value", "literal"] = "value"


class TrainConfig(_Model):
    learning_rate: float = Field(0.01, gt=0.0)
    weight_decay: float = Field(WEIGHT_DECAY, ge=0.0)
    epochs: int = Field(30, ge=0)
    warmup_epochs: int = Field(3, ge=0)
    batch_size: int = Field(BATCH_SIZE, ge=1)
    seed: int = 0
    lr_pool: List[float] = Field(default_factory=lambda: list(DESK_LR_POOL))
    diagnostic_samples: int = Field(256, ge=1)

    @model_validator(mode="after")
    def _check_warmup(self):
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs %s exceeds epochs %s" % (self.warmup_epochs, self.epochs))
        return self

    @field_validator("lr_pool")
    @classmethod
    def _positive_pool(cls, pool):
        if any(lr <= 0 for lr in pool):
            raise ValueError("learning rates must be positive")
        return pool


class SweepConfig(_Model):
    k_pool: List[int] = Field(default_factory=lambda: [2, 8])
    lambda_pool: List[float] = Field(default_factory=lambda: list(LAMBDA_POOL))
    lr_pool: Optional[List[float]] = None
    n_p_pool: Optional[List[int]] = None
    seeds: Optional[List[int]] = None
    tasks: List[TaskSpec] = Field(default_factory=list)
    workers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _nonempty(self):
        if not self.k_pool or not self.lambda_pool or (self.lr_pool is not None and not self.lr_pool):
            raise ValueError("sweep pools must be nonempty")
        if self.n_p_pool is not None and not self.n_p_pool:
            raise ValueError("sweep pools must be nonempty")
        if self.seeds is not None and not self.seeds:
            raise ValueError("sweep needs at least one seed")
        return self

    @field_validator("k_pool", "n_p_pool")
    @classmethod
    def _positive_ints(cls, pool):
        if pool is not None and any(value < 1 for value in pool):
            raise ValueError("k and n_p must be at least 1")
        return pool

    @field_validator("lambda_pool")
    @classmethod
    def _unit_interval(cls, pool):
        if any(not 0.0 <= lam <= 1.0 for lam in pool):
            raise ValueError("lambda must lie in [0, 1]")
        return pool

    @field_validator("lr_pool")
    @classmethod
    def _positive_pool(cls, pool):
        if pool is not None and any(lr <= 0 for lr in pool):
            raise ValueError("learning rates must be positive")
        return pool


class CompareConfig(_Model):
    methods: List[str] = Field(default_factory=lambda: ["xavier", "spt-rand", "vipamin"])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    tasks: List[TaskSpec] = Field(default_factory=list)
    # Order tasks by linear-probe / fine-tune accuracy ratio, most similar first.
    order_by_lp_ratio: bool = False

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, methods):
        for method in methods:
            if method not in INITIALIZERS and method not in ABLATION_METHODS:
                raise ValueError("unknown method %s" % method)
        return methods


class FewShotConfig(_Model):
    k_shot: int = Field(8, ge=1)
    seed: int = 0


class PretrainSpec(_Model):
    task: TaskSpec = Field(default_factory=lambda: TaskSpec(nuisance_sigma=0.5))
    vit: VitConfig = Field(default_factory=VitConfig)
    train: TrainConfig = Field(default_factory=lambda: TrainConfig(learning_rate=0.003, epochs=20, warmup_epochs=2))


class BackboneSource(_Model):
    path: Optional[str] = None
    pretrain: Optional[PretrainSpec] = None

    @model_validator(mode="after")
    def _exactly_one(self):
        if (self.path is None) == (self.pretrain is None):
            raise ValueError("backbone needs exactly one of path or pretrain")
        return self


class ExperimentConfig(_Model):
    run_id: Optional[str] = None
    out_dir: str = "runs"
    mode: Literal["shallow", "deep"] = "shallow"
    initializer: Literal["xavier", "spt-rand", "vipamin", "vipamin-deep"] = "vipamin"
    backbone: BackboneSource = Field(default_factory=lambda: BackboneSource(pretrain=PretrainSpec()))
    pretrain_task: Optional[TaskSpec] = None
    task: TaskSpec = Field(default_factory=TaskSpec)
    init: InitConfig = Field(default_factory=InitConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    few_shot: Optional[FewShotConfig] = None
    sweep: Optional[SweepConfig] = None
    compare: Optional[CompareConfig] = None
    prompts: Optional[str] = None

    @model_validator(mode="after")
    def _check_initializer(self):
        if self.initializer == "vipamin-deep" and self.mode != "deep":
            raise ValueError("vipamin-deep requires mode deep")
        if self.initializer == "vipamin" and self.mode == "deep":
            raise ValueError("use vipamin-deep for mode deep")
        if self.initializer in ("xavier", "spt-rand"):
            misplaced = {"lam", "k", "key_bias", "match_feature", "orth_bias"} & self.init.model_fields_set
            if misplaced:
                raise ValueError("%s does not take %s" % (self.initializer, ", ".join(sorted(misplaced))))
        else:
            tasks = (self.sweep.tasks if self.sweep else None) or [self.task]
            tokens = min(t.patch_grid[0] * t.patch_grid[1] + 1 for t in tasks)
            k_max = max([self.init.k] + (self.sweep.k_pool if self.sweep else []))
            if k_max > tokens:
                raise ValueError("k=%s exceeds the %s input tokens" % (k_max, tokens))
        return self

    @property
    def geometry_task(self):
        """
        The task whose discriminative atoms define the pretraining subspace.
        """
        if self.pretrain_task is not None:
            return self.pretrain_task
        if self.backbone.pretrain is not None:
            return self.backbone.pretrain.task
        return self.task

    def replace(self, **updates):
        """
        Returns a copy with the given (possibly nested, dotted) fields replaced.

        :param updates: e.g. {"train.learning_rate": 0.1, "run_id": "x"}.
        """
        # Only explicitly set fields, so the initializer check keeps seeing what the user set.
        data = self.model_dump(exclude_unset=True)
        for dotted, value in updates.items():
            node = data
            parts = dotted.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = value
        try:
            return ExperimentConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigError("Invalid config after setting %s: %s" % (", ".join(sorted(updates)), e))


def parse_config(data):
    """
    Validates a config tree (dict), wrapping validation failures in ConfigError.
    """
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as e:
        raise ConfigError("Invalid config: %s" % e)


def load_config(filepath, out_dir=None, seed=None, run_id=None, check_paths=True):
    """
    Loads a YAML config file and applies command line overrides.

    :param filepath: path of the YAML file.
    :param out_dir: overrides out_dir.
    :param seed: overrides init, train and task seeds.
    :param run_id: overrides run_id.
    :param check_paths: verify that referenced archives exist.
    :return: ExperimentConfig
    """
    if not os.path.exists(filepath):
        raise ConfigError("%s does not exist" % filepath)
    log.debug("Loading config %s", filepath)
    with open(filepath) as f:
        try:
            data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError("Cannot parse %s: %s" % (filepath, e))
    if not isinstance(data, dict):
        raise ConfigError("%s must contain a mapping" % filepath)
    if out_dir is not None:
        data["out_dir"] = out_dir
    if run_id is not None:
        data["run_id"] = run_id
    if seed is not None:
        for section in ("init", "train", "task"):
            data.setdefault(section, {})
            data[section]["seed"] = seed
    config = parse_config(data)
    if check_paths:
        for path in (config.backbone.path, config.prompts):
            if path is not None and not os.path.exists(path):
                raise ConfigError("%s does not exist" % path)
    return config
