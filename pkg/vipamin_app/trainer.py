"""
Prompt tuning on a frozen backbone: loss and gradients, AdamW, the warmup + cosine
schedule, the training loop with per-epoch diagnostics, and hyperparameter sweeps.

Full-parameter fitting (pretraining and fine-tuning) and linear probing live here too.
"""
import logging
import math
import multiprocessing
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg

from .backprop import backward
from .config import SweepConfig
from .diagnostics import deep_projection_energy, final_layer_entropy, prompt_energy
from .errors import DivergenceError, ParameterError, VipaminError
from .prompt_init import initialize
from .vit import ATTENTION_BIASES, FrozenBackbone, PromptSet, embed_batch, forward_deep, forward_shallow

log = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
EPS = 1e-8
EVAL_CHUNK = 512


def lr_schedule(step, total_steps, warmup_steps, base_lr):
    """
    Linear warmup from 0 to base_lr over warmup_steps, then cosine decay to 0 at total_steps.
    """
    if not 0 <= step <= total_steps:
        raise ParameterError("step %s outside [0, %s]" % (step, total_steps))
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    first_moment: dict
    second_moment: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(first_moment={name: np.zeros_like(p) for name, p in params.items()},
                   second_moment={name: np.zeros_like(p) for name, p in params.items()})


def adamw_step(params, grads, state, lr_t, weight_decay=0.0, betas=BETAS, eps=EPS):
    """
    One AdamW update with decoupled weight decay.

    :param params: name -> array.
    :param grads: name -> array, same shapes.
    :return: (new params, new OptimizerState)
    """
    beta1, beta2 = betas
    step = state.step + 1
    new_params, m, v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ParameterError("gradient for %s has shape %s, expected %s" % (name, g.shape, p.shape))
        m[name] = beta1 * state.first_moment[name] + (1.0 - beta1) * g
        v[name] = beta2 * state.second_moment[name] + (1.0 - beta2) * g * g
        m_hat = m[name] / (1.0 - beta1 ** step)
        v_hat = v[name] / (1.0 - beta2 ** step)
        new_params[name] = p - lr_t * weight_decay * p - lr_t * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, OptimizerState(first_moment=m, second_moment=v, step=step)


def _forward(prompts, images, backbone, head, mode):
    e0 = embed_batch(images, backbone)
    if mode == "deep":
        return forward_deep(prompts, e0, backbone, head=head)
    return forward_shallow(prompts, e0, backbone, head=head)


def loss_and_grads(prompts, head, batch, backbone, mode="shallow", step=None):
    """
    Mean cross-entropy over the batch and its gradients with respect to the prompts and head.

    :param prompts: N_p x d (shallow) or L x N_p x d (deep).
    :param head: (weight, bias)
    :param batch: (images, labels)
    :return: (loss, grads) with grads keyed "prompts", "head.weight", "head.bias".
    """
    images, labels = batch
    if len(labels) == 0:
        raise ParameterError("empty batch")
    _, trace = _forward(prompts, images, backbone, head, mode)
    loss, grads = backward(trace, labels, backbone, head=head)
    if not np.isfinite(loss):
        raise DivergenceError("non-finite loss %s at step %s" % (loss, step), step=step)
    return loss, grads


def evaluate(prompts, head, images, labels, backbone, mode="shallow"):
    """
    :return: (mean loss, accuracy) over the given samples.
    """
    if len(labels) == 0:
        return float("nan"), float("nan")
    total_loss, correct = 0.0, 0
    for start in range(0, len(labels), EVAL_CHUNK):
        chunk = slice(start, start + EVAL_CHUNK)
        logits, _ = _forward(prompts, images[chunk], backbone, head, mode)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        total_loss -= log_probs[np.arange(len(logits)), labels[chunk]].sum()
        correct += int(np.sum(np.argmax(logits, axis=1) == labels[chunk]))
    return total_loss / len(labels), correct / len(labels)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float
    learning_rate: float
    entropy: float
    energy: float
    energy_bias: float
    layer_energies: Optional[List[float]] = None
    seconds: float = field(default=0.0, compare=False)

    @classmethod
    def from_row(cls, row):
        depth = len([key for key in row if key.startswith("energy_layer_")])
        return cls(epoch=int(row["epoch"]), train_loss=row["train_loss"], train_accuracy=row["train_accuracy"],
                   val_accuracy=row["val_accuracy"], learning_rate=row["learning_rate"], entropy=row["entropy"],
                   energy=row["energy"], energy_bias=row["energy_bias"],
                   layer_energies=[row["energy_layer_%s" % i] for i in range(depth)] or None,
                   seconds=row.get("seconds") or 0.0)

    def to_row(self, include_timing=True):
        row = {"epoch": self.epoch, "train_loss": self.train_loss, "train_accuracy": self.train_accuracy,
               "val_accuracy": self.val_accuracy, "learning_rate": self.learning_rate,
               "entropy": self.entropy, "energy": self.energy, "energy_bias": self.energy_bias}
        for layer, value in enumerate(self.layer_energies or []):
            row["energy_layer_%s" % layer] = value
        if include_timing:
            row["seconds"] = self.seconds
        return row


@dataclass
class RunRecord:
    """
    Metrics of one training run. Epoch 0 holds the metrics at initialization.
    """
    run_id: Optional[str]
    initializer: str
    mode: str
    epochs: List[EpochMetrics] = field(default_factory=list)
    test_accuracy: Optional[float] = None
    best_epoch: Optional[int] = None
    best_val_accuracy: Optional[float] = None
    backbone_digest: Optional[str] = None
    status: str = "running"
    entropy_reports: list = field(default_factory=list, compare=False, repr=False)
    energy_reports: list = field(default_factory=list, compare=False, repr=False)
    checkpoint: Optional[dict] = field(default=None, compare=False, repr=False)
    final_params: Optional[dict] = field(default=None, compare=False, repr=False)
    init_metadata: dict = field(default_factory=dict, compare=False)

    @property
    def final(self):
        return self.epochs[-1] if self.epochs else None

    def to_dict(self, include_timing=True):
        final = self.final
        return {"run_id": self.run_id, "initializer": self.initializer, "mode": self.mode,
                "status": self.status, "backbone_digest": self.backbone_digest,
                "test_accuracy": self.test_accuracy, "best_epoch": self.best_epoch,
                "best_val_accuracy": self.best_val_accuracy,
                "final_train_loss": final.train_loss if final else None,
                "final_train_accuracy": final.train_accuracy if final else None,
                "final_val_accuracy": final.val_accuracy if final else None,
                "final_entropy": final.entropy if final else None,
                "final_energy": final.energy if final else None,
                "epochs": [m.to_row(include_timing) for m in self.epochs]}


def _diagnose(params, images, backbone, mode):
    """
    Final-layer prompt entropy and prompt energy against the prompt-free attention subspace.
    """
    head = (params["head.weight"], params["head.bias"])
    _, trace = _forward(params["prompts"], images, backbone, head, mode)
    entropy = final_layer_entropy(trace)
    if mode == "deep":
        layers = deep_projection_energy(trace, params["prompts"], backbone)
        energy = layers[0]
        energy_bias = prompt_energy(params["prompts"][0], trace.records[0].token_input, backbone.blocks[0],
                                    value_bias=True)
    else:
        layers = None
        energy = prompt_energy(params["prompts"], trace.e0, backbone.blocks[0])
        energy_bias = prompt_energy(params["prompts"], trace.e0, backbone.blocks[0], value_bias=True)
    return entropy, energy, energy_bias, layers


def diagnostic_batch(split, train_config):
    """
    Fixed training images (at most diagnostic_samples) used for per-epoch entropy and energy.
    """
    rng = np.random.default_rng([train_config.seed, 1])
    n = len(split)
    return split.images[np.sort(rng.permutation(n)[:min(train_config.diagnostic_samples, n)])]


def _prompt_array(prompts, mode):
    if mode == "deep":
        return np.stack([getattr(p, "prompts", p) for p in prompts])
    return np.array(prompts.prompts if isinstance(prompts, PromptSet) else prompts, dtype=np.float64)


def _copy(params):
    return {name: p.copy() for name, p in params.items()}


def train(run, backbone, dataset, prompts=None):
    """
    Trains prompts and a fresh zero head on the dataset with the backbone frozen.

    :param run: ExperimentConfig
    :param backbone: FrozenBackbone
    :param dataset: Dataset of the downstream task.
    :param prompts: initial PromptSet (shallow) or list of PromptSets (deep); initialized
        from run.initializer when omitted.
    :return: RunRecord
    """
    tc = run.train
    mode = run.mode
    train_split, val_split, test_split = dataset.train, dataset.val, dataset.test
    if len(train_split) == 0:
        raise ParameterError("dataset has no training samples")
    digest = backbone.digest()
    record = RunRecord(run_id=run.run_id, initializer=run.initializer, mode=mode, backbone_digest=digest)

    if prompts is None:
        prompts, overhead = initialize(run.initializer, run.init, backbone, train_split.images, mode)
        record.init_metadata.update(overhead)
    first = prompts[0] if mode == "deep" else prompts
    record.init_metadata.update(getattr(first, "metadata", {}) or {})

    d = backbone.config.embed_dim
    params = {"prompts": _prompt_array(prompts, mode),
              "head.weight": np.zeros((d, dataset.num_classes)),
              "head.bias": np.zeros(dataset.num_classes)}
    state = OptimizerState.zeros_like(params)

    rng = np.random.default_rng(tc.seed)
    n = len(train_split)
    diag_images = diagnostic_batch(train_split, tc)
    steps_per_epoch = int(math.ceil(n / tc.batch_size))
    total_steps = steps_per_epoch * tc.epochs
    warmup_steps = steps_per_epoch * tc.warmup_epochs

    def measure(epoch, train_loss, lr, started):
        head = (params["head.weight"], params["head.bias"])
        if train_loss is None:
            train_loss, train_acc = evaluate(params["prompts"], head, train_split.images, train_split.labels,
                                             backbone, mode)
        else:
            _, train_acc = evaluate(params["prompts"], head, train_split.images, train_split.labels, backbone, mode)
        _, val_acc = evaluate(params["prompts"], head, val_split.images, val_split.labels, backbone, mode)
        entropy, energy, energy_bias, layers = _diagnose(params, diag_images, backbone, mode)
        metrics = EpochMetrics(epoch=epoch, train_loss=float(train_loss), train_accuracy=train_acc,
                               val_accuracy=val_acc, learning_rate=lr, entropy=entropy.mean,
                               energy=energy.value, energy_bias=energy_bias.value,
                               layer_energies=[r.value for r in layers] if layers else None,
                               seconds=time.perf_counter() - started)
        record.epochs.append(metrics)
        record.entropy_reports.append(entropy)
        record.energy_reports.append(layers or [energy])
        log.info("epoch %s: loss %.4f train %.3f val %.3f entropy %.3f energy %.4f", epoch, metrics.train_loss,
                 train_acc, val_acc, metrics.entropy, metrics.energy)
        selection = val_acc if len(val_split) else train_acc
        if record.best_val_accuracy is None or selection > record.best_val_accuracy:
            record.best_val_accuracy = selection
            record.best_epoch = epoch
            record.checkpoint = _copy(params)

    measure(0, None, 0.0, time.perf_counter())
    step = 0
    try:
        for epoch in range(1, tc.epochs + 1):
            started = time.perf_counter()
            order = rng.permutation(n)
            losses = []
            lr = 0.0
            for start in range(0, n, tc.batch_size):
                index = order[start:start + tc.batch_size]
                head = (params["head.weight"], params["head.bias"])
                loss, grads = loss_and_grads(params["prompts"], head,
                                             (train_split.images[index], train_split.labels[index]),
                                             backbone, mode, step=step)
                step += 1
                lr = lr_schedule(step, total_steps, warmup_steps, tc.learning_rate)
                params, state = adamw_step(params, grads, state, lr, tc.weight_decay)
                losses.append(loss * len(index))
            measure(epoch, sum(losses) / n, lr, started)
    except DivergenceError as e:
        record.status = "diverged"
        e.record = record
        log.error("Run %s diverged at step %s", run.run_id, e.step)
        raise

    if backbone.digest() != digest:
        raise VipaminError("backbone weights changed during training")
    best = record.checkpoint
    _, record.test_accuracy = evaluate(best["prompts"], (best["head.weight"], best["head.bias"]),
                                       test_split.images, test_split.labels, backbone, mode)
    record.final_params = params
    record.status = "finished"
    log.info("Run %s finished: best epoch %s, test accuracy %.3f", run.run_id, record.best_epoch,
             record.test_accuracy)
    return record


@dataclass
class SweepCell:
    k: Optional[int]
    lam: Optional[float]
    learning_rate: float
    n_p: int
    index: int = 0
    records: List[RunRecord] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def val_accuracy(self):
        """
        Best validation accuracy averaged over seeds; None for failed cells.
        """
        if self.error is not None or not self.records:
            return None
        return float(np.mean([r.best_val_accuracy for r in self.records]))

    def sort_key(self):
        return (-self.val_accuracy, self.learning_rate, self.k or 0, self.lam or 0.0, self.n_p)

    def to_row(self):
        return {"k": self.k, "lambda": self.lam, "learning_rate": self.learning_rate, "n_p": self.n_p,
                "val_accuracy": self.val_accuracy, "error": self.error,
                "test_accuracy": (float(np.mean([r.test_accuracy for r in self.records]))
                                  if self.records and self.error is None else None)}


@dataclass
class SweepResult:
    cells: List[SweepCell]
    best: Optional[SweepCell]
    best_config: object = None


def select_best(cells):
    """
    Highest validation accuracy; ties go to smaller learning rate, then k, then lambda, then N_p.
    """
    candidates = [cell for cell in cells if cell.val_accuracy is not None]
    if not candidates:
        return None
    return min(candidates, key=SweepCell.sort_key)


def cell_seed(seed, index):
    """
    Seed of one sweep cell, an independent stream derived from (run seed, cell index).
    """
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _cell_config(run, cell, seed):
    seed = cell_seed(seed, cell.index)
    updates = {"train.learning_rate": cell.learning_rate, "init.n_p": cell.n_p,
               "train.seed": seed, "init.seed": seed}
    if cell.k is not None:
        updates["init.k"] = cell.k
        updates["init.lam"] = cell.lam
    return run.replace(**updates)


def _run_cell(args):
    run, cell, backbone, dataset, seeds = args
    try:
        for seed in seeds:
            cell.records.append(train(_cell_config(run, cell, seed), backbone, dataset))
    except VipaminError as e:
        log.warning("Sweep cell k=%s lambda=%s lr=%s failed: %s", cell.k, cell.lam, cell.learning_rate, e)
        cell.error = str(e)
    return cell


def sweep(run, backbone, dataset):
    """
    Exhaustive grid over k x lambda x learning rate (x N_p) with every cell trained per seed.
    Failed cells are recorded and skipped by selection.

    :return: SweepResult
    """
    sc = run.sweep or SweepConfig()
    lr_pool = sc.lr_pool or run.train.lr_pool
    n_p_pool = sc.n_p_pool or [run.init.n_p]
    seeds = sc.seeds or [run.train.seed]
    if run.initializer in ("vipamin", "vipamin-deep"):
        km = [(k, lam) for k in sc.k_pool for lam in sc.lambda_pool]
    else:
        km = [(None, None)]
    grid = [(k, lam, lr, n_p) for k, lam in km for lr in lr_pool for n_p in n_p_pool]
    cells = [SweepCell(k=k, lam=lam, learning_rate=lr, n_p=n_p, index=i) for i, (k, lam, lr, n_p) in enumerate(grid)]
    log.info("Sweeping %s cells x %s seeds with %s worker(s)", len(cells), len(seeds), sc.workers)
    jobs = [(run, cell, backbone, dataset, seeds) for cell in cells]
    if sc.workers > 1:
        with multiprocessing.Pool(sc.workers) as pool:
            cells = pool.map(_run_cell, jobs)
    else:
        cells = [_run_cell(job) for job in jobs]
    best = select_best(cells)
    best_config = _cell_config(run, best, seeds[0]) if best else None
    if best:
        log.info("Best cell: k=%s lambda=%s lr=%s n_p=%s val %.3f", best.k, best.lam, best.learning_rate,
                 best.n_p, best.val_accuracy)
    return SweepResult(cells=cells, best=best, best_config=best_config)


def fit_backbone(backbone, dataset, train_config):
    """
    Full-parameter training of every backbone weight and the head with mean cross-entropy.

    :return: FrozenBackbone with the fitted weights.
    """
    config = backbone.config
    train_split = dataset.train
    n = len(train_split)
    if n == 0:
        raise ParameterError("dataset has no training samples")
    if backbone.head_w.shape[1] != dataset.num_classes:
        backbone = backbone.with_head(dataset.num_classes)
        config = backbone.config
    params = {name: np.array(p) for name, p in backbone.to_params().items()}
    frozen_biases = [name for name in params
                     if not config.attention_bias and name.rsplit(".", 1)[-1] in ATTENTION_BIASES]
    state = OptimizerState.zeros_like(params)
    rng = np.random.default_rng(train_config.seed)
    steps_per_epoch = int(math.ceil(n / train_config.batch_size))
    total_steps = steps_per_epoch * train_config.epochs
    warmup_steps = steps_per_epoch * train_config.warmup_epochs
    step = 0
    current = backbone
    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, train_config.batch_size):
            index = order[start:start + train_config.batch_size]
            images = train_split.images[index]
            _, trace = forward_shallow(None, embed_batch(images, current), current)
            loss, grads = backward(trace, train_split.labels[index], current, images=images, want_weights=True)
            if not np.isfinite(loss):
                raise DivergenceError("non-finite loss %s at step %s" % (loss, step), step=step)
            grads.pop("prompts")
            for name in frozen_biases:
                grads[name] = np.zeros_like(grads[name])
            step += 1
            lr = lr_schedule(step, total_steps, warmup_steps, train_config.learning_rate)
            params, state = adamw_step(params, grads, state, lr, train_config.weight_decay)
            current = FrozenBackbone.from_params(config, params)
            losses.append(loss * len(index))
        log.info("fit epoch %s: loss %.4f", epoch, sum(losses) / n)
    return current


def predict(backbone, images):
    """
    Prompt-free logits of the backbone's own head.
    """
    return np.concatenate([forward_shallow(None, embed_batch(images[start:start + EVAL_CHUNK], backbone), backbone)[0]
                           for start in range(0, len(images), EVAL_CHUNK)])


def accuracy(backbone, split):
    if len(split) == 0:
        return float("nan")
    return float(np.mean(np.argmax(predict(backbone, split.images), axis=1) == split.labels))


def llcr_features(backbone, images):
    """
    Prompt-free last-layer class-token representations.
    """
    return np.concatenate([forward_shallow(None, embed_batch(images[start:start + EVAL_CHUNK], backbone),
                                           backbone)[1].llcr
                           for start in range(0, len(images), EVAL_CHUNK)])


def linear_probe_accuracy(backbone, dataset, ridge=1e-3):
    """
    Test accuracy of a ridge-regression head on frozen last-layer class-token features.
    """
    train_split, test_split = dataset.train, dataset.test
    x = llcr_features(backbone, train_split.images)
    x = np.hstack([x, np.ones((len(x), 1))])
    y = np.eye(dataset.num_classes)[train_split.labels]
    w = scipy.linalg.solve(x.T @ x + ridge * np.eye(x.shape[1]), x.T @ y, assume_a="pos")
    x_test = llcr_features(backbone, test_split.images)
    x_test = np.hstack([x_test, np.ones((len(x_test), 1))])
    return float(np.mean(np.argmax(x_test @ w, axis=1) == test_split.labels))


def fine_tune(backbone, dataset, train_config):
    """
    Full fine-tuning on the downstream task from the given backbone with a fresh head.

    :return: (fine-tuned backbone, test accuracy)
    """
    tuned = fit_backbone(backbone.with_head(dataset.num_classes), dataset, train_config)
    return tuned, accuracy(tuned, dataset.test)


def lp_ratio(backbone, dataset, train_config):
    """
    Linear-probing over full fine-tuning test accuracy.
    """
    lp = linear_probe_accuracy(backbone, dataset)
    _, ft = fine_tune(backbone, dataset, train_config)
    return lp / ft if ft > 0 else float("nan")
