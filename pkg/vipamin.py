#!/usr/bin/env python
import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager

import numpy as np
import yaml

from vipamin_app.archive import (load_backbone, load_checkpoint, load_dataset, load_prompts, save_backbone,
                                 save_checkpoint, save_dataset, save_prompts)
from vipamin_app.config import ABLATION_METHODS, load_config, parse_config
from vipamin_app.diagnostics import final_layer_entropy, grassmannian_distance, paired_cosine_distance
from vipamin_app.digest import to_hash_identifier
from vipamin_app.errors import ConfigError, DivergenceError, VipaminError
from vipamin_app.linalg import svd
from vipamin_app.plotdata import (deep_energy_plot, energy_plot, entropy_plot, grassmann_plot, heatmap_plot,
                                  write_plot_data)
from vipamin_app.prompt_init import initialize
from vipamin_app.tasks import few_shot_sample, make_pretrain_task, make_shifted_task, pretrain_backbone
from vipamin_app.trainer import EpochMetrics, accuracy, diagnostic_batch, lp_ratio, sweep, train
from vipamin_app.utility import ensure_dir, format_mean_std, read_json, write_csv, write_json
from vipamin_app.vit import embed_batch, forward_deep, forward_shallow
from vipamin_store import RunStore

log = logging.getLogger(__name__)

METRICS = ("entropy", "energy", "deep-energy", "grassmann")
INIT_KEYS = ("lam", "k", "key_bias", "match_feature", "orth_bias")


def _dump_config(config):
    return config.model_dump(mode="json", by_alias=True, exclude_unset=True)


def start_run(config, command):
    """
    Registers a run and creates its directory.

    :return: (run_id, run directory)
    """
    run_id = config.run_id or to_hash_identifier(command, [json.dumps(_dump_config(config), sort_keys=True)])
    run_dir = os.path.join(config.out_dir, run_id)
    with RunStore(config.out_dir) as store:
        if run_id in store:
            raise ConfigError("run id %s already exists in %s" % (run_id, config.out_dir))
        store.add(run_id, command, run_dir)
    ensure_dir(run_dir)
    with open(os.path.join(run_dir, "config.yaml"), "w") as f:
        yaml.safe_dump(_dump_config(config.replace(run_id=run_id)), f, sort_keys=False)
    log.info("Started %s run %s in %s", command, run_id, run_dir)
    return run_id, run_dir


def finish_run(config, run_id, status):
    with RunStore(config.out_dir) as store:
        store.touch(run_id, status=status)


@contextmanager
def run_context(config, command):
    """
    Starts a run and records how it ends: finished, diverged or failed.

    :return: (run_id, run directory)
    """
    run_id, run_dir = start_run(config, command)
    try:
        yield run_id, run_dir
    except DivergenceError:
        finish_run(config, run_id, "diverged")
        raise
    except Exception:
        log.warning("Run %s failed", run_id)
        finish_run(config, run_id, "failed")
        raise
    finish_run(config, run_id, "finished")


def resolve_backbone(config):
    """
    Loads the backbone archive, or pretrains one from the pretrain spec (cached under {out}/backbones).
    """
    if config.backbone.path is not None:
        return load_backbone(config.backbone.path)
    spec = config.backbone.pretrain
    cache_dir = ensure_dir(os.path.join(config.out_dir, "backbones"))
    filepath = os.path.join(cache_dir, "%s.vipt" % to_hash_identifier(
        "backbone", [json.dumps(spec.model_dump(mode="json"), sort_keys=True)]))
    if os.path.exists(filepath):
        log.info("Using cached backbone %s", filepath)
        return load_backbone(filepath)
    backbone = pretrain_backbone(spec.task, spec.vit, spec.train)
    save_backbone(filepath, backbone, {"pretrain": spec.model_dump(mode="json")})
    return backbone


def load_task(config, task=None):
    """
    Downstream dataset of the run, few-shot subsampled when configured.
    """
    task = task or config.task
    dataset = make_shifted_task(task, config.geometry_task)
    if config.few_shot is not None:
        dataset = few_shot_sample(dataset, config.few_shot.k_shot, config.few_shot.seed)
    return dataset


def _check_compatible(backbone, task):
    c = backbone.config
    if tuple(task.patch_grid) != tuple(c.patch_grid) or task.patch_size != c.patch_size:
        raise ConfigError("task %s (grid %s, patch %s) does not fit backbone (grid %s, patch %s)"
                          % (task.label, task.patch_grid, task.patch_size, c.patch_grid, c.patch_size))


def cmd_pretrain(config):
    """
    Pretrains a backbone on the pretraining task and writes it as an archive.

    :return: path of the backbone archive.
    """
    if config.backbone.pretrain is None:
        raise ConfigError("pretrain needs backbone.pretrain")
    spec = config.backbone.pretrain
    with run_context(config, "pretrain") as (run_id, run_dir):
        backbone = pretrain_backbone(spec.task, spec.vit, spec.train)
        dataset = make_pretrain_task(spec.task)
        train_accuracy = accuracy(backbone, dataset.train)
        test_accuracy = accuracy(backbone, dataset.test)
        log.info("Pretraining accuracy: train %.3f, test %.3f", train_accuracy, test_accuracy)
        filepath = save_backbone(os.path.join(run_dir, "backbone.vipt"), backbone,
                                 {"pretrain": spec.model_dump(mode="json"), "train_accuracy": train_accuracy,
                                  "test_accuracy": test_accuracy})
        save_dataset(os.path.join(run_dir, "pretrain_task.vipt"), dataset)
        write_json(os.path.join(run_dir, "record.json"),
                   {"run_id": run_id, "digest": backbone.digest(), "train_accuracy": train_accuracy,
                    "test_accuracy": test_accuracy})
    return filepath


def cmd_init(config):
    """
    Runs the configured initializer and writes the prompt archive, with the forward-pass
    count and wall-clock of the initialization in its metadata.

    :return: path of the prompt archive.
    """
    backbone = resolve_backbone(config)
    _check_compatible(backbone, config.task)
    dataset = load_task(config)
    with run_context(config, "init") as (run_id, run_dir):
        prompts, overhead = initialize(config.initializer, config.init, backbone, dataset.train.images,
                                       config.mode)
        metadata = {"initializer": config.initializer, "mode": config.mode, "backbone_digest": backbone.digest()}
        metadata.update(overhead)
        filepath = save_prompts(os.path.join(run_dir, "prompts.vipt"), prompts, metadata)
        write_json(os.path.join(run_dir, "init.json"), metadata)
    return filepath


def _write_record(run_dir, record):
    write_json(os.path.join(run_dir, "record.json"), record.to_dict())
    write_csv(os.path.join(run_dir, "metrics.csv"), [m.to_row() for m in record.epochs])


def cmd_train(config):
    """
    Trains prompts and head, writing record.json, metrics.csv and the prompt and checkpoint archives.

    :return: the run directory.
    """
    backbone = resolve_backbone(config)
    _check_compatible(backbone, config.task)
    dataset = load_task(config)
    prompts = load_prompts(config.prompts) if config.prompts else None
    if prompts is not None and isinstance(prompts, list) != (config.mode == "deep"):
        raise ConfigError("prompt archive %s does not match mode %s" % (config.prompts, config.mode))
    with run_context(config, "train") as (run_id, run_dir):
        save_dataset(os.path.join(run_dir, "task.vipt"), dataset)
        try:
            record = train(config.replace(run_id=run_id), backbone, dataset, prompts)
        except DivergenceError as e:
            if e.record is not None:
                _write_record(run_dir, e.record)
            raise
        _write_record(run_dir, record)
        meta = {"run_id": run_id, "mode": config.mode, "backbone_digest": record.backbone_digest}
        save_checkpoint(os.path.join(run_dir, "checkpoint.vipt"), record.checkpoint,
                        dict(meta, epoch=record.best_epoch))
        save_checkpoint(os.path.join(run_dir, "final.vipt"), record.final_params,
                        dict(meta, epoch=record.final.epoch))
    return run_dir


def load_run(run_dir):
    """
    :return: (ExperimentConfig, record dict) of a finished training run.
    """
    config_path = os.path.join(run_dir, "config.yaml")
    record_path = os.path.join(run_dir, "record.json")
    if not os.path.exists(config_path) or not os.path.exists(record_path):
        raise ConfigError("%s is not a training run directory" % run_dir)
    return load_config(config_path, check_paths=False), read_json(record_path)


def _run_llcr(run_dir, config, backbone, dataset):
    params, _ = load_checkpoint(os.path.join(run_dir, "final.vipt"))
    images = dataset.test.images
    head = (params["head.weight"], params["head.bias"])
    e0 = embed_batch(images, backbone)
    if config.mode == "deep":
        return forward_deep(params["prompts"], e0, backbone, head=head)[1].llcr
    return forward_shallow(params["prompts"], e0, backbone, head=head)[1].llcr


def cmd_diagnose(run_dir, metric, against=None):
    """
    Writes {metric}.csv and the plot-data document {metric}.json into the run directory.

    :param metric: entropy, energy, deep-energy or grassmann.
    :param against: another run directory for grassmann; defaults to the run itself.
    :return: list of written paths.
    """
    if metric not in METRICS:
        raise ConfigError("unknown metric %s" % metric)
    config, record = load_run(run_dir)
    run_id = record["run_id"]
    epochs = [EpochMetrics.from_row(row) for row in record["epochs"]]
    csv_path = os.path.join(run_dir, "%s.csv" % metric)
    json_path = os.path.join(run_dir, "%s.json" % metric)

    if metric == "energy":
        write_csv(csv_path, [{"epoch": m.epoch, "energy": m.energy, "energy_bias": m.energy_bias} for m in epochs])
        plot = energy_plot(run_id, epochs)
    elif metric == "deep-energy":
        if config.mode != "deep":
            raise ConfigError("deep-energy needs a deep-mode run, %s is %s" % (run_id, config.mode))
        write_csv(csv_path, [{"epoch": m.epoch, "layer": layer, "energy": value}
                             for m in epochs for layer, value in enumerate(m.layer_energies)])
        plot = deep_energy_plot(run_id, epochs)
    elif metric == "entropy":
        backbone = resolve_backbone(config)
        dataset = load_dataset(os.path.join(run_dir, "task.vipt"))
        params, _ = load_checkpoint(os.path.join(run_dir, "final.vipt"))
        images = diagnostic_batch(dataset.train, config.train)
        head = (params["head.weight"], params["head.bias"])
        e0 = embed_batch(images, backbone)
        if config.mode == "deep":
            _, trace = forward_deep(params["prompts"], e0, backbone, head=head)
        else:
            _, trace = forward_shallow(params["prompts"], e0, backbone, head=head)
        report = final_layer_entropy(trace)
        write_csv(csv_path, report.to_rows())
        plot = entropy_plot(run_id, report, epochs)
    else:
        against = against or run_dir
        backbone = resolve_backbone(config)
        dataset = load_dataset(os.path.join(run_dir, "task.vipt"))
        reps = _run_llcr(run_dir, config, backbone, dataset)
        if os.path.abspath(against) == os.path.abspath(run_dir):
            other_reps, other_id = reps, run_id
        else:
            other_config, other_record = load_run(against)
            other_reps = _run_llcr(against, other_config, resolve_backbone(other_config),
                                   load_dataset(os.path.join(against, "task.vipt")))
            other_id = other_record["run_id"]
        distance = grassmannian_distance(reps, other_reps)
        cosine = paired_cosine_distance(reps, other_reps) if reps.shape == other_reps.shape else None
        subspace_dim = min(svd(reps).numerical_rank, svd(other_reps).numerical_rank)
        write_csv(csv_path, [{"run_id": run_id, "against": other_id, "grassmannian": distance,
                              "paired_cosine_distance": cosine, "subspace_dim": subspace_dim}])
        plot = grassmann_plot(run_id, other_id, distance, cosine if cosine is not None else float("nan"),
                              subspace_dim)
    write_plot_data(json_path, plot)
    log.info("Wrote %s and %s", csv_path, json_path)
    return [csv_path, json_path]


def normalize_columns(values):
    """
    Min-max normalization of each column to [0, 1]; None entries are kept, a constant column maps to 1.

    :param values: rows x columns list of floats or None.
    """
    values = [list(row) for row in values]
    for j in range(len(values[0]) if values else 0):
        column = [row[j] for row in values if row[j] is not None]
        if not column:
            continue
        low, high = min(column), max(column)
        for row in values:
            if row[j] is not None:
                row[j] = 1.0 if high == low else (row[j] - low) / (high - low)
    return values


def _cell_label(cell):
    parts = []
    if cell.k is not None:
        parts.append("k=%s lambda=%s" % (cell.k, cell.lam))
    parts.append("lr=%s" % cell.learning_rate)
    parts.append("n_p=%s" % cell.n_p)
    return " ".join(parts)


def cmd_sweep(config):
    """
    Runs the grid for each task and writes sweep.csv, the normalized heat-map sweep.json and best.json.

    :return: list of per-task dicts with the selected cell.
    """
    tasks = (config.sweep.tasks if config.sweep and config.sweep.tasks else None) or [config.task]
    backbone = resolve_backbone(config)
    with run_context(config, "sweep") as (run_id, run_dir):
        rows, columns, best = [], [], []
        labels = None
        for task in tasks:
            _check_compatible(backbone, task)
            result = sweep(config.replace(task=task.model_dump(), run_id=run_id), backbone,
                           load_task(config, task))
            labels = labels or [_cell_label(cell) for cell in result.cells]
            columns.append([cell.to_row()["test_accuracy"] for cell in result.cells])
            for cell in result.cells:
                row = {"task": task.label}
                row.update(cell.to_row())
                rows.append(row)
            best.append({"task": task.label, "cell": result.best.to_row() if result.best else None})
        normalized = normalize_columns(list(zip(*columns)))
        for i, row in enumerate(rows):
            row["normalized"] = normalized[i % len(labels)][i // len(labels)]
        write_csv(os.path.join(run_dir, "sweep.csv"), rows)
        write_plot_data(os.path.join(run_dir, "sweep.json"),
                        heatmap_plot("Normalized test accuracy", "cell", "task", labels, [t.label for t in tasks],
                                     normalized, {"run_id": run_id}))
        write_json(os.path.join(run_dir, "best.json"), best)
    return best


def method_config(config, method, task, seed):
    """
    Config of one comparison cell. Ablation names pin lambda; vipamin becomes vipamin-deep in deep mode.
    """
    data = _dump_config(config)
    data.pop("compare", None)
    data.pop("sweep", None)
    init = dict(data.get("init", {}))
    initializer = method
    if method in ABLATION_METHODS:
        initializer = "vipamin"
        init["lambda"] = ABLATION_METHODS[method]
        init.pop("lam", None)
    if initializer == "vipamin" and config.mode == "deep":
        initializer = "vipamin-deep"
    if initializer in ("xavier", "spt-rand"):
        for key in INIT_KEYS + ("lambda",):
            init.pop(key, None)
    init["seed"] = seed
    data["init"] = init
    data["initializer"] = initializer
    data["task"] = task.model_dump(mode="json")
    data.setdefault("train", {})["seed"] = seed
    data["run_id"] = "%s-%s-%s-%s" % (config.run_id or "compare", method, task.label, seed)
    return parse_config(data)


def cmd_compare(config):
    """
    Trains every (method, task, seed) and writes compare.csv, compare.md and compare.json with
    mean ± std test accuracy per (method, task); best and second best per task are marked.

    :return: list of table rows.
    """
    cc = config.compare
    if cc is None:
        raise ConfigError("compare needs a compare section")
    tasks = cc.tasks or [config.task]
    backbone = resolve_backbone(config)
    with run_context(config, "compare") as (run_id, run_dir):
        if cc.order_by_lp_ratio:
            ratios = {task.label: lp_ratio(backbone, load_task(config, task), config.train) for task in tasks}
            tasks = sorted(tasks, key=lambda t: -ratios[t.label])
        else:
            ratios = {}
        table, runs = [], []
        for task in tasks:
            _check_compatible(backbone, task)
            dataset = load_task(config, task)
            results = {}
            for method in cc.methods:
                accuracies = []
                for seed in cc.seeds:
                    record = train(method_config(config, method, task, seed), backbone, dataset)
                    accuracies.append(record.test_accuracy)
                    runs.append({"task": task.label, "method": method, "seed": seed,
                                 "test_accuracy": record.test_accuracy,
                                 "best_val_accuracy": record.best_val_accuracy})
                results[method] = accuracies
            ranked = sorted(cc.methods, key=lambda m: -np.mean(results[m]))
            for method in cc.methods:
                values = results[method]
                rank = ranked.index(method)
                table.append({"task": task.label, "method": method, "mean": float(np.mean(values)),
                              "std": float(np.std(values)), "n": len(values), "cell": format_mean_std(values),
                              "mark": {0: "best", 1: "second"}.get(rank, ""), "lp_ratio": ratios.get(task.label)})
        write_csv(os.path.join(run_dir, "compare.csv"), table)
        write_csv(os.path.join(run_dir, "compare_runs.csv"), runs)
        _write_markdown_table(os.path.join(run_dir, "compare.md"), table, cc.methods, [t.label for t in tasks])
        values = [[next(r["mean"] for r in table if r["task"] == t.label and r["method"] == m) for t in tasks]
                  for m in cc.methods]
        plot = heatmap_plot("Mean test accuracy", "method", "task", cc.methods, [t.label for t in tasks], values,
                            {"run_id": run_id, "seeds": list(cc.seeds)}, metric="compare")
        write_plot_data(os.path.join(run_dir, "compare.json"), plot)
    return table


def _write_markdown_table(filepath, table, methods, tasks):
    lines = ["| method | %s |" % " | ".join(tasks), "|---|%s" % "---|" * len(tasks)]
    for method in methods:
        cells = []
        for task in tasks:
            row = next(r for r in table if r["task"] == task and r["method"] == method)
            cell = row["cell"]
            if row["mark"] == "best":
                cell = "**%s**" % cell
            elif row["mark"] == "second":
                cell = "_%s_" % cell
            cells.append(cell)
        lines.append("| %s | %s |" % (method, " | ".join(cells)))
    with open(filepath, "w") as f:
        f.write("\n".join(lines) + "\n")


def _load(args):
    return load_config(args.config, out_dir=args.out, seed=args.seed, run_id=args.run_id)


def main(argv=None):
    parser = argparse.ArgumentParser(description="Prompt initialization and tuning experiments on a toy ViT.")
    parser.add_argument("--debug", action="store_true")

    config_parent_parser = argparse.ArgumentParser(add_help=False)
    config_parent_parser.add_argument("--config", required=True, help="YAML experiment config, see docs/config.md.")
    config_parent_parser.add_argument("--out", help="Output directory. Overrides out_dir.")
    config_parent_parser.add_argument("--seed", type=int, help="Overrides the init, train and task seeds.")
    config_parent_parser.add_argument("--run-id", dest="run_id", help="Overrides run_id.")

    subparsers = parser.add_subparsers(dest="command")
    subparsers.required = True
    subparsers.add_parser("pretrain", help="Pretrains and writes a frozen backbone archive.",
                          parents=[config_parent_parser])
    subparsers.add_parser("init", help="Initializes prompts and writes a prompt archive.",
                          parents=[config_parent_parser])
    subparsers.add_parser("train", help="Trains prompts and head on a frozen backbone.",
                          parents=[config_parent_parser])
    subparsers.add_parser("sweep", help="Grid search over k, lambda and learning rate.",
                          parents=[config_parent_parser])
    subparsers.add_parser("compare", help="Compares initializers over tasks and seeds.",
                          parents=[config_parent_parser])
    diagnose_parser = subparsers.add_parser("diagnose", help="Writes diagnostic CSV and plot data for a run.")
    diagnose_parser.add_argument("run_dir", help="Directory of a train run.")
    diagnose_parser.add_argument("--metric", choices=METRICS, required=True)
    diagnose_parser.add_argument("--against", help="Second run directory for grassmann. Default is the run itself.")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.debug else logging.INFO)

    try:
        if args.command == "diagnose":
            for path in cmd_diagnose(args.run_dir, args.metric, against=args.against):
                print(path)
        else:
            config = _load(args)
            if args.command == "pretrain":
                print(cmd_pretrain(config))
            elif args.command == "init":
                print(cmd_init(config))
            elif args.command == "train":
                print(cmd_train(config))
            elif args.command == "sweep":
                for best in cmd_sweep(config):
                    print("%s: %s" % (best["task"], best["cell"]))
            elif args.command == "compare":
                for row in cmd_compare(config):
                    print("%s %s %s %s" % (row["task"], row["method"], row["cell"], row["mark"]))
    except VipaminError as e:
        log.error("%s", e)
        print("Error: %s" % e, file=sys.stderr)
        return e.exit_code
    except (IOError, OSError) as e:
        log.error("%s", e)
        print("Error: %s" % e, file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
