"""Experiment orchestration behind the CLI: training, attack sweeps,
defense evaluation and point-cloud export.

A sweep writes into one directory:

* ``report.json`` and ``report.csv``: one row per (variant, epsilon, n, M) cell
* ``samples/<cell>.npz``: every emitted adversarial sample of that cell
* ``success_rates.png``, ``steps.png``, ``objective.png``
"""

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import plotting
from .attack import VARIANTS, default_hyperparams, run_attack_batch, with_overrides
from .data import (
    ADVERSARIAL_RGB,
    FAMILIES,
    ORIGINAL_RGB,
    ShapeSpec,
    generate_dataset,
    write_ply,
)
from .defense import DefenseConfig, defended_predictions
from .geometry import hausdorff_distance, pairwise_distances
from .model import (
    TrainConfig,
    accuracy,
    dumps_weights,
    forward_batch,
    init_model,
    load_weights,
    save_weights,
    train,
)

logger = logging.getLogger(__name__)

# mean nearest-neighbor spacing of the reference setting (1,024-point clouds)
REFERENCE_SPACING = 0.05
BATCH = 128


class ConstraintViolation(RuntimeError):
    """An emitted adversarial sample broke |delta| <= n or D_H <= epsilon."""


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


# --- configuration -------------------------------------------------------------


@dataclass
class DatasetConfig:
    families: list = field(default_factory=lambda: list(FAMILIES))
    train_per_class: int = 300
    test_per_class: int = 60
    k: int = 256
    jitter_sigma: float = 0.01
    seed: int = 0

    def build(self):
        specs = [ShapeSpec(f, jitter_sigma=self.jitter_sigma) for f in self.families]
        return generate_dataset(specs, (self.train_per_class, self.test_per_class), self.k, self.seed)


@dataclass
class ModelConfig:
    per_point_dims: list = field(default_factory=lambda: [32, 64, 128])
    head_dims: list = field(default_factory=lambda: [64])


@dataclass
class SweepSpec:
    epsilon_values: list = field(default_factory=lambda: [0.05, 0.1])
    n_values: list = field(default_factory=lambda: [6, 26])
    M_values: list = field(default_factory=lambda: [500])
    variants: list = field(default_factory=lambda: list(VARIANTS))
    sample_limit: int = 100
    seed: int = 0
    # multiply epsilon_values by (measured NN spacing / REFERENCE_SPACING)
    scale_epsilon: bool = False
    normalization: str = "per_point"

    def validate(self, n_test):
        for name in ("epsilon_values", "n_values", "M_values", "variants"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be non-empty")
        bad = set(self.variants) - set(VARIANTS)
        if bad:
            raise ConfigError(f"unknown variants {sorted(bad)}")
        if not 0 <= self.sample_limit <= n_test:
            raise ConfigError(f"sample_limit must lie in [0, {n_test}]")


def _from_dict(cls, data, where):
    data = dict(data or {})
    known = set(cls.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path):
    """Read a YAML or JSON config file into a dict."""
    import yaml

    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


def canonical_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def mean_nn_spacing(clouds):
    """Average distance from each point to its nearest neighbor."""
    out = []
    for pts in clouds:
        d = pairwise_distances(pts, pts)
        np.fill_diagonal(d, np.inf)
        out.append(d.min(axis=1).mean())
    return float(np.mean(out))


def equivalent_epsilons(values, clouds):
    """Rescale reference-setting epsilons to this point density."""
    ratio = mean_nn_spacing(clouds) / REFERENCE_SPACING
    return [round(float(v) * ratio, 4) for v in values]


def sample_seed(seed, index):
    """Independent per-sample stream derived from (global seed, sample index)."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _write_json(path, obj):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def _write_csv(path, rows, columns):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


# --- train ---------------------------------------------------------------------


def run_train(config, seed=None, out="model.pcnw"):
    """Train on the synthetic dataset; write weights and ``<out>.json``."""
    ds_cfg = _from_dict(DatasetConfig, config.get("dataset"), "dataset")
    model_cfg = _from_dict(ModelConfig, config.get("model"), "model")
    train_cfg = _from_dict(TrainConfig, config.get("training"), "training")
    if seed is not None:
        train_cfg.seed = seed
    unknown = set(config) - {"dataset", "model", "training"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    dataset = ds_cfg.build()
    model = init_model(len(ds_cfg.families), tuple(model_cfg.per_point_dims),
                       tuple(model_cfg.head_dims), seed=train_cfg.seed)
    model = train(model, dataset.train_points, dataset.train_labels, train_cfg)
    report = {
        "train_accuracy": accuracy(model, dataset.train_points, dataset.train_labels),
        "test_accuracy": accuracy(model, dataset.test_points, dataset.test_labels),
        "dataset": asdict(ds_cfg),
        "model": asdict(model_cfg),
        "training": asdict(train_cfg),
        "weights_sha256": hashlib.sha256(dumps_weights(model)).hexdigest(),
        "class_names": dataset.class_names,
    }
    save_weights(model, out)
    _write_json(f"{out}.json", report)
    return report


def _dataset_for(weights, config):
    """Dataset config from the sweep config, else from the training report."""
    if "dataset" in config:
        return _from_dict(DatasetConfig, config["dataset"], "dataset")
    report = f"{weights}.json"
    if os.path.exists(report):
        with open(report) as fh:
            return _from_dict(DatasetConfig, json.load(fh).get("dataset"), "dataset")
    return DatasetConfig()


# --- sweep ---------------------------------------------------------------------


def cell_id(variant, epsilon, n, steps):
    return f"{variant}_eps{epsilon:g}_n{n}_M{steps}"


def verify_sample(adversarial, original, n, epsilon):
    """Independent constraint check on an emitted sample."""
    k = len(original)
    added = len(adversarial) - k
    if added > n or added < 0:
        raise ConstraintViolation(f"{added} added points exceed budget n={n}")
    if not np.array_equal(adversarial[:k], original):
        raise ConstraintViolation("original points were modified")
    dh = hausdorff_distance(adversarial, original)
    if dh > epsilon + 1e-9:
        raise ConstraintViolation(f"Hausdorff distance {dh!r} exceeds epsilon={epsilon!r}")
    return dh


def clean_correct(model, clouds, labels):
    preds = np.concatenate([forward_batch(model, clouds[i : i + 256]).argmax(axis=1)
                            for i in range(0, len(clouds), 256)]) if len(clouds) else np.zeros(0, int)
    return preds == labels


def attack_cell(model, clouds, labels, indices, config, seed):
    """Attack every clean-correct sample of one cell in fixed-size batches.

    Batches are taken in sample order so the floating-point path, and hence
    the output, does not depend on anything but the inputs.
    """
    results = []
    for start in range(0, len(clouds), BATCH):
        sl = slice(start, start + BATCH)
        seeds = [sample_seed(seed, int(i)) for i in indices[sl]]
        results += run_attack_batch(model, clouds[sl], labels[sl], config, seeds)
    return results


def run_sweep(weights, spec, out_dir, dataset_cfg=None, model=None, figures=True):
    """Run the (variant, epsilon, n, M) grid and write the report directory."""
    model = model if model is not None else load_weights(weights)
    dataset_cfg = dataset_cfg or DatasetConfig()
    dataset = dataset_cfg.build()
    spec.validate(len(dataset.test_points))
    os.makedirs(os.path.join(out_dir, "samples"), exist_ok=True)

    clouds = dataset.test_points[: spec.sample_limit]
    labels = dataset.test_labels[: spec.sample_limit]
    correct = clean_correct(model, clouds, labels)
    idx = np.flatnonzero(correct)
    eps_values = (equivalent_epsilons(spec.epsilon_values, dataset.test_points)
                  if spec.scale_epsilon else [float(e) for e in spec.epsilon_values])

    cells, traces = [], {}
    grid = spec.variants if spec.sample_limit else []
    for variant in grid:
        for eps in eps_values:
            for n in spec.n_values:
                for steps in spec.M_values:
                    cid = cell_id(variant, eps, n, steps)
                    config = with_overrides(default_hyperparams(eps, int(n), variant, int(steps)),
                                            normalization=spec.normalization, seed=spec.seed)
                    results = attack_cell(model, clouds[idx], labels[idx], idx, config, spec.seed)
                    dh = [verify_sample(r.adversarial, clouds[i], int(n), eps)
                          for r, i in zip(results, idx)]
                    cells.append(_cell_row(cid, variant, eps, int(n), int(steps), results, dh))
                    _save_cell(out_dir, cid, results, idx, config)
                    traces[cid] = np.array([r.objective_trace for r in results]).reshape(len(results), int(steps))
                    logger.info("%s: %.1f%%", cid, cells[-1]["success_rate"])

    meta = {
        "weights": os.path.abspath(weights) if weights else None,
        "weights_sha256": hashlib.sha256(dumps_weights(model)).hexdigest(),
        "dataset": asdict(dataset_cfg),
        "spec": asdict(spec),
        "epsilon_values": eps_values,
        "samples": int(len(clouds)),
        "clean_correct": int(correct.sum()),
        "clean_accuracy": float(correct.mean()) if len(correct) else 0.0,
    }
    meta["config_hash"] = canonical_hash({k: meta[k] for k in ("weights_sha256", "dataset", "spec")})
    report = {"metadata": meta, "cells": cells}
    _write_json(os.path.join(out_dir, "report.json"), report)
    _write_csv(os.path.join(out_dir, "report.csv"), cells, CELL_COLUMNS)
    if figures and cells:
        plotting.success_rate_figure(cells, os.path.join(out_dir, "success_rates.png"))
        plotting.steps_figure(cells, os.path.join(out_dir, "steps.png"))
        plotting.objective_figure(traces, os.path.join(out_dir, "objective.png"))
    return report


CELL_COLUMNS = ["cell", "variant", "epsilon", "n", "steps", "attacked", "successes",
                "success_rate", "mean_hausdorff", "mean_steps_to_success"]


def _cell_row(cid, variant, eps, n, steps, results, dh):
    succ = [r for r in results if r.success]
    # first step with a misclassified prediction; it may have flipped back later
    first = [r.first_success_step for r in succ if r.first_success_step is not None]
    return {
        "cell": cid,
        "variant": variant,
        "epsilon": float(eps),
        "n": n,
        "steps": steps,
        "attacked": len(results),
        "successes": len(succ),
        "success_rate": 100.0 * len(succ) / len(results) if results else 0.0,
        "mean_hausdorff": float(np.mean(dh)) if dh else 0.0,
        "mean_steps_to_success": float(np.mean(first)) if first else None,
    }


def _save_cell(out_dir, cid, results, idx, config):
    path = os.path.join(out_dir, "samples", f"{cid}.npz")
    k = len(results[0].adversarial) - len(results[0].delta) if results else 0
    np.savez_compressed(
        path,
        adversarial=(np.array([r.adversarial for r in results]) if results else np.zeros((0, 0, 3))),
        labels=np.array([r.label for r in results], dtype=np.int64),
        sample_index=np.asarray(idx, dtype=np.int64),
        success=np.array([r.success for r in results], dtype=bool),
        n_original=np.int64(k),
        config=json.dumps(config.to_dict(), sort_keys=True),
    )


def load_cell(out_dir, cid):
    with np.load(os.path.join(out_dir, "samples", f"{cid}.npz")) as z:
        return {key: z[key] for key in z.files}


# --- defend ------------------------------------------------------------------


def parse_defenses(items):
    out = []
    for item in items or [{"kind": "SOR"}, {"kind": "SPR"}]:
        out.append(_from_dict(DefenseConfig, item, "defenses"))
    return out


DEFENSE_COLUMNS = ["defense", "cell", "variant", "epsilon", "n", "steps", "attacked",
                   "undefended_rate", "defended_rate", "best_over_epsilon"]


def run_defend(weights, results_dir, defenses, out_dir, model=None, figures=True):
    """Re-classify every stored adversarial sample after each defense."""
    model = model if model is not None else load_weights(weights)
    with open(os.path.join(results_dir, "report.json")) as fh:
        sweep = json.load(fh)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for defense in defenses:
        for cell in sweep["cells"]:
            data = load_cell(results_dir, cell["cell"])
            attacked = len(data["labels"])
            if attacked:
                preds = defended_predictions(model, data["adversarial"], defense)
                rate = 100.0 * int(np.sum(preds != data["labels"])) / attacked
            else:
                rate = 0.0
            rows.append({
                "defense": defense.name,
                "cell": cell["cell"],
                "variant": cell["variant"],
                "epsilon": cell["epsilon"],
                "n": cell["n"],
                "steps": cell["steps"],
                "attacked": attacked,
                "undefended_rate": cell["success_rate"],
                "defended_rate": rate,
            })
    # best over epsilon for each (defense, variant, n, steps)
    for row in rows:
        peers = [r["defended_rate"] for r in rows
                 if (r["defense"], r["variant"], r["n"], r["steps"])
                 == (row["defense"], row["variant"], row["n"], row["steps"])]
        row["best_over_epsilon"] = max(peers)
    report = {
        "metadata": {
            "sweep_config_hash": sweep["metadata"]["config_hash"],
            "defenses": [asdict(d) for d in defenses],
            "clean_accuracy": sweep["metadata"]["clean_accuracy"],
        },
        "rows": rows,
    }
    _write_json(os.path.join(out_dir, "defended.json"), report)
    _write_csv(os.path.join(out_dir, "defended.csv"), rows, DEFENSE_COLUMNS)
    if figures and rows:
        plotting.defense_figure(rows, os.path.join(out_dir, "defended.png"))
    return report


# --- export --------------------------------------------------------------------


def export_sample(adversarial, n_original, out, title=None, figure=True):
    """Write an adversarial sample as coloured PLY (blue original, red added)."""
    adversarial = np.asarray(adversarial, dtype=np.float64)
    colors = np.array([ORIGINAL_RGB] * n_original + [ADVERSARIAL_RGB] * (len(adversarial) - n_original),
                      dtype=np.int64).reshape(-1, 3)
    write_ply(out, adversarial, colors)
    if figure:
        plotting.cloud_figure(adversarial[:n_original], adversarial[n_original:],
                              os.path.splitext(out)[0] + ".png", title)
    return out


def run_export(config, seed=None, out="sample.ply"):
    """Export one adversarial sample, either from a sweep directory
    (``results``, ``cell``, ``sample``) or by attacking a test cloud
    (``weights``, ``sample``, ``attack``)."""
    pos = int(config.get("sample", 0))
    if "results" in config:
        if "cell" not in config:
            raise ConfigError("export from a sweep needs 'cell'")
        data = load_cell(config["results"], config["cell"])
        if not 0 <= pos < len(data["labels"]):
            raise ConfigError(f"sample {pos} outside the {len(data['labels'])} stored samples")
        export_sample(data["adversarial"][pos], int(data["n_original"]), out, config["cell"])
        return {"out": out, "cell": config["cell"], "success": bool(data["success"][pos])}
    if "weights" not in config:
        raise ConfigError("export needs either 'results' or 'weights'")
    weights = config["weights"]
    model = load_weights(weights)
    dataset = _dataset_for(weights, config).build()
    if not 0 <= pos < len(dataset.test_points):
        raise ConfigError(f"sample {pos} outside the test split")
    att = dict(config.get("attack", {}))
    variant = att.pop("variant", "VSA")
    cfg = default_hyperparams(float(att.pop("epsilon", 0.1)), int(att.pop("n", 10)), variant,
                              int(att.pop("steps", 500)))
    try:
        cfg = with_overrides(cfg, seed=seed if seed is not None else cfg.seed, **att)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"attack: {exc}") from exc
    cloud = dataset.test_points[pos]
    label = int(dataset.test_labels[pos])
    result = run_attack_batch(model, cloud[None], [label], cfg)[0]
    verify_sample(result.adversarial, cloud, cfg.n, cfg.epsilon)
    export_sample(result.adversarial, len(cloud), out, f"{variant} eps={cfg.epsilon:g} n={cfg.n}")
    return {"out": out, "success": result.success, "label": label,
            "predicted": result.predicted, "final_hausdorff": result.final_hausdorff}
