"""Accuracies, random-perturbation adversary rates, and table-shaped reports.

Rate denominators only count samples the classifier under test already labels
correctly; every rate carries a Wilson 95% interval and is fully determined by
(config, seed).
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import attacks as atk
from ._util import config_hash
from .decompose import bias_labels, bias_parts_batch
from .randomized import (
    RandomMatrixSpec,
    RateEstimate,
    estimate_creation_rate,
    estimate_random_rate,
)


def predictions(model, x, classifier="full"):
    if classifier == "full":
        return np.argmax(model.logits_batch(x), axis=1)
    if classifier == "bias":
        return bias_labels(model, x)
    if classifier == "w":
        logits = model.logits_batch(x)
        return np.argmax(logits - bias_parts_batch(model, x), axis=1)
    raise ValueError(f"unknown classifier {classifier!r}")


def accuracy(model, dataset, classifier="full"):
    """Fraction of the dataset the chosen decision rule labels correctly."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(predictions(model, dataset.inputs, classifier) == dataset.labels))


def correctly_classified(model, dataset, classifier):
    """The subset a rate denominator is allowed to contain."""
    keep = predictions(model, dataset.inputs, classifier) == dataset.labels
    return dataset.subset(np.where(keep)[0])


# ---------------------------------------------------------------------------
# random-perturbation adversary rates
# ---------------------------------------------------------------------------

def r1_rate(model, dataset, pixels=60, trials=1, seed=0, classifier="bias"):
    """Flip a random set of pixels b -> 1-b and count label changes among
    correctly classified samples."""
    ds = correctly_classified(model, dataset, classifier)
    if len(ds) == 0:
        return RateEstimate.from_counts(0, 0)
    pixels = int(min(pixels, ds.n))
    y0 = predictions(model, ds.inputs, classifier)
    flips = 0
    for t in range(trials):
        rng = np.random.default_rng((seed, t))
        xp = ds.inputs.copy()
        if pixels > 0:
            cols = np.argsort(rng.random((len(ds), ds.n)), axis=1)[:, :pixels]
            rows = np.arange(len(ds))[:, None]
            xp[rows, cols] = 1.0 - xp[rows, cols]
        flips += int(np.sum(predictions(model, xp, classifier) != y0))
    return RateEstimate.from_counts(flips, trials * len(ds))


def r2_rate(model, dataset, amplitude=0.2, trials=1, seed=0, classifier="bias"):
    """Shift every pixel by +-amplitude (equiprobable, clipped to [0,1]) and
    count label changes among correctly classified samples."""
    ds = correctly_classified(model, dataset, classifier)
    if len(ds) == 0:
        return RateEstimate.from_counts(0, 0)
    y0 = predictions(model, ds.inputs, classifier)
    flips = 0
    for t in range(trials):
        rng = np.random.default_rng((seed, t))
        v = rng.integers(0, 2, size=ds.inputs.shape) * 2.0 - 1.0
        xp = np.clip(ds.inputs + amplitude * v, 0.0, 1.0)
        flips += int(np.sum(predictions(model, xp, classifier) != y0))
    return RateEstimate.from_counts(flips, trials * len(ds))


# ---------------------------------------------------------------------------
# attack-rate grids
# ---------------------------------------------------------------------------

def linf_budgets():
    """The 1-i budgets: per-step 0.01 with 10*i steps, ball radius 0.1*i."""
    return [(f"1-{i}", 0.1 * i, 0.01, 10 * i) for i in (1, 2, 3)]


def l0_budgets(n):
    """The 2-i budgets (40/60/80 pixels of a 784-pixel image), rescaled to the
    actual input size for desk-scale substitutes."""
    out = []
    for i in (40, 60, 80):
        out.append((f"2-{i}", max(1, round(i * n / 784))))
    return out


def attack_success_rate(outcomes):
    return RateEstimate.from_counts(sum(1 for o in outcomes if o.success), len(outcomes))


def creation_rate(model, dataset, attack_name, budget_args, classifier, seed=0):
    """Success rate of one attack over the correctly classified subset."""
    ds = correctly_classified(model, dataset, classifier)
    if len(ds) == 0:
        return RateEstimate.from_counts(0, 0)
    y = predictions(model, ds.inputs, classifier)
    if attack_name == "pgd":
        outs = atk.pgd_linf_batch(model, ds.inputs, y, classifier=classifier, **budget_args)
    elif attack_name == "saliency":
        outs = atk.saliency_l0_batch(model, ds.inputs, y, classifier=classifier, **budget_args)
    elif attack_name == "original-model":
        outs = atk.original_model_attack_batch(model, ds.inputs, y, **budget_args)
    elif attack_name == "correlation":
        outs = atk.correlation_attack_batch(model, ds.inputs, y, **budget_args)
    elif attack_name == "fgsm":
        outs = atk.fgsm_batch(model, ds.inputs, y, classifier=classifier, **budget_args)
    else:
        raise ValueError(f"unknown attack {attack_name!r}")
    return attack_success_rate(outs)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    classifier_id: str
    dataset_id: str
    accuracy: float
    rows: list = field(default_factory=list)
    notes: str = ""
    config: dict = field(default_factory=dict)
    seed: int = 0

    def add_row(self, attack, budget, rate: RateEstimate, **extra):
        row = {"attack": attack, "budget": budget, "rate": rate.estimate,
               "ci": rate.ci95, "samples": rate.samples}
        row.update(extra)
        self.rows.append(row)

    def to_json(self):
        return json.dumps({
            "classifier_id": self.classifier_id,
            "dataset_id": self.dataset_id,
            "accuracy": self.accuracy,
            "rows": self.rows,
            "notes": self.notes,
            "config": self.config,
            "seed": self.seed,
        }, indent=2, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["classifier_id", "dataset_id", "attack", "budget", "rate", "ci", "samples"])
        for r in self.rows:
            w.writerow([self.classifier_id, self.dataset_id, r["attack"], r["budget"],
                        f"{r['rate']:.6f}", f"{r['ci']:.6f}", r["samples"]])
        return buf.getvalue()

    def file_stem(self, prefix="report"):
        return f"{prefix}_{config_hash(self.config)}_s{self.seed}"


def accuracy_table(models, dataset, notes=""):
    """Accuracy grid over (model id) x (first-degree, bias, full) rules."""
    report = EvalReport("grid", dataset.name, float("nan"), notes=notes)
    for model_id, model in models.items():
        for rule in ("w", "bias", "full"):
            est = RateEstimate.from_counts(
                int(round(accuracy(model, dataset, rule) * len(dataset))), len(dataset))
            report.add_row(f"accuracy[{rule}]", model_id, est)
    return report


def attack_table(model, dataset, classifier, seed=0, limit=None,
                 include_linf=True, include_l0=True, notes=""):
    """The per-classifier attack grid over the standard budgets.

    For the bias rule the l-inf column is the original-model attack (the
    gradient still comes from the full model); for the full rule it is plain
    PGD. The l0 column is the greedy saturation attack either way, judged by
    the configured rule.
    """
    ds = dataset.take(limit) if limit else dataset
    report = EvalReport(classifier, ds.name, accuracy(model, ds, classifier),
                        notes=notes, seed=seed,
                        config={"table": "attack-grid", "classifier": classifier,
                                "limit": limit, "dataset": ds.name, "seed": seed})
    if include_linf:
        for name, eps, alpha, steps in linf_budgets():
            if classifier == "bias":
                rate = creation_rate(model, ds, "original-model",
                                     {"eps": alpha, "max_steps": steps}, "bias", seed)
            else:
                rate = creation_rate(model, ds, "pgd",
                                     {"eps": eps, "alpha": alpha, "steps": steps}, classifier, seed)
            report.add_row("original-model" if classifier == "bias" else "pgd", name, rate)
    if include_l0:
        for name, budget in l0_budgets(ds.n):
            rate = creation_rate(model, ds, "saliency", {"pixel_budget": budget}, classifier, seed)
            report.add_row("saliency", name, rate)
    return report


def random_rate_table(model, dataset, seed=0, trials=1, classifier="bias", notes=""):
    report = EvalReport(classifier, dataset.name, accuracy(model, dataset, classifier),
                        notes=notes, seed=seed,
                        config={"table": "random-rates", "dataset": dataset.name,
                                "classifier": classifier, "trials": trials, "seed": seed})
    report.add_row("R1", "pixels=60", r1_rate(model, dataset, 60, trials, seed, classifier))
    report.add_row("R2", "amp=0.2", r2_rate(model, dataset, 0.2, trials, seed, classifier))
    return report


def augmented_attack_table(net, dataset, lam=100.0, draws=3, seed=0, limit=None,
                           threads=1, notes=""):
    """Original-model attack rates against the uniformly augmented model."""
    ds = dataset.take(limit) if limit else dataset
    sub = correctly_classified(net, ds, "bias")
    report = EvalReport("bias+uniform", ds.name, accuracy(net, ds, "bias"),
                        notes=notes, seed=seed,
                        config={"table": "augmented-attack", "dataset": ds.name,
                                "lambda": lam, "draws": draws, "limit": limit, "seed": seed})
    spec = RandomMatrixSpec("uniform", lam, net.m, net.n, seed=seed)
    for name, _eps, alpha, steps in linf_budgets():
        attack = lambda model, xs, ys: atk.original_model_attack_batch(model, xs, ys, alpha, steps)
        rate = estimate_creation_rate(net, attack, spec, sub.inputs,
                                      num_matrix_draws=draws, seed=seed, threads=threads)
        report.add_row("original-model+augment", name, rate)
    return report


def correlation_table(model, dataset, seed=0, limit=None, notes=""):
    ds = dataset.take(limit) if limit else dataset
    report = EvalReport("bias", ds.name, accuracy(model, ds, "bias"),
                        notes=notes, seed=seed,
                        config={"table": "correlation", "dataset": ds.name,
                                "limit": limit, "seed": seed})
    for name, _eps, _alpha, steps in linf_budgets():
        rate = creation_rate(model, ds, "correlation",
                             {"eps": 0.01, "max_steps": steps}, "bias", seed)
        report.add_row("correlation", name, rate)
    return report


PRESETS = ("table-1", "table-4", "table-6", "table-7", "table-8", "table-10")


def run_experiment_table(config, threads=1):
    """Drive one preset experiment grid from a plain config dict.

    Expected keys: preset; dataset (a LabeledDataset, or a dataset-cache path);
    model (path or Network) or models ({id: path-or-Network}); seed; limit;
    preset extras (lam, draws, trials, surrogate_epochs, train_dataset).
    Reruns with an identical config are bit-identical.
    """
    from .data import LabeledDataset, load_dataset, load_model

    def get_dataset(key="dataset"):
        ds = config.get(key)
        if isinstance(ds, LabeledDataset):
            return ds
        if ds is None or not os.path.exists(str(ds)):
            raise FileNotFoundError(f"config {key} does not name an existing dataset: {ds!r}")
        return load_dataset(ds)

    def get_model(spec):
        if hasattr(spec, "logits_batch"):
            return spec
        if spec is None or not os.path.exists(str(spec)):
            raise FileNotFoundError(f"config does not name an existing model file: {spec!r}")
        return load_model(spec)

    preset = config.get("preset")
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; valid: {', '.join(PRESETS)}")
    seed = int(config.get("seed", 0))
    limit = config.get("limit") or None
    ds = get_dataset()
    if limit:
        ds = ds.take(limit)

    if preset == "table-1":
        models = {name: get_model(path) for name, path in config["models"].items()}
        if not models:
            raise ValueError("table-1 needs a non-empty models map")
        return accuracy_table(models, ds, notes=config.get("notes", ""))
    net = get_model(config.get("model"))
    if preset == "table-4":
        report = EvalReport("grid", ds.name, accuracy(net, ds, "full"), seed=seed,
                            config={"preset": preset, "limit": limit})
        for rule in ("full", "bias"):
            part = attack_table(net, ds, rule, seed=seed)
            for row in part.rows:
                report.add_row(f"{row['attack']}[{rule}]", row["budget"],
                               RateEstimate(row["rate"], row["samples"], row["ci"]))
        return report
    if preset == "table-6":
        return random_rate_table(net, ds, seed=seed, trials=int(config.get("trials", 1)))
    if preset == "table-7":
        return augmented_attack_table(net, ds, lam=float(config.get("lam", 100.0)),
                                      draws=int(config.get("draws", 3)), seed=seed,
                                      threads=threads)
    if preset == "table-8":
        return correlation_table(net, ds, seed=seed)
    # table-10: surrogate transfer grid over both decision rules
    from .attacks import oracle_labelled, train_surrogate
    from .train import TrainConfig

    train_split = config.get("train_dataset")
    oracle_ds = oracle_labelled(train_split if isinstance(train_split, LabeledDataset)
                                else get_dataset("train_dataset"), net)
    cfg = TrainConfig(epochs=int(config.get("surrogate_epochs", 20)), mode="normal",
                      seed=seed, learning_rate=0.05)
    surrogate = train_surrogate(oracle_ds, [128, 64], cfg)
    report = EvalReport("grid", ds.name, accuracy(net, ds, "bias"), seed=seed,
                        config={"preset": preset, "limit": limit})
    for rule in ("full", "bias"):
        part = transfer_table(net, surrogate, ds, rule, seed=seed)
        for row in part.rows:
            report.add_row(f"{row['attack']}[{rule}]", row["budget"],
                           RateEstimate(row["rate"], row["samples"], row["ci"]))
    return report


def transfer_table(target, surrogate, dataset, classifier, seed=0, limit=None, notes=""):
    ds = dataset.take(limit) if limit else dataset
    sub = correctly_classified(target, ds, classifier)
    report = EvalReport(classifier, ds.name, accuracy(target, ds, classifier),
                        notes=notes, seed=seed,
                        config={"table": "transfer", "dataset": ds.name,
                                "classifier": classifier, "limit": limit, "seed": seed})
    y = predictions(target, sub.inputs, classifier)
    for name, eps, alpha, steps in linf_budgets():
        outs = atk.transfer_attack_batch(target, surrogate, sub.inputs, y, classifier,
                                         "pgd", eps=eps, alpha=alpha, steps=steps)
        report.add_row("transfer-pgd", name, attack_success_rate(outs))
    for name, budget in l0_budgets(ds.n):
        outs = atk.transfer_attack_batch(target, surrogate, sub.inputs, y, classifier,
                                         "saliency", pixel_budget=budget)
        report.add_row("transfer-saliency", name, attack_success_rate(outs))
    return report
