"""Figure rendering for run directories.

Reads the machine-readable outputs other subcommands leave behind (EvalReport
JSON, training metrics.csv, verify JSON) and renders matplotlib figures next
to a combined summary CSV. Figures are presentation only; every number in them
exists in a delimited file first.
"""

from __future__ import annotations

import csv
import glob
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_rate_report(doc, out_png):
    """Grouped bar chart of rate rows with Wilson error bars."""
    rows = [r for r in doc.get("rows", []) if not str(r["attack"]).startswith("accuracy")]
    if not rows:
        return None
    attacks = sorted({r["attack"] for r in rows})
    budgets = list(dict.fromkeys(r["budget"] for r in rows))
    fig, ax = plt.subplots(figsize=(1.8 + 1.1 * len(budgets), 3.2))
    width = 0.8 / max(1, len(attacks))
    for ai, attack in enumerate(attacks):
        xs, ys, es = [], [], []
        for bi, budget in enumerate(budgets):
            for r in rows:
                if r["attack"] == attack and r["budget"] == budget:
                    xs.append(bi + ai * width)
                    ys.append(r["rate"])
                    es.append(r["ci"])
        ax.bar(xs, ys, width=width, yerr=es, capsize=2, label=attack)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(budgets))])
    ax.set_xticklabels([str(b) for b in budgets], rotation=30, ha="right")
    ax.set_ylabel("adversary creation rate")
    ax.set_title(f"{doc.get('classifier_id', '?')} on {doc.get('dataset_id', '?')}")
    ax.legend(fontsize=7)
    return _save(fig, out_png)


def render_training_curves(csv_path, out_png):
    epochs, loss, accs = [], [], {"full_acc": [], "bias_acc": [], "w_acc": []}
    with open(csv_path) as f:
        for row in csv.DictReader(f):
            epochs.append(int(row["epoch"]))
            loss.append(float(row["mean_loss"]))
            for k in accs:
                accs[k].append(float(row[k]))
    if not epochs:
        return None
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.5, 3.0))
    ax1.plot(epochs, loss)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("mean loss")
    for k, label in (("full_acc", "full"), ("bias_acc", "bias part"), ("w_acc", "first-degree part")):
        ax2.plot(epochs, accs[k], label=label)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(0, 1.02)
    ax2.legend(fontsize=8)
    return _save(fig, out_png)


def render_verify_report(doc, out_png):
    """Estimate vs bound bars for the safety validators."""
    reps = doc.get("reports", [])
    bars = []
    for rep in reps:
        if "estimate_attack" in rep and rep.get("estimate_attack") is not None:
            label = f"check {rep.get('theorem', rep.get('lemma'))}"
            bars.append((label, rep["estimate_attack"], rep.get("estimate_random"),
                         rep.get("bound"), rep.get("ci", 0.0)))
    if not bars:
        return None
    fig, ax = plt.subplots(figsize=(1.5 + 1.6 * len(bars), 3.2))
    for i, (label, att, rand, bound, ci) in enumerate(bars):
        ax.bar(i - 0.15, att, width=0.3, yerr=ci, capsize=3, color="tab:red", label="attack" if i == 0 else None)
        if rand is not None:
            ax.bar(i + 0.15, rand, width=0.3, color="tab:blue", label="random" if i == 0 else None)
        if bound is not None:
            ax.hlines(bound, i - 0.35, i + 0.35, color="k", linestyle="--",
                      label="bound" if i == 0 else None)
    ax.set_xticks(range(len(bars)))
    ax.set_xticklabels([b[0] for b in bars])
    ax.set_ylabel("rate")
    ax.legend(fontsize=8)
    return _save(fig, out_png)


def render_run(run_dir, out_dir):
    """Render every known artifact in run_dir; returns the files written."""
    written = []
    summary_rows = []
    for path in sorted(glob.glob(os.path.join(run_dir, "*.json"))):
        name = os.path.splitext(os.path.basename(path))[0]
        if name == "run_config":
            continue
        with open(path) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError:
                continue
        out_png = os.path.join(out_dir, name + ".png")
        if "rows" in doc:
            if render_rate_report(doc, out_png):
                written.append(out_png)
            for r in doc["rows"]:
                summary_rows.append([doc.get("classifier_id"), doc.get("dataset_id"),
                                     r["attack"], r["budget"], r["rate"], r["ci"], r["samples"]])
        elif "reports" in doc:
            if render_verify_report(doc, out_png):
                written.append(out_png)
    for path in sorted(glob.glob(os.path.join(run_dir, "*metrics*.csv"))):
        name = os.path.splitext(os.path.basename(path))[0]
        out_png = os.path.join(out_dir, name + ".png")
        if render_training_curves(path, out_png):
            written.append(out_png)
    if summary_rows:
        spath = os.path.join(out_dir, "summary.csv")
        with open(spath, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["classifier_id", "dataset_id", "attack", "budget", "rate", "ci", "samples"])
            w.writerows(summary_rows)
        written.append(spath)
    return written
