"""Attacks on full and bias-part classifiers.

All attacks are gradient based: they see the target's logits and input
gradients, nothing else. The bias part itself has zero gradient, so attacks
on a bias classifier either ride the full model's loss gradient and hope the
bias label follows (the original-model attack) or push the first-degree margin
and rely on its anti-correlation with the bias margin (the correlation
attack).

Everything works on batches internally; each sample gets its own outcome and
stops as soon as its target label flips.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .net import loss_ce, softmax
from .decompose import bias_labels, input_jacobian_batch


@dataclass
class AttackOutcome:
    success: bool
    adversary: np.ndarray | None
    steps_used: int
    perturbation_linf: float
    perturbation_l0: int


def classifier_labels(model, x, which):
    """Labels under the chosen decision rule: argmax of the logits or of the bias part."""
    if which == "full":
        return np.argmax(model.logits_batch(x), axis=1)
    if which == "bias":
        return bias_labels(model, x)
    raise ValueError(f"unknown classifier {which!r}")


def _loss_grad(model, x, y):
    d = softmax(model.logits_batch(x))
    d[np.arange(len(y)), y] -= 1.0
    return model.vjp_input_batch(x, d)


def _outcomes(model, which, x0, x_final, y, steps_used):
    """Build outcomes, re-evaluating the target classifier on the final points
    so a stale success flag can never survive."""
    labels = classifier_labels(model, x_final, which)
    out = []
    for i in range(len(y)):
        delta = x_final[i] - x0[i]
        ok = labels[i] != y[i]
        out.append(AttackOutcome(
            success=bool(ok),
            adversary=x_final[i].copy() if ok else None,
            steps_used=int(steps_used[i]),
            perturbation_linf=float(np.max(np.abs(delta))),
            perturbation_l0=int(np.count_nonzero(delta)),
        ))
    return out


def _prep(x, y):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    return x, y, single


# ---------------------------------------------------------------------------
# white-box attacks on the gradient surface
# ---------------------------------------------------------------------------

def fgsm_batch(model, x, y, rho, classifier="full"):
    x0, y, _ = _prep(x, y)
    adv = np.clip(x0 + rho * np.sign(_loss_grad(model, x0, y)), 0.0, 1.0)
    return _outcomes(model, classifier, x0, adv, y, np.ones(len(y), dtype=int))


def fgsm(model, x, y, rho, classifier="full"):
    return fgsm_batch(model, x, y, rho, classifier)[0]


def _pgd_raw(model, x0, y, eps, steps, alpha, classifier):
    adv = x0.copy()
    used = np.zeros(len(y), dtype=int)
    active = np.arange(len(y))
    for _ in range(steps):
        if len(active) == 0:
            break
        g = _loss_grad(model, adv[active], y[active])
        stepped = adv[active] + alpha * np.sign(g)
        stepped = np.clip(stepped, x0[active] - eps, x0[active] + eps)
        adv[active] = np.clip(stepped, 0.0, 1.0)
        used[active] += 1
        done = classifier_labels(model, adv[active], classifier) != y[active]
        active = active[~done]
    return adv, used


def pgd_linf_batch(model, x, y, eps, steps, alpha, classifier="full"):
    """Iterated sign steps projected into the eps ball and [0,1]^n, with
    per-sample early exit on label change."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0, y, _ = _prep(x, y)
    adv, used = _pgd_raw(model, x0, y, eps, steps, alpha, classifier)
    return _outcomes(model, classifier, x0, adv, y, used)


def pgd_linf(model, x, y, eps, steps, alpha, classifier="full"):
    return pgd_linf_batch(model, x, y, eps, steps, alpha, classifier)[0]


def _saliency_raw(model, x0, y, pixel_budget, classifier):
    adv = x0.copy()
    touched = np.zeros_like(adv, dtype=bool)
    used = np.zeros(len(y), dtype=int)
    active = np.arange(len(y))
    for _ in range(int(pixel_budget)):
        if len(active) == 0:
            break
        g = _loss_grad(model, adv[active], y[active])
        sal = np.abs(g)
        sal[touched[active]] = -1.0
        pix = np.argmax(sal, axis=1)
        rows = np.arange(len(active))
        lo, hi = adv[active].copy(), adv[active].copy()
        lo[rows, pix] = 0.0
        hi[rows, pix] = 1.0
        pick_hi = loss_ce(model.logits_batch(hi), y[active]) > loss_ce(model.logits_batch(lo), y[active])
        adv[active, pix] = np.where(pick_hi, 1.0, 0.0)
        touched[active, pix] = True
        used[active] += 1
        done = classifier_labels(model, adv[active], classifier) != y[active]
        active = active[~done]
    return adv, used


def saliency_l0_batch(model, x, y, pixel_budget, classifier="full"):
    """Greedy single-pixel saturation: repeatedly take the untouched pixel with
    the largest loss saliency and pin it to whichever of {0,1} raises the loss
    more, up to pixel_budget pixels."""
    x0, y, _ = _prep(x, y)
    adv, used = _saliency_raw(model, x0, y, pixel_budget, classifier)
    return _outcomes(model, classifier, x0, adv, y, used)


def saliency_l0(model, x, y, pixel_budget, classifier="full"):
    return saliency_l0_batch(model, x, y, pixel_budget, classifier)[0]


# ---------------------------------------------------------------------------
# attacks aimed at the bias classifier
# ---------------------------------------------------------------------------

def original_model_attack_batch(model, x, y, eps, max_steps):
    """Ride the full model's loss gradient and watch the bias label: step
    x <- x + eps * sign(grad) until the bias label leaves y."""
    x0, y, _ = _prep(x, y)
    adv = x0.copy()
    used = np.zeros(len(y), dtype=int)
    active = np.where(bias_labels(model, adv) == y)[0]
    for _ in range(int(max_steps)):
        if len(active) == 0:
            break
        g = _loss_grad(model, adv[active], y[active])
        adv[active] = np.clip(adv[active] + eps * np.sign(g), 0.0, 1.0)
        used[active] += 1
        flipped = bias_labels(model, adv[active]) != y[active]
        active = active[~flipped]
    return _outcomes(model, "bias", x0, adv, y, used)


def original_model_attack(model, x, y, eps, max_steps):
    return original_model_attack_batch(model, x, y, eps, max_steps)[0]


def correlation_attack_batch(model, x, y, eps, max_steps):
    """Push the first-degree margin: for each candidate class i != y take raw
    (not sign-quantized) steps along W_{x,y} - W_{x,i} until the bias label
    moves. Candidates go in index order, each restarting from the original
    point; the reported l-inf norm is the realized one."""
    x0, y, _ = _prep(x, y)
    best = x0.copy()
    used = np.zeros(len(y), dtype=int)
    solved = bias_labels(model, x0) != y
    for cand in range(model.m):
        rows = np.where(~solved & (y != cand))[0]
        if len(rows) == 0:
            continue
        cur = x0[rows].copy()
        active = np.arange(len(rows))
        for _ in range(int(max_steps)):
            if len(active) == 0:
                break
            jac = input_jacobian_batch(model, cur[active])
            sub = np.arange(len(active))
            step = jac[sub, y[rows[active]], :] - jac[sub, cand, :]
            cur[active] = np.clip(cur[active] + eps * step, 0.0, 1.0)
            used[rows[active]] += 1
            flipped = bias_labels(model, cur[active]) != y[rows[active]]
            newly = active[flipped]
            best[rows[newly]] = cur[newly]
            solved[rows[newly]] = True
            active = active[~flipped]
    return _outcomes(model, "bias", x0, best, y, used)


def correlation_attack(model, x, y, eps, max_steps):
    return correlation_attack_batch(model, x, y, eps, max_steps)[0]


# ---------------------------------------------------------------------------
# transfer black-box attack
# ---------------------------------------------------------------------------

def oracle_labelled(dataset, model):
    """Relabel a dataset with the target model's own predictions."""
    from .data import LabeledDataset

    labels = np.argmax(model.logits_batch(dataset.inputs), axis=1)
    return LabeledDataset(dataset.inputs, labels, f"{dataset.name}-oracle", model.m)


def train_surrogate(oracle_dataset, hidden, cfg):
    """Fresh network normally trained on the target's output labels."""
    from .net import make_mlp
    from .train import replace_mode, train

    surrogate = make_mlp((oracle_dataset.n,), hidden, oracle_dataset.m, seed=cfg.seed + 1)
    train(surrogate, oracle_dataset, replace_mode(cfg, "normal"))
    return surrogate


def transfer_attack_batch(target, surrogate, x, y, classifier, kind, **budget):
    """Craft adversaries against the surrogate (even unsuccessful attempts are
    kept), then judge them on the target's classifier."""
    x0, y, _ = _prep(x, y)
    if kind == "pgd":
        finals, used = _pgd_raw(surrogate, x0, y, classifier="full", **budget)
    elif kind == "saliency":
        finals, used = _saliency_raw(surrogate, x0, y, classifier="full", **budget)
    else:
        raise ValueError(f"unknown transfer attack kind {kind!r}")
    return _outcomes(target, classifier, x0, finals, y, used)


# ---------------------------------------------------------------------------
# batch bookkeeping
# ---------------------------------------------------------------------------

def outcomes_csv(outcomes, attack_name, budget, sample_ids=None):
    """Per-sample results as CSV (sample_id, attack_name, budget, success, steps_used, linf, l0)."""
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["sample_id", "attack_name", "budget", "success", "steps_used", "linf", "l0"])
    for i, o in enumerate(outcomes):
        sid = sample_ids[i] if sample_ids is not None else i
        w.writerow([sid, attack_name, budget, int(o.success), o.steps_used,
                    f"{o.perturbation_linf:.6f}", o.perturbation_l0])
    return buf.getvalue()
