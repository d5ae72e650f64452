"""Training loops: plain cross-entropy, inner-max adversarial, and the
bias-part regime.

The bias regime minimizes L_CE(B(x+z), y) + gamma * L_CE(F(x+z), y) where z is
found by the same inner ascent used for adversarial training. Two sign
conventions are deliberate and tested: the inner loop ASCENDS the loss (it
looks for the worst perturbation), and the outer update DESCENDS it. Since the
bias part has zero input gradient almost everywhere, the inner ascent of the
combined loss is carried entirely by the gamma term; the outer gradient of the
bias term treats the activation gates as constants of the current region.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, asdict

import numpy as np

from .net import SgdMomentum, grad_params, loss_ce, softmax
from .decompose import bias_parts_batch, input_jacobian_batch

MODES = ("normal", "adversarial", "bias")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    mode: str = "normal"
    eps: float = 0.0              # l-inf radius of the inner max
    inner_steps: int = 7
    inner_stepsize: float = 0.0   # 0 -> 2.5 * eps / steps
    gamma: float = 1.0            # weight of the full-model term in bias mode
    seed: int = 0
    lr_decay: float = 1.0         # multiplicative step decay
    lr_decay_every: int = 0       # epochs between decays; 0 disables
    eps_warmup_epochs: int = 0    # ramp eps linearly from 0 over this many epochs
    eval_subsample: int = 2000    # cap on the per-epoch metrics evaluation set

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.eps < 0 or self.inner_steps < 0 or self.gamma < 0:
            raise ValueError("eps, inner_steps and gamma must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def resolved_stepsize(self):
        if self.inner_stepsize > 0:
            return self.inner_stepsize
        if self.inner_steps == 0:
            return 0.0
        return 2.5 * self.eps / self.inner_steps


def _loss_input_grad(net, x, y, loss_spec):
    """Input gradient of the configured ascent objective.

    "full": cross-entropy of the logits. "combined": the bias term contributes
    zero input gradient inside a region, so the gradient is gamma times the
    full term's. ("logit", i): the raw i-th logit.
    """
    kind = loss_spec[0]
    if kind == "full":
        trace = net.run(x)
        d = softmax(trace.logits)
        d[np.arange(len(y)), y] -= 1.0
        dx, _ = net.backprop(trace, d, want_param_grads=False)
        return dx
    if kind == "combined":
        gamma = loss_spec[1]
        return gamma * _loss_input_grad(net, x, y, ("full",))
    if kind == "logit":
        trace = net.run(x)
        d = np.zeros_like(trace.logits)
        d[:, loss_spec[1]] = 1.0
        dx, _ = net.backprop(trace, d, want_param_grads=False)
        return dx
    raise ValueError(f"unknown loss spec {loss_spec!r}")


def pgd_inner_max(net, x, y, eps, steps, stepsize, loss_spec=("full",)):
    """Iterated sign-ascent of the loss inside the eps ball and [0,1]^n."""
    x0 = np.asarray(x, dtype=np.float64)
    single = x0.ndim == 1
    if single:
        x0 = x0[None, :]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if eps == 0.0 or steps == 0:
        out = x0.copy()
    else:
        out = x0.copy()
        for _ in range(steps):
            g = _loss_input_grad(net, out, y, loss_spec)
            out = out + stepsize * np.sign(g)
            out = np.clip(out, x0 - eps, x0 + eps)
            out = np.clip(out, 0.0, 1.0)
    assert np.max(np.abs(out - x0)) <= eps + 1e-15 and out.min() >= 0.0 and out.max() <= 1.0
    return out[0] if single else out


def _batch_grads(net, x, y, cfg, eps):
    if cfg.mode == "normal":
        return grad_params(net, x, y, objective="full")
    stepsize = cfg.resolved_stepsize() * (eps / cfg.eps if cfg.eps else 0.0)
    if cfg.mode == "adversarial":
        x_adv = pgd_inner_max(net, x, y, eps, cfg.inner_steps, stepsize, ("full",))
        return grad_params(net, x_adv, y, objective="full")
    x_adv = pgd_inner_max(net, x, y, eps, cfg.inner_steps, stepsize, ("combined", cfg.gamma))
    return grad_params(net, x_adv, y, objective="combined", gamma=cfg.gamma)


def _epoch_metrics(net, dataset, cfg, rng):
    idx = np.arange(len(dataset))
    if cfg.eval_subsample and len(idx) > cfg.eval_subsample:
        idx = rng.choice(idx, size=cfg.eval_subsample, replace=False)
    x, y = dataset.inputs[idx], dataset.labels[idx]
    logits = net.logits_batch(x)
    bias = bias_parts_batch(net, x)
    w_part = logits - bias
    return {
        "mean_loss": float(np.mean(loss_ce(logits, y))),
        "full_acc": float(np.mean(np.argmax(logits, axis=1) == y)),
        "bias_acc": float(np.mean(np.argmax(bias, axis=1) == y)),
        "w_acc": float(np.mean(np.argmax(w_part, axis=1) == y)),
    }


def train(net, dataset, cfg, eval_dataset=None, log_stream=None):
    """Mini-batch SGD under the configured regime; mutates and returns net.

    Per-epoch metrics go to ``log_stream`` as CSV lines
    (epoch, mean_loss, full_acc, bias_acc, w_acc) and are also returned.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if cfg.mode == "adversarial" and cfg.eps <= 0:
        raise ValueError("adversarial mode needs eps > 0")
    rng = np.random.default_rng(cfg.seed)
    opt = SgdMomentum(cfg.learning_rate, cfg.momentum)
    eval_ds = eval_dataset if eval_dataset is not None else dataset
    writer = csv.writer(log_stream) if log_stream is not None else None
    if writer:
        writer.writerow(["epoch", "mean_loss", "full_acc", "bias_acc", "w_acc"])
    history = []
    for epoch in range(cfg.epochs):
        if cfg.lr_decay_every and epoch and epoch % cfg.lr_decay_every == 0:
            opt.lr *= cfg.lr_decay
        eps = cfg.eps
        if cfg.eps_warmup_epochs:
            eps = cfg.eps * min(1.0, (epoch + 1) / cfg.eps_warmup_epochs)
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            try:
                grads = _batch_grads(net, dataset.inputs[sel], dataset.labels[sel], cfg, eps)
                opt.step(net, grads)
            except FloatingPointError as e:
                raise TrainingDiverged(f"epoch {epoch}: {e}") from e
        row = _epoch_metrics(net, eval_ds, cfg, rng)
        if not np.isfinite(row["mean_loss"]):
            raise TrainingDiverged(f"epoch {epoch}: loss is not finite")
        history.append({"epoch": epoch, **row})
        if writer:
            writer.writerow([epoch, f"{row['mean_loss']:.6f}", f"{row['full_acc']:.4f}",
                             f"{row['bias_acc']:.4f}", f"{row['w_acc']:.4f}"])
    return net, history


def train_normal(net, dataset, cfg, **kw):
    cfg = replace_mode(cfg, "normal")
    return train(net, dataset, cfg, **kw)


def train_adversarial(net, dataset, cfg, **kw):
    cfg = replace_mode(cfg, "adversarial")
    return train(net, dataset, cfg, **kw)


def train_bias(net, dataset, cfg, **kw):
    cfg = replace_mode(cfg, "bias")
    return train(net, dataset, cfg, **kw)


def replace_mode(cfg, mode):
    if cfg.mode == mode:
        return cfg
    d = asdict(cfg)
    d["mode"] = mode
    return TrainConfig(**d)


def history_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["epoch", "mean_loss", "full_acc", "bias_acc", "w_acc"])
    for row in history:
        w.writerow([row["epoch"], f"{row['mean_loss']:.6f}", f"{row['full_acc']:.4f}",
                    f"{row['bias_acc']:.4f}", f"{row['w_acc']:.4f}"])
    return buf.getvalue()
