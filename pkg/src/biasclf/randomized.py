"""Random first-degree augmentation and its safety validators.

Adding a secret random linear map to a network leaves the bias part untouched
but hands every gradient-based attacker a randomized Jacobian. With the banded
matrix family the one-step direct attack direction is EXACTLY the sign pattern
of two random rows' difference; with the plain uniform family the attack rates
are provably close to the random-direction adversary rate. Both facts are
checked empirically here, the first one bit-exactly, the second one by
Monte-Carlo estimates with Wilson intervals.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .net import ShapeError
from .attacks import AttackOutcome, _outcomes, _prep
from .decompose import bias_labels, input_jacobian_batch

FAMILIES = ("banded", "uniform")


# ---------------------------------------------------------------------------
# random matrices and the augmented model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RandomMatrixSpec:
    family: str
    lam: float
    rows: int
    cols: int
    seed: object = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")

    def with_seed(self, seed):
        return dataclasses.replace(self, seed=seed)


def sample_matrix(spec):
    """Draw one matrix from the spec's family.

    banded: row i (1-indexed) has entries of magnitude uniform in
        ((2i-1)*lam, 2i*lam) with equiprobable signs, which forces every
        coordinate of any two rows' difference past lam in magnitude.
    uniform: every entry uniform in (-lam, lam).
    """
    rng = np.random.default_rng(spec.seed)
    if spec.family == "uniform":
        return rng.uniform(-spec.lam, spec.lam, size=(spec.rows, spec.cols))
    mag = rng.uniform((2 * np.arange(1, spec.rows + 1) - 1)[:, None] * spec.lam,
                      (2 * np.arange(1, spec.rows + 1))[:, None] * spec.lam,
                      size=(spec.rows, spec.cols))
    sign = rng.integers(0, 2, size=(spec.rows, spec.cols)) * 2 - 1
    w = mag * sign
    for i in range(spec.rows):
        for j in range(i + 1, spec.rows):
            assert np.max(np.abs(w[i] - w[j])) > spec.lam
    return w


class AugmentedNetwork:
    """base network plus a fixed linear map: logits(x) = F(x) + w_r x.

    The bias part is the base's by construction (a linear map has no bias), so
    the bias hooks delegate; forward values and gradients include w_r, which is
    all a gradient-based attacker sees.
    """

    def __init__(self, base, w_r):
        w_r = np.asarray(w_r, dtype=np.float64)
        if w_r.shape != (base.m, base.n):
            raise ShapeError(f"w_r shape {w_r.shape} does not match ({base.m}, {base.n})")
        self.base = base
        self.w_r = w_r

    @property
    def n(self):
        return self.base.n

    @property
    def m(self):
        return self.base.m

    @property
    def bias_base(self):
        return self.base

    def logits_batch(self, x):
        x = self.base._check_batch(x)
        return self.base.logits_batch(x) + x @ self.w_r.T

    def forward(self, x):
        return self.logits_batch(x)[0]

    def vjp_input_batch(self, x, dlogits):
        return self.base.vjp_input_batch(x, dlogits) + np.asarray(dlogits) @ self.w_r

    def input_jacobian_batch(self, x):
        jac = input_jacobian_batch(self.base, self.base._check_batch(x))
        return jac + self.w_r[None, :, :]

    def grad_input(self, x, objective):
        xb = np.asarray(x, dtype=np.float64)[None, :]
        kind, idx = objective
        if kind == "logit":
            d = np.zeros((1, self.m))
            d[0, idx] = 1.0
        elif kind == "loss":
            from .net import softmax
            d = softmax(self.logits_batch(xb))
            d[0, int(idx)] -= 1.0
        else:
            raise ValueError(f"unknown objective kind {kind!r}")
        return self.vjp_input_batch(xb, d)[0]


def augment(net, w_r):
    return AugmentedNetwork(net, w_r)


# ---------------------------------------------------------------------------
# direct attacks
# ---------------------------------------------------------------------------

def runner_up(logits, y):
    masked = logits.copy()
    masked[np.arange(len(y)), y] = -np.inf
    return np.argmax(masked, axis=1)


def a1_direction(target, x, y):
    """Sign of the Jacobian row difference (runner-up minus own class) that the
    one-step direct attack moves along."""
    x, y, single = _prep(x, y)
    ybar = runner_up(target.logits_batch(x), y)
    jac = input_jacobian_batch(target, x)
    rows = np.arange(len(y))
    d = np.sign(jac[rows, ybar, :] - jac[rows, y, :])
    return (d[0], int(ybar[0])) if single else (d, ybar)


def direct_attack_a1_batch(target, x, y, rho):
    """One step of rho along the direct-attack direction; judged on the bias label."""
    x0, y, _ = _prep(x, y)
    d, _ = a1_direction(target, x0, y)
    adv = np.clip(x0 + rho * d, 0.0, 1.0)
    return _outcomes(target, "bias", x0, adv, y, np.ones(len(y), dtype=int))


def direct_attack_a1(target, x, y, rho) -> AttackOutcome:
    return direct_attack_a1_batch(target, x, y, rho)[0]


def direct_attack_a3_batch(target, x, y, rho, k):
    """k direct-attack steps of rho/k with the Jacobian re-derived each step;
    the runner-up class is fixed at the start."""
    if k < 1:
        raise ValueError("k must be at least 1")
    x0, y, _ = _prep(x, y)
    ybar = runner_up(target.logits_batch(x0), y)
    adv = x0.copy()
    rows = np.arange(len(y))
    for _ in range(int(k)):
        jac = input_jacobian_batch(target, adv)
        d = np.sign(jac[rows, ybar, :] - jac[rows, y, :])
        adv = np.clip(adv + (rho / k) * d, 0.0, 1.0)
    return _outcomes(target, "bias", x0, adv, y, np.full(len(y), int(k)))


def direct_attack_a3(target, x, y, rho, k) -> AttackOutcome:
    return direct_attack_a3_batch(target, x, y, rho, k)[0]


# ---------------------------------------------------------------------------
# rates and intervals
# ---------------------------------------------------------------------------

def wilson_interval(successes, samples, z=1.959963984540054):
    if samples == 0:
        return 0.0, 1.0
    p = successes / samples
    denom = 1.0 + z * z / samples
    center = (p + z * z / (2 * samples)) / denom
    half = z * np.sqrt(p * (1 - p) / samples + z * z / (4 * samples * samples)) / denom
    return max(0.0, center - half), min(1.0, center + half)


@dataclass
class RateEstimate:
    estimate: float
    samples: int
    ci95: float          # Wilson interval half-width
    successes: int = 0

    @classmethod
    def from_counts(cls, successes, samples):
        lo, hi = wilson_interval(successes, samples)
        est = successes / samples if samples else 0.0
        return cls(estimate=float(est), samples=int(samples), ci95=float((hi - lo) / 2), successes=int(successes))

    def overlaps(self, other):
        return abs(self.estimate - other.estimate) <= self.ci95 + other.ci95


def t_function(lam, a):
    """CDF value P(z < a) for z the difference of two independent uniforms on
    (-lam, lam); equals 1 - (2*lam - a)^2 / (8*lam^2) on [0, 2*lam]."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if not 0.0 <= a <= 2.0 * lam:
        raise ValueError(f"a={a} outside [0, {2 * lam}]")
    return 1.0 - (2.0 * lam - a) ** 2 / (8.0 * lam * lam)


def estimate_random_rate(net, rho, eval_set, num_directions=1, seed=0):
    """Monte-Carlo rate at which a uniformly random sign perturbation of size
    rho (clipped to the cube) moves the bias label."""
    if num_directions < 1:
        raise ValueError("num_directions must be at least 1")
    x = np.asarray(eval_set.inputs if hasattr(eval_set, "inputs") else eval_set, dtype=np.float64)
    y0 = bias_labels(net, x)
    flips = 0
    for t in range(num_directions):
        rng = np.random.default_rng((seed, t))
        v = rng.integers(0, 2, size=x.shape) * 2.0 - 1.0
        xp = np.clip(x + rho * v, 0.0, 1.0)
        flips += int(np.sum(bias_labels(net, xp) != y0))
    return RateEstimate.from_counts(flips, num_directions * len(x))


def estimate_creation_rate(net, attack, matrix_spec, eval_set, num_matrix_draws=1, seed=0, threads=1):
    """Rate at which ``attack`` run against the augmented network flips the
    (unaugmented) bias label, averaged over matrix draws and samples.

    attack: callable (model, x_batch, y_batch) -> list of AttackOutcome.
    """
    if num_matrix_draws < 1:
        raise ValueError("num_matrix_draws must be at least 1")
    x = np.asarray(eval_set.inputs if hasattr(eval_set, "inputs") else eval_set, dtype=np.float64)
    y0 = bias_labels(net, x)

    def one_draw(d):
        w_r = sample_matrix(matrix_spec.with_seed((seed, d)))
        outcomes = attack(augment(net, w_r), x, y0)
        return sum(1 for o in outcomes if o.success)

    from ._util import parallel_map
    counts = parallel_map(one_draw, range(num_matrix_draws), threads)
    return RateEstimate.from_counts(sum(counts), num_matrix_draws * len(x))


# ---------------------------------------------------------------------------
# theorem validators
# ---------------------------------------------------------------------------

def max_jacobian_entry(net, x):
    """Largest |W_x| entry over the evaluation points (audits the theorems'
    gradient-bound hypothesis pointwise)."""
    jac = input_jacobian_batch(net, x)
    return float(np.max(np.abs(jac)))


def verify_sign_direction(net, lam, eval_set, draws=1, rho=0.1, seed=0):
    """Exact check of the banded-augmentation safety statement: wherever the
    base Jacobian is bounded by lam/2, the one-step direct attack direction on
    the augmented model must equal sign(w_r[runner_up] - w_r[own]) in every
    coordinate. Returns the validator report (id 2 in the CLI)."""
    x = np.asarray(eval_set.inputs if hasattr(eval_set, "inputs") else eval_set, dtype=np.float64)
    y = bias_labels(net, x)
    jac = input_jacobian_batch(net, x)
    precond = np.max(np.abs(jac), axis=(1, 2)) < lam / 2.0
    checked = matched = 0
    for d in range(draws):
        spec = RandomMatrixSpec("banded", lam, net.m, net.n, seed=(seed, d))
        w_r = sample_matrix(spec)
        aug = augment(net, w_r)
        dirs, ybar = a1_direction(aug, x, y)
        expected = np.sign(w_r[ybar, :] - w_r[y, :])
        ok = np.all(dirs == expected, axis=1)
        checked += int(np.sum(precond))
        matched += int(np.sum(ok & precond))
    fraction = matched / checked if checked else float("nan")
    return {
        "theorem": 2,
        "family": "banded",
        "lambda": float(lam),
        "mu": 2.0 * max_jacobian_entry(net, x),
        "rho": float(rho),
        "n": int(net.n),
        "samples_checked": checked,
        "precondition_rate": float(np.mean(precond)),
        "estimate_attack": fraction,
        "estimate_random": None,
        "bound": 1.0,
        "holds": bool(checked > 0 and fraction == 1.0),
        "ci": 0.0,
    }


def verify_rate_bound(net, family, lam, rho, attack, eval_set, draws=3,
                      num_directions=50, k=5, seed=0, threads=1):
    """Statistical check of the rate bounds for the multi-step direct attack
    (A3) and the one-step sign attack on the loss (A2, two classes only).

    uniform family: A3 rate <= random rate + n*mu/lam; A2 rate <=
    exp(n*mu/lam) * random rate. banded family (A2): the attack rate is
    bounded by the random rate itself. All comparisons allow the summed
    Wilson widths as slack.
    """
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}")
    if attack not in ("A2", "A3"):
        raise ValueError("attack must be A2 or A3")
    if attack == "A2" and net.m != 2:
        raise ValueError("the A2 bounds are proved for two classes")
    x = np.asarray(eval_set.inputs if hasattr(eval_set, "inputs") else eval_set, dtype=np.float64)
    mu = 2.0 * max_jacobian_entry(net, x)
    spec = RandomMatrixSpec(family, lam, net.m, net.n, seed=seed)

    if attack == "A3":
        run = lambda model, xs, ys: direct_attack_a3_batch(model, xs, ys, rho, k)
    else:
        from .attacks import fgsm_batch
        run = lambda model, xs, ys: fgsm_batch(model, xs, ys, rho, classifier="bias")

    attacked = estimate_creation_rate(net, run, spec, x, num_matrix_draws=draws, seed=seed, threads=threads)
    random_rate = estimate_random_rate(net, rho, x, num_directions=num_directions, seed=seed + 1)

    n_mu_term = net.n * mu / lam
    if attack == "A3" and family == "uniform":
        theorem = 4
        bound = random_rate.estimate + n_mu_term
        with_slack = bound + random_rate.ci95 + attacked.ci95
    elif attack == "A2" and family == "uniform":
        theorem = 5
        factor = float(np.exp(n_mu_term))
        bound = factor * random_rate.estimate
        with_slack = factor * (random_rate.estimate + random_rate.ci95) + attacked.ci95
    else:
        theorem = 3
        bound = random_rate.estimate
        with_slack = bound + random_rate.ci95 + attacked.ci95
    holds = attacked.estimate <= with_slack
    return {
        "theorem": theorem,
        "family": family,
        "attack": attack,
        "lambda": float(lam),
        "mu": float(mu),
        "rho": float(rho),
        "n": int(net.n),
        "estimate_attack": attacked.estimate,
        "estimate_random": random_rate.estimate,
        "bound": float(bound),
        "holds": bool(holds),
        "ci": attacked.ci95 + random_rate.ci95,
    }
