"""Command-line entry point.

Subcommands: train, attack, verify, evaluate, report. Runs are driven by
flags, optionally seeded from a flat key=value config file (flags win). Every
subcommand validates its inputs up front, writes only inside --out, and embeds
the resolved configuration and seed in its outputs.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def load_flat_config(path):
    """Flat key=value lines; '#' starts a comment."""
    cfg = {}
    try:
        with open(path) as f:
            for ln, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{ln}: expected key=value")
                k, v = line.split("=", 1)
                cfg[k.strip().replace("-", "_")] = v.strip()
    except OSError as e:
        raise UsageError(f"cannot read config file: {e}")
    return cfg


def merge_config(args, parser_defaults, file_cfg):
    """config file fills in anything the command line left at its default."""
    merged = vars(args).copy()
    for key, raw in file_cfg.items():
        if key not in merged:
            raise UsageError(f"unknown config key {key!r}")
        if merged[key] == parser_defaults.get(key):
            default = parser_defaults.get(key)
            if isinstance(default, bool):
                merged[key] = raw.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                merged[key] = int(raw)
            elif isinstance(default, float):
                merged[key] = float(raw)
            else:
                merged[key] = raw
    return argparse.Namespace(**merged)


def resolved_config(args, exclude=("config", "func")):
    return {k: v for k, v in sorted(vars(args).items()) if k not in exclude}


def ensure_outdir(path):
    os.makedirs(path, exist_ok=True)
    return path


def write_run_config(args, outdir):
    with open(os.path.join(outdir, "run_config.json"), "w") as f:
        json.dump(resolved_config(args), f, indent=2, sort_keys=True, default=str)


# ---------------------------------------------------------------------------
# dataset resolution
# ---------------------------------------------------------------------------

def resolve_dataset(name, split, seed, data_dir=None):
    from . import data as dio

    if name in ("mnist", "auto"):
        found = dio.find_mnist(split, data_dir)
        if found:
            return dio.load_idx(found[0], found[1], name=f"mnist-{split}")
        if name == "mnist":
            raise RuntimeFailure(
                "MNIST IDX files not found (set BIASCLF_DATA_DIR or --data-dir, "
                "expected train-images-idx3-ubyte etc.); use --data auto for the "
                "bundled digits fallback")
        return dio.upsample_pad(dio.load_builtin_digits(split, seed=0))
    if name == "digits":
        return dio.load_builtin_digits(split, seed=0)
    if name == "digits28":
        return dio.upsample_pad(dio.load_builtin_digits(split, seed=0))
    if name.startswith(("blobs", "moons", "steps")):
        kind, _, rest = name.partition(":")
        params = {"n": 2, "m": 2, "count": 500}
        for part in filter(None, rest.split(",")):
            k, _, v = part.partition("=")
            params[k] = int(v)
        # A fixed +1 offset keeps the held-out split disjoint from training.
        offset = 0 if split == "train" else 1
        return dio.gen_synthetic(kind, params["n"], params["m"], params["count"], (seed, offset))
    if os.path.exists(name):
        return dio.load_dataset(name)
    raise UsageError(f"unknown dataset {name!r}")


def load_model_checked(path):
    from .data import load_model

    if not os.path.isfile(path):
        raise RuntimeFailure(f"model file not found: {path}")
    try:
        return load_model(path)
    except ValueError as e:
        raise RuntimeFailure(str(e))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args):
    from .data import save_model
    from .net import make_convnet, make_mlp
    from .train import TrainConfig, train

    outdir = ensure_outdir(args.out)
    train_ds = resolve_dataset(args.data, "train", args.seed, args.data_dir)
    eval_ds = resolve_dataset(args.data, "test", args.seed, args.data_dir)
    hidden = [int(h) for h in args.hidden.split(",") if h]
    if args.arch == "mlp":
        net = make_mlp((train_ds.n,), hidden, train_ds.m, seed=args.seed)
    else:
        side = int(round(np.sqrt(train_ds.n)))
        if side * side != train_ds.n:
            raise UsageError("conv arch needs a square single-channel input")
        net = make_convnet((1, side, side), [8, 16], hidden or [64], train_ds.m, seed=args.seed)
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
        momentum=args.momentum, mode=args.mode, eps=args.eps,
        inner_steps=args.inner_steps, gamma=args.gamma, seed=args.seed,
        lr_decay=args.lr_decay, lr_decay_every=args.lr_decay_every,
        eps_warmup_epochs=args.eps_warmup,
    )
    from .train import TrainingDiverged

    log_path = os.path.join(outdir, "metrics.csv")
    try:
        with open(log_path, "w", newline="") as log:
            net, history = train(net, train_ds, cfg, eval_dataset=eval_ds, log_stream=log)
    except TrainingDiverged as e:
        raise RuntimeFailure(f"training diverged: {e}")
    save_model(net, os.path.join(outdir, "model.json"))
    write_run_config(args, outdir)
    final = history[-1]
    print(f"trained {args.mode} model on {train_ds.name}: "
          f"full={final['full_acc']:.4f} bias={final['bias_acc']:.4f} w={final['w_acc']:.4f}")
    print(f"wrote {outdir}/model.json and {outdir}/metrics.csv")
    return 0


ATTACK_NAMES = ("pgd", "fgsm", "saliency", "original-model", "correlation", "transfer-pgd")
PRESETS = ("table-1", "table-4", "table-6", "table-7", "table-8", "table-10")


def _write_report(report, outdir, prefix):
    stem = report.file_stem(prefix)
    jpath = os.path.join(outdir, stem + ".json")
    cpath = os.path.join(outdir, stem + ".csv")
    with open(jpath, "w") as f:
        f.write(report.to_json())
    with open(cpath, "w") as f:
        f.write(report.to_csv())
    print(f"wrote {jpath}")
    return jpath


def cmd_attack(args):
    from . import metrics

    outdir = ensure_outdir(args.out)
    ds = resolve_dataset(args.data, "test", args.seed, args.data_dir)
    if args.limit:
        ds = ds.take(args.limit)
    write_run_config(args, outdir)

    if args.preset:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; valid: {', '.join(PRESETS)}")
        config = {"preset": args.preset, "dataset": ds, "seed": args.seed,
                  "lam": args.lam, "draws": args.draws, "trials": args.trials,
                  "surrogate_epochs": args.surrogate_epochs}
        if args.preset == "table-1":
            models = {}
            for spec in args.models.split(","):
                if not spec:
                    continue
                mode, _, path = spec.partition("=")
                models[mode] = load_model_checked(path)
            if not models:
                raise UsageError("table-1 needs --models mode=path[,mode=path...]")
            config["models"] = models
        else:
            config["model"] = load_model_checked(args.model)
        if args.preset == "table-10":
            config["train_dataset"] = resolve_dataset(args.data, "train", args.seed, args.data_dir)
        try:
            report = metrics.run_experiment_table(config, threads=args.threads)
        except (FileNotFoundError, ValueError) as e:
            raise RuntimeFailure(str(e))
        _write_report(report, outdir, args.preset.replace("-", ""))
        return 0

    if args.attack not in ATTACK_NAMES:
        raise UsageError(f"unknown attack {args.attack!r}; valid: {', '.join(ATTACK_NAMES)}")
    net = load_model_checked(args.model)
    sub = metrics.correctly_classified(net, ds, args.classifier)
    y = metrics.predictions(net, sub.inputs, args.classifier)
    from . import attacks as atk

    if args.attack == "pgd":
        outs = atk.pgd_linf_batch(net, sub.inputs, y, eps=args.eps, steps=args.steps,
                                  alpha=args.alpha, classifier=args.classifier)
    elif args.attack == "fgsm":
        outs = atk.fgsm_batch(net, sub.inputs, y, rho=args.eps, classifier=args.classifier)
    elif args.attack == "saliency":
        outs = atk.saliency_l0_batch(net, sub.inputs, y, pixel_budget=args.pixels,
                                     classifier=args.classifier)
    elif args.attack == "original-model":
        outs = atk.original_model_attack_batch(net, sub.inputs, y, eps=args.alpha, max_steps=args.steps)
    elif args.attack == "correlation":
        outs = atk.correlation_attack_batch(net, sub.inputs, y, eps=args.alpha, max_steps=args.steps)
    else:
        raise UsageError("transfer-pgd is only available through --preset table-10")
    budget = f"eps={args.eps},steps={args.steps},pixels={args.pixels}"
    csv_text = atk.outcomes_csv(outs, args.attack, budget)
    path = os.path.join(outdir, f"attack_{args.attack}_s{args.seed}.csv")
    with open(path, "w") as f:
        f.write(csv_text)
    rate = metrics.attack_success_rate(outs)
    print(f"{args.attack} on {args.classifier}: rate={rate.estimate:.4f} +-{rate.ci95:.4f} "
          f"({rate.samples} samples)")
    print(f"wrote {path}")
    return 0


def cmd_verify(args):
    from . import randomized as rnd

    outdir = ensure_outdir(args.out)
    write_run_config(args, outdir)
    reports = []

    if args.lemma == "t-function":
        rng = np.random.default_rng(args.seed)
        lam = args.lam if args.lam > 0 else 1.0
        draws = rng.uniform(-lam, lam, size=(2, args.mc_draws))
        z = draws[0] - draws[1]
        rows = []
        ok = True
        for frac in (0.25, 0.5, 1.0, 1.5):
            a = frac * lam
            mc = float(np.mean(z < a))
            exact = rnd.t_function(lam, a)
            se = float(np.sqrt(exact * (1 - exact) / args.mc_draws))
            holds = abs(mc - exact) <= 3 * se
            ok &= holds
            rows.append({"a": a, "mc": mc, "exact": exact, "se": se, "holds": holds})
        reports.append({"lemma": "t-function", "lambda": lam, "draws": args.mc_draws,
                        "rows": rows, "holds": ok})
    elif args.theorem:
        net, eval_x = _verify_target(args)
        if args.theorem == 2:
            lam = _resolve_lambda(args, net, eval_x, factor=4.0)
            reports.append(rnd.verify_sign_direction(net, lam, eval_x, draws=args.draws,
                                                     rho=args.rho, seed=args.seed))
        elif args.theorem in (3, 4, 5):
            family = "banded" if args.theorem == 3 else "uniform"
            attack = "A3" if args.theorem == 4 else "A2"
            lam = _resolve_lambda(args, net, eval_x, factor=100.0 * net.n)
            reports.append(rnd.verify_rate_bound(net, family, lam, args.rho, attack, eval_x,
                                                 draws=args.draws, num_directions=args.directions,
                                                 k=args.k, seed=args.seed, threads=args.threads))
        else:
            raise UsageError("--theorem must be one of 2, 3, 4, 5")
    else:
        raise UsageError("verify needs --theorem N or --lemma t-function")

    path = os.path.join(outdir, f"verify_s{args.seed}.json")
    with open(path, "w") as f:
        json.dump({"config": resolved_config(args), "reports": reports}, f,
                  indent=2, sort_keys=True, default=str)
    print(f"wrote {path}")
    for rep in reports:
        tag = rep.get("theorem", rep.get("lemma"))
        print(f"check {tag}: holds={rep['holds']}")
        if not rep["holds"]:
            raise RuntimeFailure(f"verification of {tag} failed")
    return 0


def _verify_target(args):
    from .net import make_mlp
    from .train import TrainConfig, train

    if args.model:
        net = load_model_checked(args.model)
        ds = resolve_dataset(args.data, "test", args.seed, args.data_dir)
        if args.limit:
            ds = ds.take(args.limit)
        return net, ds.inputs
    # Small two-class toy model, trained briefly so its regions are non-trivial.
    ds = resolve_dataset(f"blobs:n={args.toy_n},m=2,count=400", "train", args.seed, None)
    net = make_mlp((ds.n,), [16, 16], 2, seed=args.seed)
    train(net, ds, TrainConfig(epochs=10, mode="normal", seed=args.seed, learning_rate=0.05))
    eval_ds = resolve_dataset(f"blobs:n={args.toy_n},m=2,count=400", "test", args.seed, None)
    limit = args.limit or 200
    return net, eval_ds.inputs[:limit]


def _resolve_lambda(args, net, eval_x, factor):
    from .randomized import max_jacobian_entry

    if args.lam_auto or args.lam <= 0:
        return factor * max(max_jacobian_entry(net, eval_x), 1e-12)
    return args.lam


def cmd_evaluate(args):
    from . import metrics

    outdir = ensure_outdir(args.out)
    net = load_model_checked(args.model)
    ds = resolve_dataset(args.data, args.split, args.seed, args.data_dir)
    if args.limit:
        ds = ds.take(args.limit)
    write_run_config(args, outdir)
    report = metrics.random_rate_table(net, ds, seed=args.seed, trials=args.trials,
                                       classifier=args.classifier)
    for rule in ("full", "bias", "w"):
        acc = metrics.accuracy(net, ds, rule)
        report.rows.insert(0, {"attack": f"accuracy[{rule}]", "budget": "-",
                               "rate": acc, "ci": 0.0, "samples": len(ds)})
    _write_report(report, outdir, "evaluate")
    print(f"accuracy full={metrics.accuracy(net, ds, 'full'):.4f} "
          f"bias={metrics.accuracy(net, ds, 'bias'):.4f}")
    return 0


def cmd_report(args):
    from .report import render_run

    if not os.path.isdir(args.run):
        raise RuntimeFailure(f"run directory not found: {args.run}")
    outdir = ensure_outdir(args.out or args.run)
    written = render_run(args.run, outdir)
    for path in written:
        print(f"wrote {path}")
    if not written:
        print("nothing to render (no reports or metrics files found)")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="biasclf", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.sub_map = {}
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key=value config file; flags win")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="runs/out", help="output directory")
        sp.add_argument("--data", default="auto",
                        help="mnist | auto | digits | digits28 | blobs[:n=..,m=..,count=..] | "
                             "moons | steps | dataset file")
        sp.add_argument("--data-dir", default=None, help="dataset root (else BIASCLF_DATA_DIR)")
        sp.add_argument("--limit", type=int, default=0, help="cap the evaluation set size")
        sp.add_argument("--threads", type=int, default=0, help="worker cap; 0 = all cores")

    t = sub.add_parser("train", help="train a model and write model.json + metrics.csv")
    common(t)
    t.add_argument("--mode", choices=("normal", "adversarial", "bias"), default="normal")
    t.add_argument("--arch", choices=("mlp", "conv"), default="mlp")
    t.add_argument("--hidden", default="256,128", help="comma-separated hidden widths")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--eps", type=float, default=0.0)
    t.add_argument("--inner-steps", type=int, default=7)
    t.add_argument("--gamma", type=float, default=1.0)
    t.add_argument("--lr-decay", type=float, default=1.0)
    t.add_argument("--lr-decay-every", type=int, default=0)
    t.add_argument("--eps-warmup", type=int, default=0, help="epochs to ramp eps from 0")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="run attack grids or a single attack")
    common(a)
    a.add_argument("--model", help="trained model file")
    a.add_argument("--models", default="", help="table-1: mode=path,mode=path,...")
    a.add_argument("--preset", default=None, help=f"one of {', '.join(PRESETS)}")
    a.add_argument("--attack", default=None, help=f"one of {', '.join(ATTACK_NAMES)}")
    a.add_argument("--classifier", choices=("full", "bias"), default="full")
    a.add_argument("--eps", type=float, default=0.1, help="l-inf ball (pgd) or fgsm step")
    a.add_argument("--alpha", type=float, default=0.01, help="per-step size")
    a.add_argument("--steps", type=int, default=10)
    a.add_argument("--pixels", type=int, default=40, help="l0 pixel budget")
    a.add_argument("--lam", type=float, default=100.0, help="table-7 augmentation scale")
    a.add_argument("--draws", type=int, default=3, help="table-7 matrix draws")
    a.add_argument("--trials", type=int, default=1, help="table-6 trials per sample")
    a.add_argument("--surrogate-epochs", type=int, default=20)
    a.set_defaults(func=cmd_attack)

    v = sub.add_parser("verify", help="run safety validators "
                       "(2: banded direction exactness; 3: two-class banded sign-attack rate; "
                       "4: uniform multi-step rate bound; 5: two-class uniform sign-attack bound)")
    common(v)
    v.add_argument("--theorem", type=int, default=0)
    v.add_argument("--lemma", default=None, help="t-function")
    v.add_argument("--model", default=None, help="model file (default: small trained toy)")
    v.add_argument("--toy-n", type=int, default=4, help="input dimension of the toy model")
    v.add_argument("--lam", type=float, default=0.0)
    v.add_argument("--lam-auto", action="store_true", help="pick lambda from the Jacobian bound")
    v.add_argument("--rho", type=float, default=0.05)
    v.add_argument("--draws", type=int, default=3, help="random-matrix draws")
    v.add_argument("--directions", type=int, default=50, help="random directions per sample")
    v.add_argument("--k", type=int, default=5, help="steps of the multi-step direct attack")
    v.add_argument("--mc-draws", type=int, default=10 ** 6)
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("evaluate", help="accuracies and random adversary rates")
    common(e)
    e.add_argument("--model", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--classifier", choices=("full", "bias"), default="bias")
    e.add_argument("--trials", type=int, default=1)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="render figures and a combined CSV from a run directory")
    r.add_argument("--run", required=True, help="directory with report JSON / metrics CSV files")
    r.add_argument("--out", default=None, help="output directory (default: the run directory)")
    r.set_defaults(func=cmd_report)

    p.sub_map = {"train": t, "attack": a, "verify": v, "evaluate": e, "report": r}
    return p


def main(argv=None):
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:
            return 0 if e.code == 0 else 1
        if getattr(args, "config", None):
            sp = parser.sub_map[args.command]
            defaults = {a.dest: a.default for a in sp._actions}
            args = merge_config(args, defaults, load_flat_config(args.config))
        if getattr(args, "threads", 0) == 0 and hasattr(args, "threads"):
            from ._util import default_threads
            args.threads = default_threads()
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except RuntimeFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
