"""Command line entry point: ``krontime {train,eval,bench,oracle,ablate}``.

Settings come from built-in defaults, then an optional JSON config file
(``--config``), then explicit flags; later sources win. Exit codes are 0 on
success, 1 when a checked property fails or training diverges, and 2 for
usage, configuration and data errors.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from krontime.attention import DecompositionPlan
from krontime.bench import balanced_plan, check_plans_match, run_bench, write_bench_csv
from krontime.data import gen_synthetic, load_ts, load_uea, z_normalize
from krontime.model import KronTimeModel, ModelConfig, load_checkpoint, save_checkpoint, token_count
from krontime.oracle import run_oracle_suite
from krontime.train import (
    TrainConfig,
    TrainingDiverged,
    evaluate,
    run_summary,
    stratified_split,
    stratified_subsample,
    train_loop,
    write_json,
)

log = logging.getLogger("krontime")

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    """Bad settings or inputs; reported with exit code 2."""


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).replace(" ", "").split(",") if v]


def _plan_text(value):
    if isinstance(value, (list, tuple)):
        return "x".join(str(int(v)) for v in value)
    return str(value)


def _plan_list(value):
    if isinstance(value, str):
        value = value.split()
    return [_plan_text(v) for v in value]


def _bool(value):
    if isinstance(value, bool):
        return value
    text = str(value).lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


# key -> (converter, default, help); shared by flags and config files
DATA_OPTIONS = {
    "dataset": (str, "synthetic:two-freq", "synthetic:<kind>, uea:<Problem> or a .ts path"),
    "n_samples": (int, 400, "synthetic: number of series"),
    "series_length": (int, 512, "synthetic: series length"),
    "noise": (float, 0.3, "synthetic: Gaussian noise std"),
    "n_classes": (int, 2, "synthetic: number of classes (burst-position only)"),
    "data_seed": (int, 0, "synthetic: generator seed"),
    "subsample": (float, 1.0, "stratified fraction of the dataset to keep"),
    "normalize": (_bool, True, "z-normalise every series and channel"),
}
MODEL_OPTIONS = {
    "plan": (_plan_text, "auto", "factors such as 8x8 or 16,16,4, or 'auto'"),
    "factor_mode": (str, "batched", "batched or shared"),
    "update_order": (_int_list, None, "mode update order, e.g. 1,0 (default ascending)"),
    "patch_len": (int, 8, "patch length"),
    "stride": (int, 0, "patch stride (0 means patch_len)"),
    "d_model": (int, 32, "embedding width"),
    "n_heads": (int, 4, "attention heads"),
    "n_layers": (int, 1, "encoder layers"),
    "d_ff": (int, 64, "feed-forward width"),
    "dtype": (str, "float32", "float32 or float64"),
}
TRAIN_OPTIONS = {
    "lr": (float, 1e-3, "Adam learning rate"),
    "batch_size": (int, 16, "minibatch size"),
    "max_epochs": (int, 200, "epoch cap"),
    "patience": (int, 20, "early stopping patience in epochs"),
    "seed": (int, 0, "seed for init, split and shuffling"),
}
COMMANDS = {
    "train": {**DATA_OPTIONS, **MODEL_OPTIONS, **TRAIN_OPTIONS},
    "ablate": {
        **DATA_OPTIONS, **MODEL_OPTIONS, **TRAIN_OPTIONS,
        "plans": (_plan_list, ["64", "8x8", "4x4x4"], "plans to compare (space separated)"),
    },
    "eval": {
        **DATA_OPTIONS,
        "checkpoint": (str, None, "checkpoint written by train"),
        "split": (str, "test", "'test' re-derives the training run's test split, 'all' uses every series"),
    },
    "bench": {
        "lengths": (_int_list, [1024, 2048, 4096, 8192], "sequence lengths, comma separated"),
        "plans": (_plan_list, [], "explicit plans; lengths without one get a balanced 2-level plan"),
        "d": (int, 16, "head dimension"),
        "repeats": (int, 5, "timed repeats after one warmup"),
        "threads": (int, 1, "BLAS threads"),
        "dtype": (str, "float32", "float32 or float64"),
        "memory": (_bool, True, "record allocator peak bytes"),
        "seed": (int, 0, "input seed"),
    },
    "oracle": {
        "max_n": (int, 64, "largest sequence length checked (at most 256)"),
        "seeds": (int, 20, "random seeds per case"),
        "corrupt": (_bool, False, argparse.SUPPRESS),
    },
}
HELP = {
    "train": "train one model and keep the best-validation checkpoint",
    "eval": "evaluate a checkpoint",
    "bench": "time full vs. Kronecker attention forwards",
    "oracle": "run the brute-force invariant suite",
    "ablate": "train one model per decomposition plan",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="krontime", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name], argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of settings; flags override it")
        p.add_argument("--out", help="output directory (default: current directory)")
        for key, (conv, default, text) in options.items():
            flag = "--" + key.replace("_", "-")
            if key == "plans":
                p.add_argument(flag, nargs="+", help=text)
            elif conv is _bool:
                p.add_argument(flag, type=_bool, nargs="?", const=True, metavar="BOOL",
                               help=text if text == argparse.SUPPRESS else f"{text} (default {default})")
            else:
                p.add_argument(flag, type=conv, help=f"{text} (default {default})")
    return parser


def resolve_settings(command, namespace):
    """Defaults < config file < flags. Unknown config keys are rejected.

    Returns the merged settings and the set of keys set by file or flag.
    """
    options = COMMANDS[command]
    explicit = set()
    settings = {key: default for key, (_, default, _) in options.items()}
    settings["out"] = "."
    given = vars(namespace)
    if given.get("config"):
        path = Path(given["config"])
        try:
            loaded = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        for key, value in loaded.items():
            if key == "out":
                settings["out"] = str(value)
                continue
            if key not in options:
                raise ConfigError(f"unknown key {key!r} in {path} for '{command}'")
            try:
                settings[key] = options[key][0](value) if value is not None else None
                explicit.add(key)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r} in {path}: {exc}") from None
    for key, value in given.items():
        if key in options or key == "out":
            settings[key] = _plan_list(value) if key == "plans" else value
            explicit.add(key)
    return settings, explicit


# --- shared helpers -----------------------------------------------------------


def load_dataset(s):
    spec = s["dataset"]
    if spec.startswith("synthetic:"):
        ds = gen_synthetic(spec.split(":", 1)[1], s["n_samples"], s["series_length"],
                           noise=s["noise"], seed=s["data_seed"], n_classes=s["n_classes"])
    elif spec.startswith("uea:"):
        ds = load_uea(spec.split(":", 1)[1])
    else:
        ds = load_ts(spec)
    if s["subsample"] != 1.0:
        ds = ds.subset(stratified_subsample(ds.y, s["subsample"], s["data_seed"]))
    if s["normalize"]:
        ds = z_normalize(ds)
    return ds


def auto_plan(n_tokens):
    """Smallest length >= n_tokens with a two-level split whose sides differ at most 2x."""
    n = max(n_tokens, 1)
    while True:
        plan = balanced_plan(n)
        small, large = plan.factors
        if large <= 2 * small:
            return plan
        n += 1


def resolve_plan(s, n_tokens, text=None):
    text = s["plan"] if text is None else text
    if text == "auto":
        factors = auto_plan(n_tokens).factors
    else:
        factors = DecompositionPlan.parse(text).factors
    plan = DecompositionPlan(factors, s["update_order"], s["factor_mode"])
    if plan.seq_len < n_tokens:
        raise ConfigError(
            f"plan {plan.label()} covers {plan.seq_len} positions but each series yields "
            f"{n_tokens} tokens; padding can only lengthen the sequence"
        )
    return plan


def model_config(s, ds, plan):
    return ModelConfig(
        n_channels=ds.n_channels, n_classes=ds.n_classes, series_len=ds.series_len, plan=plan,
        patch_len=s["patch_len"], stride=s["stride"], d_model=s["d_model"], n_heads=s["n_heads"],
        n_layers=s["n_layers"], d_ff=s["d_ff"], dtype=s["dtype"],
    )


def train_config(s):
    return TrainConfig(lr=s["lr"], batch_size=s["batch_size"], max_epochs=s["max_epochs"],
                       patience=s["patience"], seed=s["seed"])


def _tokens(s, ds):
    return token_count(ds.series_len, s["patch_len"], s["stride"] or s["patch_len"])


def _report_padding(plan, n_tokens):
    pad = plan.seq_len - n_tokens
    print(f"plan {plan.label()} ({plan.factor_mode}): {n_tokens} tokens padded by {pad} to {plan.seq_len}")
    return pad


def _dataset_record(s):
    keys = ("dataset", "subsample", "normalize")
    if s["dataset"].startswith("synthetic:"):
        keys += ("n_samples", "series_length", "noise", "n_classes", "data_seed")
    return {k: s[k] for k in keys}


# --- subcommands ---------------------------------------------------------------


def cmd_train(s, out):
    ds = load_dataset(s)
    n_tokens = _tokens(s, ds)
    plan = resolve_plan(s, n_tokens)
    padding = _report_padding(plan, n_tokens)
    mcfg, tcfg = model_config(s, ds, plan), train_config(s)
    model = KronTimeModel(mcfg, seed=s["seed"])
    splits = stratified_split(ds.y, tcfg.split, tcfg.seed)
    write_json(out / "config.json", {**s, "plan": plan.label(), "out": str(out)})
    metrics, _ = train_loop(model, ds, tcfg, splits=splits)
    metrics.write_csv(out / "metrics.csv")
    extra = {"dataset": _dataset_record(s), "n_tokens": n_tokens, "padding": padding,
             "n_params": model.n_params,
             "split": {"fractions": list(tcfg.split), "seed": tcfg.seed}}
    save_checkpoint(out / "best.npz", model, extra)
    summary = run_summary(metrics, tcfg, mcfg, splits, extra)
    write_json(out / "summary.json", summary)
    print(f"best epoch {metrics.best_epoch}/{metrics.stopped_epoch}  "
          f"test accuracy {metrics.test_accuracy:.4f}")
    return EXIT_OK


def cmd_eval(s, out, explicit=frozenset()):
    if not s["checkpoint"]:
        raise ConfigError("eval needs --checkpoint")
    model, extra = load_checkpoint(s["checkpoint"])
    # data settings not given explicitly fall back to those recorded at training time
    recorded = extra.get("dataset", {})
    s = {**s, **{k: v for k, v in recorded.items() if k in DATA_OPTIONS and k not in explicit}}
    ds = load_dataset(s)
    cfg = model.cfg
    if (ds.n_channels, ds.series_len, ds.n_classes) != (cfg.n_channels, cfg.series_len, cfg.n_classes):
        raise ConfigError(
            f"dataset shape (channels {ds.n_channels}, length {ds.series_len}, classes {ds.n_classes}) "
            f"does not match the checkpoint ({cfg.n_channels}, {cfg.series_len}, {cfg.n_classes})"
        )
    if s["split"] == "test":
        split = extra.get("split", {})
        idx = stratified_split(ds.y, tuple(split.get("fractions", (0.8, 0.1, 0.1))),
                               split.get("seed", 0))[2]
    elif s["split"] == "all":
        idx = np.arange(len(ds))
    else:
        raise ConfigError(f"split must be 'test' or 'all', got {s['split']!r}")
    X = ds.X.astype(np.dtype(cfg.dtype))
    loss, acc = evaluate(model, X[idx], ds.y[idx])
    report = {
        "schema": "krontime-eval/1",
        "checkpoint": str(s["checkpoint"]),
        "dataset": _dataset_record(s),
        "split": s["split"],
        "n_series": int(len(idx)),
        "loss": loss,
        "accuracy": acc,
    }
    write_json(out / "eval.json", report)
    print(f"{s['split']} accuracy {acc:.4f} on {len(idx)} series")
    return EXIT_OK


def cmd_bench(s, out):
    lengths = s["lengths"]
    if not lengths or min(lengths) < 1:
        raise ConfigError("bench needs positive lengths")
    plans = [DecompositionPlan.parse(p) for p in s["plans"]]
    try:
        check_plans_match(lengths, plans)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rows = run_bench(lengths, plans, d=s["d"], repeats=s["repeats"], dtype=s["dtype"],
                     seed=s["seed"], threads=s["threads"], measure_memory=s["memory"])
    write_bench_csv(out / "bench.csv", rows)
    for r in rows:
        print(f"n={r['length']:>6} {r['method']:>4} {r['plan']:>10}  "
              f"{r['mean_ms']:10.3f} ms  +- {r['std_ms']:.3f}  flops {r['flops']}")
    print("peak_bytes is a host allocator peak, not comparable to accelerator memory")
    return EXIT_OK


def cmd_oracle(s, out):
    if not 4 <= s["max_n"] <= 256:
        raise ConfigError("max_n must lie in [4, 256]")
    if s["seeds"] < 1:
        raise ConfigError("seeds must be positive")
    report = run_oracle_suite(s["max_n"], s["seeds"], corrupt=s["corrupt"])
    write_json(out / "oracle_report.json", report)
    failed = []
    for p in report["properties"]:
        status = "ok" if p["passed"] else "FAIL"
        if not p["asserted"]:
            status = "reported"
        print(f"{p['name']:<28} max error {p['max_error']:.3e}  bound {p['bound']:.0e}  "
              f"cases {p['cases']:>5}  {status}")
        if not p["passed"]:
            failed.append(p["name"])
    if failed:
        print(f"violated: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_ablate(s, out):
    if not s["plans"]:
        raise ConfigError("ablate needs at least one plan")
    ds = load_dataset(s)
    n_tokens = _tokens(s, ds)
    plans = [resolve_plan(s, n_tokens, text) for text in s["plans"]]
    lengths = {p.seq_len for p in plans}
    if len(lengths) != 1:
        raise ConfigError(
            "all plans must factor the same padded length; got "
            + ", ".join(f"{p.label()}={p.seq_len}" for p in plans)
        )
    _report_padding(plans[0], n_tokens)
    tcfg = train_config(s)
    splits = stratified_split(ds.y, tcfg.split, tcfg.seed)
    rows = []
    for plan in plans:
        model = KronTimeModel(model_config(s, ds, plan), seed=s["seed"])
        metrics, _ = train_loop(model, ds, tcfg, splits=splits)
        rows += [(plan.label(), e, acc) for e, acc in enumerate(metrics.val_acc, start=1)]
        print(f"plan {plan.label():>10}: best val accuracy {max(metrics.val_acc):.4f}  "
              f"test accuracy {metrics.test_accuracy:.4f}")
    with open(out / "ablate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["plan", "epoch", "val_accuracy"])
        w.writerows((p, e, repr(float(a))) for p, e, a in rows)
    return EXIT_OK


RUNNERS = {"train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
           "oracle": cmd_oracle, "ablate": cmd_ablate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        settings, explicit = resolve_settings(args.command, args)
        out = Path(settings["out"])
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "eval":
            return cmd_eval(settings, out, explicit)
        return RUNNERS[args.command](settings, out)
    except TrainingDiverged as exc:
        print(f"krontime {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except (ConfigError, ValueError, OSError) as exc:
        print(f"krontime {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
