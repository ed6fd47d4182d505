"""Command-line front end: train, sweep, certify, eval, report.

Configs are flat `key = value` text files (comma-separated lists for grid
axes); see configs/ for working examples and the README for the key
reference. Exit codes: 0 success, 2 usage/config error, 3 numerical
failure (training divergence, or every sweep point failed).
"""

import argparse
import json
import os
import sys

from . import artifacts, certificates, data, trainer
from .core import RngStream, STREAM_CERT, STREAM_EVAL
from .network import load_checkpoint
from .trainer import TrainConfig, TrainingDiverged, steps_per_epoch

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    pass


_CONFIG_KEYS = {
    "objective", "family", "hidden", "prior_scale", "learning_rate",
    "momentum", "p_min", "eta", "batch_size", "iterations", "epochs",
    "lambda_lr", "seed", "delta", "mc_samples", "delta_split",
    "eval_samples", "log_every", "dataset", "csv_path", "csv_schema",
    "split_seed", "train_fraction", "train_limit", "synth_n", "synth_test_n",
    "synth_dim", "synth_classes", "synth_separation", "synth_seed",
}


def _parse_int(kv, key, default=None):
    if key not in kv:
        return default
    try:
        return int(kv[key])
    except ValueError:
        raise ConfigError("config key %r: expected integer, got %r"
                          % (key, kv[key])) from None


def _parse_float(kv, key, default=None):
    if key not in kv:
        return default
    try:
        return float(kv[key])
    except ValueError:
        raise ConfigError("config key %r: expected number, got %r"
                          % (key, kv[key])) from None


def _parse_float_list(kv, key, default):
    if key not in kv:
        return default
    try:
        return tuple(float(v) for v in kv[key].split(",") if v.strip())
    except ValueError:
        raise ConfigError("config key %r: expected comma-separated numbers, "
                          "got %r" % (key, kv[key])) from None


def read_config(path):
    if not os.path.exists(path):
        raise ConfigError("config file not found: %s" % path)
    kv = data.parse_flat_config(path)
    unknown = set(kv) - _CONFIG_KEYS
    if unknown:
        raise ConfigError("unknown config keys: %s" % ", ".join(sorted(unknown)))
    for key in ("objective", "dataset"):
        if key not in kv:
            raise ConfigError("config key %r is required" % key)
    return kv


def build_train_config(kv, seed_override=None):
    hidden = tuple(int(v) for v in kv.get("hidden", "64,32").split(",") if v.strip())
    seed = seed_override if seed_override is not None else _parse_int(kv, "seed", 1)
    split = _parse_float_list(kv, "delta_split", None)
    try:
        return TrainConfig(
            objective=kv["objective"],
            family=kv.get("family", "gaussian"),
            hidden=hidden,
            prior_scale=_parse_float_list(kv, "prior_scale", (0.05,)),
            learning_rate=_parse_float_list(kv, "learning_rate", (5e-3,)),
            momentum=_parse_float_list(kv, "momentum", (0.95,)),
            p_min=_parse_float_list(kv, "p_min", (1e-4,)),
            eta=_parse_float_list(kv, "eta", (1e-3,)),
            batch_size=_parse_int(kv, "batch_size", 256),
            iterations=_parse_int(kv, "iterations", 0),
            lambda_lr=_parse_float(kv, "lambda_lr", 1e-4),
            seed=seed,
            delta=_parse_float(kv, "delta", 0.05),
            mc_samples=_parse_int(kv, "mc_samples", 1000),
            delta_split=split,
            eval_samples=_parse_int(kv, "eval_samples", 1),
            log_every=_parse_int(kv, "log_every", 100),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _resolve_idx(base, name):
    for cand in (os.path.join(base, name), os.path.join(base, name + ".gz")):
        if os.path.exists(cand):
            return cand
    raise ConfigError("dataset file not found: %s(.gz) under %s" % (name, base))


def load_datasets(kv, data_dir, config_dir):
    """Load the (train, test) pair named by the config's dataset key."""
    kind = kv["dataset"]
    if kind in ("mnist", "binary_mnist"):
        base = os.path.join(data_dir, "mnist")
        limit = _parse_int(kv, "train_limit", 50000)
        train = data.load_mnist_idx(_resolve_idx(base, "train-images-idx3-ubyte"),
                                    _resolve_idx(base, "train-labels-idx1-ubyte"),
                                    limit=limit, tag="train")
        test = data.load_mnist_idx(_resolve_idx(base, "t10k-images-idx3-ubyte"),
                                   _resolve_idx(base, "t10k-labels-idx1-ubyte"),
                                   limit=None, tag="test")
        if kind == "binary_mnist":
            train = data.binarize_mnist(train)
            test = data.binarize_mnist(test)
        return train, test
    if kind == "csv":
        for key in ("csv_path", "csv_schema"):
            if key not in kv:
                raise ConfigError("dataset=csv needs config key %r" % key)
        schema_path = kv["csv_schema"]
        if not os.path.isabs(schema_path):
            schema_path = os.path.join(config_dir, schema_path)
        if not os.path.exists(schema_path):
            raise ConfigError("schema file not found: %s" % schema_path)
        try:
            schema = data.load_schema(schema_path)
        except (ValueError, KeyError) as exc:
            raise ConfigError("bad schema %s: %s" % (schema_path, exc)) from None
        path = os.path.join(data_dir, kv["csv_path"])
        if not os.path.exists(path):
            raise ConfigError("dataset file not found: %s" % path)
        return data.load_csv(path, schema, seed=_parse_int(kv, "split_seed", 7),
                             train_fraction=_parse_float(kv, "train_fraction", 0.8))
    if kind == "synth_blobs":
        n = _parse_int(kv, "synth_n", 2000)
        n_test = _parse_int(kv, "synth_test_n", 2000)
        rng = RngStream(_parse_int(kv, "synth_seed", 11), 900)
        pool = data.synth_gaussian_blobs(
            n + n_test, _parse_int(kv, "synth_dim", 8),
            _parse_int(kv, "synth_classes", 3),
            _parse_float(kv, "synth_separation", 3.0), rng)
        return pool.take(0, n, "train"), pool.take(n, n + n_test, "test")
    raise ConfigError("unknown dataset %r" % kind)


def _finalize_iterations(kv, cfg, n):
    if "epochs" in kv:
        if "iterations" in kv:
            raise ConfigError("give either epochs or iterations, not both")
        cfg.iterations = _parse_int(kv, "epochs") * steps_per_epoch(n, cfg.batch_size)
    elif "iterations" not in kv:
        raise ConfigError("config needs iterations or epochs")


def _manifest_ctx(kv, cfg, train_set, test_set, overrides):
    return {"config_hash": artifacts.config_hash(dict(kv)),
            "master_seed": cfg.seed,
            "train_fingerprint": data.fingerprint(train_set),
            "test_fingerprint": data.fingerprint(test_set) if test_set else None,
            "overrides": overrides}


def cmd_train(args):
    kv = read_config(args.config)
    cfg = build_train_config(kv, seed_override=args.seed)
    train_set, test_set = load_datasets(kv, args.data_dir,
                                        os.path.dirname(os.path.abspath(args.config)))
    _finalize_iterations(kv, cfg, train_set.n)
    if not cfg.is_single():
        raise ConfigError("config has multi-valued grids; use the sweep command")
    overrides = {} if args.seed is None else {"seed": args.seed}
    ctx = _manifest_ctx(kv, cfg, train_set, test_set, overrides)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, artifacts.RUNLOG)
    if os.path.exists(log_path):
        os.unlink(log_path)
    try:
        result = trainer.train(cfg, train_set, test_set, log_path=log_path)
    except (TrainingDiverged, FloatingPointError) as exc:
        print("training diverged: %s" % exc, file=sys.stderr)
        return EXIT_NUMERIC
    artifacts.write_run_artifacts(args.out, result, cfg, ctx)
    c = result.cert_zero_one
    print("train ok: zero-one certificate (kl inversion) %.6f, "
          "quad %.6f, test error %s"
          % (c.pbkl_bound, c.quad_bound,
             "n/a" if result.test_error is None else "%.6f" % result.test_error))
    return EXIT_OK


def cmd_sweep(args):
    kv = read_config(args.config)
    cfg = build_train_config(kv, seed_override=args.seed)
    train_set, test_set = load_datasets(kv, args.data_dir,
                                        os.path.dirname(os.path.abspath(args.config)))
    _finalize_iterations(kv, cfg, train_set.n)
    overrides = {} if args.seed is None else {"seed": args.seed}
    ctx = _manifest_ctx(kv, cfg, train_set, test_set, overrides)
    os.makedirs(args.out, exist_ok=True)
    try:
        rows, best = trainer.sweep(cfg, train_set, test_set, jobs=args.jobs,
                                   out_dir=args.out, manifest_ctx=ctx)
    except RuntimeError as exc:
        print("sweep failed: %s" % exc, file=sys.stderr)
        return EXIT_NUMERIC
    table = os.path.join(args.out, "sweep_table.csv")
    artifacts.write_sweep_table(table, rows)
    n_ok = sum(r["status"] == "ok" for r in rows)
    print("sweep ok: %d/%d points completed, best index %d, table %s"
          % (n_ok, len(rows), best, table))
    return EXIT_OK


def _load_checkpoint_and_data(args):
    if not os.path.exists(args.checkpoint):
        raise ConfigError("checkpoint not found: %s" % args.checkpoint)
    net, meta = load_checkpoint(args.checkpoint)
    kv = read_config(args.config)
    train_set, test_set = load_datasets(kv, args.data_dir,
                                        os.path.dirname(os.path.abspath(args.config)))
    if train_set.dim != net.layers[0].in_dim:
        raise ConfigError("checkpoint expects %d input features, dataset has %d"
                          % (net.layers[0].in_dim, train_set.dim))
    if train_set.num_classes != net.layers[-1].out_dim:
        raise ConfigError("checkpoint expects %d classes, dataset has %d"
                          % (net.layers[-1].out_dim, train_set.num_classes))
    return net, meta, kv, train_set, test_set


def cmd_certify(args):
    net, meta, kv, train_set, _ = _load_checkpoint_and_data(args)
    m = args.mc_samples or meta.get("mc_samples", 1000)
    delta = args.delta or meta.get("delta", 0.05)
    seed = meta["seeds"]["point_seed"] if args.seed is None else args.seed
    rng = RngStream(seed).derived(STREAM_CERT)
    cert01, cert_sur = certificates.certify_both(net, train_set, m, delta,
                                                 rng=rng)
    payload = certificates.report_payload(
        cert01, cert_sur, seeds=meta.get("seeds", {}),
        config_hash=meta.get("config_hash"),
        dataset_fingerprint=data.fingerprint(train_set),
        metrics={"recertified": True, "mc_samples": m, "delta": delta})
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, artifacts.CERTIFICATE)
    certificates.write_report(path, payload)
    print("certify ok: zero-one certificate (kl inversion) %.6f "
          "(m=%d, corrected emp %.6f), report %s"
          % (cert01.pbkl_bound, m, cert01.mc_corrected_emp, path))
    return EXIT_OK


def cmd_eval(args):
    net, meta, kv, train_set, test_set = _load_checkpoint_and_data(args)
    split = train_set if args.split == "train" else test_set
    seed = meta["seeds"]["point_seed"] if args.seed is None else args.seed
    rng = RngStream(seed).derived(STREAM_EVAL)
    err = trainer.eval_risk(net, split, mode=args.mode, samples=args.samples,
                            rng=rng)
    print("eval ok: %s split zero-one error %.6f (mode=%s, samples=%d)"
          % (args.split, err, args.mode, args.samples))
    return EXIT_OK


_REPORT_COLUMNS = ["run", "objective", "test_error", "cert_pbkl", "cert_quad",
                   "cert_lambda", "kl", "mc_samples", "dataset"]


def cmd_report(args):
    runs = []
    gaps = []
    for run_dir in args.run_dirs:
        missing = [name for name in (artifacts.CERTIFICATE, artifacts.MANIFEST,
                                     artifacts.RUNLOG)
                   if not os.path.exists(os.path.join(run_dir, name))]
        if missing:
            gaps.append("%s: missing %s" % (run_dir, ", ".join(missing)))
            continue
        cert = certificates.read_report(os.path.join(run_dir, artifacts.CERTIFICATE))
        with open(os.path.join(run_dir, artifacts.MANIFEST)) as fh:
            manifest = json.load(fh)
        z = cert["bounds"][certificates.ZERO_ONE]
        metrics = cert.get("metrics", {})
        runs.append({
            "run": os.path.basename(os.path.normpath(run_dir)),
            "objective": metrics.get("objective", ""),
            "test_error": metrics.get("test_error"),
            "cert_pbkl": z["pbkl_bound"], "cert_quad": z["quad_bound"],
            "cert_lambda": z["lambda_bound_at_optimum"], "kl": z["kl_div"],
            "mc_samples": z["mc_samples"],
            "dataset": (manifest["dataset_fingerprint"]["train"] or "")[:12],
            "run_dir": run_dir,
        })
    if gaps:
        for g in gaps:
            print(g, file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "comparison.csv")
    with open(csv_path, "w") as fh:
        fh.write(",".join(_REPORT_COLUMNS) + "\n")
        for r in runs:
            fh.write(",".join(artifacts.format_cell(r[c])
                              for c in _REPORT_COLUMNS) + "\n")
    txt_path = os.path.join(args.out, "comparison.txt")
    with open(txt_path, "w") as fh:
        fh.write("%-20s %-8s %12s %12s %12s %12s\n"
                 % ("run", "objective", "test_error", "cert_pbkl",
                    "cert_quad", "cert_lambda"))
        for r in runs:
            te = "n/a" if r["test_error"] is None else "%.6f" % r["test_error"]
            fh.write("%-20s %-8s %12s %12.6f %12.6f %12.6f\n"
                     % (r["run"], r["objective"], te, r["cert_pbkl"],
                        r["cert_quad"], r["cert_lambda"]))
    for r in runs:
        src = os.path.join(r["run_dir"], artifacts.RUNLOG)
        dst = os.path.join(args.out, "curves_%s.csv" % r["run"])
        with open(src) as s, open(dst, "w") as d:
            d.write(s.read())
    print("report ok: %d runs -> %s" % (len(runs), args.out))
    return EXIT_OK


def _add_common(p, out_default="run_out"):
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--data-dir", default="data",
                   help="directory holding dataset files (default: data)")
    p.add_argument("--out", default=out_default,
                   help="output directory (default: %s)" % out_default)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pacbayes",
        description="Train probabilistic networks on bound-derived "
                    "objectives and certify their risk.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="single training run + certificate")
    p.add_argument("config")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid sweep, ranked by certificate")
    p.add_argument("config")
    p.add_argument("--jobs", type=int, default=1,
                   help="max concurrent grid points")
    _add_common(p, out_default="sweep_out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("certify", help="recompute a model's certificate")
    p.add_argument("checkpoint")
    p.add_argument("--config", required=True,
                   help="config file defining the dataset")
    p.add_argument("-m", "--mc-samples", type=int, default=None)
    p.add_argument("--delta", type=float, default=None)
    _add_common(p, out_default=".")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("eval", help="zero-one error of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--config", required=True,
                   help="config file defining the dataset")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--mode", choices=["sampled", "mean"], default="sampled")
    p.add_argument("--samples", type=int, default=1)
    _add_common(p, out_default=".")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="comparison table over finished runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default="report_out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
