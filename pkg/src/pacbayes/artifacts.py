"""Run artifact writing: checkpoints, certificate reports, manifests.

A completed run directory holds exactly four files:

  checkpoint.npz     posterior + prior parameters, bit-exact round trip
  runlog.csv         learning curve (written incrementally during training)
  certificate.json   bounds for both loss kinds + seeds + config hash
  manifest.json      config hash, content version, seeds, dataset
                     fingerprints, and the artifact paths themselves

certificate.json and manifest.json are serialized with sorted keys and
repr-float values, so identical runs produce byte-identical files.
"""

import hashlib
import json
import os

from . import __version__
from .certificates import report_payload, write_report
from .network import save_checkpoint

CHECKPOINT = "checkpoint.npz"
RUNLOG = "runlog.csv"
CERTIFICATE = "certificate.json"
MANIFEST = "manifest.json"


def config_hash(text):
    """sha256 of the canonicalized config: sorted key=value lines."""
    if isinstance(text, dict):
        text = "\n".join("%s=%s" % (k, text[k]) for k in sorted(text))
    return hashlib.sha256(text.encode()).hexdigest()


def write_run_artifacts(out_dir, result, cfg, ctx):
    """Write checkpoint + certificate + manifest for one finished run.

    ctx carries config_hash, dataset fingerprints and the master seed
    (plus any CLI overrides); runlog.csv is expected to exist already,
    written by train(log_path=...).
    """
    os.makedirs(out_dir, exist_ok=True)
    seeds = {"master_seed": ctx["master_seed"],
             "point_seed": result.point.seed,
             "point_index": result.point.index}
    meta = {"seeds": seeds, "config_hash": ctx["config_hash"],
            "objective": cfg.objective, "delta": cfg.delta,
            "mc_samples": cfg.mc_samples,
            "hypers": result.point.hypers()}
    ckpt = os.path.join(out_dir, CHECKPOINT)
    save_checkpoint(ckpt, result.net, meta=meta)

    metrics = {"test_error": result.test_error,
               "final_surrogate": result.records[-1].surrogate,
               "final_kl_over_n": result.records[-1].kl_over_n,
               "final_lambda": result.final_lambda,
               "iterations": cfg.iterations,
               "objective": cfg.objective,
               "family": cfg.family,
               "hypers": result.point.hypers()}
    payload = report_payload(result.cert_zero_one, result.cert_surrogate,
                             seeds=seeds, config_hash=ctx["config_hash"],
                             dataset_fingerprint=ctx["train_fingerprint"],
                             metrics=metrics)
    cert_path = os.path.join(out_dir, CERTIFICATE)
    write_report(cert_path, payload)

    manifest = {
        "content_version": __version__,
        "config_hash": ctx["config_hash"],
        "seeds": seeds,
        "dataset_fingerprint": {"train": ctx["train_fingerprint"],
                                "test": ctx.get("test_fingerprint")},
        "artifacts": {"checkpoint": CHECKPOINT, "runlog": RUNLOG,
                      "certificate": CERTIFICATE},
        "overrides": ctx.get("overrides", {}),
    }
    man_path = os.path.join(out_dir, MANIFEST)
    with open(man_path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    for name in (CHECKPOINT, RUNLOG, CERTIFICATE, MANIFEST):
        if not os.path.exists(os.path.join(out_dir, name)):
            raise RuntimeError("artifact %s missing after run" % name)
    return {"checkpoint": ckpt, "certificate": cert_path, "manifest": man_path}


SWEEP_COLUMNS = ["index", "rank", "status", "reason", "prior_scale",
                 "learning_rate", "momentum", "p_min", "eta", "seed",
                 "cert_pbkl", "cert_quad", "cert_lambda", "mc_corrected_emp",
                 "kl", "cert_pbkl_surrogate", "test_error", "final_surrogate"]


def format_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_sweep_table(path, rows):
    """Persist the sweep as CSV in grid order, with certificate ranks."""
    ok = sorted((r for r in rows if r["status"] == "ok"),
                key=lambda r: (r["cert_pbkl"], r["index"]))
    ranks = {r["index"]: i + 1 for i, r in enumerate(ok)}
    with open(path, "w") as fh:
        fh.write(",".join(SWEEP_COLUMNS) + "\n")
        for r in rows:
            r = dict(r, rank=ranks.get(r["index"]))
            fh.write(",".join(format_cell(r.get(c)) for c in SWEEP_COLUMNS) + "\n")
