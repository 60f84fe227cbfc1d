"""Command line front end: ``delta-uq <command> ...``.

Exit status is 0 on success, 1 on a usage error and 2 on a data or
numeric error.  Class labels are 1-based on the command line and in
``.npz`` files, 0-based inside the library.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import artifacts, calibration
from .data import Dataset, gen_synthetic, load_mnist, three_class_spec
from .errors import ConfigError, DeltaUQError
from .fusion import fuse_classifiers, fuse_same_class, risk_from_gaussian
from .nn_core import mlp_layers
from .posterior import METHODS, compute_covariance, scale_covariance
from .prediction import LogitGaussian, delta_propagate_batch, mc_marginalize, mc_marginalize_batch
from .training import TrainConfig, init_params, train_map

log = logging.getLogger("delta_uq")

HIDDEN = (300, 100, 40)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_data(p, required=True):
    g = p.add_argument_group("data")
    g.add_argument("--data", type=Path, help=".npz with 'inputs' and optional 1-based 'labels'")
    g.add_argument("--mnist", type=Path, help="directory with the four MNIST IDX files")
    g.add_argument("--split", choices=("train", "val", "test"), default="train")
    g.add_argument("--n-val", type=int, default=10000, help="MNIST training images held out as 'val'")
    p.set_defaults(_data_required=required)


def load_data(args) -> Dataset | None:
    if args.mnist is not None:
        return load_mnist(args.mnist, args.split, args.n_val)
    if args.data is None:
        if args._data_required:
            raise UsageError("one of --data or --mnist is required")
        return None
    with np.load(args.data) as z:
        if "inputs" not in z:
            raise ConfigError(f"{args.data} has no 'inputs' array")
        x = z["inputs"]
        has_labels = "labels" in z
        if has_labels:
            y = np.asarray(z["labels"], dtype=np.int64) - 1
            n_classes = int(z["n_classes"]) if "n_classes" in z else int(y.max()) + 1
        else:
            y = np.zeros(len(x), dtype=np.int64)
            n_classes = int(z["n_classes"]) if "n_classes" in z else 1
    ds = Dataset(x, y, n_classes, args.split)
    ds.has_labels = has_labels
    return ds


def _labels_or_fail(ds: Dataset, what: str):
    if getattr(ds, "has_labels", True) is False:
        raise ConfigError(f"{what} needs labelled data")
    return ds.labels


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    spec = three_class_spec(args.n_samples, args.seed)
    ds, oracle = gen_synthetic(spec)
    np.savez(args.out, inputs=ds.inputs, labels=ds.labels + 1, n_classes=ds.n_classes, posterior=oracle(ds.inputs))
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def _train_config(args) -> tuple[TrainConfig, list[int] | None]:
    cfg = {}
    if args.config is not None:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
    known = {f.name for f in fields(TrainConfig)} | {"widths", "hidden"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key, flag in (("learning_rate", "lr"), ("l2_weight", "l2"), ("epochs", "epochs"), ("batch_size", "batch_size"), ("seed", "seed")):
        if getattr(args, flag) is not None:
            cfg[key] = getattr(args, flag)
    widths = cfg.pop("widths", None)
    hidden = cfg.pop("hidden", None)
    if args.widths is not None:
        widths = _parse_ints(args.widths)
    if args.hidden is not None:
        hidden = _parse_ints(args.hidden)
    return TrainConfig(**cfg), (widths, hidden)


def cmd_train(args) -> int:
    cfg, (widths, hidden) = _train_config(args)
    ds = load_data(args)
    y = _labels_or_fail(ds, "train")
    if widths is None:
        widths = [ds.inputs.shape[1], *(HIDDEN if hidden is None else hidden), ds.n_classes]
    if widths[0] != ds.inputs.shape[1] or widths[-1] != ds.n_classes:
        raise ConfigError(f"widths {widths} do not fit {ds.inputs.shape[1]} inputs and {ds.n_classes} classes")
    model, rep = train_map(init_params(mlp_layers(widths), cfg.seed), ds.inputs, y, cfg)
    meta = {"train_config": asdict(cfg), "n_train": len(ds), "objective_trace": rep.trace}
    artifacts.save_model(args.out, model, meta)
    print(f"train accuracy {rep.train_accuracy:.4f}, objective {rep.objective:.6f}")
    return 0


def cmd_covariance(args) -> int:
    model = artifacts.load_model(args.model)
    _, _, meta = artifacts.load_artifact(args.model, "model")
    ds = load_data(args)
    prior = args.prior_precision
    if prior is None:
        l2 = meta.get("train_config", {}).get("l2_weight")
        if not l2:
            raise ConfigError("model has no l2_weight; pass --prior-precision")
        prior = l2 * len(ds)
    post = compute_covariance(model, ds.inputs, args.layers, prior, args.method, args.block_size)
    artifacts.save_posterior(args.out, post, {"method": args.method})
    print(f"covariance over {post.dim} parameters from {post.n_samples_processed} samples, prior precision {prior:g}")
    return 0


def _predict(model, post, x, K, seed):
    means, covs = delta_propagate_batch(model, post, x)
    pmfs, pcovs = mc_marginalize_batch(means, covs, K, seed)
    return means, covs, pmfs, pcovs


def cmd_predict(args) -> int:
    model = artifacts.load_model(args.model)
    post = artifacts.load_posterior(args.posterior)
    if args.tc is not None:
        post = scale_covariance(post, args.tc)
    ds = load_data(args)
    means, covs, pmfs, pcovs = _predict(model, post, ds.inputs, args.samples, args.seed)
    labels = ds.labels if getattr(ds, "has_labels", True) else None
    pred = artifacts.PredictionSet(means, covs, pmfs, pcovs, args.samples, args.seed, post.tc, labels, {"source": "delta"})
    artifacts.save_prediction(args.out, pred)
    print(f"predicted {len(pred)} inputs with K={args.samples}, seed={args.seed}, tc={post.tc:g}")
    return 0


def _single_row(lg: LogitGaussian, K, seed, meta) -> artifacts.PredictionSet:
    est = mc_marginalize(lg, K, seed)
    return artifacts.PredictionSet(lg.mean[None], lg.cov[None], est.pmf[None], est.cov[None], K, seed, 1.0, None, meta)


def cmd_fuse(args) -> int:
    if args.mode == "classifiers":
        if not args.inputs:
            raise UsageError("--mode classifiers needs --inputs")
        preds = [artifacts.load_prediction(p) for p in args.inputs]
        n = len(preds[0])
        if any(len(p) != n for p in preds):
            raise ConfigError("prediction artifacts cover different numbers of inputs")
        names = [str(p) for p in args.inputs]
        means, covs = [], []
        for i in range(n):
            fused = fuse_classifiers([LogitGaussian(p.logit_mean[i], p.logit_cov[i]) for p in preds], names)
            means.append(fused.mean)
            covs.append(fused.cov)
        means, covs = np.stack(means), np.stack(covs)
        pmfs, pcovs = mc_marginalize_batch(means, covs, args.samples, args.seed)
        pred = artifacts.PredictionSet(
            means, covs, pmfs, pcovs, args.samples, args.seed, 1.0, preds[0].labels,
            {"source": "fuse-classifiers", "provenance": names},
        )
    else:
        if args.model is None or args.posterior is None:
            raise UsageError("--mode same-class needs --model and --posterior")
        model = artifacts.load_model(args.model)
        post = artifacts.load_posterior(args.posterior)
        ds = load_data(args)
        rows = _parse_ints(args.rows) if args.rows else list(range(len(ds)))
        if any(not 0 <= r < len(ds) for r in rows):
            raise ConfigError(f"row indices must lie in 0..{len(ds) - 1}")
        names = [f"row {r}" for r in rows]
        fused = fuse_same_class(model, post, ds.inputs[rows], names)
        pred = _single_row(fused, args.samples, args.seed, {"source": "fuse-same-class", "provenance": names})
    artifacts.save_prediction(args.out, pred)
    print(f"fused into {len(pred)} prediction(s)")
    return 0


def cmd_risk(args) -> int:
    pred = artifacts.load_prediction(args.prediction)
    if not 0 <= args.index < len(pred):
        raise ConfigError(f"--index must lie in 0..{len(pred) - 1}")
    m = pred.pmf.shape[1]
    if not 1 <= args.class_ <= m:
        raise ConfigError(f"--class must lie in 1..{m}")
    lg = LogitGaussian(pred.logit_mean[args.index], pred.logit_cov[args.index])
    # row n of a prediction artifact was sampled with stream n
    risk = risk_from_gaussian(lg, args.class_ - 1, args.threshold, pred.K, pred.seed, args.index)
    print(f"{risk:.6f}")
    return 0


def _write_report(rep, args):
    for key, value in rep.summary().items():
        print(f"{key} {value}")
    if args.csv:
        calibration.write_reliability_csv(args.csv, rep.bins)
    if args.svg:
        calibration.write_reliability_svg(args.svg, rep.bins, rep.method)


def cmd_calibrate(args) -> int:
    model = artifacts.load_model(args.model)
    ds = load_data(args)
    y = _labels_or_fail(ds, "calibrate")
    if args.tune == "T":
        T = calibration.tune_temperature(model, ds.inputs, y, n_bins=args.bins)
        print(f"T {T:.6g}")
        rep = calibration.report(model, ds.inputs, y, T=T, n_bins=args.bins)
    else:
        if args.posterior is None:
            raise UsageError("--tune tc needs --posterior")
        post = artifacts.load_posterior(args.posterior)
        tc = calibration.tune_tc(model, post, ds.inputs, y, K=args.samples, seed=args.seed, n_bins=args.bins)
        print(f"tc {tc:.6g}")
        post = replace(post, tc=tc)
        rep = calibration.report(model, ds.inputs, y, post, K=args.samples, seed=args.seed, n_bins=args.bins)
    _write_report(rep, args)
    return 0


def cmd_report(args) -> int:
    if args.prediction is not None:
        pred = artifacts.load_prediction(args.prediction)
        if pred.labels is None:
            raise ConfigError(f"{args.prediction} has no labels")
        rep = calibration.evaluate(pred.pmf, pred.labels, args.bins, "proposed", tc=pred.tc)
    else:
        if args.model is None:
            raise UsageError("report needs --prediction or --model")
        model = artifacts.load_model(args.model)
        ds = load_data(args)
        y = _labels_or_fail(ds, "report")
        post = artifacts.load_posterior(args.posterior) if args.posterior else None
        if post is not None and args.tc is not None:
            post = scale_covariance(post, args.tc)
        rep = calibration.report(model, ds.inputs, y, post, T=args.T, K=args.samples, seed=args.seed, n_bins=args.bins)
    _write_report(rep, args)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="delta-uq", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a 3-class 2-D Gaussian mixture as .npz")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--n-samples", type=int, default=5000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train the MAP model")
    _add_data(s)
    s.add_argument("--config", type=Path, help="JSON object with TrainConfig keys plus 'widths' or 'hidden'")
    s.add_argument("--widths", help="all layer widths, e.g. 784,300,100,40,10")
    s.add_argument("--hidden", help="hidden widths only, e.g. 300,100,40")
    s.add_argument("--lr", type=float)
    s.add_argument("--l2", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("covariance", help="Laplace covariance of the last layers")
    _add_data(s)
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--layers", type=int, default=2, help="number of trailing layers r")
    s.add_argument("--method", choices=METHODS, default="direct")
    s.add_argument("--block-size", type=int, default=256, help="samples per recursive update")
    s.add_argument("--prior-precision", type=float, help="default: l2_weight * N")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_covariance)

    s = sub.add_parser("predict", help="logit Gaussians and MC-marginalized PMFs")
    _add_data(s)
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--posterior", type=Path, required=True)
    s.add_argument("--samples", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tc", type=float, help="covariance scale applied on top of the posterior's")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("fuse", help="fuse logit Gaussians")
    _add_data(s, required=False)
    s.add_argument("--mode", choices=("classifiers", "same-class"), required=True)
    s.add_argument("--inputs", type=Path, nargs="+", help="prediction artifacts (classifiers mode)")
    s.add_argument("--model", type=Path)
    s.add_argument("--posterior", type=Path)
    s.add_argument("--rows", help="0-based data rows sharing one class (same-class mode; default all)")
    s.add_argument("--samples", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("risk", help="probability that a class probability exceeds a threshold")
    s.add_argument("--prediction", type=Path, required=True)
    s.add_argument("--class", dest="class_", type=int, required=True, help="1-based class")
    s.add_argument("--threshold", type=float, required=True)
    s.add_argument("--index", type=int, default=0, help="0-based row of the prediction artifact")
    s.set_defaults(func=cmd_risk)

    for name, func, hlp in (
        ("calibrate", cmd_calibrate, "tune T or tc on validation data"),
        ("report", cmd_report, "calibration metrics and reliability data"),
    ):
        s = sub.add_parser(name, help=hlp)
        _add_data(s, required=name == "calibrate")
        s.add_argument("--model", type=Path, required=name == "calibrate")
        s.add_argument("--posterior", type=Path)
        s.add_argument("--samples", type=int, default=1000)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--bins", type=int, default=calibration.DEFAULT_BINS)
        s.add_argument("--csv", type=Path, help="reliability rows as CSV")
        s.add_argument("--svg", type=Path, help="reliability diagram as SVG")
        if name == "calibrate":
            s.add_argument("--tune", choices=("T", "tc"), required=True)
        else:
            s.add_argument("--prediction", type=Path)
            s.add_argument("--T", type=float, default=1.0)
            s.add_argument("--tc", type=float)
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (DeltaUQError, OSError, KeyError, ValueError) as exc:
        print(f"delta-uq: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
