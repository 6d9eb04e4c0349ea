"""Command-line interface: train, predict, filter, worker, verify."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import core
from .distnet import DistributedOracle, worker_serve
from .errors import GpgcError, DimensionError
from .hyperopt import OptimizerConfig, train
from .lowrank import build_cache
from .oracle import LocalOracle
from .verify import run_verification


@dataclass(frozen=True)
class FilterManifest:
    """Groups ordered by confidence with a top-gamma selection mark."""

    entries: list[tuple[str, float, bool]]
    gamma_percent: float

    def lines(self) -> list[str]:
        return [
            f"{token}\t{format(conf, '.17g')}\t{int(selected)}"
            for token, conf, selected in self.entries
        ]


def build_filter_manifest(confidences: np.ndarray, tokens: list[str],
                          gamma_percent: float) -> FilterManifest:
    """Order groups by descending confidence; ties break on group index."""
    n_groups = len(confidences)
    order = sorted(range(n_groups), key=lambda g: (-confidences[g], g))
    n_selected = math.ceil(gamma_percent / 100.0 * n_groups)
    entries = [
        (tokens[g], float(confidences[g]), rank < n_selected)
        for rank, g in enumerate(order)
    ]
    return FilterManifest(entries=entries, gamma_percent=gamma_percent)


def _load_weights(args, dataset):
    if getattr(args, "balance", False):
        return core.balance_weights(dataset)
    if getattr(args, "weights", None):
        return core.read_weights(args.weights, dataset.n_instances)
    return None


def _resolve_scale_groups(args, header):
    if getattr(args, "scale_groups", None):
        return core.read_scale_groups(args.scale_groups, header.k)
    return header.scale_group_of()


def cmd_train(args) -> int:
    header = core.read_feature_header(args.features)
    labels = core.read_labels(args.labels)
    group_of, tokens = core.read_groups(args.groups)
    if labels.shape[0] != header.n_instances or group_of.shape[0] != header.n_instances:
        raise core.DataFormatError(
            f"{header.n_instances} feature rows but {labels.shape[0]} labels "
            f"and {group_of.shape[0]} group entries"
        )
    dataset = core.GroupedDataset(
        labels=labels, group_of=group_of,
        weights=np.ones(header.n_instances), n_groups=len(tokens),
    )
    weights = _load_weights(args, dataset)
    scale_group_of = _resolve_scale_groups(args, header)
    config = OptimizerConfig(
        max_iters=args.max_iter, grad_tol=args.tol, seed=args.seed
    )

    oracle = None
    distributed = None
    try:
        if args.workers:
            distributed = DistributedOracle(args.workers.split(","))
            distributed.load_features_file(args.features)
            oracle = distributed
        else:
            features, _ = core.read_feature_file(args.features)
            oracle = LocalOracle(features)
        model, report = train(
            oracle, dataset, weights=weights, scale_group_of=scale_group_of,
            config=config, restarts=args.restarts,
        )
    finally:
        if distributed is not None:
            distributed.shutdown()

    core.save_model(args.out, model)
    core.save_group_tokens(args.out + ".groups", tokens)
    used = dataset.weights if weights is None else weights
    report_doc = {
        "iterations": report.iterations,
        "final_lml": report.final_lml,
        "converged_by": report.converged_by,
        "warning": report.warning,
        "group_eps": [float(e) for e in model.hyper.eps],
        "group_tokens": tokens,
        "class_weight_check": _class_weight_summary(dataset, used),
        "inputs": {
            "features": os.path.abspath(args.features),
            "labels": os.path.abspath(args.labels),
            "groups": os.path.abspath(args.groups),
            "weights": os.path.abspath(args.weights) if args.weights else None,
            "balance": bool(args.balance),
            "scale_groups": (
                os.path.abspath(args.scale_groups) if args.scale_groups else None
            ),
        },
    }
    report_path = args.report or (args.out + ".report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report_doc, fh, indent=2)
        fh.write("\n")
    print(
        f"trained: {report.iterations} iterations, final lml {report.final_lml:.6f}, "
        f"stopped by {report.converged_by}"
    )
    if report.warning:
        print(f"warning: {report.warning}", file=sys.stderr)
    return 0


def _class_weight_summary(dataset, weights):
    pos = dataset.labels > 0
    return {
        "positive_total": float(np.sum(weights[pos])),
        "negative_total": float(np.sum(weights[~pos])),
        "overall_total": float(np.sum(weights)),
    }


def _rebuild_cache(model, report_path):
    with open(report_path, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    inputs = report["inputs"]
    shard, dataset, header, _ = core.load_dataset(
        inputs["features"], inputs["labels"], inputs["groups"]
    )
    if header.k != model.k:
        raise DimensionError("training bundle feature dimension mismatch")
    weights = None
    if inputs.get("balance"):
        weights = core.balance_weights(dataset)
    elif inputs.get("weights"):
        weights = core.read_weights(inputs["weights"], dataset.n_instances)
    oracle = LocalOracle(shard)
    return build_cache(oracle, dataset, model.hyper, weights)


def cmd_predict(args) -> int:
    model = core.load_model(args.model)
    features, header = core.read_feature_file(args.features)
    if header.k != model.k:
        raise DimensionError(
            f"model expects k={model.k}, features have k={header.k}"
        )
    means = features @ model.beta
    labels = np.where(means >= 0.0, 1, -1)

    variances = None
    if args.variance:
        if not args.with_train:
            print(
                "error: --variance requires --with-train REPORT_JSON "
                "(posterior variance needs access to the training set)",
                file=sys.stderr,
            )
            return 2
        cache = _rebuild_cache(model, args.with_train)
        sig2 = model.hyper.sigma_per_feature() ** 2
        scaled = features * sig2
        prior = np.einsum("ij,ij->i", features, scaled)
        shrink = np.einsum("ij,jl,il->i", scaled, cache.fkf, scaled)
        variances = np.maximum(prior - shrink, 0.0)

    with open(args.out, "w", encoding="utf-8") as fh:
        for i in range(features.shape[0]):
            line = f"{format(means[i], '.17g')}\t{labels[i]:+d}"
            if variances is not None:
                line += f"\t{format(variances[i], '.17g')}"
            fh.write(line + "\n")
    print(f"wrote {features.shape[0]} predictions to {args.out}")
    return 0


def cmd_filter(args) -> int:
    if not 0.0 < args.top_percent <= 100.0:
        print("error: --top-percent must be in (0, 100]", file=sys.stderr)
        return 2
    model = core.load_model(args.model)
    tokens_path = args.model + ".groups"
    if os.path.exists(tokens_path):
        tokens = core.load_group_tokens(tokens_path)
        if len(tokens) != model.n_groups:
            raise core.DataFormatError("group sidecar does not match model")
    else:
        tokens = [str(g) for g in range(model.n_groups)]
    manifest = build_filter_manifest(
        model.group_confidence, tokens, args.top_percent
    )
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(manifest.lines()) + "\n")
    n_selected = sum(1 for _, _, sel in manifest.entries if sel)
    print(f"selected {n_selected}/{model.n_groups} groups at top {args.top_percent}%")
    return 0


def cmd_worker(args) -> int:
    def announce(port):
        print(f"worker listening on port {port}", flush=True)

    worker_serve(args.listen, expected_k=args.expected_k, on_bound=announce)
    return 0


def cmd_verify(args) -> int:
    results = run_verification(
        perturb_gradient=args.perturb_gradient, seed=args.seed
    )
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status}  {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpgc",
        description=(
            "Gaussian-process regression that learns a per-group annotation "
            "confidence, with exact low-rank inference"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="learn hyperparameters and a model")
    p_train.add_argument("--features", required=True)
    p_train.add_argument("--labels", required=True)
    p_train.add_argument("--groups", required=True)
    p_train.add_argument("--scale-groups", help="per-feature scale-group config file")
    weight_group = p_train.add_mutually_exclusive_group()
    weight_group.add_argument(
        "--balance", action="store_true",
        help="reweight so both classes carry equal total weight",
    )
    weight_group.add_argument("--weights", help="per-instance weights file")
    p_train.add_argument("--workers", help="comma-separated worker host:port list")
    p_train.add_argument("--max-iter", type=int, default=500)
    p_train.add_argument("--tol", type=float, default=1e-5)
    p_train.add_argument("--restarts", type=int, default=1)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--out", required=True, help="model output path")
    p_train.add_argument("--report", help="training report path (default <out>.report.json)")
    p_train.set_defaults(func=cmd_train)

    p_predict = sub.add_parser("predict", help="predict labels for a feature file")
    p_predict.add_argument("--model", required=True)
    p_predict.add_argument("--features", required=True)
    p_predict.add_argument("--out", required=True)
    p_predict.add_argument(
        "--variance", action="store_true", help="also emit posterior variances"
    )
    p_predict.add_argument(
        "--with-train", help="training report JSON locating the training set"
    )
    p_predict.set_defaults(func=cmd_predict)

    p_filter = sub.add_parser(
        "filter", help="rank groups by confidence and mark the most reliable"
    )
    p_filter.add_argument("--model", required=True)
    p_filter.add_argument("--top-percent", type=float, required=True)
    p_filter.add_argument("--out", required=True)
    p_filter.set_defaults(func=cmd_filter)

    p_worker = sub.add_parser("worker", help="host a feature shard for a master")
    p_worker.add_argument("--listen", required=True, help="host:port to bind")
    p_worker.add_argument("--expected-k", type=int, default=None)
    p_worker.set_defaults(func=cmd_worker)

    p_verify = sub.add_parser("verify", help="run the installation self-check")
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument(
        "--perturb-gradient", action="store_true",
        help="fault-injection negative control; must make verify fail",
    )
    p_verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (GpgcError, OSError, TimeoutError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
