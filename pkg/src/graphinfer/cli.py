"""Command-line entry point for reproducible experiment runs.

Exit codes: 0 success, 1 numeric failure, 2 usage or IO error. Every run
echoes its fully resolved configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .dataio import load_dataset, subsample_labels
from .errors import ConfigError, DatasetError, GraphInferError, TrainingError
from .model import (
    ClassIndex,
    GilModel,
    ModelSpec,
    load_checkpoint,
    restore_params,
    save_checkpoint,
)
from .reachability import build_table, dense_power_oracle, reach_from
from .trainer import (
    RunConfig,
    TrainingContext,
    adapt_and_evaluate,
    run_training,
)

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphinfer",
        description="Semi-supervised node classification by learned "
                    "reference-to-query inference.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True, out=True):
        if dataset:
            p.add_argument("--dataset", required=True, help="dataset directory")
        p.add_argument("--config", help="key=value config file")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument(
            "--meta-grad", choices=("first", "full"),
            help="meta-gradient mode override",
        )

    p = sub.add_parser("train", help="pretrain, meta-train, and evaluate")
    common(p)
    p.add_argument("--variant", help="model variant (default: config variant)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p, out=False)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("ablate", help="train and evaluate one ablation variant")
    common(p)
    p.add_argument("--variant", required=True)

    p = sub.add_parser("steps", help="cumulative accuracy by hops to the train set")
    common(p, out=False)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("label-sweep", help="train once per label rate")
    common(p)
    p.add_argument("--rates", required=True, help="comma-separated label rates")
    p.add_argument("--jobs", type=int, default=1,
                   help="run rates in parallel worker processes (default serial)")

    p = sub.add_parser("gradcheck", help="finite-difference check on a toy graph")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("oracle-tests", help="dense-power, finite-difference, and "
                                            "permutation oracles")
    p.add_argument("--seed", type=int, default=0)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "meta_grad", None):
        overrides["meta_grad_mode"] = (
            "first_order" if args.meta_grad == "first" else "full"
        )
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    return cfg.with_overrides(**overrides) if overrides else cfg


def _write_results(path: Path, config: RunConfig, report) -> None:
    with open(path, "w") as fh:
        fh.write("section\tkey\tvalue\n")
        for line in config.to_text().splitlines():
            key, value = line.split("=", 1)
            fh.write(f"config\t{key}\t{value}\n")
        fh.write(f"result\ttest_accuracy\t{report.accuracy:.6f}\n")
        fh.write(f"result\ttest_loss\t{report.loss:.6f}\n")
        for c, acc in enumerate(report.per_class_accuracy):
            fh.write(f"per_class\t{c}\t{acc:.6f}\n")
        for label, count, acc in report.step_buckets:
            fh.write(f"bucket_count\t{label}\t{count}\n")
            fh.write(f"bucket_accuracy\t{label}\t{acc:.6f}\n")


def cmd_train(args) -> int:
    config = resolve_config(args)
    bundle = load_dataset(args.dataset, row_normalize=config.row_normalize)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text())
    result = run_training(bundle, config)
    save_checkpoint(out / "checkpoint.bin", result.params, config.text_hash())
    result.log.write(out / "metrics.tsv")
    _write_results(out / "results.tsv", config, result.report)
    print(f"test_accuracy={result.report.accuracy:.4f} "
          f"params={result.params.param_count()} out={out}")
    return EXIT_OK


def _restore(args, config: RunConfig, bundle):
    ctx = TrainingContext(bundle, config)
    params = ctx.init_params()
    stored_hash, blocks = load_checkpoint(args.checkpoint)
    if stored_hash != config.text_hash():
        raise ConfigError(
            "checkpoint was written under a different configuration; "
            "pass the run's config.txt via --config"
        )
    restore_params(params, blocks)
    return ctx, params


def _sibling_config(args) -> None:
    if not getattr(args, "config", None):
        candidate = Path(args.checkpoint).parent / "config.txt"
        if candidate.is_file():
            args.config = str(candidate)


def cmd_eval(args) -> int:
    _sibling_config(args)
    config = resolve_config(args)
    bundle = load_dataset(args.dataset, row_normalize=config.row_normalize)
    ctx, params = _restore(args, config, bundle)
    report = adapt_and_evaluate(params, ctx, config)
    print(f"test_accuracy={report.accuracy:.6f}")
    print(f"test_loss={report.loss:.6f}")
    return EXIT_OK


def cmd_steps(args) -> int:
    _sibling_config(args)
    config = resolve_config(args)
    bundle = load_dataset(args.dataset, row_normalize=config.row_normalize)
    ctx, params = _restore(args, config, bundle)
    report = adapt_and_evaluate(params, ctx, config)
    print("bucket\tcount\tcumulative_accuracy")
    for label, count, acc in report.step_buckets:
        print(f"{label}\t{count}\t{acc:.6f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    return cmd_train(args)


def _sweep_one(dataset: str, config_text: str, rate: float):
    """One full train/eval at a reduced label rate (worker-process safe)."""
    config = RunConfig.from_text(config_text)
    bundle = load_dataset(dataset, row_normalize=config.row_normalize)
    sub = subsample_labels(bundle, rate, seed=config.seed)
    result = run_training(sub, config)
    return rate, int(sub.split.train_ids.size), float(result.report.accuracy)


def cmd_label_sweep(args) -> int:
    config = resolve_config(args)
    try:
        rates = [float(r) for r in args.rates.split(",") if r]
    except ValueError as exc:
        raise ConfigError(f"bad --rates value: {exc}") from None
    if not rates:
        raise ConfigError("--rates must list at least one rate")
    load_dataset(args.dataset, row_normalize=config.row_normalize)  # fail fast
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text())
    jobs = max(1, args.jobs)
    if jobs == 1:
        rows = [_sweep_one(args.dataset, config.to_text(), r) for r in rates]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(
                pool.map(_sweep_one, [args.dataset] * len(rates),
                         [config.to_text()] * len(rates), rates)
            )
    for rate, count, acc in rows:
        print(f"rate={rate:.6f} labeled={count} seed={config.seed} accuracy={acc:.4f}")
    with open(out / "sweep.tsv", "w") as fh:
        fh.write("label_rate\tlabeled_nodes\tseed\ttest_accuracy\n")
        for rate, count, acc in rows:
            fh.write(f"{rate:.6f}\t{count}\t{config.seed}\t{acc:.6f}\n")
    return EXIT_OK


def _toy_setup(seed: int):
    from .toys import eight_node_toy

    g = eight_node_toy()
    spec = ModelSpec(feature_dim=g.feature_dim, num_classes=3, d_p=3, widths=(5, 4))
    model = GilModel(g, spec)
    table = build_table(g, np.arange(g.n), 3)
    cindex = ClassIndex.build(g.labels, table, 3)
    params = model.init_params(seed=seed)
    rng = np.random.default_rng(seed + 1)
    for name, t in params.named_params():
        if name.endswith(("bias", ".b", "b1", "b2", "b3")):
            t.data += 0.05 * rng.standard_normal(t.shape)
    return g, model, table, cindex, params


def cmd_gradcheck(args) -> int:
    from .autodiff import grad_check, softmax_cross_entropy

    g, model, table, cindex, params = _toy_setup(args.seed)
    queries = np.arange(g.n)
    targets = g.labels[queries]

    def forward():
        logits = model.score_logits(
            params, table, cindex, queries, exclude_self=True, train=False
        )
        return softmax_cross_entropy(logits, targets)

    err = grad_check(forward, params.named_params(), h=1e-5)
    ok = err < 1e-4
    print(f"gradcheck max_relative_error={err:.3e} -> {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_oracle_tests(args) -> int:
    from .autodiff import grad_check, softmax_cross_entropy
    from .graphs import SparseGraph, SparseMatrix, transition_matrix
    from .toys import random_graph

    failures = 0

    def check(name: str, ok: bool, detail: str = ""):
        nonlocal failures
        print(f"{'PASS' if ok else 'FAIL'}  {name}{'  ' + detail if detail else ''}")
        failures += 0 if ok else 1

    # dense-power oracle vs iterative reachability
    worst = 0.0
    for seed in range(args.seed, args.seed + 10):
        g = random_graph(25, 0.2, seed)
        p = transition_matrix(g)
        oracle = dense_power_oracle(g, 4)
        for s in range(0, 25, 5):
            worst = max(worst, np.abs(reach_from(p, s, 4) - oracle[s]).max())
    check("reachability vs dense powers", worst < 1e-10, f"max_err={worst:.2e}")

    # finite differences on the full model
    g, model, table, cindex, params = _toy_setup(args.seed)
    queries = np.arange(g.n)
    targets = g.labels[queries]

    def forward():
        logits = model.score_logits(
            params, table, cindex, queries, exclude_self=True, train=False
        )
        return softmax_cross_entropy(logits, targets)

    err = grad_check(forward, params.named_params(), h=1e-5)
    check("gradients vs central differences", err < 1e-4, f"max_rel_err={err:.2e}")

    # permutation equivariance of the encoder
    import scipy.sparse as sp

    g = random_graph(12, 0.35, args.seed + 50, feature_dim=4)
    perm = np.random.default_rng(args.seed).permutation(12)
    adj_p = g.adjacency.to_dense()[np.ix_(perm, perm)]
    g_p = SparseGraph(
        SparseMatrix.from_scipy(sp.csr_matrix(adj_p)),
        g.features[perm], g.labels[perm], g.num_classes,
    )
    spec = ModelSpec(feature_dim=4, num_classes=2, d_p=2, widths=(6, 5))
    shared = GilModel(g, spec).init_params(seed=args.seed)
    emb = GilModel(g, spec).encode(shared).data
    emb_p = GilModel(g_p, spec).encode(shared).data
    perm_err = np.abs(emb_p - emb[perm]).max()
    check("encoder permutation equivariance", perm_err < 1e-10,
          f"max_err={perm_err:.2e}")

    return EXIT_OK if failures == 0 else EXIT_NUMERIC


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "steps": cmd_steps,
    "label-sweep": cmd_label_sweep,
    "gradcheck": cmd_gradcheck,
    "oracle-tests": cmd_oracle_tests,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (DatasetError, ConfigError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GraphInferError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
