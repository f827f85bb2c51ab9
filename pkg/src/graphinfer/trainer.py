"""Training loops: momentum-SGD pretraining, the adapt-then-transfer meta
loop (inner update on the training split, meta update from validation loss),
test-time adaptation, evaluation, and the ablation variants."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csgraph

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .dataio import DatasetBundle
from .errors import ConfigError, TrainingError
from .graphs import SparseGraph
from .hashing import fnv1a64
from .model import ClassIndex, GilModel, GilParameters, ModelSpec
from .reachability import build_table, default_dp_sample_size, estimate_dp

logger = logging.getLogger(__name__)

META_GRAD_MODES = ("first_order", "full")


@dataclass
class RunConfig:
    """Every hyperparameter and design switch; serializable as key=value text."""

    lr_pretrain: float = 0.05
    decay: float = 0.95
    decay_every: int = 50
    momentum: float = 0.9
    pretrain_iters: int = 200
    meta_iters: int = 1200
    alpha: float = 0.001
    beta: float = 0.001
    batch_size: int = 100
    inner_steps: int = 1
    meta_grad_mode: str = "first_order"
    dropout: float = 0.5
    cheb_order: int = 2
    widths: tuple[int, ...] = (128, 256)
    d_p_override: int | None = None
    seed: int = 0
    lambda_max_mode: str = "fixed"
    lambda_max: float = 2.0
    pooling: str = "mean"
    row_normalize: bool = False
    dp_sample_size: int = 100
    eval_every: int = 50
    variant: str = "full"
    symmetric_relation: bool = False  # stub: reserved, not implemented

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant '{self.variant}'; valid: {', '.join(sorted(VARIANTS))}"
            )
        if self.symmetric_relation:
            raise ConfigError(
                "symmetric_relation is a reserved switch and not implemented"
            )
        for name in ("lr_pretrain", "decay", "alpha", "beta"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("pretrain_iters", "meta_iters"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_size", "inner_steps", "decay_every", "eval_every",
                     "cheb_order", "dp_sample_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.meta_grad_mode not in META_GRAD_MODES:
            raise ConfigError(
                f"meta_grad_mode must be one of {META_GRAD_MODES}, "
                f"got '{self.meta_grad_mode}'"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.pooling not in ("mean", "max"):
            raise ConfigError(f"unknown pooling '{self.pooling}'")
        if self.lambda_max_mode not in ("fixed", "power"):
            raise ConfigError(f"unknown lambda_max_mode '{self.lambda_max_mode}'")
        if self.inner_steps > 5:
            raise ConfigError("inner_steps is limited to 5")

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "widths":
                value = ",".join(str(w) for w in value)
            elif value is None:
                value = "none"
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for ln, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {ln}: expected key=value, got '{line}'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {ln}: unknown config key '{key}'")
            kwargs[key] = _parse_field(known[key], value)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def with_overrides(self, **kwargs) -> "RunConfig":
        cfg = dataclasses.replace(self, **kwargs)
        cfg.validate()
        return cfg

    def text_hash(self) -> int:
        return fnv1a64(self.to_text().encode())


def _parse_field(f: dataclasses.Field, value: str):
    if f.name == "widths":
        return tuple(int(w) for w in value.split(",") if w)
    if f.name == "d_p_override":
        return None if value.lower() in ("none", "") else int(value)
    if f.type in ("float",):
        return float(value)
    if f.type in ("int",):
        return int(value)
    if f.type in ("bool",):
        return value.lower() in ("1", "true", "yes")
    if f.type in ("int | None",):
        return None if value.lower() == "none" else int(value)
    return value


def derive_seed(base: int, *parts) -> int:
    return fnv1a64(repr((base,) + parts).encode())


@dataclass(frozen=True)
class VariantDef:
    encoder: bool = True
    relation: bool = True
    reachability: bool = True
    protocol: str = "meta"      # "meta" or "supervised"
    labeled: str = "train"      # "train" or "train_val"
    widths: tuple[int, ...] | None = None
    pooling: str | None = None
    adapt_at_test: bool = True


VARIANTS: dict[str, VariantDef] = {
    "full": VariantDef(),
    "fe_fr": VariantDef(reachability=False),
    "raw_features_only": VariantDef(encoder=False, reachability=False),
    "fe_only": VariantDef(
        relation=False, reachability=False, protocol="supervised", adapt_at_test=False
    ),
    "gcn_train_only": VariantDef(
        relation=False, reachability=False, protocol="supervised", adapt_at_test=False
    ),
    "gcn_joint_train_val": VariantDef(
        relation=False, reachability=False, protocol="supervised",
        labeled="train_val", adapt_at_test=False,
    ),
    "gil_train_only": VariantDef(protocol="supervised"),
    "conv1": VariantDef(widths=(256,)),
    "conv2": VariantDef(),
    "conv3": VariantDef(widths=(128, 256, 256)),
    "mean_pool": VariantDef(pooling="mean"),
    "max_pool": VariantDef(pooling="max"),
}


class EpochSampler:
    """Shuffled epochs over a node pool: every node appears once per epoch."""

    def __init__(self, pool: np.ndarray, seed: int):
        self.pool = np.asarray(pool, dtype=np.int64)
        self.rng = np.random.default_rng(seed)
        self._queue = self.rng.permutation(self.pool)
        self._pos = 0

    def next_batch(self, size: int) -> np.ndarray:
        if size >= self.pool.size:
            return self.pool.copy()
        out = []
        need = size
        while need:
            take = min(need, self._queue.size - self._pos)
            out.append(self._queue[self._pos:self._pos + take])
            self._pos += take
            need -= take
            if self._pos == self._queue.size:
                self._queue = self.rng.permutation(self.pool)
                self._pos = 0
        return np.concatenate(out)


@dataclass
class MetricsLog:
    records: list[tuple] = field(default_factory=list)
    started: float = field(default_factory=time.perf_counter)

    HEADER = ("iteration", "split", "loss", "accuracy", "seconds")

    def add(self, iteration: int, split: str, loss: float, accuracy: float) -> None:
        self.records.append(
            (iteration, split, loss, accuracy, time.perf_counter() - self.started)
        )

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\t".join(self.HEADER) + "\n")
            for it, split, loss, acc, wall in self.records:
                fh.write(f"{it}\t{split}\t{loss:.6f}\t{acc:.6f}\t{wall:.3f}\n")

    def series(self, split: str) -> list[tuple[int, float, float]]:
        return [
            (it, loss, acc)
            for it, s, loss, acc, _ in self.records
            if s == split
        ]


class TrainingContext:
    """Prepared constants for one (dataset, config, variant) combination."""

    def __init__(self, bundle: DatasetBundle, config: RunConfig,
                 variant: str | None = None):
        variant = variant or config.variant
        if variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant '{variant}'; valid: {', '.join(sorted(VARIANTS))}"
            )
        config.validate()
        self.bundle = bundle
        self.config = config
        self.variant = variant
        self.vdef = VARIANTS[variant]
        g = bundle.graph
        self.graph = g
        self.split = bundle.split

        if self.vdef.relation:
            if config.d_p_override is not None:
                self.d_p = int(config.d_p_override)
            else:
                self.d_p = estimate_dp(
                    g,
                    default_dp_sample_size(g.n, config.dp_sample_size),
                    seed=derive_seed(config.seed, "dp"),
                )
        else:
            self.d_p = config.d_p_override or 1

        widths = self.vdef.widths or config.widths
        pooling = self.vdef.pooling or config.pooling
        spec = ModelSpec(
            feature_dim=g.feature_dim,
            num_classes=g.num_classes,
            d_p=self.d_p,
            widths=tuple(widths),
            cheb_order=config.cheb_order,
            use_encoder=self.vdef.encoder,
            use_relation=self.vdef.relation,
            use_reachability=self.vdef.reachability,
            pooling=pooling,
        )
        self.model = GilModel(
            g, spec, lambda_max_mode=config.lambda_max_mode,
            lambda_max=config.lambda_max,
        )
        self.table = None
        self.class_index = None
        if self.vdef.relation:
            self.table = build_table(g, self.split.train_ids, self.d_p)
            self.class_index = ClassIndex.build(g.labels, self.table, g.num_classes)
        if self.vdef.labeled == "train_val":
            pool = np.concatenate([self.split.train_ids, self.split.val_ids])
            labeled = pool[g.labels[pool] != SparseGraph.UNLABELED]
        else:
            labeled = self.split.train_ids
        self.labeled_ids = np.sort(labeled)

    def init_params(self) -> GilParameters:
        return self.model.init_params(derive_seed(self.config.seed, "init"))


def batch_loss(ctx: TrainingContext, params: GilParameters, queries: np.ndarray,
               *, exclude_self: bool, train: bool, seed: int):
    """(scalar loss Tensor, logits Tensor, targets) for one query batch."""
    logits = ctx.model.score_logits(
        params, ctx.table, ctx.class_index, queries,
        exclude_self=exclude_self, train=train,
        dropout_rate=ctx.config.dropout, seed=seed,
    )
    targets = ctx.graph.labels[queries]
    loss = ad.softmax_cross_entropy(logits, targets)
    return loss, logits, targets


def _check_finite(loss: Tensor, iteration: int, lr: float, grads=None) -> None:
    if np.isfinite(loss.data):
        return
    detail = ""
    if grads:
        norms = [float(np.linalg.norm(g.data)) for g in grads.values()]
        detail = f", grad norms min={min(norms):.3e} max={max(norms):.3e}"
    raise TrainingError(
        f"non-finite loss at iteration {iteration} (lr={lr:.6g}{detail})"
    )


def _accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == targets).mean()) if targets.size else 0.0


def _sgd_training(params: GilParameters, ctx: TrainingContext, config: RunConfig,
                  iters: int, log: MetricsLog | None, *, tag: str,
                  start_iteration: int = 0) -> GilParameters:
    """Momentum SGD with stepwise lr decay over epoch-shuffled batches."""
    relation = ctx.vdef.relation
    sampler = EpochSampler(ctx.labeled_ids, derive_seed(config.seed, tag, "batches"))
    velocity = {t.uid: np.zeros_like(t.data) for t in params.tensors()}
    lr = config.lr_pretrain
    tensors = params.tensors()
    for it in range(1, iters + 1):
        queries = sampler.next_batch(config.batch_size)
        with Tape() as tape:
            loss, logits, targets = batch_loss(
                ctx, params, queries, exclude_self=relation, train=True,
                seed=derive_seed(config.seed, tag, "dropout", it),
            )
        grads = backward(tape, loss, tensors)
        _check_finite(loss, it, lr, grads)
        for t in tensors:
            v = velocity[t.uid]
            v *= config.momentum
            v += grads[t.uid].data
            t.data -= lr * v
        if log is not None:
            log.add(start_iteration + it, tag, loss.item(),
                    _accuracy(logits.data, targets))
        if it % config.decay_every == 0:
            lr *= config.decay
    return params


def pretrain(params: GilParameters, ctx: TrainingContext, config: RunConfig,
             log: MetricsLog | None = None) -> GilParameters:
    """Momentum-SGD warmup on the training split (references = queries pool)."""
    return _sgd_training(params, ctx, config, config.pretrain_iters, log, tag="pretrain")


def inner_update(params: GilParameters, ctx: TrainingContext, config: RunConfig,
                 *, batches: list[np.ndarray], seed_tag: tuple,
                 tape: Tape | None = None,
                 loss_sink: list | None = None) -> GilParameters:
    """Adapted parameters after inner_steps plain gradient steps on the
    training loss. With a live tape the update is recorded (differentiable)."""
    theta = params
    alpha = config.alpha
    for step, queries in enumerate(batches):
        seed = derive_seed(config.seed, *seed_tag, "inner", step)
        if tape is None:
            with Tape() as step_tape:
                loss, _, _ = batch_loss(
                    ctx, theta, queries, exclude_self=True, train=True, seed=seed
                )
            grads = backward(step_tape, loss, theta.tensors())
            _check_finite(loss, step, alpha, grads)
            theta = theta.map(lambda t: Tensor(t.data - alpha * grads[t.uid].data))
        else:
            loss, _, _ = batch_loss(
                ctx, theta, queries, exclude_self=True, train=True, seed=seed
            )
            _check_finite(loss, step, alpha)
            grads = backward(tape, loss, theta.tensors(), record=True)
            theta = theta.map(
                lambda t: ad.sub(t, ad.scalar_mul(alpha, grads[t.uid]))
            )
        if loss_sink is not None:
            loss_sink.append(loss.item())
    return theta


def _inner_batches(ctx: TrainingContext, config: RunConfig, sampler: EpochSampler):
    return [sampler.next_batch(config.batch_size) for _ in range(config.inner_steps)]


def _val_batch(ctx: TrainingContext, config: RunConfig, it: int) -> np.ndarray:
    val = ctx.split.val_ids
    if val.size <= config.batch_size:
        return val.copy()
    rng = np.random.default_rng(derive_seed(config.seed, "metaval", it))
    return rng.choice(val, size=config.batch_size, replace=True)


def meta_step(params: GilParameters, ctx: TrainingContext, config: RunConfig,
              it: int, train_batches: list[np.ndarray],
              val_queries: np.ndarray) -> tuple[float, float, float]:
    """One meta update: adapt on training batches, step the original
    parameters against the validation loss of the adapted model.

    Returns (validation loss, validation batch accuracy, inner train loss).
    """
    seed_tag = ("meta", it)
    val_seed = derive_seed(config.seed, *seed_tag, "valdrop")
    inner_losses: list[float] = []
    if config.meta_grad_mode == "first_order":
        theta_p = inner_update(
            params, ctx, config, batches=train_batches, seed_tag=seed_tag,
            loss_sink=inner_losses,
        )
        with Tape() as tape:
            val_loss, logits, targets = batch_loss(
                ctx, theta_p, val_queries, exclude_self=False, train=True,
                seed=val_seed,
            )
        grads = backward(tape, val_loss, theta_p.tensors())
        _check_finite(val_loss, it, config.beta, grads)
        pairs = zip(params.tensors(), theta_p.tensors())
    else:
        with Tape() as tape:
            theta_p = inner_update(
                params, ctx, config, batches=train_batches, seed_tag=seed_tag,
                tape=tape, loss_sink=inner_losses,
            )
            val_loss, logits, targets = batch_loss(
                ctx, theta_p, val_queries, exclude_self=False, train=True,
                seed=val_seed,
            )
            grads = backward(tape, val_loss, params.tensors(), record=False)
        _check_finite(val_loss, it, config.beta, grads)
        pairs = zip(params.tensors(), params.tensors())
    for target_tensor, grad_key in pairs:
        target_tensor.data -= config.beta * grads[grad_key.uid].data
    return val_loss.item(), _accuracy(logits.data, targets), inner_losses[-1]


def evaluate(ctx: TrainingContext, params: GilParameters,
             queries: np.ndarray) -> tuple[float, float, np.ndarray]:
    """(loss, accuracy, predictions) with dropout off and no recording."""
    with ad.no_record():
        loss, logits, targets = batch_loss(
            ctx, params, queries, exclude_self=False, train=False, seed=0
        )
    return loss.item(), _accuracy(logits.data, targets), logits.data.argmax(axis=1)


def meta_train(params: GilParameters, ctx: TrainingContext, config: RunConfig,
               log: MetricsLog | None = None) -> GilParameters:
    """The transfer loop: meta_iters meta steps with periodic full-validation
    error measurements."""
    if config.meta_grad_mode == "full" and config.inner_steps > 1:
        logger.warning(
            "full meta-gradient with inner_steps=%d: tape memory grows "
            "linearly in the step count", config.inner_steps,
        )
    sampler = EpochSampler(
        ctx.split.train_ids, derive_seed(config.seed, "meta", "batches")
    )
    for it in range(1, config.meta_iters + 1):
        train_batches = _inner_batches(ctx, config, sampler)
        val_queries = _val_batch(ctx, config, it)
        val_loss, val_acc, tr_loss = meta_step(
            params, ctx, config, it, train_batches, val_queries
        )
        if log is not None:
            log.add(config.pretrain_iters + it, "meta", val_loss, val_acc)
            if it % config.eval_every == 0 or it == config.meta_iters:
                full_loss, full_acc, _ = evaluate(ctx, params, ctx.split.val_ids)
                log.add(config.pretrain_iters + it, "val", full_loss, full_acc)
    return params


@dataclass
class EvalReport:
    accuracy: float
    loss: float
    per_class_accuracy: list[float]
    step_buckets: list[tuple[str, int, float]]  # (bucket label, count, cumulative acc)
    predictions: np.ndarray

    def bucket_rows(self) -> list[tuple[str, int, float]]:
        return self.step_buckets


def hop_distances_to_references(g: SparseGraph, references: np.ndarray) -> np.ndarray:
    """Per-node hop distance to the nearest reference node (inf if unreachable)."""
    dist = csgraph.dijkstra(
        g.adjacency.csr(), directed=False, unweighted=True, indices=references
    )
    return dist.min(axis=0)


def step_bucket_accuracies(g: SparseGraph, references: np.ndarray,
                           queries: np.ndarray, correct: np.ndarray):
    """Cumulative accuracy over queries within k hops of the reference set,
    for k = 1, 2, ...; the final 'inf' bucket covers every query."""
    dist = hop_distances_to_references(g, references)[queries]
    finite = dist[np.isfinite(dist)]
    buckets: list[tuple[str, int, float]] = []
    max_step = int(finite.max()) if finite.size else 0
    for k in range(1, max_step + 1):
        mask = dist <= k
        if not mask.any():
            continue
        buckets.append((str(k), int(mask.sum()), float(correct[mask].mean())))
    buckets.append(("inf", int(queries.size), float(correct.mean())))
    return buckets


def adapt_and_evaluate(params: GilParameters, ctx: TrainingContext,
                        config: RunConfig) -> EvalReport:
    """Final protocol: one adaptation pass on the full training split, then
    score the test split with dropout off and no self-exclusion."""
    final = params
    if ctx.vdef.relation and ctx.vdef.adapt_at_test:
        batches = [ctx.split.train_ids.copy() for _ in range(config.inner_steps)]
        final = inner_update(
            params, ctx, config, batches=batches, seed_tag=("testadapt",)
        )
    test_ids = ctx.split.test_ids
    loss, accuracy, preds = evaluate(ctx, final, test_ids)
    targets = ctx.graph.labels[test_ids]
    correct = preds == targets
    per_class = []
    for c in range(ctx.graph.num_classes):
        mask = targets == c
        per_class.append(float(correct[mask].mean()) if mask.any() else float("nan"))
    buckets = step_bucket_accuracies(
        ctx.graph, ctx.split.train_ids, test_ids, correct
    )
    return EvalReport(
        accuracy=accuracy, loss=loss, per_class_accuracy=per_class,
        step_buckets=buckets, predictions=preds,
    )


@dataclass
class TrainResult:
    params: GilParameters
    ctx: TrainingContext
    report: EvalReport
    log: MetricsLog


def run_training(bundle: DatasetBundle, config: RunConfig,
                 variant: str | None = None) -> TrainResult:
    """Train one variant end to end and evaluate on the test split."""
    ctx = TrainingContext(bundle, config, variant)
    params = ctx.init_params()
    log = MetricsLog()
    if ctx.vdef.protocol == "meta":
        pretrain(params, ctx, config, log)
        meta_train(params, ctx, config, log)
    else:
        total = config.pretrain_iters + config.meta_iters
        _sgd_training(params, ctx, config, total, log, tag="pretrain")
        full_loss, full_acc, _ = evaluate(ctx, params, ctx.split.val_ids)
        log.add(total, "val", full_loss, full_acc)
    report = adapt_and_evaluate(params, ctx, config)
    log.add(config.pretrain_iters + config.meta_iters, "test",
            report.loss, report.accuracy)
    return TrainResult(params=params, ctx=ctx, report=report, log=log)


def run_ablation(variant: str, bundle: DatasetBundle, config: RunConfig) -> TrainResult:
    if variant not in VARIANTS:
        raise ConfigError(
            f"unknown variant '{variant}'; valid: {', '.join(sorted(VARIANTS))}"
        )
    return run_training(bundle, config, variant)
