"""The inference network: spectral node encoder, reachability weigher, and
class-to-node relation head.

Scoring a query node against a class aggregates the embeddings of that
class's reference nodes, weighted by a learned function of walk-reachability
vectors and normalized so the weights sum to one, then feeds the aggregate
concatenated with the query embedding through a shared class-scoring layer.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DatasetError, TrainingError
from .graphs import (
    DEFAULT_LAMBDA_MAX,
    SparseGraph,
    SparseMatrix,
    normalized_laplacian,
    power_iteration_lambda_max,
    scaled_laplacian,
)
from .reachability import ReachabilityTable

logger = logging.getLogger(__name__)

WEIGHT_SUM_EPS = 1e-8

_CKPT_MAGIC = b"GINFCKPT"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture switches; shapes derive from these plus the dataset."""

    feature_dim: int
    num_classes: int
    d_p: int
    widths: tuple[int, ...] = (128, 256)
    cheb_order: int = 2
    use_encoder: bool = True
    use_relation: bool = True
    use_reachability: bool = True
    pooling: str = "mean"

    def __post_init__(self):
        if self.cheb_order < 1:
            raise ConfigError("cheb_order must be >= 1")
        if self.pooling not in ("mean", "max"):
            raise ConfigError(f"unknown pooling '{self.pooling}'")
        if self.use_encoder and not self.widths:
            raise ConfigError("encoder enabled but no layer widths given")

    @property
    def emb_dim(self) -> int:
        return self.widths[-1] if self.use_encoder else self.feature_dim

    @property
    def phi_r_in(self) -> int:
        return 2 * self.emb_dim if self.use_relation else self.emb_dim


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


@dataclass
class ChebLayerParams:
    """One spectral convolution layer: K coefficient matrices plus a bias."""

    coeffs: list[Tensor]
    bias: Tensor

    @classmethod
    def init(cls, rng, d_in: int, d_out: int, order: int) -> "ChebLayerParams":
        return cls(
            coeffs=[_glorot(rng, d_in, d_out) for _ in range(order)],
            bias=Tensor(np.zeros(d_out)),
        )


@dataclass
class PhiWParams:
    """Reachability weigher: two hidden affine maps and a sigmoid output head."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    HIDDEN = 16

    @classmethod
    def init(cls, rng, d_p: int) -> "PhiWParams":
        h = cls.HIDDEN
        return cls(
            w1=_glorot(rng, d_p, h), b1=Tensor(np.zeros(h)),
            w2=_glorot(rng, h, h), b2=Tensor(np.zeros(h)),
            w3=_glorot(rng, h, 1), b3=Tensor(np.zeros(1)),
        )


@dataclass
class PhiRParams:
    """Class-scoring head: one affine map onto C outputs."""

    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, d_in: int, num_classes: int) -> "PhiRParams":
        return cls(w=_glorot(rng, d_in, num_classes), b=Tensor(np.zeros(num_classes)))


@dataclass
class GilParameters:
    """All trainables: per-layer spectral coefficients, weigher, score head."""

    layers: list[ChebLayerParams]
    phi_w: PhiWParams | None
    phi_r: PhiRParams

    @classmethod
    def init(cls, spec: ModelSpec, seed: int) -> "GilParameters":
        rng = np.random.default_rng(seed)
        layers = []
        if spec.use_encoder:
            d_in = spec.feature_dim
            for width in spec.widths:
                layers.append(ChebLayerParams.init(rng, d_in, width, spec.cheb_order))
                d_in = width
        phi_w = None
        if spec.use_relation and spec.use_reachability:
            phi_w = PhiWParams.init(rng, spec.d_p)
        phi_r = PhiRParams.init(rng, spec.phi_r_in, spec.num_classes)
        return cls(layers=layers, phi_w=phi_w, phi_r=phi_r)

    @property
    def layer1(self) -> ChebLayerParams:
        return self.layers[0]

    @property
    def layer2(self) -> ChebLayerParams:
        return self.layers[1]

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers, start=1):
            for k, c in enumerate(layer.coeffs):
                out.append((f"layer{i}.coeff{k}", c))
            out.append((f"layer{i}.bias", layer.bias))
        if self.phi_w is not None:
            for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
                out.append((f"phi_w.{name}", getattr(self.phi_w, name)))
        out.append(("phi_r.w", self.phi_r.w))
        out.append(("phi_r.b", self.phi_r.b))
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def map(self, fn) -> "GilParameters":
        """Structure-preserving functional update; fn maps Tensor -> Tensor."""
        layers = [
            ChebLayerParams(coeffs=[fn(c) for c in l.coeffs], bias=fn(l.bias))
            for l in self.layers
        ]
        phi_w = None
        if self.phi_w is not None:
            phi_w = PhiWParams(*(fn(getattr(self.phi_w, n))
                                 for n in ("w1", "b1", "w2", "b2", "w3", "b3")))
        phi_r = PhiRParams(w=fn(self.phi_r.w), b=fn(self.phi_r.b))
        return GilParameters(layers=layers, phi_w=phi_w, phi_r=phi_r)


@dataclass(frozen=True)
class ScoreVector:
    """Per-query class scores plus their softmax probabilities."""

    scores: np.ndarray
    probs: np.ndarray


def predict(score: ScoreVector) -> int:
    """Class with the maximum score; ties break toward the smallest index."""
    return int(np.argmax(score.scores))


@dataclass(frozen=True)
class ClassIndex:
    """Reference nodes grouped by class, with their reachability-table rows."""

    node_ids: list[np.ndarray]
    table_rows: list[np.ndarray]

    @classmethod
    def build(cls, labels: np.ndarray, table: ReachabilityTable, num_classes: int) -> "ClassIndex":
        nodes, rows = [], []
        for c in range(num_classes):
            ids = np.array(
                [r for r in table.reference_ids if labels[r] == c], dtype=np.int64
            )
            if ids.size == 0:
                raise ConfigError(f"class {c} has no reference node")
            nodes.append(ids)
            rows.append(np.array([table.index_of(r) for r in ids], dtype=np.int64))
        return cls(node_ids=nodes, table_rows=rows)

    @property
    def num_classes(self) -> int:
        return len(self.node_ids)


def cheb_conv(layer: ChebLayerParams, l_hat: SparseMatrix, x: Tensor) -> Tensor:
    """Spectral filter: sum_k Z_k coeffs_k + bias with the standard recursion
    Z_0 = X, Z_1 = L X, Z_k = 2 L Z_{k-1} - Z_{k-2}."""
    terms = [x]
    if len(layer.coeffs) > 1:
        terms.append(ad.spmm(l_hat, x))
    for _ in range(2, len(layer.coeffs)):
        terms.append(
            ad.sub(ad.scalar_mul(2.0, ad.spmm(l_hat, terms[-1])), terms[-2])
        )
    out = ad.matmul(terms[0], layer.coeffs[0])
    for z, coeff in zip(terms[1:], layer.coeffs[1:]):
        out = ad.add(out, ad.matmul(z, coeff))
    return ad.add_bias(out, layer.bias)


def phi_w_forward(phi_w: PhiWParams, reach) -> Tensor:
    """Map reachability vectors to weights in (0, 1).

    Accepts a single d_p vector (returns a scalar Tensor) or an (m, d_p)
    batch (returns an (m, 1) Tensor).
    """
    single = False
    if isinstance(reach, Tensor):
        r = reach
        if r.ndim == 1:
            r = ad.reshape(r, (1, -1))
            single = True
    else:
        arr = np.asarray(reach, dtype=np.float64)
        single = arr.ndim == 1
        r = Tensor(arr.reshape(1, -1) if single else arr)
    h = ad.relu(ad.add_bias(ad.matmul(r, phi_w.w1), phi_w.b1))
    h = ad.relu(ad.add_bias(ad.matmul(h, phi_w.w2), phi_w.b2))
    out = ad.sigmoid(ad.add_bias(ad.matmul(h, phi_w.w3), phi_w.b3))
    if single:
        return ad.reshape(out, ())
    return out


class GraphOperators:
    """Constant sparse operators derived from one graph, built once."""

    def __init__(self, graph: SparseGraph, lambda_max_mode: str = "fixed",
                 lambda_max: float = DEFAULT_LAMBDA_MAX):
        if lambda_max_mode not in ("fixed", "power"):
            raise ConfigError(f"unknown lambda_max mode '{lambda_max_mode}'")
        self.graph = graph
        lap = normalized_laplacian(graph)
        if lambda_max_mode == "power":
            est = power_iteration_lambda_max(lap, iters=50, tol=1e-6)
            lambda_max = max(est, 1e-6)
        self.lambda_max = float(lambda_max)
        self.l_hat = scaled_laplacian(lap, self.lambda_max)
        self.pool_mean = ad.mean_pool_matrix(graph)


class GilModel:
    """Forward passes over one prepared graph.

    Holds only constants (operators, feature tensor); parameters are passed
    in explicitly so functional updates stay cheap.
    """

    def __init__(self, graph: SparseGraph, spec: ModelSpec,
                 lambda_max_mode: str = "fixed",
                 lambda_max: float = DEFAULT_LAMBDA_MAX):
        if spec.feature_dim != graph.feature_dim:
            raise ConfigError(
                f"spec feature_dim {spec.feature_dim} != graph {graph.feature_dim}"
            )
        self.graph = graph
        self.spec = spec
        self.ops = GraphOperators(graph, lambda_max_mode, lambda_max)
        self.features = Tensor(graph.features)
        self.fallback_events = 0
        self._fallback_warned = False
        self._first_layer_basis = (
            self._build_first_layer_basis() if spec.use_encoder else None
        )

    def _build_first_layer_basis(self):
        """T_k(L) X for the first layer, fixed across training. Stored sparse
        when sparse enough to pay off; None keeps the generic dense path."""
        import scipy.sparse as sp

        if np.count_nonzero(self.graph.features) * 4 > self.graph.features.size:
            return None
        basis = []
        term = sp.csr_matrix(self.graph.features)
        prev = None
        l_hat = self.ops.l_hat.csr()
        for k in range(self.spec.cheb_order):
            if k == 1:
                term, prev = (l_hat @ term).tocsr(), term
            elif k >= 2:
                term, prev = (2.0 * (l_hat @ term) - prev).tocsr(), term
            if term.nnz * 4 > term.shape[0] * term.shape[1]:
                return None
            term.sort_indices()
            basis.append(SparseMatrix.from_scipy(term))
        return basis

    def init_params(self, seed: int) -> GilParameters:
        return GilParameters.init(self.spec, seed)

    # -- encoder -----------------------------------------------------------

    def encode(self, params: GilParameters, *, train: bool = False,
               dropout_rate: float = 0.5, seed: int = 0) -> Tensor:
        """Per-node embeddings: conv -> ReLU -> neighborhood pool -> dropout,
        repeated per layer. Raw features when the encoder is disabled."""
        if not self.spec.use_encoder:
            return self.features
        h = self.features
        for idx, layer in enumerate(params.layers):
            if idx == 0 and self._first_layer_basis is not None:
                out = ad.spmm(self._first_layer_basis[0], layer.coeffs[0])
                for basis, coeff in zip(self._first_layer_basis[1:], layer.coeffs[1:]):
                    out = ad.add(out, ad.spmm(basis, coeff))
                h = ad.add_bias(out, layer.bias)
            else:
                h = cheb_conv(layer, self.ops.l_hat, h)
            h = ad.relu(h)
            if self.spec.pooling == "mean":
                h = ad.spmm(self.ops.pool_mean, h)
            else:
                h = ad.row_max_over_neighbors(self.graph, h)
            h = ad.dropout(h, dropout_rate, seed + idx, train)
        return h

    # -- relation scoring ---------------------------------------------------

    def _pair_weights(self, params: GilParameters, table: ReachabilityTable,
                      queries: np.ndarray) -> Tensor:
        """(num_references, batch) weight matrix."""
        n_ref = table.num_references
        b = queries.size
        if not self.spec.use_reachability or params.phi_w is None:
            return Tensor(np.ones((n_ref, b)))
        feats = table.features_for(queries).reshape(n_ref * b, table.d_p)
        w = phi_w_forward(params.phi_w, Tensor(feats))
        return ad.reshape(w, (n_ref, b))

    def score_logits(self, params: GilParameters, table: ReachabilityTable | None,
                     class_index: ClassIndex | None, queries,
                     exclude_self: bool = False, *, train: bool = False,
                     dropout_rate: float = 0.5, seed: int = 0) -> Tensor:
        """(batch, C) class-score matrix for the query nodes."""
        queries = np.asarray(queries, dtype=np.int64)
        emb = self.encode(params, train=train, dropout_rate=dropout_rate, seed=seed)
        emb_q = ad.gather_rows(emb, queries)
        if not self.spec.use_relation:
            return ad.add_bias(ad.matmul(emb_q, params.phi_r.w), params.phi_r.b)
        if table is None or class_index is None:
            raise ConfigError("relation scoring requires a table and class index")
        emb_ref = ad.gather_rows(emb, table.reference_ids)
        weights = self._pair_weights(params, table, queries)
        self_mask = None
        if exclude_self:
            self_mask = (
                table.reference_ids[:, None] == queries[None, :]
            )
        cols = []
        for c in range(class_index.num_classes):
            agg = self._class_aggregate(
                weights, emb_ref, class_index, c, self_mask, queries.size
            )
            feat = ad.hstack([agg, emb_q])
            scores_all = ad.add_bias(ad.matmul(feat, params.phi_r.w), params.phi_r.b)
            cols.append(ad.slice_cols(scores_all, c, c + 1))
        return ad.hstack(cols)

    def _class_aggregate(self, weights: Tensor, emb_ref: Tensor,
                         class_index: ClassIndex, c: int,
                         self_mask: np.ndarray | None, batch: int) -> Tensor:
        rows = class_index.table_rows[c]
        m_c = rows.size
        w_c = ad.gather_rows(weights, rows)
        if not np.all(np.isfinite(w_c.data)):
            raise TrainingError(f"non-finite relation weights for class {c}")
        keep = np.ones((m_c, batch))
        if self_mask is not None:
            keep = 1.0 - self_mask[rows].astype(np.float64)
            w_c = ad.mul(w_c, Tensor(keep))
            assert not w_c.data[keep == 0.0].any(), "self weight leaked through mask"
        e_c = ad.gather_rows(emb_ref, rows)
        sums = ad.col_sums(w_c)
        dead = sums.data < WEIGHT_SUM_EPS
        no_survivor = np.zeros(batch, dtype=bool)
        if dead.any():
            surv_counts = keep.sum(axis=0)
            uniform = np.where(
                dead[None, :] & (keep > 0.0),
                keep / np.maximum(surv_counts, 1.0)[None, :],
                0.0,
            )
            if uniform.any():
                w_c = ad.add(w_c, Tensor(uniform))
                sums = ad.col_sums(w_c)
            no_survivor = dead & (surv_counts == 0.0)
            self.fallback_events += int(dead.sum())
            level = logging.DEBUG if self._fallback_warned else logging.WARNING
            self._fallback_warned = True
            logger.log(
                level,
                "class %d: weight-sum fallback on %d of %d queries (%d without survivors)",
                c, int(dead.sum()), batch, int(no_survivor.sum()),
            )
        safe_sums = sums
        if no_survivor.any():
            safe_sums = ad.add(sums, Tensor(no_survivor.astype(np.float64)))
        agg = ad.scale_rows(
            ad.matmul(w_c, e_c, transpose_a=True), ad.reciprocal(safe_sums)
        )
        if no_survivor.any():
            mean_emb = ad.scalar_mul(1.0 / m_c, ad.matmul(Tensor(np.ones((1, m_c))), e_c))
            flag = no_survivor.astype(np.float64)
            agg = ad.add(
                ad.scale_rows(agg, Tensor(1.0 - flag)),
                ad.matmul(Tensor(flag[:, None]), mean_emb),
            )
        return agg

    def class_scores(self, params: GilParameters, table: ReachabilityTable | None,
                     class_index: ClassIndex | None, queries,
                     exclude_self: bool = False) -> list[ScoreVector]:
        """Deterministic (dropout-off) scoring; one ScoreVector per query."""
        with ad.no_record():
            logits = self.score_logits(
                params, table, class_index, queries, exclude_self, train=False
            )
            probs = ad.softmax_rows(logits)
        return [
            ScoreVector(scores=s.copy(), probs=p.copy())
            for s, p in zip(logits.data, probs.data)
        ]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: GilParameters, config_hash: int = 0) -> None:
    """Header (magic, version, config hash) + named f64 blocks, little-endian."""
    blocks = params.named_params()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sIQI", _CKPT_MAGIC, _CKPT_VERSION, config_hash, len(blocks)))
        for name, tensor in blocks:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", tensor.ndim))
            fh.write(struct.pack(f"<{max(tensor.ndim, 1)}I", *(tensor.shape or (1,))))
            fh.write(tensor.data.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[int, dict[str, np.ndarray]]:
    """Returns (config hash, name -> array) as stored."""
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<8sIQI"))
        magic, version, config_hash, count = struct.unpack("<8sIQI", head)
        if magic != _CKPT_MAGIC:
            raise DatasetError(f"{path}: not a parameter checkpoint")
        if version != _CKPT_VERSION:
            raise DatasetError(f"{path}: unsupported checkpoint version {version}")
        blocks: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{max(ndim, 1)}I", fh.read(4 * max(ndim, 1)))
            shape = tuple(dims[:ndim])
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * size), dtype="<f8")
            if data.size != size:
                raise DatasetError(f"{path}: truncated block '{name}'")
            blocks[name] = data.reshape(shape).astype(np.float64)
    return config_hash, blocks


def restore_params(params: GilParameters, blocks: dict[str, np.ndarray]) -> GilParameters:
    """Copy stored arrays into a freshly initialized parameter structure."""
    for name, tensor in params.named_params():
        if name not in blocks:
            raise DatasetError(f"checkpoint missing block '{name}'")
        stored = blocks[name]
        if stored.shape != tensor.shape:
            raise DatasetError(
                f"checkpoint block '{name}' has shape {stored.shape}, expected {tensor.shape}"
            )
        tensor.data[...] = stored
    return params
