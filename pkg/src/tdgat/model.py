"""TD-GAT: multi-head graph attention layers with a shared cross-layer LSTM cell.

Each layer aggregates neighbor states with per-head attention, and (in the
TDGAT variant) the aggregate is fed as the next observation into one LSTM
cell whose hidden and cell states are carried across layers. The target
node's final hidden state is classified with a linear layer and softmax.
The GAT variant drops the LSTM: each layer's output is the next layer's
input.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .depgraph import POLARITIES, DepGraph, neighborhood

VARIANTS = ("TDGAT", "GAT")
LSTM_MODES = ("all", "target")
MODEL_FORMAT = "tdgat-model/1"
LSTM_GATES = ("i", "f", "o", "c")


class ConfigError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 300
    heads: int = 6
    layers: int = 3
    embed_dim: int = 300
    classes: int = 3
    leaky_slope: float = 0.2
    self_loop: bool = True
    variant: str = "TDGAT"
    lstm_mode: str = "all"  # "target": run the LSTM on the target row only

    def __post_init__(self):
        if self.hidden_dim < 1 or self.heads < 1:
            raise ConfigError("hidden_dim and heads must be positive")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} is not divisible by heads {self.heads}")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.embed_dim < 1 or self.classes < 2:
            raise ConfigError("embed_dim must be positive and classes >= 2")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lstm_mode not in LSTM_MODES:
            raise ConfigError(f"lstm_mode must be one of {LSTM_MODES}, got {self.lstm_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})


@dataclass
class ProjectionParams:
    W: Tensor  # [d x D]
    b: Tensor  # [1 x D]


@dataclass
class GatLayerParams:
    W: list  # per head, [D/K x D]
    a: list  # per head, [2D/K x 1]


@dataclass
class LstmParams:
    W_i: Tensor
    W_f: Tensor
    W_o: Tensor
    W_c: Tensor
    U_i: Tensor
    U_f: Tensor
    U_o: Tensor
    U_c: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_c: Tensor

    def gate(self, name):
        return getattr(self, f"W_{name}"), getattr(self, f"U_{name}"), getattr(self, f"b_{name}")


@dataclass
class ClassifierParams:
    W: Tensor  # [C x D]
    b: Tensor  # [1 x C]


@dataclass
class ModelParams:
    config: ModelConfig
    projection: ProjectionParams
    gat_layers: list
    lstm: LstmParams
    classifier: ClassifierParams

    def named_tensors(self) -> list:
        out = [("projection.W", self.projection.W), ("projection.b", self.projection.b)]
        for l, layer in enumerate(self.gat_layers):
            for k, (W, a) in enumerate(zip(layer.W, layer.a)):
                out.append((f"gat.{l}.{k}.W", W))
                out.append((f"gat.{l}.{k}.a", a))
        for kind in ("W", "U", "b"):
            for g in LSTM_GATES:
                out.append((f"lstm.{kind}_{g}", getattr(self.lstm, f"{kind}_{g}")))
        out.append(("classifier.W", self.classifier.W))
        out.append(("classifier.b", self.classifier.b))
        return out

    def tensors(self) -> list:
        return [t for _, t in self.named_tensors()]

    def active_tensors(self) -> list:
        """Parameters the configured variant actually uses (the regularized set)."""
        if self.config.variant == "GAT":
            return [t for name, t in self.named_tensors() if not name.startswith("lstm.")]
        return self.tensors()

    def lstm_tensors(self) -> list:
        return [t for name, t in self.named_tensors() if name.startswith("lstm.")]

    def zero_grad(self):
        for t in self.tensors():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return params_from_arrays(self.config, {n: t.values for n, t in self.named_tensors()})


@dataclass
class LayerState:
    H: Tensor
    C: Optional[Tensor] = None


def _glorot(rng, rows, cols, name):
    limit = math.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-limit, limit, (rows, cols)), requires_grad=True, name=name)


def _zeros(rows, cols, name):
    return Tensor(np.zeros((rows, cols)), requires_grad=True, name=name)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, attention vectors uniform in +-sqrt(6/(2D/K))."""
    rng = np.random.default_rng(seed)
    D, d, K, hd = config.hidden_dim, config.embed_dim, config.heads, config.head_dim
    projection = ProjectionParams(_glorot(rng, d, D, "projection.W"), _zeros(1, D, "projection.b"))
    layers = []
    a_limit = math.sqrt(6.0 / (2 * hd))
    for l in range(config.layers):
        Ws, As = [], []
        for k in range(K):
            Ws.append(_glorot(rng, hd, D, f"gat.{l}.{k}.W"))
            As.append(Tensor(rng.uniform(-a_limit, a_limit, (2 * hd, 1)), requires_grad=True,
                             name=f"gat.{l}.{k}.a"))
        layers.append(GatLayerParams(Ws, As))
    lstm = {}
    for kind in ("W", "U"):
        for g in LSTM_GATES:
            lstm[f"{kind}_{g}"] = _glorot(rng, D, D, f"lstm.{kind}_{g}")
    for g in LSTM_GATES:
        lstm[f"b_{g}"] = _zeros(1, D, f"lstm.b_{g}")
    classifier = ClassifierParams(_glorot(rng, config.classes, D, "classifier.W"),
                                  _zeros(1, config.classes, "classifier.b"))
    return ModelParams(config, projection, layers, LstmParams(**lstm), classifier)


def _expected_shapes(config: ModelConfig) -> dict:
    D, d, K, hd, C = config.hidden_dim, config.embed_dim, config.heads, config.head_dim, config.classes
    shapes = {"projection.W": (d, D), "projection.b": (1, D)}
    for l in range(config.layers):
        for k in range(K):
            shapes[f"gat.{l}.{k}.W"] = (hd, D)
            shapes[f"gat.{l}.{k}.a"] = (2 * hd, 1)
    for kind in ("W", "U"):
        for g in LSTM_GATES:
            shapes[f"lstm.{kind}_{g}"] = (D, D)
    for g in LSTM_GATES:
        shapes[f"lstm.b_{g}"] = (1, D)
    shapes["classifier.W"] = (C, D)
    shapes["classifier.b"] = (1, C)
    return shapes


def params_from_arrays(config: ModelConfig, arrays: dict) -> ModelParams:
    shapes = _expected_shapes(config)
    missing = set(shapes) - set(arrays)
    extra = set(arrays) - set(shapes)
    if missing or extra:
        raise ModelFormatError(f"tensor names do not match config (missing {sorted(missing)[:3]}, "
                               f"unexpected {sorted(extra)[:3]})")
    t = {}
    for name, shape in shapes.items():
        arr = np.array(arrays[name], dtype=np.float64)
        if arr.shape != shape:
            raise ModelFormatError(f"{name}: shape {arr.shape} does not match config {shape}")
        t[name] = Tensor(arr, requires_grad=True, name=name)
    layers = [
        GatLayerParams([t[f"gat.{l}.{k}.W"] for k in range(config.heads)],
                       [t[f"gat.{l}.{k}.a"] for k in range(config.heads)])
        for l in range(config.layers)
    ]
    lstm = LstmParams(**{name.split(".", 1)[1]: v for name, v in t.items() if name.startswith("lstm.")})
    return ModelParams(
        config,
        ProjectionParams(t["projection.W"], t["projection.b"]),
        layers,
        lstm,
        ClassifierParams(t["classifier.W"], t["classifier.b"]),
    )


def param_count(config: ModelConfig) -> int:
    """Number of learnable scalars implied by the config.

    The GAT variant has no LSTM unit, so its count omits the LSTM block.
    """
    D, d, K, hd, C = config.hidden_dim, config.embed_dim, config.heads, config.head_dim, config.classes
    total = d * D + D
    total += config.layers * K * (hd * D + 2 * hd)
    if config.variant == "TDGAT":
        total += 8 * D * D + 4 * D
    total += C * D + C
    return total


def count_parameters(params: ModelParams) -> int:
    return sum(t.values.size for t in params.active_tensors())


# -- graphs as attention masks -------------------------------------------

@dataclass
class GraphBatch:
    """Disjoint union of graphs: one block-diagonal neighborhood mask."""

    mask: np.ndarray  # [N x N] bool, row i marks n[i]
    targets: np.ndarray  # target row of each graph in the union
    offsets: np.ndarray  # first row of each graph
    sizes: np.ndarray = field(default=None)

    @property
    def node_count(self) -> int:
        return self.mask.shape[0]

    def target_mask(self) -> np.ndarray:
        m = np.zeros((self.node_count, 1))
        m[self.targets] = 1.0
        return m


def batch_graphs(graphs: Sequence[DepGraph], self_loop: bool = True) -> GraphBatch:
    sizes = np.array([g.node_count for g in graphs], dtype=np.intp)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.intp)
    n = int(sizes.sum())
    mask = np.zeros((n, n), dtype=bool)
    for g, off in zip(graphs, offsets):
        for i in range(g.node_count):
            nbrs = neighborhood(g, i, self_loop)
            if not nbrs:
                raise ValueError(f"node {i} has an empty neighborhood (self_loop disabled)")
            mask[off + i, [off + j for j in nbrs]] = True
    targets = np.array([off + g.target_node for g, off in zip(graphs, offsets)], dtype=np.intp)
    return GraphBatch(mask, targets, offsets, sizes)


def _as_batch(graph, self_loop) -> GraphBatch:
    if isinstance(graph, GraphBatch):
        return graph
    return batch_graphs([graph], self_loop)


# -- layers ---------------------------------------------------------------

def attention_coefficients(H: Tensor, graph, W: Tensor, a: Tensor, slope: float = 0.2,
                           self_loop: bool = True) -> Tensor:
    """Attention weights [N x N] for one head; row i is a distribution over n[i]."""
    batch = _as_batch(graph, self_loop)
    return _attention(H, batch.mask, W, a, slope)[0]


def _attention(H, mask, W, a, slope):
    Z = ad.matmul(H, ad.transpose(W))
    hd = W.rows
    src = ad.matmul(Z, ad.slice_rows(a, 0, hd))
    dst = ad.matmul(Z, ad.slice_rows(a, hd, 2 * hd))
    logits = ad.leaky_relu(ad.outer_add(src, dst), slope)
    return ad.softmax_rows(logits, mask), Z


def gat_layer(H: Tensor, graph, layer: GatLayerParams, config: ModelConfig,
              trace: Optional[list] = None) -> Tensor:
    """Multi-head attention update; per-head weights are appended to ``trace`` when given."""
    if H.cols != config.hidden_dim:
        raise ad.ShapeError(f"gat_layer: H has {H.cols} columns, expected {config.hidden_dim}")
    batch = _as_batch(graph, config.self_loop)
    if H.rows != batch.node_count:
        raise ad.ShapeError(f"gat_layer: H has {H.rows} rows for {batch.node_count} nodes")
    outs = []
    for W, a in zip(layer.W, layer.a):
        alpha, Z = _attention(H, batch.mask, W, a, config.leaky_slope)
        if trace is not None:
            trace.append(alpha.values)
        outs.append(ad.sigmoid(ad.weighted_row_sum(alpha, Z)))
    return ad.concat_cols(outs)


def lstm_cell(x_hat: Tensor, state: LayerState, params: LstmParams, gates: Optional[dict] = None) -> LayerState:
    """One LSTM step applied row-wise with shared weights; ``gates`` receives i, f, o, c~ values."""
    if x_hat.shape != state.H.shape or (state.C is not None and state.C.shape != state.H.shape):
        raise ad.ShapeError("lstm_cell: input and state shapes differ")

    def pre(name):
        W, U, b = params.gate(name)
        z = ad.add(ad.matmul(x_hat, ad.transpose(W)), ad.matmul(state.H, ad.transpose(U)))
        return ad.add_row_bias(z, b)

    i = ad.sigmoid(pre("i"))
    f = ad.sigmoid(pre("f"))
    o = ad.sigmoid(pre("o"))
    c_tilde = ad.tanh(pre("c"))
    if gates is not None:
        gates.update(i=i.values, f=f.values, o=o.values, c=c_tilde.values)
    C_prev = state.C if state.C is not None else ad.constant(np.zeros(state.H.shape))
    C = ad.add(ad.mul(f, C_prev), ad.mul(i, c_tilde))
    H = ad.mul(o, ad.tanh(C))
    return LayerState(H, C)


def project(X, params: ModelParams) -> Tensor:
    X = X if isinstance(X, Tensor) else ad.constant(X)
    if X.cols != params.projection.W.rows:
        raise ad.ShapeError(f"features have {X.cols} columns, projection expects {params.projection.W.rows}")
    return ad.add_row_bias(ad.matmul(X, params.projection.W), params.projection.b)


def _blend(mask: Tensor, new: Tensor, old: Tensor) -> Tensor:
    # rows where mask == 1 take `new`, the rest keep `old`
    keep = ad.constant(1.0 - mask.values)
    return ad.add(ad.mul(mask, new), ad.mul(keep, old))


def init_states(X, params: ModelParams, batch: Optional[GraphBatch] = None) -> LayerState:
    """Project features and run the LSTM once from a zero state (GAT variant: projection only)."""
    P = project(X, params)
    cfg = params.config
    if cfg.variant == "GAT":
        return LayerState(P, None)
    zero = ad.constant(np.zeros(P.shape))
    state = lstm_cell(P, LayerState(zero, zero), params.lstm)
    if cfg.lstm_mode == "target":
        if batch is None:
            raise ValueError("lstm_mode='target' needs the graph batch")
        m = ad.constant(np.repeat(batch.target_mask(), P.cols, axis=1))
        return LayerState(_blend(m, state.H, P), ad.mul(m, state.C))
    return state


def encode(params: ModelParams, batch: GraphBatch, X, trace: Optional[list] = None) -> LayerState:
    """Final node states; ``trace`` collects one list of per-head attention matrices per layer."""
    cfg = params.config
    state = init_states(X, params, batch)
    m = None
    if cfg.lstm_mode == "target":
        m = ad.constant(np.repeat(batch.target_mask(), cfg.hidden_dim, axis=1))
    for layer in params.gat_layers:
        heads = [] if trace is not None else None
        H_hat = gat_layer(state.H, batch, layer, cfg, heads)
        if trace is not None:
            trace.append(heads)
        if cfg.variant == "GAT":
            state = LayerState(H_hat, None)
            continue
        new = lstm_cell(H_hat, state, params.lstm)
        if m is not None:
            new = LayerState(_blend(m, new.H, H_hat), _blend(m, new.C, state.C))
        state = new
    return state


def forward_batch(params: ModelParams, batch: GraphBatch, X) -> Tensor:
    """Class probabilities [B x C], one row per graph in the batch."""
    state = encode(params, batch, X)
    h_t = ad.take_rows(state.H, batch.targets)
    logits = ad.add_row_bias(ad.matmul(h_t, ad.transpose(params.classifier.W)), params.classifier.b)
    return ad.softmax_rows(logits)


def forward(params: ModelParams, graph: DepGraph, X, variant: Optional[str] = None) -> Tensor:
    """Class probabilities [1 x C] for a single graph."""
    if variant is not None and variant != params.config.variant:
        params = ModelParams(params.config.replace(variant=variant), params.projection,
                             params.gat_layers, params.lstm, params.classifier)
    return forward_batch(params, batch_graphs([graph], params.config.self_loop), X)


def label_index(label) -> int:
    if isinstance(label, str):
        try:
            return POLARITIES.index(label)
        except ValueError:
            raise ValueError(f"unknown label {label!r}") from None
    return int(label)


def loss(probs: Tensor, labels, params: ModelParams, lam: float) -> Tensor:
    """Mean cross-entropy over rows plus lam * squared norm of the active parameters."""
    if isinstance(labels, (str, int, np.integer)):
        labels = [labels]
    idx = [label_index(y) for y in labels]
    if any(not 0 <= y < probs.cols for y in idx):
        raise ValueError(f"label out of range for {probs.cols} classes")
    ce = ad.cross_entropy(probs, idx)
    if lam == 0:
        return ce
    return ad.add(ce, ad.scale(ad.sum_squares(params.active_tensors()), lam))


def model_gradcheck(config: ModelConfig, seed: int = 0, nodes: int = 6, lam: float = 1e-4,
                    h: float = 1e-5, tol: float = 1e-4) -> ad.GradCheckReport:
    """Finite-difference check of the full loss on a random tree with random features and label."""
    from .depgraph import random_tree

    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    # perturb biases away from zero so every parameter component is exercised
    for name, t in params.named_tensors():
        if name.endswith(".b") or "lstm.b_" in name:
            t.values[...] = rng.normal(0.0, 0.1, t.shape)
    graph = random_tree(nodes, rng)
    X = rng.normal(size=(nodes, config.embed_dim))
    label = int(rng.integers(0, config.classes))
    return ad.grad_check(lambda: loss(forward(params, graph, X), label, params, lam), params.tensors(), h, tol)


# -- persistence -----------------------------------------------------------

def model_to_dict(params: ModelParams) -> dict:
    tensors = {}
    for name, t in params.named_tensors():
        tensors[name] = {"rows": t.rows, "cols": t.cols, "data": [float(x) for x in t.values.ravel()]}
    return {"format": MODEL_FORMAT, "config": asdict(params.config), "tensors": tensors}


def model_from_dict(doc) -> ModelParams:
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        got = doc.get("format") if isinstance(doc, dict) else type(doc).__name__
        raise ModelFormatError(f"unsupported model format {got!r}, expected {MODEL_FORMAT!r}")
    try:
        config = ModelConfig(**doc["config"])
        arrays = {}
        for name, entry in doc["tensors"].items():
            rows, cols, data = int(entry["rows"]), int(entry["cols"]), entry["data"]
            if len(data) != rows * cols:
                raise ModelFormatError(f"{name}: {len(data)} values for a {rows}x{cols} tensor")
            arrays[name] = np.array(data, dtype=np.float64).reshape(rows, cols)
    except (KeyError, TypeError, ConfigError) as exc:
        raise ModelFormatError(f"corrupt model file: {exc}") from None
    return params_from_arrays(config, arrays)


def save_model(params: ModelParams, path) -> None:
    text = json.dumps(model_to_dict(params))
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tdgat-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path) -> ModelParams:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"corrupt model file: {exc}") from None
    return model_from_dict(doc)
