"""Sequence-graph classifier: shared biLSTM encoder per component, a single
self-attention layer whose softmax matrix is kept as a directed connectivity
graph, stacked top-k pooling with mean readouts, and a two-layer classifier.

The public functions (``lstm_cell``, ``encode_all``, ``self_attention``,
``topk_pool``, ``forward``) take and return numpy arrays; they are thin
wrappers over graph builders shared with the training path, so the array-level
API and the differentiable path cannot drift apart.

Layout conventions: a subject is an (m, T) matrix of m component time series;
the encoder hidden size is per direction, so encoded components are rows of
width 2*hidden; attention projects those to ``attn_dim``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import adcore
from .adcore import Node, Tape, constant


class ConfigError(ValueError):
    """Model configuration incompatible with the input."""


class DegenerateScorerError(ValueError):
    """A pooling score vector is identically zero."""


_GATES = ("i", "f", "g", "o")
_DIRECTIONS = ("fw", "bw")


@dataclass
class ModelConfig:
    hidden: int = 64        # LSTM hidden size per direction
    attn_dim: int = 64
    pool_layers: int = 3
    pool_keep: float = 0.8  # fraction of components kept per pooling layer
    fc_hidden: int = 64
    classes: int = 2

    def __post_init__(self):
        if self.hidden < 1:
            raise ConfigError(f"hidden must be >= 1, got {self.hidden}")
        if self.attn_dim < 1:
            raise ConfigError(f"attn_dim must be >= 1, got {self.attn_dim}")
        if not 0.0 < self.pool_keep <= 1.0:
            raise ConfigError(f"pool_keep must be in (0, 1], got {self.pool_keep}")
        if self.pool_layers < 1:
            raise ConfigError(f"pool_layers must be >= 1, got {self.pool_layers}")
        if self.fc_hidden < 1:
            raise ConfigError(f"fc_hidden must be >= 1, got {self.fc_hidden}")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Name -> shape for every learnable array, in a fixed order."""
    h, d = config.hidden, config.attn_dim
    shapes: dict[str, tuple[int, int]] = {}
    for dr in _DIRECTIONS:
        for g in _GATES:
            shapes[f"lstm_{dr}_W{g}"] = (1, h)
            shapes[f"lstm_{dr}_U{g}"] = (h, h)
            shapes[f"lstm_{dr}_b{g}"] = (1, h)
    for nm in ("WQ", "WK", "WV"):
        shapes[f"att_{nm}"] = (2 * h, d)
    for layer in range(1, config.pool_layers + 1):
        shapes[f"pool_p{layer}"] = (d, 1)
    shapes["fc_W1"] = (d, config.fc_hidden)
    shapes["fc_b1"] = (1, config.fc_hidden)
    shapes["fc_W2"] = (config.fc_hidden, config.classes)
    shapes["fc_b2"] = (1, config.classes)
    return shapes


@dataclass
class ModelParams:
    """All learnable weights, keyed by the names of ``param_shapes``."""

    arrays: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def validate(self, config: ModelConfig):
        expected = param_shapes(config)
        if set(self.arrays) != set(expected):
            raise ConfigError(
                f"parameter names {sorted(self.arrays)} do not match config {sorted(expected)}"
            )
        for name, shp in expected.items():
            if self.arrays[name].shape != shp:
                raise ConfigError(
                    f"parameter {name} has shape {self.arrays[name].shape}, expected {shp}"
                )


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights; zero biases except
    the LSTM forget-gate bias, which starts at 1."""
    arrays = {}
    for name, (rows, cols) in param_shapes(config).items():
        base = name.rsplit("_", 1)[-1]
        if base.startswith("b"):
            if base in ("bf",):  # forget gate
                arrays[name] = np.ones((rows, cols))
            else:
                arrays[name] = np.zeros((rows, cols))
        else:
            bound = 1.0 / math.sqrt(rows)
            arrays[name] = rng.uniform(-bound, bound, size=(rows, cols))
    return ModelParams(arrays)


def _param_nodes(params: ModelParams) -> dict[str, Node]:
    return {name: Node(arr) for name, arr in params.arrays.items()}


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
# A checkpoint is an uncompressed .npz archive. Key "__config__" holds the
# ModelConfig as a JSON string; the optional "__meta__" key holds a small JSON
# dict of training facts (e.g. the component count the weights were fit on);
# every other key is one parameter array stored as float64 ('<f8',
# little-endian) with its name and shape in the .npy headers. Loading restores
# both config and arrays bit-exactly.


def save_checkpoint(path, params: ModelParams, config: ModelConfig,
                    meta: dict | None = None):
    extra = {"__config__": np.array(json.dumps(asdict(config)))}
    if meta:
        extra["__meta__"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **extra, **params.arrays)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    with np.load(path, allow_pickle=False) as z:
        config = ModelConfig(**json.loads(str(z["__config__"][()])))
        arrays = {k: z[k] for k in z.files if not k.startswith("__")}
    params = ModelParams(arrays)
    params.validate(config)
    return params, config


def checkpoint_meta(path) -> dict:
    """Read the training-facts dict stored in a checkpoint ({} if absent)."""
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" in z.files:
            return json.loads(str(z["__meta__"][()]))
    return {}


# ---------------------------------------------------------------------------
# graph builders (shared by inference and training)
# ---------------------------------------------------------------------------


def _cell_graph(x: Node, h: Node, c: Node, pn: dict[str, Node], dr: str) -> tuple[Node, Node]:
    """One LSTM step composed from elementary ops (reference path).

    Training uses the fused ``_lstm_step`` below, which computes identical
    math; this composition stays as the independently checkable definition.
    """

    def gate(g):
        pre = adcore.add(
            adcore.add(adcore.matmul(x, pn[f"lstm_{dr}_W{g}"]),
                       adcore.matmul(h, pn[f"lstm_{dr}_U{g}"])),
            pn[f"lstm_{dr}_b{g}"],
        )
        return pre

    i = adcore.sigmoid(gate("i"))
    f = adcore.sigmoid(gate("f"))
    g = adcore.tanh(gate("g"))
    o = adcore.sigmoid(gate("o"))
    c2 = adcore.add(adcore.mul(f, c), adcore.mul(i, g))
    h2 = adcore.mul(o, adcore.tanh(c2))
    return h2, c2


class _FusedDirection:
    """Per-direction gate parameters concatenated for one batch.

    The four gates' weights are viewed side by side so each step costs one
    R x h by h x 4h product instead of four; gradients are sliced back onto
    the original per-gate parameter nodes. Concatenation order is i, f, o, g
    so the three sigmoid gates form one contiguous block.
    """

    ORDER = ("i", "f", "o", "g")

    def __init__(self, pn: dict[str, Node], dr: str):
        self.nodes = {k: [pn[f"lstm_{dr}_{k}{g}"] for g in self.ORDER] for k in ("W", "U", "b")}
        self.W = np.concatenate([n.value for n in self.nodes["W"]], axis=1)  # (1, 4h)
        self.U = np.concatenate([n.value for n in self.nodes["U"]], axis=1)  # (h, 4h)
        self.b = np.concatenate([n.value for n in self.nodes["b"]], axis=1)  # (1, 4h)
        self.h = self.U.shape[0]

    def scatter(self, dW, dU, db):
        h = self.h
        for gi in range(4):
            sl = slice(gi * h, (gi + 1) * h)
            adcore._acc(self.nodes["W"][gi], dW[:, sl])
            adcore._acc(self.nodes["U"][gi], dU[:, sl])
            adcore._acc(self.nodes["b"][gi], db[:, sl])


def _lstm_step(xv: np.ndarray, h: Node, c: Node, fd: _FusedDirection) -> tuple[Node, Node]:
    """Fused LSTM step: two tape nodes per step instead of ~25.

    Identical math to ``_cell_graph``; the backward rule is written out by
    hand (mostly in-place on slices of one preactivation-shaped buffer) so a
    full sequence stays within the training time budget. The cell node is
    recorded before the state node, so the reversed sweep runs the state's
    closure first and the cell sees its complete gradient.
    """
    nh = fd.h
    hv, cv = h.value, c.value
    pre = xv * fd.W
    pre += fd.b
    pre += hv @ fd.U
    act = np.empty_like(pre)
    expit(pre[:, : 3 * nh], out=act[:, : 3 * nh])
    np.tanh(pre[:, 3 * nh:], out=act[:, 3 * nh:])
    i, f = act[:, :nh], act[:, nh: 2 * nh]
    o, g = act[:, 2 * nh: 3 * nh], act[:, 3 * nh:]
    c2v = f * cv
    c2v += i * g
    tc2 = np.tanh(c2v)
    c2 = Node(c2v)
    h2 = Node(o * tc2)
    if not adcore._recording():
        return h2, c2
    cache: dict[str, np.ndarray] = {}

    def bk_h(gh):
        cache["gh"] = gh
        dc = 1.0 - tc2 * tc2
        dc *= o
        dc *= gh
        adcore._acc(c2, dc)

    def bk_c(gc):
        dpre = np.empty_like(pre)
        di, df = dpre[:, :nh], dpre[:, nh: 2 * nh]
        do, dg = dpre[:, 2 * nh: 3 * nh], dpre[:, 3 * nh:]
        np.subtract(1.0, i, out=di)
        di *= i
        di *= g
        di *= gc
        np.subtract(1.0, f, out=df)
        df *= f
        df *= cv
        df *= gc
        np.multiply(g, g, out=dg)
        np.subtract(1.0, dg, out=dg)
        dg *= i
        dg *= gc
        gh = cache.pop("gh", None)
        if gh is None:
            do[:] = 0.0
        else:
            np.subtract(1.0, o, out=do)
            do *= o
            do *= tc2
            do *= gh
        fd.scatter(xv.T @ dpre, hv.T @ dpre, dpre.sum(axis=0, keepdims=True))
        if not h.const:
            adcore._acc(h, dpre @ fd.U.T)
        if not c.const:
            adcore._acc(c, gc * f)

    adcore._record(c2, bk_c)
    adcore._record(h2, bk_h)
    return h2, c2


def _encode_graph(Xrows: np.ndarray, pn: dict[str, Node], hidden: int) -> Node:
    """Run both LSTM directions over (R, T) rows of scalar series and return
    the per-row hidden-state sum over time scaled by 1/sqrt(T), (R, 2h).

    The 1/sqrt(T) factor keeps the embedding magnitude roughly independent of
    the series length: a raw sum grows like T and drives the attention softmax
    and every downstream tanh into saturation, while a plain mean shrinks like
    1/sqrt(T) and starves the stacked pooling gates of signal.
    """
    R, T = Xrows.shape
    if T < 1:
        raise ValueError("cannot encode an empty sequence")
    cols = np.ascontiguousarray(Xrows.T)  # row t is the step-t column, contiguous
    sums = []
    for dr, steps in (("fw", range(T)), ("bw", range(T - 1, -1, -1))):
        fd = _FusedDirection(pn, dr)
        h = constant(np.zeros((R, hidden)))
        c = constant(np.zeros((R, hidden)))
        acc = None
        for t in steps:
            h, c = _lstm_step(cols[t].reshape(R, 1), h, c, fd)
            acc = h if acc is None else adcore.add(acc, h)
        sums.append(adcore.scale(acc, 1.0 / math.sqrt(T)))
    # scaling commutes with concat: concat of scaled sums == scaled sum of concats
    return adcore.concat_cols(sums[0], sums[1])


def _attention_graph(Y: Node, pn: dict[str, Node]) -> tuple[Node, Node]:
    Q = adcore.matmul(Y, pn["att_WQ"])
    K = adcore.matmul(Y, pn["att_WK"])
    V = adcore.matmul(Y, pn["att_WV"])
    d = Q.value.shape[1]
    A = adcore.rowsoftmax(adcore.scale(adcore.matmul(Q, adcore.transpose(K)), 1.0 / math.sqrt(d)))
    Z = adcore.matmul(A, V)
    return Z, A


def _pool_once(Z: Node, p: Node, k: int) -> tuple[Node, np.ndarray, np.ndarray]:
    """Keep the k highest-scoring rows of Z, gated by tanh of their scores.

    Scores are Z @ p / ||p||; ties break toward the lower row index. Returns
    (pooled node in descending-score order, kept local indices, all scores).
    """
    n, d = Z.value.shape
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} out of range for {n} rows")
    norm = adcore.sqrt(adcore.sum_all(adcore.mul(p, p)))
    if float(norm.value[0, 0]) == 0.0:
        raise DegenerateScorerError("pooling score vector is zero")
    s = adcore.div_by_scalar(adcore.matmul(Z, p), norm)
    svals = s.value[:, 0].copy()
    order = np.argsort(-svals, kind="stable")  # stable: ties keep lower index first
    sel = order[:k]
    gate = adcore.tanh(adcore.gather_rows(s, sel))
    gate_full = adcore.matmul(gate, constant(np.ones((1, d))))
    Zk = adcore.mul(adcore.gather_rows(Z, sel), gate_full)
    return Zk, sel, svals


def pool_schedule(m: int, config: ModelConfig) -> list[int]:
    """Kept-row counts per pooling layer: k = max(1, floor(keep * n)).

    Raises if the floor would reach zero, i.e. the component count is too
    small for the configured depth.
    """
    ks = []
    n = m
    for layer in range(config.pool_layers):
        k = max(1, math.floor(config.pool_keep * n))
        if config.pool_keep < 1.0 and math.floor(config.pool_keep * n) < 1:
            raise ConfigError(
                f"component count too small: layer {layer + 1} would keep "
                f"floor({config.pool_keep} * {n}) = 0 rows"
            )
        ks.append(k)
        n = k
    return ks


@dataclass
class ForwardTrace:
    """Inference record for one subject.

    ``kept`` holds original component ids per pooling layer (descending score
    order); ``scores[l]`` aligns with the rows fed into layer l, i.e. with
    ``kept[l-1]`` (or with 0..m-1 for l = 0).
    """

    logits: np.ndarray
    attention: np.ndarray
    kept: list[list[int]]
    scores: list[np.ndarray]


@dataclass
class _SubjectOut:
    logits: Node
    attention: Node
    kept: list[list[int]]
    scores: list[np.ndarray]
    loss: Node | None

    def trace(self) -> ForwardTrace:
        return ForwardTrace(
            logits=self.logits.value[0].copy(),
            attention=self.attention.value.copy(),
            kept=self.kept,
            scores=self.scores,
        )


def _subject_graph(Y: Node, pn: dict[str, Node], config: ModelConfig,
                   label: int | None) -> _SubjectOut:
    m = Y.value.shape[0]
    ks = pool_schedule(m, config)
    Z, A = _attention_graph(Y, pn)
    ids = np.arange(m)
    kept_lists: list[list[int]] = []
    score_list: list[np.ndarray] = []
    readout = None
    for layer, k in enumerate(ks, start=1):
        Z, sel, svals = _pool_once(Z, pn[f"pool_p{layer}"], k)
        ids = ids[sel]
        kept_lists.append([int(i) for i in ids])
        score_list.append(svals)
        r = adcore.mean_rows(Z)
        readout = r if readout is None else adcore.add(readout, r)
    hid = adcore.tanh(adcore.add(adcore.matmul(readout, pn["fc_W1"]), pn["fc_b1"]))
    logits = adcore.add(adcore.matmul(hid, pn["fc_W2"]), pn["fc_b2"])
    loss = adcore.softmax_xent(logits, label) if label is not None else None
    return _SubjectOut(logits, A, kept_lists, score_list, loss)


@dataclass
class BatchResult:
    loss: Node | None           # mean cross-entropy over the batch
    subjects: list[_SubjectOut]
    param_nodes: dict[str, Node]

    def traces(self) -> list[ForwardTrace]:
        return [s.trace() for s in self.subjects]


def build_batch(Xs: Sequence[np.ndarray], params: ModelParams | dict[str, Node],
                config: ModelConfig, labels: Sequence[int] | None = None) -> BatchResult:
    """Build the full graph for a batch of subjects.

    All subjects run through the shared encoder as one stacked row block, then
    attention, pooling and the classifier run per subject. Recording only
    happens inside an active Tape; otherwise this is a plain forward pass.
    """
    if len(Xs) == 0:
        raise ValueError("empty batch")
    m, T = Xs[0].shape
    for X in Xs:
        if X.shape != (m, T):
            raise ConfigError(f"inconsistent subject shapes: {X.shape} vs {(m, T)}")
    if labels is not None and len(labels) != len(Xs):
        raise ValueError("labels length does not match batch")
    pool_schedule(m, config)  # fail fast before any work
    pn = params if isinstance(params, dict) else _param_nodes(params)

    stacked = np.concatenate(Xs, axis=0) if len(Xs) > 1 else np.asarray(Xs[0], dtype=np.float64)
    Y = _encode_graph(stacked, pn, config.hidden)
    subjects = []
    loss_sum = None
    for idx in range(len(Xs)):
        Ys = adcore.gather_rows(Y, range(idx * m, (idx + 1) * m)) if len(Xs) > 1 else Y
        label = None if labels is None else int(labels[idx])
        out = _subject_graph(Ys, pn, config, label)
        subjects.append(out)
        if out.loss is not None:
            loss_sum = out.loss if loss_sum is None else adcore.add(loss_sum, out.loss)
    loss = adcore.scale(loss_sum, 1.0 / len(Xs)) if loss_sum is not None else None
    return BatchResult(loss, subjects, pn)


# ---------------------------------------------------------------------------
# array-level API
# ---------------------------------------------------------------------------


def forward(X: np.ndarray, params: ModelParams, config: ModelConfig) -> ForwardTrace:
    """Classify one subject (m x T) and return logits, attention and the
    pooling selection trace."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ConfigError(f"subject matrix must be 2-D with >= 1 component, got {X.shape}")
    return build_batch([X], params, config).subjects[0].trace()


def lstm_cell(x_t: float, h_prev: np.ndarray, c_prev: np.ndarray,
              params: ModelParams, direction: str = "fw") -> tuple[np.ndarray, np.ndarray]:
    """One step of the configured LSTM direction on plain arrays."""
    if direction not in _DIRECTIONS:
        raise ValueError(f"direction must be one of {_DIRECTIONS}")
    h_prev = np.asarray(h_prev, dtype=np.float64).reshape(1, -1)
    c_prev = np.asarray(c_prev, dtype=np.float64).reshape(1, -1)
    fd = _FusedDirection(_param_nodes(params), direction)
    h, c = _lstm_step(np.array([[float(x_t)]]), constant(h_prev), constant(c_prev), fd)
    return h.value[0].copy(), c.value[0].copy()


def encode_component(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Encode one component series into its length-normalized biLSTM state
    sum (scaled by 1/sqrt(T)), shape (2h,)."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return encode_all(x, params)[0]


def encode_all(X: np.ndarray, params: ModelParams) -> np.ndarray:
    """Encode every component row of X (m x T) with the shared biLSTM."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError(f"expected an (m, T) matrix with m >= 1, got shape {X.shape}")
    hidden = params.arrays["lstm_fw_Ui"].shape[0]
    return _encode_graph(X, _param_nodes(params), hidden).value.copy()


def self_attention(Y: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product self-attention over component rows.

    Returns (Z, A) where A is the row-stochastic attention matrix and
    Z = A @ (Y W_V).
    """
    Y = np.asarray(Y, dtype=np.float64)
    pn = _param_nodes(params)
    Z, A = _attention_graph(Node(Y), pn)
    return Z.value.copy(), A.value.copy()


def topk_pool(Z: np.ndarray, p: np.ndarray, k: int) -> tuple[np.ndarray, list[int], np.ndarray]:
    """Array-level top-k pooling: returns (pooled rows, kept indices, scores)."""
    Z = np.asarray(Z, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64).reshape(-1, 1)
    if p.shape[0] != Z.shape[1]:
        raise ConfigError(f"score vector length {p.shape[0]} != row width {Z.shape[1]}")
    Zk, sel, svals = _pool_once(Node(Z), Node(p), int(k))
    return Zk.value.copy(), [int(i) for i in sel], svals


# ---------------------------------------------------------------------------
# whole-model gradient check
# ---------------------------------------------------------------------------


def model_gradcheck(config: ModelConfig | None = None, m: int = 3, T: int = 8,
                    n_points: int = 10, h_step: float = 1e-5, seed: int = 0,
                    min_gap: float = 1e-3) -> float:
    """End-to-end finite-difference check of the classification loss.

    Draws seeded parameter points, skipping any whose pooling scores come
    within ``min_gap`` of a selection boundary (top-k selection is piecewise
    constant, so the check is only valid away from boundaries). Returns the
    worst relative error over all points and parameter arrays.
    """
    if config is None:
        config = ModelConfig(hidden=4, attn_dim=4, pool_layers=2, fc_hidden=4)
    rng = np.random.default_rng(seed)
    ks = pool_schedule(m, config)
    worst = 0.0
    accepted = 0
    attempts = 0
    while accepted < n_points:
        attempts += 1
        if attempts > 50 * n_points:
            raise RuntimeError("could not find enough tie-free parameter points")
        params = init_params(config, rng)
        X = rng.standard_normal((m, T))
        label = accepted % config.classes
        trace = forward(X, params, config)
        if _boundary_gap(trace, ks) < min_gap:
            continue
        accepted += 1
        for name in params.arrays:
            def f(theta, _name=name):
                pn = {
                    nm: (theta if nm == _name else constant(arr))
                    for nm, arr in params.arrays.items()
                }
                return build_batch([X], pn, config, labels=[label]).loss

            worst = max(worst, adcore.gradcheck(f, params.arrays[name], h=h_step))
    return worst


def _boundary_gap(trace: ForwardTrace, ks: list[int]) -> float:
    """Smallest score margin at any top-k selection boundary in the trace."""
    gap = math.inf
    for svals, k in zip(trace.scores, ks):
        if k < len(svals):
            ordered = np.sort(svals)[::-1]
            gap = min(gap, float(ordered[k - 1] - ordered[k]))
    return gap
