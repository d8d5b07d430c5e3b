"""Multi-head linear-attention transformer and its explicit ICL constructions.

Each layer maps ``H -> W1 (H + Concat_i[V_i M K_i^T Q_i])`` with
``V_i = W_V_i H`` (likewise K, Q) and ``M = diag(1,...,1,0,...,0)`` keeping the
first ``n`` columns. Head ``i`` owns rows ``i*d_hid/h ... (i+1)*d_hid/h - 1``
of the concatenation; a masked head contributes zeros there.

Index conventions below are 0-based: for feature ``j`` the embedding uses the
row triple ``(3j, 3j+1, 3j+2)`` to hold ``(x_j, y, 0)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import ContractViolation, as_matrix, frozen
from .tasks import PromptMatrix, build_prompt


@dataclass(frozen=True)
class AttentionHead:
    w_v: np.ndarray
    w_k: np.ndarray
    w_q: np.ndarray

    def __post_init__(self):
        shapes = set()
        for name in ("w_v", "w_k", "w_q"):
            m = as_matrix(getattr(self, name), name)
            shapes.add(m.shape)
            object.__setattr__(self, name, frozen(m))
        if len(shapes) != 1:
            raise ContractViolation(f"head weight shapes disagree: {sorted(shapes)}")

    @property
    def shape(self):
        return self.w_v.shape


@dataclass(frozen=True)
class AttentionLayer:
    heads: tuple
    w_1: np.ndarray
    head_mask: tuple = None

    def __post_init__(self):
        heads = tuple(self.heads)
        if not heads:
            raise ContractViolation("a layer needs at least one head")
        w_1 = frozen(as_matrix(self.w_1, "w_1"))
        d_hid = w_1.shape[0]
        if w_1.shape != (d_hid, d_hid):
            raise ContractViolation(f"w_1 must be square, got {w_1.shape}")
        h = len(heads)
        if d_hid % h:
            raise ContractViolation(f"d_hid={d_hid} not divisible by {h} heads")
        for i, head in enumerate(heads):
            if head.shape != (d_hid // h, d_hid):
                raise ContractViolation(f"head {i} has shape {head.shape}, expected {(d_hid // h, d_hid)}")
        mask = (False,) * h if self.head_mask is None else tuple(bool(b) for b in self.head_mask)
        if len(mask) != h:
            raise ContractViolation(f"head mask has {len(mask)} flags for {h} heads")
        object.__setattr__(self, "heads", heads)
        object.__setattr__(self, "w_1", w_1)
        object.__setattr__(self, "head_mask", mask)

    @property
    def d_hid(self):
        return self.w_1.shape[0]

    @property
    def n_heads(self):
        return len(self.heads)

    def attention(self, h, n):
        """Concatenated head outputs for hidden state ``h`` with mask width ``n``."""
        rows = self.d_hid // self.n_heads
        out = np.zeros_like(h)
        for i, (head, masked) in enumerate(zip(self.heads, self.head_mask)):
            if masked:
                continue
            v = head.w_v @ h[:, :n]
            k = head.w_k @ h[:, :n]
            q = head.w_q @ h
            out[i * rows:(i + 1) * rows] = v @ (k.T @ q)
        return out

    def __call__(self, h, n):
        return self.w_1 @ (h + self.attention(h, n))


@dataclass(frozen=True)
class ForwardTrace:
    hidden: tuple  # H^0 = W_E E, H^1, ..., H^L
    y_hat: np.ndarray


@dataclass(frozen=True)
class AttentionModel:
    w_e: np.ndarray
    layers: tuple
    w_o: np.ndarray
    n: int

    def __post_init__(self):
        w_e = frozen(as_matrix(self.w_e, "w_e"))
        w_o = frozen(as_matrix(self.w_o, "w_o"))
        d_hid = w_e.shape[0]
        layers = tuple(self.layers)
        for i, layer in enumerate(layers):
            if layer.d_hid != d_hid:
                raise ContractViolation(f"layer {i} has d_hid={layer.d_hid}, embedding gives {d_hid}")
        if w_o.shape != (1, d_hid):
            raise ContractViolation(f"w_o must be 1 x {d_hid}, got {w_o.shape}")
        if int(self.n) < 0:
            raise ContractViolation(f"mask width must be >= 0, got {self.n}")
        object.__setattr__(self, "w_e", w_e)
        object.__setattr__(self, "w_o", w_o)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "n", int(self.n))

    @property
    def d(self):
        return self.w_e.shape[1] - 1

    @property
    def d_hid(self):
        return self.w_e.shape[0]

    def predict(self, data):
        """Predictions at the query columns of an :class:`InContextDataset`."""
        return forward(self, build_prompt(data)).y_hat[data.n:]


def forward(model, prompt):
    """Run the model on a :class:`PromptMatrix` (or a raw (d+1) x N array)."""
    if isinstance(prompt, PromptMatrix):
        if prompt.n != model.n:
            raise ContractViolation(f"prompt has n={prompt.n} examples, model mask width is {model.n}")
        e = prompt.entries
    else:
        e = as_matrix(prompt, "prompt")
    if e.shape[0] != model.d + 1:
        raise ContractViolation(f"prompt has {e.shape[0]} rows, model expects d+1={model.d + 1}")
    h = model.w_e @ e
    hidden = [frozen(h)]
    for i, layer in enumerate(model.layers):
        if h.shape[0] != layer.d_hid:
            raise ContractViolation(f"layer {i}: input has {h.shape[0]} rows, expected {layer.d_hid}")
        h = layer(h, model.n)
        hidden.append(frozen(h))
    return ForwardTrace(tuple(hidden), frozen((model.w_o @ h)[0]))


def construct_embedding(d):
    """W_E placing ``(x_j, y, 0)`` in rows ``3j, 3j+1, 3j+2``."""
    w_e = np.zeros((3 * d, d + 1))
    for j in range(d):
        w_e[3 * j, j] = 1.0
        w_e[3 * j + 1, d] = 1.0
    return w_e


def construct_preprocess_layer(d, n):
    """d-head layer writing ``r_hat_j x_j`` into row ``3j+2``, then W1 gathers.

    Head j: K reads ``y/n`` from row ``3j+1``, Q and V read ``x_j`` from row
    ``3j``, each into the last row of the head's 3-row slice. W1 moves the
    reweighted features to rows 0..d-1 and a label copy to row d; all other
    rows are zero.
    """
    if d < 1 or n < 1:
        raise ContractViolation(f"need d >= 1 and n >= 1, got d={d}, n={n}")
    d_hid = 3 * d
    heads = []
    for j in range(d):
        w_k = np.zeros((3, d_hid))
        w_k[2, 3 * j + 1] = 1.0 / n
        w_vq = np.zeros((3, d_hid))
        w_vq[2, 3 * j] = 1.0
        heads.append(AttentionHead(w_vq, w_k, w_vq))
    w_1 = np.zeros((d_hid, d_hid))
    for j in range(d):
        w_1[j, 3 * j + 2] = 1.0
    w_1[d, 1] = 1.0
    return AttentionLayer(tuple(heads), w_1)


def construct_gd_layer(d, n, eta):
    """Single-head layer performing one GD step on rows (0..d-1 features, d label).

    W_V = -(eta/n) e_d e_d^T, W_K = W_Q = diag(1_d, 0), W1 = I. Row ``d`` of a
    query column accumulates ``-<w, x_tilde>``; example columns hold residuals.
    """
    if d < 1 or n < 1:
        raise ContractViolation(f"need d >= 1 and n >= 1, got d={d}, n={n}")
    d_hid = 3 * d
    w_v = np.zeros((d_hid, d_hid))
    w_v[d, d] = -eta / n
    w_kq = np.zeros((d_hid, d_hid))
    w_kq[:d, :d] = np.eye(d)
    return AttentionLayer((AttentionHead(w_v, w_kq, w_kq),), np.eye(d_hid))


def readout(d):
    """W_O reading row d with a sign flip, so the output is ``+<w, x_tilde>``."""
    w_o = np.zeros((1, 3 * d))
    w_o[0, d] = -1.0
    return w_o


def assemble_icl_model(d, n, eta, k):
    """Preprocessing layer followed by ``k`` GD layers."""
    if int(k) < 0:
        raise ContractViolation(f"k must be >= 0, got {k}")
    layers = [construct_preprocess_layer(d, n)]
    layers += [construct_gd_layer(d, n, eta) for _ in range(int(k))]
    return AttentionModel(construct_embedding(d), tuple(layers), readout(d), n)


def _set_mask(model, layer_index, head_index, value):
    if not 0 <= layer_index < len(model.layers):
        raise IndexError(f"layer index {layer_index} out of range for {len(model.layers)} layers")
    layer = model.layers[layer_index]
    if not 0 <= head_index < layer.n_heads:
        raise IndexError(f"head index {head_index} out of range for layer {layer_index} with {layer.n_heads} heads")
    mask = list(layer.head_mask)
    mask[head_index] = value
    layers = list(model.layers)
    layers[layer_index] = replace(layer, head_mask=tuple(mask))
    return replace(model, layers=tuple(layers))


def mask_head(model, layer_index, head_index):
    """Copy of ``model`` with head ``(layer_index, head_index)`` zeroed at forward time."""
    return _set_mask(model, layer_index, head_index, True)


def unmask_head(model, layer_index, head_index):
    return _set_mask(model, layer_index, head_index, False)


@dataclass(frozen=True)
class HeadImportance:
    raw_deltas: tuple  # one array per layer, length = heads in that layer
    normalized: tuple
    flagged: tuple = field(default=())

    def as_rows(self):
        for i, (raw, norm, flag) in enumerate(zip(self.raw_deltas, self.normalized, self.flagged)):
            yield i, raw, norm, flag


def _query_sq_error(model, data):
    pred = model.predict(data)
    return float(np.mean((pred - data.query_y_true) ** 2))


def head_importance(model, eval_instances, mode="icl_risk"):
    """Risk increase from masking each head, normalized within each layer.

    The risk of an instance is the squared prediction error averaged over its
    query columns. Rows whose deltas sum to zero or less are left
    unnormalized and flagged.
    """
    if mode != "icl_risk":
        raise ContractViolation(f"unknown importance mode {mode!r}")
    instances = list(eval_instances)
    if not instances:
        raise ContractViolation("need at least one evaluation instance")
    if not model.layers:
        raise ContractViolation("model has no attention layers")
    base = np.array([_query_sq_error(model, data) for _, data in instances])
    raw, norm, flags = [], [], []
    for i, layer in enumerate(model.layers):
        deltas = np.empty(layer.n_heads)
        for j in range(layer.n_heads):
            masked = mask_head(model, i, j)
            errs = np.array([_query_sq_error(masked, data) for _, data in instances])
            deltas[j] = np.mean(errs - base)
        total = deltas.sum()
        flagged = not total > 0
        raw.append(frozen(deltas))
        norm.append(frozen(deltas if flagged else deltas / total))
        flags.append(flagged)
    return HeadImportance(tuple(raw), tuple(norm), tuple(flags))


def extract_preprocessed(trace, d, n, q):
    """Rows 0..d-1 of the query columns of H^1, one vector per query."""
    if len(trace.hidden) < 2:
        raise ContractViolation("trace needs at least one layer after the embedding")
    h1 = trace.hidden[1]
    if h1.shape[0] < d or h1.shape[1] != n + q:
        raise ContractViolation(f"H^1 has shape {h1.shape}, incompatible with d={d}, n={n}, q={q}")
    return [h1[:d, n + j].copy() for j in range(q)]


def model_to_dict(model):
    """JSON-ready description with explicit shapes; masks included."""

    def mat(m):
        return {"shape": list(m.shape), "data": m.ravel().tolist()}

    return {
        "n": model.n,
        "d": model.d,
        "d_hid": model.d_hid,
        "w_e": mat(model.w_e),
        "w_o": mat(model.w_o),
        "layers": [
            {
                "w_1": mat(layer.w_1),
                "head_mask": list(layer.head_mask),
                "heads": [{"w_v": mat(h.w_v), "w_k": mat(h.w_k), "w_q": mat(h.w_q)} for h in layer.heads],
            }
            for layer in model.layers
        ],
    }


def model_from_dict(obj):
    def mat(m):
        return np.asarray(m["data"], dtype=np.float64).reshape(m["shape"])

    layers = tuple(
        AttentionLayer(
            tuple(AttentionHead(mat(h["w_v"]), mat(h["w_k"]), mat(h["w_q"])) for h in layer["heads"]),
            mat(layer["w_1"]),
            tuple(layer["head_mask"]),
        )
        for layer in obj["layers"]
    )
    return AttentionModel(mat(obj["w_e"]), layers, mat(obj["w_o"]), obj["n"])
