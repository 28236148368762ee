"""AU graph head: node extraction, similarity graph, gated refinement.

Stage one learns per-AU node features over a top-K cosine-similarity
graph and predicts activations by anchor similarity. Stage two adds
cross-attention edge features over all ordered AU pairs, refines nodes
and edges with gated graph layers, and supervises edges with a 4-class
co-occurrence head.

All forward functions accept a leading batch axis; losses average over
it. Ground-truth labels and class weights enter as plain numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import Affine, affine, make_affine
from .tensor import BatchNormState, Tensor

PROB_EPS = 1e-6


@dataclass
class AUGraph:
    """Node features V (N, C), adjacency A (N, N), edge features E (N, N, C)."""

    v: Tensor
    a: np.ndarray
    e: Tensor | None = None


@dataclass
class ClassWeights:
    """Inverse-occurrence AU weights, normalized to sum to the AU count."""

    w: np.ndarray
    rates: np.ndarray


@dataclass
class CrossAttentionParams:
    query: Affine
    key: Affine
    value: Affine


@dataclass
class GatedLayerParams:
    edge_src: Affine
    edge_dst: Affine
    edge_self: Affine
    edge_bn: BatchNormState
    node_self: Affine
    node_neighbor: Affine
    node_bn: BatchNormState


@dataclass
class AUHeadParams:
    au_w: Tensor  # (N, C_in, C) per-AU extraction transforms
    au_b: Tensor  # (N, C)
    anchors: Tensor  # (N, C) trainable activation prototypes
    gcn_neighbor: Affine
    gcn_self: Affine
    gcn_bn: BatchNormState
    attn_face: CrossAttentionParams
    attn_pair: CrossAttentionParams
    gated: list[GatedLayerParams]
    edge_head: Affine  # C -> 4 co-occurrence classes


def init_head(n_au: int, c_in: int, c: int, gated_depth: int, seed: int, dtype=np.float64) -> AUHeadParams:
    rng = np.random.Generator(np.random.PCG64(seed))
    limit = np.sqrt(6.0 / (c_in + c))
    au_w = Tensor(rng.uniform(-limit, limit, size=(n_au, c_in, c)).astype(dtype), requires_grad=True)
    au_b = Tensor(np.zeros((n_au, c), dtype=dtype), requires_grad=True)
    anchors = Tensor(rng.uniform(0.1, 1.0, size=(n_au, c)).astype(dtype), requires_grad=True)

    def attn():
        return CrossAttentionParams(
            query=make_affine(rng, c, c, dtype),
            key=make_affine(rng, c, c, dtype),
            value=make_affine(rng, c, c, dtype),
        )

    gated = [
        GatedLayerParams(
            edge_src=make_affine(rng, c, c, dtype),
            edge_dst=make_affine(rng, c, c, dtype),
            edge_self=make_affine(rng, c, c, dtype),
            edge_bn=BatchNormState.create(c, dtype),
            node_self=make_affine(rng, c, c, dtype),
            node_neighbor=make_affine(rng, c, c, dtype),
            node_bn=BatchNormState.create(c, dtype),
        )
        for _ in range(gated_depth)
    ]
    return AUHeadParams(
        au_w=au_w,
        au_b=au_b,
        anchors=anchors,
        gcn_neighbor=make_affine(rng, c, c, dtype),
        gcn_self=make_affine(rng, c, c, dtype),
        gcn_bn=BatchNormState.create(c, dtype),
        attn_face=attn(),
        attn_pair=attn(),
        gated=gated,
        edge_head=make_affine(rng, c, 4, dtype),
    )


# ---------------------------------------------------------------------------
# node path
# ---------------------------------------------------------------------------

def extract_au_nodes(feature_map, head: AUHeadParams):
    """Per-AU transforms of the face feature map plus pooled node features.

    feature_map: (B, H, W, C_in) or (H, W, C_in).
    Returns (V, au_maps) with V (B, N, C) and au_maps (B, N, H, W, C).
    """
    single = feature_map.ndim == 3
    if single:
        feature_map = feature_map.reshape((1,) + feature_map.shape)
    b, h, w, c_in = feature_map.shape
    n, _, c = head.au_w.shape
    flat = feature_map.reshape((b, 1, h * w, c_in))
    maps = flat @ head.au_w + head.au_b.reshape((n, 1, c))  # (B, N, HW, C)
    v = maps.mean(axis=2)
    maps = maps.reshape((b, n, h, w, c))
    if single:
        return v.reshape((n, c)), maps.reshape((n, h, w, c))
    return v, maps


def build_adjacency(v, k: int) -> np.ndarray:
    """Directed top-K cosine-similarity adjacency; no self loops.

    Row i carries ones exactly at the K most similar other nodes; ties
    break toward the lower index. Values only - never differentiated.
    """
    vd = v.data if isinstance(v, Tensor) else np.asarray(v)
    single = vd.ndim == 2
    if single:
        vd = vd[None]
    b, n, _ = vd.shape
    if not (1 <= k <= n - 1):
        raise ValueError(f"top-K out-degree must lie in [1, {n - 1}], got {k}")
    norms = np.linalg.norm(vd, axis=-1)
    unit = vd / np.maximum(norms, 1e-12)[..., None]  # zero vectors stay zero
    sim = unit @ unit.swapaxes(-1, -2)
    idx = np.arange(n)
    sim[:, idx, idx] = -np.inf
    order = np.argsort(-sim, axis=-1, kind="stable")
    a = np.zeros((b, n, n), dtype=vd.dtype)
    np.put_along_axis(a, order[..., :k], 1.0, axis=-1)
    return a[0] if single else a


def gcn_update(v, a: np.ndarray, head: AUHeadParams, mode: str = "train"):
    """One graph-convolution step over the similarity graph.

    v_new = relu(v + BN(A @ n(v) + s(v))) with affine maps n, s.
    """
    single = v.ndim == 2
    if single:
        v = v.reshape((1,) + v.shape)
        a = a[None] if a.ndim == 2 else a
    msg = Tensor(np.asarray(a, dtype=v.dtype)) @ affine(v, head.gcn_neighbor) + affine(v, head.gcn_self)
    out = T.relu(v + T.batch_norm(msg, head.gcn_bn, mode))
    return out.reshape(out.shape[1:]) if single else out


def predict_au(v_new, anchors: Tensor):
    """Activation probability per AU: cosine of rectified anchor and node.

    Outputs lie in [0, 1]; an all-zero rectified pair gives exactly 0.
    """
    a = T.relu(anchors)  # (N, C)
    b = T.relu(v_new)  # (..., N, C)
    num = (a * b).sum(axis=-1)
    na = T.sqrt((a * a).sum(axis=-1))
    nb = T.sqrt((b * b).sum(axis=-1))
    prod = na * nb
    denom = T.relu(prod - 1e-12) + 1e-12  # max(prod, 1e-12), differentiable where it matters
    return T.clip(num / denom, 0.0, 1.0)


def shift_prob(p, m: float):
    """Subtract margin m and clamp at zero: max(p - m, 0)."""
    if not (0.0 <= m < 1.0):
        raise ValueError(f"margin must lie in [0, 1), got {m}")
    return T.relu(p - m)


def class_weights(rates) -> ClassWeights:
    """w_i proportional to 1/r_i, scaled so the weights sum to N."""
    r = np.asarray(rates, dtype=np.float64)
    if np.any(r <= 0.0) or np.any(r > 1.0):
        raise ValueError("occurrence rates must lie in (0, 1]")
    inv = 1.0 / r
    w = len(r) * inv / inv.sum()
    return ClassWeights(w=w, rates=r)


def au_loss(p, y: np.ndarray, w: np.ndarray, m: float, gamma: float):
    """Weighted asymmetric multi-label loss on shifted probabilities.

    The margin shift applies before clamping to [1e-6, 1 - 1e-6]; the
    focal exponent gamma downweights easy negatives only. Averages over
    AUs and any leading batch axis.
    """
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    y = y.astype(p.dtype)
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    pm = T.clip(shift_prob(p, m), PROB_EPS, 1.0 - PROB_EPS)
    pos = Tensor(y) * T.log(pm)
    neg = Tensor(1.0 - y) * (pm**gamma) * T.log(1.0 - pm)
    per_au = (pos + neg) * Tensor(np.broadcast_to(w, y.shape).astype(p.dtype))
    return -per_au.mean(axis=-1).mean()


# ---------------------------------------------------------------------------
# edge path
# ---------------------------------------------------------------------------

def cross_attention(queries, keys_values, p: CrossAttentionParams):
    """softmax(Q Wq (K Wk)^T / sqrt(d_k)) K Wv over the last two axes."""
    q = affine(queries, p.query)
    k = affine(keys_values, p.key)
    v = affine(keys_values, p.value)
    dk = k.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dk))
    return T.softmax(scores, axis=-1) @ v


def extract_edge_features(au_maps, face_map, head: AUHeadParams):
    """Edge features for every ordered AU pair, diagonal included.

    Each AU map first attends over the full face map, then each pair of
    the resulting summaries attends over one another; spatial averaging
    yields one C-vector per ordered pair.

    au_maps: (B, N, H, W, C); face_map: (B, H, W, C). Returns (B, N, N, C).
    """
    single = face_map.ndim == 3
    if single:
        au_maps = au_maps.reshape((1,) + au_maps.shape)
        face_map = face_map.reshape((1,) + face_map.shape)
    b, n, h, w, c = au_maps.shape
    hw = h * w
    tokens_au = au_maps.reshape((b, n, hw, c))
    tokens_face = face_map.reshape((b, 1, hw, c))
    per_au = cross_attention(tokens_au, tokens_face, head.attn_face)  # (B, N, HW, C)
    q = per_au.reshape((b, n, 1, hw, c))
    kv = per_au.reshape((b, 1, n, hw, c))
    rel = cross_attention(q, kv, head.attn_pair)  # (B, N, N, HW, C)
    e = rel.mean(axis=3)
    return e.reshape((n, n, c)) if single else e


def gated_gcn_layer(v, e, layer: GatedLayerParams, mode: str = "train"):
    """Residual gated update of node and edge features on the full graph.

    Edge update : e' = e + relu(BN(src(v_i) + dst(v_j) + self(e)))
    Gates       : eta = sigmoid(e') / (sum_j sigmoid(e') + 1e-6), per channel
    Node update : v' = v + relu(BN(self(v) + sum_j eta * neighbor(v_j)))
    """
    single = v.ndim == 2
    if single:
        v = v.reshape((1,) + v.shape)
        e = e.reshape((1,) + e.shape)
    b, n, c = v.shape
    src = affine(v, layer.edge_src).reshape((b, n, 1, c))
    dst = affine(v, layer.edge_dst).reshape((b, 1, n, c))
    pre = src + dst + affine(e, layer.edge_self)
    e_new = e + T.relu(T.batch_norm(pre, layer.edge_bn, mode))
    sig = T.sigmoid(e_new)
    gates = sig / (sig.sum(axis=2, keepdims=True) + 1e-6)
    neighbor = affine(v, layer.node_neighbor).reshape((b, 1, n, c))
    msg = (gates * neighbor).sum(axis=2)
    v_new = v + T.relu(T.batch_norm(affine(v, layer.node_self) + msg, layer.node_bn, mode))
    if single:
        return v_new.reshape((n, c)), e_new.reshape((n, n, c))
    return v_new, e_new


def edge_logits(e, head_affine: Affine):
    """Classify each ordered pair into one of 4 co-occurrence states."""
    return affine(e, head_affine)


def pair_labels(y: np.ndarray) -> np.ndarray:
    """One-hot (..., N, N, 4) co-occurrence targets; class index 2*y_i + y_j."""
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    cls = (2 * y[..., :, None] + y[..., None, :]).astype(int)
    return np.eye(4)[cls]


def edge_loss(z, y_pair: np.ndarray):
    """Mean categorical cross-entropy over all N^2 ordered pairs."""
    y_pair = np.asarray(y_pair)
    if y_pair.shape != z.shape or not np.all((y_pair == 0) | (y_pair == 1)):
        raise ValueError("edge targets must be one-hot with the logits' shape")
    p = T.clip(T.softmax(z, axis=-1), 1e-30, 1.0)
    cce = -(Tensor(y_pair.astype(z.dtype)) * T.log(p)).sum(axis=-1)
    return cce.mean()


def stage2_loss(l_au, l_edge, lam: float):
    if lam < 0:
        raise ValueError("edge loss weight must be nonnegative")
    return l_au + lam * l_edge
