"""Forward model: item embeddings, layered social diffusion, scoring.

Conventions: parameter matrices are stored row-major, so the per-entity
free vectors are rows of P (num_users, L) and Q (num_items, L); transforms
F (D, L+d2), W0 (D, d1+L) and Wk (D, 2D) multiply concatenated column
vectors as in a dense layer. ReLU everywhere, with the subgradient at 0
fixed to 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

FEATURES = "features"
FEATURELESS = "featureless"
AGG_AVERAGE = "average"
AGG_MAX = "max"


class ModelError(Exception):
    """Invalid model configuration or shape mismatch."""


@dataclass
class HyperParams:
    D: int
    L: int
    K: int = 2
    feature_mode: str = FEATURES
    aggregator: str = AGG_AVERAGE
    use_bias: bool = True
    pin_user_base: bool = False  # the "P=0" ablation: P frozen at zero

    def __post_init__(self):
        if self.feature_mode not in (FEATURES, FEATURELESS):
            raise ModelError(f"unknown feature_mode {self.feature_mode!r}")
        if self.aggregator not in (AGG_AVERAGE, AGG_MAX):
            raise ModelError(f"unknown aggregator {self.aggregator!r}")
        if self.K < 0:
            raise ModelError("diffusion depth K must be >= 0")
        if self.feature_mode == FEATURELESS and self.L != self.D:
            raise ModelError("featureless mode requires L == D")

    @property
    def with_features(self):
        return self.feature_mode == FEATURES


class TensorBundle:
    """Ordered name->array container shared by params, gradients and moments."""

    def __init__(self, arrays):
        self.arrays = dict(arrays)

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        self.arrays[name] = value

    def __contains__(self, name):
        return name in self.arrays

    def names(self):
        return list(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self):
        return TensorBundle({k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self):
        return TensorBundle({k: np.zeros_like(v) for k, v in self.arrays.items()})

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


class ModelParams(TensorBundle):
    """Trainable tensors plus the set of frozen (non-trainable) names."""

    def __init__(self, arrays, frozen=()):
        super().__init__(arrays)
        self.frozen = set(frozen)

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, self.frozen)

    def trainable_names(self):
        return [k for k in self.arrays if k not in self.frozen]

    def num_trainable(self):
        return sum(self.arrays[k].size for k in self.trainable_names())


def layer_weight_name(k):
    return f"Wk{k}"


def layer_bias_name(k):
    return f"bk{k}"


def init_params(hypers, num_users, num_items, user_dim=0, item_dim=0, seed=0):
    """Initialize all tensors for the active mode.

    Free vectors P, Q start uniform in (-0.01, 0.01); transforms use a
    symmetric fan-scaled uniform range; biases start at zero.
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    arrays["P"] = rng.uniform(-0.01, 0.01, size=(num_users, hypers.L))
    arrays["Q"] = rng.uniform(-0.01, 0.01, size=(num_items, hypers.L))

    def glorot(rows, cols):
        lim = math.sqrt(6.0 / (rows + cols))
        return rng.uniform(-lim, lim, size=(rows, cols))

    if hypers.with_features:
        arrays["F"] = glorot(hypers.D, hypers.L + item_dim)
        if hypers.use_bias:
            arrays["bF"] = np.zeros(hypers.D)
        arrays["W0"] = glorot(hypers.D, user_dim + hypers.L)
        if hypers.use_bias:
            arrays["b0"] = np.zeros(hypers.D)
    for k in range(hypers.K):
        arrays[layer_weight_name(k)] = glorot(hypers.D, 2 * hypers.D)
        if hypers.use_bias:
            arrays[layer_bias_name(k)] = np.zeros(hypers.D)

    frozen = set()
    if hypers.pin_user_base:
        arrays["P"] = np.zeros_like(arrays["P"])
        frozen.add("P")
    return ModelParams(arrays, frozen)


def relu(x):
    return np.maximum(x, 0.0)


def _bias(params, name, dim):
    return params[name] if name in params else np.zeros(dim)


# ---------------------------------------------------------------------------
# per-entity operations


def item_embedding(params, hypers, q_i, y_i=None):
    """Item latent vector: ReLU(F [q_i, y_i] + bF), or q_i itself featureless."""
    q_i = np.asarray(q_i, dtype=np.float64)
    if not hypers.with_features:
        if q_i.shape != (hypers.L,):
            raise ModelError(f"q_i shape {q_i.shape} != ({hypers.L},)")
        return q_i
    if y_i is None:
        raise ModelError("feature mode requires item features")
    y_i = np.asarray(y_i, dtype=np.float64)
    z = np.concatenate([q_i, y_i])
    F = params["F"]
    if F.shape[1] != z.shape[0]:
        raise ModelError(f"F expects input dim {F.shape[1]}, got {z.shape[0]}")
    return relu(F @ z + _bias(params, "bF", hypers.D))


def user_base_embedding(params, hypers, x_a=None, p_a=None):
    """Layer-0 user vector: ReLU(W0 [x_a, p_a] + b0), or p_a itself featureless."""
    p_a = np.asarray(p_a, dtype=np.float64)
    if not hypers.with_features:
        if p_a.shape != (hypers.L,):
            raise ModelError(f"p_a shape {p_a.shape} != ({hypers.L},)")
        return p_a
    if x_a is None:
        raise ModelError("feature mode requires user features")
    x_a = np.asarray(x_a, dtype=np.float64)
    z = np.concatenate([x_a, p_a])
    W0 = params["W0"]
    if W0.shape[1] != z.shape[0]:
        raise ModelError(f"W0 expects input dim {W0.shape[1]}, got {z.shape[0]}")
    return relu(W0 @ z + _bias(params, "b0", hypers.D))


def aggregate_neighbors(layer, neighbor_ids, aggregator=AGG_AVERAGE):
    """Pool a user's neighbors' layer-k vectors; empty ego net gives zeros."""
    layer = np.asarray(layer)
    if len(neighbor_ids) == 0:
        return np.zeros(layer.shape[1])
    block = layer[np.asarray(neighbor_ids, dtype=int)]
    if aggregator == AGG_AVERAGE:
        return block.mean(axis=0)
    if aggregator == AGG_MAX:
        return block.max(axis=0)
    raise ModelError(f"unknown aggregator {aggregator!r}")


def convolve_layer(params, k, h_agg, h_a):
    """One graph-convolution step: ReLU(Wk [h_agg, h_a] + bk)."""
    W = params[layer_weight_name(k)]
    z = np.concatenate([np.asarray(h_agg, dtype=np.float64), np.asarray(h_a, dtype=np.float64)])
    if W.shape[1] != z.shape[0]:
        raise ModelError(f"Wk{k} expects input dim {W.shape[1]}, got {z.shape[0]}")
    return relu(W @ z + _bias(params, layer_bias_name(k), W.shape[0]))


@dataclass
class DiffusionState:
    """Per-layer user embeddings, layers[k] has shape (num_users, D)."""

    layers: list[np.ndarray]

    @property
    def final(self):
        return self.layers[-1]


def mean_adjacency(social):
    """Row-normalized follow adjacency: (A h)[a] = mean of h over S_a."""
    rows, cols, vals = [], [], []
    for a, nbrs in enumerate(social.followees_by_user):
        if not nbrs:
            continue
        w = 1.0 / len(nbrs)
        for b in nbrs:
            rows.append(a)
            cols.append(b)
            vals.append(w)
    n = social.num_users
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def aggregate_all(layer, social, aggregator=AGG_AVERAGE, mean_adj=None):
    """Vectorized aggregate_neighbors over all users."""
    if aggregator == AGG_AVERAGE:
        A = mean_adjacency(social) if mean_adj is None else mean_adj
        return A @ layer
    out = np.zeros_like(layer)
    for a, nbrs in enumerate(social.followees_by_user):
        if nbrs:
            out[a] = layer[np.asarray(nbrs)].max(axis=0)
    return out


def diffuse(params, hypers, social, h0):
    """Run the K-layer diffusion recursion from layer-0 embeddings h0."""
    h0 = np.asarray(h0, dtype=np.float64)
    if h0.shape[0] != social.num_users:
        raise ModelError("h0 must cover every user")
    layers = [h0]
    mean_adj = mean_adjacency(social) if hypers.aggregator == AGG_AVERAGE else None
    for k in range(hypers.K):
        agg = aggregate_all(layers[k], social, hypers.aggregator, mean_adj)
        z = np.concatenate([agg, layers[k]], axis=1) @ params[layer_weight_name(k)].T
        if layer_bias_name(k) in params:
            z = z + params[layer_bias_name(k)]
        layers.append(relu(z))
    return DiffusionState(layers)


def history_mean_matrix(train):
    """Rows: 1/|R_a| over a's training positives (zero row when R_a is empty)."""
    rows, cols, vals = [], [], []
    for a, items in enumerate(train.positives_by_user):
        if not items:
            continue
        w = 1.0 / len(items)
        for i in items:
            rows.append(a)
            cols.append(i)
            vals.append(w)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(train.num_users, train.num_items))


def user_embedding(diffusion, user, history_items, item_embs):
    """Final user vector: h^K_a plus the mean of the training-positive items."""
    u = diffusion.final[user].copy()
    if len(history_items) > 0:
        u += item_embs[np.asarray(history_items, dtype=int)].mean(axis=0)
    return u


def predict(u_a, v_i):
    """Predicted preference: inner product of the two embeddings."""
    u_a = np.asarray(u_a, dtype=np.float64)
    v_i = np.asarray(v_i, dtype=np.float64)
    if u_a.shape != v_i.shape:
        raise ModelError(f"shape mismatch {u_a.shape} vs {v_i.shape}")
    return float(u_a @ v_i)


# ---------------------------------------------------------------------------
# full-graph forward


def all_item_embeddings(params, hypers, item_features=None):
    if not hypers.with_features:
        return params["Q"]
    if item_features is None:
        raise ModelError("feature mode requires item features")
    z = np.concatenate([params["Q"], item_features.vectors], axis=1)
    v = z @ params["F"].T
    if "bF" in params:
        v = v + params["bF"]
    return relu(v)


def all_user_base_embeddings(params, hypers, user_features=None):
    if not hypers.with_features:
        return params["P"]
    if user_features is None:
        raise ModelError("feature mode requires user features")
    z = np.concatenate([user_features.vectors, params["P"]], axis=1)
    h = z @ params["W0"].T
    if "b0" in params:
        h = h + params["b0"]
    return relu(h)


def forward_all(params, hypers, bundle):
    """Compute (U, V, diffusion state) for every user and item.

    The Eq.-style history term always uses training positives only.
    """
    V = all_item_embeddings(params, hypers, bundle.item_features)
    h0 = all_user_base_embeddings(params, hypers, bundle.user_features)
    state = diffuse(params, hypers, bundle.social, h0)
    U = state.final + history_mean_matrix(bundle.train) @ V
    return U, V, state


def score_all_items(params, hypers, bundle, user, candidate_items):
    """Score a candidate list for one user; returns [(item, score), ...]."""
    if not (0 <= user < bundle.num_users):
        raise ModelError(f"unknown user id {user}")
    for i in candidate_items:
        if not (0 <= i < bundle.num_items):
            raise ModelError(f"unknown item id {i}")
    if len(candidate_items) == 0:
        return []
    U, V, _ = forward_all(params, hypers, bundle)
    cand = np.asarray(candidate_items, dtype=int)
    scores = V[cand] @ U[user]
    return [(int(i), float(s)) for i, s in zip(cand, scores)]
