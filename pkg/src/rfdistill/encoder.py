"""Point-cloud encoder with hand-written exact gradients.

Pipeline per frame: canonical point ordering, a spatial-transformer block
predicting a 3x3 rotation-scaling matrix for the coordinates, re-attachment
of the doppler/intensity channels, a linear lift to the attention width,
stacked self-attention over points, a per-point MLP, channel-wise max
pooling across points, and a post-pool MLP projecting to the embedding
width.

Everything runs in float64. `forward_batch` returns an explicit cache so
`encoder_backward` can replay the graph in reverse without a tape. Frames
are sorted into a canonical row order on entry, so every reduction sees a
fixed operand order and inference embeddings are bitwise identical under
any permutation of the input points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeMismatchError
from .pointcloud import FEATURE_DIM, FrameBatch, PointFrame

MODES = ("train", "eval")


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters.

    d_out must stay 512 when the encoder feeds the distillation pipeline,
    matching the teacher embedding width; smaller values are for tests.
    dtype selects the compute precision: float32 is the training default
    (the loss itself always accumulates in float64), float64 is what the
    gradient-oracle tests use.
    """

    p_fixed: int = 128
    d_out: int = 512
    stn_hidden: tuple = (32, 64)
    n_attn_layers: int = 2
    d_model: int = 64
    d_k: Optional[int] = None
    phi_hidden: tuple = (64, 128, 512)
    psi_hidden: tuple = (512, 512)
    dropout_rate: float = 0.3
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        widths = (self.p_fixed, self.d_out, self.d_model, self.n_attn_layers,
                  *self.stn_hidden, *self.phi_hidden, *self.psi_hidden)
        if any(int(w) <= 0 for w in widths):
            raise ValueError("all widths and counts must be positive")
        if self.d_k is not None and self.d_k <= 0:
            raise ValueError("d_k must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        object.__setattr__(self, "stn_hidden", tuple(int(w) for w in self.stn_hidden))
        object.__setattr__(self, "phi_hidden", tuple(int(w) for w in self.phi_hidden))
        object.__setattr__(self, "psi_hidden", tuple(int(w) for w in self.psi_hidden))

    @property
    def dk(self) -> int:
        return self.d_model if self.d_k is None else self.d_k

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


class EncoderParams:
    """All learnable tensors plus batch-norm running statistics.

    `tensors` hold the trainable weights, `state` the running mean/var per
    normalization layer. `mode` selects batch statistics ("train") or
    running statistics ("eval") when the forward pass is not given an
    explicit mode.
    """

    def __init__(self, config: EncoderConfig, tensors: dict, state: dict,
                 mode: str = "train"):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.config = config
        self.tensors = tensors
        self.state = state
        self.mode = mode

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.config,
            {k: v.copy() for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.state.items()},
            mode=self.mode,
        )

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def _glorot(rng, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Seeded initialization. The STN head starts as the exact identity
    transform (zero weights, identity bias), so a fresh encoder applies no
    coordinate warp regardless of input."""
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    t: dict = {}
    s: dict = {}

    def bn(prefix: str, width: int):
        t[f"{prefix}.bn.gamma"] = np.ones(width, dtype=dt)
        t[f"{prefix}.bn.beta"] = np.zeros(width, dtype=dt)
        s[f"{prefix}.bn.mean"] = np.zeros(width, dtype=dt)
        s[f"{prefix}.bn.var"] = np.ones(width, dtype=dt)

    w_in = 3
    for i, w in enumerate(config.stn_hidden):
        t[f"stn.pw{i}.w"] = _glorot(rng, w_in, w, dt)
        t[f"stn.pw{i}.b"] = np.zeros(w, dtype=dt)
        bn(f"stn.pw{i}", w)
        w_in = w
    t["stn.head.w"] = np.zeros((w_in, 9), dtype=dt)
    t["stn.head.b"] = np.eye(3, dtype=dt).ravel()

    t["lift.w"] = _glorot(rng, FEATURE_DIM, config.d_model, dt)
    t["lift.b"] = np.zeros(config.d_model, dtype=dt)

    for layer in range(config.n_attn_layers):
        t[f"attn{layer}.wq"] = _glorot(rng, config.d_model, config.dk, dt)
        t[f"attn{layer}.wk"] = _glorot(rng, config.d_model, config.dk, dt)
        t[f"attn{layer}.wv"] = _glorot(rng, config.d_model, config.d_model, dt)

    w_in = config.d_model
    for i, w in enumerate(config.phi_hidden):
        t[f"phi{i}.w"] = _glorot(rng, w_in, w, dt)
        t[f"phi{i}.b"] = np.zeros(w, dtype=dt)
        bn(f"phi{i}", w)
        w_in = w

    for i, w in enumerate(config.psi_hidden):
        t[f"psi{i}.w"] = _glorot(rng, w_in, w, dt)
        t[f"psi{i}.b"] = np.zeros(w, dtype=dt)
        bn(f"psi{i}", w)
        w_in = w

    t["head.w"] = _glorot(rng, w_in, config.d_out, dt)
    t["head.b"] = np.zeros(config.d_out, dtype=dt)
    return EncoderParams(config, t, s, mode="train")


# ---------------------------------------------------------------------------
# primitive layers: each forward returns (output, cache); each backward takes
# (upstream gradient, cache) and returns input/parameter gradients.


def canonicalize(x: np.ndarray) -> np.ndarray:
    """Sort each frame's rows lexicographically over the 5 features.

    This pins the operand order of every downstream reduction, which is what
    makes inference embeddings bitwise invariant to input permutations.
    """
    out = np.empty_like(x)
    for b in range(x.shape[0]):
        fb = x[b]
        order = np.lexsort((fb[:, 4], fb[:, 3], fb[:, 2], fb[:, 1], fb[:, 0]))
        out[b] = fb[order]
    return out


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def _linear_fwd(x, w, b):
    # collapse leading axes so BLAS sees one big GEMM instead of a batch
    y = (_flat(x) @ w).reshape(x.shape[:-1] + (w.shape[1],))
    y += b
    return y, (x, w)


def _linear_bwd(dy, cache):
    x, w = cache
    x2 = _flat(x)
    dy2 = _flat(dy)
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = (dy2 @ w.T).reshape(x.shape)
    return dx, dw, db


def _bn_fwd(x, gamma, beta, run_mean, run_var, mode, momentum, eps):
    # channels-last; normalizes over every leading axis. Train mode updates
    # the running statistics in place (they never influence train outputs).
    axes = tuple(range(x.ndim - 1))
    m = x.size // x.shape[-1]
    if mode == "train":
        mean = x.mean(axis=axes)
        xc = x - mean
        z = _flat(xc)
        var = np.einsum("ic,ic->c", z, z) / m
        run_mean *= 1.0 - momentum
        run_mean += momentum * mean
        run_var *= 1.0 - momentum
        run_var += momentum * var
    else:
        mean = run_mean
        xc = x - mean
        var = run_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc
    xhat *= inv
    y = xhat * gamma
    y += beta
    return y, (xhat, gamma, inv, axes, mode)


def _bn_bwd(dy, cache):
    # may reuse dy's buffer: upstream gradients are single-consumer temps
    xhat, gamma, inv, axes, mode = cache
    dy2 = _flat(dy)
    dgamma = np.einsum("ic,ic->c", dy2, _flat(xhat))
    dbeta = dy2.sum(axis=0)
    gi = gamma * inv
    if mode == "train":
        # batch statistics couple every element along the reduced axes:
        # dx = gamma*inv * (dy - mean(dy) - xhat * mean(dy*xhat))
        m = dy2.shape[0]
        dx = dy
        dx -= dbeta / m
        dx -= xhat * (dgamma / m)
        dx *= gi
    else:
        dx = dy
        dx *= gi
    return dx, dgamma, dbeta


def _relu_fwd(x):
    y = np.maximum(x, 0.0)
    return y, y


def _relu_bwd(dy, y):
    # in place: dy is a single-consumer temporary on the backward path
    np.multiply(dy, y > 0, out=dy)
    return dy


def _dropout_fwd(x, rate, rng):
    # inverted dropout: inference needs no rescaling
    mask = (rng.random(x.shape) >= rate).astype(x.dtype)
    mask *= 1.0 / (1.0 - rate)
    return x * mask, mask


def _dropout_bwd(dy, mask):
    return dy * mask


def _softmax_rows(s):
    # in place: callers hand over a freshly built score tensor
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def _attention_fwd(x, wq, wk, wv):
    # x: (B, P, C). Weights are shared across points; softmax runs over the
    # point axis, so each output row is a convex combination of value rows.
    x2 = _flat(x)
    bp = x.shape[:-1]
    q = (x2 @ wq).reshape(bp + (wq.shape[1],))
    k = (x2 @ wk).reshape(bp + (wk.shape[1],))
    v = (x2 @ wv).reshape(bp + (wv.shape[1],))
    scale = 1.0 / math.sqrt(wq.shape[1])
    scores = q @ np.swapaxes(k, 1, 2)
    scores *= scale
    attn = _softmax_rows(scores)
    y = attn @ v
    return y, (x, wq, wk, wv, q, k, v, attn, scale)


def _attention_bwd(dy, cache):
    x, wq, wk, wv, q, k, v, attn, scale = cache
    dattn = dy @ np.swapaxes(v, 1, 2)
    dv = np.swapaxes(attn, 1, 2) @ dy
    # softmax jacobian, folded into dattn's buffer:
    # dscores = attn * (dattn - rowsum(dattn * attn))
    row = np.einsum("bpq,bpq->bp", dattn, attn)
    dattn -= row[:, :, None]
    dattn *= attn
    dattn *= scale
    dscores = dattn
    dq = dscores @ k
    dk = np.swapaxes(dscores, 1, 2) @ q
    x2 = _flat(x)
    dwq = x2.T @ _flat(dq)
    dwk = x2.T @ _flat(dk)
    dwv = x2.T @ _flat(dv)
    dx = _flat(dq) @ wq.T
    dx += _flat(dk) @ wk.T
    dx += _flat(dv) @ wv.T
    return dx.reshape(x.shape), dwq, dwk, dwv


def _maxpool_fwd(x):
    # (B, P, C) -> (B, C); argmax keeps the first attaining point in the
    # canonical storage order, which is also where the subgradient routes.
    idx = np.argmax(x, axis=1)
    b = np.arange(x.shape[0])[:, None]
    c = np.arange(x.shape[2])[None, :]
    return x[b, idx, c], (idx, x.shape)


def _maxpool_bwd(dy, cache):
    idx, shape = cache
    dx = np.zeros(shape)
    b = np.arange(shape[0])[:, None]
    c = np.arange(shape[2])[None, :]
    dx[b, idx, c] = dy
    return dx


# ---------------------------------------------------------------------------
# composite blocks


def _mlp_chain_fwd(x, params, prefix, n_layers, mode, cfg,
                   dropout_rng=None, dropout_rate=0.0):
    caches = []
    h = x
    for i in range(n_layers):
        p = f"{prefix}{i}"
        h, lin_c = _linear_fwd(h, params.tensors[f"{p}.w"], params.tensors[f"{p}.b"])
        h, bn_c = _bn_fwd(h, params.tensors[f"{p}.bn.gamma"],
                          params.tensors[f"{p}.bn.beta"],
                          params.state[f"{p}.bn.mean"],
                          params.state[f"{p}.bn.var"],
                          mode, cfg.bn_momentum, cfg.bn_eps)
        h, relu_c = _relu_fwd(h)
        drop_c = None
        if mode == "train" and dropout_rate > 0.0:
            h, drop_c = _dropout_fwd(h, dropout_rate, dropout_rng)
        caches.append((lin_c, bn_c, relu_c, drop_c))
    return h, caches


def _mlp_chain_bwd(dy, caches, prefix, grads):
    dh = dy
    for i in reversed(range(len(caches))):
        lin_c, bn_c, relu_c, drop_c = caches[i]
        if drop_c is not None:
            dh = _dropout_bwd(dh, drop_c)
        dh = _relu_bwd(dh, relu_c)
        dh, dgamma, dbeta = _bn_bwd(dh, bn_c)
        p = f"{prefix}{i}"
        grads[f"{p}.bn.gamma"] = dgamma
        grads[f"{p}.bn.beta"] = dbeta
        dh, dw, db = _linear_bwd(dh, lin_c)
        grads[f"{p}.w"] = dw
        grads[f"{p}.b"] = db
    return dh


def _stn_fwd(coords, params, mode):
    """Predict the per-frame 3x3 transform from already-canonical coords."""
    cfg = params.config
    h, pw_caches = _mlp_chain_fwd(coords, params, "stn.pw",
                                  len(cfg.stn_hidden), mode, cfg)
    pooled, mp_c = _maxpool_fwd(h)
    t9, head_c = _linear_fwd(pooled, params.tensors["stn.head.w"],
                             params.tensors["stn.head.b"])
    wt = t9.reshape(-1, 3, 3)
    return wt, (coords, pw_caches, mp_c, head_c)


def _stn_bwd(dwt, cache, grads):
    coords, pw_caches, mp_c, head_c = cache
    dt9 = dwt.reshape(dwt.shape[0], 9)
    dpooled, dw, db = _linear_bwd(dt9, head_c)
    grads["stn.head.w"] = dw
    grads["stn.head.b"] = db
    dh = _maxpool_bwd(dpooled, mp_c)
    _mlp_chain_bwd(dh, pw_caches, "stn.pw", grads)


def forward_batch(x, params: EncoderParams, mode: Optional[str] = None,
                  rng: Optional[np.random.Generator] = None):
    """Embed a batch of frames. Returns (embeddings (B, d_out), cache).

    x is (B, p_fixed, 5) with pre-centered coordinates. In train mode with a
    nonzero dropout rate an rng must be supplied so runs stay reproducible.
    """
    cfg = params.config
    mode = params.mode if mode is None else mode
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    x = np.ascontiguousarray(x, dtype=cfg.np_dtype)
    if x.ndim != 3 or x.shape[2] != FEATURE_DIM:
        raise ShapeMismatchError(f"expected (B, P, {FEATURE_DIM}), got {x.shape}")
    if x.shape[1] != cfg.p_fixed:
        raise ShapeMismatchError(
            f"frame has {x.shape[1]} points, encoder expects {cfg.p_fixed}"
        )
    if mode == "train" and cfg.dropout_rate > 0.0 and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")

    xc = canonicalize(x)
    coords = xc[:, :, :3]

    wt, stn_cache = _stn_fwd(coords, params, mode)
    tcoords = np.einsum("bij,bpj->bpi", wt, coords)
    feats = np.concatenate([tcoords, xc[:, :, 3:]], axis=2)

    lifted, lift_c = _linear_fwd(feats, params.tensors["lift.w"],
                                 params.tensors["lift.b"])
    h = lifted
    attn_caches = []
    for layer in range(cfg.n_attn_layers):
        h, c = _attention_fwd(h, params.tensors[f"attn{layer}.wq"],
                              params.tensors[f"attn{layer}.wk"],
                              params.tensors[f"attn{layer}.wv"])
        attn_caches.append(c)

    h, phi_caches = _mlp_chain_fwd(h, params, "phi", len(cfg.phi_hidden),
                                   mode, cfg)
    pooled, mp_c = _maxpool_fwd(h)
    z, psi_caches = _mlp_chain_fwd(pooled, params, "psi", len(cfg.psi_hidden),
                                   mode, cfg, dropout_rng=rng,
                                   dropout_rate=cfg.dropout_rate)
    emb, head_c = _linear_fwd(z, params.tensors["head.w"],
                              params.tensors["head.b"])

    cache = {
        "coords": coords,
        "stn": stn_cache,
        "wt": wt,
        "lift": lift_c,
        "attn": attn_caches,
        "phi": phi_caches,
        "maxpool": mp_c,
        "psi": psi_caches,
        "head": head_c,
        "mode": mode,
    }
    return emb, cache


def encoder_backward(cache, d_emb, params: EncoderParams) -> dict:
    """Exact gradients of a scalar loss for every learnable tensor.

    `cache` must come from the forward pass of the same batch; `d_emb` is the
    upstream gradient of the loss with respect to the embeddings.
    """
    grads: dict = {}
    d_emb = np.ascontiguousarray(d_emb, dtype=params.config.np_dtype)

    dz, dw, db = _linear_bwd(d_emb, cache["head"])
    grads["head.w"] = dw
    grads["head.b"] = db
    dpooled = _mlp_chain_bwd(dz, cache["psi"], "psi", grads)
    dh = _maxpool_bwd(dpooled, cache["maxpool"])
    dh = _mlp_chain_bwd(dh, cache["phi"], "phi", grads)

    for layer in reversed(range(params.config.n_attn_layers)):
        dh, dwq, dwk, dwv = _attention_bwd(dh, cache["attn"][layer])
        grads[f"attn{layer}.wq"] = dwq
        grads[f"attn{layer}.wk"] = dwk
        grads[f"attn{layer}.wv"] = dwv

    dfeats, dw, db = _linear_bwd(dh, cache["lift"])
    grads["lift.w"] = dw
    grads["lift.b"] = db

    # coordinates feed both the STN input and the transform application;
    # only the transform path carries parameter gradients.
    dtcoords = dfeats[:, :, :3]
    dwt = np.einsum("bpi,bpj->bij", dtcoords, cache["coords"])
    _stn_bwd(dwt, cache["stn"], grads)
    return grads


# ---------------------------------------------------------------------------
# public spec-level operations


def stn_forward(coords, params: EncoderParams, mode: Optional[str] = None):
    """Spatial-transformer output for raw coordinates.

    Accepts (P, 3) or (B, P, 3); returns (3, 3) or (B, 3, 3). Rows are
    sorted canonically first, so permuted inputs give a bitwise-equal
    transform.
    """
    mode = params.mode if mode is None else mode
    coords = np.ascontiguousarray(coords, dtype=params.config.np_dtype)
    single = coords.ndim == 2
    if single:
        coords = coords[None]
    if coords.ndim != 3 or coords.shape[2] != 3:
        raise ShapeMismatchError(f"expected (B, P, 3) coords, got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise ValueError("coords must be finite")
    srt = np.empty_like(coords)
    for b in range(coords.shape[0]):
        cb = coords[b]
        order = np.lexsort((cb[:, 2], cb[:, 1], cb[:, 0]))
        srt[b] = cb[order]
    wt, _ = _stn_fwd(srt, params, mode)
    return wt[0] if single else wt


def attention_layer(features, wq, wk, wv):
    """One self-attention pass over points.

    Accepts (P, C) or (B, P, C). Attention weights per query row are a
    probability distribution over points.
    """
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 2
    if single:
        features = features[None]
    if features.ndim != 3:
        raise ShapeMismatchError(f"expected (B, P, C) features, got {features.shape}")
    y, _ = _attention_fwd(features, np.asarray(wq, dtype=np.float64),
                          np.asarray(wk, dtype=np.float64),
                          np.asarray(wv, dtype=np.float64))
    return y[0] if single else y


def attention_weights(features, wq, wk, wv):
    """The (P, P) or (B, P, P) softmax weight matrix of one attention pass."""
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 2
    if single:
        features = features[None]
    _, cache = _attention_fwd(features, np.asarray(wq, dtype=np.float64),
                              np.asarray(wk, dtype=np.float64),
                              np.asarray(wv, dtype=np.float64))
    attn = cache[7]
    return attn[0] if single else attn


def encoder_forward(frame, params: EncoderParams, mode: Optional[str] = None,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Embed one frame or a batch; the convenience wrapper without cache.

    Accepts a PointFrame, a FrameBatch, or an array of shape (P, 5) or
    (B, P, 5). Returns (d_out,) for single-frame input, else (B, d_out).
    """
    if isinstance(frame, PointFrame):
        x = frame.data[None]
        single = True
    elif isinstance(frame, FrameBatch):
        x = frame.array
        single = False
    else:
        x = np.asarray(frame, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
    emb, _ = forward_batch(x, params, mode=mode, rng=rng)
    return emb[0] if single else emb
