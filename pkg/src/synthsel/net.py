"""The scoring network: two GRU layers, a tanh FC embedding, and a
classification head trained with softmax cross-entropy ("bce") or an
additive angular margin ("arcface").

Gradients are exact derivatives through the whole computation,
including backpropagation through time; there is no autodiff here.
Training runs in float32; gradient checking builds float64 models.

Recurrence (per layer, zero initial state; gate order r, z, c):

    r_t = sigmoid(Wx_r x_t + Wh_r h_{t-1} + b_r)
    z_t = sigmoid(Wx_z x_t + Wh_z h_{t-1} + b_z)
    c_t = tanh(Wx_c x_t + r_t * (Wh_c h_{t-1}) + b_c)
    h_t = z_t * h_{t-1} + (1 - z_t) * c_t

The reset gate multiplies the transformed hidden state, which lets the
three recurrent matmuls run as one fused GEMM per step. Padded frames
carry the hidden state through unchanged, so the final step of the
batched recurrence is each utterance's last real frame.

Parameters live in a flat dict; per layer the three gate blocks are
stacked row-wise into ``wx`` (3H x D), ``wh`` (3H x H) and ``b`` (3H,).
Checkpoints serialize them in PARAM_ORDER as little-endian float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit as sigmoid

from .corpus import Manifest, read_audio
from .dsp import DspConfig, FeatureMatrix, log_mel, normalize_features

BCE = "bce"
ARCFACE = "arcface"
HEADS = (BCE, ARCFACE)

PARAM_ORDER = (
    "gru1.wx", "gru1.wh", "gru1.b",
    "gru2.wx", "gru2.wh", "gru2.b",
    "fc.w", "fc.b",
    "head.w", "head.b",
)

_CKPT_MAGIC = b"SSCK"
_CKPT_VERSION = 1


class NumericalDegeneracyError(ArithmeticError):
    """Zero-norm embedding under the angular-margin head."""


@dataclass(frozen=True)
class NetConfig:
    input_dim: int = 80
    hidden: int = 256
    embed_dim: int = 64
    head: str = BCE

    def __post_init__(self) -> None:
        if min(self.input_dim, self.hidden, self.embed_dim) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")


@dataclass(frozen=True)
class ArcfaceConfig:
    scale: float = 10.0
    margin: float = 0.5
    n_classes: int = 2

    def __post_init__(self) -> None:
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if not 0.0 <= self.margin < np.pi / 2:
            raise ValueError(f"margin must lie in [0, pi/2), got {self.margin}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")


def default_lr(head: str) -> float:
    """Per-head default learning rate (the margin head trains slower)."""
    return 1e-4 if head == BCE else 1e-5


@dataclass
class ScorerModel:
    cfg: NetConfig
    params: dict[str, np.ndarray]
    arcface: ArcfaceConfig | None = None

    @property
    def head(self) -> str:
        return self.cfg.head

    @property
    def dtype(self) -> np.dtype:
        return self.params["fc.w"].dtype

    def copy(self) -> "ScorerModel":
        return ScorerModel(self.cfg, {k: v.copy() for k, v in self.params.items()}, self.arcface)

    def astype(self, dtype) -> "ScorerModel":
        return ScorerModel(self.cfg, {k: v.astype(dtype) for k, v in self.params.items()}, self.arcface)


def init_model(cfg: NetConfig, seed: int = 0, arcface_cfg: ArcfaceConfig | None = None,
               dtype=np.float32) -> ScorerModel:
    """Seeded init: uniform +-1/sqrt(fan_in) weights, zero biases.

    Angular-margin class weights start on the unit sphere.
    """
    rng = np.random.default_rng(seed)
    d, h, e = cfg.input_dim, cfg.hidden, cfg.embed_dim

    def uni(rows: int, cols: int, fan_in: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(rows, cols))

    params: dict[str, np.ndarray] = {
        "gru1.wx": uni(3 * h, d, d),
        "gru1.wh": uni(3 * h, h, h),
        "gru1.b": np.zeros(3 * h),
        "gru2.wx": uni(3 * h, h, h),
        "gru2.wh": uni(3 * h, h, h),
        "gru2.b": np.zeros(3 * h),
        "fc.w": uni(e, h, h),
        "fc.b": np.zeros(e),
    }
    if cfg.head == BCE:
        params["head.w"] = uni(2, e, e)
        params["head.b"] = np.zeros(2)
        arc = None
    else:
        arc = arcface_cfg or ArcfaceConfig()
        w = rng.normal(size=(arc.n_classes, e))
        params["head.w"] = w / np.linalg.norm(w, axis=1, keepdims=True)
    return ScorerModel(cfg, {k: v.astype(dtype) for k, v in params.items()}, arc)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _gru_layer_forward(x: np.ndarray, mask: np.ndarray, wx: np.ndarray, wh: np.ndarray,
                       b: np.ndarray) -> tuple[np.ndarray, dict]:
    """x: (B, T, D), mask: (B, T) in {0,1}. Returns h_seq (B, T, H) + cache."""
    batch, steps, dim = x.shape
    hid = wh.shape[1]
    gx = (x.reshape(batch * steps, dim) @ wx.T + b).reshape(batch, steps, 3 * hid)
    h = np.zeros((batch, hid), dtype=x.dtype)
    h_seq = np.empty((batch, steps, hid), dtype=x.dtype)
    r_seq = np.empty_like(h_seq)
    z_seq = np.empty_like(h_seq)
    c_seq = np.empty_like(h_seq)
    ghc_seq = np.empty_like(h_seq)
    for t in range(steps):
        gh = h @ wh.T
        r = sigmoid(gx[:, t, :hid] + gh[:, :hid])
        z = sigmoid(gx[:, t, hid:2 * hid] + gh[:, hid:2 * hid])
        ghc = gh[:, 2 * hid:]
        c = np.tanh(gx[:, t, 2 * hid:] + r * ghc)
        h_new = z * h + (1.0 - z) * c
        m = mask[:, t:t + 1]
        h = m * h_new + (1.0 - m) * h
        r_seq[:, t] = r
        z_seq[:, t] = z
        c_seq[:, t] = c
        ghc_seq[:, t] = ghc
        h_seq[:, t] = h
    cache = {"r": r_seq, "z": z_seq, "c": c_seq, "ghc": ghc_seq}
    return h_seq, cache


def _gru_layer_backward(x: np.ndarray, mask: np.ndarray, h_seq: np.ndarray, cache: dict,
                        wx: np.ndarray, wh: np.ndarray, d_h_final: np.ndarray,
                        d_h_steps: np.ndarray | None) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Reverse-time pass. d_h_final seeds the last step; d_h_steps (B, T, H)
    carries per-step gradients arriving from the layer above, if any."""
    batch, steps, _ = x.shape
    hid = wh.shape[1]
    r_seq, z_seq, c_seq, ghc_seq = cache["r"], cache["z"], cache["c"], cache["ghc"]
    da_all = np.empty((batch, steps, 3 * hid), dtype=x.dtype)
    dgh_all = np.empty_like(da_all)
    dh = d_h_final.copy()
    for t in range(steps - 1, -1, -1):
        if d_h_steps is not None:
            dh = dh + d_h_steps[:, t]
        h_prev = h_seq[:, t - 1] if t > 0 else np.zeros((batch, hid), dtype=x.dtype)
        m = mask[:, t:t + 1]
        dhn = dh * m
        r, z, c, ghc = r_seq[:, t], z_seq[:, t], c_seq[:, t], ghc_seq[:, t]
        dz = dhn * (h_prev - c)
        dc = dhn * (1.0 - z)
        dac = dc * (1.0 - c * c)
        dr = dac * ghc
        dghc = dac * r
        dar = dr * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        da_all[:, t, :hid] = dar
        da_all[:, t, hid:2 * hid] = daz
        da_all[:, t, 2 * hid:] = dac
        dgh_all[:, t, :hid] = dar
        dgh_all[:, t, hid:2 * hid] = daz
        dgh_all[:, t, 2 * hid:] = dghc
        dh = dh * (1.0 - m) + dhn * z + dgh_all[:, t] @ wh
    h_prev_seq = np.concatenate(
        [np.zeros((batch, 1, hid), dtype=x.dtype), h_seq[:, :-1]], axis=1
    )
    flat_da = da_all.reshape(batch * steps, 3 * hid)
    flat_dgh = dgh_all.reshape(batch * steps, 3 * hid)
    grads = {
        "wx": flat_da.T @ x.reshape(batch * steps, -1),
        "wh": flat_dgh.T @ h_prev_seq.reshape(batch * steps, hid),
        "b": flat_da.sum(axis=0),
    }
    dx = (flat_da @ wx).reshape(x.shape)
    return dx, grads


def _forward_embeddings(model: ScorerModel, x: np.ndarray, mask: np.ndarray,
                        want_cache: bool = False):
    """Batched embedding forward. Returns (embeddings, cache-or-None)."""
    p = model.params
    h1_seq, c1 = _gru_layer_forward(x, mask, p["gru1.wx"], p["gru1.wh"], p["gru1.b"])
    h2_seq, c2 = _gru_layer_forward(h1_seq, mask, p["gru2.wx"], p["gru2.wh"], p["gru2.b"])
    h_final = h2_seq[:, -1]
    pre = h_final @ p["fc.w"].T + p["fc.b"]
    emb = np.tanh(pre)
    if not want_cache:
        return emb, None
    cache = {"h1_seq": h1_seq, "c1": c1, "h2_seq": h2_seq, "c2": c2,
             "h_final": h_final, "emb": emb}
    return emb, cache


def _backward_embeddings(model: ScorerModel, x: np.ndarray, mask: np.ndarray,
                         cache: dict, d_emb: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    emb, h_final = cache["emb"], cache["h_final"]
    d_pre = d_emb * (1.0 - emb * emb)
    grads = {
        "fc.w": d_pre.T @ h_final,
        "fc.b": d_pre.sum(axis=0),
    }
    d_h_final = d_pre @ p["fc.w"]
    dx2, g2 = _gru_layer_backward(cache["h1_seq"], mask, cache["h2_seq"], cache["c2"],
                                  p["gru2.wx"], p["gru2.wh"], d_h_final, None)
    zero_final = np.zeros_like(d_h_final)
    _, g1 = _gru_layer_backward(x, mask, cache["h1_seq"], cache["c1"],
                                p["gru1.wx"], p["gru1.wh"], zero_final, dx2)
    for name, g in (("gru1", g1), ("gru2", g2)):
        for key in ("wx", "wh", "b"):
            grads[f"{name}.{key}"] = g[key]
    return grads


def pad_batch(features: Sequence[FeatureMatrix], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length features into (B, T_max, D) plus a (B, T_max) mask."""
    if not features:
        raise ValueError("empty batch")
    dims = {f.dim for f in features}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dimensions in batch: {sorted(dims)}")
    t_max = max(f.n_frames for f in features)
    batch = len(features)
    x = np.zeros((batch, t_max, dims.pop()), dtype=dtype)
    mask = np.zeros((batch, t_max), dtype=dtype)
    for i, f in enumerate(features):
        t = f.n_frames
        x[i, :t] = f.frames
        mask[i, :t] = 1.0
    return x, mask


def forward_embedding(model: ScorerModel, features: FeatureMatrix) -> np.ndarray:
    """Embedding of a single utterance (embed_dim,)."""
    if features.kind != "log_mel":
        raise ValueError(f"scorer input must be log_mel features, got {features.kind}")
    if features.dim != model.cfg.input_dim:
        raise ValueError(f"feature dim {features.dim} != model input dim {model.cfg.input_dim}")
    x, mask = pad_batch([features], dtype=model.dtype)
    emb, _ = _forward_embeddings(model, x, mask)
    return emb[0]


def forward_embeddings(model: ScorerModel, features: Sequence[FeatureMatrix]) -> np.ndarray:
    """Embeddings for a batch of utterances, shape (B, embed_dim)."""
    x, mask = pad_batch(features, dtype=model.dtype)
    if x.shape[2] != model.cfg.input_dim:
        raise ValueError(f"feature dim {x.shape[2]} != model input dim {model.cfg.input_dim}")
    emb, _ = _forward_embeddings(model, x, mask)
    return emb


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and d(loss)/d(logits)."""
    batch = logits.shape[0]
    logp = _log_softmax(logits)
    loss = -logp[np.arange(batch), labels].mean()
    d_logits = np.exp(logp)
    d_logits[np.arange(batch), labels] -= 1.0
    d_logits /= batch
    return float(loss), d_logits


def bce_head_loss(emb: np.ndarray, labels: np.ndarray, w: np.ndarray,
                  b: np.ndarray) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
    """Two-class softmax cross-entropy on a linear projection of the embedding."""
    logits = emb @ w.T + b
    loss, d_logits = softmax_xent(logits, labels)
    grads = {"head.w": d_logits.T @ emb, "head.b": d_logits.sum(axis=0)}
    return loss, d_logits @ w, grads


def arcface_head_loss(emb: np.ndarray, labels: np.ndarray, w: np.ndarray,
                      scale: float, margin: float) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
    """Angular-margin softmax: margin added to the true-class angle.

    Embedding and class weights are L2-normalized before scoring, so the
    loss is invariant to positive rescaling of either.
    """
    batch = emb.shape[0]
    e_norm = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(e_norm < 1e-12):
        bad = int(np.argmin(e_norm))
        raise NumericalDegeneracyError(f"zero-norm embedding at batch row {bad}")
    w_norm = np.linalg.norm(w, axis=1, keepdims=True)
    eh = emb / e_norm
    wh = w / w_norm
    cos = eh @ wh.T
    rows = np.arange(batch)
    cos_y = cos[rows, labels]
    sin_y = np.sqrt(np.clip(1.0 - cos_y * cos_y, 0.0, None))
    target = cos_y * np.cos(margin) - sin_y * np.sin(margin)
    logits = scale * cos
    logits[rows, labels] = scale * target
    loss, d_logits = softmax_xent(logits, labels)
    d_cos = scale * d_logits
    # d(target)/d(cos_y); the sqrt is guarded away from |cos| = 1
    d_cos[rows, labels] *= np.cos(margin) + cos_y * np.sin(margin) / np.maximum(sin_y, 1e-12)
    d_eh = d_cos @ wh
    d_wh = d_cos.T @ eh
    d_emb = (d_eh - eh * (d_eh * eh).sum(axis=1, keepdims=True)) / e_norm
    d_w = (d_wh - wh * (d_wh * wh).sum(axis=1, keepdims=True)) / w_norm
    return loss, d_emb, {"head.w": d_w}


def compute_loss(model: ScorerModel, batch: Sequence[tuple[FeatureMatrix, int]]
                 ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss over the batch plus exact gradients for every parameter."""
    if not batch:
        raise ValueError("empty batch")
    feats = [f for f, _ in batch]
    labels = np.array([y for _, y in batch], dtype=np.int64)
    if labels.min() < 0 or labels.max() > 1:
        raise ValueError("labels must be 0 (synthetic) or 1 (real)")
    x, mask = pad_batch(feats, dtype=model.dtype)
    if x.shape[2] != model.cfg.input_dim:
        raise ValueError(f"feature dim {x.shape[2]} != model input dim {model.cfg.input_dim}")
    emb, cache = _forward_embeddings(model, x, mask, want_cache=True)
    if model.head == BCE:
        loss, d_emb, head_grads = bce_head_loss(emb, labels, model.params["head.w"],
                                                model.params["head.b"])
    else:
        arc = model.arcface or ArcfaceConfig()
        loss, d_emb, head_grads = arcface_head_loss(emb, labels, model.params["head.w"],
                                                    arc.scale, arc.margin)
    grads = _backward_embeddings(model, x, mask, cache, d_emb)
    grads.update(head_grads)
    return loss, grads


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    passed: bool


def grad_check(model: ScorerModel, batch: Sequence[tuple[FeatureMatrix, int]],
               tolerance: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Central finite differences over every parameter coordinate.

    Comparison is relative, falling back to absolute when both the
    analytic and numeric values are below 1e-8 (avoids 0/0). The
    relative denominator is floored at 1e-7: float64 central
    differences at this step carry ~1e-11 of cancellation noise, which
    would otherwise flag correct near-zero gradient coordinates.
    """
    if model.dtype != np.float64:
        model = model.astype(np.float64)
    _, analytic = compute_loss(model, batch)
    worst = 0.0
    worst_param = ""
    for name, p in model.params.items():
        flat = p.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            loss_plus, _ = compute_loss(model, batch)
            flat[i] = orig - step
            loss_minus, _ = compute_loss(model, batch)
            flat[i] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            a = a_flat[i]
            denom = max(abs(a), abs(numeric))
            err = abs(a - numeric) if denom < 1e-8 else abs(a - numeric) / max(denom, 1e-7)
            if err > worst:
                worst = err
                worst_param = f"{name}[{i}]"
    return GradCheckReport(max_rel_error=worst, worst_param=worst_param,
                           passed=worst <= tolerance)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()},
                   step=0)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place.

    Uses the rescaled form alpha_t = lr * sqrt(1 - beta2^t) / (1 - beta1^t)
    applied to m / (sqrt(v) + eps), so the first step with gradient g is
    -lr * g / (|g| + eps / sqrt(1 - beta2)).
    """
    state.step += 1
    t = state.step
    alpha = cfg.lr * np.sqrt(1.0 - cfg.beta2 ** t) / (1.0 - cfg.beta1 ** t)
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {key}")
        m = state.m[key]
        v = state.v[key]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p -= (alpha * m / (np.sqrt(v) + cfg.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ScorerModel
    history: list[dict]
    best_epoch: int
    best_dev_uar: float


def default_feature_loader(manifest: Manifest, dsp_cfg: DspConfig) -> Callable[[object], FeatureMatrix]:
    """Load audio from disk and compute normalized log-mel features."""
    def _load(entry) -> FeatureMatrix:
        audio = read_audio(manifest.resolve_audio(entry))
        return normalize_features(log_mel(audio, dsp_cfg))
    return _load


def predict_labels(model: ScorerModel, feats: Sequence[FeatureMatrix],
                   batch_size: int = 64) -> np.ndarray:
    """Predicted class (1 = real) for each utterance."""
    order = sorted(range(len(feats)), key=lambda i: feats[i].n_frames)
    preds = np.zeros(len(feats), dtype=np.int64)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        emb = forward_embeddings(model, [feats[i] for i in idx])
        if model.head == BCE:
            logits = emb @ model.params["head.w"].T + model.params["head.b"]
        else:
            e_norm = np.linalg.norm(emb, axis=1, keepdims=True)
            w = model.params["head.w"]
            wh = w / np.linalg.norm(w, axis=1, keepdims=True)
            logits = (emb / np.maximum(e_norm, 1e-12)) @ wh.T
        preds[idx] = np.argmax(logits, axis=1)
    return preds


def unweighted_average_recall(labels: np.ndarray, preds: np.ndarray) -> float:
    recalls = []
    for cls in (0, 1):
        sel = labels == cls
        if not np.any(sel):
            raise ValueError(f"no examples of class {cls}")
        recalls.append(float((preds[sel] == cls).mean()))
    return float(np.mean(recalls))


def train_scorer(train: Manifest, dev: Manifest, net_cfg: NetConfig, train_cfg: TrainConfig,
                 dsp_cfg: DspConfig = DspConfig(), arcface_cfg: ArcfaceConfig | None = None,
                 feature_loader: Callable | None = None) -> TrainResult:
    """Mini-batch training with early stopping on dev UAR.

    Batches are length-bucketed after a seeded shuffle each epoch;
    updates run single-threaded so results are reproducible for a fixed
    seed. Returns the parameters of the best dev epoch.
    """
    for name, man in (("train", train), ("dev", dev)):
        labels_present = {e.label for e in man.entries}
        if labels_present != {"real", "synthetic"}:
            raise ValueError(f"{name} manifest must contain both classes, found {sorted(labels_present)}")

    load_train = feature_loader or default_feature_loader(train, dsp_cfg)
    load_dev = feature_loader or default_feature_loader(dev, dsp_cfg)
    train_feats = [load_train(e) for e in train.entries]
    train_labels = np.array([1 if e.label == "real" else 0 for e in train.entries], dtype=np.int64)
    dev_feats = [load_dev(e) for e in dev.entries]
    dev_labels = np.array([1 if e.label == "real" else 0 for e in dev.entries], dtype=np.int64)

    model = init_model(net_cfg, seed=train_cfg.seed, arcface_cfg=arcface_cfg)
    state = AdamState.for_params(model.params)
    rng = np.random.default_rng(train_cfg.seed)

    best = model.copy()
    best_uar = -1.0
    best_epoch = 0
    history: list[dict] = []
    stale = 0
    n = len(train_feats)

    for epoch in range(1, train_cfg.max_epochs + 1):
        order = rng.permutation(n)
        order = order[np.argsort([train_feats[i].n_frames for i in order], kind="stable")]
        batches = [order[s:s + train_cfg.batch_size] for s in range(0, n, train_cfg.batch_size)]
        rng.shuffle(batches)
        epoch_loss = 0.0
        for batch_idx in batches:
            batch = [(train_feats[i], int(train_labels[i])) for i in batch_idx]
            loss, grads = compute_loss(model, batch)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} (step {state.step + 1}); aborting"
                )
            adam_step(model.params, grads, state, train_cfg)
            epoch_loss += loss * len(batch_idx)
        epoch_loss /= n

        dev_preds = predict_labels(model, dev_feats, batch_size=train_cfg.batch_size)
        uar = unweighted_average_recall(dev_labels, dev_preds)
        history.append({"epoch": epoch, "train_loss": epoch_loss, "dev_uar": uar})
        if uar > best_uar:
            best_uar = uar
            best_epoch = epoch
            best = model.copy()
            stale = 0
        else:
            stale += 1
        if stale >= train_cfg.patience:
            break

    return TrainResult(model=best, history=history, best_epoch=best_epoch, best_dev_uar=best_uar)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: ScorerModel, metadata: dict | None = None) -> Path:
    """Binary checkpoint: magic, version, JSON header, then parameters in
    PARAM_ORDER as little-endian float32. Metadata goes to a .json sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    order = [k for k in PARAM_ORDER if k in model.params]
    header = {
        "net": {"input_dim": model.cfg.input_dim, "hidden": model.cfg.hidden,
                "embed_dim": model.cfg.embed_dim, "head": model.cfg.head},
        "arcface": (None if model.arcface is None else
                    {"scale": model.arcface.scale, "margin": model.arcface.margin,
                     "n_classes": model.arcface.n_classes}),
        "params": [{"name": k, "shape": list(model.params[k].shape)} for k in order],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        for k in order:
            fh.write(np.ascontiguousarray(model.params[k], dtype="<f4").tobytes())
    if metadata is not None:
        sidecar = path.parent / (path.name + ".json")
        sidecar.write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> ScorerModel:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a scorer checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    cfg = NetConfig(**header["net"])
    arc = ArcfaceConfig(**header["arcface"]) if header["arcface"] is not None else None
    params: dict[str, np.ndarray] = {}
    offset = 12 + hlen
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[spec["name"]] = arr.copy()
        offset += 4 * count
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes after parameters")
    return ScorerModel(cfg, params, arc)
