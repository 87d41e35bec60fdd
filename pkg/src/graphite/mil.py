"""Stage-1 MIL classifier over bags of patch embeddings.

Patch projector (D -> 512 -> 128), self-attention pooling into a core-level
vector, patient projector (128 -> 512 -> 128) and a sigmoid bag classifier,
trained with BCE, Adam, and patience-based early stopping. Each attention
score is the patch's own query-key product softmaxed across the bag.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BCE_CLAMP = 1e-7


@dataclass
class Bag:
    core_id: str
    patch_embeddings: np.ndarray  # N x D
    label: int

    def __post_init__(self):
        self.patch_embeddings = np.asarray(self.patch_embeddings, dtype=np.float64)
        if self.patch_embeddings.ndim != 2 or self.patch_embeddings.shape[0] < 1:
            raise ValueError(f"bag {self.core_id}: need an N x D matrix with N >= 1")
        if self.label not in (0, 1):
            raise ValueError(f"bag {self.core_id}: label must be 0 or 1")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_bags: int = 12
    max_epochs: int = 150
    patience: int = 4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


def glorot(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class MilModel:
    """Parameter container; all state lives in the ``params`` dict."""

    def __init__(self, feature_dim, d_k=128, seed=0):
        self.feature_dim = feature_dim
        self.d_k = d_k
        rng = np.random.default_rng(seed)
        p = {}
        p["proj.W1"] = glorot(rng, feature_dim, 512)
        p["proj.b1"] = np.zeros((1, 512))
        p["proj.W2"] = glorot(rng, 512, 128)
        p["proj.b2"] = np.zeros((1, 128))
        for name in ("q", "k", "v"):
            p[f"attn.W{name}"] = glorot(rng, 128, d_k)
            p[f"attn.b{name}"] = np.zeros((1, d_k))
        p["patient.W1"] = glorot(rng, 128, 512)
        p["patient.b1"] = np.zeros((1, 512))
        p["patient.W2"] = glorot(rng, 512, 128)
        p["patient.b2"] = np.zeros((1, 128))
        p["clf.W"] = glorot(rng, 128, 1)
        p["clf.b"] = np.zeros((1, 1))
        self.params = {k: Tensor(v) for k, v in p.items()}

    def attach(self, tape):
        for t in self.params.values():
            t.tape = tape
            t.grad = None

    def detach(self):
        for t in self.params.values():
            t.tape = None

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state):
        for k, t in self.params.items():
            t.data = np.array(state[k], dtype=np.float64)


def project_patches(model, embeddings):
    """Map raw N x D features to the 128-d embedding space."""
    x = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    if x.data.shape[1] != model.feature_dim:
        raise ValueError(
            f"project_patches: expected feature dim {model.feature_dim}, "
            f"got {x.data.shape[1]}")
    p = model.params
    h = ad.relu(ad.affine(x, p["proj.W1"], p["proj.b1"]))
    return ad.affine(h, p["proj.W2"], p["proj.b2"])


def mil_attention(model, embeddings):
    """Pool N x 128 embeddings into (z, alpha).

    Scores are each patch's own q.k product scaled by sqrt(d_k); alpha is the
    softmax of those scores across the bag and z the alpha-weighted sum of
    value vectors.
    """
    e = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    p = model.params
    q = ad.affine(e, p["attn.Wq"], p["attn.bq"])
    k = ad.affine(e, p["attn.Wk"], p["attn.bk"])
    v = ad.affine(e, p["attn.Wv"], p["attn.bv"])
    scores = ad.div(ad.tsum(ad.mul(q, k), axis=1, keepdims=True), np.sqrt(model.d_k))
    alpha = ad.softmax(scores, axis=0)  # N x 1
    z = ad.matmul(ad.transpose(alpha), v)  # 1 x 128
    return z, alpha


def classify_core(model, z):
    """Sigmoid bag probability from the aggregated core vector."""
    p = model.params
    h = ad.relu(ad.affine(z, p["patient.W1"], p["patient.b1"]))
    h = ad.affine(h, p["patient.W2"], p["patient.b2"])
    logit = ad.affine(h, p["clf.W"], p["clf.b"])
    return ad.sigmoid(logit)  # 1 x 1


def forward_bag(model, bag):
    """Full Stage-1 forward: returns (y_hat, alpha, projected embeddings)."""
    projected = project_patches(model, bag.patch_embeddings)
    z, alpha = mil_attention(model, projected)
    return classify_core(model, z), alpha, projected


def bce_loss(predictions, labels):
    """Mean binary cross-entropy; predictions clamped to [1e-7, 1 - 1e-7]."""
    if len(predictions) != len(labels):
        raise ValueError(
            f"bce_loss: {len(predictions)} predictions vs {len(labels)} labels")
    if len(predictions) < 1:
        raise ValueError("bce_loss: need at least one prediction")
    terms = []
    for yhat, y in zip(predictions, labels):
        yhat = yhat if isinstance(yhat, Tensor) else Tensor([[float(yhat)]])
        yc = ad.clip(ad.reshape(yhat, (1, 1)), BCE_CLAMP, 1.0 - BCE_CLAMP)
        if y == 1:
            terms.append(ad.neg(ad.log(yc)))
        else:
            terms.append(ad.neg(ad.log(ad.sub(1.0, yc))))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.reshape(ad.div(total, float(len(terms))), ())


class AdamState:
    def __init__(self, params):
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0


def adam_step(params, state, config):
    """Standard bias-corrected Adam update from accumulated ``.grad``."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    for name, tensor in params.items():
        g = tensor.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient for '{name}'")
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = state.m[name] / (1 - b1 ** state.t)
        vhat = state.v[name] / (1 - b2 ** state.t)
        tensor.data = tensor.data - config.learning_rate * mhat / (np.sqrt(vhat) + config.eps)


def stratified_split(items, labels, fraction, rng):
    """Deterministic per-class split; returns (kept, held_out) index lists."""
    held = []
    for cls in (0, 1):
        idx = [i for i, y in enumerate(labels) if y == cls]
        perm = rng.permutation(len(idx))
        n_held = max(1, int(round(fraction * len(idx)))) if idx else 0
        held.extend(idx[j] for j in perm[:n_held])
    held_set = set(held)
    kept = [i for i in range(len(items)) if i not in held_set]
    return kept, sorted(held_set)


def _dataset_loss(model, bags):
    preds = [forward_bag(model, b)[0] for b in bags]
    return float(bce_loss(preds, [b.label for b in bags]).data)


def train_stage1(bags, config, val_bags=None):
    """Train the MIL classifier; returns (model, history).

    When ``val_bags`` is omitted, a seeded stratified 20% split is carved out
    of ``bags``. Keeps the parameters of the best validation epoch and stops
    after ``patience`` epochs without improvement.
    """
    rng = np.random.default_rng(config.seed)
    if val_bags is None:
        labels = [b.label for b in bags]
        kept, held = stratified_split(bags, labels, config.val_fraction, rng)
        train_bags = [bags[i] for i in kept]
        val_bags = [bags[i] for i in held]
    else:
        train_bags = list(bags)
    if not train_bags or not val_bags:
        raise ValueError("train_stage1: both splits must be non-empty")
    train_labels = {b.label for b in train_bags}
    if train_labels != {0, 1}:
        raise ValueError("train_stage1: training split must contain both classes")

    model = MilModel(train_bags[0].patch_embeddings.shape[1], seed=config.seed)
    state = AdamState(model.params)
    history = {"train_loss": [], "val_loss": []}
    best_loss = np.inf
    best_state = model.state_dict()
    stall = 0

    for _epoch in range(config.max_epochs):
        order = rng.permutation(len(train_bags))
        epoch_losses = []
        for start in range(0, len(order), config.batch_bags):
            batch = [train_bags[i] for i in order[start:start + config.batch_bags]]
            tape = ad.Tape()
            model.attach(tape)
            preds = [forward_bag(model, b)[0] for b in batch]
            loss = bce_loss(preds, [b.label for b in batch])
            ad.backward(loss)
            model.detach()
            adam_step(model.params, state, config)
            epoch_losses.append(float(loss.data))
        val_loss = _dataset_loss(model, val_bags)
        history["train_loss"].append(float(np.mean(epoch_losses)))
        history["val_loss"].append(val_loss)
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = model.state_dict()
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                break

    model.load_state_dict(best_state)
    return model, history
