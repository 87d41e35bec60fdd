"""Stage-2 model: dual-edge-type multihead GAT, scalewise attention, and the
self-supervised InfoMax + scalewise objectives.

Spatial and cross-scale edges get separate weight matrices and attention
vectors per head; attention coefficients are softmaxed over each node's typed
neighborhood. Self-loops are added on the spatial type so isolated nodes keep
their own information. The scalewise attention network scores each aligned
patch position at every magnification level and softmaxes across levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import mil
from .autodiff import Tensor
from .graphs import scale_distance


class GatLayer:
    """One multihead GAT layer over spatial and cross-scale edges."""

    def __init__(self, in_dim=128, head_dim=32, heads=4, out_dim=128,
                 leaky_slope=0.2, seed=0):
        self.in_dim = in_dim
        self.head_dim = head_dim
        self.heads = heads
        self.out_dim = out_dim
        self.leaky_slope = leaky_slope
        rng = np.random.default_rng(seed)
        p = {}
        for h in range(heads):
            for kind in ("spatial", "cross"):
                p[f"h{h}.W_{kind}"] = mil.glorot(rng, in_dim, head_dim)
                p[f"h{h}.b_{kind}"] = np.zeros((1, head_dim))
                p[f"h{h}.a_{kind}"] = mil.glorot(rng, 2 * head_dim, 1)
        p["out.W"] = mil.glorot(rng, heads * head_dim, out_dim)
        p["out.b"] = np.zeros((1, out_dim))
        self.params = {k: Tensor(v) for k, v in p.items()}


class SanModel:
    """Per-level scorers plus a shared cross-scale scorer."""

    def __init__(self, num_levels=3, dim=128, seed=0):
        self.num_levels = num_levels
        self.dim = dim
        rng = np.random.default_rng(seed + 1)
        p = {}
        for m in range(num_levels):
            p[f"level{m}.a"] = mil.glorot(rng, dim, 1)
            p[f"level{m}.b"] = np.zeros((1, 1))
        p["cross.a"] = mil.glorot(rng, dim, 1)
        p["cross.b"] = np.zeros((1, 1))
        self.params = {k: Tensor(v) for k, v in p.items()}


def _attach(models, tape):
    for m in models:
        for t in m.params.values():
            t.tape = tape
            t.grad = None


def _detach(models):
    for m in models:
        for t in m.params.values():
            t.tape = None


def _typed_index(graph):
    """Directed (dst, src) index arrays per edge type; spatial gets self-loops."""
    n = len(graph.nodes)
    id_to_row = {node.node_id: i for i, node in enumerate(graph.nodes)}
    sp_dst, sp_src = [], []
    for a, b in graph.spatial_edges:
        ia, ib = id_to_row[a], id_to_row[b]
        sp_dst += [ia, ib]
        sp_src += [ib, ia]
    for i in range(n):
        sp_dst.append(i)
        sp_src.append(i)
    cr_dst, cr_src = [], []
    for a, b in graph.cross_edges:
        ia, ib = id_to_row[a], id_to_row[b]
        cr_dst += [ia, ib]
        cr_src += [ib, ia]
    return (np.array(sp_dst, dtype=np.intp), np.array(sp_src, dtype=np.intp),
            np.array(cr_dst, dtype=np.intp), np.array(cr_src, dtype=np.intp))


def gat_forward(layer, graph, features):
    """Run the layer; returns (N x out_dim features, attention record).

    The attention record maps ``(edge_type, head)`` to ``(dst_rows, psi)``
    with psi summing to 1 over each destination's typed neighborhood.
    """
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.data.shape[1] != layer.in_dim:
        raise ValueError(
            f"gat_forward: expected feature width {layer.in_dim}, got {x.data.shape[1]}")
    if not graph.nodes:
        raise ValueError("gat_forward: empty graph")
    n = len(graph.nodes)
    sp_dst, sp_src, cr_dst, cr_src = _typed_index(graph)
    p = layer.params
    attention = {}
    head_outputs = []
    for h in range(layer.heads):
        per_type = []
        for kind, dst, src in (("spatial", sp_dst, sp_src), ("cross", cr_dst, cr_src)):
            if dst.size == 0:
                per_type.append(Tensor(np.zeros((n, layer.head_dim))))
                continue
            wh = ad.affine(x, p[f"h{h}.W_{kind}"], p[f"h{h}.b_{kind}"])
            a = p[f"h{h}.a_{kind}"]
            a_dst = _slice_rows(a, 0, layer.head_dim)
            a_src = _slice_rows(a, layer.head_dim, 2 * layer.head_dim)
            e = ad.leaky_relu(
                ad.add(ad.matmul(ad.gather_rows(wh, dst), a_dst),
                       ad.matmul(ad.gather_rows(wh, src), a_src)),
                slope=layer.leaky_slope)
            # per-destination softmax; the constant max shift cancels exactly
            seg_max = np.full((n, 1), -np.inf)
            np.maximum.at(seg_max, dst, e.data)
            shifted = ad.sub(e, seg_max[dst])
            ex = ad.exp(shifted)
            denom = ad.scatter_sum(ex, dst, n)
            psi = ad.div(ex, ad.gather_rows(denom, dst))
            attention[(kind, h)] = (dst, psi.data.copy())
            msg = ad.mul(psi, ad.gather_rows(wh, src))
            per_type.append(ad.scatter_sum(msg, dst, n))
        head_outputs.append(ad.add(per_type[0], per_type[1]))
    combined = ad.concat(head_outputs, axis=1)
    out = ad.affine(combined, p["out.W"], p["out.b"])
    return out, attention


def _slice_rows(t, start, stop):
    idx = np.arange(start, stop, dtype=np.intp)
    return ad.gather_rows(t, idx)


def alignment_columns(graph):
    """Per level-0 node, the aligned node row at every level.

    Alignment follows the cross-edge parent relation, taking the nearest
    parent by scale distance; when a level has no parent the previous level's
    row is carried forward.
    """
    id_to_row = {node.node_id: i for i, node in enumerate(graph.nodes)}
    by_id = {node.node_id: node for node in graph.nodes}
    parents = {}  # fine node_id -> {coarser level: nearest coarse node_id}
    for coarse_id, fine_id in graph.cross_edges:
        coarse, fine = by_id[coarse_id], by_id[fine_id]
        best = parents.setdefault(fine_id, {})
        cur = best.get(coarse.level)
        if cur is None or scale_distance(coarse, fine) < scale_distance(by_id[cur], fine):
            best[coarse.level] = coarse_id

    levels = graph.levels()
    columns = []
    for node in graph.nodes:
        if node.level != levels[0]:
            continue
        col = [id_to_row[node.node_id]]
        current = node.node_id
        for level in levels[1:]:
            parent = parents.get(current, {}).get(level)
            if parent is None:
                col.append(col[-1])
            else:
                col.append(id_to_row[parent])
                current = parent
        columns.append(col)
    return np.array(columns, dtype=np.intp)  # P x M


def san_level_attention(san, node_features, columns):
    """Softmax level scores per aligned position; returns a P x M tensor."""
    if columns.shape[1] != san.num_levels:
        raise ValueError(
            f"san_level_attention: {columns.shape[1]} levels vs model's {san.num_levels}")
    x = node_features if isinstance(node_features, Tensor) else Tensor(node_features)
    scores = []
    for m in range(san.num_levels):
        h_m = ad.gather_rows(x, columns[:, m])
        scores.append(ad.affine(h_m, san.params[f"level{m}.a"], san.params[f"level{m}.b"]))
    return ad.softmax(ad.concat(scores, axis=1), axis=1)


def cross_scale_weights(san, node_features, graph):
    """Softmax c^m over levels from mean-pooled per-level features."""
    x = node_features if isinstance(node_features, Tensor) else Tensor(node_features)
    levels = graph.levels()
    pooled_scores = []
    for level in levels:
        rows = np.array([i for i, n in enumerate(graph.nodes) if n.level == level],
                        dtype=np.intp)
        pooled = ad.tmean(ad.gather_rows(x, rows), axis=0, keepdims=True)
        pooled_scores.append(ad.affine(pooled, san.params["cross.a"], san.params["cross.b"]))
    return ad.reshape(ad.softmax(ad.concat(pooled_scores, axis=1), axis=1), (len(levels),))


def san_fuse(san, node_features, columns, level_scores, c):
    """h_multi per position: sum over levels of c^m * s^m_i * h^m_i."""
    x = node_features if isinstance(node_features, Tensor) else Tensor(node_features)
    total = None
    for m in range(san.num_levels):
        h_m = ad.gather_rows(x, columns[:, m])
        s_m = _slice_cols(level_scores, m)
        c_m = ad.reshape(_slice_cols(ad.reshape(c, (1, san.num_levels)), m), (1, 1))
        term = ad.mul(ad.mul(s_m, h_m), c_m)
        total = term if total is None else ad.add(total, term)
    return total


def _slice_cols(t, m):
    return ad.transpose(ad.gather_rows(ad.transpose(t), np.array([m], dtype=np.intp)))


def infomax_loss(node_embeddings, graph_embedding, tau=0.5):
    """Contrastive loss pulling nodes toward the graph vector.

    Embeddings are L2-normalized before cosine similarity; negatives are all
    other nodes. With a single node the ratio is 1 and the loss 0.
    """
    if tau <= 0:
        raise ValueError("infomax_loss: tau must be positive")
    h = node_embeddings if isinstance(node_embeddings, Tensor) else Tensor(node_embeddings)
    g = graph_embedding if isinstance(graph_embedding, Tensor) else Tensor(graph_embedding)
    n = h.data.shape[0]
    hn = ad.l2_normalize(h, axis=1)
    gn = ad.l2_normalize(ad.reshape(g, (1, -1)), axis=1)
    pos = ad.exp(ad.div(ad.matmul(hn, ad.transpose(gn)), tau))  # N x 1
    sims = ad.matmul(hn, ad.transpose(hn))  # N x N
    mask = 1.0 - np.eye(n)
    neg = ad.tsum(ad.mul(ad.exp(ad.div(sims, tau)), mask), axis=1, keepdims=True)
    ratio = ad.div(pos, ad.add(pos, neg))
    return ad.reshape(ad.neg(ad.tmean(ad.log(ratio))), ())


def scalewise_loss(level_embeddings, level_weights, tau=0.5, contrastive=False):
    """Interscale consistency loss over level pairs.

    ``sim`` for a pair of levels is the mean pairwise cosine similarity of the
    two levels' L2-normalized embeddings. The denominator as published
    contains only the 1e-8 stabilizer; ``contrastive=True`` additionally adds
    mean intra-level similarity terms as negatives.
    """
    if tau <= 0:
        raise ValueError("scalewise_loss: tau must be positive")
    m = len(level_embeddings)
    if m <= 1:
        return Tensor(0.0)
    normed = [ad.l2_normalize(e if isinstance(e, Tensor) else Tensor(e), axis=1)
              for e in level_embeddings]
    means = [ad.tmean(e, axis=0, keepdims=True) for e in normed]
    total = None
    for a in range(m):
        for b in range(a + 1, m):
            w = float(level_weights[a]) * float(level_weights[b])
            if w == 0.0:
                continue
            sim = ad.tsum(ad.mul(means[a], means[b]))
            num = ad.exp(ad.div(sim, tau))
            denom = ad.add(num, 1e-8)
            if contrastive:
                for lv in (a, b):
                    intra = ad.tsum(ad.mul(means[lv], means[lv]))
                    denom = ad.add(denom, ad.exp(ad.div(intra, tau)))
            term = ad.mul(ad.neg(ad.log(ad.div(num, denom))), w)
            total = term if total is None else ad.add(total, term)
    if total is None:
        return Tensor(0.0)
    return ad.reshape(total, ())


@dataclass
class Stage2Config:
    learning_rate: float = 0.0005
    max_epochs: int = 100
    patience: int = 4
    seed: int = 0
    tau: float = 0.5
    heads: int = 4
    head_dim: int = 32
    out_dim: int = 128
    scale_loss_contrastive: bool = False
    val_fraction: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Stage2Model:
    """GAT layer + SAN bundle with the per-graph forward pass."""

    def __init__(self, num_levels, in_dim=128, config=None):
        config = config or Stage2Config()
        self.config = config
        self.gat = GatLayer(in_dim=in_dim, head_dim=config.head_dim,
                            heads=config.heads, out_dim=config.out_dim,
                            seed=config.seed)
        self.san = SanModel(num_levels=num_levels, dim=config.out_dim,
                            seed=config.seed)

    @property
    def params(self):
        merged = {f"gat.{k}": v for k, v in self.gat.params.items()}
        merged.update({f"san.{k}": v for k, v in self.san.params.items()})
        return merged

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state):
        for k, t in self.params.items():
            t.data = np.array(state[k], dtype=np.float64)

    def forward(self, graph, features, columns=None):
        """Returns (h_multi, level_scores, c, gat_features, attention)."""
        if columns is None:
            columns = alignment_columns(graph)
        gat_out, attention = gat_forward(self.gat, graph, features)
        s = san_level_attention(self.san, gat_out, columns)
        c = cross_scale_weights(self.san, gat_out, graph)
        h_multi = san_fuse(self.san, gat_out, columns, s, c)
        return h_multi, s, c, gat_out, attention

    def loss(self, graph, features, columns=None):
        h_multi, s, c, gat_out, _ = self.forward(graph, features, columns)
        g = ad.tmean(h_multi, axis=0, keepdims=True)
        li = infomax_loss(h_multi, g, tau=self.config.tau)
        levels = graph.levels()
        level_embeddings = []
        for level in levels:
            rows = np.array([i for i, n in enumerate(graph.nodes) if n.level == level],
                            dtype=np.intp)
            level_embeddings.append(ad.gather_rows(gat_out, rows))
        ls = scalewise_loss(level_embeddings, c.data, tau=self.config.tau,
                            contrastive=self.config.scale_loss_contrastive)
        return ad.add(li, ls), li, ls


def train_stage2(graphs, feature_sets, config=None):
    """Self-supervised training over a set of graphs.

    ``feature_sets[i]`` holds the Stage-1 projected node features for
    ``graphs[i]`` in node order. Returns (model, history) with the best
    validation-loss parameters restored.
    """
    config = config or Stage2Config()
    if not graphs:
        raise ValueError("train_stage2: empty graph set")
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(graphs))
    n_val = max(1, int(round(config.val_fraction * len(graphs)))) if len(graphs) > 1 else 0
    val_idx = set(perm[:n_val].tolist())
    train_idx = [i for i in range(len(graphs)) if i not in val_idx]
    if not train_idx:
        train_idx, val_idx = list(range(len(graphs))), set(range(len(graphs)))

    num_levels = max(len(g.levels()) for g in graphs)
    in_dim = feature_sets[0].shape[1]
    model = Stage2Model(num_levels=num_levels, in_dim=in_dim, config=config)
    state = mil.AdamState(model.params)
    columns = [alignment_columns(g) for g in graphs]

    def eval_loss(indices):
        vals = []
        for i in indices:
            total, _, _ = model.loss(graphs[i], feature_sets[i], columns[i])
            vals.append(float(total.data))
        return float(np.mean(vals))

    history = {"train_loss": [], "val_loss": []}
    best_loss = np.inf
    best_state = model.state_dict()
    stall = 0
    val_list = sorted(val_idx) if val_idx else train_idx

    for _epoch in range(config.max_epochs):
        order = rng.permutation(len(train_idx))
        losses = []
        for j in order:
            i = train_idx[j]
            tape = ad.Tape()
            _attach([model.gat, model.san], tape)
            total, _, _ = model.loss(graphs[i], feature_sets[i], columns[i])
            ad.backward(total)
            _detach([model.gat, model.san])
            adam_step_params(model.params, state, config)
            losses.append(float(total.data))
        val_loss = eval_loss(val_list)
        history["train_loss"].append(float(np.mean(losses)))
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


def adam_step_params(params, state, config):
    mil.adam_step(params, state, config)
