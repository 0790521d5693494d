"""Effect supervision from the effect frame.

Visual branch: frame embedding concatenated with per-object crop embeddings
(state) or box encodings (relation), each passed through its own 2-layer
perceptron.  Textual branch: a scene graph of object / relation / attribute
nodes, encoded by a small graph-attention network, split into a state and a
relation subgraph and mean-pooled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .simulator import ObjectObs, stub_text_encoder

NODE_KINDS = ("object", "relation", "attribute")


class GraphValidationError(ValueError):
    def __init__(self, message: str, node_ids=()):
        self.node_ids = sorted(set(node_ids))
        super().__init__(f"{message}: {self.node_ids}" if self.node_ids else message)


# -- visual branch ---------------------------------------------------------


def positional_encode(box, dim: int) -> np.ndarray:
    """Sinusoidal box encoding; each of (cx, cy, w, h) gets dim/8 (sin, cos) pairs."""
    if dim % 8:
        raise ValueError(f"positional encoding needs dim divisible by 8, got {dim}")
    freqs = (2.0 ** np.arange(dim // 8)) * np.pi
    blocks = []
    for v in np.asarray(box, dtype=np.float64):
        ang = freqs * v
        blocks.append(np.stack([np.sin(ang), np.cos(ang)], axis=1).reshape(-1))
    return np.concatenate(blocks)


def slot_input(frame_emb: np.ndarray, slots: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``frame_emb || slot_1 || ... || slot_N`` with masked slots zeroed."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("at least one object slot must be real")
    slots = np.where(mask[:, None], np.asarray(slots, dtype=np.float64), 0.0)
    return np.concatenate([np.asarray(frame_emb, dtype=np.float64), slots.reshape(-1)])


def object_slots(objects: list[ObjectObs], max_objects: int, dim: int):
    """Crop and box-encoding slots padded to ``max_objects``; returns (crops, boxes, mask)."""
    crops = np.zeros((max_objects, dim))
    boxes = np.zeros((max_objects, dim))
    mask = np.zeros(max_objects, dtype=bool)
    for i, o in enumerate(objects[:max_objects]):
        crops[i] = o.crop
        boxes[i] = positional_encode(o.box, dim)
        mask[i] = True
    return crops, boxes, mask


def perceptron(P, prefix: str, x) -> Tensor:
    h = nx.tanh(nx.linear(x, P[f"{prefix}.w1"], P[f"{prefix}.b1"]))
    return nx.linear(h, P[f"{prefix}.w2"], P[f"{prefix}.b2"])


def visual_state_feature(P, frame_emb, crops, mask) -> Tensor:
    return perceptron(P, "theta_s", Tensor(slot_input(frame_emb, crops, mask)))


def visual_relation_feature(P, frame_emb, box_codes, mask) -> Tensor:
    return perceptron(P, "theta_r", Tensor(slot_input(frame_emb, box_codes, mask)))


# -- scene graphs ----------------------------------------------------------


@dataclass
class SceneGraph:
    ids: list[str]
    kinds: list[str]
    labels: list[str]
    embeddings: np.ndarray  # (N, D)
    edges: list[tuple[int, int]]

    def __len__(self):
        return len(self.ids)

    def indices(self, kind: str) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k == kind]

    def adjacency(self) -> np.ndarray:
        """Undirected adjacency with self-loops."""
        n = len(self)
        A = np.eye(n, dtype=bool)
        for s, d in self.edges:
            A[s, d] = A[d, s] = True
        return A

    def permuted(self, order) -> "SceneGraph":
        order = list(order)
        pos = {old: new for new, old in enumerate(order)}
        return SceneGraph(
            [self.ids[i] for i in order], [self.kinds[i] for i in order],
            [self.labels[i] for i in order], self.embeddings[order],
            [(pos[s], pos[d]) for s, d in self.edges],
        )


@dataclass
class SubgraphPair:
    state_nodes: list[int]
    state_edges: list[tuple[int, int]]
    relation_nodes: list[int]
    relation_edges: list[tuple[int, int]]


def validate_record(record: dict) -> None:
    nodes = record.get("nodes")
    edges = record.get("edges")
    if not isinstance(nodes, list) or not isinstance(edges, list):
        raise GraphValidationError("record needs 'nodes' and 'edges' lists")
    ids = [n.get("id") for n in nodes]
    dup = [i for i in ids if ids.count(i) > 1]
    if dup:
        raise GraphValidationError("duplicate node ids", dup)
    kind = {n["id"]: n.get("kind") for n in nodes}
    bad = [i for i, k in kind.items() if k not in NODE_KINDS]
    if bad:
        raise GraphValidationError("unknown node kind", bad)
    if not any(k == "object" for k in kind.values()):
        raise GraphValidationError("graph has no object node")
    dangling = [x for e in edges for x in e if x not in kind]
    malformed = [str(e) for e in edges if len(e) != 2]
    if malformed or dangling:
        raise GraphValidationError("dangling or malformed edge", malformed + dangling)

    incident = {i: [] for i in ids}
    for s, d in edges:
        incident[s].append((s, d))
        if d != s:
            incident[d].append((s, d))
    offenders = []
    for i, k in kind.items():
        inc = incident[i]
        if k == "attribute":
            if len(inc) != 1:
                offenders.append(i)
                continue
            s, d = inc[0]
            other = d if s == i else s
            if kind[other] != "object":
                offenders.append(i)
        elif k == "relation":
            ins = [s for s, d in inc if d == i]
            outs = [d for s, d in inc if s == i]
            if (len(inc) != 2 or len(ins) != 1 or len(outs) != 1
                    or kind[ins[0]] != "object" or kind[outs[0]] != "object"):
                offenders.append(i)
        else:
            if any(kind[s] == "object" and kind[d] == "object" for s, d in inc):
                offenders.append(i)
    if offenders:
        raise GraphValidationError("taxonomy violation", offenders)

    # connectivity over undirected edges
    seen = {ids[0]}
    stack = [ids[0]]
    nbrs = {i: set() for i in ids}
    for s, d in edges:
        nbrs[s].add(d)
        nbrs[d].add(s)
    while stack:
        for j in nbrs[stack.pop()]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    if len(seen) != len(ids):
        raise GraphValidationError("graph is not connected", [i for i in ids if i not in seen])


def build_scene_graph(record: dict, vocab_embeddings: dict) -> SceneGraph:
    """Validate a graphs.json record and embed its node labels."""
    validate_record(record)
    ids = [n["id"] for n in record["nodes"]]
    index = {i: k for k, i in enumerate(ids)}
    labels = [n["label"] for n in record["nodes"]]
    emb = np.stack([stub_text_encoder(lbl, vocab_embeddings) for lbl in labels])
    return SceneGraph(ids, [n["kind"] for n in record["nodes"]], labels, emb,
                      [(index[s], index[d]) for s, d in record["edges"]])


def decompose(graph: SceneGraph) -> SubgraphPair:
    objs = graph.indices("object")
    state = sorted(objs + graph.indices("attribute"))
    rel = sorted(objs + graph.indices("relation"))
    s_set, r_set = set(state), set(rel)
    return SubgraphPair(
        state, [(s, d) for s, d in graph.edges if s in s_set and d in s_set],
        rel, [(s, d) for s, d in graph.edges if s in r_set and d in r_set],
    )


# -- graph attention -------------------------------------------------------


@dataclass
class GraphBatch:
    """Several graphs packed block-diagonally for one GAT pass."""

    embeddings: np.ndarray  # (N_total, D)
    mask_add: np.ndarray  # (N_total, N_total), 0 on edges/self-loops, -1e30 elsewhere
    state_pool: np.ndarray  # (B, N_total) mean-pooling weights
    relation_pool: np.ndarray
    offsets: list[int]

    @classmethod
    def from_graphs(cls, graphs: list[SceneGraph]) -> "GraphBatch":
        n_total = sum(len(g) for g in graphs)
        emb = np.concatenate([g.embeddings for g in graphs])
        adj = np.zeros((n_total, n_total), dtype=bool)
        sp = np.zeros((len(graphs), n_total))
        rp = np.zeros((len(graphs), n_total))
        offsets = []
        off = 0
        for b, g in enumerate(graphs):
            n = len(g)
            adj[off:off + n, off:off + n] = g.adjacency()
            sub = decompose(g)
            if not sub.state_nodes or not sub.relation_nodes:
                raise ValueError("cannot pool an empty subgraph")
            sp[b, [off + i for i in sub.state_nodes]] = 1.0 / len(sub.state_nodes)
            rp[b, [off + i for i in sub.relation_nodes]] = 1.0 / len(sub.relation_nodes)
            offsets.append(off)
            off += n
        return cls(emb, np.where(adj, 0.0, nx.NEG_INF), sp, rp, offsets)


def gat_layer(P, layer: int, h: Tensor, mask_add: np.ndarray, return_attention=False):
    W, a = P[f"gat.{layer}.w"], P[f"gat.{layer}.a"]
    d = W.shape[1]
    wh = nx.matmul(h, W)
    src = nx.reshape(nx.matmul(wh, a[:d]), (-1, 1))
    dst = nx.reshape(nx.matmul(wh, a[d:]), (1, -1))
    logits = nx.add(nx.leaky_relu(nx.add(src, dst), 0.2), mask_add)
    att = nx.softmax(logits, axis=-1)
    out = nx.elu(nx.matmul(att, wh))
    return (out, att) if return_attention else out


def gat_encode(P, graphs, layers: int = 2, return_attention: bool = False):
    """Context-aware node features for a graph, a list of graphs, or a GraphBatch."""
    if isinstance(graphs, SceneGraph):
        graphs = [graphs]
    batch = graphs if isinstance(graphs, GraphBatch) else GraphBatch.from_graphs(graphs)
    h = Tensor(batch.embeddings)
    atts = []
    for layer in range(layers):
        h, att = gat_layer(P, layer, h, batch.mask_add, return_attention=True)
        atts.append(att)
    return (h, atts) if return_attention else h


def pool_subgraph(P, node_feats: Tensor, nodes, which: str) -> Tensor:
    """Mean of member-node features, then the learnable map into the effect space."""
    nodes = list(nodes)
    if not nodes:
        raise ValueError("cannot pool an empty subgraph")
    pooled = nx.mean(node_feats[np.asarray(nodes)], axis=0)
    return nx.linear(pooled, P[f"pool_{which}.w"], P[f"pool_{which}.b"])


def textual_features(P, batch: GraphBatch, layers: int = 2) -> tuple[Tensor, Tensor]:
    """Batched ``(t_s, t_r)``, each (B, D_e)."""
    tv = gat_encode(P, batch, layers)
    ts = nx.linear(nx.matmul(Tensor(batch.state_pool), tv), P["pool_s.w"], P["pool_s.b"])
    tr = nx.linear(nx.matmul(Tensor(batch.relation_pool), tv), P["pool_r.w"], P["pool_r.b"])
    return ts, tr


# -- parameters ------------------------------------------------------------


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_params(rng: np.random.Generator, dim: int, d_effect: int, max_objects: int,
                gat_layers: int = 2) -> dict[str, np.ndarray]:
    p = {}
    width = dim + max_objects * dim
    for br in ("theta_s", "theta_r"):
        p[f"{br}.w1"] = glorot(rng, width, d_effect)
        p[f"{br}.b1"] = np.zeros(d_effect)
        p[f"{br}.w2"] = glorot(rng, d_effect, d_effect)
        p[f"{br}.b2"] = np.zeros(d_effect)
    for layer in range(gat_layers):
        p[f"gat.{layer}.w"] = glorot(rng, dim, dim)
        p[f"gat.{layer}.a"] = rng.normal(0.0, 1.0 / np.sqrt(dim), size=2 * dim)
    for br in ("s", "r"):
        p[f"pool_{br}.w"] = glorot(rng, dim, d_effect)
        p[f"pool_{br}.b"] = np.zeros(d_effect)
    return p
