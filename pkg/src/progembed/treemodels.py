"""Recursive tree models over binarized modeling ASTs.

Every node kind has fixed arity after binarization, so each kind carries one
m-by-m weight matrix per child slot plus an m-by-m bias; leaves carry a
single matrix. A node's activation is the tanh of the weighted child
activations plus, when a per-subtree embedding matrix is available, an
injection term scaled by mu. With an empty lookup (mu effectively 0) this is
the plain parametric baseline.

Two trainers: postcondition prediction through a frozen state autoencoder,
and per-label sigmoid heads over the flattened root activation for feedback
propagation. Gradients run by backpropagation through structure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsl import (
    CanonicalId,
    Node,
    NodeKind,
    binarized_arity,
    canonical_id,
)
from .interpreter import HoareTriple
from .npm import NpmModel, TripleArrays, _block_argmax_accuracy, vectorize_triples
from .numcore import Adagrad, bce_with_logits, make_rng, sigmoid, softmax_xent

TREE_KINDS = tuple(
    k for k in NodeKind if k not in (NodeKind.DEF, NodeKind.CALL)
)


@dataclass
class TreeHyper:
    lr: float = 0.05
    lam: float = 1e-4
    batch_size: int = 16
    epochs: int = 200
    seed: int = 0
    mu: float = 1.0

    def validate(self):
        if min(self.batch_size, self.epochs) < 1 or self.lr <= 0 or self.lam < 0:
            raise ValueError("bad tree hyperparameters")


@dataclass
class TreeParams:
    """Per-kind weights keyed by checkpoint tensor name.

    Internal kind K with arity a: "W.K.0".."W.K.a-1" and "b.K"; leaf kind K:
    "leaf.K". All tensors are (m, m).
    """

    m: int
    tensors: dict[str, np.ndarray]

    def copy(self) -> "TreeParams":
        return TreeParams(self.m, {k: v.copy() for k, v in self.tensors.items()})


def init_tree_params(m: int, rng: np.random.Generator) -> TreeParams:
    tensors: dict[str, np.ndarray] = {}
    scale = 1.0 / np.sqrt(m)
    for kind in TREE_KINDS:
        arity = binarized_arity(kind)
        if arity == 0:
            tensors[f"leaf.{kind.name}"] = rng.normal(0.0, 0.5, (m, m))
        else:
            for i in range(arity):
                tensors[f"W.{kind.name}.{i}"] = rng.normal(0.0, scale, (m, m))
            tensors[f"b.{kind.name}"] = np.zeros((m, m))
    return TreeParams(m, tensors)


@dataclass
class FlatTree:
    """Post-order arrays of a binarized tree; children precede parents."""

    kinds: list[NodeKind]
    children: list[tuple[int, ...]]
    digests: list[CanonicalId]

    @property
    def root(self) -> int:
        return len(self.kinds) - 1


def flatten_tree(ast: Node) -> FlatTree:
    kinds: list[NodeKind] = []
    children: list[tuple[int, ...]] = []
    digests: list[CanonicalId] = []

    def visit(node: Node) -> int:
        idx = tuple(visit(c) for c in node.children)
        if len(idx) != binarized_arity(node.kind):
            raise ValueError(f"{node.kind} has loose arity; binarize the tree first")
        kinds.append(node.kind)
        children.append(idx)
        digests.append(canonical_id(node))
        return len(kinds) - 1

    visit(ast)
    return FlatTree(kinds, children, digests)


def tree_forward(
    tree: Node | FlatTree,
    params: TreeParams,
    npm_lookup: dict[CanonicalId, np.ndarray] | None = None,
    mu: float = 0.0,
) -> tuple[np.ndarray, list[np.ndarray], FlatTree]:
    """Compute all node activations; returns (root activation, acts, flat)."""
    flat = tree if isinstance(tree, FlatTree) else flatten_tree(tree)
    acts: list[np.ndarray] = []
    for kind, kids, digest in zip(flat.kinds, flat.children, flat.digests):
        if kids:
            Z = params.tensors[f"b.{kind.name}"].copy()
            for i, c in enumerate(kids):
                Z += params.tensors[f"W.{kind.name}.{i}"] @ acts[c]
        else:
            Z = params.tensors[f"leaf.{kind.name}"].copy()
        if mu != 0.0 and npm_lookup is not None:
            M = npm_lookup.get(digest)
            if M is not None:
                Z += mu * M
        acts.append(np.tanh(Z))
    return acts[flat.root], acts, flat


def tree_backward(
    flat: FlatTree,
    acts: list[np.ndarray],
    params: TreeParams,
    d_root: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate parameter gradients given dLoss/dRootActivation."""
    dA = [None] * len(acts)
    dA[flat.root] = d_root
    for i in range(flat.root, -1, -1):
        if dA[i] is None:
            continue
        dZ = dA[i] * (1.0 - acts[i] * acts[i])
        kind = flat.kinds[i]
        kids = flat.children[i]
        if not kids:
            _add(grads, f"leaf.{kind.name}", dZ)
            continue
        _add(grads, f"b.{kind.name}", dZ)
        for j, c in enumerate(kids):
            name = f"W.{kind.name}.{j}"
            _add(grads, name, dZ @ acts[c].T)
            back = params.tensors[name].T @ dZ
            dA[c] = back if dA[c] is None else dA[c] + back


def _add(grads: dict, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value.copy()


def _reg_loss_and_grads(params: TreeParams, lam: float, grads: dict) -> float:
    reg = 0.0
    for name, W in params.tensors.items():
        reg += 0.5 * lam * float((W * W).sum())
        _add(grads, name, lam * W)
    return reg


# --- postcondition prediction (the parametric baseline) -----------------------


def rnn_post_loss_and_grads(
    params: TreeParams,
    trees: dict[CanonicalId, FlatTree],
    data: TripleArrays,
    idx: np.ndarray,
    base: NpmModel,
    hyper: TreeHyper,
    F_all: np.ndarray | None = None,
):
    """Prediction loss over one batch of triples with frozen encoder/decoder.

    The root activation of each subtree's AST acts as its linear map. Returns
    (loss, gradient dict over tree tensors).
    """
    if F_all is None:
        F_all = base.encode_batch(data.P)
    starts = base.layout.block_starts
    groups: dict[CanonicalId, list[int]] = {}
    for i in idx:
        groups.setdefault(data.digests[i], []).append(i)

    n = len(idx)
    loss = 0.0
    grads: dict[str, np.ndarray] = {}
    for digest, rows in groups.items():
        rows = np.array(rows)
        root, acts, flat = tree_forward(trees[digest], params)
        F = F_all[rows]
        G = F @ root.T
        batch_loss, _, dlogits = softmax_xent(
            G @ base.W_dec.T + base.b_dec, data.Q[rows], starts
        )
        loss += float(batch_loss.sum()) / n
        dG = (dlogits / n) @ base.W_dec
        d_root = dG.T @ F
        tree_backward(flat, acts, params, d_root, grads)
    loss += _reg_loss_and_grads(params, hyper.lam, grads)
    return loss, grads


def train_rnn_post(
    triples: list[HoareTriple],
    asts: dict[CanonicalId, Node],
    base: NpmModel,
    hyper: TreeHyper,
) -> TreeParams:
    """Fit per-kind tree weights to predict postconditions.

    `base` supplies the frozen smart-init encoder/decoder; its per-subtree
    matrices are not consulted (the injection coefficient is zero here).
    """
    hyper.validate()
    rng = make_rng(hyper.seed)
    params = init_tree_params(base.m, rng)
    data = vectorize_triples(triples, base.layout)
    for t in triples:
        if t.subtree not in asts:
            raise ValueError(f"no AST registered for subtree {t.subtree.hex[:12]}")
    trees = {dg: flatten_tree(asts[dg]) for dg in data.digest_rows}
    F_all = base.encode_batch(data.P)
    opt = Adagrad(hyper.lr)
    for _ in range(hyper.epochs):
        order = rng.permutation(data.n)
        for lo in range(0, data.n, hyper.batch_size):
            idx = order[lo : lo + hyper.batch_size]
            loss, grads = rnn_post_loss_and_grads(
                params, trees, data, idx, base, hyper, F_all
            )
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite tree training loss {loss}")
            opt.step(params.tensors, grads)
    return params


def rnn_prediction_accuracy(
    params: TreeParams,
    triples: list[HoareTriple],
    asts: dict[CanonicalId, Node],
    base: NpmModel,
) -> float:
    """Mean per-variable accuracy of tree-map predictions; total over inputs."""
    data = vectorize_triples(triples, base.layout)
    F = base.encode_batch(data.P)
    G = np.zeros_like(F)
    roots: dict[CanonicalId, np.ndarray] = {}
    for dg, rows in data.digest_rows.items():
        if dg not in roots:
            roots[dg], _, _ = tree_forward(asts[dg], params)
        G[rows] = F[rows] @ roots[dg].T
    probs = base.decode_batch(G)
    return _block_argmax_accuracy(probs, data.Q, base.layout)


# --- feedback heads ------------------------------------------------------------


@dataclass
class FeedbackHeads:
    """One linear+sigmoid head per label over the flattened root activation."""

    labels: list[str]
    W: np.ndarray  # (n_labels, m*m)
    b: np.ndarray  # (n_labels,)

    def copy(self) -> "FeedbackHeads":
        return FeedbackHeads(list(self.labels), self.W.copy(), self.b.copy())


def init_heads(labels: list[str], m: int) -> FeedbackHeads:
    return FeedbackHeads(list(labels), np.zeros((len(labels), m * m)), np.zeros(len(labels)))


def feedback_loss_and_grads(
    params: TreeParams,
    heads: FeedbackHeads,
    exemplars: list[tuple[FlatTree, np.ndarray]],
    idx,
    npm_lookup,
    hyper: TreeHyper,
):
    """Summed per-label binary cross-entropy over one exemplar batch.

    Returns (loss, tree grads, head W grad, head b grad). The injected
    subtree matrices are inputs, never updated.
    """
    n = len(idx)
    grads: dict[str, np.ndarray] = {}
    dW = np.zeros_like(heads.W)
    db = np.zeros_like(heads.b)
    loss = 0.0
    for i in idx:
        flat, y = exemplars[i]
        root, acts, _ = tree_forward(flat, params, npm_lookup, hyper.mu)
        x = root.reshape(-1)
        z = heads.W @ x + heads.b
        bce, dz = bce_with_logits(z, y)
        loss += float(bce.sum()) / n
        dz /= n
        dW += np.outer(dz, x)
        db += dz
        d_root = (heads.W.T @ dz).reshape(root.shape)
        tree_backward(flat, acts, params, d_root, grads)
    loss += _reg_loss_and_grads(params, hyper.lam, grads)
    loss += 0.5 * hyper.lam * float((heads.W**2).sum())
    dW += hyper.lam * heads.W
    return loss, grads, dW, db


def train_feedback(
    exemplars: list[tuple[Node, set[str]]],
    labels: list[str],
    m: int,
    npm_lookup: dict[CanonicalId, np.ndarray] | None,
    hyper: TreeHyper,
) -> tuple[TreeParams, FeedbackHeads]:
    """Fit tree weights and per-label heads on annotated exemplars.

    An embedding lookup injects fixed per-subtree matrices scaled by mu; with
    None (or mu=0) the model is the purely parametric variant. There is no
    holdout: every exemplar trains.
    """
    hyper.validate()
    if not exemplars:
        raise ValueError("empty exemplar set")
    rng = make_rng(hyper.seed)
    params = init_tree_params(m, rng)
    heads = init_heads(labels, m)
    label_pos = {name: i for i, name in enumerate(labels)}
    flat_exemplars = []
    for ast, tags in exemplars:
        y = np.zeros(len(labels))
        for tag in tags:
            y[label_pos[tag]] = 1.0
        flat_exemplars.append((flatten_tree(ast), y))
    opt = Adagrad(hyper.lr)
    head_params = {"head.W": heads.W, "head.b": heads.b}
    n = len(flat_exemplars)
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, hyper.batch_size):
            idx = order[lo : lo + hyper.batch_size]
            loss, grads, dW, db = feedback_loss_and_grads(
                params, heads, flat_exemplars, idx, npm_lookup, hyper
            )
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite feedback loss {loss}")
            opt.step(params.tensors, grads)
            opt.step(head_params, {"head.W": dW, "head.b": db})
    return params, heads


def predict_feedback(
    ast: Node | FlatTree,
    params: TreeParams,
    heads: FeedbackHeads,
    npm_lookup: dict[CanonicalId, np.ndarray] | None = None,
    mu: float = 0.0,
) -> np.ndarray:
    """Per-label probabilities for one program, aligned with heads.labels."""
    root, _, _ = tree_forward(ast, params, npm_lookup, mu)
    return sigmoid(heads.W @ root.reshape(-1) + heads.b)


# --- checkpoints ----------------------------------------------------------------


def tree_to_tensors(params: TreeParams, heads: FeedbackHeads | None = None):
    tensors = {"meta.m": np.array([float(params.m)])}
    tensors.update(params.tensors)
    if heads is not None:
        for i, label in enumerate(heads.labels):
            tensors[f"head.{label}"] = np.concatenate([heads.W[i], heads.b[i : i + 1]])
    return tensors


def tree_from_tensors(tensors) -> tuple[TreeParams, FeedbackHeads | None]:
    m = int(tensors["meta.m"][0])
    weights = {}
    labels = []
    for name, arr in tensors.items():
        if name.startswith(("W.", "b.", "leaf.")):
            weights[name] = arr
        elif name.startswith("head."):
            labels.append(name[5:])
    params = TreeParams(m, weights)
    if not labels:
        return params, None
    labels.sort()
    W = np.stack([tensors[f"head.{lb}"][:-1] for lb in labels])
    b = np.array([tensors[f"head.{lb}"][-1] for lb in labels])
    return params, FeedbackHeads(labels, W, b)
