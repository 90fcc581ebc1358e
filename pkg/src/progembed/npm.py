"""Per-subtree matrix embeddings trained over observed (pre, subtree, post)
triples.

States encode through a shared tanh encoder into an m-dimensional feature
space where each unique subtree acts as a linear map; a shared block-softmax
decoder reconstructs states from features. Initialization is an autoencoder
over the observed states followed by one ridge regression per subtree; joint
training then refines everything together with minibatch Adagrad.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsl import CanonicalId
from .gridworld import StateLayout, WorldState, state_variable_accuracy
from .interpreter import HoareTriple
from .numcore import (
    Adagrad,
    block_softmax,
    cross_entropy,
    make_rng,
    ridge_solve,
    softmax_xent,
)


class UnknownSubtreeError(KeyError):
    """Raised when asked to predict for a subtree that was never trained."""


@dataclass
class NpmHyper:
    m: int = 30
    lam: float = 1e-4
    lam_ridge: float = 1e-3
    lr: float = 0.1
    batch_size: int = 64
    epochs: int = 200
    seed: int = 0
    # whether the per-subtree matrices join the weight regularizer
    regularize_program_matrices: bool = True
    val_fraction: float = 0.1
    patience: int = 10

    def validate(self):
        if min(self.m, self.batch_size, self.epochs) < 1:
            raise ValueError("m, batch_size, epochs must be positive")
        if min(self.lam, self.lam_ridge, self.lr) < 0:
            raise ValueError("rates must be non-negative")


@dataclass
class NpmModel:
    W_enc: np.ndarray  # (m, d)
    b_enc: np.ndarray  # (m,)
    W_dec: np.ndarray  # (d, m)
    b_dec: np.ndarray  # (d,)
    program_matrices: dict[CanonicalId, np.ndarray]
    m: int
    layout: StateLayout
    loss_curve: list = field(default_factory=list)

    def copy(self) -> "NpmModel":
        return NpmModel(
            W_enc=self.W_enc.copy(),
            b_enc=self.b_enc.copy(),
            W_dec=self.W_dec.copy(),
            b_dec=self.b_dec.copy(),
            program_matrices={k: v.copy() for k, v in self.program_matrices.items()},
            m=self.m,
            layout=self.layout,
            loss_curve=list(self.loss_curve),
        )

    # encode/decode operate on single vectors; training uses batched forms
    def encode(self, P: np.ndarray) -> np.ndarray:
        P = np.asarray(P)
        if P.shape != (self.layout.dim,):
            raise ValueError(f"expected state dimension {self.layout.dim}")
        return np.tanh(self.W_enc @ P + self.b_enc)

    def decode(self, f: np.ndarray) -> np.ndarray:
        return block_softmax(self.W_dec @ f + self.b_dec, self.layout.block_starts)

    def matrix(self, subtree: CanonicalId) -> np.ndarray:
        try:
            return self.program_matrices[subtree]
        except KeyError:
            raise UnknownSubtreeError(subtree.hex) from None

    def predict_post(self, P: np.ndarray, subtree: CanonicalId) -> np.ndarray:
        return self.decode(self.matrix(subtree) @ self.encode(P))

    def predict_state(self, P: np.ndarray, subtree: CanonicalId) -> WorldState:
        return self.layout.decode(self.predict_post(P, subtree))

    def encode_batch(self, P: np.ndarray) -> np.ndarray:
        return np.tanh(P @ self.W_enc.T + self.b_enc)

    def decode_batch(self, F: np.ndarray) -> np.ndarray:
        return block_softmax(F @ self.W_dec.T + self.b_dec, self.layout.block_starts)


# --- data plumbing -----------------------------------------------------------


@dataclass
class TripleArrays:
    """Triples vectorized against one layout, grouped by subtree id."""

    P: np.ndarray  # (n, d)
    Q: np.ndarray  # (n, d)
    digests: list[CanonicalId]
    digest_rows: dict[CanonicalId, np.ndarray]

    @property
    def n(self) -> int:
        return self.P.shape[0]


def vectorize_triples(triples: list[HoareTriple], layout: StateLayout) -> TripleArrays:
    P = layout.encode_batch([t.pre for t in triples])
    Q = layout.encode_batch([t.post for t in triples])
    rows: dict[CanonicalId, list[int]] = {}
    digests = []
    for i, t in enumerate(triples):
        digests.append(t.subtree)
        rows.setdefault(t.subtree, []).append(i)
    return TripleArrays(
        P=P,
        Q=Q,
        digests=digests,
        digest_rows={k: np.array(v) for k, v in rows.items()},
    )


def split_triples(
    triples: list[HoareTriple], test_fraction: float, rng: np.random.Generator
) -> tuple[list[HoareTriple], list[HoareTriple]]:
    """Triple-level split, stratified so every test subtree id keeps at least
    one training triple."""
    by_digest: dict[CanonicalId, list[int]] = {}
    for i, t in enumerate(triples):
        by_digest.setdefault(t.subtree, []).append(i)
    test_idx: list[int] = []
    for idx in by_digest.values():
        if len(idx) < 2:
            continue
        k = min(len(idx) - 1, max(1, round(test_fraction * len(idx))))
        picks = rng.choice(len(idx), size=k, replace=False)
        test_idx.extend(idx[p] for p in picks)
    test_set = set(test_idx)
    train = [t for i, t in enumerate(triples) if i not in test_set]
    test = [triples[i] for i in sorted(test_set)]
    return train, test


# --- training ----------------------------------------------------------------


def _init_encoder(m: int, d: int, rng: np.random.Generator):
    W_enc = rng.normal(0.0, 1.0 / np.sqrt(d), size=(m, d))
    b_enc = np.zeros(m)
    W_dec = rng.normal(0.0, 1.0 / np.sqrt(m), size=(d, m))
    b_dec = np.zeros(d)
    return W_enc, b_enc, W_dec, b_dec


def _unique_states(data: TripleArrays) -> np.ndarray:
    seen: dict[bytes, int] = {}
    rows = []
    for S in (data.P, data.Q):
        for i in range(S.shape[0]):
            key = S[i].tobytes()
            if key not in seen:
                seen[key] = len(rows)
                rows.append(S[i])
    return np.array(rows)


def _pretrain_autoencoder(states, m, layout, hyper, rng):
    W_enc, b_enc, W_dec, b_dec = _init_encoder(m, layout.dim, rng)
    params = {"W_enc": W_enc, "b_enc": b_enc, "W_dec": W_dec, "b_dec": b_dec}
    opt = Adagrad(hyper.lr)
    n = states.shape[0]
    starts = layout.block_starts
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, hyper.batch_size):
            idx = order[lo : lo + hyper.batch_size]
            S = states[idx]
            F = np.tanh(S @ params["W_enc"].T + params["b_enc"])
            logits = F @ params["W_dec"].T + params["b_dec"]
            _, _, dlogits = softmax_xent(logits, S, starts)
            dlogits /= len(idx)
            dF = dlogits @ params["W_dec"]
            dZ = dF * (1.0 - F * F)
            grads = {
                "W_dec": dlogits.T @ F,
                "b_dec": dlogits.sum(0),
                "W_enc": dZ.T @ S,
                "b_enc": dZ.sum(0),
            }
            opt.step(params, grads)
    return params


def smart_init(
    triples: list[HoareTriple], layout: StateLayout, hyper: NpmHyper
) -> NpmModel:
    """Autoencoder over the observed states, then one ridge fit per subtree.

    The result is a complete model; using it without joint training is the
    initialization-only baseline.
    """
    hyper.validate()
    if not triples:
        raise ValueError("no triples to train on")
    rng = make_rng(hyper.seed)
    data = vectorize_triples(triples, layout)
    states = _unique_states(data)
    params = _pretrain_autoencoder(states, hyper.m, layout, hyper, rng)
    model = NpmModel(
        W_enc=params["W_enc"],
        b_enc=params["b_enc"],
        W_dec=params["W_dec"],
        b_dec=params["b_dec"],
        program_matrices={},
        m=hyper.m,
        layout=layout,
    )
    F_all = model.encode_batch(data.P)
    G_all = model.encode_batch(data.Q)
    for digest, rows in data.digest_rows.items():
        FP = F_all[rows].T  # columns are encodings
        FQ = G_all[rows].T
        model.program_matrices[digest] = ridge_solve(FQ, FP, hyper.lam_ridge)
    return model


def joint_loss_and_grads(model: NpmModel, data: TripleArrays, idx, hyper: NpmHyper):
    """Objective and gradients on one batch of triples.

    The objective is mean prediction cross-entropy + mean reconstruction
    cross-entropy + (lam/2) L2 on weight matrices (never biases); only
    subtree matrices occurring in the batch enter the regularizer, matching
    the sparse-update rule. Returns (full loss, data loss, gradient dict);
    subtree gradients are keyed by their CanonicalId.
    """
    P, Q = data.P[idx], data.Q[idx]
    B = len(idx)
    starts = model.layout.block_starts
    F = np.tanh(P @ model.W_enc.T + model.b_enc)
    groups: dict[CanonicalId, list[int]] = {}
    for row, i in enumerate(idx):
        groups.setdefault(data.digests[i], []).append(row)

    G = np.zeros_like(F)
    for dg, rows in groups.items():
        G[rows] = F[rows] @ model.program_matrices[dg].T

    pred_loss, _, dpred = softmax_xent(G @ model.W_dec.T + model.b_dec, Q, starts)
    auto_loss, _, dauto = softmax_xent(F @ model.W_dec.T + model.b_dec, P, starts)
    dpred /= B
    dauto /= B

    grads = {
        "W_dec": dpred.T @ G + dauto.T @ F + hyper.lam * model.W_dec,
        "b_dec": dpred.sum(0) + dauto.sum(0),
    }
    dG = dpred @ model.W_dec
    dF = dauto @ model.W_dec
    reg = 0.5 * hyper.lam * float((model.W_enc**2).sum() + (model.W_dec**2).sum())
    for dg, rows in groups.items():
        M = model.program_matrices[dg]
        dM = dG[rows].T @ F[rows]
        if hyper.regularize_program_matrices:
            dM = dM + hyper.lam * M
            reg += 0.5 * hyper.lam * float((M * M).sum())
        grads[dg] = dM
        dF[rows] += dG[rows] @ M
    dZ = dF * (1.0 - F * F)
    grads["W_enc"] = dZ.T @ P + hyper.lam * model.W_enc
    grads["b_enc"] = dZ.sum(0)

    data_loss = float(pred_loss.mean() + auto_loss.mean())
    return data_loss + reg, data_loss, grads


def _joint_batch_step(model, data, idx, hyper, opt, params):
    loss, data_loss, grads = joint_loss_and_grads(model, data, idx, hyper)
    if not np.isfinite(loss):
        raise FloatingPointError(
            f"non-finite training loss {loss}; lower the learning rate"
        )
    all_params = dict(params)
    for key in grads:
        if isinstance(key, CanonicalId):
            all_params[key] = model.program_matrices[key]
    opt.step(all_params, grads)
    return data_loss


def _prediction_loss(model, data, idx) -> float:
    if len(idx) == 0:
        return float("nan")
    F = model.encode_batch(data.P[idx])
    G = np.zeros_like(F)
    for row, i in enumerate(idx):
        G[row] = model.program_matrices[data.digests[i]] @ F[row]
    probs = model.decode_batch(G)
    return float(cross_entropy(probs, data.Q[idx]).mean())


def train_joint(
    triples: list[HoareTriple],
    layout: StateLayout,
    init: NpmModel,
    hyper: NpmHyper,
) -> NpmModel:
    """Jointly refine encoder, decoder, and subtree matrices.

    Minibatch Adagrad without momentum; epoch-shuffled batches; only matrices
    occurring in a batch are touched. Weight matrices are L2-regularized,
    biases are not. Early-stops on a held-out slice of the training triples.
    """
    hyper.validate()
    rng = make_rng(hyper.seed + 1)
    model = init.copy()
    data = vectorize_triples(triples, layout)
    n = data.n
    n_val = int(round(hyper.val_fraction * n))
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        train_idx, val_idx = perm, perm[:0]

    params = {
        "W_enc": model.W_enc,
        "b_enc": model.b_enc,
        "W_dec": model.W_dec,
        "b_dec": model.b_dec,
    }
    opt = Adagrad(hyper.lr)
    best_val = np.inf
    best_state = None
    stale = 0
    model.loss_curve = []
    for epoch in range(hyper.epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        epoch_losses = []
        for lo in range(0, len(order), hyper.batch_size):
            idx = order[lo : lo + hyper.batch_size]
            epoch_losses.append(_joint_batch_step(model, data, idx, hyper, opt, params))
        val_loss = _prediction_loss(model, data, val_idx)
        model.loss_curve.append((epoch, float(np.mean(epoch_losses)), val_loss))
        if len(val_idx) > 0:
            if val_loss < best_val - 1e-9:
                best_val = val_loss
                best_state = model.copy()
                stale = 0
            else:
                stale += 1
                if stale > hyper.patience:
                    break
    if best_state is not None:
        best_state.loss_curve = model.loss_curve
        return best_state
    return model


def fit_npm(
    triples: list[HoareTriple],
    layout: StateLayout,
    hyper: NpmHyper,
    joint: bool = True,
) -> NpmModel:
    init = smart_init(triples, layout, hyper)
    if not joint:
        return init
    return train_joint(triples, layout, init, hyper)


# --- evaluation --------------------------------------------------------------


def prediction_accuracy(
    model: NpmModel, triples: list[HoareTriple]
) -> tuple[float, int, int]:
    """Mean per-variable accuracy over triples whose subtree id is known.

    Returns (accuracy, scored count, unknown-subtree count); ids never seen
    in training cannot be scored by this model and are counted separately.
    """
    layout = model.layout
    known = [t for t in triples if t.subtree in model.program_matrices]
    unknown = len(triples) - len(known)
    if not known:
        return float("nan"), 0, unknown
    data = vectorize_triples(known, layout)
    F = model.encode_batch(data.P)
    G = np.zeros_like(F)
    for dg, rows in data.digest_rows.items():
        G[rows] = F[rows] @ model.program_matrices[dg].T
    probs = model.decode_batch(G)
    acc = _block_argmax_accuracy(probs, data.Q, layout)
    return acc, len(known), unknown


def _block_argmax_accuracy(probs, targets, layout) -> float:
    total = 0.0
    n_blocks = len(layout.block_sizes)
    for start, size in zip(layout.block_starts, layout.block_sizes):
        pick = probs[:, start : start + size].argmax(axis=1)
        truth = targets[:, start : start + size].argmax(axis=1)
        total += float((pick == truth).mean())
    return total / n_blocks


def matrix_product_accuracy(
    model: NpmModel,
    cases: list[tuple[HoareTriple, list[CanonicalId]]],
) -> tuple[float, int, int]:
    """Accuracy when the map is a product of component matrices.

    Each case pairs a root triple with its component subtree ids in execution
    order; the applied map is M_k ... M_2 M_1. Cases with any unknown
    component are skipped and counted.
    """
    layout = model.layout
    scored = []
    maps = []
    unknown = 0
    for triple, parts in cases:
        if any(p not in model.program_matrices for p in parts):
            unknown += 1
            continue
        M = np.eye(model.m)
        for p in parts:
            M = model.program_matrices[p] @ M
        scored.append(triple)
        maps.append(M)
    if not scored:
        return float("nan"), 0, unknown
    data = vectorize_triples(scored, layout)
    F = model.encode_batch(data.P)
    G = np.array([M @ f for M, f in zip(maps, F)])
    probs = model.decode_batch(G)
    return _block_argmax_accuracy(probs, data.Q, layout), len(scored), unknown


# --- the most-common-postcondition baseline ----------------------------------


class CommonBaseline:
    """Maps each precondition to its most frequent observed postcondition.

    Ties break toward the first-seen postcondition; unseen preconditions
    predict themselves (the identity fallback).
    """

    def __init__(self, train_triples: list[HoareTriple]):
        counts: dict[WorldState, dict[WorldState, int]] = {}
        for t in train_triples:
            bucket = counts.setdefault(t.pre, {})
            bucket[t.post] = bucket.get(t.post, 0) + 1
        self.modal: dict[WorldState, WorldState] = {}
        for pre, bucket in counts.items():
            best = max(bucket.items(), key=lambda kv: kv[1])
            self.modal[pre] = best[0]

    def __call__(self, triple: HoareTriple) -> WorldState:
        return self.modal.get(triple.pre, triple.pre)


def eval_prediction(predict, test_triples: list[HoareTriple]) -> float:
    """Mean state-variable accuracy of predict(triple) -> WorldState."""
    if not test_triples:
        return float("nan")
    return float(
        np.mean(
            [state_variable_accuracy(predict(t), t.post) for t in test_triples]
        )
    )


# --- hyperparameter search ----------------------------------------------------


def random_search(
    triples: list[HoareTriple],
    layout: StateLayout,
    budget: int,
    seed: int,
    epochs: int = 50,
) -> tuple[NpmHyper, float]:
    """Sample configurations, train each, keep the best validation accuracy."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = make_rng(seed)
    train, val = split_triples(triples, 0.2, rng)
    best: tuple[NpmHyper, float] | None = None
    for trial in range(budget):
        hyper = NpmHyper(
            m=int(rng.choice([10, 20, 30, 50])),
            lam=float(10 ** rng.uniform(-6, -2)),
            lr=float(10 ** rng.uniform(-2, 0)),
            batch_size=int(rng.choice([16, 32, 64, 128])),
            epochs=epochs,
            seed=seed + trial,
        )
        model = fit_npm(train, layout, hyper)
        acc, _, _ = prediction_accuracy(model, val)
        score = -np.inf if np.isnan(acc) else acc
        if best is None or score > best[1]:
            best = (hyper, score)
    return best


# --- checkpoints ---------------------------------------------------------------


def model_to_tensors(model: NpmModel) -> dict[str, np.ndarray]:
    tensors = {
        "enc.W": model.W_enc,
        "enc.b": model.b_enc,
        "dec.W": model.W_dec,
        "dec.b": model.b_dec,
        "meta.m": np.array([float(model.m)]),
    }
    for digest, M in model.program_matrices.items():
        tensors[f"M.{digest.hex}"] = M
    return tensors


def model_from_tensors(tensors: dict[str, np.ndarray], layout: StateLayout) -> NpmModel:
    matrices = {}
    for name, arr in tensors.items():
        if name.startswith("M."):
            matrices[CanonicalId(bytes.fromhex(name[2:]))] = arr
    return NpmModel(
        W_enc=tensors["enc.W"],
        b_enc=tensors["enc.b"],
        W_dec=tensors["dec.W"],
        b_dec=tensors["dec.b"],
        program_matrices=matrices,
        m=int(tensors["meta.m"][0]),
        layout=layout,
    )
