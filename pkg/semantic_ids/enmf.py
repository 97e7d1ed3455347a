"""
    Efficient Neural Matrix Factorization: implicit-feedback matrix factorization trained
    on the whole-data weighted squared loss, without negative sampling.

    The prediction for user u and item i is r(u, i) = sum_k h_k * P[u, k] * Q[i, k].
    Observed train pairs have target 1 and weight 1; every other pair has target 0 and
    weight c_neg. The efficient loss rewrites the sum over all pairs through the d x d
    Gram matrices of P and Q, so one evaluation costs O(|R| d + (n_users + n_items) d^2).
"""

import attr
import logging

from typing import Iterable, List, Optional, Tuple

import numpy as np

from .artifacts import Artifact, ArtifactBlock, read_artifact, write_artifact
from .embedding_store import EmbeddingMatrix, InteractionLog

log = logging.getLogger(__name__)

class EnmfException(Exception): pass

DEFAULT_DIM = 256
DEFAULT_EPOCHS = 30
DEFAULT_LR = 0.001
DEFAULT_C_NEG = 0.1
DEFAULT_BATCH_USERS = 512
INIT_RANGE = 0.01

@attr.define(slots=True, frozen=True)
class EnmfModel:
    P: np.ndarray = attr.field(eq=False)
    Q: np.ndarray = attr.field(eq=False)
    h: np.ndarray = attr.field(eq=False)
    c_neg: float
    seed: int = 0

    def __attrs_post_init__(self) -> None:
        if self.P.shape[1] != self.Q.shape[1] or self.h.shape != (self.P.shape[1],):
            raise EnmfException('factor dimensions disagree')
        if not 0 < self.c_neg <= 1:
            raise EnmfException(f'c_neg must be in (0, 1] (got {self.c_neg})')
        for name in ('P', 'Q', 'h'):
            if not np.all(np.isfinite(getattr(self, name))):
                raise EnmfException(f'{name} has non-finite entries')

    @property
    def d(self) -> int:
        return int(self.h.shape[0])

    @property
    def n_users(self) -> int:
        return int(self.P.shape[0])

    @property
    def n_items(self) -> int:
        return int(self.Q.shape[0])

    def predict(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        return ((self.P[users] * self.h) * self.Q[items]).sum(axis=-1)

    def user_scores(self, user: int) -> np.ndarray:
        return self.Q @ (self.P[user] * self.h)

def _check_dimensions(model: EnmfModel, interactions: InteractionLog) -> None:
    if model.n_users != interactions.n_users or model.n_items != interactions.n_items:
        raise EnmfException(
            f'model is {model.n_users}x{model.n_items} but the log is {interactions.n_users}x{interactions.n_items}')

def enmf_loss_naive(model: EnmfModel, interactions: InteractionLog) -> float:
    _check_dimensions(model, interactions)
    users, items = interactions.train_pairs()
    target = np.zeros((model.n_users, model.n_items))
    target[users, items] = 1.0
    weight = np.where(target > 0, 1.0, model.c_neg)
    prediction = (model.P * model.h) @ model.Q.T
    return float((weight * (target - prediction) ** 2).sum())

def enmf_loss_efficient(model: EnmfModel, interactions: InteractionLog) -> float:
    _check_dimensions(model, interactions)
    users, items = interactions.train_pairs()
    return _batch_loss(model.P, model.Q, model.h, model.c_neg, model.P, users, items)

def _batch_loss(P: np.ndarray, Q: np.ndarray, h: np.ndarray, c_neg: float,
                P_batch: np.ndarray, users: np.ndarray, items: np.ndarray) -> float:
    whole = c_neg * float((np.outer(h, h) * (P_batch.T @ P_batch) * (Q.T @ Q)).sum())
    r = ((P[users] * h) * Q[items]).sum(axis=1)
    return whole + float(((1.0 - c_neg) * r * r - 2.0 * r + 1.0).sum())

def _gradients(P: np.ndarray, Q: np.ndarray, h: np.ndarray, c_neg: float,
               batch: np.ndarray, users: np.ndarray, items: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    P_batch = P[batch]
    A = P_batch.T @ P_batch
    B = Q.T @ Q
    H = np.outer(h, h)

    grad_P = np.zeros_like(P)
    grad_P[batch] = 2.0 * c_neg * P_batch @ (H * B)
    grad_Q = 2.0 * c_neg * Q @ (H * A)
    grad_h = 2.0 * c_neg * (A * B) @ h

    Pu = P[users]
    Qi = Q[items]
    r = ((Pu * h) * Qi).sum(axis=1)
    g = (2.0 * (1.0 - c_neg) * r - 2.0)[:, None]
    np.add.at(grad_P, users, g * (h * Qi))
    np.add.at(grad_Q, items, g * (h * Pu))
    grad_h += (g * Pu * Qi).sum(axis=0)
    return grad_P, grad_Q, grad_h

def enmf_gradients(model: EnmfModel, interactions: InteractionLog) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradients of the efficient loss with respect to P, Q and h."""
    _check_dimensions(model, interactions)
    users, items = interactions.train_pairs()
    return _gradients(model.P, model.Q, model.h, model.c_neg, np.arange(model.n_users), users, items)

class _Adam:
    def __init__(self, shapes: Iterable[Tuple[int, ...]], beta1: float, beta2: float, eps: float):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def steps(self, grads: List[np.ndarray], lr: float) -> List[np.ndarray]:
        self.t += 1
        out = []
        for m, v, g in zip(self.m, self.v, grads):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** self.t)
            v_hat = v / (1.0 - self.beta2 ** self.t)
            out.append(lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out

def init_model(n_users: int, n_items: int, d: int, c_neg: float, seed: int) -> EnmfModel:
    rng = np.random.default_rng(seed)
    P = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(n_users, d))
    Q = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(n_items, d))
    return EnmfModel(P, Q, np.ones(d), c_neg, seed)

def train_enmf(interactions: InteractionLog,
               d: int = DEFAULT_DIM,
               epochs: int = DEFAULT_EPOCHS,
               lr: float = DEFAULT_LR,
               c_neg: float = DEFAULT_C_NEG,
               batch_users: int = DEFAULT_BATCH_USERS,
               seed: int = 0,
               adam: bool = False,
               beta1: float = 0.9,
               beta2: float = 0.999,
               eps: float = 1e-8) -> EnmfModel:
    if d < 1:
        raise EnmfException(f'embedding size must be positive (got {d})')
    if batch_users < 1:
        raise EnmfException(f'batch size must be positive (got {batch_users})')
    users, items = interactions.train_pairs()
    if len(users) == 0:
        raise EnmfException('the log has no train interactions')

    model = init_model(interactions.n_users, interactions.n_items, d, c_neg, seed)
    if epochs == 0:
        return model

    rng = np.random.default_rng(seed + 1)
    P, Q, h = model.P.copy(), model.Q.copy(), model.h.copy()
    optimizer = _Adam((P.shape, Q.shape, h.shape), beta1, beta2, eps) if adam else None
    by_user = np.argsort(users, kind='stable')
    bounds = np.searchsorted(users[by_user], np.arange(interactions.n_users + 1))

    for epoch in range(epochs):
        order = rng.permutation(interactions.n_users)
        for start in range(0, len(order), batch_users):
            batch = np.sort(order[start:start + batch_users])
            rows = np.concatenate([by_user[bounds[u]:bounds[u + 1]] for u in batch])
            grads = list(_gradients(P, Q, h, c_neg, batch, users[rows], items[rows]))
            updates = optimizer.steps(grads, lr) if optimizer is not None else [lr * g for g in grads]
            P -= updates[0]
            Q -= updates[1]
            h -= updates[2]
        if log.isEnabledFor(logging.DEBUG):
            log.debug('epoch %d loss %.6f', epoch, _batch_loss(P, Q, h, c_neg, P, users, items))

    trained = EnmfModel(P, Q, h, c_neg, seed)
    log.info('trained ENMF d=%d for %d epochs: loss %.6f -> %.6f', d, epochs,
             enmf_loss_efficient(model, interactions), enmf_loss_efficient(trained, interactions))
    return trained

def item_embeddings(model: EnmfModel, h_scaling: bool = False, aligned_to: Optional[str] = None) -> EmbeddingMatrix:
    Q = model.Q * model.h if h_scaling else model.Q
    return EmbeddingMatrix(Q, aligned_to=aligned_to)

def user_vectors(model: EnmfModel) -> np.ndarray:
    """Rows h * P_u, whose dot product with Q_i is the model's prediction."""
    return model.P * model.h

def recommend(model: EnmfModel, user: int, k: int, exclude: Iterable[int] = ()) -> List[int]:
    scores = model.user_scores(user)
    excluded = set(exclude)
    order = np.lexsort((np.arange(model.n_items), -scores))
    return [int(i) for i in order if int(i) not in excluded][:k]

def save_model(path: str, model: EnmfModel) -> None:
    write_artifact(path, Artifact(
        meta={'n_users': model.n_users, 'n_items': model.n_items, 'd': model.d, 'c_neg': model.c_neg, 'seed': model.seed},
        blocks=[ArtifactBlock('P', model.P), ArtifactBlock('Q', model.Q), ArtifactBlock('h', model.h)]
    ))

def load_model(path: str) -> EnmfModel:
    artifact = read_artifact(path)
    meta = artifact.meta
    model = EnmfModel(
        artifact.block('P').astype(np.float64),
        artifact.block('Q').astype(np.float64),
        artifact.block('h').astype(np.float64),
        float(meta['c_neg']),
        int(meta['seed'])
    )
    if (model.n_users, model.n_items, model.d) != (meta['n_users'], meta['n_items'], meta['d']):
        raise EnmfException(f'model blocks disagree with header {meta}')
    return model
