import attr
import logging

from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .artifacts import Artifact, ArtifactBlock, read_artifact, write_artifact
from .embedding_store import Catalog, EmbeddingMatrix

log = logging.getLogger(__name__)

class QuantizerException(Exception): pass

CodeSequence = Tuple[int, ...]

LFQ_CODE_WIDTH = 16
DEFAULT_LEVELS = 2
DEFAULT_CODEBOOK_SIZE = 256
DEFAULT_MAX_ITERS = 100

# rows * K * d float64 values per chunk of exact distance evaluation
_DISTANCE_CHUNK = 1 << 22

class QuantizerKind(Enum):
    RQ_KMEANS = 'rq_kmeans'
    RESIDUAL_LFQ = 'residual_lfq'

    @classmethod
    def from_string(cls, s: str) -> 'QuantizerKind':
        try:
            return cls(s)
        except ValueError:
            raise QuantizerException(f'unknown quantizer kind {s!r}')

def _as_points(points: np.ndarray) -> np.ndarray:
    data = np.asarray(points.data if isinstance(points, EmbeddingMatrix) else points, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise QuantizerException('cannot quantize an empty input')
    return data

def _nearest(points: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Exact squared distances; argmin keeps the lowest index on ties."""
    centroids = centroids.astype(np.float64)
    step = max(1, _DISTANCE_CHUNK // max(1, centroids.shape[0] * centroids.shape[1]))
    labels = np.empty(points.shape[0], dtype=np.int64)
    best = np.empty(points.shape[0], dtype=np.float64)
    for start in range(0, points.shape[0], step):
        chunk = points[start:start + step]
        diff = chunk[:, None, :] - centroids[None, :, :]
        dist = np.einsum('nkd,nkd->nk', diff, diff)
        labels[start:start + step] = np.argmin(dist, axis=1)
        best[start:start + step] = dist[np.arange(len(chunk)), labels[start:start + step]]
    return labels, best

def _expanded_distances(points: np.ndarray, point_sq: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    dist = point_sq[:, None] - 2.0 * points @ centroids.T + (centroids * centroids).sum(axis=1)[None, :]
    return np.maximum(dist, 0.0)

@attr.define(slots=True, frozen=True)
class KMeansModel:
    centroids: np.ndarray = attr.field(eq=False)
    inertia: float
    seed: int
    trace: Tuple[float, ...] = attr.field(converter=tuple, factory=tuple, eq=False)
    requested_k: Optional[int] = None

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])

    def assign(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _nearest(_as_points(points), self.centroids)

def _kmeans_plus_plus(points: np.ndarray, point_sq: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    trials = 2 + int(np.log(k))
    chosen = [int(rng.integers(n))]
    closest = _expanded_distances(points, point_sq, points[chosen])[:, 0]
    potential = closest.sum()
    for _ in range(1, k):
        if potential <= 0:
            # every point already sits on a center
            taken = set(chosen)
            chosen.append(next(i for i in range(n) if i not in taken))
            continue
        candidates = np.searchsorted(np.cumsum(closest), rng.random(trials) * potential, side='right')
        candidates = np.minimum(candidates, n - 1)
        dist = _expanded_distances(points, point_sq, points[candidates])
        updated = np.minimum(closest[:, None], dist)
        potentials = updated.sum(axis=0)
        best = int(np.argmin(potentials))
        chosen.append(int(candidates[best]))
        closest = updated[:, best]
        potential = potentials[best]
    return points[chosen].copy()

def _repair_empty(points: np.ndarray, labels: np.ndarray, centroids: np.ndarray, counts: np.ndarray) -> None:
    for empty in np.flatnonzero(counts == 0):
        gap = ((points - centroids[labels]) ** 2).sum(axis=1)
        gap[counts[labels] <= 1] = -1.0
        far = int(np.argmax(gap))
        if gap[far] < 0:
            break
        log.debug('re-seeding empty cluster %d at point %d', empty, far)
        counts[labels[far]] -= 1
        labels[far] = empty
        counts[empty] = 1
        centroids[empty] = points[far]

def kmeans_fit(points: np.ndarray, K: int, max_iters: int = DEFAULT_MAX_ITERS, seed: int = 0) -> KMeansModel:
    data = _as_points(points)
    n, d = data.shape
    if K < 1:
        raise QuantizerException(f'K must be positive (got {K})')
    if max_iters < 1:
        raise QuantizerException(f'max_iters must be positive (got {max_iters})')
    k = K
    if K > n:
        log.warning('k-means clamped K from %d to %d points', K, n)
        k = n

    rng = np.random.default_rng(seed)
    point_sq = (data * data).sum(axis=1)
    centroids = _kmeans_plus_plus(data, point_sq, k, rng)
    labels = None
    trace: List[float] = []
    for iteration in range(max_iters):
        dist = _expanded_distances(data, point_sq, centroids)
        new_labels = np.argmin(dist, axis=1)
        trace.append(float(dist[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        if (counts == 0).any():
            _repair_empty(data, labels, centroids, counts)
        sums = np.zeros((k, d))
        np.add.at(sums, labels, data)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled, None]
    log.debug('k-means K=%d converged after %d assignments', k, len(trace))

    stored = centroids.astype(np.float32)
    _, best = _nearest(data, stored)
    return KMeansModel(stored, float(best.sum()), seed, trace, K if K != k else None)

@attr.define(slots=True, frozen=True)
class RQCodebooks:
    kind: QuantizerKind
    dim: int
    models: Tuple[KMeansModel, ...] = attr.field(converter=tuple, factory=tuple)
    scales: Tuple[float, ...] = attr.field(converter=tuple, factory=tuple)
    level_mse: Tuple[float, ...] = attr.field(converter=tuple, factory=tuple)
    max_row_sq_error: float = 0.0
    seed: int = 0

    def __attrs_post_init__(self) -> None:
        if any(m.dim != self.dim for m in self.models):
            raise QuantizerException('codebook levels disagree on dimensionality')

    @property
    def depth(self) -> int:
        return len(self.models) if self.kind == QuantizerKind.RQ_KMEANS else len(self.scales)

    @property
    def code_width(self) -> int:
        return min(self.dim, LFQ_CODE_WIDTH)

    @property
    def level_sizes(self) -> Tuple[int, ...]:
        if self.kind == QuantizerKind.RQ_KMEANS:
            return tuple(m.k for m in self.models)
        return tuple(1 << self.code_width for _ in self.scales)

    def codewords(self, level: int, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.size and (codes.min() < 0 or codes.max() >= self.level_sizes[level]):
            raise QuantizerException(f'code out of range for level {level}')
        if self.kind == QuantizerKind.RQ_KMEANS:
            return self.models[level].centroids[codes].astype(np.float64)
        bits = (codes[:, None] >> np.arange(self.code_width)) & 1
        out = np.zeros((len(codes), self.dim))
        out[:, :self.code_width] = self.scales[level] * np.where(bits == 1, 1.0, -1.0)
        return out

    def codeword(self, level: int, code: int) -> np.ndarray:
        return self.codewords(level, np.array([code]))[0]

def _record_level(residual: np.ndarray) -> float:
    return float((residual * residual).sum(axis=1).mean())

def rq_fit(M: EmbeddingMatrix, L: int = DEFAULT_LEVELS, K: int = DEFAULT_CODEBOOK_SIZE,
           max_iters: int = DEFAULT_MAX_ITERS, seed: int = 0) -> RQCodebooks:
    residual = _as_points(M)
    if L < 1 or K < 1:
        raise QuantizerException(f'L and K must be positive (got L={L}, K={K})')
    models = []
    level_mse = []
    for level in range(L):
        model = kmeans_fit(residual, K, max_iters, seed + level)
        labels, _ = model.assign(residual)
        residual = residual - model.centroids[labels].astype(np.float64)
        models.append(model)
        level_mse.append(_record_level(residual))
        log.info('rq level %d: K=%d inertia %.6f mse %.6f', level, model.k, model.inertia, level_mse[-1])
    max_row = float((residual * residual).sum(axis=1).max())
    return RQCodebooks(QuantizerKind.RQ_KMEANS, residual.shape[1], models, (), level_mse, max_row, seed)

def _lfq_codes(residual: np.ndarray, width: int) -> np.ndarray:
    bits = (residual[:, :width] >= 0).astype(np.int64)
    return (bits << np.arange(width)).sum(axis=1)

def rlfq_fit(M: EmbeddingMatrix, L: int = DEFAULT_LEVELS, seed: int = 0) -> RQCodebooks:
    residual = _as_points(M)
    if L < 1:
        raise QuantizerException(f'L must be positive (got {L})')
    scales = []
    level_mse = []
    for level in range(L):
        scale = float(np.abs(residual).mean())
        residual = residual - scale * np.where(residual >= 0, 1.0, -1.0)
        scales.append(scale)
        level_mse.append(_record_level(residual))
        log.info('lfq level %d: scale %.6f mse %.6f', level, scale, level_mse[-1])
    max_row = float((residual * residual).sum(axis=1).max())
    return RQCodebooks(QuantizerKind.RESIDUAL_LFQ, residual.shape[1], (), scales, level_mse, max_row, seed)

def rq_encode_batch(M: np.ndarray, cb: RQCodebooks) -> np.ndarray:
    residual = _as_points(M)
    if residual.shape[1] != cb.dim:
        raise QuantizerException(f'vector dim {residual.shape[1]} does not match codebook dim {cb.dim}')
    codes = np.empty((residual.shape[0], cb.depth), dtype=np.int64)
    for level in range(cb.depth):
        if cb.kind == QuantizerKind.RQ_KMEANS:
            labels, _ = cb.models[level].assign(residual)
            residual = residual - cb.models[level].centroids[labels].astype(np.float64)
        else:
            labels = _lfq_codes(residual, cb.code_width)
            residual = residual - cb.scales[level] * np.where(residual >= 0, 1.0, -1.0)
        codes[:, level] = labels
    return codes

def rq_encode(v: np.ndarray, cb: RQCodebooks) -> CodeSequence:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise QuantizerException('rq_encode expects a single vector')
    return tuple(int(c) for c in rq_encode_batch(v[None, :], cb)[0])

def rq_decode(codes: Sequence[int], cb: RQCodebooks) -> np.ndarray:
    if len(codes) != cb.depth:
        raise QuantizerException(f'expected {cb.depth} codes, got {len(codes)}')
    out = np.zeros(cb.dim)
    for level, code in enumerate(codes):
        out += cb.codeword(level, int(code))
    return out

def disambiguate(raw: Sequence[CodeSequence]) -> List[CodeSequence]:
    """Appends a collision suffix to each code sequence, counting up in catalog order."""
    seen: Dict[CodeSequence, int] = {}
    out = []
    for codes in raw:
        codes = tuple(int(c) for c in codes)
        suffix = seen.get(codes, 0)
        seen[codes] = suffix + 1
        out.append(codes + (suffix,))
    return out

@attr.define(slots=True, frozen=True)
class ItemCodes:
    codes: Tuple[CodeSequence, ...] = attr.field(converter=tuple)
    level_sizes: Tuple[int, ...] = attr.field(converter=tuple)
    space: str = 'plain'

    @property
    def n_items(self) -> int:
        return len(self.codes)

    @property
    def depth(self) -> int:
        return len(self.level_sizes)

def encode_items(M: EmbeddingMatrix, cb: RQCodebooks, space: str = 'plain') -> ItemCodes:
    codes = rq_encode_batch(M, cb)
    return ItemCodes([tuple(int(c) for c in row) for row in codes], cb.level_sizes, space)

_FITTERS = {
    QuantizerKind.RQ_KMEANS: lambda M, L, K, max_iters, seed: rq_fit(M, L, K, max_iters, seed),
    QuantizerKind.RESIDUAL_LFQ: lambda M, L, K, max_iters, seed: rlfq_fit(M, L, seed),
}

def fit_codebooks(kind: QuantizerKind, M: EmbeddingMatrix, L: int = DEFAULT_LEVELS,
                  K: int = DEFAULT_CODEBOOK_SIZE, max_iters: int = DEFAULT_MAX_ITERS, seed: int = 0) -> RQCodebooks:
    return _FITTERS[kind](M, L, K, max_iters, seed)

def save_codebooks(path: str, cb: RQCodebooks) -> None:
    meta = {
        'kind': cb.kind.value,
        'L': cb.depth,
        'K': list(cb.level_sizes),
        'd': cb.dim,
        'seed': cb.seed,
        'scales': list(cb.scales),
        'level_mse': list(cb.level_mse),
        'max_row_sq_error': cb.max_row_sq_error,
        'inertia': [m.inertia for m in cb.models],
        'requested_k': [m.requested_k for m in cb.models],
    }
    blocks = [ArtifactBlock(f'level{i}', m.centroids) for i, m in enumerate(cb.models)]
    write_artifact(path, Artifact(meta=meta, blocks=blocks))

def load_codebooks(path: str) -> RQCodebooks:
    artifact = read_artifact(path)
    meta = artifact.meta
    try:
        kind = QuantizerKind.from_string(meta['kind'])
        models = []
        if kind == QuantizerKind.RQ_KMEANS:
            for i in range(int(meta['L'])):
                models.append(KMeansModel(
                    artifact.block(f'level{i}'),
                    float(meta['inertia'][i]),
                    int(meta['seed']) + i,
                    (),
                    meta['requested_k'][i]
                ))
        cb = RQCodebooks(kind, int(meta['d']), models, meta['scales'], meta['level_mse'],
                         float(meta['max_row_sq_error']), int(meta['seed']))
    except (KeyError, IndexError, TypeError) as e:
        raise QuantizerException(f'malformed codebook header in {path}: {e}')
    if list(cb.level_sizes) != list(meta['K']):
        raise QuantizerException(f'codebook blocks in {path} disagree with the header')
    return cb

def write_codes(path: str, item_codes: ItemCodes, catalog: Catalog) -> None:
    if item_codes.n_items != catalog.n_items:
        raise QuantizerException(f'{item_codes.n_items} code rows for {catalog.n_items} items')
    final = disambiguate(item_codes.codes)
    pd.DataFrame({
        'item_id': catalog.item_ids,
        'codes': [' '.join(str(c) for c in codes[:-1]) for codes in final],
        'suffix': [codes[-1] for codes in final]
    }).to_csv(path, sep='\t', index=False, lineterminator='\n')

def read_codes(path: str, catalog: Catalog, level_sizes: Sequence[int], space: str = 'plain') -> ItemCodes:
    frame = pd.read_csv(path, sep='\t', dtype=str, keep_default_na=False)
    rows: Mapping[str, str] = dict(zip(frame['item_id'], frame['codes']))
    missing = [item_id for item_id in catalog.item_ids if item_id not in rows]
    if missing:
        raise QuantizerException(f'{path} has no codes for {len(missing)} items, first {missing[0]!r}')
    codes = [tuple(int(c) for c in rows[item_id].split()) for item_id in catalog.item_ids]
    if any(len(c) != len(level_sizes) or any(x < 0 or x >= k for x, k in zip(c, level_sizes)) for c in codes):
        raise QuantizerException(f'{path} has codes outside the codebook ranges {tuple(level_sizes)}')
    return ItemCodes(codes, level_sizes, space)
