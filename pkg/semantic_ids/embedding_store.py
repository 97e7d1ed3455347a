import attr
import json
import logging
import os

from enum import Enum
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .provenance import fingerprint_ids

log = logging.getLogger(__name__)

class EmbeddingStoreException(Exception): pass

UNIT_NORM_TOLERANCE = 1e-6

class Split(Enum):
    TRAIN = 'train'
    TEST = 'test'

    @classmethod
    def from_string(cls, s: str) -> 'Split':
        try:
            return cls(s.strip().lower())
        except ValueError:
            raise EmbeddingStoreException(f'unknown split tag {s!r}')

def _read_tsv(path: str, columns: Sequence[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, sep='\t', dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise EmbeddingStoreException(f'cannot read {path}: {e}')
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise EmbeddingStoreException(f'{path} is missing columns {missing}')
    return frame

def _write_tsv(path: str, frame: pd.DataFrame) -> None:
    frame.to_csv(path, sep='\t', index=False, lineterminator='\n')

@attr.define(slots=True, frozen=True)
class Catalog:
    item_ids: Tuple[str, ...] = attr.field(converter=tuple)
    popularity: np.ndarray = attr.field(eq=False)
    index: Mapping[str, int] = attr.field(init=False, eq=False, repr=False)
    fingerprint: str = attr.field(init=False, repr=False)

    def __attrs_post_init__(self) -> None:
        index = {item_id: i for i, item_id in enumerate(self.item_ids)}
        if len(index) != len(self.item_ids):
            raise EmbeddingStoreException('item ids are not unique')
        popularity = np.asarray(self.popularity, dtype=np.int64)
        if popularity.shape != (len(self.item_ids),) or (popularity < 0).any():
            raise EmbeddingStoreException('popularity must be one non-negative count per item')
        popularity.setflags(write=False)
        object.__setattr__(self, 'popularity', popularity)
        object.__setattr__(self, 'index', index)
        object.__setattr__(self, 'fingerprint', fingerprint_ids(self.item_ids))

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def resolve(self, item_id: str) -> int:
        try:
            return self.index[item_id]
        except KeyError:
            raise EmbeddingStoreException(f'unknown item {item_id!r}')

    def with_popularity(self, popularity: np.ndarray) -> 'Catalog':
        return Catalog(self.item_ids, popularity)

def _as_matrix(value: np.ndarray) -> np.ndarray:
    array = np.array(value, dtype=np.float32, order='C', copy=True)
    if array.ndim != 2:
        raise EmbeddingStoreException(f'embeddings must be 2-D (got {array.ndim}-D)')
    array.setflags(write=False)
    return array

def _check_finite(instance: 'EmbeddingMatrix', attribute: 'attr.Attribute[np.ndarray]', value: np.ndarray) -> None:
    bad = np.argwhere(~np.isfinite(value))
    if len(bad):
        row, col = bad[0]
        raise EmbeddingStoreException(f'non-finite entry at row {row}, column {col}')

@attr.define(slots=True, frozen=True)
class EmbeddingMatrix:
    data: np.ndarray = attr.field(converter=_as_matrix, validator=_check_finite, eq=False)
    aligned_to: Optional[str] = None
    normalized: bool = False

    @property
    def rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

@attr.define(slots=True, frozen=True)
class InteractionLog:
    user_ids: Tuple[str, ...] = attr.field(converter=tuple)
    n_items: int
    users: np.ndarray = attr.field(eq=False)
    items: np.ndarray = attr.field(eq=False)
    timestamps: np.ndarray = attr.field(eq=False)
    is_test: np.ndarray = attr.field(eq=False)
    user_index: Mapping[str, int] = attr.field(init=False, eq=False, repr=False)

    def __attrs_post_init__(self) -> None:
        object.__setattr__(self, 'user_index', {u: i for i, u in enumerate(self.user_ids)})
        if len(self.user_index) != len(self.user_ids):
            raise EmbeddingStoreException('user ids are not unique')
        if not (len(self.users) == len(self.items) == len(self.timestamps) == len(self.is_test)):
            raise EmbeddingStoreException('interaction columns differ in length')
        if len(self.items) and (self.items.min() < 0 or self.items.max() >= self.n_items):
            raise EmbeddingStoreException('interaction references an item outside the catalog')
        if len(self.users) and (self.users.min() < 0 or self.users.max() >= len(self.user_ids)):
            raise EmbeddingStoreException('interaction references a user outside the user list')
        users = self.users.astype(np.int64)
        test_users = users[self.is_test]
        counts = np.bincount(test_users, minlength=len(self.user_ids))
        if (counts > 1).any():
            u = int(np.argmax(counts))
            raise EmbeddingStoreException(f'user {self.user_ids[u]} has {counts[u]} test interactions')
        test_time = np.full(len(self.user_ids), np.iinfo(np.int64).max, dtype=np.int64)
        test_time[test_users] = self.timestamps[self.is_test]
        late = np.flatnonzero(~self.is_test & (self.timestamps >= test_time[users]))
        if len(late):
            raise EmbeddingStoreException(f'test interaction of user {self.user_ids[users[late[0]]]} is not the last one')

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    def train_pairs(self) -> Tuple[np.ndarray, np.ndarray]:
        train = ~self.is_test
        keys = np.unique(self.users[train].astype(np.int64) * self.n_items + self.items[train])
        return keys // self.n_items, keys % self.n_items

    def train_items(self, user: int) -> np.ndarray:
        rows = np.flatnonzero((self.users == user) & ~self.is_test)
        rows = rows[np.argsort(self.timestamps[rows], kind='stable')]
        return self.items[rows]

    def history(self, user: int) -> FrozenSet[int]:
        return frozenset(int(i) for i in self.train_items(user))

    def test_item(self, user: int) -> Optional[int]:
        rows = np.flatnonzero((self.users == user) & self.is_test)
        return int(self.items[rows[0]]) if len(rows) else None

    def test_users(self) -> np.ndarray:
        return np.unique(self.users[self.is_test])

    def train_popularity(self) -> np.ndarray:
        return np.bincount(self.items[~self.is_test], minlength=self.n_items).astype(np.int64)

    @classmethod
    def from_records(cls, catalog: Catalog, user_ids: Sequence[str], item_ids: Sequence[str],
                     timestamps: Sequence[int], splits: Sequence[Split]) -> 'InteractionLog':
        order = list(dict.fromkeys(user_ids))
        index = {u: i for i, u in enumerate(order)}
        return InteractionLog(
            user_ids=order,
            n_items=catalog.n_items,
            users=np.array([index[u] for u in user_ids], dtype=np.int64),
            items=np.array([catalog.resolve(i) for i in item_ids], dtype=np.int64),
            timestamps=np.asarray(timestamps, dtype=np.int64),
            is_test=np.array([s == Split.TEST for s in splits], dtype=bool)
        )

def hold_out_last(users: np.ndarray, timestamps: np.ndarray) -> np.ndarray:
    """Marks each user's chronologically last interaction as test."""
    is_test = np.zeros(len(users), dtype=bool)
    order = np.lexsort((np.arange(len(users)), timestamps, users))
    last = np.ones(len(order), dtype=bool)
    last[:-1] = users[order][1:] != users[order][:-1]
    is_test[order[last]] = True
    return is_test

@attr.define(slots=True, frozen=True)
class QuerySet:
    query_ids: Tuple[str, ...] = attr.field(converter=tuple)
    relevant: np.ndarray = attr.field(eq=False)
    is_test: np.ndarray = attr.field(eq=False)
    embeddings: Mapping[str, EmbeddingMatrix] = attr.field(factory=dict, eq=False)
    index: Mapping[str, int] = attr.field(init=False, eq=False, repr=False)

    def __attrs_post_init__(self) -> None:
        object.__setattr__(self, 'index', {q: i for i, q in enumerate(self.query_ids)})
        if len(self.index) != len(self.query_ids):
            raise EmbeddingStoreException('query ids are not unique')
        for space, matrix in self.embeddings.items():
            if matrix.rows != len(self.query_ids):
                raise EmbeddingStoreException(
                    f'{space} query embeddings have {matrix.rows} rows for {len(self.query_ids)} queries')

    def counts_per_item(self, n_items: int) -> Tuple[np.ndarray, np.ndarray]:
        train = np.bincount(self.relevant[~self.is_test], minlength=n_items)
        test = np.bincount(self.relevant[self.is_test], minlength=n_items)
        return train, test

    def test_rows(self) -> np.ndarray:
        return np.flatnonzero(self.is_test)

    def row(self, query_id: str) -> int:
        try:
            return self.index[query_id]
        except KeyError:
            raise EmbeddingStoreException(f'unknown query {query_id!r}')

def _read_npy(path: str) -> np.ndarray:
    with open(path, 'rb') as f:
        try:
            version = np.lib.format.read_magic(f)
            if version == (1, 0):
                shape, fortran_order, dtype = np.lib.format.read_array_header_1_0(f)
            else:
                shape, fortran_order, dtype = np.lib.format.read_array_header_2_0(f)
        except ValueError as e:
            raise EmbeddingStoreException(f'malformed header in {path}: {e}')
        if len(shape) != 2 or fortran_order:
            raise EmbeddingStoreException(f'{path} must hold a C-contiguous 2-D array')
        if dtype.kind != 'f' or dtype.byteorder == '>':
            raise EmbeddingStoreException(f'{path} must hold little-endian floats (got {dtype})')
        count = int(shape[0]) * int(shape[1])
        data = np.fromfile(f, dtype=dtype, count=count)
        if data.size != count:
            raise EmbeddingStoreException(f'{path} declares {shape} but holds {data.size} values')
        return data.reshape(shape)

def _read_raw(path: str) -> np.ndarray:
    sidecar = path + '.json'
    try:
        with open(sidecar, encoding='utf-8') as f:
            header = json.load(f)
        rows, dim = int(header['rows']), int(header['dim'])
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise EmbeddingStoreException(f'malformed header {sidecar}: {e}')
    data = np.fromfile(path, dtype='<f4')
    if data.size != rows * dim:
        raise EmbeddingStoreException(f'{path} declares {rows}x{dim} but holds {data.size} values')
    return data.reshape(rows, dim)

def load_embeddings(path: str, expected_rows: Optional[int] = None) -> EmbeddingMatrix:
    if not os.path.isfile(path):
        raise EmbeddingStoreException(f'no embedding file at {path}')
    data = _read_npy(path) if path.endswith('.npy') else _read_raw(path)
    if expected_rows is not None and data.shape[0] != expected_rows:
        raise EmbeddingStoreException(f'{path} has {data.shape[0]} rows, expected {expected_rows}')
    matrix = EmbeddingMatrix(data)
    log.debug('loaded %s: %d x %d', path, matrix.rows, matrix.dim)
    return matrix

def save_embeddings(path: str, matrix: EmbeddingMatrix) -> None:
    data = np.ascontiguousarray(matrix.data, dtype='<f4')
    if path.endswith('.npy'):
        np.save(path, data, allow_pickle=False)
        return
    data.tofile(path)
    with open(path + '.json', 'w', encoding='utf-8') as f:
        json.dump({'rows': matrix.rows, 'dim': matrix.dim}, f)

def l2_normalize(matrix: EmbeddingMatrix) -> EmbeddingMatrix:
    data = matrix.data.astype(np.float64)
    norms = np.sqrt((data * data).sum(axis=1))
    zero = np.flatnonzero(norms == 0)
    if len(zero):
        raise EmbeddingStoreException(f'row {zero[0]} has zero norm')
    return EmbeddingMatrix(data / norms[:, None], aligned_to=matrix.aligned_to, normalized=True)

def is_unit_norm(matrix: EmbeddingMatrix, tolerance: float = UNIT_NORM_TOLERANCE) -> bool:
    norms = np.sqrt((matrix.data.astype(np.float64) ** 2).sum(axis=1))
    return bool(np.all(np.abs(norms - 1.0) <= tolerance))

def align(catalog: Catalog, matrix: EmbeddingMatrix, manifest: Sequence[str]) -> EmbeddingMatrix:
    if len(manifest) != matrix.rows:
        raise EmbeddingStoreException(f'manifest lists {len(manifest)} ids for {matrix.rows} rows')
    rows: Dict[str, int] = {}
    for row, item_id in enumerate(manifest):
        if item_id in rows:
            raise EmbeddingStoreException(f'duplicate item {item_id!r} in manifest')
        if item_id not in catalog.index:
            raise EmbeddingStoreException(f'manifest item {item_id!r} is not in the catalog')
        rows[item_id] = row
    missing = [item_id for item_id in catalog.item_ids if item_id not in rows]
    if missing:
        raise EmbeddingStoreException(f'manifest is missing {len(missing)} items, first {missing[0]!r}')
    permutation = np.array([rows[item_id] for item_id in catalog.item_ids], dtype=np.int64)
    return EmbeddingMatrix(matrix.data[permutation], aligned_to=catalog.fingerprint, normalized=matrix.normalized)

def load_manifest(path: str) -> List[str]:
    with open(path, encoding='utf-8') as f:
        return [line.rstrip('\r\n') for line in f if line.rstrip('\r\n')]

def write_manifest(path: str, item_ids: Sequence[str]) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        f.writelines(f'{item_id}\n' for item_id in item_ids)

def load_catalog(path: str) -> Catalog:
    frame = _read_tsv(path, ['item_id', 'train_popularity'])
    try:
        popularity = frame['train_popularity'].astype(np.int64).to_numpy()
    except ValueError:
        raise EmbeddingStoreException(f'{path} has a non-integer popularity')
    return Catalog(frame['item_id'].tolist(), popularity)

def write_catalog(path: str, catalog: Catalog) -> None:
    _write_tsv(path, pd.DataFrame({'item_id': catalog.item_ids, 'train_popularity': catalog.popularity}))

def load_interactions(path: str, catalog: Catalog) -> InteractionLog:
    frame = _read_tsv(path, ['user_id', 'item_id', 'timestamp', 'split'])
    try:
        timestamps = frame['timestamp'].astype(np.int64).to_numpy()
    except ValueError:
        raise EmbeddingStoreException(f'{path} has a non-integer timestamp')
    return InteractionLog.from_records(
        catalog,
        frame['user_id'].tolist(),
        frame['item_id'].tolist(),
        timestamps,
        [Split.from_string(s) for s in frame['split']]
    )

def write_interactions(path: str, interactions: InteractionLog, catalog: Catalog) -> None:
    _write_tsv(path, pd.DataFrame({
        'user_id': [interactions.user_ids[u] for u in interactions.users],
        'item_id': [catalog.item_ids[i] for i in interactions.items],
        'timestamp': interactions.timestamps,
        'split': [Split.TEST.value if t else Split.TRAIN.value for t in interactions.is_test]
    }))

def load_queries(path: str, catalog: Catalog, embeddings: Optional[Mapping[str, str]] = None) -> QuerySet:
    frame = _read_tsv(path, ['query_id', 'relevant_item_id', 'split'])
    matrices = {space: load_embeddings(p, expected_rows=len(frame)) for space, p in (embeddings or {}).items()}
    return QuerySet(
        query_ids=frame['query_id'].tolist(),
        relevant=np.array([catalog.resolve(i) for i in frame['relevant_item_id']], dtype=np.int64),
        is_test=np.array([Split.from_string(s) == Split.TEST for s in frame['split']], dtype=bool),
        embeddings=matrices
    )

def write_queries(path: str, queries: QuerySet, catalog: Catalog) -> None:
    _write_tsv(path, pd.DataFrame({
        'query_id': queries.query_ids,
        'relevant_item_id': [catalog.item_ids[i] for i in queries.relevant],
        'split': [Split.TEST.value if t else Split.TRAIN.value for t in queries.is_test]
    }))
