import attr
import logging

from enum import Enum
from typing import Mapping, Optional, Tuple

import numpy as np

from .artifacts import Artifact, ArtifactBlock, read_artifact, write_artifact
from .embedding_store import EmbeddingMatrix, EmbeddingStoreException, is_unit_norm, l2_normalize

log = logging.getLogger(__name__)

class FusionException(Exception): pass

FUSED_SVD_ORDER = 'normalize, reduce, re-normalize, add'

class FusionKind(Enum):
    CONCAT = 'concat'
    SVD_ADD = 'svd_add'
    PASSTHROUGH = 'passthrough'

    @classmethod
    def from_string(cls, s: str) -> 'FusionKind':
        try:
            return cls(s)
        except ValueError:
            raise FusionException(f'unknown fusion kind {s!r}')

@attr.define(slots=True, frozen=True)
class SvdProjector:
    basis: np.ndarray = attr.field(eq=False)
    singular_values: np.ndarray = attr.field(eq=False)
    fitted_on: Optional[str] = None

    @property
    def d_in(self) -> int:
        return int(self.basis.shape[0])

    @property
    def d_out(self) -> int:
        return int(self.basis.shape[1])

    def project(self, data: np.ndarray) -> np.ndarray:
        return np.asarray(data, dtype=np.float64) @ self.basis

    def reconstruct(self, reduced: np.ndarray) -> np.ndarray:
        return np.asarray(reduced, dtype=np.float64) @ self.basis.T

@attr.define(slots=True, frozen=True)
class FusionSpec:
    kind: FusionKind
    sources: Tuple[str, ...]
    source_dims: Tuple[int, ...]
    dim: int
    projector: Optional[SvdProjector] = None
    reduced: Optional[str] = None

    @classmethod
    def concat(cls, sources: Tuple[str, str], source_dims: Tuple[int, int]) -> 'FusionSpec':
        return FusionSpec(FusionKind.CONCAT, sources, source_dims, sum(source_dims))

    @classmethod
    def passthrough(cls, source: str, dim: int) -> 'FusionSpec':
        return FusionSpec(FusionKind.PASSTHROUGH, (source,), (dim,), dim)

@attr.define(slots=True, frozen=True)
class LinearBridge:
    """Ridge least-squares map between two item spaces, fitted on catalog rows."""
    weights: np.ndarray = attr.field(eq=False)
    ridge: float

    def apply(self, data: np.ndarray) -> np.ndarray:
        return np.asarray(data, dtype=np.float64) @ self.weights

def _check_aligned(a: EmbeddingMatrix, b: EmbeddingMatrix) -> None:
    if a.rows != b.rows or a.aligned_to != b.aligned_to:
        raise FusionException('embedding matrices are aligned to different catalogs')

def fuse_concat(a: EmbeddingMatrix, b: EmbeddingMatrix) -> EmbeddingMatrix:
    _check_aligned(a, b)
    if not (a.normalized and b.normalized):
        raise FusionException('concatenation requires l2-normalized inputs')
    return EmbeddingMatrix(np.hstack([a.data, b.data]), aligned_to=a.aligned_to)

def fit_truncated_svd(matrix: EmbeddingMatrix, d_out: int) -> SvdProjector:
    if not 1 <= d_out <= matrix.dim:
        raise FusionException(f'd_out must be in [1, {matrix.dim}] (got {d_out})')
    data = matrix.data.astype(np.float64)
    gram = data.T @ data
    eigenvalues, eigenvectors = np.linalg.eigh(gram)
    order = np.argsort(-eigenvalues, kind='stable')[:d_out]
    basis = eigenvectors[:, order]
    # sign convention: largest-magnitude component of each column is positive
    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivots, np.arange(d_out)])
    signs[signs == 0] = 1.0
    basis = basis * signs
    singular_values = np.sqrt(np.clip(eigenvalues[order], 0.0, None))
    return SvdProjector(basis, singular_values, matrix.aligned_to)

def fuse_svd_add(a: EmbeddingMatrix, b: EmbeddingMatrix,
                 sources: Tuple[str, str] = ('search', 'rec')) -> Tuple[EmbeddingMatrix, FusionSpec]:
    _check_aligned(a, b)
    a_norm = a if a.normalized else l2_normalize(a)
    b_norm = b if b.normalized else l2_normalize(b)
    dim = min(a.dim, b.dim)
    projector = None
    reduced = None
    try:
        if a.dim > b.dim:
            projector = fit_truncated_svd(a_norm, dim)
            a_norm = l2_normalize(EmbeddingMatrix(projector.project(a_norm.data), aligned_to=a.aligned_to))
            reduced = sources[0]
        elif b.dim > a.dim:
            projector = fit_truncated_svd(b_norm, dim)
            b_norm = l2_normalize(EmbeddingMatrix(projector.project(b_norm.data), aligned_to=b.aligned_to))
            reduced = sources[1]
    except EmbeddingStoreException as e:
        raise FusionException(f'cannot re-normalize reduced {reduced or "space"}: {e}')
    if reduced is not None:
        log.info('reduced %s from %d to %d dimensions', reduced, max(a.dim, b.dim), dim)
    fused = a_norm.data.astype(np.float64) + b_norm.data.astype(np.float64)
    spec = FusionSpec(FusionKind.SVD_ADD, tuple(sources), (a.dim, b.dim), dim, projector, reduced)
    return EmbeddingMatrix(fused, aligned_to=a.aligned_to), spec

def _normalize_rows(data: np.ndarray) -> np.ndarray:
    norms = np.sqrt((data * data).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise FusionException('cannot project a zero vector')
    return data / norms

def project_context(vectors: Mapping[str, np.ndarray], spec: FusionSpec) -> np.ndarray:
    """
        Places context vectors (one row, or a stack of rows) from the source spaces they
        are available in into the fused space described by spec.
    """
    available = {}
    for space, v in vectors.items():
        if space not in spec.sources:
            continue
        v = np.asarray(v, dtype=np.float64)
        expected = spec.source_dims[spec.sources.index(space)]
        if v.shape[-1] != expected:
            raise FusionException(f'{space} vector has dim {v.shape[-1]}, expected {expected}')
        available[space] = v
    if not available:
        raise FusionException(f'context has none of the source spaces {spec.sources}')

    if spec.kind == FusionKind.PASSTHROUGH:
        return available[spec.sources[0]]

    if spec.kind == FusionKind.CONCAT:
        shape = next(iter(available.values())).shape[:-1]
        blocks = []
        for space, dim in zip(spec.sources, spec.source_dims):
            if space in available:
                blocks.append(_normalize_rows(available[space]))
            else:
                blocks.append(np.zeros(shape + (dim,)))
        return np.concatenate(blocks, axis=-1)

    out = None
    for space in spec.sources:
        if space not in available:
            continue
        v = _normalize_rows(available[space])
        if space == spec.reduced:
            assert spec.projector is not None
            v = _normalize_rows(spec.projector.project(v))
        out = v if out is None else out + v
    assert out is not None
    return out

def fit_linear_bridge(source: EmbeddingMatrix, target: EmbeddingMatrix, ridge: float = 1e-3) -> LinearBridge:
    _check_aligned(source, target)
    x = source.data.astype(np.float64)
    y = target.data.astype(np.float64)
    gram = x.T @ x + ridge * np.eye(source.dim)
    return LinearBridge(np.linalg.solve(gram, x.T @ y), ridge)

def save_projector(path: str, projector: SvdProjector) -> None:
    write_artifact(path, Artifact(
        meta={'d_in': projector.d_in, 'd_out': projector.d_out, 'fingerprint': projector.fitted_on},
        blocks=[ArtifactBlock('basis', projector.basis), ArtifactBlock('singular_values', projector.singular_values)]
    ))

def load_projector(path: str) -> SvdProjector:
    artifact = read_artifact(path)
    basis = artifact.block('basis').astype(np.float64)
    if basis.shape != (artifact.meta['d_in'], artifact.meta['d_out']):
        raise FusionException(f'projector basis shape {basis.shape} disagrees with its header')
    return SvdProjector(basis, artifact.block('singular_values').astype(np.float64), artifact.meta.get('fingerprint'))
