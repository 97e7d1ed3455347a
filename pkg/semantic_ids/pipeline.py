import attr
import logging

from enum import Enum
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from .embedding_store import (Catalog, EmbeddingMatrix, InteractionLog, QuerySet, align, l2_normalize,
                              load_catalog, load_embeddings, load_interactions, load_manifest, load_queries)
from .enmf import EnmfModel, load_model, user_vectors
from .fusion import FusionSpec, fit_linear_bridge, fuse_concat, fuse_svd_add, project_context
from .id_space import (IdAssignment, IdTrie, Namespace, SINGLE_SEGMENT, build_prefix_share, build_separate,
                       build_task_specific, build_trie, prefix_share_codebooks)
from .quantizer import (DEFAULT_CODEBOOK_SIZE, DEFAULT_LEVELS, DEFAULT_MAX_ITERS, QuantizerKind, RQCodebooks,
                        encode_items, fit_codebooks)
from .retrieval import CodebookLayout, LevelBinding, RetrievalIndex, TaskView

log = logging.getLogger(__name__)

class PipelineException(Exception): pass

BRIDGE_SOURCES = ('search', 'content', 'multi_task')

class Strategy(Enum):
    CONTENT = 'content'
    SEARCH = 'search'
    REC = 'rec'
    SEPARATE = 'separate'
    PREFIX_SHARE = 'prefix_share'
    FUSED_CONCAT = 'fused_concat'
    FUSED_SVD = 'fused_svd'
    MULTI_TASK = 'multi_task'

    @classmethod
    def from_string(cls, s: str) -> 'Strategy':
        try:
            return cls(s.strip().lower())
        except ValueError:
            raise PipelineException(f'unknown strategy {s!r}')

@attr.define(slots=True, frozen=True)
class QuantizerParams:
    kind: QuantizerKind = QuantizerKind.RQ_KMEANS
    levels: int = DEFAULT_LEVELS
    codebook_size: int = DEFAULT_CODEBOOK_SIZE
    max_iters: int = DEFAULT_MAX_ITERS

@attr.define(slots=True, frozen=True)
class Dataset:
    catalog: Catalog
    spaces: Mapping[str, EmbeddingMatrix] = attr.field(eq=False)
    queries: QuerySet = attr.field(eq=False)
    interactions: InteractionLog = attr.field(eq=False)
    enmf: Optional[EnmfModel] = attr.field(default=None, eq=False)

    def space(self, name: str) -> EmbeddingMatrix:
        try:
            return self.spaces[name]
        except KeyError:
            raise PipelineException(f'dataset has no {name} embeddings')

def load_dataset(catalog: str, manifest: str, interactions: str, queries: str,
                 embeddings: Mapping[str, str], query_embeddings: Mapping[str, str],
                 enmf: Optional[str] = None) -> Dataset:
    loaded = load_catalog(catalog)
    item_order = load_manifest(manifest)
    interaction_log = load_interactions(interactions, loaded)
    popularity = interaction_log.train_popularity()
    if not np.array_equal(popularity, loaded.popularity):
        log.warning('catalog popularity disagrees with the train log; using train-log counts')
        loaded = loaded.with_popularity(popularity)
    spaces = {
        name: align(loaded, load_embeddings(path, expected_rows=loaded.n_items), item_order)
        for name, path in sorted(embeddings.items())
    }
    query_set = load_queries(queries, loaded, query_embeddings)
    model = load_model(enmf) if enmf else None
    log.info('loaded %d items, %d users, %d queries, spaces %s',
             loaded.n_items, interaction_log.n_users, len(query_set.query_ids), sorted(spaces))
    return Dataset(loaded, spaces, query_set, interaction_log, model)

@attr.define(slots=True, frozen=True)
class StrategyArtifacts:
    strategy: Strategy
    assignment: IdAssignment
    tries: Mapping[str, IdTrie]
    layouts: Mapping[str, CodebookLayout]
    spaces: Mapping[str, EmbeddingMatrix] = attr.field(eq=False)
    codebooks: Mapping[str, RQCodebooks] = attr.field(eq=False)
    fusions: Mapping[str, FusionSpec] = attr.field(factory=dict, eq=False)

    def segment_for(self, task: str) -> str:
        return task if task in self.tries else SINGLE_SEGMENT

def fused_space(dataset: Dataset, name: str) -> Tuple[EmbeddingMatrix, FusionSpec]:
    search = dataset.space('search')
    rec = dataset.space('rec')
    if name == Strategy.FUSED_CONCAT.value:
        matrix = fuse_concat(l2_normalize(search), l2_normalize(rec))
        return matrix, FusionSpec.concat(('search', 'rec'), (search.dim, rec.dim))
    return fuse_svd_add(search, rec, ('search', 'rec'))

SpaceSet = Tuple[Dict[str, EmbeddingMatrix], Dict[str, FusionSpec]]

def strategy_spaces(dataset: Dataset, strategy: Strategy) -> SpaceSet:
    """Item matrices each of the strategy's codebooks is fitted on, keyed by space name."""
    if strategy in (Strategy.FUSED_CONCAT, Strategy.FUSED_SVD):
        matrix, spec = fused_space(dataset, strategy.value)
        return {strategy.value: matrix}, {strategy.value: spec}
    if strategy == Strategy.SEPARATE:
        return {'search': dataset.space('search'), 'rec': dataset.space('rec')}, {}
    if strategy == Strategy.PREFIX_SHARE:
        matrix, spec = fused_space(dataset, Strategy.FUSED_SVD.value)
        return {'fused_svd': matrix, 'search': dataset.space('search'), 'rec': dataset.space('rec')}, {'fused_svd': spec}
    return {strategy.value: dataset.space(strategy.value)}, {}

def strategy_layouts(strategy: Strategy, codebooks: Mapping[str, RQCodebooks]) -> Dict[str, CodebookLayout]:
    try:
        if strategy == Strategy.SEPARATE:
            return {
                'search': CodebookLayout.single('search', codebooks['search']),
                'rec': CodebookLayout.single('rec', codebooks['rec'])
            }
        if strategy == Strategy.PREFIX_SHARE:
            return {SINGLE_SEGMENT: CodebookLayout([
                LevelBinding('fused_svd', codebooks['shared'], 0),
                LevelBinding('search', codebooks['search'], 0),
                LevelBinding('rec', codebooks['rec'], 0),
                None
            ])}
        return {SINGLE_SEGMENT: CodebookLayout.single(strategy.value, codebooks[strategy.value])}
    except KeyError as e:
        raise PipelineException(f'{strategy.value} needs codebooks named {e}')

def _task_specific(dataset: Dataset, strategy: Strategy, spaces: Mapping[str, EmbeddingMatrix],
                   params: QuantizerParams, seed: int) -> Tuple[IdAssignment, Dict[str, RQCodebooks]]:
    (space, matrix), = spaces.items()
    cb = fit_codebooks(params.kind, matrix, params.levels, params.codebook_size, params.max_iters, seed)
    assignment = build_task_specific(encode_items(matrix, cb, space), dataset.catalog.n_items, Namespace.PLAIN,
                                     strategy.value, {'space': space, 'quantizer': params.kind.value})
    return assignment, {space: cb}

def _separate(dataset: Dataset, strategy: Strategy, spaces: Mapping[str, EmbeddingMatrix],
              params: QuantizerParams, seed: int) -> Tuple[IdAssignment, Dict[str, RQCodebooks]]:
    search, rec = spaces['search'], spaces['rec']
    search_cb = fit_codebooks(params.kind, search, params.levels, params.codebook_size, params.max_iters, seed)
    rec_cb = fit_codebooks(params.kind, rec, params.levels, params.codebook_size, params.max_iters, seed)
    assignment = build_separate(encode_items(search, search_cb, 'search'), encode_items(rec, rec_cb, 'rec'),
                                dataset.catalog.n_items,
                                {'search': 'search', 'rec': 'rec', 'quantizer': params.kind.value})
    return assignment, {'search': search_cb, 'rec': rec_cb}

def _prefix_share(dataset: Dataset, strategy: Strategy, spaces: Mapping[str, EmbeddingMatrix],
                  params: QuantizerParams, seed: int) -> Tuple[IdAssignment, Dict[str, RQCodebooks]]:
    if params.kind != QuantizerKind.RQ_KMEANS:
        log.warning('prefix-share always uses k-means codebooks, ignoring %s', params.kind.value)
    fused, search, rec = spaces['fused_svd'], spaces['search'], spaces['rec']
    codebooks = prefix_share_codebooks(fused, search, rec, params.codebook_size, params.max_iters, seed)
    assignment = build_prefix_share(fused, search, rec, params.codebook_size, params.max_iters, seed, codebooks)
    return assignment, dict(zip(('shared', 'search', 'rec'), codebooks))

_AssignmentBuilder = Callable[[Dataset, Strategy, Mapping[str, EmbeddingMatrix], QuantizerParams, int],
                              Tuple[IdAssignment, Dict[str, RQCodebooks]]]

_STRATEGY_BUILDERS: Mapping[Strategy, _AssignmentBuilder] = {
    Strategy.CONTENT: _task_specific,
    Strategy.SEARCH: _task_specific,
    Strategy.REC: _task_specific,
    Strategy.SEPARATE: _separate,
    Strategy.PREFIX_SHARE: _prefix_share,
    Strategy.FUSED_CONCAT: _task_specific,
    Strategy.FUSED_SVD: _task_specific,
    Strategy.MULTI_TASK: _task_specific,
}

def build_strategy(dataset: Dataset, strategy: Strategy, params: QuantizerParams, seed: int) -> StrategyArtifacts:
    log.info('building %s ids (seed %d, %s)', strategy.value, seed, params.kind.value)
    spaces, fusions = strategy_spaces(dataset, strategy)
    assignment, codebooks = _STRATEGY_BUILDERS[strategy](dataset, strategy, spaces, params, seed)
    return StrategyArtifacts(strategy, assignment, build_trie(assignment), strategy_layouts(strategy, codebooks),
                             spaces, codebooks, fusions)

def restore_strategy(dataset: Dataset, assignment: IdAssignment, codebooks: Mapping[str, RQCodebooks]) -> StrategyArtifacts:
    """Rebuilds a strategy from a persisted assignment and its codebooks."""
    strategy = Strategy.from_string(assignment.strategy)
    if assignment.n_items != dataset.catalog.n_items:
        raise PipelineException(f'assignment has {assignment.n_items} ids for {dataset.catalog.n_items} items')
    spaces, fusions = strategy_spaces(dataset, strategy)
    return StrategyArtifacts(strategy, assignment, build_trie(assignment), strategy_layouts(strategy, codebooks),
                             spaces, dict(codebooks), fusions)

def query_vectors(dataset: Dataset, artifacts: StrategyArtifacts) -> Dict[str, np.ndarray]:
    """
        Query rows for every space the strategy's codebooks live in: a direct query
        embedding when one exists, otherwise a fusion projection, otherwise a linear
        bridge fitted on catalog items.
    """
    direct = dataset.queries.embeddings
    out: Dict[str, np.ndarray] = {}
    for space, matrix in artifacts.spaces.items():
        if space in direct:
            out[space] = direct[space].data.astype(np.float64)
            continue
        spec = artifacts.fusions.get(space)
        if spec is not None and any(s in direct for s in spec.sources):
            out[space] = project_context({s: direct[s].data for s in spec.sources if s in direct}, spec)
            continue
        source = next((s for s in BRIDGE_SOURCES if s in direct and s in dataset.spaces), None)
        if source is None:
            log.warning('no query projection into %s', space)
            continue
        bridge = fit_linear_bridge(dataset.spaces[source], matrix)
        out[space] = bridge.apply(direct[source].data)
        log.debug('bridged %s queries into %s', source, space)
    return out

def make_index(dataset: Dataset, artifacts: StrategyArtifacts) -> RetrievalIndex:
    views = {
        task: TaskView(artifacts.tries[artifacts.segment_for(task)], artifacts.layouts[artifacts.segment_for(task)])
        for task in ('search', 'rec')
    }
    users = {}
    if dataset.enmf is not None and 'rec' in artifacts.spaces:
        if dataset.enmf.n_users == dataset.interactions.n_users and dataset.enmf.d == artifacts.spaces['rec'].dim:
            users['rec'] = user_vectors(dataset.enmf)
        else:
            log.warning('ENMF model does not match the dataset; user factors unavailable')
    return RetrievalIndex(
        strategy=artifacts.strategy.value,
        views=views,
        item_vectors={space: m.data.astype(np.float64) for space, m in artifacts.spaces.items()},
        query_vectors=query_vectors(dataset, artifacts),
        query_index=dataset.queries.index,
        interactions=dataset.interactions,
        popularity=dataset.catalog.popularity,
        user_vectors=users
    )
