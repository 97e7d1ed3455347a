"""
    Generative retrieval over a trie of semantic ids.

    A decoder walks the trie one token at a time, asking a scorer for the score of
    every child of the current prefix. The built-in scorer stands in for a learned
    model: a child's score is the negative squared distance between the context's
    residual and the child's codeword, so the summed path score of an item is how well
    its codes reconstruct the context vector.
"""

import abc
import attr
import logging

from enum import Enum
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .embedding_store import Catalog, InteractionLog
from .id_space import IdTrie, Token, TrieNode
from .quantizer import RQCodebooks

log = logging.getLogger(__name__)

class RetrievalException(Exception): pass

Ranking = List[Tuple[int, float]]

class ContextKind(Enum):
    SEARCH_QUERY = 'search_query'
    REC_USER = 'rec_user'

    @classmethod
    def from_string(cls, s: str) -> 'ContextKind':
        aliases = {'search': cls.SEARCH_QUERY, 'rec': cls.REC_USER}
        if s in aliases:
            return aliases[s]
        try:
            return cls(s)
        except ValueError:
            raise RetrievalException(f'unknown context kind {s!r}')

    @property
    def task(self) -> str:
        return 'search' if self == ContextKind.SEARCH_QUERY else 'rec'

@attr.define(slots=True, frozen=True)
class DecodingConfig:
    beam_width: int = 60
    group_count: int = 30
    diversity_penalty: float = 0.25
    top_k: int = 30
    popularity_blend: float = 0.0

    @property
    def group_width(self) -> int:
        return self.beam_width // self.group_count

    def problems(self) -> List[str]:
        out = []
        if self.beam_width < 1:
            out.append(f'beam_width must be positive (got {self.beam_width})')
        if self.group_count < 1:
            out.append(f'group count must be positive (got {self.group_count})')
        elif self.beam_width % self.group_count:
            out.append(f'group count {self.group_count} does not divide beam width {self.beam_width}')
        if self.diversity_penalty < 0:
            out.append(f'diversity_penalty must be non-negative (got {self.diversity_penalty})')
        if not 1 <= self.top_k <= self.beam_width:
            out.append(f'top_k must be in [1, beam_width] (got {self.top_k})')
        if self.popularity_blend < 0:
            out.append(f'popularity_blend must be non-negative (got {self.popularity_blend})')
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise RetrievalException('; '.join(problems))

@attr.define(slots=True, frozen=True)
class LevelBinding:
    space: str
    codebooks: RQCodebooks
    level: int

@attr.define(slots=True, frozen=True)
class CodebookLayout:
    """The codebook level behind each trie depth; None marks the collision suffix."""
    bindings: Tuple[Optional[LevelBinding], ...] = attr.field(converter=tuple)

    @classmethod
    def single(cls, space: str, codebooks: RQCodebooks) -> 'CodebookLayout':
        return CodebookLayout([LevelBinding(space, codebooks, l) for l in range(codebooks.depth)] + [None])

    @property
    def spaces(self) -> Tuple[str, ...]:
        return tuple(dict.fromkeys(b.space for b in self.bindings if b is not None))

@attr.define(slots=True, frozen=True)
class Context:
    kind: ContextKind
    vectors: Mapping[str, np.ndarray] = attr.field(eq=False)
    history: FrozenSet[int] = frozenset()
    context_id: str = ''

@attr.define(slots=True, frozen=True)
class ScoredPath:
    tokens: Tuple[Token, ...]
    score: float
    node: TrieNode = attr.field(eq=False, repr=False)

    @property
    def item(self) -> Optional[int]:
        return self.node.item

class Scorer(abc.ABC):
    @abc.abstractmethod
    def score_children(self, ctx: Context, path: Tuple[Token, ...], node: TrieNode) -> np.ndarray:
        """One score per child of node, in child order; higher is better."""

def _suffix_scores(node: TrieNode, popularity: Optional[np.ndarray], blend: float) -> np.ndarray:
    if blend <= 0 or popularity is None:
        return np.zeros(len(node.children))
    items = np.array([-1 if c.item is None else c.item for c in node.children], dtype=np.int64)
    counts = np.where(items >= 0, popularity[np.maximum(items, 0)], -1)
    order = np.lexsort((items, -counts))
    rank = np.empty(len(items))
    rank[order] = np.arange(len(items))
    return -blend * rank

def residual_score_children(ctx: Context, path: Tuple[Token, ...], node: TrieNode, layout: CodebookLayout,
                            popularity: Optional[np.ndarray] = None, popularity_blend: float = 0.0) -> List[Tuple[Token, float]]:
    scores = _residual_scores(ctx, path, node, layout, popularity, popularity_blend)
    return [(child.token, float(s)) for child, s in zip(node.children, scores)]

def _residual_scores(ctx: Context, path: Tuple[Token, ...], node: TrieNode, layout: CodebookLayout,
                     popularity: Optional[np.ndarray], popularity_blend: float) -> np.ndarray:
    depth = len(path)
    if node.is_leaf:
        raise RetrievalException('cannot expand a complete id')
    if depth >= len(layout.bindings):
        raise RetrievalException(f'path depth {depth} exceeds the {len(layout.bindings)}-level layout')
    binding = layout.bindings[depth]
    if binding is None:
        return _suffix_scores(node, popularity, popularity_blend)
    vector = ctx.vectors.get(binding.space)
    if vector is None:
        return np.zeros(len(node.children))
    cb = binding.codebooks
    if len(vector) != cb.dim:
        raise RetrievalException(f'{binding.space} context has dim {len(vector)}, codebook dim {cb.dim}')

    residual = np.asarray(vector, dtype=np.float64).copy()
    for token, prior in zip(path, layout.bindings):
        if prior is not None and prior.space == binding.space and prior.codebooks is cb:
            residual -= cb.codeword(prior.level, token.codeword)
    codes = np.array([child.token.codeword for child in node.children], dtype=np.int64)
    diff = residual[None, :] - cb.codewords(binding.level, codes)
    return -(diff * diff).sum(axis=1)

class ResidualScorer(Scorer):
    def __init__(self, layout: CodebookLayout, popularity: Optional[np.ndarray] = None, popularity_blend: float = 0.0):
        self.layout = layout
        self.popularity = popularity
        self.popularity_blend = popularity_blend

    def score_children(self, ctx: Context, path: Tuple[Token, ...], node: TrieNode) -> np.ndarray:
        return _residual_scores(ctx, path, node, self.layout, self.popularity, self.popularity_blend)

class _ScoreCache:
    """Child scores and token keys per trie node, computed once per decode."""
    def __init__(self, ctx: Context, scorer: Scorer):
        self.ctx = ctx
        self.scorer = scorer
        self.scores: Dict[int, np.ndarray] = {}
        self.keys: Dict[int, np.ndarray] = {}
        self.token_keys: Dict[Token, int] = {}

    def __call__(self, beam: ScoredPath) -> Tuple[np.ndarray, np.ndarray]:
        node = id(beam.node)
        if node not in self.scores:
            self.scores[node] = np.asarray(self.scorer.score_children(self.ctx, beam.tokens, beam.node), dtype=np.float64)
            self.keys[node] = np.array(
                [self.token_keys.setdefault(c.token, len(self.token_keys)) for c in beam.node.children], dtype=np.int64)
        return self.scores[node], self.keys[node]

@attr.define(slots=True)
class _Candidates:
    beams: List[ScoredPath]
    beam: np.ndarray
    child: np.ndarray
    raw: np.ndarray
    keys: np.ndarray

    def order(self, scores: np.ndarray) -> np.ndarray:
        # beams are in token order and children are sorted, so (beam, child) is lexicographic
        return np.lexsort((self.child, self.beam, -scores))

def _extend(beams: Sequence[ScoredPath], cache: _ScoreCache) -> _Candidates:
    ordered = sorted(beams, key=lambda b: b.tokens)
    beam, child, raw, keys = [], [], [], []
    for b, path in enumerate(ordered):
        scores, token_keys = cache(path)
        beam.append(np.full(len(scores), b, dtype=np.int64))
        child.append(np.arange(len(scores), dtype=np.int64))
        raw.append(path.score + scores)
        keys.append(token_keys)
    return _Candidates(ordered, np.concatenate(beam), np.concatenate(child), np.concatenate(raw), np.concatenate(keys))

def _advance(candidates: _Candidates, keep: np.ndarray, pool: Dict[int, float]) -> List[ScoredPath]:
    out = []
    for i in keep:
        beam = candidates.beams[candidates.beam[i]]
        child = beam.node.children[candidates.child[i]]
        path = ScoredPath(beam.tokens + (child.token,), float(candidates.raw[i]), child)
        if child.is_leaf:
            assert child.item is not None
            pool[child.item] = max(pool.get(child.item, -np.inf), path.score)
        else:
            out.append(path)
    return out

def _ranked(pool: Mapping[int, float], top_k: Optional[int]) -> Ranking:
    ranking = sorted(pool.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranking if top_k is None else ranking[:top_k]

def beam_search(ctx: Context, trie: IdTrie, beam_width: int, top_k: Optional[int], scorer: Scorer) -> Ranking:
    """Plain trie-constrained beam search; ties go to the lexicographically smaller path."""
    if beam_width < 1:
        raise RetrievalException(f'beam_width must be positive (got {beam_width})')
    cache = _ScoreCache(ctx, scorer)
    pool: Dict[int, float] = {}
    beams = [ScoredPath((), 0.0, trie.root)]
    while beams:
        candidates = _extend(beams, cache)
        beams = _advance(candidates, candidates.order(candidates.raw)[:beam_width], pool)
    return _ranked(pool, top_k)

def diverse_beam_search(ctx: Context, trie: IdTrie, cfg: DecodingConfig, scorer: Scorer,
                        top_k: Optional[int] = -1) -> Ranking:
    """
        Groups of width beam_width / group_count expand in lock step. A later group's
        candidate is penalized by diversity_penalty for every time an earlier group picked
        the same token at this step; penalties steer selection only and never enter the
        reported scores. top_k=None returns the whole pool of completed items.
    """
    cfg.validate()
    if top_k == -1:
        top_k = cfg.top_k
    if trie.n_leaves == 0:
        raise RetrievalException('cannot decode over an empty trie')
    cache = _ScoreCache(ctx, scorer)
    pool: Dict[int, float] = {}
    width = cfg.group_width
    groups = [[ScoredPath((), 0.0, trie.root)] for _ in range(cfg.group_count)]
    while any(groups):
        picked: List[int] = []
        for g, beams in enumerate(groups):
            if not beams:
                continue
            candidates = _extend(beams, cache)
            scores = candidates.raw
            if cfg.diversity_penalty > 0 and picked:
                seen = np.bincount(picked, minlength=len(cache.token_keys))[candidates.keys]
                scores = scores - cfg.diversity_penalty * seen
            keep = candidates.order(scores)[:width]
            picked.extend(int(k) for k in candidates.keys[keep])
            groups[g] = _advance(candidates, keep, pool)
    return _ranked(pool, top_k)

def path_score(ctx: Context, tokens: Sequence[Token], trie: IdTrie, scorer: Scorer) -> float:
    """Sum of child scores along a complete path, recomputed from scratch."""
    node = trie.root
    total = 0.0
    for depth, token in enumerate(tokens):
        index = node.child_index.get(token)
        if index is None:
            raise RetrievalException(f'{token} is not a child at depth {depth}')
        total += float(scorer.score_children(ctx, tuple(tokens[:depth]), node)[index])
        node = node.children[index]
    return total

@attr.define(slots=True, frozen=True)
class TaskView:
    trie: IdTrie
    layout: CodebookLayout

@attr.define(slots=True, frozen=True)
class RetrievalIndex:
    """Everything a strategy needs to turn a query or user into a ranked item list."""
    strategy: str
    views: Mapping[str, TaskView]
    item_vectors: Mapping[str, np.ndarray] = attr.field(eq=False)
    query_vectors: Mapping[str, np.ndarray] = attr.field(factory=dict, eq=False)
    query_index: Mapping[str, int] = attr.field(factory=dict, eq=False)
    interactions: Optional[InteractionLog] = attr.field(default=None, eq=False)
    popularity: Optional[np.ndarray] = attr.field(default=None, eq=False)
    user_vectors: Mapping[str, np.ndarray] = attr.field(factory=dict, eq=False)

    def view(self, task: str) -> TaskView:
        try:
            return self.views[task]
        except KeyError:
            raise RetrievalException(f'{self.strategy} has no {task} view')

def _decode(ctx: Context, index: RetrievalIndex, cfg: DecodingConfig, top_k: Optional[int]) -> Ranking:
    view = index.view(ctx.kind.task)
    if not any(space in ctx.vectors for space in view.layout.spaces):
        raise RetrievalException(f'{ctx.context_id} has no vector in any of {view.layout.spaces}')
    scorer = ResidualScorer(view.layout, index.popularity, cfg.popularity_blend)
    return diverse_beam_search(ctx, view.trie, cfg, scorer, top_k)

def search_context(query_id: str, index: RetrievalIndex) -> Context:
    row = index.query_index.get(query_id)
    if row is None:
        raise RetrievalException(f'unknown query {query_id!r}')
    vectors = {space: matrix[row] for space, matrix in index.query_vectors.items()}
    return Context(ContextKind.SEARCH_QUERY, vectors, frozenset(), query_id)

def retrieve_search(query_id: str, index: RetrievalIndex, cfg: DecodingConfig) -> Ranking:
    return _decode(search_context(query_id, index), index, cfg, cfg.top_k)

def rec_context(user_id: str, index: RetrievalIndex, use_user_factors: bool = False) -> Context:
    if index.interactions is None:
        raise RetrievalException('index has no interaction log')
    user = index.interactions.user_index.get(user_id)
    if user is None:
        raise RetrievalException(f'unknown user {user_id!r}')
    history = index.interactions.train_items(user)
    if len(history) == 0:
        raise RetrievalException(f'cold user {user_id!r} has no train interactions')
    vectors = {}
    for space, matrix in index.item_vectors.items():
        if use_user_factors and space in index.user_vectors:
            vectors[space] = index.user_vectors[space][user]
        else:
            vectors[space] = matrix[history].astype(np.float64).mean(axis=0)
    return Context(ContextKind.REC_USER, vectors, frozenset(int(i) for i in history), user_id)

def retrieve_rec(user_id: str, index: RetrievalIndex, cfg: DecodingConfig,
                 exclude_history: bool = True, use_user_factors: bool = False) -> Ranking:
    ctx = rec_context(user_id, index, use_user_factors)
    if not exclude_history:
        return _decode(ctx, index, cfg, cfg.top_k)
    pool = _decode(ctx, index, cfg, None)
    return [(item, score) for item, score in pool if item not in ctx.history][:cfg.top_k]

def write_rankings(path: str, rankings: Sequence[Tuple[str, Ranking]], catalog: Catalog) -> None:
    rows = [
        (context_id, rank, catalog.item_ids[item], score)
        for context_id, ranking in rankings
        for rank, (item, score) in enumerate(ranking, start=1)
    ]
    pd.DataFrame(rows, columns=['context_id', 'rank', 'item_id', 'score']).to_csv(
        path, sep='\t', index=False, lineterminator='\n', float_format='%.9g')
