import attr
import json
import logging

from enum import IntEnum
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .embedding_store import Catalog, EmbeddingMatrix
from .quantizer import DEFAULT_MAX_ITERS, ItemCodes, RQCodebooks, disambiguate, encode_items, rq_fit

log = logging.getLogger(__name__)

class IdSpaceException(Exception): pass

SINGLE_SEGMENT = 'id'

class Namespace(IntEnum):
    SHARED = 0
    SEARCH = 1
    REC = 2
    PLAIN = 3
    SUFFIX = 4

    @classmethod
    def from_string(cls, s: str) -> 'Namespace':
        try:
            return cls[s.upper()]
        except KeyError:
            raise IdSpaceException(f'unknown namespace {s!r}')

@attr.define(slots=True, frozen=True, order=True)
class Token:
    namespace: Namespace
    level: int
    codeword: int
    is_suffix: bool = False

    @classmethod
    def suffix(cls, value: int) -> 'Token':
        return Token(Namespace.SUFFIX, 0, value, True)

    def __str__(self) -> str:
        return f'{self.namespace.name}:{self.level}:{self.codeword}'

    @classmethod
    def from_string(cls, s: str) -> 'Token':
        try:
            namespace, level, codeword = s.split(':')
            ns = Namespace.from_string(namespace)
            return Token(ns, int(level), int(codeword), ns == Namespace.SUFFIX)
        except ValueError:
            raise IdSpaceException(f'malformed token {s!r}')

@attr.define(slots=True, frozen=True)
class SemanticId:
    tokens: Tuple[Token, ...] = attr.field(converter=tuple)

    def __len__(self) -> int:
        return len(self.tokens)

    def __str__(self) -> str:
        return ' '.join(str(t) for t in self.tokens)

@attr.define(slots=True, frozen=True)
class TokenVocab:
    tokens: Tuple[Token, ...] = attr.field(converter=lambda ts: tuple(sorted(ts)))
    ids: Mapping[Token, int] = attr.field(init=False, eq=False, repr=False)

    def __attrs_post_init__(self) -> None:
        ids = {token: i for i, token in enumerate(self.tokens)}
        if len(ids) != len(self.tokens):
            raise IdSpaceException('vocabulary has duplicate tokens')
        object.__setattr__(self, 'ids', ids)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def code_budget(self) -> int:
        """Code tokens only; suffix tokens are counted separately."""
        return sum(1 for t in self.tokens if not t.is_suffix)

    @property
    def suffix_count(self) -> int:
        return sum(1 for t in self.tokens if t.is_suffix)

    def __contains__(self, token: Token) -> bool:
        return token in self.ids

    def token_id(self, token: Token) -> int:
        try:
            return self.ids[token]
        except KeyError:
            raise IdSpaceException(f'token {token} is not in the vocabulary')

@attr.define(slots=True, frozen=True)
class IdSegment:
    name: str
    start: int
    stop: int

@attr.define(slots=True, frozen=True)
class IdAssignment:
    strategy: str
    ids: Tuple[SemanticId, ...] = attr.field(converter=tuple)
    vocab: TokenVocab
    segments: Tuple[IdSegment, ...] = attr.field(converter=tuple)
    provenance: Mapping[str, str] = attr.field(factory=dict)

    def __attrs_post_init__(self) -> None:
        if len(set(self.ids)) != len(self.ids):
            raise IdSpaceException(f'{self.strategy} assignment has duplicate semantic ids')
        for item, sid in enumerate(self.ids):
            for token in sid.tokens:
                if token not in self.vocab:
                    raise IdSpaceException(f'item {item} uses token {token} missing from the vocabulary')
        for segment in self.segments:
            if len(set(sid.tokens[segment.start:segment.stop] for sid in self.ids)) != len(self.ids):
                raise IdSpaceException(f'segment {segment.name} does not identify items uniquely')

    @property
    def n_items(self) -> int:
        return len(self.ids)

    def segment(self, name: str) -> IdSegment:
        found = next(filter(lambda s: s.name == name, self.segments), None)
        if found is None:
            raise IdSpaceException(f'{self.strategy} assignment has no {name} segment')
        return found

def _check_coverage(codes: ItemCodes, n_items: Optional[int]) -> None:
    if n_items is not None and codes.n_items != n_items:
        raise IdSpaceException(f'codes cover {codes.n_items} of {n_items} items')

def _code_tokens(namespace: Namespace, level_sizes: Sequence[int], offset: int = 0) -> List[Token]:
    return [Token(namespace, offset + level, c) for level, k in enumerate(level_sizes) for c in range(k)]

def _segment_tokens(codes: ItemCodes, namespace: Namespace, offset: int = 0) -> List[List[Token]]:
    out = []
    for final in disambiguate(codes.codes):
        tokens = [Token(namespace, offset + level, c) for level, c in enumerate(final[:-1])]
        tokens.append(Token.suffix(final[-1]))
        out.append(tokens)
    return out

def _suffix_tokens(ids: Sequence[Sequence[Token]]) -> List[Token]:
    return sorted({t for tokens in ids for t in tokens if t.is_suffix})

def build_task_specific(codes: ItemCodes, n_items: Optional[int] = None,
                        namespace: Namespace = Namespace.PLAIN, strategy: str = 'task_specific',
                        provenance: Optional[Mapping[str, str]] = None) -> IdAssignment:
    _check_coverage(codes, n_items)
    ids = _segment_tokens(codes, namespace)
    vocab = TokenVocab(_code_tokens(namespace, codes.level_sizes) + _suffix_tokens(ids))
    log.info('%s ids: %d code tokens, %d suffix tokens', strategy, vocab.code_budget, vocab.suffix_count)
    return IdAssignment(
        strategy,
        [SemanticId(t) for t in ids],
        vocab,
        [IdSegment(SINGLE_SEGMENT, 0, codes.depth + 1)],
        provenance or {'codes': codes.space}
    )

def build_separate(search_codes: ItemCodes, rec_codes: ItemCodes, n_items: Optional[int] = None,
                   provenance: Optional[Mapping[str, str]] = None) -> IdAssignment:
    _check_coverage(search_codes, n_items)
    _check_coverage(rec_codes, search_codes.n_items)
    search = _segment_tokens(search_codes, Namespace.SEARCH)
    rec = _segment_tokens(rec_codes, Namespace.REC)
    ids = [s + r for s, r in zip(search, rec)]
    vocab = TokenVocab(
        _code_tokens(Namespace.SEARCH, search_codes.level_sizes)
        + _code_tokens(Namespace.REC, rec_codes.level_sizes)
        + _suffix_tokens(ids)
    )
    split = search_codes.depth + 1
    log.info('separate ids: %d code tokens, %d suffix tokens', vocab.code_budget, vocab.suffix_count)
    return IdAssignment(
        'separate',
        [SemanticId(t) for t in ids],
        vocab,
        [IdSegment('search', 0, split), IdSegment('rec', split, split + rec_codes.depth + 1)],
        provenance or {'search': search_codes.space, 'rec': rec_codes.space}
    )

def prefix_share_codebooks(fused: EmbeddingMatrix, search: EmbeddingMatrix, rec: EmbeddingMatrix,
                           K: int, max_iters: int = DEFAULT_MAX_ITERS, seed: int = 0) -> Tuple[RQCodebooks, RQCodebooks, RQCodebooks]:
    """One k-means codebook per prefix-share position: shared, search, rec."""
    if not (fused.rows == search.rows == rec.rows):
        raise IdSpaceException('prefix-share spaces cover different catalogs')
    return (
        rq_fit(fused, 1, K, max_iters, seed),
        rq_fit(search, 1, K, max_iters, seed),
        rq_fit(rec, 1, K, max_iters, seed)
    )

def build_prefix_share(fused: EmbeddingMatrix, search: EmbeddingMatrix, rec: EmbeddingMatrix,
                       K: int, max_iters: int = DEFAULT_MAX_ITERS, seed: int = 0,
                       codebooks: Optional[Tuple[RQCodebooks, RQCodebooks, RQCodebooks]] = None) -> IdAssignment:
    if codebooks is None:
        codebooks = prefix_share_codebooks(fused, search, rec, K, max_iters, seed)
    shared_cb, search_cb, rec_cb = codebooks
    shared = encode_items(fused, shared_cb, 'fused').codes
    by_search = encode_items(search, search_cb, 'search').codes
    by_rec = encode_items(rec, rec_cb, 'rec').codes

    ids = []
    for final in disambiguate([a + b + c for a, b, c in zip(shared, by_search, by_rec)]):
        ids.append([
            Token(Namespace.SHARED, 0, final[0]),
            Token(Namespace.SEARCH, 1, final[1]),
            Token(Namespace.REC, 2, final[2]),
            Token.suffix(final[3])
        ])
    vocab = TokenVocab(
        _code_tokens(Namespace.SHARED, shared_cb.level_sizes)
        + _code_tokens(Namespace.SEARCH, search_cb.level_sizes, 1)
        + _code_tokens(Namespace.REC, rec_cb.level_sizes, 2)
        + _suffix_tokens(ids)
    )
    log.info('prefix-share ids: %d code tokens, %d suffix tokens', vocab.code_budget, vocab.suffix_count)
    return IdAssignment(
        'prefix_share',
        [SemanticId(t) for t in ids],
        vocab,
        [IdSegment(SINGLE_SEGMENT, 0, 4)],
        {'shared': 'fused', 'search': 'search', 'rec': 'rec'}
    )

@attr.define(slots=True)
class TrieNode:
    token: Optional[Token]
    depth: int
    children: List['TrieNode'] = attr.field(factory=list)
    item: Optional[int] = None
    child_index: Dict[Token, int] = attr.field(factory=dict, repr=False)

    @property
    def is_leaf(self) -> bool:
        return self.item is not None

    def child(self, token: Token) -> Optional['TrieNode']:
        i = self.child_index.get(token)
        return None if i is None else self.children[i]

@attr.define(slots=True)
class IdTrie:
    root: TrieNode
    n_leaves: int
    depth: int

    def walk(self, tokens: Sequence[Token]) -> Optional[TrieNode]:
        node: Optional[TrieNode] = self.root
        for token in tokens:
            if node is None:
                return None
            node = node.child(token)
        return node

    def paths(self) -> Iterator[Tuple[Tuple[Token, ...], int]]:
        stack: List[Tuple[TrieNode, Tuple[Token, ...]]] = [(self.root, ())]
        while stack:
            node, prefix = stack.pop()
            if node.is_leaf:
                assert node.item is not None
                yield prefix, node.item
                continue
            for child in reversed(node.children):
                stack.append((child, prefix + (child.token,)))

def _build_one(paths: Sequence[Tuple[Token, ...]]) -> IdTrie:
    root = TrieNode(None, 0)
    pending: Dict[int, Dict[Token, TrieNode]] = {}
    nodes = [root]
    for item, tokens in enumerate(paths):
        node = root
        for depth, token in enumerate(tokens, start=1):
            step = pending.setdefault(id(node), {})
            next_node = step.get(token)
            if next_node is None:
                next_node = TrieNode(token, depth)
                step[token] = next_node
                nodes.append(next_node)
            if next_node.is_leaf:
                raise IdSpaceException(f'internal error: item {item} extends the id of item {next_node.item}')
            node = next_node
        if node.item is not None or id(node) in pending:
            raise IdSpaceException(f'internal error: duplicate semantic id for item {item}')
        node.item = item
    for node in nodes:
        children = pending.get(id(node), {})
        node.children = [children[t] for t in sorted(children)]
        node.child_index = {child.token: i for i, child in enumerate(node.children)}
    depth = max((len(p) for p in paths), default=0)
    return IdTrie(root, len(paths), depth)

def build_trie(assignment: IdAssignment) -> Dict[str, IdTrie]:
    return {
        segment.name: _build_one([sid.tokens[segment.start:segment.stop] for sid in assignment.ids])
        for segment in assignment.segments
    }

def write_vocab(path: str, vocab: TokenVocab) -> None:
    pd.DataFrame({
        'token': [str(t) for t in vocab.tokens],
        'token_id': np.arange(vocab.size)
    }).to_csv(path, sep='\t', index=False, lineterminator='\n')

def read_vocab(path: str) -> TokenVocab:
    frame = pd.read_csv(path, sep='\t', dtype=str, keep_default_na=False)
    tokens = [Token.from_string(s) for s in frame['token']]
    vocab = TokenVocab(tokens)
    if [vocab.token_id(t) for t in tokens] != [int(i) for i in frame['token_id']]:
        raise IdSpaceException(f'{path} token ids are not in sorted token order')
    return vocab

def write_assignment(path: str, assignment: IdAssignment, catalog: Catalog) -> None:
    if assignment.n_items != catalog.n_items:
        raise IdSpaceException(f'{assignment.n_items} ids for {catalog.n_items} catalog items')
    pd.DataFrame({
        'item_id': catalog.item_ids,
        'strategy': assignment.strategy,
        'tokens': [str(sid) for sid in assignment.ids],
        'suffix': [' '.join(str(t.codeword) for t in sid.tokens if t.is_suffix) for sid in assignment.ids]
    }).to_csv(path, sep='\t', index=False, lineterminator='\n')
    with open(path + '.json', 'w', encoding='utf-8') as f:
        json.dump({
            'strategy': assignment.strategy,
            'segments': [[s.name, s.start, s.stop] for s in assignment.segments],
            'provenance': dict(assignment.provenance)
        }, f, sort_keys=True)

def read_assignment(path: str, vocab_path: str, catalog: Catalog) -> IdAssignment:
    frame = pd.read_csv(path, sep='\t', dtype=str, keep_default_na=False)
    rows = dict(zip(frame['item_id'], frame['tokens']))
    missing = [item_id for item_id in catalog.item_ids if item_id not in rows]
    if missing:
        raise IdSpaceException(f'{path} has no id for {len(missing)} items, first {missing[0]!r}')
    ids = [SemanticId(Token.from_string(s) for s in rows[item_id].split()) for item_id in catalog.item_ids]
    try:
        with open(path + '.json', encoding='utf-8') as f:
            header = json.load(f)
        segments = [IdSegment(name, int(start), int(stop)) for name, start, stop in header['segments']]
        strategy, provenance = header['strategy'], header['provenance']
    except OSError:
        # without the sidecar, segments end at suffix tokens
        strategy = frame['strategy'].iloc[0] if len(frame) else 'unknown'
        provenance = {}
        segments = []
        start = 0
        for i, token in enumerate(ids[0].tokens if ids else ()):
            if token.is_suffix:
                segments.append(IdSegment(SINGLE_SEGMENT, start, i + 1))
                start = i + 1
        if len(segments) == 2:
            segments = [attr.evolve(segments[0], name='search'), attr.evolve(segments[1], name='rec')]
    except (ValueError, KeyError, TypeError) as e:
        raise IdSpaceException(f'malformed assignment header for {path}: {e}')
    return IdAssignment(strategy, ids, read_vocab(vocab_path), segments, provenance)
