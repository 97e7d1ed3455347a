import os

import numpy as np

from semantic_ids.embedding_store import Catalog, EmbeddingMatrix
from semantic_ids.id_space import (IdSpaceException, Namespace, SINGLE_SEGMENT, Token, build_prefix_share,
                                   build_separate, build_task_specific, build_trie, prefix_share_codebooks,
                                   read_assignment, write_assignment, write_vocab)
from semantic_ids.quantizer import ItemCodes

def _random_codes(rng, n, level_sizes, space='plain'):
    return ItemCodes([tuple(int(rng.integers(k)) for k in level_sizes) for _ in range(n)], level_sizes, space)

def test_task_specific_budget():
    rng = np.random.default_rng(0)
    assignment = build_task_specific(_random_codes(rng, 60, (256, 256)))
    assert assignment.vocab.code_budget == 512
    assert assignment.vocab.suffix_count == max(t.codeword for sid in assignment.ids for t in sid.tokens if t.is_suffix) + 1
    assert all(len(sid) == 3 for sid in assignment.ids)
    assert all(t.namespace == Namespace.PLAIN for sid in assignment.ids for t in sid.tokens[:2])

def test_task_specific_single_item():
    assignment = build_task_specific(ItemCodes([(4, 9)], (16, 16)))
    assert assignment.ids[0].tokens == (Token(Namespace.PLAIN, 0, 4), Token(Namespace.PLAIN, 1, 9), Token.suffix(0))
    assert assignment.vocab.size == 33

def test_task_specific_collisions():
    assignment = build_task_specific(ItemCodes([(1, 1)] * 5, (4, 4)))
    assert [sid.tokens[-1].codeword for sid in assignment.ids] == [0, 1, 2, 3, 4]
    assert assignment.vocab.suffix_count == 5
    assert assignment.vocab.code_budget == 8

def test_coverage_gap():
    try:
        build_task_specific(ItemCodes([(0,)], (2,)), n_items=2)
    except IdSpaceException:
        pass
    else:
        assert False
    try:
        build_separate(ItemCodes([(0,), (1,)], (2,)), ItemCodes([(0,)], (2,)))
    except IdSpaceException:
        pass
    else:
        assert False

def test_separate_budget_and_layout():
    rng = np.random.default_rng(1)
    assignment = build_separate(_random_codes(rng, 40, (256, 256), 'search'), _random_codes(rng, 40, (256, 256), 'rec'))
    assert assignment.vocab.code_budget == 1024
    search, rec = assignment.segment('search'), assignment.segment('rec')
    assert (search.start, search.stop, rec.start, rec.stop) == (0, 3, 3, 6)
    for sid in assignment.ids:
        assert [t.namespace for t in sid.tokens] == [Namespace.SEARCH, Namespace.SEARCH, Namespace.SUFFIX,
                                                     Namespace.REC, Namespace.REC, Namespace.SUFFIX]

def test_separate_segments_disambiguate_independently():
    search = ItemCodes([(2,), (2,), (3,)], (4,))
    rec = ItemCodes([(0,), (1,), (1,)], (4,))
    assignment = build_separate(search, rec)
    assert [sid.tokens[1].codeword for sid in assignment.ids] == [0, 1, 0]
    assert [sid.tokens[3].codeword for sid in assignment.ids] == [0, 0, 1]

def test_prefix_share_budget():
    rng = np.random.default_rng(2)
    fused, search, rec = (EmbeddingMatrix(rng.standard_normal((300, 4))) for _ in range(3))
    codebooks = prefix_share_codebooks(fused, search, rec, 256, max_iters=5)
    assignment = build_prefix_share(fused, search, rec, 256, codebooks=codebooks)
    assert assignment.vocab.code_budget == 768
    assert sum(1 for t in assignment.vocab.tokens if t.namespace == Namespace.SHARED) == 256
    assert sum(1 for t in assignment.vocab.tokens if t.namespace in (Namespace.SEARCH, Namespace.REC)) == 512

    shared_codes, _ = codebooks[0].models[0].assign(fused)
    assert [sid.tokens[0].codeword for sid in assignment.ids] == shared_codes.tolist()
    search_codes, _ = codebooks[1].models[0].assign(search)
    assert [sid.tokens[1].codeword for sid in assignment.ids] == search_codes.tolist()

def test_prefix_share_identical_items():
    same = EmbeddingMatrix(np.tile([[1.0, 2.0]], (4, 1)))
    assignment = build_prefix_share(same, same, same, 2)
    assert len({sid.tokens[:3] for sid in assignment.ids}) == 1
    assert [sid.tokens[3].codeword for sid in assignment.ids] == [0, 1, 2, 3]

def test_trie_shapes():
    distinct = build_trie(build_task_specific(ItemCodes([(0, 0), (1, 0), (2, 0)], (3, 3))))
    assert list(distinct) == [SINGLE_SEGMENT]
    assert len(distinct[SINGLE_SEGMENT].root.children) == 3

    trie = build_trie(build_task_specific(ItemCodes([(1, 2), (1, 3)], (4, 4))))[SINGLE_SEGMENT]
    assert len(trie.root.children) == 1
    first = trie.root.children[0]
    assert first.token == Token(Namespace.PLAIN, 0, 1)
    assert [c.token.codeword for c in first.children] == [2, 3]
    assert trie.depth == 3 and trie.n_leaves == 2

def test_trie_paths_and_walk():
    rng = np.random.default_rng(3)
    assignment = build_task_specific(_random_codes(rng, 100, (4, 4)))
    trie = build_trie(assignment)[SINGLE_SEGMENT]
    paths = list(trie.paths())
    assert sorted(item for _, item in paths) == list(range(100))
    assert [p for p, _ in paths] == sorted(p for p, _ in paths)
    for tokens, item in paths:
        assert tokens == assignment.ids[item].tokens
        assert trie.walk(tokens).item == item
    assert trie.walk((Token(Namespace.REC, 0, 0),)) is None

def test_separate_tries():
    assignment = build_separate(ItemCodes([(0,), (1,)], (2,)), ItemCodes([(1,), (1,)], (2,)))
    tries = build_trie(assignment)
    assert set(tries) == {'search', 'rec'}
    assert all(t.namespace in (Namespace.REC, Namespace.SUFFIX) for path, _ in tries['rec'].paths() for t in path)
    assert len(tries['rec'].root.children) == 1

def test_tokens():
    token = Token(Namespace.SEARCH, 1, 17)
    assert str(token) == 'SEARCH:1:17'
    assert Token.from_string('SEARCH:1:17') == token
    assert Token.from_string('SUFFIX:0:3') == Token.suffix(3)
    assert Token.suffix(0) > Token(Namespace.REC, 5, 300)
    for bad in ('SEARCH:1', 'BOGUS:0:1', 'REC:x:1'):
        try:
            Token.from_string(bad)
        except IdSpaceException:
            pass
        else:
            assert False

def test_assignment_persists(tmp_path):
    rng = np.random.default_rng(4)
    catalog = Catalog([f'item{i}' for i in range(30)], np.zeros(30, dtype=np.int64))
    assignment = build_separate(_random_codes(rng, 30, (3, 3)), _random_codes(rng, 30, (3, 3)))
    path = os.path.join(tmp_path, 'assignment.tsv')
    vocab_path = os.path.join(tmp_path, 'vocab.tsv')
    write_assignment(path, assignment, catalog)
    write_vocab(vocab_path, assignment.vocab)

    loaded = read_assignment(path, vocab_path, catalog)
    assert loaded.ids == assignment.ids
    assert loaded.segments == assignment.segments
    assert loaded.strategy == 'separate'
    assert loaded.vocab.tokens == assignment.vocab.tokens

    os.remove(path + '.json')
    fallback = read_assignment(path, vocab_path, catalog)
    assert fallback.segments == assignment.segments
    assert fallback.strategy == 'separate'
