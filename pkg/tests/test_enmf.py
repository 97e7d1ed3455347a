import os

import numpy as np

from semantic_ids.embedding_store import InteractionLog
from semantic_ids.enmf import (EnmfException, EnmfModel, enmf_gradients, enmf_loss_efficient, enmf_loss_naive,
                               init_model, item_embeddings, load_model, recommend, save_model, train_enmf,
                               user_vectors)

def _log(pairs, n_users, n_items):
    users = np.array([u for u, _ in pairs], dtype=np.int64)
    items = np.array([i for _, i in pairs], dtype=np.int64)
    return InteractionLog(
        [f'u{u}' for u in range(n_users)], n_items, users, items,
        np.arange(len(pairs), dtype=np.int64), np.zeros(len(pairs), dtype=bool)
    )

def _random_instance(rng):
    n_users = int(rng.integers(1, 21))
    n_items = int(rng.integers(1, 21))
    d = int(rng.integers(1, 9))
    count = int(rng.integers(1, n_users * n_items + 1))
    pairs = list(zip(rng.integers(n_users, size=count).tolist(), rng.integers(n_items, size=count).tolist()))
    model = EnmfModel(
        rng.standard_normal((n_users, d)),
        rng.standard_normal((n_items, d)),
        rng.standard_normal(d),
        float(rng.uniform(0.01, 1.0))
    )
    return model, _log(pairs, n_users, n_items)

def test_naive_loss_by_hand():
    model = EnmfModel(np.eye(2), np.eye(2), np.ones(2), 0.5)
    interactions = _log([(0, 0), (0, 1)], 2, 2)
    assert abs(enmf_loss_naive(model, interactions) - 1.5) < 1e-12
    assert abs(enmf_loss_efficient(model, interactions) - 1.5) < 1e-12

def test_efficient_loss_matches_naive():
    rng = np.random.default_rng(0)
    for _ in range(100):
        model, interactions = _random_instance(rng)
        naive = enmf_loss_naive(model, interactions)
        efficient = enmf_loss_efficient(model, interactions)
        assert abs(naive - efficient) <= 1e-6 * max(1.0, abs(naive))

def test_duplicate_interactions_count_once():
    model = EnmfModel(np.ones((1, 1)), np.ones((2, 1)), np.ones(1), 0.2)
    once = _log([(0, 1)], 1, 2)
    twice = _log([(0, 1), (0, 1)], 1, 2)
    assert enmf_loss_efficient(model, once) == enmf_loss_efficient(model, twice)

def test_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    eps = 1e-4
    for _ in range(10):
        model, interactions = _random_instance(rng)
        grads = enmf_gradients(model, interactions)
        for index, name in enumerate(('P', 'Q', 'h')):
            params = getattr(model, name)
            for position in [tuple(int(rng.integers(s)) for s in params.shape) for _ in range(3)]:
                plus, minus = params.copy(), params.copy()
                plus[position] += eps
                minus[position] -= eps
                up = enmf_loss_efficient(_replace(model, name, plus), interactions)
                down = enmf_loss_efficient(_replace(model, name, minus), interactions)
                numeric = (up - down) / (2 * eps)
                analytic = grads[index][position]
                assert abs(numeric - analytic) <= 1e-3 * max(1.0, abs(numeric))

def _replace(model, name, value):
    fields = {'P': model.P, 'Q': model.Q, 'h': model.h}
    fields[name] = value
    return EnmfModel(fields['P'], fields['Q'], fields['h'], model.c_neg)

def test_zero_epochs_returns_initialization():
    interactions = _log([(0, 0), (1, 1), (1, 2)], 2, 3)
    model = train_enmf(interactions, d=4, epochs=0, seed=3)
    init = init_model(2, 3, 4, 0.1, 3)
    assert np.array_equal(model.P, init.P)
    assert np.array_equal(model.Q, init.Q)
    assert np.array_equal(model.h, np.ones(4))

def test_training_reduces_loss_and_is_deterministic():
    rng = np.random.default_rng(2)
    _, interactions = _random_instance(rng)
    a = train_enmf(interactions, d=4, epochs=20, lr=0.01, batch_users=3, seed=5)
    b = train_enmf(interactions, d=4, epochs=20, lr=0.01, batch_users=3, seed=5)
    assert np.array_equal(a.P, b.P) and np.array_equal(a.Q, b.Q) and np.array_equal(a.h, b.h)
    start = init_model(interactions.n_users, interactions.n_items, 4, 0.1, 5)
    assert enmf_loss_efficient(a, interactions) < enmf_loss_efficient(start, interactions)

def test_blocks_beat_popularity():
    # six users like items 0-4, ten users like items 5-9; each user skips one item of their block
    pairs = []
    for u in range(6):
        pairs.extend((u, i) for i in range(5) if i != u % 5)
    for u in range(6, 16):
        pairs.extend((u, i) for i in range(5, 10) if i != 5 + u % 5)
    interactions = _log(pairs, 16, 10)
    model = train_enmf(interactions, d=2, epochs=300, lr=0.05, batch_users=16, seed=0, adam=True)

    popularity = interactions.train_popularity()
    for u in range(16):
        history = interactions.history(u)
        missing = next(i for i in (range(5) if u < 6 else range(5, 10)) if i not in history)
        assert recommend(model, u, 1, exclude=history) == [missing]
        unseen = [i for i in range(10) if i not in history]
        by_popularity = sorted(unseen, key=lambda i: (-popularity[i], i))
        if u < 6:
            assert by_popularity[0] != missing

def test_exports():
    rng = np.random.default_rng(4)
    model = EnmfModel(rng.standard_normal((3, 2)), rng.standard_normal((4, 2)), np.array([2.0, 0.5]), 0.1)
    assert np.allclose(item_embeddings(model).data, model.Q.astype(np.float32))
    assert np.allclose(item_embeddings(model, h_scaling=True).data, (model.Q * model.h).astype(np.float32))
    assert np.allclose(model.Q @ user_vectors(model)[1], model.user_scores(1))
    assert recommend(model, 0, 4) == sorted(range(4), key=lambda i: (-model.user_scores(0)[i], i))

def test_dimension_checks():
    model = EnmfModel(np.ones((2, 1)), np.ones((2, 1)), np.ones(1), 0.1)
    try:
        enmf_loss_efficient(model, _log([(0, 0)], 1, 2))
    except EnmfException:
        pass
    else:
        assert False
    try:
        EnmfModel(np.ones((2, 1)), np.ones((2, 1)), np.ones(1), 0.0)
    except EnmfException:
        pass
    else:
        assert False

def test_model_persists(tmp_path):
    rng = np.random.default_rng(6)
    model = EnmfModel(rng.standard_normal((3, 2)), rng.standard_normal((5, 2)), rng.standard_normal(2), 0.25, seed=9)
    path = os.path.join(tmp_path, 'enmf.bin')
    save_model(path, model)
    loaded = load_model(path)
    assert (loaded.n_users, loaded.n_items, loaded.d, loaded.c_neg, loaded.seed) == (3, 5, 2, 0.25, 9)
    assert np.allclose(loaded.Q, model.Q, atol=1e-6)
