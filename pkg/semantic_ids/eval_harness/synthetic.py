"""
    Desk-scale stand-in for a movie catalog with per-item queries and user logs.

    Items belong to topics, which drive their text-side vectors, and to
    collaborative-filtering groups, which drive who interacts with them. The two
    groupings only partially agree (cf_topic_affinity), so ids built from one space
    serve the other task worse. Interaction sampling is popularity-skewed while queries
    are uniform over items.
"""

import attr
import logging
import os

from typing import Any, Dict

import numpy as np
import tomli_w

from ..embedding_store import (Catalog, EmbeddingMatrix, InteractionLog, QuerySet, hold_out_last, save_embeddings,
                               write_catalog, write_interactions, write_manifest, write_queries)
from ..enmf import item_embeddings, save_model, train_enmf
from ..fusion import fuse_svd_add, project_context
from ..pipeline import Dataset
from .metrics import EvaluationException

log = logging.getLogger(__name__)

QUERY_SPACES = ('content', 'search', 'multi_task')
ITEM_SPACES = ('content', 'search', 'rec', 'multi_task')

@attr.define(slots=True, frozen=True)
class SynthParams:
    """
        content_noise is the noise of each query around the content vector of its
        item as the search encoder embeds it (the `search` space); at 0 every query
        equals that row. The untuned `content` space is a view_noise perturbation of
        the same vectors and does not depend on content_noise.
    """
    n_items: int = 2000
    n_users: int = 500
    n_topics: int = 20
    content_noise: float = 0.3
    cf_noise: float = 0.1
    queries_per_item: int = 20
    interactions_per_user: int = 20
    seed: int = 0
    content_dim: int = 48
    rec_dim: int = 32
    n_cf_groups: int = 20
    item_spread: float = 0.8
    view_noise: float = 0.6
    cf_topic_affinity: float = 0.3
    popularity_exponent: float = 1.2
    groups_per_user: int = 2
    enmf_epochs: int = 40
    enmf_lr: float = 0.02
    enmf_batch_users: int = 128
    enmf_c_neg: float = 0.1

    def problems(self) -> list:
        out = []
        for name in ('n_items', 'n_users', 'n_topics', 'queries_per_item', 'interactions_per_user',
                     'content_dim', 'rec_dim', 'n_cf_groups', 'groups_per_user', 'enmf_batch_users'):
            if getattr(self, name) < 1:
                out.append(f'{name} must be at least 1 (got {getattr(self, name)})')
        for name in ('content_noise', 'item_spread', 'view_noise', 'popularity_exponent', 'enmf_epochs'):
            if getattr(self, name) < 0:
                out.append(f'{name} must be non-negative (got {getattr(self, name)})')
        for name in ('cf_noise', 'cf_topic_affinity'):
            if not 0 <= getattr(self, name) <= 1:
                out.append(f'{name} must be in [0, 1] (got {getattr(self, name)})')
        if self.queries_per_item % 2:
            out.append(f'queries_per_item must be even to split train/test (got {self.queries_per_item})')
        if self.interactions_per_user < 2:
            out.append('interactions_per_user must be at least 2 to hold one out')
        if self.interactions_per_user > self.n_items:
            out.append(f'interactions_per_user exceeds n_items ({self.interactions_per_user} > {self.n_items})')
        if self.groups_per_user > self.n_cf_groups:
            out.append(f'groups_per_user exceeds n_cf_groups ({self.groups_per_user} > {self.n_cf_groups})')
        return out

def _noisy(rng: np.random.Generator, base: np.ndarray, scale: float) -> np.ndarray:
    noise = rng.standard_normal(base.shape) / np.sqrt(base.shape[-1])
    out = base + scale * noise
    return out / np.linalg.norm(out, axis=-1, keepdims=True)

def _interactions(rng: np.random.Generator, params: SynthParams, cf_group: np.ndarray,
                  weight: np.ndarray) -> Dict[str, np.ndarray]:
    """Each user sees distinct items, so the held-out item is never already in their history."""
    members = [np.flatnonzero(cf_group == g) for g in range(params.n_cf_groups)]
    users, items, timestamps = [], [], []
    for u in range(params.n_users):
        groups = rng.choice(params.n_cf_groups, size=params.groups_per_user, replace=False)
        pool = np.concatenate([members[g] for g in groups])
        seen = np.zeros(params.n_items, dtype=bool)
        chosen = []
        for _ in range(params.interactions_per_user):
            open_pool = pool[~seen[pool]]
            if rng.random() < params.cf_noise or len(open_pool) == 0:
                p = np.where(seen, 0.0, weight)
                item = int(rng.choice(params.n_items, p=p / p.sum()))
            else:
                p = weight[open_pool]
                item = int(rng.choice(open_pool, p=p / p.sum()))
            seen[item] = True
            chosen.append(item)
        start = int(rng.integers(1_000_000))
        steps = np.cumsum(rng.integers(1, 3600, size=len(chosen)))
        users.extend([u] * len(chosen))
        items.extend(chosen)
        timestamps.extend((start + steps).tolist())
    return {
        'users': np.array(users, dtype=np.int64),
        'items': np.array(items, dtype=np.int64),
        'timestamps': np.array(timestamps, dtype=np.int64),
    }

def synth_generate(params: SynthParams = SynthParams()) -> Dataset:
    problems = params.problems()
    if problems:
        raise EvaluationException('; '.join(problems))
    rng = np.random.default_rng(params.seed)
    n, d = params.n_items, params.content_dim

    topics = rng.standard_normal((params.n_topics, d))
    topics /= np.linalg.norm(topics, axis=1, keepdims=True)
    topic = rng.integers(params.n_topics, size=n)
    search = _noisy(rng, topics[topic], params.item_spread)
    content = _noisy(rng, search, params.view_noise)

    follows = rng.random(n) < params.cf_topic_affinity
    cf_group = np.where(follows, topic % params.n_cf_groups, rng.integers(params.n_cf_groups, size=n))
    rank = rng.permutation(n)
    weight = (rank + 1.0) ** -params.popularity_exponent

    item_ids = [f'item{i:05d}' for i in range(n)]
    user_ids = [f'user{u:04d}' for u in range(params.n_users)]
    columns = _interactions(rng, params, cf_group, weight)
    interactions = InteractionLog(
        user_ids, n, columns['users'], columns['items'], columns['timestamps'],
        hold_out_last(columns['users'], columns['timestamps'])
    )
    catalog = Catalog(item_ids, interactions.train_popularity())

    half = params.queries_per_item // 2
    relevant = np.repeat(np.arange(n), params.queries_per_item)
    is_test = np.tile(np.arange(params.queries_per_item) >= half, n)
    search_queries = _noisy(rng, search[relevant], params.content_noise) if params.content_noise > 0 else search[relevant]
    content_queries = _noisy(rng, search_queries, params.view_noise)

    model = train_enmf(interactions, d=params.rec_dim, epochs=params.enmf_epochs, lr=params.enmf_lr,
                       c_neg=params.enmf_c_neg, batch_users=params.enmf_batch_users, seed=params.seed, adam=True)
    fingerprint = catalog.fingerprint
    spaces = {
        'content': EmbeddingMatrix(content, aligned_to=fingerprint, normalized=True),
        'search': EmbeddingMatrix(search, aligned_to=fingerprint, normalized=True),
        'rec': item_embeddings(model, aligned_to=fingerprint),
    }
    # the multi-task encoder sees item text through the untuned content view
    multi_task, spec = fuse_svd_add(spaces['content'], spaces['rec'], ('content', 'rec'))
    spaces['multi_task'] = multi_task
    queries = QuerySet(
        [f'q{i:05d}_{j:02d}' for i in range(n) for j in range(params.queries_per_item)],
        relevant,
        is_test,
        {
            'search': EmbeddingMatrix(search_queries),
            'content': EmbeddingMatrix(content_queries),
            'multi_task': EmbeddingMatrix(project_context({'content': content_queries}, spec)),
        }
    )
    log.info('generated %d items, %d users, %d interactions, %d queries',
             n, params.n_users, len(columns['users']), len(queries.query_ids))
    return Dataset(catalog, spaces, queries, interactions, model)

def experiment_config() -> Dict[str, Any]:
    """Run configuration for a dataset written by save_dataset, paths relative to it."""
    return {
        'data': {
            'catalog': 'catalog.tsv',
            'manifest': 'manifest.txt',
            'interactions': 'interactions.tsv',
            'queries': 'queries.tsv',
            'enmf': 'enmf.bin',
            'embeddings': {space: f'embeddings/{space}.npy' for space in ITEM_SPACES},
            'query_embeddings': {space: f'queries/{space}.npy' for space in QUERY_SPACES},
        },
        'experiment': {
            'strategies': ['search', 'rec', 'multi_task', 'fused_svd', 'fused_concat', 'separate', 'prefix_share', 'content'],
            'seeds': [0, 1, 2, 3, 4],
            'output': 'results',
        },
    }

def save_dataset(dataset: Dataset, directory: str) -> Dict[str, str]:
    os.makedirs(os.path.join(directory, 'embeddings'), exist_ok=True)
    os.makedirs(os.path.join(directory, 'queries'), exist_ok=True)
    written = {
        'catalog': os.path.join(directory, 'catalog.tsv'),
        'manifest': os.path.join(directory, 'manifest.txt'),
        'interactions': os.path.join(directory, 'interactions.tsv'),
        'queries': os.path.join(directory, 'queries.tsv'),
        'experiment': os.path.join(directory, 'experiment.toml'),
    }
    write_catalog(written['catalog'], dataset.catalog)
    write_manifest(written['manifest'], dataset.catalog.item_ids)
    write_interactions(written['interactions'], dataset.interactions, dataset.catalog)
    write_queries(written['queries'], dataset.queries, dataset.catalog)
    for space, matrix in sorted(dataset.spaces.items()):
        written[f'embeddings.{space}'] = os.path.join(directory, 'embeddings', f'{space}.npy')
        save_embeddings(written[f'embeddings.{space}'], matrix)
    for space, matrix in sorted(dataset.queries.embeddings.items()):
        written[f'queries.{space}'] = os.path.join(directory, 'queries', f'{space}.npy')
        save_embeddings(written[f'queries.{space}'], matrix)
    if dataset.enmf is not None:
        written['enmf'] = os.path.join(directory, 'enmf.bin')
        save_model(written['enmf'], dataset.enmf)
    with open(written['experiment'], 'wb') as f:
        tomli_w.dump(experiment_config(), f)
    return written
