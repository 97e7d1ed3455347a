import attr
import itertools
import json
import logging
import os

from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..config import RunConfig, to_dict
from ..embedding_store import EmbeddingStoreException
from ..enmf import EnmfException
from ..fusion import FUSED_SVD_ORDER, FusionException
from ..id_space import IdSpaceException
from ..pipeline import Dataset, PipelineException, QuantizerParams, Strategy, build_strategy, make_index
from ..provenance import config_id
from ..quantizer import LFQ_CODE_WIDTH, QuantizerException, QuantizerKind
from ..retrieval import RetrievalException, retrieve_rec, retrieve_search
from .metrics import EvaluationException, SliceSpec, recall_at_k
from .stats import bonferroni, mean_std, paired_t_test

log = logging.getLogger(__name__)

class ExperimentException(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f'[{stage}] {message}')
        self.stage = stage

ALPHA = 0.05
TASKS = ('search', 'rec')
SLICES = ('all', 'head', 'torso')

_STAGE_ERRORS = (EmbeddingStoreException, EnmfException, FusionException, QuantizerException,
                 IdSpaceException, PipelineException, RetrievalException, EvaluationException)

@attr.define(slots=True, frozen=True)
class Cell:
    label: str
    strategy: Strategy
    quantizer: QuantizerParams
    seed: int

@attr.define(slots=True, frozen=True)
class CellResult:
    label: str
    seed: int
    recall: Mapping[str, Mapping[str, float]]
    per_case: Mapping[str, np.ndarray] = attr.field(eq=False)
    code_budget: int = 0

@attr.define(slots=True, frozen=True)
class Comparison:
    task: str
    first: str
    second: str
    t: float
    p: float
    p_adjusted: float

    @property
    def significant(self) -> bool:
        return self.p_adjusted < ALPHA

@attr.define(slots=True, frozen=True)
class EvaluationSample:
    """Test queries and users scored in every cell, so comparisons stay paired."""
    query_rows: np.ndarray = attr.field(eq=False)
    users: np.ndarray = attr.field(eq=False)
    head: np.ndarray = attr.field(eq=False)

    def slices(self, relevant: np.ndarray) -> Dict[str, np.ndarray]:
        head = self.head[relevant]
        return {'all': np.ones(len(relevant), dtype=bool), 'head': head, 'torso': ~head}

@attr.define(slots=True, frozen=True)
class ExperimentReport:
    cells: Tuple[CellResult, ...] = attr.field(converter=tuple)
    summary: Mapping[str, Mapping[str, Mapping[str, Mapping[str, Any]]]]
    comparisons: Tuple[Comparison, ...] = attr.field(converter=tuple)
    fingerprint: Mapping[str, Any]
    config_id: str

    def to_json(self) -> str:
        return json.dumps({
            'config_id': self.config_id,
            'fingerprint': self.fingerprint,
            'summary': self.summary,
            'cells': [{'label': c.label, 'seed': c.seed, 'recall': c.recall, 'code_budget': c.code_budget} for c in self.cells],
            'comparisons': [
                {'task': c.task, 'first': c.first, 'second': c.second, 't': _finite(c.t), 'p': c.p,
                 'p_adjusted': c.p_adjusted, 'significant': c.significant}
                for c in self.comparisons
            ],
        }, indent=2, sort_keys=True)

    def to_markdown(self) -> str:
        k = self.fingerprint['top_k']
        lines = [
            f'| Strategy | Search All R@{k} | Rec All R@{k} | Rec Head R@{k} | Rec Torso R@{k} |',
            '|---|---|---|---|---|'
        ]
        for label, tasks in self.summary.items():
            cells = [tasks['search']['all'], tasks['rec']['all'], tasks['rec']['head'], tasks['rec']['torso']]
            lines.append(f'| {label} | ' + ' | '.join(f'{c["mean"]:.3f} (± {c["std"]:.3f})' for c in cells) + ' |')
        lines.append('')
        if self.comparisons:
            lines.append(f'Paired t-tests, Bonferroni-adjusted per task (alpha {ALPHA}):')
            lines.append('')
            lines.append('| Task | A | B | t | p (adj.) | |')
            lines.append('|---|---|---|---|---|---|')
            for c in self.comparisons:
                mark = '*' if c.significant else ''
                lines.append(f'| {c.task} | {c.first} | {c.second} | {c.t:.3f} | {c.p_adjusted:.3g} | {mark} |')
        else:
            lines.append('No significance tests: fewer than two strategies.')
        lines.append('')
        lines.append(f'Decoder: {self.fingerprint["decoder"]}. Config {self.config_id}.')
        return '\n'.join(lines) + '\n'

def _finite(value: float) -> Optional[float]:
    return value if np.isfinite(value) else None

def draw_sample(dataset: Dataset, config: RunConfig) -> EvaluationSample:
    rng = np.random.default_rng(config.experiment.sample_seed)
    rows = dataset.queries.test_rows()
    if 0 < config.experiment.search_sample < len(rows):
        rows = np.sort(rng.choice(rows, size=config.experiment.search_sample, replace=False))
    interactions = dataset.interactions
    users = np.array([u for u in interactions.test_users() if len(interactions.train_items(u))], dtype=np.int64)
    if 0 < config.experiment.user_sample < len(users):
        users = np.sort(rng.choice(users, size=config.experiment.user_sample, replace=False))
    head = SliceSpec(config.experiment.head_fraction).head_mask(dataset.catalog.popularity)
    return EvaluationSample(rows, users, head)

def cells_for(config: RunConfig) -> List[Cell]:
    kinds = [config.quantizer.kind]
    kinds.extend(k for k in map(QuantizerKind.from_string, config.experiment.ablation_kinds) if k not in kinds)
    out = []
    for kind, name, seed in itertools.product(kinds, config.experiment.strategies, config.experiment.seeds):
        label = name if kind == config.quantizer.kind else f'{name}[{kind.value}]'
        out.append(Cell(label, Strategy.from_string(name), attr.evolve(config.quantizer, kind=kind), seed))
    return out

def _stage(stage: str, fn: Any, *args: Any, **kwargs: Any) -> Any:
    try:
        return fn(*args, **kwargs)
    except _STAGE_ERRORS as e:
        raise ExperimentException(stage, str(e))

def run_cell(cell: Cell, dataset: Dataset, config: RunConfig, sample: EvaluationSample) -> CellResult:
    artifacts = _stage('ids', build_strategy, dataset, cell.strategy, cell.quantizer, cell.seed)
    index = _stage('retrieve', make_index, dataset, artifacts)
    cfg = config.decoding
    queries = dataset.queries

    search = np.array([
        recall_at_k([i for i, _ in _stage('retrieve', retrieve_search, queries.query_ids[row], index, cfg)],
                    {int(queries.relevant[row])}, cfg.top_k)
        for row in sample.query_rows
    ])
    rec = np.array([
        recall_at_k([i for i, _ in _stage('retrieve', retrieve_rec, dataset.interactions.user_ids[u], index, cfg,
                                          config.experiment.exclude_history, config.experiment.use_user_factors)],
                    {dataset.interactions.test_item(u)}, cfg.top_k)
        for u in sample.users
    ])
    relevant = {
        'search': queries.relevant[sample.query_rows],
        'rec': np.array([dataset.interactions.test_item(u) for u in sample.users], dtype=np.int64),
    }
    recall: Dict[str, Dict[str, float]] = {}
    for task, values in (('search', search), ('rec', rec)):
        recall[task] = {}
        for name, mask in sample.slices(relevant[task]).items():
            recall[task][name] = float(values[mask].mean()) if mask.any() else 0.0
    log.info('%s seed %d: search R@%d %.4f, rec R@%d %.4f', cell.label, cell.seed,
             cfg.top_k, recall['search']['all'], cfg.top_k, recall['rec']['all'])
    return CellResult(cell.label, cell.seed, recall, {'search': search, 'rec': rec},
                      artifacts.assignment.vocab.code_budget)

def summarize(results: Sequence[CellResult]) -> Dict[str, Dict[str, Dict[str, Dict[str, Any]]]]:
    summary: Dict[str, Dict[str, Dict[str, Dict[str, Any]]]] = {}
    for label in dict.fromkeys(r.label for r in results):
        rows = [r for r in results if r.label == label]
        summary[label] = {}
        for task in TASKS:
            summary[label][task] = {}
            for name in SLICES:
                values = [r.recall[task][name] for r in rows]
                mean, std = mean_std(values)
                summary[label][task][name] = {'mean': mean, 'std': std, 'seeds': values}
    return summary

def compare(results: Sequence[CellResult]) -> List[Comparison]:
    labels = list(dict.fromkeys(r.label for r in results))
    pairs = list(itertools.combinations(labels, 2))
    out = []
    for task in TASKS:
        per_label = {
            label: np.mean([r.per_case[task] for r in results if r.label == label], axis=0)
            for label in labels
        }
        tests = []
        for first, second in pairs:
            if len(per_label[first]) < 2:
                continue
            tests.append((first, second) + paired_t_test(per_label[first], per_label[second]))
        adjusted = bonferroni([p for _, _, _, p in tests], len(pairs))
        out.extend(Comparison(task, a, b, t, p, q) for (a, b, t, p), q in zip(tests, adjusted))
    return out

def run_experiment(config: RunConfig, dataset: Optional[Dataset] = None, workers: int = 1) -> ExperimentReport:
    if dataset is None:
        dataset = _stage('embeddings', config.data.load)
    sample = draw_sample(dataset, config)
    cells = cells_for(config)
    log.info('running %d cells over %d queries and %d users with %d workers',
             len(cells), len(sample.query_rows), len(sample.users), workers)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda cell: run_cell(cell, dataset, config, sample), cells))

    summary = _stage('evaluate', summarize, results)
    comparisons = _stage('evaluate', compare, results)
    settings = to_dict(config)
    fingerprint = {
        'config': settings,
        'catalog': dataset.catalog.fingerprint,
        'top_k': config.decoding.top_k,
        'decoder': 'residual-distance scorer with trie-constrained diverse beam search',
        'fused_svd_order': FUSED_SVD_ORDER,
        'prefix_share': 'k-means codebooks on fused, search and rec spaces',
        'lfq_code_width': LFQ_CODE_WIDTH,
        'head_items': int(sample.head.sum()),
        'search_cases': len(sample.query_rows),
        'rec_cases': len(sample.users),
        'code_budgets': {r.label: r.code_budget for r in results},
    }
    return ExperimentReport(results, summary, comparisons, fingerprint, config_id(settings))

def write_report(directory: str, report: ExperimentReport) -> Dict[str, str]:
    os.makedirs(directory, exist_ok=True)
    paths = {'report.json': os.path.join(directory, 'report.json'), 'report.md': os.path.join(directory, 'report.md')}
    with open(paths['report.json'], 'w', encoding='utf-8') as f:
        f.write(report.to_json())
    with open(paths['report.md'], 'w', encoding='utf-8') as f:
        f.write(report.to_markdown())
    return paths
