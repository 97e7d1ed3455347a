import attr
import functools
import json
import logging
import os
import time

from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, Optional, Tuple

import click

from .config import ConfigException, RunConfig, load_config, to_dict, validate_config, with_overrides, write_effective_config
from .embedding_store import (EmbeddingStoreException, l2_normalize, load_catalog, load_interactions,
                              save_embeddings, write_catalog, write_manifest)
from .enmf import EnmfException, item_embeddings, save_model, train_enmf
from .eval_harness.experiment import ExperimentException, run_experiment, write_report
from .eval_harness.metrics import EvaluationException
from .eval_harness.synthetic import SynthParams, save_dataset, synth_generate
from .fusion import FusionException, FusionKind, fuse_concat, fuse_svd_add, save_projector
from .id_space import IdSpaceException, read_assignment, write_assignment, write_vocab
from .pipeline import PipelineException, Strategy, build_strategy, make_index, restore_strategy
from .provenance import ManifestEntry, RunManifest, config_id, hash_files
from .quantizer import (QuantizerException, QuantizerKind, encode_items, fit_codebooks, load_codebooks,
                        save_codebooks, write_codes)
from .retrieval import RetrievalException, retrieve_rec, retrieve_search, write_rankings

log = logging.getLogger(__name__)

_STAGES: Tuple[Tuple[type, str], ...] = (
    (ConfigException, 'config'),
    (EmbeddingStoreException, 'embeddings'),
    (FusionException, 'fusion'),
    (EnmfException, 'enmf'),
    (QuantizerException, 'tokenize'),
    (IdSpaceException, 'ids'),
    (PipelineException, 'ids'),
    (RetrievalException, 'retrieve'),
    (EvaluationException, 'evaluate'),
)

@attr.define(slots=True)
class State:
    workers: int = 1

_SYNTH = attr.fields(SynthParams)

def _staged(command: str) -> Callable[[Callable[..., Dict[str, Any]]], Callable[..., None]]:
    """Maps package errors to a stage-tagged exit and appends the run manifest entry."""
    def decorate(fn: Callable[..., Dict[str, Any]]) -> Callable[..., None]:
        @functools.wraps(fn)
        def wrapper(*args: Any, **kwargs: Any) -> None:
            start = time.perf_counter()
            try:
                run = fn(*args, **kwargs)
            except ExperimentException as e:
                raise click.ClickException(str(e))
            except tuple(cls for cls, _ in _STAGES) as e:
                stage = next(name for cls, name in _STAGES if isinstance(e, cls))
                raise click.ClickException(f'[{stage}] {e}')
            if run.get('effective') is not None:
                run.setdefault('outputs', {})['effective_config'] = write_effective_config(run['directory'], run['effective'])
            RunManifest(run['directory']).append(ManifestEntry(
                command,
                config_id(run.get('config', {})),
                hash_files(run.get('inputs', {})),
                hash_files(run.get('outputs', {})),
                round(time.perf_counter() - start, 3)
            ))
            for name, path in sorted(run.get('outputs', {}).items()):
                click.echo(f'{name}\t{path}')
        return wrapper
    return decorate

def _load(config_path: str, **overrides: Any) -> RunConfig:
    return validate_config(with_overrides(load_config(config_path), **overrides))

def _out_dir(config: RunConfig, out: Optional[str]) -> str:
    directory = out or config.experiment.output
    os.makedirs(directory, exist_ok=True)
    return directory

@click.group(context_settings={'help_option_names': ['-h', '--help']})
@click.option('-v', '--verbose', count=True, help='-v for progress, -vv for per-level detail.')
@click.option('--workers', type=click.IntRange(min=1), default=1, envvar='SEMID_THREADS', show_default=True,
              help='Worker threads for decoding and experiment cells (env SEMID_THREADS).')
@click.pass_context
def main(ctx: click.Context, verbose: int, workers: int) -> None:
    """Semantic IDs for joint search and recommendation."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    ctx.obj = State(workers)

@main.command()
@click.option('--out', required=True, type=click.Path(file_okay=False), help='Dataset directory to create.')
@click.option('--seed', type=int, default=0, show_default=True, help='Generator seed.')
@click.option('--n-items', type=click.IntRange(min=1), default=_SYNTH.n_items.default, show_default=True, help='Catalog size.')
@click.option('--n-users', type=click.IntRange(min=1), default=_SYNTH.n_users.default, show_default=True, help='Number of users.')
@click.option('--n-topics', type=click.IntRange(min=1), default=_SYNTH.n_topics.default, show_default=True, help='Number of content topics.')
@click.option('--content-noise', type=float, default=_SYNTH.content_noise.default, show_default=True, help='Query noise around item vectors.')
@click.option('--cf-noise', type=float, default=_SYNTH.cf_noise.default, show_default=True, help='Share of interactions outside user groups.')
@click.option('--queries-per-item', type=click.IntRange(min=2), default=_SYNTH.queries_per_item.default, show_default=True, help='Queries per item, split half train, half test.')
@click.option('--interactions-per-user', type=click.IntRange(min=2), default=_SYNTH.interactions_per_user.default, show_default=True, help='Interactions per user.')
@_staged('synth')
def synth(out: str, seed: int, n_items: int, n_users: int, n_topics: int, content_noise: float, cf_noise: float,
          queries_per_item: int, interactions_per_user: int) -> Dict[str, Any]:
    """Generate a synthetic dataset and its experiment.toml."""
    params = SynthParams(n_items=n_items, n_users=n_users, n_topics=n_topics, content_noise=content_noise,
                         cf_noise=cf_noise, queries_per_item=queries_per_item,
                         interactions_per_user=interactions_per_user, seed=seed)
    written = save_dataset(synth_generate(params), out)
    return {'directory': out, 'config': attr.asdict(params), 'outputs': written}

@main.command()
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True, dir_okay=False), help='Run configuration (TOML).')
@click.option('--out', type=click.Path(file_okay=False), help='Output directory (default: experiment.output).')
@click.option('--normalize/--no-normalize', default=False, show_default=True, help='Write l2-normalized rows.')
@_staged('ingest')
def ingest(config_path: str, out: Optional[str], normalize: bool) -> Dict[str, Any]:
    """Validate and align every configured embedding file with the catalog."""
    config = _load(config_path)
    dataset = config.data.load()
    directory = _out_dir(config, out)
    outputs = {'catalog': os.path.join(directory, 'catalog.tsv'), 'manifest': os.path.join(directory, 'manifest.txt')}
    write_catalog(outputs['catalog'], dataset.catalog)
    write_manifest(outputs['manifest'], dataset.catalog.item_ids)
    for space, matrix in sorted(dataset.spaces.items()):
        outputs[space] = os.path.join(directory, f'{space}.npy')
        save_embeddings(outputs[space], l2_normalize(matrix) if normalize else matrix)
    return {'directory': directory, 'config': to_dict(config), 'effective': config, 'inputs': config.data.files(), 'outputs': outputs}

@main.command()
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True, dir_okay=False), help='Run configuration (TOML).')
@click.option('--kind', type=click.Choice([FusionKind.CONCAT.value, FusionKind.SVD_ADD.value]), default=FusionKind.SVD_ADD.value, show_default=True, help='Fusion to apply.')
@click.option('--first', default='search', show_default=True, help='First source space.')
@click.option('--second', default='rec', show_default=True, help='Second source space.')
@click.option('--out', type=click.Path(file_okay=False), help='Output directory (default: experiment.output).')
@_staged('fuse')
def fuse(config_path: str, kind: str, first: str, second: str, out: Optional[str]) -> Dict[str, Any]:
    """Build a cross-task space from two aligned spaces."""
    config = _load(config_path)
    dataset = config.data.load()
    directory = _out_dir(config, out)
    try:
        a, b = dataset.space(first), dataset.space(second)
    except PipelineException as e:
        raise FusionException(str(e))
    name = f'fused_{kind}'
    outputs = {name: os.path.join(directory, f'{name}.npy')}
    if FusionKind.from_string(kind) == FusionKind.CONCAT:
        save_embeddings(outputs[name], fuse_concat(l2_normalize(a), l2_normalize(b)))
    else:
        fused, spec = fuse_svd_add(a, b, (first, second))
        save_embeddings(outputs[name], fused)
        if spec.projector is not None:
            outputs['projector'] = os.path.join(directory, f'{name}.projector.bin')
            save_projector(outputs['projector'], spec.projector)
    return {'directory': directory, 'config': dict(to_dict(config), fuse=[kind, first, second]), 'effective': config,
            'inputs': config.data.files(), 'outputs': outputs}

@main.command('train-enmf')
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True, dir_okay=False), help='Run configuration (TOML).')
@click.option('--dim', type=click.IntRange(min=1), default=256, show_default=True, help='Embedding size.')
@click.option('--epochs', type=click.IntRange(min=0), default=30, show_default=True, help='Passes over the users.')
@click.option('--lr', type=float, default=0.001, show_default=True, help='Learning rate.')
@click.option('--c-neg', type=click.FloatRange(min=0, min_open=True, max=1), default=0.1, show_default=True, help='Weight of unobserved pairs.')
@click.option('--batch-users', type=click.IntRange(min=1), default=512, show_default=True, help='Users per mini-batch.')
@click.option('--seed', type=int, default=0, show_default=True, help='Initialization and shuffling seed.')
@click.option('--adam/--sgd', default=False, show_default=True, help='Optimizer.')
@click.option('--h-scaling/--no-h-scaling', default=False, show_default=True, help='Scale exported item rows by h.')
@click.option('--out', type=click.Path(file_okay=False), help='Output directory (default: experiment.output).')
@_staged('train-enmf')
def train_enmf_command(config_path: str, dim: int, epochs: int, lr: float, c_neg: float, batch_users: int,
                       seed: int, adam: bool, h_scaling: bool, out: Optional[str]) -> Dict[str, Any]:
    """Train ENMF on the interaction log and export rec item embeddings."""
    config = _load(config_path)
    catalog = load_catalog(config.data.catalog)
    interactions = load_interactions(config.data.interactions, catalog)
    directory = _out_dir(config, out)
    model = train_enmf(interactions, d=dim, epochs=epochs, lr=lr, c_neg=c_neg, batch_users=batch_users, seed=seed, adam=adam)
    outputs = {'model': os.path.join(directory, 'enmf.bin'), 'rec': os.path.join(directory, 'rec.npy'),
               'manifest': os.path.join(directory, 'rec.manifest.txt')}
    save_model(outputs['model'], model)
    save_embeddings(outputs['rec'], item_embeddings(model, h_scaling, catalog.fingerprint))
    write_manifest(outputs['manifest'], catalog.item_ids)
    settings = {'dim': dim, 'epochs': epochs, 'lr': lr, 'c_neg': c_neg, 'batch_users': batch_users,
                'seed': seed, 'adam': adam, 'h_scaling': h_scaling}
    return {'directory': directory, 'config': settings, 'effective': config,
            'inputs': {'catalog': config.data.catalog, 'interactions': config.data.interactions}, 'outputs': outputs}

@main.command()
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True, dir_okay=False), help='Run configuration (TOML).')
@click.option('--space', required=True, help='Embedding space to quantize.')
@click.option('--kind', type=click.Choice([k.value for k in QuantizerKind]), help='Quantizer (default: quantizer.kind).')
@click.option('--levels', type=click.IntRange(min=1), help='Codebook levels (default: quantizer.levels).')
@click.option('--codebook-size', type=click.IntRange(min=1), help='Codewords per level (default: quantizer.codebook_size).')
@click.option('--seed', type=int, default=0, show_default=True, help='k-means seed.')
@click.option('--out', type=click.Path(file_okay=False), help='Output directory (default: experiment.output).')
@_staged('tokenize')
def tokenize(config_path: str, space: str, kind: Optional[str], levels: Optional[int], codebook_size: Optional[int],
             seed: int, out: Optional[str]) -> Dict[str, Any]:
    """Fit residual codebooks on one space and write per-item codes."""
    config = _load(config_path, quantizer__kind=kind and QuantizerKind.from_string(kind),
                   quantizer__levels=levels, quantizer__codebook_size=codebook_size)
    dataset = config.data.load()
    directory = _out_dir(config, out)
    params = config.quantizer
    matrix = dataset.space(space)
    cb = fit_codebooks(params.kind, matrix, params.levels, params.codebook_size, params.max_iters, seed)
    outputs = {'codebooks': os.path.join(directory, f'codebooks_{space}.bin'), 'codes': os.path.join(directory, f'codes_{space}.tsv')}
    save_codebooks(outputs['codebooks'], cb)
    write_codes(outputs['codes'], encode_items(matrix, cb, space), dataset.catalog)
    return {'directory': directory, 'config': dict(to_dict(config), tokenize=[space, seed]), 'effective': config,
            'inputs': config.data.files(), 'outputs': outputs}

@main.command('build-ids')
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True, dir_okay=False), help='Run configuration (TOML).')
@click.option('--strategy', required=True, type=click.Choice([s.value for s in Strategy]), help='ID construction strategy.')
@click.option('--seed', type=int, default=0, show_default=True, help='Codebook seed.')
@click.option('--out', type=click.Path(file_okay=False), help='Output directory (default: experiment.output/ids/STRATEGY).')
@_staged('build-ids')
def build_ids(config_path: str, strategy: str, seed: int, out: Optional[str]) -> Dict[str, Any]:
    """Assign semantic ids to every item under one strategy."""
    config = _load(config_path)
    dataset = config.data.load()
    directory = out or os.path.join(config.experiment.output, 'ids', strategy)
    os.makedirs(directory, exist_ok=True)
    artifacts = build_strategy(dataset, Strategy.from_string(strategy), config.quantizer, seed)
    vocab = artifacts.assignment.vocab
    outputs = {'assignment': os.path.join(directory, 'assignment.tsv'), 'vocab': os.path.join(directory, 'vocab.tsv'),
               'ids': os.path.join(directory, 'ids.json')}
    write_assignment(outputs['assignment'], artifacts.assignment, dataset.catalog)
    write_vocab(outputs['vocab'], vocab)
    for name, cb in sorted(artifacts.codebooks.items()):
        outputs[f'codebooks.{name}'] = os.path.join(directory, f'codebooks_{name}.bin')
        save_codebooks(outputs[f'codebooks.{name}'], cb)
    with open(outputs['ids'], 'w', encoding='utf-8') as f:
        json.dump({'strategy': strategy, 'seed': seed, 'codebooks': sorted(artifacts.codebooks),
                   'code_budget': vocab.code_budget, 'suffix_tokens': vocab.suffix_count}, f, indent=2, sort_keys=True)
    return {'directory': directory, 'config': dict(to_dict(config), build_ids=[strategy, seed]), 'effective': config,
            'inputs': config.data.files(), 'outputs': outputs}

@main.command()
@click.option('--task', required=True, type=click.Choice(['search', 'rec']), help='Which contexts to decode.')
@click.option('--ids', 'ids_dir', required=True, type=click.Path(exists=True, file_okay=False), help='Directory written by build-ids.')
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True, dir_okay=False), help='Run configuration (TOML).')
@click.option('--limit', type=click.IntRange(min=0), default=0, show_default=True, help='Decode only the first N test contexts (0 = all).')
@click.option('--out', type=click.Path(dir_okay=False), help='Rankings file (default: IDS/rankings_TASK.tsv).')
@click.pass_obj
@_staged('retrieve')
def retrieve(state: State, task: str, ids_dir: str, config_path: str, limit: int, out: Optional[str]) -> Dict[str, Any]:
    """Decode test queries or users over a persisted id assignment."""
    config = _load(config_path)
    dataset = config.data.load()
    assignment_path = os.path.join(ids_dir, 'assignment.tsv')
    vocab_path = os.path.join(ids_dir, 'vocab.tsv')
    with open(os.path.join(ids_dir, 'ids.json'), encoding='utf-8') as f:
        names = json.load(f)['codebooks']
    codebook_paths = {name: os.path.join(ids_dir, f'codebooks_{name}.bin') for name in names}
    assignment = read_assignment(assignment_path, vocab_path, dataset.catalog)
    artifacts = restore_strategy(dataset, assignment, {name: load_codebooks(p) for name, p in codebook_paths.items()})
    index = make_index(dataset, artifacts)
    cfg = config.decoding

    if task == 'search':
        contexts = [dataset.queries.query_ids[row] for row in dataset.queries.test_rows()]
        decode: Callable[[str], Any] = lambda query_id: retrieve_search(query_id, index, cfg)
    else:
        interactions = dataset.interactions
        contexts = [interactions.user_ids[u] for u in interactions.test_users() if len(interactions.train_items(u))]
        decode = lambda user_id: retrieve_rec(user_id, index, cfg, config.experiment.exclude_history,
                                              config.experiment.use_user_factors)
    if limit:
        contexts = contexts[:limit]
    with ThreadPoolExecutor(max_workers=state.workers) as pool:
        rankings = list(zip(contexts, pool.map(decode, contexts)))
    path = out or os.path.join(ids_dir, f'rankings_{task}.tsv')
    write_rankings(path, rankings, dataset.catalog)
    inputs = dict(config.data.files(), assignment=assignment_path, vocab=vocab_path)
    inputs.update({f'codebooks.{k}': v for k, v in codebook_paths.items()})
    return {'directory': os.path.dirname(os.path.abspath(path)),
            'config': dict(to_dict(config), retrieve=[task, limit]), 'effective': config, 'inputs': inputs,
            'outputs': {'rankings': path}}

@main.command()
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True, dir_okay=False), help='Run configuration (TOML).')
@click.option('--strategies', help='Comma-separated strategies (overrides experiment.strategies).')
@click.option('--seeds', help='Comma-separated seeds (overrides experiment.seeds).')
@click.option('--output', type=click.Path(file_okay=False), help='Report directory (overrides experiment.output).')
@click.option('--search-sample', type=click.IntRange(min=0), help='Test queries per cell, 0 = all.')
@click.option('--user-sample', type=click.IntRange(min=0), help='Test users per cell, 0 = all.')
@click.option('--kind', type=click.Choice([k.value for k in QuantizerKind]), help='Quantizer (overrides quantizer.kind).')
@click.option('--codebook-size', type=click.IntRange(min=1), help='Codewords per level (overrides quantizer.codebook_size).')
@click.option('--beam-width', type=click.IntRange(min=1), help='Beam width (overrides decoding.beam_width).')
@click.option('--groups', type=click.IntRange(min=1), help='Beam groups (overrides decoding.groups).')
@click.option('--diversity-penalty', type=click.FloatRange(min=0), help='Group diversity penalty (overrides decoding.diversity_penalty).')
@click.option('--top-k', type=click.IntRange(min=1), help='Recall cutoff (overrides decoding.top_k).')
@click.pass_obj
@_staged('evaluate')
def evaluate(state: State, config_path: str, strategies: Optional[str], seeds: Optional[str], output: Optional[str],
             search_sample: Optional[int], user_sample: Optional[int], kind: Optional[str], codebook_size: Optional[int],
             beam_width: Optional[int], groups: Optional[int], diversity_penalty: Optional[float],
             top_k: Optional[int]) -> Dict[str, Any]:
    """Run the strategy x seed grid and write report.json and report.md."""
    try:
        seed_list = tuple(int(s) for s in seeds.split(',')) if seeds else None
    except ValueError:
        raise ConfigException([f'--seeds must be comma-separated integers (got {seeds!r})'])
    config = _load(
        config_path,
        experiment__strategies=tuple(s.strip() for s in strategies.split(',')) if strategies else None,
        experiment__seeds=seed_list,
        experiment__output=output,
        experiment__search_sample=search_sample,
        experiment__user_sample=user_sample,
        quantizer__kind=kind and QuantizerKind.from_string(kind),
        quantizer__codebook_size=codebook_size,
        decoding__beam_width=beam_width,
        decoding__group_count=groups,
        decoding__diversity_penalty=diversity_penalty,
        decoding__top_k=top_k,
    )
    report = run_experiment(config, workers=state.workers)
    directory = config.experiment.output
    outputs = write_report(directory, report)
    return {'directory': directory, 'config': to_dict(config), 'effective': config, 'inputs': config.data.files(), 'outputs': outputs}

if __name__ == '__main__':
    main()
