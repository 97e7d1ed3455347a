import os

from semantic_ids.config import (ConfigException, EFFECTIVE_CONFIG_NAME, config_from_dict, load_config, to_dict,
                                 validate_config, with_overrides, write_effective_config)
from semantic_ids.quantizer import QuantizerKind

data = {'catalog': 'catalog.tsv', 'manifest': 'manifest.txt', 'interactions': 'interactions.tsv', 'queries': 'queries.tsv',
        'embeddings': {'search': 'embeddings/search.npy'}}

def test_defaults():
    config = config_from_dict({'data': data})
    assert config.experiment.seeds == (0, 1, 2, 3, 4)
    assert config.experiment.head_fraction == 0.01
    assert config.quantizer.kind == QuantizerKind.RQ_KMEANS
    assert (config.quantizer.levels, config.quantizer.codebook_size) == (2, 256)
    assert (config.decoding.beam_width, config.decoding.group_count, config.decoding.top_k) == (60, 30, 30)

def test_paths_resolve_against_config_directory():
    config = config_from_dict({'data': data, 'experiment': {'output': 'out'}}, base='/data/run')
    assert config.data.catalog == '/data/run/catalog.tsv'
    assert config.data.embeddings == {'search': '/data/run/embeddings/search.npy'}
    assert config.experiment.output == '/data/run/out'
    absolute = config_from_dict({'data': dict(data, catalog='/elsewhere/catalog.tsv')}, base='/data/run')
    assert absolute.data.catalog == '/elsewhere/catalog.tsv'
    default_output = config_from_dict({'data': data}, base='/data/run')
    assert default_output.experiment.output == '/data/run/results'

def test_groups_key():
    config = config_from_dict({'data': data, 'decoding': {'groups': 4, 'beam_width': 20, 'top_k': 10}})
    assert config.decoding.group_count == 4
    assert to_dict(config)['decoding']['groups'] == 4

def test_every_problem_is_reported():
    raw = {'data': dict(data, bogus=1), 'quantizer': {'kind': 'pq'}, 'experiment': {'colour': 'red'}, 'decoding': 5}
    try:
        config_from_dict(raw)
    except ConfigException as e:
        assert len(e.problems) == 4
        assert 'unknown key data.bogus' in e.problems
        assert 'unknown key experiment.colour' in e.problems
        assert '[decoding] must be a table' in e.problems
    else:
        assert False

def test_validate_lists_missing_files_and_bad_values(tmp_path):
    config = config_from_dict({
        'data': data,
        'experiment': {'strategies': ['search', 'ads'], 'head_fraction': 1.5, 'ablation_kinds': ['pq']},
        'decoding': {'beam_width': 10, 'groups': 3},
    }, base=str(tmp_path))
    try:
        validate_config(config)
    except ConfigException as e:
        assert sum(p.startswith('data.') for p in e.problems) == 5
        assert any('ads' in p for p in e.problems)
        assert any('head_fraction' in p for p in e.problems)
        assert any('pq' in p for p in e.problems)
        assert any(p.startswith('decoding:') for p in e.problems)
    else:
        assert False

def test_overrides():
    config = config_from_dict({'data': data})
    changed = with_overrides(config, experiment__seeds=(7,), decoding__top_k=10, quantizer__kind=None)
    assert changed.experiment.seeds == (7,)
    assert changed.decoding.top_k == 10
    assert changed.quantizer == config.quantizer
    assert with_overrides(config) == config

def test_round_trip_through_dict():
    config = config_from_dict({'data': dict(data, enmf='enmf.bin'), 'quantizer': {'kind': 'residual_lfq'},
                               'experiment': {'strategies': ['rec', 'separate']}})
    plain = to_dict(config)
    assert plain['quantizer']['kind'] == 'residual_lfq'
    assert plain['experiment']['strategies'] == ['rec', 'separate']
    assert config_from_dict(plain) == config
    assert 'enmf' not in to_dict(config_from_dict({'data': data}))['data']

def test_effective_config_loads_back(tmp_path):
    config = config_from_dict({'data': data, 'experiment': {'seeds': [3]}}, base=str(tmp_path))
    assert config.experiment.output == os.path.join(str(tmp_path), 'results')
    path = write_effective_config(str(tmp_path), config)
    assert os.path.basename(path) == EFFECTIVE_CONFIG_NAME
    assert load_config(path) == config

def test_load_config_errors(tmp_path):
    broken = os.path.join(tmp_path, 'broken.toml')
    with open(broken, 'w') as f:
        f.write('[data\n')
    for path in (broken, os.path.join(tmp_path, 'missing.toml')):
        try:
            load_config(path)
        except ConfigException:
            pass
        else:
            assert False
