import json
import os

from click.testing import CliRunner

from semantic_ids.cli import main
from semantic_ids.config import EFFECTIVE_CONFIG_NAME, load_config
from semantic_ids.provenance import RunManifest
from semantic_ids.quantizer import QuantizerKind

SMALL = ['--n-items', '60', '--n-users', '30', '--n-topics', '4', '--queries-per-item', '4',
         '--interactions-per-user', '5']

def _synth(runner, directory):
    result = runner.invoke(main, ['synth', '--out', directory, '--seed', '3'] + SMALL)
    assert result.exit_code == 0, result.output
    return os.path.join(directory, 'experiment.toml')

def test_help():
    result = CliRunner().invoke(main, ['--help'])
    assert result.exit_code == 0
    for command in ('synth', 'ingest', 'fuse', 'train-enmf', 'tokenize', 'build-ids', 'retrieve', 'evaluate'):
        assert command in result.output

def test_synth_then_evaluate(tmp_path):
    runner = CliRunner()
    config = _synth(runner, str(tmp_path))
    assert [e.command for e in RunManifest(str(tmp_path)).entries()] == ['synth']

    out = os.path.join(tmp_path, 'report')
    result = runner.invoke(main, ['evaluate', '--config', config, '--strategies', 'search,rec', '--seeds', '0',
                                  '--output', out, '--search-sample', '10', '--user-sample', '10',
                                  '--codebook-size', '8', '--beam-width', '20', '--groups', '5', '--top-k', '10'])
    assert result.exit_code == 0, result.output
    with open(os.path.join(out, 'report.json')) as f:
        report = json.load(f)
    assert set(report['summary']) == {'search', 'rec'}
    assert report['fingerprint']['config']['quantizer']['codebook_size'] == 8
    assert os.path.isfile(os.path.join(out, 'effective_config.toml'))
    entry = RunManifest(out).entries()[0]
    assert entry.command == 'evaluate'
    assert set(entry.outputs) == {'report.json', 'report.md', 'effective_config'}
    assert entry.config == report['config_id']

def test_build_ids_then_retrieve(tmp_path):
    runner = CliRunner()
    config = _synth(runner, str(tmp_path))
    ids = os.path.join(tmp_path, 'ids')
    result = runner.invoke(main, ['build-ids', '--config', config, '--strategy', 'separate', '--out', ids])
    assert result.exit_code == 0, result.output
    with open(os.path.join(ids, 'ids.json')) as f:
        assert json.load(f)['codebooks'] == ['rec', 'search']

    result = runner.invoke(main, ['--workers', '2', 'retrieve', '--task', 'search', '--ids', ids, '--config', config,
                                  '--limit', '5'])
    assert result.exit_code == 0, result.output
    with open(os.path.join(ids, 'rankings_search.tsv')) as f:
        rows = f.read().splitlines()
    assert rows[0].split('\t') == ['context_id', 'rank', 'item_id', 'score']
    assert len({row.split('\t')[0] for row in rows[1:]}) == 5
    assert [e.command for e in RunManifest(ids).entries()] == ['build-ids', 'retrieve']
    assert os.path.isfile(os.path.join(ids, EFFECTIVE_CONFIG_NAME))

def test_missing_inputs_are_a_config_error(tmp_path):
    path = os.path.join(tmp_path, 'experiment.toml')
    with open(path, 'w') as f:
        f.write('[data]\ncatalog = "nope.tsv"\nmanifest = "m.txt"\ninteractions = "i.tsv"\nqueries = "q.tsv"\n')
    result = CliRunner().invoke(main, ['evaluate', '--config', path])
    assert result.exit_code == 1
    assert '[config]' in result.output
    assert 'nope.tsv' in result.output

def test_bad_seeds(tmp_path):
    config = _synth(CliRunner(), str(tmp_path))
    result = CliRunner().invoke(main, ['evaluate', '--config', config, '--seeds', '0,x'])
    assert result.exit_code == 1
    assert '[config]' in result.output

def test_stage_commands(tmp_path):
    runner = CliRunner()
    config = _synth(runner, str(tmp_path))
    out = os.path.join(tmp_path, 'stages')
    for args in (['ingest', '--normalize'],
                 ['fuse', '--kind', 'svd_add'],
                 ['train-enmf', '--dim', '4', '--epochs', '2', '--batch-users', '8'],
                 ['tokenize', '--space', 'search', '--codebook-size', '8', '--kind', 'residual_lfq']):
        result = runner.invoke(main, args + ['--config', config, '--out', out])
        assert result.exit_code == 0, result.output
    for name in ('catalog.tsv', 'search.npy', 'fused_svd_add.npy', 'fused_svd_add.projector.bin', 'enmf.bin',
                 'rec.npy', 'codebooks_search.bin', 'codes_search.tsv'):
        assert os.path.isfile(os.path.join(out, name)), name
    assert [e.command for e in RunManifest(out).entries()] == ['ingest', 'fuse', 'train-enmf', 'tokenize']
    assert all('effective_config' in e.outputs for e in RunManifest(out).entries())
    assert load_config(os.path.join(out, EFFECTIVE_CONFIG_NAME)).quantizer.kind == QuantizerKind.RESIDUAL_LFQ

    result = runner.invoke(main, ['fuse', '--config', config, '--first', 'audio', '--out', out])
    assert result.exit_code == 1
    assert '[fusion]' in result.output

def test_same_config_gives_same_hashes(tmp_path):
    runner = CliRunner()
    config = _synth(runner, str(tmp_path))
    runs = []
    for name, workers in (('first', '1'), ('second', '3')):
        ids = os.path.join(tmp_path, name)
        result = runner.invoke(main, ['build-ids', '--config', config, '--strategy', 'prefix_share', '--out', ids])
        assert result.exit_code == 0, result.output
        result = runner.invoke(main, ['--workers', workers, 'retrieve', '--task', 'rec', '--ids', ids,
                                      '--config', config])
        assert result.exit_code == 0, result.output
        runs.append(RunManifest(ids).entries())
    first, second = runs
    assert [e.command for e in first] == ['build-ids', 'retrieve']
    for a, b in zip(first, second):
        assert a.config == b.config
        assert a.inputs == b.inputs
        assert a.outputs == b.outputs
    assert {'assignment', 'vocab', 'ids', 'effective_config'} <= set(first[0].outputs)
    assert set(first[1].outputs) == {'rankings', 'effective_config'}
