import attr
import os
import sys

from typing import Any, Dict, List, Mapping, Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from .pipeline import Dataset, QuantizerParams, Strategy, load_dataset
from .quantizer import QuantizerException, QuantizerKind
from .retrieval import DecodingConfig

class ConfigException(Exception):
    def __init__(self, problems: List[str]):
        super().__init__('invalid configuration:\n  ' + '\n  '.join(problems))
        self.problems = problems

EFFECTIVE_CONFIG_NAME = 'effective_config.toml'

@attr.define(slots=True, frozen=True)
class DataPaths:
    catalog: str
    manifest: str
    interactions: str
    queries: str
    embeddings: Mapping[str, str] = attr.field(factory=dict)
    query_embeddings: Mapping[str, str] = attr.field(factory=dict)
    enmf: Optional[str] = None

    def files(self) -> Dict[str, str]:
        out = {'catalog': self.catalog, 'manifest': self.manifest, 'interactions': self.interactions, 'queries': self.queries}
        out.update({f'embeddings.{k}': v for k, v in self.embeddings.items()})
        out.update({f'query_embeddings.{k}': v for k, v in self.query_embeddings.items()})
        if self.enmf:
            out['enmf'] = self.enmf
        return out

    def load(self) -> Dataset:
        return load_dataset(self.catalog, self.manifest, self.interactions, self.queries,
                            self.embeddings, self.query_embeddings, self.enmf)

@attr.define(slots=True, frozen=True)
class ExperimentParams:
    strategies: Tuple[str, ...] = attr.field(converter=tuple, default=('search', 'rec', 'multi_task', 'fused_svd'))
    seeds: Tuple[int, ...] = attr.field(converter=tuple, default=(0, 1, 2, 3, 4))
    output: str = 'results'
    head_fraction: float = 0.01
    search_sample: int = 500
    user_sample: int = 0
    exclude_history: bool = True
    use_user_factors: bool = False
    ablation_kinds: Tuple[str, ...] = attr.field(converter=tuple, default=())
    sample_seed: int = 0

@attr.define(slots=True, frozen=True)
class RunConfig:
    data: DataPaths
    experiment: ExperimentParams = ExperimentParams()
    quantizer: QuantizerParams = QuantizerParams()
    decoding: DecodingConfig = DecodingConfig()

def _resolve(base: str, path: Any) -> Any:
    if not isinstance(path, str) or os.path.isabs(path):
        return path
    return os.path.normpath(os.path.join(base, path))

def _section(raw: Mapping[str, Any], name: str, problems: List[str]) -> Dict[str, Any]:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        problems.append(f'[{name}] must be a table')
        return {}
    return dict(value)

def _build(cls: Any, name: str, values: Dict[str, Any], problems: List[str]) -> Any:
    known = {a.name for a in attr.fields(cls)}
    for key in sorted(set(values) - known):
        problems.append(f'unknown key {name}.{key}')
    try:
        return cls(**{k: v for k, v in values.items() if k in known})
    except (TypeError, ValueError) as e:
        problems.append(f'[{name}]: {e}')
        return None

def config_from_dict(raw: Mapping[str, Any], base: str = '.') -> RunConfig:
    problems: List[str] = []
    data = _section(raw, 'data', problems)
    for key in ('catalog', 'manifest', 'interactions', 'queries', 'enmf'):
        if key in data:
            data[key] = _resolve(base, data[key])
    for key in ('embeddings', 'query_embeddings'):
        if key in data:
            if isinstance(data[key], dict):
                data[key] = {k: _resolve(base, v) for k, v in data[key].items()}
            else:
                problems.append(f'data.{key} must be a table')
                data.pop(key)
    experiment = _section(raw, 'experiment', problems)
    experiment['output'] = _resolve(base, experiment.get('output', attr.fields(ExperimentParams).output.default))
    quantizer = _section(raw, 'quantizer', problems)
    if 'kind' in quantizer:
        try:
            quantizer['kind'] = QuantizerKind.from_string(quantizer['kind'])
        except QuantizerException as e:
            problems.append(str(e))
            quantizer.pop('kind')
    decoding = _section(raw, 'decoding', problems)
    if 'groups' in decoding:
        decoding['group_count'] = decoding.pop('groups')

    paths = _build(DataPaths, 'data', data, problems)
    params = _build(ExperimentParams, 'experiment', experiment, problems)
    quantizer_params = _build(QuantizerParams, 'quantizer', quantizer, problems)
    decoding_config = _build(DecodingConfig, 'decoding', decoding, problems)
    if problems:
        raise ConfigException(problems)
    return RunConfig(paths, params, quantizer_params, decoding_config)

def load_config(path: str) -> RunConfig:
    try:
        with open(path, 'rb') as f:
            raw = tomllib.load(f)
    except OSError as e:
        raise ConfigException([f'cannot read {path}: {e}'])
    except tomllib.TOMLDecodeError as e:
        raise ConfigException([f'{path} is not valid TOML: {e}'])
    return config_from_dict(raw, os.path.dirname(os.path.abspath(path)))

def validate_config(config: RunConfig) -> RunConfig:
    problems = []
    for name, path in config.data.files().items():
        if not os.path.isfile(path):
            problems.append(f'data.{name}: no file at {path}')
    experiment = config.experiment
    if not experiment.strategies:
        problems.append('experiment.strategies is empty')
    for s in experiment.strategies:
        if s not in {x.value for x in Strategy}:
            problems.append(f'experiment.strategies: unknown strategy {s!r}')
    if not experiment.seeds:
        problems.append('experiment.seeds is empty')
    if not 0 < experiment.head_fraction < 1:
        problems.append(f'experiment.head_fraction must be in (0, 1) (got {experiment.head_fraction})')
    if experiment.search_sample < 0 or experiment.user_sample < 0:
        problems.append('experiment sample sizes must be non-negative')
    for kind in experiment.ablation_kinds:
        if kind not in {k.value for k in QuantizerKind}:
            problems.append(f'experiment.ablation_kinds: unknown quantizer {kind!r}')
    if config.quantizer.levels < 1:
        problems.append(f'quantizer.levels must be positive (got {config.quantizer.levels})')
    if config.quantizer.codebook_size < 1:
        problems.append(f'quantizer.codebook_size must be positive (got {config.quantizer.codebook_size})')
    if config.quantizer.max_iters < 1:
        problems.append(f'quantizer.max_iters must be positive (got {config.quantizer.max_iters})')
    problems.extend(f'decoding: {p}' for p in config.decoding.problems())
    if problems:
        raise ConfigException(problems)
    return config

def to_dict(config: RunConfig) -> Dict[str, Any]:
    def plain(value: Any) -> Any:
        if isinstance(value, QuantizerKind):
            return value.value
        if isinstance(value, tuple):
            return list(value)
        if isinstance(value, Mapping):
            return dict(value)
        return value
    out = attr.asdict(config, value_serializer=lambda _, __, v: plain(v))
    out['decoding']['groups'] = out['decoding'].pop('group_count')
    if out['data']['enmf'] is None:
        del out['data']['enmf']
    return out

def with_overrides(config: RunConfig, **overrides: Any) -> RunConfig:
    """Flags win over file values; keys are 'section.field' with the dot replaced by '__'."""
    sections: Dict[str, Dict[str, Any]] = {}
    for key, value in overrides.items():
        if value is None:
            continue
        section, _, field = key.partition('__')
        sections.setdefault(section, {})[field] = value
    for section, fields in sections.items():
        config = attr.evolve(config, **{section: attr.evolve(getattr(config, section), **fields)})
    return config

def write_effective_config(directory: str, config: RunConfig) -> str:
    path = os.path.join(directory, EFFECTIVE_CONFIG_NAME)
    with open(path, 'wb') as f:
        tomli_w.dump(to_dict(config), f)
    return path
