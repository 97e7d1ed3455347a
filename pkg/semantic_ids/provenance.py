import attr
import json
import os

from enum import Enum
from typing import Any, Dict, List, Mapping

import dag_cbor
import numpy as np
from multiformats import CID, multicodec, multihash

MANIFEST_NAME = 'manifest.jsonl'

def _cid(data: bytes, codec: str) -> str:
    mh = multihash.get('sha2-256').digest(data)
    return CID('base32', 1, multicodec.get(codec).code, mh).encode()

def _to_ipld(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {str(k): _to_ipld(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_ipld(v) for v in value]
    if isinstance(value, Enum):
        return _to_ipld(value.value)
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, os.PathLike):
        return os.fspath(value)
    return value

def content_id(data: bytes) -> str:
    return _cid(data, 'raw')

def config_id(config: Mapping[str, Any]) -> str:
    # dag-cbor sorts map keys, so equal configs hash equally
    return _cid(dag_cbor.encode(_to_ipld(config)), 'dag-cbor')

def file_id(path: str) -> str:
    with open(path, 'rb') as f:
        return content_id(f.read())

def fingerprint_ids(item_ids: Any) -> str:
    return content_id('\n'.join(item_ids).encode('utf-8'))

@attr.define(slots=True, frozen=True)
class ManifestEntry:
    command: str
    config: str
    inputs: Mapping[str, str]
    outputs: Mapping[str, str]
    seconds: float

    def to_json(self) -> str:
        return json.dumps({
            'command': self.command,
            'config': self.config,
            'inputs': dict(self.inputs),
            'outputs': dict(self.outputs),
            'seconds': self.seconds
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> 'ManifestEntry':
        obj = json.loads(line)
        return ManifestEntry(obj['command'], obj['config'], obj['inputs'], obj['outputs'], obj['seconds'])

class RunManifest:
    def __init__(self, directory: str):
        self.path = os.path.join(directory, MANIFEST_NAME)

    def append(self, entry: ManifestEntry) -> None:
        with open(self.path, 'a', encoding='utf-8') as f:
            f.write(entry.to_json() + '\n')

    def entries(self) -> List[ManifestEntry]:
        if not os.path.exists(self.path):
            return []
        with open(self.path, encoding='utf-8') as f:
            return [ManifestEntry.from_json(line) for line in f if line.strip()]

def hash_files(paths: Mapping[str, str]) -> Dict[str, str]:
    return {name: file_id(path) for name, path in sorted(paths.items()) if os.path.isfile(path)}
