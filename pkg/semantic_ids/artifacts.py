import attr
import json
import struct

from typing import Any, Mapping, Sequence

import numpy as np

class ArtifactFormatException(Exception): pass

_HEADER_LENGTH = struct.Struct('<I')
_BLOCK_DTYPE = np.dtype('<f4')

@attr.define(slots=True, frozen=True)
class ArtifactBlock:
    name: str
    array: np.ndarray = attr.field(eq=False)

@attr.define(slots=True, frozen=True)
class Artifact:
    """
        Length-prefixed JSON header followed by raw little-endian float32 blocks.
    """
    meta: Mapping[str, Any]
    blocks: Sequence[ArtifactBlock]

    def block(self, name: str) -> np.ndarray:
        found = next(filter(lambda b: b.name == name, self.blocks), None)
        if found is None:
            raise ArtifactFormatException(f'no block named {name}')
        return found.array

    @classmethod
    def decode(cls, raw: bytes) -> 'Artifact':
        if len(raw) < _HEADER_LENGTH.size:
            raise ArtifactFormatException('truncated header length')
        (length,) = _HEADER_LENGTH.unpack_from(raw, 0)
        offset = _HEADER_LENGTH.size + length
        if offset > len(raw):
            raise ArtifactFormatException('truncated header')
        try:
            header = json.loads(raw[_HEADER_LENGTH.size:offset].decode('utf-8'))
        except (UnicodeDecodeError, ValueError):
            raise ArtifactFormatException('malformed header')
        if not isinstance(header, dict) or not isinstance(header.get('blocks', []), list):
            raise ArtifactFormatException('malformed header')

        blocks = []
        for entry in header.get('blocks', []):
            try:
                name = str(entry['name'])
                shape = tuple(int(x) for x in entry['shape'])
            except (KeyError, TypeError, ValueError):
                raise ArtifactFormatException('malformed block entry')
            count = int(np.prod(shape, dtype=np.int64))
            end = offset + count * _BLOCK_DTYPE.itemsize
            if end > len(raw):
                raise ArtifactFormatException(f'block {name} is truncated')
            array = np.frombuffer(raw, dtype=_BLOCK_DTYPE, count=count, offset=offset)
            blocks.append(ArtifactBlock(name, array.reshape(shape).astype(np.float32)))
            offset = end
        if offset != len(raw):
            raise ArtifactFormatException(f'{len(raw) - offset} trailing bytes')
        return Artifact(meta=header.get('meta', {}), blocks=blocks)

    def encode(self) -> bytes:
        header = {
            'meta': dict(self.meta),
            'blocks': [{'name': b.name, 'shape': list(b.array.shape)} for b in self.blocks]
        }
        head = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
        parts = [_HEADER_LENGTH.pack(len(head)), head]
        parts.extend(np.ascontiguousarray(b.array, dtype=_BLOCK_DTYPE).tobytes() for b in self.blocks)
        return b''.join(parts)

def write_artifact(path: str, artifact: Artifact) -> None:
    with open(path, 'wb') as f:
        f.write(artifact.encode())

def read_artifact(path: str) -> Artifact:
    with open(path, 'rb') as f:
        return Artifact.decode(f.read())
