"""
Checkpoint codec: msgpack envelopes compressed with zstandard.

Arrays are stored as raw little-endian float64 bytes so save/load is
bit-exact.
"""

import logging
from pathlib import Path
from typing import Any, Dict

import msgpack
import numpy as np
import zstandard

from .autodiff import ParamStore
from .errors import SchemaError

logger = logging.getLogger(__name__)

FORMAT_TAG = 'conformal-control/checkpoint'
FORMAT_VERSION = 1


def pack_array(arr: np.ndarray) -> Dict[str, Any]:
    arr = np.ascontiguousarray(arr, dtype='<f8')
    return {'shape': list(arr.shape), 'dtype': '<f8', 'data': arr.tobytes()}


def unpack_array(obj: Dict[str, Any]) -> np.ndarray:
    try:
        arr = np.frombuffer(obj['data'], dtype=obj['dtype']).reshape(obj['shape'])
    except (KeyError, ValueError, TypeError) as e:
        raise SchemaError(f"Malformed array entry in checkpoint: {e}") from e
    return arr.astype(np.float64, copy=True)


class CheckpointCodec:
    """Serialize parameter stores and controller state"""

    def __init__(self, level: int = 3):
        """
        Args:
            level: zstandard compression level
        """
        self.level = level

    def encode(self, payload: Dict[str, Any]) -> bytes:
        """
        Encode a payload whose values are ParamStores, arrays or plain msgpack types.

        Returns:
            Compressed checkpoint bytes
        """
        body = {}
        for key, value in payload.items():
            if isinstance(value, ParamStore):
                body[key] = {'__params__': self._pack_params(value)}
            elif isinstance(value, np.ndarray):
                body[key] = {'__array__': pack_array(value)}
            else:
                body[key] = value
        envelope = {'format': FORMAT_TAG, 'version': FORMAT_VERSION, 'body': body}
        raw = msgpack.packb(envelope, use_bin_type=True)
        blob = zstandard.ZstdCompressor(level=self.level).compress(raw)
        logger.debug(f"Encoded checkpoint: {len(raw)} -> {len(blob)} bytes")
        return blob

    def decode(self, blob: bytes) -> Dict[str, Any]:
        try:
            raw = zstandard.ZstdDecompressor().decompress(blob)
            envelope = msgpack.unpackb(raw, raw=False, strict_map_key=False)
        except (zstandard.ZstdError, msgpack.UnpackException, ValueError) as e:
            raise SchemaError(f"Not a conformal-control checkpoint: {e}") from e
        if not isinstance(envelope, dict) or envelope.get('format') != FORMAT_TAG:
            raise SchemaError("Not a conformal-control checkpoint: missing format tag")
        if envelope.get('version') != FORMAT_VERSION:
            raise SchemaError(f"Unsupported checkpoint version {envelope.get('version')}")

        payload = {}
        for key, value in envelope['body'].items():
            if isinstance(value, dict) and '__params__' in value:
                payload[key] = self._unpack_params(value['__params__'], ParamStore)
            elif isinstance(value, dict) and '__array__' in value:
                payload[key] = unpack_array(value['__array__'])
            else:
                payload[key] = value
        return payload

    def write(self, path, payload: Dict[str, Any]):
        blob = self.encode(payload)
        Path(path).write_bytes(blob)
        logger.info(f"Wrote checkpoint {path} ({len(blob)} bytes)")

    def read(self, path) -> Dict[str, Any]:
        payload = self.decode(Path(path).read_bytes())
        logger.info(f"Loaded checkpoint {path}")
        return payload

    @staticmethod
    def _pack_params(store) -> Dict[str, Any]:
        return {
            'step': store.step,
            'params': {name: pack_array(p.values) for name, p in store.items()},
            'slots': {slot: {name: pack_array(arr) for name, arr in arrays.items()}
                      for slot, arrays in store.slots.items()},
        }

    @staticmethod
    def _unpack_params(obj: Dict[str, Any], store_cls):
        store = store_cls()
        for name, entry in obj['params'].items():
            store.add(name, unpack_array(entry))
        store.slots = {slot: {name: unpack_array(entry) for name, entry in arrays.items()}
                       for slot, arrays in obj['slots'].items()}
        store.step = int(obj['step'])
        return store
