"""Self-describing binary serialization of trained scene fields.

Layout: magic "FLDF", u16 version, u32 header length, JSON header holding
the scene bounds and every architecture hyperparameter, then the packed
float32 parameter blob. The same bytes serve as the on-disk field file and
as the network-parameter payload exchanged between agents.
"""

import dataclasses
import json
import struct

import numpy as np

from ..scene_field import FieldConfig, SceneBounds, SceneField

__all__ = ["field_to_bytes", "field_from_bytes", "save_field", "load_field"]

FIELD_MAGIC = b"FLDF"
FIELD_VERSION = 1


def field_to_bytes(field):
    """Serialize a SceneField (architecture, bounds, parameters)."""
    header = {
        "bounds_min": [float(v) for v in field.bounds.minimum],
        "bounds_max": [float(v) for v in field.bounds.maximum],
        "config": dataclasses.asdict(field.config),
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    blob = field.serialize_parameters()
    return (FIELD_MAGIC + struct.pack("<HI", FIELD_VERSION,
                                      len(header_bytes))
            + header_bytes + blob)


def field_from_bytes(data):
    """Reconstruct a SceneField from field_to_bytes output.

    Raises:
        ValueError: bad magic, unsupported version, or malformed header.
    """
    if data[:4] != FIELD_MAGIC:
        raise ValueError("bad field file magic")
    version, header_len = struct.unpack_from("<HI", data, 4)
    if version != FIELD_VERSION:
        raise ValueError(f"unsupported field file version {version}")
    start = 4 + 6
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"malformed field file header: {exc}") from None
    bounds = SceneBounds(np.array(header["bounds_min"]),
                         np.array(header["bounds_max"]))
    config = FieldConfig(**header["config"])
    field = SceneField(bounds, config, seed=0)
    field.deserialize_parameters(data[start + header_len:])
    return field


def save_field(field, path):
    with open(path, "wb") as handle:
        handle.write(field_to_bytes(field))
    return path


def load_field(path):
    with open(path, "rb") as handle:
        return field_from_bytes(handle.read())
