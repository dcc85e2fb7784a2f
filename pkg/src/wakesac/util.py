import hashlib
import json

import numpy as np


def config_hash(obj) -> str:
    """Short stable digest of a JSON-serialisable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def circular_mean_deg(angles, axis=0):
    rad = np.radians(np.asarray(angles, float))
    return np.degrees(np.arctan2(np.sin(rad).mean(axis=axis), np.cos(rad).mean(axis=axis))) % 360.0
