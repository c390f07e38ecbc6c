"""JSON helpers: floats are written with 17 significant digits."""

import json
import math
import re

import numpy as np

_TOKEN = "@@float{}@@"
_PATTERN = re.compile(r'"@@float(\d+)@@"')


def _prepare(obj, floats):
    if isinstance(obj, dict):
        return {str(k): _prepare(v, floats) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_prepare(v, floats) for v in obj]
    if isinstance(obj, np.ndarray):
        return _prepare(obj.tolist(), floats)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError("non-finite float cannot be serialized")
        floats.append(x)
        return _TOKEN.format(len(floats) - 1)
    return obj


def dumps(obj, indent=1):
    floats = []
    text = json.dumps(_prepare(obj, floats), indent=indent)
    return _PATTERN.sub(lambda m: format(floats[int(m.group(1))], ".17g"), text)


def dump(obj, path, indent=1):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj, indent))
        fh.write("\n")


def load(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
