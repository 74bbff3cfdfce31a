"""Compact JSON writer that renders every float with 17 significant digits."""
from __future__ import annotations

import json
import math

import numpy as np


def fmt_float(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite float {x}")
    s = format(x, ".17g")
    # keep a float marker so the value reads back as a float
    if "e" not in s and "." not in s and "n" not in s:
        s += ".0"
    return s


def dumps17(obj) -> str:
    """``json.dumps`` equivalent (no whitespace, key order preserved) with 17-digit floats."""
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k), ensure_ascii=False)}:{dumps17(v)}"
                              for k, v in obj.items()) + "}"
    if isinstance(obj, np.ndarray):
        return dumps17(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps17(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")
