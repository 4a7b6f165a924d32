"""Chunked Monte Carlo fan-out and CSV emission shared by the experiments."""

from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

DEFAULT_CHUNK = 500


def run_chunked(fn: Callable[[int, int], object], n_paths: int, chunk_size: int = DEFAULT_CHUNK,
                workers: int = 1) -> list:
    """Call ``fn(first_path, count)`` over consecutive blocks, results in block order.

    Block boundaries depend only on ``chunk_size``, never on ``workers``, so
    the concatenated results are identical for any degree of parallelism.
    """
    if n_paths < 1:
        raise ValueError("empty ensemble")
    tasks = [(s, min(chunk_size, n_paths - s)) for s in range(0, n_paths, chunk_size)]
    if workers <= 1 or len(tasks) == 1:
        return [fn(s, c) for s, c in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda t: fn(*t), tasks))


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "-inf" if v < 0 else "inf"
        return repr(float(v))
    return str(v)


def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(format_value(v) for v in row) + "\n")
    return buf.getvalue()
