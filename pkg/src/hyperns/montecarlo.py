"""Sample-parallel Monte Carlo driver.

Samples are processed in fixed-size chunks of consecutive sample indices.  The
chunking never depends on the worker count and per-sample outputs are
concatenated in index order before any reduction, so results are bitwise
identical for any number of workers.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

CHUNK_SIZE = 2000


@dataclass(frozen=True)
class EstimatorResult:
    mean: float
    stderr: float
    n_samples: int
    elapsed: float = 0.0

    @classmethod
    def from_samples(cls, values: np.ndarray, elapsed: float = 0.0) -> "EstimatorResult":
        values = np.asarray(values, dtype=float)
        n = values.shape[0]
        if n < 2:
            raise ValueError("need at least 2 samples for a standard error")
        return cls(float(values.mean()), float(values.std(ddof=1) / np.sqrt(n)), int(n), elapsed)

    def record(self, op: str, params_hash: str, seed: int, timings: bool = False, **extra) -> dict:
        rec = {
            "op": op,
            "params_hash": params_hash,
            "mean": self.mean,
            "stderr": self.stderr,
            "n_samples": self.n_samples,
            "seed": seed,
        }
        if timings:
            rec["elapsed"] = self.elapsed
        rec.update(extra)
        return rec


def params_hash(obj) -> str:
    """Short stable hash of a JSON-serializable parameter description."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def derive_seed(seed: int, tag: int) -> int:
    """Independent 64-bit seed for a sub-experiment ``tag`` of ``seed``."""
    return int(np.random.SeedSequence([int(seed) & ((1 << 64) - 1), tag]).generate_state(1, np.uint64)[0])


def sample_map(
    kernel: Callable[[range], dict],
    n_samples: int,
    workers: int = 1,
    chunk_size: int = CHUNK_SIZE,
    offset: int = 0,
) -> dict[str, np.ndarray]:
    """Evaluate ``kernel`` over sample indices ``offset .. offset+n_samples-1``.

    ``kernel`` maps a range of sample indices to a dict of per-sample arrays
    (leading axis = sample); it must be picklable when ``workers > 1``.
    """
    chunks = [range(a, min(a + chunk_size, offset + n_samples)) for a in range(offset, offset + n_samples, chunk_size)]
    if workers and workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(kernel, chunks))
    else:
        parts = [kernel(c) for c in chunks]
    return {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        return False

