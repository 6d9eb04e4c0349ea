"""The feature-matrix oracle.

All inference runs against four queries over the k x N feature matrix F
(columns are instances):

  (i)   mat_vec(v)        -> F v                 (k-vector)
  (ii)  mat_t_vec(u)      -> F' u                (N-vector)
  (iii) weighted_gram(d)  -> F diag(d) F'        (k x k, symmetric)
  (iv)  diag_quadratic(A) -> diag(F' A F)        (N-vector)

The matrix is held as one or more contiguous column shards. Sums ((i),
(iii)) are reduced in fixed shard order and are reproducible to rounding;
concatenations ((ii), (iv)) use per-instance reductions whose result is
bit-identical for any shard partition.
"""

from __future__ import annotations

import concurrent.futures
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from scipy.linalg.blas import dsyrk

from .errors import DataFormatError, DimensionError, DomainError, NumericError

# Column-block width for gram accumulation, sized so scratch stays ~4 MB.
_GRAM_BLOCK_BYTES = 4 << 20


@dataclass(frozen=True)
class FeatureShard:
    """A contiguous block of feature-matrix columns.

    ``data`` holds the block instance-major: row i is the feature vector of
    global instance ``col_offset + i``.
    """

    data: np.ndarray
    col_offset: int

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise DataFormatError("shard data must be a 2-d (n, k) array")
        if not np.all(np.isfinite(data)):
            raise NumericError("shard contains NaN or Inf")
        if self.col_offset < 0:
            raise DataFormatError("col_offset must be non-negative")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def n_cols(self) -> int:
        return self.data.shape[0]

    @property
    def k(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ShardLayout:
    """Monotone column offsets partitioning [0, N) into p shards."""

    boundaries: tuple[int, ...]

    def __post_init__(self):
        b = tuple(int(x) for x in self.boundaries)
        if len(b) < 2 or b[0] != 0 or any(y < x for x, y in zip(b, b[1:])):
            raise DataFormatError("boundaries must start at 0 and be monotone")
        object.__setattr__(self, "boundaries", b)

    @classmethod
    def even(cls, n: int, p: int) -> "ShardLayout":
        """Split N columns into p parts whose sizes differ by at most one.

        The remainder goes to the lowest-indexed shards.
        """
        if p < 1 or n < 0:
            raise DataFormatError("need p >= 1 and n >= 0")
        base, rem = divmod(n, p)
        sizes = [base + (1 if i < rem else 0) for i in range(p)]
        bounds = [0]
        for s in sizes:
            bounds.append(bounds[-1] + s)
        return cls(tuple(bounds))

    @property
    def n_shards(self) -> int:
        return len(self.boundaries) - 1

    @property
    def n_total(self) -> int:
        return self.boundaries[-1]

    def slices(self) -> list[slice]:
        return [
            slice(a, b) for a, b in zip(self.boundaries, self.boundaries[1:])
        ]


class Oracle(ABC):
    """Interface every feature-matrix backend implements."""

    n: int
    k: int

    @abstractmethod
    def mat_vec(self, v: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """F v for an N-vector v."""

    @abstractmethod
    def mat_t_vec(self, u: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """F' u for a k-vector u."""

    @abstractmethod
    def weighted_gram(self, d: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """F diag(d) F' for a positive N-vector d."""

    @abstractmethod
    def diag_quadratic(self, a: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """diag(F' A F) for a symmetric k x k matrix A."""


def _check_vector(name: str, v: np.ndarray, length: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != length:
        raise DimensionError(f"{name} must be a vector of length {length}")
    return v


def _out_vector(out: np.ndarray | None, length: int) -> np.ndarray:
    if out is None:
        return np.zeros(length)
    if out.shape != (length,):
        raise DimensionError(f"output buffer must have shape ({length},)")
    out[:] = 0.0
    return out


def _shard_mat_vec(shard: FeatureShard, v_local: np.ndarray) -> np.ndarray:
    return v_local @ shard.data


def _shard_mat_t_vec(shard: FeatureShard, u: np.ndarray) -> np.ndarray:
    # einsum without optimization reduces each row independently, so the
    # result for an instance does not depend on how columns are sharded.
    return np.einsum("ij,j->i", shard.data, u, optimize=False)


def _shard_weighted_gram(shard: FeatureShard, d_local: np.ndarray) -> np.ndarray:
    k = shard.k
    gram = np.zeros((k, k))
    if shard.n_cols == 0:
        return gram
    block = max(16, _GRAM_BLOCK_BYTES // (8 * k))
    root = np.sqrt(d_local)
    for start in range(0, shard.n_cols, block):
        stop = min(start + block, shard.n_cols)
        scaled = shard.data[start:stop] * root[start:stop, None]
        # rank-update of the upper triangle only; mirrored by the caller
        gram = dsyrk(1.0, scaled.T, beta=1.0, c=gram, overwrite_c=1)
    return gram


def _shard_diag_quadratic(shard: FeatureShard, a: np.ndarray) -> np.ndarray:
    # Serial per-instance triple product; bit-stable under any sharding.
    return np.einsum("ij,jl,il->i", shard.data, a, shard.data, optimize=False)


def _mirror_upper(gram: np.ndarray) -> np.ndarray:
    upper = np.triu(gram)
    return upper + np.triu(gram, 1).T


class LocalOracle(Oracle):
    """In-memory oracle over one or more column shards.

    With several shards, queries fan out over a thread pool (the heavy
    kernels release the GIL) and partial results are combined by a single
    reducer in shard-index order.
    """

    def __init__(self, shards, n_threads: int | None = None):
        if isinstance(shards, np.ndarray):
            shards = [FeatureShard(data=shards, col_offset=0)]
        elif isinstance(shards, FeatureShard):
            shards = [shards]
        shards = sorted(shards, key=lambda s: s.col_offset)
        if not shards:
            raise DataFormatError("at least one shard required")
        k = shards[0].k
        offset = 0
        for shard in shards:
            if shard.k != k:
                raise DimensionError("all shards must share the feature dimension")
            if shard.col_offset != offset:
                raise DataFormatError("shards must tile [0, N) without gaps")
            offset += shard.n_cols
        self.shards = shards
        self.n = offset
        self.k = k
        self._pool = None
        if len(shards) > 1:
            workers = n_threads or min(len(shards), 8)
            if workers > 1:
                self._pool = concurrent.futures.ThreadPoolExecutor(
                    max_workers=workers, thread_name_prefix="gpgc-oracle"
                )

    @classmethod
    def from_matrix(cls, features: np.ndarray, n_shards: int = 1,
                    n_threads: int | None = None) -> "LocalOracle":
        features = np.ascontiguousarray(features, dtype=np.float64)
        layout = ShardLayout.even(features.shape[0], n_shards)
        shards = [
            FeatureShard(data=features[sl], col_offset=sl.start)
            for sl in layout.slices()
        ]
        return cls(shards, n_threads=n_threads)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def _map(self, fn, args_per_shard):
        if self._pool is None:
            return [fn(s, a) for s, a in zip(self.shards, args_per_shard)]
        futures = [
            self._pool.submit(fn, s, a)
            for s, a in zip(self.shards, args_per_shard)
        ]
        return [f.result() for f in futures]

    def _split(self, v: np.ndarray):
        return [
            v[s.col_offset:s.col_offset + s.n_cols] for s in self.shards
        ]

    def mat_vec(self, v, out=None):
        v = _check_vector("v", v, self.n)
        if not np.all(np.isfinite(v)):
            raise NumericError("v contains NaN or Inf")
        result = _out_vector(out, self.k)
        for part in self._map(_shard_mat_vec, self._split(v)):
            result += part
        return result

    def mat_t_vec(self, u, out=None):
        u = _check_vector("u", u, self.k)
        result = _out_vector(out, self.n)
        parts = self._map(_shard_mat_t_vec, [u] * len(self.shards))
        for shard, part in zip(self.shards, parts):
            result[shard.col_offset:shard.col_offset + shard.n_cols] = part
        return result

    def weighted_gram(self, d, out=None):
        d = _check_vector("d", d, self.n)
        if not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise DomainError("d must be strictly positive and finite")
        if out is None:
            out = np.zeros((self.k, self.k))
        elif out.shape != (self.k, self.k):
            raise DimensionError(f"output buffer must have shape ({self.k}, {self.k})")
        else:
            out[:] = 0.0
        for part in self._map(_shard_weighted_gram, self._split(d)):
            out += part
        out[:] = _mirror_upper(out)
        return out

    def diag_quadratic(self, a, out=None):
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (self.k, self.k):
            raise DimensionError(f"A must have shape ({self.k}, {self.k})")
        if not np.all(np.isfinite(a)):
            raise NumericError("A contains NaN or Inf")
        if a.size and np.max(np.abs(a - a.T)) > 1e-10:
            raise DomainError("A must be symmetric")
        result = _out_vector(out, self.n)
        parts = self._map(_shard_diag_quadratic, [a] * len(self.shards))
        for shard, part in zip(self.shards, parts):
            result[shard.col_offset:shard.col_offset + shard.n_cols] = part
        return result
