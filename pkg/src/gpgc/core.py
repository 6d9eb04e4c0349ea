"""Domain types, dataset ingestion, and class-balancing weights.

This module owns the on-disk formats (binary feature file, labels file,
groups file, model file) and the validated in-memory containers. It does
no linear algebra.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BalanceError,
    DataFormatError,
    DimensionError,
    LabelError,
    NumericError,
)

FEATURE_MAGIC = b"GPCF"
FEATURE_VERSION = 1


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class GroupedDataset:
    """Labels in {-1,+1}, an instance-to-group map, and instance weights.

    Groups tie noise hyperparameters: all instances of one group share a
    single learned noise level. Group indices are dense integers [0, G);
    string group tokens are mapped at ingestion time.
    """

    labels: np.ndarray
    group_of: np.ndarray
    weights: np.ndarray
    n_groups: int

    def __post_init__(self):
        labels = _readonly(np.asarray(self.labels, dtype=np.float64))
        group_of = _readonly(np.asarray(self.group_of, dtype=np.int64))
        weights = _readonly(np.asarray(self.weights, dtype=np.float64))
        if labels.ndim != 1 or group_of.ndim != 1 or weights.ndim != 1:
            raise DataFormatError("labels, group_of and weights must be 1-d")
        n = labels.shape[0]
        if group_of.shape[0] != n or weights.shape[0] != n:
            raise DataFormatError(
                f"length mismatch: {n} labels, {group_of.shape[0]} group entries, "
                f"{weights.shape[0]} weights"
            )
        if n == 0:
            raise DataFormatError("dataset is empty")
        if not np.all(np.abs(labels) == 1.0):
            bad = labels[np.abs(labels) != 1.0][0]
            raise LabelError(f"label {bad!r} is not -1 or +1")
        if group_of.min() < 0 or group_of.max() >= self.n_groups:
            raise DataFormatError("group index out of range")
        if np.any(np.bincount(group_of, minlength=self.n_groups) == 0):
            raise DataFormatError("every group in [0, G) must have >= 1 instance")
        if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
            raise DataFormatError("weights must be strictly positive and finite")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "group_of", group_of)
        object.__setattr__(self, "weights", weights)

    @property
    def n_instances(self) -> int:
        return self.labels.shape[0]

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.group_of, minlength=self.n_groups)

    def with_weights(self, weights: np.ndarray) -> "GroupedDataset":
        return GroupedDataset(self.labels, self.group_of, weights, self.n_groups)


@dataclass(frozen=True)
class HyperParams:
    """Per-group noise std-devs and per-scale-group feature std-devs.

    ``eps[g]`` is the noise standard deviation shared by all instances of
    group g; ``sigma[s]`` is the prior feature-scale standard deviation
    shared by all features whose ``scale_group_of`` entry is s.
    """

    eps: np.ndarray
    sigma: np.ndarray
    scale_group_of: np.ndarray

    def __post_init__(self):
        eps = _readonly(np.asarray(self.eps, dtype=np.float64))
        sigma = _readonly(np.asarray(self.sigma, dtype=np.float64))
        sg = _readonly(np.asarray(self.scale_group_of, dtype=np.int64))
        if eps.ndim != 1 or sigma.ndim != 1 or sg.ndim != 1:
            raise DataFormatError("hyperparameter vectors must be 1-d")
        if not np.all(np.isfinite(eps)) or np.any(eps <= 0):
            raise DataFormatError("all eps entries must be strictly positive")
        if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
            raise DataFormatError("all sigma entries must be strictly positive")
        if sg.size and (sg.min() < 0 or sg.max() >= sigma.shape[0]):
            raise DataFormatError("scale-group index out of range")
        object.__setattr__(self, "eps", eps)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "scale_group_of", sg)

    @property
    def n_groups(self) -> int:
        return self.eps.shape[0]

    @property
    def n_scale_groups(self) -> int:
        return self.sigma.shape[0]

    @property
    def n_features(self) -> int:
        return self.scale_group_of.shape[0]

    def sigma_per_feature(self) -> np.ndarray:
        """Expand sigma to one std-dev per feature dimension."""
        return self.sigma[self.scale_group_of]


@dataclass(frozen=True)
class TrainedModel:
    """Oracle-free prediction model: weight vector plus learned confidences.

    ``beta`` predicts through a plain dot product; ``group_confidence``
    is the negated learned noise std-dev, so larger means more reliable
    annotation. Only the induced ranking is meaningful.
    """

    beta: np.ndarray
    hyper: HyperParams
    group_confidence: np.ndarray
    n_instances: int
    final_lml: float

    def __post_init__(self):
        beta = _readonly(np.asarray(self.beta, dtype=np.float64))
        conf = _readonly(np.asarray(self.group_confidence, dtype=np.float64))
        if not np.all(np.isfinite(beta)):
            raise NumericError("beta contains non-finite entries")
        if beta.shape[0] != self.hyper.n_features:
            raise DimensionError("beta length does not match feature dimension")
        if conf.shape[0] != self.hyper.n_groups:
            raise DimensionError("one confidence per group required")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "group_confidence", conf)

    @property
    def k(self) -> int:
        return self.beta.shape[0]

    @property
    def n_groups(self) -> int:
        return self.hyper.n_groups


def balance_weights(dataset: GroupedDataset) -> np.ndarray:
    """Per-class weights making both classes carry total weight N/2.

    All +1 instances share one weight, all -1 instances another, with
    w+ * N+ = w- * N- = N/2 and sum(w) = N.
    """
    n = dataset.n_instances
    n_pos = int(np.count_nonzero(dataset.labels > 0))
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise BalanceError("both labels must be present to balance classes")
    w_pos = n / (2.0 * n_pos)
    w_neg = n / (2.0 * n_neg)
    return np.where(dataset.labels > 0, w_pos, w_neg)


def expand_noise(hyper: HyperParams, dataset: GroupedDataset) -> np.ndarray:
    """Gather the per-group noise std-devs to one value per instance."""
    if dataset.n_groups != hyper.n_groups:
        raise DimensionError(
            f"dataset has {dataset.n_groups} groups, hyper has {hyper.n_groups}"
        )
    return hyper.eps[dataset.group_of]


# ---------------------------------------------------------------------------
# Feature file: magic "GPCF", u32 version, u64 N, u32 k, u32 S,
# S x u32 scale-group end offsets (strictly increasing, last == k),
# then N*k little-endian f64 values, instance-major.
# ---------------------------------------------------------------------------

_HEADER_FIXED = struct.Struct("<4sIQII")


@dataclass(frozen=True)
class FeatureHeader:
    n_instances: int
    k: int
    scale_boundaries: tuple[int, ...] = field(default=())

    @property
    def n_scale_groups(self) -> int:
        return len(self.scale_boundaries)

    def scale_group_of(self) -> np.ndarray:
        ends = np.asarray(self.scale_boundaries, dtype=np.int64)
        return np.searchsorted(ends, np.arange(self.k), side="right")


def write_feature_file(path, features: np.ndarray, scale_boundaries=None) -> None:
    """Write an (N, k) instance-major float64 array in the binary format."""
    feats = np.ascontiguousarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise DataFormatError("features must be a 2-d (N, k) array")
    n, k = feats.shape
    if scale_boundaries is None:
        scale_boundaries = [k]
    bounds = [int(b) for b in scale_boundaries]
    _check_boundaries(bounds, k)

    def _dump(fh):
        fh.write(_HEADER_FIXED.pack(FEATURE_MAGIC, FEATURE_VERSION, n, k, len(bounds)))
        fh.write(struct.pack(f"<{len(bounds)}I", *bounds))
        fh.write(feats.astype("<f8", copy=False).tobytes())

    if hasattr(path, "write"):
        _dump(path)
    else:
        with open(path, "wb") as fh:
            _dump(fh)


def feature_file_bytes(features: np.ndarray, scale_boundaries=None) -> bytes:
    """Serialize features to the binary format in memory."""
    import io

    buf = io.BytesIO()
    write_feature_file(buf, features, scale_boundaries)  # type: ignore[arg-type]
    return buf.getvalue()


def _check_boundaries(bounds, k: int) -> None:
    if not bounds or bounds[-1] != k:
        raise DataFormatError("last scale-group boundary must equal k")
    if any(b <= 0 for b in bounds) or any(
        b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])
    ):
        raise DataFormatError("scale-group boundaries must be strictly increasing")


def _open_maybe_path(path):
    if hasattr(path, "read") or hasattr(path, "write"):
        return path, False
    return open(path, "rb"), True


def read_feature_header(path) -> FeatureHeader:
    fh, should_close = _open_maybe_path(path)
    try:
        return _read_header(fh)
    finally:
        if should_close:
            fh.close()


def _read_header(fh) -> FeatureHeader:
    raw = fh.read(_HEADER_FIXED.size)
    if len(raw) != _HEADER_FIXED.size:
        raise DataFormatError("feature file truncated in header")
    magic, version, n, k, n_scale = _HEADER_FIXED.unpack(raw)
    if magic != FEATURE_MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise DataFormatError(f"unsupported feature file version {version}")
    if k == 0 or n_scale == 0:
        raise DataFormatError("feature file declares zero features or scale groups")
    raw_bounds = fh.read(4 * n_scale)
    if len(raw_bounds) != 4 * n_scale:
        raise DataFormatError("feature file truncated in scale boundaries")
    bounds = list(struct.unpack(f"<{n_scale}I", raw_bounds))
    _check_boundaries(bounds, k)
    return FeatureHeader(n_instances=n, k=k, scale_boundaries=tuple(bounds))


def read_feature_file(path) -> tuple[np.ndarray, FeatureHeader]:
    """Read the binary feature file into an (N, k) float64 array."""
    fh, should_close = _open_maybe_path(path)
    try:
        header = _read_header(fh)
        count = header.n_instances * header.k
        raw = fh.read(8 * count)
        if len(raw) != 8 * count:
            raise DataFormatError(
                f"feature file truncated: expected {8 * count} data bytes, "
                f"got {len(raw)}"
            )
        data = np.frombuffer(raw, dtype="<f8")
        feats = data.reshape(header.n_instances, header.k).astype(np.float64, copy=True)
    finally:
        if should_close:
            fh.close()
    if not np.all(np.isfinite(feats)):
        raise NumericError("feature file contains NaN or Inf")
    return feats, header


def read_labels(path) -> np.ndarray:
    """Text labels file: one of {-1,+1} per line."""
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            token = line.strip()
            if not token:
                continue
            try:
                value = int(token)
            except ValueError:
                raise LabelError(f"line {lineno}: {token!r} is not an integer label")
            if value not in (-1, 1):
                raise LabelError(f"line {lineno}: label {value} is not -1 or +1")
            values.append(float(value))
    return np.asarray(values, dtype=np.float64)


def read_groups(path) -> tuple[np.ndarray, list[str]]:
    """Text groups file: one token per line.

    Tokens are mapped to dense indices in first-appearance order; the token
    list (the sidecar mapping) is returned alongside the index vector.
    """
    indices: list[int] = []
    tokens: list[str] = []
    seen: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            token = line.strip()
            if not token:
                continue
            idx = seen.get(token)
            if idx is None:
                idx = len(tokens)
                seen[token] = idx
                tokens.append(token)
            indices.append(idx)
    return np.asarray(indices, dtype=np.int64), tokens


def read_weights(path, expected_n: int | None = None) -> np.ndarray:
    """Text weights file: one strictly positive real per line."""
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            token = line.strip()
            if not token:
                continue
            value = float(token)
            if not np.isfinite(value) or value <= 0:
                raise DataFormatError(f"line {lineno}: weight must be positive")
            values.append(value)
    weights = np.asarray(values, dtype=np.float64)
    if expected_n is not None and weights.shape[0] != expected_n:
        raise DataFormatError(
            f"expected {expected_n} weights, got {weights.shape[0]}"
        )
    return weights


def read_scale_groups(path, k: int) -> np.ndarray:
    """Scale-group config: one dense scale-group index per feature, k lines."""
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            token = line.strip()
            if not token:
                continue
            values.append(int(token))
    sg = np.asarray(values, dtype=np.int64)
    if sg.shape[0] != k:
        raise DataFormatError(f"expected {k} scale-group entries, got {sg.shape[0]}")
    n_scale = int(sg.max()) + 1 if sg.size else 0
    if sg.min() < 0 or len(np.unique(sg)) != n_scale:
        raise DataFormatError("scale-group indices must be dense integers from 0")
    return sg


def load_dataset(features_path, labels_path, groups_path):
    """Load and cross-validate the three input files.

    Returns ``(shard, dataset, header, group_tokens)`` where ``shard`` is a
    single FeatureShard covering all instances and ``dataset`` carries unit
    weights.
    """
    from .oracle import FeatureShard

    features, header = read_feature_file(features_path)
    labels = read_labels(labels_path)
    group_of, tokens = read_groups(groups_path)
    n = header.n_instances
    if labels.shape[0] != n:
        raise DataFormatError(
            f"{n} feature rows but {labels.shape[0]} labels"
        )
    if group_of.shape[0] != n:
        raise DataFormatError(
            f"{n} feature rows but {group_of.shape[0]} group entries"
        )
    dataset = GroupedDataset(
        labels=labels,
        group_of=group_of,
        weights=np.ones(n),
        n_groups=len(tokens),
    )
    return FeatureShard(data=features, col_offset=0), dataset, header, tokens


# ---------------------------------------------------------------------------
# Model file: text key-value document. Floats are written with 17 significant
# digits, which round-trips IEEE 754 doubles exactly.
# ---------------------------------------------------------------------------

MODEL_VERSION = 1


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_list(xs) -> str:
    return " ".join(_fmt(x) for x in xs)


def save_model(path, model: TrainedModel) -> None:
    lines = [
        f"version: {MODEL_VERSION}",
        f"k: {model.k}",
        f"G: {model.n_groups}",
        f"S: {model.hyper.n_scale_groups}",
        f"N: {model.n_instances}",
        f"beta: {_fmt_list(model.beta)}",
        f"eps: {_fmt_list(model.hyper.eps)}",
        f"sigma: {_fmt_list(model.hyper.sigma)}",
        "scale_group_of: " + " ".join(str(int(s)) for s in model.hyper.scale_group_of),
        f"final_lml: {_fmt(model.final_lml)}",
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> TrainedModel:
    fields: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if ":" not in line:
                raise DataFormatError(f"model file line has no key: {line!r}")
            key, _, value = line.partition(":")
            fields[key.strip()] = value.strip()
    try:
        version = int(fields["version"])
        if version != MODEL_VERSION:
            raise DataFormatError(f"unsupported model file version {version}")
        k = int(fields["k"])
        n_groups = int(fields["G"])
        n_scale = int(fields["S"])
        n_instances = int(fields["N"])
        beta = np.asarray([float(t) for t in fields["beta"].split()])
        eps = np.asarray([float(t) for t in fields["eps"].split()])
        sigma = np.asarray([float(t) for t in fields["sigma"].split()])
        scale_group_of = np.asarray(
            [int(t) for t in fields["scale_group_of"].split()], dtype=np.int64
        )
        final_lml = float(fields["final_lml"])
    except KeyError as exc:
        raise DataFormatError(f"model file missing field {exc}") from exc
    if beta.shape[0] != k or eps.shape[0] != n_groups or sigma.shape[0] != n_scale:
        raise DataFormatError("model file field lengths are inconsistent")
    if scale_group_of.shape[0] != k:
        raise DataFormatError("scale_group_of length must equal k")
    hyper = HyperParams(eps=eps, sigma=sigma, scale_group_of=scale_group_of)
    return TrainedModel(
        beta=beta,
        hyper=hyper,
        group_confidence=-eps,
        n_instances=n_instances,
        final_lml=final_lml,
    )


def save_group_tokens(path, tokens: list[str]) -> None:
    """Sidecar mapping: one token per line, dense-index order."""
    with open(path, "w", encoding="utf-8") as fh:
        for token in tokens:
            fh.write(token + "\n")


def load_group_tokens(path) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]
