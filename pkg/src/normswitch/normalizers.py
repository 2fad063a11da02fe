"""Moment engine and the individual normalizers (BN, IN, LN, GN, WN).

Every normalizer in this module standardizes an activation tensor by a
mean and a variance taken over some axis set. The statistics are constant
over (h, w), so each normalizer's moments can be expressed per (n, c) cell
together with a grouping of cells; that is the common currency the
switchable layer uses to mix them.

Variances are biased (population) estimates. ``eps`` is added inside the
square root.
"""

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError, UsageError
from .tensor import DTYPE, as_tensor4

DEFAULT_EPS = 1e-5

# Incremented every time moments are computed, keyed by normalizer name.
# Lets callers verify that hard ratios skip unused normalizers.
MOMENT_COUNTS = Counter()


@dataclass(frozen=True)
class NormalizerKind:
    name: str
    groups: int = 0

    def __str__(self):
        return f"GN{self.groups}" if self.name == "GN" else self.name


BN = NormalizerKind("BN")
IN = NormalizerKind("IN")
LN = NormalizerKind("LN")
WN = NormalizerKind("WN")


def GN(groups):
    if groups < 1:
        raise ConfigurationError(f"GN needs at least one group, got {groups}")
    return NormalizerKind("GN", int(groups))


def parse_kind(text, gn_groups=None):
    """Parse ``"bn"``, ``"in"``, ``"ln"``, ``"gn"``/``"gn8"``."""
    t = text.strip().upper()
    if t in ("BN", "IN", "LN"):
        return NormalizerKind(t)
    if t.startswith("GN"):
        rest = t[2:]
        if rest:
            return GN(int(rest))
        if gn_groups is None:
            raise ConfigurationError("GN requires a group count")
        return GN(gn_groups)
    raise ConfigurationError(f"unknown normalizer {text!r}")


@dataclass(frozen=True)
class ShardConfig:
    """``n_shards`` emulated devices with ``per_shard`` samples each."""

    n_shards: int = 1
    per_shard: int = 0

    @property
    def total(self):
        return self.n_shards * self.per_shard

    def check(self, n):
        if self.n_shards < 1:
            raise ConfigurationError(f"n_shards must be >= 1, got {self.n_shards}")
        if n % self.n_shards:
            raise ConfigurationError(f"batch of {n} samples cannot be split into {self.n_shards} equal shards")
        if self.per_shard and self.per_shard * self.n_shards != n:
            raise ConfigurationError(
                f"batch of {n} samples does not match shard config ({self.n_shards}, {self.per_shard})"
            )


SINGLE_SHARD = ShardConfig(1, 0)


def _view(kind, shape, shard):
    """Reshape and reduction axes that realise ``kind``'s statistics.

    The trailing axis of the view is always the flattened (h, w) plane.
    """
    n, c, h, w = shape
    hw = h * w
    if kind.name == "BN":
        shard = shard or SINGLE_SHARD
        shard.check(n)
        s = shard.n_shards
        return (s, n // s, c, hw), (1, 3)
    if kind.name == "IN":
        return (n, c, hw), (2,)
    if kind.name == "LN":
        return (n, c, hw), (1, 2)
    if kind.name == "GN":
        g = kind.groups
        if g < 1 or c % g:
            raise ConfigurationError(f"GN with {g} groups does not divide {c} channels")
        return (n, g, c // g, hw), (2, 3)
    raise ConfigurationError(f"{kind} has no activation moments")


@dataclass
class Moments:
    """Per-group means and variances for one normalizer.

    ``means``/``vars`` are flat over groups; ``grouping`` maps each (n, c)
    cell to its group index. ``count`` is the number of elements per group.
    """

    kind: NormalizerKind
    means: np.ndarray
    vars: np.ndarray
    grouping: np.ndarray
    count: int
    shape: tuple
    shard: ShardConfig = None
    _stat_shape: tuple = field(default=None, repr=False)

    def mean_nc(self):
        return self.means[self.grouping]

    def var_nc(self):
        return self.vars[self.grouping]

    def reduce_nc(self, d_nc):
        """Adjoint of the (group -> cell) broadcast: sum cell values per group."""
        view_shape, axes = _view(self.kind, self.shape, self.shard)
        v = np.asarray(d_nc, dtype=DTYPE).reshape(view_shape[:-1] + (1,))
        return v.sum(axis=axes).reshape(-1)


def compute_moments(kind, x, shard=None):
    """Means and variances of ``x`` under ``kind``'s axis scheme.

    BN statistics are taken independently within each shard; IN, LN and GN
    never cross samples so sharding does not affect them.
    """
    x = as_tensor4(x)
    view_shape, axes = _view(kind, x.shape, shard)
    xv = x.reshape(view_shape)
    mean = xv.mean(axis=axes, keepdims=True)
    var = ((xv - mean) ** 2).mean(axis=axes, keepdims=True)
    count = int(np.prod([view_shape[a] for a in axes]))
    n_groups = mean.size
    idx = np.arange(n_groups).reshape(mean.shape)
    n, c = x.shape[:2]
    grouping = np.broadcast_to(idx, view_shape[:-1] + (1,)).reshape(n, c)
    MOMENT_COUNTS[kind.name] += 1
    return Moments(
        kind=kind,
        means=mean.reshape(-1),
        vars=var.reshape(-1),
        grouping=np.ascontiguousarray(grouping),
        count=count,
        shape=x.shape,
        shard=shard if kind.name == "BN" else None,
        _stat_shape=mean.shape,
    )


def moments_adjoint(x, m, dmean_nc, dvar_nc):
    """Gradient wrt ``x`` flowing through ``m``'s means and variances.

    ``dmean_nc``/``dvar_nc`` are loss gradients wrt the per-cell broadcast
    statistics; contributions of cells sharing a group are summed first.
    """
    dmu = m.reduce_nc(dmean_nc)[m.grouping]
    dvar = m.reduce_nc(dvar_nc)[m.grouping]
    k = m.count
    centered = x - m.mean_nc()[:, :, None, None]
    return (dmu / k)[:, :, None, None] + (dvar * (2.0 / k))[:, :, None, None] * centered


def _check_eps(eps):
    if eps < 0:
        raise ConfigurationError(f"eps must be non-negative, got {eps}")


def normalize(x, m, eps=DEFAULT_EPS):
    """Map each element to ``(h - mean_g) / sqrt(var_g + eps)``."""
    _check_eps(eps)
    x = as_tensor4(x)
    if tuple(x.shape) != tuple(m.shape):
        raise ConfigurationError(f"moments computed for shape {m.shape}, got input {x.shape}")
    std = np.sqrt(m.var_nc() + eps)
    return (x - m.mean_nc()[:, :, None, None]) / std[:, :, None, None]


@dataclass
class AffineParams:
    gamma: np.ndarray
    beta: np.ndarray

    @classmethod
    def identity(cls, channels):
        return cls(np.ones(channels, dtype=DTYPE), np.zeros(channels, dtype=DTYPE))


def affine_transform(xhat, p):
    c = np.shape(xhat)[1]
    if len(p.gamma) != c or len(p.beta) != c:
        raise ConfigurationError(
            f"affine params of length {len(p.gamma)}/{len(p.beta)} for {c} channels"
        )
    return p.gamma[None, :, None, None] * xhat + p.beta[None, :, None, None]


def affine_grad(xhat, dy):
    """``(dgamma, dbeta)`` for ``y = gamma * xhat + beta``."""
    return (dy * xhat).sum(axis=(0, 2, 3)), dy.sum(axis=(0, 2, 3))


@dataclass
class NormCache:
    kind: NormalizerKind
    x: np.ndarray
    xhat: np.ndarray
    std_nc: np.ndarray
    moments: Moments
    gamma: np.ndarray


def norm_forward(kind, x, affine, eps=DEFAULT_EPS, shard=None, moments=None):
    """Normalize + affine with training-time statistics.

    ``moments`` overrides the statistics (e.g. frozen BN inference stats);
    the returned cache then treats them as constants only if the caller
    does not backpropagate through it.
    """
    _check_eps(eps)
    x = as_tensor4(x)
    m = compute_moments(kind, x, shard) if moments is None else moments
    std = np.sqrt(m.var_nc() + eps)
    xhat = (x - m.mean_nc()[:, :, None, None]) / std[:, :, None, None]
    y = affine_transform(xhat, affine)
    return y, NormCache(kind, x, xhat, std, m, affine.gamma)


def norm_backward(cache, dy):
    """Full-chain gradients ``(dx, dgamma, dbeta)`` of normalize+affine."""
    dy = np.asarray(dy, dtype=DTYPE)
    if dy.shape != cache.x.shape:
        raise UsageError(f"stale cache: forward saw shape {cache.x.shape}, dy has {dy.shape}")
    dgamma, dbeta = affine_grad(cache.xhat, dy)
    dxhat = dy * cache.gamma[None, :, None, None]
    s = cache.std_nc
    dx = dxhat / s[:, :, None, None]
    dmean = -dxhat.sum(axis=(2, 3)) / s
    ds = -(dxhat * cache.xhat).sum(axis=(2, 3)) / s
    dvar = ds / (2.0 * s)
    dx = dx + moments_adjoint(cache.x, cache.moments, dmean, dvar)
    return dx, dgamma, dbeta


def wn_normalize(w, gamma=1.0):
    """Rescale every filter ``w_i`` to ``gamma * w_i / ||w_i||``."""
    w = np.asarray(w, dtype=DTYPE)
    norms = np.sqrt((w.reshape(w.shape[0], -1) ** 2).sum(axis=1))
    if np.any(norms == 0):
        raise NumericError(f"filter {int(np.argmin(norms))} has zero norm")
    return gamma * w / norms.reshape((-1,) + (1,) * (w.ndim - 1))


class BnRunningStats:
    """Inference-time BN statistics for one layer.

    ``batch_average`` accumulates per-batch moments and averages them on
    ``finalize``; ``moving_average`` keeps an exponential running estimate
    updated after each training step.
    """

    def __init__(self, channels, mode="batch_average", decay=0.9):
        if mode not in ("batch_average", "moving_average"):
            raise ConfigurationError(f"unknown BN statistics mode {mode!r}")
        if mode == "moving_average" and not 0.0 < decay < 1.0:
            raise ConfigurationError(f"decay must lie in (0, 1), got {decay}")
        self.mode = mode
        self.decay = decay
        self.channels = channels
        self.means = np.zeros(channels, dtype=DTYPE)
        self.vars = np.ones(channels, dtype=DTYPE) if mode == "moving_average" else np.zeros(channels, dtype=DTYPE)
        self.batches_seen = 0
        self.finalized = False
        self._sum_mean = None
        self._sum_var = None

    @staticmethod
    def _per_shard(m):
        c = m.shape[1]
        return m.means.reshape(-1, c), m.vars.reshape(-1, c)

    def reset(self):
        self._sum_mean = np.zeros(self.channels, dtype=DTYPE)
        self._sum_var = np.zeros(self.channels, dtype=DTYPE)
        self.batches_seen = 0
        self.finalized = False

    def accumulate(self, m):
        """Add one batch's BN moments (each shard counts as one batch)."""
        if self.mode != "batch_average":
            raise UsageError("accumulate() is only valid in batch_average mode")
        if self.finalized:
            raise UsageError("statistics already finalized; call reset() first")
        if self._sum_mean is None:
            self.reset()
        means, vars_ = self._per_shard(m)
        for mu, var in zip(means, vars_):
            self._sum_mean += mu
            self._sum_var += var
            self.batches_seen += 1

    def finalize(self):
        if self.batches_seen == 0:
            raise ConfigurationError("no batches accumulated")
        self.means = self._sum_mean / self.batches_seen
        self.vars = self._sum_var / self.batches_seen
        self.finalized = True

    def update(self, m):
        """Moving-average update from one training step's moments."""
        if self.mode != "moving_average":
            raise UsageError("update() is only valid in moving_average mode")
        means, vars_ = self._per_shard(m)
        d = self.decay
        self.means = d * self.means + (1.0 - d) * means.mean(axis=0)
        self.vars = d * self.vars + (1.0 - d) * vars_.mean(axis=0)
        self.batches_seen += 1

    @property
    def ready(self):
        return self.finalized if self.mode == "batch_average" else True

    def as_moments(self, shape):
        """Moments usable by :func:`normalize` for a tensor of ``shape``."""
        n, c = shape[:2]
        if c != self.channels:
            raise ConfigurationError(f"stats for {self.channels} channels, input has {c}")
        grouping = np.broadcast_to(np.arange(c), (n, c)).copy()
        return Moments(BN, self.means.copy(), self.vars.copy(), grouping, n * shape[2] * shape[3], tuple(shape))


def bn_inference_stats(stats, batch_moments, k_batches=100):
    """Fill ``stats`` from an iterable of per-batch BN :class:`Moments`.

    ``batch_average`` averages the first ``k_batches`` batches and
    finalizes; ``moving_average`` applies the running update per batch.
    Returns the resulting statistics as :class:`Moments` over channels.
    """
    if k_batches < 1:
        raise ConfigurationError("k_batches must be >= 1")
    if stats.mode == "batch_average":
        stats.reset()
    last = None
    for i, m in enumerate(batch_moments):
        if i >= k_batches:
            break
        if stats.mode == "batch_average":
            stats.accumulate(m)
        else:
            stats.update(m)
        last = m
    if last is None:
        raise ConfigurationError("no batches available for BN statistics")
    if stats.mode == "batch_average":
        stats.finalize()
    return stats.as_moments((1, stats.channels, 1, 1))
