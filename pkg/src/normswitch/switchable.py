"""Switchable Normalization.

A switchable layer normalizes each pixel by a mixture of the statistics
of several normalizers::

    mu    = sum_z lam_mu[z]    * mu_z
    sigma = sum_z lam_sigma[z] * sigma_z          (sigma_aggregation="std")
    sigma = sqrt(sum_z lam_sigma[z] * var_z + eps)  (sigma_aggregation="var")
    y     = gamma * (h - mu) / sigma + beta

The two ratio vectors are softmaxes of per-layer logits shared by every
channel and pixel of the layer. In "std" mode each ``sigma_z`` already
carries ``eps`` (``sqrt(var_z + eps)``) so the denominator stays positive.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, UsageError
from .normalizers import (
    BN,
    DEFAULT_EPS,
    IN,
    LN,
    AffineParams,
    BnRunningStats,
    affine_grad,
    affine_transform,
    compute_moments,
    moments_adjoint,
)
from .tensor import DTYPE, as_tensor4

MEMBERS = ("IN", "LN", "BN")
KINDS = {"IN": IN, "LN": LN, "BN": BN}
AGGREGATIONS = ("std", "var")
HARD_INIT_LOGIT = 10.0


def canonical_omega(members):
    """Order a collection of member names as (IN, LN, BN), validating it."""
    names = {str(m).strip().upper() for m in members if str(m).strip()}
    unknown = names - set(MEMBERS)
    if unknown:
        raise ConfigurationError(f"unknown normalizer(s) in omega: {sorted(unknown)}")
    if not names:
        raise ConfigurationError("omega must contain at least one normalizer")
    return tuple(m for m in MEMBERS if m in names)


def softmax_ratios(logits):
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.size == 0:
        raise ConfigurationError("softmax of an empty logit vector")
    e = np.exp(logits - logits.max())
    return e / e.sum()


def softmax_vjp(lam, dlam):
    """Vector-Jacobian product of the softmax at output ``lam``."""
    return lam * (dlam - np.dot(lam, dlam))


@dataclass(frozen=True)
class HardRatio:
    choice_mu: str
    choice_sigma: str


class RatioState:
    """Learnable ratio logits of one switchable layer.

    In tied mode ``logits_sigma`` is the very same array as ``logits_mu``.
    Once ``hard`` is set the ratios are one-hot and the logits are frozen.
    """

    def __init__(self, omega=MEMBERS, tied=False, logits_mu=None, logits_sigma=None, hard=None):
        self.omega = canonical_omega(omega)
        k = len(self.omega)
        self.tied = bool(tied)
        self.logits_mu = np.zeros(k, dtype=DTYPE) if logits_mu is None else np.array(logits_mu, dtype=DTYPE)
        if self.tied:
            self._logits_sigma = None
        else:
            self._logits_sigma = (
                np.zeros(k, dtype=DTYPE) if logits_sigma is None else np.array(logits_sigma, dtype=DTYPE)
            )
        for arr in (self.logits_mu, self.logits_sigma):
            if arr.shape != (k,):
                raise ConfigurationError(f"expected {k} logits for omega {self.omega}, got shape {arr.shape}")
        self.hard = None
        if hard is not None:
            for choice in (hard.choice_mu, hard.choice_sigma):
                if choice not in self.omega:
                    raise ConfigurationError(f"hard choice {choice} not in omega {self.omega}")
            self.hard = hard

    @property
    def logits_sigma(self):
        return self.logits_mu if self.tied else self._logits_sigma

    @logits_sigma.setter
    def logits_sigma(self, value):
        if self.tied:
            self.logits_mu = value
        else:
            self._logits_sigma = value

    def _one_hot(self, choice):
        v = np.zeros(len(self.omega), dtype=DTYPE)
        v[self.omega.index(choice)] = 1.0
        return v

    @property
    def lambda_mu(self):
        if self.hard is not None:
            return self._one_hot(self.hard.choice_mu)
        return softmax_ratios(self.logits_mu)

    @property
    def lambda_sigma(self):
        if self.hard is not None:
            return self._one_hot(self.hard.choice_sigma)
        return softmax_ratios(self.logits_sigma)

    def full(self, lam):
        """Expand a ratio vector over ``omega`` to (IN, LN, BN) with zeros."""
        out = np.zeros(len(MEMBERS), dtype=DTYPE)
        for name, v in zip(self.omega, lam):
            out[MEMBERS.index(name)] = v
        return out

    def copy(self):
        return RatioState(
            self.omega,
            self.tied,
            self.logits_mu.copy(),
            None if self.tied else self._logits_sigma.copy(),
            self.hard,
        )

    def __repr__(self):
        return (
            f"RatioState(omega={self.omega}, tied={self.tied}, hard={self.hard}, "
            f"lambda_mu={np.round(self.lambda_mu, 4)}, lambda_sigma={np.round(self.lambda_sigma, 4)})"
        )


def harden(state):
    """Argmax of each ratio vector; ties go to the earlier member."""
    mu = int(np.argmax(state.lambda_mu))
    sigma = int(np.argmax(state.lambda_sigma))
    return HardRatio(state.omega[mu], state.omega[sigma])


def apply_hard(state, hard):
    """A copy of ``state`` whose ratios are frozen to ``hard``."""
    new = state.copy()
    return RatioState(new.omega, new.tied, new.logits_mu, None if new.tied else new.logits_sigma, hard)


def hard_init(omega, hard, tied=False, magnitude=HARD_INIT_LOGIT):
    """Trainable state whose logits start at +L on the choice and -L elsewhere."""
    omega = canonical_omega(omega)

    def logits(choice):
        v = np.full(len(omega), -magnitude, dtype=DTYPE)
        v[omega.index(choice)] = magnitude
        return v

    if tied:
        return RatioState(omega, True, logits(hard.choice_mu))
    return RatioState(omega, False, logits(hard.choice_mu), logits(hard.choice_sigma))


def restrict_omega(state, subset):
    """Drop members outside ``subset``; surviving logits keep their values."""
    subset = canonical_omega(subset)
    missing = set(subset) - set(state.omega)
    if missing:
        raise ConfigurationError(f"subset {subset} not contained in omega {state.omega}")
    keep = [state.omega.index(m) for m in subset]
    hard = state.hard
    if hard is not None and (hard.choice_mu not in subset or hard.choice_sigma not in subset):
        hard = None
    return RatioState(
        subset,
        state.tied,
        state.logits_mu[keep],
        None if state.tied else state.logits_sigma[keep],
        hard,
    )


@dataclass
class SNLayer:
    state: RatioState
    affine: AffineParams
    eps: float = DEFAULT_EPS
    sigma_aggregation: str = "std"
    meta: object = None
    bn_stats: BnRunningStats = None

    def __post_init__(self):
        if self.sigma_aggregation not in AGGREGATIONS:
            raise ConfigurationError(f"sigma_aggregation must be one of {AGGREGATIONS}, got {self.sigma_aggregation!r}")
        if self.eps < 0:
            raise ConfigurationError(f"eps must be non-negative, got {self.eps}")

    @classmethod
    def create(cls, channels, omega=MEMBERS, tied=False, **kw):
        return cls(RatioState(omega, tied), AffineParams.identity(channels), **kw)


@dataclass
class SNCache:
    x: np.ndarray
    xhat: np.ndarray
    s: np.ndarray
    lam_mu: np.ndarray
    lam_sigma: np.ndarray
    moments: dict
    sigmas: dict = field(default_factory=dict)
    gamma: np.ndarray = None
    tied: bool = False
    hard: bool = False
    aggregation: str = "std"
    omega: tuple = ()


def active_members(state):
    """Members whose moments the forward pass must compute."""
    if state.hard is None:
        return state.omega
    chosen = {state.hard.choice_mu, state.hard.choice_sigma}
    return tuple(m for m in state.omega if m in chosen)


def sn_forward(x, layer, shard=None, frozen_bn=None):
    """Switchable normalization forward pass.

    ``frozen_bn`` (a :class:`Moments` over channels) replaces the batch
    statistics of the BN member, as done at inference.
    """
    x = as_tensor4(x)
    state = layer.state
    if not state.omega:
        raise ConfigurationError("switchable layer with empty omega")
    lam_mu = state.lambda_mu
    lam_sigma = state.lambda_sigma
    members = active_members(state)
    moments = {}
    for z in members:
        if z == "BN" and frozen_bn is not None:
            moments[z] = frozen_bn
        else:
            moments[z] = compute_moments(KINDS[z], x, shard)

    mu = 0.0
    for z in members:
        mu = mu + lam_mu[state.omega.index(z)] * moments[z].mean_nc()

    sigmas = {}
    if layer.sigma_aggregation == "std":
        s = 0.0
        for z in members:
            sigmas[z] = np.sqrt(moments[z].var_nc() + layer.eps)
            s = s + lam_sigma[state.omega.index(z)] * sigmas[z]
    else:
        v = 0.0
        for z in members:
            v = v + lam_sigma[state.omega.index(z)] * moments[z].var_nc()
        s = np.sqrt(v + layer.eps)

    s = np.broadcast_to(s, x.shape[:2])
    mu = np.broadcast_to(mu, x.shape[:2])
    xhat = (x - mu[:, :, None, None]) / s[:, :, None, None]
    y = affine_transform(xhat, layer.affine)
    cache = SNCache(
        x=x,
        xhat=xhat,
        s=s,
        lam_mu=lam_mu,
        lam_sigma=lam_sigma,
        moments=moments,
        sigmas=sigmas,
        gamma=layer.affine.gamma,
        tied=state.tied,
        hard=state.hard is not None,
        aggregation=layer.sigma_aggregation,
        omega=state.omega,
    )
    return y, cache


def sn_backward(cache, dy):
    """Gradients ``(dx, dlogits_mu, dlogits_sigma, dgamma, dbeta)``.

    In tied mode the single shared logit vector receives the sum of both
    ratio gradients and is returned as ``dlogits_mu``; ``dlogits_sigma`` is
    then ``None``. Hard mode returns zero logit gradients.
    """
    dy = np.asarray(dy, dtype=DTYPE)
    if dy.shape != cache.x.shape:
        raise UsageError(f"stale cache: forward saw shape {cache.x.shape}, dy has {dy.shape}")
    omega = cache.omega
    dgamma, dbeta = affine_grad(cache.xhat, dy)
    dxhat = dy * cache.gamma[None, :, None, None]
    s = cache.s
    dx = dxhat / s[:, :, None, None]
    dmu = -dxhat.sum(axis=(2, 3)) / s
    ds = -(dxhat * cache.xhat).sum(axis=(2, 3)) / s

    dlam_mu = np.zeros(len(omega), dtype=DTYPE)
    dlam_sigma = np.zeros(len(omega), dtype=DTYPE)
    if cache.aggregation == "var":
        dv = ds / (2.0 * s)
    for z, m in cache.moments.items():
        i = omega.index(z)
        dlam_mu[i] = np.sum(dmu * m.mean_nc())
        dmean_z = cache.lam_mu[i] * dmu
        if cache.aggregation == "std":
            sig = cache.sigmas[z]
            dlam_sigma[i] = np.sum(ds * sig)
            dvar_z = cache.lam_sigma[i] * ds / (2.0 * sig)
        else:
            dlam_sigma[i] = np.sum(dv * m.var_nc())
            dvar_z = cache.lam_sigma[i] * dv
        dx = dx + moments_adjoint(cache.x, m, dmean_z, dvar_z)

    if cache.hard:
        zeros = np.zeros(len(omega), dtype=DTYPE)
        return dx, zeros, None if cache.tied else zeros.copy(), dgamma, dbeta
    g_mu = softmax_vjp(cache.lam_mu, dlam_mu)
    g_sigma = softmax_vjp(cache.lam_sigma, dlam_sigma)
    if cache.tied:
        return dx, g_mu + g_sigma, None, dgamma, dbeta
    return dx, g_mu, g_sigma, dgamma, dbeta
