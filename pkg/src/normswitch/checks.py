"""Finite-difference gradient checks for every backward kernel.

Each registered check builds small random inputs, evaluates the scalar
``sum(r * forward(...))`` for a fixed random ``r`` and compares the
analytic gradient of every input and parameter against central
differences. Kernels are looked up through their modules at call time,
so a patched (e.g. deliberately broken) backward is what gets checked.
"""

from dataclasses import dataclass

import numpy as np

from . import normalizers as N
from . import switchable as S
from . import tensor as T

TOLERANCE = 1e-5
MODULES = ("tensor", "normalizers", "switchable")


@dataclass
class CheckResult:
    op: str
    module: str
    max_rel_error: float
    checked: int
    tolerance: float
    error: str = ""

    @property
    def passed(self):
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error <= self.tolerance


def _worst(op, module, loss, inputs, analytic, tolerance, exclude=None):
    """Check ``analytic[k]`` against d loss / d inputs[k] for every key."""
    worst, count = 0.0, 0
    for key, value in inputs.items():

        def f(v, key=key):
            return loss({**inputs, key: v})

        mask = None if exclude is None else exclude.get(key)
        rep = T.finite_diff_check(f, value, analytic[key], tolerance, exclude=mask)
        worst = max(worst, rep.max_rel_error)
        count += rep.checked
    return CheckResult(op, module, worst, count, tolerance)


# -- tensor -------------------------------------------------------------------


def check_conv2d(rng, tolerance):
    results = []
    for stride, pad, dilation in ((1, 1, 1), (2, 1, 1), (1, 2, 2)):
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        out_shape = T.conv2d(x, w, stride, pad, dilation).shape
        r = rng.standard_normal(out_shape)

        def loss(p):
            return float(np.sum(r * T.conv2d(p["x"], p["w"], stride, pad, dilation)))

        dx, dw = T.conv2d_grad(x, w, r, stride, pad, dilation)
        results.append(_worst("conv2d", "tensor", loss, {"x": x, "w": w}, {"x": dx, "w": dw}, tolerance))
    return _merge("conv2d", results)


def check_relu(rng, tolerance):
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5
    r = rng.standard_normal(x.shape)
    return _worst(
        "relu", "tensor", lambda p: float(np.sum(r * T.relu(p["x"]))), {"x": x}, {"x": T.relu_grad(x, r)}, tolerance
    )


def check_global_avg_pool(rng, tolerance):
    x = rng.standard_normal((2, 3, 4, 5))
    r = rng.standard_normal((2, 3, 1, 1))
    return _worst(
        "global_avg_pool",
        "tensor",
        lambda p: float(np.sum(r * T.global_avg_pool(p["x"]))),
        {"x": x},
        {"x": T.global_avg_pool_grad(x, r)},
        tolerance,
    )


def check_linear(rng, tolerance):
    x = rng.standard_normal((3, 5))
    w = rng.standard_normal((4, 5))
    b = rng.standard_normal(4)
    r = rng.standard_normal((3, 4))
    dx, dw, db = T.linear_grad(x, w, r)
    return _worst(
        "linear",
        "tensor",
        lambda p: float(np.sum(r * T.linear(p["x"], p["w"], p["b"]))),
        {"x": x, "w": w, "b": b},
        {"x": dx, "w": dw, "b": db},
        tolerance,
    )


def check_softmax_cross_entropy(rng, tolerance):
    z = rng.standard_normal((4, 6))
    y = rng.integers(0, 6, size=4)
    _, dz = T.softmax_cross_entropy(z, y)
    return _worst(
        "softmax_cross_entropy",
        "tensor",
        lambda p: float(np.sum(T.softmax_cross_entropy(p["z"], y)[0])),
        {"z": z},
        {"z": dz},
        tolerance,
    )


# -- normalizers --------------------------------------------------------------


def _norm_check(op, kind, shard, shape, rng, tolerance):
    x = rng.standard_normal(shape) * 2.0 + 0.5
    c = shape[1]
    gamma = rng.uniform(0.5, 1.5, c)
    beta = rng.standard_normal(c)
    r = rng.standard_normal(shape)

    def loss(p):
        y, _ = N.norm_forward(kind, p["x"], N.AffineParams(p["gamma"], p["beta"]), N.DEFAULT_EPS, shard)
        return float(np.sum(r * y))

    _, cache = N.norm_forward(kind, x, N.AffineParams(gamma, beta), N.DEFAULT_EPS, shard)
    dx, dg, db = N.norm_backward(cache, r)
    inputs = {"x": x, "gamma": gamma, "beta": beta}
    return _worst(op, "normalizers", loss, inputs, {"x": dx, "gamma": dg, "beta": db}, tolerance)


def check_bn(rng, tolerance):
    return _norm_check("BN", N.BN, None, (4, 3, 3, 3), rng, tolerance)


def check_bn_sharded(rng, tolerance):
    return _norm_check("BN(2,2)", N.BN, N.ShardConfig(2, 2), (4, 3, 3, 3), rng, tolerance)


def check_in(rng, tolerance):
    return _norm_check("IN", N.IN, None, (2, 3, 3, 4), rng, tolerance)


def check_ln(rng, tolerance):
    return _norm_check("LN", N.LN, None, (2, 3, 3, 4), rng, tolerance)


def check_gn(rng, tolerance):
    return _norm_check("GN(2)", N.GN(2), None, (2, 4, 3, 3), rng, tolerance)


# -- switchable ---------------------------------------------------------------


def _sn_check(op, rng, tolerance, omega=S.MEMBERS, tied=False, hard=None, aggregation="std", shard=None):
    shape = (4, 4, 3, 3)
    x = rng.standard_normal(shape) * 1.5 + 0.3
    k = len(S.canonical_omega(omega))
    inputs = {
        "x": x,
        "logits_mu": rng.standard_normal(k),
        "gamma": rng.uniform(0.5, 1.5, shape[1]),
        "beta": rng.standard_normal(shape[1]),
    }
    if not tied:
        inputs["logits_sigma"] = rng.standard_normal(k)
    r = rng.standard_normal(shape)

    def layer_of(p):
        state = S.RatioState(omega, tied, p["logits_mu"], p.get("logits_sigma"))
        if hard is not None:
            state = S.apply_hard(state, hard)
        return S.SNLayer(state, N.AffineParams(p["gamma"], p["beta"]), sigma_aggregation=aggregation)

    def loss(p):
        return float(np.sum(r * S.sn_forward(p["x"], layer_of(p), shard)[0]))

    _, cache = S.sn_forward(x, layer_of(inputs), shard)
    dx, dlm, dls, dg, db = S.sn_backward(cache, r)
    analytic = {"x": dx, "logits_mu": dlm, "gamma": dg, "beta": db}
    if not tied:
        analytic["logits_sigma"] = dls
    if hard is not None:
        # frozen logits: the forward ignores them, so both sides must be zero
        analytic["logits_mu"] = np.zeros(k) if dlm is None else dlm
        if not tied:
            analytic["logits_sigma"] = np.zeros(k) if dls is None else dls
    return _worst(op, "switchable", loss, inputs, analytic, tolerance)


def check_sn(rng, tolerance):
    return _sn_check("SN", rng, tolerance)


def check_sn_var(rng, tolerance):
    return _sn_check("SN(var)", rng, tolerance, aggregation="var")


def check_sn_sharded(rng, tolerance):
    return _sn_check("SN(2,2)", rng, tolerance, shard=N.ShardConfig(2, 2))


def check_sn_tied(rng, tolerance):
    return _sn_check("SN_tied", rng, tolerance, tied=True)


def check_sn_subset(rng, tolerance):
    return _sn_check("SN{LN,BN}", rng, tolerance, omega=("LN", "BN"))


def check_sn_hard(rng, tolerance):
    return _sn_check("SN_hard", rng, tolerance, hard=S.HardRatio("LN", "BN"))


def check_softmax_ratios(rng, tolerance):
    z = rng.standard_normal(3)
    r = rng.standard_normal(3)
    lam = S.softmax_ratios(z)
    return _worst(
        "softmax_ratios",
        "switchable",
        lambda p: float(np.sum(r * S.softmax_ratios(p["z"]))),
        {"z": z},
        {"z": S.softmax_vjp(lam, r)},
        tolerance,
    )


def _merge(op, results):
    return CheckResult(
        op,
        results[0].module,
        max(r.max_rel_error for r in results),
        sum(r.checked for r in results),
        results[0].tolerance,
    )


REGISTRY = {
    "tensor": (check_conv2d, check_relu, check_global_avg_pool, check_linear, check_softmax_cross_entropy),
    "normalizers": (check_bn, check_bn_sharded, check_in, check_ln, check_gn),
    "switchable": (
        check_softmax_ratios,
        check_sn,
        check_sn_var,
        check_sn_sharded,
        check_sn_tied,
        check_sn_subset,
        check_sn_hard,
    ),
}


def run_checks(module="all", seed=0, tolerance=TOLERANCE):
    """Run the registered checks for ``module`` (or ``"all"``) in order."""
    if module == "all":
        names = MODULES
    elif module in REGISTRY:
        names = (module,)
    else:
        raise ValueError(f"unknown gradcheck module {module!r}; choose all, {', '.join(MODULES)}")
    rng = np.random.default_rng(seed)
    results = []
    for name in names:
        for check in REGISTRY[name]:
            try:
                results.append(check(rng, tolerance))
            except ArithmeticError as exc:
                results.append(CheckResult(check.__name__[6:], name, float("inf"), 0, tolerance, str(exc)))
    return results
