"""Executable networks built from a :class:`~normswitch.network.NetworkSpec`.

``build_network`` turns a spec into a :class:`Model` whose normalization
nodes are all of one choice: a uniform normalizer (BN, IN, LN, GN) or a
switchable layer (SN, SN_tied). Forward passes record a tape that
``Model.backward`` replays in reverse.
"""

import numpy as np

from . import tensor as T
from .analytics import layer_metas
from .errors import ConfigurationError, UsageError
from .normalizers import (
    DEFAULT_EPS,
    AffineParams,
    BnRunningStats,
    norm_backward,
    norm_forward,
    parse_kind,
)
from .switchable import MEMBERS, SNLayer, active_members, canonical_omega, sn_backward, sn_forward

NORM_CHOICES = ("BN", "IN", "LN", "GN", "SN", "SN_TIED")


class UniformNorm:
    """A single normalizer with its affine transform."""

    def __init__(self, kind, channels, eps=DEFAULT_EPS, bn_mode="batch_average", bn_decay=0.9, meta=None):
        self.kind = kind
        self.affine = AffineParams.identity(channels)
        self.eps = eps
        self.meta = meta
        self.bn_stats = BnRunningStats(channels, bn_mode, bn_decay) if kind.name == "BN" else None

    def forward(self, x, shard=None, training=True):
        frozen = None
        if self.bn_stats is not None and not training:
            if not self.bn_stats.ready:
                raise UsageError("BN inference statistics have not been estimated")
            frozen = self.bn_stats.as_moments(x.shape)
        return norm_forward(self.kind, x, self.affine, self.eps, shard, moments=frozen)

    def backward(self, cache, dy):
        dx, dgamma, dbeta = norm_backward(cache, dy)
        return dx, {"gamma": dgamma, "beta": dbeta}

    def bn_moments(self, cache):
        return cache.moments if self.bn_stats is not None else None

    def parameters(self, trainable=True):
        return [("gamma", self.affine.gamma), ("beta", self.affine.beta)]


class SwitchableNorm:
    """Model-level wrapper around :class:`~normswitch.switchable.SNLayer`."""

    def __init__(self, layer, bn_mode="batch_average", bn_decay=0.9):
        self.layer = layer
        self.meta = layer.meta
        channels = len(layer.affine.gamma)
        self.bn_stats = BnRunningStats(channels, bn_mode, bn_decay) if "BN" in layer.state.omega else None

    @property
    def state(self):
        return self.layer.state

    @property
    def affine(self):
        return self.layer.affine

    def forward(self, x, shard=None, training=True):
        frozen = None
        if not training and "BN" in active_members(self.state):
            if not self.bn_stats.ready:
                raise UsageError("BN inference statistics have not been estimated")
            frozen = self.bn_stats.as_moments(x.shape)
        return sn_forward(x, self.layer, shard, frozen_bn=frozen)

    def backward(self, cache, dy):
        dx, dl_mu, dl_sigma, dgamma, dbeta = sn_backward(cache, dy)
        grads = {"gamma": dgamma, "beta": dbeta}
        if self.state.hard is None:
            grads["logits_mu"] = dl_mu
            if not self.state.tied:
                grads["logits_sigma"] = dl_sigma
        return dx, grads

    def bn_moments(self, cache):
        return cache.moments.get("BN")

    def parameters(self, trainable=True):
        params = [("gamma", self.affine.gamma), ("beta", self.affine.beta)]
        if self.state.hard is None or not trainable:
            params.append(("logits_mu", self.state.logits_mu))
            if not self.state.tied:
                params.append(("logits_sigma", self.state.logits_sigma))
        return params


class Model:
    def __init__(self, spec, norm_choice, norms, weights):
        self.spec = spec
        self.norm_choice = norm_choice
        self.norms = norms
        self.weights = weights
        self.metas = [norms[n.name].meta for n in spec.norm_nodes()]

    # -- parameters ---------------------------------------------------------

    def named_parameters(self, trainable=True):
        """``[(name, array)]`` in network order; arrays are live references."""
        out = []
        for node in self.spec.topo_order():
            if node.op == "conv":
                out.append((f"{node.name}.weight", self.weights[f"{node.name}.weight"]))
            elif node.op == "linear":
                out.append((f"{node.name}.weight", self.weights[f"{node.name}.weight"]))
                out.append((f"{node.name}.bias", self.weights[f"{node.name}.bias"]))
            elif node.op == "norm":
                for pname, arr in self.norms[node.name].parameters(trainable):
                    out.append((f"{node.name}.{pname}", arr))
        return out

    def parameter_count(self, trainable=False):
        return int(sum(a.size for _, a in self.named_parameters(trainable)))

    def conv_parameter_count(self):
        return int(sum(self.weights[f"{n.name}.weight"].size for n in self.spec.nodes if n.op == "conv"))

    def switchable_layers(self):
        return [(n.name, self.norms[n.name]) for n in self.spec.norm_nodes() if isinstance(self.norms[n.name], SwitchableNorm)]

    def bn_layers(self):
        return [(n.name, self.norms[n.name]) for n in self.spec.norm_nodes() if self.norms[n.name].bn_stats is not None]

    # -- execution ----------------------------------------------------------

    def forward(self, x, shard=None, training=True):
        """Return ``(logits, tape)`` for a batch ``x`` of shape (n, c, h, w)."""
        x = T.as_tensor4(x)
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ConfigurationError(f"model expects inputs of shape {self.spec.input_shape}, got {x.shape[1:]}")
        values = {}
        tape = []
        for node in self.spec.topo_order():
            op = node.op
            if op == "input":
                out, cache = x, None
            else:
                a = values[node.inputs[0]]
                if op == "conv":
                    out, cols = T.conv2d_forward(a, self.weights[f"{node.name}.weight"], node.stride, node.pad, node.dilation)
                    cache = (a, cols)
                elif op == "norm":
                    out, cache = self.norms[node.name].forward(a, shard, training)
                elif op == "relu":
                    out, cache = T.relu(a), a
                elif op == "add":
                    out, cache = a + values[node.inputs[1]], None
                elif op == "gap":
                    out, cache = T.global_avg_pool(a).reshape(a.shape[0], -1), a
                elif op == "linear":
                    out = T.linear(a, self.weights[f"{node.name}.weight"], self.weights[f"{node.name}.bias"])
                    cache = a
                else:
                    raise ConfigurationError(f"op {op!r} is not executable")
            values[node.name] = out
            tape.append((node, cache))
        return values[self.spec.topo_order()[-1].name], tape

    def backward(self, tape, dlogits):
        """Gradients of ``sum(dlogits * logits)`` for all trainable parameters."""
        grads = {}
        upstream = {tape[-1][0].name: np.asarray(dlogits, dtype=T.DTYPE)}

        def push(name, g):
            if name in upstream:
                upstream[name] = upstream[name] + g
            else:
                upstream[name] = g

        for node, cache in reversed(tape):
            g = upstream.pop(node.name, None)
            if g is None or node.op == "input":
                continue
            op = node.op
            if op == "conv":
                w = self.weights[f"{node.name}.weight"]
                dx, dw = T.conv2d_grad(cache[0], w, g, node.stride, node.pad, node.dilation, cols=cache[1])
                grads[f"{node.name}.weight"] = dw
                push(node.inputs[0], dx)
            elif op == "norm":
                dx, pgrads = self.norms[node.name].backward(cache, g)
                for pname, pg in pgrads.items():
                    grads[f"{node.name}.{pname}"] = pg
                push(node.inputs[0], dx)
            elif op == "relu":
                push(node.inputs[0], T.relu_grad(cache, g))
            elif op == "add":
                push(node.inputs[0], g)
                push(node.inputs[1], g)
            elif op == "gap":
                push(node.inputs[0], T.global_avg_pool_grad(cache, g))
            elif op == "linear":
                dx, dw, db = T.linear_grad(cache, self.weights[f"{node.name}.weight"], g)
                grads[f"{node.name}.weight"] = dw
                grads[f"{node.name}.bias"] = db
                push(node.inputs[0], dx)
        return grads

    def bn_moments(self, tape):
        """``{norm name: Moments}`` of the BN statistics used in a training forward."""
        out = {}
        for node, cache in tape:
            if node.op == "norm":
                m = self.norms[node.name].bn_moments(cache)
                if m is not None:
                    out[node.name] = m
        return out

    def ratios(self):
        """``{layer_id: (lambda_mu, lambda_sigma)}`` over (IN, LN, BN)."""
        out = {}
        for _, layer in self.switchable_layers():
            st = layer.state
            out[layer.meta.layer_id] = (st.full(st.lambda_mu), st.full(st.lambda_sigma))
        return out


def _init_weights(spec, rng):
    weights = {}
    channels = {"input": spec.input_shape[0]}
    for node in spec.topo_order():
        if node.op == "input":
            continue
        c_in = channels[node.inputs[0]]
        if node.op == "conv":
            fan_in = c_in * node.kernel * node.kernel
            weights[f"{node.name}.weight"] = rng.standard_normal((node.out_channels, c_in, node.kernel, node.kernel)) * np.sqrt(2.0 / fan_in)
            channels[node.name] = node.out_channels
        elif node.op == "linear":
            weights[f"{node.name}.weight"] = rng.standard_normal((node.out_channels, c_in)) * np.sqrt(1.0 / c_in)
            weights[f"{node.name}.bias"] = np.zeros(node.out_channels)
            channels[node.name] = node.out_channels
        elif node.op == "add":
            a, b = (channels[s] for s in node.inputs)
            if a != b:
                raise ConfigurationError(f"add {node.name!r} merges {a} and {b} channels")
            channels[node.name] = a
        else:
            channels[node.name] = c_in
    return weights, channels


def build_network(
    spec,
    norm_choice="SN",
    *,
    omega=MEMBERS,
    gn_groups=4,
    eps=DEFAULT_EPS,
    sigma_aggregation="std",
    bn_mode="batch_average",
    bn_decay=0.9,
    seed=0,
):
    """Instantiate ``spec`` with every normalization node set to ``norm_choice``.

    gamma = 1, beta = 0 and all ratio logits 0 (uniform ratios).
    """
    spec.validate()
    choice = norm_choice.strip().upper()
    if choice not in NORM_CHOICES:
        raise ConfigurationError(f"norm_choice must be one of {NORM_CHOICES}, got {norm_choice!r}")
    if choice.startswith("SN"):
        omega = canonical_omega(omega)
    rng = np.random.default_rng(seed)
    weights, channels = _init_weights(spec, rng)
    metas = {m.name: m for m in layer_metas(spec)}
    norms = {}
    for node in spec.norm_nodes():
        c = channels[node.name]
        meta = metas[node.name]
        if choice.startswith("SN"):
            layer = SNLayer.create(c, omega, tied=(choice == "SN_TIED"), eps=eps, sigma_aggregation=sigma_aggregation, meta=meta)
            norms[node.name] = SwitchableNorm(layer, bn_mode, bn_decay)
        else:
            kind = parse_kind(choice, gn_groups)
            if kind.name == "GN" and c % kind.groups:
                raise ConfigurationError(f"GN with {kind.groups} groups does not divide {c} channels at {node.name}")
            norms[node.name] = UniformNorm(kind, c, eps, bn_mode, bn_decay, meta)
    return Model(spec, choice, norms, weights)

