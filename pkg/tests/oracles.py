"""Independent reference implementations used as test oracles.

Everything here is written with explicit Python loops and index sets so
that it shares no code path with the vectorised package kernels.
"""

import itertools
import math

import numpy as np

from normswitch.network import SpecBuilder


def conv2d_loops(x, w, stride=1, pad=0, dilation=1):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b, f, i, j in itertools.product(range(n), range(o), range(oh), range(ow)):
        acc = 0.0
        for ch, di, dj in itertools.product(range(c), range(kh), range(kw)):
            r = i * stride - pad + di * dilation
            s = j * stride - pad + dj * dilation
            if 0 <= r < h and 0 <= s < wd:
                acc += x[b, ch, r, s] * w[f, ch, di, dj]
        out[b, f, i, j] = acc
    return out


def stat_set(kind, shape, b, ch, groups=None, shards=1):
    """Indices (n, c, h, w) pooled by ``kind`` for the cell (b, ch)."""
    n, c, h, w = shape
    hw = [(i, j) for i in range(h) for j in range(w)]
    if kind == "IN":
        return [(b, ch, i, j) for i, j in hw]
    if kind == "LN":
        return [(b, k, i, j) for k in range(c) for i, j in hw]
    if kind == "GN":
        size = c // groups
        g = ch // size
        return [(b, k, i, j) for k in range(g * size, (g + 1) * size) for i, j in hw]
    if kind == "BN":
        m = n // shards
        s = b // m
        return [(k, ch, i, j) for k in range(s * m, (s + 1) * m) for i, j in hw]
    raise ValueError(kind)


def pooled_moments(x, idx):
    vals = [x[t] for t in idx]
    mean = math.fsum(vals) / len(vals)
    var = math.fsum((v - mean) ** 2 for v in vals) / len(vals)
    return mean, var


def switchable_loops(x, omega, lam_mu, lam_sigma, gamma, beta, eps, aggregation="std", shards=1):
    """Element-by-element evaluation of the switchable normalization formula."""
    n, c, h, w = x.shape
    out = np.zeros_like(x)
    for b, ch in itertools.product(range(n), range(c)):
        stats = {z: pooled_moments(x, stat_set(z, x.shape, b, ch, shards=shards)) for z in omega}
        mu = math.fsum(lam_mu[i] * stats[z][0] for i, z in enumerate(omega))
        if aggregation == "std":
            sd = math.fsum(lam_sigma[i] * math.sqrt(stats[z][1] + eps) for i, z in enumerate(omega))
        else:
            sd = math.sqrt(math.fsum(lam_sigma[i] * stats[z][1] for i, z in enumerate(omega)) + eps)
        for i, j in itertools.product(range(h), range(w)):
            out[b, ch, i, j] = gamma[ch] * (x[b, ch, i, j] - mu) / sd + beta[ch]
    return out


def kl_terms(p, q, clamp=1e-12):
    total = 0.0
    for a, b in zip(p, q):
        a, b = max(a, clamp), max(b, clamp)
        total += a * math.log(a / b)
    return total


def rf_by_marking(spec, length=None):
    """Receptive field of every norm node by forward-propagating 1-D deltas.

    For each input position a delta is pushed through the network (all
    weights positive, every op reduced to its 1-D footprint) and the
    span of positions reaching the centre output of each norm node is its
    receptive field (dilated taps leave holes, so the span is not a count).
    """
    order = spec.topo_order()
    length = length or 1024

    def out_len(node, size):
        return (size + 2 * node.pad - node.dilation * (node.kernel - 1) - 1) // node.stride + 1

    sizes = {}
    for node in order:
        if node.op == "input":
            sizes[node.name] = length
        elif node.op in ("conv", "maxpool"):
            sizes[node.name] = out_len(node, sizes[node.inputs[0]])
        elif node.op in ("gap", "linear"):
            sizes[node.name] = None
        else:
            sizes[node.name] = sizes[node.inputs[0]]

    # row k holds the marks of a delta placed at input position k
    marks = {}
    for node in order:
        if node.op == "input":
            marks[node.name] = np.eye(length, dtype=bool)
        elif node.op in ("gap", "linear"):
            continue
        elif node.op in ("conv", "maxpool"):
            inp = np.pad(marks[node.inputs[0]], ((0, 0), (node.pad, node.pad)))
            n_out = sizes[node.name]
            v = np.zeros((length, n_out), dtype=bool)
            for t in range(node.kernel):
                lo = t * node.dilation
                v |= inp[:, lo:lo + node.stride * (n_out - 1) + 1:node.stride]
            marks[node.name] = v
        elif node.op == "add":
            v = marks[node.inputs[0]].copy()
            for src in node.inputs[1:]:
                v |= marks[src]
            marks[node.name] = v
        else:
            marks[node.name] = marks[node.inputs[0]]
    out = {}
    for n in order:
        if n.op == "norm":
            hit = np.flatnonzero(marks[n.name][:, sizes[n.name] // 2])
            out[n.name] = int(hit[-1] - hit[0] + 1)
    return out


def random_spec(rng):
    """Small chain of conv/residual blocks with random kernel, dilation and stride."""
    b = SpecBuilder("rand", (3, 64, 64))
    x = "input"
    width = 4
    for _ in range(rng.integers(2, 6)):
        k = int(rng.choice([1, 3, 5]))
        d = int(rng.choice([1, 2])) if k > 1 else 1
        s = int(rng.choice([1, 2], p=[0.7, 0.3]))
        if rng.random() < 0.4:
            h = b.relu(b.conv_norm(x, width, k, s, dilation=d))
            h = b.conv_norm(h, width, 3)
            sc = b.conv_norm(x, width, 1, s, shortcut=True) if s > 1 else x
            x = b.relu(b.add_node("add", [h, sc]))
        else:
            x = b.relu(b.conv_norm(x, width, k, s, dilation=d))
    g = b.add_node("gap", [x])
    b.add_node("linear", [g], out_channels=10)
    return b.build()
