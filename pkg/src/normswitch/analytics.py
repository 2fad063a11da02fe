"""Ratio trajectories and the measurements taken on them.

Trajectories store, per switchable layer and epoch, the mean and variance
ratio vectors expanded to the fixed (IN, LN, BN) order, with members
outside the layer's omega stored as 0. Divergences clamp probabilities
below at ``CLAMP`` before taking logs, so one-hot (hard) ratios yield a
finite value bounded by ``2 * ln(1 / CLAMP)``.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError, ParseError

CLAMP = 1e-12
MEMBERS = ("IN", "LN", "BN")

TRAJECTORY_HEADER = (
    "layer_id",
    "epoch",
    "rf",
    "lambda_mu_in",
    "lambda_mu_ln",
    "lambda_mu_bn",
    "lambda_sigma_in",
    "lambda_sigma_ln",
    "lambda_sigma_bn",
)


def _pair(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InputError(f"simplex length mismatch: {p.shape} vs {q.shape}")
    return np.maximum(p, CLAMP), np.maximum(q, CLAMP)


def kl_divergence(p, q):
    """KL(p || q) with both arguments clamped below at ``CLAMP``."""
    p, q = _pair(p, q)
    return float(np.sum(p * (np.log(p) - np.log(q))))


def sym_divergence(p, q):
    """KL(p || q) + KL(q || p)."""
    p, q = _pair(p, q)
    # Both KL terms combined; swapping the arguments negates both factors
    # exactly, so the result is bitwise symmetric.
    return float(np.sum((p - q) * (np.log(p) - np.log(q))))


# -- receptive fields ---------------------------------------------------------


@dataclass(frozen=True)
class LayerMeta:
    layer_id: int
    name: str
    rf: int
    kernel_size: int
    is_shortcut: bool = False


def receptive_fields(spec):
    """Receptive field and jump of every node of ``spec``.

    Returns ``{name: (rf, jump)}``. Convs and pools follow
    ``rf += (k - 1) * dilation * jump`` and ``jump *= stride``; an ``add``
    takes the maximum over its inputs; global pooling and linear heads are
    reported as ``None``.
    """
    out = {}
    for node in spec.topo_order():
        if node.op == "input":
            out[node.name] = (1, 1)
            continue
        ins = [out[s] for s in node.inputs]
        if any(v is None for v in ins) or node.op in ("gap", "linear"):
            out[node.name] = None
            continue
        if node.op in ("conv", "maxpool"):
            rf, jump = ins[0]
            out[node.name] = (rf + (node.kernel - 1) * node.dilation * jump, jump * node.stride)
        elif node.op == "add":
            out[node.name] = (max(v[0] for v in ins), max(v[1] for v in ins))
        else:
            out[node.name] = ins[0]
    return out


def layer_metas(spec):
    """:class:`LayerMeta` for every normalization node, in network order."""
    rfs = receptive_fields(spec)
    metas = []
    for i, node in enumerate(spec.norm_nodes()):
        conv = spec.by_name[node.inputs[0]]
        metas.append(LayerMeta(i, node.name, rfs[node.name][0], conv.kernel, node.shortcut))
    return metas


# -- RF binning ---------------------------------------------------------------


@dataclass(frozen=True)
class RfRange:
    """Half-open range ``[lo, hi)``; ``lo is None`` marks the catch-all range."""

    label: str
    lo: int = None
    hi: int = None

    @property
    def is_all(self):
        return self.lo is None

    def contains(self, rf):
        return self.is_all or self.lo <= rf < self.hi


ALL = RfRange("ALL")
DEFAULT_RF_RANGES = (
    RfRange("<49", 0, 49),
    RfRange("49-99", 49, 99),
    RfRange("99-199", 99, 199),
    RfRange("199-299", 199, 299),
    RfRange("299-427", 299, 428),
    ALL,
)


def check_ranges(ranges):
    bounded = sorted((r for r in ranges if not r.is_all), key=lambda r: r.lo)
    for r in bounded:
        if r.hi is None or r.hi <= r.lo:
            raise ConfigurationError(f"malformed RF range {r}")
    for a, b in zip(bounded, bounded[1:]):
        if b.lo < a.hi:
            raise ConfigurationError(f"RF ranges {a.label} and {b.label} overlap")
    labels = [r.label for r in ranges]
    if len(set(labels)) != len(labels):
        raise ConfigurationError("duplicate RF range labels")


def bin_by_rf(values, rfs, ranges=DEFAULT_RF_RANGES):
    """Mean of per-layer ``values`` within each RF range.

    ``values`` and ``rfs`` map layer id to value and receptive field.
    Ranges containing no layer are omitted from the result.
    """
    check_ranges(ranges)
    out = {}
    for r in ranges:
        sel = [values[k] for k in values if r.contains(rfs[k])]
        if sel:
            out[r.label] = math.fsum(sel) / len(sel)
    return out


# -- trajectories -------------------------------------------------------------


@dataclass
class RatioRecord:
    layer_id: int
    epoch: int
    rf: int
    lambda_mu: np.ndarray
    lambda_sigma: np.ndarray


@dataclass
class RatioTrajectory:
    records: list = field(default_factory=list)

    def add(self, layer_id, epoch, rf, lambda_mu, lambda_sigma):
        self.records.append(
            RatioRecord(int(layer_id), int(epoch), int(rf), np.asarray(lambda_mu, float), np.asarray(lambda_sigma, float))
        )

    def layers(self):
        return sorted({r.layer_id for r in self.records})

    def rfs(self):
        return {r.layer_id: r.rf for r in self.records}

    def by_layer(self):
        """``{layer_id: [records sorted by epoch]}``."""
        out = {}
        for r in self.records:
            out.setdefault(r.layer_id, []).append(r)
        for recs in out.values():
            recs.sort(key=lambda r: r.epoch)
        return out

    def epochs(self):
        return sorted({r.epoch for r in self.records})

    def final(self):
        return {lid: recs[-1] for lid, recs in self.by_layer().items()}

    def at_epoch(self, epoch):
        return {r.layer_id: r for r in self.records if r.epoch == epoch}


@dataclass
class DivergenceReport:
    """Per-layer divergence series ``{layer_id: [(epoch, value), ...]}``."""

    series: dict
    rfs: dict

    def final(self):
        return {lid: s[-1][1] for lid, s in self.series.items()}

    def epochs(self):
        return sorted({e for s in self.series.values() for e, _ in s})

    def at_epoch(self, epoch):
        return {lid: v for lid, s in self.series.items() for e, v in s if e == epoch}

    def binned(self, ranges=DEFAULT_RF_RANGES):
        """``{epoch: {range label: mean}}`` for every logged epoch."""
        return {e: bin_by_rf(self.at_epoch(e), self.rfs, ranges) for e in self.epochs()}


def mu_sigma_divergence(traj):
    """D(lambda_mu || lambda_sigma) for every layer and epoch of a run."""
    series = {
        lid: [(r.epoch, sym_divergence(r.lambda_mu, r.lambda_sigma)) for r in recs]
        for lid, recs in traj.by_layer().items()
    }
    return DivergenceReport(series, traj.rfs())


def trajectory_divergence(a, b, which="mu"):
    """Cross-run divergence of the ``which`` ratios, layer by layer.

    Both runs must cover the same layers. Layers are compared at matching
    epochs; when the two runs logged different epochs for a layer, only
    the final epochs are compared and the value is reported at ``a``'s
    final epoch.
    """
    if which not in ("mu", "sigma"):
        raise InputError(f"which must be 'mu' or 'sigma', got {which!r}")
    attr = "lambda_mu" if which == "mu" else "lambda_sigma"
    la, lb = a.by_layer(), b.by_layer()
    if set(la) != set(lb):
        only_a = sorted(set(la) - set(lb))
        only_b = sorted(set(lb) - set(la))
        raise InputError(f"trajectories cover different layers (only in first: {only_a}, only in second: {only_b})")
    common = sorted(la)
    series = {}
    for lid in common:
        ra = {r.epoch: r for r in la[lid]}
        rb = {r.epoch: r for r in lb[lid]}
        if set(ra) == set(rb):
            series[lid] = [(e, sym_divergence(getattr(ra[e], attr), getattr(rb[e], attr))) for e in sorted(ra)]
        else:
            fa, fb = la[lid][-1], lb[lid][-1]
            series[lid] = [(fa.epoch, sym_divergence(getattr(fa, attr), getattr(fb, attr)))]
    rfs = a.rfs()
    return DivergenceReport(series, {lid: rfs[lid] for lid in common})


# -- CSV ----------------------------------------------------------------------


def fmt(value):
    return f"{float(value):.12g}"


def export_trajectory(traj, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for r in traj.records:
            w.writerow([r.layer_id, r.epoch, r.rf] + [fmt(v) for v in r.lambda_mu] + [fmt(v) for v in r.lambda_sigma])


def import_trajectory(path, tolerance=1e-9):
    """Read a trajectory CSV; raises :class:`ParseError` with line numbers."""
    traj = RatioTrajectory()
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRAJECTORY_HEADER:
            raise ParseError(f"expected header {','.join(TRAJECTORY_HEADER)}", line=1)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(TRAJECTORY_HEADER):
                raise ParseError(f"expected {len(TRAJECTORY_HEADER)} fields, got {len(row)}", line=line)
            try:
                layer_id, epoch, rf = (int(v) for v in row[:3])
                vals = np.array([float(v) for v in row[3:]])
            except ValueError as exc:
                raise ParseError(str(exc), line=line) from None
            mu, sigma = vals[:3], vals[3:]
            for name, lam in (("lambda_mu", mu), ("lambda_sigma", sigma)):
                if np.any(lam < 0) or np.any(lam > 1) or abs(lam.sum() - 1.0) > tolerance:
                    raise ParseError(f"{name} {lam.tolist()} is not a simplex", line=line)
            if (layer_id, epoch) in seen:
                raise ParseError(f"duplicate record for layer {layer_id} epoch {epoch}", line=line)
            seen.add((layer_id, epoch))
            traj.add(layer_id, epoch, rf, mu, sigma)
    return traj
