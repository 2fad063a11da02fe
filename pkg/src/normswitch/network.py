"""Network specifications as small directed acyclic graphs.

A :class:`NetworkSpec` is a list of :class:`Node` records. Nodes name
their inputs, so residual shortcuts are expressed by an ``add`` node with
two inputs. The spec is pure data; :mod:`normswitch.model` executes it.
"""

import heapq
from dataclasses import dataclass, field

from .errors import ConfigurationError

OPS = ("input", "conv", "norm", "relu", "add", "maxpool", "gap", "linear")


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: tuple = ()
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    dilation: int = 1
    shortcut: bool = False


@dataclass
class NetworkSpec:
    name: str
    nodes: list
    input_shape: tuple = (3, 32, 32)
    num_classes: int = 10
    _order: list = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.by_name = {}
        for node in self.nodes:
            if node.op not in OPS:
                raise ConfigurationError(f"node {node.name!r}: unknown op {node.op!r}")
            if node.name in self.by_name:
                raise ConfigurationError(f"duplicate node name {node.name!r}")
            self.by_name[node.name] = node
        for node in self.nodes:
            for src in node.inputs:
                if src not in self.by_name:
                    raise ConfigurationError(f"node {node.name!r} reads unknown input {src!r}")

    def topo_order(self):
        """Nodes in dependency order, ties broken by position in ``nodes``."""
        if self._order is None:
            index = {n.name: i for i, n in enumerate(self.nodes)}
            indeg = {n.name: len(n.inputs) for n in self.nodes}
            consumers = {n.name: [] for n in self.nodes}
            for n in self.nodes:
                for src in n.inputs:
                    consumers[src].append(n.name)
            ready = [index[n] for n, d in indeg.items() if d == 0]
            heapq.heapify(ready)
            order = []
            while ready:
                node = self.nodes[heapq.heappop(ready)]
                order.append(node)
                for c in consumers[node.name]:
                    indeg[c] -= 1
                    if indeg[c] == 0:
                        heapq.heappush(ready, index[c])
            if len(order) != len(self.nodes):
                stuck = sorted(n for n, d in indeg.items() if d > 0)
                raise ConfigurationError(f"network spec {self.name!r} has a cycle through {stuck}")
            self._order = order
        return self._order

    def consumers(self, name):
        return [n for n in self.nodes if name in n.inputs]

    def norm_nodes(self):
        return [n for n in self.topo_order() if n.op == "norm"]

    def validate(self):
        """Check the conv -> norm -> activation structure and head placement."""
        order = self.topo_order()
        inputs = [n for n in order if n.op == "input"]
        if len(inputs) != 1:
            raise ConfigurationError(f"spec must have exactly one input node, found {len(inputs)}")
        pooled = set()
        for node in order:
            arity = {"input": 0, "add": 2}.get(node.op, 1)
            if len(node.inputs) != arity:
                raise ConfigurationError(f"node {node.name!r} ({node.op}) needs {arity} input(s), has {len(node.inputs)}")
            if node.op == "conv":
                if node.out_channels < 1 or node.kernel < 1 or node.stride < 1 or node.dilation < 1 or node.pad < 0:
                    raise ConfigurationError(f"conv {node.name!r} has invalid parameters")
                cons = self.consumers(node.name)
                if len(cons) != 1 or cons[0].op != "norm":
                    raise ConfigurationError(f"conv {node.name!r} must feed exactly one normalization layer")
            if node.op == "norm" and self.by_name[node.inputs[0]].op != "conv":
                raise ConfigurationError(f"normalization {node.name!r} must directly follow a conv")
            if node.op in ("gap", "linear") or any(src in pooled for src in node.inputs):
                pooled.add(node.name)
                if node.op == "norm":
                    raise ConfigurationError(f"normalization {node.name!r} placed after global pooling")
        heads = [n for n in order if n.op == "linear"]
        if heads and heads[-1].out_channels != self.num_classes:
            raise ConfigurationError("classifier width does not match num_classes")
        return self


class SpecBuilder:
    """Incremental construction of a :class:`NetworkSpec`."""

    def __init__(self, name, input_shape=(3, 32, 32), num_classes=10):
        self.name = name
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.nodes = [Node("input", "input")]
        self._counts = {}

    def _name(self, prefix):
        i = self._counts.get(prefix, 0)
        self._counts[prefix] = i + 1
        return f"{prefix}{i}"

    def add_node(self, op, inputs, **kw):
        node = Node(self._name(op), op, tuple(inputs), **kw)
        self.nodes.append(node)
        return node.name

    def conv_norm(self, src, out_channels, kernel, stride=1, pad=None, dilation=1, shortcut=False):
        """conv followed by its normalization layer; returns the norm's name."""
        if pad is None:
            pad = dilation * (kernel - 1) // 2
        c = self.add_node("conv", [src], out_channels=out_channels, kernel=kernel, stride=stride, pad=pad, dilation=dilation)
        return self.add_node("norm", [c], shortcut=shortcut)

    def relu(self, src):
        return self.add_node("relu", [src])

    def build(self):
        return NetworkSpec(self.name, list(self.nodes), self.input_shape, self.num_classes).validate()


def mini_resnet_spec(widths=(16, 32, 64), blocks_per_stage=2, input_shape=(3, 32, 32), num_classes=10):
    """Small CIFAR-style ResNet with basic blocks.

    3x3 stem, then one stage per entry of ``widths``; every stage after the
    first starts with a stride-2 block whose shortcut is a normalized 1x1
    projection. Global average pooling and a linear head close the net.
    """
    b = SpecBuilder("mini_resnet", input_shape, num_classes)
    x = b.relu(b.conv_norm("input", widths[0], 3))
    in_ch = widths[0]
    for si, width in enumerate(widths):
        for bi in range(blocks_per_stage):
            stride = 2 if (si > 0 and bi == 0) else 1
            h = b.relu(b.conv_norm(x, width, 3, stride))
            h = b.conv_norm(h, width, 3)
            if stride != 1 or in_ch != width:
                sc = b.conv_norm(x, width, 1, stride, shortcut=True)
            else:
                sc = x
            x = b.relu(b.add_node("add", [h, sc]))
            in_ch = width
    g = b.add_node("gap", [x])
    b.add_node("linear", [g], out_channels=num_classes)
    return b.build()


def resnet50_spec(input_shape=(3, 224, 224), num_classes=1000):
    """ResNet-50 with stride on the 3x3 conv of each bottleneck."""
    b = SpecBuilder("resnet50", input_shape, num_classes)
    x = b.relu(b.conv_norm("input", 64, 7, 2))
    x = b.add_node("maxpool", [x], kernel=3, stride=2, pad=1)
    for si, (width, blocks) in enumerate(zip((64, 128, 256, 512), (3, 4, 6, 3))):
        for bi in range(blocks):
            stride = 2 if (si > 0 and bi == 0) else 1
            out = width * 4
            h = b.relu(b.conv_norm(x, width, 1))
            h = b.relu(b.conv_norm(h, width, 3, stride))
            h = b.conv_norm(h, out, 1)
            sc = b.conv_norm(x, out, 1, stride, shortcut=True) if bi == 0 else x
            x = b.relu(b.add_node("add", [h, sc]))
    g = b.add_node("gap", [x])
    b.add_node("linear", [g], out_channels=num_classes)
    return b.build()


FIXTURES = {
    "mini_resnet": mini_resnet_spec,
    "resnet50": resnet50_spec,
}


def get_fixture(name, **kw):
    try:
        factory = FIXTURES[name]
    except KeyError:
        raise ConfigurationError(f"unknown network fixture {name!r}; choose from {sorted(FIXTURES)}") from None
    return factory(**kw)
