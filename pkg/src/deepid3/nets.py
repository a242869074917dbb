"""The three architectures and a small chain-graph executor.

Each network is a single chain of layer nodes. Supervision heads branch off
named nodes; the node named by ``final_feature_layer`` yields the face
feature. Toy-scale geometry comes from :class:`ScaleConfig`:

* ``deepid2plus``: conv-pool, conv-pool, local-pool, local, fc
* ``deepid3_net1``: (conv, conv, pool) x3, then (local, local, pool); the
  second local layer is the feature layer
* ``deepid3_net2``: (conv, conv, pool) x2, inception x3, pool,
  inception x2, pool, fc
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import ShapeError
from .supervision import SupervisionHead
from .tensor import Rng, as_tensor, init_he

WEIGHTED_KINDS = ("conv", "local", "inception", "fc")
ARCHITECTURES = ("deepid2plus", "deepid3_net1", "deepid3_net2")


@dataclass
class ScaleConfig:
    height: int = 32
    width: int = 32
    channels: int = 1
    widths: tuple = (8, 16, 24, 32)
    feature_dim: int = 64
    num_identities: int = 10
    dropout: float = 0.0
    head_dim: int | None = None
    verif_weight: float = 0.05
    margin: float = 1.0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 4:
            raise ShapeError(f"expected 4 stage widths, got {len(self.widths)}")
        for name in ("height", "width", "channels", "feature_dim", "num_identities"):
            if getattr(self, name) < 1:
                raise ShapeError(f"ScaleConfig.{name} must be positive")
        if any(w < 1 for w in self.widths):
            raise ShapeError("stage widths must be positive")
        if self.num_identities < 2:
            raise ShapeError("need at least 2 identities")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def projection_dim(self):
        return self.head_dim or self.feature_dim


@dataclass(frozen=True)
class PoolSpec:
    window: int = 2
    stride: int = 2
    pad: int = 0

    def output_shape(self, c, h, w):
        if self.window > h + 2 * self.pad or self.window > w + 2 * self.pad:
            raise ShapeError(f"pool window {self.window} exceeds input extent {h}x{w}")
        oh = (h + 2 * self.pad - self.window) // self.stride + 1
        ow = (w + 2 * self.pad - self.window) // self.stride + 1
        return (c, oh, ow)


@dataclass(frozen=True)
class FcSpec:
    in_dim: int
    out_dim: int

    @property
    def weight_shape(self):
        return (self.out_dim, self.in_dim)

    def num_params(self, h=None, w=None):
        return self.out_dim * (self.in_dim + 1)


@dataclass
class LayerNode:
    name: str
    kind: str
    spec: object
    in_shape: tuple
    out_shape: tuple
    relu: bool = True
    dropout: float = 0.0

    @property
    def weighted(self):
        return self.kind in WEIGHTED_KINDS

    def param_shapes(self):
        n, s = self.name, self.spec
        if self.kind == "conv":
            return {f"{n}.w": s.weight_shape, f"{n}.b": (s.out_channels,)}
        if self.kind == "local":
            return {f"{n}.w": s.weight_shape, f"{n}.b": s.bias_shape}
        if self.kind == "fc":
            return {f"{n}.w": s.weight_shape, f"{n}.b": (s.out_dim,)}
        if self.kind == "inception":
            return {f"{n}.{k}": v for k, v in L.inception_param_shapes(s).items()}
        return {}

    def num_params(self):
        return sum(int(np.prod(shape)) for shape in self.param_shapes().values())


@dataclass
class NetworkGraph:
    arch: str
    cfg: ScaleConfig
    nodes: list
    params: dict = field(default_factory=dict)
    heads: list = field(default_factory=list)
    final_feature_layer: str = ""

    def node(self, name):
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    @property
    def feature_layers(self):
        """Weight-bearing non-linear layers of the trunk, in order."""
        return [n for n in self.nodes if n.weighted]

    def kinds(self):
        return [n.kind for n in self.nodes]

    def num_params(self, include_heads=True):
        total = sum(n.num_params() for n in self.nodes)
        if include_heads:
            total += sum(int(np.prod(s)) for h in self.heads for s in h.param_shapes().values())
        return total

    def param_shapes(self):
        shapes = {}
        for n in self.nodes:
            shapes.update(n.param_shapes())
        for h in self.heads:
            shapes.update(h.param_shapes())
        return shapes

    def validate(self):
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ShapeError("duplicate layer names")
        if self.final_feature_layer not in names:
            raise ShapeError(f"final feature layer '{self.final_feature_layer}' not in graph")
        for h in self.heads:
            if h.attach_point not in names:
                raise ShapeError(f"head '{h.name}' attaches to unknown layer '{h.attach_point}'")
        for pname, shape in self.param_shapes().items():
            if pname not in self.params:
                raise ShapeError(f"parameter '{pname}' missing from store")
            if tuple(self.params[pname].shape) != tuple(shape):
                raise ShapeError(f"parameter '{pname}' has shape {self.params[pname].shape}, expected {shape}")
        prev = (self.cfg.channels, self.cfg.height, self.cfg.width)
        for n in self.nodes:
            if tuple(n.in_shape) != tuple(prev):
                raise ShapeError(f"layer '{n.name}' expects {n.in_shape} but receives {prev}")
            prev = n.out_shape

    def set_margins(self, margins):
        for h in self.heads:
            h.margin = float(margins[h.name])

    # -- execution ---------------------------------------------------------

    def forward(self, image, mode="eval", rng: Rng | None = None, stop_at=None):
        """Run the chain; returns ``(activations, caches)`` keyed by layer name."""
        x = as_tensor(image)
        if x.shape != tuple(self.nodes[0].in_shape):
            raise ShapeError(f"{self.arch}: image shape {x.shape} does not match input {self.nodes[0].in_shape}")
        acts, caches = {}, {}
        for node in self.nodes:
            x, caches[node.name] = _node_forward(node, self.params, x, mode, rng)
            acts[node.name] = x
            if node.name == stop_at:
                break
        return acts, caches

    def backward(self, caches, act_grads):
        """Accumulate parameter gradients given gradients on layer outputs.

        ``act_grads`` maps layer name to the loss gradient flowing into that
        layer's output from outside the chain (the heads). Returns
        ``(param_grads, input_grad)``.
        """
        grads = {}
        g = None
        last = max(i for i, n in enumerate(self.nodes) if n.name in act_grads)
        for i in range(last, -1, -1):
            node = self.nodes[i]
            extra = act_grads.get(node.name)
            if extra is not None:
                g = extra if g is None else g + extra
            if g is None:
                continue
            g = _node_backward(node, self.params, caches[node.name], g, grads)
        return grads, g


def _node_forward(node, params, x, mode, rng):
    n, s = node.name, node.spec
    cache = {"x": x}
    if node.kind == "conv":
        z, cache["cols"] = L._conv_forward(x, s, params[f"{n}.w"], params[f"{n}.b"])
    elif node.kind == "local":
        z, cache["cols"] = L._local_forward(x, s, params[f"{n}.w"], params[f"{n}.b"])
    elif node.kind == "fc":
        z = L.fully_connected(x, params[f"{n}.w"], params[f"{n}.b"])
    elif node.kind == "inception":
        sub = {k[len(n) + 1:]: v for k, v in params.items() if k.startswith(n + ".")}
        z, cache["inc"] = L.inception_forward_cached(x, s, sub)
        cache["sub"] = sub
        return z, cache
    elif node.kind == "pool":
        z, cache["argmax"] = L.maxpool2d(x, s.window, s.stride, s.pad)
        return z, cache
    else:
        raise ValueError(f"unknown layer kind {node.kind}")
    if node.relu:
        cache["z"] = z
        z = L.relu(z)
    if node.dropout > 0.0 and mode == "train":
        cache["mask"] = L.dropout_mask(z.shape, node.dropout, rng)
        z = z * cache["mask"]
    return z, cache


def _node_backward(node, params, cache, g, grads):
    n, s = node.name, node.spec
    x = cache["x"]
    if node.kind == "pool":
        return L.maxpool2d_backward(g, cache["argmax"], x.shape)
    if node.kind == "inception":
        gi, sub = L.inception_backward(cache["inc"], s, cache["sub"], g)
        for k, v in sub.items():
            grads[f"{n}.{k}"] = v
        return gi
    if "mask" in cache:
        g = g * cache["mask"]
    if node.relu:
        g = L.relu_backward(cache["z"], g)
    if node.kind == "conv":
        gi, gw, gb = L.conv2d_backward(x, s, params[f"{n}.w"], g, cols=cache["cols"])
    elif node.kind == "local":
        gi, gw, gb = L.locally_connected_backward(x, s, params[f"{n}.w"], g, cols=cache["cols"])
    else:
        gi, gw, gb = L.fully_connected_backward(x, params[f"{n}.w"], g)
    grads[f"{n}.w"] = gw
    grads[f"{n}.b"] = gb
    return gi


# ---------------------------------------------------------------------------
# builders


class _Builder:
    def __init__(self, arch, cfg: ScaleConfig):
        self.arch = arch
        self.cfg = cfg
        self.nodes = []
        self.heads = []
        self.shape = (cfg.channels, cfg.height, cfg.width)

    def _add(self, name, kind, spec, out_shape, relu=True, dropout=0.0):
        self.nodes.append(LayerNode(name, kind, spec, self.shape, tuple(out_shape), relu, dropout))
        self.shape = tuple(out_shape)

    def conv(self, name, out_channels, stage):
        c, h, w = self.shape
        try:
            spec = L.ConvSpec(c, out_channels, 3, 3, 1, 1)
            out = spec.output_shape(h, w)
        except ShapeError as exc:
            raise ShapeError(f"{self.arch} stage {stage} ({name}): {exc}") from None
        self._add(name, "conv", spec, out)

    def local(self, name, out_channels, stage, dropout=0.0):
        c, h, w = self.shape
        try:
            spec = L.LocalSpec(c, out_channels, 3, 3, 1, 1, in_h=h, in_w=w)
            out = spec.output_shape(h, w)
        except ShapeError as exc:
            raise ShapeError(f"{self.arch} stage {stage} ({name}): {exc}") from None
        self._add(name, "local", spec, out, dropout=dropout)

    def inception(self, name, width, stage):
        c, h, w = self.shape
        if width < 4:
            raise ShapeError(f"{self.arch} stage {stage} ({name}): inception width {width} < 4")
        b1 = max(1, width // 4)
        pp = max(1, width // 4)
        b5 = max(1, width // 8)
        b3 = width - b1 - pp - b5
        spec = L.InceptionSpec(c, b1, max(1, b3 // 2), b3, max(1, b5 // 2), b5, pp)
        self._add(name, "inception", spec, (spec.out_channels, h, w), relu=False)

    def pool(self, name, stage):
        c, h, w = self.shape
        spec = PoolSpec(2, 2)
        try:
            out = spec.output_shape(c, h, w)
        except ShapeError as exc:
            raise ShapeError(f"{self.arch} stage {stage} ({name}): {exc}") from None
        self._add(name, "pool", spec, out, relu=False)

    def fc(self, name, out_dim, dropout=0.0):
        in_dim = int(np.prod(self.shape))
        self._add(name, "fc", FcSpec(in_dim, out_dim), (out_dim,), dropout=dropout)

    def branch_head(self, attach):
        cfg = self.cfg
        in_dim = int(np.prod(self.shape))
        self.heads.append(SupervisionHead(f"head_{attach}", attach, in_dim, cfg.projection_dim,
                                          cfg.num_identities, cfg.margin, cfg.verif_weight))

    def final_head(self, attach):
        cfg = self.cfg
        dim = int(np.prod(self.shape))
        self.heads.append(SupervisionHead(f"head_{attach}", attach, None, dim,
                                          cfg.num_identities, cfg.margin, cfg.verif_weight))

    def finish(self, final, rng: Rng | None):
        net = NetworkGraph(self.arch, self.cfg, self.nodes, {}, self.heads, final)
        feat = int(np.prod(net.node(final).out_shape))
        if feat != self.cfg.feature_dim:
            raise ShapeError(f"{self.arch}: final feature size {feat} != feature_dim {self.cfg.feature_dim}")
        init_params(net, rng if rng is not None else Rng(0))
        net.validate()
        return net


def init_params(net: NetworkGraph, rng: Rng):
    """He-initialize every weight (biases zero). Overwrites ``net.params``."""
    params = {}
    for i, node in enumerate(net.nodes):
        r = rng.spawn(i)
        if node.kind == "inception":
            for k, v in L.init_inception_params(node.spec, r).items():
                params[f"{node.name}.{k}"] = v
            continue
        for pname, shape in node.param_shapes().items():
            if pname.endswith(".b"):
                params[pname] = np.zeros(shape)
            else:
                fan_in = node.spec.in_dim if node.kind == "fc" else node.spec.fan_in
                params[pname] = init_he(shape, fan_in, r)
    for j, head in enumerate(net.heads):
        params.update(head.init_params(rng.spawn(1000 + j)))
    net.params = params
    return net


def build_deepid2plus(cfg: ScaleConfig, rng: Rng | None = None) -> NetworkGraph:
    """Shallow baseline with five weight-bearing feature layers."""
    b = _Builder("deepid2plus", cfg)
    w = cfg.widths
    b.conv("conv1", w[0], 1)
    b.pool("pool1", 1)
    b.branch_head("pool1")
    b.conv("conv2", w[1], 2)
    b.pool("pool2", 2)
    b.branch_head("pool2")
    # locally shared weights in the original are approximated as unshared
    b.local("local3", w[2], 3)
    b.pool("pool3", 3)
    b.branch_head("pool3")
    b.local("local4", w[3], 4)
    b.fc("fc5", cfg.feature_dim, dropout=cfg.dropout)
    b.final_head("fc5")
    return b.finish("fc5", rng)


def build_deepid3_net1(cfg: ScaleConfig, rng: Rng | None = None) -> NetworkGraph:
    """Paired convolutions per stage; the top pair is locally connected and
    its second layer is the feature layer."""
    b = _Builder("deepid3_net1", cfg)
    w = cfg.widths
    for stage in (1, 2, 3):
        b.conv(f"conv{2 * stage - 1}", w[stage - 1], stage)
        b.conv(f"conv{2 * stage}", w[stage - 1], stage)
        b.pool(f"pool{stage}", stage)
        b.branch_head(f"pool{stage}")
    b.local("local7", w[3], 4)
    _, h, wd = b.shape
    if cfg.feature_dim % (h * wd):
        raise ShapeError(f"deepid3_net1 stage 4 (local8): feature_dim {cfg.feature_dim} "
                         f"is not a multiple of the {h}x{wd} output grid")
    b.local("local8", cfg.feature_dim // (h * wd), 4, dropout=cfg.dropout)
    b.final_head("local8")
    b.pool("pool4", 4)
    b.branch_head("pool4")
    return b.finish("local8", rng)


def build_deepid3_net2(cfg: ScaleConfig, rng: Rng | None = None) -> NetworkGraph:
    """Two convolutional stages, then three and two inception layers."""
    b = _Builder("deepid3_net2", cfg)
    w = cfg.widths
    for stage in (1, 2):
        b.conv(f"conv{2 * stage - 1}", w[stage - 1], stage)
        b.conv(f"conv{2 * stage}", w[stage - 1], stage)
        b.pool(f"pool{stage}", stage)
        b.branch_head(f"pool{stage}")
    for i in (1, 2, 3):
        b.inception(f"inception3_{i}", w[2], 3)
    b.pool("pool3", 3)
    b.branch_head("pool3")
    for i in (1, 2):
        b.inception(f"inception4_{i}", w[3], 4)
    b.pool("pool4", 4)
    b.fc("fc5", cfg.feature_dim, dropout=cfg.dropout)
    b.final_head("fc5")
    return b.finish("fc5", rng)


BUILDERS = {
    "deepid2plus": build_deepid2plus,
    "deepid3_net1": build_deepid3_net1,
    "deepid3_net2": build_deepid3_net2,
}


def build(arch: str, cfg: ScaleConfig, rng: Rng | None = None) -> NetworkGraph:
    try:
        return BUILDERS[arch](cfg, rng)
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}") from None


def extract_feature(net: NetworkGraph, image) -> np.ndarray:
    """Eval-mode activation of the feature layer, flattened."""
    acts, _ = net.forward(image, mode="eval", stop_at=net.final_feature_layer)
    return acts[net.final_feature_layer].reshape(-1).copy()
