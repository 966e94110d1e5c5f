"""Network specs, parameter materialization, forward pass and constraint groups.

A network is a small DAG of layers referenced by string ids; the special id
``"input"`` denotes the batch fed to :func:`forward`. Conv layers fuse the
convolution with its batch normalization (or a bias when ``has_bn`` is off),
so every output channel owns one five-tuple ``(kernel slice, mu, sigma,
gamma, beta)``.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

INPUT = "input"
KINDS = ("conv", "linear", "add", "concat", "pool", "bn")
ROLES = ("plain", "internal", "pacesetter", "follower", "dense-incremental", "classifier")


class SpecError(ValueError):
    """Invalid network spec; ``violations`` lists every problem found."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass
class LayerSpec:
    id: str
    kind: str
    inputs: list[str]
    filters: int = 0
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    has_bn: bool = True
    relu: bool = False
    pool: str = "max"
    role: str = "plain"

    def __post_init__(self):
        if isinstance(self.kernel, int):
            self.kernel = (self.kernel, self.kernel)
        self.kernel = tuple(int(k) for k in self.kernel)
        self.inputs = list(self.inputs)


@dataclass
class NetworkSpec:
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: list[LayerSpec]
    output: Optional[str] = None

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.output is None and self.layers:
            self.output = self.layers[-1].id

    def layer(self, layer_id: str) -> LayerSpec:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    def conv_ids(self) -> list[str]:
        return [l.id for l in self.layers if l.kind == "conv"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        for layer in d["layers"]:
            layer["kernel"] = list(layer["kernel"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        allowed = set(LayerSpec.__dataclass_fields__)
        layers = []
        for raw in d["layers"]:
            unknown = set(raw) - allowed
            if unknown:
                raise SpecError(f"layer {raw.get('id')!r}: unknown keys {sorted(unknown)}")
            layers.append(LayerSpec(**raw))
        return cls(name=d["name"], input_shape=tuple(d["input_shape"]),
                   num_classes=int(d["num_classes"]), layers=layers, output=d.get("output"))


@dataclass
class ConstraintGroup:
    pacesetter: str
    followers: list[str]
    kind: str  # "residual-stem" | "dense-bn"
    # channel offset of the pacesetter's outputs inside each follower (dense-bn only)
    offsets: list[int] = field(default_factory=list)


@dataclass
class FilterTuple:
    kernel_slice: np.ndarray
    mu: float
    sigma: float
    gamma: float
    beta: float


# --------------------------------------------------------------------------
# validation and shape inference


def execution_order(spec: NetworkSpec) -> list[str]:
    """Layer ids in a dependency-respecting order, declared order preferred."""
    pending = [l for l in spec.layers]
    done = {INPUT}
    order = []
    while pending:
        for k, layer in enumerate(pending):
            if all(i in done for i in layer.inputs):
                order.append(layer.id)
                done.add(layer.id)
                del pending[k]
                break
        else:
            raise SpecError(f"graph has a cycle or dangling input among {[l.id for l in pending]}")
    return order


def infer_shapes(spec: NetworkSpec) -> dict[str, tuple]:
    """Output shape (without batch dim) of every node; raises SpecError."""
    problems = []
    shapes: dict[str, tuple] = {INPUT: spec.input_shape}
    for lid in execution_order(spec):
        layer = spec.layer(lid)
        ins = [shapes.get(i) for i in layer.inputs]
        if any(s is None for s in ins):
            problems.append(f"{lid}: input shape unavailable")
            continue
        try:
            shapes[lid] = _layer_shape(layer, ins)
        except SpecError as err:
            problems.extend(err.violations)
    if problems:
        raise SpecError(problems)
    return shapes


def _layer_shape(layer: LayerSpec, ins: list[tuple]) -> tuple:
    lid = layer.id

    def need(n):
        if len(ins) != n:
            raise SpecError(f"{lid}: {layer.kind} needs {n} input(s), got {len(ins)}")

    if layer.kind == "conv":
        need(1)
        if len(ins[0]) != 3:
            raise SpecError(f"{lid}: conv input must be a feature map, got {ins[0]}")
        if layer.filters < 1:
            raise SpecError(f"{lid}: conv needs filters >= 1")
        h, w, _ = ins[0]
        u, v = layer.kernel
        try:
            ho = T.conv_output_size(h, u, layer.stride, layer.padding)
            wo = T.conv_output_size(w, v, layer.stride, layer.padding)
        except T.ShapeError as err:
            raise SpecError(f"{lid}: {err}") from None
        return (ho, wo, layer.filters)
    if layer.kind == "bn":
        need(1)
        return ins[0]
    if layer.kind == "add":
        need(2)
        if ins[0] != ins[1]:
            raise SpecError(f"{lid}: add operands have different shapes {ins[0]} vs {ins[1]}")
        return ins[0]
    if layer.kind == "concat":
        if not ins:
            raise SpecError(f"{lid}: concat needs inputs")
        if any(s[:-1] != ins[0][:-1] for s in ins):
            raise SpecError(f"{lid}: concat operands differ spatially {ins}")
        return ins[0][:-1] + (sum(s[-1] for s in ins),)
    if layer.kind == "pool":
        need(1)
        if layer.pool == "global":
            return (ins[0][-1],)
        h, w, c = ins[0]
        k = layer.kernel[0]
        s = layer.stride or k
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        if ho < 1 or wo < 1:
            raise SpecError(f"{lid}: pool window {k} too large for {h}x{w}")
        return (ho, wo, c)
    if layer.kind == "linear":
        need(1)
        if layer.filters < 1:
            raise SpecError(f"{lid}: linear needs filters >= 1")
        return (layer.filters,)
    raise SpecError(f"{lid}: unknown kind {layer.kind!r}")


def validate(spec: NetworkSpec) -> list[str]:
    """Every spec violation found, empty when valid."""
    problems = []
    ids = [l.id for l in spec.layers]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        problems.append(f"duplicate layer ids {dup}")
    if INPUT in ids:
        problems.append(f"layer id {INPUT!r} is reserved")
    known = set(ids) | {INPUT}
    for layer in spec.layers:
        if layer.kind not in KINDS:
            problems.append(f"{layer.id}: unknown kind {layer.kind!r}")
        if layer.role not in ROLES:
            problems.append(f"{layer.id}: unknown role {layer.role!r}")
        missing = [i for i in layer.inputs if i not in known]
        if missing:
            problems.append(f"{layer.id}: unknown inputs {missing}")
    if spec.output not in ids:
        problems.append(f"output {spec.output!r} is not a layer")
    if len(spec.input_shape) != 3:
        problems.append(f"input_shape must be (h, w, c), got {spec.input_shape}")
    if problems:
        return problems
    try:
        shapes = infer_shapes(spec)
    except SpecError as err:
        return err.violations
    out = shapes[spec.output]
    if out != (spec.num_classes,):
        problems.append(f"output shape {out} does not match num_classes {spec.num_classes}")
    return problems


def check_spec(spec: NetworkSpec) -> dict[str, tuple]:
    problems = validate(spec)
    if problems:
        raise SpecError(problems)
    return infer_shapes(spec)


# --------------------------------------------------------------------------
# model


class Model:
    """A network spec plus its materialized parameters.

    ``params[layer_id]`` maps parameter names to tensors: conv layers carry
    ``kernel, mu, sigma, gamma, beta``; standalone bn layers the four vectors;
    linear layers ``weight, bias``.
    """

    def __init__(self, spec: NetworkSpec, params: dict[str, dict[str, Tensor]]):
        self.spec = spec
        self.params = params
        self.shapes = check_spec(spec)
        self.order = execution_order(spec)
        self._check_params()

    def _check_params(self):
        for lid, expected in param_shapes(self.spec, self.shapes).items():
            got = self.params.get(lid, {})
            for name, shape in expected.items():
                if name not in got:
                    raise SpecError(f"{lid}: missing parameter {name}")
                if got[name].shape != shape:
                    raise SpecError(f"{lid}.{name}: shape {got[name].shape} != expected {shape}")

    def trainable(self) -> Iterator[tuple[str, str, Tensor]]:
        for lid in self.order:
            for name, t in self.params.get(lid, {}).items():
                if t.requires_grad:
                    yield lid, name, t

    def named_tensors(self) -> dict[str, Tensor]:
        return {f"{lid}.{name}": t for lid in self.order for name, t in self.params.get(lid, {}).items()}

    def copy(self) -> "Model":
        params = {lid: {name: Tensor(t.data.copy(), t.requires_grad, t.name) for name, t in p.items()}
                  for lid, p in self.params.items()}
        return Model(copy.deepcopy(self.spec), params)

    def filter_tuple(self, layer_id: str, j: int) -> FilterTuple:
        p = self.params[layer_id]
        return FilterTuple(p["kernel"].data[..., j].copy(), float(p["mu"].data[j]),
                           float(p["sigma"].data[j]), float(p["gamma"].data[j]),
                           float(p["beta"].data[j]))

    def width(self, layer_id: str) -> int:
        return self.shapes[layer_id][-1]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.named_tensors().values())


def param_shapes(spec: NetworkSpec, shapes: Optional[dict] = None) -> dict[str, dict[str, tuple]]:
    shapes = shapes or infer_shapes(spec)
    out = {}
    for layer in spec.layers:
        if layer.kind == "conv":
            cin = shapes[layer.inputs[0]][-1]
            c = layer.filters
            out[layer.id] = {"kernel": (*layer.kernel, cin, c), "mu": (c,), "sigma": (c,),
                             "gamma": (c,), "beta": (c,)}
        elif layer.kind == "bn":
            c = shapes[layer.inputs[0]][-1]
            out[layer.id] = {k: (c,) for k in ("mu", "sigma", "gamma", "beta")}
        elif layer.kind == "linear":
            fin = int(np.prod(shapes[layer.inputs[0]]))
            out[layer.id] = {"weight": (fin, layer.filters), "bias": (layer.filters,)}
    return out


def _trainable_names(layer: LayerSpec) -> set[str]:
    if layer.kind == "conv":
        return {"kernel", "gamma", "beta"} if layer.has_bn else {"kernel", "beta"}
    if layer.kind == "bn":
        return {"gamma", "beta"}
    if layer.kind == "linear":
        return {"weight", "bias"}
    return set()


def make_params(spec: NetworkSpec, arrays: dict[str, dict[str, np.ndarray]]) -> dict[str, dict[str, Tensor]]:
    """Wrap raw arrays as tensors with the right trainability flags."""
    params = {}
    for layer in spec.layers:
        if layer.id not in arrays:
            continue
        train = _trainable_names(layer)
        params[layer.id] = {name: Tensor(a, requires_grad=name in train, name=f"{layer.id}.{name}")
                            for name, a in arrays[layer.id].items()}
    return params


def build_model(spec: NetworkSpec, init_seed: int = 0) -> Model:
    """Materialize parameters: fan-in scaled uniform kernels, identity BN."""
    shapes = check_spec(spec)
    rng = np.random.default_rng(init_seed)
    arrays: dict[str, dict[str, np.ndarray]] = {}
    for lid, pshapes in param_shapes(spec, shapes).items():
        layer = spec.layer(lid)
        a = {}
        if layer.kind == "conv":
            kshape = pshapes["kernel"]
            fan_in = kshape[0] * kshape[1] * kshape[2]
            bound = np.sqrt(6.0 / fan_in)
            a["kernel"] = rng.uniform(-bound, bound, size=kshape)
            c = kshape[-1]
            a.update(mu=np.zeros(c), sigma=np.ones(c), gamma=np.ones(c), beta=np.zeros(c))
        elif layer.kind == "bn":
            c = pshapes["mu"][0]
            a.update(mu=np.zeros(c), sigma=np.ones(c), gamma=np.ones(c), beta=np.zeros(c))
        else:
            fin, fout = pshapes["weight"]
            bound = 1.0 / np.sqrt(fin)
            a["weight"] = rng.uniform(-bound, bound, size=(fin, fout))
            a["bias"] = np.zeros(fout)
        arrays[lid] = a
    return Model(spec, make_params(spec, arrays))


def forward(model: Model, batch, mode: str = "eval", momentum: float = 0.1) -> Tensor:
    """Run ``batch`` ([n,h,w,c]) through the graph and return the output node."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.ndim != 4 or tuple(x.shape[1:]) != model.spec.input_shape:
        raise T.ShapeError(f"batch shape {x.shape} does not match input {model.spec.input_shape}")
    acts: dict[str, Tensor] = {INPUT: x}
    for lid in model.order:
        layer = model.spec.layer(lid)
        ins = [acts[i] for i in layer.inputs]
        p = model.params.get(lid)
        if layer.kind == "conv":
            y = T.conv2d(ins[0], p["kernel"], layer.stride, layer.padding)
            if layer.has_bn:
                y = T.batchnorm(y, p["mu"], p["sigma"], p["gamma"], p["beta"], mode, momentum)
            else:
                y = T.bias_add(y, p["beta"])
        elif layer.kind == "bn":
            y = T.batchnorm(ins[0], p["mu"], p["sigma"], p["gamma"], p["beta"], mode, momentum)
        elif layer.kind == "add":
            y = T.add(ins[0], ins[1])
        elif layer.kind == "concat":
            y = T.concat(ins, axis=-1)
        elif layer.kind == "pool":
            if layer.pool == "global":
                y = T.global_avgpool(ins[0])
            elif layer.pool == "avg":
                y = T.avgpool2d(ins[0], layer.kernel[0], layer.stride or layer.kernel[0])
            else:
                y = T.maxpool2d(ins[0], layer.kernel[0], layer.stride or layer.kernel[0])
        else:
            y = T.linear(ins[0], p["weight"], p["bias"])
        if layer.relu:
            y = T.relu(y)
        acts[lid] = y
    return acts[model.spec.output]


def predict(model: Model, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Eval-mode logits as a numpy array, computed in chunks."""
    chunks = [forward(model, images[k:k + batch_size], "eval").data
              for k in range(0, len(images), batch_size)]
    return np.concatenate(chunks, axis=0)


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 500) -> float:
    return float((predict(model, images, batch_size).argmax(axis=1) == labels).mean())


# --------------------------------------------------------------------------
# constraint groups


class _UnionFind:
    def __init__(self):
        self.parent: dict[str, str] = {}

    def find(self, a: str) -> str:
        self.parent.setdefault(a, a)
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def _channel_source(spec: NetworkSpec, node: str) -> Optional[str]:
    """The conv or add node whose channels ``node`` passes through unchanged."""
    while node != INPUT:
        layer = spec.layer(node)
        if layer.kind in ("conv", "add"):
            return node
        if layer.kind in ("bn", "pool"):
            node = layer.inputs[0]
            continue
        return None
    return INPUT


def _layouts(spec: NetworkSpec, shapes: dict) -> dict[str, list[tuple[Optional[str], int]]]:
    """Per node: the channel segments as (producing conv or None, width)."""
    lay: dict[str, list] = {INPUT: [(None, spec.input_shape[-1])]}
    for lid in execution_order(spec):
        layer = spec.layer(lid)
        if layer.kind == "conv":
            lay[lid] = [(lid, layer.filters)]
        elif layer.kind in ("bn", "pool"):
            lay[lid] = list(lay[layer.inputs[0]])
        elif layer.kind == "concat":
            lay[lid] = [seg for i in layer.inputs for seg in lay[i]]
        elif layer.kind == "add":
            lay[lid] = [(None, shapes[lid][-1])]
        else:
            lay[lid] = [(None, shapes[lid][-1])]
    return lay


def derive_constraint_groups(spec: NetworkSpec) -> list[ConstraintGroup]:
    """Layers that must share one pruning pattern.

    Convs whose outputs meet at ``add`` nodes form a residual group: the stem
    or projection conv is the pacesetter, every block-ending conv a follower.
    Each conv whose channels reach a standalone ``bn`` layer forms a dense-bn
    group whose followers are those bn layers, at the matching channel offset.
    """
    shapes = check_spec(spec)
    order = execution_order(spec)
    uf = _UnionFind()
    for lid in order:
        layer = spec.layer(lid)
        if layer.kind != "add":
            continue
        uf.find(lid)
        srcs = [_channel_source(spec, i) for i in layer.inputs]
        for s in srcs:
            if s is None or s == INPUT:
                raise SpecError(f"{lid}: add operand does not trace to a conv layer")
            uf.union(lid, s)
    members: dict[str, list[str]] = {}
    for lid in order:
        if spec.layer(lid).kind == "conv" and lid in uf.parent:
            members.setdefault(uf.find(lid), []).append(lid)
    groups = []
    grouped: set[str] = set()
    for convs in members.values():
        widths = {c: spec.layer(c).filters for c in convs}
        if len(set(widths.values())) > 1:
            adds = [l.id for l in spec.layers if l.kind == "add" and l.id in uf.parent
                    and uf.find(l.id) == uf.find(convs[0])]
            raise SpecError(f"add nodes {adds} join layers of unequal width {widths}")
        if len(convs) < 2:
            continue
        declared = [c for c in convs if spec.layer(c).role == "pacesetter"]
        if len(declared) > 1:
            raise SpecError(f"several pacesetters declared in one residual group: {declared}")
        pace = declared[0] if declared else convs[0]
        groups.append(ConstraintGroup(pace, [c for c in convs if c != pace], "residual-stem"))
        grouped.update(convs)

    layouts = _layouts(spec, shapes)
    dense: dict[str, ConstraintGroup] = {}
    for lid in order:
        layer = spec.layer(lid)
        if layer.kind != "bn":
            continue
        offset = 0
        for src, width in layouts[layer.inputs[0]]:
            if src is not None:
                if src in grouped:
                    raise SpecError(f"{src} is constrained both by a residual group and by bn {lid}")
                g = dense.setdefault(src, ConstraintGroup(src, [], "dense-bn"))
                g.followers.append(lid)
                g.offsets.append(offset)
            offset += width
    groups.extend(dense[s] for s in order if s in dense)
    return groups


# --------------------------------------------------------------------------
# bookkeeping


def conv_flops(spec: NetworkSpec) -> dict[str, int]:
    """2 * h' * w' * u * v * c_in * c_out for every conv layer."""
    shapes = infer_shapes(spec)
    out = {}
    for layer in spec.layers:
        if layer.kind == "conv":
            ho, wo, co = shapes[layer.id]
            cin = shapes[layer.inputs[0]][-1]
            out[layer.id] = 2 * ho * wo * layer.kernel[0] * layer.kernel[1] * cin * co
    return out


def flops(spec: NetworkSpec) -> int:
    return sum(conv_flops(spec).values())


def param_count(spec: NetworkSpec) -> int:
    """Number of stored values (BN statistics included) implied by the spec."""
    return sum(int(np.prod(s)) for p in param_shapes(spec).values() for s in p.values())


def with_widths(spec: NetworkSpec, widths: dict[str, int]) -> NetworkSpec:
    """Copy of ``spec`` with conv filter counts replaced."""
    new = copy.deepcopy(spec)
    for layer in new.layers:
        if layer.id in widths:
            if layer.kind != "conv":
                raise SpecError(f"{layer.id}: only conv widths can be changed")
            layer.filters = int(widths[layer.id])
    check_spec(new)
    return new


def scale_widths(spec: NetworkSpec, factor: float, layers: Optional[Sequence[str]] = None) -> NetworkSpec:
    """Multiply conv widths by ``factor``; every result must be integral."""
    targets = layers if layers is not None else spec.conv_ids()
    widths = {}
    for lid in targets:
        scaled = spec.layer(lid).filters * factor
        if abs(scaled - round(scaled)) > 1e-9:
            raise SpecError(f"{lid}: width {spec.layer(lid).filters} x {factor} is not integral")
        widths[lid] = int(round(scaled))
    new = with_widths(spec, widths)
    new.name = f"{spec.name}-x{factor:g}"
    return new


# --------------------------------------------------------------------------
# factories


def toy_vgg(widths: Sequence[int] = (8, 16, 32), input_shape=(28, 28, 1), num_classes: int = 10,
            convs_per_stage: int = 1, name: str = "toy-vgg") -> NetworkSpec:
    """Plain conv-bn-relu stages, each closed by a 2x2 max pool."""
    layers = []
    prev = INPUT
    for s, width in enumerate(widths, 1):
        for k in range(1, convs_per_stage + 1):
            lid = f"conv{s}_{k}"
            layers.append(LayerSpec(lid, "conv", [prev], filters=width, kernel=(3, 3), padding=1,
                                    relu=True))
            prev = lid
        layers.append(LayerSpec(f"pool{s}", "pool", [prev], kernel=(2, 2), stride=2, pool="max"))
        prev = f"pool{s}"
    layers.append(LayerSpec("gap", "pool", [prev], pool="global"))
    layers.append(LayerSpec("fc", "linear", ["gap"], filters=num_classes, role="classifier"))
    return NetworkSpec(name, input_shape, num_classes, layers)


def resnet(stage_widths: Sequence[int] = (16, 32, 64), blocks: int = 1, input_shape=(28, 28, 1),
           num_classes: int = 10, stem_stride: int = 1, internal_widths: Optional[Sequence[int]] = None,
           name: Optional[str] = None) -> NetworkSpec:
    """CIFAR-style residual net with projection shortcuts between stages.

    ``internal_widths`` sets the first conv of every block per stage (defaults
    to the stage width).
    """
    internal_widths = internal_widths or stage_widths
    name = name or "resnet-" + "-".join(str(w) for w in stage_widths)
    layers = [LayerSpec("stem", "conv", [INPUT], filters=stage_widths[0], kernel=(3, 3),
                        stride=stem_stride, padding=1, relu=True, role="pacesetter")]
    prev = "stem"
    for s, (width, inner) in enumerate(zip(stage_widths, internal_widths), 1):
        for b in range(1, blocks + 1):
            stride = 2 if (s > 1 and b == 1) else 1
            pre = f"s{s}b{b}"
            layers.append(LayerSpec(f"{pre}a", "conv", [prev], filters=inner, kernel=(3, 3),
                                    stride=stride, padding=1, relu=True, role="internal"))
            layers.append(LayerSpec(f"{pre}b", "conv", [f"{pre}a"], filters=width, kernel=(3, 3),
                                    padding=1, role="follower"))
            shortcut = prev
            if stride != 1:
                shortcut = f"s{s}proj"
                layers.append(LayerSpec(shortcut, "conv", [prev], filters=width, kernel=(1, 1),
                                        stride=2, role="pacesetter"))
            layers.append(LayerSpec(f"{pre}add", "add", [f"{pre}b", shortcut], relu=True))
            prev = f"{pre}add"
    layers.append(LayerSpec("gap", "pool", [prev], pool="global"))
    layers.append(LayerSpec("fc", "linear", ["gap"], filters=num_classes, role="classifier"))
    return NetworkSpec(name, input_shape, num_classes, layers)


def densenet(growth: int = 4, layers_per_block: int = 3, blocks: int = 1, stem_filters: int = 8,
             input_shape=(8, 8, 1), num_classes: int = 10, name: Optional[str] = None) -> NetworkSpec:
    """Pre-activation dense blocks (bn-relu-conv) joined by 1x1 transitions."""
    name = name or f"densenet-g{growth}"
    layers = [LayerSpec("stem", "conv", [INPUT], filters=stem_filters, kernel=(3, 3), padding=1,
                        has_bn=False, role="dense-incremental")]
    cur = "stem"
    width = stem_filters
    for b in range(1, blocks + 1):
        for k in range(1, layers_per_block + 1):
            pre = f"d{b}_{k}"
            layers.append(LayerSpec(f"{pre}bn", "bn", [cur], relu=True))
            layers.append(LayerSpec(f"{pre}conv", "conv", [f"{pre}bn"], filters=growth, kernel=(3, 3),
                                    padding=1, has_bn=False, role="dense-incremental"))
            layers.append(LayerSpec(f"{pre}cat", "concat", [cur, f"{pre}conv"]))
            cur = f"{pre}cat"
            width += growth
        if b < blocks:
            layers.append(LayerSpec(f"t{b}bn", "bn", [cur], relu=True))
            layers.append(LayerSpec(f"t{b}conv", "conv", [f"t{b}bn"], filters=width, kernel=(1, 1),
                                    has_bn=False, role="dense-incremental"))
            layers.append(LayerSpec(f"t{b}pool", "pool", [f"t{b}conv"], kernel=(2, 2), stride=2,
                                    pool="avg"))
            cur = f"t{b}pool"
    layers.append(LayerSpec("final_bn", "bn", [cur], relu=True))
    layers.append(LayerSpec("gap", "pool", ["final_bn"], pool="global"))
    layers.append(LayerSpec("fc", "linear", ["gap"], filters=num_classes, role="classifier"))
    return NetworkSpec(name, input_shape, num_classes, layers)


FACTORIES = {"toy-vgg": toy_vgg, "resnet": resnet, "densenet": densenet}
