"""Residual blocks and whole networks with gated and rescaled forward modes.

A block computes ``ReLU(f(h) + id(h))`` where ``f`` is
``(Conv|Dense)-BN-ReLU-(Conv|Dense)-BN``. Three forward modes exist:

* :class:`ConstantDepth` runs every block.
* :class:`TrainGated` runs block ``l`` only when its gate is 1; a dropped
  block returns ``id(h)`` without touching ``f`` (or its batch-norm stats).
* :class:`TestRescaled` runs every block with ``f`` scaled by its survival
  probability and batch-norm in eval mode.

The ``linear`` flavor replaces ``f`` with a single affine map and removes
every batch-norm and ReLU. It exists so that ensemble expectations can be
checked exactly against enumeration.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
import numpy as np

from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    avgpool2d_bwd,
    avgpool2d_fwd,
    init_params,
    relu_bwd,
    relu_fwd,
)
from .tensor import RngStream

FLAVORS = ("conv", "dense", "linear")
CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class ResBlockSpec:
    flavor: str
    in_width: int
    out_width: int
    stride: int = 1

    def __post_init__(self):
        if self.flavor not in FLAVORS:
            raise ValueError(f"unknown flavor {self.flavor!r}")
        if self.stride not in (1, 2) or (self.stride == 2 and self.flavor != "conv"):
            raise ValueError(f"invalid stride {self.stride} for {self.flavor} block")
        if self.out_width < self.in_width:
            raise ValueError("transition blocks cannot shrink width")

    @property
    def is_transition(self) -> bool:
        return self.in_width != self.out_width or self.stride == 2


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture: stem, groups of ``(block_count, width)`` and a classifier.

    ``in_features`` is the channel count for conv networks and the feature
    count otherwise. For conv networks the first block of every group after
    the first halves the spatial size.
    """

    flavor: str
    in_features: int
    groups: tuple[tuple[int, int], ...]
    num_classes: int
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.flavor not in FLAVORS:
            raise ValueError(f"unknown flavor {self.flavor!r}")
        groups = tuple((int(n), int(w)) for n, w in self.groups)
        if not groups or any(n < 1 or w < 1 for n, w in groups):
            raise ValueError(f"invalid groups {self.groups!r}")
        object.__setattr__(self, "groups", groups)

    @property
    def L(self) -> int:
        return sum(n for n, _ in self.groups)

    @property
    def stem_width(self) -> int:
        return self.groups[0][1]

    def block_specs(self) -> list[ResBlockSpec]:
        specs = []
        width = self.stem_width
        for gi, (count, out_width) in enumerate(self.groups):
            for bi in range(count):
                stride = 2 if (self.flavor == "conv" and gi > 0 and bi == 0) else 1
                specs.append(ResBlockSpec(self.flavor, width, out_width, stride))
                width = out_width
        return specs

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["groups"] = [list(g) for g in self.groups]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**{**d, "groups": tuple(tuple(g) for g in d["groups"])})


# -- forward modes -----------------------------------------------------------

@dataclass(frozen=True)
class ConstantDepth:
    train: bool = True


@dataclass(frozen=True)
class TrainGated:
    gates: tuple[int, ...]
    train: bool = True

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(int(g) for g in self.gates))


@dataclass(frozen=True)
class TestRescaled:
    probs: tuple[float, ...]

    __test__ = False  # not a pytest class

    def __post_init__(self):
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))

    @classmethod
    def from_schedule(cls, schedule) -> "TestRescaled":
        return cls(tuple(schedule.probs()))


def _mode_arrays(mode, L: int):
    """Per-block (gate, scale) lists and the batch-norm train flag."""
    if isinstance(mode, ConstantDepth):
        return [1] * L, [1.0] * L, mode.train
    if isinstance(mode, TrainGated):
        if len(mode.gates) != L:
            raise ValueError(f"gate vector has length {len(mode.gates)}, network has {L} blocks")
        return list(mode.gates), [1.0] * L, mode.train
    if isinstance(mode, TestRescaled):
        if len(mode.probs) != L:
            raise ValueError(f"schedule has length {len(mode.probs)}, network has {L} blocks")
        return [1] * L, list(mode.probs), False
    raise TypeError(f"unknown forward mode {mode!r}")


# -- blocks ------------------------------------------------------------------

class ResBlock:
    def __init__(self, spec: ResBlockSpec, bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        self.spec = spec
        self._flops_cache: dict[tuple, int] = {}
        w_in, w_out = spec.in_width, spec.out_width
        if spec.flavor == "conv":
            self.layers = [
                ("conv1", Conv2D(w_in, w_out, stride=spec.stride, bias=False)),
                ("bn1", BatchNorm(w_out, bn_momentum, bn_eps)),
                ("conv2", Conv2D(w_out, w_out, bias=False)),
                ("bn2", BatchNorm(w_out, bn_momentum, bn_eps)),
            ]
        elif spec.flavor == "dense":
            self.layers = [
                ("fc1", Dense(w_in, w_out, bias=False)),
                ("bn1", BatchNorm(w_out, bn_momentum, bn_eps)),
                ("fc2", Dense(w_out, w_out, bias=False)),
                ("bn2", BatchNorm(w_out, bn_momentum, bn_eps)),
            ]
        else:
            self.layers = [("fc", Dense(w_in, w_out))]

    @property
    def first_weight(self) -> np.ndarray:
        layer = self.layers[0][1]
        return layer.params["kernel" if isinstance(layer, Conv2D) else "weight"]

    def transform(self, h: np.ndarray, train: bool):
        """Evaluate ``f`` alone; returns ``(out, caches)``."""
        caches = []
        x = h
        n = len(self.layers)
        for i, (_, layer) in enumerate(self.layers):
            if isinstance(layer, BatchNorm):
                x, c = layer.forward(x, train)
            else:
                x, c = layer.forward(x)
            caches.append(c)
            # ReLU sits between the two halves of f
            if i == 1 and n == 4:
                x, mask = relu_fwd(x)
                caches.append(mask)
        return x, caches

    def transform_backward(self, caches, d: np.ndarray):
        grads = {}
        caches = list(caches)
        n = len(self.layers)
        for i in range(n - 1, -1, -1):
            name, layer = self.layers[i]
            if i == 1 and n == 4:
                d = relu_bwd(caches.pop(), d)
            d, *pgrads = layer.backward(caches.pop(), d)
            for pname, g in zip(layer.params, pgrads):
                grads[f"{name}.{pname}"] = g
        return d, grads

    def transform_flops(self, x_shape) -> int:
        key = tuple(x_shape)
        if key not in self._flops_cache:
            self._flops_cache[key] = self._count_flops(key)
        return self._flops_cache[key]

    def _count_flops(self, x_shape) -> int:
        total = 0
        shape = tuple(x_shape)
        for _, layer in self.layers:
            total += layer.flops(shape)
            if isinstance(layer, Conv2D):
                ho, wo = layer.out_hw(shape[2], shape[3])
                shape = (shape[0], layer.out_channels, ho, wo)
            elif isinstance(layer, Dense):
                shape = (shape[0], layer.out_features)
        return total + 3 * math.prod(shape)

    def identity(self, h: np.ndarray) -> np.ndarray:
        return transition_identity(h, self.spec)

    def identity_backward(self, d: np.ndarray) -> np.ndarray:
        spec = self.spec
        if not spec.is_transition:
            return d
        d = d[:, :spec.in_width]
        if spec.flavor == "conv":
            b, c, ho, wo = d.shape
            d = avgpool2d_bwd(((b, c, 2 * ho, 2 * wo), 2), d)
        return d

    def forward(self, h: np.ndarray, gate: int = 1, scale: float = 1.0, train: bool = True):
        """Returns ``(h_out, cache, flops)``; ``cache`` is None for a dropped block."""
        if not gate:
            # input is non-negative so ReLU(id(h)) == id(h); skip it for bit-exactness
            return self.identity(h), None, 0
        f_out, caches = self.transform(h, train)
        if scale != 1.0:
            f_out = scale * f_out
        ident = self.identity(h)
        if f_out.shape != ident.shape:
            raise ValueError(f"residual shape mismatch: f {f_out.shape} vs id {ident.shape}")
        s = f_out + ident
        if self.spec.flavor == "linear":
            out, mask = s, None
        else:
            out, mask = relu_fwd(s)
        return out, (caches, mask, scale), self.transform_flops(h.shape)

    def backward(self, cache, d: np.ndarray):
        """Returns ``(dh_prev, grads)``; grads is empty for a dropped block."""
        if cache is None:
            return self.identity_backward(d), {}
        caches, mask, scale = cache
        if mask is not None:
            d = relu_bwd(mask, d)
        df = d if scale == 1.0 else scale * d
        dh, grads = self.transform_backward(caches, df)
        return dh + self.identity_backward(d), grads


def transition_identity(h: np.ndarray, spec: ResBlockSpec) -> np.ndarray:
    """Shortcut path: 2x2 average pool for stride 2, then zero-pad the width."""
    if not spec.is_transition:
        return h
    if spec.out_width < spec.in_width:
        raise ValueError("cannot shrink width on the identity path")
    if spec.flavor == "conv" and spec.stride == 2:
        h, _ = avgpool2d_fwd(h, 2)
    extra = spec.out_width - spec.in_width
    if extra:
        pad = [(0, 0)] * h.ndim
        pad[1] = (0, extra)
        h = np.pad(h, pad)
    return h


# -- networks ----------------------------------------------------------------

@dataclass
class ForwardRecord:
    """What a forward pass did: caches plus which blocks ran and their flops."""

    stem: list
    blocks: list
    head: tuple
    executed: np.ndarray
    block_flops: np.ndarray
    train: bool = True
    backward_flops: np.ndarray | None = None
    input_grad: np.ndarray | None = None


class ResNet:
    """A stack of residual blocks with a stem and a linear classifier.

    All trainable parameters live in one contiguous buffer ``flat_params``;
    each layer's parameter arrays are views into it. Gradients mirror this
    layout in ``flat_grads``.
    """

    def __init__(self, spec: NetworkSpec, rng: RngStream | None = None):
        self.spec = spec
        width = spec.stem_width
        m, eps = spec.bn_momentum, spec.bn_eps
        if spec.flavor == "conv":
            self.stem = [("conv", Conv2D(spec.in_features, width, bias=False)), ("bn", BatchNorm(width, m, eps))]
        elif spec.flavor == "dense":
            self.stem = [("fc", Dense(spec.in_features, width, bias=False)), ("bn", BatchNorm(width, m, eps))]
        else:
            self.stem = [("fc", Dense(spec.in_features, width))]
        self.blocks = [ResBlock(bs, m, eps) for bs in spec.block_specs()]
        self.head = Dense(spec.groups[-1][1], spec.num_classes)
        if rng is not None:
            for _, layer in self._all_layers():
                init_params(layer, rng)
        self._pack()

    @property
    def L(self) -> int:
        return len(self.blocks)

    def _all_layers(self):
        for name, layer in self.stem:
            yield f"stem.{name}", layer
        for i, block in enumerate(self.blocks):
            for name, layer in block.layers:
                yield f"blocks.{i}.{name}", layer
        yield "head", self.head

    def _pack(self):
        layers = list(self._all_layers())
        total = sum(p.size for _, layer in layers for p in layer.params.values())
        self.flat_params = np.empty(total)
        self.flat_grads = np.zeros(total)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._layer_grads = {}
        off = 0
        for path, layer in layers:
            lg = {}
            for name, p in list(layer.params.items()):
                n = p.size
                view = self.flat_params[off:off + n].reshape(p.shape)
                view[...] = p
                layer.params[name] = view
                gview = self.flat_grads[off:off + n].reshape(p.shape)
                self.params[f"{path}.{name}"] = view
                self.grads[f"{path}.{name}"] = gview
                lg[name] = gview
                off += n
            self._layer_grads[id(layer)] = lg
            for name, buf in getattr(layer, "buffers", {}).items():
                self.buffers[f"{path}.{name}"] = buf

    # forward ---------------------------------------------------------------

    def _stem_forward(self, x, train):
        caches = []
        for _, layer in self.stem:
            if isinstance(layer, BatchNorm):
                x, c = layer.forward(x, train)
            else:
                x, c = layer.forward(x)
            caches.append(c)
        if self.spec.flavor != "linear":
            x, mask = relu_fwd(x)
            caches.append(mask)
        return x, caches

    def blocks_forward(self, h: np.ndarray, mode):
        """Run only the residual blocks. Returns ``(h, caches, executed, flops)``."""
        gates, scales, train = _mode_arrays(mode, self.L)
        caches = []
        executed = np.zeros(self.L, dtype=bool)
        flops = np.zeros(self.L, dtype=np.int64)
        for i, block in enumerate(self.blocks):
            h, c, fl = block.forward(h, gates[i], scales[i], train)
            caches.append(c)
            executed[i] = c is not None
            flops[i] = fl
        return h, caches, executed, flops

    def forward(self, x: np.ndarray, mode=ConstantDepth()):
        """Logits for ``x`` under ``mode`` plus the record needed for backward."""
        _, _, train = _mode_arrays(mode, self.L)
        h, stem_caches = self._stem_forward(x, train)
        h, block_caches, executed, flops = self.blocks_forward(h, mode)
        if self.spec.flavor == "conv":
            pooled_shape = h.shape
            h = h.mean(axis=(2, 3))
        else:
            pooled_shape = None
        logits, head_cache = self.head.forward(h)
        rec = ForwardRecord(
            stem=stem_caches,
            blocks=block_caches,
            head=(head_cache, pooled_shape),
            executed=executed,
            block_flops=flops,
            train=train,
        )
        return logits, rec

    # backward --------------------------------------------------------------

    def _store(self, layer, pgrads):
        lg = self._layer_grads[id(layer)]
        for name, g in zip(layer.params, pgrads):
            lg[name][...] = g

    def backward(self, rec: ForwardRecord, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Fill ``self.grads`` for the pass recorded in ``rec`` and return it.

        Parameters of dropped blocks get exactly zero gradient.
        """
        if len(rec.blocks) != self.L:
            raise ValueError("forward record does not match this network")
        self.flat_grads[...] = 0.0
        head_cache, pooled_shape = rec.head
        d, dw, db = self.head.backward(head_cache, dlogits)
        self._store(self.head, (dw, db))
        if pooled_shape is not None:
            b, c, hh, ww = pooled_shape
            d = np.broadcast_to((d / (hh * ww))[:, :, None, None], pooled_shape)
        bflops = np.zeros(self.L, dtype=np.int64)
        for i in range(self.L - 1, -1, -1):
            block = self.blocks[i]
            d, grads = block.backward(rec.blocks[i], d)
            if grads:
                for name, layer in block.layers:
                    self._store(layer, [grads[f"{name}.{p}"] for p in layer.params])
                bflops[i] = 2 * rec.block_flops[i]
        rec.backward_flops = bflops
        caches = list(rec.stem)
        if self.spec.flavor != "linear":
            d = relu_bwd(caches.pop(), d)
        for _, layer in reversed(self.stem):
            d, *pgrads = layer.backward(caches.pop(), d)
            self._store(layer, pgrads)
        rec.input_grad = d
        return self.grads

    def first_block_grad(self) -> np.ndarray:
        """Gradient of the first weight layer of block 1."""
        name, layer = self.blocks[0].layers[0]
        pname = "kernel" if isinstance(layer, Conv2D) else "weight"
        return self.grads[f"blocks.0.{name}.{pname}"]

    # state -----------------------------------------------------------------

    def state(self) -> dict:
        """Copies of parameters and batch-norm buffers."""
        return {
            "params": self.flat_params.copy(),
            "buffers": {k: v.copy() for k, v in self.buffers.items()},
        }

    def load_state(self, state: dict) -> None:
        self.flat_params[...] = state["params"]
        for k, v in state["buffers"].items():
            self.buffers[k][...] = v


def to_checkpoint(net: ResNet, schedule=None, rng_states: dict | None = None, extra: dict | None = None) -> dict:
    """Self-describing, JSON-serializable snapshot of ``net``."""
    doc = {
        "format_version": CHECKPOINT_FORMAT,
        "network": net.spec.to_dict(),
        "schedule": None if schedule is None else schedule.to_dict(),
        "params": [
            {"path": k, "shape": list(v.shape), "data": v.ravel().tolist()}
            for k, v in net.params.items()
        ],
        "buffers": [
            {"path": k, "shape": list(v.shape), "data": v.ravel().tolist()}
            for k, v in net.buffers.items()
        ],
        "rng_states": rng_states or {},
    }
    if extra:
        doc["extra"] = extra
    return doc


def from_checkpoint(doc: dict):
    """Rebuild ``(net, schedule, rng_states)`` from :func:`to_checkpoint` output."""
    from .depth import SurvivalSchedule

    if doc.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    net = ResNet(NetworkSpec.from_dict(doc["network"]))
    for kind, table in (("params", net.params), ("buffers", net.buffers)):
        entries = doc[kind]
        if {e["path"] for e in entries} != set(table):
            raise ValueError(f"checkpoint {kind} do not match the network")
        for e in entries:
            target = table[e["path"]]
            if list(target.shape) != list(e["shape"]):
                raise ValueError(f"shape mismatch for {e['path']}")
            target[...] = np.asarray(e["data"], dtype=np.float64).reshape(e["shape"])
    schedule = None if doc.get("schedule") is None else SurvivalSchedule.from_dict(doc["schedule"])
    return net, schedule, doc.get("rng_states", {})


def network_forward(net: ResNet, x: np.ndarray, mode=ConstantDepth()):
    return net.forward(x, mode)


def network_backward(net: ResNet, rec: ForwardRecord, dlogits: np.ndarray):
    return net.backward(rec, dlogits)


def resblock_forward(block: ResBlock, h_prev: np.ndarray, gate: int = 1, scale: float = 1.0, train: bool = True):
    return block.forward(h_prev, gate, scale, train)

