"""Declarative builders for the two toy architectures.

Both models are built from plain block lists into a Model whose forward
pass returns (main logits, auxiliary logits). The multi-branch module
concatenates four parallel paths (1x1, reduced 3x3, reduced 5x5, pooled
1x1) with paddings chosen so spatial dims are preserved; the plain
stacked net is blocks of 3x3 convolutions each followed by 2x2/stride-2
pooling, then three fully-connected layers.

Default toy depth is three multi-branch modules with one auxiliary head;
full-scale depths remain constructible through the same spec.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .errors import ContractError, DimensionError, ValidationError

BRANCH_KINDS = ("conv1x1", "reduce_then_conv3x3", "reduce_then_conv5x5",
                "pool3x3_then_conv1x1")
FREEZE_MODES = ("all_layers", "last_fc_only")


@dataclass(frozen=True)
class InceptionBranchSpec:
    kind: str
    out_channels: int
    reduce_channels: int | None = None

    def __post_init__(self):
        if self.kind not in BRANCH_KINDS:
            raise ValidationError(f"unknown branch kind {self.kind!r}")
        if self.out_channels < 1:
            raise ValidationError(f"out_channels must be >= 1, got {self.out_channels}")
        needs_reduce = self.kind in ("reduce_then_conv3x3", "reduce_then_conv5x5")
        if needs_reduce and (self.reduce_channels is None or self.reduce_channels < 1):
            raise ValidationError(f"{self.kind} requires positive reduce_channels")
        if not needs_reduce and self.reduce_channels is not None:
            raise ValidationError(f"{self.kind} takes no reduce_channels")


@dataclass
class ModelSpec:
    """Block list plus head/aux configuration for the multi-branch net.

    blocks entries:
      ("conv", out_channels, kernel, stride, padding)
      ("pool", window, stride, padding)
      ("inception", (four InceptionBranchSpec, one of each kind))
    aux_heads: (attach_after_block_index, discount_weight) pairs.
    """

    input_shape: tuple[int, int, int]
    num_classes: int
    blocks: tuple
    aux_heads: tuple = ()
    freeze_mask: dict | None = None

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {self.num_classes}")
        for idx, discount in self.aux_heads:
            if not 0.0 < discount <= 1.0:
                raise ValidationError(f"aux discount must be in (0,1], got {discount}")
            if not 0 <= idx < len(self.blocks):
                raise ContractError(f"aux attachment index {idx} out of range for {len(self.blocks)} blocks")


def branch_weight_count(in_channels: int, branch: InceptionBranchSpec) -> int:
    """Weight elements (biases excluded) of one branch."""
    if branch.kind == "conv1x1":
        return in_channels * branch.out_channels
    if branch.kind == "reduce_then_conv3x3":
        return in_channels * branch.reduce_channels + branch.reduce_channels * branch.out_channels * 9
    if branch.kind == "reduce_then_conv5x5":
        return in_channels * branch.reduce_channels + branch.reduce_channels * branch.out_channels * 25
    return in_channels * branch.out_channels  # pool projection


class _ConvUnit:
    """conv + relu with owned parameters."""

    def __init__(self, name, in_ch, out_ch, kernel, stride, padding, rng, dtype, params):
        self.stride = stride
        self.padding = padding
        self.w = ag.scaled_uniform((out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel,
                                   rng, dtype=dtype, name=f"{name}.w")
        self.b = ag.Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True, name=f"{name}.b")
        params[self.w.name] = self.w
        params[self.b.name] = self.b

    def apply(self, x):
        return ag.relu(ag.conv2d(x, self.w, self.b, self.stride, self.padding))


class _LinearUnit:
    def __init__(self, name, in_dim, out_dim, rng, dtype, params):
        self.w = ag.scaled_uniform((out_dim, in_dim), in_dim, rng, dtype=dtype, name=f"{name}.w")
        self.b = ag.Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True, name=f"{name}.b")
        params[self.w.name] = self.w
        params[self.b.name] = self.b

    def apply(self, x):
        return ag.linear(x, self.w, self.b)


class InceptionModule:
    """Four parallel branches concatenated along channels.

    Paddings (1x1: 0, 3x3: 1, 5x5: 2, pool: stride 1 pad 1) keep all
    branches at the input's spatial size.
    """

    def __init__(self, in_channels: int, branches: Sequence[InceptionBranchSpec],
                 rng=None, dtype=np.float32, name: str = "inception", params=None):
        if rng is None:
            rng = np.random.default_rng(0)
        if params is None:
            params = OrderedDict()
        branches = tuple(branches)
        if len(branches) != 4 or {b.kind for b in branches} != set(BRANCH_KINDS):
            raise ContractError("need exactly four branches, one of each kind")
        for b in branches:
            if b.reduce_channels is not None and b.reduce_channels >= in_channels:
                raise ContractError(
                    f"reduce_channels {b.reduce_channels} must be < in_channels {in_channels}")
        self.in_channels = in_channels
        self.branches = branches
        self.out_channels = sum(b.out_channels for b in branches)
        self.params = params
        self._units = []
        for i, b in enumerate(branches):
            prefix = f"{name}.b{i}"
            if b.kind == "conv1x1":
                unit = ("single", _ConvUnit(prefix, in_channels, b.out_channels, 1, 1, 0,
                                            rng, dtype, params))
            elif b.kind == "reduce_then_conv3x3":
                unit = ("reduced", _ConvUnit(f"{prefix}.reduce", in_channels, b.reduce_channels,
                                             1, 1, 0, rng, dtype, params),
                        _ConvUnit(f"{prefix}.conv", b.reduce_channels, b.out_channels,
                                  3, 1, 1, rng, dtype, params))
            elif b.kind == "reduce_then_conv5x5":
                unit = ("reduced", _ConvUnit(f"{prefix}.reduce", in_channels, b.reduce_channels,
                                             1, 1, 0, rng, dtype, params),
                        _ConvUnit(f"{prefix}.conv", b.reduce_channels, b.out_channels,
                                  5, 1, 2, rng, dtype, params))
            else:
                unit = ("pooled", _ConvUnit(f"{prefix}.proj", in_channels, b.out_channels,
                                            1, 1, 0, rng, dtype, params))
            self._units.append(unit)

    def apply(self, x):
        outs = []
        for unit in self._units:
            if unit[0] == "single":
                outs.append(unit[1].apply(x))
            elif unit[0] == "reduced":
                outs.append(unit[2].apply(unit[1].apply(x)))
            else:
                outs.append(unit[1].apply(ag.maxpool2d(x, 3, 1, 1)))
        return ag.concat_channels(outs)

    def weight_count(self) -> int:
        return sum(branch_weight_count(self.in_channels, b) for b in self.branches)


def build_inception_module(in_channels: int, branches, rng=None,
                           dtype=np.float32, name: str = "inception") -> InceptionModule:
    return InceptionModule(in_channels, branches, rng=rng, dtype=dtype, name=name)


class Model:
    """A built network: ordered parameters plus an interpretable block list."""

    def __init__(self, arch, input_shape, num_classes):
        self.arch = arch
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.params: "OrderedDict[str, ag.Tensor]" = OrderedDict()
        self._blocks = []           # ("conv", unit) | ("pool", w, s, p) | ("inception", module)
        self._aux = []              # (block_idx, discount, _LinearUnit)
        self._fcs = []              # classifier _LinearUnits, last one is the final layer
        self.weighted_layer_count = 0
        self.feature_shape = None   # (C,H,W) entering the classifier

    # -- parameter plumbing

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def trainable_parameters(self):
        return [p for p in self.params.values() if p.requires_grad]

    @property
    def final_param_names(self):
        last = self._fcs[-1]
        return (last.w.name, last.b.name)

    @property
    def freeze_mask(self):
        return {name: not p.requires_grad for name, p in self.params.items()}

    def state_dict(self):
        return OrderedDict((name, p.data.copy()) for name, p in self.params.items())

    def load_state_dict(self, state):
        for name, p in self.params.items():
            if name not in state:
                raise ValidationError(f"checkpoint is missing parameter {name}")
            arr = state[name]
            arr = arr.data if isinstance(arr, ag.Tensor) else np.asarray(arr)
            if tuple(arr.shape) != tuple(p.shape):
                raise ValidationError(f"parameter {name}: shape {arr.shape} != {tuple(p.shape)}")
            p.data[...] = arr.astype(p.data.dtype)

    def save(self, path):
        ag.save_checkpoint(path, [(n, p) for n, p in self.params.items()])

    def load(self, path):
        self.load_state_dict(ag.load_checkpoint(path))

    # -- forward

    def forward(self, x: ag.Tensor):
        """Returns (main logits, list of auxiliary logits)."""
        if tuple(x.shape) != self.input_shape:
            raise DimensionError(f"input shape {tuple(x.shape)} != expected {self.input_shape}")
        aux_by_idx = {}
        for idx, discount, head in self._aux:
            aux_by_idx.setdefault(idx, []).append(head)
        aux_out = {}
        for i, block in enumerate(self._blocks):
            if block[0] == "conv":
                x = block[1].apply(x)
            elif block[0] == "pool":
                x = ag.maxpool2d(x, block[1], block[2], block[3])
            else:
                x = block[1].apply(x)
            for head in aux_by_idx.get(i, ()):
                aux_out[id(head)] = head.apply(ag.global_avg_pool(x))
        if self.arch == "inception":
            h = ag.global_avg_pool(x)
            main = self._fcs[0].apply(h)
        else:
            h = ag.flatten(x)
            for j, fc in enumerate(self._fcs):
                h = fc.apply(h)
                if j < len(self._fcs) - 1:
                    h = ag.relu(h)
            main = h
        auxes = [aux_out[id(head)] for _, _, head in self._aux]
        return main, auxes

    @property
    def aux_discounts(self):
        return [d for _, d, _ in self._aux]


def build_toy_inception_net(spec: ModelSpec, seed: int = 0,
                            dtype=np.float32) -> Model:
    rng = np.random.default_rng(seed)
    model = Model("inception", spec.input_shape, spec.num_classes)
    c, h, w = spec.input_shape
    weighted = 0
    for i, block in enumerate(spec.blocks):
        kind = block[0]
        if kind == "conv":
            _, out_ch, k, s, p = block
            unit = _ConvUnit(f"block{i}.conv", c, out_ch, k, s, p, rng, dtype, model.params)
            model._blocks.append(("conv", unit))
            c, h, w = out_ch, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            weighted += 1
        elif kind == "pool":
            _, win, s, p = block
            model._blocks.append(("pool", win, s, p))
            h, w = (h + 2 * p - win) // s + 1, (w + 2 * p - win) // s + 1
        elif kind == "inception":
            module = InceptionModule(c, block[1], rng=rng, dtype=dtype,
                                     name=f"block{i}", params=model.params)
            model._blocks.append(("inception", module))
            c = module.out_channels
            weighted += sum(2 if b.reduce_channels else 1 for b in module.branches)
        else:
            raise ValidationError(f"unknown block kind {kind!r}")
        if h < 1 or w < 1:
            raise ContractError(f"block {i} reduces spatial dims to {h}x{w}")
    model.feature_shape = (c, h, w)

    block_channels = []
    cc, hh, ww = spec.input_shape
    for block in spec.blocks:
        if block[0] == "conv":
            cc = block[1]
        elif block[0] == "inception":
            cc = sum(b.out_channels for b in block[1])
        block_channels.append(cc)
    for j, (idx, discount) in enumerate(spec.aux_heads):
        head = _LinearUnit(f"aux{j}", block_channels[idx], spec.num_classes,
                           rng, dtype, model.params)
        model._aux.append((idx, discount, head))
        weighted += 1
    model._fcs.append(_LinearUnit("head", c, spec.num_classes, rng, dtype, model.params))
    model.weighted_layer_count = weighted + 1
    if spec.freeze_mask:
        for name, frozen in spec.freeze_mask.items():
            if name in model.params:
                model.params[name].requires_grad = not frozen
    return model


def build_vgg_style_net(block_depths: Sequence[int], block_channels: Sequence[int],
                        num_classes: int, input_shape=(3, 224, 224),
                        hidden: int = 256, seed: int = 0, dtype=np.float32) -> Model:
    if len(block_depths) != len(block_channels):
        raise ContractError(f"{len(block_depths)} depths vs {len(block_channels)} channel counts")
    c, h, w = input_shape
    n_blocks = len(block_depths)
    if h % (2 ** n_blocks) or w % (2 ** n_blocks):
        raise ContractError(f"input {h}x{w} not divisible by 2^{n_blocks}")
    rng = np.random.default_rng(seed)
    model = Model("vgg", input_shape, num_classes)
    for bi, (depth, out_ch) in enumerate(zip(block_depths, block_channels)):
        for di in range(depth):
            unit = _ConvUnit(f"block{bi}.conv{di}", c, out_ch, 3, 1, 1, rng, dtype, model.params)
            model._blocks.append(("conv", unit))
            c = out_ch
        model._blocks.append(("pool", 2, 2, 0))
        h, w = h // 2, w // 2
    model.feature_shape = (c, h, w)
    flat = c * h * w
    model._fcs.append(_LinearUnit("fc1", flat, hidden, rng, dtype, model.params))
    model._fcs.append(_LinearUnit("fc2", hidden, hidden, rng, dtype, model.params))
    model._fcs.append(_LinearUnit("fc3", hidden, num_classes, rng, dtype, model.params))
    model.weighted_layer_count = sum(block_depths) + 3
    return model


def total_loss(main_loss: ag.Tensor, aux_losses: Sequence[ag.Tensor],
               discount: float) -> ag.Tensor:
    """main + discount * sum(aux); auxiliary terms apply during training only."""
    if not 0.0 < discount <= 1.0:
        raise ContractError(f"discount must be in (0,1], got {discount}")
    if not aux_losses:
        return main_loss
    acc = aux_losses[0]
    for a in aux_losses[1:]:
        acc = ag.add(acc, a)
    return ag.add(main_loss, ag.scale(acc, discount))


def apply_freeze_mode(model: Model, mode: str) -> Model:
    """all_layers trains everything; last_fc_only trains just the final classifier."""
    if mode not in FREEZE_MODES:
        raise ContractError(f"mode must be one of {FREEZE_MODES}, got {mode!r}")
    if not model._fcs:
        raise ContractError("model has no fully-connected layer")
    if mode == "all_layers":
        for p in model.params.values():
            p.requires_grad = True
    else:
        keep = set(model.final_param_names)
        for name, p in model.params.items():
            p.requires_grad = name in keep
    return model


# ---------------------------------------------------------------------------
# defaults and plain-text model configs

def default_toy_inception_spec(num_classes: int, input_shape=(3, 64, 64),
                               aux_discount: float = 0.3) -> ModelSpec:
    b = InceptionBranchSpec
    return ModelSpec(
        input_shape=input_shape,
        num_classes=num_classes,
        blocks=(
            ("conv", 16, 3, 1, 1),
            ("pool", 2, 2, 0),
            ("inception", (b("conv1x1", 8), b("reduce_then_conv3x3", 12, 8),
                           b("reduce_then_conv5x5", 6, 4), b("pool3x3_then_conv1x1", 6))),
            ("pool", 2, 2, 0),
            ("inception", (b("conv1x1", 12), b("reduce_then_conv3x3", 16, 12),
                           b("reduce_then_conv5x5", 8, 6), b("pool3x3_then_conv1x1", 12))),
            ("inception", (b("conv1x1", 16), b("reduce_then_conv3x3", 24, 16),
                           b("reduce_then_conv5x5", 8, 8), b("pool3x3_then_conv1x1", 16))),
        ),
        aux_heads=((4, aux_discount),),
    )


def default_toy_vgg_args(num_classes: int, input_shape=(3, 32, 32)) -> dict:
    return dict(block_depths=(1, 1), block_channels=(8, 16),
                num_classes=num_classes, input_shape=input_shape, hidden=64)


def _parse_kv(tokens):
    out = {}
    for t in tokens:
        if "=" not in t:
            raise ValidationError(f"expected key=value, got {t!r}")
        k, v = t.split("=", 1)
        out[k] = int(v)
    return out


def parse_model_config(text: str) -> dict:
    """Parse the line-based model description into builder arguments.

    Returns {"arch": "inception", "spec": ModelSpec} or
    {"arch": "vgg", **build_vgg_style_net kwargs}.
    """
    arch = None
    input_shape = None
    classes = None
    hidden = 256
    blocks = []
    aux = []
    depths = None
    channels = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        try:
            if key == "arch":
                arch = rest[0]
            elif key == "input":
                input_shape = tuple(int(v) for v in rest[0].split("x"))
            elif key == "classes":
                classes = int(rest[0])
            elif key == "hidden":
                hidden = int(rest[0])
            elif key == "depths":
                depths = tuple(int(v) for v in rest[0].split(","))
            elif key == "channels":
                channels = tuple(int(v) for v in rest[0].split(","))
            elif key == "aux":
                aux.append((int(rest[0]), float(rest[1])))
            elif key == "block":
                kind = rest[0]
                kv = _parse_kv(rest[1:])
                if kind == "conv":
                    blocks.append(("conv", kv["ch"], kv.get("k", 3), kv.get("s", 1), kv.get("p", 1)))
                elif kind == "pool":
                    blocks.append(("pool", kv.get("w", 2), kv.get("s", 2), kv.get("p", 0)))
                elif kind == "inception":
                    b = InceptionBranchSpec
                    blocks.append(("inception", (
                        b("conv1x1", kv["c1"]),
                        b("reduce_then_conv3x3", kv["c3"], kv["r3"]),
                        b("reduce_then_conv5x5", kv["c5"], kv["r5"]),
                        b("pool3x3_then_conv1x1", kv["pp"]),
                    )))
                else:
                    raise ValidationError(f"unknown block kind {kind!r}")
            else:
                raise ValidationError(f"unknown key {key!r}")
        except (IndexError, KeyError, ValueError) as exc:
            raise ValidationError(f"model config line {lineno}: {raw!r}: {exc}") from exc
    if arch not in ("inception", "vgg"):
        raise ValidationError(f"arch must be inception or vgg, got {arch!r}")
    if input_shape is None or classes is None:
        raise ValidationError("model config needs input and classes")
    if arch == "inception":
        spec = ModelSpec(input_shape=input_shape, num_classes=classes,
                         blocks=tuple(blocks), aux_heads=tuple(aux))
        return {"arch": "inception", "spec": spec}
    if depths is None or channels is None:
        raise ValidationError("vgg config needs depths and channels")
    return {"arch": "vgg", "block_depths": depths, "block_channels": channels,
            "num_classes": classes, "input_shape": input_shape, "hidden": hidden}


def build_from_config(text: str, seed: int = 0, dtype=np.float32) -> Model:
    cfg = parse_model_config(text)
    if cfg["arch"] == "inception":
        return build_toy_inception_net(cfg["spec"], seed=seed, dtype=dtype)
    kwargs = {k: v for k, v in cfg.items() if k != "arch"}
    return build_vgg_style_net(seed=seed, dtype=dtype, **kwargs)
