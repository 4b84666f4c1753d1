"""Network assembly and structural accounting.

Three architectures are built here:

* ``r2`` -- classifier: stem -> cell(w) -> invpool -> cell(4w) -> head,
  pre-activation residual cells that average-pool after step ceil(s/2).
* ``r3`` -- denoiser: stem -> three conv-BN-ReLU cells -> 3x3 conv head,
  residual output (prediction = input + residual).
* ``r4`` -- classifier: four transition+cell groups (widths doubling up
  to 512) with non-recurrent downsampling transitions, as in a 34-layer
  residual network whose repeated blocks are replaced by recurrent cells.

Also houses the untied-expansion oracle and parameter/depth/FLOP reports
derived purely from a :class:`NetworkSpec`.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .autodiff import Parameter, Tensor
from .layers import (BnGroup, CellBody, ClassifierHead, DenoiseHead, Stem,
                     he_conv, run_cell_body)
from .rc import BN_MODES, BnBank, RcCell, unroll

ARCHS = ("r2", "r3", "r4")
CELL_KIND_BY_ARCH = {"r2": "preact_resblock", "r3": "conv_bn_relu",
                     "r4": "preact_resblock"}
DENOISE_SCALE = 255.0  # images stay on the 0-255 scale; see forward()


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative description sufficient to rebuild a network and to
    count its parameters, depth, and FLOPs."""

    arch: str
    task: str
    bn_mode: str
    max_step: int
    widths: tuple[int, ...]
    image_shape: tuple[int, int, int]  # (C, H, W)
    num_classes: int | None = None
    precision: str = "float32"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "image_shape",
                           tuple(int(v) for v in self.image_shape))
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch '{self.arch}'")
        if self.bn_mode not in BN_MODES:
            raise ValueError(f"unknown bn_mode '{self.bn_mode}'")
        if self.max_step < 1:
            raise ValueError(f"max_step must be >= 1, got {self.max_step}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32/float64, got "
                             f"'{self.precision}'")
        expected_task = "denoise" if self.arch == "r3" else "classify"
        if self.task != expected_task:
            raise ValueError(f"arch '{self.arch}' implies task "
                             f"'{expected_task}', got '{self.task}'")
        if self.arch == "r2":
            if len(self.widths) != 2 or self.widths[1] != 4 * self.widths[0]:
                raise ValueError(
                    f"r2 needs widths (w, 4w) because invpool quadruples "
                    f"channels; got {self.widths}")
        elif self.arch == "r3":
            if len(self.widths) != 3 or len(set(self.widths)) != 1:
                raise ValueError(f"r3 needs three equal widths, got {self.widths}")
        else:
            if len(self.widths) != 4:
                raise ValueError(f"r4 needs four widths, got {self.widths}")
        if self.task == "classify":
            if not self.num_classes or self.num_classes < 2:
                raise ValueError("classification needs num_classes >= 2")
        if len(self.image_shape) != 3 or any(v < 1 for v in self.image_shape):
            raise ValueError(f"bad image_shape {self.image_shape}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @property
    def cell_kind(self) -> str:
        return CELL_KIND_BY_ARCH[self.arch]

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "task": self.task,
            "bn_mode": self.bn_mode,
            "max_step": self.max_step,
            "widths": list(self.widths),
            "image_shape": list(self.image_shape),
            "num_classes": self.num_classes,
            "precision": self.precision,
            "bn_eps": self.bn_eps,
            "bn_momentum": self.bn_momentum,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkSpec":
        return NetworkSpec(
            arch=d["arch"], task=d["task"], bn_mode=d["bn_mode"],
            max_step=int(d["max_step"]), widths=tuple(d["widths"]),
            image_shape=tuple(d["image_shape"]),
            num_classes=d.get("num_classes"),
            precision=d.get("precision", "float32"),
            bn_eps=float(d.get("bn_eps", 1e-5)),
            bn_momentum=float(d.get("bn_momentum", 0.1)),
        )


# ---------------------------------------------------------------------------
# module wrappers

class RcCellModule:
    recurrent = True

    def __init__(self, cell: RcCell):
        self.cell = cell

    def named_parameters(self, prefix):
        for q, w in enumerate(self.cell.body.convs):
            yield f"{prefix}.conv{q}.weight", w
        for name, g in self.named_bn_groups(prefix):
            yield f"{name}.gamma", g.gamma
            yield f"{name}.beta", g.beta

    def named_bn_groups(self, prefix):
        bank = self.cell.bank
        for addr in range(bank.n_addresses):
            aname = bank.address_name(addr)
            for slot in range(bank.slots):
                yield f"{prefix}.bank.{aname}.slot{slot}", bank.groups[addr][slot]


class InvPoolModule:
    recurrent = False

    def apply(self, x, step, training, update_stats):
        return F.invpool(x)

    def named_parameters(self, prefix):
        return iter(())

    def named_bn_groups(self, prefix):
        return iter(())


class PoolModule:
    recurrent = False

    def apply(self, x, step, training, update_stats):
        return F.avgpool2d(x)

    def named_parameters(self, prefix):
        return iter(())

    def named_bn_groups(self, prefix):
        return iter(())


class TransitionModule:
    """Non-recurrent pre-activation block between cell groups.

    Width changes and 2x downsampling happen here (average pool followed
    by stride-1 convs, which keeps every conv's output extent exact; the
    shortcut pools and projects with a 1x1 conv). When the upstream cell
    is cost-adjustable, every BN layer holds one group per unified step,
    because the block's input statistics depend on how far upstream
    cells were unrolled.
    """

    recurrent = False

    def __init__(self, in_ch: int, out_ch: int, downsample: bool,
                 per_step_groups: int, rng, dtype, use_bn: bool = True,
                 eps: float = 1e-5, momentum: float = 0.1):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.downsample = downsample
        self.use_bn = use_bn
        n = per_step_groups if use_bn else 0
        self.bn1 = [BnGroup.create(in_ch, dtype, eps, momentum) for _ in range(n)]
        self.bn2 = [BnGroup.create(out_ch, dtype, eps, momentum) for _ in range(n)]
        self.conv1 = he_conv(rng, out_ch, in_ch, 3, dtype)
        self.conv2 = he_conv(rng, out_ch, out_ch, 3, dtype)
        self.proj = (he_conv(rng, out_ch, in_ch, 1, dtype)
                     if in_ch != out_ch else None)

    def _bn(self, x, groups, step, training, update_stats):
        if not self.use_bn:
            return x
        k = step - 1 if len(groups) > 1 else 0
        return F.batchnorm2d(x, groups[k], training, update_stats)

    def apply(self, x, step, training, update_stats):
        h = F.relu(self._bn(x, self.bn1, step, training, update_stats))
        if self.downsample:
            h = F.avgpool2d(h)
        if self.proj is not None:
            shortcut = F.conv2d(h, self.proj)
        elif self.downsample:
            shortcut = F.avgpool2d(x)
        else:
            shortcut = x
        m = F.conv2d(h, self.conv1, stride=1, padding=1)
        m = F.relu(self._bn(m, self.bn2, step, training, update_stats))
        m = F.conv2d(m, self.conv2, stride=1, padding=1)
        return F.add(shortcut, m)

    def named_parameters(self, prefix):
        for name, g in self.named_bn_groups(prefix):
            yield f"{name}.gamma", g.gamma
            yield f"{name}.beta", g.beta
        yield f"{prefix}.conv1.weight", self.conv1
        yield f"{prefix}.conv2.weight", self.conv2
        if self.proj is not None:
            yield f"{prefix}.proj.weight", self.proj

    def named_bn_groups(self, prefix):
        for tag, groups in (("bn1", self.bn1), ("bn2", self.bn2)):
            if len(groups) == 1:
                yield f"{prefix}.{tag}", groups[0]
            else:
                for s, g in enumerate(groups, start=1):
                    yield f"{prefix}.{tag}.s{s}", g


class UntiedCellStep:
    """One unrolled depth of a cell with its own weight/group copies."""

    recurrent = False

    def __init__(self, body: CellBody, groups):
        self.body = body
        self.groups = groups

    def apply(self, x, step, training, update_stats):
        return run_cell_body(self.body, x, self.groups, training, update_stats)

    def named_parameters(self, prefix):
        for q, w in enumerate(self.body.convs):
            yield f"{prefix}.conv{q}.weight", w
        for name, g in self.named_bn_groups(prefix):
            yield f"{name}.gamma", g.gamma
            yield f"{name}.beta", g.beta

    def named_bn_groups(self, prefix):
        for slot, g in enumerate(self.groups or []):
            yield f"{prefix}.bn.slot{slot}", g


# ---------------------------------------------------------------------------
# networks

class Network:
    """Ordered module pipeline; recurrent modules unroll the unified step."""

    def __init__(self, spec: NetworkSpec, modules: list):
        self.spec = spec
        self.modules = modules  # list of (name, module)
        self.max_step = spec.max_step
        self.trained_support: list[int] | None = None

    def forward(self, x, step: int, training: bool,
                update_stats: bool | None = None,
                collect_cell: str | None = None,
                collect: list | None = None) -> Tensor:
        """Run the pipeline at unified step ``step``.

        Denoise networks return the full prediction
        ``input + 255 * f(input / 255)`` on the 0-255 scale, so a zeroed
        head reproduces the input exactly.
        """
        if update_stats is None:
            update_stats = training
        if not 1 <= step <= self.max_step:
            raise ValueError(f"step {step} outside [1, {self.max_step}]")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.spec.dtype))
        elif x.dtype != self.spec.dtype:
            x = Tensor(x.data.astype(self.spec.dtype))
        denoise = self.spec.task == "denoise"
        x0 = x
        h = Tensor(x.data * self.spec.dtype(1.0 / DENOISE_SCALE)) if denoise else x
        for name, mod in self.modules:
            if mod.recurrent:
                cl = collect if collect_cell == name else None
                h = unroll(mod.cell, h, step, training, update_stats, collect=cl)
            else:
                h = mod.apply(h, step, training, update_stats)
        if denoise:
            h = F.add(x0, F.scale(h, DENOISE_SCALE))
        return h

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for name, mod in self.modules:
            for pname, p in mod.named_parameters(name):
                out[pname] = p
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def named_bn_groups(self) -> dict[str, BnGroup]:
        out: dict[str, BnGroup] = {}
        for name, mod in self.modules:
            for gname, g in mod.named_bn_groups(name):
                out[gname] = g
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for gname, g in self.named_bn_groups().items():
            out[f"{gname}.running_mean"] = g.running_mean
            out[f"{gname}.running_var"] = g.running_var
        return out

    def cells(self) -> dict[str, RcCell]:
        return {name: mod.cell for name, mod in self.modules if mod.recurrent}


class ExpandedNetwork:
    """Untied standard feedforward network produced by expansion."""

    def __init__(self, task: str, dtype, modules: list):
        self.task = task
        self.dtype = dtype
        self.modules = modules

    def forward(self, x, training: bool = False,
                update_stats: bool = False) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        denoise = self.task == "denoise"
        x0 = x
        h = Tensor(x.data * self.dtype(1.0 / DENOISE_SCALE)) if denoise else x
        for name, mod in self.modules:
            h = mod.apply(h, 1, training, update_stats)
        if denoise:
            h = F.add(x0, F.scale(h, DENOISE_SCALE))
        return h

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for name, mod in self.modules:
            for pname, p in mod.named_parameters(name):
                out[pname] = p
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())


# ---------------------------------------------------------------------------
# builders

def _banked(spec: NetworkSpec) -> bool:
    # downstream-of-a-cell non-recurrent blocks get per-step groups only
    # when the unified step varies at inference time
    return spec.bn_mode == "double_independent"


def build_network(spec: NetworkSpec, seed: int = 0,
                  rng: np.random.Generator | None = None) -> Network:
    """Construct a network; weight init draws come from ``rng``/``seed``."""
    if rng is None:
        rng = np.random.default_rng(seed)
    if spec.arch == "r2":
        return _build_r2(spec, rng)
    if spec.arch == "r3":
        return _build_r3(spec, rng)
    return _build_r4(spec, rng)


def _make_cell(spec: NetworkSpec, width: int, rng,
               pool_after_half: bool) -> RcCellModule:
    body = CellBody.create(spec.cell_kind, width, rng, spec.dtype)
    bank = BnBank(spec.bn_mode, spec.max_step, body.bn_slots, width,
                  spec.dtype, spec.bn_eps, spec.bn_momentum)
    return RcCellModule(RcCell(body, bank, pool_after_half))


def _build_r2(spec: NetworkSpec, rng) -> Network:
    c = spec.image_shape[0]
    w1, w2 = spec.widths
    mods = [
        ("stem", Stem(c, w1, rng, spec.dtype)),
        ("cell1", _make_cell(spec, w1, rng, pool_after_half=True)),
        ("invpool", InvPoolModule()),
        ("cell2", _make_cell(spec, w2, rng, pool_after_half=True)),
        ("head", ClassifierHead(w2, spec.num_classes, rng, spec.dtype,
                                use_bn=spec.bn_mode != "none",
                                per_step=_banked(spec), max_step=spec.max_step,
                                eps=spec.bn_eps, momentum=spec.bn_momentum)),
    ]
    return Network(spec, mods)


def _build_r3(spec: NetworkSpec, rng) -> Network:
    c = spec.image_shape[0]
    w = spec.widths[0]
    mods: list = [("stem", Stem(c, w, rng, spec.dtype))]
    for i in range(1, 4):
        mods.append((f"cell{i}", _make_cell(spec, w, rng, pool_after_half=False)))
    mods.append(("head", DenoiseHead(w, c, rng, spec.dtype)))
    return Network(spec, mods)


def _build_r4(spec: NetworkSpec, rng) -> Network:
    c = spec.image_shape[0]
    widths = spec.widths
    use_bn = spec.bn_mode != "none"
    banked = spec.max_step if _banked(spec) else 1
    mods: list = [("stem", Stem(c, widths[0], rng, spec.dtype))]
    in_ch = widths[0]
    for i, w in enumerate(widths, start=1):
        # the first transition follows the stem: fixed input statistics
        per_step = 1 if i == 1 else banked
        mods.append((f"trans{i}", TransitionModule(
            in_ch, w, downsample=i > 1, per_step_groups=per_step,
            rng=rng, dtype=spec.dtype, use_bn=use_bn,
            eps=spec.bn_eps, momentum=spec.bn_momentum)))
        mods.append((f"cell{i}", _make_cell(spec, w, rng, pool_after_half=False)))
        in_ch = w
    mods.append(("head", ClassifierHead(
        widths[-1], spec.num_classes, rng, spec.dtype, use_bn=use_bn,
        per_step=_banked(spec), max_step=spec.max_step,
        eps=spec.bn_eps, momentum=spec.bn_momentum)))
    return Network(spec, mods)


# ---------------------------------------------------------------------------
# expansion oracle

def expand_to_standard(network: Network, step: int) -> ExpandedNetwork:
    """Untie an RC network into the standard feedforward network that an
    ``step``-step unroll computes: ``step`` value-copies of each cell's
    conv weights with the step-j BN groups installed at depth j.

    Rejected for shared BN (one set of running statistics cannot serve
    every depth) and for BN-free networks (no per-step groups to
    install). Nothing is aliased with the source network.
    """
    spec = network.spec
    if spec.bn_mode not in ("independent", "double_independent"):
        raise ValueError(
            f"expansion requires per-step BN groups; bn_mode "
            f"'{spec.bn_mode}' cannot be expanded")
    if not 1 <= step <= spec.max_step:
        raise ValueError(f"step {step} outside [1, {spec.max_step}]")

    mods: list = []
    for name, mod in network.modules:
        if mod.recurrent:
            cell = mod.cell
            pool_at = (step + 1) // 2 if cell.pool_after_half else 0
            for j in range(1, step + 1):
                groups = [g.copy() for g in cell.bank.select(step, j)]
                mods.append((f"{name}.depth{j}",
                             UntiedCellStep(cell.body.copy_untied(), groups)))
                if j == pool_at:
                    mods.append((f"{name}.pool{j}", PoolModule()))
        elif isinstance(mod, TransitionModule):
            m2 = copy.deepcopy(mod)
            if m2.use_bn:
                k = step - 1 if len(mod.bn1) > 1 else 0
                m2.bn1 = [m2.bn1[k]]
                m2.bn2 = [m2.bn2[k]]
            mods.append((name, m2))
        elif isinstance(mod, ClassifierHead):
            m2 = copy.deepcopy(mod)
            if m2.use_bn:
                k = step - 1 if m2.per_step else 0
                m2.bn_groups = [m2.bn_groups[k]]
                m2.per_step = False
            mods.append((name, m2))
        else:
            mods.append((name, copy.deepcopy(mod)))
    return ExpandedNetwork(spec.task, spec.dtype, mods)


# ---------------------------------------------------------------------------
# BN export

def bn_table(network: Network) -> list[tuple]:
    """One row per (module, address step, address index, slot, channel)
    over every BN group in the network: cell banks plus transition/head
    groups. Step/index are 0 where not applicable (shared groups, the
    index of non-bank groups)."""
    rows: list[tuple] = []

    def emit(module, step, index, slot, group):
        for ch in range(group.channels):
            rows.append((module, step, index, slot, ch,
                         repr(float(group.gamma.data[ch])),
                         repr(float(group.beta.data[ch])),
                         repr(float(group.running_mean[ch])),
                         repr(float(group.running_var[ch]))))

    for name, mod in network.modules:
        if mod.recurrent:
            bank = mod.cell.bank
            for addr, (s, j) in enumerate(bank.address_labels()):
                for slot in range(bank.slots):
                    emit(name, s, j, slot, bank.groups[addr][slot])
        elif isinstance(mod, TransitionModule):
            for slot, groups in enumerate((mod.bn1, mod.bn2)):
                if len(groups) == 1:
                    emit(name, 0, 0, slot, groups[0])
                else:
                    for s, g in enumerate(groups, start=1):
                        emit(name, s, 0, slot, g)
        elif isinstance(mod, ClassifierHead) and mod.use_bn:
            if mod.per_step:
                for s, g in enumerate(mod.bn_groups, start=1):
                    emit(name, s, 0, 0, g)
            else:
                emit(name, 0, 0, 0, mod.bn_groups[0])
    return rows


# ---------------------------------------------------------------------------
# cost accounting

@dataclass
class CostReport:
    """Structural accounting derived purely from a NetworkSpec.

    ``bn_params`` counts learned scalars only (gamma/beta: 2C per group);
    running statistics are buffers. ``flops_per_step`` counts conv/linear
    multiply-accumulates per image; BN/ReLU/pool costs are excluded (they
    are a very small proportion of the total).
    """

    conv_params: int
    bn_params: int
    other_params: int
    total_params: int
    unrolled_depth: int
    flops_per_step: dict[int, int]


def _bank_addresses(mode: str, m: int) -> int:
    return {"none": 0, "shared": 1, "independent": m,
            "double_independent": m * (m + 1) // 2}[mode]


def cost_report(spec: NetworkSpec) -> CostReport:
    """Count parameters, unrolled depth, and per-step conv/linear MACs."""
    c, h, w = spec.image_shape
    m = spec.max_step
    use_bn = spec.bn_mode != "none"
    banked = m if _banked(spec) else 1
    cell_addr = _bank_addresses(spec.bn_mode, m)
    slots = 2 if spec.cell_kind == "preact_resblock" else 1

    conv = 0
    bn = 0
    other = 0

    if spec.arch == "r2":
        w1, w2 = spec.widths
        conv += w1 * c * 9 + w1                       # stem (biased)
        conv += 2 * w1 * w1 * 9 + 2 * w2 * w2 * 9     # shared cell convs
        bn += (cell_addr * slots) * 2 * (w1 + w2)
        if use_bn:
            bn += banked * 2 * w2                     # head BN
        other += spec.num_classes * w2 + spec.num_classes
        depth = 4 * m + 2
    elif spec.arch == "r3":
        width = spec.widths[0]
        conv += width * c * 9 + width                 # stem
        conv += 3 * width * width * 9                 # one shared conv per cell
        conv += c * width * 9 + c                     # denoise head conv
        bn += (cell_addr * slots) * 2 * (3 * width)
        depth = 3 * m + 2
    else:  # r4
        widths = spec.widths
        conv += widths[0] * c * 9 + widths[0]
        in_ch = widths[0]
        for i, width in enumerate(widths, start=1):
            conv += width * in_ch * 9 + width * width * 9   # transition convs
            if in_ch != width:
                conv += width * in_ch                       # 1x1 projection
            conv += 2 * width * width * 9                   # shared cell convs
            if use_bn:
                per_step = 1 if i == 1 else banked
                bn += per_step * 2 * (in_ch + width)        # transition BN
            bn += (cell_addr * slots) * 2 * width
            in_ch = width
        if use_bn:
            bn += banked * 2 * widths[-1]                   # head BN
        other += spec.num_classes * widths[-1] + spec.num_classes
        depth = 8 * m + 10

    flops = {s: _flops_at_step(spec, s) for s in range(1, m + 1)}
    return CostReport(conv_params=conv, bn_params=bn, other_params=other,
                      total_params=conv + bn + other, unrolled_depth=depth,
                      flops_per_step=flops)


def _flops_at_step(spec: NetworkSpec, s: int) -> int:
    """Conv/linear multiply-accumulates for one image at unified step s."""
    c, h, w = spec.image_shape
    macs = 0

    def conv_macs(out_ch, in_ch, k, hh, ww):
        return out_ch * in_ch * k * k * hh * ww

    if spec.arch == "r2":
        w1, w2 = spec.widths
        macs += conv_macs(w1, c, 3, h, w)
        hh, ww = h, w
        pool_at = (s + 1) // 2
        for j in range(1, s + 1):
            macs += 2 * conv_macs(w1, w1, 3, hh, ww)
            if j == pool_at:
                hh, ww = hh // 2, ww // 2
        hh, ww = hh // 2, ww // 2                       # invpool
        for j in range(1, s + 1):
            macs += 2 * conv_macs(w2, w2, 3, hh, ww)
            if j == pool_at:
                hh, ww = hh // 2, ww // 2
        macs += w2 * spec.num_classes
    elif spec.arch == "r3":
        width = spec.widths[0]
        macs += conv_macs(width, c, 3, h, w)
        macs += 3 * s * conv_macs(width, width, 3, h, w)
        macs += conv_macs(c, width, 3, h, w)
    else:
        widths = spec.widths
        macs += conv_macs(widths[0], c, 3, h, w)
        hh, ww = h, w
        in_ch = widths[0]
        for i, width in enumerate(widths, start=1):
            if i > 1:
                hh, ww = hh // 2, ww // 2
            macs += conv_macs(width, in_ch, 3, hh, ww)
            macs += conv_macs(width, width, 3, hh, ww)
            if in_ch != width:
                macs += conv_macs(width, in_ch, 1, hh, ww)
            macs += 2 * s * conv_macs(width, width, 3, hh, ww)
            in_ch = width
        macs += widths[-1] * spec.num_classes
    return macs
