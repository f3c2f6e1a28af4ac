"""Multi-granulation cooperative networks.

A chain of U-Net style single-granulation networks (SGNs). Later SGNs see the
adapted outputs and per-layer features of earlier ones (cooperative
connection); SGN-1 is then re-run with everything fed back into it (back
connection), reusing its own weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    concat_channels,
    conv2d,
    depth_to_space,
    glorot_uniform,
    lrelu,
    max_pool2,
    scale,
    space_to_depth,
    tconv2d,
)

RESIDUAL = "residual"
DENSE = "dense"
N_BLOCKS = 9
REFERENCE_WIDTHS = (32, 64, 128, 256, 512, 256, 128, 64, 32)


@dataclass(frozen=True)
class FusionSpec:
    kind: str = RESIDUAL
    alpha_out: float = 1.0
    beta_coop: float = 1.0
    beta_back: float = 1.0

    @classmethod
    def residual(cls):
        return cls(RESIDUAL, 1.0, 1.0, 1.0)

    @classmethod
    def dense(cls):
        return cls(DENSE, 1.0, 1.0, 0.0)

    @classmethod
    def for_kind(cls, kind: str):
        kind = kind.lower()
        if kind in (RESIDUAL, "rmcn"):
            return cls.residual()
        if kind in (DENSE, "dmcn"):
            return cls.dense()
        raise ValueError(f"unknown fusion kind {kind!r}")

    def zeroed(self):
        """Diagnostic variant with every fusion weight set to 0."""
        return replace(self, alpha_out=0.0, beta_coop=0.0, beta_back=0.0)


@dataclass(frozen=True)
class McnConfig:
    n_sgn: int = 3
    fusion: FusionSpec = field(default_factory=FusionSpec.residual)
    in_channels: int = 4
    factor: int = 2
    block_widths: tuple = REFERENCE_WIDTHS
    width_divisor: int = 1
    back_connection: bool = True
    out_channels: int = 3

    def __post_init__(self):
        if self.n_sgn < 1:
            raise ValueError("n_sgn must be >= 1")
        if len(self.block_widths) != N_BLOCKS:
            raise ValueError(f"need exactly {N_BLOCKS} block widths")
        if self.in_channels not in (4, 9) or self.factor not in (2, 3):
            raise ValueError("in_channels/factor must be 4/2 (Bayer) or 9/3 (X-Trans)")

    @property
    def widths(self):
        return tuple(max(1, w // self.width_divisor) for w in self.block_widths)

    @classmethod
    def for_cfa(cls, kind: str, **kw):
        if kind == "xtrans":
            return cls(in_channels=9, factor=3, **kw)
        return cls(in_channels=4, factor=2, **kw)


def fuse(parts, weights, kind: str) -> Tensor:
    """Weighted residual sum or weighted channel concatenation."""
    parts = list(parts)
    weights = list(weights)
    if len(parts) != len(weights) or not parts:
        raise DimensionError("fuse needs one weight per part and at least one part")
    scaled = [p if w == 1.0 else scale(p, w) for p, w in zip(parts, weights)]
    if kind == RESIDUAL:
        shape = parts[0].shape
        for p in parts[1:]:
            if p.shape != shape:
                raise DimensionError(f"residual fusion needs equal shapes, got {shape} and {p.shape}")
        out = scaled[0]
        for p in scaled[1:]:
            out = out + p
        return out
    if kind == DENSE:
        return concat_channels(scaled)
    raise ValueError(f"unknown fusion kind {kind!r}")


class SGN:
    """One U-Net: four encoder blocks, a bottleneck, four decoder blocks and
    a sub-pixel head.

    ``in_slots`` and ``slots`` are the number of concatenated tensors the
    input and each layer carry under dense fusion (1 for residual).
    """

    def __init__(self, prefix, config: McnConfig, rng, in_slots=1, slots=1, dtype=np.float32):
        self.prefix = prefix
        self.config = config
        self.in_slots = in_slots
        self.slots = slots
        self.params = {}
        w = config.widths
        f = config.factor
        k = slots
        for j in range(N_BLOCKS):
            b = j + 1
            if j == 0:
                cin = in_slots * config.in_channels
            elif j < 5:
                cin = k * w[j - 1]
            else:
                self._add(f"block{b}.up", (k * w[j - 1], w[j], 2, 2), rng, dtype, bias=False,
                          fans=(k * w[j - 1] * 4, w[j] * 4))
                cin = w[j] + k * w[8 - j]
            self._add(f"block{b}.conv1", (w[j], cin, 3, 3), rng, dtype)
            self._add(f"block{b}.conv2", (w[j], w[j], 3, 3), rng, dtype)
        self._add("head", (config.out_channels * f * f, k * w[8], 1, 1), rng, dtype)
        # ICNR: every sub-pixel copy of a colour starts from the same filter,
        # so the initial output has no f x f checkerboard
        head = self.params[f"{prefix}.head.weight"]
        tied = head.data.reshape(config.out_channels, f * f, *head.shape[1:])
        tied[:] = tied[:, :1]
        head.data = tied.reshape(head.shape).copy()

    def _add(self, name, shape, rng, dtype, bias=True, fans=None):
        if fans is None:
            fans = (shape[1] * shape[2] * shape[3], shape[0] * shape[2] * shape[3])
        full = f"{self.prefix}.{name}"
        self.params[f"{full}.weight"] = Tensor(glorot_uniform(shape, rng, *fans, dtype=dtype),
                                               requires_grad=True)
        if bias:
            self.params[f"{full}.bias"] = Tensor(np.zeros(shape[0], dtype=dtype), requires_grad=True)

    def p(self, name):
        return self.params[f"{self.prefix}.{name}"]

    def _conv(self, name, x, pad=1):
        return conv2d(x, self.p(f"{name}.weight"), self.p(f"{name}.bias"), 1, pad)

    def forward(self, inputs, injected=None, kind=RESIDUAL, own_first=False):
        """Run the SGN.

        ``inputs`` is a list of (tensor, weight) fused into the first block's
        input. ``injected[j]`` is a list of (tensor, weight) fused with this
        SGN's own block-j output before it flows on. Under dense fusion
        missing slots are zero-filled so the weight shapes stay fixed.
        Returns (own block outputs, 3-channel full-resolution output).
        """
        if injected is not None and len(injected) != N_BLOCKS:
            raise DimensionError(f"injected must list {N_BLOCKS} layers, got {len(injected)}")
        x = self._fuse_input(inputs, kind)
        feats = []
        fused = []
        h = x
        for j in range(N_BLOCKS):
            b = j + 1
            if j == 0:
                h_in = h
            elif j < 5:
                h_in = max_pool2(h)
            else:
                up = tconv2d(h, self.p(f"block{b}.up.weight"), 2)
                skip = fused[8 - j]
                if up.shape[2:] != skip.shape[2:]:
                    raise DimensionError(f"decoder block {b}: upsampled {up.shape} vs skip {skip.shape}")
                h_in = concat_channels([up, skip])
            out = lrelu(self._conv(f"block{b}.conv1", h_in))
            out = lrelu(self._conv(f"block{b}.conv2", out))
            feats.append(out)
            h = self._fuse_layer(out, None if injected is None else injected[j], kind, own_first, j)
            fused.append(h)
        y = conv2d(h, self.p("head.weight"), self.p("head.bias"), 1, 0)
        return feats, depth_to_space(y, self.config.factor)

    def _check_inputs(self, inputs):
        shape = inputs[-1][0].shape
        if shape[1] != self.config.in_channels:
            raise DimensionError(
                f"{self.prefix}: expected {self.config.in_channels} input channels, got {shape[1]}")
        for t, _ in inputs:
            if t.shape != shape:
                raise DimensionError(f"{self.prefix}: input parts disagree: {t.shape} vs {shape}")
        h, w = shape[2], shape[3]
        if h % 16 or w % 16:
            raise DimensionError(f"{self.prefix}: packed input {h}x{w} must be divisible by 16")

    def _fuse_input(self, inputs, kind):
        if isinstance(inputs, Tensor):
            inputs = [(inputs, 1.0)]
        inputs = list(inputs)
        self._check_inputs(inputs)
        if kind == DENSE:
            missing = self.in_slots - len(inputs)
            if missing < 0:
                raise DimensionError(f"{self.prefix}: {len(inputs)} input parts exceed {self.in_slots} slots")
            zero = Tensor(np.zeros_like(inputs[-1][0].data))
            # zero slots stand in for absent adapted outputs, ahead of the raw input
            inputs = [(zero, 1.0)] * missing + inputs
        if len(inputs) == 1 and inputs[0][1] == 1.0:
            return inputs[0][0]
        return fuse([t for t, _ in inputs], [w for _, w in inputs], kind)

    def _fuse_layer(self, own, inj, kind, own_first, j):
        inj = list(inj or [])
        for t, _ in inj:
            if t.shape != own.shape:
                raise DimensionError(
                    f"{self.prefix} layer {j + 1}: injected {t.shape} does not match own {own.shape}")
        if kind == DENSE:
            missing = self.slots - 1 - len(inj)
            if missing < 0:
                raise DimensionError(f"{self.prefix} layer {j + 1}: too many injected features")
            inj = inj + [(Tensor(np.zeros_like(own.data)), 1.0)] * missing
        if not inj:
            return own
        parts = [(own, 1.0)] + inj if own_first else inj + [(own, 1.0)]
        return fuse([t for t, _ in parts], [w for _, w in parts], kind)


class Adapter:
    """space_to_depth then a 1x1 conv back to the packed input width."""

    def __init__(self, prefix, config: McnConfig, rng, dtype=np.float32):
        self.prefix = prefix
        self.factor = config.factor
        cin = config.out_channels * config.factor ** 2
        shape = (config.in_channels, cin, 1, 1)
        self.params = {
            f"{prefix}.weight": Tensor(glorot_uniform(shape, rng, cin, config.in_channels, dtype=dtype),
                                       requires_grad=True),
            f"{prefix}.bias": Tensor(np.zeros(config.in_channels, dtype=dtype), requires_grad=True),
        }
        self.out_channels = config.out_channels

    def __call__(self, out3: Tensor) -> Tensor:
        return adapt_output(self, out3)


def adapt_output(adapter: Adapter, out3: Tensor) -> Tensor:
    if out3.ndim != 4 or out3.shape[1] != adapter.out_channels:
        raise DimensionError(f"adapter expects {adapter.out_channels} channels, got shape {out3.shape}")
    x = space_to_depth(out3, adapter.factor)
    return conv2d(x, adapter.params[f"{adapter.prefix}.weight"],
                  adapter.params[f"{adapter.prefix}.bias"], 1, 0)


@dataclass
class McnOutputs:
    plain_output: Tensor
    outputs: list
    back_output: Tensor | None
    features: list
    back_features: list | None = None

    def supervised(self):
        """Outputs that enter the reconstruction and smoothness losses."""
        sup = list(self.outputs)
        if self.back_output is not None:
            sup.append(self.back_output)
        else:
            sup.insert(0, self.plain_output)
        return sup

    def named(self):
        names = {"sgn1": self.plain_output}
        for i, o in enumerate(self.outputs, start=2):
            names[f"sgn{i}"] = o
        if self.back_output is not None:
            names["sgn1b"] = self.back_output
        return names


class McnModel:
    def __init__(self, config: McnConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        n = config.n_sgn
        dense = config.fusion.kind == DENSE
        self.sgns = []
        for i in range(1, n + 1):
            if not dense:
                slots_in, slots = 1, 1
            elif i == 1:
                slots_in, slots = (n + 1, n) if n > 1 else (1, 1)
            else:
                slots_in, slots = i, i
            self.sgns.append(SGN(f"sgn{i}", config, rng, slots_in, slots, dtype))
        self.adapters = [Adapter(f"adapter{i}", config, rng, dtype) for i in range(1, n + 1)]

    @property
    def fusion(self) -> FusionSpec:
        return self.config.fusion

    def parameters(self) -> dict:
        params = {}
        for s in self.sgns:
            params.update(s.params)
        for a in self.adapters:
            params.update(a.params)
        return params

    def state_dict(self) -> dict:
        return {k: v.data for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict, strict: bool = True):
        params = self.parameters()
        missing = [k for k in params if k not in state]
        if strict and missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        for k, t in params.items():
            if k not in state:
                continue
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise DimensionError(f"{k}: checkpoint shape {arr.shape} vs model {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)

    def astype(self, dtype):
        for t in self.parameters().values():
            t.data = t.data.astype(dtype)
        return self

    def zero_grad(self):
        for t in self.parameters().values():
            t.grad = None

    def __call__(self, x, fusion: FusionSpec | None = None):
        return mcn_forward(self, x, fusion)


def sgn_forward(sgn: SGN, input, injected=None, fusion: FusionSpec | None = None, own_first=False):
    kind = (fusion or FusionSpec.residual()).kind
    return sgn.forward(input, injected, kind, own_first)


def mcn_forward(model: McnModel, x: Tensor, fusion: FusionSpec | None = None) -> McnOutputs:
    fs = fusion or model.config.fusion
    kind = fs.kind
    n = model.config.n_sgn
    sgn1 = model.sgns[0]
    feats1, out1 = sgn1.forward([(x, 1.0)], None, kind, own_first=True)
    features = [feats1]
    adapted = [model.adapters[0](out1)]
    outputs = []
    for i in range(1, n):
        inputs = [(a, fs.alpha_out) for a in adapted] + [(x, 1.0)]
        injected = [[(features[k][j], fs.beta_coop) for k in range(i)] for j in range(N_BLOCKS)]
        feats, out = model.sgns[i].forward(inputs, injected, kind, own_first=False)
        features.append(feats)
        outputs.append(out)
        adapted.append(model.adapters[i](out))
    back_output = back_features = None
    if model.config.back_connection and n > 1:
        inputs = [(a, fs.alpha_out) for a in adapted] + [(x, 1.0)]
        injected = [[(features[k][j], fs.beta_back) for k in range(1, n)] for j in range(N_BLOCKS)]
        back_features, back_output = sgn1.forward(inputs, injected, kind, own_first=True)
    return McnOutputs(out1, outputs, back_output, features, back_features)


def count_params(model: McnModel) -> int:
    """Scalar parameters, counting the weight-shared SGN-1 once."""
    seen = {}
    for t in model.parameters().values():
        seen[id(t)] = t.data.size
    return int(sum(seen.values()))
