"""PairNet / TripleNet network graphs built from :mod:`triplenet.tensor` ops.

Decoder levels are ordered coarse to fine. Level ``i`` fuses the previous
decoder output (the deepest encoder output for ``i == 0``) with the encoder
map of matching resolution, then splits into detection and segmentation
branches. Which branches exist is controlled by the four TripleNet toggles
(``mfs``, ``ic``, ``cas``, ``asf``) plus the supervision layout used by the
ablation rows (``detection`` and ``seg_levels``).
"""
from __future__ import annotations

import enum
import io
import json
import math
import struct
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from triplenet import tensor as T
from triplenet.tensor import BatchNormState, ConvParams, Tensor, conv2d, relu, scope


class Mode(enum.Enum):
    TRAIN = "train"
    INFERENCE = "inference"


class SegLossStrategy(str, enum.Enum):
    UPSAMPLE_LOGITS = "upsample_logits"
    DOWNSAMPLE_GT = "downsample_gt"


SEG_LEVEL_CHOICES = ("all", "fine", "none")
BG_PRIOR = 0.999  # initial background probability of every anchor
HEAD_STD = 0.01


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    input_size: tuple = (96, 96)
    num_classes: int = 3
    encoder_levels: list = field(default_factory=lambda: [(32, 4), (48, 8), (64, 16), (64, 32)])
    decoder_levels: int = 3
    decoder_channels: int = 48
    ic_channels: int = 16
    anchors_per_cell: int = 3
    se_reduction: int = 4
    mfs: bool = True
    ic: bool = True
    cas: bool = True
    asf: bool = True
    detection: bool = True
    seg_levels: str = "all"
    seg_loss_strategy: str = SegLossStrategy.UPSAMPLE_LOGITS.value

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.encoder_levels = [(int(c), int(s)) for c, s in self.encoder_levels]

    # -- derived geometry -------------------------------------------------
    def encoder_strides(self) -> list:
        return [s for _, s in self.encoder_levels]

    def decoder_strides(self) -> list:
        strides = self.encoder_strides()
        return [strides[self.decoder_levels - 1 - i] for i in range(self.decoder_levels)]

    def decoder_grid_sizes(self) -> list:
        h, w = self.input_size
        return [(h // s, w // s) for s in self.decoder_strides()]

    def ca_supervised_levels(self) -> list:
        n = self.decoder_levels
        return {"all": list(range(n)), "fine": [n - 1], "none": []}[self.seg_levels]

    def ca_head_levels(self) -> list:
        if self.ic:
            return list(range(self.decoder_levels))
        return self.ca_supervised_levels()

    @property
    def is_pairnet(self) -> bool:
        return not (self.mfs or self.ic or self.cas or self.asf)

    def validate(self) -> "NetworkConfig":
        h, w = self.input_size
        if h < 1 or w < 1:
            raise ConfigError(f"input_size must be positive, got {self.input_size}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if not self.encoder_levels:
            raise ConfigError("encoder_levels must not be empty")
        strides = self.encoder_strides()
        prev = 1
        for c, s in self.encoder_levels:
            if c < 1:
                raise ConfigError(f"encoder channels must be positive, got {c}")
            if s <= prev and not (prev == 1 and s == 1):
                raise ConfigError(f"encoder strides must be strictly increasing, got {strides}")
            ratio = s // prev
            if ratio * prev != s or ratio & (ratio - 1):
                raise ConfigError(f"each encoder stride must be a power-of-two multiple of the previous, got {strides}")
            if h % s or w % s:
                raise ConfigError(f"encoder stride {s} does not divide input_size {self.input_size}")
            prev = s
        if not 1 <= self.decoder_levels <= len(self.encoder_levels):
            raise ConfigError(f"decoder_levels must be in 1..{len(self.encoder_levels)}, got {self.decoder_levels}")
        if self.anchors_per_cell < 1:
            raise ConfigError(f"anchors_per_cell must be >= 1, got {self.anchors_per_cell}")
        if self.se_reduction < 1:
            raise ConfigError(f"se_reduction must be >= 1, got {self.se_reduction}")
        if self.seg_levels not in SEG_LEVEL_CHOICES:
            raise ConfigError(f"seg_levels must be one of {SEG_LEVEL_CHOICES}, got {self.seg_levels!r}")
        if self.seg_loss_strategy not in {s.value for s in SegLossStrategy}:
            raise ConfigError(f"unknown seg_loss_strategy {self.seg_loss_strategy!r}")
        if self.ic and not self.detection:
            raise ConfigError("ic refines the detection branch and needs detection=True")
        if not self.detection and self.seg_levels == "none" and not self.mfs:
            raise ConfigError("configuration has no supervised output")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["encoder_levels"] = [list(e) for e in self.encoder_levels]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown network config keys: {sorted(extra)}")
        return cls(**d)

    def with_toggles(self, **kw) -> "NetworkConfig":
        return replace(self, **kw)


def pairnet_config(cfg: NetworkConfig) -> NetworkConfig:
    return replace(cfg, mfs=False, ic=False, cas=False, asf=False)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Conv:
    def __init__(self, net: "Network", name: str, cin: int, cout: int, k: int = 3, stride: int = 1,
                 pad: Optional[int] = None, std: Optional[float] = None, bias=None):
        pad = k // 2 if pad is None else pad
        std = math.sqrt(2.0 / (cin * k * k)) if std is None else std
        w = net._param(f"{name}.weight", (cout, cin, k, k), std)
        b = net._param(f"{name}.bias", (cout,), 0.0)
        if bias is not None:
            b.data[:] = bias
        self.p = ConvParams(w, b, stride, pad)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.p)


class BatchNorm:
    def __init__(self, net: "Network", name: str, channels: int):
        scale = net._param(f"{name}.scale", (channels,), None, fill=1.0)
        shift = net._param(f"{name}.shift", (channels,), 0.0)
        self.state = BatchNormState(scale, shift, np.zeros(channels), np.ones(channels))
        net.bn_states[name] = self.state
        self.net = net

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.state, self.net.bn_train)


class ResidualUnit:
    """conv-BN-relu, conv-BN, plus identity or 1x1 projection shortcut, then relu."""

    def __init__(self, net, name, cin, cout):
        self.conv1 = Conv(net, f"{name}.conv1", cin, cout)
        self.bn1 = BatchNorm(net, f"{name}.bn1", cout)
        self.conv2 = Conv(net, f"{name}.conv2", cout, cout)
        self.bn2 = BatchNorm(net, f"{name}.bn2", cout)
        self.proj = Conv(net, f"{name}.proj", cin, cout, k=1) if cin != cout else None
        self.cout = cout


def residual_unit(x: Tensor, p: ResidualUnit) -> Tensor:
    y = relu(p.bn1(p.conv1(x)))
    y = p.bn2(p.conv2(y))
    short = p.proj(x) if p.proj is not None else x
    return relu(T.add(y, short))


class SEBlock:
    def __init__(self, net, name, cin, cout, reduction):
        hidden = max(1, cin // reduction)
        self.squeeze = Conv(net, f"{name}.fc1", cin, hidden, k=1)
        self.expand = Conv(net, f"{name}.fc2", hidden, cout, k=1)


def se_gate(decoder_feat: Tensor, p: SEBlock) -> Tensor:
    s = T.global_average_pool(decoder_feat)
    return T.sigmoid(p.expand(relu(p.squeeze(s))))


def _check_ratio(decoder_feat: Tensor, encoder_feat: Tensor):
    dh, dw = decoder_feat.shape[2:]
    eh, ew = encoder_feat.shape[2:]
    if eh % dh or ew % dw:
        raise ValueError(f"encoder map {encoder_feat.shape[2:]} is not an integer multiple of "
                         f"decoder map {decoder_feat.shape[2:]}")


def skip_fuse(decoder_feat: Tensor, encoder_feat: Tensor, unit: ResidualUnit) -> Tensor:
    _check_ratio(decoder_feat, encoder_feat)
    eh, ew = encoder_feat.shape[2:]
    up = decoder_feat
    if decoder_feat.shape[2:] != (eh, ew):
        up = T.bilinear_resize(decoder_feat, eh, ew)
    return residual_unit(T.concat_channels([up, encoder_feat]), unit)


def attention_skip_fuse(decoder_feat: Tensor, encoder_feat: Tensor, unit: ResidualUnit, se: SEBlock,
                        clamp_gate: bool = False) -> Tensor:
    """Skip fusion whose encoder channels are rescaled by an SE gate on the decoder map.

    ``clamp_gate`` replaces the gate with ones (ablation hook).
    """
    _check_ratio(decoder_feat, encoder_feat)
    gate = se_gate(decoder_feat, se)
    if clamp_gate:
        gate = Tensor(np.ones_like(gate.data))
    return skip_fuse(decoder_feat, T.mul(encoder_feat, gate), unit)


class DetectionHead:
    def __init__(self, net, name, cin, num_classes, anchors):
        self.shared = Conv(net, f"{name}.conv", cin, cin)
        bg = np.zeros(anchors * (num_classes + 1))
        # background logit offset so every class starts with probability (1 - BG_PRIOR) / K
        bg[::num_classes + 1] = math.log(BG_PRIOR * num_classes / (1 - BG_PRIOR))
        self.cls = Conv(net, f"{name}.cls", cin, anchors * (num_classes + 1), k=1, std=HEAD_STD, bias=bg)
        self.box = Conv(net, f"{name}.box", cin, anchors * 4, k=1, std=HEAD_STD)


def detection_head(feat: Tensor, p: DetectionHead) -> tuple:
    h = relu(p.shared(feat))
    return p.cls(h), p.box(h)


def segmentation_head(feat: Tensor, p: Conv) -> Tensor:
    return p(feat)


class InnerConnect:
    def __init__(self, net, name, feat_ch, logit_ch, ic_ch):
        self.c1 = Conv(net, f"{name}.conv1", logit_ch, ic_ch)
        self.c2 = Conv(net, f"{name}.conv2", ic_ch, ic_ch)
        self.fuse = Conv(net, f"{name}.fuse", feat_ch + ic_ch, feat_ch)


def inner_connect(feat: Tensor, seg_logits: Tensor, p: InnerConnect) -> Tensor:
    if feat.shape[2:] != seg_logits.shape[2:] or feat.shape[0] != seg_logits.shape[0]:
        raise ValueError(f"inner_connect: feature map {feat.shape} and seg logits {seg_logits.shape} "
                         "differ in batch or spatial size")
    s = relu(p.c2(relu(p.c1(seg_logits))))
    return relu(p.fuse(T.concat_channels([feat, s])))


def fused_segmentation(level_feats: list, target_hw: tuple, p: Conv) -> Tensor:
    if not level_feats:
        raise ValueError("fused_segmentation needs at least one decoder level")
    th, tw = target_hw
    ups = [f if f.shape[2:] == (th, tw) else T.bilinear_resize(f, th, tw) for f in level_feats]
    x = ups[0] if len(ups) == 1 else T.concat_channels(ups)
    return p(x)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

@dataclass
class DecoderLevelOutput:
    features: Tensor
    det_cls_logits: Optional[Tensor] = None
    det_box_deltas: Optional[Tensor] = None
    seg_logits: Optional[Tensor] = None
    agnostic_logits: Optional[Tensor] = None


@dataclass
class ForwardOutputs:
    levels: list
    fused_seg_logits: Optional[Tensor] = None
    seg_output: Optional[Tensor] = None  # logits used for the final segmentation prediction


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class Network:
    """Parameter container plus the module graph for one :class:`NetworkConfig`.

    Every parameter is initialized from an RNG keyed on ``(seed, name)``, so
    adding or removing a module never perturbs the remaining parameters.
    """

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        self.cfg = cfg.validate()
        self.seed = seed
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.bn_states: "OrderedDict[str, BatchNormState]" = OrderedDict()
        self.bn_train = False
        self.clamp_gates = False
        k1 = cfg.num_classes + 1
        dch = cfg.decoder_channels

        self.stages = []
        prev_c, prev_s = 3, 1
        for j, (c, s) in enumerate(cfg.encoder_levels):
            downs = []
            for t in range(int(math.log2(s // prev_s))):
                cin = prev_c if t == 0 else c
                downs.append((Conv(self, f"enc{j}.down{t}", cin, c, stride=2),
                              BatchNorm(self, f"enc{j}.down{t}.bn", c)))
            if not downs:
                downs.append((Conv(self, f"enc{j}.down0", prev_c, c), BatchNorm(self, f"enc{j}.down0.bn", c)))
            self.stages.append((downs, ResidualUnit(self, f"enc{j}.res", c, c)))
            prev_c, prev_s = c, s

        n_enc = len(cfg.encoder_levels)
        L = cfg.decoder_levels
        self.fuse_units, self.se_blocks = [], []
        dec_in = cfg.encoder_levels[-1][0]
        for i in range(L):
            enc_c = cfg.encoder_levels[L - 1 - i][0]
            self.fuse_units.append(ResidualUnit(self, f"dec{i}.fuse", dec_in + enc_c, dch))
            self.se_blocks.append(SEBlock(self, f"dec{i}.se", dec_in, enc_c, cfg.se_reduction) if cfg.asf else None)
            dec_in = dch
        assert n_enc >= L

        ca_levels = set(cfg.ca_head_levels())
        self.det_heads, self.seg_heads, self.agn_heads, self.ic_modules = [], [], [], []
        for i in range(L):
            self.seg_heads.append(Conv(self, f"seg{i}", dch, k1) if i in ca_levels else None)
            self.agn_heads.append(Conv(self, f"agn{i}", dch, 2) if cfg.cas else None)
            self.ic_modules.append(InnerConnect(self, f"ic{i}", dch, k1, cfg.ic_channels) if cfg.ic else None)
            self.det_heads.append(DetectionHead(self, f"det{i}", dch, cfg.num_classes, cfg.anchors_per_cell)
                                  if cfg.detection else None)
        self.fused_head = Conv(self, "fused_seg", L * dch, k1) if cfg.mfs else None

    def _param(self, name: str, shape: tuple, std: Optional[float], fill: float = 0.0) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        if std:
            data = _param_rng(self.seed, name).standard_normal(shape) * std
        else:
            data = np.full(shape, fill, dtype=np.float64)
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def parameters(self) -> list:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    # -- state -------------------------------------------------------------
    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        sd = OrderedDict((k, v.data) for k, v in self.params.items())
        for k, st in self.bn_states.items():
            sd[f"{k}.running_mean"] = st.running_mean
            sd[f"{k}.running_var"] = st.running_var
        return sd

    def load_state_dict(self, sd: dict) -> None:
        own = self.state_dict()
        missing = set(own) - set(sd)
        unexpected = set(sd) - set(own)
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for k, arr in own.items():
            src = np.asarray(sd[k], dtype=np.float64)
            if src.shape != arr.shape:
                raise ValueError(f"shape mismatch for {k}: checkpoint {src.shape}, network {arr.shape}")
            arr[...] = src

    # -- forward -----------------------------------------------------------
    def encode(self, image: Tensor) -> list:
        feats = []
        x = image
        for j, (downs, res) in enumerate(self.stages):
            with scope(f"encoder/{j}"):
                for conv, bn in downs:
                    x = relu(bn(conv(x)))
                x = residual_unit(x, res)
            feats.append(x)
        return feats

    def forward(self, image: Tensor, mode: Mode = Mode.TRAIN, bn_train: Optional[bool] = None) -> ForwardOutputs:
        cfg = self.cfg
        exp = (3,) + cfg.input_size
        if image.ndim != 4 or image.shape[1:] != exp:
            raise ValueError(f"expected images of shape (N, {exp[0]}, {exp[1]}, {exp[2]}), got {image.shape}")
        self.bn_train = (mode is Mode.TRAIN) if bn_train is None else bn_train
        train = mode is Mode.TRAIN
        L = cfg.decoder_levels
        enc = self.encode(image)
        supervised = set(cfg.ca_supervised_levels())

        levels = []
        prev = enc[-1]
        for i in range(L):
            e = enc[L - 1 - i]
            with scope(f"decoder/{i}"):
                if cfg.asf:
                    prev = attention_skip_fuse(prev, e, self.fuse_units[i], self.se_blocks[i], self.clamp_gates)
                else:
                    prev = skip_fuse(prev, e, self.fuse_units[i])
            out = DecoderLevelOutput(prev)
            seg = None
            need_seg = cfg.ic or (train and i in supervised)
            if need_seg and self.seg_heads[i] is not None:
                with scope(f"seg_ca/{i}"):
                    seg = segmentation_head(prev, self.seg_heads[i])
                if train:
                    out.seg_logits = seg
            if train and cfg.cas:
                with scope(f"seg_agn/{i}"):
                    out.agnostic_logits = segmentation_head(prev, self.agn_heads[i])
            if cfg.detection:
                feat = prev
                if cfg.ic:
                    with scope(f"ic/{i}"):
                        feat = inner_connect(prev, seg, self.ic_modules[i])
                with scope(f"det/{i}"):
                    out.det_cls_logits, out.det_box_deltas = detection_head(feat, self.det_heads[i])
            levels.append(out)

        res = ForwardOutputs(levels)
        if cfg.mfs:
            with scope("fused_seg"):
                res.fused_seg_logits = fused_segmentation([lv.features for lv in levels],
                                                          levels[-1].features.shape[2:], self.fused_head)
            res.seg_output = res.fused_seg_logits
        elif cfg.seg_levels != "none":
            fine = L - 1
            if levels[fine].seg_logits is not None:
                res.seg_output = levels[fine].seg_logits
            else:
                with scope(f"seg_ca/{fine}"):
                    res.seg_output = segmentation_head(levels[fine].features, self.seg_heads[fine])
        return res


def build_network(cfg: NetworkConfig, seed: int = 0) -> Network:
    return Network(cfg, seed)


def forward(net: Network, image: Tensor, mode: Mode = Mode.TRAIN) -> ForwardOutputs:
    return net.forward(image, mode)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
# Layout (all integers little-endian):
#   magic b"TNCK" | u32 version | u32 meta_len | meta JSON (utf-8)
#   u32 count | count x { u16 name_len | name | u8 ndim | ndim x u32 dims | <f8 values }

CKPT_MAGIC = b"TNCK"
CKPT_VERSION = 1


def save_checkpoint(net: Network, path, extra: Optional[dict] = None) -> None:
    meta = {"network": net.cfg.to_dict(), "seed": net.seed}
    if extra:
        meta.update(extra)
    mb = json.dumps(meta, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(mb)))
    buf.write(mb)
    sd = net.state_dict()
    buf.write(struct.pack("<I", len(sd)))
    for name, arr in sd.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_checkpoint(path) -> tuple:
    """Return ``(meta, state_dict)`` from a checkpoint file."""
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(bytes(take(mlen)).decode())
    (count,) = struct.unpack("<I", take(4))
    sd = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        sd[name] = np.frombuffer(bytes(take(8 * size)), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes after the parameter list")
    return meta, sd


def load_checkpoint(path) -> Network:
    meta, sd = read_checkpoint(path)
    net = Network(NetworkConfig.from_dict(meta["network"]), meta.get("seed", 0))
    net.load_state_dict(sd)
    return net
