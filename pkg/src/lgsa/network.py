"""Two-hourglass keypoint network with global or locally grouped attention fusion.

The LR hourglass sees the image at half resolution and predicts heat, size and
offset maps. In ``lgsa`` mode a small pixel-attention head turns those maps
into a learnable grouping map that filters queries and keys of the attention
which injects LR features into every fused decoder level of the HR hourglass.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ATTENTION_MODES = ("none", "global", "lgsa")
HEAT_BIAS_INIT = -2.19


@dataclass(frozen=True)
class HourglassConfig:
    num_stages: int = 3
    base_channels: int = 32
    num_skip_points: int = 3
    lr_input_scale: float = 0.5
    stride: int = 4
    num_classes: int = 1
    attention_mode: str = "lgsa"
    embed_dim: int = 64
    num_heads: int = 1
    pam_channels: int = 16
    head_channels: int = 0  # 0 -> base_channels
    max_tokens: int = 1024
    in_channels: int = 3

    def __post_init__(self):
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}, got {self.attention_mode!r}")
        for name in ("num_stages", "base_channels", "stride", "num_classes", "embed_dim",
                     "num_heads", "pam_channels", "max_tokens", "in_channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.stride & (self.stride - 1):
            raise ValueError(f"stride must be a power of two, got {self.stride}")
        if not 1 <= self.num_skip_points <= self.num_stages:
            raise ValueError(f"num_skip_points must lie in 1..{self.num_stages}")
        inv = 1.0 / self.lr_input_scale
        if not (inv >= 2 and inv == int(inv) and int(inv) & (int(inv) - 1) == 0):
            raise ValueError(f"lr_input_scale must be 1/2^k with k >= 1, got {self.lr_input_scale}")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        for lvl in range(self.num_stages):
            if self.level_channels(lvl) % self.num_heads:
                raise ValueError("decoder channels must be divisible by num_heads")

    @property
    def lr_factor(self) -> int:
        return int(round(1.0 / self.lr_input_scale))

    @property
    def required_multiple(self) -> int:
        """Input extents must be a multiple of this for both hourglasses to tile evenly."""
        return (2**self.num_stages) * self.stride * self.lr_factor

    def level_channels(self, level: int) -> int:
        return self.base_channels * 2**level

    @property
    def skip_levels(self) -> list[int]:
        # finest decoder levels carry fusion; level 0 is the output resolution
        return list(range(self.num_skip_points))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PredictionMaps:
    heat: Tensor
    size: Tensor
    offset: Tensor

    def numpy(self, index: int = 0) -> "PredictionArrays":
        return PredictionArrays(
            self.heat.data[index], self.size.data[index], self.offset.data[index]
        )


@dataclass
class PredictionArrays:
    """Per-image plain arrays: heat (C,H,W), size (2,H,W), offset (2,H,W)."""

    heat: np.ndarray
    size: np.ndarray
    offset: np.ndarray


@dataclass
class AttentionDiagnostics:
    sims: list[np.ndarray] = field(default_factory=list)  # per skip point, (B, n_hr, n_lr)
    pam_input: np.ndarray | None = None  # F
    weighting: np.ndarray | None = None  # W
    learnable_map: np.ndarray | None = None  # M


@dataclass
class FusionParams:
    embed_q: Tensor  # (C_hr, d)
    embed_k: Tensor  # (C_lr, d)
    embed_v: Tensor  # (C_hr, C_hr)
    conv_w: Tensor
    conv_b: Tensor


# ---------------------------------------------------------------------------
# attention building blocks


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int = 1) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d)) v for 2-D (n,d) or batched 3-D (B,n,d) operands.

    Returns the output and the unscaled similarity ``q k^T``.
    """
    if q.ndim != k.ndim or q.ndim != v.ndim or q.ndim not in (2, 3):
        raise ShapeError(f"scaled_attention: operand ranks differ {q.shape}, {k.shape}, {v.shape}")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"scaled_attention: embed dimension mismatch {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"scaled_attention: key/value token counts differ {k.shape} vs {v.shape}")
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (T.reshape(t, (1,) + t.shape) for t in (q, k, v))
    if num_heads > 1:
        q, k, v = (_split_heads(t, num_heads) for t in (q, k, v))
    d = q.shape[-1]
    sim = T.matmul(q, T.transpose(k, (0, 2, 1)))
    attn = T.softmax_rows(T.mul(sim, 1.0 / math.sqrt(d)))
    out = T.matmul(attn, v)
    if num_heads > 1:
        out = _merge_heads(out, num_heads)
    if squeeze:
        out = T.reshape(out, out.shape[1:])
        sim = T.reshape(sim, sim.shape[1:])
    return out, sim


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, n, d = t.shape
    t = T.reshape(t, (b, n, heads, d // heads))
    t = T.transpose(t, (0, 2, 1, 3))
    return T.reshape(t, (b * heads, n, d // heads))


def _merge_heads(t: Tensor, heads: int) -> Tensor:
    bh, n, dh = t.shape
    t = T.reshape(t, (bh // heads, heads, n, dh))
    t = T.transpose(t, (0, 2, 1, 3))
    return T.reshape(t, (bh // heads, n, heads * dh))


def token_grid(h: int, w: int, max_tokens: int) -> tuple[int, int]:
    """Halve the grid until it holds at most ``max_tokens`` cells."""
    while h * w > max_tokens and h > 1 and w > 1:
        h, w = (h + 1) // 2, (w + 1) // 2
    return h, w


def tokens(feat: Tensor, grid: tuple[int, int]) -> Tensor:
    """(B,C,H,W) -> (B, n, C) on the given token grid."""
    feat = T.bilinear_resample(feat, *grid)
    b, c, h, w = feat.shape
    return T.transpose(T.reshape(feat, (b, c, h * w)), (0, 2, 1))


def embed(tok: Tensor, weight: Tensor) -> Tensor:
    b, n, c = tok.shape
    if weight.shape[0] != c:
        raise ShapeError(f"embed: tokens have {c} channels, embedding expects {weight.shape[0]}")
    out = T.matmul(T.reshape(tok, (b * n, c)), weight)
    return T.reshape(out, (b, n, weight.shape[1]))


def untokens(tok: Tensor, grid: tuple[int, int], out_hw: tuple[int, int]) -> Tensor:
    b, n, c = tok.shape
    feat = T.reshape(T.transpose(tok, (0, 2, 1)), (b, c, grid[0], grid[1]))
    return T.bilinear_resample(feat, *out_hw)


def _filtered(feat: Tensor, grouping: Tensor) -> Tensor:
    g = T.bilinear_resample(grouping, feat.shape[2], feat.shape[3])
    return T.mul(feat, T.broadcast_channels(g, feat.shape[1]))


def attention_term(
    h_hr: Tensor,
    h_lr: Tensor,
    params: FusionParams,
    grouping: Tensor | None = None,
    num_heads: int = 1,
    max_tokens: int = 1024,
) -> tuple[Tensor, Tensor]:
    """Attention output in HR feature layout, plus the similarity matrix.

    With ``grouping`` (a single-channel map) queries and keys are built from
    the grouping-filtered features; values always come from raw HR features.
    """
    if h_hr.shape[0] != h_lr.shape[0]:
        raise ShapeError(f"batch mismatch {h_hr.shape} vs {h_lr.shape}")
    hw = h_hr.shape[2:]
    grid = token_grid(hw[0], hw[1], max_tokens)
    q_src, k_src = h_hr, h_lr
    if grouping is not None:
        if grouping.ndim != 4 or grouping.shape[1] != 1 or grouping.shape[0] != h_hr.shape[0]:
            raise ShapeError(f"grouping map must be (B,1,H,W), got {grouping.shape}")
        q_src = _filtered(h_hr, grouping)
        k_src = _filtered(h_lr, grouping)
    q = embed(tokens(q_src, grid), params.embed_q)
    k = embed(tokens(k_src, grid), params.embed_k)
    v = embed(tokens(h_hr, grid), params.embed_v)
    out, sim = scaled_attention(q, k, v, num_heads)
    return untokens(out, grid, hw), sim


def global_attention(h_hr, h_lr, params: FusionParams, num_heads: int = 1, max_tokens: int = 1024):
    """HR features as queries and values, LR features as keys."""
    return attention_term(h_hr, h_lr, params, None, num_heads, max_tokens)


def skip_fuse(h_hr: Tensor, attn: Tensor, params: FusionParams) -> Tensor:
    return T.conv2d(T.add(h_hr, attn), params.conv_w, params.conv_b, padding=1)


def lgsa_fuse(h_hr, h_lr, grouping, params: FusionParams, num_heads: int = 1, max_tokens: int = 1024):
    """Next HR feature block and the similarity matrix of the grouped attention."""
    attn, sim = attention_term(h_hr, h_lr, params, grouping, num_heads, max_tokens)
    return skip_fuse(h_hr, attn, params), sim


def global_fuse(h_hr, h_lr, params: FusionParams, num_heads: int = 1, max_tokens: int = 1024):
    attn, sim = global_attention(h_hr, h_lr, params, num_heads, max_tokens)
    return skip_fuse(h_hr, attn, params), sim


def pam_forward(heat: Tensor, size: Tensor, offset: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    """Pixel attention: F = concat(maps), W = sigmoid(conv(relu(conv(relu(conv F))))), M = F * W.

    Returns ``(M, W, F)``; W has a single channel.
    """
    if not (heat.shape[2:] == size.shape[2:] == offset.shape[2:]):
        raise ShapeError(f"pam: spatial mismatch {heat.shape}, {size.shape}, {offset.shape}")
    f = T.concat_channels([heat, size, offset])
    h = T.relu(T.conv2d(f, params["pam.0.w"], params["pam.0.b"], padding=1))
    h = T.relu(T.conv2d(h, params["pam.1.w"], params["pam.1.b"], padding=1))
    w = T.sigmoid(T.conv2d(h, params["pam.2.w"], params["pam.2.b"], padding=1))
    m = T.mul(f, T.broadcast_channels(w, f.shape[1]))
    return m, w, f


def grouping_map(m: Tensor, num_classes: int) -> Tensor:
    """Single-channel grouping map: the class-averaged heat channels of M."""
    heat = T.slice_channels(m, 0, num_classes)
    if num_classes == 1:
        return heat
    return T.mul(T.tsum(heat, axis=1, keepdims=True), 1.0 / num_classes)


# ---------------------------------------------------------------------------
# model


class LGSANet:
    """Parameters plus forward pass of the two-hourglass model."""

    def __init__(self, cfg: HourglassConfig, seed: int = 0):
        self.cfg = cfg
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng

    # -- parameter creation -------------------------------------------------

    def _uniform(self, name, shape, fan_in, fan_out):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        self.params[name] = Tensor(self._rng.uniform(-a, a, size=shape), requires_grad=True, name=name)

    def _conv(self, name, cin, cout, k, bias_value=0.0):
        self._uniform(f"{name}.w", (cout, cin, k, k), cin * k * k, cout * k * k)
        self.params[f"{name}.b"] = Tensor(np.full(cout, bias_value), requires_grad=True, name=f"{name}.b")

    def _linear(self, name, cin, cout):
        self._uniform(name, (cin, cout), cin, cout)

    def _res(self, name, ch):
        self._conv(f"{name}.conv1", ch, ch, 3)
        self._conv(f"{name}.conv2", ch, ch, 3)

    def _build_hourglass(self, p):
        cfg = self.cfg
        base = cfg.base_channels
        n_down = int(math.log2(cfg.stride))
        cin = cfg.in_channels
        for i in range(n_down):
            self._conv(f"{p}.stem.{i}", cin, base, 3)
            cin = base
        self._res(f"{p}.stem.res", base)
        for lvl in range(cfg.num_stages):
            self._res(f"{p}.enc.{lvl}", cfg.level_channels(lvl))
            self._conv(f"{p}.down.{lvl}", cfg.level_channels(lvl), cfg.level_channels(lvl + 1), 3)
        self._res(f"{p}.mid", cfg.level_channels(cfg.num_stages))
        for lvl in reversed(range(cfg.num_stages)):
            self._conv(f"{p}.up.{lvl}", cfg.level_channels(lvl + 1), cfg.level_channels(lvl), 3)
            self._res(f"{p}.dec.{lvl}", cfg.level_channels(lvl))
        hc = cfg.head_channels or base
        for head, out, bias in (("heat", cfg.num_classes, HEAT_BIAS_INIT), ("size", 2, 0.0), ("offset", 2, 0.0)):
            self._conv(f"{p}.{head}.0", base, hc, 3)
            self._conv(f"{p}.{head}.1", hc, out, 1, bias_value=bias)

    def _build(self):
        cfg = self.cfg
        self._build_hourglass("lr")
        self._build_hourglass("hr")
        if cfg.attention_mode != "none":
            for lvl in cfg.skip_levels:
                ch = cfg.level_channels(lvl)
                self._linear(f"fuse.{lvl}.q", ch, cfg.embed_dim)
                self._linear(f"fuse.{lvl}.k", ch, cfg.embed_dim)
                self._linear(f"fuse.{lvl}.v", ch, ch)
                self._conv(f"fuse.{lvl}.conv", ch, ch, 3)
        if cfg.attention_mode == "lgsa":
            fin = cfg.num_classes + 4
            self._conv("pam.0", fin, cfg.pam_channels, 3)
            self._conv("pam.1", cfg.pam_channels, cfg.pam_channels, 3)
            self._conv("pam.2", cfg.pam_channels, 1, 3)

    # -- forward -----------------------------------------------------------

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def fusion_params(self, level: int) -> FusionParams:
        p = self.params
        return FusionParams(
            p[f"fuse.{level}.q"], p[f"fuse.{level}.k"], p[f"fuse.{level}.v"],
            p[f"fuse.{level}.conv.w"], p[f"fuse.{level}.conv.b"],
        )

    def _c(self, name, x, stride=1, k_pad=None):
        w = self.params[f"{name}.w"]
        pad = (w.shape[2] // 2) if k_pad is None else k_pad
        return T.conv2d(x, w, self.params[f"{name}.b"], stride=stride, padding=pad)

    def _res_fwd(self, name, x):
        h = T.relu(self._c(f"{name}.conv1", x))
        h = self._c(f"{name}.conv2", h)
        return T.relu(T.add(x, h))

    def hourglass_forward(
        self,
        x: Tensor,
        which: str,
        fuse: Callable[[int, Tensor], Tensor] | None = None,
    ) -> tuple[dict[int, Tensor], PredictionMaps]:
        """Run one hourglass; returns decoder features by level and its prediction maps.

        ``fuse(level, feature)`` is applied to each decoder level's output before
        it continues up the decoder.
        """
        cfg = self.cfg
        p = which.lower()
        mult = (2**cfg.num_stages) * cfg.stride
        if x.ndim != 4 or x.shape[2] % mult or x.shape[3] % mult:
            raise ShapeError(
                f"{which} hourglass input {x.shape}: spatial extents must be multiples of {mult}"
            )
        h = x
        for i in range(int(math.log2(cfg.stride))):
            h = T.relu(self._c(f"{p}.stem.{i}", h, stride=2))
        h = self._res_fwd(f"{p}.stem.res", h)
        skips = []
        for lvl in range(cfg.num_stages):
            h = self._res_fwd(f"{p}.enc.{lvl}", h)
            skips.append(h)
            h = T.relu(self._c(f"{p}.down.{lvl}", h, stride=2))
        h = self._res_fwd(f"{p}.mid", h)
        feats: dict[int, Tensor] = {}
        for lvl in reversed(range(cfg.num_stages)):
            sh, sw = skips[lvl].shape[2:]
            h = T.bilinear_resample(h, sh, sw)
            h = T.relu(self._c(f"{p}.up.{lvl}", h))
            h = self._res_fwd(f"{p}.dec.{lvl}", T.add(h, skips[lvl]))
            feats[lvl] = h
            if fuse is not None and lvl in cfg.skip_levels:
                h = fuse(lvl, h)
        heat = T.sigmoid(self._c(f"{p}.heat.1", T.relu(self._c(f"{p}.heat.0", h))))
        size = self._c(f"{p}.size.1", T.relu(self._c(f"{p}.size.0", h)))
        offset = self._c(f"{p}.offset.1", T.relu(self._c(f"{p}.offset.0", h)))
        return feats, PredictionMaps(heat, size, offset)

    def forward(self, x, grouping_override=None) -> tuple[PredictionMaps, PredictionMaps, AttentionDiagnostics]:
        """LR hourglass, pixel attention (lgsa), then the fused HR hourglass.

        ``grouping_override`` replaces the pixel-attention grouping map with a
        constant (scalar or array); used to check the reduction to global attention.
        """
        cfg = self.cfg
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[2] % cfg.required_multiple or x.shape[3] % cfg.required_multiple:
            raise ShapeError(
                f"input {x.shape}: spatial extents must be multiples of {cfg.required_multiple}"
            )
        hh, ww = x.shape[2:]
        x_lr = T.bilinear_resample(x, hh // cfg.lr_factor, ww // cfg.lr_factor)
        lr_feats, lr_raw = self.hourglass_forward(x_lr, "LR")
        ph, pw = hh // cfg.stride, ww // cfg.stride
        lr = PredictionMaps(*(T.bilinear_resample(t, ph, pw) for t in (lr_raw.heat, lr_raw.size, lr_raw.offset)))

        diag = AttentionDiagnostics()
        grouping = None
        if cfg.attention_mode == "lgsa":
            m, w, f = pam_forward(lr.heat, lr.size, lr.offset, self.params)
            diag.pam_input, diag.weighting, diag.learnable_map = f.data, w.data, m.data
            grouping = grouping_map(m, cfg.num_classes)
            if grouping_override is not None:
                grouping = Tensor(np.broadcast_to(np.asarray(grouping_override, dtype=np.float64), grouping.shape))

        fuse = None
        if cfg.attention_mode != "none":

            def fuse(level: int, h_hr: Tensor) -> Tensor:
                params = self.fusion_params(level)
                if cfg.attention_mode == "lgsa":
                    out, sim = lgsa_fuse(h_hr, lr_feats[level], grouping, params, cfg.num_heads, cfg.max_tokens)
                else:
                    out, sim = global_fuse(h_hr, lr_feats[level], params, cfg.num_heads, cfg.max_tokens)
                diag.sims.append(sim.data)
                return out

        _, hr = self.hourglass_forward(x, "HR", fuse)
        return lr, hr, diag

    __call__ = forward

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.params.items())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter sets differ: {sorted(missing)[:5]}")
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise ShapeError(f"parameter {k}: expected {self.params[k].shape}, got {v.shape}")
            self.params[k].data[...] = v


def preprocess(images: np.ndarray) -> np.ndarray:
    """uint8 (B,H,W,3) or (H,W,3) images -> float64 (B,3,H,W) roughly in [-1, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=np.float64) / 127.5 - 1.0
