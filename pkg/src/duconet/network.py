"""DucoNet: a U-Net harmonization backbone steered by L, a, b control codes.

The backbone encodes RGB + mask with four stride-2 stages and decodes with
three stages that reuse the first three encoder outputs as skips.  After each
decoder stage a Lab control module runs one style block (modulated and
demodulated 3x3 convolution) per control code and fuses the results with a
pixel-wise softmax, leaving the background features untouched.

Parameters live in a flat ``dict[str, Tensor]``; all ops come from
:mod:`duconet.autodiff`.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .colorspace import RGB_TO_XYZ, WHITE_D65, XYZ_TO_RGB, normalize_lab_channels, rgb_to_lab
from .tensorio import read_checkpoint_file, write_checkpoint_file

Params = dict[str, Tensor]


class AblationMode(str, enum.Enum):
    BACKBONE_ONLY = "BackboneOnly"
    BACKBONE_LAB = "BackboneLab"
    WHOLE_LAB_CM = "WholeLabCM"
    WHOLE_RGB_CM = "WholeRgbCM"
    SKIP_CONNECTION_LAB = "SkipConnectionLab"
    SINGLE_L = "SingleL"
    SINGLE_A = "SingleA"
    SINGLE_B = "SingleB"
    CM_AVG = "CMAvg"
    CM_PIX = "CMPix"


# encoder inputs per control code: name -> channels it reads
_CODE_SOURCES = {
    AblationMode.CM_PIX: ("L", "a", "b"),
    AblationMode.CM_AVG: ("L", "a", "b"),
    AblationMode.SINGLE_L: ("L",),
    AblationMode.SINGLE_A: ("a",),
    AblationMode.SINGLE_B: ("b",),
    AblationMode.WHOLE_LAB_CM: ("Lab",),
    AblationMode.WHOLE_RGB_CM: ("RGB",),
}
_SOURCE_CHANNELS = {"L": 1, "a": 1, "b": 1, "Lab": 3, "RGB": 3}


class ConfigError(ValueError):
    pass


@dataclass
class DucoNetConfig:
    input_size: int = 64
    encoder_widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    decoder_widths: list[int] = field(default_factory=lambda: [64, 32, 16])
    code_dim: int = 64
    style_block_widths: list[int] = field(default_factory=lambda: [64, 32, 16])
    epsilon: float = 1e-8
    ablation_mode: AblationMode = AblationMode.CM_PIX
    leaky_slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.ablation_mode = AblationMode(self.ablation_mode)
        self.encoder_widths = [int(w) for w in self.encoder_widths]
        self.decoder_widths = [int(w) for w in self.decoder_widths]
        self.style_block_widths = [int(w) for w in self.style_block_widths]
        self.validate()

    def validate(self) -> None:
        if len(self.encoder_widths) != 4:
            raise ConfigError(f"encoder_widths needs 4 entries, got {self.encoder_widths}")
        if len(self.decoder_widths) != 3:
            raise ConfigError(f"decoder_widths needs 3 entries, got {self.decoder_widths}")
        if self.style_block_widths != self.decoder_widths:
            raise ConfigError("style_block_widths must equal decoder_widths")
        if min(self.encoder_widths + self.decoder_widths) < 1 or self.code_dim < 1:
            raise ConfigError("widths and code_dim must be positive")
        if self.input_size < 8 or self.input_size % 8:
            raise ConfigError(f"input_size must be a positive multiple of 8, got {self.input_size}")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")

    def replace(self, **changes) -> "DucoNetConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ablation_mode"] = self.ablation_mode.value
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "DucoNetConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def desk(cls, **changes) -> "DucoNetConfig":
        return cls(**changes)

    @classmethod
    def full_scale(cls, **changes) -> "DucoNetConfig":
        base = dict(
            input_size=256,
            encoder_widths=[32, 64, 128, 256],
            decoder_widths=[128, 64, 32],
            style_block_widths=[128, 64, 32],
            code_dim=256,
        )
        base.update(changes)
        return cls(**base)

    @classmethod
    def tiny(cls, **changes) -> "DucoNetConfig":
        base = dict(
            input_size=8,
            encoder_widths=[4, 4, 8, 8],
            decoder_widths=[8, 4, 4],
            style_block_widths=[8, 4, 4],
            code_dim=4,
        )
        base.update(changes)
        return cls(**base)


def code_sources(mode: AblationMode) -> tuple[str, ...]:
    return _CODE_SOURCES.get(AblationMode(mode), ())


# ---------------------------------------------------------------- parameters


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def _conv_params(p: dict, rng, name: str, cin: int, cout: int, k: int) -> None:
    p[f"{name}.w"] = _he(rng, (cout, cin, k, k), cin * k * k)
    p[f"{name}.b"] = np.zeros(cout)


def _fc_params(p: dict, rng, name: str, din: int, dout: int) -> None:
    p[f"{name}.w"] = _he(rng, (dout, din), din)
    p[f"{name}.b"] = np.zeros(dout)


def _encoder_params(p: dict, rng, prefix: str, cin: int, widths: Sequence[int]) -> None:
    for i, w in enumerate(widths):
        _conv_params(p, rng, f"{prefix}.stage{i}", cin, w, 3)
        cin = w


def _style_block_params(p: dict, rng, prefix: str, code_dim: int, channels: int) -> None:
    p[f"{prefix}.w"] = _he(rng, (channels, channels, 3, 3), channels * 9)
    _fc_params(p, rng, f"{prefix}.mlp1", code_dim, code_dim)
    # second layer starts near u == 1 so the block begins close to a plain conv
    p[f"{prefix}.mlp2.w"] = rng.normal(0.0, 0.01, size=(channels, code_dim))
    p[f"{prefix}.mlp2.b"] = np.ones(channels)


def init_params(config: DucoNetConfig) -> Params:
    """Fresh parameters for ``config``, seeded by ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    mode = config.ablation_mode
    enc, dec = config.encoder_widths, config.decoder_widths
    raw: dict[str, np.ndarray] = {}

    _encoder_params(raw, rng, "bb.enc", 4, enc)
    prev = enc[3]
    for t in range(3):
        _conv_params(raw, rng, f"bb.dec{t}", prev + enc[2 - t], dec[t], 3)
        prev = dec[t]
    _conv_params(raw, rng, "bb.head", prev + 4, 3, 3)

    for src in code_sources(mode):
        _encoder_params(raw, rng, f"enc_{src}", _SOURCE_CHANNELS[src] + 1, enc)
        _fc_params(raw, rng, f"enc_{src}.fc", enc[3], config.code_dim)
    for t in range(3) if code_sources(mode) else ():
        for src in code_sources(mode):
            _style_block_params(raw, rng, f"cm{t}.{src}", config.code_dim, dec[t])
        if mode is AblationMode.CM_PIX:
            _conv_params(raw, rng, f"cm{t}.fuse", 3 * dec[t], 3, 1)

    if mode is AblationMode.SKIP_CONNECTION_LAB:
        _encoder_params(raw, rng, "enc_Lab", 4, enc[:3])
        for t in range(3):
            _conv_params(raw, rng, f"sc{t}", dec[t] + enc[2 - t], dec[t], 1)

    return {name: Tensor(arr, requires_grad=True, name=name) for name, arr in raw.items()}


def check_params(params: Mapping[str, Tensor | np.ndarray], config: DucoNetConfig) -> None:
    """Raise ConfigError unless ``params`` has exactly the names and shapes ``config`` implies."""
    expected = {k: v.shape for k, v in init_params(config).items()}
    got = {k: tuple(np.shape(v.data if isinstance(v, Tensor) else v)) for k, v in params.items()}
    missing = sorted(set(expected) - set(got))
    extra = sorted(set(got) - set(expected))
    if missing or extra:
        raise ConfigError(f"parameter names disagree with config: missing {missing}, unexpected {extra}")
    bad = [f"{k}: {got[k]} != {expected[k]}" for k in expected if got[k] != expected[k]]
    if bad:
        raise ConfigError("parameter shapes disagree with config: " + "; ".join(bad))
    for k, v in params.items():
        if not np.isfinite(v.data if isinstance(v, Tensor) else v).all():
            raise ConfigError(f"parameter {k} has non-finite values")


def save_checkpoint(path, config: DucoNetConfig, params: Mapping[str, Tensor]) -> None:
    write_checkpoint_file(path, config.to_dict(), {k: v.data for k, v in params.items()})


def load_checkpoint(path) -> tuple[DucoNetConfig, Params]:
    raw_cfg, tensors = read_checkpoint_file(path)
    config = DucoNetConfig.from_dict(raw_cfg)
    check_params(tensors, config)
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()}
    return config, params


# ---------------------------------------------------------------- building blocks


def _same_pad(x: Tensor, stride: int, k: int = 3) -> Tensor:
    """Zero-pad so a k x k conv with ``stride`` yields ceil(H / stride) rows."""
    n, c, h, w = x.shape

    def amounts(size):
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return total // 2, total - total // 2

    (top, bottom), (left, right) = amounts(h), amounts(w)
    if top == bottom and left == right:
        return x, top
    padded = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))

    def back(g):
        return (g[:, :, top : top + h, left : left + w],)

    return ad._make(padded, (x,), back), 0


def conv_layer(x: Tensor, params: Mapping[str, Tensor], name: str, stride: int = 1) -> Tensor:
    w = params[f"{name}.w"]
    k = w.shape[-1]
    if stride == 1:
        y = ad.conv2d(x, w, 1, (k - 1) // 2)
    else:
        xp, pad = _same_pad(x, stride, k)
        y = ad.conv2d(xp, w, stride, pad)
    b = params[f"{name}.b"]
    return ad.add(y, ad.reshape(b, (1, b.shape[0], 1, 1)))


def run_encoder(
    x: Tensor, params: Mapping[str, Tensor], prefix: str, n_stages: int, slope: float
) -> list[Tensor]:
    """Stride-2 conv + leaky ReLU stages; returns every stage's output."""
    feats = []
    for i in range(n_stages):
        x = ad.leaky_relu(conv_layer(x, params, f"{prefix}.stage{i}", stride=2), slope)
        feats.append(x)
    return feats


def encode_channel(
    channel_map: Tensor, mask: Tensor, params: Mapping[str, Tensor], prefix: str, config: DucoNetConfig
) -> Tensor:
    """Control code (N, code_dim) from one source map (N, c, H, W) and the mask."""
    size = config.input_size
    if channel_map.shape[2:] != (size, size) or mask.shape[2:] != (size, size):
        raise DimensionError(
            f"encode_channel: inputs {channel_map.shape}, {mask.shape} do not match input_size {size}"
        )
    feats = run_encoder(ad.concat_channels([channel_map, mask]), params, prefix, 4, config.leaky_slope)
    pooled = ad.avg_pool_global(feats[-1])
    return ad.fully_connected(pooled, params[f"{prefix}.fc.w"], params[f"{prefix}.fc.b"])


def modulate_kernel(weight: Tensor, u: Tensor) -> Tensor:
    """Scale input channels of an (O, I, k, k) kernel.

    ``u`` of shape (I,) gives one kernel; shape (N, I) gives a (N, O, I, k, k) stack.
    """
    o, i = weight.shape[:2]
    if u.shape[-1] != i:
        raise DimensionError(f"modulate_kernel: scale {u.shape} vs kernel {weight.shape}")
    if u.ndim == 1:
        return ad.mul(weight, ad.reshape(u, (1, i, 1, 1)))
    n = u.shape[0]
    return ad.mul(ad.reshape(weight, (1, o, i) + weight.shape[2:]), ad.reshape(u, (n, 1, i, 1, 1)))


def demodulate_kernel(w_hat: Tensor, epsilon: float) -> Tensor:
    """Divide each output channel by sqrt(sum of squares over input channels and taps + eps)."""
    energy = ad.sum_axes(ad.square(w_hat), axis=(-3, -2, -1), keepdims=True)
    return ad.mul(w_hat, ad.rsqrt(ad.add(energy, Tensor(epsilon))))


def style_block_apply(
    feat: Tensor, code: Tensor, params: Mapping[str, Tensor], prefix: str, epsilon: float, slope: float = 0.2
) -> Tensor:
    if code.shape[-1] != params[f"{prefix}.mlp1.w"].shape[1]:
        raise DimensionError(f"style_block_apply: code {code.shape} vs {prefix}.mlp1.w")
    h = ad.leaky_relu(ad.fully_connected(code, params[f"{prefix}.mlp1.w"], params[f"{prefix}.mlp1.b"]), slope)
    u = ad.fully_connected(h, params[f"{prefix}.mlp2.w"], params[f"{prefix}.mlp2.b"])
    kernels = demodulate_kernel(modulate_kernel(params[f"{prefix}.w"], u), epsilon)
    return ad.conv2d_per_sample(feat, kernels, padding=1)


def fuse_weight_maps(maps: Sequence[Tensor], params: Mapping[str, Tensor], prefix: str) -> list[Tensor]:
    """Per-pixel softmax weights (one (N,1,H,W) map per input) from a 1x1 conv head."""
    logits = conv_layer(ad.concat_channels(list(maps)), params, prefix)
    probs = ad.softmax_over_channels(logits)
    return ad.split_channels(probs, [1] * len(maps))


def downsample_mask(mask: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Area-average an (H, W) or (N, 1, H, W) mask down to (N, 1, target_h, target_w)."""
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 2:
        m = m[None, None]
    n, _, h, w = m.shape
    if h % target_h or w % target_w:
        raise DimensionError(f"downsample_mask: {h}x{w} is not a multiple of {target_h}x{target_w}")
    fh, fw = h // target_h, w // target_w
    return m.reshape(n, 1, target_h, fh, target_w, fw).mean(axis=(3, 5))


def lab_cm_apply(
    feat: Tensor,
    manipulated: Sequence[Tensor],
    mask_t: np.ndarray | Tensor,
    mode: str = "pix",
    params: Mapping[str, Tensor] | None = None,
    prefix: str | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """Fuse manipulated maps and paste them over ``feat`` inside the mask.

    ``mode`` is ``"pix"`` (learned softmax weights, needs ``params``/``prefix``),
    ``"avg"`` (plain mean) or ``"single"`` (exactly one manipulated map).
    Returns the enhanced features and the weight maps (empty unless pix).
    """
    m = mask_t if isinstance(mask_t, Tensor) else Tensor(mask_t)
    weights: list[Tensor] = []
    if mode == "pix":
        weights = fuse_weight_maps(manipulated, params, prefix)
        fused = ad.mul(manipulated[0], weights[0])
        for fm, a in zip(manipulated[1:], weights[1:]):
            fused = ad.add(fused, ad.mul(fm, a))
    elif mode == "avg":
        fused = manipulated[0]
        for fm in manipulated[1:]:
            fused = ad.add(fused, fm)
        fused = ad.scale(fused, 1.0 / len(manipulated))
    elif mode == "single":
        if len(manipulated) != 1:
            raise ValueError("single fusion takes exactly one manipulated map")
        fused = manipulated[0]
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    out = ad.add(ad.mul(fused, m), ad.mul(feat, Tensor(1.0 - m.data)))
    return out, weights


# ---------------------------------------------------------------- Lab -> RGB inside the graph


def normalized_lab_to_rgb(x: Tensor) -> Tensor:
    """Differentiable map from NCHW normalized Lab in [0,1] to NCHW sRGB in [0,1]."""
    n = np.moveaxis(x.data, 1, -1)
    L = n[..., 0] * 100.0
    a = n[..., 1] * 256.0 - 128.0
    b = n[..., 2] * 256.0 - 128.0
    delta = 6.0 / 29.0
    fy = (L + 16.0) / 116.0
    fs = np.stack([fy + a / 500.0, fy, fy - b / 200.0], axis=-1)
    cubic = fs > delta
    xyz = WHITE_D65 * np.where(cubic, fs**3, 3 * delta**2 * (fs - 4.0 / 29.0))
    dxyz_df = WHITE_D65 * np.where(cubic, 3 * fs**2, 3 * delta**2)
    lin = xyz @ XYZ_TO_RGB.T
    low = lin <= 0.0031308
    safe = np.maximum(lin, 0.0031308)
    srgb = np.where(low, 12.92 * lin, 1.055 * safe ** (1 / 2.4) - 0.055)
    dsrgb = np.where(low, 12.92, 1.055 / 2.4 * safe ** (1 / 2.4 - 1.0))
    inside = (srgb >= 0.0) & (srgb <= 1.0)
    out = np.clip(srgb, 0.0, 1.0)

    def back(g):
        g = np.moveaxis(g, 1, -1) * dsrgb * inside
        gf = (g @ XYZ_TO_RGB) * dxyz_df
        g_fy = gf[..., 0] + gf[..., 1] + gf[..., 2]
        gn = np.stack([g_fy / 116.0 * 100.0, gf[..., 0] / 500.0 * 256.0, -gf[..., 2] / 200.0 * 256.0], axis=-1)
        return (np.moveaxis(gn, -1, 1),)

    return ad._make(np.moveaxis(out, -1, 1), (x,), back)


# ---------------------------------------------------------------- forward passes


class Batch(NamedTuple):
    rgb: np.ndarray  # (N, 3, H, W)
    mask: np.ndarray  # (N, 1, H, W)
    lab: np.ndarray  # (N, 3, H, W), normalized to [0, 1]


def make_batch(rgb_images: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> Batch:
    """Stack (H, W, 3) images and (H, W) masks into NCHW arrays with normalized Lab."""
    rgb = np.stack([np.asarray(im, dtype=np.float64) for im in rgb_images])
    mask = np.stack([np.asarray(m, dtype=np.float64).reshape(rgb.shape[1:3]) for m in masks])[:, None]
    lab = np.stack(normalize_lab_channels(rgb_to_lab(rgb)), axis=1)
    return Batch(rgb.transpose(0, 3, 1, 2).copy(), mask, lab)


class ForwardResult(NamedTuple):
    image: Tensor
    decoder_features: list[Tensor]
    weight_maps: list[list[Tensor]]


def _source_map(batch: Batch, src: str) -> Tensor:
    if src == "RGB":
        return Tensor(batch.rgb)
    if src == "Lab":
        return Tensor(batch.lab)
    return Tensor(batch.lab[:, "Lab".index(src) : "Lab".index(src) + 1])


def compute_codes(batch: Batch, params: Mapping[str, Tensor], config: DucoNetConfig) -> dict[str, Tensor]:
    mask = Tensor(batch.mask)
    return {
        src: encode_channel(_source_map(batch, src), mask, params, f"enc_{src}", config)
        for src in code_sources(config.ablation_mode)
    }


def backbone_forward(
    batch: Batch,
    params: Mapping[str, Tensor],
    config: DucoNetConfig,
    codes: Mapping[str, Tensor] | None = None,
    skip_features: Sequence[Tensor] | None = None,
) -> ForwardResult:
    """U-Net pass with optional Lab-CM after each decoder stage and a blending layer.

    In BackboneLab mode the network reads and writes normalized Lab and the
    blended result is converted to RGB at the end.
    """
    size = config.input_size
    if batch.rgb.shape[2:] != (size, size) or batch.mask.shape[2:] != (size, size):
        raise DimensionError(f"backbone_forward: batch {batch.rgb.shape} does not match input_size {size}")
    mode = config.ablation_mode
    slope = config.leaky_slope
    colour = Tensor(batch.lab if mode is AblationMode.BACKBONE_LAB else batch.rgb)
    mask = Tensor(batch.mask)
    x_in = ad.concat_channels([colour, mask])

    skips = run_encoder(x_in, params, "bb.enc", 4, slope)
    x = skips[3]
    feats: list[Tensor] = []
    weight_maps: list[list[Tensor]] = []
    sources = list(codes) if codes else []
    for t in range(3):
        skip = skips[2 - t]
        x = ad.upsample_nearest(x, skip.shape[2] // x.shape[2])
        x = ad.leaky_relu(conv_layer(ad.concat_channels([x, skip]), params, f"bb.dec{t}"), slope)
        if skip_features is not None:
            x = conv_layer(ad.concat_channels([x, skip_features[2 - t]]), params, f"sc{t}")
        if sources:
            mask_t = downsample_mask(batch.mask, x.shape[2], x.shape[3])
            manipulated = [
                style_block_apply(x, codes[src], params, f"cm{t}.{src}", config.epsilon, slope) for src in sources
            ]
            fusion = {AblationMode.CM_PIX: "pix", AblationMode.CM_AVG: "avg"}.get(mode, "single")
            x, weights = lab_cm_apply(x, manipulated, mask_t, fusion, params, f"cm{t}.fuse")
            weight_maps.append(weights)
        feats.append(x)

    x = ad.upsample_nearest(x, size // x.shape[2])
    pred = ad.sigmoid(conv_layer(ad.concat_channels([x, x_in]), params, "bb.head"))
    blended = ad.add(ad.mul(pred, mask), ad.mul(colour, Tensor(1.0 - batch.mask)))
    if mode is AblationMode.BACKBONE_LAB:
        blended = normalized_lab_to_rgb(blended)
    return ForwardResult(blended, feats, weight_maps)


def duconet_forward_full(batch: Batch, params: Mapping[str, Tensor], config: DucoNetConfig) -> ForwardResult:
    mode = config.ablation_mode
    if mode is AblationMode.SKIP_CONNECTION_LAB:
        lab_in = ad.concat_channels([Tensor(batch.lab), Tensor(batch.mask)])
        skip_features = run_encoder(lab_in, params, "enc_Lab", 3, config.leaky_slope)
        return backbone_forward(batch, params, config, skip_features=skip_features)
    codes = compute_codes(batch, params, config) if code_sources(mode) else None
    return backbone_forward(batch, params, config, codes=codes)


def duconet_forward(batch: Batch, params: Mapping[str, Tensor], config: DucoNetConfig) -> Tensor:
    """Harmonized NCHW RGB batch for whichever ablation mode ``config`` selects."""
    return duconet_forward_full(batch, params, config).image


def harmonize(
    composite: np.ndarray, mask: np.ndarray, params: Mapping[str, Tensor], config: DucoNetConfig
) -> np.ndarray:
    """Single (H, W, 3) composite + (H, W) mask -> harmonized (H, W, 3) image."""
    with ad.no_grad():
        out = duconet_forward(make_batch([composite], [mask]), params, config)
    return out.data[0].transpose(1, 2, 0).copy()
