"""Two-stream context-aware recognition transformer.

A target crop and the full scene are encoded by separate small conv stacks,
the context map is tokenized with learned positional embeddings, and a stack
of decoder layers (multi-head encoder-decoder attention only, no
self-attention) integrates context into the single target token.  Two
classifier heads and a confidence estimator produce the final
confidence-weighted prediction ``y_p = p*y_t + (1-p)*y_tc``.

By default the classifier head on the raw target features and the confidence
estimator consume stop-gradient copies, so only the context-integrated loss
shapes the target encoder.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import Rng

__all__ = [
    "ModelConfig", "BoundingBox", "Prediction", "CrtnetParams",
    "EncoderParams", "DecoderLayerParams", "tiny_config", "init_params",
    "bilinear_resize", "prepare_inputs", "encode", "tokenize_context",
    "pool_target", "grid_cell_index", "positional_encode",
    "decoder_layer", "decode_stack", "forward",
]

FUSION_MODES = ("confidence_weighted", "target_only", "context_only")

# Channel progression of the three stride-2 encoder blocks (input is RGB).
_ENCODER_WIDTHS = (16, 32)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are desk-scale CPU settings."""

    num_classes: int = 8
    image_side: int = 64          # both streams are resized to this square
    feat_channels: int = 64       # D
    feat_h: int = 4
    feat_w: int = 4
    decoder_layers: int = 2       # X
    heads: int = 4
    mlp_hidden: int = 128
    dropout_rate: float = 0.1
    share_encoders: bool = False
    fusion_mode: str = "confidence_weighted"
    detach_target_heads: bool = True
    confidence_hidden: int = 32

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.feat_channels % self.heads != 0:
            raise ValueError(
                f"feat_channels {self.feat_channels} not divisible by heads {self.heads}")
        if self.feat_h < 1 or self.feat_w < 1:
            raise ValueError("token grid must be at least 1x1")
        if self.feat_h != self.feat_w:
            raise ValueError("token grid must be square for the conv encoder")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.image_side % 8 != 0:
            raise ValueError("image_side must be divisible by 8 (three stride-2 blocks)")
        post = self.image_side // 8
        if post % self.feat_h != 0:
            raise ValueError(
                f"conv output side {post} is not a multiple of feat_h {self.feat_h}")

    @property
    def num_tokens(self) -> int:
        return self.feat_h * self.feat_w

    @property
    def head_dim(self) -> int:
        return self.feat_channels // self.heads

    @property
    def final_pool(self) -> int:
        """Window of the average pool after the conv blocks (1 = skip)."""
        return (self.image_side // 8) // self.feat_h


def tiny_config() -> ModelConfig:
    """Smallest full model; used by gradient checks and fast tests."""
    return ModelConfig(num_classes=3, image_side=16, feat_channels=8,
                       feat_h=2, feat_w=2, decoder_layers=1, heads=2,
                       mlp_hidden=16, dropout_rate=0.1, confidence_hidden=8)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in full-image pixel coordinates, top-left origin."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise ValueError(f"box origin must be non-negative, got ({self.x}, {self.y})")
        if self.w < 1 or self.h < 1:
            raise ValueError(f"box must be at least 1x1, got {self.w}x{self.h}")

    def validate_within(self, image_w: int, image_h: int):
        if self.x + self.w > image_w or self.y + self.h > image_h:
            raise ValueError(
                f"box {self} exceeds image bounds {image_w}x{image_h}")

    def midpoint(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)


@dataclass
class Prediction:
    """Output quadruple of one forward pass (plus attention maps)."""

    y_t: Tensor      # distribution from the target-only head
    y_tc: Tensor     # distribution from the context-integrated head
    p: Tensor        # confidence scalar in [0, 1]
    y_p: Tensor      # fused distribution
    attention: np.ndarray | None = None   # (layers, heads, tokens)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class EncoderParams:
    conv_w: list[Tensor] = field(default_factory=list)
    conv_b: list[Tensor] = field(default_factory=list)

    def named(self, prefix: str):
        out = {}
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out[f"{prefix}.conv{i}.w"] = w
            out[f"{prefix}.conv{i}.b"] = b
        return out


@dataclass
class DecoderLayerParams:
    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: list[Tensor]
    bo: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    def named(self, prefix: str):
        out = {}
        for h in range(len(self.wq)):
            out[f"{prefix}.head{h}.wq"] = self.wq[h]
            out[f"{prefix}.head{h}.wk"] = self.wk[h]
            out[f"{prefix}.head{h}.wv"] = self.wv[h]
            out[f"{prefix}.head{h}.wo"] = self.wo[h]
        out[f"{prefix}.bo"] = self.bo
        out[f"{prefix}.ln1.gamma"] = self.ln1_gamma
        out[f"{prefix}.ln1.beta"] = self.ln1_beta
        out[f"{prefix}.mlp.w1"] = self.mlp_w1
        out[f"{prefix}.mlp.b1"] = self.mlp_b1
        out[f"{prefix}.mlp.w2"] = self.mlp_w2
        out[f"{prefix}.mlp.b2"] = self.mlp_b2
        out[f"{prefix}.ln2.gamma"] = self.ln2_gamma
        out[f"{prefix}.ln2.beta"] = self.ln2_beta
        return out


@dataclass
class CrtnetParams:
    """All learnable weights.  With shared encoders, ``target_encoder`` and
    ``context_encoder`` reference the same object (identical storage)."""

    config: ModelConfig
    target_encoder: EncoderParams
    context_encoder: EncoderParams
    pos_embed: Tensor                      # (L, D)
    layers: list[DecoderLayerParams]
    gz_w: Tensor
    gz_b: Tensor
    gt_w: Tensor
    gt_b: Tensor
    u_w1: Tensor
    u_b1: Tensor
    u_w2: Tensor
    u_b2: Tensor

    def named_parameters(self) -> dict[str, Tensor]:
        """Stable name -> tensor map; shared encoders appear once."""
        out: dict[str, Tensor] = {}
        if self.target_encoder is self.context_encoder:
            out.update(self.target_encoder.named("encoder"))
        else:
            out.update(self.target_encoder.named("target_encoder"))
            out.update(self.context_encoder.named("context_encoder"))
        out["pos_embed"] = self.pos_embed
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"decoder{i}"))
        out["gz.w"], out["gz.b"] = self.gz_w, self.gz_b
        out["gt.w"], out["gt.b"] = self.gt_w, self.gt_b
        out["u.w1"], out["u.b1"] = self.u_w1, self.u_b1
        out["u.w2"], out["u.b2"] = self.u_w2, self.u_b2
        return out

    def encoder_tensors(self) -> list[Tensor]:
        """Distinct encoder weight tensors (deduplicated by identity)."""
        seen: dict[int, Tensor] = {}
        for enc in (self.target_encoder, self.context_encoder):
            for t in enc.conv_w + enc.conv_b:
                seen[id(t)] = t
        return list(seen.values())

    def zero_grad(self):
        for t in self.named_parameters().values():
            t.zero_grad()


def _encoder_channel_plan(config: ModelConfig) -> list[tuple[int, int]]:
    widths = (3,) + _ENCODER_WIDTHS + (config.feat_channels,)
    return list(zip(widths[:-1], widths[1:]))


def _init_encoder(config: ModelConfig, rng: Rng) -> EncoderParams:
    enc = EncoderParams()
    for cin, cout in _encoder_channel_plan(config):
        fan_in = cin * 9
        enc.conv_w.append(Tensor(rng.normal(np.sqrt(2.0 / fan_in), (cout, cin, 3, 3)),
                                 requires_grad=True))
        enc.conv_b.append(Tensor(np.zeros(cout), requires_grad=True))
    return enc


def _linear(rng: Rng, fan_in: int, fan_out: int) -> Tensor:
    return Tensor(rng.normal(np.sqrt(1.0 / fan_in), (fan_in, fan_out)),
                  requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _init_layer(config: ModelConfig, rng: Rng) -> DecoderLayerParams:
    d, dh = config.feat_channels, config.head_dim
    heads = config.heads
    return DecoderLayerParams(
        wq=[_linear(rng, d, dh) for _ in range(heads)],
        wk=[_linear(rng, d, dh) for _ in range(heads)],
        wv=[_linear(rng, d, dh) for _ in range(heads)],
        wo=[_linear(rng, dh, d) for _ in range(heads)],
        bo=_zeros((1, d)),
        ln1_gamma=Tensor(np.ones(d), requires_grad=True),
        ln1_beta=_zeros(d),
        mlp_w1=_linear(rng, d, config.mlp_hidden),
        mlp_b1=_zeros((1, config.mlp_hidden)),
        mlp_w2=_linear(rng, config.mlp_hidden, d),
        mlp_b2=_zeros((1, d)),
        ln2_gamma=Tensor(np.ones(d), requires_grad=True),
        ln2_beta=_zeros(d),
    )


def init_params(config: ModelConfig, rng: Rng) -> CrtnetParams:
    """Fresh parameters; consumption order is fixed, so a given rng seed
    always produces the same initialisation."""
    d, c = config.feat_channels, config.num_classes
    target_enc = _init_encoder(config, rng)
    context_enc = target_enc if config.share_encoders else _init_encoder(config, rng)
    return CrtnetParams(
        config=config,
        target_encoder=target_enc,
        context_encoder=context_enc,
        pos_embed=Tensor(rng.normal(0.02, (config.num_tokens, d)), requires_grad=True),
        layers=[_init_layer(config, rng) for _ in range(config.decoder_layers)],
        gz_w=_linear(rng, d, c), gz_b=_zeros((1, c)),
        gt_w=_linear(rng, d, c), gt_b=_zeros((1, c)),
        u_w1=_linear(rng, d, config.confidence_hidden),
        u_b1=_zeros((1, config.confidence_hidden)),
        u_w2=_linear(rng, config.confidence_hidden, 1),
        u_b2=_zeros((1, 1)),
    )


# ---------------------------------------------------------------------------
# input preparation
# ---------------------------------------------------------------------------

def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a channels-first image, half-pixel-center sampling."""
    c, h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def prepare_inputs(image: Tensor | np.ndarray, box: BoundingBox,
                   config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Crop-and-resize the target stream, resize the context stream.

    Both outputs are (3, S, S) with values in [0, 1]; uint8 input is scaled
    down by 255.  No gradients flow through input preparation.
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    h, w = arr.shape[1], arr.shape[2]
    box.validate_within(w, h)
    s = config.image_side
    crop = arr[:, box.y:box.y + box.h, box.x:box.x + box.w]
    i_t = bilinear_resize(crop, s, s)
    i_c = bilinear_resize(arr, s, s)
    return Tensor(i_t), Tensor(i_c)


# ---------------------------------------------------------------------------
# encoding and tokenization
# ---------------------------------------------------------------------------

def encode(stream: str, img: Tensor, params: CrtnetParams) -> Tensor:
    """Run one stream's conv stack; output is exactly (D, H, W)."""
    if stream == "target":
        enc = params.target_encoder
    elif stream == "context":
        enc = params.context_encoder
    else:
        raise ValueError(f"unknown stream {stream!r}")
    cfg = params.config
    s = cfg.image_side
    if img.shape != (3, s, s):
        raise ad.ShapeError(f"encode: expected (3, {s}, {s}), got {img.shape}")
    x = img
    for w, b in zip(enc.conv_w, enc.conv_b):
        x = ad.relu(ad.add_channel_bias(ad.conv2d(x, w, stride=2, padding=1), b))
    if cfg.final_pool > 1:
        x = ad.pool_avg(x, cfg.final_pool)
    return x


def tokenize_context(a_c: Tensor) -> list[Tensor]:
    """Split a (D, H, W) map into H*W channel vectors, row-major order."""
    _, h, w = a_c.shape
    return [ad.token_at(a_c, r, c) for r in range(h) for c in range(w)]


def pool_target(a_t: Tensor) -> Tensor:
    """Average the target feature map over all spatial cells -> (D,)."""
    return ad.spatial_mean(a_t)


def grid_cell_index(box: BoundingBox, image_w: int, image_h: int,
                    config: ModelConfig) -> int:
    """Token index of the grid cell containing the box midpoint.

    The midpoint is taken in the original image's pixel coordinates and
    mapped onto the (H, W) token grid with floor + clamp.
    """
    mx, my = box.midpoint()
    row = min(max(int(np.floor(my / image_h * config.feat_h)), 0), config.feat_h - 1)
    col = min(max(int(np.floor(mx / image_w * config.feat_w)), 0), config.feat_w - 1)
    return row * config.feat_w + col


def positional_encode(tokens, t_t: Tensor, box: BoundingBox,
                      config: ModelConfig, params: CrtnetParams,
                      image_size: tuple[int, int]) -> tuple[Tensor, Tensor]:
    """Add learned positional embeddings.

    ``image_size`` is (H, W) of the original image the box refers to.
    Returns (z_c of shape (L, D), z_t of shape (1, D)).
    """
    image_h, image_w = image_size
    z_c = ad.add(ad.stack_rows(tokens), params.pos_embed)
    idx = grid_cell_index(box, image_w, image_h, config)
    z_t = ad.add(t_t, ad.take_row(params.pos_embed, idx))
    return z_c, ad.reshape(z_t, (1, config.feat_channels))


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

def _affine(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    out = ad.matmul(x, w)
    return out if b is None else ad.add(out, b)


def _multi_head_attention(z_t: Tensor, z_c: Tensor, lp: DecoderLayerParams,
                          config: ModelConfig, attn_rows=None) -> Tensor:
    inv_sqrt = 1.0 / np.sqrt(config.head_dim)
    out = None
    for h in range(config.heads):
        q = ad.matmul(z_t, lp.wq[h])                    # (1, dh)
        k = ad.matmul(z_c, lp.wk[h])                    # (L, dh)
        v = ad.matmul(z_c, lp.wv[h])                    # (L, dh)
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt)
        attn = ad.softmax(scores, axis=-1)              # (1, L)
        if attn_rows is not None:
            attn_rows.append(attn.data[0].copy())
        contrib = ad.matmul(ad.matmul(attn, v), lp.wo[h])
        out = contrib if out is None else ad.add(out, contrib)
    return ad.add(out, lp.bo)


def decoder_layer(z_t: Tensor, z_c: Tensor, lp: DecoderLayerParams,
                  config: ModelConfig, rng: Rng | None, training: bool,
                  attn_rows=None) -> Tensor:
    """One decoder layer: attention and MLP blocks, each wrapped in
    dropout + residual + post-norm."""
    rate = config.dropout_rate
    eda = _multi_head_attention(z_t, z_c, lp, config, attn_rows)
    h1 = ad.layernorm(ad.add(ad.dropout(eda, rate, training, rng), z_t),
                      lp.ln1_gamma, lp.ln1_beta)
    hidden = ad.dropout(ad.relu(_affine(h1, lp.mlp_w1, lp.mlp_b1)), rate, training, rng)
    mlp = _affine(hidden, lp.mlp_w2, lp.mlp_b2)
    return ad.layernorm(ad.add(ad.dropout(mlp, rate, training, rng), h1),
                        lp.ln2_gamma, lp.ln2_beta)


def decode_stack(z_t: Tensor, z_c: Tensor, params: CrtnetParams,
                 config: ModelConfig, rng: Rng | None, training: bool,
                 attention=None) -> Tensor:
    """Apply every decoder layer, feeding each output back as the query."""
    out = z_t
    for lp in params.layers:
        rows = [] if attention is not None else None
        out = decoder_layer(out, z_c, lp, config, rng, training, rows)
        if attention is not None:
            attention.append(np.stack(rows))
    return out


# ---------------------------------------------------------------------------
# full forward pass
# ---------------------------------------------------------------------------

def _distribution(x_row: Tensor, w: Tensor, b: Tensor, n: int) -> Tensor:
    return ad.reshape(ad.softmax(_affine(x_row, w, b), axis=-1), (n,))


def forward(image: Tensor | np.ndarray, box: BoundingBox, params: CrtnetParams,
            config: ModelConfig | None = None, rng: Rng | None = None,
            training: bool = False, collect_attention: bool = False) -> Prediction:
    """Full forward pass producing the prediction quadruple.

    ``config`` defaults to the one the parameters were built with; passing an
    override (e.g. a different ``fusion_mode``) never changes the weights.

    With ``detach_target_heads`` the target head and the confidence head read
    a stop-gradient copy of the pooled target features, and the fusion reads
    a stop-gradient copy of the decoder output (through the same context
    classifier weights).  Losses on ``y_t`` and ``y_p`` therefore leave the
    target encoder, the context encoder and the decoder untouched, while the
    loss on ``y_tc`` trains them.  Forward values are unaffected.
    """
    cfg = config or params.config
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    i_t, i_c = prepare_inputs(image, box, cfg)
    a_t = encode("target", i_t, params)
    a_c = encode("context", i_c, params)
    tokens = tokenize_context(a_c)
    t_t = pool_target(a_t)
    z_c, z_t = positional_encode(tokens, t_t, box, cfg, params,
                                 (arr.shape[1], arr.shape[2]))
    attention = [] if collect_attention else None
    z_out = decode_stack(z_t, z_c, params, cfg, rng, training, attention)

    c = cfg.num_classes
    y_tc = _distribution(z_out, params.gz_w, params.gz_b, c)

    head_in = ad.detach(t_t) if cfg.detach_target_heads else t_t
    head_row = ad.reshape(head_in, (1, cfg.feat_channels))
    y_t = _distribution(head_row, params.gt_w, params.gt_b, c)
    u_hidden = ad.relu(_affine(head_row, params.u_w1, params.u_b1))
    p = ad.reshape(ad.sigmoid(_affine(u_hidden, params.u_w2, params.u_b2)), (1,))

    if cfg.fusion_mode == "target_only":
        y_p = y_t
    elif cfg.fusion_mode == "context_only":
        y_p = y_tc
    else:
        # The fused branch re-reads the decoder output through a stop
        # gradient, so the fusion loss reaches the classifier weights but not
        # the encoders/decoder.  Values are bit-identical to using y_tc.
        z_fuse = ad.detach(z_out) if cfg.detach_target_heads else z_out
        y_tc_fused = _distribution(z_fuse, params.gz_w, params.gz_b, c)
        one = Tensor(np.ones(1))
        y_p = ad.add(ad.scalar_mul(p, y_t),
                     ad.scalar_mul(ad.sub(one, p), y_tc_fused))

    attn = np.stack(attention) if collect_attention else None
    return Prediction(y_t=y_t, y_tc=y_tc, p=p, y_p=y_p, attention=attn)
