"""
U-Net depth regressor with windowed attention on the skip connections.

Each encoder skip E_l is tokenized and refined before fusion with the
decoder. Three variants are supported:

    self_only   windowed self-attention over E_l
    cross_only  queries from the upsampled decoder context D_{l+1}, keys and
                values from E_l
    self_cross  self-attention followed by cross-attention

Convolutions use reflect padding and upsampling is bilinear, so a constant
input yields spatially constant feature maps.
"""

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

VARIANTS = ("cross_only", "self_only", "self_cross")
CHECKPOINT_VERSION = 1


@dataclass
class NetConfig:
    """Architecture hyperparameters.

    Defaults are the desk-scale model; :meth:`full_scale` gives the full-size one.
    ``vit_dims`` lists the attention embedding size per skip from the deepest
    skip to the shallowest. ``patch`` (int or one per skip, same order) is the
    token stride at skip resolution; ``window`` is counted in tokens.
    ``input_size`` is the nominal tile size the model is built for.
    ``input_mean`` / ``input_std`` (one value per band) standardize the input
    inside the model; ``target_mean`` sets the head bias so the untrained
    model predicts that value. Left unset, the input passes through unchanged,
    the head keeps its default bias, and :func:`bathyscope.trainer.train`
    fills all three from the training pixels.
    """

    unet_filters: Tuple[int, ...] = (8, 16, 32, 64)
    vit_dims: Tuple[int, ...] = (64, 32, 16)
    vit_depth: int = 1
    heads: int = 4
    window: int = 8
    mlp_ratio: float = 4.0
    patch: Union[int, Tuple[int, ...]] = 1
    dropout: float = 0.1
    in_channels: int = 3
    attention_variant: str = "cross_only"
    seed: int = 0
    input_size: int = 64
    input_mean: Optional[Tuple[float, ...]] = None
    input_std: Optional[Tuple[float, ...]] = None
    target_mean: Optional[float] = None

    @classmethod
    def full_scale(cls, **kw):
        base = dict(unet_filters=(64, 128, 256, 512), vit_dims=(512, 256, 128), vit_depth=1,
                    heads=8, window=64, mlp_ratio=4.0, patch=32, dropout=0.1,
                    input_size=720)
        base.update(kw)
        return cls(**base)

    def __post_init__(self):
        self.unet_filters = tuple(int(f) for f in self.unet_filters)
        self.vit_dims = tuple(int(d) for d in self.vit_dims)
        if not isinstance(self.patch, int):
            self.patch = tuple(int(p) for p in self.patch)
        if self.input_mean is not None:
            self.input_mean = tuple(float(v) for v in self.input_mean)
        if self.input_std is not None:
            self.input_std = tuple(float(v) for v in self.input_std)

    def patches(self):
        """Patch size per skip, deepest first."""
        if isinstance(self.patch, int):
            return (self.patch,) * len(self.vit_dims)
        return self.patch

    def validate(self):
        if self.attention_variant not in VARIANTS:
            raise ValueError(f"attention_variant must be one of {VARIANTS}")
        if len(self.unet_filters) < 2:
            raise ValueError("need at least two U-Net stages")
        if len(self.vit_dims) != len(self.unet_filters) - 1:
            raise ValueError("need exactly one attention block per skip: len(vit_dims) == len(unet_filters) - 1")
        if len(self.patches()) != len(self.vit_dims):
            raise ValueError("patch must be an int or have one entry per skip")
        if self.window < 1 or min(self.patches()) < 1:
            raise ValueError("window and patch must be positive")
        for d in self.vit_dims:
            if d % self.heads:
                raise ValueError(f"heads={self.heads} does not divide embedding dim {d}")
        for stats in (self.input_mean, self.input_std):
            if stats is not None and len(stats) != self.in_channels:
                raise ValueError("input_mean and input_std need one value per input channel")
        if self.input_std is not None and min(self.input_std) <= 0:
            raise ValueError("input_std must be positive")
        if self.target_mean is not None and not 0 < self.target_mean < 1:
            raise ValueError("target_mean must lie in (0, 1)")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.input_size < self.min_input_size():
            raise ValueError(f"input_size {self.input_size} is below the minimum "
                             f"{self.min_input_size()} implied by pooling depth and patch size")
        deepest = self.input_size // 2 ** (len(self.unet_filters) - 2)
        if self.patches()[0] > deepest:
            raise ValueError(f"patch {self.patches()[0]} exceeds the deepest skip ({deepest} px)")

    def min_input_size(self):
        return 2 ** (len(self.unet_filters) - 1) * max(self.patches())


def _pad_to(x, multiple):
    """Reflect-pad (N, C, H, W) on the bottom/right to a multiple; returns (x, (H, W))."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return x, (h, w)


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, dropout=0.0):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, padding_mode="reflect")
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, padding_mode="reflect")
        self.drop = nn.Dropout2d(dropout) if dropout > 0 else nn.Identity()

    def forward(self, x):
        x = F.relu(self.conv1(x))
        x = self.drop(x)
        return F.relu(self.conv2(x))


def relative_position_index(win):
    coords = torch.stack(torch.meshgrid(torch.arange(win), torch.arange(win), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    rel[:, :, 0] += win - 1
    rel[:, :, 1] += win - 1
    rel[:, :, 0] *= 2 * win - 1
    return rel.sum(-1)


def window_partition(x, win):
    """(B, H, W, D) -> (B * nW, win*win, D); H, W multiples of win."""
    b, h, w, d = x.shape
    x = x.view(b, h // win, win, w // win, win, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, win * win, d)


def window_reverse(windows, win, h, w):
    d = windows.shape[-1]
    x = windows.view(-1, h // win, w // win, win, win, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, h, w, d)


class WindowAttention(nn.Module):
    """Multi-head attention within non-overlapping windows.

    With ``cross=True`` queries come from a separate context sequence. The
    query projection has no bias, so an all-zero context yields attention
    driven by the relative position bias alone.
    """

    def __init__(self, dim, heads, window, cross=False, dropout=0.0):
        super().__init__()
        self.dim, self.heads, self.window, self.cross = dim, heads, window, cross
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim, bias=not cross)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)
        self.rel_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)
        self.register_buffer("rel_index", relative_position_index(window), persistent=False)

    def forward(self, x, context=None, key_mask=None):
        """x, context: (Bw, N, D) windowed tokens; key_mask: (Bw, N) True for padding."""
        bw, n, d = x.shape
        h = self.heads
        q_src = context if self.cross else x
        q = self.q(q_src).view(bw, n, h, -1).transpose(1, 2)
        k, v = self.kv(x).view(bw, n, 2, h, -1).permute(2, 0, 3, 1, 4)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.rel_bias[self.rel_index.view(-1)].view(n, n, h).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if key_mask is not None:
            attn = attn.masked_fill(key_mask[:, None, None, :], float("-inf"))
        attn = self.drop(attn.softmax(dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(bw, n, d)
        return self.proj(out)


class SkipAttention(nn.Module):
    """Refine one encoder skip with windowed self- and/or cross-attention.

    Tokens are formed with a stride-``patch`` projection; each attention
    output is added residually and layer-normalized, followed by an MLP
    sub-layer of the same form. The result is projected back to the skip's
    channel count and spatial size.
    """

    def __init__(self, channels, dim, heads, window, variant, depth=1, patch=1,
                 mlp_ratio=4.0, dropout=0.0):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {variant!r}")
        self.variant, self.window, self.patch = variant, window, patch
        self.use_self = variant in ("self_only", "self_cross")
        self.use_cross = variant in ("cross_only", "self_cross")
        self.embed = nn.Conv2d(channels, dim, patch, stride=patch)
        self.embed_ctx = nn.Conv2d(channels, dim, patch, stride=patch) if self.use_cross else None
        if patch == 1:
            self.unembed = nn.Conv2d(dim, channels, 1)
        else:
            self.unembed = nn.ConvTranspose2d(dim, channels, patch, stride=patch)
        hidden = int(dim * mlp_ratio)
        self.layers = nn.ModuleList()
        for _ in range(depth):
            layer = nn.ModuleDict()
            if self.use_self:
                layer["self_attn"] = WindowAttention(dim, heads, window, cross=False, dropout=dropout)
                layer["norm_self"] = nn.LayerNorm(dim)
            if self.use_cross:
                layer["cross_attn"] = WindowAttention(dim, heads, window, cross=True, dropout=dropout)
                layer["norm_cross"] = nn.LayerNorm(dim)
            layer["mlp"] = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(dropout),
                                         nn.Linear(hidden, dim))
            layer["norm_mlp"] = nn.LayerNorm(dim)
            self.layers.append(layer)
        self.drop = nn.Dropout(dropout)

    def forward(self, skip, context=None):
        if self.use_cross and context is None:
            raise ValueError(f"variant {self.variant} needs decoder context")
        if self.use_cross and context.shape[-2:] != skip.shape[-2:]:
            raise ValueError(f"context {tuple(context.shape[-2:])} not aligned with skip {tuple(skip.shape[-2:])}")
        h0, w0 = skip.shape[-2:]
        skip_p = F.pad(skip, (0, (-w0) % self.patch, 0, (-h0) % self.patch))
        t = self.embed(skip_p).permute(0, 2, 3, 1)  # B, h, w, D
        c = None
        if self.use_cross:
            ctx_p = F.pad(context, (0, (-w0) % self.patch, 0, (-h0) % self.patch))
            c = self.embed_ctx(ctx_p).permute(0, 2, 3, 1)
        b, h, w, d = t.shape
        win = self.window
        ph, pw = (-h) % win, (-w) % win
        t = F.pad(t, (0, 0, 0, pw, 0, ph))
        if c is not None:
            c = F.pad(c, (0, 0, 0, pw, 0, ph))
        hp, wp = h + ph, w + pw
        key_mask = None
        if ph or pw:
            pad = torch.ones(1, hp, wp, 1, dtype=torch.bool, device=t.device)
            pad[:, :h, :w] = False
            key_mask = window_partition(pad.expand(b, -1, -1, -1).to(t.dtype), win)[..., 0] > 0

        x = window_partition(t, win)
        cw = window_partition(c, win) if c is not None else None
        for layer in self.layers:
            if self.use_self:
                x = layer["norm_self"](x + self.drop(layer["self_attn"](x, key_mask=key_mask)))
            if self.use_cross:
                x = layer["norm_cross"](x + self.drop(layer["cross_attn"](x, cw, key_mask=key_mask)))
            x = layer["norm_mlp"](x + self.drop(layer["mlp"](x)))
        x = window_reverse(x, win, hp, wp)[:, :h, :w].permute(0, 3, 1, 2)
        return self.unembed(x)[..., :h0, :w0]


class SwinBathyUNet(nn.Module):
    """Four-stage (by default) U-Net with attention-refined skips and a [0, 1] head."""

    def __init__(self, config: NetConfig):
        super().__init__()
        config.validate()
        self.config = config
        f = config.unet_filters
        n_skip = len(f) - 1
        c = config.in_channels
        shift = config.input_mean if config.input_mean is not None else (0.0,) * c
        scale = config.input_std if config.input_std is not None else (1.0,) * c
        self.register_buffer("in_shift", torch.tensor(shift).view(1, c, 1, 1))
        self.register_buffer("in_scale", torch.tensor(scale).view(1, c, 1, 1))
        self.pool = nn.MaxPool2d(2)
        self.enc = nn.ModuleList()
        cin = config.in_channels
        for i, c in enumerate(f):
            self.enc.append(ConvBlock(cin, c, config.dropout if i == len(f) - 1 else 0.0))
            cin = c
        # level l (0 = shallowest) skip/decoder modules; vit_dims/patches run deep -> shallow
        dims = config.vit_dims[::-1]
        patches = config.patches()[::-1]
        self.up = nn.ModuleList(nn.Conv2d(f[l + 1], f[l], 3, padding=1, padding_mode="reflect")
                                for l in range(n_skip))
        self.attn = nn.ModuleList(
            SkipAttention(f[l], dims[l], config.heads, config.window, config.attention_variant,
                          depth=config.vit_depth, patch=patches[l], mlp_ratio=config.mlp_ratio,
                          dropout=config.dropout)
            for l in range(n_skip))
        self.dec = nn.ModuleList(ConvBlock(2 * f[l], f[l], config.dropout) for l in range(n_skip))
        self.head = nn.Conv2d(f[0], 1, 1)
        # He init keeps activation scale through the ReLU conv stack; the
        # framework default shrinks it at every layer and stalls early training
        for block in list(self.enc) + list(self.dec):
            for conv in (block.conv1, block.conv2):
                nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
                nn.init.zeros_(conv.bias)
        if config.target_mean is not None:
            # starting at the target mean spares the decoder a collective push
            # toward zero that kills ReLU channels in the first epoch
            t = config.target_mean
            nn.init.constant_(self.head.bias, math.log(t / (1 - t)))

    @property
    def named_layers(self):
        layers = {f"enc{i}": m for i, m in enumerate(self.enc)}
        layers["bottleneck"] = self.enc[-1]
        for l in range(len(self.dec)):
            layers[f"up{l}"] = self.up[l]
            layers[f"skip_attn{l}"] = self.attn[l]
            layers[f"dec{l}"] = self.dec[l]
        layers["last_decoder_block"] = self.dec[0]
        return layers

    def forward(self, x):
        """(N, C, H, W) in [0, 1] -> (N, 1, H, W) in [0, 1]."""
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} channels, got {x.shape[1]}")
        x = (x - self.in_shift) / self.in_scale
        x, (h, w) = _pad_to(x, self.config.min_input_size())
        skips = []
        for i, block in enumerate(self.enc):
            if i:
                x = self.pool(x)
            x = block(x)
            skips.append(x)
        d = skips.pop()
        for l in reversed(range(len(self.dec))):
            up = self.up[l](F.interpolate(d, scale_factor=2, mode="bilinear", align_corners=False))
            e = self.attn[l](skips[l], context=up)
            d = self.dec[l](torch.cat([up, e], dim=1))
        return torch.sigmoid(self.head(d))[..., :h, :w]


def build(config: NetConfig = None) -> SwinBathyUNet:
    """Build a model deterministically from ``config.seed``; returned in eval mode."""
    config = config or NetConfig()
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = SwinBathyUNet(config)
    return model.eval()


def n_parameters(model):
    return sum(p.numel() for p in model.parameters())


def checksum(model):
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _as_batch(model, x):
    p = next(model.parameters(), None)
    dtype = p.dtype if p is not None else torch.float32
    t = torch.as_tensor(np.asarray(x), dtype=dtype)
    return t[None] if t.dim() == 3 else t


@torch.no_grad()
def forward(model, x):
    """Predict a normalized depth grid for one C x H x W input (numpy in, numpy out)."""
    was_training = model.training
    model.eval()
    try:
        return model(_as_batch(model, x))[0, 0].cpu().numpy()
    finally:
        model.train(was_training)


def _layer(model, layer_name):
    layers = getattr(model, "named_layers", {})
    if layer_name not in layers:
        raise KeyError(f"unknown layer {layer_name!r}; available: {sorted(layers)}")
    return layers[layer_name]


@torch.no_grad()
def activations(model, x, layer_name="last_decoder_block"):
    """Post-nonlinearity feature maps (K x h x w) of a named layer."""
    store = {}

    def capture(module, inputs, output):
        store["a"] = output

    handle = _layer(model, layer_name).register_forward_hook(capture)
    try:
        forward(model, x)
    finally:
        handle.remove()
    return store["a"][0].cpu().numpy()


@torch.no_grad()
def forward_with_channel_ablated(model, x, layer_name, k):
    """Forward pass with channel ``k`` (0-based) of a named layer set to zero."""
    layer = _layer(model, layer_name)

    def hook(module, inputs, output):
        if not 0 <= k < output.shape[1]:
            raise IndexError(f"channel {k} out of range for layer with {output.shape[1]} channels")
        output = output.clone()
        output[:, k] = 0
        return output

    handle = layer.register_forward_hook(hook)
    try:
        return forward(model, x)
    finally:
        handle.remove()


def attend_skip(module: SkipAttention, skip, context=None):
    """Apply a skip-attention block to a single (C, H, W) or batched skip tensor."""
    batched = skip.dim() == 4
    s = skip if batched else skip[None]
    c = None if context is None else (context if batched else context[None])
    out = module(s, context=c if module.use_cross else None)
    return out if batched else out[0]


def save_checkpoint(path, model, extra=None):
    torch.save({"format_version": CHECKPOINT_VERSION, "config": asdict(model.config),
                "state_dict": model.state_dict(), "extra": extra or {}}, path)


def load_checkpoint(path):
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {ckpt.get('format_version')}")
    model = build(NetConfig(**ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    return model.eval(), ckpt.get("extra", {})
