"""Desk-scale hierarchical vision transformer.

Layout: linear patch embedding plus learned position embedding, then per
stage a stack of pre-norm attention/MLP blocks, with 2x2 patch merging
between stages, and a mean-pool -> layer norm -> linear head.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, ShapeError

INIT_STD = 0.02


@dataclass
class ModelConfig:
    image_size: int = 64
    channels: int = 1
    patch_size: int = 4
    stage_embed_dims: tuple = (32, 64)
    stage_depths: tuple = (1, 1)
    heads_per_stage: tuple = (2, 4)
    mlp_ratio: float = 2.0
    num_classes: int = 2
    seed: int = 0
    capture_stage: int = -1
    pos_embed: bool = True

    def __post_init__(self):
        self.stage_embed_dims = tuple(int(d) for d in self.stage_embed_dims)
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.heads_per_stage = tuple(int(h) for h in self.heads_per_stage)

    def validate(self):
        for name in ("image_size", "channels", "patch_size", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        n = len(self.stage_embed_dims)
        if n == 0 or len(self.stage_depths) != n or len(self.heads_per_stage) != n:
            raise ConfigError(
                "stage_embed_dims, stage_depths and heads_per_stage must have equal nonzero length"
            )
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        side = self.image_size // self.patch_size
        for s in range(1, n):
            if side % 2:
                raise ConfigError(f"stage_embed_dims: token grid side {side} is odd before merge {s}")
            side //= 2
        for d, h in zip(self.stage_embed_dims, self.heads_per_stage):
            if h < 1 or d % h:
                raise ConfigError(f"heads_per_stage: embed dim {d} not divisible by {h} heads")
        if any(d < 0 for d in self.stage_depths):
            raise ConfigError("stage_depths must be non-negative")
        if not -n <= self.capture_stage < n:
            raise ConfigError(f"capture_stage {self.capture_stage} out of range for {n} stages")
        return self

    def grid_sides(self):
        """Token-grid side length for each stage."""
        side = self.image_size // self.patch_size
        sides = [side]
        for _ in self.stage_embed_dims[1:]:
            side //= 2
            sides.append(side)
        return sides

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k in ("stage_embed_dims", "stage_depths", "heads_per_stage"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


MODEL_PRESETS = {
    "desk": dict(stage_embed_dims=(32, 64), stage_depths=(1, 1), heads_per_stage=(2, 4)),
    # final-stage widths follow the TinyViT_5m (320) and TinyViT_21m (576) embedding dims
    "tinyvit5m-mini": dict(stage_embed_dims=(64, 160, 320), stage_depths=(1, 1, 1),
                           heads_per_stage=(2, 5, 10)),
    "tinyvit21m-mini": dict(stage_embed_dims=(96, 192, 576), stage_depths=(1, 1, 1),
                            heads_per_stage=(3, 6, 18)),
}


def model_preset(name, **overrides):
    try:
        base = dict(MODEL_PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(MODEL_PRESETS)}")
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class ForwardRecord:
    logits: Tensor
    captured_tokens: Tensor | None = None

    @property
    def captured_tokens_grad(self):
        return None if self.captured_tokens is None else self.captured_tokens.grad


def _trunc_normal(rng, shape, std=INIT_STD):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def patch_merge(tokens, weight, bias=None):
    """Concatenate 2x2 token neighbourhoods and project them.

    ``tokens`` is (..., h, w, d); ``weight`` is (4d, out_dim). The
    concatenation order within a neighbourhood is (top-left, top-right,
    bottom-left, bottom-right).
    """
    tokens = ad.as_tensor(tokens)
    *lead, h, w, d = tokens.shape
    if h % 2 or w % 2:
        raise ShapeError(f"patch_merge needs even extents, got {h}x{w}")
    if weight.shape[0] != 4 * d:
        raise ShapeError(f"merge weight {weight.shape} does not match 4*{d} input features")
    nl = len(lead)
    x = tokens.reshape(*lead, h // 2, 2, w // 2, 2, d)
    axes = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    x = x.transpose(axes).reshape(*lead, h // 2, w // 2, 4 * d)
    return ad.linear(x, weight, bias)


class MiniHViT:
    """Hierarchical ViT classifier with named float64 parameters."""

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        self.params = self._init_params()

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        p = {}

        def lin(name, n_in, n_out):
            p[f"{name}.weight"] = _trunc_normal(rng, (n_in, n_out))
            p[f"{name}.bias"] = np.zeros(n_out)

        def norm(name, d):
            p[f"{name}.weight"] = np.ones(d)
            p[f"{name}.bias"] = np.zeros(d)

        d0 = cfg.stage_embed_dims[0]
        patch_dim = cfg.channels * cfg.patch_size**2
        lin("patch_embed", patch_dim, d0)
        if cfg.pos_embed:
            p["pos_embed"] = _trunc_normal(rng, (cfg.grid_sides()[0] ** 2, d0))
        prev = d0
        for s, (d, depth) in enumerate(zip(cfg.stage_embed_dims, cfg.stage_depths)):
            if s > 0:
                lin(f"stages.{s}.merge", 4 * prev, d)
            hidden = int(round(d * cfg.mlp_ratio))
            for b in range(depth):
                pre = f"stages.{s}.blocks.{b}"
                norm(f"{pre}.norm1", d)
                lin(f"{pre}.attn.qkv", d, 3 * d)
                lin(f"{pre}.attn.proj", d, d)
                norm(f"{pre}.norm2", d)
                lin(f"{pre}.mlp.fc1", d, hidden)
                lin(f"{pre}.mlp.fc2", hidden, d)
            prev = d
        norm("head.norm", prev)
        lin("head.fc", prev, cfg.num_classes)
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return dict(self.params)

    def num_parameters(self):
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) ^ set(state)
        if missing:
            raise ConfigError(f"parameter names do not match: {sorted(missing)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"{k}: expected shape {t.shape}, got {arr.shape}")
            t.data = arr.copy()
            t.zero_grad()

    def frozen(self):
        """A view with gradient tracking off for every parameter."""
        view = MiniHViT.__new__(MiniHViT)
        view.config = self.config
        view.params = {k: Tensor(t.data, name=k) for k, t in self.params.items()}
        return view

    def copy(self):
        clone = MiniHViT(self.config)
        clone.load_state_dict(self.state_dict())
        return clone

    def _lin(self, x, name):
        return ad.linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _norm(self, x, name):
        return ad.layer_norm(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _attention(self, x, pre, heads):
        b, n, d = x.shape
        hd = d // heads
        qkv = self._lin(x, f"{pre}.qkv").reshape(b, n, 3, heads, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ad.scale(q @ ad.swapaxes(k, -1, -2), 1.0 / math.sqrt(hd))
        out = ad.softmax(scores, axis=-1) @ v
        out = out.transpose(0, 2, 1, 3).reshape(b, n, d)
        return self._lin(out, f"{pre}.proj")

    def _block(self, x, pre, heads):
        x = x + self._attention(self._norm(x, f"{pre}.norm1"), f"{pre}.attn", heads)
        h = ad.gelu(self._lin(self._norm(x, f"{pre}.norm2"), f"{pre}.mlp.fc1"))
        return x + self._lin(h, f"{pre}.mlp.fc2")

    def forward(self, image, capture=False):
        """Run the classifier on (C, H, W) or (B, C, H, W) input.

        With ``capture`` set, the record holds the token grid of
        ``config.capture_stage`` shaped (..., h, w, d); it sits inside the
        graph so its ``grad`` is filled by a subsequent backward pass.
        """
        cfg = self.config
        image = ad.as_tensor(image)
        single = image.ndim == 3
        if single:
            image = image.reshape(1, *image.shape)
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if image.ndim != 4 or image.shape[1:] != expected:
            raise ShapeError(f"expected image of shape {expected}, got {image.shape[-3:]}")
        bsz, c, size, p = image.shape[0], cfg.channels, cfg.image_size, cfg.patch_size
        g = size // p
        x = image.reshape(bsz, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
        x = x.reshape(bsz, g * g, c * p * p)
        x = self._lin(x, "patch_embed")
        if cfg.pos_embed:
            x = x + self.params["pos_embed"]

        n_stages = len(cfg.stage_embed_dims)
        capture_at = cfg.capture_stage % n_stages
        sides = cfg.grid_sides()
        captured = None
        for s, (d, depth, heads) in enumerate(
            zip(cfg.stage_embed_dims, cfg.stage_depths, cfg.heads_per_stage)
        ):
            side = sides[s]
            if s > 0:
                prev = x.reshape(bsz, sides[s - 1], sides[s - 1], x.shape[-1])
                w = self.params[f"stages.{s}.merge.weight"]
                bias = self.params[f"stages.{s}.merge.bias"]
                x = patch_merge(prev, w, bias).reshape(bsz, side * side, d)
            for b in range(depth):
                x = self._block(x, f"stages.{s}.blocks.{b}", heads)
            if capture and s == capture_at:
                grid = (side, side, d) if single else (bsz, side, side, d)
                captured = x.reshape(*grid)
                x = captured.reshape(bsz, side * side, d)

        pooled = x.mean(axis=1)
        logits = self._lin(self._norm(pooled, "head.norm"), "head.fc")
        if single:
            logits = logits.reshape(cfg.num_classes)
        return ForwardRecord(logits=logits, captured_tokens=captured)

    __call__ = forward

    def logits(self, images, batch_size=256):
        """Logits as a plain array, evaluated without building a graph."""
        images = np.asarray(images, dtype=np.float64)
        with ad.no_grad():
            chunks = [self.forward(Tensor(images[i:i + batch_size])).logits.data
                      for i in range(0, len(images), batch_size)]
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.config.num_classes))

    def predict_proba(self, images, batch_size=256):
        z = self.logits(images, batch_size)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def init_model(config: ModelConfig) -> MiniHViT:
    return MiniHViT(config)
