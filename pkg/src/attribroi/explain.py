"""Attribution engines: input-gradient saliency, Grad-CAM, and ROI-level
Shapley values.

Engines accept any model exposing ``forward(Tensor, capture=bool)`` that
returns an object with ``logits`` (and ``captured_tokens`` for Grad-CAM).
Batched images are explained in one backward pass: samples never interact
inside the network, so the gradient of the summed target logits splits into
per-sample gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import io
from .atlas import RoiAtlas, RoiScoreTable, aggregate_roi
from .autodiff import Tensor
from .exceptions import ConfigError, ContractError, ShapeError

EXACT_MAX_PLAYERS = 20


@dataclass
class AttributionMap:
    values: np.ndarray
    signed: bool
    method: str
    target_class: int
    normalization: str = "none"

    @property
    def shape(self):
        return self.values.shape

    def sidecar(self):
        return {
            "schema_version": io.SCHEMA_VERSION,
            "method": self.method,
            "target_class": int(self.target_class),
            "signed": bool(self.signed),
            "normalization": self.normalization,
            "shape": list(self.values.shape),
        }

    def save(self, path):
        """Write ``<path>`` (ATSR) and ``<path>.json`` sidecar."""
        path = Path(path)
        io.write_tensor(path, self.values)
        io.write_json(path.with_name(path.name + ".json"), self.sidecar())

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = io.read_json(path.with_name(path.name + ".json"))
        return cls(values=io.read_tensor(path), signed=meta["signed"], method=meta["method"],
                   target_class=meta["target_class"], normalization=meta.get("normalization", "none"))

    def heatmap(self):
        """Magnitudes scaled into [0, 1] for 8-bit rendering."""
        mag = np.abs(self.values)
        top = mag.max()
        return mag / top if top > 0 else mag

    def save_heatmap(self, path):
        io.write_image(path, self.heatmap(), maxval=255)


def _inference_model(model):
    frozen = getattr(model, "frozen", None)
    return frozen() if callable(frozen) else model


def _batched(images):
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected (C, H, W) or (B, C, H, W) images, got shape {x.shape}")
    return x, False


def _targets(logits, target_class, num):
    k = logits.shape[-1]
    if target_class is None:
        return logits.argmax(axis=-1)
    t = np.broadcast_to(np.asarray(target_class), (num,)).astype(np.int64)
    if np.any(t < 0) or np.any(t >= k):
        raise IndexError(f"target class {target_class!r} out of range for {k} classes")
    return t


def _target_logit_sum(logits, targets):
    return logits[np.arange(len(targets)), targets].sum()


def saliency_maps(model, images, target_class=None, reduce="max"):
    """Per-pixel ``|d logit_target / d pixel|`` reduced over channels.

    Returns ``(maps (B, H, W), targets (B,))``. ``target_class=None`` explains
    each image's predicted class. ``reduce`` is ``"max"`` or ``"mean"``.
    """
    if reduce not in ("max", "mean"):
        raise ConfigError(f"channel reduction must be 'max' or 'mean', got {reduce!r}")
    x, _ = _batched(images)
    net = _inference_model(model)
    inp = Tensor(x, requires_grad=True)
    logits = net.forward(inp).logits
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    targets = _targets(logits.data, target_class, len(x))
    _target_logit_sum(logits, targets).backward()
    mag = np.abs(inp.grad)
    maps = mag.max(axis=1) if reduce == "max" else mag.mean(axis=1)
    return maps, targets


def saliency_map(model, image, target_class=None, reduce="max"):
    maps, targets = saliency_maps(model, image, target_class, reduce)
    return AttributionMap(values=maps[0], signed=False, method="saliency",
                          target_class=int(targets[0]))


def cam_from_activations(activations, gradients, out_size, normalize=True):
    """Grad-CAM from an (h, w, d) activation grid and its gradient.

    Channel weights are the spatial mean of the gradient; the weighted channel
    sum is rectified, bilinearly resized to ``out_size`` and divided by its
    maximum unless it is identically zero.
    """
    acts = np.asarray(activations, dtype=np.float64)
    grads = np.asarray(gradients, dtype=np.float64)
    if acts.shape != grads.shape:
        raise ShapeError(f"activations {acts.shape} and gradients {grads.shape} differ")
    weights = grads.mean(axis=(-3, -2))
    cam = np.maximum(np.einsum("...hwd,...d->...hw", acts, weights), 0.0)
    out_h, out_w = out_size
    mh = ad.bilinear_matrix(cam.shape[-2], out_h)
    mw = ad.bilinear_matrix(cam.shape[-1], out_w)
    up = mh @ cam @ mw.T
    if normalize:
        top = up.max(axis=(-2, -1), keepdims=True)
        up = np.where(top > 0, up / np.where(top > 0, top, 1.0), 0.0)
    return up


def grad_cam_maps(model, images, target_class=None, normalize=True):
    """Grad-CAM for a batch; returns ``(maps (B, H, W), targets (B,))``."""
    x, _ = _batched(images)
    net = _inference_model(model)
    # input tracked so the graph through the captured grid is recorded
    inp = Tensor(x, requires_grad=True)
    record = net.forward(inp, capture=True)
    tokens = getattr(record, "captured_tokens", None)
    if tokens is None:
        raise ContractError("model did not capture an activation grid for Grad-CAM")
    logits = record.logits
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    targets = _targets(logits.data, target_class, len(x))
    target = _target_logit_sum(logits, targets)
    if target.requires_grad:
        target.backward()
    grads = tokens.grad if tokens.grad is not None else np.zeros_like(tokens.data)
    acts, grads = tokens.data, grads
    if acts.ndim == 3:
        acts, grads = acts[None], grads[None]
    return cam_from_activations(acts, grads, x.shape[-2:], normalize), targets


def grad_cam(model, image, target_class=None, normalize=True):
    maps, targets = grad_cam_maps(model, image, target_class, normalize)
    return AttributionMap(values=maps[0], signed=False, method="gradcam",
                          target_class=int(targets[0]),
                          normalization="max" if normalize else "none")


# Shapley values

@dataclass
class ShapleyConfig:
    mode: str = "sampled"
    sample_budget: int | None = None
    baseline: str = "dataset-mean"
    baseline_value: float = 0.0
    seed: int = 0

    def budget_for(self, n_players):
        return self.sample_budget if self.sample_budget is not None else 8 * n_players

    def validate(self, n_players):
        if self.mode not in ("exact", "sampled"):
            raise ConfigError(f"Shapley mode must be 'exact' or 'sampled', got {self.mode!r}")
        if self.baseline not in ("dataset-mean", "constant"):
            raise ConfigError(f"baseline must be 'dataset-mean' or 'constant', got {self.baseline!r}")
        if self.mode == "exact" and n_players > EXACT_MAX_PLAYERS:
            raise ConfigError(f"exact mode supports at most {EXACT_MAX_PLAYERS} ROIs, got {n_players}")
        if self.mode == "sampled" and self.budget_for(n_players) < 2 * n_players:
            raise ConfigError(
                f"sample budget {self.budget_for(n_players)} below 2 x {n_players} ROIs"
            )
        return self


def all_coalitions(n):
    """Boolean membership matrix (2**n, n); row m encodes bitmask m."""
    m = np.arange(2**n)
    return ((m[:, None] >> np.arange(n)) & 1).astype(bool)


def exact_shapley(values):
    """Shapley values from a table of coalition values indexed by bitmask."""
    values = np.asarray(values, dtype=np.float64)
    n = int(round(np.log2(len(values))))
    if 2**n != len(values):
        raise ShapeError(f"coalition table length {len(values)} is not a power of two")
    masks = np.arange(2**n)
    sizes = np.zeros(2**n, dtype=np.int64)
    for i in range(n):
        sizes += (masks >> i) & 1
    weights = np.array([factorial(s) * factorial(n - s - 1) / factorial(n) if s < n else 0.0
                        for s in range(n + 1)])
    phi = np.zeros(n)
    for i in range(n):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        phi[i] = np.sum(weights[sizes[without]] * (values[without | bit] - values[without]))
    return phi


def permutation_coalitions(perms):
    """Membership rows for every prefix of every permutation: (P, n+1, n)."""
    p, n = perms.shape
    rank = np.empty_like(perms)
    rank[np.arange(p)[:, None], perms] = np.arange(n)
    return rank[:, None, :] < np.arange(n + 1)[None, :, None]


def sampled_shapley(value_fn, n, budget, rng):
    """Permutation-sampling estimate; returns ``(phi, standard_error)``.

    ``budget`` counts coalition evaluations: each sampled ordering costs ``n``.
    ``value_fn`` maps a boolean (m, n) membership matrix to m values.
    """
    n_perm = max(1, budget // n)
    perms = np.stack([rng.permutation(n) for _ in range(n_perm)])
    coal = permutation_coalitions(perms)
    flat = coal.reshape(-1, n)
    packed, inverse = np.unique(np.packbits(flat, axis=1), axis=0, return_inverse=True)
    unique_rows = np.unpackbits(packed, axis=1, count=n).astype(bool)
    vals = np.asarray(value_fn(unique_rows), dtype=np.float64)[inverse.reshape(-1)]
    vals = vals.reshape(n_perm, n + 1)
    steps = np.diff(vals, axis=1)
    marginals = np.empty((n_perm, n))
    marginals[np.arange(n_perm)[:, None], perms] = steps
    phi = marginals.mean(axis=0)
    if n_perm > 1:
        stderr = marginals.std(axis=0, ddof=1) / np.sqrt(n_perm)
    else:
        stderr = np.full(n, np.inf)
    return phi, stderr


@dataclass
class ShapleyResult:
    roi_ids: np.ndarray
    phi: np.ndarray
    stderr: np.ndarray
    v_empty: float
    v_full: float
    target_class: int
    map: AttributionMap
    table: RoiScoreTable = field(repr=False, default=None)

    @property
    def efficiency_gap(self):
        return float(self.phi.sum() - (self.v_full - self.v_empty))


def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _predict_logits(model, batch):
    fn = getattr(model, "logits", None)
    if callable(fn):
        return np.asarray(fn(batch))
    with ad.no_grad():
        out = model.forward(Tensor(batch)).logits.data
    return out.reshape(len(batch), -1)


def coalition_value_fn(model, image, atlas, baseline, target, chunk=512):
    """Target-class probability with pixels of absent ROIs set to ``baseline``."""
    image = np.asarray(image, dtype=np.float64)
    baseline = np.broadcast_to(np.asarray(baseline, dtype=np.float64), image.shape)
    ids = atlas.roi_ids
    lookup = np.full(atlas.labels.max() + 1, -1)
    lookup[ids] = np.arange(len(ids))
    player = lookup[atlas.labels]
    background = player < 0
    player = np.where(background, 0, player)

    def value(members):
        members = np.asarray(members, dtype=bool)
        out = np.empty(len(members))
        for start in range(0, len(members), chunk):
            block = members[start:start + chunk]
            keep = block[:, player] | background
            batch = np.where(keep[:, None], image[None], baseline[None])
            out[start:start + chunk] = _softmax_rows(_predict_logits(model, batch))[:, target]
        return out

    return value


def shap_values(model, image, atlas: RoiAtlas, config: ShapleyConfig | None = None,
                baseline_image=None, target_class=None):
    """ROI-level Shapley values of the target-class probability."""
    config = config or ShapleyConfig()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"expected one (C, H, W) image, got shape {image.shape}")
    if atlas.shape != image.shape[-2:]:
        raise ConfigError(f"atlas {atlas.shape} does not cover image {image.shape[-2:]}")
    ids = atlas.roi_ids
    n = len(ids)
    config.validate(n)
    if config.baseline == "dataset-mean":
        if baseline_image is None:
            raise ConfigError("dataset-mean baseline requires baseline_image")
        baseline = np.asarray(baseline_image, dtype=np.float64)
        if baseline.shape != image.shape:
            raise ShapeError(f"baseline {baseline.shape} does not match image {image.shape}")
    else:
        baseline = np.full(image.shape, float(config.baseline_value))

    net = _inference_model(model)
    k_logits = _predict_logits(net, image[None])[0]
    if target_class is None:
        target = int(np.argmax(k_logits))
    else:
        target = int(target_class)
        if not 0 <= target < len(k_logits):
            raise IndexError(f"target class {target} out of range for {len(k_logits)} classes")
    value = coalition_value_fn(net, image, atlas, baseline, target)
    ends = value(np.array([np.zeros(n, bool), np.ones(n, bool)]))
    v_empty, v_full = float(ends[0]), float(ends[1])
    if config.mode == "exact":
        phi = exact_shapley(value(all_coalitions(n)))
        stderr = np.zeros(n)
    else:
        rng = np.random.default_rng(config.seed)
        phi, stderr = sampled_shapley(value, n, config.budget_for(n), rng)

    lookup = np.zeros(atlas.labels.max() + 1)
    lookup[ids] = phi
    amap = AttributionMap(values=lookup[atlas.labels], signed=True, method="shap",
                          target_class=target)
    table = aggregate_roi(amap, atlas, method="shap")
    return ShapleyResult(roi_ids=ids.copy(), phi=phi, stderr=stderr, v_empty=v_empty,
                         v_full=v_full, target_class=target, map=amap, table=table)
