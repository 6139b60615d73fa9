"""Built-in numerical checks: finite-difference gradients for every autodiff
primitive and a small two-block model, and Shapley axioms against a
permutation-enumeration oracle. Used by ``attribroi selftest``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .explain import exact_shapley
from .model import MiniHViT, ModelConfig

PRIMITIVE_TOL = 1e-5
COMPOSITE_TOL = 1e-4
SHAPLEY_TOL = 1e-9


@dataclass
class Check:
    name: str
    error: float
    tol: float
    inclusive: bool = False

    @property
    def passed(self):
        return bool(self.error <= self.tol if self.inclusive else self.error < self.tol)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: error {self.error:.3e} (tol {self.tol:g})"


def _weighted(out, rng):
    """Reduce to a scalar with fixed random weights so every output entry matters."""
    w = Tensor(rng.standard_normal(out.shape))
    return (out * w).sum()


def primitive_cases(rng):
    """(name, f, point) triples; each f maps one Tensor to a scalar Tensor."""
    a = rng.standard_normal((3, 4))
    b = Tensor(rng.standard_normal((3, 4)))
    m = Tensor(rng.standard_normal((4, 5)))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    wrng = np.random.default_rng(rng.integers(2**32))

    def red(fn):
        seed = wrng.integers(2**32)
        return lambda x: _weighted(fn(x), np.random.default_rng(seed))

    gamma = Tensor(rng.uniform(0.5, 1.5, 4))
    beta = Tensor(rng.standard_normal(4))
    return [
        ("add", red(lambda x: x + b), a),
        ("add_broadcast", red(lambda x: ad.add(x, b.data[0])), a),
        ("sub", red(lambda x: b - x), a),
        ("mul", red(lambda x: x * b), a),
        ("scale", red(lambda x: ad.scale(x, -2.5)), a),
        ("div_numerator", red(lambda x: x / Tensor(pos)), a),
        ("div_denominator", red(lambda x: b / x), pos),
        ("log", red(ad.log), pos),
        ("exp", red(ad.exp), a),
        ("relu", red(ad.relu), a + np.sign(a) * 0.01),
        ("gelu", red(ad.gelu), a),
        ("sum_axis", red(lambda x: ad.tsum(x, axis=0)), a),
        ("mean", red(lambda x: ad.mean(x, axis=1, keepdims=True)), a),
        ("reshape", red(lambda x: x.reshape(2, 6)), a),
        ("transpose", red(lambda x: x.T), a),
        ("getitem", red(lambda x: x[1:, ::2]), a),
        ("getitem_fancy", red(lambda x: x[np.array([0, 2, 2]), np.array([1, 1, 3])]), a),
        ("concat", red(lambda x: ad.concat([x, b], axis=1)), a),
        ("matmul_left", red(lambda x: x @ m), a),
        ("matmul_right", red(lambda x: Tensor(a) @ x), m.data),
        ("softmax", red(lambda x: ad.softmax(x, axis=-1)), a),
        ("log_softmax", red(lambda x: ad.log_softmax(x, axis=-1)), a),
        ("layer_norm", red(lambda x: ad.layer_norm(x, gamma, beta)), a),
        ("layer_norm_gamma", red(lambda g: ad.layer_norm(Tensor(a), g, beta)), gamma.data),
        ("upsample_bilinear", red(lambda x: ad.upsample_bilinear(x, 7, 9)), a),
    ]


def gradient_suite(seeds=range(10)):
    """Max error per primitive and for the composite model, over ``seeds``."""
    worst = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, f, point in primitive_cases(rng):
            worst[name] = max(worst.get(name, 0.0), ad.grad_check(f, point))
    checks = [Check(f"grad {name}", err, PRIMITIVE_TOL) for name, err in worst.items()]
    comp = 0.0
    for seed in seeds:
        comp = max(comp, composite_error(seed))
    checks.append(Check("grad mini-hvit composite", comp, COMPOSITE_TOL))
    return checks


def composite_model(seed):
    cfg = ModelConfig(image_size=8, channels=1, patch_size=2, stage_embed_dims=(8, 16),
                      stage_depths=(1, 1), heads_per_stage=(2, 2), seed=seed)
    return MiniHViT(cfg)


def composite_error(seed):
    """Finite-difference check of a two-block model, w.r.t. the input and a
    weight matrix from each stage."""
    model = composite_model(seed)
    rng = np.random.default_rng(seed + 1000)
    image = rng.uniform(0, 1, (1, 8, 8))
    # larger weights than the init so the check exercises non-trivial curvature
    for t in model.parameters():
        t.data = t.data + 0.2 * rng.standard_normal(t.shape)

    def through_input(x):
        return model.forward(x).logits[1]

    err = ad.grad_check(through_input, image)
    for name in ("stages.0.blocks.0.attn.qkv.weight", "stages.1.merge.weight"):
        original = model.params[name]

        def through_param(w, name=name):
            model.params[name] = w
            return model.forward(Tensor(image)).logits[0]

        try:
            err = max(err, ad.grad_check(through_param, original.data.copy()))
        finally:
            model.params[name] = original
    return err


def brute_force_shapley(values):
    """Average marginal contribution over all n! orderings (bitmask table)."""
    values = np.asarray(values, dtype=np.float64)
    n = int(round(math.log2(len(values))))
    phi = np.zeros(n)
    for order in permutations(range(n)):
        mask = 0
        for player in order:
            phi[player] += values[mask | (1 << player)] - values[mask]
            mask |= 1 << player
    return phi / math.factorial(n)


def shapley_suite(sizes=range(3, 9), seeds=range(5)):
    exact_err, eff_err = 0.0, 0.0
    for n in sizes:
        for seed in seeds:
            values = np.random.default_rng(seed * 100 + n).standard_normal(2**n)
            phi = exact_shapley(values)
            exact_err = max(exact_err, float(np.abs(phi - brute_force_shapley(values)).max()))
            eff_err = max(eff_err, abs(phi.sum() - (values[-1] - values[0])))
    return [Check("shapley exact vs enumeration", exact_err, SHAPLEY_TOL, inclusive=True),
            Check("shapley efficiency", eff_err, SHAPLEY_TOL, inclusive=True)]


def run_all(seeds=range(10)):
    return gradient_suite(seeds) + shapley_suite()
