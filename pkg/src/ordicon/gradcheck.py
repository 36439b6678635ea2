"""Finite-difference verification of every analytic backward pass.

Each check builds a float64 instance at a random small shape, contracts the
output with a random cotangent ``R`` so the target is the scalar
``sum(forward(x) * R)``, and compares the analytic input and parameter
gradients against central differences.

ReLU makes the targets piecewise smooth.  A probe whose two evaluations
leave any ReLU with a different active pattern than the base point straddles
a kink, so that coordinate is re-probed with a step 100x smaller (twice at
most).  Every coordinate is still compared against the same tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import nn
from .model import (AttentionBlock, EncoderConfig, FusionRegressor, GlobalEncoder, LocalEncoder, Projector,
                    named_params)
from .numerics import DEFAULT_STEP, OracleError, finite_diff_grad, make_rng, rel_error

TOLERANCE = 1e-4
COMPONENTS = ("nn", "losses", "model")


@dataclass
class CheckResult:
    component: str
    name: str
    shape: tuple
    seed: int
    error: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def relu_layers(root) -> list[nn.ReLU]:
    if isinstance(root, nn.ReLU):
        return [root]
    if isinstance(root, nn.Sequential):
        return [r for layer in root.layers for r in relu_layers(layer)]
    if hasattr(root, "children"):
        return [r for _, child in root.children() for r in relu_layers(child)]
    return []


def kink_safe_grad(f: Callable[[np.ndarray], float], x, relus: list[nn.ReLU], h: float = DEFAULT_STEP,
                   shrink: float = 100.0, retries: int = 2) -> np.ndarray:
    """Central differences that shrink the step where a probe crosses a ReLU kink."""
    if not relus:
        return finite_diff_grad(f, x, h)

    def pattern():
        return b"".join(np.packbits(r._mask).tobytes() for r in relus)

    x = np.array(x, dtype=np.float64)
    f(x)
    base = pattern()
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig, step = flat[i], h
        for attempt in range(retries + 1):
            xp, xm = orig + step, orig - step
            flat[i] = xp
            fp = float(f(x))
            same = pattern() == base
            flat[i] = xm
            fm = float(f(x))
            same = same and pattern() == base
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise OracleError("oracle evaluation failed")
            gflat[i] = (fp - fm) / (xp - xm)
            if same:
                break
            step /= shrink
    return grad


def module_error(module, x, rng, train: bool = True, check_input: bool = True) -> float:
    """Worst relative error over the input and all parameters of ``module``."""
    y = module.forward(x, train)
    R = rng.normal(size=y.shape)
    relus = relu_layers(module)

    def f(inp):
        return float((module.forward(inp, train) * R).sum())

    module.forward(x, train)
    gx = module.backward(R)
    worst = 0.0
    if check_input and gx is not None:
        worst = rel_error(gx, kink_safe_grad(f, x, relus))
    leaves = list(named_params(module)) if not module.params else [("", module, k) for k in module.params]
    for _, layer, key in leaves:
        module.forward(x, train)
        module.backward(R)
        analytic = layer.grads[key].copy()

        def fp(p, layer=layer, key=key):
            old = layer.params[key]
            layer.params[key] = p
            try:
                return f(x)
            finally:
                layer.params[key] = old

        worst = max(worst, rel_error(analytic, kink_safe_grad(fp, layer.params[key], relus)))
    return worst


def _nn_cases(rng) -> list[tuple[str, object, np.ndarray, bool]]:
    n = int(rng.integers(2, 4))
    c = int(rng.integers(1, 4))
    h = 2 * int(rng.integers(1, 4))
    w = 2 * int(rng.integers(1, 4))
    d_in, d_out = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    img = rng.normal(size=(n, c, h, w))
    conv = nn.Conv2d(c, int(rng.integers(1, 4)), rng)
    conv.params["b"] = rng.normal(size=conv.params["b"].shape)
    bn = nn.BatchNorm2d(c)
    bn.params["gamma"] = rng.normal(size=c)
    bn.params["beta"] = rng.normal(size=c)
    bn_inf = nn.BatchNorm2d(c)
    bn_inf.buffers["running_mean"] = rng.normal(size=c)
    bn_inf.buffers["running_var"] = rng.uniform(0.5, 2.0, size=c)
    dense = nn.Dense(d_in, d_out, rng)
    dense.params["b"] = rng.normal(size=d_out)
    # keep relu inputs away from the kink
    relu_x = rng.choice([-1.0, 1.0], size=(n, d_in)) * rng.uniform(0.1, 1.0, size=(n, d_in))
    return [
        ("dense", dense, rng.normal(size=(n, d_in)), True),
        ("conv2d", conv, img, True),
        ("conv2d_cnhw", nn.Conv2d(c, 2, rng, layout="CNHW"), img.transpose(1, 0, 2, 3).copy(), True),
        ("batchnorm_train", bn, img, True),
        ("batchnorm_infer", bn_inf, img, False),
        ("relu", nn.ReLU(), relu_x, True),
        ("sigmoid", nn.Sigmoid(), 3 * rng.normal(size=(n, d_in)), True),
        ("avgpool2d", nn.AvgPool2d(), img, True),
        ("box_smooth", nn.BoxSmooth2d(), img, True),
        ("global_avg_pool", nn.GlobalAvgPool(), img, True),
        ("l2_normalize", nn.L2Normalize(), rng.normal(size=(n, d_in + 1)), True),
    ]


def _model_cases(rng):
    c = int(rng.integers(2, 5))
    cfg = EncoderConfig(1, 8, 8, ((int(rng.integers(2, 4)), True), (c, True)))
    n = int(rng.integers(2, 4))
    x = rng.uniform(0, 1, size=(n, 1, 8, 8))
    feat = rng.normal(size=(n, c))
    fm = rng.normal(size=(n, c, 4, 4))
    att = AttentionBlock(c, rng)
    loc = LocalEncoder(cfg, rng, input_grad=True)
    glob = GlobalEncoder(cfg, rng, input_grad=True)
    proj = Projector(c, (int(rng.integers(2, 6)), int(rng.integers(2, 6))), rng, normalize=True)
    fusion = FusionRegressor((c, c), (4, 3), rng)
    for m in (loc, glob, proj, fusion, att):
        for _, layer, key in named_params(m):
            if key in ("b", "beta"):
                layer.params[key] = 0.1 * rng.normal(size=layer.params[key].shape)
    return [
        ("attention_block", att, fm),
        ("local_encoder", loc, x),
        ("global_encoder", glob, x),
        ("projector", proj, feat),
        ("fusion_regressor", _FusionAdapter(fusion, c), rng.normal(size=(n, 2 * c))),
    ]


class _FusionAdapter:
    """Present the two-input regressor as a single-input module."""

    def __init__(self, fusion: FusionRegressor, c: int) -> None:
        self.fusion, self.c, self.params = fusion, c, {}

    def children(self):
        return self.fusion.children()

    def forward(self, x, train=True):
        return self.fusion.forward(x[:, :self.c], x[:, self.c:], train)

    def backward(self, g):
        gl, gg = self.fusion.backward(g)
        return np.concatenate([gl, gg], axis=1)


def _loss_error(kind: str, rng) -> tuple[float, tuple]:
    n = int(rng.integers(2, 17))
    d = int(rng.integers(2, 65))
    y = rng.integers(0, 25, size=n)
    if n >= 4:
        y[: n // 2] = y[0]  # ensure some positives
    z = rng.normal(size=(n, d))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    table = L.ecdf(rng.integers(0, 25, size=50).tolist() + y.tolist())
    if kind == "rmse":
        pred, target = rng.normal(size=n) * 5, rng.normal(size=n) * 5
        out = L.rmse_loss(pred, target)
        num = finite_diff_grad(lambda p: L.rmse_loss(p, target).value, pred)
        return rel_error(out.grad, num), (n,)
    if kind == "scol_normalized":
        cfg = L.ContrastiveConfig(normalize=True)
        fn: Callable = lambda t: L.scol_loss(t, y, cfg)  # noqa: E731
        z = z * rng.uniform(0.5, 2.0, size=(n, 1))
    elif kind == "adacon":
        fn = lambda t: L.adacon_loss(t, y, table)  # noqa: E731
    else:
        fn = lambda t: L.contrastive_loss(kind, t, y)  # noqa: E731
    out = fn(z)
    num = finite_diff_grad(lambda t: fn(t).value, z)
    return rel_error(out.grad, num), (n, d)


def run(component: str = "all", trials: int = 10, seed: int = 0) -> list[CheckResult]:
    if trials < 1:
        raise ValueError("trials must be at least 1")
    comps = COMPONENTS if component == "all" else (component,)
    for c in comps:
        if c not in COMPONENTS:
            raise ValueError(f"unknown component {c!r}")
    results = []
    for t in range(trials):
        s = seed * 1_000_003 + t
        if "nn" in comps:
            rng = make_rng(s)
            for name, layer, x, train in _nn_cases(rng):
                results.append(CheckResult("nn", name, x.shape, s, module_error(layer, x, rng, train)))
        if "model" in comps:
            rng = make_rng(s + 7)
            for name, module, x in _model_cases(rng):
                results.append(CheckResult("model", name, x.shape, s, module_error(module, x, rng, True)))
        if "losses" in comps:
            rng = make_rng(s + 13)
            for kind in ("scol", "supcon", "adacon", "scol_normalized", "rmse"):
                err, shape = _loss_error(kind, rng)
                results.append(CheckResult("losses", kind, shape, s, err))
    return results


def worst_by_component(results: list[CheckResult]) -> dict[str, CheckResult]:
    out: dict[str, CheckResult] = {}
    for r in results:
        if r.component not in out or r.error > out[r.component].error:
            out[r.component] = r
    return out
