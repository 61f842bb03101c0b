"""Finite-difference verification of backward().

Each probe picks one tensor and a random Gaussian direction ``u`` and
compares the directional derivative ``<grad, u>`` with the central
difference ``(f(x + eps*u) - f(x - eps*u)) / (2*eps)``.

``u`` is a unit vector, so ``eps`` is the actual step length whatever the
tensor size (a raw Gaussian over a 64x256 matrix would step ~128*eps and
drown the check in truncation error). It is also half aligned with the
analytic gradient: a purely random direction is nearly orthogonal to the
gradient often enough that roundoff dominates ``<grad, u>``. A wrong gradient
still fails, because the random half sees every component of the error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .config import PipelineConfig
from .tensor import Tensor


def relative_error(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0.0 else abs(a - b) / scale


@dataclass
class GroupResult:
    group: str
    probes: int
    errors: dict[str, float] = field(default_factory=dict)  # tensor -> max relative error

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def failing(self, tol: float) -> dict[str, float]:
        return {k: e for k, e in self.errors.items() if not e <= tol}


def check_tensors(
    loss_fn: Callable[[], Tensor],
    tensors: dict[str, Tensor],
    probes: int = 100,
    eps: float = 1e-5,
    seed: int = 0,
    group: str = "",
) -> GroupResult:
    """Compare backward() against central differences on ``probes`` directions.

    ``loss_fn`` must rebuild the scalar loss from the current tensor data.
    Probes cycle through the tensors in sorted-name order.
    """
    names = sorted(tensors)
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    loss = loss_fn()
    T.backward(loss)
    grads = {k: tensors[k].grad.copy() if tensors[k].grad is not None else np.zeros(tensors[k].shape) for k in names}
    rng = np.random.default_rng(seed)
    res = GroupResult(group, probes)
    with T.no_grad():
        for i in range(probes):
            name = names[i % len(names)]
            t = tensors[name]
            u = rng.standard_normal(t.shape)
            u /= np.linalg.norm(u)
            gn = np.linalg.norm(grads[name])
            if gn > 0:
                u += grads[name] / gn
                u /= np.linalg.norm(u)
            orig = t.data
            try:
                t.data = orig + eps * u
                fp = float(loss_fn().data)
                t.data = orig - eps * u
                fm = float(loss_fn().data)
            finally:
                t.data = orig
            numeric = (fp - fm) / (2 * eps)
            analytic = float(np.sum(grads[name] * u))
            err = relative_error(analytic, numeric)
            res.errors[name] = max(res.errors.get(name, 0.0), err)
    for t in tensors.values():
        t.grad = None
    return res


# (label, compressor, fusion, groups-to-check) ; maxpool has no weights, so its
# group checks the projector *through* the pooling.
SUITE = (
    ("ve", "mlp", "combined", "ve"),
    ("proj", "mlp", "combined", "proj"),
    ("comp:mlp", "mlp", "combined", "comp"),
    ("comp:conv2d", "conv2d", "cross", "comp"),
    ("comp:maxpool2d", "maxpool2d", "decoder", "proj"),
    ("fuse:cross", "conv2d", "cross", "fuse"),
    ("fuse:decoder", "maxpool2d", "decoder", "fuse"),
    ("fuse:combined", "mlp", "combined", "fuse"),
    ("llm", "mlp", "combined", "llm"),
)


def pipeline_suite(
    cfg: PipelineConfig,
    seed: int = 0,
    probes: int = 100,
    eps: float = 1e-5,
    n_text: int = 6,
) -> list[GroupResult]:
    """Gradient-check every parameter group of the pipeline (all variants)."""
    from .cost import reference_image
    from .pipeline import init_params, prepare_image, text_and_decode, visual_prefix
    from .vision import encode

    rng = np.random.default_rng(seed)
    grid = prepare_image(reference_image(seed), cfg)
    ids = rng.integers(0, 256, size=n_text + 1).tolist()
    results = []
    models = {}
    for label, comp, fusion, group in SUITE:
        key = (comp, fusion)
        if key not in models:
            models[key] = init_params(cfg.replace(compressor=comp, fusion=fusion), seed)
        params = models[key]
        params.set_frozen(frozenset())
        h_v = None
        if group != "ve":
            with T.no_grad():
                h_v = encode(grid, params.ve, params.cfg)

        def loss_fn(params=params, h_v=h_v):
            _, h_v2t, h_vc = visual_prefix(params, grid, h_v=h_v)
            *_, logits = text_and_decode(params, h_v2t, h_vc, ids[:-1])
            rows = [len(h_vc) + i for i in range(n_text)]
            return T.cross_entropy(logits, rows, ids[1:])

        tensors = params.group(group)
        for t in params.named().values():
            t.requires_grad = False
        results.append(check_tensors(loss_fn, tensors, probes, eps, seed, label))
    return results
