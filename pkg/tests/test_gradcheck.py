import numpy as np

from compfuse import gradcheck as G
from compfuse import tensor as T
from compfuse.config import PipelineConfig
from compfuse.tensor import Tensor


def test_relative_error_edges():
    assert G.relative_error(0.0, 0.0) == 0.0
    assert G.relative_error(1.0, 1.0) == 0.0
    assert G.relative_error(1.0, -1.0) == 2.0


def test_check_tensors_passes_correct_gradient():
    r = np.random.default_rng(0)
    w = Tensor(r.standard_normal((4, 3)))
    x = Tensor(r.standard_normal((5, 4)))
    res = G.check_tensors(lambda: T.sum(T.gelu(T.matmul(x, w))), {"w": w}, probes=20)
    assert res.max_error < 1e-7 and not res.failing(1e-4)


def test_check_tensors_catches_a_wrong_backward(monkeypatch):
    r = np.random.default_rng(0)
    w = Tensor(r.standard_normal((4, 3)))
    x = Tensor(r.standard_normal((5, 4)))
    real = T.gelu

    def bad_gelu(z):
        out = real(z)
        good = out._backward
        out._backward = lambda g: tuple(v * 1.001 for v in good(g))
        return out

    monkeypatch.setattr(T, "gelu", bad_gelu)
    res = G.check_tensors(lambda: T.sum(T.gelu(T.matmul(x, w))), {"w": w}, probes=20)
    assert res.failing(1e-4)


def test_check_tensors_catches_a_small_stray_component():
    # backward adds a component the true gradient of sum(w**2) lacks
    w = Tensor(np.ones(6))
    stray = np.array([0, 0, 0, 0, 0, 0.01])

    def loss():
        sq = T._wrap(w.data**2, (w,), lambda g: (g * (2 * w.data + stray),), "square")
        return T.sum(sq)

    res = G.check_tensors(loss, {"w": w}, probes=30)
    assert res.failing(1e-4)


def test_pipeline_suite_all_groups_pass():
    results = G.pipeline_suite(PipelineConfig(), seed=0, probes=100)
    labels = [r.group for r in results]
    assert labels == [s[0] for s in G.SUITE]
    for r in results:
        assert r.probes == 100 and not r.failing(1e-4), (r.group, r.failing(1e-4))


def test_suite_deterministic_per_seed():
    a = G.pipeline_suite(PipelineConfig(), seed=3, probes=9)
    b = G.pipeline_suite(PipelineConfig(), seed=3, probes=9)
    assert [r.errors for r in a] == [r.errors for r in b]
