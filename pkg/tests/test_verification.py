"""The checker itself, plus the model audit it powers."""

import numpy as np
import pytest

import deltawkv.spatial_mix
from deltawkv.model import ConfigError, ModelConfig
from deltawkv.tensor_core import NonFiniteError, layer_norm, layer_norm_backward
from deltawkv.verification import (
    GradCheckReport, finite_diff_grad, gradcheck_model,
)


def micro_cfg(**kw):
    base = dict(channels=4, residual_groups=1, blocks_per_group=4, head_size=2,
                scale=2, lora_rank=2)
    base.update(kw)
    return ModelConfig(**base)


def test_fd_quadratic():
    g = finite_diff_grad(lambda x: float((x * x).sum()), np.array([1.0, 2.0]))
    assert np.max(np.abs(g - [2.0, 4.0])) <= 1e-8


def test_fd_constant():
    g = finite_diff_grad(lambda x: 3.5, np.array([1.0, -1.0, 0.2]))
    assert np.array_equal(g, np.zeros(3))


def test_fd_layer_norm_matches_analytic():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 6))
    wy = rng.standard_normal((3, 6))

    def f(v):
        return float((layer_norm(v)[0] * wy).sum())

    _, cache = layer_norm(x)
    analytic = layer_norm_backward(wy, cache)[0]
    assert np.max(np.abs(analytic - finite_diff_grad(f, x))) <= 1e-6


def test_fd_rejects_non_finite_objective():
    with pytest.raises(NonFiniteError):
        finite_diff_grad(lambda x: float("nan"), np.array([1.0]))


def test_fd_does_not_mutate_input():
    x = np.array([1.0, 2.0])
    finite_diff_grad(lambda v: float(v.sum()), x)
    assert np.array_equal(x, [1.0, 2.0])


# ---------------------------------------------------------------------------
# model audit

SCOPE = ["conv1.", "head.", "att.mu_q", "att.decay_b", "att.vr_b",
         "ffn.w_r", "ln2.gamma", "conv.b"]


def test_gradcheck_passes_on_micro_model():
    rep = gradcheck_model(micro_cfg(), seed=0, only=SCOPE)
    assert rep.passed, rep.rows()[:3]
    # 2 conv1 + 2 head + 6 per-block families over 4 blocks + group conv bias
    assert rep.n_scope == len(rep.per_param) == 25
    assert rep.worst_rel <= rep.threshold
    assert set(rep.failures) == set()


def test_gradcheck_report_covers_full_scope():
    rep = gradcheck_model(micro_cfg(channels=2, blocks_per_group=4, head_size=1,
                                    lora_rank=1), seed=1,
                          only=["conv", "head.", "recon"])
    names = set(rep.per_param)
    assert {"conv1.w", "conv1.b", "conv2.w", "conv2.b", "recon.w", "recon.b",
            "groups.0.conv.w", "groups.0.conv.b", "head.w", "head.b"} == names


def test_gradcheck_rejects_large_configs():
    with pytest.raises(ConfigError):
        gradcheck_model(ModelConfig(channels=32, residual_groups=1,
                                    blocks_per_group=4, head_size=4))
    with pytest.raises(ConfigError):
        gradcheck_model(micro_cfg(residual_groups=2))


def test_gradcheck_detects_corrupted_backward(monkeypatch):
    orig = deltawkv.spatial_mix.layer_norm_backward

    def flipped(d_out, cache):
        d_x, d_gamma, d_beta = orig(d_out, cache)
        return -d_x, d_gamma, d_beta

    monkeypatch.setattr(deltawkv.spatial_mix, "layer_norm_backward", flipped)
    rep = gradcheck_model(micro_cfg(), seed=0,
                          only=["att.vr_a", "att.mu_q"])
    assert not rep.passed
    assert rep.failures and "att." in rep.worst_name


def test_gradcheck_zero_input_fresh_init_reports_clean():
    rep = gradcheck_model(micro_cfg(), seed=2, jitter=0.0,
                          lr_img=np.zeros((1, 8, 8)),
                          only=["head.", "conv1.w"])
    assert all(np.isfinite(r) for r in rep.per_param.values())
    assert rep.passed


def test_report_worst_ordering():
    rep = GradCheckReport(per_param={"a": 1e-6, "b": 2e-3, "c": 5e-5},
                          threshold=1e-4, n_scope=3)
    assert rep.worst_name == "b" and rep.worst_rel == 2e-3
    assert rep.failures == ["b"]
    assert not rep.passed
    assert [r[0] for r in rep.rows()] == ["b", "c", "a"]
