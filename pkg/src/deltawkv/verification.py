"""Gradient verification: an independent central-difference checker and the
whole-model gradient audit.

The checker shares nothing with the production backward passes; agreement
between the two is the evidence that the hand-written gradients are right.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    ConfigError, ModelConfig, NormStats, init_params, model_backward,
    model_forward,
)
from .tensor_core import NonFiniteError
from .training import l1_loss

# 1e-6 keeps truncation under the threshold: the kernel rollout has third
# derivatives large enough that a 1e-5 step alone costs ~5e-4 relative on
# some query projections (the error falls as step^2, so it is truncation,
# not the analytic gradient)
DEFAULT_STEP = 1e-6
DEFAULT_THRESHOLD = 1e-4
# denominator floor 1e-3: at the 1e-4 threshold this passes any absolute
# error below 1e-7, guarding near-zero gradients
REL_FLOOR = 1e-3


def finite_diff_grad(f, x: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central finite differences of scalar f, element by element, in f64."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        fp = f(x)
        flat[i] = keep - step
        fm = f(x)
        flat[i] = keep
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(
                f"objective returned a non-finite value near element {i}"
            )
        gf[i] = (fp - fm) / (2.0 * step)
    return g


def _max_rel(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


@dataclass
class GradCheckReport:
    """Per-parameter agreement between analytic and numeric gradients."""

    per_param: dict = field(default_factory=dict)   # name -> max rel error
    threshold: float = DEFAULT_THRESHOLD
    n_scope: int = 0       # tensors in the checked scope (all were covered)

    @property
    def worst_name(self) -> str:
        return max(self.per_param, key=self.per_param.get) if self.per_param else ""

    @property
    def worst_rel(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def failures(self) -> list:
        return sorted(n for n, r in self.per_param.items() if r > self.threshold)

    @property
    def passed(self) -> bool:
        return not self.failures

    def rows(self):
        """(name, rel_error, ok) rows, worst first, for printing/CSV."""
        order = sorted(self.per_param, key=self.per_param.get, reverse=True)
        return [(n, self.per_param[n], self.per_param[n] <= self.threshold)
                for n in order]


def gradcheck_model(config: ModelConfig, seed: int = 0,
                    step: float = DEFAULT_STEP,
                    threshold: float = DEFAULT_THRESHOLD,
                    jitter: float = 0.2,
                    lr_img: np.ndarray | None = None,
                    only=None) -> GradCheckReport:
    """Check d(L1 loss)/d(parameter) for every tensor of a micro model.

    The model starts from a fresh f64 init; a small deterministic jitter is
    added to every tensor so the zero-initialized head and low-rank paths
    carry gradient (jitter=0 audits the literal fresh init, where blocked
    paths legitimately report zero-vs-zero agreement). `only` restricts the
    scope to parameters whose name contains one of the given substrings.
    """
    if config.channels > 16 or config.residual_groups != 1:
        raise ConfigError(
            "gradcheck is for micro models: channels <= 16, one residual group"
        )
    params = init_params(config, seed=seed, dtype=np.float64)
    params.stats = NormStats(0.4, 0.3)
    rng = np.random.default_rng(seed)
    if jitter:
        for name, gp in params.pairs().items():
            base = 1.0 if name.endswith("gamma") else 0.0
            gp.value = base + jitter * rng.standard_normal(gp.value.shape)
    if lr_img is None:
        lr_img = rng.random((1, 8, 8))
    h, w = lr_img.shape[1:]
    target = rng.random((1, config.scale * h, config.scale * w))

    def loss() -> float:
        out, _ = model_forward(lr_img, params, config)
        return l1_loss(out, target)[0]

    out, cache = model_forward(lr_img, params, config)
    _, d_out = l1_loss(out, target)
    params.zero_grad()
    model_backward(d_out, cache, params, config)

    pairs = params.pairs()
    if only is not None:
        pairs = {n: gp for n, gp in pairs.items()
                 if any(key in n for key in only)}
    report = GradCheckReport(threshold=threshold, n_scope=len(pairs))
    for name, gp in pairs.items():

        def f(x, gp=gp):
            old = gp.value
            gp.value = x
            try:
                return loss()
            finally:
                gp.value = old

        report.per_param[name] = _max_rel(gp.grad, finite_diff_grad(f, gp.value, step))
    return report
