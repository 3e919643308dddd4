"""Velocity adaptation: frequency-split losses, exact gradients, descent.

The target velocity is treated as a learnable vector and refined for a
fixed number of gradient steps.  Three terms steer it: a masked
quadratic pull of its high-frequency part toward the source velocity
(foreground detail preservation), a cosine penalty on the low-frequency
parts over the background (pushing the edit away from the source), and
the same quadratic pull over the background high frequencies (keeping
background detail intact).

Gradients are computed analytically through the transpose of the actual
replicate-padded blur operator.  The border columns of that transpose
differ from the forward blur, so self-adjointness is never assumed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NumericFailureError
from .grid import GaussianKernel, Grid, blur, blur_adjoint
from .layout import LatentMask, complement

__all__ = [
    "LossWeights",
    "AdaptConfig",
    "LossBreakdown",
    "LearnableVelocity",
    "loss_obj",
    "loss_div",
    "loss_bg",
    "total_loss",
    "grad_total",
    "adapt_velocity",
]

# Armijo backtracking constants: halve the step until the sufficient
# decrease f(v') <= f(v) - ARMIJO_C * eta * |g|^2 holds, give up after
# ARMIJO_MAX_BACKTRACKS halvings (the iteration then takes no step).
ARMIJO_C = 1e-4
ARMIJO_CONTRACTION = 0.5
ARMIJO_MAX_BACKTRACKS = 60


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights for the three loss terms."""

    lambda1: float = 5.0
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0.0:
                raise InvalidArgumentError(f"{name} must be finite and non-negative, got {v!r}")


@dataclass(frozen=True)
class AdaptConfig:
    """Inner-loop settings: iteration count, step size, line search."""

    n_inner: int = 5
    step_size: float = 0.1
    line_search: bool = True
    epsilon_cos: float = 1e-12

    def __post_init__(self):
        if self.n_inner < 0:
            raise InvalidArgumentError(f"n_inner must be non-negative, got {self.n_inner}")
        if not np.isfinite(self.step_size) or self.step_size <= 0.0:
            raise InvalidArgumentError(f"step_size must be positive, got {self.step_size}")
        if not np.isfinite(self.epsilon_cos) or self.epsilon_cos <= 0.0:
            raise InvalidArgumentError(f"epsilon_cos must be positive, got {self.epsilon_cos}")


@dataclass(frozen=True)
class LossBreakdown:
    """Loss values after one inner iteration."""

    iteration: int
    l_obj: float
    l_div: float
    l_bg: float
    total: float

    def as_json(self) -> dict:
        return {
            "iter": self.iteration,
            "l_obj": self.l_obj,
            "l_div": self.l_div,
            "l_bg": self.l_bg,
            "total": self.total,
        }


@dataclass
class LearnableVelocity:
    """Mutable holder for the velocity being optimized."""

    v: Grid


def _check_pair(v_tar: Grid, v_src: Grid, mask: LatentMask) -> None:
    if not v_tar.same_shape(v_src):
        raise InvalidArgumentError(f"velocity shapes differ: {v_tar.shape} vs {v_src.shape}")
    if (mask.height, mask.width) != (v_tar.height, v_tar.width):
        raise InvalidArgumentError(
            f"mask {mask.height}x{mask.width} does not match velocity spatial "
            f"dims {v_tar.height}x{v_tar.width}"
        )


def _masked_quadratic(diff_high: np.ndarray, mask_bits: np.ndarray) -> float:
    """Mean squared masked high-frequency difference; empty mask gives 0."""
    ones = int(mask_bits.sum())
    if ones == 0:
        return 0.0
    weighted = diff_high * mask_bits[None, :, :]
    return float((weighted * weighted).sum()) / (diff_high.shape[0] * ones)


def loss_obj(v_tar: Grid, v_src: Grid, mask: LatentMask, kernel: GaussianKernel) -> float:
    """Masked mean squared difference of the high-frequency parts."""
    _check_pair(v_tar, v_src, mask)
    diff_high = (v_tar.data - blur(v_tar, kernel).data) - (v_src.data - blur(v_src, kernel).data)
    return _masked_quadratic(diff_high, mask.bits.astype(np.float64))


def loss_bg(v_tar: Grid, v_src: Grid, bg_mask: LatentMask, kernel: GaussianKernel) -> float:
    """Same quadratic pull as :func:`loss_obj`, over the background mask."""
    return loss_obj(v_tar, v_src, bg_mask, kernel)


def loss_div(
    v_tar: Grid,
    v_src: Grid,
    bg_mask: LatentMask,
    kernel: GaussianKernel,
    epsilon_cos: float = 1e-12,
) -> float:
    """Mean channel-wise cosine of the low-frequency parts over the background.

    Sites where either channel vector has norm below ``epsilon_cos``
    contribute zero; an empty background gives zero.
    """
    _check_pair(v_tar, v_src, bg_mask)
    n_bg = bg_mask.popcount
    if n_bg == 0:
        return 0.0
    a = blur(v_tar, kernel).data
    b = blur(v_src, kernel).data
    na = np.sqrt((a * a).sum(axis=0))
    nb = np.sqrt((b * b).sum(axis=0))
    denom = na * nb
    valid = (bg_mask.bits > 0) & (denom >= epsilon_cos)
    cos = np.zeros_like(denom)
    np.divide((a * b).sum(axis=0), denom, out=cos, where=valid)
    return float(cos[valid].sum()) / n_bg


def total_loss(parts: tuple[float, float, float], w: LossWeights) -> float:
    """Weighted sum of (l_obj, l_div, l_bg)."""
    l_obj_val, l_div_val, l_bg_val = parts
    return w.lambda1 * l_obj_val + w.lambda2 * l_div_val + w.lambda3 * l_bg_val


class _Problem:
    """Precomputed source-side quantities shared across inner iterations."""

    def __init__(
        self,
        v_src: Grid,
        fg_mask: LatentMask,
        kernel: GaussianKernel,
        w: LossWeights,
        epsilon_cos: float,
    ):
        self.kernel = kernel
        self.w = w
        self.eps = float(epsilon_cos)
        self.fg = fg_mask.bits.astype(np.float64)
        self.bg = complement(fg_mask).bits.astype(np.float64)
        self.n_fg = int(fg_mask.popcount)
        self.n_bg = fg_mask.height * fg_mask.width - self.n_fg
        self.channels = v_src.channels
        src_low = blur(v_src, kernel).data
        self.src_low = src_low
        self.src_high = v_src.data - src_low
        self.src_low_norm = np.sqrt((src_low * src_low).sum(axis=0))

    def forward(self, v: np.ndarray) -> dict:
        """Evaluate all three losses at ``v`` and keep gradient intermediates.

        Overflow is not a warning here: non-finite results are detected
        below and reported as :class:`NumericFailureError`.
        """
        with np.errstate(over="ignore", invalid="ignore"):
            v_low = blur(Grid(v), self.kernel).data
            v_high = v - v_low
            diff_high = v_high - self.src_high

            if self.n_fg:
                fg_diff = diff_high * self.fg[None]
                l_obj_val = float((fg_diff * fg_diff).sum()) / (self.channels * self.n_fg)
            else:
                fg_diff = None
                l_obj_val = 0.0
            if self.n_bg:
                bg_diff = diff_high * self.bg[None]
                l_bg_val = float((bg_diff * bg_diff).sum()) / (self.channels * self.n_bg)
            else:
                bg_diff = None
                l_bg_val = 0.0

            cos = None
            valid = None
            v_low_norm = None
            if self.n_bg:
                v_low_norm = np.sqrt((v_low * v_low).sum(axis=0))
                denom = v_low_norm * self.src_low_norm
                valid = (self.bg > 0) & (denom >= self.eps)
                cos = np.zeros_like(denom)
                np.divide((v_low * self.src_low).sum(axis=0), denom, out=cos, where=valid)
                l_div_val = float(cos[valid].sum()) / self.n_bg
            else:
                l_div_val = 0.0

        parts = (l_obj_val, l_div_val, l_bg_val)
        for name, value in zip(("l_obj", "l_div", "l_bg"), parts):
            if not np.isfinite(value):
                raise NumericFailureError(f"{name} evaluated to {value!r}", term=name)
        return {
            "parts": parts,
            "total": total_loss(parts, self.w),
            "v_low": v_low,
            "v_low_norm": v_low_norm,
            "fg_diff": fg_diff,
            "bg_diff": bg_diff,
            "cos": cos,
            "valid": valid,
        }

    def gradient(self, state: dict) -> np.ndarray:
        """Exact gradient of the weighted total at the state's velocity."""
        grad = np.zeros_like(self.src_high)
        quad = np.zeros_like(self.src_high)
        if self.w.lambda1 and state["fg_diff"] is not None:
            quad += (2.0 * self.w.lambda1 / (self.channels * self.n_fg)) * state["fg_diff"]
        if self.w.lambda3 and state["bg_diff"] is not None:
            quad += (2.0 * self.w.lambda3 / (self.channels * self.n_bg)) * state["bg_diff"]
        if quad.any():
            # High-pass terms route through (I - B)^T = I - B^T.
            grad += quad - blur_adjoint(Grid(quad), self.kernel).data
        if self.w.lambda2 and self.n_bg:
            valid = state["valid"]
            if valid.any():
                v_low = state["v_low"]
                na = state["v_low_norm"]
                cos = state["cos"]
                inv_ab = np.zeros_like(na)
                np.divide(1.0, na * self.src_low_norm, out=inv_ab, where=valid)
                inv_aa = np.zeros_like(na)
                np.divide(1.0, na * na, out=inv_aa, where=valid)
                site = self.src_low * inv_ab[None] - v_low * (cos * inv_aa)[None]
                site *= valid[None]
                grad += (self.w.lambda2 / self.n_bg) * blur_adjoint(Grid(site), self.kernel).data
        if not np.isfinite(grad).all():
            raise NumericFailureError("gradient contains non-finite entries", term="gradient")
        return grad


def grad_total(
    v_tar: Grid,
    v_src: Grid,
    fg_mask: LatentMask,
    kernel: GaussianKernel,
    w: LossWeights,
    epsilon_cos: float = 1e-12,
) -> Grid:
    """Analytic gradient of the weighted total loss with respect to v_tar."""
    _check_pair(v_tar, v_src, fg_mask)
    problem = _Problem(v_src, fg_mask, kernel, w, epsilon_cos)
    return Grid(problem.gradient(problem.forward(v_tar.data)))


def adapt_velocity(
    v_tar_init: Grid,
    v_src: Grid,
    fg_mask: LatentMask,
    kernel: GaussianKernel,
    w: LossWeights,
    cfg: AdaptConfig,
) -> tuple[Grid, list[LossBreakdown]]:
    """Run the inner optimization loop on the target velocity.

    Returns the adapted velocity and one loss breakdown per iteration
    (values measured after that iteration's update).  With line search
    enabled the total is non-increasing across iterations; an iteration
    whose backtracking fails keeps the current point.
    """
    _check_pair(v_tar_init, v_src, fg_mask)
    if cfg.n_inner == 0:
        return v_tar_init, []
    problem = _Problem(v_src, fg_mask, kernel, w, cfg.epsilon_cos)
    learnable = LearnableVelocity(v=v_tar_init)
    state = problem.forward(learnable.v.data)
    log: list[LossBreakdown] = []
    for n in range(1, cfg.n_inner + 1):
        grad = problem.gradient(state)
        grad_sq = float((grad * grad).sum())
        if grad_sq > 0.0:
            if cfg.line_search:
                eta = cfg.step_size
                accepted = None
                for _ in range(ARMIJO_MAX_BACKTRACKS):
                    trial = learnable.v.data - eta * grad
                    trial_state = problem.forward(trial)
                    if trial_state["total"] <= state["total"] - ARMIJO_C * eta * grad_sq:
                        accepted = (trial, trial_state)
                        break
                    eta *= ARMIJO_CONTRACTION
                if accepted is not None:
                    learnable.v = Grid(accepted[0])
                    state = accepted[1]
            else:
                learnable.v = Grid(learnable.v.data - cfg.step_size * grad)
                state = problem.forward(learnable.v.data)
        parts = state["parts"]
        log.append(
            LossBreakdown(
                iteration=n,
                l_obj=parts[0],
                l_div=parts[1],
                l_bg=parts[2],
                total=state["total"],
            )
        )
    return learnable.v, log
