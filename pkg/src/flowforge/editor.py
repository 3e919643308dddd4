"""Outer editing drivers: the plain velocity-difference walk and the
adapted variant that refines the target velocity at every step.

Both walk the time grid from index n_max down to 1.  Each step draws
noise, forms the paired source/target latents, evaluates both branch
velocities, optionally adapts the target one, and moves the edited
latent by the time increment times the velocity difference.  Because
the paired latents share each noise draw, the integration path itself
never accumulates noise.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .adaptation import AdaptConfig, LossBreakdown, LossWeights, adapt_velocity
from .errors import FlowForgeError, InvalidArgumentError
from .grid import GaussianKernel, Grid, make_gaussian_kernel
from .layout import Layout, rasterize_mask
from .backends import PromptPair
from .schedule import (
    EditState,
    NoiseSource,
    build_time_grid,
    form_target_latent,
    sample_source_latent,
)

__all__ = [
    "EditConfig",
    "StepRecord",
    "velocity_difference",
    "euler_update",
    "run_flowedit",
    "run_driveflow",
    "records_to_jsonl",
]

EDIT_MODES = ("flowedit", "driveflow")


@dataclass(frozen=True)
class EditConfig:
    """Settings for one editing run."""

    t_steps: int = 50
    n_max: int = 33
    n_avg: int = 1
    seed: int = 0
    mode: str = "driveflow"
    kernel_size: int = 5
    kernel_sigma: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)

    def __post_init__(self):
        if not (1 <= self.n_max <= self.t_steps):
            raise InvalidArgumentError(
                f"n_max must lie in [1, {self.t_steps}], got {self.n_max}"
            )
        if self.n_avg < 1:
            raise InvalidArgumentError(f"n_avg must be at least 1, got {self.n_avg}")
        if self.mode not in EDIT_MODES:
            raise InvalidArgumentError(f"mode must be one of {EDIT_MODES}, got {self.mode!r}")

    def kernel(self) -> GaussianKernel:
        return make_gaussian_kernel(self.kernel_size, self.kernel_sigma)


@dataclass(frozen=True)
class StepRecord:
    """Observability record for one outer step."""

    step: int
    t: float
    dv_norm: float
    losses: tuple[LossBreakdown, ...]
    micros: int

    def as_json(self) -> dict:
        return {
            "step": self.step,
            "t": self.t,
            "dv_norm": self.dv_norm,
            "losses": [entry.as_json() for entry in self.losses],
            "micros": self.micros,
        }


def records_to_jsonl(records) -> str:
    """Serialize step records as one JSON object per line."""
    return "".join(json.dumps(rec.as_json(), sort_keys=True) + "\n" for rec in records)


def velocity_difference(v_tar_adapted: Grid, v_src_eval: Grid) -> Grid:
    """Difference of the two branch velocities; this drives the edit."""
    if not v_tar_adapted.same_shape(v_src_eval):
        raise InvalidArgumentError(
            f"velocity shapes differ: {v_tar_adapted.shape} vs {v_src_eval.shape}"
        )
    return Grid(v_tar_adapted.data - v_src_eval.data)


def euler_update(z_flow: Grid, delta_v: Grid, t_prev: float, t_cur: float) -> Grid:
    """Move the edited latent backward in time by one grid interval."""
    t_prev, t_cur = float(t_prev), float(t_cur)
    if not t_prev < t_cur:
        raise InvalidArgumentError(f"expected t_prev < t_cur, got {t_prev} >= {t_cur}")
    if not z_flow.same_shape(delta_v):
        raise InvalidArgumentError(f"grid shapes differ: {z_flow.shape} vs {delta_v.shape}")
    return Grid(z_flow.data + (t_prev - t_cur) * delta_v.data)


def _set_context(backend, step: int, branch: str, draw: int) -> None:
    if hasattr(backend, "set_context"):
        backend.set_context(step, branch, draw)


def _branch_velocity(backend, z: Grid, t: float, prompt: str, step: int, branch: str) -> Grid:
    try:
        return backend.velocity(z, t, prompt)
    except FlowForgeError as exc:
        exc.args = (f"step {step} ({branch} branch): {exc}",) + exc.args[1:]
        raise


def run_flowedit(
    z0_src: Grid,
    backend,
    prompts: PromptPair,
    cfg: EditConfig,
    observer=None,
    stream: int = 0,
) -> tuple[Grid, list[StepRecord]]:
    """Run the plain paired-velocity edit (no adaptation)."""
    if cfg.mode != "flowedit":
        raise InvalidArgumentError(f"run_flowedit requires mode 'flowedit', got {cfg.mode!r}")
    return _run(z0_src, None, backend, prompts, cfg, observer, stream)


def run_driveflow(
    z0_src: Grid,
    layout: Layout,
    backend,
    prompts: PromptPair,
    cfg: EditConfig,
    observer=None,
    stream: int = 0,
) -> tuple[Grid, list[StepRecord]]:
    """Run the adapted edit: refine the target velocity before each update."""
    if cfg.mode != "driveflow":
        raise InvalidArgumentError(f"run_driveflow requires mode 'driveflow', got {cfg.mode!r}")
    if layout is None:
        raise InvalidArgumentError("driveflow mode needs a layout")
    return _run(z0_src, layout, backend, prompts, cfg, observer, stream)


def _run(
    z0_src: Grid,
    layout: Layout | None,
    backend,
    prompts: PromptPair,
    cfg: EditConfig,
    observer,
    stream: int,
) -> tuple[Grid, list[StepRecord]]:
    grid = build_time_grid(cfg.t_steps, cfg.n_max)
    noise = NoiseSource(cfg.seed, stream)
    kernel = None
    fg_mask = None
    if layout is not None:
        kernel = cfg.kernel()
        fg_mask = rasterize_mask(layout, z0_src.height, z0_src.width)
    state = EditState.initial(z0_src)
    records: list[StepRecord] = []
    for i in grid.edit_indices():
        begin = time.perf_counter_ns()
        t_cur = float(grid.times[i])
        t_prev = float(grid.times[i - 1])
        dv_sum = np.zeros(z0_src.shape, dtype=np.float64)
        step_losses: list[LossBreakdown] = []
        for draw in range(cfg.n_avg):
            noise_grid = noise.normal_grid(z0_src)
            z_hat_src = sample_source_latent(state.z0_src, t_cur, noise_grid)
            z_hat_tar = form_target_latent(state.z_flow, z_hat_src, state.z0_src)
            _set_context(backend, i, "src", draw)
            v_src = _branch_velocity(backend, z_hat_src, t_cur, prompts.c_src, i, "src")
            _set_context(backend, i, "tar", draw)
            v_tar = _branch_velocity(backend, z_hat_tar, t_cur, prompts.c_tar, i, "tar")
            if layout is not None:
                v_tar, losses = adapt_velocity(
                    v_tar, v_src, fg_mask, kernel, cfg.weights, cfg.adapt
                )
                step_losses.extend(losses)
            dv_sum += velocity_difference(v_tar, v_src).data
        delta_v = Grid(dv_sum / cfg.n_avg)
        z_next = euler_update(state.z_flow, delta_v, t_prev, t_cur)
        state = EditState(z0_src=state.z0_src, z_flow=z_next)
        record = StepRecord(
            step=i,
            t=t_cur,
            dv_norm=float(np.linalg.norm(delta_v.data)),
            losses=tuple(step_losses),
            micros=(time.perf_counter_ns() - begin) // 1000,
        )
        records.append(record)
        if observer is not None:
            observer(record, delta_v)
    return state.z_flow, records
