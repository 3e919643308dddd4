"""Uniform time grids, deterministic noise, and the paired-latent step.

The editing loop walks a uniform grid t_i = i / T from index N_max down
to 1.  At every step the clean source latent is mixed with fresh noise
to form a straight-line point between data and noise, and the target
latent is offset from it by the accumulated edit displacement.  Because
both branches share the same noise draw, the noise cancels out of their
difference and the update path stays noise-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .grid import Grid

__all__ = [
    "TimeGrid",
    "NoiseSource",
    "EditState",
    "build_time_grid",
    "sample_source_latent",
    "form_target_latent",
]

_U64_MASK = (1 << 64) - 1


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Uniform schedule over [0, 1] with an editing start index."""

    t_steps: int
    n_max: int
    times: np.ndarray

    def edit_indices(self) -> range:
        """Step indices visited by the editor, from n_max down to 1."""
        return range(self.n_max, 0, -1)


def build_time_grid(t_steps: int, n_max: int) -> TimeGrid:
    """Build the uniform grid t_i = i / t_steps for i in 0..t_steps."""
    if not isinstance(t_steps, (int, np.integer)) or isinstance(t_steps, bool):
        raise InvalidArgumentError(f"t_steps must be an integer, got {t_steps!r}")
    if not isinstance(n_max, (int, np.integer)) or isinstance(n_max, bool):
        raise InvalidArgumentError(f"n_max must be an integer, got {n_max!r}")
    if t_steps < 1:
        raise InvalidArgumentError(f"t_steps must be at least 1, got {t_steps}")
    if not (1 <= n_max <= t_steps):
        raise InvalidArgumentError(f"n_max must lie in [1, {t_steps}], got {n_max}")
    times = np.arange(t_steps + 1, dtype=np.float64) / float(t_steps)
    times.setflags(write=False)
    return TimeGrid(t_steps=int(t_steps), n_max=int(n_max), times=times)


class NoiseSource:
    """Deterministic standard-normal stream keyed by (seed, stream).

    Raw 64-bit words come from a Philox 4x64 counter generator keyed with
    the two integers.  Uniforms take the top 53 bits of each word and the
    normals are produced by the Box-Muller transform.  Both mappings are
    fixed here, not delegated to library distribution code, so a given
    key reproduces the same sequence on any build with a correctly
    rounded libm.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array(
            [self.seed & _U64_MASK, self.stream & _U64_MASK], dtype=np.uint64
        )
        self._bits = np.random.Philox(key=key)

    def normal(self, shape) -> np.ndarray:
        """Draw a float64 array of independent standard normals."""
        shape = tuple(int(s) for s in np.atleast_1d(shape)) if not np.isscalar(shape) else (int(shape),)
        count = int(np.prod(shape)) if shape else 1
        if count < 1:
            raise InvalidArgumentError(f"sample shape must be non-empty, got {shape}")
        pairs = (count + 1) // 2
        raw = self._bits.random_raw(2 * pairs)
        # Top 53 bits of each word; +1 keeps u1 in (0, 1] so the log is finite.
        u1 = ((raw[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[pairs:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        out = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:count]
        return out.reshape(shape)

    def normal_grid(self, like: Grid) -> Grid:
        """Draw a noise grid with the same shape as ``like``."""
        return Grid(self.normal(like.shape))


@dataclass(frozen=True, eq=False)
class EditState:
    """Clean source latent plus the evolving edited latent."""

    z0_src: Grid
    z_flow: Grid

    def __post_init__(self):
        if not self.z0_src.same_shape(self.z_flow):
            raise InvalidArgumentError(
                f"state grids disagree in shape: {self.z0_src.shape} vs {self.z_flow.shape}"
            )

    @classmethod
    def initial(cls, z0_src: Grid) -> "EditState":
        """State before any edit step: the edited latent starts at the source."""
        return cls(z0_src=z0_src, z_flow=z0_src)


def sample_source_latent(z0_src: Grid, t: float, noise: Grid) -> Grid:
    """Mix the clean latent with noise along the straight line at time t."""
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise InvalidArgumentError(f"time must lie in [0, 1], got {t}")
    if not z0_src.same_shape(noise):
        raise InvalidArgumentError(
            f"latent and noise shapes differ: {z0_src.shape} vs {noise.shape}"
        )
    return Grid((1.0 - t) * z0_src.data + t * noise.data)


def form_target_latent(z_flow: Grid, z_hat_src: Grid, z0_src: Grid) -> Grid:
    """Offset the noisy source latent by the accumulated edit displacement.

    The result equals z_flow + z_hat_src - z0_src, so the target branch
    sees exactly the same noise realization as the source branch.
    """
    if not (z_flow.same_shape(z_hat_src) and z_flow.same_shape(z0_src)):
        raise InvalidArgumentError(
            f"latent shapes differ: {z_flow.shape}, {z_hat_src.shape}, {z0_src.shape}"
        )
    return Grid(z_flow.data + z_hat_src.data - z0_src.data)
