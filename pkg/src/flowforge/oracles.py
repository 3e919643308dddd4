"""Independent brute-force implementations used to cross-check the engine.

Everything here recomputes a result by the most direct method available
(double loops, full 2-D windows, per-cell geometry, finite differences,
closed forms) without sharing code with the production paths, so the
two routes can disagree when either is wrong.  The selftest suites at
the bottom power the ``flowforge selftest`` subcommand.
"""

from __future__ import annotations

import numpy as np

from .adaptation import AdaptConfig, LossWeights, grad_total, loss_bg, loss_div, loss_obj, total_loss
from .editor import EditConfig, run_flowedit
from .backends import PointMassBackend, PromptPair
from .grid import Grid, blur, decompose, make_gaussian_kernel
from .layout import Layout, LatentMask, complement, layout_from_json, rasterize_mask
from .schedule import NoiseSource

__all__ = [
    "gaussian_kernel_direct",
    "blur_direct2d",
    "rasterize_bruteforce",
    "finite_difference_gradient",
    "point_mass_final",
    "point_mass_walk",
    "run_selftest",
    "SelftestResult",
]


def gaussian_kernel_direct(k: int, sigma: float) -> np.ndarray:
    """Gaussian weights by direct double summation over the lattice."""
    half = (k - 1) // 2
    weights = np.zeros((k, k), dtype=np.float64)
    for i in range(-half, half + 1):
        for j in range(-half, half + 1):
            weights[i + half, j + half] = np.exp(-(i * i + j * j) / (2.0 * sigma * sigma))
    return weights / weights.sum()


def blur_direct2d(data: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-channel 2-D windowed correlation with replicated edges."""
    k = weights.shape[0]
    r = (k - 1) // 2
    c, h, w = data.shape
    out = np.zeros_like(data)
    padded = np.pad(data, ((0, 0), (r, r), (r, r)), mode="edge")
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                window = padded[ch, y : y + k, x : x + k]
                out[ch, y, x] = float((window * weights).sum())
    return out


def rasterize_bruteforce(layout: Layout, latent_height: int, latent_width: int) -> np.ndarray:
    """Mask bits by per-cell positive-overlap tests against every box."""
    sy = layout.image_height / latent_height
    sx = layout.image_width / latent_width
    bits = np.zeros((latent_height, latent_width), dtype=np.uint8)
    for row in range(latent_height):
        for col in range(latent_width):
            for box in layout.boxes:
                overlap_y = min((row + 1) * sy, box.y2) - max(row * sy, box.y1)
                overlap_x = min((col + 1) * sx, box.x2) - max(col * sx, box.x1)
                if overlap_y > 0 and overlap_x > 0:
                    bits[row, col] = 1
                    break
    return bits


def finite_difference_gradient(loss_fn, v: np.ndarray, coords, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function at chosen coordinates."""
    out = np.zeros(len(coords), dtype=np.float64)
    for idx, coord in enumerate(coords):
        bumped = v.copy()
        bumped[coord] += h
        up = loss_fn(bumped)
        bumped[coord] -= 2.0 * h
        down = loss_fn(bumped)
        out[idx] = (up - down) / (2.0 * h)
    return out


def point_mass_final(z0: np.ndarray, mu_src: float, mu_tar: float) -> np.ndarray:
    """Closed-form end point of a full edit on the point-anchored field."""
    return z0 + (mu_tar - mu_src)


def point_mass_walk(
    z0: np.ndarray, mu_src: float, mu_tar: float, t_steps: int, n_max: int, noise: NoiseSource
) -> np.ndarray:
    """Step-by-step simulation of the edit recursion on that field.

    Independent of the editor module: recomputes the paired latents and
    the two closed-form velocities directly at every step.
    """
    times = np.arange(t_steps + 1, dtype=np.float64) / t_steps
    z_flow = z0.copy()
    for i in range(n_max, 0, -1):
        t = times[i]
        draw = noise.normal(z0.shape)
        z_hat_src = (1.0 - t) * z0 + t * draw
        z_hat_tar = z_flow + z_hat_src - z0
        v_src = (z_hat_src - mu_src) / t
        v_tar = (z_hat_tar - mu_tar) / t
        z_flow = z_flow + (times[i - 1] - t) * (v_tar - v_src)
    return z_flow


class SelftestResult:
    """Pass/fail outcome of one named selftest suite."""

    def __init__(self, name: str, passed: int, total: int, detail: str = ""):
        self.name = name
        self.passed = passed
        self.total = total
        self.detail = detail

    @property
    def ok(self) -> bool:
        return self.passed == self.total

    def __repr__(self) -> str:
        status = "ok" if self.ok else "FAIL"
        tail = f" ({self.detail})" if self.detail else ""
        return f"{self.name}: {self.passed}/{self.total} {status}{tail}"


def _suite_kernel() -> SelftestResult:
    passed = total = 0
    worst = 0.0
    for k in (1, 3, 5, 7):
        for sigma in (0.5, 1.0, 2.0):
            total += 1
            kern = make_gaussian_kernel(k, sigma)
            err = float(np.abs(kern.weights - gaussian_kernel_direct(k, sigma)).max())
            err = max(err, abs(float(kern.weights.sum()) - 1.0))
            worst = max(worst, err)
            if err <= 1e-12:
                passed += 1
    return SelftestResult("gaussian-kernel", passed, total, f"max err {worst:.2e}")


def _suite_decomposition(rng: np.random.Generator) -> SelftestResult:
    passed = total = 0
    worst = 0.0
    for _ in range(20):
        shape = (int(rng.integers(1, 4)), int(rng.integers(2, 24)), int(rng.integers(2, 24)))
        g = Grid(rng.standard_normal(shape))
        kern = make_gaussian_kernel(int(rng.choice([1, 3, 5])), float(rng.uniform(0.5, 2.0)))
        split = decompose(g, kern)
        err = float(np.abs(split.low.data + split.high.data - g.data).max())
        worst = max(worst, err)
        total += 1
        passed += err <= 1e-12
    return SelftestResult("frequency-split", passed, total, f"max err {worst:.2e}")


def _suite_blur(rng: np.random.Generator) -> SelftestResult:
    passed = total = 0
    worst = 0.0
    for _ in range(10):
        shape = (int(rng.integers(1, 4)), int(rng.integers(2, 16)), int(rng.integers(2, 16)))
        g = Grid(rng.standard_normal(shape))
        kern = make_gaussian_kernel(int(rng.choice([1, 3, 5])), float(rng.uniform(0.5, 2.0)))
        err = float(np.abs(blur(g, kern).data - blur_direct2d(g.data, kern.weights)).max())
        worst = max(worst, err)
        total += 1
        passed += err <= 1e-10
    return SelftestResult("separable-blur", passed, total, f"max err {worst:.2e}")


def _random_layout(rng: np.random.Generator) -> Layout:
    width = int(rng.integers(16, 128))
    height = int(rng.integers(16, 128))
    boxes = []
    for b in range(int(rng.integers(0, 4))):
        x1 = float(rng.uniform(0, width - 1))
        y1 = float(rng.uniform(0, height - 1))
        x2 = float(rng.uniform(x1 + 0.5, width))
        y2 = float(rng.uniform(y1 + 0.5, height))
        boxes.append({"label": f"box{b}", "x1": x1, "y1": y1, "x2": x2, "y2": y2})
    return layout_from_json({"image_width": width, "image_height": height, "boxes": boxes})


def _suite_mask(rng: np.random.Generator) -> SelftestResult:
    passed = total = 0
    for _ in range(30):
        layout = _random_layout(rng)
        lh = int(rng.integers(2, 24))
        lw = int(rng.integers(2, 24))
        got = rasterize_mask(layout, lh, lw)
        want = rasterize_bruteforce(layout, lh, lw)
        total += 1
        passed += bool((got.bits == want).all())
    return SelftestResult("mask-raster", passed, total)


def _suite_point_mass(rng: np.random.Generator) -> SelftestResult:
    passed = total = 0
    worst = 0.0
    for trial in range(5):
        z0 = Grid(rng.standard_normal((2, 4, 6)))
        mu_src = float(rng.uniform(-2, 2))
        mu_tar = float(rng.uniform(-2, 2))
        backend = PointMassBackend({"src": mu_src, "tar": mu_tar})
        cfg = EditConfig(t_steps=10, n_max=10, mode="flowedit", seed=trial)
        final, _ = run_flowedit(z0, backend, PromptPair("src", "tar"), cfg)
        want = point_mass_final(z0.data, mu_src, mu_tar)
        err = float(np.abs(final.data - want).max())
        walk = point_mass_walk(z0.data, mu_src, mu_tar, 10, 10, NoiseSource(trial, 0))
        err = max(err, float(np.abs(final.data - walk).max()))
        worst = max(worst, err)
        total += 1
        passed += err <= 1e-9
    return SelftestResult("point-mass-edit", passed, total, f"max err {worst:.2e}")


def _suite_gradient(rng: np.random.Generator) -> SelftestResult:
    passed = total = 0
    worst = 0.0
    kern = make_gaussian_kernel(3, 1.0)
    for _ in range(5):
        shape = (2, 6, 8)
        v_tar = Grid(rng.standard_normal(shape))
        v_src = Grid(rng.standard_normal(shape))
        mask = LatentMask((rng.random((shape[1], shape[2])) < 0.4).astype(np.uint8))
        weights = LossWeights(
            lambda1=float(rng.uniform(0, 5)),
            lambda2=float(rng.uniform(0, 5)),
            lambda3=float(rng.uniform(0, 5)),
        )
        analytic = grad_total(v_tar, v_src, mask, kern, weights).data

        def objective(arr: np.ndarray) -> float:
            tar = Grid(arr)
            parts = (
                loss_obj(tar, v_src, mask, kern),
                loss_div(tar, v_src, complement(mask), kern),
                loss_bg(tar, v_src, complement(mask), kern),
            )
            return total_loss(parts, weights)

        coords = [
            tuple(int(c) for c in (rng.integers(0, s) for s in shape)) for _ in range(20)
        ]
        numeric = finite_difference_gradient(objective, v_tar.data.copy(), coords)
        got = np.array([analytic[c] for c in coords])
        rel = np.abs(got - numeric) / np.maximum.reduce(
            [np.abs(got), np.abs(numeric), np.full_like(numeric, 1e-8)]
        )
        worst = max(worst, float(rel.max()))
        total += 1
        passed += float(rel.max()) <= 1e-4
    return SelftestResult("gradient-check", passed, total, f"max rel err {worst:.2e}")


def run_selftest(seed: int = 0) -> list[SelftestResult]:
    """Run every analytic-oracle suite and return their results."""
    rng = np.random.default_rng(seed)
    return [
        _suite_kernel(),
        _suite_decomposition(rng),
        _suite_blur(rng),
        _suite_mask(rng),
        _suite_point_mass(rng),
        _suite_gradient(rng),
    ]
