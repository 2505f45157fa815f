"""Image similarity and evaluation statistics.

SSIM uses the standard constants (window 11x11, sigma 1.5, k1=0.01,
k2=0.03) on dynamic range 1.0 and averages over valid (fully inside)
window positions only. The perceptual distance is a pyramid DSSIM: a
learned-network-free stand-in that supplies the ranking signal the critic
contract needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.ndimage import correlate1d

from .errors import ContractError, DegenerateInputError
from .render import Frame


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    def kernel(self, size: int | None = None) -> np.ndarray:
        n = self.window if size is None else size
        x = np.arange(n, dtype=float) - (n - 1) / 2.0
        k = np.exp(-(x * x) / (2.0 * self.sigma * self.sigma))
        return k / k.sum()


DEFAULT_SSIM = SsimParams()


@dataclass(frozen=True)
class StatResult:
    mean_diff: float
    sd_diff: float
    t_statistic: float
    p_two_sided: float
    n: int


def _effective_window(h: int, w: int, params: SsimParams) -> int:
    """Largest odd window <= min(image dims, configured size)."""
    n = min(params.window, h, w)
    if n % 2 == 0:
        n -= 1
    if n < 1:
        raise ContractError("image too small for any SSIM window")
    return n


class _WindowStats:
    """Cached per-image windowed moments for repeated SSIM pairings."""

    def __init__(self, pixels: np.ndarray, params: SsimParams = DEFAULT_SSIM):
        self.pixels = np.asarray(pixels, dtype=float)
        h, w = self.pixels.shape
        self.n = _effective_window(h, w, params)
        self.params = params
        k = params.kernel(self.n)
        self._k = k
        self.mu = self._win(self.pixels)
        self.mu_sq = self._win(self.pixels * self.pixels)

    def _win(self, img: np.ndarray) -> np.ndarray:
        half = self.n // 2
        out = correlate1d(correlate1d(img, self._k, axis=0, mode="nearest"),
                          self._k, axis=1, mode="nearest")
        if half == 0:
            return out
        return out[half:-half, half:-half]


def _ssim_from_stats(a: _WindowStats, b: _WindowStats) -> float:
    p = a.params
    mu_ab = a._win(a.pixels * b.pixels)
    var_a = a.mu_sq - a.mu * a.mu
    var_b = b.mu_sq - b.mu * b.mu
    cov = mu_ab - a.mu * b.mu
    num = (2.0 * a.mu * b.mu + p.c1) * (2.0 * cov + p.c2)
    den = (a.mu * a.mu + b.mu * b.mu + p.c1) * (var_a + var_b + p.c2)
    return float(np.mean(num / den))


def _pixels(x) -> np.ndarray:
    return x.pixels if isinstance(x, Frame) else np.asarray(x, dtype=float)


def ssim(a, b, params: SsimParams = DEFAULT_SSIM) -> float:
    """Mean local SSIM over valid window positions; result in [-1, 1]."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise ContractError(f"dimension mismatch: {pa.shape} vs {pb.shape}")
    return _ssim_from_stats(_WindowStats(pa, params), _WindowStats(pb, params))


def perceptual_distance(a, b, params: SsimParams = DEFAULT_SSIM) -> float:
    """Pyramid DSSIM: mean over 3 levels of (1 - ssim)/2, 2x downsample each.

    Zero for identical frames, symmetric, non-negative; used wherever the
    architecture calls for a perceptual ranking between a predicted view and
    the active virtual target.
    """
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise ContractError(f"dimension mismatch: {pa.shape} vs {pb.shape}")
    total = 0.0
    levels = 3
    ca, cb = pa, pb
    for level in range(levels):
        total += (1.0 - ssim(ca, cb, params)) / 2.0
        if level < levels - 1:
            ch, cw = max(1, ca.shape[0] // 2), max(1, ca.shape[1] // 2)
            ca = _area_half(ca, ch, cw)
            cb = _area_half(cb, ch, cw)
    return total / levels


def _area_half(px: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    from .render import _box_weights
    return _box_weights(px.shape[0], out_h) @ px @ _box_weights(px.shape[1], out_w).T


def endpoint_similarity(traj_a: list, traj_b: list,
                        window: int = 30) -> tuple[float, tuple[int, int]]:
    """Best SSIM over the terminal phase: last `window` frames of each run.

    Returns the maximum pairwise SSIM and the (index_a, index_b) pair,
    indices relative to each full trajectory.
    """
    if not traj_a or not traj_b:
        raise ContractError("trajectories must contain at least one frame")
    tail_a = traj_a[-min(window, len(traj_a)):]
    tail_b = traj_b[-min(window, len(traj_b)):]
    off_a = len(traj_a) - len(tail_a)
    off_b = len(traj_b) - len(tail_b)
    stats_a = [_WindowStats(_pixels(f)) for f in tail_a]
    stats_b = [_WindowStats(_pixels(f)) for f in tail_b]
    best, best_pair = -np.inf, (0, 0)
    for i, sa in enumerate(stats_a):
        for j, sb in enumerate(stats_b):
            if sa.pixels.shape != sb.pixels.shape:
                raise ContractError("frame dimensions differ between trajectories")
            v = _ssim_from_stats(sa, sb)
            if v > best:
                best, best_pair = v, (off_a + i, off_b + j)
    return best, best_pair


def endpoint_distance(p_a, p_b) -> float:
    """Euclidean distance between two terminal tip positions (mm)."""
    a = np.asarray(p_a, dtype=float).reshape(3)
    b = np.asarray(p_b, dtype=float).reshape(3)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("points must be finite")
    return float(np.linalg.norm(a - b))


def paired_t_test(xs, ys) -> StatResult:
    """Two-sided paired Student's t-test via the regularized incomplete beta.

    Zero-variance differences are degenerate input; a zero mean with real
    variance reports t = 0, p = 1 exactly.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError("paired samples must be equal-length 1D sequences")
    n = x.size
    if n < 2:
        raise ContractError("need at least two pairs")
    d = x - y
    mean = float(np.mean(d))
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateInputError("differences have zero variance")
    if mean == 0.0:
        return StatResult(0.0, sd, 0.0, 1.0, n)
    t = mean / (sd / np.sqrt(n))
    dof = n - 1
    p = float(special.betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return StatResult(mean, sd, float(t), min(max(p, 0.0), 1.0), n)
