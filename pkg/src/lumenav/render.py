"""Software raycaster for endoscopic frames, plus the perturbation bank.

Frames are single-channel float images in [0, 1]. Two styles share one
geometry path: Virtual is bare depth shading (the preoperative look), Real
multiplies a seeded wall texture and a radial vignette on top (the
intraoperative look). Everything here is pure and deterministic: identical
inputs produce bit-identical buffers.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from . import _raycast
from .airway import AirwayTree, lumen_signed_distance
from .errors import ContractError, PlacementError
from .geometry import Pose


class Style(enum.Enum):
    VIRTUAL = "virtual"
    REAL = "real"


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model; defaults are the bronchoscope calibration values."""

    fx: float = 290.0
    fy: float = 281.4
    cx: float = 203.3
    cy: float = 210.8
    width: int = 392
    height: int = 392

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Same field of view at another resolution."""
        sx, sy = width / self.width, height / self.height
        return CameraIntrinsics(self.fx * sx, self.fy * sy,
                                self.cx * sx, self.cy * sy, width, height)

    def project(self, cam_xyz: np.ndarray) -> tuple[float, float]:
        """(x, y, z) camera coordinates -> continuous pixel (u, v); z > 0."""
        x, y, z = cam_xyz
        return self.cx + self.fx * x / z, self.cy + self.fy * (-y) / z


NATIVE_INTRINSICS = CameraIntrinsics()
POLICY_WIDTH, POLICY_HEIGHT = 85, 64


@dataclass(frozen=True)
class Frame:
    pixels: np.ndarray  # (height, width) float64 in [0, 1]
    style: Style
    perturb_tag: str | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim != 2:
            raise ValueError("pixels must be a 2D single-channel buffer")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixels must be finite and within [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return 1


@dataclass(frozen=True)
class PerturbationConfig:
    """Fig-style visual degradation. All-zero settings are a strict identity."""

    fouling_strength: float = 0.0
    mucus_blob_count: int = 0
    bubble_fraction: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.fouling_strength <= 1.0):
            raise ValueError("fouling_strength must be in [0, 1]")
        if self.mucus_blob_count < 0:
            raise ValueError("mucus_blob_count must be >= 0")
        if not (0.0 <= self.bubble_fraction <= 1.0):
            raise ValueError("bubble_fraction must be in [0, 1]")
        if not (0.0 <= self.noise_sigma <= 1.0):
            raise ValueError("noise_sigma must be in [0, 1]")

    @property
    def is_identity(self) -> bool:
        return (self.fouling_strength == 0.0 and self.mucus_blob_count == 0
                and self.bubble_fraction == 0.0 and self.noise_sigma == 0.0)


@dataclass(frozen=True)
class RenderParams:
    """Shading and style constants, frozen after calibration.

    depth_lambda places typical branch views mid-range; shade_cap reserves
    intensity 1.0 for overlays so arrow pixels are always detectable.
    """

    depth_lambda_mm: float = 25.0
    shade_cap: float = 0.98
    texture_amplitude: float = 0.22
    texture_wavelength_mm: float = 7.0
    texture_octaves: int = 3
    vignette_strength: float = 0.10
    grain_amplitude: float = 0.05
    max_steps: int = 256
    hit_eps_mm: float = 1e-3
    max_range_mm: float = 200.0


DEFAULT_PARAMS = RenderParams()


_GRAIN_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _sensor_grain(seed: int, width: int, height: int) -> np.ndarray:
    """Fixed-pattern sensor grain in [-1, 1], native-resolution physics.

    The pattern lives on the native pixel grid; frames rendered at lower
    resolutions receive the area-averaged pattern, exactly as if a native
    frame had been rendered and downsampled. That keeps the real style
    coherent across resolutions while the grain's visual impact shrinks
    with the averaging factor.
    """
    key = (seed, width, height)
    if key not in _GRAIN_CACHE:
        native = _raycast.noise_grid(seed * 31 + 7, NATIVE_INTRINSICS.width,
                                     NATIVE_INTRINSICS.height, 1.0) * 2.0 - 1.0
        if (width, height) == (NATIVE_INTRINSICS.width, NATIVE_INTRINSICS.height):
            field = native
        else:
            field = (_box_weights(native.shape[0], height) @ native
                     @ _box_weights(native.shape[1], width).T)
        field.setflags(write=False)
        _GRAIN_CACHE[key] = field
    return _GRAIN_CACHE[key]


class Renderer:
    """Sphere-tracing renderer bound to an intrinsics/params pair."""

    def __init__(self, intrinsics: CameraIntrinsics = NATIVE_INTRINSICS,
                 params: RenderParams = DEFAULT_PARAMS):
        self.intrinsics = intrinsics
        self.params = params

    def render(self, tree: AirwayTree, pose: Pose, style: Style) -> Frame:
        if lumen_signed_distance(tree, pose.position) >= 0.0:
            raise PlacementError("camera pose lies outside the lumen")
        k = self.intrinsics
        pk = tree.packed
        origin = np.ascontiguousarray(pose.position)
        right = np.ascontiguousarray(pose.right)
        up = np.ascontiguousarray(pose.up)
        fwd = np.ascontiguousarray(pose.forward)
        t_img = _raycast.trace_frame(
            origin, right, up, fwd, k.width, k.height, k.fx, k.fy, k.cx, k.cy,
            pk.p0, pk.p1, pk.r0, pk.r1, pk.bc, pk.br, pk.seg_start, pk.seg_end,
            self.params.max_steps, self.params.hit_eps_mm, self.params.max_range_mm)
        shading = np.minimum(np.exp(-t_img / self.params.depth_lambda_mm),
                             self.params.shade_cap)
        if style is Style.VIRTUAL:
            return Frame(shading, Style.VIRTUAL)
        tex = _raycast.texture_field(
            tree.seed, origin, right, up, fwd, k.width, k.height,
            k.fx, k.fy, k.cx, k.cy, t_img,
            self.params.texture_wavelength_mm, self.params.texture_octaves)
        mult = 1.0 + self.params.texture_amplitude * (2.0 * tex - 1.0)
        jj, ii = np.meshgrid(np.arange(k.width, dtype=float),
                             np.arange(k.height, dtype=float))
        r2 = ((jj - k.cx) ** 2 + (ii - k.cy) ** 2)
        r2 /= max(r2[0, 0], r2[-1, -1], r2[0, -1], r2[-1, 0])
        vignette = 1.0 - self.params.vignette_strength * r2
        px = shading * mult * vignette
        if self.params.grain_amplitude > 0.0:
            px = px + self.params.grain_amplitude * _sensor_grain(
                tree.seed, k.width, k.height)
        px = np.clip(px, 0.0, self.params.shade_cap)
        return Frame(px, Style.REAL)


def render(tree: AirwayTree, pose: Pose, intrinsics: CameraIntrinsics,
           style: Style, params: RenderParams = DEFAULT_PARAMS) -> Frame:
    return Renderer(intrinsics, params).render(tree, pose, style)


def _smooth_field(seed: int, width: int, height: int, scale_px: float) -> np.ndarray:
    return _raycast.noise_grid(seed, width, height, scale_px)


def apply_perturbation(frame: Frame, cfg: PerturbationConfig, noise_key: int = 0) -> Frame:
    """Degrade a frame: lens fouling, mucus blobs, bubbles, pixel noise.

    Field patterns (smudge, blob, bubble layout) depend only on cfg.seed, so
    they persist across a trajectory like artifacts adhered to the lens;
    additive noise also folds in noise_key so successive observations get
    fresh grain. All-zero config returns the input frame unchanged.
    """
    cfg.validate()
    if cfg.is_identity:
        return frame
    px = np.array(frame.pixels, dtype=float)
    h, w = px.shape
    if cfg.fouling_strength > 0.0:
        s = cfg.fouling_strength
        field = _smooth_field(cfg.seed * 7 + 1, w, h, scale_px=w / 3.0)
        px *= 1.0 - 0.30 * s * field
        sigma = 6.0 * s * (w / 392.0)
        if sigma > 0.05:
            px = ndimage.gaussian_filter(px, sigma=sigma, mode="nearest")
    if cfg.mucus_blob_count > 0:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
        jj, ii = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        for _ in range(cfg.mucus_blob_count):
            cx = rng.uniform(0.1 * w, 0.9 * w)
            cy = rng.uniform(0.1 * h, 0.9 * h)
            rad = rng.uniform(0.06, 0.14) * min(w, h)
            g = np.exp(-((jj - cx) ** 2 + (ii - cy) ** 2) / (2.0 * rad * rad))
            px *= 1.0 - 0.8 * g
    if cfg.bubble_fraction > 0.0:
        if cfg.bubble_fraction >= 1.0:
            px[:] = 0.95
        else:
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
            jj, ii = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
            covered = np.zeros((h, w), dtype=bool)
            for _ in range(256):
                if covered.mean() >= cfg.bubble_fraction:
                    break
                cx = rng.uniform(0, w)
                cy = rng.uniform(0, h)
                rad = rng.uniform(0.05, 0.12) * min(w, h)
                disk = ((jj - cx) ** 2 + (ii - cy) ** 2) <= rad * rad
                covered |= disk
            px[covered] = 0.95
    if cfg.noise_sigma > 0.0:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4, noise_key]))
        px += rng.normal(0.0, cfg.noise_sigma, size=px.shape)
    px = np.clip(px, 0.0, 1.0)
    tag = (f"foul={cfg.fouling_strength:g};mucus={cfg.mucus_blob_count};"
           f"bubble={cfg.bubble_fraction:g};noise={cfg.noise_sigma:g};seed={cfg.seed}")
    return Frame(px, frame.style, perturb_tag=tag)


_RESAMPLE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _box_weights(n_in: int, n_out: int) -> np.ndarray:
    """Exact area-overlap weights mapping n_in samples to n_out bins."""
    key = (n_in, n_out)
    if key in _RESAMPLE_CACHE:
        return _RESAMPLE_CACHE[key]
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        lo, hi = o * scale, (o + 1) * scale
        i0, i1 = int(math.floor(lo)), int(math.ceil(hi))
        for i in range(i0, min(i1, n_in)):
            overlap = min(hi, i + 1) - max(lo, i)
            if overlap > 0:
                w[o, i] = overlap / scale
        w[o] /= w[o].sum()
    _RESAMPLE_CACHE[key] = w
    return w


def downsample(frame: Frame, out_w: int, out_h: int) -> Frame:
    """Area-averaging resample; preserves mean intensity."""
    if out_w > frame.width or out_h > frame.height:
        raise ContractError("output dimensions must not exceed input dimensions")
    wy = _box_weights(frame.height, out_h)
    wx = _box_weights(frame.width, out_w)
    px = wy @ frame.pixels @ wx.T
    return Frame(np.clip(px, 0.0, 1.0), frame.style, frame.perturb_tag)


def overlay_arrow(frame: Frame, direction, magnitude_px: float,
                  origin_px: tuple[float, float] | None = None,
                  stroke_px: float = 3.0) -> Frame:
    """Rasterize a directional arrow at intensity 1.0 over a copy of the frame.

    The arrow runs from origin (image center by default) along a unit 2D
    direction for magnitude_px, with a two-barb head. Only arrow pixels
    change; 1.0 is reserved for overlays (renders are capped below it).
    """
    d = np.asarray(direction, dtype=float).reshape(2)
    if abs(float(np.linalg.norm(d)) - 1.0) > 1e-6 and magnitude_px > 0:
        raise ContractError("direction must be unit-norm")
    h, w = frame.pixels.shape
    if origin_px is None:
        origin_px = (w / 2.0, h / 2.0)
    ox, oy = origin_px
    tip = np.array([ox + d[0] * magnitude_px, oy + d[1] * magnitude_px])
    segments = [(np.array([ox, oy]), tip)]
    if magnitude_px > 0:
        head = min(8.0, 0.5 * magnitude_px + 2.0)
        back = -d
        for sign in (+1.0, -1.0):
            c, s = math.cos(math.radians(30.0)) , sign * math.sin(math.radians(30.0))
            barb = np.array([back[0] * c - back[1] * s, back[0] * s + back[1] * c])
            segments.append((tip, tip + barb * head))
    jj, ii = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    mask = np.zeros((h, w), dtype=bool)
    half = stroke_px / 2.0
    for a, b in segments:
        ab = b - a
        ab2 = float(ab @ ab)
        if ab2 < 1e-12:
            mask |= (np.abs(jj - a[0]) <= half) & (np.abs(ii - a[1]) <= half)
            continue
        t = np.clip(((jj - a[0]) * ab[0] + (ii - a[1]) * ab[1]) / ab2, 0.0, 1.0)
        dist2 = (jj - (a[0] + t * ab[0])) ** 2 + (ii - (a[1] + t * ab[1])) ** 2
        mask |= dist2 <= half * half
    px = np.array(frame.pixels)
    px[mask] = 1.0
    return Frame(px, frame.style, frame.perturb_tag)


def frame_digest(frame: Frame) -> str:
    """Digest of the float buffer (not the PGM quantization)."""
    m = hashlib.sha256()
    m.update(np.ascontiguousarray(frame.pixels).tobytes())
    m.update(f"{frame.width}x{frame.height}:{frame.style.value}".encode())
    return m.hexdigest()[:16]


def write_pgm(frame: Frame, path) -> None:
    """8-bit binary PGM (P5), 0-255 linear quantization."""
    data = np.clip(np.rint(frame.pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{frame.width} {frame.height}\n255\n".encode())
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ValueError("not a binary PGM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline())
        data = np.frombuffer(f.read(w * h), dtype=np.uint8).reshape(h, w)
    return data.astype(float) / maxval


def calibrate_fouling(clean_frames: list[Frame], target_ssim: float = 0.59,
                      tol: float = 0.01, seed: int = 17,
                      max_iters: int = 40) -> float:
    """Binary-search the fouling strength hitting a mean SSIM target.

    The calibration set is a fixed list of clean rendered frames; the
    returned strength reproduces the measured degradation level of soiled
    optics rather than its physical cause.
    """
    from .metrics import ssim as _ssim

    def mean_ssim(strength: float) -> float:
        cfg = PerturbationConfig(fouling_strength=strength, seed=seed)
        vals = [_ssim(f, apply_perturbation(f, cfg)) for f in clean_frames]
        return float(np.mean(vals))

    lo, hi = 0.0, 1.0
    if mean_ssim(1.0) > target_ssim:
        return 1.0
    for _ in range(max_iters):
        mid = 0.5 * (lo + hi)
        v = mean_ssim(mid)
        if abs(v - target_ssim) <= tol:
            return mid
        if v > target_ssim:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
