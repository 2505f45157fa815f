"""Numba kernels: capsule-union signed distance, sphere tracing, value noise.

The lumen is a union of sphere-swept segments with linearly interpolated
radii (rounded cones). All kernels are deterministic: fixed iteration order,
no parallel reductions, and integer-hash noise. Geometry arrives packed as
flat arrays (see airway.PackedTree) so the kernels stay allocation-free in
their inner loops.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

HIT_EPS_DEFAULT = 1e-3
MAX_STEPS_DEFAULT = 256
MAX_RANGE_DEFAULT = 200.0
_RELAX = 1.6  # over-stepping factor; overshoot is detected and retried


@njit(cache=True, inline="always")
def _sd_round_cone(px, py, pz, ax, ay, az, bx, by, bz, r1, r2):
    """Exact signed distance to a sphere-swept segment with radii r1 -> r2."""
    bax = bx - ax
    bay = by - ay
    baz = bz - az
    l2 = bax * bax + bay * bay + baz * baz
    rr = r1 - r2
    a2 = l2 - rr * rr
    il2 = 1.0 / l2
    pax = px - ax
    pay = py - ay
    paz = pz - az
    y = pax * bax + pay * bay + paz * baz
    z = y - l2
    xx = pax * l2 - bax * y
    xy = pay * l2 - bay * y
    xz = paz * l2 - baz * y
    x2 = xx * xx + xy * xy + xz * xz
    y2 = y * y * l2
    z2 = z * z * l2
    k = np.sign(rr) * rr * rr * x2
    if np.sign(z) * a2 * z2 > k:
        return np.sqrt(x2 + z2) * il2 - r2
    if np.sign(y) * a2 * y2 < k:
        return np.sqrt(x2 + y2) * il2 - r1
    return (np.sqrt(x2 * a2 * il2) + y * rr) * il2 - r1


@njit(cache=True, inline="always")
def _branch_min(px, py, pz, p0, p1, r0, r1, lo, hi, best):
    for s in range(lo, hi):
        d = _sd_round_cone(
            px, py, pz,
            p0[s, 0], p0[s, 1], p0[s, 2],
            p1[s, 0], p1[s, 1], p1[s, 2],
            r0[s], r1[s],
        )
        if d < best:
            best = d
    return best


@njit(cache=True, inline="always")
def _sdf_at_warm(px, py, pz, p0, p1, r0, r1, bc, br, seg_start, seg_end,
                 cand, ncand, warm):
    """Union SDF with a warm-start branch hint; returns (value, best branch).

    Evaluating the previous step's nearest branch first establishes a tight
    bound, so the remaining branches usually fail the squared-distance cull
    without touching their segments.
    """
    best = 1e30
    best_b = -1
    if warm >= 0:
        best = _branch_min(px, py, pz, p0, p1, r0, r1,
                           seg_start[warm], seg_end[warm], best)
        best_b = warm
    for ci in range(ncand):
        b = cand[ci]
        if b == warm:
            continue
        dx = px - bc[b, 0]
        dy = py - bc[b, 1]
        dz = pz - bc[b, 2]
        d2 = dx * dx + dy * dy + dz * dz
        rhs = best + br[b]
        if rhs > 0.0 and d2 >= rhs * rhs:
            continue
        v = _branch_min(px, py, pz, p0, p1, r0, r1, seg_start[b], seg_end[b], best)
        if v < best:
            best = v
            best_b = b
    return best, best_b


@njit(cache=True, inline="always")
def _sdf_at(px, py, pz, p0, p1, r0, r1, bc, br, seg_start, seg_end, cand, ncand):
    """Union SDF at one point over candidate branches (bounding-sphere culled)."""
    best, _ = _sdf_at_warm(px, py, pz, p0, p1, r0, r1, bc, br,
                           seg_start, seg_end, cand, ncand, -1)
    return best


@njit(cache=True)
def sdf_points(points, p0, p1, r0, r1, bc, br, seg_start, seg_end):
    """Signed distance for an (N, 3) array of points; all branches considered."""
    nb = bc.shape[0]
    cand = np.empty(nb, dtype=np.int64)
    for b in range(nb):
        cand[b] = b
    out = np.empty(points.shape[0])
    for i in range(points.shape[0]):
        out[i] = _sdf_at(
            points[i, 0], points[i, 1], points[i, 2],
            p0, p1, r0, r1, bc, br, seg_start, seg_end, cand, nb,
        )
    return out


@njit(cache=True)
def branch_sdf_points(points, p0, p1, r0, r1, seg_lo, seg_hi):
    """Signed distance against one branch's segment range only."""
    out = np.empty(points.shape[0])
    for i in range(points.shape[0]):
        best = 1e30
        for s in range(seg_lo, seg_hi):
            d = _sd_round_cone(
                points[i, 0], points[i, 1], points[i, 2],
                p0[s, 0], p0[s, 1], p0[s, 2],
                p1[s, 0], p1[s, 1], p1[s, 2],
                r0[s], r1[s],
            )
            if d < best:
                best = d
        out[i] = best
    return out


@njit(cache=True, parallel=True)
def trace_frame(origin, right, up, forward, width, height, fx, fy, cx, cy,
                p0, p1, r0, r1, bc, br, seg_start, seg_end,
                max_steps, hit_eps, max_range):
    """Sphere-trace one ray per pixel; returns hit distances (height, width).

    Rays start inside the lumen, so the marched field is the distance to the
    wall: the negated union SDF (still 1-Lipschitz). Pixel (i, j) uses the
    continuous image coordinate (j, i); rays leave the pinhole along
    x*right - y*up + forward. Relaxed stepping (factor 1.6) backtracks on
    overshoot, so reported distances match plain sphere tracing within
    hit_eps. Rays that exhaust max_range or max_steps report max_range.
    """
    nb = bc.shape[0]
    cand = np.empty(nb, dtype=np.int64)
    ncand = 0
    for b in range(nb):
        dx = origin[0] - bc[b, 0]
        dy = origin[1] - bc[b, 1]
        dz = origin[2] - bc[b, 2]
        if np.sqrt(dx * dx + dy * dy + dz * dz) - br[b] < max_range:
            cand[ncand] = b
            ncand += 1
    out = np.empty((height, width))
    for i in prange(height):
        for j in range(width):
            vx = (j - cx) / fx
            vy = (i - cy) / fy
            dx = vx * right[0] - vy * up[0] + forward[0]
            dy = vx * right[1] - vy * up[1] + forward[1]
            dz = vx * right[2] - vy * up[2] + forward[2]
            inv = 1.0 / np.sqrt(dx * dx + dy * dy + dz * dz)
            dx *= inv
            dy *= inv
            dz *= inv
            t = 0.0
            d_prev = 0.0
            step_prev = 0.0
            relaxed = True
            warm = -1
            for _ in range(max_steps):
                px = origin[0] + t * dx
                py = origin[1] + t * dy
                pz = origin[2] + t * dz
                d_sdf, warm = _sdf_at_warm(px, py, pz, p0, p1, r0, r1, bc, br,
                                           seg_start, seg_end, cand, ncand, warm)
                d = -d_sdf
                if relaxed and step_prev > 0.0 and d_prev + d < step_prev:
                    # Overshot past a surface: rewind to the conservative step.
                    t = t - step_prev + d_prev
                    relaxed = False
                    step_prev = 0.0
                    d_prev = 0.0
                    continue
                if d < hit_eps:
                    break
                step = d * _RELAX if relaxed else d
                t += step
                step_prev = step
                d_prev = d
                relaxed = True
                if t > max_range:
                    t = max_range
                    break
            if t > max_range:
                t = max_range
            out[i, j] = t
    return out


@njit(cache=True, inline="always")
def _hash3(seed, ix, iy, iz):
    """Integer lattice hash -> [0, 1); splitmix-style mixing, platform-stable."""
    h = np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15)
    h = (h ^ (np.uint64(ix) * np.uint64(0xBF58476D1CE4E5B9))) * np.uint64(0x94D049BB133111EB)
    h = (h ^ (np.uint64(iy) * np.uint64(0xD6E8FEB86659FD93))) * np.uint64(0xFF51AFD7ED558CCD)
    h = (h ^ (np.uint64(iz) * np.uint64(0xC2B2AE3D27D4EB4F))) * np.uint64(0x2545F4914F6CDD1D)
    h = h ^ (h >> np.uint64(33))
    return float(h & np.uint64(0xFFFFFFFF)) / 4294967296.0


@njit(cache=True, inline="always")
def _value_noise(seed, x, y, z):
    """Trilinear value noise on an integer lattice (offset keeps cells positive)."""
    ox = x + 4096.0
    oy = y + 4096.0
    oz = z + 4096.0
    ix = np.int64(np.floor(ox))
    iy = np.int64(np.floor(oy))
    iz = np.int64(np.floor(oz))
    fxp = ox - ix
    fyp = oy - iy
    fzp = oz - iz
    # smoothstep fade
    fxs = fxp * fxp * (3.0 - 2.0 * fxp)
    fys = fyp * fyp * (3.0 - 2.0 * fyp)
    fzs = fzp * fzp * (3.0 - 2.0 * fzp)
    v000 = _hash3(seed, ix, iy, iz)
    v100 = _hash3(seed, ix + 1, iy, iz)
    v010 = _hash3(seed, ix, iy + 1, iz)
    v110 = _hash3(seed, ix + 1, iy + 1, iz)
    v001 = _hash3(seed, ix, iy, iz + 1)
    v101 = _hash3(seed, ix + 1, iy, iz + 1)
    v011 = _hash3(seed, ix, iy + 1, iz + 1)
    v111 = _hash3(seed, ix + 1, iy + 1, iz + 1)
    a = v000 + (v100 - v000) * fxs
    b = v010 + (v110 - v010) * fxs
    c = v001 + (v101 - v001) * fxs
    d = v011 + (v111 - v011) * fxs
    e = a + (b - a) * fys
    f = c + (d - c) * fys
    return e + (f - e) * fzs


@njit(cache=True, parallel=True)
def texture_field(seed, origin, right, up, forward, width, height, fx, fy, cx, cy,
                  t_img, base_wavelength_mm, octaves):
    """Wall texture in [0, 1]: multi-octave value noise sampled at hit points."""
    out = np.empty((height, width))
    for i in prange(height):
        for j in range(width):
            vx = (j - cx) / fx
            vy = (i - cy) / fy
            dx = vx * right[0] - vy * up[0] + forward[0]
            dy = vx * right[1] - vy * up[1] + forward[1]
            dz = vx * right[2] - vy * up[2] + forward[2]
            inv = 1.0 / np.sqrt(dx * dx + dy * dy + dz * dz)
            t = t_img[i, j]
            px = origin[0] + t * dx * inv
            py = origin[1] + t * dy * inv
            pz = origin[2] + t * dz * inv
            total = 0.0
            weight = 0.0
            amp = 1.0
            wl = base_wavelength_mm
            for o in range(octaves):
                total += amp * _value_noise(seed + o * 101, px / wl, py / wl, pz / wl)
                weight += amp
                amp *= 0.55
                wl *= 0.5
            out[i, j] = total / weight
    return out


@njit(cache=True)
def noise_grid(seed, width, height, scale):
    """2D value noise field in [0, 1] on the pixel grid (z slice of the 3D hash)."""
    out = np.empty((height, width))
    for i in range(height):
        for j in range(width):
            out[i, j] = _value_noise(seed, j / scale, i / scale, 0.0)
    return out
