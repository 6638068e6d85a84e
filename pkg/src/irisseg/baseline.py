"""Conventional iris segmenter: circular approximation plus contour refinement.

Boundary circles come from a coarse-to-fine search of the integro-differential
objective (radial derivative of the Gaussian-smoothed circular intensity
profile).  Each circle is then refined on a polar angle x radius lattice by
dynamic programming that trades edge strength against radial smoothness, with
circular closure.  Bright specular regions are inpainted before boundary
scoring and excluded from the final mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, NoBoundaryFound, ShapeError


@dataclass
class Circle:
    cx: float
    cy: float
    r: float


@dataclass
class PolarContour:
    """Closed per-angle boundary: radius for each of n uniformly spaced angles."""

    cx: float
    cy: float
    radii: np.ndarray  # (n_angles,), pixels
    closure: str = "exact"  # "exact" or "two_pass"
    score: float = 0.0

    def radius_at(self, theta: np.ndarray) -> np.ndarray:
        """Periodic linear interpolation of the per-angle radii."""
        n = len(self.radii)
        grid = np.arange(n) * (2.0 * math.pi / n)
        return np.interp(np.mod(theta, 2.0 * math.pi), grid, self.radii, period=2.0 * math.pi)


@dataclass
class BaselineConfig:
    pupil_radius_band: tuple[float, float] = (15.0, 80.0)
    iris_band_rel: tuple[float, float] = (1.5, 4.0)   # limbus radius relative to pupil
    max_center_shift: float = 10.0                     # limbus center search around pupil center
    n_angles: int = 128
    n_radii: int = 64
    smoothness: float = 2.0            # per lattice-step radial jump penalty
    refine_band: float = 0.20          # contour search band, fraction of circle radius
    reflection_percentile: float = 99.0
    inpaint_threshold: float = 240.0
    objective_floor: float = 5.0       # minimum edge response for a valid circle
    profile_sigma: float = 1.5         # Gaussian smoothing of the radial derivative
    closure: str = "auto"              # auto | exact | two_pass
    max_radial_jump: int | None = None

    def validate(self) -> None:
        if self.pupil_radius_band[0] >= self.pupil_radius_band[1]:
            raise ConfigError(f"empty pupil radius band: {self.pupil_radius_band}")
        if self.iris_band_rel[0] >= self.iris_band_rel[1] or self.iris_band_rel[0] <= 1.0:
            raise ConfigError(f"iris band must be a nonempty range above 1x pupil: {self.iris_band_rel}")
        if self.n_angles < 8:
            raise ConfigError("n_angles must be >= 8")
        if self.n_radii < 2:
            raise ConfigError("n_radii must be >= 2")
        if self.closure not in ("auto", "exact", "two_pass"):
            raise ConfigError(f"unknown closure mode {self.closure!r}")


def _as_float_image(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ShapeError(f"expected a single-channel image, got shape {arr.shape}")
    return arr.astype(np.float64)


def inpaint_bright(image: np.ndarray, cfg: BaselineConfig | None = None) -> np.ndarray:
    """Replace near-saturated pixels with a local median (reflection removal)."""
    cfg = cfg or BaselineConfig()
    img = _as_float_image(image)
    bright = img >= cfg.inpaint_threshold
    if not bright.any():
        return img
    med = ndimage.median_filter(img, size=9, mode="nearest")
    out = img.copy()
    out[bright] = med[bright]
    return out


def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear samples plus an in-bounds validity mask."""
    h, w = img.shape
    valid = (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)
    ysc = np.clip(ys, 0, h - 1)
    xsc = np.clip(xs, 0, w - 1)
    y0 = np.floor(ysc).astype(np.intp)
    x0 = np.floor(xsc).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ysc - y0
    fx = xsc - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy, valid


def _circular_profiles(img: np.ndarray, centers: np.ndarray, radii: np.ndarray,
                       n_angles: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean intensity over each circle: (n_centers, n_radii) plus valid fraction."""
    theta = np.linspace(0.0, 2.0 * math.pi, n_angles, endpoint=False)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    profiles = np.empty((len(centers), len(radii)))
    valid_frac = np.empty_like(profiles)
    for i, (cx, cy) in enumerate(centers):
        xs = cx + radii[:, None] * cos_t[None, :]
        ys = cy + radii[:, None] * sin_t[None, :]
        vals, valid = _bilinear(img, ys, xs)
        counts = valid.sum(axis=1)
        sums = np.where(valid, vals, 0.0).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            profiles[i] = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
        valid_frac[i] = counts / n_angles
    return profiles, valid_frac


def _edge_response(profiles: np.ndarray, valid_frac: np.ndarray, radii: np.ndarray,
                   sigma: float) -> np.ndarray:
    """|Gaussian-smoothed radial derivative| of each profile; invalid rows -inf.

    `sigma` is in pixels of radius, so coarse grids are not over-smoothed.
    """
    step = radii[1] - radii[0] if len(radii) > 1 else 1.0
    deriv = np.gradient(profiles, step, axis=1)
    smoothed = ndimage.gaussian_filter1d(deriv, sigma=max(sigma / step, 0.35), axis=1, mode="nearest")
    response = np.abs(smoothed)
    response[valid_frac < 0.5] = -np.inf
    return response


def _search_circle(img: np.ndarray, centers: list[tuple[float, float]],
                   radii: np.ndarray, cfg: BaselineConfig,
                   n_angles: int) -> tuple[Circle, float]:
    response = _edge_response(*_circular_profiles(img, np.asarray(centers), radii, n_angles),
                              radii=radii, sigma=cfg.profile_sigma)
    flat = np.argmax(response)
    ci, ri = np.unravel_index(flat, response.shape)
    score = response[ci, ri]
    cx, cy = centers[ci]
    return Circle(float(cx), float(cy), float(radii[ri])), float(score)


def _grid(center: tuple[float, float], half: float, step: float,
          bounds: tuple[int, int]) -> list[tuple[float, float]]:
    h, w = bounds
    xs = np.arange(center[0] - half, center[0] + half + 1e-9, step)
    ys = np.arange(center[1] - half, center[1] + half + 1e-9, step)
    return [(x, y) for y in ys for x in xs if 0 <= x <= w - 1 and 0 <= y <= h - 1]


def _dark_centroid(img: np.ndarray) -> tuple[float, float]:
    thr = np.percentile(img, 8.0)
    dark = img <= thr
    ys, xs = np.nonzero(dark)
    if len(xs) == 0:
        return (img.shape[1] / 2.0, img.shape[0] / 2.0)
    return (float(xs.mean()), float(ys.mean()))


def _refine_circle(img: np.ndarray, best: Circle, cfg: BaselineConfig,
                   radius_band: tuple[float, float]) -> tuple[Circle, float]:
    """Step-1 local search around `best`, re-centered until it stops moving."""
    circle, score = best, -np.inf
    for _ in range(4):
        centers = _grid((circle.cx, circle.cy), 3.0, 1.0, img.shape)
        lo = max(radius_band[0], circle.r - 4.0)
        hi = min(radius_band[1], circle.r + 4.0)
        radii = np.arange(lo, hi + 1e-9, 1.0)
        if len(radii) < 2:
            radii = np.asarray([max(lo, 1.0), max(lo, 1.0) + 1.0])
        new, score = _search_circle(img, centers, radii, cfg, n_angles=256)
        moved = max(abs(new.cx - circle.cx), abs(new.cy - circle.cy), abs(new.r - circle.r))
        circle = new
        if moved < 0.5:
            break
    return circle, score


def find_pupil_circle(image: np.ndarray, cfg: BaselineConfig | None = None) -> Circle:
    """Locate the pupil boundary by maximizing the integro-differential objective."""
    cfg = cfg or BaselineConfig()
    cfg.validate()
    img = inpaint_bright(image, cfg)
    seed = _dark_centroid(img)
    lo, hi = cfg.pupil_radius_band
    hi = min(hi, min(img.shape) / 2.0 - 2.0)
    if hi <= lo:
        raise ConfigError(f"pupil radius band {cfg.pupil_radius_band} does not fit the image")
    coarse_centers = _grid(seed, 16.0, 2.0, img.shape)
    coarse_radii = np.arange(lo, hi + 1e-9, 2.0)
    best, _ = _search_circle(img, coarse_centers, coarse_radii, cfg, cfg.n_angles)
    circle, score = _refine_circle(img, best, cfg, (lo, hi))
    if score < cfg.objective_floor:
        raise NoBoundaryFound(f"pupil edge response {score:.3f} below floor {cfg.objective_floor}")
    return circle


def find_iris_circle(image: np.ndarray, pupil: Circle,
                     cfg: BaselineConfig | None = None) -> Circle:
    """Locate the limbus with the same objective, constrained near the pupil."""
    cfg = cfg or BaselineConfig()
    cfg.validate()
    img = inpaint_bright(image, cfg)
    lo = cfg.iris_band_rel[0] * pupil.r
    hi = cfg.iris_band_rel[1] * pupil.r
    coarse_centers = _grid((pupil.cx, pupil.cy), cfg.max_center_shift, 2.0, img.shape)
    coarse_radii = np.arange(lo, hi + 1e-9, 2.0)
    if len(coarse_radii) < 2:
        raise NoBoundaryFound(f"iris radius band [{lo:.1f}, {hi:.1f}] is degenerate")
    best, _ = _search_circle(img, coarse_centers, coarse_radii, cfg, cfg.n_angles)
    circle, score = _refine_circle(img, best, cfg, (lo, hi))
    if score < cfg.objective_floor:
        raise NoBoundaryFound(f"limbus edge response {score:.3f} below floor {cfg.objective_floor}")
    return circle


def _maxplus_step(values: np.ndarray, penalty: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One DP transition: best[j] = max_jp(values[..., jp] + penalty[j, jp])."""
    scores = values[..., None, :] + penalty  # (..., j, jp)
    best_src = scores.argmax(axis=-1)
    return np.take_along_axis(scores, best_src[..., None], axis=-1)[..., 0], best_src


def _viterbi_closed_exact(cost: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    """Best closed path over all start states (exact closure)."""
    n_angles, n_radii = cost.shape
    j = np.arange(n_radii)
    penalty = -lam * np.abs(j[:, None] - j[None, :])
    value = np.full((n_radii, n_radii), -np.inf)
    value[j, j] = cost[0]
    pointers = np.zeros((n_angles, n_radii, n_radii), np.intp)
    for a in range(1, n_angles):
        value, src = _maxplus_step(value, penalty)
        value += cost[a]
        pointers[a] = src
    # closure transition from the last angle back to each start state; the
    # penalty matrix is symmetric, so penalty[s, j] is the closing cost.
    closed = value + penalty
    start, end = np.unravel_index(np.argmax(closed), closed.shape)
    best_score = float(closed[start, end])
    path = np.empty(n_angles, np.intp)
    path[-1] = end
    for a in range(n_angles - 1, 0, -1):
        path[a - 1] = pointers[a, start, path[a]]
    return path, best_score


def _viterbi_open(cost: np.ndarray, lam: float,
                  start: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    n_angles, n_radii = cost.shape
    j = np.arange(n_radii)
    penalty = -lam * np.abs(j[:, None] - j[None, :])
    if start is None:
        value = cost[0].copy()
    else:
        value = np.full(n_radii, -np.inf)
        value[start] = cost[0, start]
    pointers = np.zeros((n_angles, n_radii), np.intp)
    values = np.empty((n_angles, n_radii))
    values[0] = value
    for a in range(1, n_angles):
        value, src = _maxplus_step(value, penalty)
        value += cost[a]
        pointers[a] = src
        values[a] = value
    return values, pointers


def _viterbi_closed_two_pass(cost: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    """Approximate closure: anchor on the open DP's best end state, re-run."""
    n_angles, n_radii = cost.shape
    values, _ = _viterbi_open(cost, lam)
    anchor = int(values[-1].argmax())
    values, pointers = _viterbi_open(cost, lam, start=anchor)
    j = np.arange(n_radii)
    closed = values[-1] - lam * np.abs(j - anchor)
    end = int(closed.argmax())
    path = np.empty(n_angles, np.intp)
    path[-1] = end
    for a in range(n_angles - 1, 0, -1):
        path[a - 1] = pointers[a, path[a]]
    return path, float(closed[end])


def viterbi_path(cost: np.ndarray, lam: float, closure: str = "auto") -> tuple[np.ndarray, float, str]:
    """Closed max-score path through an (angles, radii) cost lattice.

    Exact closure batches the DP over every start state; the two-pass
    approximation is used automatically above 32 radii and is flagged in the
    returned mode string.
    """
    n_radii = cost.shape[1]
    if n_radii <= 1:
        raise ConfigError("viterbi lattice needs at least 2 radii")
    if closure == "exact" or (closure == "auto" and n_radii <= 32):
        path, score = _viterbi_closed_exact(cost, lam)
        return path, score, "exact"
    path, score = _viterbi_closed_two_pass(cost, lam)
    return path, score, "two_pass"


def viterbi_refine(image: np.ndarray, circle: Circle,
                   cfg: BaselineConfig | None = None) -> PolarContour:
    """Refine a circle into a per-angle contour on a polar lattice."""
    cfg = cfg or BaselineConfig()
    cfg.validate()
    img = _as_float_image(image)
    lo = max(1.0, circle.r * (1.0 - cfg.refine_band))
    hi = circle.r * (1.0 + cfg.refine_band)
    radii = np.linspace(lo, hi, cfg.n_radii)
    if radii[-1] - radii[0] < 1e-9:
        raise ConfigError("degenerate radial band for contour refinement")
    theta = np.linspace(0.0, 2.0 * math.pi, cfg.n_angles, endpoint=False)
    xs = circle.cx + radii[None, :] * np.cos(theta)[:, None]
    ys = circle.cy + radii[None, :] * np.sin(theta)[:, None]
    vals, _ = _bilinear(img, ys, xs)
    step = radii[1] - radii[0]
    cost = np.abs(np.gradient(vals, step, axis=1))
    path, score, mode = viterbi_path(cost, cfg.smoothness, cfg.closure)
    if cfg.max_radial_jump is not None:
        jumps = np.abs(np.diff(np.append(path, path[0])))
        if jumps.max(initial=0) > cfg.max_radial_jump:
            raise ConfigError(f"contour jump {int(jumps.max())} exceeds max_radial_jump")
    return PolarContour(circle.cx, circle.cy, radii[path], closure=mode, score=score)


def contours_to_mask(shape: tuple[int, int], inner: PolarContour,
                     outer: PolarContour) -> np.ndarray:
    """Pixels between the inner and outer closed contours."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    theta_in = np.arctan2(yy - inner.cy, xx - inner.cx)
    rho_in = np.hypot(yy - inner.cy, xx - inner.cx)
    theta_out = np.arctan2(yy - outer.cy, xx - outer.cx)
    rho_out = np.hypot(yy - outer.cy, xx - outer.cx)
    return (rho_in > inner.radius_at(theta_in)) & (rho_out <= outer.radius_at(theta_out))


def exclude_reflections(image: np.ndarray, mask: np.ndarray,
                        cfg: BaselineConfig | None = None) -> np.ndarray:
    """Drop in-mask pixels at/above the intensity percentile plus a 1-px ring.

    Pixels below half the dynamic range are never cut, so dark images pass
    through unchanged.
    """
    cfg = cfg or BaselineConfig()
    img = _as_float_image(image)
    mask = np.asarray(mask, bool)
    if img.shape != mask.shape:
        raise ShapeError(f"image shape {img.shape} != mask shape {mask.shape}")
    if not mask.any():
        return mask.copy()
    thr = np.percentile(img[mask], cfg.reflection_percentile)
    cut = mask & (img >= thr) & (img >= 127.5)
    if not cut.any():
        return mask.copy()
    ring = ndimage.binary_dilation(cut, structure=np.ones((3, 3), bool))
    return mask & ~ring


def segment(image: np.ndarray, cfg: BaselineConfig | None = None) -> np.ndarray:
    """Full pipeline: pupil circle -> limbus circle -> contour refinement x2 ->
    annulus mask -> reflection exclusion."""
    cfg = cfg or BaselineConfig()
    cfg.validate()
    work = inpaint_bright(image, cfg)
    seed = _dark_centroid(work)
    lo, hi = cfg.pupil_radius_band
    hi = min(hi, min(work.shape) / 2.0 - 2.0)
    if hi <= lo:
        raise ConfigError(f"pupil radius band {cfg.pupil_radius_band} does not fit the image")
    best, _ = _search_circle(work, _grid(seed, 16.0, 2.0, work.shape),
                             np.arange(lo, hi + 1e-9, 2.0), cfg, cfg.n_angles)
    pupil, pscore = _refine_circle(work, best, cfg, (lo, hi))
    if pscore < cfg.objective_floor:
        raise NoBoundaryFound(f"pupil edge response {pscore:.3f} below floor {cfg.objective_floor}")

    ilo = cfg.iris_band_rel[0] * pupil.r
    ihi = cfg.iris_band_rel[1] * pupil.r
    iris_radii = np.arange(ilo, ihi + 1e-9, 2.0)
    if len(iris_radii) < 2:
        raise NoBoundaryFound(f"iris radius band [{ilo:.1f}, {ihi:.1f}] is degenerate")
    best, _ = _search_circle(work, _grid((pupil.cx, pupil.cy), cfg.max_center_shift, 2.0, work.shape),
                             iris_radii, cfg, cfg.n_angles)
    limbus, lscore = _refine_circle(work, best, cfg, (ilo, ihi))
    if lscore < cfg.objective_floor:
        raise NoBoundaryFound(f"limbus edge response {lscore:.3f} below floor {cfg.objective_floor}")

    pupil_contour = viterbi_refine(work, pupil, cfg)
    limbus_contour = viterbi_refine(work, limbus, cfg)
    mask = contours_to_mask(image.shape, pupil_contour, limbus_contour)
    return exclude_reflections(image, mask, cfg)
