"""
Arterial volume-rate quantification from velocity maps.

Sections are taken where the artery mask crosses a circle around the optic
disc, oriented by a rotation search, reduced to wall-to-wall velocity
profiles, fitted with a Poiseuille parabola and converted to volume rates.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize

from .doppler import BackgroundNeighborhood, differential_broadening, signed_sqrt
from .errors import ConfigError, DataError

M3S_TO_UL_MIN = 1e9 * 60.0
MEAN_VELOCITY_MODES = ("poiseuille", "rms")
WINDOW_FITS = ("moment", "velocity", "free")


@dataclass(frozen=True)
class FlowConfig:
    center_px: tuple | None = None
    circle_radius_px: float = 40.0
    circle_width_px: float = 6.0
    papilla_diameter_px: float = 120.0
    half_len_px: int = 12
    section_width_px: int = 11
    angle_step_deg: float = 1.0
    wall_fraction: float = 0.1
    mean_velocity: str = "poiseuille"
    include_negative: bool = True
    window_fit: str = "moment"
    smoothing_windows: int = 3

    def __post_init__(self):
        if not self.circle_radius_px > self.circle_width_px / 2 > 0:
            raise ConfigError("need circle_radius_px > circle_width_px / 2 > 0")
        if self.papilla_diameter_px <= 0:
            raise ConfigError("papilla_diameter_px must be positive")
        if self.half_len_px < 2 or self.section_width_px < 1:
            raise ConfigError("half_len_px >= 2 and section_width_px >= 1 required")
        if not 0 < self.angle_step_deg <= 90:
            raise ConfigError("angle_step_deg must lie in (0, 90]")
        if not 0 <= self.wall_fraction < 1:
            raise ConfigError("wall_fraction must lie in [0, 1)")
        if self.mean_velocity not in MEAN_VELOCITY_MODES:
            raise ConfigError(f"mean_velocity must be one of {MEAN_VELOCITY_MODES}")
        if self.window_fit not in WINDOW_FITS:
            raise ConfigError(f"window_fit must be one of {WINDOW_FITS}")
        if self.smoothing_windows < 1:
            raise ConfigError("smoothing_windows must be >= 1")


@dataclass
class SectionSeed:
    label: int
    centroid_px: tuple          # (x, y)
    angle_deg: float            # polar angle about the circle center
    n_pixels: int


@dataclass
class PoiseuilleFit:
    vmax: float
    radius_px: float
    center_px: float
    rms_residual: float
    valid: bool


@dataclass
class ArterySection:
    center_px: tuple
    orientation_deg: float
    width_px: int
    profile: np.ndarray
    fitted_vmax: float
    fitted_radius_px: float
    fitted_radius_m: float
    area_m2: float
    volume_rate_m3s: float
    center_offset_px: float = 0.0
    valid: bool = True
    window_index: int = 0
    section_id: int = 0


@dataclass
class FlowResult:
    sections: list
    times_s: np.ndarray
    total_flow_series: np.ndarray          # uL/min per window
    n_valid_sections: np.ndarray
    n_excluded_sections: np.ndarray
    mean_total_flow: float
    systolic_flow: float
    diastolic_flow: float
    systolic_index: int
    diastolic_index: int
    systolic_time_s: float
    resistivity_index: float
    pixel_scale_m_per_px: float
    smoothed_series: np.ndarray = field(default=None)


def pixel_scale_from_papilla(papilla_diameter_px: float, papilla_diameter_m: float) -> float:
    """Meters per pixel from the known optic-disc diameter."""
    if papilla_diameter_px <= 0 or papilla_diameter_m <= 0:
        raise ConfigError("papilla diameters must be positive")
    return papilla_diameter_m / papilla_diameter_px


def papilla_diameter_from_mask(mask: np.ndarray) -> float:
    """Equivalent-circle diameter (px) of a papilla raster."""
    area = float(np.count_nonzero(mask))
    if area == 0:
        raise DataError("papilla mask is empty")
    return 2.0 * math.sqrt(area / math.pi)


def select_sections(artery_mask: np.ndarray, center_px, circle_radius_px: float,
                    circle_width_px: float, connectivity: int = 8) -> list[SectionSeed]:
    """
    One seed per connected piece of the artery mask inside the annulus
    ``radius +- width/2`` around ``center_px = (x, y)``; seeds are ordered
    by polar angle.
    """
    mask = np.asarray(artery_mask, dtype=bool)
    h, w = mask.shape
    cx, cy = center_px
    if not (0 <= cx < w and 0 <= cy < h):
        raise ConfigError(f"circle center {center_px} lies outside the {w}x{h} image")
    if not circle_radius_px > circle_width_px / 2 > 0:
        raise ConfigError("need circle_radius_px > circle_width_px / 2 > 0")
    yy, xx = np.indices(mask.shape)
    r = np.hypot(xx - cx, yy - cy)
    ring = mask & (r >= circle_radius_px - circle_width_px / 2) & (r <= circle_radius_px + circle_width_px / 2)
    st = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    labels, n = ndimage.label(ring, structure=st)
    if n == 0:
        raise DataError("no artery crosses the selection circle; adjust circle_radius_px")
    seeds = []
    for lab in range(1, n + 1):
        ys, xs = np.nonzero(labels == lab)
        gx, gy = xs.mean(), ys.mean()
        ang = math.degrees(math.atan2(gy - cy, gx - cx)) % 360.0
        seeds.append(SectionSeed(label=lab, centroid_px=(float(gx), float(gy)), angle_deg=ang,
                                 n_pixels=len(xs)))
    seeds.sort(key=lambda s: s.angle_deg)
    return seeds


def direction_vectors(orientation_deg: float):
    """Along-vessel and cross-vessel unit vectors (x, y); 0 deg is vertical."""
    t = math.radians(orientation_deg)
    along = (math.sin(t), math.cos(t))
    cross = (math.cos(t), -math.sin(t))
    return along, cross


class SectionOutOfBounds(DataError):
    pass


def _patch(image: np.ndarray, seed_xy, orientation_deg: float, half_len_px: int, width_px: int,
           check: bool = True) -> np.ndarray:
    along, cross = direction_vectors(orientation_deg)
    s = np.arange(-half_len_px, half_len_px + 1, dtype=float)
    t = np.arange(width_px, dtype=float) - (width_px - 1) / 2
    x = seed_xy[0] + t[:, None] * along[0] + s[None, :] * cross[0]
    y = seed_xy[1] + t[:, None] * along[1] + s[None, :] * cross[1]
    h, w = image.shape
    if check and (x.min() < 0 or y.min() < 0 or x.max() > w - 1 or y.max() > h - 1):
        raise SectionOutOfBounds(f"section at {seed_xy} leaves the image")
    return ndimage.map_coordinates(image, [y, x], order=1, mode="nearest")


def extract_profile(velocity_map: np.ndarray, seed_xy, half_len_px: int = 12, width_px: int = 11,
                    angle_step_deg: float = 1.0, orientation_deg: float | None = None):
    """
    Cross-section profile through ``seed_xy``.

    Orientations in [0, 180) are scanned; at each, a patch of ``width_px``
    rows along the vessel by ``2*half_len_px + 1`` columns across it is
    resampled bilinearly and summed along the vessel.  The orientation whose
    summed profile has the highest peak wins, ties going to the lowest
    angle.  Pass ``orientation_deg`` to skip the search.

    Returns
    -------
    profile : ndarray
        Mean across-vessel profile, ``2*half_len_px + 1`` samples.
    orientation_deg : float
    """
    vmap = np.asarray(velocity_map, dtype=float)
    if orientation_deg is None:
        angles = np.arange(0.0, 180.0, angle_step_deg)
        peaks = np.array([
            _patch(vmap, seed_xy, a, half_len_px, width_px).sum(axis=0).max() for a in angles
        ])
        top = peaks.max()
        tol = 1e-12 * max(abs(top), np.finfo(float).tiny)
        orientation_deg = float(angles[np.flatnonzero(peaks >= top - tol)[0]])
    patch = _patch(vmap, seed_xy, orientation_deg, half_len_px, width_px)
    return patch.mean(axis=0), orientation_deg


def _clamped_parabola(x, vmax, x0, r):
    return vmax * np.clip(1.0 - ((x - x0) / r) ** 2, 0.0, None)


def fit_poiseuille(profile, x=None, wall_fraction: float = 0.1, radius_px: float | None = None,
                   center_px: float | None = None) -> PoiseuilleFit:
    """
    Least-squares Poiseuille fit ``vmax * (1 - ((x - x0)/R)^2)``, zero outside the lumen.

    The free fit uses the contiguous run of samples above ``wall_fraction``
    of the profile maximum around the peak, plus one sample past each end
    so the clamped model sees the walls; isolated noise spikes outside the
    lumen are left out.  With ``radius_px`` and ``center_px`` given, the geometry is
    held fixed and only ``vmax`` is fitted, over the lumen samples; the
    result may then be negative.

    Parameters
    ----------
    profile : array_like
        Velocity samples, at least 5.
    x : array_like, optional
        Sample positions in px; default centered integer grid.
    """
    v = np.asarray(profile, dtype=float)
    if v.size < 5:
        raise DataError("Poiseuille fit needs at least 5 samples")
    if x is None:
        x = np.arange(v.size) - (v.size - 1) / 2
    x = np.asarray(x, dtype=float)
    bad = PoiseuilleFit(0.0, 0.0, 0.0, float("inf"), False)
    if not np.all(np.isfinite(v)):
        return bad

    if radius_px is not None:
        if center_px is None:
            raise ConfigError("fixed-geometry fit needs center_px")
        phi = np.clip(1.0 - ((x - center_px) / radius_px) ** 2, 0.0, None)
        inside = phi > 0
        if radius_px <= 0.5 or inside.sum() < 1:
            return bad
        vmax = float(np.dot(v[inside], phi[inside]) / np.dot(phi[inside], phi[inside]))
        res = v[inside] - vmax * phi[inside]
        return PoiseuilleFit(vmax, float(radius_px), float(center_px),
                             float(np.sqrt(np.mean(res**2))), vmax > 0)

    peak = v.max()
    if not peak > 0:
        return bad
    i = int(np.argmax(v))
    lo = hi = i
    while lo > 0 and v[lo - 1] >= wall_fraction * peak:
        lo -= 1
    while hi < v.size - 1 and v[hi + 1] >= wall_fraction * peak:
        hi += 1
    if hi - lo < 2:
        return bad
    run = slice(lo, hi + 1)
    sel = slice(max(lo - 1, 0), min(hi + 2, v.size))
    xs, vs = x[sel], v[sel]
    c2, c1, c0 = np.polyfit(x[run], v[run], 2)
    if c2 < 0:
        x0 = -c1 / (2 * c2)
        vmax = c0 - c1**2 / (4 * c2)
        r = math.sqrt(vmax / -c2) if vmax > 0 else 0.0
    else:
        x0, vmax, r = float(x[i]), float(peak), float(max((hi - lo + 1) / 2, 1.0))
    if not (vmax > 0 and r > 0):
        x0, vmax, r = float(x[i]), float(peak), float(max((hi - lo + 1) / 2, 1.0))
    p0 = np.array([vmax, x0, r])
    if np.max(np.abs(_clamped_parabola(xs, *p0) - vs)) > 1e-12 * peak:
        try:
            sol = optimize.least_squares(lambda p: _clamped_parabola(xs, *p) - vs, p0,
                                         x_scale=[peak, 1.0, 1.0], method="lm")
            if sol.success and sol.x[2] != 0:
                p0 = sol.x
        except (ValueError, np.linalg.LinAlgError):
            pass
    vmax, x0, r = float(p0[0]), float(p0[1]), abs(float(p0[2]))
    res = _clamped_parabola(xs, vmax, x0, r) - vs
    rms = float(np.sqrt(np.mean(res**2)))
    valid = vmax > 0 and r > 0.5 and np.isfinite(rms)
    return PoiseuilleFit(vmax, r, x0, rms, bool(valid))


def fit_moment_amplitude(moment_profile, radius_px: float, center_px: float, x=None):
    """
    Peak squared broadening of a section from its differential-moment profile.

    The moment profile ``D(x)`` (Hz^2, averaged along the vessel before any
    square root) is modeled as ``a * phi(x)^2`` with
    ``phi = 1 - ((x - x0)/R)^2`` on the lumen; ``a`` is the linear
    least-squares amplitude and may be negative.  Working on ``D`` keeps
    additive moment noise zero-mean; a square root per pixel would bias
    low-flow sections downward.

    Returns
    -------
    amplitude : float
        ``a`` in Hz^2; ``signed_sqrt(a)`` is the centerline broadening.
    rms_residual : float
    """
    d = np.asarray(moment_profile, dtype=float)
    if x is None:
        x = np.arange(d.size) - (d.size - 1) / 2
    if radius_px <= 0.5:
        return float("nan"), float("inf")
    phi2 = np.clip(1.0 - ((np.asarray(x, dtype=float) - center_px) / radius_px) ** 2, 0.0, None) ** 2
    inside = phi2 > 0
    if not inside.any() or not np.all(np.isfinite(d[inside])):
        return float("nan"), float("inf")
    a = float(np.dot(d[inside], phi2[inside]) / np.dot(phi2[inside], phi2[inside]))
    res = d[inside] - a * phi2[inside]
    return a, float(np.sqrt(np.mean(res**2)))


def mean_velocity(vmax: float, mode: str = "poiseuille") -> float:
    """Cross-section mean velocity implied by the centerline peak."""
    if mode == "poiseuille":
        return vmax / 2.0
    if mode == "rms":
        return vmax / math.sqrt(3.0)
    raise ConfigError(f"unknown mean velocity mode {mode!r}")


def section_volume_rate(vmax: float, radius_px: float, scale_m_per_px: float,
                        mode: str = "poiseuille") -> float:
    """Volume rate (m^3/s) of a parabolic profile: ``mean_velocity * pi * R^2``."""
    r_m = radius_px * scale_m_per_px
    return mean_velocity(vmax, mode) * math.pi * r_m**2


def make_section(profile, fit: PoiseuilleFit, seed_xy, orientation_deg: float, width_px: int,
                 scale_m_per_px: float, mode: str = "poiseuille", window_index: int = 0,
                 section_id: int = 0) -> ArterySection:
    r_m = fit.radius_px * scale_m_per_px
    area = math.pi * r_m**2
    q = section_volume_rate(fit.vmax, fit.radius_px, scale_m_per_px, mode) if fit.valid else 0.0
    return ArterySection(center_px=tuple(seed_xy), orientation_deg=orientation_deg, width_px=width_px,
                         profile=np.asarray(profile, dtype=float), fitted_vmax=fit.vmax,
                         fitted_radius_px=fit.radius_px, fitted_radius_m=r_m, area_m2=area,
                         volume_rate_m3s=q, center_offset_px=fit.center_px, valid=fit.valid,
                         window_index=window_index, section_id=section_id)


def smooth_series(series, size: int = 3) -> np.ndarray:
    series = np.asarray(series, dtype=float)
    if size <= 1 or series.size < 2:
        return series.copy()
    return ndimage.uniform_filter1d(series, size=size, mode="nearest")


def refine_peak_time(times, smoothed) -> float:
    """
    Peak time of a pulsatile series.

    A parabola is fitted over the contiguous run of samples around the
    maximum that stay above the midline between series mean and maximum;
    its vertex is returned when it falls inside that run.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(smoothed, dtype=float)
    i = int(np.argmax(y))
    mid = 0.5 * (y.mean() + y[i])
    lo = i
    while lo > 0 and y[lo - 1] >= mid:
        lo -= 1
    hi = i
    while hi < y.size - 1 and y[hi + 1] >= mid:
        hi += 1
    if hi - lo < 2:
        return float(t[i])
    tt = t[lo:hi + 1] - t[i]
    a, b, _ = np.polyfit(tt, y[lo:hi + 1], 2)
    if a >= 0:
        return float(t[i])
    vertex = -b / (2 * a)
    if not tt[0] <= vertex <= tt[-1]:
        return float(t[i])
    return float(t[i] + vertex)


def resistivity_index(series) -> float:
    """(systolic - diastolic) / systolic from the series extrema."""
    series = np.asarray(series, dtype=float)
    if series.size == 0:
        raise DataError("empty flow series")
    sys_, dia = float(series.max()), float(series.min())
    if sys_ <= 0:
        raise DataError("systolic flow must be positive to define a resistivity index")
    return (sys_ - dia) / sys_


def total_flow_series(window_sections, times_s, scale_m_per_px: float,
                      smoothing_windows: int = 3) -> FlowResult:
    """
    Sum valid section volume rates per window (uL/min) and summarize.

    ``window_sections[i]`` lists the ArterySection objects of window ``i``;
    invalid sections are left out of that window's total and counted.
    Systole and diastole are the extrema of the moving-average smoothed
    series.
    """
    times = np.asarray(times_s, dtype=float)
    if len(window_sections) != times.size or times.size == 0:
        raise DataError("need one timestamp per window and at least one window")
    totals = np.zeros(times.size)
    n_valid = np.zeros(times.size, dtype=int)
    n_excl = np.zeros(times.size, dtype=int)
    for i, secs in enumerate(window_sections):
        for s in secs:
            if s.valid:
                totals[i] += s.volume_rate_m3s * M3S_TO_UL_MIN
                n_valid[i] += 1
            else:
                n_excl[i] += 1
    if n_valid.sum() == 0:
        raise DataError("no valid artery section in any window")
    smoothed = smooth_series(totals, smoothing_windows)
    i_sys, i_dia = int(np.argmax(smoothed)), int(np.argmin(smoothed))
    sys_, dia = float(smoothed[i_sys]), float(smoothed[i_dia])
    ri = resistivity_index(smoothed) if sys_ > 0 else float("nan")
    flat = [s for secs in window_sections for s in secs]
    return FlowResult(sections=flat, times_s=times, total_flow_series=totals,
                      n_valid_sections=n_valid, n_excluded_sections=n_excl,
                      mean_total_flow=float(totals.mean()), systolic_flow=sys_, diastolic_flow=dia,
                      systolic_index=i_sys, diastolic_index=i_dia,
                      systolic_time_s=refine_peak_time(times, smoothed), resistivity_index=ri,
                      pixel_scale_m_per_px=scale_m_per_px, smoothed_series=smoothed)


@dataclass
class PhaseProfiles:
    axis: np.ndarray            # (x - x0) / R
    systole_mean: np.ndarray
    systole_std: np.ndarray
    diastole_mean: np.ndarray
    diastole_std: np.ndarray
    systolic_index: int
    diastolic_index: int
    n_systole: int
    n_diastole: int


def _phase_stack(sections, axis):
    rows = []
    for s in sections:
        if not s.valid or s.fitted_radius_px <= 0:
            continue
        x = np.arange(s.profile.size) - (s.profile.size - 1) / 2
        u = (x - s.center_offset_px) / s.fitted_radius_px
        rows.append(np.interp(axis, u, s.profile, left=np.nan, right=np.nan))
    return np.array(rows).reshape(len(rows), axis.size)


def systole_diastole_profiles(window_sections, smoothed_series=None, n_points: int = 41,
                              extent: float = 1.5) -> PhaseProfiles:
    """
    Mean and standard deviation of the section profiles at systole and diastole.

    Profiles are aligned on their fitted center and resampled onto the
    radius-normalized axis ``(x - x0) / R`` in ``[-extent, extent]``.
    """
    if len(window_sections) < 2:
        raise DataError("phase profiles need at least 2 windows")
    if smoothed_series is None:
        totals = [sum(s.volume_rate_m3s for s in secs if s.valid) for secs in window_sections]
        smoothed_series = smooth_series(totals, 3)
    smoothed_series = np.asarray(smoothed_series)
    i_sys, i_dia = int(np.argmax(smoothed_series)), int(np.argmin(smoothed_series))
    axis = np.linspace(-extent, extent, n_points)
    out = {}
    for name, idx in (("systole", i_sys), ("diastole", i_dia)):
        stack = _phase_stack(window_sections[idx], axis)
        if stack.shape[0] < 2:
            warnings.warn(f"fewer than 2 valid sections at {name}", RuntimeWarning)
        if stack.shape[0] == 0:
            out[name] = (np.full(n_points, np.nan), np.full(n_points, np.nan), 0)
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out[name] = (np.nanmean(stack, axis=0), np.nanstd(stack, axis=0), stack.shape[0])
    return PhaseProfiles(axis=axis, systole_mean=out["systole"][0], systole_std=out["systole"][1],
                         diastole_mean=out["diastole"][0], diastole_std=out["diastole"][1],
                         systolic_index=i_sys, diastolic_index=i_dia,
                         n_systole=out["systole"][2], n_diastole=out["diastole"][2])


@dataclass
class FlowAnalysis:
    """Everything the flow stage derives from a moment-map series."""

    result: FlowResult
    window_sections: list
    reference_sections: list
    phase_profiles: PhaseProfiles | None
    delta_f: np.ndarray                  # (windows, H, W), Hz
    velocity: np.ndarray                 # (windows, H, W), m/s
    saturated_fraction: np.ndarray       # per window, over artery pixels
    background_fallbacks: np.ndarray     # per window
    dropped_sections: list = field(default_factory=list)
    seeds: list = field(default_factory=list)


def _section_profile(image, seed_xy, cfg: FlowConfig, orientation_deg):
    prof, _ = extract_profile(image, seed_xy, cfg.half_len_px, cfg.section_width_px,
                              cfg.angle_step_deg, orientation_deg)
    return prof


def quantify_flow(m2_series, artery_mask, times_s, params, window_cfg, cfg: FlowConfig,
                  top_fraction_series=None) -> FlowAnalysis:
    """
    Per-window arterial volume rates from a series of M2 maps.

    Section geometry (orientation, radius, center) is measured once per
    branch on the time-averaged velocity map, where moment noise is
    lowest.  Each window then contributes only the centerline amplitude:

    * ``"moment"`` (default): the differential moment ``M2 - M2_bg`` is
      averaged along the section and fitted as ``a * phi^2``;
      ``v_max = wavelength * signed_sqrt(a) / NA``.
    * ``"velocity"``: the velocity profile is fitted with the geometry held.
    * ``"free"``: independent Poiseuille fit of every window's profile.

    Sections whose window amplitude is not positive are excluded from that
    window's total and counted.
    """
    m2_series = np.asarray(m2_series, dtype=float)
    mask = np.asarray(artery_mask, dtype=bool)
    if m2_series.ndim != 3 or m2_series.shape[1:] != mask.shape:
        raise DataError(f"M2 series {m2_series.shape} does not match artery mask {mask.shape}")
    times_s = np.asarray(times_s, dtype=float)
    if times_s.size != m2_series.shape[0]:
        raise DataError("need one timestamp per M2 window")
    n_win, h, w = m2_series.shape
    k = params.wavelength_m / params.numerical_aperture
    scale = pixel_scale_from_papilla(cfg.papilla_diameter_px, params.papilla_diameter_m)
    center = cfg.center_px if cfg.center_px is not None else ((w - 1) / 2, (h - 1) / 2)
    neigh = BackgroundNeighborhood(mask, window_cfg.ring_inner_px, window_cfg.ring_outer_px)

    def moment_excess(m2):
        est = neigh.estimate(m2)
        d = np.where(mask, m2 - est.background, 0.0)
        d[~np.isfinite(d)] = 0.0
        if not cfg.include_negative:
            np.maximum(d, 0.0, out=d)
        return d, est

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean_m2 = np.nanmean(m2_series, axis=0)
    d_ref, _ = moment_excess(mean_m2)
    v_ref = k * signed_sqrt(d_ref)

    seeds = select_sections(mask, center, cfg.circle_radius_px, cfg.circle_width_px)
    refs, dropped = [], []
    for sid, seed in enumerate(seeds):
        try:
            prof, ang = extract_profile(v_ref, seed.centroid_px, cfg.half_len_px, cfg.section_width_px,
                                        cfg.angle_step_deg)
        except SectionOutOfBounds as exc:
            warnings.warn(f"section {sid} dropped: {exc}", RuntimeWarning)
            dropped.append((sid, str(exc)))
            continue
        fit = fit_poiseuille(prof, wall_fraction=cfg.wall_fraction)
        if not fit.valid:
            warnings.warn(f"section {sid} dropped: no valid Poiseuille fit on the mean map", RuntimeWarning)
            dropped.append((sid, "invalid reference fit"))
            continue
        refs.append(make_section(prof, fit, seed.centroid_px, ang, cfg.section_width_px, scale,
                                 cfg.mean_velocity, -1, sid))
    if not refs:
        raise DataError("no usable artery section; adjust the circle or the artery mask")

    delta_f = np.zeros((n_win, h, w), dtype=np.float32)
    velocity = np.zeros((n_win, h, w), dtype=np.float32)
    sat = np.zeros(n_win)
    fallbacks = np.zeros(n_win, dtype=int)
    window_sections = []
    for i in range(n_win):
        d, est = moment_excess(m2_series[i])
        fallbacks[i] = est.fallback_count
        top = None if top_fraction_series is None else np.asarray(top_fraction_series[i])
        bmap = differential_broadening(m2_series[i], est.background, mask, top,
                                       window_cfg.saturation_fraction)
        sat[i] = bmap.saturation_flag[mask].mean() if mask.any() else 0.0
        df = signed_sqrt(d)
        vmap = k * df
        delta_f[i] = df
        velocity[i] = vmap
        secs = []
        for ref in refs:
            r, x0 = ref.fitted_radius_px, ref.center_offset_px
            if cfg.window_fit == "moment":
                pd = _section_profile(d, ref.center_px, cfg, ref.orientation_deg)
                a, rms = fit_moment_amplitude(pd, r, x0)
                vmax = k * float(signed_sqrt(a)) if np.isfinite(a) else 0.0
                prof = k * signed_sqrt(pd)
                fit = PoiseuilleFit(vmax, r, x0, k * math.sqrt(rms) if np.isfinite(rms) else rms,
                                    bool(vmax > 0))
            else:
                prof = _section_profile(vmap, ref.center_px, cfg, ref.orientation_deg)
                if cfg.window_fit == "velocity":
                    fit = fit_poiseuille(prof, radius_px=r, center_px=x0)
                else:
                    fit = fit_poiseuille(prof, wall_fraction=cfg.wall_fraction)
            secs.append(make_section(prof, fit, ref.center_px, ref.orientation_deg, cfg.section_width_px,
                                     scale, cfg.mean_velocity, i, ref.section_id))
        window_sections.append(secs)

    if fallbacks.any():
        warnings.warn(f"background ring empty for up to {fallbacks.max()} artery pixels per window; "
                      "nearest non-artery pixel used", RuntimeWarning)
    result = total_flow_series(window_sections, times_s, scale, cfg.smoothing_windows)
    phases = None
    if n_win >= 2:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            phases = systole_diastole_profiles(window_sections, result.smoothed_series)
    return FlowAnalysis(result=result, window_sections=window_sections, reference_sections=refs,
                        phase_profiles=phases, delta_f=delta_f, velocity=velocity,
                        saturated_fraction=sat, background_fallbacks=fallbacks,
                        dropped_sections=dropped, seeds=seeds)
