"""
Synthetic interferogram stacks with known ground truth.

Every pixel scatters a circular complex Gaussian process whose power
spectrum is a zero-mean Gaussian.  Background pixels use the diffuse
background width; vessel pixels use a wider one, solved so that the
band-limited normalized second moment exceeds the background's by
exactly ``delta_f**2``.  ``delta_f`` follows a parabolic lumen profile
and an optional sinusoidal pulsation.  Frames are
``|E_ref + E_scattered|**2`` plus camera noise, quantized to 16 bits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
from scipy import optimize, special

from .doppler import SpectralWindowConfig, velocity_from_broadening, window_starts
from .errors import ConfigError
from .flow import M3S_TO_UL_MIN, section_volume_rate
from .optics import InterferogramStack, OpticalParams, fresnel_propagate, reconstruction_pitch

SQRT_HALF_PI = math.sqrt(math.pi / 2)


@dataclass(frozen=True)
class VesselSpec:
    centerline: tuple                 # ((x0, y0), (x1, y1), ...)
    radius_px: float
    peak_delta_f_hz: float
    pulsatility: float = 0.0          # amplitude fraction of the peak broadening
    cardiac_hz: float = 1.2
    phase_rad: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "centerline", tuple(tuple(map(float, p)) for p in self.centerline))
        if len(self.centerline) < 2:
            raise ConfigError("a vessel centerline needs at least 2 points")
        if self.radius_px <= 0 or self.peak_delta_f_hz <= 0:
            raise ConfigError("vessel radius and peak_delta_f must be positive")
        if not 0 <= self.pulsatility < 1:
            raise ConfigError("pulsatility must lie in [0, 1)")

    def peak_at(self, t):
        return self.peak_delta_f_hz * (
            1.0 + self.pulsatility * np.sin(2 * np.pi * self.cardiac_hz * np.asarray(t) + self.phase_rad))


@dataclass(frozen=True)
class PointScatterer:
    x_px: int
    y_px: int
    amplitude: float = 1.0


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 64
    height: int = 64
    frame_count: int = 2048
    params: OpticalParams = field(default_factory=OpticalParams)
    background_sigma_hz: float = 3000.0
    vessels: tuple = ()
    reference_beam_amplitude: float = 128.0
    scatter_amplitude: float = 8.0
    noise_floor: float = 0.0
    rng_seed: int = 0
    band: SpectralWindowConfig = field(default_factory=SpectralWindowConfig)
    papilla_center_px: tuple | None = None
    papilla_diameter_px: float = 120.0
    focus_distance_m: float = 0.0
    point_scatterers: tuple = ()
    block_len: int = 256

    def __post_init__(self):
        object.__setattr__(self, "vessels", tuple(
            v if isinstance(v, VesselSpec) else VesselSpec(**v) for v in self.vessels))
        object.__setattr__(self, "point_scatterers", tuple(
            p if isinstance(p, PointScatterer) else PointScatterer(**p) for p in self.point_scatterers))
        if self.width < 16 or self.height < 16 or self.frame_count < 1:
            raise ConfigError("phantom needs width, height >= 16 and frame_count >= 1")
        fs = self.params.frame_rate_hz
        if not 0 < self.background_sigma_hz < fs / 2:
            raise ConfigError("background_sigma_hz must lie in (0, fs/2)")
        if self.reference_beam_amplitude < 0 or self.scatter_amplitude < 0 or self.noise_floor < 0:
            raise ConfigError("amplitudes and noise floor must be non-negative")
        if self.papilla_diameter_px <= 0:
            raise ConfigError("papilla_diameter_px must be positive")
        if self.block_len < 4 or self.block_len % 2:
            raise ConfigError("block_len must be an even number >= 4")
        self.band.check_rate(fs)

    @property
    def pixel_scale_m_per_px(self) -> float:
        return self.params.papilla_diameter_m / self.papilla_diameter_px


@dataclass
class PhantomTruth:
    artery_raster: np.ndarray
    delta_f_field: np.ndarray         # (windows, H, W), Hz
    velocity_field: np.ndarray        # (windows, H, W), m/s
    section_flows: np.ndarray         # (vessels, windows), uL/min
    total_flow_series: np.ndarray     # (windows,), uL/min
    times_s: np.ndarray
    window_starts: np.ndarray
    pixel_scale_m_per_px: float
    papilla_diameter_px: float
    papilla_raster: np.ndarray
    sigma_field: np.ndarray           # static Doppler width at peak broadening, Hz
    background_m2: float
    vessel_sigma_hz: tuple            # solved width at each vessel's peak broadening

    @property
    def resistivity_index(self) -> float:
        s = self.total_flow_series
        return float((s.max() - s.min()) / s.max()) if s.size and s.max() > 0 else float("nan")


def band_m2_gaussian(sigma_hz, band_low_hz: float, band_high_hz: float):
    """
    Band-limited normalized second moment of a zero-mean Gaussian PSD.

    ``int f^2 G / int G`` over ``band_low <= |f| <= band_high`` in closed
    form, written with scaled complementary error functions so narrow
    spectra far below the band do not underflow.
    """
    s = np.asarray(sigma_hz, dtype=float)
    a, b = float(band_low_hz), float(band_high_hz)
    al, be = a / (s * math.sqrt(2)), b / (s * math.sqrt(2))
    # int_a^b exp(-f^2/2s^2) df = s sqrt(pi/2) exp(-al^2) [erfcx(al) - erfcx(be) exp(al^2 - be^2)]
    core = special.erfcx(al) - special.erfcx(be) * np.exp(al**2 - be**2)
    # boundary term [f g]_b^a relative to the same exp(-al^2) factor
    edge = a - b * np.exp(al**2 - be**2)
    with np.errstate(all="ignore"):
        exact = s**2 * (1.0 + edge / (s * SQRT_HALF_PI * core))
    # nearly flat spectra: the closed form cancels; expand exp(-f^2/2s^2) to first order
    inv = 1.0 / (2.0 * s**2)
    num = (b**3 - a**3) / 3.0 - inv * (b**5 - a**5) / 5.0
    den = (b - a) - inv * (b**3 - a**3) / 3.0
    out = np.where(b < 1e-2 * s, num / den, exact)
    return out if out.ndim else float(out)


def flat_band_m2(band_low_hz: float, band_high_hz: float) -> float:
    a, b = band_low_hz, band_high_hz
    return (a * a + a * b + b * b) / 3.0


class SigmaSolver:
    """Doppler width whose band M2 exceeds the background's by ``delta_f**2``."""

    def __init__(self, background_sigma_hz: float, band: SpectralWindowConfig):
        self.sigma_bg = background_sigma_hz
        self.low, self.high = band.band_low_hz, band.band_high_hz
        self.m2_bg = float(band_m2_gaussian(background_sigma_hz, self.low, self.high))
        self.limit = math.sqrt(max(flat_band_m2(self.low, self.high) - self.m2_bg, 0.0))
        self._cache: dict[float, float] = {}

    def solve(self, delta_f_hz: float) -> float:
        if delta_f_hz <= 0:
            return self.sigma_bg
        if delta_f_hz >= self.limit:
            raise ConfigError(
                f"delta_f={delta_f_hz:.1f} Hz is not reachable in the "
                f"{self.low:g}-{self.high:g} Hz band: broadening must stay below "
                f"{self.limit:.1f} Hz for background sigma {self.sigma_bg:g} Hz")
        key = round(float(delta_f_hz), 6)
        if key not in self._cache:
            target = self.m2_bg + delta_f_hz**2
            f = lambda s: float(band_m2_gaussian(s, self.low, self.high)) - target
            hi = 2.0 * self.sigma_bg
            while f(hi) < 0 and hi < 1e7:
                hi *= 2.0
            self._cache[key] = optimize.bisect(f, self.sigma_bg, hi, xtol=1e-9, maxiter=500)
        return self._cache[key]

    def table(self, n: int = 20000):
        """
        Monotone (delta_f, sigma) samples for interpolation.

        Band M2 is increasing in sigma, so a dense geometric sigma grid
        inverts it without a root solve per pixel.
        """
        sig = self.sigma_bg * np.geomspace(1.0, 1e6 / self.sigma_bg, n)
        m2 = band_m2_gaussian(sig, self.low, self.high)
        df = np.sqrt(np.maximum(m2 - self.m2_bg, 0.0))
        keep = np.concatenate([[True], np.diff(df) > 0])
        return df[keep], sig[keep]


def _gaussian_psd(sigma_hz, freqs):
    sigma = np.asarray(sigma_hz, dtype=float)[..., None]
    g = np.exp(-(freqs**2) / (2 * sigma**2))
    return g / g.mean(axis=-1, keepdims=True)


def gaussian_doppler_series(sigma_hz: float, n_frames: int, fs: float, seed) -> np.ndarray:
    """
    Circular complex Gaussian series with Gaussian PSD of width ``sigma_hz``.

    White noise is shaped in the frequency domain (PSD truncated at
    Nyquist); the result has unit average power.
    """
    if not 0 < sigma_hz < fs / 2:
        raise ConfigError("need 0 < sigma_hz < fs/2")
    rng = np.random.default_rng(seed)
    return _shaped_series(rng, np.asarray(sigma_hz), n_frames, fs)


def _white(rng, n, out=None):
    """Unit-power circular complex white noise (interleaved re/im draws)."""
    if out is None:
        out = np.empty(n, dtype=complex)
    rng.standard_normal(out=out.view(np.float64))
    out *= 1 / math.sqrt(2)
    return out


def _shaped_series(rng, sigma, n, fs):
    """Rows of stationary shaped noise, one per entry of ``sigma``."""
    sigma = np.atleast_1d(sigma)
    white = np.stack([_white(rng, n) for _ in range(sigma.size)])
    psd = _gaussian_psd(sigma, scipy.fft.fftfreq(n, 1.0 / fs))
    out = scipy.fft.ifft(scipy.fft.fft(white, axis=-1) * np.sqrt(psd), axis=-1)
    return out[0] if out.shape[0] == 1 else out


def _modulated_series(rng, sigma_of_t, n, fs, block):
    """
    Nonstationary series whose local PSD width follows ``sigma_of_t``.

    Independent stationary blocks of ``block`` frames are cross-faded with
    50%-overlapping sine windows (power complementary), so the local PSD
    is the window-weighted mixture of neighboring block spectra.
    """
    hop = block // 2
    n_blocks = -(-(n + hop) // hop)
    starts = np.arange(n_blocks) * hop - hop
    centers = np.clip(starts + hop, 0, n - 1)
    sig = sigma_of_t(centers)
    blocks = _shaped_series(rng, sig, block, fs).reshape(n_blocks, block)
    win = np.sin(np.pi * (np.arange(block) + 0.5) / block)
    out = np.zeros(n + 2 * block, dtype=complex)
    for k, s0 in enumerate(starts):
        out[s0 + block:s0 + 2 * block] += win * blocks[k]
    return out[block:block + n]


def _segment_distance(xx, yy, p, q):
    px, py = p
    qx, qy = q
    dx, dy = qx - px, qy - py
    L2 = dx * dx + dy * dy
    t = np.clip(((xx - px) * dx + (yy - py) * dy) / L2, 0.0, 1.0) if L2 > 0 else 0.0
    return np.hypot(xx - (px + t * dx), yy - (py + t * dy))


def vessel_distance(vessel: VesselSpec, shape) -> np.ndarray:
    yy, xx = np.indices(shape, dtype=float)
    pts = vessel.centerline
    return np.min([_segment_distance(xx, yy, pts[i], pts[i + 1]) for i in range(len(pts) - 1)], axis=0)


def lumen_profile(vessel: VesselSpec, shape) -> np.ndarray:
    """Parabolic lumen weight 1 - (d/R)^2 inside the vessel, 0 outside."""
    d = vessel_distance(vessel, shape)
    return np.clip(1.0 - (d / vessel.radius_px) ** 2, 0.0, None)


def pixel_seed(rng_seed: int, x: int, y: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(rng_seed), spawn_key=(int(y), int(x)))


def _geometry(spec: PhantomSpec):
    """Owning vessel index (-1 outside) and lumen weight per pixel; overlaps keep the larger broadening."""
    shape = (spec.height, spec.width)
    owner = np.full(shape, -1)
    weight = np.zeros(shape)
    best = np.zeros(shape)
    for i, v in enumerate(spec.vessels):
        lum = lumen_profile(v, shape)
        cand = lum * v.peak_delta_f_hz
        better = (lum > 0) & (cand > best)
        owner[better] = i
        weight[better] = lum[better]
        best[better] = cand[better]
    return owner, weight


def truth_delta_f(spec: PhantomSpec, owner, weight, times) -> np.ndarray:
    """Broadening (Hz) per pixel at each time in ``times``."""
    out = np.zeros((len(times),) + owner.shape)
    for i, v in enumerate(spec.vessels):
        sel = owner == i
        out[:, sel] = np.asarray(v.peak_at(times))[:, None] * weight[sel][None, :]
    return out


def generate_phantom(spec: PhantomSpec, window_cfg: SpectralWindowConfig | None = None):
    """
    Build the interferogram stack and its ground truth.

    Parameters
    ----------
    spec : PhantomSpec
    window_cfg : SpectralWindowConfig, optional
        Analysis windowing used to sample the truth; defaults to ``spec.band``.

    Returns
    -------
    (InterferogramStack, PhantomTruth)
    """
    window_cfg = window_cfg or spec.band
    fs = spec.params.frame_rate_hz
    n = spec.frame_count
    h, w = spec.height, spec.width
    solver = SigmaSolver(spec.background_sigma_hz, spec.band)
    for v in spec.vessels:
        solver.solve(v.peak_delta_f_hz * (1 + v.pulsatility))   # raises past the band limit
    df_tab, sig_tab = solver.table()

    def sigma_of(df):
        return np.interp(df, df_tab, sig_tab)

    owner, weight = _geometry(spec)

    e_ref = spec.reference_beam_amplitude
    amp = spec.scatter_amplitude
    noise = spec.noise_floor * e_ref**2
    defocus = spec.focus_distance_m != 0
    frames = np.empty((n, h, w), dtype=np.uint16)
    field_rows = np.empty((n, h, w), dtype=complex) if defocus else None

    freqs = scipy.fft.fftfreq(n, 1.0 / fs)
    static_sigma = np.full((h, w), spec.background_sigma_hz)
    for i, v in enumerate(spec.vessels):
        sel = owner == i
        static_sigma[sel] = sigma_of(v.peak_delta_f_hz * weight[sel])
    for y in range(h):
        white = np.empty((w, n), dtype=complex)
        modulated = {}
        for x in range(w):
            rng = np.random.default_rng(pixel_seed(spec.rng_seed, x, y))
            i = owner[y, x]
            if i >= 0 and spec.vessels[i].pulsatility > 0:
                v, wgt = spec.vessels[i], weight[y, x]
                modulated[x] = _modulated_series(
                    rng, lambda t, v=v, wgt=wgt: sigma_of(v.peak_at(t / fs) * wgt), n, fs, spec.block_len)
            else:
                _white(rng, n, out=white[x])
        # pixels sharing a width share one PSD
        uniq, inv = np.unique(static_sigma[y], return_inverse=True)
        shape = np.sqrt(_gaussian_psd(uniq, freqs))[inv]
        row = scipy.fft.ifft(scipy.fft.fft(white, axis=-1) * shape, axis=-1)
        for x, series in modulated.items():
            row[x] = series
        e_s = amp * row.T
        if defocus:
            field_rows[:, y, :] = e_s
            continue
        frames[:, y, :] = _quantize(e_ref, e_s, noise, spec.rng_seed, y)

    if defocus:
        cam = fresnel_propagate(field_rows, spec.params, -spec.focus_distance_m) + _point_field_camera(spec)
        for y in range(h):
            frames[:, y, :] = _quantize(e_ref, cam[:, y, :], noise, spec.rng_seed, y)
    elif spec.point_scatterers:
        raise ConfigError("point scatterers need a non-zero focus_distance_m")

    stack = InterferogramStack(frames=frames, params=spec.params)
    truth = _truth(spec, owner, weight, window_cfg, solver, static_sigma)
    return stack, truth


def _point_field_camera(spec: PhantomSpec) -> np.ndarray:
    """
    Camera-plane field of static point scatterers, in closed form.

    A point at reconstruction-plane pixel (x, y) seen through the
    single-FFT Fresnel transform at ``focus_distance_m`` is a sampled
    chirp times a tilted plane wave; rendering at that distance refocuses
    it onto the same pixel.
    """
    h, w = spec.height, spec.width
    z = spec.focus_distance_m
    lam = spec.params.wavelength_m
    field = np.zeros((h, w), dtype=complex)
    cam_y = (np.arange(h) - h // 2) * spec.params.pixel_pitch_m
    cam_x = (np.arange(w) - w // 2) * spec.params.pixel_pitch_m
    uy = np.arange(h) - h // 2
    ux = np.arange(w) - w // 2
    k = 2 * np.pi / lam
    sign = 1.0 if z > 0 else -1.0
    # inverse of the forward transform: conj chirps, inverse kernel, conj global phase
    glob = np.conj(np.exp(1j * k * z) * -1j * sign) / math.sqrt(h * w)
    chirp = np.exp(-1j * np.pi / (lam * z) * (cam_y[:, None] ** 2 + cam_x[None, :] ** 2))
    for p in spec.point_scatterers:
        my, mx = p.y_px - h // 2, p.x_px - w // 2
        far_y = my * reconstruction_pitch(h, spec.params, z)
        far_x = mx * reconstruction_pitch(w, spec.params, z)
        q_far = np.exp(1j * np.pi / (lam * z) * (far_y**2 + far_x**2))
        tilt = np.exp(2j * np.pi * sign * (uy[:, None] * my / h + ux[None, :] * mx / w))
        field += p.amplitude * glob * np.conj(q_far) * chirp * tilt
    return field[None]


def _quantize(e_ref, e_s, noise, seed, row):
    inten = np.abs(e_ref + e_s) ** 2
    if noise > 0:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(row), 1 << 20)))
        inten = inten + noise * rng.standard_normal(inten.shape)
    return np.clip(np.rint(inten), 0, 65535).astype(np.uint16)


def _truth(spec: PhantomSpec, owner, weight, window_cfg, solver, sigma) -> PhantomTruth:
    fs = spec.params.frame_rate_hz
    starts = window_starts(spec.frame_count, window_cfg)
    times = (starts + window_cfg.window_len / 2) / fs
    df = truth_delta_f(spec, owner, weight, times)
    vel = velocity_from_broadening(df, spec.params).v
    scale = spec.pixel_scale_m_per_px
    flows = np.zeros((len(spec.vessels), times.size))
    for i, v in enumerate(spec.vessels):
        peaks = velocity_from_broadening(np.asarray(v.peak_at(times)), spec.params).v
        flows[i] = [section_volume_rate(p, v.radius_px, scale) * M3S_TO_UL_MIN for p in peaks]
    shape = (spec.height, spec.width)
    yy, xx = np.indices(shape)
    if spec.papilla_center_px is None:
        pc = ((spec.width - 1) / 2, (spec.height - 1) / 2)
    else:
        pc = spec.papilla_center_px
    papilla = (xx - pc[0]) ** 2 + (yy - pc[1]) ** 2 <= (spec.papilla_diameter_px / 2) ** 2
    return PhantomTruth(
        artery_raster=owner >= 0, delta_f_field=df, velocity_field=vel, section_flows=flows,
        total_flow_series=flows.sum(axis=0), times_s=times, window_starts=starts,
        pixel_scale_m_per_px=scale, papilla_diameter_px=spec.papilla_diameter_px,
        papilla_raster=papilla, sigma_field=sigma, background_m2=solver.m2_bg,
        vessel_sigma_hz=tuple(solver.solve(v.peak_delta_f_hz) for v in spec.vessels))


def star_phantom(total_flow_ul_min: float = 30.0, n_vessels: int = 4, radius_px=4.0,
                 width: int = 64, height: int = 64, frame_count: int = 2048,
                 inner_px: float = 5.0, outer_px: float | None = None, angle_offset_deg: float = 45.0,
                 pulsatility: float = 0.0, cardiac_hz: float = 1.2, peak_time_s: float | None = None,
                 flow_shares=None, **spec_kw) -> PhantomSpec:
    """
    Straight arteries radiating from the papilla, sized for a target total flow.

    Vessel ``i`` carries ``total * share_i`` at its mean broadening; with
    Poiseuille flow ``Q = (v_max / 2) pi R^2`` that fixes its centerline
    velocity and, through ``v = wavelength * delta_f / NA``, its broadening.

    Parameters
    ----------
    radius_px : float or sequence
        One radius for all vessels or one per vessel.
    peak_time_s : float, optional
        Time of the systolic maximum; default is mid-record.
    flow_shares : sequence, optional
        Relative flow per vessel, normalized internally; default equal.
    **spec_kw
        Passed to :class:`PhantomSpec` (params, rng_seed, papilla_diameter_px, ...).
    """
    if n_vessels < 1:
        raise ConfigError("n_vessels must be >= 1")
    radii = np.broadcast_to(np.asarray(radius_px, dtype=float), (n_vessels,))
    shares = np.ones(n_vessels) if flow_shares is None else np.asarray(flow_shares, dtype=float)
    if shares.shape != (n_vessels,) or np.any(shares <= 0):
        raise ConfigError("flow_shares needs one positive entry per vessel")
    shares = shares / shares.sum()
    params = spec_kw.get("params", OpticalParams())
    papilla_px = spec_kw.get("papilla_diameter_px", 120.0)
    scale = params.papilla_diameter_m / papilla_px
    center = spec_kw.get("papilla_center_px") or ((width - 1) / 2, (height - 1) / 2)
    if outer_px is None:
        outer_px = min(width, height) / 2 - 1
    fs = params.frame_rate_hz
    if peak_time_s is None:
        peak_time_s = frame_count / fs / 2
    phase = math.pi / 2 - 2 * math.pi * cardiac_hz * peak_time_s
    vessels = []
    for i in range(n_vessels):
        q = total_flow_ul_min * shares[i] / M3S_TO_UL_MIN
        vmax = 2 * q / (math.pi * (radii[i] * scale) ** 2)
        df = vmax * params.numerical_aperture / params.wavelength_m
        a = math.radians(angle_offset_deg + 360.0 * i / n_vessels)
        p0 = (center[0] + inner_px * math.cos(a), center[1] + inner_px * math.sin(a))
        p1 = (center[0] + outer_px * math.cos(a), center[1] + outer_px * math.sin(a))
        vessels.append(VesselSpec((p0, p1), float(radii[i]), df, pulsatility, cardiac_hz, phase))
    return PhantomSpec(width=width, height=height, frame_count=frame_count, vessels=tuple(vessels),
                       **spec_kw)
