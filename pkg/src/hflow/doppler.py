"""
Doppler spectral analysis of hologram windows.

Windows of ``window_len`` frames are clutter-filtered by truncated SVD of
their Casorati (space x time) matrix, apodized, Fourier transformed along
time, and reduced to band-limited spectral moments: the power Doppler
image M0 and the normalized second moment M2.  The signed differential
broadening between artery pixels and their neighborhood turns into a
velocity through ``v = wavelength * delta_f / NA``.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.fft
import scipy.signal
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError, NumericError
from .optics import OpticalParams

logger = logging.getLogger(__name__)

APODIZATIONS = ("none", "hann")


@dataclass(frozen=True)
class SpectralWindowConfig:
    window_len: int = 512
    hop: int = 256
    svd_remove: int = 8
    band_low_hz: float = 6000.0
    band_high_hz: float = 16500.0
    apodization: str = "hann"
    ring_inner_px: int = 3
    ring_outer_px: int = 9
    saturation_fraction: float = 0.05

    def __post_init__(self):
        if not 0 < self.hop <= self.window_len:
            raise ConfigError(f"need 0 < hop <= window_len, got hop={self.hop}, window_len={self.window_len}")
        if not 0 <= self.svd_remove < self.window_len:
            raise ConfigError(f"svd_remove must lie in [0, window_len), got {self.svd_remove}")
        if not 0 <= self.band_low_hz < self.band_high_hz:
            raise ConfigError("need 0 <= band_low_hz < band_high_hz")
        if self.apodization not in APODIZATIONS:
            raise ConfigError(f"apodization must be one of {APODIZATIONS}")
        if not 0 <= self.ring_inner_px < self.ring_outer_px:
            raise ConfigError("need 0 <= ring_inner_px < ring_outer_px")
        if not 0 < self.saturation_fraction <= 1:
            raise ConfigError("saturation_fraction must lie in (0, 1]")

    def check_rate(self, frame_rate_hz: float) -> None:
        if self.band_high_hz > frame_rate_hz / 2:
            raise ConfigError(
                f"band_high_hz={self.band_high_hz} exceeds Nyquist ({frame_rate_hz / 2} Hz)"
            )


@dataclass
class MomentMaps:
    m0: np.ndarray
    m2: np.ndarray            # NaN where in-band power is zero
    window_index: int
    window_start_frame: int
    top_fraction: np.ndarray | None = None

    @property
    def m2_defined(self) -> np.ndarray:
        return np.isfinite(self.m2)


@dataclass
class BroadeningMap:
    delta_f: np.ndarray
    saturation_flag: np.ndarray
    valid: np.ndarray


@dataclass
class VelocityMap:
    v: np.ndarray


@dataclass
class BackgroundEstimate:
    background: np.ndarray     # NaN off the artery mask
    fallback_count: int
    fallback_mask: np.ndarray


def window_starts(n_frames: int, cfg: SpectralWindowConfig) -> np.ndarray:
    """First frame of every full analysis window."""
    if n_frames < cfg.window_len:
        return np.zeros(0, dtype=int)
    return np.arange(0, n_frames - cfg.window_len + 1, cfg.hop)


def doppler_frequencies(n: int, frame_rate_hz: float) -> np.ndarray:
    """DFT bin frequencies in natural FFT order, spanning (-fs/2, fs/2]."""
    freqs = scipy.fft.fftfreq(n, d=1.0 / frame_rate_hz)
    if n % 2 == 0:
        freqs[n // 2] = frame_rate_hz / 2
    return freqs


def apodization_window(n: int, kind: str) -> np.ndarray:
    if kind == "none":
        return np.ones(n)
    if kind == "hann":
        return scipy.signal.get_window("hann", n, fftbins=True)
    raise ConfigError(f"unknown apodization {kind!r}")


def _casorati(window: np.ndarray) -> np.ndarray:
    return window.reshape(window.shape[0], -1).T


def _leading_right_vectors(gram: np.ndarray, n_remove: int, window_index=None) -> np.ndarray:
    try:
        evals, evecs = np.linalg.eigh(gram)
    except np.linalg.LinAlgError as exc:
        where = "" if window_index is None else f" in window {window_index}"
        raise NumericError(f"SVD did not converge{where}: {exc}") from exc
    # eigh is ascending; a reversed view would push matmul off the BLAS path
    return np.ascontiguousarray(evecs[:, ::-1][:, :n_remove])


def svd_clutter_filter(window: np.ndarray, n_remove: int, window_index: int | None = None) -> np.ndarray:
    """
    Remove the ``n_remove`` strongest singular components of a window.

    The window ``(T, H, W)`` is flattened into its Casorati matrix C of
    shape ``(H*W, T)``.  Right singular vectors are the eigenvectors of the
    Gram matrix C^H C; the leading ones span the quasi-static clutter and
    are projected out: ``C - C V V^H``.
    """
    window = np.asarray(window)
    t = window.shape[0]
    if t < 2:
        raise DataError("window needs at least 2 frames")
    if not 0 <= n_remove < t:
        raise ConfigError(f"n_remove must lie in [0, {t}), got {n_remove}")
    if n_remove == 0:
        return window.copy()
    cas = _casorati(window)
    v = _leading_right_vectors(cas.conj().T @ cas, n_remove, window_index)
    filtered = cas - (cas @ v) @ v.conj().T
    return filtered.T.reshape(window.shape)


def stft_power_spectra(window: np.ndarray, cfg: SpectralWindowConfig, frame_rate_hz: float,
                       workers: int | None = None):
    """
    Per-pixel power spectral density of one window.

    The time axis (axis 0) is apodized and transformed.  Normalization is
    ``|DFT(w x)|^2 / (N * sum(w^2))`` so a unit-amplitude tone carries unit
    total power whatever the apodization.

    Returns
    -------
    spectra : ndarray, shape (N, ...)
        PSD per frequency bin, natural FFT order.
    freqs : ndarray, shape (N,)
        Bin frequencies in (-fs/2, fs/2].
    """
    window = np.asarray(window)
    n = window.shape[0]
    if n != cfg.window_len:
        raise DataError(f"window has {n} frames, config expects {cfg.window_len}")
    w = apodization_window(n, cfg.apodization)
    shape = (n,) + (1,) * (window.ndim - 1)
    spec = scipy.fft.fft(window * w.reshape(shape).astype(window.real.dtype), axis=0, workers=workers)
    psd = spec.real**2 + spec.imag**2
    psd /= n * np.sum(w**2)
    return psd, doppler_frequencies(n, frame_rate_hz)


def band_mask(freqs: np.ndarray, cfg: SpectralWindowConfig) -> np.ndarray:
    af = np.abs(freqs)
    return (af >= cfg.band_low_hz) & (af <= cfg.band_high_hz)


def power_doppler(spectra: np.ndarray, freqs: np.ndarray, cfg: SpectralWindowConfig) -> np.ndarray:
    """M0: in-band power, both frequency signs combined."""
    sel = band_mask(freqs, cfg)
    return spectra[sel].sum(axis=0)


def spectral_moment2(spectra: np.ndarray, freqs: np.ndarray, cfg: SpectralWindowConfig) -> np.ndarray:
    """M2 = sum(f^2 S) / sum(S) over the band; NaN where the band is empty."""
    sel = band_mask(freqs, cfg)
    s = spectra[sel]
    f2 = freqs[sel] ** 2
    num = np.tensordot(f2, s, axes=(0, 0))
    den = s.sum(axis=0)
    out = np.full(den.shape, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def top_bin_fraction(spectra: np.ndarray, freqs: np.ndarray, cfg: SpectralWindowConfig) -> np.ndarray:
    """Share of in-band power held by the highest-|f| band bins (Nyquist clipping sentinel)."""
    sel = band_mask(freqs, cfg)
    af = np.abs(freqs)
    if not sel.any():
        return np.zeros(spectra.shape[1:])
    top = sel & (af == af[sel].max())
    den = spectra[sel].sum(axis=0)
    num = spectra[top].sum(axis=0)
    out = np.zeros(den.shape)
    np.divide(num, den, out=out, where=den > 0)
    return out


def analyze_window(window: np.ndarray, cfg: SpectralWindowConfig, frame_rate_hz: float,
                   window_index: int = 0, window_start: int = 0, threads: int = 1,
                   chunk_px: int = 8192) -> MomentMaps:
    """
    Clutter filter + STFT + moments for one ``(T, H, W)`` hologram window.

    Pixels are processed in fixed-size chunks; the Gram matrix is summed
    over chunks in a fixed order, so the result does not depend on
    ``threads``.
    """
    t, h, w = window.shape
    cfg.check_rate(frame_rate_hz)
    if t != cfg.window_len:
        raise DataError(f"window has {t} frames, config expects {cfg.window_len}")
    cas = window.reshape(t, h * w)
    bounds = [(i, min(i + chunk_px, h * w)) for i in range(0, h * w, chunk_px)]

    def run(fn):
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return list(pool.map(fn, bounds))
        return [fn(b) for b in bounds]

    v = None
    if cfg.svd_remove > 0:
        grams = run(lambda b: cas[:, b[0]:b[1]].conj() @ cas[:, b[0]:b[1]].T)
        gram = grams[0]
        for g in grams[1:]:
            gram = gram + g
        v = _leading_right_vectors(gram, cfg.svd_remove, window_index)

    def moments(b):
        block = cas[:, b[0]:b[1]]
        if v is not None:
            # time-major layout: x - V (V^H x) per pixel column
            block = block - v.conj() @ (v.T @ block)
        spectra, freqs = stft_power_spectra(block, cfg, frame_rate_hz)
        return (power_doppler(spectra, freqs, cfg), spectral_moment2(spectra, freqs, cfg),
                top_bin_fraction(spectra, freqs, cfg))

    parts = run(moments)
    m0 = np.concatenate([p[0] for p in parts]).reshape(h, w)
    m2 = np.concatenate([p[1] for p in parts]).reshape(h, w)
    top = np.concatenate([p[2] for p in parts]).reshape(h, w)
    return MomentMaps(m0=m0, m2=m2, window_index=window_index,
                      window_start_frame=int(window_start), top_fraction=top)


class BackgroundNeighborhood:
    """
    Ring neighborhoods of artery pixels, reusable across windows.

    The ring is the dilation of the artery mask by ``outer`` px minus its
    dilation by ``inner`` px (Euclidean discs), artery pixels excluded.  An
    artery pixel's neighborhood is the part of the ring within
    ``d_edge + outer`` px of it, with ``d_edge`` its distance to the
    nearest non-artery pixel, so wide vessels reach their own ring.
    """

    def __init__(self, artery_mask: np.ndarray, inner: int, outer: int):
        mask = np.asarray(artery_mask, dtype=bool)
        if not 0 <= inner < outer:
            raise ConfigError("need 0 <= ring_inner_px < ring_outer_px")
        self.mask = mask
        dist_out = ndimage.distance_transform_edt(~mask)
        ring = (dist_out > inner) & (dist_out <= outer)
        self.ring = ring
        self.artery_idx = np.flatnonzero(mask)
        self.ring_idx = np.flatnonzero(ring)
        d_edge = ndimage.distance_transform_edt(mask)
        h, w = mask.shape
        ay, ax = np.divmod(self.artery_idx, w)
        ry, rx = np.divmod(self.ring_idx, w)
        self.neighbors: list[np.ndarray] = []
        if self.ring_idx.size:
            tree = cKDTree(np.column_stack([ry, rx]))
            radii = d_edge.ravel()[self.artery_idx] + outer
            for p, r in zip(np.column_stack([ay, ax]), radii):
                hits = tree.query_ball_point(p, r)
                self.neighbors.append(self.ring_idx[np.sort(np.asarray(hits, dtype=int))])
        else:
            self.neighbors = [np.zeros(0, dtype=int) for _ in self.artery_idx]
        # padded gather table; index h*w points at a NaN sentinel
        width = max((len(nb) for nb in self.neighbors), default=0)
        self.table = np.full((len(self.artery_idx), max(width, 1)), h * w, dtype=np.intp)
        for i, nb in enumerate(self.neighbors):
            self.table[i, :len(nb)] = nb

    def estimate(self, m2: np.ndarray) -> BackgroundEstimate:
        m2 = np.asarray(m2, dtype=float)
        if m2.shape != self.mask.shape:
            raise DataError(f"M2 map {m2.shape} and artery mask {self.mask.shape} differ in shape")
        n = len(self.artery_idx)
        flat = np.append(m2.ravel(), np.nan)
        table = flat[self.table]
        with np.errstate(all="ignore"):
            has_any = np.isfinite(table).any(axis=1)
            med = np.full(n, np.nan)
            if has_any.any():
                med[has_any] = np.nanmedian(table[has_any], axis=1)
        out = np.full(m2.size, np.nan)
        out[self.artery_idx] = med
        fallback = np.zeros(m2.shape, dtype=bool)
        missing = self.artery_idx[~has_any]
        if missing.size:
            usable = ~self.mask & np.isfinite(m2)
            if not usable.any():
                raise DataError("no valid non-artery pixel available for background estimation")
            _, (iy, ix) = ndimage.distance_transform_edt(~usable, return_indices=True)
            out[missing] = m2[iy.ravel()[missing], ix.ravel()[missing]]
            fallback.ravel()[missing] = True
            logger.debug("background fell back to nearest pixel for %d artery pixels", missing.size)
        return BackgroundEstimate(out.reshape(m2.shape), int(missing.size), fallback)


def estimate_background(m2: np.ndarray, artery_mask: np.ndarray, ring_inner_px: int = 3,
                        ring_outer_px: int = 9) -> BackgroundEstimate:
    """Median M2 of each artery pixel's ring neighborhood (see BackgroundNeighborhood)."""
    return BackgroundNeighborhood(artery_mask, ring_inner_px, ring_outer_px).estimate(m2)


def signed_sqrt(x):
    return np.sign(x) * np.sqrt(np.abs(x))


def differential_broadening(m2: np.ndarray, background: np.ndarray, artery_mask: np.ndarray,
                            top_fraction: np.ndarray | None = None,
                            saturation_fraction: float = 0.05) -> BroadeningMap:
    """
    Signed broadening ``sign(M2 - M2_bg) * sqrt(|M2 - M2_bg|)`` on artery pixels.

    Non-artery pixels and pixels with undefined M2 or background get zero
    and ``valid = False``.
    """
    m2 = np.asarray(m2, dtype=float)
    background = np.asarray(background, dtype=float)
    mask = np.asarray(artery_mask, dtype=bool)
    valid = mask & np.isfinite(m2) & np.isfinite(background)
    delta_f = np.zeros(m2.shape)
    delta_f[valid] = signed_sqrt(m2[valid] - background[valid])
    if top_fraction is None:
        sat = np.zeros(m2.shape, dtype=bool)
    else:
        sat = mask & (np.asarray(top_fraction) > saturation_fraction)
    return BroadeningMap(delta_f=delta_f, saturation_flag=sat, valid=valid)


def velocity_from_broadening(bmap: BroadeningMap | np.ndarray, params: OpticalParams) -> VelocityMap:
    """RMS velocity (m/s) from broadening (Hz): ``v = wavelength * delta_f / NA``."""
    delta_f = bmap.delta_f if isinstance(bmap, BroadeningMap) else np.asarray(bmap, dtype=float)
    return VelocityMap(v=params.wavelength_m * delta_f / params.numerical_aperture)


def pca_preview(stack16: np.ndarray) -> np.ndarray:
    """
    Preview image from 16 consecutive holograms.

    The first principal component of the Casorati matrix is removed and
    the per-pixel temporal energy of the residual is returned.
    """
    stack16 = np.asarray(stack16)
    if stack16.shape[0] != 16:
        raise DataError(f"preview needs exactly 16 frames, got {stack16.shape[0]}")
    residual = svd_clutter_filter(stack16, 1)
    return np.sum(np.abs(residual) ** 2, axis=0)
