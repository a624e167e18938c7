"""
Retinal artery segmentation from power Doppler image sequences.

Flat-field correction, multiscale Frangi vesselness, temporal correlation
against the vessel-averaged power Doppler signal, manual thresholds and
connectivity-based refinement.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class SegmentationConfig:
    vessel_threshold: float = 0.2
    artery_threshold: float = 0.0
    flatfield_sigma_px: float = 32.0
    frangi_scales_px: tuple = (1.0, 2.0, 4.0, 8.0)
    frangi_beta: float = 0.5
    frangi_c: float | None = None
    min_component_px: int = 50
    connectivity: int = 8
    exclusion_center_px: tuple | None = None
    exclusion_radius_px: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "frangi_scales_px", tuple(float(s) for s in self.frangi_scales_px))
        if not self.frangi_scales_px or min(self.frangi_scales_px) <= 0:
            raise ConfigError("frangi_scales_px must be non-empty and positive")
        if self.flatfield_sigma_px <= 0 or self.frangi_beta <= 0:
            raise ConfigError("flatfield_sigma_px and frangi_beta must be positive")
        if self.frangi_c is not None and self.frangi_c <= 0:
            raise ConfigError("frangi_c must be positive")
        if not 0 <= self.vessel_threshold <= 1:
            raise ConfigError("vessel_threshold must lie in [0, 1]")
        if not -1 <= self.artery_threshold <= 1:
            raise ConfigError("artery_threshold must lie in [-1, 1]")
        if self.connectivity not in (4, 8):
            raise ConfigError("connectivity must be 4 or 8")
        if self.min_component_px < 1:
            raise ConfigError("min_component_px must be >= 1")
        if (self.exclusion_radius_px is None) != (self.exclusion_center_px is None):
            raise ConfigError("exclusion_center_px and exclusion_radius_px go together")


@dataclass
class SegmentationSet:
    flatfielded: np.ndarray
    vesselness: np.ndarray
    vessel_mask: np.ndarray
    correlation_map: np.ndarray
    artery_mask: np.ndarray
    components: np.ndarray
    zero_variance: np.ndarray | None = None


def _structure(connectivity: int) -> np.ndarray:
    return ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)


def flat_field_correct(image: np.ndarray, sigma_px: float) -> np.ndarray:
    """
    Divide out slow illumination variations, keeping the input mean.

    ``image / max(G_sigma * image, eps)`` with ``eps = 1e-12 * max(image)``,
    then rescaled so the output mean equals the input mean.
    """
    image = np.asarray(image, dtype=float)
    if sigma_px <= 0:
        raise ConfigError("sigma_px must be positive")
    if np.any(image < 0):
        raise DataError("flat-field correction expects a non-negative image")
    peak = image.max() if image.size else 0.0
    if peak == 0:
        warnings.warn("flat-field correction of an all-zero image; returned unchanged", RuntimeWarning)
        return image.copy()
    blur = ndimage.gaussian_filter(image, sigma_px, mode="reflect")
    out = image / np.maximum(blur, 1e-12 * peak)
    mean = out.mean()
    if mean > 0:
        out *= image.mean() / mean
    return out


def _gaussian_kernels(scale: float):
    """Gaussian, first- and second-derivative kernels; the derivatives sum to exactly zero."""
    radius = max(int(4.0 * scale + 0.5), 1)
    x = np.arange(-radius, radius + 1, dtype=float)
    g0 = np.exp(-(x**2) / (2 * scale**2))
    g0 /= g0.sum()
    g1 = -x / scale**2 * g0
    g2 = (x**2 / scale**4 - 1 / scale**2) * g0
    # truncation leaves a small DC response that would read flat regions as curved
    g2 -= g2.sum() * g0
    return g0, g1, g2


def hessian_eigenvalues(image: np.ndarray, scale: float):
    """Scale-normalized (gamma = 1) Hessian eigenvalues ordered so |l1| <= |l2|."""
    image = np.asarray(image, dtype=float)
    g0, g1, g2 = _gaussian_kernels(scale)

    def smooth(ky, kx):
        tmp = ndimage.convolve1d(image, ky, axis=0, mode="nearest")
        return ndimage.convolve1d(tmp, kx, axis=1, mode="nearest")

    s2 = scale**2
    hyy = smooth(g2, g0) * s2
    hxx = smooth(g0, g2) * s2
    hxy = smooth(g1, g1) * s2
    half_tr = 0.5 * (hxx + hyy)
    disc = np.sqrt((0.5 * (hxx - hyy)) ** 2 + hxy**2)
    a, b = half_tr + disc, half_tr - disc
    swap = np.abs(a) > np.abs(b)
    l1 = np.where(swap, b, a)
    l2 = np.where(swap, a, b)
    return l1, l2


def frangi_vesselness(image: np.ndarray, scales=(1.0, 2.0, 4.0, 8.0), beta: float = 0.5,
                      c: float | None = None, normalize: bool = True) -> np.ndarray:
    """
    Multiscale Frangi vesselness for bright tubular structures.

    Parameters
    ----------
    image : ndarray
        2-D image, vessels brighter than background.
    scales : sequence of float
        Gaussian scales in pixels.
    beta : float
        Blob-suppression sensitivity on R_B = l1 / l2.
    c : float, optional
        Structureness sensitivity.  Default: half the maximum Hessian
        Frobenius norm, per scale.
    normalize : bool
        Divide the result by its maximum so it lies in [0, 1].

    Returns
    -------
    ndarray
        Per-pixel maximum over scales.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise DataError("frangi_vesselness expects a 2-D image")
    if len(scales) == 0:
        raise ConfigError("scales must be non-empty")
    # Hessian entries below this are filter round-off on flat data
    floor = 1e-10 * max(float(np.abs(image).max()), np.finfo(float).tiny)
    out = np.zeros(image.shape)
    for scale in scales:
        l1, l2 = hessian_eigenvalues(image, float(scale))
        s = np.sqrt(l1**2 + l2**2)
        s_max = s.max()
        if s_max <= floor:
            continue
        cc = 0.5 * s_max if c is None else c
        ok = (l2 < 0) & (s > floor)
        rb = np.zeros(image.shape)
        rb[ok] = l1[ok] / l2[ok]
        v = np.exp(-(rb**2) / (2 * beta**2)) * (1 - np.exp(-(s**2) / (2 * cc**2)))
        v[~ok] = 0.0
        np.maximum(out, v, out=out)
    if normalize:
        peak = out.max()
        if peak > 0:
            out /= peak
    return out


def temporal_correlation_map(m0_series: np.ndarray, vessel_mask: np.ndarray, min_windows: int = 8):
    """
    Pearson correlation of every pixel's M0 series with the vessel-mask average.

    Returns
    -------
    corr : ndarray
        Correlation in [-1, 1]; zero where the pixel (or the reference)
        has no temporal variance.
    zero_variance : ndarray of bool
        Pixels whose correlation was forced to zero.
    """
    m0 = np.asarray(m0_series, dtype=float)
    mask = np.asarray(vessel_mask, dtype=bool)
    if m0.ndim != 3:
        raise DataError("m0_series must be (windows, height, width)")
    if m0.shape[0] < min_windows:
        raise DataError(f"temporal correlation needs >= {min_windows} windows, got {m0.shape[0]}")
    if mask.shape != m0.shape[1:]:
        raise DataError("vessel mask shape does not match the M0 images")
    if not mask.any():
        raise DataError("vessel mask is empty; lower vessel_threshold")
    ref = m0[:, mask].mean(axis=1)
    ref = ref - ref.mean()
    x = m0 - m0.mean(axis=0)
    num = np.tensordot(ref, x, axes=(0, 0))
    den = np.sqrt(np.sum(ref**2) * np.sum(x**2, axis=0))
    scale = np.sqrt(np.sum(ref**2))
    tol = 1e-12 * max(float(np.abs(m0).max()), np.finfo(float).tiny)
    # variance below round-off of the data counts as zero
    dead = (np.sqrt(np.sum(x**2, axis=0)) <= tol * np.sqrt(m0.shape[0])) | (scale <= tol)
    corr = np.zeros(m0.shape[1:])
    live = ~dead
    corr[live] = num[live] / den[live]
    np.clip(corr, -1.0, 1.0, out=corr)
    return corr, dead


def close_mask(mask: np.ndarray) -> np.ndarray:
    """3x3 binary closing that does not erode at the image border."""
    st = np.ones((3, 3), dtype=bool)
    dil = ndimage.binary_dilation(mask, structure=st)
    return ndimage.binary_erosion(dil, structure=st, border_value=1)


def vessel_mask_from(vesselness: np.ndarray, threshold: float) -> np.ndarray:
    return close_mask(np.asarray(vesselness) >= threshold)


def label_by_size(mask: np.ndarray, connectivity: int = 8):
    """Connected components relabeled 1..n by decreasing size (ties keep scan order)."""
    labels, n = ndimage.label(mask, structure=_structure(connectivity))
    if n == 0:
        return labels, np.zeros(0, dtype=int)
    sizes = np.bincount(labels.ravel())[1:]
    order = np.argsort(-sizes, kind="stable")
    remap = np.zeros(n + 1, dtype=labels.dtype)
    remap[order + 1] = np.arange(1, n + 1)
    return remap[labels], sizes[order]


def threshold_and_refine(vesselness: np.ndarray, correlation_map: np.ndarray, cfg: SegmentationConfig):
    """
    Artery mask from the two manual thresholds.

    ``(vesselness >= vessel_threshold) & (correlation >= artery_threshold)``,
    3x3 closing, optional exclusion of pixels beyond a radius from an
    operator-given center, removal of components below
    ``min_component_px``.  Components are labeled by decreasing size.
    """
    v = np.asarray(vesselness)
    cm = np.asarray(correlation_map)
    mask = close_mask((v >= cfg.vessel_threshold) & (cm >= cfg.artery_threshold))
    if cfg.exclusion_radius_px is not None:
        cx, cy = cfg.exclusion_center_px
        yy, xx = np.indices(mask.shape)
        mask &= (xx - cx) ** 2 + (yy - cy) ** 2 <= cfg.exclusion_radius_px**2
    labels, sizes = label_by_size(mask, cfg.connectivity)
    keep = np.flatnonzero(sizes >= cfg.min_component_px)
    mask = np.isin(labels, keep + 1)
    if not mask.any():
        raise DataError("artery mask is empty after thresholding; adjust vessel_threshold/artery_threshold")
    labels, _ = label_by_size(mask, cfg.connectivity)
    return mask, labels


def segment(m0_series: np.ndarray, cfg: SegmentationConfig) -> SegmentationSet:
    """Full chain on a ``(windows, H, W)`` power Doppler series."""
    m0_series = np.asarray(m0_series, dtype=float)
    mean_m0 = m0_series.mean(axis=0)
    flat = flat_field_correct(mean_m0, cfg.flatfield_sigma_px)
    vness = frangi_vesselness(flat, cfg.frangi_scales_px, cfg.frangi_beta, cfg.frangi_c)
    vmask = vessel_mask_from(vness, cfg.vessel_threshold)
    corr, dead = temporal_correlation_map(m0_series, vmask)
    artery, labels = threshold_and_refine(vness, corr, cfg)
    return SegmentationSet(flatfielded=flat, vesselness=vness, vessel_mask=vmask,
                           correlation_map=corr, artery_mask=artery, components=labels,
                           zero_variance=dead)
