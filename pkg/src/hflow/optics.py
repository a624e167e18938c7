"""
Hologram rendering: discrete Fresnel propagation of raw interferograms.

The single-FFT Fresnel transform is used with a unitary FFT, so every
propagation conserves energy and ``z`` followed by ``-z`` is an exact
inverse.  Pixel pitch bookkeeping is anchored on the camera plane:
``params.pixel_pitch_m`` is always the camera pitch, a positive ``z``
maps camera -> reconstruction plane and a negative ``z`` maps back.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft

from .errors import ConfigError, DataError

MIN_FIELD_SIZE = 16


@dataclass(frozen=True)
class OpticalParams:
    wavelength_m: float = 852e-9
    numerical_aperture: float = 0.124
    frame_rate_hz: float = 33000.0
    pixel_pitch_m: float = 20e-6
    propagation_distance_m: float = 0.0
    papilla_diameter_m: float = 1.8e-3

    def __post_init__(self):
        checks = {
            "wavelength_m": self.wavelength_m > 0,
            "numerical_aperture": 0 < self.numerical_aperture < 1,
            "frame_rate_hz": self.frame_rate_hz > 0,
            "pixel_pitch_m": self.pixel_pitch_m > 0,
            "papilla_diameter_m": self.papilla_diameter_m > 0,
        }
        for name, ok in checks.items():
            if not ok or not math.isfinite(getattr(self, name)):
                raise ConfigError(f"invalid {name}: {getattr(self, name)!r}")
        if not math.isfinite(self.propagation_distance_m):
            raise ConfigError("propagation_distance_m must be finite")

    def with_(self, **changes) -> "OpticalParams":
        return replace(self, **changes)


@dataclass
class InterferogramStack:
    """Raw camera frames, shape ``(frame_count, height, width)``, uint16."""

    frames: np.ndarray
    params: OpticalParams = field(default_factory=OpticalParams)
    bit_depth: int = 16

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3:
            raise DataError(f"frames must be 3-D (frames, height, width), got {frames.shape}")
        if frames.dtype != np.uint16:
            if frames.size and (frames.min() < 0 or frames.max() > 2**self.bit_depth - 1):
                raise DataError("intensities exceed the 16-bit range")
            frames = frames.astype(np.uint16)
        self.frames = frames

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


@dataclass
class HologramStack:
    """Complex field frames, same layout as the source interferograms."""

    frames: np.ndarray
    params: OpticalParams = field(default_factory=OpticalParams)

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


def _centered_coords(n: int, pitch: float) -> np.ndarray:
    return (np.arange(n) - n // 2) * pitch


def reconstruction_pitch(n: int, params: OpticalParams, z: float) -> float:
    """Pixel pitch of the plane reached by propagating ``n`` camera pixels by ``|z|``."""
    if z == 0:
        return params.pixel_pitch_m
    return params.wavelength_m * abs(z) / (n * params.pixel_pitch_m)


def _chirps(shape, params: OpticalParams, z: float):
    ny, nx = shape
    d = abs(z)
    lam = params.wavelength_m
    # camera plane, and the far plane whose pitch is fixed by the single-FFT sampling
    cam = [_centered_coords(n, params.pixel_pitch_m) for n in (ny, nx)]
    far = [_centered_coords(n, reconstruction_pitch(n, params, d)) for n in (ny, nx)]

    def q(coords):
        y, x = coords
        return np.exp(1j * np.pi / (lam * d) * y[:, None] ** 2) * np.exp(
            1j * np.pi / (lam * d) * x[None, :] ** 2
        )

    return q(cam), q(far)


def fresnel_propagate(field: np.ndarray, params: OpticalParams, z: float,
                      workers: int | None = None) -> np.ndarray:
    """
    Propagate a complex field by ``z`` meters with the single-FFT Fresnel method.

    Parameters
    ----------
    field : ndarray, complex
        2-D field, or a stack of fields with the two trailing axes spatial.
    params : OpticalParams
        Wavelength and camera pixel pitch.
    z : float
        Signed distance.  ``z > 0`` propagates from the camera plane,
        ``z < 0`` back to it.  ``z == 0`` returns a copy of the input.

    Returns
    -------
    ndarray
        Propagated field, same shape.  Unitary normalization: the energy
        of every frame is conserved.
    """
    field = np.asarray(field)
    if field.ndim < 2:
        raise DataError("field must be at least 2-D")
    ny, nx = field.shape[-2:]
    if ny < MIN_FIELD_SIZE or nx < MIN_FIELD_SIZE:
        raise DataError(f"field {ny}x{nx} below minimum {MIN_FIELD_SIZE}x{MIN_FIELD_SIZE}")
    if not np.all(np.isfinite(field)):
        raise DataError("field contains non-finite values")
    if z == 0:
        return field.copy()

    ctype = np.result_type(field.dtype, np.complex64)
    q_cam, q_far = _chirps((ny, nx), params, z)
    q_cam = q_cam.astype(ctype)
    q_far = q_far.astype(ctype)
    k = 2 * np.pi / params.wavelength_m
    axes = (-2, -1)
    if z > 0:
        phase = np.exp(1j * (k * z)) * -1j
        spec = scipy.fft.fft2(scipy.fft.ifftshift(field * q_cam, axes=axes),
                              norm="ortho", workers=workers)
        out = scipy.fft.fftshift(spec, axes=axes) * q_far
    else:
        phase = np.exp(1j * (k * z)) * 1j
        spec = scipy.fft.ifft2(scipy.fft.ifftshift(field * np.conj(q_far), axes=axes),
                               norm="ortho", workers=workers)
        out = scipy.fft.fftshift(spec, axes=axes) * np.conj(q_cam)
    return (out * ctype.type(phase)).astype(ctype, copy=False)


def remove_frame_dc(frames: np.ndarray, dtype=np.complex128) -> np.ndarray:
    """Convert intensity frames to complex and subtract each frame's mean."""
    real = np.asarray(frames, dtype=np.float64)
    real = real - real.mean(axis=(-2, -1), keepdims=True)
    return real.astype(dtype)


def render_hologram_stack(stack: InterferogramStack, z: float | None = None,
                          dtype=np.complex128, workers: int | None = None) -> HologramStack:
    """
    Render every interferogram frame into a complex hologram.

    Each frame is cast to complex, its spatial mean is removed (zero-order
    suppression) and it is propagated by ``z`` (default: the stack's
    ``params.propagation_distance_m``).  Frames are independent.
    """
    if z is None:
        z = stack.params.propagation_distance_m
    holo = remove_frame_dc(stack.frames, dtype=dtype)
    holo = fresnel_propagate(holo, stack.params, z, workers=workers)
    return HologramStack(frames=holo, params=stack.params)
