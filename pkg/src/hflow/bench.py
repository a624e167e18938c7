"""
Throughput benchmark of the per-window chain.

Stages are timed separately on one synthetic window: hologram rendering
(DC removal + Fresnel propagation), the SVD clutter filter (Gram matrix,
eigendecomposition, projection), the STFT with moments, and the whole
chain.  Rates are reported in frames/s and pixels/s together with their
ratio to the acquisition frame rate.  Every thread count is checked for
bit-identical output against the single-thread run.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .doppler import (
    SpectralWindowConfig,
    _leading_right_vectors,
    analyze_window,
    power_doppler,
    spectral_moment2,
    stft_power_spectra,
)
from .optics import OpticalParams, fresnel_propagate, remove_frame_dc

STAGES = ("render", "svd", "stft", "end_to_end")


@dataclass
class StageTiming:
    stage: str
    threads: int
    seconds: float
    frames_per_s: float
    pixels_per_s: float
    ratio_to_acquisition: float
    identical_to_single_thread: bool


def synthetic_window(width: int, height: int, frames: int, seed: int = 0) -> np.ndarray:
    """Speckle-like uint16 interferograms: reference level plus random fluctuations."""
    rng = np.random.default_rng(seed)
    base = 128.0**2 + 2 * 128.0 * 8.0 * rng.standard_normal((frames, height, width), dtype=np.float32)
    return np.clip(np.rint(base), 0, 65535).astype(np.uint16)


def _timed(fn, repeats):
    best, out = float("inf"), None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _svd_stage(holo, cfg):
    t, h, w = holo.shape
    cas = holo.reshape(t, h * w)
    gram = cas.conj() @ cas.T
    v = _leading_right_vectors(gram, cfg.svd_remove)
    return cas - v.conj() @ (v.T @ cas)


def _stft_stage(filtered, cfg, fs, threads, chunk_px=8192):
    m0, m2 = [], []
    for i in range(0, filtered.shape[1], chunk_px):
        spectra, freqs = stft_power_spectra(filtered[:, i:i + chunk_px], cfg, fs, workers=threads)
        m0.append(power_doppler(spectra, freqs, cfg))
        m2.append(spectral_moment2(spectra, freqs, cfg))
    return np.concatenate(m0), np.concatenate(m2)


def run_bench(frames: np.ndarray, params: OpticalParams, window_cfg: SpectralWindowConfig,
              render_distance_m: float, thread_counts=(1, 2), repeats: int = 1) -> list[StageTiming]:
    """Time every stage at every thread count on ``frames`` (one analysis window)."""
    frames = np.asarray(frames)
    t, h, w = frames.shape
    if t != window_cfg.window_len:
        window_cfg = dataclasses.replace(window_cfg, window_len=t, hop=max(t // 2, 1))
    fs = params.frame_rate_hz
    counts = sorted(set(int(c) for c in thread_counts) | {1})
    results, reference = [], {}
    for n in counts:
        def render():
            return fresnel_propagate(remove_frame_dc(frames, np.complex64), params, render_distance_m,
                                     workers=n)

        sec_r, holo = _timed(render, repeats)
        sec_s, filtered = _timed(lambda: _svd_stage(holo, window_cfg), repeats)
        sec_f, moments = _timed(lambda: _stft_stage(filtered, window_cfg, fs, n), repeats)

        def chain():
            return analyze_window(render(), window_cfg, fs, threads=n)

        sec_e, maps = _timed(chain, repeats)
        outputs = {"render": holo, "svd": filtered, "stft": moments[1], "end_to_end": maps.m2}
        for stage, sec in zip(STAGES, (sec_r, sec_s, sec_f, sec_e)):
            out = outputs[stage]
            if n == 1:
                reference[stage] = out
            same = bool(np.array_equal(out, reference[stage], equal_nan=True))
            fps = t / sec
            results.append(StageTiming(stage, n, sec, fps, fps * h * w, fps / fs, same))
    return results


def format_table(results: list[StageTiming], params: OpticalParams) -> str:
    head = (f"{'stage':<11} {'threads':>7} {'seconds':>9} {'frames/s':>11} {'pixels/s':>11} "
            f"{'x ' + format(params.frame_rate_hz, 'g') + ' fps':>12} {'identical':>9}")
    rows = [head, "-" * len(head)]
    for r in results:
        rows.append(f"{r.stage:<11} {r.threads:>7d} {r.seconds:>9.3f} {r.frames_per_s:>11.1f} "
                    f"{r.pixels_per_s:>11.3e} {r.ratio_to_acquisition:>12.4f} {str(r.identical_to_single_thread):>9}")
    return "\n".join(rows)
