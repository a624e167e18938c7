"""
Stage orchestration on disk.

Each stage reads its predecessor's artifacts from ``RunConfig.output_dir``
and writes its own next to a copy of the exact configuration used
(``run_config.json``).  The one-shot :func:`run_all` calls the same stage
functions in order, so staged and one-shot runs produce identical files.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .doppler import SpectralWindowConfig, analyze_window, pca_preview, window_starts
from .errors import ConfigError, DataError
from .flow import FlowConfig, M3S_TO_UL_MIN, quantify_flow
from .optics import OpticalParams, fresnel_propagate, remove_frame_dc
from .phantom import PhantomSpec, VesselSpec, generate_phantom, star_phantom
from .segmentation import SegmentationConfig, segment

logger = logging.getLogger(__name__)

STACK_NAME = "stack.hflw"
THREADS_ENV = "HFLW_THREADS"


@dataclass(frozen=True)
class PhantomConfig:
    """Star-shaped arterial phantom; ``vessels`` replaces the star layout when given."""

    width: int = 128
    height: int = 128
    frame_count: int = 2560
    n_vessels: int = 4
    radius_px: float = 4.0
    total_flow_ul_min: float = 30.0
    pulsatility: float = 0.33
    cardiac_hz: float = 1.2
    peak_time_s: float | None = None
    inner_px: float = 5.0
    outer_px: float | None = None
    angle_offset_deg: float = 45.0
    background_sigma_hz: float = 3000.0
    reference_beam_amplitude: float = 128.0
    scatter_amplitude: float = 8.0
    noise_floor: float = 0.0
    seed: int = 0
    vessels: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "vessels", tuple(
            v if isinstance(v, dict) else dataclasses.asdict(v) for v in self.vessels))

    def to_spec(self, optics: OpticalParams, window: SpectralWindowConfig,
                papilla_diameter_px: float) -> PhantomSpec:
        common = dict(params=optics, background_sigma_hz=self.background_sigma_hz,
                      reference_beam_amplitude=self.reference_beam_amplitude,
                      scatter_amplitude=self.scatter_amplitude, noise_floor=self.noise_floor,
                      rng_seed=self.seed, band=window, papilla_diameter_px=papilla_diameter_px,
                      focus_distance_m=optics.propagation_distance_m)
        if self.vessels:
            vessels = tuple(VesselSpec(**v) for v in self.vessels)
            return PhantomSpec(width=self.width, height=self.height, frame_count=self.frame_count,
                               vessels=vessels, **common)
        return star_phantom(self.total_flow_ul_min, self.n_vessels, self.radius_px, self.width,
                            self.height, self.frame_count, self.inner_px, self.outer_px,
                            self.angle_offset_deg, self.pulsatility, self.cardiac_hz,
                            self.peak_time_s, **common)


@dataclass(frozen=True)
class BenchConfig:
    width: int = 384
    height: int = 384
    frames: int = 512
    render_distance_m: float = 0.05
    thread_counts: tuple = (1, 2)
    repeats: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "thread_counts", tuple(int(t) for t in self.thread_counts))
        if min(self.width, self.height) < 16 or self.frames < 2 or self.repeats < 1:
            raise ConfigError("bench needs >= 16x16 pixels, >= 2 frames and >= 1 repeat")
        if not self.thread_counts or min(self.thread_counts) < 1:
            raise ConfigError("thread_counts must be positive")


SECTIONS = {
    "optics": OpticalParams,
    "window": SpectralWindowConfig,
    "segmentation": SegmentationConfig,
    "flow": FlowConfig,
    "phantom": PhantomConfig,
    "bench": BenchConfig,
}


@dataclass(frozen=True)
class RunConfig:
    output_dir: str = "hflow_out"
    input_path: str | None = None
    threads: int = 1
    render_chunk_frames: int = 256
    plots: bool = True
    optics: OpticalParams = field(default_factory=OpticalParams)
    window: SpectralWindowConfig = field(default_factory=SpectralWindowConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.render_chunk_frames < 1:
            raise ConfigError("render_chunk_frames must be >= 1")
        self.window.check_rate(self.optics.frame_rate_hz)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def stack_path(self) -> Path:
        return Path(self.input_path) if self.input_path else self.out / STACK_NAME

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for name, typ in SECTIONS.items():
            if name in data and not isinstance(data[name], typ):
                data[name] = _build(typ, data[name])
        return cls(**data)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _tupleize(value):
    if isinstance(value, list):
        return tuple(_tupleize(v) for v in value)
    if isinstance(value, dict):
        return {k: _tupleize(v) for k, v in value.items()}
    return value


def _build(typ, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"config section for {typ.__name__} must be an object")
    names = {f.name for f in dataclasses.fields(typ)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {typ.__name__} keys: {sorted(unknown)}")
    values = {k: _tupleize(v) for k, v in values.items()}
    if typ is PhantomConfig and "vessels" in values:
        values["vessels"] = tuple(dict(v) for v in values["vessels"])
    try:
        return typ(**values)
    except TypeError as exc:
        raise ConfigError(f"bad {typ.__name__} values: {exc}") from exc


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(io.read_json(path))


def effective_threads(cfg: RunConfig) -> int:
    env = os.environ.get(THREADS_ENV)
    if env is None or env == "":
        return cfg.threads
    try:
        n = int(env)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer") from exc
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return n


def _save_config(cfg: RunConfig) -> None:
    cfg.out.mkdir(parents=True, exist_ok=True)
    io.write_json(cfg.out / "run_config.json", cfg.to_dict())


def _window_meta(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg.window)


def _check(label, found, expected):
    if found != expected:
        raise ConfigError(f"config mismatch between stages: {label} is {found!r} upstream, "
                          f"{expected!r} in this run")


# ---------------------------------------------------------------- phantom

def stage_phantom(cfg: RunConfig) -> dict:
    """Synthesize the configured phantom; writes the stack and truth files."""
    _save_config(cfg)
    spec = cfg.phantom.to_spec(cfg.optics, cfg.window, cfg.flow.papilla_diameter_px)
    stack, truth = generate_phantom(spec, cfg.window)
    io.write_stack(cfg.out / STACK_NAME, stack)
    io.write_pgm(cfg.out / "truth_artery.pgm", truth.artery_raster)
    io.write_pgm(cfg.out / "truth_papilla.pgm", truth.papilla_raster)
    io.write_array(cfg.out / "truth_delta_f", truth.delta_f_field, {"units": "Hz"})
    summary = {
        "times_s": truth.times_s,
        "window_starts": truth.window_starts,
        "section_flows_ul_min": truth.section_flows,
        "total_flow_ul_min": truth.total_flow_series,
        "mean_total_flow_ul_min": float(truth.total_flow_series.mean()),
        "resistivity_index": truth.resistivity_index,
        "pixel_scale_m_per_px": truth.pixel_scale_m_per_px,
        "papilla_diameter_px": truth.papilla_diameter_px,
        "background_m2_hz2": truth.background_m2,
        "vessel_sigma_hz": truth.vessel_sigma_hz,
        "vessels": [dataclasses.asdict(v) for v in spec.vessels],
        "run_config": cfg.to_dict(),
    }
    io.write_json(cfg.out / "truth.json", summary)
    return summary


# ---------------------------------------------------------------- render

def stage_render(cfg: RunConfig) -> Path:
    """Interferograms -> complex64 holograms (``hologram.c64``)."""
    stack = io.read_stack(cfg.stack_path, cfg.optics)
    for name in ("frame_rate_hz", "pixel_pitch_m", "wavelength_m"):
        _check(name, getattr(stack.params, name), getattr(cfg.optics, name))
    _save_config(cfg)
    threads = effective_threads(cfg)
    z = cfg.optics.propagation_distance_m
    shape = (stack.frame_count, stack.height, stack.width)
    meta = {"frame_rate_hz": cfg.optics.frame_rate_hz, "propagation_distance_m": z,
            "source": str(cfg.stack_path), "run_config": cfg.to_dict()}
    out = io.open_array_writer(cfg.out / "hologram", shape, True, meta)
    step = cfg.render_chunk_frames
    for s0 in range(0, stack.frame_count, step):
        block = remove_frame_dc(stack.frames[s0:s0 + step], dtype=np.complex64)
        out[s0:s0 + step] = fresnel_propagate(block, stack.params, z, workers=threads)
    out.flush()
    del out
    return cfg.out / "hologram.c64"


# ---------------------------------------------------------------- doppler

def stage_doppler(cfg: RunConfig) -> dict:
    """Per-window clutter filter, STFT and moments; writes M0, M2 and top-bin fractions."""
    holo, meta = io.read_array(cfg.out / "hologram", mmap=True)
    _check("frame_rate_hz", meta.get("frame_rate_hz"), cfg.optics.frame_rate_hz)
    _save_config(cfg)
    n, h, w = holo.shape
    starts = window_starts(n, cfg.window)
    if starts.size == 0:
        raise DataError(f"{n} frames is shorter than one {cfg.window.window_len}-frame window")
    threads = effective_threads(cfg)
    fs = cfg.optics.frame_rate_hz
    times = (starts + cfg.window.window_len / 2) / fs
    wmeta = {"window": _window_meta(cfg), "frame_rate_hz": fs, "window_starts": starts,
             "times_s": times, "run_config": cfg.to_dict()}
    outs = {k: io.open_array_writer(cfg.out / k, (starts.size, h, w), False, wmeta)
            for k in ("m0", "m2", "top_fraction")}
    for i, s0 in enumerate(starts):
        win = np.asarray(holo[s0:s0 + cfg.window.window_len])
        maps = analyze_window(win, cfg.window, fs, i, int(s0), threads=threads)
        outs["m0"][i] = maps.m0
        outs["m2"][i] = maps.m2
        outs["top_fraction"][i] = maps.top_fraction
    for arr in outs.values():
        arr.flush()
    if n >= 16:
        io.write_array(cfg.out / "preview", pca_preview(np.asarray(holo[:16])),
                       {"frames": [0, 16], "run_config": cfg.to_dict()})
    return {"windows": int(starts.size), "times_s": times}


def _load_windows(cfg: RunConfig, name: str):
    arr, meta = io.read_array(cfg.out / name)
    _check("window configuration", meta.get("window"), _json_round_trip(_window_meta(cfg)))
    _check("frame_rate_hz", meta.get("frame_rate_hz"), cfg.optics.frame_rate_hz)
    return arr.astype(np.float64), meta


def _json_round_trip(obj):
    return json.loads(json.dumps(obj, default=io._default))


# ---------------------------------------------------------------- segment

def stage_segment(cfg: RunConfig):
    m0, meta = _load_windows(cfg, "m0")
    _save_config(cfg)
    seg = segment(m0, cfg.segmentation)
    side = {"run_config": cfg.to_dict(), "thresholds": {
        "vessel_threshold": cfg.segmentation.vessel_threshold,
        "artery_threshold": cfg.segmentation.artery_threshold}}
    io.write_array(cfg.out / "flatfield", seg.flatfielded, side)
    io.write_array(cfg.out / "vesselness", seg.vesselness, side)
    io.write_array(cfg.out / "correlation", seg.correlation_map, side)
    io.write_pgm(cfg.out / "vessel_mask.pgm", seg.vessel_mask)
    io.write_pgm(cfg.out / "artery_mask.pgm", seg.artery_mask)
    io.write_pgm(cfg.out / "labels.pgm", seg.components.astype(np.uint16))
    io.write_json(cfg.out / "segmentation.json", dict(side, **{
        "artery_pixels": int(seg.artery_mask.sum()),
        "vessel_pixels": int(seg.vessel_mask.sum()),
        "components": int(seg.components.max()),
        "zero_variance_pixels": int(seg.zero_variance.sum()),
    }))
    return seg


# ---------------------------------------------------------------- flow

def stage_flow(cfg: RunConfig):
    m2, meta = _load_windows(cfg, "m2")
    top, _ = _load_windows(cfg, "top_fraction")
    mask = io.read_pgm(cfg.out / "artery_mask.pgm") > 0
    if mask.shape != m2.shape[1:]:
        raise ConfigError(f"config mismatch between stages: artery mask {mask.shape} vs "
                          f"moment maps {m2.shape[1:]}")
    _save_config(cfg)
    times = np.asarray(meta["times_s"], dtype=float)
    ana = quantify_flow(m2, mask, times, cfg.optics, cfg.window, cfg.flow, top)
    res = ana.result
    io.write_array(cfg.out / "delta_f", ana.delta_f, {"units": "Hz", "run_config": cfg.to_dict()})
    io.write_array(cfg.out / "velocity", ana.velocity, {"units": "m/s", "run_config": cfg.to_dict()})

    with open(cfg.out / "flow.csv", "w") as fh:
        fh.write("window_index,time_s,total_flow_ul_min,n_valid_sections\n")
        for i, (t, q, nv) in enumerate(zip(res.times_s, res.total_flow_series, res.n_valid_sections)):
            fh.write(f"{i},{t:.9g},{q:.9g},{nv}\n")
    with open(cfg.out / "sections.csv", "w") as fh:
        fh.write("window_index,section_id,center_x_px,center_y_px,orientation_deg,vmax_m_s,"
                 "radius_px,radius_m,volume_rate_ul_min,valid\n")
        for secs in ana.window_sections:
            for s in secs:
                fh.write(f"{s.window_index},{s.section_id},{s.center_px[0]:.9g},{s.center_px[1]:.9g},"
                         f"{s.orientation_deg:.9g},{s.fitted_vmax:.9g},{s.fitted_radius_px:.9g},"
                         f"{s.fitted_radius_m:.9g},{s.volume_rate_m3s * M3S_TO_UL_MIN:.9g},{int(s.valid)}\n")
    if ana.phase_profiles is not None:
        pp = ana.phase_profiles
        with open(cfg.out / "profiles.csv", "w") as fh:
            fh.write("normalized_position,systole_mean_m_s,systole_std_m_s,diastole_mean_m_s,diastole_std_m_s\n")
            for row in zip(pp.axis, pp.systole_mean, pp.systole_std, pp.diastole_mean, pp.diastole_std):
                fh.write(",".join(f"{v:.9g}" for v in row) + "\n")

    summary = {
        "mean_total_flow_ul_min": res.mean_total_flow,
        "systolic_flow_ul_min": res.systolic_flow,
        "diastolic_flow_ul_min": res.diastolic_flow,
        "systolic_index": res.systolic_index,
        "diastolic_index": res.diastolic_index,
        "systolic_time_s": res.systolic_time_s,
        "resistivity_index": res.resistivity_index,
        "pixel_scale_m_per_px": res.pixel_scale_m_per_px,
        "papilla_diameter_m": cfg.optics.papilla_diameter_m,
        "papilla_diameter_px": cfg.flow.papilla_diameter_px,
        "times_s": res.times_s,
        "total_flow_series_ul_min": res.total_flow_series,
        "smoothed_series_ul_min": res.smoothed_series,
        "n_valid_sections": res.n_valid_sections,
        "n_excluded_sections": res.n_excluded_sections,
        "saturated_fraction": ana.saturated_fraction,
        "background_fallbacks": ana.background_fallbacks,
        "dropped_sections": ana.dropped_sections,
        "reference_sections": [_section_dict(s) for s in ana.reference_sections],
        "run_config": cfg.to_dict(),
    }
    if np.any(ana.saturated_fraction > 0):
        logger.warning("Doppler saturation flagged in %d windows", int(np.sum(ana.saturated_fraction > 0)))
    io.write_json(cfg.out / "flow.json", summary)
    if cfg.plots:
        from . import plots
        plots.write_figures(cfg, ana)
    return ana


def _section_dict(s) -> dict:
    return {"section_id": s.section_id, "center_px": s.center_px, "orientation_deg": s.orientation_deg,
            "radius_px": s.fitted_radius_px, "radius_m": s.fitted_radius_m,
            "center_offset_px": s.center_offset_px, "vmax_m_s": s.fitted_vmax,
            "volume_rate_ul_min": s.volume_rate_m3s * M3S_TO_UL_MIN}


# ---------------------------------------------------------------- report

def stage_report(cfg: RunConfig) -> str:
    """Plain-text summary of flow results, compared with phantom truth when present."""
    flow = io.read_json(cfg.out / "flow.json")
    lines = [
        f"mean total flow      {flow['mean_total_flow_ul_min']:.2f} uL/min",
        f"systolic / diastolic {flow['systolic_flow_ul_min']:.2f} / {flow['diastolic_flow_ul_min']:.2f} uL/min",
        f"resistivity index    {flow['resistivity_index']:.3f}",
        f"systolic time        {flow['systolic_time_s']:.4f} s",
        f"pixel scale          {flow['pixel_scale_m_per_px'] * 1e6:.2f} um/px "
        f"(papilla {flow['papilla_diameter_m'] * 1e3:.2f} mm over {flow['papilla_diameter_px']:g} px)",
        f"sections             {len(flow['reference_sections'])} used, {len(flow['dropped_sections'])} dropped",
        f"windows              {len(flow['times_s'])}",
    ]
    truth_path = cfg.out / "truth.json"
    if truth_path.is_file():
        truth = io.read_json(truth_path)
        tq = truth["mean_total_flow_ul_min"]
        lines += [
            "",
            f"phantom mean flow    {tq:.2f} uL/min (error {100 * (flow['mean_total_flow_ul_min'] / tq - 1):+.1f}%)",
            f"phantom RI           {truth['resistivity_index']:.3f}",
        ]
    text = "\n".join(lines) + "\n"
    (cfg.out / "report.txt").write_text(text)
    return text


def run_all(cfg: RunConfig, with_phantom: bool | None = None) -> str:
    """Render, Doppler, segmentation, flow and report in one go (phantom first if no input)."""
    if with_phantom is None:
        with_phantom = cfg.input_path is None
    if with_phantom:
        stage_phantom(cfg)
    stage_render(cfg)
    stage_doppler(cfg)
    stage_segment(cfg)
    stage_flow(cfg)
    return stage_report(cfg)
