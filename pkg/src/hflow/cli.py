"""
Command-line entry point: ``hflow <subcommand> [flags]``.

Flags mirror :class:`~hflow.pipeline.RunConfig`; ``--config`` loads a JSON
document first and explicit flags override it.  Phantom and bench fields
carry ``--phantom-`` / ``--bench-`` prefixes.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import types
import typing

from . import io, pipeline
from .errors import ConfigError, HflowError

PREFIXES = {"phantom": "phantom-", "bench": "bench-"}
TOP_LEVEL = {
    "output_dir": ("-o", "--output-dir"),
    "input_path": ("-i", "--input"),
    "threads": ("--threads",),
    "render_chunk_frames": ("--render-chunk-frames",),
    "plots": ("--plots",),
}
COMMANDS = {
    "phantom": "synthesize a phantom stack with ground truth",
    "render": "interferograms -> complex holograms",
    "doppler": "clutter filter, STFT and spectral moments per window",
    "segment": "artery segmentation from power Doppler",
    "flow": "section profiles, Poiseuille fits and volume rates",
    "bench": "per-stage throughput on one analysis window",
    "report": "summarize flow results (and phantom truth if present)",
    "run": "render, doppler, segment, flow and report in one go",
}


def _arg_kwargs(hint):
    origin = typing.get_origin(hint)
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    if origin in (typing.Union, types.UnionType) and len(args) == 1:
        hint = args[0]
        origin = typing.get_origin(hint)
    if hint is bool:
        return {"action": argparse.BooleanOptionalAction}
    if hint is tuple or origin is tuple:
        return {"nargs": "+", "type": float}
    if hint in (int, float, str):
        return {"type": hint}
    return None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="RunConfig JSON (flags override it)")
    p.add_argument("-v", "--verbose", action="store_true")
    hints = typing.get_type_hints(pipeline.RunConfig)
    g = p.add_argument_group("run")
    for name, flags in TOP_LEVEL.items():
        g.add_argument(*flags, dest=name, default=argparse.SUPPRESS, **_arg_kwargs(hints[name]))
    for section, typ in pipeline.SECTIONS.items():
        g = p.add_argument_group(section)
        hints = typing.get_type_hints(typ)
        for f in dataclasses.fields(typ):
            kw = _arg_kwargs(hints[f.name])
            if kw is None:
                continue        # structured values (explicit vessel lists) come from --config
            flag = "--" + PREFIXES.get(section, "") + f.name.replace("_", "-")
            g.add_argument(flag, dest=f"{section}.{f.name}", default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hflow", description="Doppler holography blood-flow pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in COMMANDS.items():
        _add_config_flags(sub.add_parser(name, help=help_, description=help_))
    return parser


def config_from_args(ns: argparse.Namespace) -> pipeline.RunConfig:
    base = pipeline.load_config(ns.config) if getattr(ns, "config", None) else pipeline.RunConfig()
    data = base.to_dict()
    for key, value in vars(ns).items():
        if key in ("command", "config", "verbose"):
            continue
        if "." in key:
            section, name = key.split(".", 1)
            data[section][name] = value
        else:
            data[key] = value
    return pipeline.RunConfig.from_dict(data)


def _bench(cfg: pipeline.RunConfig) -> str:
    from . import bench

    b = cfg.bench
    if cfg.input_path:
        stack = io.read_stack(cfg.input_path, cfg.optics)
        frames = stack.frames[:b.frames, :b.height, :b.width]
        params = stack.params
    else:
        frames = bench.synthetic_window(b.width, b.height, b.frames, b.seed)
        params = cfg.optics
    results = bench.run_bench(frames, params, cfg.window, b.render_distance_m, b.thread_counts, b.repeats)
    table = bench.format_table(results, params)
    cfg.out.mkdir(parents=True, exist_ok=True)
    io.write_json(cfg.out / "bench.json", {
        "window_shape": list(frames.shape),
        "acquisition_frame_rate_hz": params.frame_rate_hz,
        "results": [dataclasses.asdict(r) for r in results],
        "run_config": cfg.to_dict(),
    })
    (cfg.out / "bench.txt").write_text(table + "\n")
    return table


def run_command(command: str, cfg: pipeline.RunConfig) -> str | None:
    if command == "phantom":
        truth = pipeline.stage_phantom(cfg)
        return (f"wrote {cfg.out / pipeline.STACK_NAME}: mean truth flow "
                f"{truth['mean_total_flow_ul_min']:.2f} uL/min over {len(truth['times_s'])} windows")
    if command == "render":
        return f"wrote {pipeline.stage_render(cfg)}"
    if command == "doppler":
        return f"wrote moment maps for {pipeline.stage_doppler(cfg)['windows']} windows"
    if command == "segment":
        seg = pipeline.stage_segment(cfg)
        return f"artery mask: {int(seg.artery_mask.sum())} px in {int(seg.components.max())} components"
    if command == "flow":
        res = pipeline.stage_flow(cfg).result
        return f"mean total flow {res.mean_total_flow:.2f} uL/min, RI {res.resistivity_index:.3f}"
    if command == "report":
        return pipeline.stage_report(cfg)
    if command == "run":
        return pipeline.run_all(cfg)
    if command == "bench":
        return _bench(cfg)
    raise ConfigError(f"unknown command {command!r}")


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(ns)
        out = run_command(ns.command, cfg)
    except HflowError as exc:
        print(f"hflow {ns.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    if out:
        print(out.rstrip("\n"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
