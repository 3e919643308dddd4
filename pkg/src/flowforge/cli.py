"""Command-line surface.

Subcommands: ``edit`` (adapted editing over a batch), ``flowedit``
(baseline editing), ``decompose`` (frequency-split visualization),
``maskview`` (rasterized layout mask), ``gradcheck`` (finite-difference
gradient audit), ``record``/``replay`` (velocity trace management) and
``selftest`` (analytic oracle suites).

Exit codes: 0 success, 2 configuration error, 3 file/parse error,
4 backend transport error, 5 numeric failure.  Every subcommand honors
``--dry-run``: validate, print the plan, touch nothing.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .adaptation import AdaptConfig, LossWeights
from .backends import RecordingBackend
from .config import (
    BACKEND_KINDS,
    LOG_LEVELS,
    RunConfig,
    build_backend,
    load_run_config,
    validate_run_config,
)
from .editor import EditConfig, run_driveflow, run_flowedit
from .errors import (
    ConfigError,
    InvalidArgumentError,
    NumericFailureError,
    ParseError,
    RemoteError,
    TraceMissError,
    TransportError,
)
from .grid import Grid, decompose, make_gaussian_kernel
from .imageio import load_image, save_image
from .layout import load_layout, rasterize_mask
from .oracles import finite_difference_gradient, run_selftest
from .trace import TraceRecord, VelocityTrace

log = logging.getLogger("flowforge")

__all__ = ["run_command", "entrypoint"]


def entrypoint() -> None:
    sys.exit(run_command(sys.argv[1:]))


def run_command(argv) -> int:
    """Parse argv, dispatch the subcommand, map failures to exit codes."""
    parser = _build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    _configure_logging(getattr(args, "log_level", None))
    try:
        return args.handler(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return 2
    except (ParseError, TraceMissError) as exc:
        log.error("%s", exc)
        return 3
    except (TransportError, RemoteError) as exc:
        log.error("transport failure: %s", exc)
        return 4
    except NumericFailureError as exc:
        log.error("numeric failure (%s): %s", exc.term, exc)
        return 5
    except InvalidArgumentError as exc:
        log.error("invalid argument: %s", exc)
        return 2
    except OSError as exc:
        log.error("i/o failure: %s", exc)
        return 3


def _configure_logging(level_flag: str | None) -> None:
    level_name = level_flag or os.environ.get("FLOWFORGE_LOG", "") or "info"
    level = getattr(logging, level_name.upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    log.setLevel(level)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowforge",
        description="Rectified-flow image editing with frequency-aware velocity adaptation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--dry-run", action="store_true", help="validate and print the plan, write nothing")
        p.add_argument("--log-level", choices=LOG_LEVELS, default=None, help="override FLOWFORGE_LOG")

    def run_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("inputs", nargs="*", help="input images (PPM or PNG)")
        p.add_argument("--config", help="JSON run config file; flags override its values")
        p.add_argument("-o", "--output-dir", default=None)
        p.add_argument("--layout", action="append", default=None, metavar="PATH",
                       help="layout JSON; repeat per input or give one shared layout")
        p.add_argument("--prompt-src", default=None)
        p.add_argument("--prompt-tar", default=None)
        p.add_argument("--backend", choices=BACKEND_KINDS, default=None)
        p.add_argument("--mu-src", type=float, default=None, help="point_mass source anchor")
        p.add_argument("--mu-tar", type=float, default=None, help="point_mass target anchor")
        p.add_argument("--a-src", type=float, default=None, help="linear source scale")
        p.add_argument("--a-tar", type=float, default=None, help="linear target scale")
        p.add_argument("--b-src", type=float, default=None, help="linear source offset")
        p.add_argument("--b-tar", type=float, default=None, help="linear target offset")
        p.add_argument("--host", default=None, help="remote backend host")
        p.add_argument("--port", type=int, default=None, help="remote backend port")
        p.add_argument("--trace", default=None, help="trace file for the replay backend")
        p.add_argument("--factor", type=int, default=None, help="codec downsample factor")
        p.add_argument("--latent-channels", type=int, default=None)
        p.add_argument("--t-steps", type=int, default=None)
        p.add_argument("--n-max", type=int, default=None)
        p.add_argument("--n-avg", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--kernel-size", type=int, default=None)
        p.add_argument("--kernel-sigma", type=float, default=None)
        p.add_argument("--lambda1", type=float, default=None)
        p.add_argument("--lambda2", type=float, default=None)
        p.add_argument("--lambda3", type=float, default=None)
        p.add_argument("--n-inner", type=int, default=None)
        p.add_argument("--step-size", type=float, default=None)
        p.add_argument("--line-search", choices=("on", "off"), default=None)
        p.add_argument("--workers", type=int, default=None, help="worker pool width, 0 = logical cores")
        p.add_argument("--no-clamp", action="store_true", help="skip output clamping to [0,1]")
        p.add_argument("--dump-latents", action="store_true", help="write final latents as .vtrc")
        p.add_argument("--trace-record", default=None, metavar="PATH",
                       help="record backend velocities to this trace file")
        p.add_argument("--timing", action="store_true",
                       help="write real wall-clock micros into JSONL logs "
                            "(off by default to keep runs byte-reproducible)")
        common(p)

    p_edit = sub.add_parser("edit", help="adapted edit over a batch of images")
    run_flags(p_edit)
    p_edit.set_defaults(handler=_cmd_edit, mode="driveflow")

    p_flow = sub.add_parser("flowedit", help="baseline edit without adaptation")
    run_flags(p_flow)
    p_flow.set_defaults(handler=_cmd_edit, mode="flowedit")

    p_rec = sub.add_parser("record", help="run one edit while recording backend velocities")
    run_flags(p_rec)
    p_rec.add_argument("--mode", choices=("driveflow", "flowedit"), default="driveflow")
    p_rec.set_defaults(handler=_cmd_record)

    p_rep = sub.add_parser("replay", help="re-run one edit from a recorded trace")
    run_flags(p_rep)
    p_rep.add_argument("--mode", choices=("driveflow", "flowedit"), default="driveflow")
    p_rep.set_defaults(handler=_cmd_replay)

    p_dec = sub.add_parser("decompose", help="write low/high frequency visualizations")
    p_dec.add_argument("input")
    p_dec.add_argument("-o", "--output-dir", default=".")
    p_dec.add_argument("--kernel-size", type=int, default=5)
    p_dec.add_argument("--kernel-sigma", type=float, default=1.0)
    common(p_dec)
    p_dec.set_defaults(handler=_cmd_decompose)

    p_mask = sub.add_parser("maskview", help="rasterize a layout mask to an image")
    p_mask.add_argument("--layout", required=True)
    p_mask.add_argument("-o", "--output-dir", default=".")
    p_mask.add_argument("--latent-height", type=int, default=None)
    p_mask.add_argument("--latent-width", type=int, default=None)
    p_mask.add_argument("--factor", type=int, default=8,
                        help="derive latent dims from the layout's image dims")
    p_mask.add_argument("--dilate", type=int, default=0)
    common(p_mask)
    p_mask.set_defaults(handler=_cmd_maskview)

    p_grad = sub.add_parser("gradcheck", help="finite-difference audit of the adaptation gradient")
    p_grad.add_argument("--seed", type=int, default=7)
    p_grad.add_argument("--instances", type=int, default=40)
    p_grad.add_argument("--coords", type=int, default=20)
    p_grad.add_argument("--step", type=float, default=1e-5, help="finite-difference half step")
    common(p_grad)
    p_grad.set_defaults(handler=_cmd_gradcheck)

    p_self = sub.add_parser("selftest", help="run the analytic oracle suites")
    p_self.add_argument("--seed", type=int, default=0)
    common(p_self)
    p_self.set_defaults(handler=_cmd_selftest)

    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    """Fold explicitly given flags over the config file values."""
    edit = cfg.edit
    weights = edit.weights
    adapt = edit.adapt
    if args.lambda1 is not None or args.lambda2 is not None or args.lambda3 is not None:
        weights = LossWeights(
            lambda1=weights.lambda1 if args.lambda1 is None else args.lambda1,
            lambda2=weights.lambda2 if args.lambda2 is None else args.lambda2,
            lambda3=weights.lambda3 if args.lambda3 is None else args.lambda3,
        )
    if args.n_inner is not None or args.step_size is not None or args.line_search is not None:
        adapt = AdaptConfig(
            n_inner=adapt.n_inner if args.n_inner is None else args.n_inner,
            step_size=adapt.step_size if args.step_size is None else args.step_size,
            line_search=adapt.line_search if args.line_search is None else args.line_search == "on",
            epsilon_cos=adapt.epsilon_cos,
        )
    edit = EditConfig(
        t_steps=edit.t_steps if args.t_steps is None else args.t_steps,
        n_max=edit.n_max if args.n_max is None else args.n_max,
        n_avg=edit.n_avg if args.n_avg is None else args.n_avg,
        seed=edit.seed if args.seed is None else args.seed,
        mode=args.mode,
        kernel_size=edit.kernel_size if args.kernel_size is None else args.kernel_size,
        kernel_sigma=edit.kernel_sigma if args.kernel_sigma is None else args.kernel_sigma,
        weights=weights,
        adapt=adapt,
    )
    backend = dataclasses.replace(
        cfg.backend,
        kind=cfg.backend.kind if args.backend is None else args.backend,
        mu_src=cfg.backend.mu_src if args.mu_src is None else args.mu_src,
        mu_tar=cfg.backend.mu_tar if args.mu_tar is None else args.mu_tar,
        a_src=cfg.backend.a_src if args.a_src is None else args.a_src,
        a_tar=cfg.backend.a_tar if args.a_tar is None else args.a_tar,
        b_src=cfg.backend.b_src if args.b_src is None else args.b_src,
        b_tar=cfg.backend.b_tar if args.b_tar is None else args.b_tar,
        host=cfg.backend.host if args.host is None else args.host,
        port=cfg.backend.port if args.port is None else args.port,
        trace=cfg.backend.trace if args.trace is None else args.trace,
        downsample_factor=cfg.backend.downsample_factor if args.factor is None else args.factor,
        latent_channels=(
            cfg.backend.latent_channels if args.latent_channels is None else args.latent_channels
        ),
    )
    return dataclasses.replace(
        cfg,
        edit=edit,
        backend=backend,
        prompt_src=cfg.prompt_src if args.prompt_src is None else args.prompt_src,
        prompt_tar=cfg.prompt_tar if args.prompt_tar is None else args.prompt_tar,
        inputs=list(args.inputs) if args.inputs else cfg.inputs,
        layouts=list(args.layout) if args.layout else cfg.layouts,
        output_dir=cfg.output_dir if args.output_dir is None else args.output_dir,
        trace_record=cfg.trace_record if args.trace_record is None else args.trace_record,
        dump_latents=cfg.dump_latents or args.dump_latents,
        clamp=False if args.no_clamp else cfg.clamp,
        workers=cfg.workers if args.workers is None else args.workers,
        log_level=cfg.log_level if args.log_level is None else args.log_level,
    )


def _load_cfg(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    return _apply_overrides(cfg, args)


def _plan_items(cfg: RunConfig) -> list[tuple[str, str | None]]:
    layouts: list[str | None]
    if cfg.edit.mode == "driveflow":
        if len(cfg.layouts) == 1:
            layouts = [cfg.layouts[0]] * len(cfg.inputs)
        else:
            layouts = list(cfg.layouts)
    else:
        layouts = [None] * len(cfg.inputs)
    return list(zip(cfg.inputs, layouts))


def _output_stems(inputs) -> list[str]:
    """Unique output stem per input, disambiguated when basenames repeat."""
    seen: dict[str, int] = {}
    stems = []
    for path in inputs:
        stem = os.path.splitext(os.path.basename(path))[0]
        count = seen.get(stem, 0)
        seen[stem] = count + 1
        stems.append(stem if count == 0 else f"{stem}.{count}")
    return stems


def _edit_one(cfg: RunConfig, item_index: int, input_path: str, layout_path: str | None, stem: str, timing: bool) -> dict:
    image = load_image(input_path)
    backend = build_backend(cfg.backend, cfg.prompts())
    recorder = None
    if cfg.trace_record:
        recorder = RecordingBackend(backend)
        backend = recorder
    z0 = backend.encode(image)
    if cfg.edit.mode == "driveflow":
        layout = load_layout(layout_path)
        final, records = run_driveflow(
            z0, layout, backend, cfg.prompts(), cfg.edit, stream=item_index
        )
    else:
        final, records = run_flowedit(
            z0, backend, cfg.prompts(), cfg.edit, stream=item_index
        )
    decoded = backend.decode(final)
    if cfg.clamp:
        decoded = Grid(np.clip(decoded.data, 0.0, 1.0))
    ext = os.path.splitext(input_path)[1].lower()
    if ext not in (".ppm", ".png"):
        ext = ".ppm"
    out_image = os.path.join(cfg.output_dir, f"{stem}.edited{ext}")
    out_log = os.path.join(cfg.output_dir, f"{stem}.steps.jsonl")
    save_image(out_image, decoded)
    with open(out_log, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = rec.as_json()
            if not timing:
                obj["micros"] = 0
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    written = [out_image, out_log]
    if cfg.trace_record:
        trace_path = cfg.trace_record if item_index == 0 else f"{cfg.trace_record}.{item_index}"
        recorder.trace.write(trace_path)
        written.append(trace_path)
    if cfg.dump_latents:
        latent_path = os.path.join(cfg.output_dir, f"{stem}.latent.vtrc")
        dump = VelocityTrace([TraceRecord(step=0, branch="tar", t=0.0, velocity=final)])
        dump.write(latent_path)
        written.append(latent_path)
    if hasattr(backend, "close"):
        backend.close()
    return {"input": input_path, "written": written, "steps": len(records)}


def _cmd_edit(args) -> int:
    cfg = _load_cfg(args)
    validate_run_config(cfg)
    items = _plan_items(cfg)
    stems = _output_stems([path for path, _ in items])
    if args.dry_run:
        print(f"plan: {cfg.edit.mode} over {len(items)} image(s) -> {cfg.output_dir}")
        for (path, layout), stem in zip(items, stems):
            suffix = f" layout={layout}" if layout else ""
            print(f"  would edit {path}{suffix} -> {stem}.edited.*")
        return 0
    os.makedirs(cfg.output_dir, exist_ok=True)
    workers = cfg.workers if cfg.workers > 0 else (os.cpu_count() or 1)
    workers = min(workers, len(items)) or 1
    results = []
    if workers == 1:
        for index, ((path, layout), stem) in enumerate(zip(items, stems)):
            results.append(_edit_one(cfg, index, path, layout, stem, args.timing))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_edit_one, cfg, index, path, layout, stem, args.timing)
                for index, ((path, layout), stem) in enumerate(zip(items, stems))
            ]
            results = [f.result() for f in futures]
    for res in results:
        log.info("edited %s (%d steps) -> %s", res["input"], res["steps"], res["written"][0])
        print(f"{res['input']} -> {res['written'][0]}")
    return 0


def _cmd_record(args) -> int:
    cfg = _load_cfg(args)
    if not cfg.trace_record:
        raise ConfigError("record needs --trace-record PATH")
    if len(cfg.inputs) != 1:
        raise ConfigError(f"record works on exactly one input, got {len(cfg.inputs)}")
    return _cmd_edit(args)


def _cmd_replay(args) -> int:
    cfg = _load_cfg(args)
    if cfg.backend.kind != "replay":
        if args.trace is None and not cfg.backend.trace:
            raise ConfigError("replay needs --trace PATH")
        args.backend = "replay"
        cfg = _load_cfg(args)
    if len(cfg.inputs) != 1:
        raise ConfigError(f"replay works on exactly one input, got {len(cfg.inputs)}")
    return _cmd_edit(args)


def _cmd_decompose(args) -> int:
    kernel = make_gaussian_kernel(args.kernel_size, args.kernel_sigma)
    stem, ext = os.path.splitext(os.path.basename(args.input))
    ext = ext.lower() if ext.lower() in (".ppm", ".png") else ".ppm"
    low_path = os.path.join(args.output_dir, f"{stem}.low{ext}")
    high_path = os.path.join(args.output_dir, f"{stem}.high{ext}")
    if args.dry_run:
        print(f"plan: decompose {args.input} (k={args.kernel_size}, sigma={args.kernel_sigma})")
        print(f"  would write {low_path} and {high_path}")
        return 0
    image = load_image(args.input)
    split = decompose(image, kernel)
    os.makedirs(args.output_dir, exist_ok=True)
    save_image(low_path, Grid(np.clip(split.low.data, 0.0, 1.0)))
    # Residual detail is signed; render it around mid-gray.
    save_image(high_path, Grid(np.clip(split.high.data + 0.5, 0.0, 1.0)))
    print(f"{args.input} -> {low_path}, {high_path}")
    return 0


def _cmd_maskview(args) -> int:
    layout = load_layout(args.layout)
    if (args.latent_height is None) != (args.latent_width is None):
        raise ConfigError("give both --latent-height and --latent-width, or neither")
    if args.latent_height is not None:
        lh, lw = args.latent_height, args.latent_width
    else:
        if args.factor < 1:
            raise ConfigError(f"--factor must be positive, got {args.factor}")
        if layout.image_height % args.factor or layout.image_width % args.factor:
            raise ConfigError(
                f"layout dims {layout.image_width}x{layout.image_height} "
                f"not divisible by factor {args.factor}"
            )
        lh = layout.image_height // args.factor
        lw = layout.image_width // args.factor
    stem = os.path.splitext(os.path.basename(args.layout))[0]
    out_path = os.path.join(args.output_dir, f"{stem}.mask.ppm")
    if args.dry_run:
        print(f"plan: rasterize {args.layout} at {lh}x{lw} (dilate {args.dilate})")
        print(f"  would write {out_path}")
        return 0
    mask = rasterize_mask(layout, lh, lw, dilate=args.dilate)
    os.makedirs(args.output_dir, exist_ok=True)
    bits = mask.bits.astype(np.float64)
    save_image(out_path, Grid(np.stack([bits, bits, bits])))
    print(f"{args.layout} -> {out_path} ({mask.popcount}/{lh * lw} cells set)")
    return 0


def _cmd_gradcheck(args) -> int:
    from .adaptation import grad_total, loss_bg, loss_div, loss_obj, total_loss
    from .layout import LatentMask, complement

    if args.instances < 1 or args.coords < 1:
        raise ConfigError("gradcheck needs positive --instances and --coords")
    if args.dry_run:
        print(f"plan: gradcheck seed={args.seed} instances={args.instances} coords={args.coords}")
        return 0
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.instances):
        channels = int(rng.integers(1, 5))
        height = int(rng.integers(4, 17))
        width = int(rng.integers(4, 33))
        shape = (channels, height, width)
        v_tar = Grid(rng.standard_normal(shape))
        v_src = Grid(rng.standard_normal(shape))
        mask = LatentMask((rng.random((height, width)) < rng.uniform(0.2, 0.8)).astype(np.uint8))
        kernel = make_gaussian_kernel(int(rng.choice([1, 3, 5])), float(rng.uniform(0.5, 2.0)))
        weights = LossWeights(
            lambda1=float(rng.uniform(0.0, 5.0)),
            lambda2=float(rng.uniform(0.0, 5.0)),
            lambda3=float(rng.uniform(0.0, 5.0)),
        )
        analytic = grad_total(v_tar, v_src, mask, kernel, weights).data
        bg = complement(mask)

        def objective(arr: np.ndarray) -> float:
            tar = Grid(arr)
            return total_loss(
                (
                    loss_obj(tar, v_src, mask, kernel),
                    loss_div(tar, v_src, bg, kernel),
                    loss_bg(tar, v_src, bg, kernel),
                ),
                weights,
            )

        coords = [
            (int(rng.integers(0, channels)), int(rng.integers(0, height)), int(rng.integers(0, width)))
            for _ in range(args.coords)
        ]
        numeric = finite_difference_gradient(objective, v_tar.data.copy(), coords, h=args.step)
        got = np.array([analytic[c] for c in coords])
        rel = np.abs(got - numeric) / np.maximum.reduce(
            [np.abs(got), np.abs(numeric), np.full_like(numeric, 1e-8)]
        )
        worst = max(worst, float(rel.max()))
    print(f"max relative error: {worst:.6e}")
    if worst > 1e-4:
        log.error("gradient check failed: %.6e > 1e-4", worst)
        return 5
    return 0


def _cmd_selftest(args) -> int:
    if args.dry_run:
        print(f"plan: selftest seed={args.seed}")
        return 0
    results = run_selftest(args.seed)
    failures = 0
    for res in results:
        print(res)
        failures += 0 if res.ok else 1
    if failures:
        log.error("%d selftest suite(s) failed", failures)
        return 5
    return 0
