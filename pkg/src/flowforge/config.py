"""Run configuration: JSON schema, validation, and the backend factory.

A run config captures everything one ``edit``/``flowedit`` invocation
needs: the edit settings, the backend specification, prompts, input and
layout paths, and output options.  ``parse_run_config`` and
``serialize_run_config`` round-trip exactly, and unknown keys are
rejected so config typos fail loudly.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .adaptation import AdaptConfig, LossWeights
from .backends import (
    AnalyticCodec,
    LinearBackend,
    LinearField,
    PointMassBackend,
    PromptPair,
    RemoteBackend,
    ReplayBackend,
)
from .editor import EditConfig
from .errors import ConfigError
from .trace import VelocityTrace

__all__ = [
    "BackendSpec",
    "RunConfig",
    "serialize_run_config",
    "parse_run_config",
    "load_run_config",
    "save_run_config",
    "validate_run_config",
    "build_backend",
]

BACKEND_KINDS = ("point_mass", "linear", "replay", "remote")
LOG_LEVELS = ("debug", "info", "warning", "error")


@dataclass
class BackendSpec:
    """Which velocity backend to build and its parameters.

    Fields irrelevant to the chosen kind are ignored but preserved by
    serialization, which keeps round-trips exact.
    """

    kind: str = "point_mass"
    mu_src: float = 0.0
    mu_tar: float = 1.0
    a_src: float = 0.0
    a_tar: float = 0.0
    b_src: float = 0.0
    b_tar: float = 0.0
    host: str = "127.0.0.1"
    port: int = 0
    trace: str | None = None
    downsample_factor: int = 8
    latent_channels: int = 4

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"backend kind must be one of {BACKEND_KINDS}, got {self.kind!r}")


@dataclass
class RunConfig:
    """Everything one batch run needs."""

    edit: EditConfig = field(default_factory=EditConfig)
    backend: BackendSpec = field(default_factory=BackendSpec)
    prompt_src: str = "source scene"
    prompt_tar: str = "target scene"
    inputs: list[str] = field(default_factory=list)
    layouts: list[str] = field(default_factory=list)
    output_dir: str = "out"
    trace_record: str | None = None
    dump_latents: bool = False
    clamp: bool = True
    workers: int = 0
    log_level: str = "info"

    def prompts(self) -> PromptPair:
        return PromptPair(self.prompt_src, self.prompt_tar)


def _check_keys(obj: dict, allowed, where: str) -> None:
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def serialize_run_config(cfg: RunConfig) -> dict:
    """Turn a run config into its plain-JSON dictionary form."""
    edit = cfg.edit
    return {
        "edit": {
            "t_steps": edit.t_steps,
            "n_max": edit.n_max,
            "n_avg": edit.n_avg,
            "seed": edit.seed,
            "mode": edit.mode,
            "kernel_size": edit.kernel_size,
            "kernel_sigma": edit.kernel_sigma,
            "weights": asdict(edit.weights),
            "adapt": asdict(edit.adapt),
        },
        "backend": asdict(cfg.backend),
        "prompt_src": cfg.prompt_src,
        "prompt_tar": cfg.prompt_tar,
        "inputs": list(cfg.inputs),
        "layouts": list(cfg.layouts),
        "output_dir": cfg.output_dir,
        "trace_record": cfg.trace_record,
        "dump_latents": cfg.dump_latents,
        "clamp": cfg.clamp,
        "workers": cfg.workers,
        "log_level": cfg.log_level,
    }


def _parse_edit(obj: dict) -> EditConfig:
    _check_keys(
        obj,
        ("t_steps", "n_max", "n_avg", "seed", "mode", "kernel_size", "kernel_sigma", "weights", "adapt"),
        "edit config",
    )
    weights_obj = obj.get("weights", {})
    adapt_obj = obj.get("adapt", {})
    _check_keys(weights_obj, ("lambda1", "lambda2", "lambda3"), "loss weight")
    _check_keys(adapt_obj, ("n_inner", "step_size", "line_search", "epsilon_cos"), "adapt config")
    defaults = EditConfig()
    try:
        return EditConfig(
            t_steps=int(obj.get("t_steps", defaults.t_steps)),
            n_max=int(obj.get("n_max", defaults.n_max)),
            n_avg=int(obj.get("n_avg", defaults.n_avg)),
            seed=int(obj.get("seed", defaults.seed)),
            mode=str(obj.get("mode", defaults.mode)),
            kernel_size=int(obj.get("kernel_size", defaults.kernel_size)),
            kernel_sigma=float(obj.get("kernel_sigma", defaults.kernel_sigma)),
            weights=LossWeights(**{k: float(v) for k, v in weights_obj.items()}),
            adapt=AdaptConfig(
                n_inner=int(adapt_obj.get("n_inner", 5)),
                step_size=float(adapt_obj.get("step_size", 0.1)),
                line_search=bool(adapt_obj.get("line_search", True)),
                epsilon_cos=float(adapt_obj.get("epsilon_cos", 1e-12)),
            ),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid edit config: {exc}") from exc


def parse_run_config(obj: dict) -> RunConfig:
    """Build a run config from its dictionary form, rejecting unknown keys."""
    if not isinstance(obj, dict):
        raise ConfigError(f"run config must be a JSON object, got {type(obj).__name__}")
    allowed = [f.name for f in fields(RunConfig)]
    _check_keys(obj, allowed, "run config")
    backend_obj = obj.get("backend", {})
    _check_keys(backend_obj, [f.name for f in fields(BackendSpec)], "backend spec")
    try:
        backend = BackendSpec(**backend_obj)
    except TypeError as exc:
        raise ConfigError(f"invalid backend spec: {exc}") from exc
    defaults = RunConfig()
    cfg = RunConfig(
        edit=_parse_edit(obj.get("edit", {})),
        backend=backend,
        prompt_src=str(obj.get("prompt_src", defaults.prompt_src)),
        prompt_tar=str(obj.get("prompt_tar", defaults.prompt_tar)),
        inputs=[str(p) for p in obj.get("inputs", [])],
        layouts=[str(p) for p in obj.get("layouts", [])],
        output_dir=str(obj.get("output_dir", defaults.output_dir)),
        trace_record=obj.get("trace_record"),
        dump_latents=bool(obj.get("dump_latents", False)),
        clamp=bool(obj.get("clamp", True)),
        workers=int(obj.get("workers", 0)),
        log_level=str(obj.get("log_level", defaults.log_level)),
    )
    if cfg.log_level not in LOG_LEVELS:
        raise ConfigError(f"log_level must be one of {LOG_LEVELS}, got {cfg.log_level!r}")
    if cfg.workers < 0:
        raise ConfigError(f"workers must be non-negative, got {cfg.workers}")
    return cfg


def load_run_config(path) -> RunConfig:
    """Read and parse a JSON run config file."""
    try:
        with open(path, "rb") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_run_config(obj)


def save_run_config(path, cfg: RunConfig) -> None:
    """Write a run config as indented JSON."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(serialize_run_config(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def validate_run_config(cfg: RunConfig, require_inputs: bool = True) -> None:
    """Check path references and mode/layout consistency before running."""
    if require_inputs and not cfg.inputs:
        raise ConfigError("no input images given")
    for path in cfg.inputs:
        if not os.path.isfile(path):
            raise ConfigError(f"input image does not exist: {path}")
    for path in cfg.layouts:
        if not os.path.isfile(path):
            raise ConfigError(f"layout file does not exist: {path}")
    if cfg.edit.mode == "driveflow" and cfg.inputs:
        if not cfg.layouts:
            raise ConfigError("driveflow mode needs at least one layout")
        if len(cfg.layouts) not in (1, len(cfg.inputs)):
            raise ConfigError(
                f"{len(cfg.layouts)} layouts cannot cover {len(cfg.inputs)} inputs "
                "(give one shared layout or one per input)"
            )
    if cfg.backend.kind == "replay" and not cfg.backend.trace:
        raise ConfigError("replay backend needs a trace path")
    if cfg.backend.kind == "replay" and cfg.backend.trace and not os.path.isfile(cfg.backend.trace):
        raise ConfigError(f"replay trace does not exist: {cfg.backend.trace}")
    parent = os.path.dirname(os.path.abspath(cfg.output_dir))
    if not os.path.isdir(parent):
        raise ConfigError(f"parent of output directory does not exist: {parent}")


def build_backend(spec: BackendSpec, prompts: PromptPair):
    """Construct the backend a spec describes.

    Analytic kinds key their per-prompt parameters by the actual prompt
    strings, so the same spec works with any prompt pair.
    """
    codec = AnalyticCodec(spec.downsample_factor, spec.latent_channels)
    if spec.kind == "point_mass":
        anchors = {prompts.c_src: spec.mu_src}
        anchors[prompts.c_tar] = spec.mu_tar
        return PointMassBackend(anchors, codec)
    if spec.kind == "linear":
        flds = {prompts.c_src: LinearField(a=spec.a_src, b=spec.b_src)}
        flds[prompts.c_tar] = LinearField(a=spec.a_tar, b=spec.b_tar)
        return LinearBackend(flds, codec)
    if spec.kind == "replay":
        if not spec.trace:
            raise ConfigError("replay backend needs a trace path")
        return ReplayBackend(VelocityTrace.read(spec.trace), codec)
    if spec.kind == "remote":
        return RemoteBackend(spec.host, spec.port)
    raise ConfigError(f"unknown backend kind {spec.kind!r}")
