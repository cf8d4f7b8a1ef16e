"""Command-line interface: ``swli {invert,edit,reconstruct,eval}``.

Exit status: 0 on success, 2 on configuration/usage errors, 3 on contract,
numeric, capability or cache errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .backend import get_backend
from .cache import InversionCache, write_atomic
from .errors import ConfigError, SwliError
from .guidance import GuidanceConfig
from .injection import InjectionConfig
from .metrics import evaluate
from .pipeline import EditRequest, NTIConfig, ScheduleConfig, edit, image_digest, prepare_source, reconstruct

log = logging.getLogger("swli")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


@dataclass
class RunConfig:
    backend: str = "toy"
    source: str | None = None
    reference: str | None = None
    prompt: str = ""
    edit_prompt: str = ""
    steps: int = 50
    num_train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    guidance_scale: float = 7.0
    nti_scale: float = 7.5
    inversion_scale: float = 1.0
    t_early_frac: float = 0.4
    injection: bool = True
    nti: bool = True
    nti_inner_steps: int = 10
    nti_learning_rate: float = 1e-2
    nti_early_stop_tol: float = 1e-5
    seed: int = 0
    cache_dir: str | None = None
    out: str | None = None

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in fields(cls)}

    def resolved_cache_dir(self) -> Path:
        if self.cache_dir:
            return Path(self.cache_dir)
        env = os.environ.get("SWLI_CACHE_DIR")
        return Path(env) if env else Path.home() / ".cache" / "swli"

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.num_train_steps, self.beta_start, self.beta_end, self.steps)

    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(self.inversion_scale, self.nti_scale, self.guidance_scale)

    def nti_config(self) -> NTIConfig:
        return NTIConfig(self.nti, self.nti_inner_steps, self.nti_learning_rate, self.nti_early_stop_tol)

    def injection_config(self) -> InjectionConfig:
        return InjectionConfig(self.t_early_frac, None, self.injection)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key, raw, typ):
    typ = str(typ)
    try:
        if typ.startswith("bool"):
            low = raw.strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {typ}") from None
    return raw


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment, quotes around values are optional."""
    types = RunConfig.field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ConfigError(key, "unknown configuration key")
        if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
            raw = raw[1:-1]
        values[key] = _coerce(key, raw, types[key])
    return values


# ----------------------------------------------------------------------------
# image I/O


def load_image(path) -> np.ndarray:
    """8-bit RGB file -> float array in [-1, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except FileNotFoundError:
        raise ConfigError("image", f"no such file: {path}") from None
    except OSError as exc:
        raise ConfigError("image", f"cannot read {path}: {exc}") from None
    return arr / 127.5 - 1.0


def to_uint8(image) -> np.ndarray:
    return np.clip(np.round((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def png_bytes(image) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image), "RGB").save(buf, format="PNG")
    return buf.getvalue()


# ----------------------------------------------------------------------------
# commands


def _manifest(command, cfg: RunConfig, **extra) -> dict:
    return {"tool": "swli", "version": __version__, "command": command,
            "config": dataclasses.asdict(cfg), **extra}


def _write_json(path, obj):
    write_atomic(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _write_stage_log(path, stage_log):
    write_atomic(path, "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in stage_log).encode())


def _require(cfg, *names):
    for name in names:
        if not getattr(cfg, name):
            raise ConfigError(name, f"--{name.replace('_', '-')} is required")


def _backend(cfg):
    return get_backend(cfg.backend, seed=cfg.seed)


def cmd_invert(cfg: RunConfig) -> int:
    _require(cfg, "source")
    backend = _backend(cfg)
    cache = InversionCache(cfg.resolved_cache_dir())
    schedule = cfg.schedule().build()
    image = load_image(cfg.source)
    events = []
    prepare_source(backend, image, cfg.prompt, schedule, cfg.guidance(), cfg.nti_config(), cache, events)
    if cfg.reference:
        from .pipeline import invert_image
        invert_image(backend, load_image(cfg.reference), "", schedule, cfg.inversion_scale, cache, events)
    manifest = _manifest("invert", cfg, schedule_fingerprint=schedule.fingerprint,
                         backend_fingerprint=backend.fingerprint, source_digest=image_digest(image),
                         cache=events)
    out = Path(cfg.out) if cfg.out else cache.directory / f"invert-{image_digest(image)}.manifest.json"
    _write_json(out, manifest)
    for ev in events:
        print(f"{ev['kind']}: {ev['path']} ({'cache hit' if ev['hit'] else 'written'})")
    return EXIT_OK


def _write_outputs(cfg, command, result, schedule_fp, backend, extra):
    out = Path(cfg.out or f"{command}.png")
    write_atomic(out, png_bytes(result.image))
    stages = out.with_suffix(".stages.jsonl")
    _write_stage_log(stages, result.stage_log)
    manifest = _manifest(command, cfg, schedule_fingerprint=schedule_fp, backend_fingerprint=backend.fingerprint,
                         config_fingerprint=result.config_fingerprint, cache=result.cache_events,
                         outputs={"image": str(out), "stage_log": str(stages)}, **extra)
    _write_json(out.with_suffix(".manifest.json"), manifest)
    print(out)


def cmd_edit(cfg: RunConfig) -> int:
    _require(cfg, "source", "edit_prompt")
    backend = _backend(cfg)
    source = load_image(cfg.source)
    reference = load_image(cfg.reference) if cfg.reference else None
    request = EditRequest(source, cfg.prompt, cfg.edit_prompt, reference, cfg.injection_config(),
                          cfg.guidance(), cfg.schedule(), cfg.nti_config(), cfg.seed)
    result = edit(request, backend, InversionCache(cfg.resolved_cache_dir()))
    extra = {"source_digest": image_digest(source), "mode": request.mode}
    if reference is not None:
        extra["reference_digest"] = image_digest(reference)
    _write_outputs(cfg, "edit", result, cfg.schedule().build().fingerprint, backend, extra)
    return EXIT_OK


def cmd_reconstruct(cfg: RunConfig) -> int:
    _require(cfg, "source")
    backend = _backend(cfg)
    source = load_image(cfg.source)
    result = reconstruct(source, cfg.prompt, backend, schedule=cfg.schedule(), guidance=cfg.guidance(),
                         nti=cfg.nti_config(), cache=InversionCache(cfg.resolved_cache_dir()))
    _write_outputs(cfg, "reconstruct", result, cfg.schedule().build().fingerprint, backend,
                   {"source_digest": image_digest(source)})
    return EXIT_OK


def cmd_eval(cfg: RunConfig, image_path) -> int:
    _require(cfg, "source")
    output = to_uint8(load_image(image_path))
    source = to_uint8(load_image(cfg.source))
    reference = to_uint8(load_image(cfg.reference)) if cfg.reference else None
    for name, other in (("source", source), ("reference", reference)):
        if other is not None and other.shape != output.shape:
            raise ConfigError(name, f"image size {other.shape[:2]} differs from output {output.shape[:2]}")
    report = evaluate(output, source, reference).to_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    if cfg.out:
        write_atomic(cfg.out, (text + "\n").encode())
        _write_json(Path(cfg.out).with_suffix(".manifest.json"), _manifest("eval", cfg, image=str(image_path)))
    print(text)
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing

_FLAG_DEST = {
    "--source": "source", "--reference": "reference", "--prompt": "prompt", "--edit-prompt": "edit_prompt",
    "--backend": "backend", "--steps": "steps", "--guidance-scale": "guidance_scale",
    "--nti-scale": "nti_scale", "--t-early-frac": "t_early_frac", "--seed": "seed",
    "--cache-dir": "cache_dir", "--out": "out",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    types = RunConfig.field_types()
    for flag, dest in _FLAG_DEST.items():
        typ = str(types[dest])
        conv = int if typ.startswith("int") else float if typ.startswith("float") else str
        common.add_argument(flag, dest=dest, type=conv, default=None)
    common.add_argument("--no-injection", dest="injection", action="store_const", const=False, default=None,
                        help="disable shape and attribute K/V injection")
    common.add_argument("--no-nti", dest="nti", action="store_const", const=False, default=None,
                        help="use the plain null embedding instead of optimized ones")
    common.add_argument("--config", dest="config_file", default=None, help="key = value configuration file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="swli", description="Stage-wise latent injection image editing.")
    parser.add_argument("--version", action="version", version=f"swli {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("invert", parents=[common], help="invert a source (and optional reference) into the cache")
    sub.add_parser("edit", parents=[common], help="edit a source image")
    sub.add_parser("reconstruct", parents=[common], help="reconstruct the source from its inversion")
    ev = sub.add_parser("eval", parents=[common], help="score an output image against source/reference")
    ev.add_argument("image", help="edited image to evaluate")
    return parser


def resolve_config(args) -> RunConfig:
    values = {}
    if args.config_file:
        try:
            text = Path(args.config_file).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("config", f"cannot read {args.config_file}: {exc}") from None
        values.update(parse_config_text(text))
    for name in RunConfig.field_types():
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            values[name] = flag_value
    return RunConfig(**values)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "invert":
            return cmd_invert(cfg)
        if args.command == "edit":
            return cmd_edit(cfg)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg)
        return cmd_eval(cfg, args.image)
    except ConfigError as exc:
        print(f"swli {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SwliError as exc:
        print(f"swli {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
