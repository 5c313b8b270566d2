"""Command-line front end.

``vbmc run CONFIG`` runs inference from an INI-style config and writes
``result.txt``, ``vp.txt``, ``trace.csv`` and ``evaluations.csv`` into the
output directory. ``vbmc sample RESULT_DIR --n N --seed S`` draws posterior
samples from a finished run into a CSV file.

Exit codes: 0 converged (or success for ``sample``), 2 finished without
converging, 1 error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import importlib
import logging
import re
import shlex
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .demos import DEMOS
from .engine import InferenceResult, Options, run
from .errors import ConfigError, VBMCError
from .posterior import TransformedPosterior
from .space import BoundedSpace
from .target import TargetDescriptor, TargetKind

__all__ = ["RunConfig", "load_config", "cmd_run", "cmd_sample", "main", "TRACE_COLUMNS"]

log = logging.getLogger(__name__)

TRACE_COLUMNS = (
    "iteration", "evaluations", "elbo", "elbo_sd", "divergence", "reliability_index",
    "K", "whitening_applied", "warmup", "wall_time",
)

_INT_OPTIONS = ("seed", "max_evaluations", "init_design_size", "points_per_iteration",
                "entropy_samples_final", "stable_iterations_required", "K_max")
_FLOAT_OPTIONS = ("reliability_threshold",)


@dataclass
class RunConfig:
    path: Path
    target: TargetDescriptor
    space: BoundedSpace
    options: Options
    output_dir: Path
    names: list[str]
    x0: np.ndarray | None = None

    @property
    def seed(self) -> int:
        return self.options.seed


class _Lines:
    """Line numbers of sections and keys, for diagnostics."""

    def __init__(self, path, text):
        self.path = path
        self.index = {}
        section = None
        for lineno, raw in enumerate(text.splitlines(), 1):
            s = raw.strip()
            if not s or s[0] in "#;":
                continue
            m = re.fullmatch(r"\[([^\]]+)\]", s)
            if m:
                section = m.group(1).strip().lower()
                self.index.setdefault((section, None), lineno)
                continue
            m = re.match(r"([^=:]+?)\s*[=:]", s)
            if m and section is not None:
                self.index.setdefault((section, m.group(1).strip().lower()), lineno)

    def error(self, message, section=None, key=None):
        line = self.index.get((section, key)) or self.index.get((section, None))
        return ConfigError(message, self.path, line)


def _vector(text):
    parts = [p for p in re.split(r"[\s,]+", text.strip()) if p]
    return np.array([float(p) for p in parts])


def _bool(text):
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def load_config(path) -> RunConfig:
    """Parse and validate a run config.

    Raises
    ------
    ConfigError
        With a ``path:line:`` prefix pointing at the offending entry.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    lines = _Lines(path, text)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], path, line) from None

    known = {"target", "bounds", "options", "output"}
    for section in parser.sections():
        if section.lower() not in known:
            raise lines.error(f"unknown section [{section}]", section.lower())
    for section in ("target", "bounds"):
        if not parser.has_section(section):
            raise ConfigError(f"missing required section [{section}]", path)
    base = path.parent

    # [bounds]
    b = parser["bounds"]

    def vec(key, required=True):
        if key not in b:
            if required:
                raise lines.error(f"[bounds] missing key '{key}'", "bounds")
            return None
        try:
            return _vector(b[key])
        except ValueError as exc:
            raise lines.error(f"[bounds] {key}: {exc}", "bounds", key) from None

    for key in b:
        if key not in ("lower", "upper", "plausible_lower", "plausible_upper", "names"):
            raise lines.error(f"[bounds] unknown key '{key}'", "bounds", key)
    lower, upper = vec("lower"), vec("upper")
    pl, pu = vec("plausible_lower", False), vec("plausible_upper", False)
    D = lower.size
    for key, arr in (("upper", upper), ("plausible_lower", pl), ("plausible_upper", pu)):
        if arr is not None and arr.size != D:
            raise lines.error(f"[bounds] {key} has {arr.size} entries, lower has {D}", "bounds", key)
    for d in range(D):
        if not lower[d] < upper[d]:
            raise lines.error(
                f"[bounds] dimension {d + 1}: lower ({lower[d]:g}) must be < upper ({upper[d]:g})",
                "bounds", "lower",
            )
    try:
        space = BoundedSpace(lower, upper, pl, pu)
    except ValueError as exc:
        key = "plausible_lower" if "plausible" in str(exc) else "lower"
        raise lines.error(f"[bounds] {exc}", "bounds", key) from None
    names = b.get("names", "").split() or [f"x{d + 1}" for d in range(D)]
    if len(names) != D:
        raise lines.error(f"[bounds] names has {len(names)} entries, expected {D}", "bounds", "names")

    # [target]
    t = parser["target"]
    kind = t.get("kind", "").strip().lower()
    try:
        reentrant = _bool(t.get("reentrant", "false"))
    except ValueError as exc:
        raise lines.error(f"[target] reentrant: {exc}", "target", "reentrant") from None
    try:
        timeout = float(t.get("timeout", "600"))
        if timeout <= 0:
            raise ValueError("must be positive")
    except ValueError as exc:
        raise lines.error(f"[target] timeout: {exc}", "target", "timeout") from None
    if kind == "subprocess":
        command = shlex.split(t.get("command", ""))
        if not command:
            raise lines.error("[target] subprocess targets need 'command'", "target", "kind")
        target = TargetDescriptor(TargetKind.SUBPROCESS, reentrant, tuple(command), timeout)
    elif kind == "python":
        spec = t.get("callable", "")
        module, _, attr = spec.partition(":")
        if not module or not attr:
            raise lines.error("[target] 'callable' must look like module:function", "target", "callable")
        if "path" in t:
            sys.path.insert(0, str((base / t["path"]).resolve()))
        try:
            fn = getattr(importlib.import_module(module), attr)
        except (ImportError, AttributeError) as exc:
            raise lines.error(f"[target] cannot load {spec!r}: {exc}", "target", "callable") from None
        target = TargetDescriptor(TargetKind.IN_PROCESS, reentrant, evaluation_timeout=timeout, callable=fn)
    elif kind == "demo":
        name = t.get("name", "").strip()
        if name not in DEMOS:
            raise lines.error(f"[target] unknown demo {name!r}; choose from {sorted(DEMOS)}", "target", "name")
        if name == "rosenbrock" and D != 2:
            raise lines.error("[target] the rosenbrock demo is two-dimensional", "target", "name")
        target = TargetDescriptor(TargetKind.IN_PROCESS, reentrant, evaluation_timeout=timeout,
                                  callable=DEMOS[name](D))
    else:
        raise lines.error("[target] kind must be one of python, subprocess, demo", "target", "kind")

    # [options]
    options = Options()
    x0 = None
    if parser.has_section("options"):
        o = parser["options"]
        for key in o:
            raw = o[key]
            try:
                if key in _INT_OPTIONS:
                    options = replace(options, **{key: int(raw)})
                elif key in _FLOAT_OPTIONS:
                    options = replace(options, **{key: float(raw)})
                elif key == "noisy":
                    noisy = None if raw.strip().lower() == "auto" else _bool(raw)
                    options = replace(options, noisy=noisy)
                elif key == "x0":
                    x0 = _vector(raw)
                    if x0.size != D or not space.is_interior(x0):
                        raise ValueError("x0 must have one entry per dimension, strictly inside the bounds")
                else:
                    raise lines.error(f"[options] unknown key '{key}'", "options", key)
            except ValueError as exc:
                raise lines.error(f"[options] {key}: {exc}", "options", key) from None

    out = "vbmc-output"
    if parser.has_section("output"):
        for key in parser["output"]:
            if key != "directory":
                raise lines.error(f"[output] unknown key '{key}'", "output", key)
        out = parser["output"].get("directory", out)
    return RunConfig(path, target, space, options, base / out, names, x0)


def _fmt(v) -> str:
    return repr(float(v))


def _join(values) -> str:
    return " ".join(_fmt(v) for v in np.ravel(values))


def write_result(result: InferenceResult, config: RunConfig, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    mean, cov = result.vp.moments(n=200_000, seed=config.seed)
    lines = [
        "format = vbmc-result/1",
        f"converged = {'true' if result.converged else 'false'}",
        f"elbo = {_fmt(result.elbo.elbo)}",
        f"elbo_sd = {_fmt(result.elbo.elbo_sd)}",
        f"expected_log_joint = {_fmt(result.elbo.expected_log_joint)}",
        f"entropy = {_fmt(result.elbo.entropy)}",
        f"evaluations_used = {result.evaluations_used}",
        f"iterations = {len(result.trace)}",
        f"dim = {result.vp.dim}",
        f"K = {result.vp.vp.K}",
        f"names = {' '.join(config.names)}",
        f"mean = {_join(mean)}",
    ]
    lines += [f"cov.{d} = {_join(cov[d])}" for d in range(result.vp.dim)]
    lines.append(f"warnings = {len(result.warnings)}")
    lines += [f"warning.{i} = {w}" for i, w in enumerate(result.warnings)]
    lines.append(f"wall_time = {result.wall_time:.3f}")
    (directory / "result.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (directory / "vp.txt").write_text(result.vp.dumps(), encoding="utf-8")
    write_trace(result.trace, directory / "trace.csv")

    with open(directory / "evaluations.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", *config.names, "log_density", "noise_sd", "wall_time"])
        for i, e in enumerate(result.evaluations):
            noise = "" if e.noise_sd is None else _fmt(e.noise_sd)
            writer.writerow([i, *(_fmt(v) for v in e.x), _fmt(e.log_density), noise, f"{e.wall_time:.6f}"])


def write_trace(trace, path: Path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for rec in trace:
            row = []
            for name in TRACE_COLUMNS:
                value = getattr(rec, name)
                if isinstance(value, bool):
                    row.append("true" if value else "false")
                elif isinstance(value, float):
                    row.append(f"{value:.6f}" if name == "wall_time" else _fmt(value))
                else:
                    row.append(value)
            writer.writerow(row)


def read_trace(path) -> list[dict]:
    """Rows of a ``trace.csv`` with typed values."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rec = {}
            for k, v in row.items():
                if k in ("iteration", "evaluations", "K"):
                    rec[k] = int(v)
                elif k in ("whitening_applied", "warmup"):
                    rec[k] = v == "true"
                else:
                    rec[k] = float(v)
            out.append(rec)
    return out


def read_result(path) -> dict[str, str]:
    fields_ = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        key, sep, value = raw.partition("=")
        if sep:
            fields_[key.strip()] = value.strip()
    if fields_.get("format") != "vbmc-result/1":
        raise ValueError(f"{path}: not a result file")
    return fields_


def cmd_run(config_path) -> int:
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        result = run(config.target, config.space, config.options, x0=config.x0)
    except VBMCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        trace = getattr(exc, "trace", None)
        if trace:
            config.output_dir.mkdir(parents=True, exist_ok=True)
            write_trace(trace, config.output_dir / "trace.csv")
            print(f"partial trace written to {config.output_dir / 'trace.csv'}", file=sys.stderr)
        return 1
    write_result(result, config, config.output_dir)
    status = "converged" if result.converged else "not converged"
    print(f"elbo = {result.elbo.elbo:.4f} +- {result.elbo.elbo_sd:.4f} ({status}, "
          f"{result.evaluations_used} evaluations); results in {config.output_dir}")
    return 0 if result.converged else 2


def cmd_sample(result_dir, n: int, seed: int, out=None) -> int:
    result_dir = Path(result_dir)
    try:
        if n < 1:
            raise ValueError("--n must be positive")
        meta = read_result(result_dir / "result.txt")
        tp = TransformedPosterior.loads((result_dir / "vp.txt").read_text(encoding="utf-8"))
        names = meta.get("names", "").split() or [f"x{d + 1}" for d in range(tp.dim)]
        if len(names) != tp.dim:
            raise ValueError("result.txt names do not match the posterior dimension")
    except (OSError, ValueError) as exc:
        print(f"error: cannot load results from {result_dir}: {exc}", file=sys.stderr)
        return 1
    X = tp.sample(n, seed)
    out = Path(out) if out is not None else result_dir / "samples.csv"
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        writer.writerows([[_fmt(v) for v in row] for row in X])
    print(f"wrote {n} samples to {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vbmc", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per iteration")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run inference from a config file")
    p_run.add_argument("config")
    p_sample = sub.add_parser("sample", help="draw posterior samples from a finished run")
    p_sample.add_argument("result_dir")
    p_sample.add_argument("--n", type=int, required=True)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--out", default=None, help="output CSV (default RESULT_DIR/samples.csv)")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "run":
        return cmd_run(args.config)
    return cmd_sample(args.result_dir, args.n, args.seed, args.out)

