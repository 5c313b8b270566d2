"""Access to the user's log density: in-process callables or a child process.

Child process protocol
----------------------
Newline-delimited UTF-8 JSON over the child's stdin/stdout.

* On start the child writes ``{"hello": "vbmc-target", "dim": D}``.
* Request: ``{"id": <int>, "x": [<float>, ...]}``.
* Response: ``{"id": <int>, "log_density": <float or "nan">, "noise_sd": <float>}``
  (``noise_sd`` optional) or ``{"error": "<message>"}``.
* Closing the child's stdin asks it to exit.

Floats are written with ``repr`` precision (17 significant digits), which
round-trips doubles exactly.
"""

from __future__ import annotations

import enum
import json
import math
import queue
import subprocess
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, TargetError

__all__ = [
    "Evaluation",
    "TargetKind",
    "TargetDescriptor",
    "CallableTarget",
    "SubprocessTarget",
    "as_target",
    "evaluate",
    "evaluate_batch",
    "serve",
    "HELLO",
]

HELLO = "vbmc-target"


@dataclass(frozen=True)
class Evaluation:
    x: np.ndarray
    log_density: float
    noise_sd: float | None = None
    wall_time: float = 0.0
    start_time: float = 0.0
    message: str = ""

    @property
    def failed(self) -> bool:
        return not math.isfinite(self.log_density)


class TargetKind(enum.Enum):
    IN_PROCESS = "python"
    SUBPROCESS = "subprocess"


@dataclass(frozen=True)
class TargetDescriptor:
    kind: TargetKind
    reentrant: bool = False
    command: tuple[str, ...] = ()
    evaluation_timeout: float = 600.0
    callable: object = None

    def __post_init__(self):
        if self.kind is TargetKind.SUBPROCESS and not self.command:
            raise ValueError("subprocess targets need a command")
        if self.kind is TargetKind.IN_PROCESS and not callable(self.callable):
            raise ValueError("in-process targets need a callable")

    def build(self, space=None):
        if self.kind is TargetKind.SUBPROCESS:
            return SubprocessTarget(self.command, space=space, reentrant=self.reentrant,
                                    timeout=self.evaluation_timeout)
        return CallableTarget(self.callable, space=space, reentrant=self.reentrant)


def _parse_density(value):
    if isinstance(value, str):
        if value.strip().lower() in ("nan", "inf", "+inf", "-inf", "infinity", "-infinity"):
            return float(value.strip().lower().replace("infinity", "inf"))
        raise ValueError(f"log_density must be a number or 'nan', got {value!r}")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"log_density must be a number, got {value!r}")
    return float(value)


def _parse_noise(value):
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"noise_sd must be a number, got {value!r}")
    value = float(value)
    if not (math.isfinite(value) and value >= 0):
        raise ValueError(f"noise_sd must be finite and non-negative, got {value}")
    return value


class _Target:
    space = None
    reentrant = False

    def _check(self, x):
        x = np.asarray(x, dtype=float).ravel()
        if self.space is not None:
            if x.size != self.space.dim:
                raise DomainError(f"expected {self.space.dim} coordinates, got {x.size}")
            if not self.space.is_interior(x):
                raise DomainError(f"point outside hard bounds: {x}")
        return x

    def evaluate(self, x) -> Evaluation:
        raise NotImplementedError

    def evaluate_batch(self, X) -> list[Evaluation]:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        for row in X:
            self._check(row)
        if self.reentrant and X.shape[0] > 1:
            return self._evaluate_concurrent(X)
        results = []
        for row in X:
            try:
                results.append(self.evaluate(row))
            except TargetError as exc:
                raise TargetError(str(exc), point=row, partial=results) from exc
        return results

    def _evaluate_concurrent(self, X):
        with ThreadPoolExecutor(max_workers=X.shape[0]) as pool:
            futures = [pool.submit(self.evaluate, row) for row in X]
        results = []
        for row, fut in zip(X, futures):
            try:
                results.append(fut.result())
            except TargetError as exc:
                raise TargetError(str(exc), point=row, partial=results) from exc
        return results

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class CallableTarget(_Target):
    """Wraps ``fn(x) -> log_density`` or ``fn(x) -> (log_density, noise_sd)``."""

    def __init__(self, fn, space=None, reentrant: bool = False):
        self.fn = fn
        self.space = space
        self.reentrant = reentrant

    def evaluate(self, x) -> Evaluation:
        x = self._check(x)
        start = time.monotonic()
        try:
            out = self.fn(x.copy())
        except Exception as exc:
            raise TargetError(f"target raised {type(exc).__name__}: {exc}", point=x) from exc
        wall = time.monotonic() - start
        noise = None
        if isinstance(out, tuple):
            if len(out) != 2:
                raise TargetError("target must return a value or a (value, noise_sd) pair", point=x)
            out, noise = out
        try:
            value = float(out)
            noise = _parse_noise(None if noise is None else float(noise))
        except (TypeError, ValueError) as exc:
            raise TargetError(f"malformed target output: {exc}", point=x) from exc
        return Evaluation(x, value, noise, wall, start)


_EOF = object()


class SubprocessTarget(_Target):
    """One persistent child process speaking the line protocol.

    The child is started lazily on the first evaluation (or explicitly via
    :meth:`start`) and restarted after a timeout or crash.
    """

    def __init__(self, command, space=None, reentrant: bool = False, timeout: float = 600.0,
                 dim: int | None = None, stderr=subprocess.DEVNULL):
        self.command = [command] if isinstance(command, str) else list(command)
        self.space = space
        self.reentrant = reentrant
        self.timeout = float(timeout)
        self.dim = dim if dim is not None else (space.dim if space is not None else None)
        self._stderr = stderr
        self._proc = None
        self._lines = None
        self._stash = {}
        self._next_id = 0
        self._lock = threading.Lock()

    # -- lifecycle -------------------------------------------------------------

    def start(self):
        if self._proc is not None:
            return
        try:
            proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=self._stderr,
                text=True, encoding="utf-8", bufsize=1,
            )
        except OSError as exc:
            raise TargetError(f"cannot launch {self.command!r}: {exc}") from exc
        lines = queue.Queue()

        def pump():
            for line in proc.stdout:
                lines.put(line)
            lines.put(_EOF)

        threading.Thread(target=pump, daemon=True).start()
        self._proc, self._lines, self._stash = proc, lines, {}
        msg = self._read_line(time.monotonic() + self.timeout, "handshake")
        try:
            hello = json.loads(msg)
            ok = isinstance(hello, dict) and hello.get("hello") == HELLO
        except json.JSONDecodeError:
            ok = False
        if not ok:
            self._kill()
            raise TargetError(f"bad handshake from child: {msg.strip()!r}")
        expected = self.dim if self.dim is not None else getattr(self.space, "dim", None)
        if expected is not None and hello.get("dim") != expected:
            self._kill()
            raise TargetError(f"child reports dim {hello.get('dim')!r}, expected {expected}")

    def close(self):
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()

    def _kill(self):
        proc, self._proc = self._proc, None
        if proc is not None:
            proc.kill()
            proc.wait()

    # -- wire --------------------------------------------------------------------

    def _read_line(self, deadline, what):
        remaining = deadline - time.monotonic()
        try:
            line = self._lines.get(timeout=max(remaining, 0.0))
        except queue.Empty:
            self._kill()
            raise TargetError(f"child timed out after {self.timeout:g} s waiting for {what}") from None
        if line is _EOF:
            self._kill()
            raise TargetError(f"child exited while waiting for {what}")
        return line

    def _send(self, xs):
        ids = []
        for x in xs:
            rid = self._next_id
            self._next_id += 1
            msg = json.dumps({"id": rid, "x": [float(v) for v in x]})
            try:
                self._proc.stdin.write(msg + "\n")
                self._proc.stdin.flush()
            except (OSError, ValueError) as exc:
                self._kill()
                raise TargetError(f"cannot write to child: {exc}") from exc
            ids.append(rid)
        return ids

    def _receive(self, rid, deadline):
        while rid not in self._stash:
            line = self._read_line(deadline, f"response {rid}")
            if line.lstrip().startswith('{"error":'):
                try:
                    text = json.loads(line)["error"]
                except (json.JSONDecodeError, KeyError, TypeError):
                    text = line.strip()
                raise TargetError(f"child reported error: {text}")
            try:
                msg = json.loads(line)
                got = msg["id"]
                value = _parse_density(msg["log_density"])
                noise = _parse_noise(msg.get("noise_sd"))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise TargetError(f"malformed response {line.strip()!r}: {exc}") from None
            if got != rid and not self.reentrant:
                raise TargetError(f"response id {got!r} does not match request id {rid}")
            self._stash[got] = (value, noise)
        return self._stash.pop(rid)

    # -- evaluation ------------------------------------------------------------

    def evaluate(self, x) -> Evaluation:
        x = self._check(x)
        with self._lock:
            self.start()
            start = time.monotonic()
            (rid,) = self._send([x])
            value, noise = self._receive(rid, start + self.timeout)
            return Evaluation(x, value, noise, time.monotonic() - start, start)

    def _evaluate_concurrent(self, X):
        results = []
        with self._lock:
            self.start()
            start = time.monotonic()
            ids = self._send(X)
            for row, rid in zip(X, ids):
                try:
                    value, noise = self._receive(rid, time.monotonic() + self.timeout)
                except TargetError as exc:
                    raise TargetError(str(exc), point=row, partial=results) from exc
                results.append(Evaluation(row.copy(), value, noise, time.monotonic() - start, start))
        return results


def as_target(target, space=None) -> _Target:
    """Coerce a callable, descriptor or target object into a target."""
    if isinstance(target, _Target):
        if target.space is None:
            target.space = space
        return target
    if isinstance(target, TargetDescriptor):
        return target.build(space)
    if callable(target):
        return CallableTarget(target, space=space)
    raise TypeError(f"cannot use {type(target).__name__} as a target")


def evaluate(target, x) -> Evaluation:
    """Evaluate the log density once; non-finite values give a failed evaluation."""
    return as_target(target).evaluate(x)


def evaluate_batch(target, X) -> list[Evaluation]:
    """Evaluate rows of ``X`` in order (concurrently only for reentrant targets)."""
    return as_target(target).evaluate_batch(X)


def serve(log_density, dim: int, stdin=None, stdout=None):
    """Run the child side of the protocol until stdin closes.

    ``log_density(x)`` returns a float or a ``(float, noise_sd)`` pair.
    Intended for ``if __name__ == "__main__": serve(fn, dim)`` in a user
    script.
    """
    import sys

    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    stdout.write(json.dumps({"hello": HELLO, "dim": dim}) + "\n")
    stdout.flush()
    for line in stdin:
        if not line.strip():
            continue
        try:
            req = json.loads(line)
            out = log_density(np.asarray(req["x"], dtype=float))
            noise = None
            if isinstance(out, tuple):
                out, noise = out
            value = float(out)
            resp = {"id": req["id"], "log_density": value if math.isfinite(value) else "nan"}
            if noise is not None:
                resp["noise_sd"] = float(noise)
            stdout.write(json.dumps(resp) + "\n")
        except Exception as exc:  # reported to the parent, not raised
            stdout.write(json.dumps({"error": f"{type(exc).__name__}: {exc}"}) + "\n")
        stdout.flush()

