"""Client side of the external-surrogate bridge.

The worker is a child process speaking newline-delimited JSON over its
standard input/output: one request object per line, one response object per
line, strictly serial.  Requests are ``hello``, ``fit``, ``predict`` and
``shutdown``; responses are ``{"ok": true, ...}`` or
``{"ok": false, "error": "..."}``.
"""

from __future__ import annotations

import json
import math
import queue
import subprocess
import threading
from collections import deque

from .errors import (
    BridgeTimeoutError,
    ProtocolError,
    WorkerCrashError,
    WorkerFailure,
)

PROTOCOL_VERSION = 1

DEFAULT_FIT_TIMEOUT = 600.0
DEFAULT_PREDICT_TIMEOUT = 60.0

_EOF = object()


class BridgeClient:
    """Owns one worker process; one request in flight at a time."""

    def __init__(
        self,
        cmd: list[str],
        fit_timeout: float = DEFAULT_FIT_TIMEOUT,
        predict_timeout: float = DEFAULT_PREDICT_TIMEOUT,
        env: dict | None = None,
    ):
        self.cmd = list(cmd)
        self.fit_timeout = fit_timeout
        self.predict_timeout = predict_timeout
        self._proc = subprocess.Popen(
            self.cmd,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            env=env,
        )
        self._lines: queue.Queue = queue.Queue()
        self._stderr_tail: deque[str] = deque(maxlen=100)
        threading.Thread(target=self._read_stdout, daemon=True).start()
        threading.Thread(target=self._read_stderr, daemon=True).start()
        self._closed = False
        self.handshake()

    def _read_stdout(self):
        try:
            for line in self._proc.stdout:
                self._lines.put(line)
        finally:
            self._lines.put(_EOF)

    def _read_stderr(self):
        for line in self._proc.stderr:
            self._stderr_tail.append(line.rstrip("\n"))

    def _stderr_text(self) -> str:
        return "\n".join(self._stderr_tail)

    def _request(self, obj: dict, timeout: float) -> dict:
        if self._closed:
            raise WorkerCrashError("bridge connection already closed")
        try:
            self._proc.stdin.write(json.dumps(obj) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, ValueError, OSError) as exc:
            self._fail()
            raise WorkerCrashError(f"worker pipe broke: {exc}", self._stderr_text()) from exc
        try:
            line = self._lines.get(timeout=timeout)
        except queue.Empty:
            self._fail()
            raise BridgeTimeoutError(
                f"worker did not answer {obj.get('op')!r} within {timeout} s"
            ) from None
        if line is _EOF:
            self._fail()
            raise WorkerCrashError(
                f"worker exited while handling {obj.get('op')!r}", self._stderr_text()
            )
        try:
            response = json.loads(line)
        except json.JSONDecodeError as exc:
            self._fail()
            raise ProtocolError(f"malformed frame from worker: {line!r}") from exc
        if not isinstance(response, dict) or "ok" not in response:
            self._fail()
            raise ProtocolError(f"frame without 'ok' field: {response!r}")
        if response["ok"] is not True:
            raise WorkerFailure(str(response.get("error", "worker reported an error")))
        return response

    def handshake(self) -> None:
        self._request({"op": "hello", "version": PROTOCOL_VERSION}, self.predict_timeout)

    def fit(self, rows: list[tuple[str, float]]) -> None:
        """Block until the worker acknowledges training on (encoding, target) rows."""
        payload = [{"encoding": enc, "target": float(tgt)} for enc, tgt in rows]
        self._request({"op": "fit", "rows": payload}, self.fit_timeout)

    def predict(self, encodings: list[str]) -> list[float]:
        """One finite real per encoding, order preserved."""
        response = self._request(
            {"op": "predict", "encodings": list(encodings)}, self.predict_timeout
        )
        predictions = response.get("predictions")
        if not isinstance(predictions, list) or len(predictions) != len(encodings):
            self._fail()
            raise ProtocolError(
                f"expected {len(encodings)} predictions, got "
                f"{len(predictions) if isinstance(predictions, list) else predictions!r}"
            )
        out = []
        for i, value in enumerate(predictions):
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
                self._fail()
                raise ProtocolError(f"prediction {i} is not a finite number: {value!r}")
            out.append(float(value))
        return out

    def shutdown(self) -> None:
        if self._closed:
            return
        try:
            self._request({"op": "shutdown"}, self.predict_timeout)
        except WorkerCrashError:
            pass
        finally:
            self.close()

    def _fail(self):
        self.close()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            if self._proc.stdin:
                self._proc.stdin.close()
        except OSError:
            pass
        try:
            self._proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()

    def __enter__(self) -> "BridgeClient":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()
