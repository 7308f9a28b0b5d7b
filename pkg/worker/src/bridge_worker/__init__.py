"""Reference surrogate worker speaking newline-delimited JSON over stdio.

The engine talks to this process with one JSON object per line:

    {"op": "hello", "version": 1}
    {"op": "fit", "rows": [{"encoding": "...", "target": 0.73}, ...]}
    {"op": "predict", "encodings": ["...", ...]}
    {"op": "shutdown"}

and gets back ``{"ok": true, ...}`` or ``{"ok": false, "error": "..."}``,
one object per line, never pretty-printed.  The model is a ridge regression
over bag-of-token counts of the architecture encodings; it is deterministic
(closed-form solve, fixed tokenization) and never crashes on bad frames.

A heavier learned surrogate is a drop-in replacement: anything that answers
this protocol can serve the engine.
"""

from __future__ import annotations

import json
import math
import re
import sys

import numpy as np

PROTOCOL_VERSION = 1

_TOKEN_RE = re.compile(r"[\[\](),<>{}:'\s]+")

DEFAULT_RIDGE_LAMBDA = 1.0


def tokenize(text: str) -> list[str]:
    """Split an encoding into op names, parameters and shape numbers."""
    return [tok for tok in _TOKEN_RE.split(text) if tok]


class TokenModel:
    """Ridge regression over token counts; unseen tokens are ignored."""

    def __init__(self, ridge_lambda: float = DEFAULT_RIDGE_LAMBDA):
        self.ridge_lambda = ridge_lambda
        self.vocabulary: dict[str, int] = {}
        self.weights: np.ndarray | None = None  # last entry is the intercept

    def _count_matrix(self, encodings: list[str]) -> np.ndarray:
        X = np.zeros((len(encodings), len(self.vocabulary) + 1))
        X[:, -1] = 1.0  # intercept column, unpenalized
        for i, text in enumerate(encodings):
            for token in tokenize(text):
                j = self.vocabulary.get(token)
                if j is not None:
                    X[i, j] += 1.0
        return X

    def fit(self, encodings: list[str], targets: list[float]) -> None:
        tokens = sorted({tok for text in encodings for tok in tokenize(text)})
        self.vocabulary = {tok: i for i, tok in enumerate(tokens)}
        X = self._count_matrix(encodings)
        y = np.asarray(targets, dtype=float)
        penalty = self.ridge_lambda * np.eye(X.shape[1])
        penalty[-1, -1] = 0.0  # do not shrink the intercept
        self.weights = np.linalg.solve(X.T @ X + penalty, X.T @ y)

    def predict(self, encodings: list[str]) -> list[float]:
        if self.weights is None:
            raise RuntimeError("predict before fit")
        values = self._count_matrix(encodings) @ self.weights
        return [float(v) for v in values]


def _error(message: str) -> dict:
    return {"ok": False, "error": message}


def handle_request(obj, model: TokenModel) -> tuple[dict, bool]:
    """Returns (response, keep_serving)."""
    if not isinstance(obj, dict) or "op" not in obj:
        return _error("request must be an object with an 'op' field"), True
    op = obj["op"]

    if op == "hello":
        version = obj.get("version")
        if version != PROTOCOL_VERSION:
            return _error(f"unsupported protocol version {version!r}"), True
        return {"ok": True, "version": PROTOCOL_VERSION}, True

    if op == "fit":
        rows = obj.get("rows")
        if not isinstance(rows, list) or not rows:
            return _error("fit needs a non-empty 'rows' list"), True
        encodings, targets = [], []
        for i, row in enumerate(rows):
            if not isinstance(row, dict) or "encoding" not in row or "target" not in row:
                return _error(f"row {i} needs 'encoding' and 'target'"), True
            encoding, target = row["encoding"], row["target"]
            if not isinstance(encoding, str):
                return _error(f"row {i}: encoding must be a string"), True
            if not isinstance(target, (int, float)) or isinstance(target, bool) \
                    or not math.isfinite(target):
                return _error(f"row {i}: target must be a finite number"), True
            encodings.append(encoding)
            targets.append(float(target))
        model.fit(encodings, targets)
        return {"ok": True, "rows": len(rows)}, True

    if op == "predict":
        encodings = obj.get("encodings")
        if not isinstance(encodings, list) or any(not isinstance(e, str) for e in encodings):
            return _error("predict needs a list of encoding strings"), True
        if model.weights is None:
            return _error("predict before fit"), True
        predictions = model.predict(encodings)
        if any(not math.isfinite(v) for v in predictions):
            return _error("model produced a non-finite prediction"), True
        return {"ok": True, "predictions": predictions}, True

    if op == "shutdown":
        return {"ok": True}, False

    return _error(f"unknown op {op!r}"), True


def serve(stdin, stdout, ridge_lambda: float = DEFAULT_RIDGE_LAMBDA) -> None:
    """Answer frames until shutdown or end of input; never crash on bad ones."""
    model = TokenModel(ridge_lambda=ridge_lambda)
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            response, keep = _error(f"malformed JSON frame: {exc.msg}"), True
        else:
            try:
                response, keep = handle_request(obj, model)
            except Exception as exc:  # noqa: BLE001 - protocol: reply, don't die
                response, keep = _error(f"{type(exc).__name__}: {exc}"), True
        stdout.write(json.dumps(response, allow_nan=False))
        stdout.write("\n")
        stdout.flush()
        if not keep:
            break


def main() -> int:
    serve(sys.stdin, sys.stdout)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
