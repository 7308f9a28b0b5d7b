"""Dataset file I/O: JSON-lines rows of architecture encodings and accuracies.

Row shape: {"encoding": str, "accuracy": float in [0, 1], "dataset": str,
"extra_features": {name: number, ...}?}.  Extra feature columns (precomputed
cheap proxies) must share one schema within a file.  All writes go through a
.partial file and are renamed into place only on success.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .compiler import TensorShape, compile_tree
from .encoder import encode_plain
from .errors import DataError, ShapeError
from .features import DEFAULT_GRAF_KINDS, FeatureVector, assemble_input, extract_graf
from .grammar import Grammar, sample_tree


@dataclass(frozen=True)
class DatasetRow:
    encoding: str
    accuracy: float
    dataset: str = "default"
    extra_features: dict[str, float] | None = None

    def to_json_obj(self) -> dict:
        obj = {
            "encoding": self.encoding,
            "accuracy": self.accuracy,
            "dataset": self.dataset,
        }
        if self.extra_features is not None:
            obj["extra_features"] = self.extra_features
        return obj


def read_dataset(path) -> list[DatasetRow]:
    rows: list[DatasetRow] = []
    extra_schema = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc
            if "encoding" not in obj or "accuracy" not in obj:
                raise DataError(f"{path}:{lineno}: row needs 'encoding' and 'accuracy'")
            accuracy = obj["accuracy"]
            if not isinstance(accuracy, (int, float)) or not math.isfinite(accuracy):
                raise DataError(f"{path}:{lineno}: accuracy must be a finite number")
            if not 0.0 <= accuracy <= 1.0:
                raise DataError(f"{path}:{lineno}: accuracy {accuracy} outside [0, 1]")
            extra = obj.get("extra_features")
            if extra is not None:
                schema = tuple(sorted(extra))
                if extra_schema is None:
                    extra_schema = schema
                elif schema != extra_schema:
                    raise DataError(
                        f"{path}:{lineno}: extra_features schema differs from earlier rows"
                    )
            rows.append(
                DatasetRow(
                    encoding=obj["encoding"],
                    accuracy=float(accuracy),
                    dataset=obj.get("dataset", "default"),
                    extra_features=extra,
                )
            )
    return rows


def atomic_write_lines(path, lines) -> None:
    """Write lines through a .partial file, renaming only on success."""
    partial = f"{path}.partial"
    with open(partial, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")
    os.replace(partial, path)


def atomic_write_text(path, text: str) -> None:
    partial = f"{path}.partial"
    with open(partial, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(partial, path)


def write_dataset(path, rows) -> None:
    atomic_write_lines(path, (json.dumps(row.to_json_obj()) for row in rows))


def featurize_rows(
    grammar: Grammar,
    input_shape: TensorShape,
    rows,
    op_kinds=DEFAULT_GRAF_KINDS,
    use_extra: bool = True,
):
    """Parse, compile and featurize dataset rows.

    Returns (features, row) pairs plus the rows that failed shape checking;
    non-compiling architectures carry no topological descriptor and cannot be
    fed to a tabular model.
    """
    from .encoder import parse_arch

    featurized: list[tuple[FeatureVector, DatasetRow]] = []
    skipped: list[DatasetRow] = []
    for row in rows:
        tree = parse_arch(grammar, row.encoding)
        try:
            graph = compile_tree(grammar, tree, input_shape)
        except ShapeError:
            skipped.append(row)
            continue
        graf = extract_graf(graph, op_kinds)
        if use_extra and row.extra_features:
            extra = FeatureVector(
                schema=tuple(sorted(row.extra_features)),
                values=tuple(float(row.extra_features[k]) for k in sorted(row.extra_features)),
            )
            featurized.append((assemble_input(graf, extra), row))
        else:
            featurized.append((graf, row))
    return featurized, skipped


def sample_dataset(
    grammar: Grammar,
    input_shape: TensorShape,
    evaluator,
    n: int,
    seed: int,
    dataset: str = "default",
    max_depth: int = 12,
    transform=None,
) -> list[DatasetRow]:
    """Generate rows by sampling the grammar and scoring with an evaluator.

    ``transform`` optionally remaps the accuracy (e.g. to build range-shifted
    copies of one landscape); results are clipped back into [0, 1].
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    rows = []
    for _ in range(n):
        tree = sample_tree(grammar, max_depth, rng)
        accuracy = evaluator.evaluate(tree)
        if transform is not None:
            accuracy = float(np.clip(transform(accuracy), 0.0, 1.0))
        rows.append(
            DatasetRow(
                encoding=encode_plain(grammar, tree).text,
                accuracy=float(accuracy),
                dataset=dataset,
            )
        )
    return rows
