"""Pluggable fitness evaluation.

True training is out of reach at desk scale, so searches run against one of:

- synthetic_linear: a fixed sigmoid-of-features landscape, learnable from the
  topological descriptor by construction,
- synthetic_depth: a structured landscape rewarding deep-but-normalized
  architectures with diminishing returns,
- replay: exact-match lookup in a dataset of evaluated architectures,
- external_command: a user-supplied process fed the shape-annotated encoding.

Architectures that fail shape checking always evaluate to fitness 0.
"""

from __future__ import annotations

import hashlib
import math
import subprocess

import numpy as np

from .compiler import TensorShape, compile_tree
from .encoder import encode_plain, encode_with_shapes
from .errors import EvaluatorError, LookupMissError, ShapeError
from .features import DEFAULT_GRAF_KINDS, extract_graf
from .grammar import DerivationTree, Grammar, sample_tree

DEFAULT_SIGMA = 0.02
ORACLE_DENSITY = 0.35  # fraction of varying features with nonzero weight
ORACLE_N_POSITIVE = 6  # strong reward directions; the rest of the actives penalize
ORACLE_POSITIVE_MASS = 0.5  # sum of positive weights; caps the reachable optimum
ORACLE_NEGATIVE_MASS = 0.7
ZSCORE_CLIP = 6.0  # winsorized z-scores keep the landscape bounded and climbable
REFERENCE_SAMPLES = 1000
REFERENCE_SEED = 766520931  # fixed so the reference statistics never move


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _arch_noise(oracle_seed: int, encoding: str, sigma: float) -> float:
    """Deterministic per-architecture noise: a pure function of (seed, arch)."""
    if sigma <= 0:
        return 0.0
    digest = hashlib.sha256(f"{oracle_seed}|{encoding}".encode()).digest()
    gen = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
    return float(gen.normal(0.0, sigma))


def reference_feature_stats(
    grammar: Grammar,
    input_shape: TensorShape,
    max_depth: int,
    n_samples: int = REFERENCE_SAMPLES,
    seed: int = REFERENCE_SEED,
    op_kinds=DEFAULT_GRAF_KINDS,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean/std of the feature vector over random samples (failures skipped),
    plus the mask of features that actually vary on this grammar."""
    rng = np.random.Generator(np.random.PCG64(seed))
    rows = []
    for _ in range(n_samples):
        tree = sample_tree(grammar, max_depth, rng)
        try:
            graph = compile_tree(grammar, tree, input_shape)
        except ShapeError:
            continue
        rows.append(extract_graf(graph, op_kinds).values)
    if not rows:
        raise EvaluatorError("no reference sample compiled; check the grammar")
    matrix = np.asarray(rows, dtype=float)
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    varying = std > 1e-12
    std = np.where(varying, std, 1.0)
    return mean, std, varying


class SyntheticLinearEvaluator:
    """Sigmoid of a fixed linear form over the winsorized z-scored features.

    The weight draw gives the landscape a searchable structure: a handful of
    strong positive directions to climb and many weak penalties, so that
    undirected growth is punished and the reachable optimum stays inside the
    sigmoid's discriminative band instead of pinning at the clamp.
    """

    kind = "synthetic_linear"

    def __init__(
        self,
        grammar: Grammar,
        input_shape: TensorShape,
        oracle_seed: int = 0,
        sigma: float = DEFAULT_SIGMA,
        max_depth: int = 12,
        op_kinds=DEFAULT_GRAF_KINDS,
    ):
        self.grammar = grammar
        self.input_shape = input_shape
        self.oracle_seed = oracle_seed
        self.sigma = sigma
        self.max_depth = max_depth
        self.op_kinds = tuple(op_kinds)
        self.mean, self.std, self.varying = reference_feature_stats(
            grammar, input_shape, max_depth, op_kinds=self.op_kinds
        )
        gen = np.random.Generator(np.random.PCG64(oracle_seed))
        d = len(self.mean)
        # only features that actually vary on this grammar can carry reward,
        # otherwise a draw could land on an unclimbable landscape
        varying = np.flatnonzero(self.varying)
        picked = varying[gen.random(len(varying)) < ORACLE_DENSITY]
        if len(picked) < ORACLE_N_POSITIVE + 1:
            picked = varying[: ORACLE_N_POSITIVE + 5]
        active = picked
        magnitudes = np.abs(gen.normal(size=len(active)))
        positive = gen.choice(len(active), size=ORACLE_N_POSITIVE, replace=False)
        signs = -np.ones(len(active))
        signs[positive] = 1.0
        pos_mass = magnitudes[signs > 0].sum()
        neg_mass = magnitudes[signs < 0].sum()
        weights = np.zeros(d)
        weights[active] = np.where(
            signs > 0,
            magnitudes * (ORACLE_POSITIVE_MASS / max(pos_mass, 1e-12)),
            -magnitudes * (ORACLE_NEGATIVE_MASS / max(neg_mass, 1e-12)),
        )
        self.weights = weights
        self.bias = float(gen.normal() * 0.3)

    def base_fitness(self, tree: DerivationTree) -> float:
        """Noise-free landscape value; raises ShapeError for invalid trees."""
        graph = compile_tree(self.grammar, tree, self.input_shape)
        values = np.asarray(extract_graf(graph, self.op_kinds).values)
        z = np.clip((values - self.mean) / self.std, -ZSCORE_CLIP, ZSCORE_CLIP)
        return _sigmoid(float(self.weights @ z) + self.bias)

    def evaluate(self, tree: DerivationTree) -> float:
        try:
            base = self.base_fitness(tree)
        except ShapeError:
            return 0.0
        noise = _arch_noise(self.oracle_seed, encode_plain(self.grammar, tree).text, self.sigma)
        return float(np.clip(base + noise, 0.0, 1.0))

    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "oracle_seed": self.oracle_seed,
            "sigma": self.sigma,
            "max_depth": self.max_depth,
            "reference_seed": REFERENCE_SEED,
            "reference_samples": REFERENCE_SAMPLES,
        }


class SyntheticDepthEvaluator:
    """Monotone in the longest path through linear ops and the norm count,
    both with diminishing returns."""

    kind = "synthetic_depth"

    def __init__(
        self,
        grammar: Grammar,
        input_shape: TensorShape,
        oracle_seed: int = 0,
        sigma: float = DEFAULT_SIGMA,
        max_depth: int = 12,
        op_kinds=DEFAULT_GRAF_KINDS,
    ):
        self.grammar = grammar
        self.input_shape = input_shape
        self.oracle_seed = oracle_seed
        self.sigma = sigma
        self.max_depth = max_depth
        self.op_kinds = tuple(op_kinds)

    def base_fitness(self, tree: DerivationTree) -> float:
        graph = compile_tree(self.grammar, tree, self.input_shape)
        features = extract_graf(graph, self.op_kinds).as_dict()
        linear_path = max(features["linear_max_path"], 0.0)
        norm_count = features["norm_count"]
        # gentle saturation keeps the climb long; asymptote 0.74 keeps the
        # noise clamp at 1.0 out of reach
        return 0.62 * (1.0 - math.exp(-linear_path / 20.0)) + 0.12 * (
            1.0 - math.exp(-norm_count / 20.0)
        )

    def evaluate(self, tree: DerivationTree) -> float:
        try:
            base = self.base_fitness(tree)
        except ShapeError:
            return 0.0
        noise = _arch_noise(self.oracle_seed, encode_plain(self.grammar, tree).text, self.sigma)
        return float(np.clip(base + noise, 0.0, 1.0))

    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "oracle_seed": self.oracle_seed,
            "sigma": self.sigma,
            "max_depth": self.max_depth,
        }


class ReplayEvaluator:
    """Exact-match lookup of the plain encoding in a fixed table."""

    kind = "replay"

    def __init__(self, grammar: Grammar, table: dict[str, float], source: str = "<memory>"):
        self.grammar = grammar
        self.table = dict(table)
        self.source = source

    @classmethod
    def from_rows(cls, grammar: Grammar, rows, source: str = "<memory>") -> "ReplayEvaluator":
        return cls(grammar, {row.encoding: row.accuracy for row in rows}, source)

    def evaluate(self, tree: DerivationTree) -> float:
        encoding = encode_plain(self.grammar, tree).text
        if encoding not in self.table:
            raise LookupMissError(f"no replay entry for {encoding!r}")
        return self.table[encoding]

    def manifest(self) -> dict:
        return {"kind": self.kind, "source": self.source, "entries": len(self.table)}


class ExternalCommandEvaluator:
    """Spawns a command per evaluation: shape-annotated encoding on stdin,
    one decimal number on stdout, exit code 0."""

    kind = "external_command"

    def __init__(
        self,
        grammar: Grammar,
        input_shape: TensorShape,
        argv: list[str],
        timeout: float = 60.0,
    ):
        self.grammar = grammar
        self.input_shape = input_shape
        self.argv = list(argv)
        self.timeout = timeout

    def evaluate(self, tree: DerivationTree) -> float:
        try:
            encoding = encode_with_shapes(self.grammar, tree, self.input_shape).text
        except ShapeError:
            return 0.0
        try:
            proc = subprocess.run(
                self.argv,
                input=encoding,
                capture_output=True,
                text=True,
                timeout=self.timeout,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise EvaluatorError(f"external command failed: {exc}") from exc
        if proc.returncode != 0:
            raise EvaluatorError(
                f"external command exited {proc.returncode}: {proc.stderr.strip()}"
            )
        try:
            value = float(proc.stdout.strip())
        except ValueError as exc:
            raise EvaluatorError(
                f"external command printed non-numeric output: {proc.stdout!r}"
            ) from exc
        if not math.isfinite(value):
            raise EvaluatorError(f"external command printed {value}")
        return value

    def manifest(self) -> dict:
        return {"kind": self.kind, "argv": self.argv, "timeout": self.timeout}


def build_evaluator(config: dict, grammar: Grammar, input_shape: TensorShape):
    """Construct an evaluator from its config mapping (used by the CLI)."""
    kind = config.get("kind")
    if kind == "synthetic_linear":
        return SyntheticLinearEvaluator(
            grammar,
            input_shape,
            oracle_seed=config.get("oracle_seed", 0),
            sigma=config.get("sigma", DEFAULT_SIGMA),
            max_depth=config.get("max_depth", 12),
        )
    if kind == "synthetic_depth":
        return SyntheticDepthEvaluator(
            grammar,
            input_shape,
            oracle_seed=config.get("oracle_seed", 0),
            sigma=config.get("sigma", DEFAULT_SIGMA),
            max_depth=config.get("max_depth", 12),
        )
    if kind == "replay":
        from .dataset import read_dataset

        rows = read_dataset(config["path"])
        return ReplayEvaluator.from_rows(grammar, rows, source=str(config["path"]))
    if kind == "external_command":
        return ExternalCommandEvaluator(
            grammar, input_shape, config["argv"], timeout=config.get("timeout", 60.0)
        )
    raise EvaluatorError(f"unknown evaluator kind {kind!r}")
