"""Regularized evolution with surrogate-filtered selection.

Each iteration draws a pool of mutated offspring from tournament-selected
parents, ranks the pool with the surrogate, truly evaluates only the top k,
and inserts them into a fixed-size population with strict oldest-first
eviction.  With no surrogate the k accepted offspring are drawn uniformly
from the pool (the plain-evolution baseline).  In surrogate-as-objective mode
predictions replace true evaluation everywhere and only a final shortlist is
actually evaluated.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .bridge import BridgeClient
from .compiler import TensorShape, compile_tree
from .encoder import encode_plain, encode_with_shapes, parse_arch
from .errors import (
    BridgeError,
    ConfigError,
    EvaluatorError,
    GramevoError,
    LookupMissError,
    SamplingExhaustedError,
    ShapeError,
)
from .features import DEFAULT_GRAF_KINDS, FeatureVector, extract_graf
from .grammar import DerivationTree, Grammar, mutate_subtree, sample_tree
from .surrogate import (
    NONE,
    NORMALIZATION_METHODS,
    TrainingRow,
    TrainingSet,
    fit_forest,
    normalize_merge,
)

logger = logging.getLogger(__name__)

STANDARD = "standard"
SURROGATE_AS_OBJECTIVE = "surrogate_as_objective"

SURROGATE_NONE = "none"
SURROGATE_FOREST = "forest"
SURROGATE_EXTERNAL = "external"

CURRENT_RUN_TAG = "__search__"


@dataclass
class Individual:
    tree: DerivationTree
    encoding: str
    features: FeatureVector | None
    accuracy: float | None
    prediction: float | None
    birth_index: int

    def selection_fitness(self, mode: str) -> float:
        value = self.prediction if mode == SURROGATE_AS_OBJECTIVE else self.accuracy
        return value if value is not None else 0.0


@dataclass
class Population:
    capacity: int
    members: deque = field(default_factory=deque)

    def add(self, individual: Individual) -> None:
        self.members.append(individual)
        while len(self.members) > self.capacity:
            self.members.popleft()  # aging: evict strictly oldest-first

    def __len__(self) -> int:
        return len(self.members)


@dataclass
class SearchConfig:
    population_size: int = 100
    n_candidates: int = 20
    k: int = 5
    # small tournaments keep parent selection gentle so the offspring filter
    # does the heavy lifting; large ones make the baseline near-greedy and
    # mask the surrogate's contribution
    tournament_size: int = 3
    iterations: int = 300
    refit_interval: int | None = None  # defaults: 20 for forest, 100 for external
    surrogate: str = SURROGATE_NONE
    mode: str = STANDARD
    k_final: int = 5
    seed: int = 0
    max_depth: int = 12
    mutation_retries: int = 10
    candidate_retries: int = 10
    n_trees: int = 100
    min_samples_leaf: int = 1
    normalization: str = "none"
    encoding_variant: str = "with_shapes"
    drop_zero_rows: bool = False

    def validate(self) -> None:
        if self.population_size < 1:
            raise ConfigError("search.population_size must be >= 1")
        if self.n_candidates < 1:
            raise ConfigError("search.n_candidates must be >= 1")
        if not 1 <= self.k <= self.n_candidates:
            raise ConfigError("search.k must satisfy 1 <= k <= n_candidates")
        if not 1 <= self.tournament_size <= self.population_size:
            raise ConfigError("search.tournament_size must be in [1, population_size]")
        if self.iterations < 0:
            raise ConfigError("search.iterations must be >= 0")
        if self.surrogate not in (SURROGATE_NONE, SURROGATE_FOREST, SURROGATE_EXTERNAL):
            raise ConfigError(f"surrogate.kind {self.surrogate!r} is not none|forest|external")
        if self.mode not in (STANDARD, SURROGATE_AS_OBJECTIVE):
            raise ConfigError(f"search.mode {self.mode!r} is not standard|surrogate_as_objective")
        if self.mode == SURROGATE_AS_OBJECTIVE and self.surrogate == SURROGATE_NONE:
            raise ConfigError("search.mode surrogate_as_objective requires a surrogate")
        if self.k_final < 1:
            raise ConfigError("search.k_final must be >= 1")
        if self.normalization not in NORMALIZATION_METHODS:
            raise ConfigError(f"normalization {self.normalization!r} unknown")
        if self.max_depth < 1:
            raise ConfigError("search.max_depth must be >= 1")

    def resolved_refit_interval(self) -> int:
        if self.refit_interval is not None:
            return self.refit_interval
        return 100 if self.surrogate == SURROGATE_EXTERNAL else 20


@dataclass
class IterationRecord:
    index: int
    candidates: list[tuple[str, float | None]]
    accepted: list[str]
    evaluated: list[tuple[str, float]]
    best: float

    def to_json_obj(self) -> dict:
        return {
            "iter": self.index,
            "candidates": [
                {"encoding": enc, "prediction": pred} for enc, pred in self.candidates
            ],
            "accepted": list(self.accepted),
            "evaluated": [
                {"encoding": enc, "accuracy": acc} for enc, acc in self.evaluated
            ],
            "best": self.best,
        }


@dataclass
class SearchResult:
    records: list[IterationRecord]
    initial_population: list[tuple[str, float | None]]
    best_encoding: str
    best_fitness: float
    true_evaluations: int
    incidents: int
    final_evaluations: list[tuple[str, float]] = field(default_factory=list)

    def summary_obj(self) -> dict:
        return {
            "best_encoding": self.best_encoding,
            "best_fitness": self.best_fitness,
            "true_evaluations": self.true_evaluations,
            "incidents": self.incidents,
            "iterations": len(self.records),
            "final_evaluations": [
                {"encoding": enc, "accuracy": acc} for enc, acc in self.final_evaluations
            ],
        }


def tournament_select(
    pop: Population, tournament_size: int, rng: np.random.Generator, mode: str = STANDARD
) -> Individual:
    """Uniform subset without replacement; best fitness wins, older breaks ties."""
    members = list(pop.members)
    if not members:
        raise ConfigError("tournament on an empty population")
    size = min(tournament_size, len(members))
    picks = rng.choice(len(members), size=size, replace=False)
    best = None
    for i in sorted(int(p) for p in picks):
        candidate = members[i]
        if best is None:
            best = candidate
            continue
        bf, cf = best.selection_fitness(mode), candidate.selection_fitness(mode)
        if cf > bf or (cf == bf and candidate.birth_index < best.birth_index):
            best = candidate
    return best


class _Run:
    def __init__(self, cfg, grammar, evaluator, input_shape, warm_start, worker_cmd):
        cfg.validate()
        self.cfg = cfg
        self.g = grammar
        self.evaluator = evaluator
        self.input_shape = input_shape
        self.warm_start = warm_start
        self.incidents = 0
        self.true_evaluations = 0
        self.birth_counter = 0
        seq = np.random.SeedSequence(cfg.seed)
        streams = [np.random.Generator(np.random.PCG64(s)) for s in seq.spawn(3)]
        self.rng_init, self.rng_evo, self.rng_fit = streams
        self.history: list[Individual] = []
        self.predicted_pool: list[Individual] = []
        self.client: BridgeClient | None = None
        self.client_dead = False
        self.forest_model = None
        self.transfer_feat: list[TrainingRow] = []
        self.transfer_enc: list[TrainingRow] = []
        if cfg.surrogate == SURROGATE_EXTERNAL:
            if not worker_cmd:
                raise ConfigError("surrogate external requires a worker command")
            self.client = BridgeClient(worker_cmd)
        if cfg.mode == SURROGATE_AS_OBJECTIVE and warm_start is None:
            raise ConfigError(
                "surrogate_as_objective needs warm_start rows: no true labels "
                "arrive during the run"
            )
        if warm_start is not None:
            self._prepare_transfer(warm_start)

    def _incident(self, message: str) -> None:
        self.incidents += 1
        logger.warning("incident: %s", message)

    def _prepare_transfer(self, warm: TrainingSet) -> None:
        for row in warm.rows:
            encoding = row.x.text if hasattr(row.x, "text") else str(row.x)
            self.transfer_enc.append(TrainingRow(encoding, row.y, row.dataset))
            try:
                tree = parse_arch(self.g, encoding)
                graph = compile_tree(self.g, tree, self.input_shape)
            except (GramevoError, ShapeError) as exc:
                self._incident(f"warm-start row skipped for features: {exc}")
                continue
            self.transfer_feat.append(
                TrainingRow(extract_graf(graph), row.y, row.dataset)
            )

    # -- individuals ------------------------------------------------------

    def _featurize(self, tree: DerivationTree) -> FeatureVector | None:
        try:
            graph = compile_tree(self.g, tree, self.input_shape)
        except ShapeError:
            return None
        return extract_graf(graph)

    def _new_individual(self, tree: DerivationTree) -> Individual:
        ind = Individual(
            tree=tree,
            encoding=encode_plain(self.g, tree).text,
            features=self._featurize(tree),
            accuracy=None,
            prediction=None,
            birth_index=self.birth_counter,
        )
        self.birth_counter += 1
        return ind

    def _evaluate(self, ind: Individual) -> None:
        if ind.features is None:
            # failed shape checking inside search: zero fitness, no evaluation cost
            ind.accuracy = 0.0
            return
        try:
            value = self.evaluator.evaluate(ind.tree)
            self.true_evaluations += 1
        except (EvaluatorError, LookupMissError, GramevoError) as exc:
            self._incident(f"evaluation failed for {ind.encoding!r}: {exc}")
            value = 0.0
        ind.accuracy = float(value)

    def _make_candidate(self) -> Individual:
        parent = tournament_select(
            self.population, self.cfg.tournament_size, self.rng_evo, self.cfg.mode
        )
        last_valid = None
        for _ in range(self.cfg.candidate_retries):
            try:
                tree = mutate_subtree(
                    self.g, parent.tree, self.cfg.max_depth, self.rng_evo,
                    retries=self.cfg.mutation_retries,
                )
            except SamplingExhaustedError as exc:
                self._incident(f"mutation exhausted: {exc}")
                continue
            ind = self._new_individual(tree)
            if ind.features is not None:
                return ind
            last_valid = ind
        if last_valid is not None:
            self._incident(
                f"candidate kept after {self.cfg.candidate_retries} non-compiling mutations"
            )
            return last_valid
        self._incident("mutation never produced a tree; falling back to the parent")
        return self._new_individual(parent.tree)

    # -- surrogate --------------------------------------------------------

    def _candidate_encoding(self, ind: Individual) -> str:
        if self.cfg.encoding_variant == "with_shapes" and ind.features is not None:
            return encode_with_shapes(self.g, ind.tree, self.input_shape).text
        return ind.encoding

    def _surrogate_fit(self, include_current: bool) -> None:
        cfg = self.cfg
        if cfg.surrogate == SURROGATE_NONE:
            return
        use_features = cfg.surrogate == SURROGATE_FOREST
        rows: list[TrainingRow] = list(
            self.transfer_feat if use_features else self.transfer_enc
        )
        if include_current:
            for ind in self.history:
                if cfg.drop_zero_rows and ind.accuracy == 0.0:
                    continue
                if use_features:
                    if ind.features is None:
                        continue
                    rows.append(TrainingRow(ind.features, ind.accuracy, CURRENT_RUN_TAG))
                else:
                    rows.append(
                        TrainingRow(self._candidate_encoding(ind), ind.accuracy, CURRENT_RUN_TAG)
                    )
        if not rows:
            self._incident("surrogate fit skipped: no training rows")
            return
        data = TrainingSet(rows=rows)
        if self.warm_start is not None and cfg.normalization != NONE:
            data = normalize_merge(data, cfg.normalization)
        if use_features:
            self.forest_model = fit_forest(
                data,
                n_trees=cfg.n_trees,
                min_samples_leaf=cfg.min_samples_leaf,
                rng=self.rng_fit,
            )
        else:
            if self.client_dead:
                return
            try:
                self.client.fit([(row.x, row.y) for row in data.rows])
            except BridgeError as exc:
                self._incident(f"external surrogate fit failed: {exc}")
                self.client_dead = True

    def _surrogate_predict(self, candidates: list[Individual]) -> None:
        cfg = self.cfg
        if cfg.surrogate == SURROGATE_NONE:
            return
        if cfg.surrogate == SURROGATE_FOREST:
            if self.forest_model is None:
                for ind in candidates:
                    ind.prediction = 0.0
                return
            for ind in candidates:
                if ind.features is None:
                    ind.prediction = 0.0
                    self._incident(f"no features for {ind.encoding!r}; prediction 0")
                else:
                    ind.prediction = self.forest_model.predict([ind.features])[0]
            return
        if self.client_dead:
            for ind in candidates:
                ind.prediction = 0.0
            return
        try:
            # one batched call per iteration, as the wire protocol expects
            values = self.client.predict([self._candidate_encoding(c) for c in candidates])
        except BridgeError as exc:
            self._incident(f"external surrogate predict failed: {exc}")
            self.client_dead = True
            values = [0.0] * len(candidates)
        for ind, value in zip(candidates, values):
            ind.prediction = float(value)

    # -- main loop --------------------------------------------------------

    def run(self) -> SearchResult:
        cfg = self.cfg
        sao = cfg.mode == SURROGATE_AS_OBJECTIVE
        self.population = Population(cfg.population_size)

        initial: list[Individual] = []
        for _ in range(cfg.population_size):
            ind = self._new_individual(sample_tree(self.g, cfg.max_depth, self.rng_init))
            if not sao:
                self._evaluate(ind)
                self.history.append(ind)
            initial.append(ind)

        # initial surrogate fit: transfer rows when warm-started, otherwise
        # the freshly evaluated initial population
        self._surrogate_fit(include_current=self.warm_start is None)

        if sao:
            self._surrogate_predict(initial)
            self.predicted_pool.extend(initial)
        for ind in initial:
            self.population.add(ind)

        def running_best() -> float:
            if sao:
                pool = self.predicted_pool
                return max((i.prediction for i in pool if i.prediction is not None), default=0.0)
            return max((i.accuracy for i in self.history if i.accuracy is not None), default=0.0)

        records: list[IterationRecord] = []
        refit_every = cfg.resolved_refit_interval()
        for iteration in range(1, cfg.iterations + 1):
            candidates = [self._make_candidate() for _ in range(cfg.n_candidates)]
            self._surrogate_predict(candidates)
            if sao:
                self.predicted_pool.extend(candidates)

            if cfg.surrogate == SURROGATE_NONE:
                picks = self.rng_evo.choice(
                    len(candidates), size=cfg.k, replace=False
                )
                accepted = [candidates[int(i)] for i in sorted(int(p) for p in picks)]
            else:
                ranked = sorted(
                    range(len(candidates)),
                    key=lambda i: (-(candidates[i].prediction or 0.0), i),
                )
                accepted = [candidates[i] for i in ranked[: cfg.k]]

            evaluated: list[tuple[str, float]] = []
            for ind in accepted:
                if not sao:
                    self._evaluate(ind)
                    self.history.append(ind)
                    evaluated.append((ind.encoding, ind.accuracy))
                self.population.add(ind)

            records.append(
                IterationRecord(
                    index=iteration,
                    candidates=[(c.encoding, c.prediction) for c in candidates],
                    accepted=[c.encoding for c in accepted],
                    evaluated=evaluated,
                    best=running_best(),
                )
            )

            if not sao and cfg.surrogate != SURROGATE_NONE and iteration % refit_every == 0:
                self._surrogate_fit(include_current=True)

        if self.client is not None:
            self.client.shutdown()

        if sao:
            return self._finish_surrogate_objective(records, initial)
        best = max(
            self.history,
            key=lambda i: ((i.accuracy if i.accuracy is not None else 0.0), -i.birth_index),
        )
        return SearchResult(
            records=records,
            initial_population=[(i.encoding, i.accuracy) for i in initial],
            best_encoding=best.encoding,
            best_fitness=best.accuracy,
            true_evaluations=self.true_evaluations,
            incidents=self.incidents,
        )

    def _finish_surrogate_objective(self, records, initial) -> SearchResult:
        # Shortlist the best-predicted architectures seen anywhere in the run,
        # then spend the only true evaluations of the run on them.
        by_encoding: dict[str, Individual] = {}
        for ind in self.predicted_pool:
            seen = by_encoding.get(ind.encoding)
            if seen is None or (ind.prediction or 0.0) > (seen.prediction or 0.0):
                by_encoding[ind.encoding] = ind
        shortlist = sorted(
            by_encoding.values(),
            key=lambda i: (-(i.prediction or 0.0), i.birth_index),
        )[: self.cfg.k_final]
        final: list[tuple[str, float]] = []
        for ind in shortlist:
            self._evaluate(ind)
            final.append((ind.encoding, ind.accuracy))
        best_encoding, best_fitness = max(final, key=lambda t: t[1])
        return SearchResult(
            records=records,
            initial_population=[(i.encoding, i.prediction) for i in initial],
            best_encoding=best_encoding,
            best_fitness=best_fitness,
            true_evaluations=self.true_evaluations,
            incidents=self.incidents,
            final_evaluations=final,
        )


def run_search(
    cfg: SearchConfig,
    grammar: Grammar,
    evaluator,
    input_shape: TensorShape,
    warm_start: TrainingSet | None = None,
    worker_cmd: list[str] | None = None,
) -> SearchResult:
    """Execute one search run; fully deterministic given the config seed."""
    return _Run(cfg, grammar, evaluator, input_shape, warm_start, worker_cmd).run()
