"""Drifting multi-property objectives over token sequences and drift-aware metrics.

The objective at step ``t`` is ``f_t(x) = sum_k alpha[t, k] s_k(x)``, where
``s_k`` is the normalized edit similarity to the k-th reference sequence and the
rows of ``alpha`` are softmaxed draws of independent SE-kernel GP paths.
Component scores are cached per design so that re-scoring logged designs under
a later objective never calls the oracle again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import cholesky
from scipy.special import softmax
from scipy.stats import rankdata

from .alignment import design_distance
from .latent_model import DesignSequence


@dataclass(frozen=True)
class WeightSchedule:
    alphas: np.ndarray
    latent: np.ndarray
    temperature: float = 1.0
    lengthscale_rel: float = 0.2
    seed: int | None = None

    @property
    def horizon(self) -> int:
        return self.alphas.shape[0]

    @property
    def num_components(self) -> int:
        return self.alphas.shape[1]

    def weights(self, t: int) -> np.ndarray:
        if not 1 <= t <= self.horizon:
            raise IndexError(f"time step {t} outside [1, {self.horizon}]")
        return self.alphas[t - 1]


def _np_cholesky(K: np.ndarray, max_tries: int = 6) -> np.ndarray:
    jitter = 1e-8 * max(float(np.mean(np.diag(K))), 1e-12)
    for _ in range(max_tries + 1):
        try:
            return cholesky(K + jitter * np.eye(len(K)), lower=True)
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise np.linalg.LinAlgError("Cholesky failed after jitter escalation")


def generate_weight_schedule(
    T: int,
    K: int,
    lengthscale_rel: float = 0.2,
    temperature: float = 1.0,
    rng: np.random.Generator | int | None = None,
    variance: float = 1.0,
) -> WeightSchedule:
    """Softmax of ``K`` GP paths on ``t = 1..T`` with lengthscale ``lengthscale_rel * T``."""
    if T < 1 or K < 2:
        raise ValueError("need T >= 1 and K >= 2")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = np.random.default_rng(rng)
    eps = rng.standard_normal((T, K))
    if variance > 0:
        grid = np.arange(1, T + 1, dtype=float)
        ell = lengthscale_rel * T
        Kw = variance * np.exp(-0.5 * (grid[:, None] - grid[None, :]) ** 2 / ell**2)
        latent = _np_cholesky(Kw) @ eps
    else:
        latent = np.zeros((T, K))
    alphas = softmax(temperature * latent, axis=1)
    return WeightSchedule(alphas, latent, temperature, lengthscale_rel, seed)


def constant_schedule(T: int, weights) -> WeightSchedule:
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    return WeightSchedule(np.tile(w, (T, 1)), np.tile(np.log(w), (T, 1)), 1.0, math.inf, None)


@dataclass
class PropertyScorer:
    """Normalized edit similarity to each reference design, cached per design."""

    references: tuple[DesignSequence, ...]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.references = tuple(self.references)
        if len(self.references) < 2:
            raise ValueError("need at least two references")
        if len(set(self.references)) != len(self.references):
            raise ValueError("references must be distinct")

    @property
    def num_components(self) -> int:
        return len(self.references)

    def scores(self, x: DesignSequence) -> np.ndarray:
        hit = self._cache.get(x)
        if hit is None:
            hit = np.array([1.0 - design_distance(x, r) for r in self.references])
            self._cache[x] = hit
        return hit.copy()


def score_components(x: DesignSequence, scorer: PropertyScorer) -> np.ndarray:
    return scorer.scores(x)


class OracleCounter:
    """Counts objective evaluations."""

    def __init__(self) -> None:
        self.calls = 0


def evaluate_objective(
    x: DesignSequence,
    t: int,
    schedule: WeightSchedule,
    scorer: PropertyScorer,
    noise_sd: float = 0.0,
    rng: np.random.Generator | None = None,
    counter: OracleCounter | None = None,
) -> float:
    alpha = schedule.weights(t)
    value = float(alpha @ scorer.scores(x))
    if counter is not None:
        counter.calls += 1
    if noise_sd > 0:
        if rng is None:
            raise ValueError("a generator is required when noise_sd > 0")
        value += noise_sd * float(rng.standard_normal())
    return value


@dataclass(frozen=True)
class LogEntry:
    design: DesignSequence
    iteration: int
    component_scores: np.ndarray
    observed_value: float


class ObservationLog:
    """Append-only record of evaluated designs in evaluation order."""

    def __init__(self, entries: Sequence[LogEntry] = ()):
        self.entries: list[LogEntry] = []
        for e in entries:
            self.append(e)

    def append(self, entry: LogEntry) -> None:
        if self.entries and entry.iteration < self.entries[-1].iteration:
            raise ValueError("iterations must be non-decreasing in insertion order")
        scores = np.asarray(entry.component_scores, dtype=float)
        if np.any(scores < 0) or np.any(scores > 1):
            raise ValueError("component scores must lie in [0, 1]")
        self.entries.append(entry)

    def record(self, design: DesignSequence, iteration: int, scores, value: float) -> LogEntry:
        entry = LogEntry(design, int(iteration), np.asarray(scores, dtype=float), float(value))
        self.append(entry)
        return entry

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def iterations(self) -> np.ndarray:
        return np.array([e.iteration for e in self.entries], dtype=int)

    @property
    def score_matrix(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 0))
        return np.stack([e.component_scores for e in self.entries])


def best_per_time(log: ObservationLog, t: int, schedule: WeightSchedule, scorer: PropertyScorer | None = None) -> float:
    """Best noiseless ``f_t`` over designs logged at or before ``t``."""
    mask = log.iterations <= t
    if not mask.any():
        raise ValueError(f"no logged designs at or before iteration {t}")
    return float((log.score_matrix[mask] @ schedule.weights(t)).max())


def best_per_time_curve(log: ObservationLog, schedule: WeightSchedule, times: Sequence[int]) -> np.ndarray:
    its = log.iterations
    S = log.score_matrix
    out = np.empty(len(times))
    for i, t in enumerate(times):
        mask = its <= t
        if not mask.any():
            raise ValueError(f"no logged designs at or before iteration {t}")
        out[i] = (S[mask] @ schedule.weights(t)).max()
    return out


def _check_covered(log: ObservationLog, times: Sequence[int]) -> None:
    present = set(log.iterations.tolist())
    missing = [t for t in times if t not in present]
    if missing:
        raise ValueError(f"log has no entries for iterations {missing[:10]}")


def cumulative_regret(log: ObservationLog, schedule: WeightSchedule, scorer: PropertyScorer | None, horizon: int, start: int = 1, optimum: float = 1.0) -> np.ndarray:
    """Running sum of ``optimum - best_per_time`` over ``start .. start + horizon - 1``."""
    times = list(range(start, start + horizon))
    _check_covered(log, times)
    return np.cumsum(optimum - best_per_time_curve(log, schedule, times))


def instantaneous_value(log: ObservationLog, schedule: WeightSchedule, scorer: PropertyScorer | None, iterations: Sequence[int] | None = None) -> np.ndarray:
    """Best noiseless value within each iteration's own batch."""
    its = log.iterations
    if iterations is None:
        iterations = sorted(set(its.tolist()))
    _check_covered(log, iterations)
    S = log.score_matrix
    return np.array([(S[its == t] @ schedule.weights(t)).max() for t in iterations])


def rank_baselines(regrets: Mapping[str, np.ndarray], t: int) -> dict[str, float]:
    """Ascending ranks of cumulative regret at step ``t`` (1-based); ties share the mean rank."""
    names = list(regrets)
    vals = [float(np.asarray(regrets[n])[t - 1]) for n in names]
    return dict(zip(names, rankdata(vals, method="average").tolist()))


def nearest_rank_quantile(sorted_values: np.ndarray, q: float) -> float:
    n = len(sorted_values)
    k = max(1, math.ceil(q * n))
    return float(sorted_values[min(k, n) - 1])


def corpus_reference_curves(corpus: Sequence[DesignSequence], schedule: WeightSchedule, scorer: PropertyScorer, quantiles: Sequence[float] = (0.95, 0.99, 0.999, 0.9999)) -> dict:
    """Per-step corpus maximum and upper nearest-rank quantiles of ``f_t``."""
    if len(corpus) == 0:
        raise ValueError("corpus must be non-empty")
    S = np.stack([scorer.scores(x) for x in corpus])
    values = np.sort(S @ schedule.alphas.T, axis=0)  # [n, T]
    return {
        "max": values[-1].copy(),
        "quantiles": {float(q): np.array([nearest_rank_quantile(values[:, j], q) for j in range(values.shape[1])]) for q in quantiles},
    }


# -- synthetic design space ------------------------------------------------


def random_design(rng: np.random.Generator, num_tokens: int, min_length: int, max_length: int) -> DesignSequence:
    n = int(rng.integers(min_length, max_length + 1))
    return DesignSequence(tuple(rng.integers(0, num_tokens, n).tolist()))


def mutate(x: DesignSequence, num_edits: int, rng: np.random.Generator, num_tokens: int, max_length: int) -> DesignSequence:
    """Apply random substitutions, insertions and deletions."""
    tokens = list(x.tokens)
    for _ in range(num_edits):
        op = rng.integers(3)
        if op == 1 and len(tokens) < max_length:
            tokens.insert(int(rng.integers(len(tokens) + 1)), int(rng.integers(num_tokens)))
        elif op == 2 and len(tokens) > 1:
            del tokens[int(rng.integers(len(tokens)))]
        else:
            tokens[int(rng.integers(len(tokens)))] = int(rng.integers(num_tokens))
    return DesignSequence(tuple(tokens))


def make_references(K: int, length: int, num_tokens: int, rng: np.random.Generator, min_distance: float = 0.5, max_tries: int = 10000) -> tuple[DesignSequence, ...]:
    refs: list[DesignSequence] = []
    for _ in range(max_tries):
        cand = DesignSequence(tuple(rng.integers(0, num_tokens, length).tolist()))
        if all(design_distance(cand, r) >= min_distance for r in refs):
            refs.append(cand)
            if len(refs) == K:
                return tuple(refs)
    raise RuntimeError("could not draw mutually distant references")


def generate_corpus(
    references: Sequence[DesignSequence],
    size: int,
    num_tokens: int,
    max_length: int,
    rng: np.random.Generator,
    mutation_fraction: float = 0.5,
    edit_range: tuple[int, int] | None = None,
) -> list[DesignSequence]:
    """Noisy mutations of the references mixed with uniform random sequences.

    Mutants receive between ``max_length // 2`` and ``3 * max_length // 4``
    random edits unless ``edit_range`` says otherwise, and never reproduce a
    reference exactly.
    """
    if edit_range is None:
        edit_range = (max(1, max_length // 2), max(1, 3 * max_length // 4))
    refs = set(references)
    out = []
    for _ in range(size):
        if rng.random() < mutation_fraction:
            ref = references[int(rng.integers(len(references)))]
            x = ref
            while x in refs:
                x = mutate(ref, int(rng.integers(edit_range[0], edit_range[1] + 1)), rng, num_tokens, max_length)
            out.append(x)
        else:
            out.append(random_design(rng, num_tokens, max(1, max_length // 2), max_length))
    return out


@dataclass(frozen=True)
class TaskConfig:
    name: str = "median-2"
    num_components: int = 2
    reference_seed: int = 0
    schedule_seed: int = 0
    corpus_seed: int = 0
    corpus_size: int = 10000
    lengthscale_rel: float = 0.2
    temperature: float = 1.0
    noise_sd: float = 0.0
    drift: bool = True
    min_reference_distance: float = 0.5
    min_edit_fraction: float = 0.5
    max_edit_fraction: float = 0.75

    def __post_init__(self) -> None:
        if not 0.0 < self.min_edit_fraction <= self.max_edit_fraction <= 1.0:
            raise ValueError("need 0 < min_edit_fraction <= max_edit_fraction <= 1")


TASKS = {
    "median-2": TaskConfig("median-2", 2, reference_seed=11, schedule_seed=21, corpus_seed=31),
    "composite-3": TaskConfig("composite-3", 3, reference_seed=12, schedule_seed=22, corpus_seed=32),
}


@dataclass
class Task:
    """A concrete benchmark instance: references, scorer, weight schedule and corpus."""

    config: TaskConfig
    scorer: PropertyScorer
    schedule: WeightSchedule
    corpus: list[DesignSequence]

    @classmethod
    def build(cls, config: TaskConfig, horizon: int, num_tokens: int, max_length: int) -> "Task":
        refs = make_references(config.num_components, max_length, num_tokens, np.random.default_rng(config.reference_seed), config.min_reference_distance)
        scorer = PropertyScorer(refs)
        schedule = generate_weight_schedule(horizon, config.num_components, config.lengthscale_rel, config.temperature, config.schedule_seed)
        if not config.drift:
            schedule = constant_schedule(horizon, schedule.alphas[0])
        edits = (max(1, round(config.min_edit_fraction * max_length)), max(1, round(config.max_edit_fraction * max_length)))
        corpus = generate_corpus(refs, config.corpus_size, num_tokens, max_length, np.random.default_rng(config.corpus_seed), edit_range=edits)
        return cls(config, scorer, schedule, corpus)
