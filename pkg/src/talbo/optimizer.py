"""The time-aware latent-space BO loop, its ablations and baselines."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.stats import qmc

from .alignment import (
    CoincidentLatentWarning,
    InversionConfig,
    design_distance,
    importance_weights,
    invert_latents,
    latent_scale_loss,
    lipschitz_loss,
)
from .benchmark import (
    TASKS,
    ObservationLog,
    OracleCounter,
    Task,
    TaskConfig,
    best_per_time_curve,
    cumulative_regret,
    evaluate_objective,
    instantaneous_value,
)
from .gp_surrogate import (
    DTYPE,
    NonFiniteSurrogateError,
    SurrogateDataset,
    SVGPState,
    _elbo,
    fit_surrogate,
    init_inducing_points,
    thompson_draws,
)
from .kernels import CholeskyError
from .latent_model import DesignSequence, LatentModel, LatentModelConfig, NonFiniteELBOError, train_latent_model
from .trust_region import TrustRegionState, restart_trust_region, trust_region_bounds, update_trust_region

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("iteration", "baseline", "seed", "best_per_time", "cumulative_regret", "instantaneous", "batch_designs")


@dataclass(frozen=True)
class VariantWiring:
    representation_time: bool
    surrogate_time: bool
    trust_region: bool = True
    retrain: bool = True
    inversion: bool = True
    use_surrogate: bool = True

    @property
    def time_agnostic(self) -> bool:
        return not (self.representation_time or self.surrogate_time)


VARIANTS: dict[str, VariantWiring] = {
    "full": VariantWiring(True, True),
    "no_time": VariantWiring(False, False),
    "surrogate_only": VariantWiring(False, True),
    "representation_only": VariantWiring(True, False),
    "lsbo_turbo": VariantWiring(False, False, retrain=False, inversion=False),
    "lsbo_plain": VariantWiring(False, False, trust_region=False, retrain=False, inversion=False),
    "random": VariantWiring(False, False, trust_region=False, retrain=False, inversion=False, use_surrogate=False),
}


@dataclass(frozen=True)
class SurrogateConfig:
    num_inducing: int = 64
    fit_steps: int = 10
    learning_rate: float = 0.05
    noise_variance: float = 1e-2
    temporal_lengthscale: float = 0.1
    num_candidates: int = 512
    inducing_jitter: float = 1e-4


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    learning_rate: float = 1e-2
    batch_size: int = 64
    kl_scale: float = 1e-3
    seed: int = 0
    # offset the pretraining seed by the run seed so decoder variability averages over seeds
    per_run_seed: bool = True

    def for_run(self, run_seed: int) -> "PretrainConfig":
        return replace(self, seed=self.seed * 1_000_003 + run_seed) if self.per_run_seed else self


@dataclass(frozen=True)
class RetrainConfig:
    steps: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 64
    failure_tolerance: int = 10
    improvement_threshold: float = 1e-3
    kl_scale: float = 1e-3


@dataclass(frozen=True)
class RunConfig:
    task: TaskConfig = TASKS["median-2"]
    variant: str = "full"
    seed: int = 0
    horizon: int = 600
    batch_size: int = 10
    num_init: int = 100
    num_init_slots: int = 50
    latent: LatentModelConfig = LatentModelConfig()
    surrogate: SurrogateConfig = SurrogateConfig()
    pretrain: PretrainConfig = PretrainConfig()
    retrain: RetrainConfig = RetrainConfig()
    inversion: InversionConfig = InversionConfig()
    trust_length_init: float = 0.8

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.batch_size < 1 or self.num_init < 1 or self.num_init_slots < 1:
            raise ValueError("horizon, batch_size, num_init and num_init_slots must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")

    @property
    def wiring(self) -> VariantWiring:
        return VARIANTS[self.variant]

    @property
    def total_slots(self) -> int:
        return self.num_init_slots + self.horizon

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class RichRecord:
    design: DesignSequence
    latent: np.ndarray
    iteration: int
    value: float
    covariates: np.ndarray


@dataclass
class LoopState:
    config: RunConfig
    task: Task
    model: LatentModel
    records: list[RichRecord]
    log: ObservationLog
    surrogate: SVGPState | None
    trust: TrustRegionState | None
    rng: np.random.Generator
    torch_gen: torch.Generator
    counter: OracleCounter
    retrain_best: float
    retrain_failures: int = 0
    events: list[dict] = field(default_factory=list)
    batches: dict[int, list[DesignSequence]] = field(default_factory=dict)
    timings: list[float] = field(default_factory=list)

    @property
    def wiring(self) -> VariantWiring:
        return self.config.wiring

    def normalized_time(self, slot: int) -> float:
        return slot / self.config.total_slots

    def latents(self) -> np.ndarray:
        return np.stack([r.latent for r in self.records])


# -- latent model construction ----------------------------------------------

_PRETRAIN_CACHE: dict[str, dict[str, torch.Tensor]] = {}


def _pretrain_key(task: TaskConfig, latent: LatentModelConfig, pretrain: PretrainConfig) -> str:
    blob = json.dumps({"task": asdict(task), "latent": asdict(latent), "pretrain": asdict(pretrain)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def pretrained_model(task: Task, latent: LatentModelConfig, pretrain: PretrainConfig, cache_dir: str | Path | None = None) -> LatentModel:
    """Latent model trained on the task corpus; cached per configuration."""
    key = _pretrain_key(task.config, latent, pretrain)
    model = LatentModel.create(latent, seed=pretrain.seed)
    if key in _PRETRAIN_CACHE:
        model.load_state_dict(_PRETRAIN_CACHE[key])
        return model
    path = Path(cache_dir) / f"pretrain-{key}.npz" if cache_dir is not None else None
    if path is not None and path.exists():
        model = LatentModel.load(path)
    else:
        rng = np.random.default_rng([pretrain.seed, 7])
        times = rng.uniform(0.0, 1.0, len(task.corpus)) if latent.include_time else None
        gen = torch.Generator().manual_seed(pretrain.seed)
        train_latent_model(model, task.corpus, times, pretrain.steps, pretrain.learning_rate, pretrain.batch_size, pretrain.kl_scale, generator=gen)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".{id(model)}.tmp")
            model.save(tmp)
            tmp.replace(path)
    _PRETRAIN_CACHE[key] = model.snapshot()
    return model


def embed_and_align(designs: Sequence[DesignSequence], times, model: LatentModel, inversion: InversionConfig | None) -> tuple[np.ndarray, np.ndarray]:
    """Posterior-mean embeddings refined by decoder inversion.

    Returns ``(codes, converged)``. Rows whose inversion aborted keep the raw
    embedding.
    """
    z0 = model.embed(designs, times)
    if inversion is None or inversion.max_steps == 0:
        decoded = model.decode(z0)
        tol = inversion.distance_tolerance if inversion is not None else 0.0
        return z0, np.array([design_distance(x, d) <= tol for x, d in zip(designs, decoded)])
    z, ok, steps = invert_latents(designs, z0, model.decoder, inversion)
    aborted = ~ok & (steps < inversion.max_steps) & np.all(z == z0, axis=1)
    if aborted.any():
        logger.warning("inversion aborted for %d designs; keeping raw embeddings", int(aborted.sum()))
    return z, ok


def _covariate_times(state: LoopState, slots: Sequence[int]):
    if not state.wiring.representation_time:
        return None
    return [state.normalized_time(s) for s in slots]


# -- initialization -----------------------------------------------------------


def initial_designs(config: RunConfig, task: Task) -> tuple[list[DesignSequence], np.ndarray]:
    """Initial designs drawn from the corpus with slots spread over the pre-loop window.

    Depends only on the run seed, so every variant sees the same designs.
    """
    rng = np.random.default_rng([config.seed, 0])
    idx = rng.choice(len(task.corpus), size=config.num_init, replace=len(task.corpus) < config.num_init)
    designs = [task.corpus[i] for i in idx]
    slots = np.sort(np.round(np.linspace(1, config.num_init_slots, config.num_init)).astype(int))
    return designs, slots


def _variant_index(name: str) -> int:
    return sorted(VARIANTS).index(name)


def initialize(config: RunConfig, task: Task | None = None, cache_dir: str | Path | None = None) -> LoopState:
    task = task or Task.build(config.task, config.total_slots, config.latent.num_design_tokens, config.latent.max_length)
    wiring = config.wiring
    latent_cfg = replace(config.latent, include_time=wiring.representation_time)
    model = pretrained_model(task, latent_cfg, config.pretrain.for_run(config.seed), cache_dir)

    designs, slots = initial_designs(config, task)
    if wiring.time_agnostic:
        slots = np.full_like(slots, config.num_init_slots)
    noise_rng = np.random.default_rng([config.seed, 1])
    rng = np.random.default_rng([config.seed, 2, _variant_index(config.variant)])
    torch_gen = torch.Generator().manual_seed(int(rng.integers(0, 2**62)))
    counter = OracleCounter()
    log = ObservationLog()
    values = []
    for x, s in zip(designs, slots):
        y = evaluate_objective(x, int(s), task.schedule, task.scorer, config.task.noise_sd, noise_rng, counter)
        log.record(x, int(s), task.scorer.scores(x), y)
        values.append(y)

    state = LoopState(config, task, model, [], log, None, None, rng, torch_gen, counter, retrain_best=max(values))
    state.noise_rng = noise_rng  # type: ignore[attr-defined]
    times = _covariate_times(state, slots)
    z, _ = embed_and_align(designs, times, model, config.inversion if wiring.inversion else None)
    covs = model.covariates(designs, times)
    state.records = [RichRecord(x, z[i], int(slots[i]), values[i], covs[i]) for i, x in enumerate(designs)]

    if wiring.use_surrogate:
        state.surrogate = SVGPState(
            config.latent.latent_dim,
            num_inducing=config.surrogate.num_inducing,
            use_time=wiring.surrogate_time,
            temporal_lengthscale=config.surrogate.temporal_lengthscale,
            noise_variance=config.surrogate.noise_variance,
            generator=torch_gen,
            inducing_jitter=config.surrogate.inducing_jitter,
        )
    if wiring.trust_region:
        best = int(np.argmax(values))
        state.trust = TrustRegionState.create(z[best], values[best], config.batch_size, length_init=config.trust_length_init)
    return state


# -- one BO step --------------------------------------------------------------


def _standardize(y: np.ndarray) -> tuple[np.ndarray, float, float]:
    mu = float(y.mean())
    sd = float(y.std())
    sd = sd if sd > 1e-9 else 1.0
    return (y - mu) / sd, mu, sd


def surrogate_dataset(state: LoopState) -> tuple[SurrogateDataset, float, float]:
    y, mu, sd = _standardize(np.array([r.value for r in state.records]))
    t = np.array([state.normalized_time(r.iteration) for r in state.records])
    return SurrogateDataset(state.latents(), t, y), mu, sd


def _refit_surrogate(state: LoopState, data: SurrogateDataset) -> None:
    cfg = state.config.surrogate
    init_inducing_points(state.surrogate, data, state.rng)
    state.surrogate.set_optimal_variational(data)
    try:
        fit_surrogate(data, state.surrogate, cfg.fit_steps, cfg.learning_rate, generator=state.torch_gen, collapsed=True)
    except NonFiniteSurrogateError as exc:
        logger.warning("%s", exc)
        state.events.append({"event": "surrogate_rollback", "n": len(data)})


def _latent_box(state: LoopState) -> tuple[np.ndarray, np.ndarray]:
    z = state.latents()
    lo, hi = z.min(0), z.max(0)
    pad = 1e-6 + 0.0 * hi
    return lo - pad, hi + pad


def _candidates(state: LoopState, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    d = lo.size
    m = state.config.surrogate.num_candidates
    sobol = qmc.Sobol(d, scramble=True, seed=state.rng)
    return qmc.scale(sobol.random(m), lo, hi) if np.all(hi > lo) else np.tile(lo, (m, 1))


def _decode_nonempty(state: LoopState, z: np.ndarray, lo: np.ndarray, hi: np.ndarray, max_retries: int = 10) -> tuple[np.ndarray, list[DesignSequence]]:
    """Decode each code, re-drawing uniformly in ``[lo, hi]`` when the design is empty."""
    z = np.array(z, dtype=float)
    designs = state.model.decode(z)
    for i, x in enumerate(designs):
        tries = 0
        while len(x) == 0:
            if tries == max_retries:
                raise RuntimeError("decoder kept producing empty designs")
            z[i] = state.rng.uniform(lo, hi)
            x = state.model.decode(z[i : i + 1])[0]
            tries += 1
        designs[i] = x
    return z, designs


def _trust_candidates(state: LoopState, max_retries: int) -> tuple[np.ndarray, list[DesignSequence], np.ndarray]:
    lo, hi = _latent_box(state)
    if state.trust is not None:
        # TuRBO's unit cube: side lengths are relative to the latent bounding box
        state.trust = replace(state.trust, weights=hi - lo)
        tlo, thi = trust_region_bounds(state.trust)
        lo, hi = np.maximum(tlo, lo), np.minimum(thi, hi)
    for _ in range(max_retries + 1):
        cand = _candidates(state, lo, hi)
        decoded = state.model.decode(cand)
        valid = np.array([len(x) > 0 for x in decoded])
        if valid.any():
            return cand, decoded, valid
    raise RuntimeError("decoder kept producing empty designs")


def select_batch(state: LoopState, slot: int, max_retries: int = 10) -> tuple[np.ndarray, list[DesignSequence]]:
    """Latent codes for this iteration and their decoded designs.

    Each Thompson draw takes its highest-scoring candidate whose decoded design
    is new to both the batch and the evaluated data, falling back to plain
    argmax when every candidate decodes to a known design.
    """
    B = state.config.batch_size
    if not state.wiring.use_surrogate:
        lo, hi = _latent_box(state)
        return _decode_nonempty(state, state.rng.uniform(lo, hi, size=(B, lo.size)), lo, hi, max_retries)
    data, _, _ = surrogate_dataset(state)
    _refit_surrogate(state, data)
    taken = {r.design for r in state.records}
    cand, decoded, valid = _trust_candidates(state, max_retries)
    if state.trust is not None and not any(v and x not in taken for v, x in zip(valid, decoded)):
        # region narrower than the decoder's resolution: nothing new left to propose
        _restart_trust(state, slot, "trust_region_exhausted")
        cand, decoded, valid = _trust_candidates(state, max_retries)
    t_now = state.normalized_time(slot) if state.wiring.surrogate_time else None
    draws = thompson_draws(state.surrogate, cand, t_now, B, state.torch_gen)
    picks = []
    for b in range(B):
        order = [i for i in np.argsort(-draws[:, b], kind="stable") if valid[i]]
        pick = next((i for i in order if decoded[i] not in taken), order[0])
        taken.add(decoded[pick])
        picks.append(pick)
    return cand[picks], [decoded[i] for i in picks]


def _posterior_mean(state: LoopState, z: np.ndarray, slot: int, mu: float, sd: float) -> np.ndarray:
    t = state.normalized_time(slot) if state.wiring.surrogate_time else None
    with torch.no_grad():
        m, _ = state.surrogate.marginals(torch.as_tensor(z, dtype=DTYPE), None if t is None else torch.full((len(z),), t, dtype=DTYPE))
    return m.numpy() * sd + mu


def _restart_trust(state: LoopState, slot: int, reason: str) -> None:
    """Fresh region on the record the current surrogate rates highest now."""
    data, mu, sd = surrogate_dataset(state)
    if state.surrogate is not None:
        pm = _posterior_mean(state, data.z, slot, mu, sd)
    else:
        pm = np.array([r.value for r in state.records])
    best = int(np.argmax(pm))
    state.trust = restart_trust_region(state.trust, state.records[best].latent, float(pm[best]))
    state.events.append({"event": reason, "iteration": slot - state.config.num_init_slots})


def _update_trust(state: LoopState, batch_z: np.ndarray, values: np.ndarray, slot: int) -> None:
    tr = state.trust
    old_best = tr.best_value
    tr = update_trust_region(tr, values)
    if tr.best_value > old_best:
        tr = replace(tr, center=batch_z[int(np.argmax(values))])
    state.trust = tr
    if tr.restart_triggered:
        _restart_trust(state, slot, "trust_region_restart")


def run_iteration(state: LoopState, t: int) -> list[tuple[DesignSequence, float]]:
    """One loop iteration ``t`` (1-based): select, decode, observe, embed, update."""
    t0 = time.perf_counter()
    cfg = state.config
    slot = cfg.num_init_slots + t
    z, designs = select_batch(state, slot)
    values = np.array([
        evaluate_objective(x, slot, state.task.schedule, state.task.scorer, cfg.task.noise_sd, state.noise_rng, state.counter)  # type: ignore[attr-defined]
        for x in designs
    ])
    for x, y in zip(designs, values):
        state.log.record(x, slot, state.task.scorer.scores(x), float(y))
    times = _covariate_times(state, [slot] * len(designs))
    codes, _ = embed_and_align(designs, times, state.model, cfg.inversion if state.wiring.inversion else None)
    covs = state.model.covariates(designs, times)
    state.records.extend(RichRecord(x, codes[i], slot, float(values[i]), covs[i]) for i, x in enumerate(designs))
    state.batches[t] = designs
    if state.trust is not None:
        _update_trust(state, codes, values, slot)
    maybe_retrain(state, values)
    state.timings.append(time.perf_counter() - t0)
    return list(zip(designs, values.tolist()))


# -- representation updates ---------------------------------------------------


def retrain_loss_fn(state: LoopState, y_std: np.ndarray, times: np.ndarray | None, t_surr: np.ndarray):
    """Alignment and surrogate terms added to the negative ELBO during retraining."""
    n = len(state.records)
    w = importance_weights(y_std)
    y_t = torch.as_tensor(y_std, dtype=DTYPE)
    t_t = torch.as_tensor(t_surr, dtype=DTYPE)

    def extra(idx: np.ndarray, feats: torch.Tensor) -> torch.Tensor:
        z = state.model.mean_embedding(feats)
        loss = lipschitz_loss(z, y_std[idx], w[idx]) + latent_scale_loss(z)
        if state.surrogate is not None:
            it = torch.as_tensor(idx)
            loss = loss - _elbo(state.surrogate, z, t_t[it], y_t[it], n) / n
        return loss

    return extra


def retrain_representation(state: LoopState) -> list[float]:
    """Warm-started combined-loss update of the latent model, then re-embedding."""
    cfg = state.config.retrain
    designs = [r.design for r in state.records]
    slots = [r.iteration for r in state.records]
    times = _covariate_times(state, slots)
    data, _, _ = surrogate_dataset(state)
    snapshot = state.model.snapshot()
    extra = retrain_loss_fn(state, data.y, times, data.t)
    surrogate_flags = []
    if state.surrogate is not None:
        surrogate_flags = [(p, p.requires_grad) for p in state.surrogate.parameters()]
        for p, _ in surrogate_flags:
            p.requires_grad_(False)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CoincidentLatentWarning)
            trace = train_latent_model(
                state.model, designs, times, cfg.steps, cfg.learning_rate, cfg.batch_size, cfg.kl_scale,
                generator=state.torch_gen, extra_loss=extra,
            )
        if not all(math.isfinite(v) for v in trace):
            raise NonFiniteELBOError("non-finite retrain loss")
        codes, _ = embed_and_align(designs, times, state.model, state.config.inversion if state.wiring.inversion else None)
        if not np.all(np.isfinite(codes)):
            raise NonFiniteELBOError("non-finite embeddings after retrain")
    except (NonFiniteELBOError, CholeskyError) as exc:
        logger.warning("retrain diverged (%s); rolling back", exc)
        state.model.load_state_dict(snapshot)
        state.events.append({"event": "retrain_rollback", "n": len(designs)})
        return []
    finally:
        for p, flag in surrogate_flags:
            p.requires_grad_(flag)
    covs = state.model.covariates(designs, times)
    for r, z, c in zip(state.records, codes, covs):
        r.latent, r.covariates = z, c
    if state.trust is not None:
        best = int(np.argmax([r.value for r in state.records]))
        state.trust = replace(state.trust, center=state.records[best].latent.copy())
    state.events.append({"event": "retrain", "n": len(designs)})
    return trace


def maybe_retrain(state: LoopState, batch_values) -> bool:
    """Advance the retrain counter and retrain when it reaches its tolerance."""
    cfg = state.config.retrain
    batch_max = float(np.max(batch_values))
    if batch_max > state.retrain_best + cfg.improvement_threshold * abs(state.retrain_best):
        state.retrain_best = batch_max
        state.retrain_failures = 0
    else:
        state.retrain_failures += 1
    if state.retrain_failures < cfg.failure_tolerance:
        return False
    state.retrain_failures = 0
    if not state.wiring.retrain:
        return False
    retrain_representation(state)
    return True


# -- whole runs and their logs ------------------------------------------------


@dataclass
class RunResult:
    config: RunConfig
    log: ObservationLog
    rows: list[dict]
    manifest: dict
    state: LoopState


def metric_rows(state: LoopState, upto: int | None = None) -> list[dict]:
    cfg = state.config
    T = upto if upto is not None else len(state.batches)
    if T == 0:
        return []
    start = cfg.num_init_slots + 1
    slots = list(range(start, start + T))
    best = best_per_time_curve(state.log, state.task.schedule, slots)
    regret = cumulative_regret(state.log, state.task.schedule, state.task.scorer, T, start=start)
    inst = instantaneous_value(state.log, state.task.schedule, state.task.scorer, slots)
    return [
        {
            "iteration": t + 1,
            "baseline": cfg.variant,
            "seed": cfg.seed,
            "best_per_time": repr(float(best[t])),
            "cumulative_regret": repr(float(regret[t])),
            "instantaneous": repr(float(inst[t])),
            "batch_designs": ";".join(x.to_string() for x in state.batches[t + 1]),
        }
        for t in range(T)
    ]


def write_csv(rows: list[dict], path: str | Path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _version() -> str:
    from . import __version__

    return __version__


def run_experiment(config: RunConfig, out_dir: str | Path | None = None, cache_dir: str | Path | None = None, task: Task | None = None) -> RunResult:
    """Initialize, pretrain (or reuse a cached model) and run ``T`` iterations.

    With ``out_dir`` the CSV log and manifest are written there, including after
    a failure, in which case the partial log is flushed before re-raising.
    """
    started = time.time()
    state = initialize(config, task, cache_dir)
    error = None
    try:
        for t in range(1, config.horizon + 1):
            run_iteration(state, t)
    except Exception as exc:  # flushed below, then re-raised
        error = exc
    rows = metric_rows(state)
    manifest = {
        "config_hash": config.digest(),
        "seed": config.seed,
        "variant": config.variant,
        "task": config.task.name,
        "version": _version(),
        "wall_clock_seconds": time.time() - started,
        "iteration_seconds": state.timings,
        "oracle_calls": state.counter.calls,
        "events": state.events,
        "completed": error is None,
        "error": None if error is None else repr(error),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(rows, out / "log.csv")
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if error is not None:
        raise error
    return RunResult(config, state.log, rows, manifest, state)
