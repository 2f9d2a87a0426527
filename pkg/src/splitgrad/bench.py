"""Synthetic retrieval experiments: data generation, training runs,
top-k evaluation, and machine-readable reports.

The task is linear-latent: each pair shares a latent vector z, with
anchor = z A + noise and target = z B + noise for fixed random A, B.
Retrieval improves with training and with more in-batch negatives,
which is what makes the mode comparison observable at desk scale.

Per-step metric records use the documented jsonl schema (see
METRICS_FIELDS); the run summary goes to CSV. A (config, seed) pair
fully determines every emitted value except wall-clock fields.
"""

import csv
import json
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import deep as deep_mod
from . import encoders
from . import kernels
from . import loss as loss_mod
from . import memtrace
from . import multiworker
from . import trainer

SCHEMA_VERSION = 1
METRICS_FIELDS = (
    "step", "loss", "fwd_count", "bwd_count", "act_peak", "cache_floats",
    "wall_ms",
)
MODES = ("direct", "cache", "accumulation", "sequential", "deep", "multi")


class ConfigError(ValueError):
    """A run configuration failed validation."""


@dataclass
class RunConfig:
    mode: str = "direct"
    batch_size: int = 128
    sub_batch_s: int = 16
    sub_batch_t: int = 16
    workers: int = 1
    temperature: float = 1.0
    epochs: int = 1
    seed: int = 0
    optimizer: str = "adam"
    lr: float = 1.5e-2
    encoder_hidden: int = 32
    embed_dim: int = 16
    encoder_activation: str = "tanh"
    phi_hidden: int = 8
    train_encoders: bool = True
    n_pairs: int = 1000
    in_dim_s: int = 24
    in_dim_t: int = 24
    latent_dim: int = 16
    noise: float = 0.5
    eval_frac: float = 0.1
    eval_k: tuple = (1, 5, 20)
    activation_budget: int = None


def validate_config(cfg):
    if cfg.mode not in MODES:
        raise ConfigError(f"unknown mode {cfg.mode!r}; choose from {MODES}")
    if cfg.batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {cfg.batch_size}")
    if cfg.mode in ("cache", "deep", "multi", "accumulation"):
        if cfg.sub_batch_s < 1 or cfg.sub_batch_t < 1:
            raise ConfigError(
                f"mode {cfg.mode!r} requires positive sub-batch sizes, got "
                f"{cfg.sub_batch_s} / {cfg.sub_batch_t}"
            )
    if cfg.mode == "multi" and cfg.workers < 1:
        raise ConfigError(f"workers must be >= 1, got {cfg.workers}")
    if cfg.temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {cfg.temperature}")
    if cfg.epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {cfg.epochs}")
    if cfg.optimizer not in ("sgd", "adam"):
        raise ConfigError(f"unknown optimizer {cfg.optimizer!r}")
    if cfg.n_pairs < 2:
        raise ConfigError(f"n_pairs must be >= 2, got {cfg.n_pairs}")
    if not 0.0 < cfg.eval_frac < 1.0:
        raise ConfigError(f"eval_frac must be in (0, 1), got {cfg.eval_frac}")
    if not cfg.eval_k or any(k < 1 for k in cfg.eval_k):
        raise ConfigError(f"eval_k entries must be >= 1, got {cfg.eval_k}")
    return cfg


# ---------------------------------------------------------------------------
# synthetic task
# ---------------------------------------------------------------------------

@dataclass
class SyntheticTask:
    train_anchors: np.ndarray
    train_targets: np.ndarray
    eval_anchors: np.ndarray
    eval_targets: np.ndarray

    @property
    def n_train(self):
        return self.train_anchors.shape[0]

    @property
    def n_eval(self):
        return self.eval_anchors.shape[0]


def generate_task(cfg, mix_anchor=None, mix_target=None):
    """Deterministic paired dataset; eval pairs are the held-out tail.

    mix_anchor / mix_target override the random mixing matrices (used by
    tests to force degenerate geometry such as anchors == targets).
    """
    if cfg.n_pairs < 2:
        raise ConfigError(f"n_pairs must be >= 2, got {cfg.n_pairs}")
    if cfg.latent_dim < 1 or cfg.in_dim_s < 1 or cfg.in_dim_t < 1:
        raise ConfigError(
            f"degenerate dims: latent {cfg.latent_dim}, "
            f"anchor {cfg.in_dim_s}, target {cfg.in_dim_t}"
        )
    rng = np.random.default_rng(cfg.seed)
    scale = 1.0 / np.sqrt(cfg.latent_dim)
    A = mix_anchor if mix_anchor is not None else scale * rng.normal(
        size=(cfg.latent_dim, cfg.in_dim_s)
    )
    B = mix_target if mix_target is not None else scale * rng.normal(
        size=(cfg.latent_dim, cfg.in_dim_t)
    )
    z = rng.normal(size=(cfg.n_pairs, cfg.latent_dim))
    anchors = z @ A + cfg.noise * rng.normal(size=(cfg.n_pairs, A.shape[1]))
    targets = z @ B + cfg.noise * rng.normal(size=(cfg.n_pairs, B.shape[1]))
    n_eval = int(round(cfg.n_pairs * cfg.eval_frac))
    n_train = cfg.n_pairs - n_eval
    return SyntheticTask(
        train_anchors=anchors[:n_train],
        train_targets=targets[:n_train],
        eval_anchors=anchors[n_train:],
        eval_targets=targets[n_train:],
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_ranks(params_f, params_g, anchors, targets, r=None):
    """Rank of each anchor's true positive among all targets (0-based).

    Scores are encoded dot products; ties resolve toward the lower
    target index via a stable sort on negated scores.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if anchors.shape[0] == 0 or targets.shape[0] == 0:
        raise ValueError("evaluate: empty eval set")
    if r is None:
        r = np.arange(anchors.shape[0])
    F = encoders.encode(params_f, anchors, taped=False)
    G = encoders.encode(params_g, targets, taped=False)
    scores = kernels.pair_scores(F, G)
    order = np.argsort(-scores, axis=1, kind="stable")
    positions = np.argsort(order, axis=1, kind="stable")
    return positions[np.arange(anchors.shape[0]), r]


def evaluate_topk(params_f, params_g, anchors, targets, ks, r=None):
    """hit@k for each requested k: fraction of positives ranked in top k."""
    for k in ks:
        if k > np.asarray(targets).shape[0]:
            raise ValueError(
                f"evaluate: k={k} exceeds {np.asarray(targets).shape[0]} targets"
            )
    ranks = evaluate_ranks(params_f, params_g, anchors, targets, r)
    return {k: float(np.mean(ranks < k)) for k in ks}


# ---------------------------------------------------------------------------
# experiment runner
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    config: RunConfig
    metrics: list
    summary: dict
    params_f: encoders.EncoderParams
    params_g: encoders.EncoderParams
    head: deep_mod.DistanceHead = None
    hits: dict = field(default_factory=dict)
    ranks: np.ndarray = None


def _epoch_batches(task, cfg, shuffle_rng):
    """Contiguous batches over a shuffled index; the tail is dropped."""
    order = shuffle_rng.permutation(task.n_train)
    n_batches = task.n_train // cfg.batch_size
    for b in range(n_batches):
        idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
        yield loss_mod.aligned_batch(
            task.train_anchors[idx], task.train_targets[idx]
        )


def run_experiment(cfg):
    """Train under one mode and collect per-step metrics plus final eval."""
    validate_config(cfg)
    task = generate_task(cfg)
    params_f = encoders.init_params(
        cfg.seed + 1,
        [cfg.in_dim_s, cfg.encoder_hidden, cfg.embed_dim],
        cfg.encoder_activation,
    )
    params_g = encoders.init_params(
        cfg.seed + 2,
        [cfg.in_dim_t, cfg.encoder_hidden, cfg.embed_dim],
        cfg.encoder_activation,
    )
    head = None
    group = None
    if cfg.mode == "deep":
        head = deep_mod.init_distance_head(
            cfg.seed + 3, cfg.embed_dim, cfg.phi_hidden
        )
    opt_state = encoders.init_optimizer(cfg.optimizer, cfg.lr)
    if cfg.mode == "multi":
        group = multiworker.WorkerGroup(cfg.workers, params_f, params_g, opt_state)

    train_cfg = trainer.TrainConfig(
        tau=cfg.temperature,
        sub_batch_s=cfg.sub_batch_s,
        sub_batch_t=cfg.sub_batch_t,
    )
    deep_cfg = deep_mod.DeepConfig(
        tau=cfg.temperature,
        sub_batch_s=cfg.sub_batch_s,
        sub_batch_t=cfg.sub_batch_t,
        train_encoders=cfg.train_encoders,
    )

    meter = memtrace.MemCounter(activation_budget=cfg.activation_budget)
    for arr in encoders.param_arrays(params_f) + encoders.param_arrays(params_g):
        meter.track_alloc("parameters", arr.size)

    shuffle_rng = np.random.default_rng(cfg.seed + 17)
    metrics = []
    step_idx = 0
    with meter.activate():
        for _ in range(cfg.epochs):
            for batch in _epoch_batches(task, cfg, shuffle_rng):
                t0 = time.perf_counter()
                if cfg.mode in ("direct", "sequential"):
                    res = trainer.train_step_direct(
                        batch, params_f, params_g, opt_state, cfg.temperature
                    )
                    params_f, params_g, opt_state = (
                        res.params_f, res.params_g, res.opt_state
                    )
                    loss_value, stats = res.loss, res.stats
                elif cfg.mode == "cache":
                    res = trainer.train_step_cached(
                        batch, params_f, params_g, opt_state, train_cfg
                    )
                    params_f, params_g, opt_state = (
                        res.params_f, res.params_g, res.opt_state
                    )
                    loss_value, stats = res.loss, res.stats
                elif cfg.mode == "accumulation":
                    res = trainer.train_step_accumulation(
                        batch, params_f, params_g, opt_state,
                        cfg.sub_batch_s, cfg.temperature,
                    )
                    params_f, params_g, opt_state = (
                        res.params_f, res.params_g, res.opt_state
                    )
                    loss_value, stats = res.loss, res.stats
                elif cfg.mode == "deep":
                    res = deep_mod.train_step_deep(
                        batch, params_f, params_g, head, opt_state, deep_cfg
                    )
                    params_f, params_g, head, opt_state = (
                        res.params_f, res.params_g, res.head, res.opt_state
                    )
                    loss_value, stats = res.loss, res.stats
                else:
                    res = multiworker.train_step_multi(group, batch, train_cfg)
                    loss_value, stats = res.loss, res.stats
                wall_ms = (time.perf_counter() - t0) * 1e3
                metrics.append({
                    "step": step_idx,
                    "loss": loss_value,
                    "fwd_count": stats.fwd_rows,
                    "bwd_count": stats.bwd_rows,
                    "act_peak": stats.act_peak,
                    "cache_floats": stats.cache_floats,
                    "wall_ms": wall_ms,
                })
                step_idx += 1

    if cfg.mode == "multi":
        params_f = group.params_f[0]
        params_g = group.params_g[0]

    ks = tuple(cfg.eval_k)
    hits = evaluate_topk(
        params_f, params_g, task.eval_anchors, task.eval_targets, ks
    )
    ranks = evaluate_ranks(
        params_f, params_g, task.eval_anchors, task.eval_targets
    )
    summary = {
        "schema_version": SCHEMA_VERSION,
        "mode": cfg.mode,
        "batch_size": cfg.batch_size,
        "sub_batch_s": cfg.sub_batch_s,
        "sub_batch_t": cfg.sub_batch_t,
        "workers": cfg.workers,
        "temperature": cfg.temperature,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "steps": step_idx,
        "final_loss": metrics[-1]["loss"] if metrics else float("nan"),
        "act_peak": max((m["act_peak"] for m in metrics), default=0),
        "cache_floats": max((m["cache_floats"] for m in metrics), default=0),
    }
    for k in ks:
        summary[f"hit@{k}"] = hits[k]
    return RunResult(
        config=cfg,
        metrics=metrics,
        summary=summary,
        params_f=params_f,
        params_g=params_g,
        head=head,
        hits=hits,
        ranks=ranks,
    )


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def emit_metrics_jsonl(metrics, path):
    """One json object per step, fields in METRICS_FIELDS order."""
    with open(path, "w") as fh:
        for row in metrics:
            fh.write(json.dumps({k: row[k] for k in METRICS_FIELDS}))
            fh.write("\n")
    return path


def emit_summary_csv(summary_rows, path):
    """Run summaries as CSV; header always written, even with no rows."""
    columns = list(summary_rows[0].keys()) if summary_rows else [
        "schema_version", "mode", "batch_size", "sub_batch_s", "sub_batch_t",
        "workers", "temperature", "epochs", "seed", "steps", "final_loss",
        "act_peak", "cache_floats",
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in summary_rows:
            writer.writerow(row)
    return path


def save_run_checkpoint(result, path):
    groups = {
        "f": encoders.params_to_group(result.params_f),
        "g": encoders.params_to_group(result.params_g),
    }
    if result.head is not None:
        groups["phi"] = deep_mod.head_to_group(result.head)
    encoders.save_params_file(path, groups)
    return path


# ---------------------------------------------------------------------------
# memory profiling support
# ---------------------------------------------------------------------------

def profile_single_step(mode, batch_size, sub_batch, seed=0, tau=1.0,
                        in_dim=24, hidden=32, embed_dim=16):
    """One training step under a fresh counter; per-category peaks."""
    rng = np.random.default_rng(seed)
    batch = loss_mod.aligned_batch(
        rng.normal(size=(batch_size, in_dim)),
        rng.normal(size=(batch_size, in_dim)),
    )
    params_f = encoders.init_params(seed + 1, [in_dim, hidden, embed_dim])
    params_g = encoders.init_params(seed + 2, [in_dim, hidden, embed_dim])
    opt_state = encoders.init_optimizer("adam", 1e-3)
    meter = memtrace.MemCounter()
    for arr in encoders.param_arrays(params_f) + encoders.param_arrays(params_g):
        meter.track_alloc("parameters", arr.size)
    with meter.activate():
        if mode == "direct":
            res = trainer.train_step_direct(
                batch, params_f, params_g, opt_state, tau
            )
        elif mode == "cache":
            cfg = trainer.TrainConfig(
                tau=tau, sub_batch_s=sub_batch, sub_batch_t=sub_batch
            )
            res = trainer.train_step_cached(
                batch, params_f, params_g, opt_state, cfg
            )
        elif mode == "accumulation":
            res = trainer.train_step_accumulation(
                batch, params_f, params_g, opt_state, sub_batch, tau
            )
        else:
            raise ConfigError(f"profile supports direct|cache|accumulation, "
                              f"got {mode!r}")
        stats = res.stats
        del res
    return {
        "mode": mode,
        "batch_size": batch_size,
        "sub_batch": sub_batch,
        "act_peak": stats.act_peak,
        "loss_phase_peak": stats.loss_phase_peak,
        "representation_store": meter.peak["representation-store"],
        "gradient_cache": meter.peak["gradient-cache"],
        "parameters": meter.peak["parameters"],
        "activation_live_end": meter.live["activation"],
    }


def config_from_mapping(mapping):
    """Build a RunConfig from string keys/values (config files, flags)."""
    cfg = RunConfig()
    return apply_overrides(cfg, mapping)


_COERCERS = {
    "mode": str,
    "batch_size": int,
    "sub_batch_s": int,
    "sub_batch_t": int,
    "workers": int,
    "temperature": float,
    "epochs": int,
    "seed": int,
    "optimizer": str,
    "lr": float,
    "encoder_hidden": int,
    "embed_dim": int,
    "encoder_activation": str,
    "phi_hidden": int,
    "train_encoders": lambda v: str(v).strip().lower() in ("1", "true", "yes"),
    "n_pairs": int,
    "in_dim_s": int,
    "in_dim_t": int,
    "latent_dim": int,
    "noise": float,
    "eval_frac": float,
    "eval_k": lambda v: tuple(int(x) for x in str(v).split(",") if x.strip()),
    "activation_budget": lambda v: None if str(v).lower() in ("none", "") else int(v),
}


def apply_overrides(cfg, mapping):
    """Overlay key/value overrides onto a config; unknown keys error."""
    known = {f.name for f in fields(RunConfig)}
    updates = {}
    for key, value in mapping.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        coerce = _COERCERS.get(key, str)
        if isinstance(value, str):
            try:
                value = coerce(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from exc
        updates[key] = value
    return replace(cfg, **updates)


def parse_config_file(path):
    """Plain-text key=value lines; '#' starts a comment."""
    mapping = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(
                    f"{path}:{lineno}: expected key=value, got {raw.strip()!r}"
                )
            key, value = line.split("=", 1)
            mapping[key.strip()] = value.strip()
    return mapping
