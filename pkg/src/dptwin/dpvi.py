"""Differentially private variational inference for the mixture model.

Optimizes a mean-field Gaussian over the unconstrained mixture parameters by
stochastic gradient ascent on the ELBO.  Each step draws a Poisson subsample,
computes per-example reparameterized gradients, clips them to a fixed L2
norm, sums, and perturbs the sum with Gaussian noise; the data-independent
prior-plus-entropy gradient is added unclipped and unnoised, scaled by the
sampling ratio so its expectation matches the subsampled likelihood term.

The privacy cost of a run is exactly one subsampled-Gaussian record
(noise multiplier, sampling ratio, steps), registered with the accountant
before any data is touched.  Stratified training fits disjoint sub-datasets
independently under parallel composition: substituting a record within one
stratum (stratum labels held fixed) changes a single sub-dataset, so every
stratum may consume the full budget.  This assumption is recorded in the
privacy report.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import mixture
from .accountant import (
    Accountant,
    BudgetExceededError,
    CalibrationError,
    MechanismRecord,
    laplace_scale,
)
from .mixture import MixtureLayout, StratifiedSkeleton
from .schema import (
    ArtifactFormatError,
    Dataset,
    Schema,
    schema_from_dict,
    schema_to_dict,
    split_strata,
)
from .util import substream

MODEL_FORMAT = "dptwin-mixture-model"
MODEL_VERSION = 1

# Stds are initialized small so early posterior draws stay near the means.
INIT_STD = 0.1


class TrainingDivergedError(RuntimeError):
    """A non-finite update appeared during optimization."""


@dataclass(frozen=True)
class VariationalPosterior:
    """Mean-field Gaussian over the unconstrained parameters."""

    means: np.ndarray
    log_stds: np.ndarray

    def __post_init__(self) -> None:
        means = np.asarray(self.means, dtype=float)
        log_stds = np.asarray(self.log_stds, dtype=float)
        if means.shape != log_stds.shape or means.ndim != 1:
            raise ValueError("means and log_stds must be equal-length vectors")
        if not (np.isfinite(means).all() and np.isfinite(log_stds).all()):
            raise ValueError("posterior parameters must be finite")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "log_stds", log_stds)

    @property
    def dim(self) -> int:
        return self.means.size


@dataclass(frozen=True)
class DpviConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 1.1
    sampling_ratio: float = 0.01
    iterations: int = 10000
    learning_rate: float = 1e-3
    mc_samples: int = 1
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self) -> None:
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive (math.inf disables clipping)")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be nonnegative")
        if not 0 < self.sampling_ratio <= 1:
            raise ValueError("sampling_ratio must lie in (0, 1]")
        if self.iterations < 1 or self.mc_samples < 1:
            raise ValueError("iterations and mc_samples must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return {
            "clip_norm": self.clip_norm,
            "noise_multiplier": self.noise_multiplier,
            "sampling_ratio": self.sampling_ratio,
            "iterations": self.iterations,
            "learning_rate": self.learning_rate,
            "mc_samples": self.mc_samples,
            "seed": self.seed,
            "optimizer": self.optimizer,
        }


class AdamState:
    """Adam moments for ascent steps; plain SGD available behind the switch."""

    def __init__(self, dim: int, lr: float, kind: str = "adam",
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.kind = kind
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def direction(self, grad: np.ndarray) -> np.ndarray:
        if self.kind == "sgd":
            return self.lr * grad
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def init_posterior(layout: MixtureLayout, seed: int, label: str = "") -> VariationalPosterior:
    """Means from N(0, INIT_STD^2), stds at INIT_STD; deterministic in seed."""
    rng = substream(seed, "init", label)
    means = rng.normal(0.0, INIT_STD, size=layout.dim)
    log_stds = np.full(layout.dim, math.log(INIT_STD))
    return VariationalPosterior(means=means, log_stds=log_stds)


def _per_row_variational_grads(
    layout: MixtureLayout,
    post: VariationalPosterior,
    X: np.ndarray,
    eta: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Reparameterized per-row gradients w.r.t. (means, log_stds).

    eta has shape (S, P); the same parameter draws are shared by all rows.
    Returns (per-row grads (B, 2P), prior-plus-entropy gradient (2P,),
    mean per-draw log-likelihood total for the ELBO trace).
    """
    stds = np.exp(post.log_stds)
    S = eta.shape[0]
    B = X.shape[0]
    P = post.dim

    grad_rows = np.zeros((B, 2 * P))
    grad_pe = np.zeros(2 * P)
    loglik_total = 0.0
    for m in range(S):
        u = post.means + stds * eta[m]
        if B:
            loglik, g = mixture.grad_log_likelihood(layout, u, X)
            loglik_total += float(loglik.sum())
            grad_rows[:, :P] += g
            grad_rows[:, P:] += g * (stds * eta[m])[None, :]
        gp = mixture.grad_log_prior(layout, u)
        grad_pe[:P] += gp
        grad_pe[P:] += gp * (stds * eta[m])
    grad_rows /= S
    grad_pe /= S
    grad_pe[P:] += 1.0  # d entropy / d log_std = 1 per coordinate
    return grad_rows, grad_pe, loglik_total / S


def clip_rows(grads: np.ndarray, clip_norm: float) -> tuple[np.ndarray, np.ndarray]:
    """Scale each row to L2 norm at most clip_norm; returns (clipped, norms)."""
    norms = np.linalg.norm(grads, axis=1)
    if math.isinf(clip_norm):
        return grads, norms
    factors = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
    return grads * factors[:, None], norms


def elbo_gradient_step(
    post: VariationalPosterior,
    batch: np.ndarray,
    cfg: DpviConfig,
    n: int,
    *,
    layout: MixtureLayout,
    rng: np.random.Generator,
    optimizer: AdamState,
    clip_hook=None,
) -> tuple[VariationalPosterior, float]:
    """One DP-SGD ascent step on the ELBO from a Poisson-subsampled batch.

    Returns (updated posterior, noisy ELBO estimate).  An empty batch is a
    valid noise-only step.  clip_hook, when set, receives the post-clipping
    per-row norms (test instrumentation).
    """
    P = post.dim
    batch = np.asarray(batch, dtype=float).reshape(-1, layout.n_features)
    eta = rng.standard_normal((cfg.mc_samples, P))

    grad_rows, grad_pe, loglik = _per_row_variational_grads(layout, post, batch, eta)
    clipped, _ = clip_rows(grad_rows, cfg.clip_norm)
    if clip_hook is not None:
        clip_hook(np.linalg.norm(clipped, axis=1))
    total = clipped.sum(axis=0)
    if cfg.noise_multiplier > 0:
        if math.isinf(cfg.clip_norm):
            raise CalibrationError("noise calibration needs a finite clip norm")
        total = total + rng.normal(
            0.0, cfg.noise_multiplier * cfg.clip_norm, size=2 * P
        )
    total = total + cfg.sampling_ratio * grad_pe

    step = optimizer.direction(total)
    if not np.isfinite(step).all():
        raise TrainingDivergedError("non-finite update; lower the learning rate")
    new_post = VariationalPosterior(
        means=post.means + step[:P], log_stds=post.log_stds + step[P:]
    )

    elbo = (
        loglik / cfg.sampling_ratio
        + mixture.log_prior_unconstrained(layout, post.means)
        + mixture.elbo_entropy(post.log_stds)
    )
    return new_post, float(elbo)


@dataclass
class TrainedModel:
    """One fitted mixture: posterior, layout, config, and privacy entries.

    elbo_trace is a training diagnostic only — it is data-dependent beyond
    the noised gradients, so it is never serialized into released artifacts.
    """

    posterior: VariationalPosterior
    layout: MixtureLayout
    config: DpviConfig
    privacy_record: list = field(default_factory=list)
    elbo_trace: list = field(default_factory=list)
    trained: bool = True


def fit(
    ds: Dataset,
    layout: MixtureLayout,
    cfg: DpviConfig,
    accountant: Accountant,
    label: str = "dpvi",
    clip_hook=None,
    register: bool = True,
) -> TrainedModel:
    """Train one mixture with DP-SGD on the ELBO.

    Registers exactly one subsampled-Gaussian record before touching data;
    refuses (BudgetExceededError) if the accountant will not admit the plan.
    With register=False the caller has already registered a record covering
    this run (parallel composition across strata).
    """
    if layout.n_features != len(ds.schema.features):
        raise ValueError("dataset does not match the model layout")
    if cfg.sampling_ratio * ds.n < 1:
        raise ValueError(
            f"sampling_ratio {cfg.sampling_ratio} gives expected batch below one "
            f"row (n={ds.n}); raise the ratio"
        )
    if cfg.noise_multiplier == 0 and accountant.epsilon_limit is not None:
        raise CalibrationError(
            "noise_multiplier 0 provides no finite epsilon; clear the accountant "
            "limit for an explicitly non-private run"
        )
    record = MechanismRecord(
        kind="subsampled_gaussian",
        params={
            "sigma": cfg.noise_multiplier,
            "q": cfg.sampling_ratio,
            "steps": cfg.iterations,
        },
        label=label,
    )
    if register:
        accountant.append(record)

    post = init_posterior(layout, cfg.seed, label)
    optimizer = AdamState(2 * post.dim, cfg.learning_rate, cfg.optimizer)
    rng = substream(cfg.seed, "train", label)
    trace = []
    for _ in range(cfg.iterations):
        mask = rng.random(ds.n) < cfg.sampling_ratio
        batch = ds.rows[mask]
        post, elbo = elbo_gradient_step(
            post, batch, cfg, ds.n,
            layout=layout, rng=rng, optimizer=optimizer, clip_hook=clip_hook,
        )
        trace.append(elbo)
    return TrainedModel(
        posterior=post,
        layout=layout,
        config=cfg,
        privacy_record=[record],
        elbo_trace=trace,
    )


@dataclass
class StratifiedTrainedModel:
    """The released training artifact: per-stratum posteriors plus the
    DP-released stratum prior.  Synthesis consumes only this object."""

    schema: Schema
    n_components: int
    strata: dict  # key tuple -> TrainedModel
    stratum_prior: dict  # key tuple -> probability
    n_total: int  # public under substitute adjacency (record count fixed)
    config: DpviConfig
    privacy_report: dict


# Default budget carved out for releasing stratum proportions.
STRATUM_PRIOR_EPSILON = 0.1


def release_stratum_prior(
    counts: dict, epsilon: float, accountant: Accountant, rng: np.random.Generator
) -> dict:
    """Laplace-noised, clamped, renormalized stratum proportions.

    Substitution moves one record between two strata, so the count histogram
    has L1 sensitivity 2.  Negative noised counts clamp to zero; an all-zero
    result falls back to uniform.
    """
    keys = list(counts.keys())
    if len(keys) == 1:
        return {keys[0]: 1.0}
    scale = laplace_scale(epsilon, sensitivity=2.0)
    accountant.append(
        MechanismRecord(
            kind="laplace",
            params={"scale": scale, "sensitivity": 2.0},
            label="stratum proportions",
        )
    )
    noised = np.array([counts[k] for k in keys], dtype=float)
    noised += rng.laplace(0.0, scale, size=len(keys))
    noised = np.maximum(noised, 0.0)
    if noised.sum() == 0:
        noised = np.ones_like(noised)
    noised /= noised.sum()
    return dict(zip(keys, noised.tolist()))


def fit_stratified(
    ds: Dataset,
    skeleton: StratifiedSkeleton,
    cfg: DpviConfig,
    accountant: Accountant,
    stratum_prior_epsilon: float = STRATUM_PRIOR_EPSILON,
    clip_hook=None,
) -> StratifiedTrainedModel:
    """Train every stratum's mixture independently on its sub-dataset.

    Disjoint strata compose in parallel, so one subsampled-Gaussian record
    covers all strata; the stratum proportions consume a separate Laplace
    record.  Admission for the whole plan is checked before any data access.
    Empty strata keep their initialization and are flagged untrained (their
    released proportion governs how often they are sampled).
    """
    strata = split_strata(ds, full_product=True)
    multi = len(skeleton.keys) > 1

    dpvi_record = MechanismRecord(
        kind="subsampled_gaussian",
        params={
            "sigma": cfg.noise_multiplier,
            "q": cfg.sampling_ratio,
            "steps": cfg.iterations,
        },
        label="dpvi (parallel composition over disjoint strata)",
    )
    plan = [dpvi_record]
    if multi:
        plan.append(
            MechanismRecord(
                kind="laplace",
                params={
                    "scale": laplace_scale(stratum_prior_epsilon, 2.0),
                    "sensitivity": 2.0,
                },
                label="stratum proportions",
            )
        )
    if cfg.noise_multiplier == 0 and accountant.epsilon_limit is not None:
        raise CalibrationError(
            "noise_multiplier 0 provides no finite epsilon; clear the accountant "
            "limit for an explicitly non-private run"
        )
    if not accountant.admits(*plan):
        raise BudgetExceededError(
            f"training plan (dpvi sigma={cfg.noise_multiplier}, q={cfg.sampling_ratio}, "
            f"T={cfg.iterations}"
            + (f" + stratum proportions eps={stratum_prior_epsilon}" if multi else "")
            + f") exceeds the epsilon limit {accountant.epsilon_limit}"
        )

    counts = {s.key: s.dataset.n for s in strata}
    prior = (
        release_stratum_prior(
            counts, stratum_prior_epsilon, accountant, substream(cfg.seed, "stratum-prior")
        )
        if multi
        else {(): 1.0}
    )
    accountant.append(dpvi_record)

    models = {}
    for stratum in strata:
        layout = skeleton.layouts[stratum.key]
        label = f"stratum {'/'.join(stratum.key) or 'all'}"
        if stratum.empty:
            models[stratum.key] = TrainedModel(
                posterior=init_posterior(layout, cfg.seed, label),
                layout=layout,
                config=cfg,
                privacy_record=[dpvi_record],
                trained=False,
            )
            continue
        models[stratum.key] = fit(
            stratum.dataset,
            layout,
            cfg,
            accountant,
            label=label,
            clip_hook=clip_hook,
            register=False,
        )
        models[stratum.key].privacy_record = [dpvi_record]
    return StratifiedTrainedModel(
        schema=skeleton.schema,
        n_components=skeleton.n_components,
        strata=models,
        stratum_prior=prior,
        n_total=ds.n,
        config=cfg,
        privacy_report=accountant.report(),
    )


def save_model(model: StratifiedTrainedModel, path: str) -> None:
    """Write the versioned model artifact (no diagnostics, no raw data)."""
    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "schema": schema_to_dict(model.schema),
        "n_components": model.n_components,
        "n_total": model.n_total,
        "config": model.config.to_dict(),
        "stratum_prior": [
            {"key": list(k), "prob": p} for k, p in model.stratum_prior.items()
        ],
        "strata": [
            {
                "key": list(key),
                "layout": tm.layout.describe(),
                "means": tm.posterior.means.tolist(),
                "log_stds": tm.posterior.log_stds.tolist(),
                "trained": tm.trained,
            }
            for key, tm in model.strata.items()
        ],
        "privacy": model.privacy_report,
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle)


def load_model(path: str) -> StratifiedTrainedModel:
    with open(path, encoding="utf-8") as handle:
        payload = json.load(handle)
    if payload.get("format") != MODEL_FORMAT or payload.get("version") != MODEL_VERSION:
        raise ArtifactFormatError(
            f"{path}: expected {MODEL_FORMAT} v{MODEL_VERSION}, "
            f"found {payload.get('format')} v{payload.get('version')}"
        )
    schema = schema_from_dict(payload["schema"])
    cfg = DpviConfig(**payload["config"])
    strata = {}
    for entry in payload["strata"]:
        layout = MixtureLayout.from_description(entry["layout"])
        strata[tuple(entry["key"])] = TrainedModel(
            posterior=VariationalPosterior(
                means=np.array(entry["means"]), log_stds=np.array(entry["log_stds"])
            ),
            layout=layout,
            config=cfg,
            privacy_record=payload["privacy"].get("records", []),
            trained=entry["trained"],
        )
    prior = {tuple(e["key"]): e["prob"] for e in payload["stratum_prior"]}
    return StratifiedTrainedModel(
        schema=schema,
        n_components=payload["n_components"],
        strata=strata,
        stratum_prior=prior,
        n_total=payload["n_total"],
        config=cfg,
        privacy_report=payload["privacy"],
    )
