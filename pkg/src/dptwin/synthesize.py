"""Synthetic twin generation from trained model artifacts.

Records are drawn from the posterior predictive distribution: for every
synthetic record a fresh parameter vector is drawn from the variational
posterior, mapped to constrained mixture parameters, and one record is
sampled from the resulting mixture.  Sampling consumes only released
artifacts (posteriors, the DP-released stratum prior) — no function in this
module accepts the original dataset, which is what makes the twin pure
post-processing of the DP training output.

Stratified models allocate record counts multinomially from the released
stratum prior, write the stratum key into the stratification columns, and
fill rule-dropped features deterministically (forced value, neutral value,
or derived from another feature).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import mixture
from .dpvi import StratifiedTrainedModel
from .schema import Dataset, Schema, write_csv
from .util import substream

# Records are generated in fixed-size chunks, each with its own named RNG
# substream, so chunks can fan out to workers without changing the output.
CHUNK = 8192


@dataclass(frozen=True)
class SynthesisPlan:
    """How many records to draw and how parameter draws are shared."""

    m: int | None = None  # None: match the training record count
    per_record_theta: bool = True
    seed: int = 0
    allocation: str = "multinomial"  # or "expected": deterministic rounding

    def __post_init__(self) -> None:
        if self.m is not None and self.m < 1:
            raise ValueError("m must be >= 1")
        if self.allocation not in ("multinomial", "expected"):
            raise ValueError(f"unknown allocation rule {self.allocation!r}")

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "per_record_theta": self.per_record_theta,
            "seed": self.seed,
            "allocation": self.allocation,
        }


def allocate_strata(
    model: StratifiedTrainedModel, m: int, plan: SynthesisPlan, accountant=None
) -> dict:
    """Per-stratum synthetic record counts from the released stratum prior.

    The prior was Laplace-released (clamped, renormalized) during training;
    this is pure post-processing, so the optional accountant is only accepted
    for interface symmetry and never consumed.
    """
    del accountant
    if not model.stratum_prior:
        raise ValueError("model carries no released stratum prior")
    keys = list(model.stratum_prior.keys())
    probs = np.array([model.stratum_prior[k] for k in keys], dtype=float)
    if probs.sum() <= 0:
        raise ValueError("released stratum prior has no mass")
    probs = probs / probs.sum()
    if len(keys) == 1:
        return {keys[0]: m}
    if plan.allocation == "expected":
        counts = np.floor(probs * m).astype(int)
        remainder = m - counts.sum()
        order = np.argsort(-(probs * m - counts))
        counts[order[:remainder]] += 1
    else:
        rng = substream(plan.seed, "allocate")
        counts = rng.multinomial(m, probs)
    return dict(zip(keys, (int(c) for c in counts)))


def _sample_stratum(
    model: StratifiedTrainedModel, key: tuple, count: int, plan: SynthesisPlan
) -> np.ndarray:
    """Encoded rows for the modelled features of one stratum."""
    trained = model.strata[key]
    layout = trained.layout
    post = trained.posterior
    stds = np.exp(post.log_stds)

    if not plan.per_record_theta:
        # ablation mode: one parameter draw shared by the whole stratum
        rng = substream(plan.seed, "synth", key, "shared-theta")
        u = post.means + stds * rng.standard_normal(post.dim)
        rows = []
        for chunk_idx, start in enumerate(range(0, count, CHUNK)):
            size = min(CHUNK, count - start)
            chunk_rng = substream(plan.seed, "synth", key, chunk_idx)
            rows.append(
                mixture.sample_records(layout, np.tile(u, (size, 1)), chunk_rng)
            )
        return np.concatenate(rows) if rows else np.zeros((0, layout.n_features))

    rows = []
    for chunk_idx, start in enumerate(range(0, count, CHUNK)):
        size = min(CHUNK, count - start)
        chunk_rng = substream(plan.seed, "synth", key, chunk_idx)
        u_draws = post.means + stds * chunk_rng.standard_normal((size, post.dim))
        rows.append(mixture.sample_records(layout, u_draws, chunk_rng))
    return np.concatenate(rows) if rows else np.zeros((0, layout.n_features))


def apply_structural_rules(rows: np.ndarray, schema: Schema) -> np.ndarray:
    """Fill rule-governed features on full-width encoded rows.

    Each row must already carry its stratum key in the stratification
    columns.  For every matching rule: excluded features get their
    schema-declared neutral value, forced features the declared value, and
    derived features offset + scale * source computed in data units and
    re-encoded (clamped into bounds).
    """
    rows = np.array(rows, dtype=float)
    for rule in schema.structural_rules:
        mask = np.ones(rows.shape[0], dtype=bool)
        for cond_feature, cond_value in rule.when:
            spec = schema.feature(cond_feature)
            code = spec.categories.index(cond_value)
            mask &= rows[:, schema.index_of(cond_feature)] == code
        if not mask.any():
            continue
        for name in rule.exclude:
            spec = schema.feature(name)
            rows[mask, schema.index_of(name)] = spec.neutral_encoded()
        for name, value in rule.force:
            spec = schema.feature(name)
            rows[mask, schema.index_of(name)] = spec.encode(value)
        for name, (source, scale, offset) in rule.derive:
            target = schema.feature(name)
            src = schema.feature(source)
            src_data = np.array(
                [src.decode(v) for v in rows[mask, schema.index_of(source)]]
            )
            derived = offset + scale * src_data
            lo, hi = target.bounds
            encoded = (np.clip(derived, lo, hi) - lo) / (hi - lo)
            rows[mask, schema.index_of(name)] = encoded
    return rows


def sample_ppd(model: StratifiedTrainedModel, plan: SynthesisPlan) -> Dataset:
    """Draw the synthetic twin from the posterior predictive distribution.

    Output rows use the full original schema: stratification columns carry
    the stratum key, modelled features are posterior-predictive draws, and
    rule-dropped features are filled deterministically.
    """
    schema = model.schema
    m = plan.m if plan.m is not None else model.n_total
    counts = allocate_strata(model, m, plan)

    width = len(schema.features)
    blocks = []
    for key in counts:
        count = counts[key]
        if count == 0:
            continue
        sampled = _sample_stratum(model, key, count, plan)
        full = np.zeros((count, width))
        for strat_name, label in zip(schema.stratify_by, key):
            spec = schema.feature(strat_name)
            full[:, schema.index_of(strat_name)] = spec.categories.index(label)
        modelled = model.strata[key].layout.blocks
        for j, block in enumerate(modelled):
            full[:, schema.index_of(block.name)] = sampled[:, j]
        blocks.append(apply_structural_rules(full, schema))
    rows = np.concatenate(blocks) if blocks else np.zeros((0, width))
    return Dataset(schema=schema, rows=rows)


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_synthetic(
    path: str,
    synthetic: Dataset,
    plan: SynthesisPlan,
    model_path: str | None = None,
    privacy_report: dict | None = None,
) -> str:
    """Write the twin as delimited text plus a provenance sidecar.

    Returns the sidecar path.  Timestamps never enter the data file, so a
    fixed (model, plan) reproduces it byte for byte.
    """
    write_csv(path, synthetic)
    sidecar = path + ".provenance.json"
    payload = {
        "plan": plan.to_dict(),
        "records": synthetic.n,
        "model_file": model_path,
        "model_sha256": file_sha256(model_path) if model_path else None,
        "privacy": privacy_report,
    }
    with open(sidecar, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
    return sidecar
