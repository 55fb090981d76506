"""Desk-scale reproduction harness: stratified vs unstratified discovery rates.

Simulates a register-style cohort with a structural-zero outcome (alive
subjects never carry the event) and gender-dependent rates, then measures how
often a twin sampled from each model variant reproduces the positive,
significant treatment associations.  Shared by the acceptance suite.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from dptwin.accountant import Accountant, noise_multiplier_for
from dptwin.dpvi import DpviConfig, fit_stratified
from dptwin.evaluate import RegressionSpec, discovery_verdict, fit_spec, resolve_designated
from dptwin.mixture import build_stratified
from dptwin.schema import Dataset, FeatureSpec, Schema, StructuralRule
from dptwin.synthesize import SynthesisPlan, sample_ppd

COHORT_SCHEMA = Schema(
    features=(
        FeatureSpec("gender", "binary", categories=("female", "male")),
        FeatureSpec("dead", "binary", categories=("alive", "dead")),
        FeatureSpec("insulin", "binary", categories=("no", "yes")),
        FeatureSpec("oad", "binary", categories=("no", "yes")),
        FeatureSpec("ard", "binary", categories=("no", "yes"), neutral="no"),
        FeatureSpec("z", "binary", categories=("no", "yes")),
    ),
    stratify_by=("gender", "dead"),
    structural_rules=(StructuralRule(when=(("dead", "alive"),), force=(("ard", "no"),)),),
)

REGRESSION = RegressionSpec(
    response="ard",
    regressors=("insulin", "oad", "gender"),
    designated=("insulin", "oad"),
    family="poisson",
)


def simulate_cohort(n: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    male = (rng.random(n) < 0.5).astype(float)
    z = (rng.random(n) < 0.3).astype(float)
    insulin = (rng.random(n) < 0.20 + 0.04 * male).astype(float)
    oad = (rng.random(n) < 0.40 + 0.05 * male).astype(float)
    p_dead = 0.10 + 0.08 * male + 0.02 * insulin + 0.015 * oad
    dead = (rng.random(n) < p_dead).astype(float)
    p_ard = 0.06 + 0.05 * male + 0.22 * insulin + 0.12 * oad
    ard = dead * (rng.random(n) < p_ard).astype(float)
    rows = np.column_stack([male, dead, insulin, oad, ard, z])
    return Dataset(schema=COHORT_SCHEMA, rows=rows)


def unstratified_schema() -> Schema:
    return replace(COHORT_SCHEMA, stratify_by=(), structural_rules=())


def run_once(
    ds: Dataset,
    stratified: bool,
    epsilon: float,
    seed: int,
    iterations: int = 1200,
    sampling_ratio: float = 0.01,
    learning_rate: float = 0.02,
    components: int = 10,
    delta: float = 1e-6,
) -> bool:
    """Train, synthesize a same-size twin, refit the study; combined verdict."""
    schema = ds.schema if stratified else unstratified_schema()
    data = ds if stratified else Dataset(schema=schema, rows=np.array(ds.rows))
    skeleton = build_stratified(schema, components)
    multi = len(skeleton.keys) > 1
    stratum_eps = 0.1 if multi else 0.0

    if math.isinf(epsilon):
        noise, clip = 0.0, math.inf
        accountant = Accountant(target_delta=delta)
    else:
        noise = noise_multiplier_for(epsilon - stratum_eps, delta, sampling_ratio, iterations)
        clip = 1.0
        accountant = Accountant(target_delta=delta, epsilon_limit=epsilon)

    cfg = DpviConfig(
        clip_norm=clip,
        noise_multiplier=noise,
        sampling_ratio=sampling_ratio,
        iterations=iterations,
        learning_rate=learning_rate,
        seed=seed,
    )
    model = fit_stratified(
        data, skeleton, cfg, accountant, stratum_prior_epsilon=stratum_eps or 0.1
    )
    twin = sample_ppd(model, SynthesisPlan(seed=seed))
    twin = Dataset(schema=ds.schema, rows=np.array(twin.rows))
    report = fit_spec(twin, REGRESSION)
    designated = resolve_designated(REGRESSION, report.names)
    return discovery_verdict(report, designated).combined


def discovery_rate(
    ds: Dataset, stratified: bool, epsilon: float, repeats: int, **kwargs
) -> float:
    hits = 0
    for rep in range(repeats):
        hits += run_once(ds, stratified, epsilon, seed=1000 + rep, **kwargs)
    return hits / repeats
