"""Bayes-network synthesis: DP structure search plus noised conditionals.

The network topology is grown greedily over discrete features: the first
feature is chosen uniformly, then each remaining (child, parent-set) pair is
scored by empirical mutual information and one pair is selected with the
exponential mechanism.  Conditional probability tables are then released
under the Laplace mechanism, with the budget split evenly over the per-
feature tables.  Continuous features must be discretized (equal-width bins)
before learning; sampling is ancestral in topological order.

Budget convention: epsilon_structure covers all D-1 exponential-mechanism
selections (each gets epsilon_structure/(D-1)); epsilon_cpt covers the
concatenated count tables, whose joint L1 sensitivity under substitution is
2D (one record changes two cells in each of the D tables), so every cell
receives Laplace noise of scale 2D/epsilon_cpt.  Both records are pure
epsilon and data-independent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .accountant import Accountant, MechanismRecord, exponential_select, mi_sensitivity_bits
from .mixture import sample_rows_categorical
from .schema import (
    CONTINUOUS,
    ArtifactFormatError,
    Dataset,
    Schema,
    SchemaError,
    discretize,
    schema_from_dict,
    schema_to_dict,
)
from .util import substream

NETWORK_FORMAT = "dptwin-bayes-network"
NETWORK_VERSION = 1


@dataclass(frozen=True)
class PrivBayesConfig:
    epsilon_structure: float = 0.5
    epsilon_cpt: float = 0.5
    max_parents: int = 2
    bins: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epsilon_structure <= 0 or self.epsilon_cpt <= 0:
            raise ValueError("both budget shares must be positive")
        if self.max_parents < 1:
            raise ValueError("max_parents must be >= 1")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")

    def to_dict(self) -> dict:
        return {
            "epsilon_structure": self.epsilon_structure,
            "epsilon_cpt": self.epsilon_cpt,
            "max_parents": self.max_parents,
            "bins": self.bins,
            "seed": self.seed,
        }


@dataclass
class BayesNetwork:
    """Feature order, parent sets, and released conditional tables.

    cpts[name] has shape (number of parent configurations, cardinality of
    name); the parent configuration index ravels the parents' codes in the
    stored parent order.  The order/parents construction guarantees a DAG:
    every parent precedes its child.
    """

    schema: Schema  # all-discrete schema the network was learned on
    order: tuple[str, ...]
    parents: dict
    cpts: dict
    privacy_report: dict | None = None

    def __post_init__(self) -> None:
        position = {name: i for i, name in enumerate(self.order)}
        for child, pars in self.parents.items():
            for p in pars:
                if position[p] >= position[child]:
                    raise ValueError(f"parent {p} does not precede child {child}")
        for name, table in self.cpts.items():
            rows = np.asarray(table)
            if rows.size and not np.allclose(rows.sum(axis=1), 1.0, atol=1e-12):
                raise ValueError(f"CPT rows for {name} must sum to 1")


def _codes(ds: Dataset, names: list[str]) -> list[np.ndarray]:
    for name in names:
        if ds.schema.feature(name).kind == CONTINUOUS:
            raise SchemaError(f"{name}: discretize continuous features first")
    return [ds.column(name).astype(int) for name in names]


def _cards(ds: Dataset, names: list[str]) -> list[int]:
    return [ds.schema.feature(name).cardinality for name in names]


def mutual_information(ds: Dataset, a: str, b: list[str] | tuple[str, ...]) -> float:
    """Empirical mutual information I(a; b) in bits from the joint table."""
    if ds.n == 0:
        raise ValueError("empty dataset")
    b = list(b)
    if not b:
        return 0.0
    codes = _codes(ds, [a] + b)
    cards = _cards(ds, [a] + b)
    a_codes = codes[0]
    b_index = np.ravel_multi_index(codes[1:], dims=cards[1:]) if len(b) > 1 else codes[1]
    b_card = int(np.prod(cards[1:]))
    joint = np.zeros((cards[0], b_card))
    np.add.at(joint, (a_codes, b_index), 1.0)
    joint /= ds.n
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(joint > 0, joint / (pa * pb), 1.0)
        terms = np.where(joint > 0, joint * np.log2(ratio), 0.0)
    return float(terms.sum())


def discretize_for_network(ds: Dataset, default_bins: int) -> Dataset:
    """Equal-width-bin every continuous feature (schema bins win over default).

    The network models all features jointly, so stratification and structural
    rules are stripped from its internal schema; they remain on the original
    schema and are applied to sampled records as post-processing.
    """
    from dataclasses import replace

    plain = replace(ds.schema, stratify_by=(), structural_rules=())
    out = Dataset(schema=plain, rows=np.array(ds.rows))
    for spec in plain.features:
        if spec.kind == CONTINUOUS:
            out = discretize(out, spec.name, spec.bins or default_bins)
    return out


def learn_structure(
    ds: Dataset, cfg: PrivBayesConfig, accountant: Accountant
) -> tuple[tuple[str, ...], dict]:
    """Greedy DP structure search over an all-discrete dataset.

    Registers one pure-epsilon exponential record of epsilon_structure
    regardless of dimensionality (a one-feature dataset consumes nothing
    beyond the registration).  Candidate parent sets have size exactly
    min(max_parents, number of already-placed features).
    """
    names = list(ds.schema.names)
    _codes(ds, names)  # reject continuous features up front
    accountant.append(
        MechanismRecord(
            kind="exponential",
            params={"epsilon": cfg.epsilon_structure, "sensitivity": mi_sensitivity_bits(ds.n)},
            label="bayes-network structure",
        )
    )
    rng = substream(cfg.seed, "structure")
    first = names[int(rng.integers(len(names)))]
    order = [first]
    parents: dict = {first: ()}
    remaining = [n for n in names if n != first]

    d = len(names)
    eps_per_selection = cfg.epsilon_structure / (d - 1) if d > 1 else math.inf
    sensitivity = mi_sensitivity_bits(ds.n)
    while remaining:
        size = min(cfg.max_parents, len(order))
        candidates = []
        utilities = []
        for child in remaining:
            for pset in combinations(order, size):
                candidates.append((child, pset))
                utilities.append(mutual_information(ds, child, list(pset)))
        idx = exponential_select(
            np.array(utilities), eps_per_selection, sensitivity, rng
        )
        child, pset = candidates[idx]
        order.append(child)
        parents[child] = tuple(pset)
        remaining.remove(child)
    return tuple(order), parents


def release_cpts(
    ds: Dataset,
    order: tuple[str, ...],
    parents: dict,
    cfg: PrivBayesConfig,
    accountant: Accountant,
) -> dict:
    """Laplace-noised conditional probability tables for every feature.

    Noise scale is 2D/epsilon_cpt per cell (joint L1 sensitivity 2D over the
    concatenated tables under substitution).  Negative noised counts clamp
    to zero, all-zero rows become uniform, rows renormalize to 1.
    """
    d = len(order)
    scale = 2.0 * d / cfg.epsilon_cpt
    accountant.append(
        MechanismRecord(
            kind="laplace",
            params={"scale": scale, "sensitivity": 2.0 * d},
            label="bayes-network conditionals",
        )
    )
    rng = substream(cfg.seed, "cpt")
    cpts = {}
    for name in order:
        card = ds.schema.feature(name).cardinality
        pars = list(parents[name])
        if pars:
            par_cards = _cards(ds, pars)
            par_codes = _codes(ds, pars)
            rows_n = int(np.prod(par_cards))
            row_idx = (
                np.ravel_multi_index(par_codes, dims=par_cards)
                if len(pars) > 1
                else par_codes[0]
            )
        else:
            rows_n = 1
            row_idx = np.zeros(ds.n, dtype=int)
        counts = np.zeros((rows_n, card))
        np.add.at(counts, (row_idx, ds.column(name).astype(int)), 1.0)
        if math.isfinite(scale) and scale > 0:
            counts = counts + rng.laplace(0.0, scale, size=counts.shape)
        counts = np.maximum(counts, 0.0)
        row_sums = counts.sum(axis=1)
        zero_rows = row_sums == 0
        counts[zero_rows] = 1.0
        cpts[name] = counts / counts.sum(axis=1, keepdims=True)
    return cpts


def fit_network(ds: Dataset, cfg: PrivBayesConfig, accountant: Accountant) -> BayesNetwork:
    """Discretize, learn the structure, release the conditionals."""
    binned = discretize_for_network(ds, cfg.bins)
    order, parents = learn_structure(binned, cfg, accountant)
    cpts = release_cpts(binned, order, parents, cfg, accountant)
    return BayesNetwork(
        schema=binned.schema,
        order=order,
        parents=parents,
        cpts=cpts,
        privacy_report=accountant.report(),
    )


def structure_score(ds: Dataset, order: tuple[str, ...], parents: dict) -> float:
    """Total mutual information the structure captures (bits)."""
    return sum(mutual_information(ds, child, list(parents[child])) for child in order)


def exhaustive_best_score(ds: Dataset, max_parents: int) -> float:
    """Brute-force optimum of structure_score over all orders and parent sets.

    Exponential in D; intended for small verification instances only.
    """
    from itertools import permutations

    names = list(ds.schema.names)
    best = -math.inf
    for order in permutations(names):
        total = 0.0
        for i, child in enumerate(order):
            placed = order[:i]
            size = min(max_parents, len(placed))
            if size == 0:
                continue
            total += max(
                mutual_information(ds, child, list(pset))
                for pset in combinations(placed, size)
            )
        best = max(best, total)
    return best


def sample_network(net: BayesNetwork, m: int, seed: int) -> Dataset:
    """Ancestral sampling in topological order; returns m encoded rows."""
    if m < 0:
        raise ValueError("m must be nonnegative")
    rng = substream(seed, "network-sample")
    values: dict[str, np.ndarray] = {}
    for name in net.order:
        table = np.asarray(net.cpts[name], dtype=float)
        pars = list(net.parents[name])
        if pars:
            par_cards = [net.schema.feature(p).cardinality for p in pars]
            codes = [values[p].astype(int) for p in pars]
            row_idx = (
                np.ravel_multi_index(codes, dims=par_cards) if len(pars) > 1 else codes[0]
            )
            probs = table[row_idx]
        else:
            probs = np.repeat(table, m, axis=0)
        values[name] = sample_rows_categorical(probs, rng).astype(float)
    width = len(net.schema.features)
    rows = np.zeros((m, width))
    for j, spec in enumerate(net.schema.features):
        rows[:, j] = values[spec.name]
    return Dataset(schema=net.schema, rows=rows)


def to_original_schema(
    binned: Dataset, original: Schema, rng: np.random.Generator
) -> Dataset:
    """Map a binned synthetic dataset back onto the original schema.

    Features that were continuous in the original schema come back as a
    uniform draw within the sampled bin (deterministic given the rng), which
    preserves the within-bin spread instead of collapsing to midpoints.
    """
    rows = np.array(binned.rows, dtype=float)
    for j, spec in enumerate(original.features):
        if spec.kind != CONTINUOUS:
            continue
        binned_spec = binned.schema.feature(spec.name)
        bins = binned_spec.cardinality
        idx = rows[:, j].astype(int)
        low = idx / bins
        rows[:, j] = low + rng.random(rows.shape[0]) / bins
    return Dataset(schema=original, rows=rows)


def save_network(net: BayesNetwork, path: str) -> None:
    payload = {
        "format": NETWORK_FORMAT,
        "version": NETWORK_VERSION,
        "schema": schema_to_dict(net.schema),
        "order": list(net.order),
        "parents": {k: list(v) for k, v in net.parents.items()},
        "cpts": {k: np.asarray(v).tolist() for k, v in net.cpts.items()},
        "privacy": net.privacy_report,
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle)


def load_network(path: str) -> BayesNetwork:
    with open(path, encoding="utf-8") as handle:
        payload = json.load(handle)
    if payload.get("format") != NETWORK_FORMAT or payload.get("version") != NETWORK_VERSION:
        raise ArtifactFormatError(
            f"{path}: expected {NETWORK_FORMAT} v{NETWORK_VERSION}, "
            f"found {payload.get('format')} v{payload.get('version')}"
        )
    return BayesNetwork(
        schema=schema_from_dict(payload["schema"]),
        order=tuple(payload["order"]),
        parents={k: tuple(v) for k, v in payload["parents"].items()},
        cpts={k: np.array(v, dtype=float) for k, v in payload["cpts"].items()},
        privacy_report=payload["privacy"],
    )
