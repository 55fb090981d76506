"""Factorized mixture model over mixed-type tabular records.

The density is a K-component mixture in which every component factorizes over
features: continuous features (encoded into [0,1]) are Beta, binary features
Bernoulli, categorical features Categorical.  Beta shapes carry Gamma(1,1)
priors, discrete probabilities uniform priors, and the mixture weights a
symmetric Dirichlet(1).

Gradient-based inference works in an unconstrained space: log for Beta
shapes, logit for Bernoulli, and softmax scores with the first score pinned
to zero for Categorical parameters and the mixture weights (the pin removes
the translation degeneracy).  All log-density and gradient evaluations are
analytic and vectorized over a batch of rows; parameter containers are
immutable during evaluation, so per-row work can fan out to threads as long
as reductions keep a fixed order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, digamma, expit, gammaln, logsumexp

from .schema import BINARY, CATEGORICAL, CONTINUOUS, Schema, SchemaError
from .schema import stratum_feature_names, stratum_keys

# Continuous values at the closed endpoints are nudged inward before Beta
# evaluation: the Beta log-density diverges there for shapes < 1.
EDGE_NUDGE = 1e-6


def default_component_count(dim: int) -> int:
    """Component count heuristic: 10 below 20 features, 20 from 20 up."""
    return 10 if dim < 20 else 20


@dataclass(frozen=True)
class FeatureBlock:
    """Layout metadata for one modelled feature."""

    name: str
    kind: str
    cardinality: int  # 0 for continuous

    @property
    def width(self) -> int:
        """Unconstrained parameters per component for this feature."""
        if self.kind == CONTINUOUS:
            return 2  # log alpha, log beta
        if self.kind == BINARY:
            return 1  # logit p
        return self.cardinality - 1  # pinned softmax scores


class MixtureLayout:
    """Index map between the flat unconstrained vector and mixture parameters.

    Vector order: K-1 mixture-weight scores first, then one block per feature
    of shape (K, width) in feature order.
    """

    def __init__(self, blocks: list[FeatureBlock], n_components: int) -> None:
        if n_components < 1:
            raise ValueError("need at least one component")
        self.blocks = list(blocks)
        self.n_components = int(n_components)
        self._offsets: list[int] = []
        offset = max(self.n_components - 1, 0)
        for block in self.blocks:
            self._offsets.append(offset)
            offset += self.n_components * block.width
        self.dim = offset

    @classmethod
    def from_schema(cls, schema: Schema, n_components: int) -> "MixtureLayout":
        blocks = []
        for spec in schema.features:
            card = 0 if spec.kind == CONTINUOUS else spec.cardinality
            blocks.append(FeatureBlock(name=spec.name, kind=spec.kind, cardinality=card))
        return cls(blocks, n_components)

    @property
    def n_features(self) -> int:
        return len(self.blocks)

    def weight_scores(self, u: np.ndarray) -> np.ndarray:
        return u[..., : self.n_components - 1]

    def block_params(self, u: np.ndarray, j: int) -> np.ndarray:
        """Unconstrained block for feature j, shaped (..., K, width)."""
        block = self.blocks[j]
        start = self._offsets[j]
        flat = u[..., start : start + self.n_components * block.width]
        return flat.reshape(*u.shape[:-1], self.n_components, block.width)

    def block_slice(self, j: int) -> slice:
        block = self.blocks[j]
        start = self._offsets[j]
        return slice(start, start + self.n_components * block.width)

    def describe(self) -> dict:
        return {
            "n_components": self.n_components,
            "dim": self.dim,
            "features": [
                {"name": b.name, "kind": b.kind, "cardinality": b.cardinality}
                for b in self.blocks
            ],
        }

    @classmethod
    def from_description(cls, desc: dict) -> "MixtureLayout":
        blocks = [
            FeatureBlock(name=f["name"], kind=f["kind"], cardinality=f["cardinality"])
            for f in desc["features"]
        ]
        return cls(blocks, desc["n_components"])


def _pinned_softmax(scores: np.ndarray) -> np.ndarray:
    """Softmax over [0, scores...] along the last axis."""
    full = np.concatenate(
        [np.zeros(scores.shape[:-1] + (1,)), scores], axis=-1
    )
    full = full - full.max(axis=-1, keepdims=True)
    expd = np.exp(full)
    return expd / expd.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class ComponentDistribution:
    """Constrained per-feature parameters of one mixture component."""

    beta_shapes: dict  # name -> (alpha, beta)
    bernoulli_p: dict  # name -> p
    categorical_q: dict  # name -> probability vector


class MixtureParams:
    """Constrained mixture parameters: weights on the simplex plus, per
    feature, arrays of per-component Beta/Bernoulli/Categorical parameters."""

    def __init__(self, layout: MixtureLayout, weights: np.ndarray, feature_params: list):
        self.layout = layout
        self.weights = np.asarray(weights, dtype=float)
        self.feature_params = feature_params  # per feature: dict of arrays
        if abs(self.weights.sum() - 1.0) > 1e-9 or (self.weights < 0).any():
            raise ValueError("mixture weights must form a probability simplex")

    @property
    def n_components(self) -> int:
        return self.layout.n_components

    def component(self, k: int) -> ComponentDistribution:
        beta_shapes, bern, cat = {}, {}, {}
        for block, params in zip(self.layout.blocks, self.feature_params):
            if block.kind == CONTINUOUS:
                beta_shapes[block.name] = (params["alpha"][k], params["beta"][k])
            elif block.kind == BINARY:
                bern[block.name] = params["p"][k]
            else:
                cat[block.name] = params["q"][k]
        return ComponentDistribution(beta_shapes, bern, cat)

    def permuted(self, perm: list[int]) -> "MixtureParams":
        """Component relabelling; the mixture density is invariant under it."""
        perm = list(perm)
        new_feats = []
        for block, params in zip(self.layout.blocks, self.feature_params):
            new_feats.append({key: np.asarray(val)[perm] for key, val in params.items()})
        return MixtureParams(self.layout, self.weights[perm], new_feats)


def constrain(layout: MixtureLayout, u: np.ndarray) -> MixtureParams:
    """Map an unconstrained vector to valid mixture parameters."""
    u = np.asarray(u, dtype=float)
    K = layout.n_components
    weights = _pinned_softmax(layout.weight_scores(u)) if K > 1 else np.ones(1)
    feature_params = []
    for j, block in enumerate(layout.blocks):
        raw = layout.block_params(u, j)
        if block.kind == CONTINUOUS:
            feature_params.append({"alpha": np.exp(raw[:, 0]), "beta": np.exp(raw[:, 1])})
        elif block.kind == BINARY:
            feature_params.append({"p": expit(raw[:, 0])})
        else:
            feature_params.append({"q": _pinned_softmax(raw)})
    return MixtureParams(layout, weights, feature_params)


def unconstrain(params: MixtureParams) -> np.ndarray:
    """Inverse of constrain; round-trips to 1e-9."""
    layout = params.layout
    u = np.zeros(layout.dim)
    if layout.n_components > 1:
        logw = np.log(params.weights)
        u[: layout.n_components - 1] = logw[1:] - logw[0]
    for j, block in enumerate(layout.blocks):
        sl = layout.block_slice(j)
        raw = np.zeros((layout.n_components, block.width))
        fp = params.feature_params[j]
        if block.kind == CONTINUOUS:
            raw[:, 0] = np.log(fp["alpha"])
            raw[:, 1] = np.log(fp["beta"])
        elif block.kind == BINARY:
            p = np.asarray(fp["p"], dtype=float)
            raw[:, 0] = np.log(p) - np.log1p(-p)
        else:
            logq = np.log(fp["q"])
            raw[:, :] = logq[:, 1:] - logq[:, :1]
        u[sl] = raw.reshape(-1)
    return u


def _nudge(x: np.ndarray) -> np.ndarray:
    return np.clip(x, EDGE_NUDGE, 1.0 - EDGE_NUDGE)


def _component_log_densities(params: MixtureParams, X: np.ndarray) -> np.ndarray:
    """Per-row per-component log density, shape (B, K)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    B = X.shape[0]
    if X.shape[1] != params.layout.n_features:
        raise ValueError(
            f"row width {X.shape[1]} != modelled features {params.layout.n_features}"
        )
    L = np.zeros((B, params.n_components))
    for j, block in enumerate(params.layout.blocks):
        fp = params.feature_params[j]
        x = X[:, j]
        if block.kind == CONTINUOUS:
            xc = _nudge(x)[:, None]
            a, b = fp["alpha"][None, :], fp["beta"][None, :]
            L += (a - 1.0) * np.log(xc) + (b - 1.0) * np.log1p(-xc) - betaln(a, b)
        elif block.kind == BINARY:
            p = fp["p"][None, :]
            xb = x[:, None]
            L += xb * np.log(p) + (1.0 - xb) * np.log1p(-p)
        else:
            logq = np.log(fp["q"])  # (K, C)
            L += logq[:, x.astype(int)].T
    return L


def log_likelihood(params: MixtureParams, rows: np.ndarray) -> np.ndarray:
    """log sum_k pi_k prod_j p(x_j | theta_jk) per row, log-sum-exp stabilized.

    Accepts a single row (returns a scalar) or a (B, D) batch (returns (B,)).
    """
    single = np.asarray(rows).ndim == 1
    L = _component_log_densities(params, rows) + np.log(params.weights)[None, :]
    out = logsumexp(L, axis=1)
    return float(out[0]) if single else out


def log_prior(params: MixtureParams) -> float:
    """Log prior density in constrained space.

    Gamma(1,1) on every Beta shape, uniform (Beta(1,1) / Dirichlet(1)) on the
    discrete parameters, symmetric Dirichlet(1) on the weights; normalizing
    constants included so densities integrate to one.
    """
    total = 0.0
    K = params.n_components
    for block, fp in zip(params.layout.blocks, params.feature_params):
        if block.kind == CONTINUOUS:
            total += float(-(fp["alpha"].sum() + fp["beta"].sum()))
        elif block.kind == CATEGORICAL:
            total += K * float(gammaln(block.cardinality))
        # uniform Bernoulli prior contributes log 1 = 0
    total += float(gammaln(K))
    return total


def log_jacobian(layout: MixtureLayout, u: np.ndarray) -> float:
    """Log absolute Jacobian determinant of the constraining transform."""
    params = constrain(layout, u)
    total = 0.0
    if layout.n_components > 1:
        total += float(np.log(params.weights).sum())
    for block, fp in zip(layout.blocks, params.feature_params):
        if block.kind == CONTINUOUS:
            total += float(np.log(fp["alpha"]).sum() + np.log(fp["beta"]).sum())
        elif block.kind == BINARY:
            p = fp["p"]
            total += float(np.log(p).sum() + np.log1p(-p).sum())
        else:
            total += float(np.log(fp["q"]).sum())
    return total


def log_prior_unconstrained(layout: MixtureLayout, u: np.ndarray) -> float:
    """log p(theta(u)) + log |J(u)|; the prior as a density over u."""
    return log_prior(constrain(layout, u)) + log_jacobian(layout, u)


def grad_log_likelihood(
    layout: MixtureLayout, u: np.ndarray, X: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row gradients of the mixture log-likelihood w.r.t. u.

    Returns (loglik (B,), grads (B, P)).  Kept separate from the prior
    gradient so that per-example clipping touches only data-dependent terms.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    params = constrain(layout, u)
    K = layout.n_components
    B = X.shape[0]

    L = _component_log_densities(params, X) + np.log(params.weights)[None, :]
    loglik = logsumexp(L, axis=1)
    resp = np.exp(L - loglik[:, None])  # (B, K) responsibilities

    grads = np.zeros((B, layout.dim))
    if K > 1:
        grads[:, : K - 1] = resp[:, 1:] - params.weights[None, 1:]
    for j, block in enumerate(layout.blocks):
        fp = params.feature_params[j]
        x = X[:, j]
        sl = layout.block_slice(j)
        if block.kind == CONTINUOUS:
            xc = _nudge(x)[:, None]
            a, b = fp["alpha"][None, :], fp["beta"][None, :]
            psi_ab = digamma(a + b)
            ga = resp * a * (np.log(xc) - digamma(a) + psi_ab)
            gb = resp * b * (np.log1p(-xc) - digamma(b) + psi_ab)
            grads[:, sl] = np.stack([ga, gb], axis=-1).reshape(B, -1)
        elif block.kind == BINARY:
            grads[:, sl] = resp * (x[:, None] - fp["p"][None, :])
        else:
            q = fp["q"]  # (K, C)
            onehot_free = (x.astype(int)[:, None] == np.arange(1, block.cardinality)).astype(float)
            g = resp[:, :, None] * (onehot_free[:, None, :] - q[None, :, 1:])
            grads[:, sl] = g.reshape(B, -1)

    if not np.isfinite(grads).all():
        bad = np.argwhere(~np.isfinite(grads))
        raise FloatingPointError(
            f"non-finite likelihood gradient at (row, param) {tuple(bad[0])}"
        )
    return loglik, grads


def grad_log_prior(layout: MixtureLayout, u: np.ndarray) -> np.ndarray:
    """Gradient of log p(theta(u)) + log |J(u)| w.r.t. u; data-independent."""
    params = constrain(layout, u)
    K = layout.n_components
    grad = np.zeros(layout.dim)
    if K > 1:
        grad[: K - 1] = 1.0 - K * params.weights[1:]
    for j, block in enumerate(layout.blocks):
        fp = params.feature_params[j]
        sl = layout.block_slice(j)
        if block.kind == CONTINUOUS:
            ga = 1.0 - fp["alpha"]
            gb = 1.0 - fp["beta"]
            grad[sl] = np.stack([ga, gb], axis=-1).reshape(-1)
        elif block.kind == BINARY:
            grad[sl] = 1.0 - 2.0 * fp["p"]
        else:
            grad[sl] = (1.0 - block.cardinality * fp["q"][:, 1:]).reshape(-1)
    if not np.isfinite(grad).all():
        bad = int(np.argwhere(~np.isfinite(grad))[0][0])
        raise FloatingPointError(f"non-finite prior gradient at parameter {bad}")
    return grad


def grad_log_joint(
    layout: MixtureLayout, u: np.ndarray, X: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row likelihood gradients and the separate prior gradient.

    The total joint gradient is exactly grads.sum(axis=0) + prior_grad; the
    separation exists so clipping can apply to the data-dependent part only.
    """
    _, grads = grad_log_likelihood(layout, u, X)
    return grads, grad_log_prior(layout, u)


def sample_records(
    layout: MixtureLayout, u_draws: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Draw one record per unconstrained parameter vector.

    u_draws has shape (B, P): row i holds the parameters used for record i
    (posterior-predictive sampling draws fresh parameters per record).
    Returns a (B, D) encoded matrix.
    """
    u_draws = np.atleast_2d(np.asarray(u_draws, dtype=float))
    B = u_draws.shape[0]
    K = layout.n_components

    if K > 1:
        weights = _pinned_softmax(layout.weight_scores(u_draws))  # (B, K)
    else:
        weights = np.ones((B, 1))
    comp = sample_rows_categorical(weights, rng)  # (B,)

    out = np.zeros((B, layout.n_features))
    rows = np.arange(B)
    for j, block in enumerate(layout.blocks):
        raw = layout.block_params(u_draws, j)  # (B, K, width)
        chosen = raw[rows, comp]  # (B, width)
        if block.kind == CONTINUOUS:
            alpha = np.exp(chosen[:, 0])
            beta = np.exp(chosen[:, 1])
            out[:, j] = rng.beta(alpha, beta)
        elif block.kind == BINARY:
            p = expit(chosen[:, 0])
            out[:, j] = (rng.random(B) < p).astype(float)
        else:
            out[:, j] = sample_rows_categorical(_pinned_softmax(chosen), rng)
    return out


def sample_rows_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise inverse-CDF categorical sampling, robust at the upper edge."""
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    cdf = np.cumsum(probs, axis=1)
    r = rng.random((probs.shape[0], 1)) * cdf[:, -1:]
    return np.minimum((r >= cdf).sum(axis=1), probs.shape[1] - 1)


@dataclass(frozen=True)
class StratifiedSkeleton:
    """Per-stratum mixture layouts plus bookkeeping for later DP release.

    The model variant is fully determined by the schema: no stratification
    gives a single mixture over all features; stratification features plus
    structural rules shrink each stratum's layout to the features it retains.
    """

    schema: Schema
    n_components: int
    keys: tuple[tuple[str, ...], ...]
    layouts: dict  # key -> MixtureLayout
    feature_names: dict  # key -> list of modelled feature names


def build_stratified(schema: Schema, n_components: int | None = None) -> StratifiedSkeleton:
    """Build per-stratum mixture skeletons from the schema alone (no data)."""
    keys = stratum_keys(schema)
    layouts = {}
    names = {}
    for key in keys:
        kept = stratum_feature_names(schema, key)
        if not kept:
            raise SchemaError(f"stratum {key} retains no features to model")
        sub = schema.subset(kept)
        k_here = (
            n_components
            if n_components is not None
            else default_component_count(len(kept))
        )
        if k_here < 1:
            raise ValueError("component count must be >= 1")
        layouts[key] = MixtureLayout.from_schema(sub, k_here)
        names[key] = kept
    k_common = next(iter(layouts.values())).n_components
    return StratifiedSkeleton(
        schema=schema,
        n_components=k_common,
        keys=tuple(keys),
        layouts=layouts,
        feature_names=names,
    )


def elbo_entropy(log_stds: np.ndarray) -> float:
    """Entropy of the mean-field Gaussian q: sum(log s) + P/2*log(2*pi*e)."""
    log_stds = np.asarray(log_stds, dtype=float)
    return float(log_stds.sum() + 0.5 * log_stds.size * math.log(2.0 * math.pi * math.e))
