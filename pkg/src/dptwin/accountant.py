"""Privacy accounting: RDP composition, mechanism calibration, budget splitting.

The accountant tracks every randomized access to the sensitive data as a
mechanism record and converts the accumulated Renyi divergences into a single
(epsilon, delta) guarantee.  Composition is done in RDP space on a fixed order
grid; pure-epsilon mechanisms (Laplace, exponential) enter as a flat RDP curve,
which is a valid upper bound at every order.

Adjacency convention: guarantees are stated for the substitute relation
(neighbouring datasets replace one record, so the record count is public).
Mechanisms are responsible for passing substitute-relation sensitivities when
they calibrate noise (e.g. an L1 count histogram has sensitivity 2 because a
substitution moves one record between two cells).  The subsampled-Gaussian
record for DP-SGD uses the standard noise-multiplier analysis of the sampled
Gaussian mechanism; see the privacy notes in the README for the constants used
by each caller.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PrivacyBudget",
    "MechanismRecord",
    "Accountant",
    "BudgetExceededError",
    "CalibrationError",
    "DEFAULT_RDP_ORDERS",
    "rdp_subsampled_gaussian",
    "rdp_to_epsilon",
    "calibrate_gaussian",
    "calibrate_gaussian_rdp",
    "gaussian_mechanism_delta",
    "noise_multiplier_for",
    "split_budget",
    "laplace_scale",
    "exponential_select",
    "mi_sensitivity_bits",
]


class BudgetExceededError(RuntimeError):
    """Appending a record would push the accountant past its epsilon limit."""


class CalibrationError(ValueError):
    """A mechanism cannot be calibrated for the requested parameters."""


# Fixed, documented order grid: fractional low orders plus integers up to 64
# and a coarse high tail.  Deterministic reports require a frozen grid.
DEFAULT_RDP_ORDERS: tuple[float, ...] = tuple(
    [1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 3.0, 3.5, 4.0, 4.5]
    + list(range(5, 65))
    + [128.0, 256.0, 512.0]
)


@dataclass(frozen=True)
class PrivacyBudget:
    """(epsilon, delta) pair; delta strictly below 1."""

    epsilon: float
    delta: float

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if not 0 <= self.delta < 1:
            raise ValueError(f"delta must lie in [0, 1), got {self.delta}")


@dataclass(frozen=True)
class MechanismRecord:
    """One randomized access to the data.

    kind is one of:
      - "subsampled_gaussian": params sigma (noise multiplier), q (Poisson
        sampling ratio), steps.
      - "gaussian": params sigma (noise std), sensitivity (L2).
      - "laplace": params scale, sensitivity (L1).  Pure epsilon = sens/scale.
      - "exponential": params epsilon, sensitivity.  Pure epsilon.
    """

    kind: str
    params: dict = field(default_factory=dict)
    label: str = ""

    _KINDS = ("subsampled_gaussian", "gaussian", "laplace", "exponential")

    def __post_init__(self) -> None:
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown mechanism kind {self.kind!r}")
        for name, value in self.params.items():
            if name == "steps":
                if value < 1:
                    raise ValueError("steps must be >= 1")
            elif (name == "sigma" and self.kind == "subsampled_gaussian") or (
                name == "scale" and self.kind == "laplace"
            ):
                # zero noise records an explicitly non-private run (epsilon = inf)
                if value < 0:
                    raise ValueError(f"{name} must be nonnegative")
            elif not value > 0:
                raise ValueError(f"{self.kind}: parameter {name}={value} must be positive")
        if self.kind == "subsampled_gaussian" and not 0 < self.params["q"] <= 1:
            raise ValueError(f"sampling ratio q={self.params['q']} outside (0, 1]")

    def rdp(self, order: float) -> float:
        """Renyi divergence bound contributed by this record at the given order."""
        if self.kind == "subsampled_gaussian":
            per_step = rdp_subsampled_gaussian(
                self.params["sigma"], self.params["q"], order
            )
            return self.params["steps"] * per_step
        if self.kind == "gaussian":
            ratio = self.params["sigma"] / self.params["sensitivity"]
            return order / (2.0 * ratio**2)
        if self.kind == "laplace":
            if self.params["scale"] == 0:
                return math.inf
            return self.params["sensitivity"] / self.params["scale"]
        # exponential: pure epsilon at all orders
        return self.params["epsilon"]

    def pure_epsilon(self) -> float | None:
        if self.kind == "laplace":
            if self.params["scale"] == 0:
                return math.inf
            return self.params["sensitivity"] / self.params["scale"]
        if self.kind == "exponential":
            return self.params["epsilon"]
        return None


def _log_add(logx: float, logy: float) -> float:
    a, b = min(logx, logy), max(logx, logy)
    if a == -math.inf:
        return b
    return math.log1p(math.exp(a - b)) + b


def _log_moment_int(q: float, sigma: float, alpha: int) -> float:
    """log E[(mu(x)/p(x))^alpha] for the Poisson-subsampled Gaussian, integer alpha.

    Binomial expansion of the alpha-th moment of the likelihood ratio between
    N(0, sigma^2) and the mixture (1-q) N(0, sigma^2) + q N(1, sigma^2).
    """
    log_a = -math.inf
    for i in range(alpha + 1):
        log_coef = (
            math.lgamma(alpha + 1)
            - math.lgamma(i + 1)
            - math.lgamma(alpha - i + 1)
            + i * math.log(q)
            + (alpha - i) * math.log1p(-q)
        )
        log_a = _log_add(log_a, log_coef + (i * i - i) / (2.0 * sigma**2))
    return log_a


def rdp_subsampled_gaussian(sigma: float, q: float, order: float) -> float:
    """RDP of one Poisson-subsampled Gaussian step at the given order.

    Integer orders use the exact binomial expansion of the log-moment;
    non-integer orders use the convexity upper bound interpolated between the
    integer neighbours (log-moments are convex in the order by Holder).
    Returns +inf when the moment diverges (sigma == 0).
    """
    if sigma <= 0:
        return math.inf
    if not 0 < q <= 1:
        raise ValueError(f"q={q} outside (0, 1]")
    if order <= 1:
        raise ValueError(f"RDP order must exceed 1, got {order}")
    if q == 1.0:
        return order / (2.0 * sigma**2)
    if float(order).is_integer():
        return _log_moment_int(q, sigma, int(order)) / (order - 1.0)
    lo = math.floor(order)
    hi = lo + 1
    # log-moment at order 1 is exactly 0 (the ratio integrates to 1)
    log_lo = 0.0 if lo == 1 else _log_moment_int(q, sigma, lo)
    log_hi = _log_moment_int(q, sigma, hi)
    t = order - lo
    return ((1.0 - t) * log_lo + t * log_hi) / (order - 1.0)


def rdp_to_epsilon(
    orders: np.ndarray, rdp: np.ndarray, delta: float
) -> tuple[float, float]:
    """Convert an RDP curve to epsilon at the given delta.

    Returns (epsilon, best order).  epsilon = min over orders of
    rdp(a) + log(1/delta) / (a - 1).
    """
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    orders = np.asarray(orders, dtype=float)
    rdp = np.asarray(rdp, dtype=float)
    eps = rdp + math.log(1.0 / delta) / (orders - 1.0)
    idx = int(np.argmin(eps))
    return float(eps[idx]), float(orders[idx])


class Accountant:
    """Append-only ledger of mechanism records with a running (epsilon, delta).

    Appends must be externally serialized; epsilon queries are read-only.
    An optional epsilon_limit turns the accountant into a gatekeeper: appends
    that would exceed the limit raise BudgetExceededError without recording.
    """

    def __init__(
        self,
        target_delta: float,
        epsilon_limit: float | None = None,
        orders: tuple[float, ...] = DEFAULT_RDP_ORDERS,
    ) -> None:
        if not 0 < target_delta < 1:
            raise ValueError(f"target_delta must lie in (0, 1), got {target_delta}")
        self.target_delta = float(target_delta)
        self.epsilon_limit = None if epsilon_limit is None else float(epsilon_limit)
        self.orders = np.asarray(orders, dtype=float)
        self.records: list[MechanismRecord] = []

    def _rdp_of(self, record: MechanismRecord) -> np.ndarray:
        return np.array([record.rdp(a) for a in self.orders])

    def _epsilon_total(self, records: list[MechanismRecord]) -> float:
        """Min over two sound composition routes.

        Route A composes everything in RDP space.  Route B composes pure-
        epsilon records by basic composition (exactly additive, delta 0) and
        only the rest through RDP; this keeps pure mechanisms from paying the
        RDP conversion overhead.
        """
        if not records:
            return 0.0
        rdp_all = np.zeros_like(self.orders)
        rdp_nonpure = np.zeros_like(self.orders)
        pure_sum = 0.0
        any_nonpure = False
        for record in records:
            curve = self._rdp_of(record)
            rdp_all = rdp_all + curve
            pure = record.pure_epsilon()
            if pure is None:
                any_nonpure = True
                rdp_nonpure = rdp_nonpure + curve
            else:
                pure_sum += pure
        route_a, _ = rdp_to_epsilon(self.orders, rdp_all, self.target_delta)
        route_b = pure_sum
        if any_nonpure:
            route_b += rdp_to_epsilon(self.orders, rdp_nonpure, self.target_delta)[0]
        return min(route_a, route_b)

    def admits(self, *records: MechanismRecord) -> bool:
        """Would appending these records stay within the epsilon limit?"""
        if self.epsilon_limit is None:
            return True
        eps = self._epsilon_total(self.records + list(records))
        return eps <= self.epsilon_limit + 1e-12

    def append(self, record: MechanismRecord) -> None:
        if not self.admits(record):
            projected = self._epsilon_total(self.records + [record])
            raise BudgetExceededError(
                f"appending {record.kind} ({record.label or 'unlabelled'}) would "
                f"spend epsilon={projected:.4g} > limit {self.epsilon_limit:.4g} "
                f"at delta={self.target_delta:g}"
            )
        self.records.append(record)

    def epsilon(self) -> PrivacyBudget:
        """Tightest (epsilon, target_delta) over both routes; 0 when empty."""
        return PrivacyBudget(self._epsilon_total(self.records), self.target_delta)

    def report(self) -> dict:
        """Machine-readable privacy report: every record plus the final budget."""
        budget = self.epsilon()
        return {
            "target_delta": self.target_delta,
            "epsilon_limit": self.epsilon_limit,
            "epsilon_spent": budget.epsilon,
            "records": [
                {"kind": r.kind, "params": dict(r.params), "label": r.label}
                for r in self.records
            ],
        }

    def report_json(self) -> str:
        return json.dumps(self.report(), indent=2, sort_keys=True)


def gaussian_mechanism_delta(epsilon: float, sigma: float, sensitivity: float) -> float:
    """Exact delta of the Gaussian mechanism at a given epsilon.

    Tight characterization via the two Gaussian tail terms:
    delta = Phi(s/(2 sigma) - eps sigma/s) - e^eps Phi(-s/(2 sigma) - eps sigma/s).
    """
    if sigma <= 0 or sensitivity <= 0:
        raise ValueError("sigma and sensitivity must be positive")
    s = sensitivity
    a = s / (2.0 * sigma) - epsilon * sigma / s
    b = -s / (2.0 * sigma) - epsilon * sigma / s
    phi = lambda x: 0.5 * math.erfc(-x / math.sqrt(2.0))
    return phi(a) - math.exp(epsilon) * phi(b)


def calibrate_gaussian(epsilon: float, delta: float, sensitivity: float) -> float:
    """Classical Gaussian mechanism noise std for (epsilon, delta), epsilon < 1.

    sigma = sensitivity * sqrt(2 ln(1.25/delta)) / epsilon.  The classical
    bound is only valid for epsilon in (0, 1); larger budgets must use
    calibrate_gaussian_rdp.
    """
    if not 0 < epsilon < 1:
        raise CalibrationError(
            f"classical Gaussian calibration requires 0 < epsilon < 1 "
            f"(got {epsilon}); use calibrate_gaussian_rdp for larger budgets"
        )
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if sensitivity <= 0:
        raise ValueError("sensitivity must be positive")
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def calibrate_gaussian_rdp(
    epsilon: float,
    delta: float,
    sensitivity: float,
    orders: tuple[float, ...] = DEFAULT_RDP_ORDERS,
) -> float:
    """Gaussian noise std such that the RDP curve converts to (epsilon, delta).

    Valid for any epsilon > 0; used where the classical bound does not apply.
    """
    if epsilon <= 0:
        raise CalibrationError("epsilon must be positive")
    orders_arr = np.asarray(orders, dtype=float)

    def eps_at(sigma: float) -> float:
        rdp = orders_arr * sensitivity**2 / (2.0 * sigma**2)
        return rdp_to_epsilon(orders_arr, rdp, delta)[0]

    lo, hi = sensitivity * 1e-6, sensitivity * 1e6
    if eps_at(hi) > epsilon:
        raise CalibrationError("epsilon target unattainable within search range")
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if eps_at(mid) > epsilon:
            lo = mid
        else:
            hi = mid
    return hi


def noise_multiplier_for(
    epsilon: float,
    delta: float,
    q: float,
    steps: int,
    orders: tuple[float, ...] = DEFAULT_RDP_ORDERS,
) -> float:
    """Smallest noise multiplier giving (epsilon, delta) for a DP-SGD plan.

    Binary search over sigma for steps iterations of the Poisson-subsampled
    Gaussian at sampling ratio q.
    """
    if epsilon <= 0:
        raise CalibrationError("epsilon target must be positive mass")
    orders_arr = np.asarray(orders, dtype=float)

    def eps_at(sigma: float) -> float:
        rdp = steps * np.array([rdp_subsampled_gaussian(sigma, q, a) for a in orders_arr])
        return rdp_to_epsilon(orders_arr, rdp, delta)[0]

    lo, hi = 1e-2, 1.0
    while eps_at(hi) > epsilon:
        hi *= 2.0
        if hi > 1e6:
            raise CalibrationError("epsilon target unattainable within search range")
    for _ in range(100):
        mid = math.sqrt(lo * hi)
        if eps_at(mid) > epsilon:
            lo = mid
        else:
            hi = mid
    return hi


def split_budget(
    total: PrivacyBudget, queries: int, delta_mode: str = "split"
) -> PrivacyBudget:
    """Uniform per-query budget for a plan of `queries` anticipated accesses.

    Basic composition: epsilon/T always; delta/T by default ("split"), or the
    full delta on every query ("shared", composing to T*delta overall — callers
    opting in must account for it).
    """
    if queries < 1:
        raise ValueError(f"queries must be >= 1, got {queries}")
    if delta_mode not in ("split", "shared"):
        raise ValueError(f"unknown delta_mode {delta_mode!r}")
    delta = total.delta / queries if delta_mode == "split" else total.delta
    return PrivacyBudget(total.epsilon / queries, delta)


def laplace_scale(epsilon: float, sensitivity: float) -> float:
    """Laplace mechanism scale for pure epsilon-DP at the given L1 sensitivity."""
    if epsilon <= 0:
        raise CalibrationError("epsilon must be positive")
    if sensitivity <= 0:
        raise ValueError("sensitivity must be positive")
    return sensitivity / epsilon


def exponential_select(
    utilities: np.ndarray,
    epsilon: float,
    sensitivity: float,
    rng: np.random.Generator,
) -> int:
    """Exponential mechanism via the Gumbel-max trick.

    Selects index i with probability proportional to
    exp(epsilon * u_i / (2 * sensitivity)).  An infinite epsilon degenerates
    to a deterministic argmax (ties broken by lowest index).
    """
    utilities = np.asarray(utilities, dtype=float)
    if utilities.size == 0:
        raise ValueError("no candidates to select from")
    if sensitivity <= 0:
        raise ValueError("sensitivity must be positive")
    if math.isinf(epsilon):
        return int(np.argmax(utilities))
    if epsilon <= 0:
        raise CalibrationError("epsilon must be positive")
    scores = epsilon * utilities / (2.0 * sensitivity)
    gumbel = rng.gumbel(size=utilities.shape)
    return int(np.argmax(scores + gumbel))


def mi_sensitivity_bits(n: int) -> float:
    """Substitute-adjacency sensitivity of empirical mutual information (bits).

    (2/n) log2((n+1)/2) + ((n-1)/n) log2((n+1)/(n-1)); the worst-case change
    when one of n records is replaced.  Derivation in docs/privacy_notes.md.
    """
    if n < 2:
        raise ValueError("need at least 2 records")
    return (2.0 / n) * math.log2((n + 1) / 2.0) + ((n - 1.0) / n) * math.log2(
        (n + 1.0) / (n - 1.0)
    )
