"""Renyi-DP accounting: per-mechanism curves, composition, conversion, calibration.

Noise conventions
-----------------
* ``SubsampledGaussian.sigma`` is a *noise multiplier*: the noise standard
  deviation divided by the L2 sensitivity (the DP-SGD convention).
* ``Gaussian.sigma`` is the *absolute* noise standard deviation; the curve
  scales with ``sensitivity**2 / sigma**2``.
* ``Laplace.b`` is the absolute Laplace scale.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, Union

import numpy as np
from scipy import integrate, special

from .errors import BudgetError, CalibrationError, DomainError

DEFAULT_DELTA = 1e-5

DEFAULT_ORDERS: tuple[float, ...] = tuple(
    [1 + x / 10 for x in range(1, 10)] + [float(a) for a in range(2, 65)] + [128.0, 256.0]
)

SIGMA_MIN = 1e-2
SIGMA_MAX = 1e4


@dataclass(frozen=True)
class RdpCurve:
    """Renyi-DP guarantee ``eps_rdp[i]`` at order ``orders[i]``.

    Orders whose value overflowed are dropped, so two curves built for the
    same grid may differ in length; :meth:`__add__` aligns on shared orders.
    """

    orders: tuple[float, ...]
    eps_rdp: tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.eps_rdp):
            raise DomainError("orders and eps_rdp must have equal length")
        for a, e in zip(self.orders, self.eps_rdp):
            if not a > 1:
                raise DomainError(f"RDP order must exceed 1, got {a}")
            if not (math.isfinite(e) and e >= 0):
                raise DomainError(f"RDP value at order {a} must be finite and >= 0, got {e}")

    @classmethod
    def from_arrays(cls, orders, values) -> "RdpCurve":
        keep = [(float(a), float(v)) for a, v in zip(orders, values) if math.isfinite(v)]
        # Tiny negative values come from cancellation in log-space sums.
        return cls(tuple(a for a, _ in keep), tuple(max(v, 0.0) for _, v in keep))

    def __len__(self):
        return len(self.orders)

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        theirs = dict(zip(other.orders, other.eps_rdp))
        pairs = [(a, e + theirs[a]) for a, e in zip(self.orders, self.eps_rdp) if a in theirs]
        return RdpCurve(tuple(a for a, _ in pairs), tuple(e for _, e in pairs))

    def scale(self, k: float) -> "RdpCurve":
        return RdpCurve(self.orders, tuple(k * e for e in self.eps_rdp))

    def as_arrays(self):
        return np.asarray(self.orders), np.asarray(self.eps_rdp)


# ---------------------------------------------------------------------------
# Mechanism events
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubsampledGaussian:
    q: float
    sigma: float
    steps: int = 1
    kind: str = field(default="subsampled-gaussian", init=False)

    def __post_init__(self):
        if not 0 < self.q <= 1:
            raise DomainError(f"sampling rate must lie in (0, 1], got {self.q}")
        if not self.sigma > 0:
            raise DomainError(f"noise multiplier must be positive, got {self.sigma}")
        if self.steps < 1:
            raise DomainError(f"steps must be >= 1, got {self.steps}")


@dataclass(frozen=True)
class Gaussian:
    """``count`` independent releases with absolute noise std ``sigma``."""

    sigma: float
    sensitivity: float = 1.0
    count: int = 1
    kind: str = field(default="gaussian", init=False)

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"noise scale must be positive, got {self.sigma}")
        if not self.sensitivity > 0:
            raise DomainError(f"sensitivity must be positive, got {self.sensitivity}")
        if self.count < 1:
            raise DomainError(f"count must be >= 1, got {self.count}")


@dataclass(frozen=True)
class Laplace:
    b: float
    sensitivity: float = 1.0
    kind: str = field(default="laplace", init=False)

    def __post_init__(self):
        if not self.b > 0:
            raise DomainError(f"Laplace scale must be positive, got {self.b}")
        if not self.sensitivity > 0:
            raise DomainError(f"sensitivity must be positive, got {self.sensitivity}")


@dataclass(frozen=True)
class RandomizedResponse:
    k: int
    epsilon: float
    kind: str = field(default="randomized-response", init=False)

    def __post_init__(self):
        if self.k < 2:
            raise DomainError(f"randomized response needs k >= 2, got {self.k}")
        if not self.epsilon > 0:
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")


MechanismEvent = Union[SubsampledGaussian, Gaussian, Laplace, RandomizedResponse]


@dataclass(frozen=True)
class PrivacySpec:
    """Target ``(epsilon, delta)`` and the neighbouring-dataset convention."""

    epsilon: float
    delta: float = DEFAULT_DELTA
    convention: str = "unbounded"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise DomainError(f"epsilon must be positive (or inf), got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise DomainError(f"delta must lie in (0, 1), got {self.delta}")
        if self.convention not in ("bounded", "unbounded"):
            raise DomainError(f"unknown convention {self.convention!r}")

    @property
    def is_private(self) -> bool:
        return math.isfinite(self.epsilon)


# ---------------------------------------------------------------------------
# Curves for individual mechanisms
# ---------------------------------------------------------------------------


def rdp_gaussian(sigma: float, sensitivity: float = 1.0, orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    """Gaussian mechanism with absolute noise std ``sigma``."""
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    orders = np.asarray(orders, dtype=float)
    return RdpCurve.from_arrays(orders, orders * sensitivity**2 / (2 * sigma**2))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    i = np.arange(alpha + 1, dtype=float)
    log_terms = (
        special.gammaln(alpha + 1)
        - special.gammaln(i + 1)
        - special.gammaln(alpha - i + 1)
        + i * math.log(q)
        + (alpha - i) * math.log1p(-q)
        + (i * i - i) / (2 * sigma**2)
    )
    return float(special.logsumexp(log_terms))


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    # E_{z~N(0, sigma^2)} [((1 - q) + q * exp((2z - 1) / (2 sigma^2)))^alpha]
    log1mq, logq = math.log1p(-q), math.log(q)
    two_s2 = 2 * sigma**2

    def log_f(z):
        z = np.asarray(z, dtype=float)
        mix = np.logaddexp(log1mq, logq + (2 * z - 1) / two_s2)
        return -(z * z) / two_s2 - 0.5 * math.log(2 * math.pi * sigma**2) + alpha * mix

    lo, hi = -60 * sigma - 2, alpha + 60 * sigma + 2
    grid = np.linspace(lo, hi, 4001)
    vals = log_f(grid)
    shift = float(vals.max())
    peak = float(grid[int(vals.argmax())])
    integral, _ = integrate.quad(
        lambda z: math.exp(float(log_f(z)) - shift), lo, hi, points=[peak], limit=400, epsabs=0, epsrel=1e-12
    )
    if integral <= 0:
        return math.inf
    return shift + math.log(integral)


@functools.lru_cache(maxsize=4096)
def _subsampled_cached(q: float, sigma: float, orders: tuple[float, ...]) -> RdpCurve:
    values = []
    for a in orders:
        if q == 1.0:
            values.append(a / (2 * sigma**2))
            continue
        try:
            if float(a).is_integer():
                log_a = _log_a_int(q, sigma, int(a))
            else:
                log_a = _log_a_frac(q, sigma, a)
        except (OverflowError, FloatingPointError):
            log_a = math.inf
        values.append(log_a / (a - 1))
    return RdpCurve.from_arrays(orders, values)


def rdp_subsampled_gaussian(q: float, sigma: float, orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    """One step of the Poisson-subsampled Gaussian mechanism.

    Integer orders use the binomial expansion of the moment in log space;
    fractional orders integrate the moment numerically.  Orders whose value
    is not finite are dropped from the returned curve.
    """
    if not 0 < q <= 1:
        raise DomainError(f"q must lie in (0, 1], got {q}")
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    return _subsampled_cached(float(q), float(sigma), tuple(float(a) for a in orders))


def rdp_laplace(b: float, sensitivity: float = 1.0, orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    lam = b / sensitivity
    values = []
    for a in orders:
        # log( a/(2a-1) e^{(a-1)/lam} + (a-1)/(2a-1) e^{-a/lam} ) / (a-1)
        t = np.logaddexp(
            math.log(a / (2 * a - 1)) + (a - 1) / lam,
            math.log((a - 1) / (2 * a - 1)) - a / lam,
        )
        values.append(float(t) / (a - 1))
    return RdpCurve.from_arrays(orders, values)


def rdp_randomized_response(k: int, epsilon: float, orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    """Exact Renyi divergence between k-ary RR output laws for two inputs."""
    p = rr_params(epsilon, k)
    r = (1 - p) / (k - 1)
    values = []
    for a in orders:
        terms = [a * math.log(p) + (1 - a) * math.log(r), a * math.log(r) + (1 - a) * math.log(p)]
        if k > 2:
            terms.append(math.log((k - 2) * r))
        values.append(float(special.logsumexp(terms)) / (a - 1))
    return RdpCurve.from_arrays(orders, values)


def event_curve(event: MechanismEvent, orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    if isinstance(event, SubsampledGaussian):
        return rdp_subsampled_gaussian(event.q, event.sigma, orders).scale(event.steps)
    if isinstance(event, Gaussian):
        return rdp_gaussian(event.sigma, event.sensitivity, orders).scale(event.count)
    if isinstance(event, Laplace):
        return rdp_laplace(event.b, event.sensitivity, orders)
    if isinstance(event, RandomizedResponse):
        return rdp_randomized_response(event.k, event.epsilon, orders)
    raise DomainError(f"unknown mechanism event {event!r}")


def compose(events: Iterable[MechanismEvent], orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    events = list(events)
    if not events:
        raise DomainError("compose needs at least one event")
    total = event_curve(events[0], orders)
    for ev in events[1:]:
        total = total + event_curve(ev, orders)
    return total


def to_dp(curve: RdpCurve, delta: float = DEFAULT_DELTA) -> float:
    """Convert an RDP curve to the smallest epsilon at ``delta``.

    Uses the classic bound ``eps(a) + log(1/delta) / (a - 1)``.
    """
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    if len(curve) == 0:
        raise DomainError("cannot convert an empty RDP curve")
    orders, eps = curve.as_arrays()
    return float(np.min(eps + math.log(1 / delta) / (orders - 1)))


def epsilon_of(events: Iterable[MechanismEvent], delta: float = DEFAULT_DELTA,
               orders: Sequence[float] = DEFAULT_ORDERS) -> float:
    return to_dp(compose(events, orders), delta)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


def calibrate(events_for: Callable[[float], list], target: PrivacySpec,
              lo: float = SIGMA_MIN, hi: float = SIGMA_MAX, rtol: float = 1e-3,
              orders: Sequence[float] = DEFAULT_ORDERS) -> float:
    """Smallest noise scale (to ``rtol``) whose accounted epsilon is <= target.

    ``events_for(sigma)`` builds the full event list for a candidate noise
    scale; accounted epsilon must be non-increasing in sigma.  The result
    satisfies ``target * (1 - rtol) <= eps(result) <= target``.
    """
    if not target.is_private:
        raise DomainError("calibration needs a finite epsilon target")
    eps_target = target.epsilon

    def eps_at(s):
        return to_dp(compose(events_for(s), orders), target.delta)

    if eps_at(hi) > eps_target:
        raise CalibrationError(
            f"epsilon={eps_target} unreachable: even sigma={hi:g} accounts to {eps_at(hi):.4g}")
    if eps_at(lo) <= eps_target:
        raise CalibrationError(
            f"epsilon={eps_target} is looser than sigma={lo:g} already gives ({eps_at(lo):.4g})")

    # Invariant: eps(lo) > target >= eps(hi); bisect in log-space.
    eps_hi = eps_at(hi)
    for _ in range(200):
        if eps_hi >= eps_target * (1 - rtol):
            return hi
        mid = math.sqrt(lo * hi)
        e = eps_at(mid)
        if e <= eps_target:
            hi, eps_hi = mid, e
        else:
            lo = mid
    raise CalibrationError("bisection did not converge")  # pragma: no cover


def calibrate_sigma(target: PrivacySpec, q: float, steps: int, **kw) -> float:
    """Noise multiplier for ``steps`` subsampled-Gaussian steps at rate ``q``.

    An infinite target returns the non-private sentinel ``0.0``.
    """
    if not target.is_private:
        return 0.0
    return calibrate(lambda s: [SubsampledGaussian(q, s, steps)], target, **kw)


def rr_params(epsilon: float, k: int) -> float:
    """Probability that k-ary randomized response reports the true value."""
    if k < 2:
        raise DomainError(f"k must be >= 2, got {k}")
    if epsilon < 0:
        raise DomainError(f"epsilon must be >= 0, got {epsilon}")
    if math.isinf(epsilon):
        return 1.0
    return 1.0 / (1.0 + (k - 1) * math.exp(-epsilon))


def rr_epsilon(k: int, p_truth: float) -> float:
    if k < 2:
        raise DomainError(f"k must be >= 2, got {k}")
    if not 1 / k < p_truth < 1:
        raise DomainError(f"p_truth must lie in (1/k, 1), got {p_truth}")
    return math.log(p_truth * (k - 1) / (1 - p_truth))


def convert_convention(epsilon: float, src: str, dst: str) -> float:
    """Translate epsilon between unbounded (add/remove) and bounded (replace) DP."""
    for c in (src, dst):
        if c not in ("bounded", "unbounded"):
            raise DomainError(f"unknown convention {c!r}")
    if src == dst:
        return epsilon
    return epsilon * 2 if src == "unbounded" else epsilon / 2


# ---------------------------------------------------------------------------
# Ledger
# ---------------------------------------------------------------------------


@dataclass
class LedgerEntry:
    step: int
    label: str
    event: MechanismEvent | None  # None marks a non-private (infinite-cost) release


class PrivacyLedger:
    """Running record of every privacy-consuming release in one training run.

    The ledger keeps the composed curve incrementally, so ``epsilon()`` is
    cheap enough to query every step.  With a ``budget`` attached,
    :meth:`check` refuses events that would push epsilon above the target.
    """

    def __init__(self, budget: PrivacySpec | None = None, orders: Sequence[float] = DEFAULT_ORDERS):
        self.budget = budget
        self.orders = tuple(orders)
        self.entries: list[LedgerEntry] = []
        self._curve: RdpCurve | None = None
        self._nonprivate = False
        self._trace: list[tuple[int, str, float, float, float]] = []

    @property
    def delta(self) -> float:
        return self.budget.delta if self.budget else DEFAULT_DELTA

    def __len__(self):
        return len(self.entries)

    def _combined(self, event):
        c = event_curve(event, self.orders)
        return c if self._curve is None else self._curve + c

    def epsilon(self, delta: float | None = None) -> float:
        if self._nonprivate:
            return math.inf
        if self._curve is None:
            return 0.0
        return to_dp(self._curve, self.delta if delta is None else delta)

    def check(self, event: MechanismEvent | None) -> None:
        """Raise :class:`BudgetError` if recording ``event`` would overspend."""
        if self.budget is None or not self.budget.is_private:
            return
        if event is None:
            raise BudgetError("non-private release under a finite budget")
        eps = to_dp(self._combined(event), self.delta)
        if eps > self.budget.epsilon * (1 + 1e-12):
            raise BudgetError(
                f"budget exhausted: next release would reach eps={eps:.6g} > {self.budget.epsilon}")

    def record(self, event: MechanismEvent | None, label: str = "", step: int | None = None,
               check: bool = True) -> float:
        if check:
            self.check(event)
        step = len(self.entries) if step is None else step
        self.entries.append(LedgerEntry(step, label, event))
        if event is None:
            self._nonprivate = True
        else:
            self._curve = self._combined(event)
        eps = self.epsilon()
        q = getattr(event, "q", "")
        sigma = getattr(event, "sigma", getattr(event, "b", ""))
        self._trace.append((step, label or (event.kind if event else "non-private"), q, sigma, eps))
        return eps

    def count(self, label: str) -> int:
        return sum(1 for e in self.entries if e.label == label)

    @property
    def trace(self):
        return list(self._trace)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "mechanism", "q", "sigma", "eps_at_delta"])
            for step, mech, q, sigma, eps in self._trace:
                w.writerow([step, mech, "" if q == "" else repr(float(q)),
                            "" if sigma == "" else repr(float(sigma)), repr(float(eps))])
