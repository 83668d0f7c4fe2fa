"""Differential-privacy primitives for federated averaging.

L2 clipping against a per-round bound, median selection of that bound,
the Gaussian-mechanism average, the single-query delta bound, and a
moments accountant for the sub-sampled Gaussian mechanism. Log-moments
are computed by Simpson quadrature entirely in log space so that orders
up to 32 stay finite even for small noise multipliers.

The median clipping bound is computed on the true (unclipped) norms.
That lookup itself is not privatized, which leaks a small amount of
information; it is implemented here exactly as specified, and callers
should be aware of the caveat. Sub-sampling without replacement is
charged to the accountant at ratio q = m/K as if it were Poisson
sampling, the setting the accountant's moment bound is derived for.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

DEFAULT_LAMBDA_MAX = 32
QUADRATURE_POINTS = 2**17 + 1  # odd count so Simpson's rule applies cleanly

# Half-width of the integration window: covers the outermost Gaussian
# component (centred at +-lambda, scale z) out to where the discarded
# tail mass is below 1e-15 of the integral.
_TAIL_FACTOR = 4.0 * math.sqrt(2.0 * math.log(1e16))


class MomentOverflowError(FloatingPointError):
    """A log-moment integrand left the representable float64 range."""


@dataclass(frozen=True)
class ClientUpdate:
    """A client's model delta and its (precomputed) L2 norm."""

    delta: np.ndarray
    norm: float

    @classmethod
    def from_delta(cls, delta: np.ndarray) -> "ClientUpdate":
        return cls(delta=delta, norm=float(np.linalg.norm(delta)))


@dataclass
class DpConfig:
    """Per-round privacy knobs for a federated run.

    Schedules are lists of (round, value) breakpoints sorted by round;
    the value in force at round t is the one from the latest breakpoint
    with round <= t. ``clip_bound`` fixes the clipping bound instead of
    the per-round median (used to express the no-clipping surrogate).
    """

    epsilon: float
    delta_threshold: float
    sigma_schedule: list
    m_schedule: list
    lambda_max: int = DEFAULT_LAMBDA_MAX
    clip_bound: float | None = None

    def sigma_at(self, t: int) -> float:
        return _schedule_value(self.sigma_schedule, t)

    def m_at(self, t: int) -> int:
        return int(_schedule_value(self.m_schedule, t))

    def validate(self, num_clients: int):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta_threshold < 1.0 / num_clients:
            raise ValueError(
                f"delta threshold {self.delta_threshold} must lie in "
                f"(0, 1/K) = (0, {1.0 / num_clients})"
            )
        sigmas = [s for _, s in _normalize_schedule(self.sigma_schedule)]
        if any(s < 0 for s in sigmas):
            raise ValueError(f"sigma must be >= 0, got {min(sigmas)}")
        for _, m in _normalize_schedule(self.m_schedule):
            if not 1 <= int(m) <= num_clients:
                raise ValueError(f"m must be in [1, {num_clients}], got {m}")
        if self.clip_bound is not None:
            if self.clip_bound <= 0:
                raise ValueError(
                    f"fixed clipping bound must be positive, got {self.clip_bound}"
                )
            if math.isinf(self.clip_bound) and any(s > 0 for s in sigmas):
                raise ValueError("noise needs a finite clipping bound")


def _normalize_schedule(schedule):
    """Accept a scalar, a [(round, value), ...] list, or a {round: value} dict."""
    if isinstance(schedule, (int, float)):
        return [(0, float(schedule))]
    if isinstance(schedule, dict):
        items = sorted(schedule.items())
    else:
        items = sorted((int(r), v) for r, v in schedule)
    if not items:
        raise ValueError("empty schedule")
    if items[0][0] > 1:
        raise ValueError(f"schedule must cover round 1, got breakpoints {items}")
    return items


def _schedule_value(schedule, t):
    value = None
    for start, v in _normalize_schedule(schedule):
        if start <= t:
            value = v
        else:
            break
    return value


def clip_update(update: ClientUpdate, bound: float) -> np.ndarray:
    """Scale the delta so its L2 norm is at most ``bound``.

    Updates already inside the ball pass through bit-for-bit unchanged
    (the divisor is exactly 1.0), which keeps the noiseless DP path
    numerically identical to the plain FedAvg path.
    """
    if bound <= 0:
        raise ValueError(f"clipping bound must be positive, got {bound}")
    return update.delta / max(1.0, update.norm / bound)


def median_norm(norms) -> float:
    """Median of update norms; mean of the two middle values for even counts."""
    norms = np.asarray(norms, dtype=np.float64)
    if norms.size == 0:
        raise ValueError("cannot take the median of zero norms")
    if np.any(norms < 0):
        raise ValueError("norms must be non-negative")
    return float(np.median(norms))


def dp_average(updates, bound, sigma, rng) -> np.ndarray:
    """Gaussian-mechanism approximation of the mean update.

    Sums the clipped deltas, adds i.i.d. per-coordinate noise with
    standard deviation sigma * bound, and divides by the number of
    participants. With sigma == 0 no noise is drawn at all, so the rng
    stream is left untouched.
    """
    if len(updates) == 0:
        raise ValueError("cannot average an empty set of updates")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    total = np.zeros_like(updates[0].delta)
    for u in updates:
        total += clip_update(u, bound) if bound is not None else u.delta
    if sigma > 0:
        if bound is None:
            raise ValueError("noise requires a finite clipping bound")
        total += rng.normal(0.0, sigma * bound, size=total.shape)
    return total / len(updates)


def single_query_delta_bound(sigma: float, epsilon: float) -> float:
    """Probability bound that one Gaussian-mechanism query breaks eps-dp."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return min(1.0, 0.8 * math.exp(-((sigma * epsilon) ** 2) / 2.0))


def _log_simpson(log_f: np.ndarray, step: float) -> float:
    """log of the Simpson integral of exp(log_f) over a uniform odd-length grid."""
    n = log_f.shape[0]
    weights = np.full(n, 2.0)
    weights[1::2] = 4.0
    weights[0] = weights[-1] = 1.0
    shift = np.max(log_f)
    if not np.isfinite(shift):  # all -inf: integrand is identically zero
        return -np.inf
    total = np.sum(np.exp(log_f - shift) * weights)
    return shift + math.log(total * step / 3.0)


def _integration_grid(z: float, lam: int, num_points: int):
    half_width = lam + z * _TAIL_FACTOR
    x = np.linspace(-half_width, half_width, num_points)
    return x, x[1] - x[0]


def log_moment(q: float, z: float, lam: int, num_points: int = QUADRATURE_POINTS) -> float:
    """Log-moment of the sub-sampled Gaussian mechanism at integer order lam.

    With densities mu0 = N(0, z^2), mu1 = N(1, z^2) and the mixture
    mu = (1-q) mu0 + q mu1, returns

        log max( E_{x~mu0}[(mu0/mu)^lam],  E_{x~mu}[(mu/mu0)^lam] )

    evaluated by Simpson quadrature in log space over a window wide
    enough that the truncated tails are negligible.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"sampling ratio must be in [0, 1], got {q}")
    if z <= 0:
        raise ValueError(f"noise multiplier must be positive, got {z}")
    if lam < 1 or lam != int(lam):
        raise ValueError(f"order must be a positive integer, got {lam}")
    if q == 0.0:
        return 0.0

    x, step = _integration_grid(z, lam, num_points)
    log_mu0 = -0.5 * math.log(2.0 * math.pi * z * z) - x**2 / (2.0 * z * z)
    # log(mu/mu0) = log((1-q) + q * exp((2x-1)/(2 z^2))), stable for q -> 1
    shift = (2.0 * x - 1.0) / (2.0 * z * z)
    if q == 1.0:
        log_ratio = shift
    else:
        log_ratio = np.logaddexp(math.log1p(-q), math.log(q) + shift)

    log_e1 = _log_simpson(log_mu0 - lam * log_ratio, step)
    log_e2 = _log_simpson(log_mu0 + (lam + 1.0) * log_ratio, step)
    alpha = max(log_e1, log_e2)
    if not math.isfinite(alpha):
        raise MomentOverflowError(
            f"log-moment diverged for q={q}, z={z}, lambda={lam}"
        )
    return max(alpha, 0.0)


@lru_cache(maxsize=256)
def _log_moment_orders(q: float, z: float, lambda_max: int) -> tuple:
    """All per-round log-moments for orders 1..lambda_max (cached per (q, z))."""
    return tuple(log_moment(q, z, lam) for lam in range(1, lambda_max + 1))


@dataclass
class MomentsAccountant:
    """Tracks cumulative log-moments of the privacy loss across rounds.

    Log-moments compose additively, so one round of sub-sampled Gaussian
    aggregation adds log_moment(q, z, lam) at every tracked order. The
    delta for a target epsilon is the tightest tail bound over orders.
    A round with z == 0 adds no noise and is charged nothing; it offers
    no privacy, so callers are expected to warn when they run one.
    """

    epsilon: float
    lambda_max: int = DEFAULT_LAMBDA_MAX
    log_moments: np.ndarray = None
    rounds_accumulated: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.lambda_max < 1:
            raise ValueError(f"lambda_max must be >= 1, got {self.lambda_max}")
        if self.log_moments is None:
            self.log_moments = np.zeros(self.lambda_max)
        else:
            self.log_moments = np.asarray(self.log_moments, dtype=np.float64)
            if self.log_moments.shape != (self.lambda_max,):
                raise ValueError("log_moments length must equal lambda_max")

    def round_increment(self, q: float, z: float) -> np.ndarray:
        """Per-order log-moment cost of one round at sampling ratio q, noise z."""
        if z == 0.0:
            return np.zeros(self.lambda_max)
        return np.asarray(_log_moment_orders(q, z, self.lambda_max))

    def accumulate(self, q: float, z: float) -> "MomentsAccountant":
        """Charge one round; mutates and returns self."""
        self.log_moments = self.log_moments + self.round_increment(q, z)
        self.rounds_accumulated += 1
        return self

    def delta(self, epsilon: float | None = None) -> float:
        """Tightest delta at the given (or configured) epsilon."""
        eps = self.epsilon if epsilon is None else epsilon
        if eps <= 0:
            raise ValueError(f"epsilon must be positive, got {eps}")
        return delta_from_moments(self.log_moments, eps)

    def to_text(self) -> str:
        lines = [
            f"epsilon {self.epsilon!r}",
            f"lambda_max {self.lambda_max}",
            f"rounds_accumulated {self.rounds_accumulated}",
        ]
        lines += [
            f"{lam + 1} {val!r}" for lam, val in enumerate(self.log_moments)
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MomentsAccountant":
        meta = {}
        moments = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, value = line.split()
            if key.isdigit():
                moments[int(key)] = float(value)
            else:
                meta[key] = value
        lambda_max = int(meta["lambda_max"])
        if sorted(moments) != list(range(1, lambda_max + 1)):
            raise ValueError("accountant text is missing moment orders")
        return cls(
            epsilon=float(meta["epsilon"]),
            lambda_max=lambda_max,
            log_moments=np.array([moments[i] for i in range(1, lambda_max + 1)]),
            rounds_accumulated=int(meta["rounds_accumulated"]),
        )


def delta_from_moments(log_moments: np.ndarray, epsilon: float) -> float:
    """min over orders of exp(alpha(lam) - lam * eps), clamped to [0, 1]."""
    orders = np.arange(1, log_moments.shape[0] + 1)
    exponent = np.min(log_moments - orders * epsilon)
    if exponent == -np.inf:
        return 0.0
    return float(min(1.0, math.exp(min(exponent, 0.0))))
