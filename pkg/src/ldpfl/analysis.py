"""Monte Carlo verification of the perturbation mechanism and the adaptive range.

Each ``verify_*`` function draws from a mechanism with a fixed seed, compares
the result against the closed form, and returns a ``VerificationReport``
whose verdict follows mechanically from the gate recorded in the report.
All gates are collected in ``TOLERANCES``.

The mechanisms ``SwappedMechanism`` and ``DoubledCoefficientMechanism`` are
deliberately corrupted and exist to show the checks are not vacuous.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .adaptive_range import RangeMode, RangePolicy
from .datasets import make_blobs, train_test_split
from .fl_core import FederationConfig, run_federated
from .mechanism import (DEFAULT_MECHANISM, BudgetLike, Range, TwoPointMechanism, as_budget,
                        coefficient, concentration_radius, high_probability,
                        mean_variance_bounds,
                        mechanism_variance)
from .model import Dataset, ModelWeights, SgdConfig, init_weights

TOLERANCES = {
    "bias_sigmas": 4.0,
    "variance_relative": 0.01,
    "variance_bound_relative": 0.01,
    "mean_variance_lower_factor": 0.9,
    "mean_variance_upper_factor": 1.1,
    "concentration_sigmas": 3.0,
    "quantile_scaling_relative": 0.10,
    "ldp_analytic_relative": 1e-12,
    "ldp_sigmas": 3.0,
    "ldp_min_expected_count": 100,
    "adaptive_gain_points": 10.0,
    "adaptive_parity_points": 3.0,
    "trend_loss_points": 5.0,
    "trend_slack_points": 2.0,
    "trend_collapse_points": 20.0,
}

MIN_SAMPLES = 10_000
_CHUNK = 10_000_000  # max draws held in memory at once


@dataclass
class VerificationReport:
    name: str
    theoretical: float
    empirical: float
    interval: tuple[float, float]
    samples: int
    passed: bool
    rule: str
    config: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["interval"] = list(self.interval)
        d["verdict"] = self.verdict
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=_json_default)

    def summary(self) -> str:
        return (f"{self.verdict.upper():4s}  {self.name:<22s} theory={self.theoretical:<12.6g} "
                f"empirical={self.empirical:<12.6g} n={self.samples}")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def summary_table(reports: Sequence[VerificationReport]) -> str:
    lines = [r.summary() for r in reports]
    passed = sum(r.passed for r in reports)
    lines.append(f"{passed}/{len(reports)} passed")
    return "\n".join(lines)


# Corrupted mechanisms for mutation testing.

class SwappedMechanism(TwoPointMechanism):
    """Reports the high output with the low output's probability."""

    name = "swapped"

    def probabilities(self, w, center, radius, budget):
        p_high, p_low = super().probabilities(w, center, radius, budget)
        return p_low, p_high


class DoubledCoefficientMechanism(TwoPointMechanism):
    """Correct probabilities, but outputs at ``c +- 2 r k``."""

    name = "doubled-coefficient"

    def coefficient(self, budget):
        return 2.0 * super().coefficient(budget)


MUTANTS = {"swapped": SwappedMechanism(), "doubled": DoubledCoefficientMechanism()}


def _draw(w, rng_range: Range, budget, n: int, rng, mechanism) -> np.ndarray:
    return mechanism.sample(np.full(n, float(w)), rng_range.center, rng_range.radius, budget, rng)


def _mech_config(mechanism, **kw) -> dict:
    return {"mechanism": mechanism.name, **kw}


def verify_bias(w: float, rng_range: Range, epsilon: BudgetLike, samples: int = 1_000_000,
                seed: int = 0, mechanism: TwoPointMechanism = DEFAULT_MECHANISM) -> VerificationReport:
    """Empirical mean of ``samples`` reports against the true weight."""
    if samples < MIN_SAMPLES:
        raise ValueError(f"samples must be >= {MIN_SAMPLES}")
    eps = as_budget(epsilon).epsilon
    rng = np.random.default_rng(seed)
    x = _draw(w, rng_range, eps, samples, rng, mechanism)
    mean = math.fsum(x) / samples
    se = math.sqrt(mechanism_variance(w, rng_range, eps) / samples)
    gate = TOLERANCES["bias_sigmas"] * se
    return VerificationReport(
        "bias", float(w), mean, (mean - 1.96 * se, mean + 1.96 * se), samples,
        abs(mean - w) <= gate, f"|mean - w| <= {TOLERANCES['bias_sigmas']:g} * sqrt(Var/N)",
        _mech_config(mechanism, w=w, center=rng_range.center, radius=rng_range.radius,
                     epsilon=eps, seed=seed),
        {"gate": gate, "deviation": mean - w},
    )


def _deviation_moments(w, rng_range: Range, eps: float, samples: int, rng, mechanism):
    """Raw moments 1..4 of ``x - w``, drawn in chunks of at most ``_CHUNK``."""
    sums = [[], [], [], []]
    for start in range(0, samples, _CHUNK):
        d = _draw(w, rng_range, eps, min(_CHUNK, samples - start), rng, mechanism) - w
        p = d.copy()
        for acc in sums:
            acc.append(float(np.sum(p)))
            p *= d
    return [math.fsum(acc) / samples for acc in sums]


def required_variance_samples(w: float, rng_range: Range, epsilon: BudgetLike,
                              sigmas: float = 4.0) -> int:
    """Sample count that puts the variance and MSE checks ``sigmas`` SE inside tolerance.

    Near the range endpoints at large epsilon one output is rare and 1e6
    draws are not enough for a 1% relative gate.
    """
    eps = as_budget(epsilon).epsilon
    p = high_probability(w, rng_range, eps)
    pq = p * (1.0 - p)
    tol = TOLERANCES["variance_relative"]
    if pq == 0.0:
        return MIN_SAMPLES
    var_rel = (1.0 - 4.0 * pq) / pq
    k = coefficient(eps)
    a = (rng_range.center + rng_range.radius * k - w) ** 2
    b = (rng_range.center - rng_range.radius * k - w) ** 2
    mse_rel = pq * (a - b) ** 2 / (p * a + (1.0 - p) * b) ** 2
    need = sigmas ** 2 * max(var_rel, mse_rel) / tol ** 2
    return max(MIN_SAMPLES, int(math.ceil(need)))


def verify_variance(w: float, rng_range: Range, epsilon: BudgetLike, samples: int = 1_000_000,
                    seed: int = 0,
                    mechanism: TwoPointMechanism = DEFAULT_MECHANISM) -> VerificationReport:
    """Empirical variance against ``r^2 k^2 - (w - c)^2``.

    Both the sample variance and the mean squared error about the true ``w``
    must land within tolerance; the second catches mechanisms that keep the
    spread but move the mean.
    """
    if samples < MIN_SAMPLES:
        raise ValueError(f"samples must be >= {MIN_SAMPLES}")
    eps = as_budget(epsilon).epsilon
    rng = np.random.default_rng(seed)
    m1, m2, m3, m4 = _deviation_moments(w, rng_range, eps, samples, rng, mechanism)
    theory = mechanism_variance(w, rng_range, eps)
    var = (m2 - m1 * m1) * samples / (samples - 1)
    mse = m2
    central4 = m4 - 4 * m1 * m3 + 6 * m1 * m1 * m2 - 3 * m1 ** 4
    se = math.sqrt(max(central4 - var * var, 0.0) / samples)
    bound = (rng_range.radius * coefficient(eps)) ** 2
    tol = TOLERANCES["variance_relative"]
    var_ok = abs(var - theory) <= tol * theory
    mse_ok = abs(mse - theory) <= tol * theory
    bound_ok = var <= (1.0 + TOLERANCES["variance_bound_relative"]) * bound
    return VerificationReport(
        "variance", theory, var, (var - 1.96 * se, var + 1.96 * se), samples,
        var_ok and mse_ok and bound_ok,
        f"|var - theory| and |mse - theory| <= {tol:g} * theory; var <= 1.01 r^2 k^2",
        _mech_config(mechanism, w=w, center=rng_range.center, radius=rng_range.radius,
                     epsilon=eps, seed=seed),
        {"mse": mse, "bound": bound, "relative_error": (var - theory) / theory,
         "mse_relative_error": (mse - theory) / theory},
    )


def _client_weights(radii: np.ndarray, center: float, rng, weights) -> np.ndarray:
    if weights is None:
        # uniform on [c, c + r_u]: off-centre, so a biased mechanism shows up
        return center + rng.random(radii.size) * radii
    weights = np.broadcast_to(np.asarray(weights, dtype=float), radii.shape).copy()
    if np.any(np.abs(weights - center) > radii):
        raise ValueError("client weights must lie inside their ranges")
    return weights


def _repeated_means(weights: np.ndarray, center: float, radii: np.ndarray, eps: float,
                    repetitions: int, rng, mechanism) -> np.ndarray:
    """``repetitions`` independent realizations of the cloud's mean estimate."""
    n = weights.size
    rows = max(1, _CHUNK // n)
    out = np.empty(repetitions)
    for start in range(0, repetitions, rows):
        m = min(rows, repetitions - start)
        block = mechanism.sample(np.broadcast_to(weights, (m, n)), center, radii, eps, rng)
        out[start:start + m] = block.mean(axis=1)
    return out


def verify_mean_variance(radii, epsilon: BudgetLike, n: int | None = None,
                         repetitions: int = 10_000, seed: int = 0, weights=None,
                         center: float = 0.0,
                         mechanism: TwoPointMechanism = DEFAULT_MECHANISM) -> VerificationReport:
    """Variance of the ``n``-client mean against its lower/upper bounds.

    ``radii`` is one radius per client, or a scalar replicated ``n`` times.
    Client weights default to uniform draws on ``[c, c + r_u]``.
    """
    radii = np.asarray(radii, dtype=float)
    if radii.ndim == 0:
        if n is None:
            raise ValueError("n is required with a scalar radius")
        radii = np.full(n, float(radii))
    n = radii.size if n is None else n
    if repetitions < 2:
        raise ValueError("repetitions must be >= 2")
    eps = as_budget(epsilon).epsilon
    lower, upper = mean_variance_bounds(radii, eps, n)
    rng = np.random.default_rng(seed)
    w = _client_weights(radii, center, rng, weights)
    truth = math.fsum(w) / n
    means = _repeated_means(w, center, radii, eps, repetitions, rng, mechanism)
    var = float(np.var(means, ddof=1))
    mse = float(np.mean((means - truth) ** 2))
    lo_gate = TOLERANCES["mean_variance_lower_factor"] * lower
    hi_gate = TOLERANCES["mean_variance_upper_factor"] * upper
    dof = repetitions - 1
    interval = (var * dof / stats.chi2.ppf(0.975, dof), var * dof / stats.chi2.ppf(0.025, dof))
    exact = float(np.sum((radii * coefficient(eps)) ** 2 - (w - center) ** 2) / n**2)
    return VerificationReport(
        "mean_variance", upper, var, interval, repetitions,
        lo_gate <= var <= hi_gate and lo_gate <= mse <= hi_gate,
        "var and mse of the mean in [0.9 lower, 1.1 upper]",
        _mech_config(mechanism, n=n, epsilon=eps, center=center, seed=seed,
                     radius_min=float(radii.min()), radius_max=float(radii.max()),
                     repetitions=repetitions),
        {"lower": lower, "upper": upper, "exact": exact, "mse": mse},
    )


def mid_quantile(x: np.ndarray, p: float) -> float:
    """Quantile of the mid-distribution function, interpolated between support points.

    The cloud's mean lives on a lattice, so ordinary sample quantiles jump
    by a lattice step; the mid-quantile varies smoothly with ``p``.
    """
    values, counts = np.unique(np.asarray(x, dtype=float), return_counts=True)
    cdf = (np.cumsum(counts) - 0.5 * counts) / counts.sum()
    return float(np.interp(p, cdf, values))


def verify_concentration(r: float, epsilon: BudgetLike, n: int, beta: float,
                         repetitions: int = 10_000, seed: int = 0, weights=None,
                         center: float = 0.0, scaling: bool = True,
                         mechanism: TwoPointMechanism = DEFAULT_MECHANISM) -> VerificationReport:
    """Frequency of ``|mean - true mean| >= lambda`` against ``beta``.

    With ``scaling`` the experiment is repeated with ``4 n`` clients and the
    ``1 - beta`` deviation quantile must shrink by half.
    """
    eps = as_budget(epsilon).epsilon
    lam = concentration_radius(r, eps, n, beta)
    rng = np.random.default_rng(seed)

    def deviations(clients: int) -> np.ndarray:
        radii = np.full(clients, float(r))
        w = _client_weights(radii, center, rng, weights)
        truth = math.fsum(w) / clients
        return np.abs(_repeated_means(w, center, radii, eps, repetitions, rng, mechanism) - truth)

    dev = deviations(n)
    freq = float(np.mean(dev >= lam))
    gate = beta + TOLERANCES["concentration_sigmas"] * math.sqrt(beta * (1 - beta) / repetitions)
    ok = freq <= gate
    se = math.sqrt(max(freq * (1 - freq), 1e-300) / repetitions)
    details = {"lambda": lam, "gate": gate}
    if scaling:
        q1 = mid_quantile(dev, 1 - beta)
        q4 = mid_quantile(deviations(4 * n), 1 - beta)
        ratio = q4 / q1 if q1 > 0 else float("inf")
        scale_ok = abs(ratio - 0.5) <= TOLERANCES["quantile_scaling_relative"] * 0.5
        details.update(quantile_n=q1, quantile_4n=q4, quantile_ratio=ratio, scaling_passed=scale_ok)
        ok = ok and scale_ok
    return VerificationReport(
        "concentration", beta, freq, (max(freq - 1.96 * se, 0.0), freq + 1.96 * se), repetitions,
        ok, "P(|dev| >= lambda) <= beta + 3 sqrt(beta (1-beta) / reps); "
            "quantile(4n) / quantile(n) = 0.5 +- 10%",
        _mech_config(mechanism, r=r, epsilon=eps, n=n, beta=beta, center=center, seed=seed,
                     repetitions=repetitions, scaling=scaling),
        details,
    )


def verify_ldp(epsilon: BudgetLike, rng_range: Range = Range(0.0, 1.0), samples: int = 1_000_000,
               seed: int = 0,
               mechanism: TwoPointMechanism = DEFAULT_MECHANISM) -> VerificationReport:
    """Output-probability ratio between the two endpoint inputs against ``e^eps``.

    The analytic part evaluates the mechanism's own probabilities; the
    empirical part compares output histograms for inputs ``c - r`` and
    ``c + r`` on the log scale. It is skipped when the rarer outcome would be
    expected fewer than 100 times. Reports must also take exactly the two
    values ``c +- r k``.
    """
    eps = as_budget(epsilon).epsilon
    c, r = rng_range.center, rng_range.radius
    target = math.exp(eps)
    hi_top, lo_top = (float(p) for p in mechanism.probabilities(c + r, c, r, eps))
    hi_bot, lo_bot = (float(p) for p in mechanism.probabilities(c - r, c, r, eps))
    ratios = (hi_top / hi_bot, lo_bot / lo_top)
    tol = TOLERANCES["ldp_analytic_relative"]
    analytic_ok = all(abs(x - target) <= tol * target for x in ratios)
    details = {"analytic_high": ratios[0], "analytic_low": ratios[1]}

    k = coefficient(eps)
    support = np.array([c - r * k, c + r * k])
    rarer = samples * min(hi_bot, lo_top)
    empirical, interval, empirical_ok = ratios[0], (ratios[0], ratios[0]), True
    if rarer < TOLERANCES["ldp_min_expected_count"]:
        details["empirical"] = "skipped: rarer outcome expected fewer than 100 times"
    else:
        rng = np.random.default_rng(seed)
        top = _draw(c + r, rng_range, eps, samples, rng, mechanism)
        bot = _draw(c - r, rng_range, eps, samples, rng, mechanism)
        in_support = bool(np.all(np.isin(top, support)) and np.all(np.isin(bot, support)))
        high = c + r * k
        checks = []
        for a, b in ((np.sum(top == high), np.sum(bot == high)),
                     (np.sum(bot != high), np.sum(top != high))):
            if a == 0 or b == 0:
                checks.append((float("nan"), float("inf"), False))
                continue
            p1, p2 = a / samples, b / samples
            log_ratio = math.log(p1 / p2)
            se = math.sqrt((1 - p1) / (samples * p1) + (1 - p2) / (samples * p2))
            checks.append((log_ratio, se, abs(log_ratio - eps) <= TOLERANCES["ldp_sigmas"] * se))
        (lr_hi, se_hi, ok_hi), (lr_lo, se_lo, ok_lo) = checks
        empirical = math.exp(lr_hi) if math.isfinite(lr_hi) else float("nan")
        if math.isfinite(lr_hi):
            interval = (math.exp(lr_hi - 1.96 * se_hi), math.exp(lr_hi + 1.96 * se_hi))
        empirical_ok = in_support and ok_hi and ok_lo
        details.update(empirical_low=math.exp(lr_lo) if math.isfinite(lr_lo) else float("nan"),
                       log_se_high=se_hi, log_se_low=se_lo, in_support=in_support)
    return VerificationReport(
        "ldp", target, empirical, interval, samples, analytic_ok and empirical_ok,
        "endpoint ratios == e^eps to 1e-12; empirical log-ratios within 3 SE of eps; "
        "outputs in {c - r k, c + r k}",
        _mech_config(mechanism, epsilon=eps, center=c, radius=r, seed=seed),
        details,
    )


# Training benchmarks for the adaptive-range comparison.

@dataclass(frozen=True)
class BlobTask:
    """A synthetic classification task plus the network and federation used on it."""

    sizes: tuple[int, ...]
    latent: int = 20
    embed: bool = False
    separation: float = 4.0
    n_train: int = 5000
    n_test: int = 1000
    sgd: SgdConfig = SgdConfig(0.03, 10, 1)
    clients: int = 100
    rounds: int = 10
    epsilon: float = 1.0
    init_scales: tuple[float, ...] | None = None

    def data(self, seed: int) -> tuple[Dataset, Dataset]:
        rng = np.random.default_rng([seed, 11])
        embed = self.sizes[0] if self.embed else None
        features = self.latent if self.embed else self.sizes[0]
        blobs = make_blobs(self.n_train + self.n_test, features, self.sizes[-1], rng,
                           separation=self.separation, embed_dim=embed)
        return train_test_split(blobs, self.n_test)

    def initial(self, seed: int) -> ModelWeights:
        return init_weights(self.sizes, np.random.default_rng([seed, 12]), self.init_scales)

    def config(self, seed: int, policy: RangePolicy | None = None, **kw) -> FederationConfig:
        kw.setdefault("epsilon", self.epsilon)
        return FederationConfig(total_clients=self.clients, rounds=self.rounds, sgd=self.sgd,
                                range_policy=policy or RangePolicy(), seed=seed, **kw)


# Four layers whose natural weight scales differ (wide first layer, narrow
# later ones), fed by low-rank wide inputs.
HETEROGENEOUS_TASK = BlobTask(sizes=(600, 16, 32, 32, 10), latent=20, embed=True,
                              separation=2.0, n_train=10_000, n_test=2000,
                              sgd=SgdConfig(0.03, 10, 2), clients=200, epsilon=5.0)
# Single affine layer whose weights already span about (-1, 1): one range
# covers everything and adaptivity has nothing to add.
SHALLOW_TASK = BlobTask(sizes=(20, 10), separation=4.0, n_train=10_000, n_test=2000,
                        sgd=SgdConfig(0.03, 10, 2), clients=200, epsilon=5.0,
                        init_scales=(2.2,))

BENCHMARKS = {"heterogeneous": HETEROGENEOUS_TASK, "shallow": SHALLOW_TASK}

# Two-layer net for the accuracy-versus-n and accuracy-versus-epsilon trends.
# Weights start inside the fixed (0, 0.1) range; recomputing the range from
# the noisy aggregate at eps = 1 widens it every round and training collapses.
TREND_TASK = BlobTask(sizes=(20, 32, 10), separation=4.0, n_train=20_000, n_test=2000,
                      sgd=SgdConfig(0.03, 10, 2), clients=100, epsilon=1.0,
                      init_scales=(0.25, 0.25))
TREND_POLICY = RangePolicy(RangeMode.FIXED, 0.0, 0.1)
TREND_CLIENTS = (10, 50, 100, 500)
TREND_EPSILONS = (0.1, 0.5, 1.0, 5.0)


@dataclass(frozen=True)
class TrainingResult:
    accuracy: float
    # pooled aggregation MSE over its upper bound; None without noise
    noise_ratio: float | None


def training_run(task: BlobTask, seed: int, policy: RangePolicy | None = None,
                 mechanism: TwoPointMechanism = DEFAULT_MECHANISM, **kw) -> TrainingResult:
    """Final test accuracy (NaN if training diverged) and the aggregation-noise ratio."""
    train, test = task.data(seed)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            history = run_federated(task.config(seed, policy, **kw), train, task.initial(seed),
                                    test, mechanism)
    except FloatingPointError:
        return TrainingResult(float("nan"), None)
    ratio = None
    if history[-1].metrics.aggregation_bound is not None:
        ratio = (math.fsum(h.metrics.aggregation_mse for h in history)
                 / math.fsum(h.metrics.aggregation_bound for h in history))
    return TrainingResult(float(history[-1].metrics.accuracy), ratio)


def final_accuracy(task: BlobTask, seed: int, policy: RangePolicy | None = None,
                   mechanism: TwoPointMechanism = DEFAULT_MECHANISM, **kw) -> float:
    """Test accuracy after the last round; NaN if training diverged."""
    return training_run(task, seed, policy, mechanism, **kw).accuracy


def _comparison_runs(task, seed, fixed_radii, mechanism) -> dict[str, TrainingResult]:
    out = {"adaptive": training_run(
        task, seed, RangePolicy(RangeMode.ADAPTIVE, init_from_weights=True), mechanism)}
    for r in fixed_radii:
        out[f"fixed:{r:g}"] = training_run(task, seed, RangePolicy(RangeMode.FIXED, 0.0, r),
                                           mechanism)
    return out


def adaptive_comparison(task: BlobTask, seed: int = 0, fixed_radii: Sequence[float] = (1.0,),
                        mechanism: TwoPointMechanism = DEFAULT_MECHANISM) -> dict:
    """Final test accuracy for the adaptive policy and each fixed ``(0, r)``."""
    return {k: v.accuracy for k, v in _comparison_runs(task, seed, fixed_radii, mechanism).items()}


def _noise_ok(ratios) -> bool:
    # a diverged run has no ratio and fails; the mechanism must match its analysis
    limit = TOLERANCES["mean_variance_upper_factor"]
    return all(r is not None and r <= limit for r in ratios)


def accuracy_trends(seed: int = 0, task: BlobTask = TREND_TASK,
                    policy: RangePolicy = TREND_POLICY,
                    mechanism: TwoPointMechanism = DEFAULT_MECHANISM) -> dict:
    """Final accuracy noise-free, over the client counts at the task epsilon,
    and over the epsilons at the task client count.

    ``noise_ratio`` lists the aggregation-noise ratio of every noisy run.
    """
    free = training_run(task, seed, policy, mechanism, perturb=False, delays=False)
    out = {"noise_free": free.accuracy, "clients": {}, "epsilon": {}, "noise_ratio": []}
    for n in TREND_CLIENTS:
        res = training_run(replace(task, clients=n), seed, policy, mechanism)
        out["clients"][n] = res.accuracy
        out["noise_ratio"].append(res.noise_ratio)
    for eps in TREND_EPSILONS:
        if eps == task.epsilon and task.clients in out["clients"]:
            out["epsilon"][eps] = out["clients"][task.clients]
            continue
        res = training_run(task, seed, policy, mechanism, epsilon=eps)
        out["epsilon"][eps] = res.accuracy
        out["noise_ratio"].append(res.noise_ratio)
    return out


def _non_decreasing(values, slack: float) -> bool:
    return all(b >= a - slack for a, b in zip(values, values[1:]))


def verify_accuracy_trends(seed: int = 0, task: BlobTask = TREND_TASK,
                           policy: RangePolicy = TREND_POLICY,
                           mechanism: TwoPointMechanism = DEFAULT_MECHANISM
                           ) -> VerificationReport:
    """Accuracy loss at the task setting, and monotone trends in n and epsilon.

    Passes iff the LDP run is within 5 points of noise-free, accuracy does
    not drop by more than 2 points as n or epsilon grows, the smallest
    epsilon is at least 20 points below the task epsilon, and every noisy
    run's aggregation error stays within 1.1 times its upper bound.
    """
    acc = accuracy_trends(seed, task, policy, mechanism)
    pts = {k: 100.0 * v for k, v in acc["clients"].items()}
    eps_pts = {k: 100.0 * v for k, v in acc["epsilon"].items()}
    free = 100.0 * acc["noise_free"]
    ldp = pts[task.clients]
    loss_ok = free - ldp <= TOLERANCES["trend_loss_points"]
    slack = TOLERANCES["trend_slack_points"]
    n_ok = _non_decreasing([pts[n] for n in TREND_CLIENTS], slack)
    e_ok = _non_decreasing([eps_pts[e] for e in TREND_EPSILONS], slack)
    collapse = eps_pts[task.epsilon] - eps_pts[min(TREND_EPSILONS)]
    collapse_ok = collapse >= TOLERANCES["trend_collapse_points"]
    ok = all(x == x for x in (free, *pts.values(), *eps_pts.values()))  # no NaN
    noise_ok = _noise_ok(acc["noise_ratio"])
    ok = ok and loss_ok and n_ok and e_ok and collapse_ok and noise_ok
    return VerificationReport(
        "accuracy_trends", free, ldp, (free - TOLERANCES["trend_loss_points"], free),
        task.rounds, ok,
        "noise-free - LDP <= 5 points; non-decreasing in n and eps within 2 points; "
        "eps=0.1 at least 20 points below; aggregation MSE <= 1.1 * bound",
        _mech_config(mechanism, seed=seed, sizes=list(task.sizes), clients=task.clients,
                     epsilon=task.epsilon, rounds=task.rounds,
                     range=[policy.center, policy.radius]),
        {"accuracy": acc, "loss_ok": loss_ok, "clients_ok": n_ok, "epsilon_ok": e_ok,
         "collapse_points": collapse, "collapse_ok": collapse_ok, "noise_ok": noise_ok},
    )


def verify_adaptive_gain(seed: int = 0, model: str = "heterogeneous",
                         mechanism: TwoPointMechanism = DEFAULT_MECHANISM,
                         task: BlobTask | None = None) -> VerificationReport:
    """Adaptive versus fixed ``(0, 1)`` ranges.

    On the heterogeneous model adaptive must win by at least 10 points; on
    the shallow model the two must agree within 3 points. In both, each
    run's aggregation error must stay within 1.1 times its upper bound:
    a corrupted mechanism can still train a usable model.
    """
    if model not in BENCHMARKS:
        raise ValueError(f"unknown model {model!r}; choose from {sorted(BENCHMARKS)}")
    task = task or BENCHMARKS[model]
    runs = _comparison_runs(task, seed, (1.0,), mechanism)
    acc = {k: v.accuracy for k, v in runs.items()}
    ratios = {k: v.noise_ratio for k, v in runs.items()}
    gap = 100.0 * (acc["adaptive"] - acc["fixed:1"])
    if model == "heterogeneous":
        threshold = TOLERANCES["adaptive_gain_points"]
        ok, rule = gap >= threshold, f"adaptive - fixed >= {threshold:g} points"
    else:
        threshold = TOLERANCES["adaptive_parity_points"]
        ok, rule = abs(gap) < threshold, f"|adaptive - fixed| < {threshold:g} points"
    noise_ok = _noise_ok(ratios.values())
    return VerificationReport(
        "adaptive_gain", threshold, gap, (gap, gap), task.rounds, ok and noise_ok,
        rule + "; aggregation MSE <= 1.1 * bound",
        _mech_config(mechanism, model=model, seed=seed, sizes=list(task.sizes),
                     clients=task.clients, epsilon=task.epsilon, rounds=task.rounds),
        {"accuracy": acc, "noise_ratio": ratios, "gap_ok": ok, "noise_ok": noise_ok},
    )


# Suite

def sub_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass(frozen=True)
class SuiteConfig:
    seed: int = 0
    samples: int = 1_000_000
    repetitions: int = 10_000
    epsilons: tuple[float, ...] = (0.5, 1.0, 5.0)
    ldp_epsilons: tuple[float, ...] = (0.1, 1.0, 5.0, 10.0)
    client_counts: tuple[int, ...] = (100, 1000)
    betas: tuple[float, ...] = (0.01, 0.05)
    training: bool = False
    workers: int = 1


def suite_jobs(config: SuiteConfig, mechanism: TwoPointMechanism = DEFAULT_MECHANISM
               ) -> list[tuple[Callable, dict]]:
    unit = Range(0.0, 1.0)
    jobs: list[tuple[Callable, dict]] = []
    for eps in config.epsilons:
        for w in (-1.0, 0.0, 0.3, 1.0):
            jobs.append((verify_bias, dict(w=w, rng_range=unit, epsilon=eps,
                                           samples=config.samples)))
            # rare outcomes at the endpoints need more draws for the same gate
            n = max(config.samples, required_variance_samples(w, unit, eps))
            jobs.append((verify_variance, dict(w=w, rng_range=unit, epsilon=eps, samples=n)))
    for n in config.client_counts:
        mixed = np.random.default_rng([config.seed, n]).uniform(1.0, 2.0, n)
        for radii in (1.0, mixed):
            jobs.append((verify_mean_variance, dict(radii=radii, epsilon=1.0, n=n,
                                                    repetitions=config.repetitions)))
    for beta in config.betas:
        jobs.append((verify_concentration, dict(r=1.0, epsilon=1.0, n=100, beta=beta,
                                                repetitions=config.repetitions)))
    for eps in config.ldp_epsilons:
        jobs.append((verify_ldp, dict(epsilon=eps, rng_range=unit, samples=config.samples)))
    if config.training:
        jobs.append((verify_adaptive_gain, dict(model="heterogeneous")))
        jobs.append((verify_adaptive_gain, dict(model="shallow")))
        jobs.append((verify_accuracy_trends, {}))
    for i, (fn, kw) in enumerate(jobs):
        kw["seed"] = sub_seed(config.seed, i)
        kw["mechanism"] = mechanism
    return jobs


def _call(job):
    fn, kw = job
    return fn(**kw)


def run_suite(config: SuiteConfig = SuiteConfig(),
              mechanism: TwoPointMechanism = DEFAULT_MECHANISM) -> list[VerificationReport]:
    """Run every verification; each gets its own sub-seed so order does not matter."""
    jobs = suite_jobs(config, mechanism)
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            return list(pool.map(_call, jobs))
    return [_call(j) for j in jobs]


def quick_suite(seed: int = 0) -> SuiteConfig:
    """Reduced sample counts for smoke runs; gates are unchanged."""
    return replace(SuiteConfig(seed=seed), samples=100_000, repetitions=2000,
                   client_counts=(100,))
