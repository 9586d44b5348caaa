"""Statistical validation machinery for estimation runs.

Two families live here.  The martingale side turns estimation runs into
centered cumulative processes (count minus summed conditional probability),
checks the bounded-difference condition exactly, and measures how often the
concentration bound's deviation is actually exceeded.  The enumeration side
computes, in exact rational arithmetic, how a stopping rule skews the
positions of test rounds — the structural property the detected-count rule is
chosen to preserve.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .adversary import EveStrategy
from .errors import DomainError, EnumerationTooLarge, TraceInconsistent
from .quantum_core import BobPOVM
from .protocol import (
    Basis,
    CountDetected,
    CountPerBasis,
    EstimationRun,
    ProtocolParams,
    RandomStream,
    TerminationRule,
    derive_stream,
    run_estimation,
)

_BDC_LIMIT = 1.0
_RECOUNT_ATOL = 1e-9


@dataclass(frozen=True)
class MartingaleTrace:
    """Centered processes of one estimation run, indexed j = 0..N.

    ``x_ph[j] = lambda_ph[j] - sum_{i<=j} p_ph[i]`` and likewise for the
    X-error process; ``x_*[0] = 0``.  Increments lie in [-1, 1] by
    construction and that is verified exactly, not within a tolerance.
    """

    x_ph: np.ndarray
    x_xerr: np.ndarray
    lambda_ph: np.ndarray
    lambda_xerr: np.ndarray
    p_ph: np.ndarray
    p_xerr: np.ndarray

    @property
    def n_rounds(self) -> int:
        return len(self.p_ph)


def build_trace(run: EstimationRun) -> MartingaleTrace:
    """Assemble the centered processes from an estimation run.

    Recounts the error indicators from the per-round records; disagreement
    with the run's stored counters, a violated bounded-difference condition,
    or a nonzero starting point all raise :class:`TraceInconsistent`.
    """
    n = len(run.per_round)
    ind_ph = np.zeros(n, dtype=np.float64)
    ind_xerr = np.zeros(n, dtype=np.float64)
    p_ph = np.empty(n, dtype=np.float64)
    p_xerr = np.empty(n, dtype=np.float64)
    for i, rec in enumerate(run.per_round):
        p_ph[i] = rec.p_ph
        p_xerr[i] = rec.p_xerr
        if rec.x_outcomes[0] != rec.x_outcomes[1]:
            ba, bb = rec.bases
            if ba is Basis.Z and bb is Basis.Z:
                ind_ph[i] = 1.0
            elif ba is Basis.X and bb is Basis.X:
                ind_xerr[i] = 1.0
    if int(ind_ph.sum()) != run.lambda_ph or int(ind_xerr.sum()) != run.lambda_xerr:
        raise TraceInconsistent(
            f"recounted (ph={int(ind_ph.sum())}, xerr={int(ind_xerr.sum())}) "
            f"vs stored (ph={run.lambda_ph}, xerr={run.lambda_xerr})"
        )

    def centered(ind: np.ndarray, p: np.ndarray, what: str) -> np.ndarray:
        x = np.zeros(n + 1, dtype=np.float64)
        np.cumsum(ind - p, out=x[1:])
        steps = np.abs(np.diff(x))
        if steps.size and float(steps.max()) > _BDC_LIMIT:
            raise TraceInconsistent(
                f"{what}: bounded-difference condition violated: "
                f"max |step| = {float(steps.max())!r}"
            )
        return x

    x_ph = centered(ind_ph, p_ph, "phase process")
    x_xerr = centered(ind_xerr, p_xerr, "X-error process")
    lam_ph = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(ind_ph.astype(np.int64), out=lam_ph[1:])
    lam_xerr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(ind_xerr.astype(np.int64), out=lam_xerr[1:])
    return MartingaleTrace(
        x_ph=x_ph,
        x_xerr=x_xerr,
        lambda_ph=lam_ph,
        lambda_xerr=lam_xerr,
        p_ph=p_ph,
        p_xerr=p_xerr,
    )


@dataclass(frozen=True)
class DriftStats:
    """Per-round mean increments with standard errors, over many traces."""

    n_traces: int
    mean_ph: np.ndarray
    stderr_ph: np.ndarray
    mean_xerr: np.ndarray
    stderr_xerr: np.ndarray


def martingale_drift(traces: list[MartingaleTrace]) -> DriftStats:
    """Mean per-round increment across traces; zero for a true martingale."""
    if len(traces) < 100:
        raise DomainError(f"need at least 100 traces, got {len(traces)}")
    n = traces[0].n_rounds
    for t in traces:
        if t.n_rounds != n:
            raise DomainError("traces have unequal round counts")
    inc_ph = np.stack([np.diff(t.x_ph) for t in traces])
    inc_xerr = np.stack([np.diff(t.x_xerr) for t in traces])
    m = len(traces)
    return DriftStats(
        n_traces=m,
        mean_ph=inc_ph.mean(axis=0),
        stderr_ph=inc_ph.std(axis=0, ddof=1) / math.sqrt(m),
        mean_xerr=inc_xerr.mean(axis=0),
        stderr_xerr=inc_xerr.std(axis=0, ddof=1) / math.sqrt(m),
    )


def relation_check(run: EstimationRun) -> float:
    """Residual of the scaled error-probability identity.

    Per detected round both conditional probabilities are the same trace
    weighted by q_z and q_x, so sum(p_ph)/q_z - sum(p_xerr)/q_x should vanish
    to rounding.
    """
    q_z = run.transcript.params.q_z
    q_x = run.transcript.params.q_x
    return math.fsum(r.p_ph / q_z for r in run.per_round) - math.fsum(
        r.p_xerr / q_x for r in run.per_round
    )


# ---------------------------------------------------------------------------
# Concentration coverage


@dataclass(frozen=True)
class CoverageReport:
    """How often the one-sided deviation n*delta was actually exceeded."""

    trials: int
    violations_ph: int
    violations_xerr: int
    eta_claimed: float
    delta: float


@dataclass(frozen=True)
class TrialStats:
    """Per-trial summary counters of repeated estimation runs."""

    n: int  # detected rounds per trial
    lambda_ph: np.ndarray
    lambda_xerr: np.ndarray
    sum_p_ph: np.ndarray
    sum_p_xerr: np.ndarray
    n_z: np.ndarray
    n_x: np.ndarray


def coverage_trials(
    params: ProtocolParams,
    strategy: EveStrategy,
    trials: int,
    rng: RandomStream,
    workers: int = 1,
    povm: BobPOVM | None = None,
) -> TrialStats:
    """Run ``trials`` estimation sessions and collect their counters.

    Per-trial streams are derived from a base seed drawn once from ``rng``
    with the documented counter scheme, so the result is identical for any
    ``workers`` count.
    """
    if trials < 1:
        raise DomainError(f"trials must be >= 1, got {trials}")
    base_seed = rng.getrandbits(64)
    lam_ph = np.zeros(trials, dtype=np.int64)
    lam_xerr = np.zeros(trials, dtype=np.int64)
    sum_ph = np.zeros(trials, dtype=np.float64)
    sum_xerr = np.zeros(trials, dtype=np.float64)
    n_z = np.zeros(trials, dtype=np.int64)
    n_x = np.zeros(trials, dtype=np.int64)

    def one(i: int) -> None:
        run = run_estimation(params, strategy, derive_stream(base_seed, i), povm=povm)
        lam_ph[i] = run.lambda_ph
        lam_xerr[i] = run.lambda_xerr
        sum_ph[i] = math.fsum(r.p_ph for r in run.per_round)
        sum_xerr[i] = math.fsum(r.p_xerr for r in run.per_round)
        n_z[i] = len(run.s_az_vir)
        n_x[i] = sum(
            1 for r in run.per_round if r.bases[0] is Basis.X and r.bases[1] is Basis.X
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one, range(trials)))
    else:
        for i in range(trials):
            one(i)
    return TrialStats(
        n=params.n_det_ter,
        lambda_ph=lam_ph,
        lambda_xerr=lam_xerr,
        sum_p_ph=sum_ph,
        sum_p_xerr=sum_xerr,
        n_z=n_z,
        n_x=n_x,
    )


def coverage_report(stats: TrialStats, delta: float) -> CoverageReport:
    """Count deviation violations of both one-sided bounds at one delta."""
    if delta < 0.0:
        raise DomainError(f"delta must be >= 0, got {delta!r}")
    threshold = stats.n * delta
    v_ph = int(np.count_nonzero(stats.lambda_ph - stats.sum_p_ph >= threshold))
    v_xerr = int(np.count_nonzero(stats.sum_p_xerr - stats.lambda_xerr >= threshold))
    return CoverageReport(
        trials=len(stats.lambda_ph),
        violations_ph=v_ph,
        violations_xerr=v_xerr,
        eta_claimed=math.exp(-stats.n * delta * delta / 2.0),
        delta=delta,
    )


def azuma_coverage(
    params: ProtocolParams,
    strategy: EveStrategy,
    trials: int,
    rng: RandomStream,
) -> CoverageReport:
    """Violation frequency of the concentration bound at ``params.delta``."""
    return coverage_report(coverage_trials(params, strategy, trials, rng), params.delta)


# ---------------------------------------------------------------------------
# Exact stopping-rule bias enumeration

_ENUM_MAX_ROUNDS = 12

# Per-round basis pattern alphabet: both-Z (code), both-X (test), mismatch.
_LETTERS = ("Z", "X", "M")


@dataclass(frozen=True)
class BiasReport:
    """Exact analysis of test-position uniformity under a stopping rule.

    ``t_distribution`` maps each terminating per-round pattern sequence
    (string over Z/X/M) to its probability conditioned on termination.
    ``tv_from_uniform`` is the terminating-mass-weighted total variation
    between the conditional law of pattern *arrangements* (given length and
    per-letter counts) and the uniform law over arrangements — zero exactly
    when which-rounds-are-tests is exchangeable.  ``dependence_detected``
    reports whether a deterministic error pattern correlated with the pattern
    prefix (an error wherever the previous round was a test) produces
    different error rates on test and code positions.
    """

    rule: TerminationRule
    n_rounds_enumerated: int
    t_distribution: dict[str, float]
    tv_from_uniform: float
    dependence_detected: bool
    terminating_mass: float
    test_error_rate: float
    code_error_rate: float


def enumerate_bias(
    rule: TerminationRule, p_bases: tuple[float, float], max_rounds: int
) -> BiasReport:
    """Exhaustively enumerate announcement sequences under a lossless channel.

    ``p_bases`` is (p_z_a, p_z_b).  Every round is detected (no loss, unit
    detector efficiency), so the announcement content per round reduces to the
    basis pattern.  All probabilities are exact fractions; sequences that have
    not terminated after ``max_rounds`` rounds are excluded and the report is
    conditioned on the terminating mass.
    """
    if max_rounds < 1:
        raise DomainError(f"max_rounds must be >= 1, got {max_rounds}")
    if max_rounds > _ENUM_MAX_ROUNDS:
        raise EnumerationTooLarge(
            f"exact enumeration supports at most {_ENUM_MAX_ROUNDS} rounds, "
            f"got {max_rounds}"
        )
    if isinstance(rule, CountDetected):
        if rule.n > max_rounds:
            raise DomainError(
                f"CountDetected({rule.n}) cannot terminate within {max_rounds} rounds"
            )
    elif not isinstance(rule, CountPerBasis):
        raise DomainError(f"unsupported termination rule {rule!r}")

    p_z_a, p_z_b = (Fraction(p) for p in p_bases)
    for p in (p_z_a, p_z_b):
        if not 0 <= p <= 1:
            raise DomainError(f"basis probability {float(p)} outside [0, 1]")
    q = {
        "Z": p_z_a * p_z_b,
        "X": (1 - p_z_a) * (1 - p_z_b),
    }
    q["M"] = 1 - q["Z"] - q["X"]

    if isinstance(rule, CountDetected):
        target = rule.n

        def terminated(n: int, c_z: int, c_x: int) -> bool:
            return n == target

    else:
        nz_req, nx_req = rule.n_z_req, rule.n_x_req

        def terminated(n: int, c_z: int, c_x: int) -> bool:
            return c_z >= nz_req and c_x >= nx_req

    leaves: list[tuple[str, Fraction]] = []
    stack: list[tuple[str, Fraction, int, int]] = [("", Fraction(1), 0, 0)]
    while stack:
        seq, prob, c_z, c_x = stack.pop()
        n = len(seq)
        if n > 0 and terminated(n, c_z, c_x):
            leaves.append((seq, prob))
            continue
        if n == max_rounds:
            continue  # truncated: non-terminating mass
        for letter in _LETTERS:
            p = q[letter]
            if p == 0:
                continue
            stack.append(
                (seq + letter, prob * p, c_z + (letter == "Z"), c_x + (letter == "X"))
            )

    total = sum(prob for _, prob in leaves)
    if total == 0:
        raise DomainError("no sequence terminates within max_rounds")

    # Arrangement uniformity per (length, composition) group.  Every
    # arrangement of a composition has the same product probability, so within
    # a group the conditional law is uniform over the *terminating*
    # arrangements; TV against uniform-over-all-arrangements is 1 - |S| / M.
    groups: dict[tuple[int, int, int], int] = {}
    group_mass: dict[tuple[int, int, int], Fraction] = {}
    for seq, prob in leaves:
        key = (len(seq), seq.count("Z"), seq.count("X"))
        groups[key] = groups.get(key, 0) + 1
        group_mass[key] = group_mass.get(key, Fraction(0)) + prob
    tv = Fraction(0)
    for key, n_term in groups.items():
        n, c_z, c_x = key
        c_m = n - c_z - c_x
        arrangements = (
            math.factorial(n)
            // (math.factorial(c_z) * math.factorial(c_x) * math.factorial(c_m))
        )
        tv += (group_mass[key] / total) * (1 - Fraction(n_term, arrangements))

    # Deterministic prefix-correlated error pattern: an error occurs at round
    # i exactly when round i-1 was a test round.  Under an exchangeable rule
    # the error rates on test and code positions coincide; a rule whose
    # stopping time reads the announcements drives them apart.
    err_test = Fraction(0)
    mass_test = Fraction(0)
    err_code = Fraction(0)
    mass_code = Fraction(0)
    for seq, prob in leaves:
        w = prob / total
        prev = ""
        for letter in seq:
            y = 1 if prev == "X" else 0
            if letter == "X":
                mass_test += w
                if y:
                    err_test += w
            elif letter == "Z":
                mass_code += w
                if y:
                    err_code += w
            prev = letter
    rate_test = err_test / mass_test if mass_test else Fraction(0)
    rate_code = err_code / mass_code if mass_code else Fraction(0)

    return BiasReport(
        rule=rule,
        n_rounds_enumerated=max_rounds,
        t_distribution={seq: float(prob / total) for seq, prob in sorted(leaves)},
        tv_from_uniform=float(tv),
        dependence_detected=rate_test != rate_code,
        terminating_mass=float(total),
        test_error_rate=float(rate_test),
        code_error_rate=float(rate_code),
    )
