"""Protocol sessions: iterative sifting until enough rounds are detected.

Three executable variants share one round structure:

* :func:`run_actual`   — prepare-and-measure.  Alice sends a random source
  state; Bob applies his three-outcome measurement; both announce.  Runs on
  2x2 states.
* :func:`run_virtual`  — entanglement picture.  A fresh pair per round, the
  detection filter on Bob's side, and *deferred* sifted-key measurements after
  the loop.  Announcements carry exactly the same content per round as the
  prepare-and-measure variant, so the two are indistinguishable from the
  channel.
* :func:`run_estimation` — the bookkeeping variant: every detected pair is
  measured in X immediately, while the per-round phase/X-error probabilities
  of the conditional state are recorded for the martingale analysis.

Termination counts *detected* rounds, matched or mismatched bases alike, and
detection probability is basis-independent by POVM construction, so the
stopping rule leaks nothing about basis choices.  When ``batch_size > 1``,
rounds already in flight when the threshold fills are still announced but
their detections are discarded, keeping the detected count exact.

Adaptive adversaries see, for round i, the transcript of rounds 1..i-1 only.

Per-round determinism: every sample comes from the session stream in a fixed
order (channel branch, bases, outcome), and the adversary draws from its own
sub-stream, so a (seed, trial index) pair fully determines a session.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np

from . import finite_key, hashing
from .adversary import EveStrategy
from .errors import (
    AbortKeyTooShort,
    AbortVerificationFailed,
    MaxRoundsExceeded,
    NormalizationError,
    ValidationError,
)
from .quantum_core import (
    BRANCH_EPS,
    Basis,
    BobPOVM,
    ChannelOp,
    Density4,
    RandomStream,
    bell_pair,
    channel_branches,
    filter_branches,
    ideal_povm,
    pair_outcome_probs,
    prob_phase_error,
    qubit_channel_branches,
    qubit_outcome_probs,
    source_state,
)

_PROB_SUM_ATOL = 1e-8


@dataclass(frozen=True)
class ProtocolParams:
    """Session parameters.

    ``n_det_ter`` is the detected-round count at which the loop stops;
    ``delta`` the concentration deviation per detected round; ``f_ec`` the
    error-correction inefficiency; ``batch_size`` how many rounds are in
    flight before announcements are awaited (1 = strictly sequential).
    ``max_rounds`` defaults to 1000 * n_det_ter.
    """

    p_z_a: float
    p_x_a: float
    p_z_b: float
    p_x_b: float
    n_det_ter: int
    eps_s: float
    eps_c: float
    delta: float
    f_ec: float = 1.16
    max_rounds: int | None = None
    batch_size: int = 1

    def __post_init__(self) -> None:
        for name in ("p_z_a", "p_x_a", "p_z_b", "p_x_b"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {v!r}")
        if abs(self.p_z_a + self.p_x_a - 1.0) > 1e-12:
            raise ValidationError("basis probabilities of A must sum to 1 within 1e-12")
        if abs(self.p_z_b + self.p_x_b - 1.0) > 1e-12:
            raise ValidationError("basis probabilities of B must sum to 1 within 1e-12")
        if not isinstance(self.n_det_ter, int) or self.n_det_ter < 1:
            raise ValidationError(f"n_det_ter must be a positive integer, got {self.n_det_ter!r}")
        for name in ("eps_s", "eps_c"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValidationError(f"{name} must be in (0, 1), got {v!r}")
        if self.delta < 0.0:
            raise ValidationError(f"delta must be >= 0, got {self.delta!r}")
        if self.f_ec < 1.0:
            raise ValidationError(f"f_ec must be >= 1, got {self.f_ec!r}")
        if self.max_rounds is None:
            object.__setattr__(self, "max_rounds", 1000 * self.n_det_ter)
        if not isinstance(self.max_rounds, int) or self.max_rounds < self.n_det_ter:
            raise ValidationError(
                f"max_rounds must be an integer >= n_det_ter, got {self.max_rounds!r}"
            )
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ValidationError(f"batch_size must be a positive integer, got {self.batch_size!r}")

    @property
    def q_z(self) -> float:
        """Probability that both sides pick Z in a round."""
        return self.p_z_a * self.p_z_b

    @property
    def q_x(self) -> float:
        return self.p_x_a * self.p_x_b


@dataclass(frozen=True)
class CountDetected:
    """Stop once n detected rounds are counted (the secure rule)."""

    n: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValidationError(f"detection target must be >= 1, got {self.n}")


@dataclass(frozen=True)
class CountPerBasis:
    """Stop once both per-basis quotas fill.

    Demonstration rule only: its stopping time depends on announced bases,
    which skews which positions end up as test rounds.  The secure entry
    points refuse it.
    """

    n_z_req: int
    n_x_req: int

    def __post_init__(self) -> None:
        if self.n_z_req < 1 or self.n_x_req < 1:
            raise ValidationError(
                f"per-basis quotas must be >= 1, got ({self.n_z_req}, {self.n_x_req})"
            )


TerminationRule = Union[CountDetected, CountPerBasis]


class RoundRecord(NamedTuple):
    """One announced round.  ``basis_a`` is present exactly when detected."""

    index: int
    detected: bool
    basis_b: Basis
    basis_a: Basis | None


@dataclass
class Transcript:
    """Everything public: parameters and the per-round announcement records."""

    params: ProtocolParams
    rounds: list[RoundRecord] = field(default_factory=list)

    @property
    def n_detected(self) -> int:
        return sum(1 for r in self.rounds if r.detected)


@dataclass(frozen=True)
class SiftedData:
    """Bit strings kept after basis reconciliation (uint8 arrays of 0/1)."""

    s_az: np.ndarray
    s_bz: np.ndarray
    s_ax: np.ndarray
    s_bx: np.ndarray
    n_z: int
    n_x: int

    def __post_init__(self) -> None:
        if not (len(self.s_az) == len(self.s_bz) == self.n_z):
            raise ValidationError("Z-string lengths disagree with n_z")
        if not (len(self.s_ax) == len(self.s_bx) == self.n_x):
            raise ValidationError("X-string lengths disagree with n_x")

    def x_error_weight(self) -> int:
        """Hamming weight of s_ax XOR s_bx."""
        return int(np.count_nonzero(self.s_ax != self.s_bx))


class PerRound(NamedTuple):
    """Estimation-run record of one detected round."""

    bases: tuple[Basis, Basis]
    x_outcomes: tuple[int, int]
    p_ph: float
    p_xerr: float


@dataclass(frozen=True)
class EstimationRun:
    """Output of :func:`run_estimation`.

    ``lambda_ph`` counts detected rounds where both sides announced Z and the
    immediate X measurements disagreed; ``lambda_xerr`` the same for X-basis
    announcements.  ``s_az_vir``/``s_bz_vir`` are the X outcomes on Z-agreed
    rounds — the basis-flipped counterpart of the sifted key.
    """

    transcript: Transcript
    per_round: list[PerRound]
    lambda_ph: int
    lambda_xerr: int
    s_az_vir: np.ndarray
    s_bz_vir: np.ndarray


@dataclass(frozen=True)
class FinalKeys:
    """Distilled keys plus the public randomness needed to audit them."""

    f_az: np.ndarray
    f_bz: np.ndarray
    aborted: bool
    lambda_ec: int
    meta: dict

    def __post_init__(self) -> None:
        if not self.aborted and len(self.f_az) != len(self.f_bz):
            raise ValidationError("final key lengths disagree")


def derive_stream(master_seed: int, index: int) -> RandomStream:
    """Stream for trial ``index`` of a run seeded with ``master_seed``.

    Counter construction: the child seed is ``(master_seed << 64) + index``,
    injective over (u64 seed, index), so trial streams are identical no matter
    how trials are scheduled over workers.
    """
    if not 0 <= master_seed < 2**64:
        raise ValidationError(f"master seed must be a u64, got {master_seed!r}")
    if index < 0:
        raise ValidationError(f"trial index must be >= 0, got {index}")
    return random.Random((master_seed << 64) + index)


def _eve_stream(rng: RandomStream) -> RandomStream:
    """The adversary's private sub-stream, derived once per session."""
    return random.Random(rng.getrandbits(64))


# ---------------------------------------------------------------------------
# Round kernel: per-ChannelOp algebra, computed once and then sampled from.


class _ActualLaw(NamedTuple):
    # p_deliver[bit][basis_index]
    p_deliver: tuple[tuple[float, float], tuple[float, float]]
    # outcome_cum[bit][basis_a_index][basis_b_index] = (P(bob=0), P(bob in {0,1}))
    outcome_cum: tuple


class _VirtualLaw(NamedTuple):
    p_deliver: float
    p_detect: float  # conditional on delivery
    rho_detected: Density4 | None
    t_phase: float
    zz_cum: tuple[float, float, float]  # cumulative over (0,0),(0,1),(1,0); rest (1,1)
    xx_cum: tuple[float, float, float]


def _cum_pair(probs: np.ndarray, what: str) -> tuple[float, float, float]:
    total = float(probs.sum())
    if abs(total - 1.0) > _PROB_SUM_ATOL:
        raise NormalizationError(f"{what}: outcome probabilities sum to {total!r}")
    p00, p01, p10 = float(probs[0, 0]), float(probs[0, 1]), float(probs[1, 0])
    return (p00, p00 + p01, p00 + p01 + p10)


_KERNEL_CACHE_MAX = 512


class _RoundKernel:
    """Memo of the Born/Kraus arithmetic per (POVM, channel op) pair.

    Strategies reuse ChannelOp instances, so each distinct op is reduced once
    to plain floats and every subsequent round costs only scalar samples.
    Keyed by object identity; the op is referenced to keep ids stable.
    """

    def __init__(self, povm: BobPOVM) -> None:
        self.povm = povm
        self._actual: dict[int, _ActualLaw] = {}
        self._virtual: dict[int, _VirtualLaw] = {}
        self._refs: list[ChannelOp] = []

    def _remember(self, op: ChannelOp) -> None:
        self._refs.append(op)
        if len(self._refs) > _KERNEL_CACHE_MAX:
            # A strategy that mints a fresh op every round would grow the memo
            # without bound; fall back to recomputing.
            self._actual.clear()
            self._virtual.clear()
            self._refs.clear()

    def actual(self, op: ChannelOp) -> _ActualLaw:
        law = self._actual.get(id(op))
        if law is None:
            law = self._build_actual(op)
            self._actual[id(op)] = law
            self._remember(op)
        return law

    def virtual(self, op: ChannelOp) -> _VirtualLaw:
        law = self._virtual.get(id(op))
        if law is None:
            law = self._build_virtual(op)
            self._virtual[id(op)] = law
            self._remember(op)
        return law

    def _build_actual(self, op: ChannelOp) -> _ActualLaw:
        povm = self.povm
        p_deliver = []
        outcome_cum = []
        for bit in (0, 1):
            p_row = []
            cum_row = []
            for basis in (Basis.Z, Basis.X):
                p_del, rho_del, _ = qubit_channel_branches(source_state(bit, basis), op)
                p_row.append(p_del)
                if rho_del is None:
                    cum_row.append(((0.0, 0.0), (0.0, 0.0)))
                    continue
                per_bob = []
                for bob_basis in (Basis.Z, Basis.X):
                    p0, p1, p_fail = qubit_outcome_probs(rho_del, bob_basis, povm)
                    total = p0 + p1 + p_fail
                    if abs(total - 1.0) > _PROB_SUM_ATOL:
                        raise NormalizationError(
                            f"three-outcome probabilities sum to {total!r}"
                        )
                    per_bob.append((p0, p0 + p1))
                cum_row.append(tuple(per_bob))
            p_deliver.append(tuple(p_row))
            outcome_cum.append(tuple(cum_row))
        return _ActualLaw(tuple(p_deliver), tuple(outcome_cum))

    def _build_virtual(self, op: ChannelOp) -> _VirtualLaw:
        povm = self.povm
        split = channel_branches(bell_pair(), op)
        p_deliver = split.p_first
        if split.rho_first is None:
            return _VirtualLaw(p_deliver, 0.0, None, 0.0, (0.0,) * 3, (0.0,) * 3)
        rho_delivered = split.rho_first
        rho_delivered.validate()
        fsplit = filter_branches(rho_delivered, povm)
        p_detect = fsplit.p_first
        if fsplit.rho_first is None:
            return _VirtualLaw(p_deliver, p_detect, None, 0.0, (0.0,) * 3, (0.0,) * 3)
        rho_detected = fsplit.rho_first
        rho_detected.validate()
        t = prob_phase_error(rho_detected, povm)
        zz = pair_outcome_probs(rho_detected, Basis.Z, Basis.Z, povm)
        xx = pair_outcome_probs(rho_detected, Basis.X, Basis.X, povm)
        return _VirtualLaw(
            p_deliver,
            p_detect,
            rho_detected,
            t,
            _cum_pair(zz, "ZZ readout"),
            _cum_pair(xx, "XX readout"),
        )


# One kernel per POVM instance, shared across sessions so that short runs do
# not pay the law construction over and over.  Dict ops are atomic under the
# GIL; a rare duplicate build on a race is idempotent.
_KERNELS: dict[int, _RoundKernel] = {}
_KERNEL_POVMS: list[BobPOVM] = []


def _kernel_for(povm: BobPOVM) -> _RoundKernel:
    kernel = _KERNELS.get(id(povm))
    if kernel is None:
        kernel = _RoundKernel(povm)
        if len(_KERNEL_POVMS) >= _KERNEL_CACHE_MAX:
            _KERNELS.clear()
            _KERNEL_POVMS.clear()
        _KERNELS[id(povm)] = kernel
        _KERNEL_POVMS.append(povm)
    return kernel


# ---------------------------------------------------------------------------
# Session loops


def _check_secure_rule(params: ProtocolParams) -> CountDetected:
    return CountDetected(params.n_det_ter)


def run_actual(
    params: ProtocolParams,
    eve: EveStrategy,
    rng: RandomStream,
    povm: BobPOVM | None = None,
) -> tuple[Transcript, SiftedData]:
    """Prepare-and-measure session; stops at exactly n_det_ter detections."""
    povm = povm if povm is not None else ideal_povm()
    rule = _check_secure_rule(params)
    transcript, sifted, _ = _actual_loop(params, eve, rng, povm, rule)
    return transcript, sifted


def run_insecure_termination(
    params: ProtocolParams,
    rule: CountPerBasis,
    eve: EveStrategy,
    rng: RandomStream,
    povm: BobPOVM | None = None,
) -> tuple[Transcript, SiftedData]:
    """Prepare-and-measure session under a per-basis quota stopping rule.

    Exists solely to feed the bias analyzer; the stopping time of this rule
    depends on announced bases, which is exactly the defect being measured.
    """
    if not isinstance(rule, CountPerBasis):
        raise ValidationError("run_insecure_termination requires a CountPerBasis rule")
    povm = povm if povm is not None else ideal_povm()
    transcript, sifted, _ = _actual_loop(params, eve, rng, povm, rule)
    return transcript, sifted


def _actual_loop(
    params: ProtocolParams,
    eve: EveStrategy,
    rng: RandomStream,
    povm: BobPOVM,
    rule: TerminationRule,
) -> tuple[Transcript, SiftedData, int]:
    kernel = _kernel_for(povm)
    eve_rng = _eve_stream(rng)
    behavior = eve.behavior
    rand = rng.random
    getrandbits = rng.getrandbits

    p_z_a = params.p_z_a
    p_z_b = params.p_z_b
    batch = params.batch_size
    max_rounds = params.max_rounds
    Z, X = Basis.Z, Basis.X

    counting_detected = isinstance(rule, CountDetected)
    det_target = rule.n if counting_detected else 0
    nz_req = nx_req = 0
    if not counting_detected:
        nz_req, nx_req = rule.n_z_req, rule.n_x_req

    rounds: list[RoundRecord] = []
    transcript = Transcript(params=params, rounds=rounds)
    az: list[int] = []
    bz: list[int] = []
    ax: list[int] = []
    bx: list[int] = []
    n_det = 0
    idx = 0

    def done() -> bool:
        if counting_detected:
            return n_det >= det_target
        return len(az) >= nz_req and len(ax) >= nx_req

    while not done():
        if idx >= max_rounds:
            raise MaxRoundsExceeded(
                f"no termination after {idx} rounds ({n_det} detected)"
            )
        for _ in range(batch):
            if idx >= max_rounds:
                break
            idx += 1
            law = kernel.actual(behavior(transcript, eve_rng))
            a_is_z = rand() < p_z_a
            a_bit = getrandbits(1)
            p_del = law.p_deliver[a_bit][0 if a_is_z else 1]
            delivered = rand() < p_del
            b_is_z = rand() < p_z_b
            detected = False
            b_bit = 0
            if delivered:
                c0, c1 = law.outcome_cum[a_bit][0 if a_is_z else 1][0 if b_is_z else 1]
                u = rand()
                if u < c0:
                    detected = True
                elif u < c1:
                    detected = True
                    b_bit = 1
            if detected and counting_detected and n_det >= det_target:
                # Threshold filled while this round was in flight: announce it
                # as non-detected so the detected count stays exact.
                detected = False
            if detected:
                n_det += 1
                if a_is_z:
                    rounds.append(RoundRecord(idx, True, Z if b_is_z else X, Z))
                    if b_is_z:
                        az.append(a_bit)
                        bz.append(b_bit)
                else:
                    rounds.append(RoundRecord(idx, True, Z if b_is_z else X, X))
                    if not b_is_z:
                        ax.append(a_bit)
                        bx.append(b_bit)
            else:
                rounds.append(RoundRecord(idx, False, Z if b_is_z else X, None))

    sifted = SiftedData(
        s_az=np.array(az, dtype=np.uint8),
        s_bz=np.array(bz, dtype=np.uint8),
        s_ax=np.array(ax, dtype=np.uint8),
        s_bx=np.array(bx, dtype=np.uint8),
        n_z=len(az),
        n_x=len(ax),
    )
    if counting_detected and sifted.n_z + sifted.n_x > params.n_det_ter:
        raise ValidationError("sifted counts exceed the detection threshold")
    return transcript, sifted, n_det


def run_virtual(
    params: ProtocolParams,
    eve: EveStrategy,
    rng: RandomStream,
    povm: BobPOVM | None = None,
) -> tuple[Transcript, SiftedData, list[Density4]]:
    """Entanglement-picture session with deferred sifted-key measurements.

    Returns the transcript, the sifted data obtained by measuring the kept
    pairs *after* the loop, and the retained conditional states of the
    Z-agreed rounds in detection order.
    """
    povm = povm if povm is not None else ideal_povm()
    rule = _check_secure_rule(params)
    kernel = _kernel_for(povm)
    eve_rng = _eve_stream(rng)
    behavior = eve.behavior
    rand = rng.random

    p_z_a = params.p_z_a
    p_z_b = params.p_z_b
    batch = params.batch_size
    max_rounds = params.max_rounds
    Z, X = Basis.Z, Basis.X

    rounds: list[RoundRecord] = []
    transcript = Transcript(params=params, rounds=rounds)
    # (is_z_pair, cum3) per kept round, measured after the loop.
    kept: list[tuple[bool, tuple[float, float, float]]] = []
    retained: list[Density4] = []
    n_det = 0
    idx = 0

    while n_det < rule.n:
        if idx >= max_rounds:
            raise MaxRoundsExceeded(
                f"no termination after {idx} rounds ({n_det} detected)"
            )
        for _ in range(batch):
            if idx >= max_rounds:
                break
            idx += 1
            law = kernel.virtual(behavior(transcript, eve_rng))
            detected = False
            if rand() < law.p_deliver and rand() < law.p_detect:
                detected = True
            b_is_z = rand() < p_z_b
            if detected and n_det >= rule.n:
                detected = False  # in-flight overflow, see _actual_loop
            if not detected:
                rounds.append(RoundRecord(idx, False, Z if b_is_z else X, None))
                continue
            n_det += 1
            a_is_z = rand() < p_z_a
            rounds.append(
                RoundRecord(idx, True, Z if b_is_z else X, Z if a_is_z else X)
            )
            if a_is_z and b_is_z:
                kept.append((True, law.zz_cum))
                retained.append(law.rho_detected)
            elif not a_is_z and not b_is_z:
                kept.append((False, law.xx_cum))

    az: list[int] = []
    bz: list[int] = []
    ax: list[int] = []
    bx: list[int] = []
    for is_z, cum in kept:
        u = rand()
        if u < cum[0]:
            a_bit, b_bit = 0, 0
        elif u < cum[1]:
            a_bit, b_bit = 0, 1
        elif u < cum[2]:
            a_bit, b_bit = 1, 0
        else:
            a_bit, b_bit = 1, 1
        if is_z:
            az.append(a_bit)
            bz.append(b_bit)
        else:
            ax.append(a_bit)
            bx.append(b_bit)

    sifted = SiftedData(
        s_az=np.array(az, dtype=np.uint8),
        s_bz=np.array(bz, dtype=np.uint8),
        s_ax=np.array(ax, dtype=np.uint8),
        s_bx=np.array(bx, dtype=np.uint8),
        n_z=len(az),
        n_x=len(ax),
    )
    if sifted.n_z + sifted.n_x > params.n_det_ter:
        raise ValidationError("sifted counts exceed the detection threshold")
    return transcript, sifted, retained


def run_estimation(
    params: ProtocolParams,
    eve: EveStrategy,
    rng: RandomStream,
    povm: BobPOVM | None = None,
) -> EstimationRun:
    """Session in which every detected pair is measured in X immediately.

    Each detected round records the announced bases, the X outcomes, and the
    conditional probabilities p_ph = q_z * t and p_xerr = q_x * t, where t is
    the phase-error weight of that round's post-detection state.  Both
    probabilities come from the single trace evaluation t, so their ratio is
    q_z : q_x by construction.
    """
    povm = povm if povm is not None else ideal_povm()
    rule = _check_secure_rule(params)
    kernel = _kernel_for(povm)
    eve_rng = _eve_stream(rng)
    behavior = eve.behavior
    rand = rng.random

    p_z_a = params.p_z_a
    p_z_b = params.p_z_b
    q_z = params.q_z
    q_x = params.q_x
    batch = params.batch_size
    max_rounds = params.max_rounds
    Z, X = Basis.Z, Basis.X

    rounds: list[RoundRecord] = []
    transcript = Transcript(params=params, rounds=rounds)
    per_round: list[PerRound] = []
    az_vir: list[int] = []
    bz_vir: list[int] = []
    lambda_ph = 0
    lambda_xerr = 0
    n_det = 0
    idx = 0
    # p_ph/p_xerr per op are q-weighted copies of t cached alongside the law
    weighted: dict[int, tuple[float, float]] = {}

    while n_det < rule.n:
        if idx >= max_rounds:
            raise MaxRoundsExceeded(
                f"no termination after {idx} rounds ({n_det} detected)"
            )
        for _ in range(batch):
            if idx >= max_rounds:
                break
            idx += 1
            op = behavior(transcript, eve_rng)
            law = kernel.virtual(op)
            detected = False
            if rand() < law.p_deliver and rand() < law.p_detect:
                detected = True
            b_is_z = rand() < p_z_b
            if detected and n_det >= rule.n:
                detected = False
            if not detected:
                rounds.append(RoundRecord(idx, False, Z if b_is_z else X, None))
                continue
            n_det += 1
            a_is_z = rand() < p_z_a
            rounds.append(
                RoundRecord(idx, True, Z if b_is_z else X, Z if a_is_z else X)
            )
            w = weighted.get(id(law))
            if w is None:
                w = (q_z * law.t_phase, q_x * law.t_phase)
                weighted[id(law)] = w
            p_ph, p_xerr = w
            cum = law.xx_cum
            u = rand()
            if u < cum[0]:
                xa, xb = 0, 0
            elif u < cum[1]:
                xa, xb = 0, 1
            elif u < cum[2]:
                xa, xb = 1, 0
            else:
                xa, xb = 1, 1
            if a_is_z:
                if b_is_z:
                    if xa != xb:
                        lambda_ph += 1
                    az_vir.append(xa)
                    bz_vir.append(xb)
                    per_round.append(PerRound((Z, Z), (xa, xb), p_ph, p_xerr))
                else:
                    per_round.append(PerRound((Z, X), (xa, xb), p_ph, p_xerr))
            else:
                if not b_is_z:
                    if xa != xb:
                        lambda_xerr += 1
                    per_round.append(PerRound((X, X), (xa, xb), p_ph, p_xerr))
                else:
                    per_round.append(PerRound((X, Z), (xa, xb), p_ph, p_xerr))

    return EstimationRun(
        transcript=transcript,
        per_round=per_round,
        lambda_ph=lambda_ph,
        lambda_xerr=lambda_xerr,
        s_az_vir=np.array(az_vir, dtype=np.uint8),
        s_bz_vir=np.array(bz_vir, dtype=np.uint8),
    )


# ---------------------------------------------------------------------------
# Post-processing


def postprocess(
    sifted: SiftedData, params: ProtocolParams, rng: RandomStream
) -> FinalKeys:
    """Distill final keys: bound the phase errors, correct, compress, verify.

    Error correction is idealized — Bob's string is replaced by Alice's and
    the syndrome cost lambda_ec is charged against the key length.  Privacy
    amplification is the seeded Toeplitz hash; verification tags come from the
    polynomial hash, consuming ceil(log2(2/eps_c)) bits of pre-shared key.
    Raises the ProtocolAbort subclasses on a non-positive key length or tag
    mismatch, and propagates the aborts of the bound pipeline.
    """
    result = finite_key.pipeline(sifted, params)
    if result.l <= 0:
        raise AbortKeyTooShort(
            f"extractable key length {result.l} (pre-floor {result.l_pre_floor:.3f})"
        )
    l = result.l
    corrected_b = sifted.s_az.copy()  # idealized reconciliation

    seed_bits = hashing.random_bits(rng, sifted.n_z + l - 1)
    f_az = hashing.toeplitz_hash(sifted.s_az, l, seed_bits)
    f_bz = hashing.toeplitz_hash(corrected_b, l, seed_bits)

    tag_bits = math.ceil(math.log2(2.0 / params.eps_c))
    modulus = hashing.random_prime(rng, tag_bits)
    point = rng.randrange(modulus)
    tag_a = hashing.poly_hash(f_az, modulus, point)
    tag_b = hashing.poly_hash(f_bz, modulus, point)
    meta = {
        "toeplitz_seed_hex": np.packbits(seed_bits).tobytes().hex(),
        "poly_modulus": modulus,
        "poly_point": point,
        "tag_a": tag_a,
        "tag_b": tag_b,
        "consumed_preshared_bits": tag_bits,
        "lambda_ec": result.lambda_ec,
        "key_length": l,
    }
    if tag_a != tag_b:
        raise AbortVerificationFailed(f"verification tags differ: {tag_a} != {tag_b}")
    return FinalKeys(
        f_az=f_az, f_bz=f_bz, aborted=False, lambda_ec=result.lambda_ec, meta=meta
    )


# ---------------------------------------------------------------------------
# Serialization helpers (documented JSON shapes; see docs/output-formats.md)


def bits_to_hex(bits: np.ndarray) -> str:
    """Pack a 0/1 array MSB-first into hex; pair with the stored bit length."""
    if len(bits) == 0:
        return ""
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes().hex()


def hex_to_bits(hex_str: str, n_bits: int) -> np.ndarray:
    if n_bits == 0:
        return np.zeros(0, dtype=np.uint8)
    raw = np.frombuffer(bytes.fromhex(hex_str), dtype=np.uint8)
    return np.unpackbits(raw)[:n_bits].astype(np.uint8)


def transcript_to_json(transcript: Transcript) -> dict:
    return {
        "n_rounds": len(transcript.rounds),
        "n_detected": transcript.n_detected,
        "rounds": [
            [
                r.index,
                1 if r.detected else 0,
                r.basis_b.name,
                r.basis_a.name if r.basis_a is not None else None,
            ]
            for r in transcript.rounds
        ],
    }


def sifted_to_json(sifted: SiftedData) -> dict:
    return {
        "n_z": sifted.n_z,
        "n_x": sifted.n_x,
        "x_error_weight": sifted.x_error_weight(),
        "s_az_hex": bits_to_hex(sifted.s_az),
        "s_bz_hex": bits_to_hex(sifted.s_bz),
        "s_ax_hex": bits_to_hex(sifted.s_ax),
        "s_bx_hex": bits_to_hex(sifted.s_bx),
    }


def final_keys_to_json(keys: FinalKeys) -> dict:
    return {
        "aborted": keys.aborted,
        "key_length": int(len(keys.f_az)),
        "lambda_ec": keys.lambda_ec,
        "f_az_hex": bits_to_hex(keys.f_az),
        "f_bz_hex": bits_to_hex(keys.f_bz),
        "meta": dict(keys.meta),
    }
