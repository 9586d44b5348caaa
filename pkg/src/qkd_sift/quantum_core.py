"""Qubit-pair states, channels and detection-aware measurements.

This module owns the linear algebra of the simulator: density matrices for a
single qubit and for an entangled pair (tensor order A ⊗ B throughout), Kraus
channels acting on Bob's side, and Bob's three-outcome measurement built from
a two-valued POVM plus a *shared* failure element ``m_fail``.  Sharing one
``m_fail`` between the Z and X decompositions is what makes the detection
event basis-independent, which the protocol layer relies on for its
termination rule.

All matrices are dense complex128 ndarrays.  Basis projectors are written out
with exact dyadic entries (0.5 instead of squared 1/sqrt(2) components), so
quantities that vanish analytically — e.g. the phase-error weight of a clean
pair state — vanish *exactly* in floating point as well.  The statistics
layer depends on that exactness.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import NamedTuple

import numpy as np
import numpy.typing as npt

from .errors import DegenerateState, DomainError, NormalizationError

Matrix = npt.NDArray[np.complex128]

#: Streams of randomness are plain ``random.Random`` instances: scalar draws
#: are cheap, state is picklable, and independent instances never interact.
RandomStream = random.Random

# Tolerances.  Construction-time structural checks use 1e-10; probabilities
# handed to a sampler must be normalized within 1e-8; a branch whose
# probability falls below 1e-12 is treated as impossible.
HERMITIAN_ATOL = 1e-10
PSD_EIG_ATOL = 1e-10
TRACE_MAX_ATOL = 1e-10
COMPLETENESS_ATOL = 1e-10
NORMALIZATION_ATOL = 1e-8
BRANCH_EPS = 1e-12
_SUPPORT_EIG_CUTOFF = 1e-12


class Basis(Enum):
    """Measurement basis label; ``value`` doubles as an array index."""

    Z = 0
    X = 1


_I2 = np.eye(2, dtype=np.complex128)

# Exact basis kets and projectors.  The X projectors are written with literal
# 0.5 entries: np.outer of (1/sqrt(2))-kets would leave ~1e-17 dust on the
# diagonal and break exact cancellations downstream.
KET = {
    (0, Basis.Z): np.array([1.0, 0.0], dtype=np.complex128),
    (1, Basis.Z): np.array([0.0, 1.0], dtype=np.complex128),
    (0, Basis.X): np.array([np.sqrt(0.5), np.sqrt(0.5)], dtype=np.complex128),
    (1, Basis.X): np.array([np.sqrt(0.5), -np.sqrt(0.5)], dtype=np.complex128),
}

PROJECTOR = {
    (0, Basis.Z): np.array([[1.0, 0.0], [0.0, 0.0]], dtype=np.complex128),
    (1, Basis.Z): np.array([[0.0, 0.0], [0.0, 1.0]], dtype=np.complex128),
    (0, Basis.X): np.array([[0.5, 0.5], [0.5, 0.5]], dtype=np.complex128),
    (1, Basis.X): np.array([[0.5, -0.5], [-0.5, 0.5]], dtype=np.complex128),
}

#: Placeholder for Bob's system after a channel loss.  It is never measured;
#: it only keeps the pair state a well-formed 4x4 matrix.
JUNK_B = PROJECTOR[(0, Basis.Z)]


def _freeze(m: np.ndarray) -> Matrix:
    out = np.asarray(m, dtype=np.complex128)
    out.setflags(write=False)
    return out


def _tr_product(a: Matrix, b: Matrix) -> float:
    """Re Tr(a @ b) without forming the product matrix."""
    return float(np.einsum("ij,ji->", a, b).real)


def _check_density(m: Matrix, dim: int, what: str) -> None:
    if m.shape != (dim, dim):
        raise DomainError(f"{what}: expected {dim}x{dim} matrix, got {m.shape}")
    if np.abs(m - m.conj().T).max() > HERMITIAN_ATOL:
        raise DomainError(f"{what}: not Hermitian within {HERMITIAN_ATOL}")
    eigs = np.linalg.eigvalsh(m)
    if eigs.min() < -PSD_EIG_ATOL:
        raise DomainError(f"{what}: negative eigenvalue {eigs.min():.3e}")
    tr = float(m.trace().real)
    if not -PSD_EIG_ATOL <= tr <= 1.0 + TRACE_MAX_ATOL:
        raise DomainError(f"{what}: trace {tr!r} outside [0, 1]")


@dataclass(frozen=True)
class Density2:
    """Single-qubit density matrix; may be sub-normalized after a Kraus branch."""

    mat: Matrix

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Density2":
        m = np.asarray(m, dtype=np.complex128)
        _check_density(m, 2, "Density2")
        return cls(_freeze(m))

    @classmethod
    def _wrap(cls, m: np.ndarray) -> "Density2":
        """Wrap without validation; for outputs of operations that preserve it."""
        return cls(_freeze(m))

    @property
    def trace(self) -> float:
        return float(self.mat.trace().real)

    def validate(self) -> None:
        _check_density(self.mat, 2, "Density2")


@dataclass(frozen=True)
class Density4:
    """Density matrix of the pair A ⊗ B (A = Alice's qubit, B = Bob's)."""

    mat: Matrix

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Density4":
        m = np.asarray(m, dtype=np.complex128)
        _check_density(m, 4, "Density4")
        return cls(_freeze(m))

    @classmethod
    def _wrap(cls, m: np.ndarray) -> "Density4":
        return cls(_freeze(m))

    @property
    def trace(self) -> float:
        return float(self.mat.trace().real)

    def validate(self) -> None:
        _check_density(self.mat, 4, "Density4")

    def partial_trace_b(self) -> Density2:
        """Alice's reduced state (trace out B)."""
        return Density2._wrap(np.einsum("ibjb->ij", self.mat.reshape(2, 2, 2, 2)))

    def partial_trace_a(self) -> Density2:
        """Bob's reduced state (trace out A)."""
        return Density2._wrap(np.einsum("aiaj->ij", self.mat.reshape(2, 2, 2, 2)))


@dataclass(frozen=True)
class ChannelOp:
    """One round of adversarial channel action on system B.

    ``deliver_kraus`` are the Kraus operators of the branch that hands a qubit
    to Bob; ``lose_kraus`` of the branch where the round is lost before his
    detector.  Jointly they must be trace preserving.  Either list may be
    empty (always-deliver / always-lose channels) but not both.
    """

    deliver_kraus: tuple[Matrix, ...]
    lose_kraus: tuple[Matrix, ...]

    def __post_init__(self) -> None:
        deliver = tuple(_freeze(k) for k in self.deliver_kraus)
        lose = tuple(_freeze(k) for k in self.lose_kraus)
        object.__setattr__(self, "deliver_kraus", deliver)
        object.__setattr__(self, "lose_kraus", lose)
        if not deliver and not lose:
            raise DomainError("ChannelOp: both Kraus lists are empty")
        acc = np.zeros((2, 2), dtype=np.complex128)
        for k in deliver + lose:
            if k.shape != (2, 2):
                raise DomainError(f"ChannelOp: Kraus operator of shape {k.shape}")
            acc += k.conj().T @ k
        defect = np.abs(acc - _I2).max()
        if defect > COMPLETENESS_ATOL:
            raise DomainError(
                f"ChannelOp: sum K^dag K deviates from identity by {defect:.3e}"
            )

    @cached_property
    def deliver_kraus_4(self) -> tuple[Matrix, ...]:
        """Kraus operators lifted to the pair, acting as identity on A."""
        return tuple(_freeze(np.kron(_I2, k)) for k in self.deliver_kraus)

    @cached_property
    def lose_kraus_4(self) -> tuple[Matrix, ...]:
        return tuple(_freeze(np.kron(_I2, k)) for k in self.lose_kraus)


def _psd_sqrt(m: Matrix) -> Matrix:
    """Principal square root of a PSD matrix.

    Exactly diagonal input takes an element-wise path so that e.g. the ideal
    filter (m_fail = 0) yields the identity with zero rounding dust.
    """
    off = m - np.diag(np.diag(m))
    if not off.any():
        return np.diag(np.sqrt(np.clip(np.diag(m).real, 0.0, None))).astype(
            np.complex128
        )
    w, u = np.linalg.eigh(m)
    w = np.clip(w, 0.0, None)
    return (u * np.sqrt(w)) @ u.conj().T


def _psd_pinv_sqrt(m: Matrix) -> Matrix:
    """Pseudo-inverse square root (zero eigenvalues stay zero)."""
    off = m - np.diag(np.diag(m))
    if not off.any():
        d = np.diag(m).real
        inv = np.where(d > _SUPPORT_EIG_CUTOFF, 1.0 / np.sqrt(np.clip(d, 1e-300, None)), 0.0)
        return np.diag(inv).astype(np.complex128)
    w, u = np.linalg.eigh(m)
    inv = np.where(w > _SUPPORT_EIG_CUTOFF, 1.0 / np.sqrt(np.clip(w, 1e-300, None)), 0.0)
    return (u * inv) @ u.conj().T


@dataclass(frozen=True)
class BobPOVM:
    """Bob's detector: per-basis bit elements plus one shared failure element.

    Completeness must hold through the *same* ``m_fail`` in both bases::

        m0z + m1z + m_fail = I = m0x + m1x + m_fail

    so Pr[detection] = Tr((I - m_fail) rho) regardless of the basis Bob will
    announce — the announcements cannot leak the basis through detection
    statistics.
    """

    m0z: Matrix
    m1z: Matrix
    m0x: Matrix
    m1x: Matrix
    m_fail: Matrix

    def __post_init__(self) -> None:
        for name in ("m0z", "m1z", "m0x", "m1x", "m_fail"):
            m = np.asarray(getattr(self, name), dtype=np.complex128)
            if m.shape != (2, 2):
                raise DomainError(f"BobPOVM.{name}: expected 2x2, got {m.shape}")
            if np.abs(m - m.conj().T).max() > HERMITIAN_ATOL:
                raise DomainError(f"BobPOVM.{name}: not Hermitian")
            if np.linalg.eigvalsh(m).min() < -PSD_EIG_ATOL:
                raise DomainError(f"BobPOVM.{name}: not positive semidefinite")
            object.__setattr__(self, name, _freeze(m))
        for basis, lo, hi in ((Basis.Z, self.m0z, self.m1z), (Basis.X, self.m0x, self.m1x)):
            defect = np.abs(lo + hi + self.m_fail - _I2).max()
            if defect > COMPLETENESS_ATOL:
                raise DomainError(
                    f"BobPOVM: {basis.name}-basis completeness violated by {defect:.3e}"
                )

    def element(self, bit: int, basis: Basis) -> Matrix:
        if basis is Basis.Z:
            return self.m0z if bit == 0 else self.m1z
        return self.m0x if bit == 0 else self.m1x

    @cached_property
    def detect_total(self) -> Matrix:
        """I - m_fail, the total detection effect."""
        return _freeze(_I2 - self.m_fail)

    @cached_property
    def kraus_detect(self) -> Matrix:
        """Kraus operator of the detection branch of the filter, sqrt(I - m_fail)."""
        return _freeze(_psd_sqrt(self.detect_total))

    @cached_property
    def kraus_fail(self) -> Matrix:
        return _freeze(_psd_sqrt(np.asarray(self.m_fail)))

    @cached_property
    def conditional_elements(self) -> dict[tuple[int, Basis], Matrix]:
        """Bit-valued POVM conditioned on detection.

        W M_{b,basis} W with W = (I - m_fail)^{-1/2} (pseudo-inverse on the
        detected support); for each basis the two elements sum to the identity
        on that support, so applying them to a post-filter state reproduces
        Tr(M_{b,basis} rho) / Tr((I - m_fail) rho).
        """
        w = _psd_pinv_sqrt(self.detect_total)
        out: dict[tuple[int, Basis], Matrix] = {}
        for basis in Basis:
            for bit in (0, 1):
                out[(bit, basis)] = _freeze(w @ self.element(bit, basis) @ w)
        return out

    @cached_property
    def pi_err_x(self) -> Matrix:
        """Pair effect flagging anticorrelated X outcomes on a detected pair.

        kron(P0x, M'_{x,1}) + kron(P1x, M'_{x,0}) with the conditional (post-
        detection) elements M' on Bob's side.
        """
        cond = self.conditional_elements
        return _freeze(
            np.kron(PROJECTOR[(0, Basis.X)], cond[(1, Basis.X)])
            + np.kron(PROJECTOR[(1, Basis.X)], cond[(0, Basis.X)])
        )

    @cached_property
    def _pair_effects(self) -> dict[tuple[Basis, Basis], np.ndarray]:
        """(basis_a, basis_b) -> (2, 2, 4, 4) array of pair effects, lazily filled."""
        return {}

    def pair_effects(self, basis_a: Basis, basis_b: Basis) -> np.ndarray:
        cache = self._pair_effects
        key = (basis_a, basis_b)
        if key not in cache:
            cond = self.conditional_elements
            block = np.empty((2, 2, 4, 4), dtype=np.complex128)
            for a in (0, 1):
                for b in (0, 1):
                    block[a, b] = np.kron(PROJECTOR[(a, basis_a)], cond[(b, basis_b)])
            block.setflags(write=False)
            cache[key] = block
        return cache[key]


def detection_povm(eta_det: float = 1.0) -> BobPOVM:
    """POVM of a detector with efficiency ``eta_det``.

    m_fail = (1 - eta_det) * I and each bit element is eta_det times the basis
    projector; the failure element is proportional to the identity, hence
    detection is basis-independent by construction.
    """
    if not 0.0 < eta_det <= 1.0:
        raise DomainError(f"detection efficiency must be in (0, 1], got {eta_det}")
    return BobPOVM(
        m0z=eta_det * PROJECTOR[(0, Basis.Z)],
        m1z=eta_det * PROJECTOR[(1, Basis.Z)],
        m0x=eta_det * PROJECTOR[(0, Basis.X)],
        m1x=eta_det * PROJECTOR[(1, Basis.X)],
        m_fail=(1.0 - eta_det) * _I2,
    )


_IDEAL_POVM = detection_povm(1.0)


def ideal_povm() -> BobPOVM:
    """Unit-efficiency POVM (m_fail = 0); shared module-level instance."""
    return _IDEAL_POVM


_SOURCE_STATES = {
    (bit, basis): Density2._wrap(PROJECTOR[(bit, basis)])
    for bit in (0, 1)
    for basis in Basis
}

_BELL = np.zeros((4, 4), dtype=np.complex128)
_BELL[0, 0] = _BELL[0, 3] = _BELL[3, 0] = _BELL[3, 3] = 0.5
_BELL_PAIR = Density4._wrap(_BELL)


def source_state(bit: int, basis: Basis) -> Density2:
    """State of the encoded single photon for a given bit and basis."""
    if bit not in (0, 1):
        raise DomainError(f"bit must be 0 or 1, got {bit!r}")
    return _SOURCE_STATES[(bit, basis)]


def bell_pair() -> Density4:
    """Maximally entangled pair (|00> + |11>)/sqrt(2) as a density matrix."""
    return _BELL_PAIR


class BranchSplit(NamedTuple):
    """Deterministic decomposition of a two-branch stochastic map."""

    p_first: float
    rho_first: Density4 | None
    p_second: float
    rho_second: Density4 | None


def channel_branches(rho: Density4, ch: ChannelOp) -> BranchSplit:
    """Split ``rho`` into the channel's deliver and lose branches.

    Returns unconditional branch probabilities and the *normalized* branch
    states.  The lost branch replaces Bob's system with :data:`JUNK_B` (the
    retained A side is the renormalized partial trace); a branch of
    probability below :data:`BRANCH_EPS` gets state ``None``.
    """
    m = rho.mat
    p_del, rho_del = _branch_apply(m, ch.deliver_kraus_4)
    p_lose, raw_lose = _branch_apply(m, ch.lose_kraus_4)
    out_del = Density4._wrap(rho_del / p_del) if p_del >= BRANCH_EPS else None
    out_lose = None
    if p_lose >= BRANCH_EPS:
        a_side = np.einsum("ibjb->ij", (raw_lose / p_lose).reshape(2, 2, 2, 2))
        out_lose = Density4._wrap(np.kron(a_side, JUNK_B))
    return BranchSplit(p_del, out_del, p_lose, out_lose)


def _branch_apply(m: Matrix, kraus: tuple[Matrix, ...]) -> tuple[float, Matrix]:
    if not kraus:
        return 0.0, np.zeros_like(m)
    acc = kraus[0] @ m @ kraus[0].conj().T
    for k in kraus[1:]:
        acc += k @ m @ k.conj().T
    return float(acc.trace().real), acc


def apply_channel_b(
    rho: Density4, ch: ChannelOp, rng: RandomStream
) -> tuple[bool, Density4]:
    """Sample one channel use on the B side of the pair.

    Returns ``(delivered, post_state)`` with the post state renormalized for
    the sampled branch.  Branches below :data:`BRANCH_EPS` are never sampled;
    if both are that small the input state is numerically dead and
    :class:`DegenerateState` is raised.
    """
    split = channel_branches(rho, ch)
    return _sample_branch(split, rng, "channel")


def filter_branches(rho: Density4, povm: BobPOVM) -> BranchSplit:
    """Detection filter {sqrt(I - m_fail), sqrt(m_fail)} applied on side B."""
    m = rho.mat
    kd = np.kron(_I2, povm.kraus_detect)
    kf = np.kron(_I2, povm.kraus_fail)
    det_raw = kd @ m @ kd.conj().T
    fail_raw = kf @ m @ kf.conj().T
    p_det = float(det_raw.trace().real)
    p_fail = float(fail_raw.trace().real)
    rho_det = Density4._wrap(det_raw / p_det) if p_det >= BRANCH_EPS else None
    rho_fail = Density4._wrap(fail_raw / p_fail) if p_fail >= BRANCH_EPS else None
    return BranchSplit(p_det, rho_det, p_fail, rho_fail)


def filter_detect(
    rho: Density4, povm: BobPOVM, rng: RandomStream
) -> tuple[bool, Density4]:
    """Sample the detection filter; True means the round counts as detected."""
    split = filter_branches(rho, povm)
    return _sample_branch(split, rng, "filter")


def _sample_branch(
    split: BranchSplit, rng: RandomStream, what: str
) -> tuple[bool, Density4]:
    p1 = split.p_first if split.rho_first is not None else 0.0
    p2 = split.p_second if split.rho_second is not None else 0.0
    total = p1 + p2
    if total < BRANCH_EPS:
        raise DegenerateState(f"{what}: all branch probabilities below {BRANCH_EPS}")
    if split.rho_second is None or rng.random() * total < p1:
        return True, split.rho_first  # type: ignore[return-value]
    return False, split.rho_second


def pair_outcome_probs(
    rho: Density4, basis_a: Basis, basis_b: Basis, povm: BobPOVM
) -> np.ndarray:
    """Joint Born probabilities of (bit_a, bit_b) on a detected pair.

    Alice measures with projectors of ``basis_a``; Bob with the POVM's
    conditional (post-detection) elements of ``basis_b``.  Shape (2, 2).
    """
    effects = povm.pair_effects(basis_a, basis_b)
    m = rho.mat
    probs = np.einsum("abij,ji->ab", effects, m).real
    return probs


def measure_pair(
    rho: Density4,
    basis_a: Basis,
    basis_b: Basis,
    povm: BobPOVM,
    rng: RandomStream,
) -> tuple[int, int]:
    """Sample the joint readout of a detected pair.

    Raises :class:`NormalizationError` if the four outcome probabilities do
    not sum to one within 1e-8 (e.g. a sub-normalized state was passed in).
    Probabilities in [-1e-10, 0) are rounding dust and clipped to zero.
    """
    probs = pair_outcome_probs(rho, basis_a, basis_b, povm)
    total = float(probs.sum())
    if abs(total - 1.0) > NORMALIZATION_ATOL:
        raise NormalizationError(
            f"pair outcome probabilities sum to {total!r}, expected 1"
        )
    if probs.min() < -PSD_EIG_ATOL:
        raise NormalizationError(f"negative outcome probability {probs.min():.3e}")
    r = rng.random() * total
    acc = 0.0
    for a in (0, 1):
        for b in (0, 1):
            acc += max(probs[a, b], 0.0)
            if r < acc:
                return a, b
    return 1, 1


def prob_phase_error(rho: Density4, povm: BobPOVM) -> float:
    """Probability that X measurements on the detected pair anticorrelate.

    The input must be a normalized conditional (post-detection) state.  The
    value is Tr(rho @ pi_err_x), clipped of rounding dust into [0, 1].
    """
    tr = rho.trace
    if abs(tr - 1.0) > NORMALIZATION_ATOL:
        raise NormalizationError(f"state trace {tr!r}, expected 1")
    val = _tr_product(rho.mat, povm.pi_err_x)
    if val < 0.0:
        if val < -NORMALIZATION_ATOL:
            raise NormalizationError(f"phase-error weight {val!r} below 0")
        return 0.0
    return min(val, 1.0)


# ---------------------------------------------------------------------------
# Single-qubit helpers used by the prepare-and-measure protocol path.  The
# entanglement-based path above runs on 4x4 pair states; the directly
# simulated protocol sends a 2x2 source state through the same ChannelOp.


def qubit_channel_branches(
    rho: Density2, ch: ChannelOp
) -> tuple[float, Density2 | None, float]:
    """(p_deliver, normalized delivered state, p_lose) for a qubit input.

    The lost branch's state is irrelevant on this path — Bob never measures a
    lost round — so only its probability is reported.
    """
    m = rho.mat
    p_del, raw = _branch_apply(m, ch.deliver_kraus)
    p_lose = 0.0
    for k in ch.lose_kraus:
        p_lose += _tr_product(k.conj().T @ k, m)
    out = Density2._wrap(raw / p_del) if p_del >= BRANCH_EPS else None
    return p_del, out, p_lose


def qubit_outcome_probs(
    rho: Density2, basis: Basis, povm: BobPOVM
) -> tuple[float, float, float]:
    """(p_bit0, p_bit1, p_fail) of Bob's three-outcome measurement."""
    m = rho.mat
    return (
        _tr_product(povm.element(0, basis), m),
        _tr_product(povm.element(1, basis), m),
        _tr_product(np.asarray(povm.m_fail), m),
    )
