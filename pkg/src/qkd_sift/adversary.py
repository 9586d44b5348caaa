"""Adversarial channel strategies.

A strategy is a label plus a behavior function ``(prefix, rng) -> ChannelOp``.
The prefix is the public transcript of *completed* rounds only, so a strategy
can be classically adaptive round by round but can never peek ahead; the
interface gives it nothing else to depend on.  Emitted channel operations are
validated as trace preserving when they are constructed.

Built-in strategies return module-lifetime ChannelOp instances instead of
building fresh ones per round.  That is not just thrift: the protocol engine
memoizes the Born/Kraus algebra per ChannelOp instance, which turns the
per-round cost into a few scalar samples.  Custom strategies are free to
ignore this and construct ops on the fly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Literal, Union

import numpy as np

from .errors import ConfigError
from .quantum_core import Basis, ChannelOp, RandomStream

if TYPE_CHECKING:  # pragma: no cover - typing only, avoids an import cycle
    from .protocol import Transcript

_PAULI_X = np.array([[0, 1], [1, 0]], dtype=np.complex128)
_PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
_PAULI_Z = np.array([[1, 0], [0, -1]], dtype=np.complex128)
_I2 = np.eye(2, dtype=np.complex128)


def identity_lossy_channel(p_loss: float) -> ChannelOp:
    """Deliver the qubit untouched with probability 1 - p_loss."""
    if p_loss >= 1.0:
        return ChannelOp(deliver_kraus=(), lose_kraus=(_I2,))
    if p_loss <= 0.0:
        return ChannelOp(deliver_kraus=(_I2,), lose_kraus=())
    return ChannelOp(
        deliver_kraus=(np.sqrt(1.0 - p_loss) * _I2,),
        lose_kraus=(np.sqrt(p_loss) * _I2,),
    )


def depolarizing_channel(p: float, p_loss: float = 0.0) -> ChannelOp:
    """With probability p replace the delivered qubit by I/2, then lose p_loss.

    Deliver branch Kraus: sqrt(1-p)·I plus sqrt(p/4)·{I, X, Y, Z}, scaled by
    sqrt(1 - p_loss).
    """
    scale = np.sqrt(1.0 - p_loss)
    deliver = [np.sqrt(1.0 - p) * _I2]
    if p > 0.0:
        deliver += [np.sqrt(p / 4.0) * m for m in (_I2, _PAULI_X, _PAULI_Y, _PAULI_Z)]
    deliver = tuple(scale * k for k in deliver)
    lose = (np.sqrt(p_loss) * _I2,) if p_loss > 0.0 else ()
    return ChannelOp(deliver_kraus=deliver, lose_kraus=lose)


def dephasing_channel(basis: Basis) -> ChannelOp:
    """Measure in ``basis`` and resend the outcome state (intercept-resend)."""
    from .quantum_core import PROJECTOR

    return ChannelOp(
        deliver_kraus=(PROJECTOR[(0, basis)], PROJECTOR[(1, basis)]),
        lose_kraus=(),
    )


# ---------------------------------------------------------------------------
# Strategy configurations


def _check_prob(value: float, name: str) -> None:
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"{name} must be a probability in [0, 1], got {value!r}")


@dataclass(frozen=True)
class IdentityLossy:
    """Pure loss, no disturbance."""

    p_loss: float = 0.0

    def __post_init__(self) -> None:
        _check_prob(self.p_loss, "p_loss")


@dataclass(frozen=True)
class Depolarizing:
    """Isotropic noise with optional loss."""

    p: float
    p_loss: float = 0.0

    def __post_init__(self) -> None:
        _check_prob(self.p, "p")
        _check_prob(self.p_loss, "p_loss")


@dataclass(frozen=True)
class InterceptResend:
    """Measure-and-resend in a fixed or per-round random basis.

    ``basis_policy`` is one of ``always_z``, ``always_x``, ``random``; with
    the random policy the Z basis is intercepted with probability ``q``.
    """

    basis_policy: Literal["always_z", "always_x", "random"] = "random"
    q: float = 0.5

    def __post_init__(self) -> None:
        if self.basis_policy not in ("always_z", "always_x", "random"):
            raise ConfigError(f"unknown basis_policy {self.basis_policy!r}")
        _check_prob(self.q, "q")


@dataclass(frozen=True)
class AdaptiveBasisTracker:
    """Intercept in whichever basis Bob has announced more often lately.

    Watches Bob's announced bases over the last ``window`` detected rounds of
    the public prefix.  With empirical Z frequency f, the attack fires with
    probability min(1, bias_gain * |2f - 1|) and dephases in the majority
    basis; otherwise the round passes untouched.  A balanced or empty history
    means no attack.
    """

    window: int = 16
    bias_gain: float = 1.0

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.bias_gain < 0.0:
            raise ConfigError(f"bias_gain must be >= 0, got {self.bias_gain}")


StrategyConfig = Union[IdentityLossy, Depolarizing, InterceptResend, AdaptiveBasisTracker]

Behavior = Callable[["Transcript", RandomStream], ChannelOp]


@dataclass(frozen=True)
class EveStrategy:
    """A labelled behavior function; the label keys reports and CSV rows."""

    label: str
    behavior: Behavior


def next_action(strategy: EveStrategy, prefix: "Transcript", rng: RandomStream) -> ChannelOp:
    """Ask the strategy for the channel op of the upcoming round."""
    return strategy.behavior(prefix, rng)


def make_strategy(cfg: StrategyConfig) -> EveStrategy:
    """Compile a configuration into an executable strategy."""
    if isinstance(cfg, IdentityLossy):
        op = identity_lossy_channel(cfg.p_loss)

        def behavior(prefix: "Transcript", rng: RandomStream) -> ChannelOp:
            return op

        return EveStrategy(label=f"identity_lossy(p_loss={cfg.p_loss:g})", behavior=behavior)

    if isinstance(cfg, Depolarizing):
        op = depolarizing_channel(cfg.p, cfg.p_loss)

        def behavior(prefix: "Transcript", rng: RandomStream) -> ChannelOp:
            return op

        return EveStrategy(
            label=f"depolarizing(p={cfg.p:g},p_loss={cfg.p_loss:g})", behavior=behavior
        )

    if isinstance(cfg, InterceptResend):
        dephase_z = dephasing_channel(Basis.Z)
        dephase_x = dephasing_channel(Basis.X)
        if cfg.basis_policy == "always_z":
            def behavior(prefix: "Transcript", rng: RandomStream) -> ChannelOp:
                return dephase_z
        elif cfg.basis_policy == "always_x":
            def behavior(prefix: "Transcript", rng: RandomStream) -> ChannelOp:
                return dephase_x
        else:
            q = cfg.q

            def behavior(prefix: "Transcript", rng: RandomStream) -> ChannelOp:
                return dephase_z if rng.random() < q else dephase_x

        return EveStrategy(
            label=f"intercept_resend({cfg.basis_policy},q={cfg.q:g})", behavior=behavior
        )

    if isinstance(cfg, AdaptiveBasisTracker):
        identity = identity_lossy_channel(0.0)
        dephase = {Basis.Z: dephasing_channel(Basis.Z), Basis.X: dephasing_channel(Basis.X)}
        window = cfg.window
        gain = cfg.bias_gain

        def behavior(prefix: "Transcript", rng: RandomStream) -> ChannelOp:
            # Recomputed from the prefix every round: the strategy interface
            # is stateless so concurrent sessions can share this closure.
            seen = 0
            n_z = 0
            for rec in reversed(prefix.rounds):
                if not rec.detected:
                    continue
                seen += 1
                if rec.basis_b is Basis.Z:
                    n_z += 1
                if seen == window:
                    break
            if seen == 0:
                return identity
            f_z = n_z / seen
            p_attack = gain * abs(2.0 * f_z - 1.0)
            if p_attack <= 0.0 or rng.random() >= min(p_attack, 1.0):
                return identity
            return dephase[Basis.Z if f_z > 0.5 else Basis.X]

        return EveStrategy(
            label=f"adaptive_basis_tracker(window={window},bias_gain={gain:g})",
            behavior=behavior,
        )

    raise ConfigError(f"unknown strategy configuration {cfg!r}")


# ---------------------------------------------------------------------------
# JSON mapping used by config files


_KIND_MAP = {
    "identity_lossy": IdentityLossy,
    "depolarizing": Depolarizing,
    "intercept_resend": InterceptResend,
    "adaptive_basis_tracker": AdaptiveBasisTracker,
}


def strategy_from_dict(d: dict) -> StrategyConfig:
    """Build a strategy config from its JSON form {"kind": ..., **fields}."""
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError(f"strategy must be an object with a 'kind' field, got {d!r}")
    kind = d["kind"]
    cls = _KIND_MAP.get(kind)
    if cls is None:
        raise ConfigError(
            f"unknown strategy kind {kind!r}; expected one of {sorted(_KIND_MAP)}"
        )
    fields = {k: v for k, v in d.items() if k != "kind"}
    try:
        return cls(**fields)
    except TypeError as exc:
        raise ConfigError(f"bad fields for strategy {kind!r}: {exc}") from exc


def strategy_to_dict(cfg: StrategyConfig) -> dict:
    """Inverse of :func:`strategy_from_dict`."""
    for kind, cls in _KIND_MAP.items():
        if isinstance(cfg, cls):
            out: dict = {"kind": kind}
            out.update(vars(cfg))
            return out
    raise ConfigError(f"unknown strategy configuration {cfg!r}")
