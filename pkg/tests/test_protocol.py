"""Session loops: termination, announcements, law agreement, distillation."""

import math
import random

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from qkd_sift.adversary import (
    AdaptiveBasisTracker,
    Depolarizing,
    EveStrategy,
    IdentityLossy,
    InterceptResend,
    dephasing_channel,
    depolarizing_channel,
    identity_lossy_channel,
    make_strategy,
)
from qkd_sift.errors import (
    AbortKeyTooShort,
    AbortNoTestData,
    MaxRoundsExceeded,
    ValidationError,
)
from qkd_sift.protocol import (
    CountDetected,
    CountPerBasis,
    ProtocolParams,
    SiftedData,
    _RoundKernel,
    bits_to_hex,
    derive_stream,
    final_keys_to_json,
    hex_to_bits,
    postprocess,
    run_actual,
    run_estimation,
    run_insecure_termination,
    run_virtual,
    sifted_to_json,
    transcript_to_json,
)
from qkd_sift.quantum_core import (
    Basis,
    ChannelOp,
    bell_pair,
    detection_povm,
    ideal_povm,
)

IDENTITY = make_strategy(IdentityLossy(0.0))

_PAULI_Z = np.diag([1.0, -1.0]).astype(complex)


def _params(n=32, p_z=0.5, **kw):
    defaults = dict(
        p_z_a=p_z, p_x_a=1.0 - p_z, p_z_b=p_z, p_x_b=1.0 - p_z,
        n_det_ter=n, eps_s=1e-9, eps_c=1e-12, delta=0.05,
    )
    defaults.update(kw)
    return ProtocolParams(**defaults)


# -- parameter validation -----------------------------------------------------


def test_params_reject_bad_basis_probabilities():
    with pytest.raises(ValidationError, match="basis probabilities"):
        _params(p_z_a=0.5, p_x_a=0.4)
    with pytest.raises(ValidationError, match="basis probabilities"):
        _params(p_z_b=0.7, p_x_b=0.7)


def test_params_reject_out_of_range_fields():
    with pytest.raises(ValidationError):
        _params(n=0)
    with pytest.raises(ValidationError):
        _params(eps_s=0.0)
    with pytest.raises(ValidationError):
        _params(eps_c=1.0)
    with pytest.raises(ValidationError):
        _params(delta=-0.01)
    with pytest.raises(ValidationError):
        _params(f_ec=0.99)
    with pytest.raises(ValidationError):
        _params(batch_size=0)


def test_max_rounds_default_and_floor():
    assert _params(n=7).max_rounds == 7000
    with pytest.raises(ValidationError, match="max_rounds"):
        _params(n=10, max_rounds=9)
    assert _params(n=10, max_rounds=10).max_rounds == 10


def test_q_z_q_x_products():
    p = _params(p_z=0.8)
    assert p.q_z == pytest.approx(0.64, abs=1e-15)
    assert p.q_x == pytest.approx(0.04, abs=1e-15)


# -- trial streams ------------------------------------------------------------


def test_derive_stream_is_reproducible_and_distinct():
    a1 = [derive_stream(12345, 7).random() for _ in range(4)]
    a2 = [derive_stream(12345, 7).random() for _ in range(4)]
    b = [derive_stream(12345, 8).random() for _ in range(4)]
    c = [derive_stream(12346, 7).random() for _ in range(4)]
    assert a1 == a2
    assert a1 != b
    assert a1 != c


def test_derive_stream_validation():
    with pytest.raises(ValidationError):
        derive_stream(-1, 0)
    with pytest.raises(ValidationError):
        derive_stream(2**64, 0)
    with pytest.raises(ValidationError):
        derive_stream(0, -1)


# -- termination and announcement structure -----------------------------------


def _mismatch_count(transcript):
    return sum(
        1
        for r in transcript.rounds
        if r.detected and r.basis_a is not r.basis_b
    )


@pytest.mark.parametrize(
    "cfg",
    [IdentityLossy(0.3), Depolarizing(0.2), InterceptResend("random")],
)
def test_detected_count_is_exact(cfg):
    params = _params(n=40)
    strat = make_strategy(cfg)
    for seed in range(5):
        transcript, sifted = run_actual(params, strat, derive_stream(3, seed))
        assert transcript.n_detected == 40
        assert sifted.n_z + sifted.n_x + _mismatch_count(transcript) == 40


def test_round_records_are_contiguous_and_well_formed():
    transcript, _ = run_actual(
        _params(n=25), make_strategy(IdentityLossy(0.5)), derive_stream(4, 0)
    )
    for i, rec in enumerate(transcript.rounds):
        assert rec.index == i + 1
        # announced basis of A present exactly when the round is detected
        assert (rec.basis_a is not None) == rec.detected
    # with sequential rounds the loop stops on a detection
    assert transcript.rounds[-1].detected


def test_batched_sessions_keep_the_count_exact():
    # a lossless channel detects every round, so a batch of 7 overflows the
    # target mid-flight; the overflow must be announced as non-detected
    params = _params(n=20, batch_size=7)
    transcript, sifted = run_actual(params, IDENTITY, derive_stream(5, 1))
    assert transcript.n_detected == 20
    assert len(transcript.rounds) == 21  # 3 full batches
    assert not transcript.rounds[-1].detected
    assert sifted.n_z + sifted.n_x + _mismatch_count(transcript) == 20


def test_no_termination_raises():
    params = _params(n=5, max_rounds=50)
    with pytest.raises(MaxRoundsExceeded):
        run_actual(params, make_strategy(IdentityLossy(1.0)), derive_stream(6, 0))


def test_virtual_counts_match_the_same_invariants():
    params = _params(n=30)
    for seed in range(3):
        transcript, sifted, retained = run_virtual(
            params, make_strategy(Depolarizing(0.1, p_loss=0.2)), derive_stream(7, seed)
        )
        assert transcript.n_detected == 30
        assert sifted.n_z + sifted.n_x + _mismatch_count(transcript) == 30
        assert len(retained) == sifted.n_z
        for i, rec in enumerate(transcript.rounds):
            assert rec.index == i + 1
            assert (rec.basis_a is not None) == rec.detected


def test_virtual_identity_retains_exact_bell_pairs():
    _, sifted, retained = run_virtual(_params(n=16), IDENTITY, derive_stream(8, 0))
    assert len(retained) == sifted.n_z > 0
    for rho in retained:
        assert np.array_equal(rho.mat, bell_pair().mat)


def test_detection_is_basis_independent_under_eta():
    # detection probability must not depend on the announced bases: with
    # eta = 0.8 the per-basis detect totals are the same matrix exactly
    povm = detection_povm(0.8)
    assert np.array_equal(povm.m0z + povm.m1z, povm.m0x + povm.m1x)
    transcript, _ = run_actual(
        _params(n=50), IDENTITY, derive_stream(9, 0), povm=povm
    )
    assert transcript.n_detected == 50


# -- strategy interface: strictly causal --------------------------------------


def test_strategies_see_only_completed_rounds():
    seen = []
    op = identity_lossy_channel(0.4)

    def spy(prefix, rng):
        seen.append(len(prefix.rounds))
        # every record handed to the strategy is a finished announcement
        assert all(r.index <= len(prefix.rounds) for r in prefix.rounds)
        return op

    params = _params(n=12)
    transcript, _ = run_actual(
        params, EveStrategy("spy", spy), derive_stream(10, 0)
    )
    assert seen == list(range(len(transcript.rounds)))


def test_basis_choices_are_independent_of_the_prefix():
    # chi-square of consecutive announced-basis pairs on a long identity run
    transcript, _ = run_actual(_params(n=4000), IDENTITY, derive_stream(11, 0))
    bases = [0 if r.basis_b is Basis.Z else 1 for r in transcript.rounds]
    table = np.zeros((2, 2))
    for prev, cur in zip(bases, bases[1:]):
        table[prev, cur] += 1
    _, p_value, _, _ = scipy.stats.chi2_contingency(table)
    assert p_value > 1e-3


# -- per-basis quota rule ------------------------------------------------------


def test_count_per_basis_validation():
    with pytest.raises(ValidationError):
        CountPerBasis(0, 1)
    with pytest.raises(ValidationError):
        CountDetected(0)


def test_insecure_entry_point_requires_per_basis_rule():
    with pytest.raises(ValidationError):
        run_insecure_termination(
            _params(n=8), CountDetected(8), IDENTITY, derive_stream(12, 0)
        )


def test_per_basis_quotas_fill_exactly():
    params = _params(n=8)
    rule = CountPerBasis(5, 3)
    for seed in range(10):
        transcript, sifted = run_insecure_termination(
            params, rule, IDENTITY, derive_stream(13, seed)
        )
        assert sifted.n_z >= 5 and sifted.n_x >= 3
        # the stopping round fills the last open quota, so exactly one of the
        # two quotas is at its requirement
        assert sifted.n_z == 5 or sifted.n_x == 3


def test_stopping_round_never_feeds_a_closed_quota():
    """The skew being measured: the last round's pattern is constrained.

    If the Z quota was already met before the final round while X was open,
    the session can only have stopped on an X-agreed detection, so the last
    detected round is never (Z, Z).
    """
    params = _params(n=8)
    rule = CountPerBasis(2, 1)
    hits = 0
    for seed in range(300):
        transcript, sifted = run_insecure_termination(
            params, rule, IDENTITY, derive_stream(14, seed)
        )
        n_z_before = n_x_before = 0
        last = transcript.rounds[-1]
        for rec in transcript.rounds[:-1]:
            if rec.detected and rec.basis_a is rec.basis_b:
                if rec.basis_a is Basis.Z:
                    n_z_before += 1
                else:
                    n_x_before += 1
        if n_z_before >= 2 and n_x_before < 1:
            hits += 1
            assert last.detected
            assert (last.basis_a, last.basis_b) != (Basis.Z, Basis.Z)
    assert hits > 30  # the conditioning event actually occurs


# -- round-law agreement: three independent derivations ------------------------


_OPS = {
    "identity_lossy_0.3": identity_lossy_channel(0.3),
    "depolarizing_0.2": depolarizing_channel(0.2),
    "dephasing_z": dephasing_channel(Basis.Z),
}


@pytest.mark.parametrize("eta", [1.0, 0.8])
@pytest.mark.parametrize("op_name", sorted(_OPS))
def test_prepared_and_entangled_oracles_agree(op_name, eta):
    op = _OPS[op_name]
    kraus = [np.asarray(k) for k in op.deliver_kraus]
    qubit = oracles.qubit_round_law(kraus, 0.6, 0.4, eta)
    pair = oracles.entangled_round_law(kraus, 0.6, 0.4, eta)
    for key, p in qubit.items():
        if key[2] is None or key[3] == "fail":
            continue
        assert pair[key] == pytest.approx(p, abs=1e-12), key
    lost_qubit = sum(p for k, p in qubit.items() if k[2] is None)
    assert pair["lost"] == pytest.approx(lost_qubit, abs=1e-12)
    fail_qubit = sum(p for k, p in qubit.items() if k[3] == "fail")
    assert pair["fail"] == pytest.approx(fail_qubit, abs=1e-12)


@pytest.mark.parametrize("eta", [1.0, 0.8])
@pytest.mark.parametrize("op_name", sorted(_OPS))
def test_session_kernel_matches_the_oracle_laws(op_name, eta):
    op = _OPS[op_name]
    kraus = [np.asarray(k) for k in op.deliver_kraus]
    povm = ideal_povm() if eta == 1.0 else detection_povm(eta)
    kernel = _RoundKernel(povm)

    # prepared-qubit side
    law = kernel.actual(op)
    oracle = oracles.qubit_round_law(kraus, 0.6, 0.4, eta)
    for bit in (0, 1):
        for ai, basis_a in enumerate(("Z", "X")):
            prep = (0.6 if basis_a == "Z" else 0.4) * 0.5
            p_lost = oracle[(basis_a, bit, None, None)] / prep
            assert law.p_deliver[bit][ai] == pytest.approx(1.0 - p_lost, abs=1e-12)
            if law.p_deliver[bit][ai] == 0.0:
                continue
            for bi, basis_b in enumerate(("Z", "X")):
                p_b = 0.4 if basis_b == "Z" else 0.6
                scale = prep * p_b * law.p_deliver[bit][ai]
                p0 = oracle[(basis_a, bit, basis_b, 0)] / scale
                p1 = oracle[(basis_a, bit, basis_b, 1)] / scale
                c0, c1 = law.outcome_cum[bit][ai][bi]
                assert c0 == pytest.approx(p0, abs=1e-12)
                assert c1 == pytest.approx(p0 + p1, abs=1e-12)

    # entangled side
    vlaw = kernel.virtual(op)
    pair = oracles.entangled_round_law(kraus, 0.6, 0.4, eta)
    assert vlaw.p_deliver == pytest.approx(1.0 - pair["lost"], abs=1e-12)
    p_detect_mass = vlaw.p_deliver * vlaw.p_detect
    assert pair["fail"] == pytest.approx(
        vlaw.p_deliver - p_detect_mass, abs=1e-12
    )
    for basis, cum in (("Z", vlaw.zz_cum), ("X", vlaw.xx_cum)):
        p_a = 0.6 if basis == "Z" else 0.4
        p_b = 0.4 if basis == "Z" else 0.6
        scale = p_a * p_b * p_detect_mass
        joint = {
            (a, o): pair[(basis, a, basis, o)] / scale
            for a in (0, 1)
            for o in (0, 1)
        }
        assert cum[0] == pytest.approx(joint[(0, 0)], abs=1e-12)
        assert cum[1] == pytest.approx(joint[(0, 0)] + joint[(0, 1)], abs=1e-12)
        assert cum[2] == pytest.approx(
            joint[(0, 0)] + joint[(0, 1)] + joint[(1, 0)], abs=1e-12
        )
    # the phase-error weight is the X-anticorrelation of the same law
    xx = {
        (a, o): pair[("X", a, "X", o)]
        for a in (0, 1)
        for o in (0, 1)
    }
    t_oracle = (xx[(0, 1)] + xx[(1, 0)]) / (0.4 * 0.6 * p_detect_mass)
    assert vlaw.t_phase == pytest.approx(t_oracle, abs=1e-12)


# -- estimation sessions -------------------------------------------------------


def test_estimation_identity_has_zero_weight_everywhere():
    run = run_estimation(_params(n=64), IDENTITY, derive_stream(15, 0))
    assert run.lambda_ph == 0
    assert run.lambda_xerr == 0
    assert all(pr.p_ph == 0.0 and pr.p_xerr == 0.0 for pr in run.per_round)
    # identity keeps the pair perfectly X-correlated
    assert all(pr.x_outcomes[0] == pr.x_outcomes[1] for pr in run.per_round)
    assert np.array_equal(run.s_az_vir, run.s_bz_vir)


def test_estimation_phase_flip_channel_saturates_the_weight():
    # the deliver Kraus {Z} maps phi+ to phi-, whose X readouts always
    # disagree: t = 1, so p_ph = q_z and p_xerr = q_x exactly, every round
    op = ChannelOp(deliver_kraus=(_PAULI_Z,), lose_kraus=())
    strat = EveStrategy("phase_flip", lambda prefix, rng: op)
    params = _params(n=64, p_z=0.7)
    run = run_estimation(params, strat, derive_stream(16, 0))
    assert len(run.per_round) == 64
    for pr in run.per_round:
        assert pr.p_ph == params.q_z
        assert pr.p_xerr == params.q_x
        assert pr.x_outcomes[0] != pr.x_outcomes[1]
    n_zz = sum(1 for pr in run.per_round if pr.bases == (Basis.Z, Basis.Z))
    n_xx = sum(1 for pr in run.per_round if pr.bases == (Basis.X, Basis.X))
    assert run.lambda_ph == n_zz
    assert run.lambda_xerr == n_xx


def test_estimation_counts_agree_with_per_round_records():
    run = run_estimation(
        _params(n=200), make_strategy(Depolarizing(0.3)), derive_stream(17, 0)
    )
    assert len(run.per_round) == 200
    ph = sum(
        1
        for pr in run.per_round
        if pr.bases == (Basis.Z, Basis.Z) and pr.x_outcomes[0] != pr.x_outcomes[1]
    )
    xe = sum(
        1
        for pr in run.per_round
        if pr.bases == (Basis.X, Basis.X) and pr.x_outcomes[0] != pr.x_outcomes[1]
    )
    assert (run.lambda_ph, run.lambda_xerr) == (ph, xe)
    n_zz = sum(1 for pr in run.per_round if pr.bases == (Basis.Z, Basis.Z))
    assert len(run.s_az_vir) == len(run.s_bz_vir) == n_zz


def test_estimation_respects_adaptive_strategies():
    run = run_estimation(
        _params(n=100),
        make_strategy(AdaptiveBasisTracker(window=4)),
        derive_stream(18, 0),
    )
    assert run.transcript.n_detected == 100
    # weights can vary by round but stay inside [0, q]
    q_z = _params().q_z
    for pr in run.per_round:
        assert 0.0 <= pr.p_ph <= q_z + 1e-15


# -- post-processing ------------------------------------------------------------


def _synthetic_sifted(n_z, n_x, wt=0):
    rng = np.random.default_rng(1)
    s_az = rng.integers(0, 2, n_z).astype(np.uint8)
    s_ax = rng.integers(0, 2, n_x).astype(np.uint8)
    s_bx = s_ax.copy()
    s_bx[:wt] ^= 1
    return SiftedData(
        s_az=s_az, s_bz=s_az.copy(), s_ax=s_ax, s_bx=s_bx, n_z=n_z, n_x=n_x
    )


def test_postprocess_distills_matching_keys_at_scale():
    params = ProtocolParams(
        p_z_a=0.5, p_x_a=0.5, p_z_b=0.5, p_x_b=0.5,
        n_det_ter=300_000, eps_s=1e-4, eps_c=1e-6, delta=0.012,
    )
    keys = postprocess(_synthetic_sifted(75_000, 75_000, wt=0), params, random.Random(19))
    assert not keys.aborted
    assert len(keys.f_az) > 30_000
    assert np.array_equal(keys.f_az, keys.f_bz)
    assert keys.meta["tag_a"] == keys.meta["tag_b"]
    assert keys.lambda_ec == 0
    assert keys.meta["consumed_preshared_bits"] == math.ceil(math.log2(2.0 / 1e-6))


def test_postprocess_aborts_when_too_short():
    params = ProtocolParams(
        p_z_a=0.5, p_x_a=0.5, p_z_b=0.5, p_x_b=0.5,
        n_det_ter=20_000, eps_s=1e-4, eps_c=1e-6, delta=0.05,
    )
    # the concentration allowance alone (2 * N * delta = 2000) swamps a
    # ten-bit Z string: e_ph clamps at 1/2 and the length floors to zero
    with pytest.raises(AbortKeyTooShort):
        postprocess(_synthetic_sifted(10, 10, wt=0), params, random.Random(20))


def test_postprocess_surfaces_an_exhausted_security_budget():
    from qkd_sift.errors import SecurityParameterError

    # eta = 2 exp(-32 * 0.05^2 / 2) ~ 1.9 can never sit under eps_s^2
    with pytest.raises(SecurityParameterError):
        postprocess(_synthetic_sifted(16, 16, wt=0), _params(n=32), random.Random(25))


def test_postprocess_aborts_with_heavy_test_errors():
    params = ProtocolParams(
        p_z_a=0.5, p_x_a=0.5, p_z_b=0.5, p_x_b=0.5,
        n_det_ter=300_000, eps_s=1e-4, eps_c=1e-6, delta=0.012,
    )
    # wt/n_x = 1/2 pushes the bound past the vacuous point
    with pytest.raises(AbortKeyTooShort):
        postprocess(_synthetic_sifted(75_000, 75_000, wt=37_500), params, random.Random(21))


def test_postprocess_propagates_missing_test_data():
    with pytest.raises(AbortNoTestData):
        postprocess(_synthetic_sifted(100, 0), _params(n=128), random.Random(22))


# -- serialization ---------------------------------------------------------------


@settings(max_examples=60)
@given(st.lists(st.integers(0, 1), max_size=70))
def test_bits_hex_round_trip(bits):
    arr = np.array(bits, dtype=np.uint8)
    assert np.array_equal(hex_to_bits(bits_to_hex(arr), len(arr)), arr)


def test_transcript_json_shape():
    transcript, sifted = run_actual(
        _params(n=6), make_strategy(IdentityLossy(0.4)), derive_stream(23, 0)
    )
    doc = transcript_to_json(transcript)
    assert doc["n_detected"] == 6
    assert doc["n_rounds"] == len(transcript.rounds)
    for row, rec in zip(doc["rounds"], transcript.rounds):
        assert row[0] == rec.index
        assert row[1] == int(rec.detected)
        assert row[2] in ("Z", "X")
        assert (row[3] is None) == (not rec.detected)

    sdoc = sifted_to_json(sifted)
    assert sdoc["n_z"] == sifted.n_z
    assert np.array_equal(
        hex_to_bits(sdoc["s_az_hex"], sifted.n_z), sifted.s_az
    )


def test_final_keys_json_shape():
    params = ProtocolParams(
        p_z_a=0.5, p_x_a=0.5, p_z_b=0.5, p_x_b=0.5,
        n_det_ter=300_000, eps_s=1e-4, eps_c=1e-6, delta=0.012,
    )
    keys = postprocess(_synthetic_sifted(75_000, 75_000), params, random.Random(24))
    doc = final_keys_to_json(keys)
    assert doc["key_length"] == len(keys.f_az)
    assert doc["aborted"] is False
    assert np.array_equal(
        hex_to_bits(doc["f_az_hex"], doc["key_length"]), keys.f_az
    )
    assert doc["meta"]["tag_a"] == doc["meta"]["tag_b"]
