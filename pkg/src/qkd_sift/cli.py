"""Command-line front end: config files in, experiment artifacts out.

The JSON config schema lives in docs/config-schema.json and the CSV column
contracts in docs/output-formats.md; both are versioned through the
``qkd-sift/v1`` schema tag that every JSON artifact carries.  Reports never
embed timestamps or host details, so a (config, seed) pair maps to one exact
output byte sequence regardless of worker count.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from . import finite_key, stats
from .adversary import (
    Depolarizing,
    IdentityLossy,
    StrategyConfig,
    make_strategy,
    strategy_from_dict,
    strategy_to_dict,
)
from .errors import (
    ConfigError,
    IoError,
    ParseError,
    QkdSiftError,
    SecurityParameterError,
    ValidationError,
)
from .protocol import (
    Basis,
    CountDetected,
    CountPerBasis,
    ProtocolParams,
    TerminationRule,
    derive_stream,
    run_actual,
    run_estimation,
    run_virtual,
    sifted_to_json,
    transcript_to_json,
)
from .quantum_core import BobPOVM, detection_povm, ideal_povm

SCHEMA_TAG = "qkd-sift/v1"

MODES = ("actual", "virtual", "estimation", "coverage", "bias", "keyrate-sweep")
SWEEP_AXES = ("n_det_ter", "delta", "depolarizing_p", "q_ratio")

_PARAM_FIELDS = (
    "p_z_a",
    "p_x_a",
    "p_z_b",
    "p_x_b",
    "n_det_ter",
    "eps_s",
    "eps_c",
    "delta",
    "f_ec",
    "max_rounds",
    "batch_size",
)


@dataclass(frozen=True)
class SweepSpec:
    """One sweep axis and its grid."""

    axis: str
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.axis not in SWEEP_AXES:
            raise ValidationError(
                f"sweep axis must be one of {SWEEP_AXES}, got {self.axis!r}"
            )
        if not self.values:
            raise ValidationError("sweep values must be non-empty")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ValidationError("sweep values must be strictly increasing")


@dataclass(frozen=True)
class RunConfig:
    """Everything one invocation needs; frozen so runs can't drift from it."""

    params: ProtocolParams
    strategy: StrategyConfig
    mode: str
    trials: int = 1
    seed: int = 0
    output_path: str = "-"
    output_format: str = "json"
    eta_det: float = 1.0
    rule: TerminationRule | None = None
    sweep: SweepSpec | None = None
    bias_max_rounds: int = 6

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not isinstance(self.trials, int) or self.trials < 1:
            raise ValidationError(f"trials must be >= 1, got {self.trials!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ValidationError(f"seed must be a 64-bit unsigned, got {self.seed!r}")
        if self.output_format not in ("json", "csv"):
            raise ValidationError(
                f"output_format must be 'json' or 'csv', got {self.output_format!r}"
            )
        if not 0.0 < self.eta_det <= 1.0:
            raise ValidationError(f"eta_det must be in (0, 1], got {self.eta_det!r}")
        if not isinstance(self.bias_max_rounds, int) or self.bias_max_rounds < 1:
            raise ValidationError(
                f"bias_max_rounds must be a positive integer, got {self.bias_max_rounds!r}"
            )
        if self.mode == "bias" and self.rule is None:
            raise ValidationError("mode 'bias' requires a termination rule")
        if self.mode == "keyrate-sweep" and self.sweep is None:
            raise ValidationError("mode 'keyrate-sweep' requires a sweep spec")


# ---------------------------------------------------------------------------
# Config (de)serialization


def _require(doc: dict, key: str, where: str) -> Any:
    if key not in doc:
        raise ParseError(f"missing field {key!r} in {where}")
    return doc[key]


def rule_from_dict(d: dict) -> TerminationRule:
    if not isinstance(d, dict) or "kind" not in d:
        raise ParseError(f"rule must be an object with a 'kind' field, got {d!r}")
    kind = d["kind"]
    fields = {k: v for k, v in d.items() if k != "kind"}
    try:
        if kind == "count_detected":
            return CountDetected(**fields)
        if kind == "count_per_basis":
            return CountPerBasis(**fields)
    except TypeError as exc:
        raise ParseError(f"bad fields for rule {kind!r}: {exc}") from exc
    raise ParseError(
        f"unknown rule kind {kind!r}; expected 'count_detected' or 'count_per_basis'"
    )


def rule_to_dict(rule: TerminationRule) -> dict:
    if isinstance(rule, CountDetected):
        return {"kind": "count_detected", "n": rule.n}
    return {
        "kind": "count_per_basis",
        "n_z_req": rule.n_z_req,
        "n_x_req": rule.n_x_req,
    }


def config_from_dict(doc: dict) -> RunConfig:
    """Validate a parsed JSON document into a RunConfig."""
    if not isinstance(doc, dict):
        raise ParseError(f"config root must be an object, got {type(doc).__name__}")
    known = {
        "params",
        "strategy",
        "mode",
        "trials",
        "seed",
        "output_path",
        "output_format",
        "eta_det",
        "rule",
        "sweep",
        "bias_max_rounds",
    }
    for key in doc:
        if key not in known:
            raise ParseError(f"unknown field {key!r} in config")

    mode = _require(doc, "mode", "config")
    if mode not in MODES:
        raise ParseError(f"unknown mode {mode!r}; expected one of {MODES}")

    raw_params = _require(doc, "params", "config")
    if not isinstance(raw_params, dict):
        raise ParseError("field 'params' must be an object")
    for key in raw_params:
        if key not in _PARAM_FIELDS:
            raise ParseError(f"unknown field {key!r} in params")
    p = dict(raw_params)
    if "p_x_a" not in p and "p_z_a" in p:
        p["p_x_a"] = 1.0 - p["p_z_a"]
    if "p_x_b" not in p and "p_z_b" in p:
        p["p_x_b"] = 1.0 - p["p_z_b"]
    try:
        params = ProtocolParams(**p)
    except TypeError as exc:
        raise ParseError(f"params: {exc}") from exc

    try:
        strategy = strategy_from_dict(_require(doc, "strategy", "config"))
    except ConfigError as exc:
        raise ParseError(f"strategy: {exc}") from exc

    rule = rule_from_dict(doc["rule"]) if doc.get("rule") is not None else None

    sweep = None
    if doc.get("sweep") is not None:
        raw_sweep = doc["sweep"]
        if not isinstance(raw_sweep, dict):
            raise ParseError("field 'sweep' must be an object")
        axis = _require(raw_sweep, "axis", "sweep")
        values = _require(raw_sweep, "values", "sweep")
        if not isinstance(values, list):
            raise ParseError("sweep 'values' must be an array")
        sweep = SweepSpec(axis=axis, values=tuple(values))

    return RunConfig(
        params=params,
        strategy=strategy,
        mode=mode,
        trials=doc.get("trials", 1),
        seed=doc.get("seed", 0),
        output_path=doc.get("output_path", "-"),
        output_format=doc.get("output_format", "json"),
        eta_det=doc.get("eta_det", 1.0),
        rule=rule,
        sweep=sweep,
        bias_max_rounds=doc.get("bias_max_rounds", 6),
    )


def config_to_dict(cfg: RunConfig) -> dict:
    """Inverse of :func:`config_from_dict`; load(emit(cfg)) == cfg."""
    doc: dict[str, Any] = {
        "mode": cfg.mode,
        "params": {name: getattr(cfg.params, name) for name in _PARAM_FIELDS},
        "strategy": strategy_to_dict(cfg.strategy),
        "trials": cfg.trials,
        "seed": cfg.seed,
        "output_path": cfg.output_path,
        "output_format": cfg.output_format,
        "eta_det": cfg.eta_det,
        "bias_max_rounds": cfg.bias_max_rounds,
    }
    if cfg.rule is not None:
        doc["rule"] = rule_to_dict(cfg.rule)
    if cfg.sweep is not None:
        doc["sweep"] = {"axis": cfg.sweep.axis, "values": list(cfg.sweep.values)}
    return doc


def load_config(path: str) -> RunConfig:
    """Read and validate a JSON config file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read config {path!r}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    return config_from_dict(doc)


def emit_config(cfg: RunConfig, path: str) -> None:
    """Write a config back out in the schema load_config reads."""
    try:
        Path(path).write_text(
            json.dumps(config_to_dict(cfg), indent=2) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise IoError(f"cannot write config {path!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# Mode runners


def _worker_count() -> int:
    raw = os.environ.get("QKD_SIFT_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"QKD_SIFT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"QKD_SIFT_THREADS must be >= 1, got {n}")
    return n


def _povm_for(cfg: RunConfig) -> BobPOVM:
    return ideal_povm() if cfg.eta_det == 1.0 else detection_povm(cfg.eta_det)


def _map_trials(
    cfg: RunConfig, fn: Callable[[int], dict], workers: int
) -> list[dict]:
    """Evaluate fn over trial indices, in index order regardless of workers."""
    if workers > 1 and cfg.trials > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, range(cfg.trials)))
    return [fn(i) for i in range(cfg.trials)]


def _session_mode(cfg: RunConfig, workers: int) -> tuple[dict, list[str], list[list]]:
    povm = _povm_for(cfg)
    eve = make_strategy(cfg.strategy)
    runner = run_actual if cfg.mode == "actual" else run_virtual
    attach_detail = cfg.trials == 1

    def one(i: int) -> dict:
        out = runner(cfg.params, eve, derive_stream(cfg.seed, i), povm=povm)
        transcript, sifted = out[0], out[1]
        rec = {
            "trial": i,
            "n_rounds": len(transcript.rounds),
            "n_detected": transcript.n_detected,
            "n_z": sifted.n_z,
            "n_x": sifted.n_x,
            "x_error_weight": sifted.x_error_weight(),
        }
        if attach_detail:
            rec["transcript"] = transcript_to_json(transcript)
            rec["sifted"] = sifted_to_json(sifted)
        return rec

    records = _map_trials(cfg, one, workers)
    header = ["trial", "n_rounds", "n_detected", "n_z", "n_x", "x_error_weight"]
    rows = [[r[c] for c in header] for r in records]
    return {"per_trial": records}, header, rows


def _estimation_mode(
    cfg: RunConfig, workers: int
) -> tuple[dict, list[str], list[list]]:
    povm = _povm_for(cfg)
    eve = make_strategy(cfg.strategy)

    def one(i: int) -> dict:
        run = run_estimation(cfg.params, eve, derive_stream(cfg.seed, i), povm=povm)
        n_x = sum(
            1
            for r in run.per_round
            if r.bases[0] is Basis.X and r.bases[1] is Basis.X
        )
        return {
            "trial": i,
            "n_detected": len(run.per_round),
            "n_z": int(len(run.s_az_vir)),
            "n_x": int(n_x),
            "lambda_ph": run.lambda_ph,
            "lambda_xerr": run.lambda_xerr,
            "sum_p_ph": math.fsum(r.p_ph for r in run.per_round),
            "sum_p_xerr": math.fsum(r.p_xerr for r in run.per_round),
            "relation_residual": stats.relation_check(run),
        }

    records = _map_trials(cfg, one, workers)
    header = [
        "trial",
        "n_detected",
        "n_z",
        "n_x",
        "lambda_ph",
        "lambda_xerr",
        "sum_p_ph",
        "sum_p_xerr",
        "relation_residual",
    ]
    rows = [[r[c] for c in header] for r in records]
    return {"per_trial": records}, header, rows


def _coverage_mode(cfg: RunConfig, workers: int) -> tuple[dict, list[str], list[list]]:
    eve = make_strategy(cfg.strategy)
    trial_stats = stats.coverage_trials(
        cfg.params,
        eve,
        cfg.trials,
        derive_stream(cfg.seed, 0),
        workers=workers,
        povm=_povm_for(cfg),
    )
    report = stats.coverage_report(trial_stats, cfg.params.delta)
    eta_single = math.exp(-cfg.params.n_det_ter * cfg.params.delta**2 / 2.0)
    results = {
        "trials": report.trials,
        "violations_ph": report.violations_ph,
        "violations_xerr": report.violations_xerr,
        "eta_single": eta_single,
        "delta": report.delta,
        "violation_rate_ph": report.violations_ph / report.trials,
        "violation_rate_xerr": report.violations_xerr / report.trials,
    }
    header = ["trials", "violations_ph", "violations_xerr", "eta_single"]
    rows = [[results[c] for c in header]]
    return results, header, rows


def _bias_mode(cfg: RunConfig) -> tuple[dict, list[str], list[list]]:
    assert cfg.rule is not None
    report = stats.enumerate_bias(
        cfg.rule, (cfg.params.p_z_a, cfg.params.p_z_b), cfg.bias_max_rounds
    )
    results = {
        "rule": rule_to_dict(cfg.rule),
        "n_rounds_enumerated": report.n_rounds_enumerated,
        "tv_from_uniform": report.tv_from_uniform,
        "dependence_detected": report.dependence_detected,
        "terminating_mass": report.terminating_mass,
        "test_error_rate": report.test_error_rate,
        "code_error_rate": report.code_error_rate,
        "t_distribution": report.t_distribution,
    }
    header = ["sequence", "probability"]
    rows = [[seq, prob] for seq, prob in report.t_distribution.items()]
    return results, header, rows


def _sweep_error_rate(strategy: StrategyConfig) -> float:
    """X-basis error rate the sweep pipeline assumes for the channel."""
    if isinstance(strategy, Depolarizing):
        return strategy.p / 2.0
    if isinstance(strategy, IdentityLossy):
        return 0.0
    raise ValidationError(
        "keyrate-sweep requires an identity_lossy or depolarizing strategy"
    )


def keyrate_rows(cfg: RunConfig) -> list[dict]:
    """Evaluate the key-length pipeline on expected counts over the grid.

    Rows are analytic (no sampling): detected-round counts are replaced by
    their expectations, so the sweep isolates how the bound's terms trade off
    along the chosen axis.  Grid points whose tail bound exhausts the
    smoothing budget report l = 0.
    """
    assert cfg.sweep is not None
    base_error = _sweep_error_rate(cfg.strategy)
    axis = cfg.sweep.axis
    rows = []
    for value in cfg.sweep.values:
        n = cfg.params.n_det_ter
        q_z, q_x = cfg.params.q_z, cfg.params.q_x
        delta = cfg.params.delta
        err = base_error
        if axis == "delta":
            delta = float(value)
        elif axis == "n_det_ter":
            if value != int(value):
                raise ValidationError(
                    f"n_det_ter sweep values must be integers, got {value!r}"
                )
            n = int(value)
        elif axis == "depolarizing_p":
            if not 0.0 <= value <= 1.0:
                raise ValidationError(
                    f"depolarizing_p sweep values must be in [0, 1], got {value!r}"
                )
            err = float(value) / 2.0
        else:  # q_ratio = q_z / q_x, realized by symmetric basis probabilities
            if value <= 0.0:
                raise ValidationError(
                    f"q_ratio sweep values must be > 0, got {value!r}"
                )
            s = math.sqrt(value) / (1.0 + math.sqrt(value))
            q_z, q_x = s * s, (1.0 - s) * (1.0 - s)
        if n < 1:
            raise ValidationError(f"swept n_det_ter must be >= 1, got {n}")

        n_z = max(1, round(n * q_z))
        n_x = max(1, round(n * q_x))
        wt = err * n_x
        tail = finite_key.azuma_tail(n, delta)
        bound = finite_key.phase_error_bound(wt, q_z, q_x, n, delta)
        e_ph_bar = min(bound / n_z, 0.5)
        lambda_ec = finite_key.ec_syndrome_cost(n_z, min(err, 0.5), cfg.params.f_ec)
        row: dict[str, Any] = {
            "axis": axis,
            "value": float(value),
            "eta": tail.eta,
            "e_ph_bar": e_ph_bar,
            "n_z": n_z,
            "lambda_ec": lambda_ec,
        }
        try:
            result = finite_key.key_length(
                n_z, e_ph_bar, cfg.params.eps_s, tail.eta, lambda_ec, cfg.params.eps_c
            )
            row["l"] = result.l
            row["terms"] = result.terms
        except SecurityParameterError:
            row["l"] = 0
            row["terms"] = None
        rows.append(row)
    return rows


def _sweep_mode(cfg: RunConfig) -> tuple[dict, list[str], list[list]]:
    assert cfg.sweep is not None
    rows = keyrate_rows(cfg)
    header = [cfg.sweep.axis, "eta", "e_ph_bar", "l"]
    csv_rows = [[r["value"], r["eta"], r["e_ph_bar"], r["l"]] for r in rows]
    return {"axis": cfg.sweep.axis, "rows": rows}, header, csv_rows


# ---------------------------------------------------------------------------
# Report emission


def render_report(
    envelope: dict, header: list[str], rows: list[list], fmt: str
) -> str:
    if fmt == "json":
        return json.dumps(envelope, indent=2) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def emit_report(
    envelope: dict, header: list[str], rows: list[list], fmt: str, path: str
) -> None:
    text = render_report(envelope, header, rows, fmt)
    if path == "-":
        sys.stdout.write(text)
        return
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write report {path!r}: {exc}") from exc


def run(cfg: RunConfig) -> int:
    """Dispatch one validated config and write its artifact."""
    workers = _worker_count()
    if cfg.mode in ("actual", "virtual"):
        results, header, rows = _session_mode(cfg, workers)
    elif cfg.mode == "estimation":
        results, header, rows = _estimation_mode(cfg, workers)
    elif cfg.mode == "coverage":
        results, header, rows = _coverage_mode(cfg, workers)
    elif cfg.mode == "bias":
        results, header, rows = _bias_mode(cfg)
    else:
        results, header, rows = _sweep_mode(cfg)
    envelope = {
        "schema": SCHEMA_TAG,
        "config": config_to_dict(cfg),
        "seed": cfg.seed,
        "results": results,
    }
    emit_report(envelope, header, rows, cfg.output_format, cfg.output_path)
    return 0


# ---------------------------------------------------------------------------
# Built-in invariant battery (the `verify` subcommand)


def _verify_checks() -> list[tuple[str, Callable[[], None]]]:
    import numpy as np

    from .protocol import SiftedData, postprocess
    from .quantum_core import bell_pair, ideal_povm as _ideal

    uniform = ProtocolParams(
        p_z_a=0.5, p_x_a=0.5, p_z_b=0.5, p_x_b=0.5,
        n_det_ter=32, eps_s=1e-6, eps_c=1e-6, delta=0.1,
    )

    def check_povm() -> None:
        for povm in (_ideal(), detection_povm(0.9)):
            total = povm.m0z + povm.m1z + povm.m0x + povm.m1x + 2 * povm.m_fail
            if not np.allclose(total, 2 * np.eye(2), atol=1e-10):
                raise AssertionError("POVM completeness failed")

    def check_reference_values() -> None:
        res = finite_key.key_length(1000, 0.0, 1e-10, 1e-21, 0, 1e-10)
        if res.l != 898:
            raise AssertionError(f"key_length reference: {res.l} != 898")
        tail = finite_key.azuma_tail(1000, 0.1)
        if abs(tail.eta_single - math.exp(-5.0)) > 1e-15:
            raise AssertionError("azuma_tail reference drifted")
        bound = finite_key.phase_error_bound(30.0, 0.81, 0.01, 10000, 0.01)
        if abs(bound - 10630.0) > 1e-6:
            raise AssertionError(f"phase_error_bound reference: {bound} != 10630")

    def check_entropy() -> None:
        if finite_key.binary_entropy(0.5) != 1.0:
            raise AssertionError("h(1/2) != 1")
        for x in (0.01, 0.11, 0.3, 0.49):
            if abs(finite_key.binary_entropy(x) - finite_key.binary_entropy(1 - x)) > 1e-15:
                raise AssertionError(f"h({x}) asymmetric")

    def check_state() -> None:
        rho = bell_pair()
        if abs(rho.trace - 1.0) > 1e-12:
            raise AssertionError("maximally entangled state not normalized")

    def check_actual_virtual() -> None:
        eve = make_strategy(Depolarizing(p=0.2))
        counts_a: dict = {}
        counts_v: dict = {}
        small = dataclasses.replace(uniform, n_det_ter=4)
        for i in range(400):
            _, sa = run_actual(small, eve, derive_stream(11, i))
            _, sv, _ = run_virtual(small, eve, derive_stream(12, i))
            ka = (sa.n_z, sa.n_x, sa.x_error_weight())
            kv = (sv.n_z, sv.n_x, sv.x_error_weight())
            counts_a[ka] = counts_a.get(ka, 0) + 1
            counts_v[kv] = counts_v.get(kv, 0) + 1
        tv = 0.5 * sum(
            abs(counts_a.get(k, 0) - counts_v.get(k, 0)) / 400
            for k in set(counts_a) | set(counts_v)
        )
        if tv > 0.15:
            raise AssertionError(f"actual/virtual summary TV {tv:.3f} > 0.15")

    def check_martingale() -> None:
        eve = make_strategy(Depolarizing(p=0.1))
        for i in range(40):
            run_ = run_estimation(uniform, eve, derive_stream(13, i))
            trace = stats.build_trace(run_)
            if trace.x_ph[0] != 0.0 or trace.x_xerr[0] != 0.0:
                raise AssertionError("centered process does not start at 0")
            if len(trace.x_ph) != uniform.n_det_ter + 1:
                raise AssertionError("trace length wrong")
            for rec in run_.per_round:
                if abs(rec.p_ph / uniform.q_z - rec.p_xerr / uniform.q_x) > 1e-12:
                    raise AssertionError("scaled error-probability identity broken")

    def check_bias() -> None:
        fair = stats.enumerate_bias(CountDetected(3), (0.5, 0.5), 3)
        if fair.tv_from_uniform > 1e-12:
            raise AssertionError(f"detected-count rule biased: {fair.tv_from_uniform}")
        skew = stats.enumerate_bias(CountPerBasis(1, 1), (0.5, 0.5), 6)
        if skew.tv_from_uniform <= 1e-9:
            raise AssertionError("per-basis rule shows no bias")

    def check_determinism() -> None:
        eve = make_strategy(IdentityLossy(p_loss=0.3))
        t1, s1 = run_actual(uniform, eve, derive_stream(7, 0))
        t2, s2 = run_actual(uniform, eve, derive_stream(7, 0))
        if transcript_to_json(t1) != transcript_to_json(t2) or sifted_to_json(
            s1
        ) != sifted_to_json(s2):
            raise AssertionError("same stream produced different sessions")

    def check_distillation() -> None:
        import random as _random

        big = ProtocolParams(
            p_z_a=0.5, p_x_a=0.5, p_z_b=0.5, p_x_b=0.5,
            n_det_ter=300_000, eps_s=1e-4, eps_c=1e-6, delta=0.012,
        )
        rng = _random.Random(5)
        n_z = n_x = 75_000
        s = np.array([rng.getrandbits(1) for _ in range(n_z)], dtype=np.uint8)
        sifted = SiftedData(
            s_az=s, s_bz=s.copy(),
            s_ax=np.zeros(n_x, dtype=np.uint8), s_bx=np.zeros(n_x, dtype=np.uint8),
            n_z=n_z, n_x=n_x,
        )
        keys = postprocess(sifted, big, _random.Random(6))
        if keys.aborted or len(keys.f_az) == 0:
            raise AssertionError("distillation aborted on a clean session")
        if not np.array_equal(keys.f_az, keys.f_bz):
            raise AssertionError("amplified keys disagree")

    return [
        ("povm-completeness", check_povm),
        ("reference-values", check_reference_values),
        ("entropy-symmetry", check_entropy),
        ("state-normalization", check_state),
        ("actual-virtual-agreement", check_actual_virtual),
        ("martingale-invariants", check_martingale),
        ("stopping-rule-bias", check_bias),
        ("stream-determinism", check_determinism),
        ("key-distillation", check_distillation),
    ]


def run_verify() -> int:
    """Run the invariant battery; print one PASS/FAIL line per check."""
    checks = _verify_checks()
    failures = 0
    for name, check in checks:
        try:
            check()
        except Exception as exc:  # noqa: BLE001 — each failure must be reported
            failures += 1
            print(f"FAIL {name}: {exc}")
        else:
            print(f"PASS {name}")
    print(f"{'FAIL' if failures else 'OK'}: {failures} of {len(checks)} checks failed")
    return 1 if failures else 0


def run_bias_demo(out: str | None) -> int:
    """Contrast the two stopping rules on a uniform-basis session."""
    fair = stats.enumerate_bias(CountDetected(3), (0.5, 0.5), 3)
    skew = stats.enumerate_bias(CountPerBasis(1, 1), (0.5, 0.5), 6)
    print("stopping rule            tv_from_uniform  dependence  test_err  code_err")
    for label, rep in (("CountDetected(3)", fair), ("CountPerBasis(1,1)", skew)):
        print(
            f"{label:<24} {rep.tv_from_uniform:<16.6g} {str(rep.dependence_detected):<11}"
            f" {rep.test_error_rate:<9.4f} {rep.code_error_rate:<9.4f}"
        )
    print(
        "A fixed detected-count rule keeps test positions exchangeable; "
        "per-basis quotas do not."
    )
    if out is not None:
        payload = {
            "schema": SCHEMA_TAG,
            "results": {
                "count_detected": {
                    "tv_from_uniform": fair.tv_from_uniform,
                    "dependence_detected": fair.dependence_detected,
                },
                "count_per_basis": {
                    "tv_from_uniform": skew.tv_from_uniform,
                    "dependence_detected": skew.dependence_detected,
                },
            },
        }
        try:
            Path(out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot write report {out!r}: {exc}") from exc
    return 0


# ---------------------------------------------------------------------------
# Entry point


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    updates: dict[str, Any] = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.trials is not None:
        updates["trials"] = args.trials
    if args.out is not None:
        updates["output_path"] = args.out
    if args.fmt is not None:
        updates["output_format"] = args.fmt
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="override master seed")
    parser.add_argument("--trials", type=int, default=None, help="override trial count")
    parser.add_argument("--out", default=None, help="output path ('-' = stdout)")
    parser.add_argument(
        "--format", dest="fmt", choices=("json", "csv"), default=None,
        help="override output format",
    )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="qkd-sift",
        description="Simulate and analyze iteratively sifted BB84 sessions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("run", help="run the mode given in the config"))
    _add_run_flags(
        sub.add_parser("sweep", help="evaluate the key-length pipeline over a grid")
    )
    sub.add_parser("verify", help="run the built-in invariant battery")
    demo = sub.add_parser("bias-demo", help="contrast the two stopping rules")
    demo.add_argument("--out", default=None, help="optional JSON report path")

    args = parser.parse_args(argv)
    try:
        if args.command == "verify":
            return run_verify()
        if args.command == "bias-demo":
            return run_bias_demo(args.out)
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "sweep":
            if cfg.sweep is None:
                raise ValidationError("sweep requires a 'sweep' section in the config")
            if cfg.mode != "keyrate-sweep":
                cfg = dataclasses.replace(cfg, mode="keyrate-sweep")
        return run(cfg)
    except QkdSiftError as exc:
        record = {
            "schema": SCHEMA_TAG,
            "error": {"type": type(exc).__name__, "message": str(exc)},
        }
        sys.stderr.write(json.dumps(record) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
