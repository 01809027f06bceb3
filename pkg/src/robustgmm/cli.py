"""Command-line front end.

Subcommands: estimate, synth-sweep, semi-sweep, diagnose, selfcheck.
Configuration is a flat key=value file overlaid by repeatable --set flags
(last one wins); unknown keys are rejected. Every output file starts with
the resolved configuration as '#' comment lines, and is byte-reproducible
from (config, seed). Exit codes: 0 success, 1 usage or config error,
2 estimation failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from typing import Optional

import numpy as np

from .core import (
    ActiveSet,
    Dataset,
    EstimationError,
    HyperParams,
    RadiusSchedule,
)
from .experiments import (
    CARD_STANDIN_COLUMNS,
    ESTIMATOR_NAMES,
    PRACTICE_SLACK,
    SweepConfig,
    aggregate_rows,
    corrupt_negation,
    derive_hyperparams,
    diagnose_assumptions,
    format_float,
    gen_synthetic_hte,
    load_csv,
    robust_linear_estimate,
    run_sweep,
    write_rows_csv,
    write_aggregate_csv,
)
from .filtering import spectral_filter
from .models import (
    LinearIVModel,
    LogisticIVModel,
    hte_design,
    scalar_treatment_design,
    two_stage_least_squares,
)
from .numerics import (
    CriticalPointProblem,
    RandomSource,
    finite_diff_jacobian,
    projected_gradient_critical_point,
    top_eigenvector,
)
from .sever import iterated_gmm_sever

__all__ = ["main"]


class ConfigError(Exception):
    """Bad usage or configuration; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_float(raw: str, key: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"key {key}: expected a number, got {raw!r}") from None


def _parse_int(raw: str, key: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"key {key}: expected an integer, got {raw!r}") from None


def _split_list(raw: str) -> list:
    return [tok.strip() for tok in raw.split(",") if tok.strip()]


def _read_config_file(path) -> dict:
    out = {}
    try:
        with open(path, "r") as handle:
            for lineno, line in enumerate(handle, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                if "=" not in stripped:
                    raise ConfigError(
                        f"{path}:{lineno}: expected key=value, got {stripped!r}"
                    )
                key, _, value = stripped.partition("=")
                out[key.strip()] = value.strip()
    except OSError as err:
        raise ConfigError(f"cannot read config file: {err}") from None
    return out


def _resolve(args, spec: dict) -> dict:
    """Defaults <- config file <- --set overrides <- --seed flag."""
    resolved = {k: v for k, v in spec.items() if v is not None}
    overlays = []
    if args.config:
        overlays.append(_read_config_file(args.config))
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        pairs[key.strip()] = value.strip()
    overlays.append(pairs)
    for overlay in overlays:
        for key, value in overlay.items():
            if key not in spec:
                raise ConfigError(f"unknown config key {key!r}")
            resolved[key] = value
    if args.seed is not None:
        resolved["seed"] = str(args.seed)
    return resolved


def _stamp(command: str, resolved: dict) -> list:
    lines = [f"command={command}"]
    lines.extend(f"{k}={resolved[k]}" for k in sorted(resolved))
    return lines


_COLUMN_KEYS = {
    "col_response": "y",
    "col_treatment": "",
    "col_instruments": "z1",
    "col_covariates": "x1",
}

_HYPER_KEYS = {
    "hyper": "plugin",
    "eps": None,  # required
    "lam": "",
    "L": "",
    "sigma": "",
    "gamma": "",
    "delta": "0.05",
    "R0": "",
    "c1": "4.0",
    "c2": "2.0",
    "rescale": "true",
    "gamma_scale": "0.1",
    "slack": f"{PRACTICE_SLACK:g}",
    "bound_mode": "",  # empty: practice for plugin hyper, theory for fixed
}


def _columns_from(resolved: dict) -> dict:
    treatment = resolved.get("col_treatment", "")
    return {
        "response": resolved["col_response"],
        "treatment": treatment if treatment else None,
        "instruments": _split_list(resolved["col_instruments"]),
        "covariates": _split_list(resolved["col_covariates"]),
    }


def _require(resolved: dict, key: str) -> str:
    value = resolved.get(key, "")
    if not value:
        raise ConfigError(f"key {key!r} is required")
    return value


def _bound_mode(resolved: dict) -> str:
    mode = resolved.get("bound_mode", "")
    if not mode:
        return "theory" if resolved["hyper"] == "fixed" else "practice"
    if mode not in ("theory", "practice"):
        raise ConfigError(f"bound_mode must be 'theory' or 'practice', got {mode!r}")
    return mode


def _fixed_hyperparams(resolved: dict) -> HyperParams:
    gamma_raw = resolved.get("gamma", "")
    try:
        return HyperParams(
            eps=_parse_float(_require(resolved, "eps"), "eps"),
            lam=_parse_float(_require(resolved, "lam"), "lam"),
            L=_parse_float(_require(resolved, "L"), "L"),
            sigma=_parse_float(_require(resolved, "sigma"), "sigma"),
            R0=_parse_float(_require(resolved, "R0"), "R0"),
            gamma=_parse_float(gamma_raw, "gamma") if gamma_raw else None,
            delta=_parse_float(resolved["delta"], "delta"),
            sched=RadiusSchedule(
                c1=_parse_float(resolved["c1"], "c1"),
                c2=_parse_float(resolved["c2"], "c2"),
            ),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None


def _build_design(resolved: dict):
    """Load the CSV and derive the design for the requested model kind.

    Returns (design dataset, model kind for the solver, base dataset or None
    for ATE reporting, effect dimension for ATE).
    """
    kind = resolved["model"]
    base = load_csv(_require(resolved, "input"), _columns_from(resolved))
    if kind == "linear":
        return base, "linear", None
    if kind == "logistic":
        return base, "logistic", None
    if kind == "hte":
        return hte_design(base, "treatment_only"), "linear", base
    if kind == "hte-full":
        return hte_design(base, "full"), "linear", base
    if kind == "scalar":
        intercept = _parse_bool(resolved["intercept"])
        return scalar_treatment_design(base, intercept=intercept), "linear", base
    raise ConfigError(f"unknown model kind {kind!r}")


def _ate_line(kind: str, w: np.ndarray, base: Optional[Dataset]) -> Optional[float]:
    if base is None:
        return None
    if kind == "scalar":
        return float(w[0])
    return float(np.mean(base.X @ w[: base.d]))


_ESTIMATE_SPEC = {
    "seed": "0",
    "input": None,
    "model": "linear",
    "intercept": "true",
    "cold_start": "false",
    **_COLUMN_KEYS,
    **_HYPER_KEYS,
}


def cmd_estimate(args) -> int:
    resolved = _resolve(args, _ESTIMATE_SPEC)
    if not args.out:
        raise ConfigError("--out is required for estimate")
    eps = _parse_float(_require(resolved, "eps"), "eps")
    if not 0.0 <= eps < 0.5:
        raise ConfigError(f"eps must be < 0.5 and nonnegative, got {eps}")
    try:
        design, solver_kind, base = _build_design(resolved)
    except (ValueError, KeyError, OSError) as err:
        raise ConfigError(str(err)) from None

    rng = RandomSource(_parse_int(resolved["seed"], "seed"))
    if resolved["hyper"] == "fixed":
        hp = _fixed_hyperparams(resolved)
        model = (
            LogisticIVModel(design) if solver_kind == "logistic" else LinearIVModel(design)
        )
        report = iterated_gmm_sever(
            model,
            hp,
            rng.child("est"),
            slack=_parse_float(resolved["slack"], "slack"),
            cold_start=_parse_bool(resolved["cold_start"]),
            bound_mode=_bound_mode(resolved),
        )
        w = report.w_hat
    elif resolved["hyper"] == "plugin":
        w, report = robust_linear_estimate(
            design,
            eps,
            rng,
            hyper="plugin",
            rescale=_parse_bool(resolved["rescale"]),
            gamma_scale=_parse_float(resolved["gamma_scale"], "gamma_scale"),
            delta=_parse_float(resolved["delta"], "delta"),
            model_kind=solver_kind,
            slack=_parse_float(resolved["slack"], "slack"),
            bound_mode=_bound_mode(resolved),
        )
    else:
        raise ConfigError(f"hyper must be 'plugin' or 'fixed', got {resolved['hyper']!r}")

    removed = np.setdiff1d(np.arange(design.n), report.final_set.indices)
    lines = [f"w_hat={','.join(format_float(v) for v in w)}"]
    ate = _ate_line(resolved["model"], w, base)
    if ate is not None:
        lines.append(f"ate={format_float(ate)}")
    lines.append(f"final_set_size={len(report.final_set)}")
    lines.append(f"removed_indices={','.join(str(i) for i in removed)}")
    lines.append(
        "radius_trace="
        + ";".join(f"{t}:{format_float(r)}" for t, r in report.radius_trace)
    )
    for key in sorted(report.diagnostics):
        lines.append(f"diag.{key}={format_float(report.diagnostics[key])}")
    _write_lines(args.out, _stamp("estimate", resolved), lines)
    return 0


def _write_lines(path, header_lines, lines) -> None:
    with open(path, "w", newline="\n") as handle:
        for line in header_lines:
            handle.write(f"# {line}\n")
        for line in lines:
            handle.write(f"{line}\n")


_SYNTH_SPEC = {
    "seed": "0",
    "preset": "paper",
    "n": "",
    "d": "",
    "eps_grid": "",
    "reps": "",
    "estimators": ",".join(ESTIMATOR_NAMES),
    "attack": "all-ones",
    "instrument": "bernoulli01",
    "stamp_runtime": "false",
    **_HYPER_KEYS,
}

_PRESETS = {
    "paper": {
        "n": "10000",
        "d": "20",
        "eps_grid": "0.01,0.05,0.1,0.15,0.2,0.25,0.3,0.35,0.4,0.45,0.5",
        "reps": "10",
    },
    "desk": {
        "n": "2000",
        "d": "10",
        "eps_grid": "0.05,0.1,0.2,0.3",
        "reps": "5",
    },
}


def _sweep_common(resolved: dict, kind: str) -> dict:
    hyper = resolved["hyper"]
    if hyper == "fixed":
        hyper_value = _fixed_hyperparams(resolved)
    elif hyper == "plugin":
        hyper_value = "plugin"
    else:
        raise ConfigError(f"hyper must be 'plugin' or 'fixed', got {hyper!r}")
    return {
        "kind": kind,
        "estimators": tuple(_split_list(resolved["estimators"])),
        "attack": resolved["attack"],
        "hyper": hyper_value,
        "rescale": _parse_bool(resolved["rescale"]),
        "gamma_scale": _parse_float(resolved["gamma_scale"], "gamma_scale"),
        "delta": _parse_float(resolved["delta"], "delta"),
        "slack": _parse_float(resolved["slack"], "slack"),
        "bound_mode": _bound_mode(resolved),
        "stamp_runtime": _parse_bool(resolved["stamp_runtime"]),
    }


def _emit_sweep(args, command: str, resolved: dict, cfg: SweepConfig) -> int:
    if not args.out:
        raise ConfigError(f"--out is required for {command}")
    rng = RandomSource(cfg.seed)
    rows = run_sweep(cfg, rng, jobs=args.jobs)
    header = _stamp(command, resolved)
    write_rows_csv(args.out, rows, header)
    out = str(args.out)
    stem, dot, ext = out.rpartition(".")
    agg_path = f"{stem}.agg.{ext}" if dot else f"{out}.agg"
    write_aggregate_csv(agg_path, aggregate_rows(rows), header)
    if rows and all(row.value is None for row in rows):
        print("estimation failed: every sweep cell failed", file=sys.stderr)
        return 2
    return 0


def cmd_synth_sweep(args) -> int:
    resolved = _resolve(args, _SYNTH_SPEC)
    preset = resolved["preset"]
    if preset not in _PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    merged = dict(_PRESETS[preset])
    for key in merged:
        if resolved.get(key):
            merged[key] = resolved[key]
    try:
        cfg = SweepConfig(
            eps_grid=tuple(
                _parse_float(tok, "eps_grid") for tok in _split_list(merged["eps_grid"])
            ),
            repetitions=_parse_int(merged["reps"], "reps"),
            seed=_parse_int(resolved["seed"], "seed"),
            n=_parse_int(merged["n"], "n"),
            d=_parse_int(merged["d"], "d"),
            instrument=resolved["instrument"],
            **_sweep_common(resolved, "synthetic"),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None
    return _emit_sweep(args, "synth-sweep", resolved, cfg)


_SEMI_SPEC = {
    "seed": "0",
    "input": None,
    "eps_grid": "0.05,0.1,0.15",
    "reps": "10",
    "estimators": "iterated-gmm-sever,classical-iv",
    "attack": "negation",
    "intercept": "true",
    "col_response": CARD_STANDIN_COLUMNS["response"],
    "col_treatment": CARD_STANDIN_COLUMNS["treatment"],
    "col_instruments": ",".join(CARD_STANDIN_COLUMNS["instruments"]),
    "col_covariates": ",".join(CARD_STANDIN_COLUMNS["covariates"]),
    "stamp_runtime": "false",
    **_HYPER_KEYS,
}


def cmd_semi_sweep(args) -> int:
    resolved = _resolve(args, _SEMI_SPEC)
    try:
        cfg = SweepConfig(
            eps_grid=tuple(
                _parse_float(tok, "eps_grid")
                for tok in _split_list(resolved["eps_grid"])
            ),
            repetitions=_parse_int(resolved["reps"], "reps"),
            seed=_parse_int(resolved["seed"], "seed"),
            data_path=_require(resolved, "input"),
            columns=_columns_from(resolved),
            intercept=_parse_bool(resolved["intercept"]),
            **_sweep_common(resolved, "semi"),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None
    return _emit_sweep(args, "semi-sweep", resolved, cfg)


_DIAGNOSE_SPEC = {
    "seed": "0",
    "input": None,
    "model": "linear",
    "intercept": "true",
    "n_directions": "200",
    **_COLUMN_KEYS,
}


def cmd_diagnose(args) -> int:
    resolved = _resolve(args, _DIAGNOSE_SPEC)
    if not args.out:
        raise ConfigError("--out is required for diagnose")
    try:
        design, solver_kind, _ = _build_design(resolved)
    except (ValueError, KeyError, OSError) as err:
        raise ConfigError(str(err)) from None
    model = (
        LogisticIVModel(design) if solver_kind == "logistic" else LinearIVModel(design)
    )
    try:
        w_ref = two_stage_least_squares(design)
    except EstimationError:
        w_ref = np.zeros(design.d)
    rng = RandomSource(_parse_int(resolved["seed"], "seed"))
    diag = diagnose_assumptions(
        model,
        ActiveSet.full(design.n),
        w_ref,
        rng=rng.child("diagnose"),
        n_directions=_parse_int(resolved["n_directions"], "n_directions"),
    )
    lines = [f"n={design.n}", f"d={design.d}", f"p={design.p}"]
    lines.append(f"w_ref={','.join(format_float(v) for v in w_ref)}")
    lines.extend(f"{key}={format_float(diag[key])}" for key in sorted(diag))
    _write_lines(args.out, _stamp("diagnose", resolved), lines)
    return 0


# ---------------------------------------------------------------------------
# selfcheck


def _check_jacobians(rng: RandomSource) -> bool:
    from .models import HTEModel

    data, _ = gen_synthetic_hte(40, 3, rng.child("data"))
    models = [
        LinearIVModel(hte_design(data)),
        LogisticIVModel(
            Dataset(X=data.X, Y=(data.Y > 0).astype(float), Z=data.X, T=None)
        ),
        HTEModel(data, "full"),
    ]
    for m, model in enumerate(models):
        for k in range(10):
            sub = rng.child(f"probe-{m}-{k}")
            i = int(sub.integers(0, model.n_samples))
            w = sub.normal(model.param_dim) * 0.5
            jac = model.jacobian(i, w)
            fd = finite_diff_jacobian(lambda v: model.moment(i, v), w, 1e-5)
            denom = max(float(np.linalg.norm(jac)), 1e-8)
            if np.linalg.norm(fd - jac) / denom > 1e-5:
                return False
    return True


def _check_top_eigenvector(rng: RandomSource) -> bool:
    v, mu = top_eigenvector(np.array([[2.0, 1.0], [1.0, 2.0]]), rng)
    return abs(mu - 3.0) < 1e-8 and abs(abs(v @ np.array([1.0, 1.0]) / math.sqrt(2)) - 1.0) < 1e-6


def _check_learner_projection(rng: RandomSource) -> bool:
    a = np.array([3.0, 4.0])
    center = np.zeros(2)

    def fg(w):
        diff = w - a
        return float(diff @ diff), 2.0 * diff

    prob = CriticalPointProblem(fg, center, 1.0, 1e-9)
    res = projected_gradient_critical_point(prob, rng)
    return bool(np.linalg.norm(res.x - a / 5.0) <= 1e-6)


def _check_filter_stability(rng: RandomSource) -> bool:
    bound_const = 3.0 * math.sqrt(48.0)
    for trial in range(100):
        sub = rng.child(f"trial-{trial}")
        good = sub.normal((90, 4)) * 0.7
        bad = sub.normal((10, 4)) + 10.0 ** (sub.uniform() * 3 - 1)
        vals = np.vstack([good, bad])
        M = 10.0 ** (sub.uniform() * 2 - 1)
        out = spectral_filter(vals, ActiveSet.full(100), M, sub.child("f"))
        if out.threshold is None:
            gap = np.linalg.norm(vals.mean(axis=0) - good.mean(axis=0))
            cov_good = np.cov(good.T, bias=True)
            op = float(np.linalg.eigvalsh(cov_good)[-1])
            if gap > bound_const * math.sqrt((M + op) * 0.1):
                return False
    return True


def _check_filter_idempotence(rng: RandomSource) -> bool:
    vals = rng.normal((50, 3))
    active = ActiveSet.full(50)
    bound = float(np.linalg.eigvalsh(np.cov(vals.T, bias=True))[-1])
    first = spectral_filter(vals, active, bound, rng.child("a"))
    if first.threshold is not None:
        return False
    again = spectral_filter(vals, active, bound, rng.child("b"))
    return len(again.removed) == 0


def _check_negation_identity(rng: RandomSource) -> bool:
    n = 300
    X = np.hstack([rng.normal((n, 2)), np.ones((n, 1))])
    Z = X + 0.1 * rng.normal((n, 3))
    w_true = np.array([1.0, -2.0, 0.5])
    Y = X @ w_true + 0.3 * rng.normal(n)
    design = Dataset(X=X, Y=Y, Z=Z)
    w_clean = two_stage_least_squares(design)
    corrupted, _ = corrupt_negation(design, 0.1, rng.child("attack"))
    w_corr = two_stage_least_squares(corrupted)
    return bool(np.linalg.norm(w_corr + w_clean) <= 1e-8 * np.linalg.norm(w_clean))


def _check_radius_schedule(rng: RandomSource) -> bool:
    hp = HyperParams(eps=0.04, lam=1.0, L=1.0, sigma=1.0, R0=10.0, gamma=0.01)
    sched = RadiusSchedule(c1=4.0, c2=2.0)
    got = sched.next_radius(10.0, hp, 0.01)
    want = 4.0 * 0.01 + 2.0 * (10.0 * 0.2 + 0.2)
    return abs(got - want) < 1e-12


_SELFCHECKS = (
    ("moment-jacobian-consistency", _check_jacobians),
    ("top-eigenvector-analytic", _check_top_eigenvector),
    ("learner-boundary-projection", _check_learner_projection),
    ("filter-no-removal-stability", _check_filter_stability),
    ("filter-idempotence", _check_filter_idempotence),
    ("negation-attack-identity", _check_negation_identity),
    ("radius-schedule-arithmetic", _check_radius_schedule),
)


def cmd_selfcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    rng = RandomSource(seed)
    all_ok = True
    for name, check in _SELFCHECKS:
        try:
            ok = check(rng.child(name))
        except Exception:
            ok = False
        print(f"{'PASS' if ok else 'FAIL'} {name}")
        all_ok = all_ok and ok
    return 0 if all_ok else 2


def _build_parser() -> _Parser:
    parser = _Parser(prog="robustgmm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in (
        ("estimate", cmd_estimate),
        ("synth-sweep", cmd_synth_sweep),
        ("semi-sweep", cmd_semi_sweep),
        ("diagnose", cmd_diagnose),
        ("selfcheck", cmd_selfcheck),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="64-bit master seed")
        p.add_argument("--out", default=None, help="output file path")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override one config key (repeatable, wins over --config)",
        )
        p.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except EstimationError as err:
        print(f"estimation failed: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
