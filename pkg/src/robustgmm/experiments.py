"""Synthetic data generation, corruption attacks, diagnostics, and sweeps.

This is the experiment harness: it produces the treatment-effect DGP, the
two adversarial attacks (all-ones characteristics, response negation), the
CSV loader for semi-synthetic designs, assumption diagnostics with a plug-in
hyperparameter rule, and the corruption sweep that compares the robust
estimator against classical IV and a two-stage Huber baseline.
"""

from __future__ import annotations

import csv
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .core import (
    ActiveSet,
    Dataset,
    EstimationError,
    HyperParams,
    RadiusSchedule,
    mean_jacobian,
)
from .models import (
    LinearIVModel,
    LogisticIVModel,
    hte_design,
    logistic,
    scalar_treatment_design,
    two_stage_huber,
    two_stage_least_squares,
)
from .numerics import RandomSource
from .sever import iterated_gmm_sever

__all__ = [
    "PRACTICE_SLACK",
    "gen_synthetic_hte",
    "gen_card_standin",
    "write_card_standin",
    "CARD_STANDIN_COLUMNS",
    "corrupt_all_ones",
    "corrupt_negation",
    "load_csv",
    "save_dataset_csv",
    "diagnose_assumptions",
    "derive_hyperparams",
    "robust_linear_estimate",
    "SweepConfig",
    "SweepRow",
    "run_sweep",
    "aggregate_rows",
    "write_rows_csv",
    "write_aggregate_csv",
    "format_float",
]

ESTIMATOR_NAMES = ("iterated-gmm-sever", "classical-iv", "two-stage-huber")
_MISSING_MARKERS = {"", "na", "nan", "null"}

# Filter slack used by the plug-in experiment pipeline, which runs the
# sever loop with bound_mode="practice": each pass compares the variance
# along its top direction (the top covariance eigenvalue) against the mean
# of the remaining eigenvalues, so slack is the tolerated top-to-bulk
# spectral ratio before samples are removed. Clean designs stay near 1.4
# on raw moments even with heavy tails, while planted corruptions at
# eps >= 0.05 push the ratio past 4; 2.0 leaves a 1.4x clean margin and
# removes measurably more of the planted mass at high eps than looser
# settings.
PRACTICE_SLACK = 2.0


# ---------------------------------------------------------------------------
# data generation


def gen_synthetic_hte(
    n: int, d: int, rng: RandomSource, instrument: str = "bernoulli01"
):
    """Heterogeneous-treatment-effect DGP with an endogenous treatment.

    theta ~ N(0, I_d), X ~ N(0, I_d) rows, scalar instrument Z, confounder
    U ~ N(0, 1). Treatment T is Bernoulli with success probability
    s(Z + sqrt(d) * U * mean(X)), response Y = <X, theta> T + U. The
    confounder enters both T and Y, so treated-only regression is biased and
    the instrument is needed.

    instrument: "bernoulli01" (Z in {0,1}, fair coin), "pm_one" (Z in
    {-1,+1}), or "constant" (Z = 1, which destroys identification on
    purpose for degeneracy checks).

    Returns (Dataset, theta).
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    theta = rng.normal(d)
    X = rng.normal((n, d))
    if instrument == "bernoulli01":
        z = (rng.uniform(n) < 0.5).astype(np.float64)
    elif instrument == "pm_one":
        z = 2.0 * (rng.uniform(n) < 0.5).astype(np.float64) - 1.0
    elif instrument == "constant":
        z = np.ones(n)
    else:
        raise ValueError(f"unknown instrument flavor {instrument!r}")
    U = rng.normal(n)
    xbar = X.mean(axis=1)
    p_treat = logistic(z + math.sqrt(d) * U * xbar)
    T = (rng.uniform(n) < p_treat).astype(np.float64)
    Y = (X @ theta) * T + U
    return Dataset(X=X, Y=Y, Z=z[:, None], T=T), theta


CARD_STANDIN_COLUMNS = {
    "response": "lwage",
    "treatment": "educ",
    "instruments": ["nearc4"],
    "covariates": ["exper", "expersq"],
}


def gen_card_standin(rng: RandomSource, n: int = 3010):
    """Synthetic stand-in with the schooling-returns schema.

    Columns (lwage, educ, nearc4, exper, expersq): log wage, years of
    education (endogenous through latent ability), a binary proximity
    instrument, experience, and its square. The structural education effect
    is 0.10. Returns a dict of column name -> array, in schema order.
    """
    ability = rng.normal(n)
    nearc4 = (rng.uniform(n) < 0.68).astype(np.float64)
    exper = np.floor(rng.uniform(n) * 21.0)
    expersq = exper * exper
    educ = 11.5 + 1.3 * nearc4 + 0.9 * ability + 0.8 * rng.normal(n)
    lwage = (
        4.6
        + 0.10 * educ
        + 0.05 * exper
        - 0.0012 * expersq
        + 0.45 * ability
        + 0.35 * rng.normal(n)
    )
    return {
        "lwage": lwage,
        "educ": educ,
        "nearc4": nearc4,
        "exper": exper,
        "expersq": expersq,
    }


def write_card_standin(path, seed: int = 20260815, n: int = 3010) -> None:
    cols = gen_card_standin(RandomSource(seed), n)
    names = list(cols)
    with open(path, "w", newline="\n") as handle:
        handle.write(",".join(names) + "\n")
        for i in range(n):
            handle.write(",".join(format_float(cols[c][i]) for c in names) + "\n")


# ---------------------------------------------------------------------------
# corruption attacks


def corrupt_all_ones(data: Dataset, eps: float, rng: RandomSource):
    """Replace floor(eps * n) uniformly chosen characteristic rows with ones.

    Instruments, treatment, and responses are untouched; the attack plants
    high-leverage rows along the all-ones direction. Returns (corrupted
    dataset, corrupted indices).
    """
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"eps must lie in [0, 1), got {eps}")
    k = int(math.floor(eps * data.n))
    idx = rng.subset(data.n, k)
    X = data.X.copy()
    X[idx] = 1.0
    return Dataset(X=X, Y=data.Y, Z=data.Z, T=data.T), idx


def corrupt_negation(design: Dataset, eps: float, rng: RandomSource):
    """Shift floor(eps * n) responses so classical IV returns the negated fit.

    Works on an exactly identified linear IV design: with w0 the clean IV
    solution, the corrupted responses satisfy sum_C Z_i delta_i =
    -2 sum_i Z_i Y_i, which flips the moment equation's right-hand side.
    The shift is the minimum-norm solution of that underdetermined system;
    the corrupted index set is resampled (up to 20 times) if its instrument
    rows do not span. Returns (corrupted design, corrupted indices).
    """
    if design.p != design.d:
        raise ValueError(
            f"negation attack needs an exactly identified design, got p={design.p}, d={design.d}"
        )
    k = int(math.floor(eps * design.n))
    if k < design.p:
        raise ValueError(
            f"floor(eps * n) = {k} corrupted rows cannot span {design.p} instruments"
        )
    w0 = two_stage_least_squares(design)
    b = -2.0 * (design.Z.T @ design.Y)
    delta = None
    idx = None
    for _ in range(20):
        candidate = rng.subset(design.n, k)
        A = design.Z[candidate].T  # p x k
        gram = A @ A.T
        svals = np.linalg.svd(gram, compute_uv=False)
        if svals[0] > 0.0 and svals[-1] > 1e-12 * svals[0]:
            idx = candidate
            delta = A.T @ np.linalg.solve(gram, b)
            break
    if delta is None:
        raise EstimationError(
            "corrupted instrument rows stayed rank deficient after 20 resamples"
        )
    Y = design.Y.copy()
    Y[idx] += delta
    corrupted = Dataset(X=design.X, Y=Y, Z=design.Z, T=design.T)
    w_corr = two_stage_least_squares(corrupted)
    rel = np.linalg.norm(w_corr + w0) / max(np.linalg.norm(w0), 1e-300)
    if rel > 1e-8:
        raise EstimationError(
            f"negation attack failed its own identity check (rel err {rel:.3e})"
        )
    return corrupted, idx


# ---------------------------------------------------------------------------
# CSV in and out


def _as_name_list(value) -> list:
    if isinstance(value, str):
        return [value]
    return list(value)


def load_csv(path, columns: Mapping) -> Dataset:
    """Load a headered CSV into a Dataset by column roles.

    columns maps roles to header names: "response" (one name),
    "instruments" and "covariates" (name or list of names), optional
    "treatment". Rows with a missing value (empty, na, nan, null; also rows
    too short to reach a mapped column) are dropped with a count warning;
    unparseable cells raise with their line and column.
    """
    response = columns["response"]
    treatment = columns.get("treatment")
    instruments = _as_name_list(columns["instruments"])
    covariates = _as_name_list(columns["covariates"])
    wanted = [response] + ([treatment] if treatment else []) + instruments + covariates

    with open(path, "r", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("no data rows") from None
        header = [h.strip() for h in header]
        positions = {}
        for name in wanted:
            if name not in header:
                raise ValueError(f"column {name!r} not found in header")
            positions[name] = header.index(name)

        parsed = []
        dropped = 0
        for lineno, row in enumerate(reader, start=2):
            record = []
            missing = False
            for name in wanted:
                pos = positions[name]
                cell = row[pos].strip() if pos < len(row) else ""
                if cell.lower() in _MISSING_MARKERS:
                    missing = True
                    break
                try:
                    record.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"line {lineno}, column {name!r}: cannot parse {cell!r}"
                    ) from None
            if missing:
                dropped += 1
                continue
            parsed.append(record)

    if dropped:
        warnings.warn(f"dropped {dropped} rows with missing values")
    if not parsed:
        raise ValueError("no data rows")

    table = np.asarray(parsed, dtype=np.float64)
    cursor = 0
    Y = table[:, cursor]
    cursor += 1
    T = None
    if treatment:
        T = table[:, cursor]
        cursor += 1
    Z = table[:, cursor : cursor + len(instruments)]
    cursor += len(instruments)
    X = table[:, cursor : cursor + len(covariates)]
    return Dataset(X=X, Y=Y, Z=Z, T=T)


def format_float(x: float) -> str:
    """17 significant digits: enough to reproduce any float64 exactly."""
    if math.isnan(x):
        return "nan"
    return f"{x:.17g}"


def save_dataset_csv(path, data: Dataset) -> None:
    """Write a Dataset with generated column names (y, t, z*, x*)."""
    names = ["y"]
    cols = [data.Y]
    if data.T is not None:
        names.append("t")
        cols.append(data.T)
    for j in range(data.p):
        names.append(f"z{j + 1}")
        cols.append(data.Z[:, j])
    for j in range(data.d):
        names.append(f"x{j + 1}")
        cols.append(data.X[:, j])
    with open(path, "w", newline="\n") as handle:
        handle.write(",".join(names) + "\n")
        for i in range(data.n):
            handle.write(",".join(format_float(col[i]) for col in cols) + "\n")


def dataset_columns(data: Dataset) -> Mapping:
    """Role mapping matching save_dataset_csv output."""
    return {
        "response": "y",
        "treatment": "t" if data.T is not None else None,
        "instruments": [f"z{j + 1}" for j in range(data.p)],
        "covariates": [f"x{j + 1}" for j in range(data.d)],
    }


# ---------------------------------------------------------------------------
# diagnostics and the plug-in hyperparameter rule


def diagnose_assumptions(
    model,
    S: ActiveSet,
    w_ref: np.ndarray,
    rng: Optional[RandomSource] = None,
    n_directions: int = 200,
) -> dict:
    """Empirical analogues of the identification and regularity constants.

    jacobian_sigma_min          smallest singular value of the mean Jacobian
    jacobian_second_moment_sup  sup over sampled unit (u, v) of
                                E_S (u . grad g_i v)^2   (an L^2 analogue)
    noise_second_moment_sup     sup over sampled unit v of E_S (v . g_i)^2
                                (a sigma^2 L analogue)
    noise_second_moment_robust  same, MAD-based so outliers do not inflate it
    moment_norm                 || E_S g(w_ref) ||
    """
    rng = rng if rng is not None else RandomSource(0x00D1A6)
    w_ref = np.asarray(w_ref, dtype=np.float64)
    idx = S.indices
    J = mean_jacobian(model, S, w_ref)
    svals = np.linalg.svd(J, compute_uv=False)
    g = model.moments(idx, w_ref)

    jac_sup = 0.0
    noise_sup = 0.0
    noise_rob = 0.0
    p, d = model.moment_dim, model.param_dim
    for _ in range(n_directions):
        u = rng.normal(p)
        u /= np.linalg.norm(u)
        v = rng.normal(d)
        v /= np.linalg.norm(v)
        rows = model.jacobian_dot(idx, w_ref, u)
        jac_sup = max(jac_sup, float(np.mean((rows @ v) ** 2)))
        proj = g @ u
        noise_sup = max(noise_sup, float(np.mean(proj * proj)))
        med = np.median(proj)
        noise_rob = max(noise_rob, (1.4826 * float(np.median(np.abs(proj - med)))) ** 2)

    return {
        "jacobian_sigma_min": float(svals[-1]),
        "jacobian_second_moment_sup": jac_sup,
        "noise_second_moment_sup": noise_sup,
        "noise_second_moment_robust": noise_rob,
        "moment_norm": float(np.linalg.norm(g.mean(axis=0))),
    }


def derive_hyperparams(
    design: Dataset,
    eps: float,
    rng: RandomSource,
    delta: float = 0.05,
    gamma_scale: float = 0.1,
    r0: Optional[float] = None,
    sched: Optional[RadiusSchedule] = None,
) -> HyperParams:
    """Plug-in hyperparameters from diagnostics on the (corrupted) design.

    Safety factors: x2 on L, /2 on lam. The noise scale uses the MAD-based
    diagnostic so planted outliers cannot inflate it, the search radius
    defaults to four times the classical IV estimate's norm, and gamma is a
    small fraction of the default criticality rate (same sqrt(eps) scaling,
    tighter learner stops).
    """
    model = LinearIVModel(design)
    S = ActiveSet.full(design.n)
    try:
        w_ref = two_stage_least_squares(design)
    except EstimationError:
        w_ref = np.zeros(design.d)
    diag = diagnose_assumptions(model, S, w_ref, rng=rng)

    L = 2.0 * math.sqrt(max(diag["jacobian_second_moment_sup"], 1e-300))
    lam = max(0.5 * diag["jacobian_sigma_min"], 1e-8 * max(L, 1.0))
    lam = min(lam, L)
    sigma = math.sqrt(diag["noise_second_moment_robust"] / L)
    eps_hp = min(max(eps, 0.0), 0.499)
    gamma = gamma_scale * sigma * L**1.5 * math.sqrt(eps_hp)
    return HyperParams(
        eps=eps_hp,
        lam=lam,
        L=L,
        sigma=sigma,
        R0=r0 if r0 is not None else 4.0 * max(1.0, float(np.linalg.norm(w_ref))),
        gamma=gamma if gamma > 0 else None,
        delta=delta,
        sched=sched if sched is not None else RadiusSchedule.practice(),
    )


def _whitener(columns: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root of a column block's second-moment matrix.

    Eigenvalues are floored at 1e-8 of the largest so rank-deficient blocks
    yield a finite transform instead of amplifying null directions; such
    designs fail estimation later with a clear singularity error.
    """
    second = columns.T @ columns / len(columns)
    evals, evecs = np.linalg.eigh(second)
    top = float(evals[-1])
    if top <= 0.0:
        return np.eye(second.shape[0])
    evals = np.maximum(evals, 1e-8 * top)
    return (evecs * evals**-0.5) @ evecs.T


# Full whitening is only worth its cost when columns are genuinely
# collinear (a squared term next to its base, an intercept next to a
# binary column: cosines 0.85+). It is computed from the observed rows,
# so on a near-orthogonal block it would also normalize away any planted
# rank-one corruption direction and hide the attack from the spectral
# filter; an eps-fraction of identical planted rows only pushes pairwise
# cosines to about eps, far below this gate.
_COLLINEARITY_GATE = 0.8


def _block_transform(columns: np.ndarray) -> np.ndarray:
    """Per-block reparameterization applied before the self-calibrating fit.

    Default is diagonal scaling to unit root-mean-square columns, which
    puts score coordinates in like units without depending on the joint
    column geometry. Only when the rescaled block shows strong
    collinearity (any off-diagonal cosine above the gate) is it fully
    whitened, since then the clean score covariance itself is so
    anisotropic that the spectral bounds would read it as corruption.
    """
    rms = np.sqrt(np.mean(columns**2, axis=0))
    top = float(rms.max(initial=0.0))
    if top <= 0.0:
        return np.eye(columns.shape[1])
    rms = np.maximum(rms, 1e-8 * top)
    unit = columns / rms
    cos = unit.T @ unit / len(unit)
    np.fill_diagonal(cos, 0.0)
    if float(np.max(np.abs(cos))) > _COLLINEARITY_GATE:
        return _whitener(columns)
    return np.diag(1.0 / rms)


def robust_linear_estimate(
    design: Dataset,
    eps: float,
    rng: RandomSource,
    hyper: Union[HyperParams, str] = "plugin",
    rescale: bool = True,
    gamma_scale: float = 0.1,
    delta: float = 0.05,
    sched: Optional[RadiusSchedule] = None,
    model_kind: str = "linear",
    slack: float = PRACTICE_SLACK,
    bound_mode: str = "practice",
):
    """Iterated robust GMM fit of a linear or logistic IV design.

    With hyper="plugin", the feature and instrument blocks are first put
    through a linear reparameterization (only inner products X_i @ w enter
    the moments, so solutions map back exactly; inverted on output):
    columns are scaled to unit root-mean-square, and a block is fully
    whitened instead when its columns are strongly collinear. The practice
    filter bounds rely on this: they compare the top score-covariance
    direction against the rest of the spectrum, so clean anisotropy from
    collinear raw columns (a squared term next to its base, an intercept
    next to a binary column) would read as corruption, while whitening a
    well-conditioned block would normalize planted corruption directions
    away along with the clean structure. The sever loop defaults to the
    practice bounds because the certified worst-case bounds evaluated at
    plug-in constants sit far above any realistic score variance and never
    fire on corruptions of ordinary norm. An explicit HyperParams is taken
    to describe the raw design and is used as-is, without rescaling.
    Returns (w, EstimateReport).
    """
    if model_kind == "linear":
        make_model = LinearIVModel
    elif model_kind == "logistic":
        make_model = LogisticIVModel
    else:
        raise ValueError(f"model_kind must be 'linear' or 'logistic', got {model_kind!r}")

    if isinstance(hyper, HyperParams):
        report = iterated_gmm_sever(
            make_model(design), hyper, rng.child("est"), slack=slack, bound_mode=bound_mode
        )
        return report.w_hat, report

    if hyper != "plugin":
        raise ValueError(f"hyper must be 'plugin' or a HyperParams, got {hyper!r}")
    if rescale:
        wx = _block_transform(design.X)
        wz = _block_transform(design.Z)
        scaled = Dataset(
            X=design.X @ wx, Y=design.Y, Z=design.Z @ wz, T=design.T
        )
    else:
        wx = np.eye(design.d)
        scaled = design
    hp = derive_hyperparams(
        scaled, eps, rng.child("hp"), delta=delta, gamma_scale=gamma_scale, sched=sched
    )
    report = iterated_gmm_sever(
        make_model(scaled), hp, rng.child("est"), slack=slack, bound_mode=bound_mode
    )
    return wx @ report.w_hat, report


# ---------------------------------------------------------------------------
# corruption sweeps


@dataclass(frozen=True)
class SweepConfig:
    """One corruption sweep: a grid of eps values times repetitions.

    kind "synthetic" generates the HTE DGP per cell and records l2_error
    against the true effect vector; kind "semi" loads a fixed design from
    data_path (or uses an in-memory stand-in when data_path is None at the
    call site) and records the fitted ATE. estimators must be a subset of
    ESTIMATOR_NAMES. hyper is "plugin" or a fixed HyperParams.
    """

    kind: str
    eps_grid: tuple
    repetitions: int
    seed: int
    estimators: tuple = ESTIMATOR_NAMES
    attack: str = "all-ones"
    n: int = 10000
    d: int = 20
    instrument: str = "bernoulli01"
    data_path: Optional[str] = None
    columns: Optional[Mapping] = None
    intercept: bool = True
    hyper: Union[HyperParams, str] = "plugin"
    rescale: bool = True
    gamma_scale: float = 0.1
    delta: float = 0.05
    slack: float = PRACTICE_SLACK
    bound_mode: str = "practice"
    stamp_runtime: bool = False

    def __post_init__(self):
        object.__setattr__(self, "eps_grid", tuple(float(e) for e in self.eps_grid))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.kind not in ("synthetic", "semi"):
            raise ValueError(f"unknown sweep kind {self.kind!r}")
        if not self.eps_grid:
            raise ValueError("eps_grid is empty")
        for e in self.eps_grid:
            if not 0.0 < e <= 0.5:
                raise ValueError(f"eps grid values must lie in (0, 0.5], got {e}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        unknown = set(self.estimators) - set(ESTIMATOR_NAMES)
        if unknown:
            raise ValueError(f"unknown estimators: {sorted(unknown)}")
        if self.attack not in ("all-ones", "negation", "none"):
            raise ValueError(f"unknown attack {self.attack!r}")
        if self.bound_mode not in ("theory", "practice"):
            raise ValueError(
                f"bound_mode must be 'theory' or 'practice', got {self.bound_mode!r}"
            )
        if self.kind == "synthetic" and self.attack == "negation":
            raise ValueError("negation attack applies to semi-synthetic designs")
        if self.kind == "semi" and self.attack == "all-ones":
            raise ValueError("all-ones attack applies to synthetic characteristics")


@dataclass(frozen=True)
class SweepRow:
    """One estimator evaluation; value None means the estimator failed."""

    epsilon: float
    estimator: str
    metric: str
    value: Optional[float]
    seed: int
    runtime_ms: float


def _semi_design(cfg: SweepConfig) -> Dataset:
    if cfg.data_path is None:
        raise ValueError("semi sweep requires data_path")
    columns = cfg.columns if cfg.columns is not None else CARD_STANDIN_COLUMNS
    base = load_csv(cfg.data_path, columns)
    return scalar_treatment_design(base, intercept=cfg.intercept)


def _run_cell(cfg: SweepConfig, master_seed: int, eps: float, rep: int):
    cell_rng = RandomSource(master_seed).child(f"eps={eps:.6g}/rep={rep}")
    if cfg.kind == "synthetic":
        base, theta = gen_synthetic_hte(
            cfg.n, cfg.d, cell_rng.child("dgp"), cfg.instrument
        )
        if cfg.attack == "all-ones":
            base, _ = corrupt_all_ones(base, eps, cell_rng.child("attack"))
        design = hte_design(base)
        metric = "l2_error"
    else:
        design = _semi_design(cfg)
        if cfg.attack == "negation":
            design, _ = corrupt_negation(design, eps, cell_rng.child("attack"))
        theta = None
        metric = "ate"

    rows = []
    for name in cfg.estimators:
        start = time.perf_counter()
        value: Optional[float] = None
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                if name == "classical-iv":
                    w = two_stage_least_squares(design)
                elif name == "two-stage-huber":
                    w = two_stage_huber(design)
                else:
                    w, _ = robust_linear_estimate(
                        design,
                        eps,
                        cell_rng.child(f"robust/{name}"),
                        hyper=cfg.hyper,
                        rescale=cfg.rescale,
                        gamma_scale=cfg.gamma_scale,
                        delta=cfg.delta,
                        slack=cfg.slack,
                        bound_mode=cfg.bound_mode,
                    )
            if cfg.kind == "synthetic":
                value = float(np.linalg.norm(w - theta))
            else:
                value = float(w[0])
        except (EstimationError, np.linalg.LinAlgError):
            value = None
        runtime_ms = (time.perf_counter() - start) * 1000.0
        rows.append(
            SweepRow(
                epsilon=eps,
                estimator=name,
                metric=metric,
                value=value,
                seed=cell_rng.seed,
                runtime_ms=runtime_ms if cfg.stamp_runtime else 0.0,
            )
        )
    return rows


def run_sweep(cfg: SweepConfig, rng: RandomSource, jobs: int = 1):
    """Run every (eps, estimator, repetition) cell; failures become rows too.

    Cells are seeded by labeled children of rng, so any row can be re-run in
    isolation and the table is identical for a given master seed regardless
    of jobs. Rows come back ordered by (eps, estimator, repetition).
    """
    cells = [(eps, rep) for eps in cfg.eps_grid for rep in range(cfg.repetitions)]
    master_seed = rng.seed
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_run_cell, cfg, master_seed, eps, rep)
                for eps, rep in cells
            ]
            per_cell = [f.result() for f in futures]
    else:
        per_cell = [_run_cell(cfg, master_seed, eps, rep) for eps, rep in cells]

    by_cell = {cell: batch for cell, batch in zip(cells, per_cell)}
    rows = []
    for eps in cfg.eps_grid:
        for name in cfg.estimators:
            for rep in range(cfg.repetitions):
                batch = by_cell[(eps, rep)]
                rows.extend(r for r in batch if r.estimator == name)
    return rows


def aggregate_rows(rows: Sequence[SweepRow]):
    """Per (eps, estimator) mean and standard error over successful rows."""
    order = []
    groups = {}
    for row in rows:
        key = (row.epsilon, row.estimator, row.metric)
        if key not in groups:
            groups[key] = []
            order.append(key)
        if row.value is not None:
            groups[key].append(row.value)
    out = []
    for key in order:
        vals = np.asarray(groups[key], dtype=np.float64)
        count = int(vals.size)
        if count == 0:
            mean, stderr = float("nan"), float("nan")
        elif count == 1:
            mean, stderr = float(vals[0]), float("nan")
        else:
            mean = float(vals.mean())
            stderr = float(vals.std(ddof=1) / math.sqrt(count))
        out.append(
            {
                "epsilon": key[0],
                "estimator": key[1],
                "metric": key[2],
                "mean": mean,
                "stderr": stderr,
                "count": count,
            }
        )
    return out


def write_rows_csv(path, rows: Sequence[SweepRow], header_lines: Sequence[str] = ()):
    with open(path, "w", newline="\n") as handle:
        for line in header_lines:
            handle.write(f"# {line}\n")
        handle.write("epsilon,estimator,metric,value,seed,runtime_ms\n")
        for r in rows:
            value = "failed" if r.value is None else format_float(r.value)
            handle.write(
                f"{format_float(r.epsilon)},{r.estimator},{r.metric},"
                f"{value},{r.seed},{format_float(r.runtime_ms)}\n"
            )


def write_aggregate_csv(path, aggregates, header_lines: Sequence[str] = ()):
    with open(path, "w", newline="\n") as handle:
        for line in header_lines:
            handle.write(f"# {line}\n")
        handle.write("epsilon,estimator,metric,mean,stderr,count\n")
        for a in aggregates:
            handle.write(
                f"{format_float(a['epsilon'])},{a['estimator']},{a['metric']},"
                f"{format_float(a['mean'])},{format_float(a['stderr'])},{a['count']}\n"
            )
