"""Two-stage search-advertising response model.

Stage 1 regresses log spend on log demand, log CPC and log CTR with
time-varying coefficients; its residual is the budget control function.
Stage 2 fits the reduced-form sales equation

    ln S_t = a0*(t) + g*(t) ln S_{t-1} + b*(t) ln Spend + t1*(t) ln CTR
             + t2*(t) KLength + t3*(t) Retailer + t4*(t) Brand
             + t5*(t) Holiday + l1*(t) Position + l3*(t) ln CVR
             + a1* mu_B + e

and the structural trajectories follow from eta = 1 - g*:
a0 = a0*/eta, b = b*/eta, tau_m = tau_m*/(eta b), l = l*/eta.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from . import tvc
from .spline_basis import BasisSpec

logger = logging.getLogger(__name__)

STAGE1_COVARIATES = ["ln_demand", "ln_cpc", "ln_ctr"]
STAGE2_COVARIATES = [
    "ln_sales_lag", "ln_spend", "ln_ctr", "klength", "retailer", "brand",
    "holiday", "position", "ln_cvr",
]
CORRECTION = "budget_residual"
FORBIDDEN_STAGE2 = {"ln_cpc"}
COEFFICIENT_OF = {
    "intercept": "alpha0_star",
    "ln_sales_lag": "gamma_star",
    "ln_spend": "beta_star",
    "ln_ctr": "tau1_star",
    "klength": "tau2_star",
    "retailer": "tau3_star",
    "brand": "tau4_star",
    "holiday": "tau5_star",
    "position": "lambda1_star",
    "ln_cvr": "lambda3_star",
    CORRECTION: "alpha1_star",
}
STAGE1_COEFFICIENT_OF = {"intercept": "z0", "ln_demand": "z1", "ln_cpc": "z2", "ln_ctr": "z3"}
REQUIRED_COLUMNS = [
    "ad_id", "day", "impressions", "clicks", "spend", "conversions", "sales",
    "position", "klength", "brand", "retailer", "holiday",
]
COUNT_COLUMNS = ["impressions", "clicks", "conversions", "sales"]
TAU_NAMES = ("tau1", "tau2", "tau3", "tau4", "tau5")


class SchemaError(ValueError):
    pass


@dataclass
class PrepConfig:
    log_offset: float = 1.0
    spend_offset: float = 0.0
    cpc_source: str = "auto"  # auto | avg_cpc | spend_per_click
    day_range: tuple = None
    position_squared: bool = False


def _row_list(mask: pd.Series, limit: int = 20) -> str:
    rows = (np.flatnonzero(mask.to_numpy()) + 1).tolist()
    more = f" (+{len(rows) - limit} more)" if len(rows) > limit else ""
    return ", ".join(map(str, rows[:limit])) + more


def validate_records(records: pd.DataFrame):
    """Schema and RawAdDay invariants; row numbers are 1-based data rows."""
    if len(records) == 0:
        raise SchemaError("no rows")
    missing = [c for c in REQUIRED_COLUMNS if c not in records.columns]
    if missing:
        raise SchemaError(f"missing columns: {missing}")
    problems = []
    numeric = [c for c in REQUIRED_COLUMNS if c != "ad_id"]
    numeric += [c for c in ("demand", "avg_cpc", "items") if c in records.columns]
    for c in numeric:
        bad = pd.to_numeric(records[c], errors="coerce").isna()
        if bad.any():
            problems.append(f"non-numeric or missing '{c}' at rows {_row_list(bad)}")
    if problems:
        raise SchemaError("; ".join(problems))
    for c in COUNT_COLUMNS + ["spend"] + [c for c in ("demand", "items") if c in records.columns]:
        bad = records[c] < 0
        if bad.any():
            problems.append(f"negative {c} at rows {_row_list(bad)}")
    bad = records["clicks"] > records["impressions"]
    if bad.any():
        problems.append(f"clicks > impressions at rows {_row_list(bad)}")
    bad = records["conversions"] > records["clicks"]
    if bad.any():
        problems.append(f"conversions > clicks at rows {_row_list(bad)}")
    bad = (records["impressions"] > 0) & (records["position"] < 1)
    if bad.any():
        problems.append(f"position < 1 with impressions at rows {_row_list(bad)}")
    dup = records.duplicated(["ad_id", "day"], keep=False)
    if dup.any():
        problems.append(f"duplicate (ad_id, day) at rows {_row_list(dup)}")
    if problems:
        raise SchemaError("; ".join(problems))


def prepare_panel(records: pd.DataFrame, config: PrepConfig = None) -> tvc.ModelPanel:
    """Log-transform, lag and filter raw ad-days into an estimation panel.

    Lags are taken over consecutive observations of an ad (not calendar
    days) before any row is excluded, and the first observation of each
    ad is dropped. Rows with zero impressions, clicks, conversions, spend
    or demand are excluded because their ratios or logs are undefined.
    Exclusion counts are stored in ``panel.meta["exclusions"]``.
    """
    config = config or PrepConfig()
    validate_records(records)
    df = records.sort_values(["ad_id", "day"], kind="mergesort").reset_index(drop=True)
    has_demand = "demand" in df.columns
    if config.cpc_source == "avg_cpc" and "avg_cpc" not in df.columns:
        raise SchemaError("cpc_source=avg_cpc but no avg_cpc column")
    use_avg_cpc = "avg_cpc" in df.columns and config.cpc_source in ("auto", "avg_cpc")

    lo, hi = config.day_range or (df["day"].min(), df["day"].max())
    if not hi > lo:
        raise SchemaError("need at least two distinct days")
    eps = config.log_offset
    df["ln_sales_lag"] = np.log(df.groupby("ad_id", sort=False)["sales"].shift(1) + eps)

    exclusions = {"first_observation": int(df["ln_sales_lag"].isna().sum())}
    keep = df["ln_sales_lag"].notna()
    reasons = [
        ("zero_impressions", df["impressions"] <= 0),
        ("zero_clicks", df["clicks"] <= 0),
        ("zero_conversions", df["conversions"] <= 0),
        ("zero_spend", df["spend"] + config.spend_offset <= 0),
    ]
    if has_demand:
        reasons.append(("zero_demand", df["demand"] <= 0))
    if use_avg_cpc:
        reasons.append(("zero_cpc", df["avg_cpc"] <= 0))
    for name, mask in reasons:
        exclusions[name] = int((keep & mask).sum())
        keep &= ~mask
    df = df[keep].reset_index(drop=True)
    if len(df) == 0:
        raise SchemaError("no rows left after exclusions")

    out = pd.DataFrame({"ad_id": df["ad_id"].to_numpy(), "day": df["day"].to_numpy()})
    out["t"] = (df["day"].to_numpy(float) - lo) / (hi - lo)
    out["ln_sales"] = np.log(df["sales"] + eps)
    out["ln_sales_lag"] = df["ln_sales_lag"]
    out["ln_spend"] = np.log(df["spend"] + config.spend_offset)
    out["ln_ctr"] = np.log(df["clicks"] / df["impressions"])
    out["ln_cvr"] = np.log(df["conversions"] / df["clicks"])
    cpc = df["avg_cpc"] if use_avg_cpc else df["spend"] / df["clicks"]
    out["ln_cpc"] = np.log(cpc)
    if has_demand:
        out["ln_demand"] = np.log(df["demand"].astype(float))
    for c in ("klength", "retailer", "brand", "holiday", "position"):
        out[c] = df[c].astype(float)
    if config.position_squared:
        out["position_sq"] = out["position"] ** 2

    covariates = list(STAGE2_COVARIATES)
    if config.position_squared:
        covariates.insert(covariates.index("position") + 1, "position_sq")
    meta = {
        "exclusions": exclusions,
        "n_records": int(len(records)),
        "n_rows": int(len(out)),
        "has_demand": has_demand,
        "cpc_source": "avg_cpc" if use_avg_cpc else "spend_per_click",
    }
    return tvc.ModelPanel(out, response="ln_sales", covariates=covariates,
                          time_map={"day_min": float(lo), "day_max": float(hi)},
                          meta=meta)


def make_basis(panel: tvc.ModelPanel, q: int, H: int) -> BasisSpec:
    """Knots from the observed times; the domain spans the whole normalized
    day range so trajectories can be read on [0, 1] even though each ad's
    first day is lost to the lag."""
    t = panel.data[panel.time].to_numpy(float)
    domain = (min(0.0, float(t.min())), max(1.0, float(t.max())))
    return BasisSpec.from_times(t, q=q, H=H, time_domain=domain)


@dataclass
class Stage1Result:
    residuals: np.ndarray
    model: tvc.FittedTvcModel
    report: dict


def _maybe_standardize(view: tvc.ModelPanel, names, enabled: bool) -> tvc.ModelPanel:
    return tvc.standardize(view, names) if enabled and names else view


def stage1_budget(panel: tvc.ModelPanel, spec: BasisSpec, standardize: bool = True) -> Stage1Result:
    missing = [c for c in STAGE1_COVARIATES + ["ln_spend"] if c not in panel.data.columns]
    if missing:
        raise SchemaError(f"missing stage-1 regressor: {missing}")
    view = tvc.ModelPanel(panel.data, response="ln_spend", covariates=STAGE1_COVARIATES,
                          subject=panel.subject, time=panel.time, time_map=panel.time_map)
    model = tvc.fit(_maybe_standardize(view, STAGE1_COVARIATES, standardize), spec)
    y = view.data["ln_spend"].to_numpy(float)
    resid = model.residuals
    r2 = 1.0 - (resid @ resid) / np.sum((y - y.mean()) ** 2)
    report = {
        "r_squared": float(r2),
        "residual_sd": float(resid.std()),
        "stats": dict(model.stats),
        "lambdas": dict(model.lambdas),
    }
    return Stage1Result(resid, model, report)


@dataclass
class Stage2Result:
    model: tvc.FittedTvcModel
    correction_included: bool
    alpha1: float
    alpha1_se: float
    flags: list = field(default_factory=list)


def _correction_is_null(mu: np.ndarray, scale: float) -> bool:
    return float(np.linalg.norm(mu)) <= 1e-10 * max(scale, 1.0)


def stage2_response(panel: tvc.ModelPanel, mu=None, spec: BasisSpec = None,
                    covariates=None, standardize: bool = True) -> Stage2Result:
    """Reduced-form sales equation with an optional control-function term.

    ``mu`` must be aligned row for row with ``panel``; pass ``None`` to
    fit without correction. A numerically null ``mu`` is omitted and
    reported with a zero coefficient.
    """
    covariates = list(covariates or panel.covariates)
    bad = FORBIDDEN_STAGE2 & set(covariates)
    if bad:
        raise SchemaError(f"{sorted(bad)} cannot enter the sales equation (CPC acts only through spend)")
    if CORRECTION in covariates:
        raise SchemaError(f"'{CORRECTION}' is added from the stage-1 residuals, not listed")
    data = panel.data
    flags = []
    constant = []
    if mu is not None:
        mu = np.asarray(mu, dtype=float).ravel()
        if mu.size != panel.n:
            raise SchemaError(f"misaligned residuals: {mu.size} values for {panel.n} rows")
        if _correction_is_null(mu, np.linalg.norm(data["ln_spend"])):
            flags.append("budget correction is numerically zero and was omitted")
        else:
            data = data.assign(**{CORRECTION: mu})
            constant = [CORRECTION]
    view = tvc.ModelPanel(data, response="ln_sales", covariates=covariates,
                          constant_covariates=constant, subject=panel.subject,
                          time=panel.time, time_map=panel.time_map)
    to_scale = [c for c in covariates if not tvc._is_binary(view.data[c])]
    model = tvc.fit(_maybe_standardize(view, to_scale, standardize), spec)
    if constant:
        tr = model.eval_coefficient(CORRECTION, [spec.time_domain[0]])
        alpha1, alpha1_se = float(tr.estimate[0]), float(tr.se[0])
    else:
        alpha1, alpha1_se = 0.0, 0.0
    return Stage2Result(model, bool(constant), alpha1, alpha1_se, flags)


def reduced_from_structural(s: dict) -> dict:
    """Forward map from structural to reduced-form trajectories."""
    eta = np.asarray(s["eta"], dtype=float)
    beta = np.asarray(s["beta"], dtype=float)
    out = {
        "gamma_star": 1.0 - eta,
        "alpha0_star": eta * np.asarray(s["alpha0"]),
        "beta_star": eta * beta,
        "lambda1_star": eta * np.asarray(s["lambda1"]),
        "lambda3_star": eta * np.asarray(s["lambda3"]),
    }
    for m in TAU_NAMES:
        out[m + "_star"] = eta * beta * np.asarray(s[m])
    return out


@dataclass
class StructuralTrajectories:
    t: np.ndarray
    values: dict
    se: dict
    reason: np.ndarray
    alpha1: float = 0.0
    alpha1_se: float = 0.0
    eta_floor: float = 0.02
    beta_floor: float = 1e-6

    NAMES = ("eta", "carryover", "alpha0", "beta") + TAU_NAMES + ("lambda1", "lambda3")

    def __getattr__(self, name):
        values = self.__dict__.get("values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    def reason_for(self, name: str) -> np.ndarray:
        """Reason code per grid point, empty where the value is defined."""
        if name in ("eta", "carryover"):
            return np.full(self.t.size, "", dtype=object)
        if name in TAU_NAMES:
            return self.reason
        return np.where(self.reason == "eta_at_floor", "eta_at_floor", "").astype(object)

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for name in self.NAMES:
            frames.append(pd.DataFrame({
                "parameter": name, "t": self.t, "estimate": self.values[name],
                "se": self.se.get(name, np.full(self.t.size, np.nan)),
                "reason": self.reason_for(name),
            }))
        return pd.concat(frames, ignore_index=True)

    def to_dict(self) -> dict:
        def clean(a):
            return [None if not np.isfinite(v) else float(v) for v in np.asarray(a, float)]

        return {
            "t": self.t.tolist(),
            "values": {k: clean(v) for k, v in self.values.items()},
            "se": {k: clean(v) for k, v in self.se.items()},
            "reason": [str(r) for r in self.reason],
            "alpha1": self.alpha1,
            "alpha1_se": self.alpha1_se,
            "eta_floor": self.eta_floor,
            "beta_floor": self.beta_floor,
        }


def _ratio(a, b, var_a=None, var_b=None, cov_ab=None):
    value = a / b
    if var_a is None:
        return value, None
    var = var_a / b ** 2 - 2 * a * cov_ab / b ** 3 + a ** 2 * var_b / b ** 4
    return value, np.sqrt(np.maximum(var, 0.0))


def structural_from_reduced(reduced: dict, eta_floor: float = 0.02,
                            beta_floor: float = 1e-6, cov: dict = None):
    """Invert the reduced-form identities pointwise, masking unsafe divisions.

    ``reduced`` maps ``*_star`` names (and ``gamma_star``) to arrays.
    ``cov`` optionally holds pointwise variances ``("x", "x")`` and
    covariances ``("x", "y")`` of reduced-form values for delta-method
    standard errors. Returns ``(values, se, reason)``.
    """
    gamma = np.asarray(reduced["gamma_star"], dtype=float)
    eta = 1.0 - gamma
    carry = 1.0 - eta
    n = eta.size
    eta_bad = np.abs(eta) <= eta_floor
    safe_eta = np.where(eta_bad, 1.0, eta)

    def v(a, b=None):
        if cov is None:
            return None
        return cov[(a, b or a)] if (a, b or a) in cov else cov[(b or a, a)]

    values, se = {"eta": eta, "carryover": carry}, {}
    if cov is not None:
        se["eta"] = se["carryover"] = np.sqrt(v("gamma_star"))
    for name in ("alpha0", "beta", "lambda1", "lambda3"):
        star = name + "_star"
        # d(x*/(1-g))/dg = x*/(1-g)^2: same form as a ratio with var_b = var_g, cov = -cov(x*, g)
        val, s = _ratio(np.asarray(reduced[star], float), safe_eta,
                        v(star), v("gamma_star"),
                        None if cov is None else -v(star, "gamma_star"))
        values[name] = np.where(eta_bad, np.nan, val)
        if s is not None:
            se[name] = np.where(eta_bad, np.nan, s)
    beta = values["beta"]
    beta_bad = ~eta_bad & (np.abs(beta) <= beta_floor)
    bstar = np.asarray(reduced["beta_star"], float)
    safe_bstar = np.where(eta_bad | beta_bad | (bstar == 0), 1.0, bstar)
    for m in TAU_NAMES:
        star = m + "_star"
        # tau = tau*/(eta beta) = tau*/beta*
        val, s = _ratio(np.asarray(reduced[star], float), safe_bstar,
                        v(star), v("beta_star"),
                        None if cov is None else v(star, "beta_star"))
        values[m] = np.where(eta_bad | beta_bad, np.nan, val)
        if s is not None:
            se[m] = np.where(eta_bad | beta_bad, np.nan, s)
    reason = np.full(n, "", dtype=object)
    reason[beta_bad] = "beta_at_floor"
    reason[eta_bad] = "eta_at_floor"
    return values, se, reason


def recover_structural(reduced: tvc.FittedTvcModel, grid, eta_floor: float = 0.02,
                       beta_floor: float = 1e-6) -> StructuralTrajectories:
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    needed = [f for f in COEFFICIENT_OF if f != CORRECTION]
    absent = [f for f in needed if f != "intercept" and f not in reduced.functions]
    if absent:
        raise SchemaError(f"reduced model lacks coefficient functions: {absent}")
    contrasts = {COEFFICIENT_OF[f]: reduced._contrasts(f, grid, "raw") for f in needed}
    theta, V = reduced.coefficients, reduced.covariance
    red = {k: C @ theta for k, C in contrasts.items()}
    cov = {}
    for k, C in contrasts.items():
        CV = C @ V
        cov[(k, k)] = np.einsum("ij,ij->i", CV, C)
        for other in ("gamma_star", "beta_star"):
            cov[(k, other)] = np.einsum("ij,ij->i", CV, contrasts[other])
    values, se, reason = structural_from_reduced(red, eta_floor, beta_floor, cov)
    alpha1 = alpha1_se = 0.0
    if CORRECTION in reduced.constant_covariates:
        tr = reduced.eval_coefficient(CORRECTION, grid[:1], "raw")
        alpha1, alpha1_se = float(tr.estimate[0]), float(tr.se[0])
    return StructuralTrajectories(grid, values, se, reason, alpha1, alpha1_se,
                                  eta_floor, beta_floor)


def reduced_trajectories(model: tvc.FittedTvcModel, grid, scale="raw") -> list:
    out = []
    for f in model.functions + model.constant_covariates:
        tr = model.eval_coefficient(f, grid, scale)
        label = COEFFICIENT_OF.get(f, STAGE1_COEFFICIENT_OF.get(f, f))
        out.append(replace(tr, covariate=label))
    return out


@dataclass(frozen=True)
class ModelSpec:
    name: str
    q: int
    H: int

    @property
    def trend(self) -> str:
        if self.q == 0 and self.H == 0:
            return "NA"
        return {0: "constant", 1: "linear", 2: "quadratic", 3: "cubic"}[self.q] + " spline"


def standard_specs(H: int = 30) -> list:
    return [
        ModelSpec("MODEL-Time-Invariant", 0, 0),
        ModelSpec("MODEL-Time-Varying-linear", 1, H),
        ModelSpec("MODEL-Time-Varying-quadratic", 2, H),
        ModelSpec("MODEL-Time-Varying-cubic", 3, H),
    ]


@dataclass
class PipelineResult:
    spec: BasisSpec
    stage1: Stage1Result
    stage2: Stage2Result
    flags: list


def run_pipeline(panel: tvc.ModelPanel, spec: BasisSpec, correction: bool = True,
                 standardize: bool = True) -> PipelineResult:
    flags = []
    stage1 = None
    mu = None
    if correction:
        if "ln_demand" in panel.data.columns:
            stage1 = stage1_budget(panel, spec, standardize)
            mu = stage1.residuals
        else:
            msg = "no demand column: stage 1 skipped, budget correction omitted"
            logger.warning(msg)
            flags.append(msg)
    stage2 = stage2_response(panel, mu, spec, standardize=standardize)
    return PipelineResult(spec, stage1, stage2, flags + stage2.flags)


def compare_specs(panel: tvc.ModelPanel, specs, n_jobs: int = 1, correction: bool = True,
                  standardize: bool = True) -> pd.DataFrame:
    """Run the two-stage pipeline per spec and tabulate sales-equation fit.

    Statistics are those of the stage-2 (sales) fit; stage-1 statistics
    are reported alongside. The lowest AIC is marked ``best_aic``.
    """
    specs = list(specs)
    if len(specs) < 2:
        raise ValueError("need >=2 specs")

    def one(ms: ModelSpec):
        res = run_pipeline(panel, make_basis(panel, ms.q, ms.H), correction, standardize)
        st = res.stage2.model.stats
        row = {
            "model": ms.name, "trend": ms.trend, "q": ms.q, "H": ms.H,
            "neg2_res_log_likelihood": st["neg2_res_log_likelihood"],
            "aic": st["aic"], "bic": st["bic"],
            "n_params": st["effective_param_count"], "n_obs": st["n_obs"],
        }
        if res.stage1 is not None:
            s1 = res.stage1.model.stats
            row.update(stage1_neg2_res_log_likelihood=s1["neg2_res_log_likelihood"],
                       stage1_aic=s1["aic"], stage1_bic=s1["bic"])
        return row

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            rows = list(pool.map(one, specs))
    else:
        rows = [one(ms) for ms in specs]
    table = pd.DataFrame(rows)
    table["best_aic"] = table["aic"] == table["aic"].min()
    return table
