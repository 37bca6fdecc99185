"""Synthetic search-advertising panels with known coefficient functions.

Sales follow the partial-adjustment recursion in its reduced (linear)
form: log sales today is a time-varying combination of yesterday's log
sales, log spend, log CTR, keyword attributes, ad position and log CVR.
Spend obeys the pay-per-click identity ``spend = demand * CTR * CPC``
times a log-normal budget shock that can be correlated with the sales
error, which is what makes budgets endogenous.

Truths are given for the reduced-form coefficients (``*_star`` names)
together with ``eta``; the carryover coefficient is ``1 - eta``.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy.interpolate import CubicSpline

REDUCED_NAMES = (
    "alpha0_star", "beta_star", "tau1_star", "tau2_star", "tau3_star",
    "tau4_star", "tau5_star", "lambda1_star", "lambda3_star",
)
STRUCTURAL_NAMES = (
    "eta", "carryover", "alpha0", "beta", "tau1", "tau2", "tau3", "tau4",
    "tau5", "lambda1", "lambda3",
)
# regressor multiplying each reduced-form coefficient
REGRESSOR_OF = {
    "alpha0_star": None, "beta_star": "ln_spend", "tau1_star": "ln_ctr",
    "tau2_star": "klength", "tau3_star": "retailer", "tau4_star": "brand",
    "tau5_star": "holiday", "lambda1_star": "position", "lambda3_star": "ln_cvr",
}
CSV_COLUMNS = [
    "ad_id", "day", "impressions", "clicks", "spend", "conversions", "items",
    "sales", "position", "klength", "brand", "retailer", "holiday", "demand",
    "avg_cpc",
]
DIVERGENCE_LIMIT = 50.0


class SimulationError(RuntimeError):
    pass


class TruthFunction:
    """A coefficient function of normalized time built from a small dict.

    Kinds: ``{"kind": "constant", "value": c}``,
    ``{"kind": "polynomial", "coeffs": [c0, c1, ...]}`` (ascending powers),
    ``{"kind": "sinusoid", "amplitude": a, "frequency": f, "phase": p,
    "offset": o}`` giving ``o + a sin(2 pi f t + p)``, and
    ``{"kind": "spline", "t": [...], "values": [...]}`` (natural cubic
    interpolant through control points).
    """

    def __init__(self, spec):
        if isinstance(spec, (int, float)):
            spec = {"kind": "constant", "value": float(spec)}
        self.spec = dict(spec)
        kind = self.spec.get("kind")
        if kind == "constant":
            self._f = lambda t, c=float(self.spec["value"]): np.full_like(t, c)
        elif kind == "polynomial":
            coeffs = np.asarray(self.spec["coeffs"], dtype=float)
            self._f = lambda t: np.polynomial.polynomial.polyval(t, coeffs)
        elif kind == "sinusoid":
            a = float(self.spec.get("amplitude", 1.0))
            fr = float(self.spec.get("frequency", 1.0))
            ph = float(self.spec.get("phase", 0.0))
            off = float(self.spec.get("offset", 0.0))
            self._f = lambda t: off + a * np.sin(2 * np.pi * fr * t + ph)
        elif kind == "spline":
            cs = CubicSpline(np.asarray(self.spec["t"], float),
                             np.asarray(self.spec["values"], float), bc_type="natural")
            self._f = lambda t: cs(t)
        else:
            raise ValueError(f"unknown truth kind {kind!r}")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.asarray(self._f(t), dtype=float)


@dataclass
class CovariateGenerators:
    log_demand_mean: float = 9.9
    log_demand_ad_sd: float = 0.5
    log_demand_day_sd: float = 0.3
    impression_share: tuple = (0.4, 0.9)
    log_ctr_mean: float = -3.0
    log_ctr_ad_sd: float = 0.2
    log_ctr_day_sd: float = 0.25
    log_cvr_mean: float = -2.3
    log_cvr_ad_sd: float = 0.2
    log_cvr_day_sd: float = 0.25
    log_cpc_mean: float = -0.22
    log_cpc_ad_sd: float = 0.2
    log_cpc_day_sd: float = 0.2
    position_log_mean: float = 0.3
    position_ad_sd: float = 0.3
    position_day_sd: float = 0.2
    klength_range: tuple = (1, 6)
    p_brand: float = 0.5
    p_retailer: float = 0.5
    p_holiday: float = 0.3


DEFAULT_TRUTH = {
    "alpha0_star": 2.5,
    "beta_star": 0.3,
    "tau1_star": 0.1,
    "tau2_star": -0.05,
    "tau3_star": 0.1,
    "tau4_star": 0.15,
    "tau5_star": 0.05,
    "lambda1_star": -0.1,
    "lambda3_star": 0.2,
}


@dataclass
class SimConfig:
    n_ads: int = 50
    horizon_days: int = 60
    seed: int = None
    truth: dict = field(default_factory=dict)
    eta_truth: object = 0.5
    noise_sd: float = 0.1
    budget_shock_sd: float = 0.2
    endogeneity_rho: float = 0.0
    missingness: float = 0.0
    log_offset: float = 1.0
    covariates: CovariateGenerators = field(default_factory=CovariateGenerators)
    n_jobs: int = 1

    def __post_init__(self):
        if isinstance(self.covariates, dict):
            self.covariates = CovariateGenerators(**self.covariates)
        unknown = set(self.truth) - set(REDUCED_NAMES)
        if unknown:
            raise ValueError(f"unknown truth names: {sorted(unknown)}")

    def validate(self):
        if self.seed is None:
            raise ValueError("seed is required")
        if self.n_ads < 1 or self.horizon_days < 2:
            raise ValueError("need n_ads >= 1 and horizon_days >= 2")
        if not -1.0 <= self.endogeneity_rho <= 1.0:
            raise ValueError("endogeneity_rho must lie in [-1, 1]")
        if not 0.0 <= self.missingness < 1.0:
            raise ValueError("missingness must lie in [0, 1)")
        if self.noise_sd < 0 or self.budget_shock_sd < 0:
            raise ValueError("noise scales must be non-negative")
        grid = np.linspace(0.0, 1.0, 1001)
        eta = TruthFunction(self.eta_truth)(grid)
        if np.any(eta <= 0) or np.any(eta >= 1):
            raise ValueError("eta_truth must lie strictly inside (0, 1)")

    def truth_functions(self) -> dict:
        merged = {**DEFAULT_TRUTH, **self.truth}
        return {name: TruthFunction(merged[name]) for name in REDUCED_NAMES}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["truth"] = {**DEFAULT_TRUTH, **self.truth}
        d["covariates"] = asdict(self.covariates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        for key in ("impression_share", "klength_range"):
            if key in d.get("covariates", {}):
                d["covariates"] = {**d["covariates"], key: tuple(d["covariates"][key])}
        return cls(**d)


@dataclass
class GroundTruth:
    config: dict
    day_range: tuple
    latent_ln_sales: np.ndarray
    budget_shock: np.ndarray
    response_error: np.ndarray

    def functions(self) -> dict:
        return SimConfig.from_dict(self.config).truth_functions()

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "day_range": list(self.day_range),
            "time_normalization": "t = (day - day_min) / (day_max - day_min)",
            "latent_ln_sales": self.latent_ln_sales.tolist(),
            "budget_shock": self.budget_shock.tolist(),
            "response_error": self.response_error.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(d["config"], tuple(d["day_range"]),
                   np.asarray(d["latent_ln_sales"]), np.asarray(d["budget_shock"]),
                   np.asarray(d["response_error"]))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "GroundTruth":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def ad_stream(seed: int, ad_index: int) -> np.random.Generator:
    """Counter-based substream keyed by (seed, ad)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(ad_index,))
    return np.random.Generator(np.random.Philox(ss))


def _simulate_ad(cfg: SimConfig, ad_index: int, truths: dict, eta_fn):
    g = cfg.covariates
    rng = ad_stream(cfg.seed, ad_index)
    T = cfg.horizon_days

    base_demand = rng.normal(g.log_demand_mean, g.log_demand_ad_sd)
    base_ctr = rng.normal(g.log_ctr_mean, g.log_ctr_ad_sd)
    base_cvr = rng.normal(g.log_cvr_mean, g.log_cvr_ad_sd)
    base_cpc = rng.normal(g.log_cpc_mean, g.log_cpc_ad_sd)
    base_pos = rng.normal(g.position_log_mean, g.position_ad_sd)
    share = rng.uniform(*g.impression_share)
    klength = int(rng.integers(g.klength_range[0], g.klength_range[1] + 1))
    brand = int(rng.random() < g.p_brand)
    retailer = int(rng.random() < g.p_retailer)
    holiday = int(rng.random() < g.p_holiday)

    days = np.arange(1, T + 1)
    keep = rng.random(T) >= cfg.missingness
    days = days[keep]
    m = days.size
    t = (days - 1) / (T - 1)

    demand = np.maximum(np.rint(np.exp(base_demand + rng.normal(0, g.log_demand_day_sd, m))), 1)
    impressions = rng.binomial(demand.astype(np.int64), share)
    ctr_p = np.minimum(np.exp(base_ctr + rng.normal(0, g.log_ctr_day_sd, m)), 0.9)
    clicks = rng.binomial(impressions, ctr_p)
    cvr_p = np.minimum(np.exp(base_cvr + rng.normal(0, g.log_cvr_day_sd, m)), 0.9)
    conversions = rng.binomial(clicks, cvr_p)
    cpc = np.exp(base_cpc + rng.normal(0, g.log_cpc_day_sd, m))
    position = 1.0 + np.exp(base_pos + rng.normal(0, g.position_day_sd, m))

    z_budget = rng.standard_normal(m)
    z_other = rng.standard_normal(m)
    rho = cfg.endogeneity_rho
    shock = cfg.budget_shock_sd * z_budget
    error = cfg.noise_sd * (rho * z_budget + np.sqrt(1.0 - rho ** 2) * z_other)

    with np.errstate(divide="ignore", invalid="ignore"):
        ctr_obs = np.where(impressions > 0, clicks / np.maximum(impressions, 1), 0.0)
        cvr_obs = np.where(clicks > 0, conversions / np.maximum(clicks, 1), 0.0)
    spend = demand * ctr_obs * cpc * np.exp(shock)

    # ratios that are zero fall back to the underlying rates; such rows
    # are dropped downstream but still act as lags
    ln_ctr = np.log(np.where(ctr_obs > 0, ctr_obs, ctr_p))
    ln_cvr = np.log(np.where(cvr_obs > 0, cvr_obs, cvr_p))
    ln_spend = np.log(np.where(spend > 0, spend, demand * ctr_p * cpc * np.exp(shock)))
    regressors = {
        "ln_spend": ln_spend, "ln_ctr": ln_ctr, "klength": np.full(m, klength),
        "retailer": np.full(m, retailer), "brand": np.full(m, brand),
        "holiday": np.full(m, holiday), "position": position, "ln_cvr": ln_cvr,
    }
    static = truths["alpha0_star"](t)
    for name, reg in REGRESSOR_OF.items():
        if reg is not None:
            static = static + truths[name](t) * regressors[reg]
    gamma = 1.0 - eta_fn(t)

    latent = np.empty(m)
    sales = np.empty(m)
    for j in range(m):
        if j == 0:
            latent[j] = static[j] / (1.0 - gamma[j]) + error[j]
        else:
            lag = np.log(sales[j - 1] + cfg.log_offset)
            latent[j] = static[j] + gamma[j] * lag + error[j]
        if not abs(latent[j]) <= DIVERGENCE_LIMIT:
            raise SimulationError(
                f"log sales diverged for ad {ad_index} at day {days[j]}: "
                f"{latent[j]:.3g} (static part {static[j]:.3g}, carryover {gamma[j]:.3g})"
            )
        sales[j] = max(np.rint(np.exp(latent[j]) - cfg.log_offset), 0.0)

    frame = pd.DataFrame({
        "ad_id": ad_index,
        "day": days,
        "impressions": impressions.astype(np.int64),
        "clicks": clicks.astype(np.int64),
        "spend": spend,
        "conversions": conversions.astype(np.int64),
        "items": sales.astype(np.int64),
        "sales": sales.astype(np.int64),
        "position": position,
        "klength": klength,
        "brand": brand,
        "retailer": retailer,
        "holiday": holiday,
        "demand": demand.astype(np.int64),
        "avg_cpc": cpc,
    })
    return frame, latent, shock, error


def generate(config: SimConfig):
    """Simulate a campaign. Returns ``(records DataFrame, GroundTruth)``."""
    config.validate()
    truths = config.truth_functions()
    eta_fn = TruthFunction(config.eta_truth)

    def one(i):
        return _simulate_ad(config, i, truths, eta_fn)

    if config.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=config.n_jobs) as pool:
            parts = list(pool.map(one, range(config.n_ads)))
    else:
        parts = [one(i) for i in range(config.n_ads)]
    records = pd.concat([p[0] for p in parts], ignore_index=True)[CSV_COLUMNS]
    truth = GroundTruth(
        config=config.to_dict(),
        day_range=(1, config.horizon_days),
        latent_ln_sales=np.concatenate([p[1] for p in parts]),
        budget_shock=np.concatenate([p[2] for p in parts]),
        response_error=np.concatenate([p[3] for p in parts]),
    )
    return records, truth


def ground_truth_eval(truth, covariate: str, grid) -> np.ndarray:
    """Evaluate a true coefficient function on normalized time.

    ``truth`` is a GroundTruth, a SimConfig, or a mapping of names to
    truth specs. Reduced-form (``*_star``, ``gamma_star``) and structural
    names are accepted.
    """
    grid = np.asarray(grid, dtype=float)
    if isinstance(truth, GroundTruth):
        cfg = SimConfig.from_dict(truth.config)
    elif isinstance(truth, SimConfig):
        cfg = truth
    else:
        spec = dict(truth)
        if covariate not in spec:
            raise KeyError(f"unknown covariate '{covariate}'; available: {sorted(spec)}")
        return TruthFunction(spec[covariate])(grid)
    fns = cfg.truth_functions()
    eta = TruthFunction(cfg.eta_truth)(grid)
    if covariate in fns:
        return fns[covariate](grid)
    if covariate == "gamma_star":
        return 1.0 - eta
    if covariate == "eta":
        return eta
    if covariate == "carryover":
        return 1.0 - eta
    if covariate in ("alpha0", "beta", "lambda1", "lambda3"):
        return fns[covariate + "_star"](grid) / eta
    if covariate in ("tau1", "tau2", "tau3", "tau4", "tau5"):
        return fns[covariate + "_star"](grid) / fns["beta_star"](grid)
    raise KeyError(
        f"unknown covariate '{covariate}'; available: "
        f"{sorted(REDUCED_NAMES + STRUCTURAL_NAMES + ('gamma_star',))}"
    )


def write_dataset(records: pd.DataFrame, truth: GroundTruth, csv_path, truth_path):
    records.to_csv(csv_path, index=False, float_format="%.17g", lineterminator="\n")
    truth.save(truth_path)


def simulate_tvc_panel(n_subjects: int, horizon: int, truths: dict, noise_sd: float,
                       seed: int, intercept=0.0) -> pd.DataFrame:
    """Plain varying-coefficient panel with independent N(0,1) covariates.

    Columns: ``ad_id``, ``day``, ``t``, ``y`` and one column per key of
    ``truths``; ``y = intercept(t) + sum_k truth_k(t) x_k + noise``.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    n = n_subjects * horizon
    day = np.tile(np.arange(1, horizon + 1), n_subjects)
    t = (day - 1) / (horizon - 1)
    data = {"ad_id": np.repeat(np.arange(n_subjects), horizon), "day": day, "t": t}
    y = TruthFunction(intercept)(t)
    for name, spec in truths.items():
        x = rng.standard_normal(n)
        data[name] = x
        y = y + TruthFunction(spec)(t) * x
    data["y"] = y + noise_sd * rng.standard_normal(n)
    return pd.DataFrame(data)
