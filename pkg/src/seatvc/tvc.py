"""Time-varying coefficient regression on panels.

    y_ij = beta_0(t_ij) + sum_k beta_k(t_ij) x_ijk + e_ij

Each coefficient function is expanded in a truncated power basis and the
truncated block of every function gets its own REML-chosen penalty.

Design column order (stable, relied on by archives):
  1. polynomial block of each function, function-major: intercept, then
     covariates in panel order, each contributing x * t^0 .. x * t^q;
  2. one column per time-invariant covariate;
  3. one random block of H columns per function, same function order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from . import mixed_model as mm
from .spline_basis import BasisError, BasisSpec, basis_matrix

INTERCEPT = "intercept"


class PanelError(ValueError):
    pass


@dataclass
class ModelPanel:
    """Estimation table: one row per subject-time.

    ``scaling`` maps a standardized covariate to its (mean, sd) on the
    original scale; an empty mapping means raw covariates.
    """

    data: pd.DataFrame
    response: str
    covariates: list
    constant_covariates: list = field(default_factory=list)
    subject: str = "ad_id"
    time: str = "t"
    scaling: dict = field(default_factory=dict)
    time_map: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.covariates = list(self.covariates)
        self.constant_covariates = list(self.constant_covariates)
        self.validate()

    @property
    def n(self) -> int:
        return len(self.data)

    @property
    def all_covariates(self) -> list:
        return self.covariates + self.constant_covariates

    def validate(self):
        cols = [self.subject, self.time, self.response] + self.all_covariates
        missing = [c for c in cols if c not in self.data.columns]
        if missing:
            raise PanelError(f"panel is missing columns: {missing}")
        dup = set(self.covariates) & set(self.constant_covariates)
        if dup or len(set(self.all_covariates)) != len(self.all_covariates):
            raise PanelError("covariate names must be unique")
        if INTERCEPT in self.all_covariates:
            raise PanelError(f"'{INTERCEPT}' is reserved")
        values = self.data[cols[1:]]
        if values.isna().any().any() or not np.isfinite(values.to_numpy(float)).all():
            raise PanelError("panel contains missing or non-finite values")
        keyed = self.data[[self.subject, self.time]]
        if keyed.duplicated().any():
            raise PanelError("duplicate (subject, time) rows")
        steps = self.data.groupby(self.subject, sort=False)[self.time].diff()
        if (steps.dropna() <= 0).any():
            raise PanelError("times must be strictly increasing within a subject")

    def sorted(self) -> "ModelPanel":
        data = self.data.sort_values([self.subject, self.time], kind="mergesort")
        return replace(self, data=data.reset_index(drop=True))


def _is_binary(x: pd.Series) -> bool:
    return bool(np.isin(x.to_numpy(), (0, 1)).all())


def standardize(panel: ModelPanel, covariate_names=None) -> ModelPanel:
    """Center and scale covariates to mean 0 and population sd 1.

    By default every non-binary covariate is standardized. Repeated
    standardization composes the record so it always maps back to the
    original scale.
    """
    if covariate_names is None:
        covariate_names = [c for c in panel.all_covariates
                           if not _is_binary(panel.data[c])]
    data = panel.data.copy()
    scaling = dict(panel.scaling)
    for name in covariate_names:
        if name not in data.columns:
            raise PanelError(f"unknown covariate '{name}'")
        x = data[name].to_numpy(dtype=float)
        mean, sd = x.mean(), x.std()
        if not sd > 1e-12 * max(1.0, abs(mean)):
            raise PanelError(f"covariate '{name}' has zero variance")
        data[name] = (x - mean) / sd
        m0, s0 = scaling.get(name, (0.0, 1.0))
        scaling[name] = (m0 + s0 * mean, s0 * sd)
    return replace(panel, data=data, scaling=scaling)


def _function_names(panel: ModelPanel) -> list:
    return [INTERCEPT] + list(panel.covariates)


def build_design(panel: ModelPanel, spec: BasisSpec) -> mm.PenalizedDesign:
    t = panel.data[panel.time].to_numpy(dtype=float)
    B = basis_matrix(t, spec)
    nf = spec.n_fixed
    fixed, random, names = [], [], []
    for f in _function_names(panel):
        x = np.ones(panel.n) if f == INTERCEPT else panel.data[f].to_numpy(dtype=float)
        fixed.append(x[:, None] * B[:, :nf])
        if spec.knot_count_H:
            random.append(x[:, None] * B[:, nf:])
            names.append(f)
    for c in panel.constant_covariates:
        fixed.append(panel.data[c].to_numpy(dtype=float)[:, None])
    y = panel.data[panel.response].to_numpy(dtype=float)
    return mm.PenalizedDesign(np.hstack(fixed), random, y, block_names=names)


@dataclass(frozen=True)
class Trajectory:
    covariate: str
    t: np.ndarray
    estimate: np.ndarray
    se: np.ndarray
    scale: str = "standardized"

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"covariate": self.covariate, "t": self.t,
                             "estimate": self.estimate, "se": self.se})


@dataclass(frozen=True)
class FittedTvcModel:
    spec: BasisSpec
    response: str
    functions: tuple
    constant_covariates: tuple
    coefficients: np.ndarray
    covariance: np.ndarray
    lambdas: dict
    residual_variance: float
    stats: dict
    scaling: dict
    time_map: dict
    residuals: np.ndarray
    fitted: np.ndarray
    spec_digest: str
    boundary_flags: tuple = ()
    notes: tuple = (
        "pointwise standard errors are conditional on the estimated penalties",
        "the intercept function is penalized like the slope functions",
    )

    @property
    def n_functions(self) -> int:
        return len(self.functions)

    @property
    def covariate_names(self) -> list:
        return list(self.functions[1:]) + list(self.constant_covariates)

    def _check_spec(self):
        if self.spec.digest() != self.spec_digest:
            raise BasisError("stored basis spec does not match its digest")

    def indices(self, name: str) -> np.ndarray:
        """Positions of a function's basis coefficients in the full vector."""
        nf, H = self.spec.n_fixed, self.spec.knot_count_H
        p_fixed = nf * self.n_functions + len(self.constant_covariates)
        if name in self.functions:
            f = self.functions.index(name)
            fixed = np.arange(f * nf, (f + 1) * nf)
            rand = p_fixed + np.arange(f * H, (f + 1) * H)
            return np.concatenate([fixed, rand])
        if name in self.constant_covariates:
            return np.array([nf * self.n_functions + self.constant_covariates.index(name)])
        raise KeyError(
            f"unknown covariate '{name}'; available: {[INTERCEPT] + self.covariate_names}"
        )

    def function_coefficients(self, name: str) -> np.ndarray:
        return self.coefficients[self.indices(name)]

    def _contrasts(self, name: str, grid: np.ndarray, scale: str) -> np.ndarray:
        """Rows c(t) with value(t) = c(t) . coefficients."""
        self._check_spec()
        B = basis_matrix(grid, self.spec)
        P = len(self.coefficients)

        def rows_for(fn):
            idx = self.indices(fn)
            out = np.zeros((grid.size, P))
            if fn in self.constant_covariates:
                out[:, idx[0]] = 1.0
            else:
                out[:, idx] = B
            return out

        C = rows_for(name)
        if scale == "standardized":
            return C
        if scale != "raw":
            raise ValueError("scale must be 'standardized' or 'raw'")
        if name != INTERCEPT:
            return C / self.scaling.get(name, (0.0, 1.0))[1]
        for cov, (mean, sd) in self.scaling.items():
            C = C - rows_for(cov) * (mean / sd)
        return C

    def eval_coefficient(self, name: str, grid, scale: str = "standardized") -> Trajectory:
        grid = np.atleast_1d(np.asarray(grid, dtype=float))
        C = self._contrasts(name, grid, scale)
        value = C @ self.coefficients
        se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", C, self.covariance, C), 0.0))
        return Trajectory(name, grid, value, se, scale)

    def predict(self, rows, extrapolation_policy: str = "error") -> np.ndarray:
        """Fitted response for new rows.

        ``rows`` is a ModelPanel or a DataFrame with column ``t`` and every
        model covariate. Covariates are taken on the original scale unless
        the panel carries this model's scaling record.
        """
        self._check_spec()
        if isinstance(rows, ModelPanel):
            df, time_col = rows.data, rows.time
            already_scaled = rows.scaling == self.scaling
        else:
            df, time_col, already_scaled = rows, "t", not self.scaling
        missing = [c for c in self.covariate_names + [time_col] if c not in df.columns]
        if missing:
            raise PanelError(f"rows are missing covariates: {missing}")
        t = df[time_col].to_numpy(dtype=float)
        lo, hi = self.spec.time_domain
        outside = (t < lo) | (t > hi)
        if outside.any():
            if extrapolation_policy == "error":
                raise BasisError(f"{int(outside.sum())} rows fall outside the time domain [{lo}, {hi}]")
            if extrapolation_policy != "clamp":
                raise ValueError("extrapolation_policy must be 'clamp' or 'error'")
            t = np.clip(t, lo, hi)
        B = basis_matrix(t, self.spec)
        yhat = B @ self.function_coefficients(INTERCEPT)
        for name in self.covariate_names:
            x = df[name].to_numpy(dtype=float)
            if not already_scaled and name in self.scaling:
                mean, sd = self.scaling[name]
                x = (x - mean) / sd
            if name in self.constant_covariates:
                yhat = yhat + x * self.function_coefficients(name)[0]
            else:
                yhat = yhat + x * (B @ self.function_coefficients(name))
        return yhat

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "spec_digest": self.spec_digest,
            "response": self.response,
            "functions": list(self.functions),
            "constant_covariates": list(self.constant_covariates),
            "coefficients": self.coefficients.tolist(),
            "covariance": self.covariance.tolist(),
            "lambdas": dict(self.lambdas),
            "residual_variance": self.residual_variance,
            "stats": dict(self.stats),
            "scaling": {k: list(v) for k, v in self.scaling.items()},
            "time_map": dict(self.time_map),
            "residuals": self.residuals.tolist(),
            "fitted": self.fitted.tolist(),
            "boundary_flags": list(self.boundary_flags),
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedTvcModel":
        model = cls(
            spec=BasisSpec.from_dict(d["spec"]),
            response=d["response"],
            functions=tuple(d["functions"]),
            constant_covariates=tuple(d["constant_covariates"]),
            coefficients=np.asarray(d["coefficients"], dtype=float),
            covariance=np.asarray(d["covariance"], dtype=float),
            lambdas=dict(d["lambdas"]),
            residual_variance=float(d["residual_variance"]),
            stats=dict(d["stats"]),
            scaling={k: tuple(v) for k, v in d["scaling"].items()},
            time_map=dict(d["time_map"]),
            residuals=np.asarray(d["residuals"], dtype=float),
            fitted=np.asarray(d["fitted"], dtype=float),
            spec_digest=d["spec_digest"],
            boundary_flags=tuple(d.get("boundary_flags", ())),
            notes=tuple(d.get("notes", ())),
        )
        model._check_spec()
        return model

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "FittedTvcModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def fit(panel: ModelPanel, spec: BasisSpec, lambdas=None) -> FittedTvcModel:
    """Fit the TVC regression; penalties by REML unless ``lambdas`` is given.

    ``lambdas`` may be a scalar (applied to every function) or a mapping
    from function name to penalty.
    """
    design = build_design(panel, spec)
    if design.n < design.p:
        raise PanelError(f"{design.n} rows for {design.p} fixed columns")
    if lambdas is None:
        fitted = mm.fit_reml(design)
    else:
        if np.isscalar(lambdas):
            lam = [float(lambdas)] * len(design.block_names)
        else:
            lam = [float(lambdas[name]) for name in design.block_names]
        fitted = mm.fit_at_lambdas(design, lam)
    return FittedTvcModel(
        spec=spec,
        response=panel.response,
        functions=tuple(_function_names(panel)),
        constant_covariates=tuple(panel.constant_covariates),
        coefficients=fitted.coefficients,
        covariance=fitted.covariance,
        lambdas={n: float(l) for n, l in zip(fitted.block_names, fitted.lambdas)},
        residual_variance=fitted.residual_variance,
        stats={
            "neg2_res_log_likelihood": fitted.neg2_res_log_likelihood,
            "aic": fitted.aic,
            "bic": fitted.bic,
            "effective_param_count": fitted.effective_param_count,
            "n_obs": fitted.n_obs,
            "param_count_convention": fitted.param_count_convention,
        },
        scaling={k: tuple(v) for k, v in panel.scaling.items()},
        time_map=dict(panel.time_map),
        residuals=fitted.residuals,
        fitted=fitted.fitted,
        spec_digest=spec.digest(),
        boundary_flags=tuple(fitted.boundary_flags),
    )


def eval_coefficient(model: FittedTvcModel, covariate: str, grid, scale="standardized") -> Trajectory:
    return model.eval_coefficient(covariate, grid, scale)


def predict(model: FittedTvcModel, new_rows, extrapolation_policy="error") -> np.ndarray:
    return model.predict(new_rows, extrapolation_policy)


def trajectories_frame(trajectories) -> pd.DataFrame:
    return pd.concat([tr.to_frame() for tr in trajectories], ignore_index=True)


def write_trajectories(trajectories, csv_path=None, json_path=None):
    frame = trajectories_frame(trajectories)
    if csv_path is not None:
        frame.to_csv(csv_path, index=False, float_format="%.17g")
    if json_path is not None:
        payload = [{"covariate": tr.covariate, "scale": tr.scale,
                    "t": tr.t.tolist(), "estimate": tr.estimate.tolist(),
                    "se": tr.se.tolist()} for tr in trajectories]
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
    return frame
