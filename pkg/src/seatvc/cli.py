"""Command-line front end.

    seatvc simulate     --config run.json [--seed N] [--out DIR]
    seatvc fit          --config run.json [--input data.csv] [--out DIR]
    seatvc compare      --config run.json [--input data.csv] [--out DIR]
    seatvc trajectories --model stage2_model.json [--grid 101] [--covariates a,b]
                        [--structural] [--out DIR]

Every command writes ``config.resolved.json`` to its output directory;
``seatvc <command> --config DIR/config.resolved.json`` reproduces the run.
Exit codes: 0 success, 1 numerical or fit failure, 2 usage or schema error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import mixed_model as mm
from . import sea_model as sea
from . import simulator as sim
from . import tvc
from .spline_basis import BasisError

logger = logging.getLogger("seatvc")

EXIT_OK, EXIT_FIT, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    input: str = None
    output_dir: str = "out"
    seed: int = None
    specs: list = field(default_factory=lambda: [{"name": "MODEL-Time-Varying-cubic", "q": 3, "H": 30}])
    log_offset: float = 1.0
    spend_offset: float = 0.0
    cpc_source: str = "auto"
    day_range: list = None
    eta_floor: float = 0.02
    beta_floor: float = 1e-6
    standardize: bool = True
    correction: bool = True
    grid_points: int = 101
    n_jobs: int = 1
    simulation: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_specs(self) -> list:
        try:
            return [sea.ModelSpec(str(s["name"]), int(s["q"]), int(s["H"])) for s in self.specs]
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"bad spec list: {exc}") from None

    def prep_config(self) -> sea.PrepConfig:
        return sea.PrepConfig(log_offset=self.log_offset, spend_offset=self.spend_offset,
                              cpc_source=self.cpc_source,
                              day_range=tuple(self.day_range) if self.day_range else None)


def _dump_json(obj, path: Path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _write_csv(frame: pd.DataFrame, path: Path):
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def _echo(cfg: RunConfig, out: Path):
    _dump_json(cfg.to_dict(), out / "config.resolved.json")


def _load_config(args) -> RunConfig:
    data = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    cfg = RunConfig.from_dict(data)
    for attr, key in (("input", "input"), ("out", "output_dir"), ("seed", "seed")):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg, key, value)
    return cfg


def _read_records(path) -> pd.DataFrame:
    if path is None:
        raise UsageError("no input file given")
    try:
        records = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise sea.SchemaError("no rows") from None
    except OSError as exc:
        raise UsageError(f"cannot read input: {exc}") from None
    if len(records) == 0:
        raise sea.SchemaError("no rows")
    return records


def cmd_simulate(cfg: RunConfig) -> int:
    if cfg.seed is None:
        raise UsageError("simulate requires a seed (config key 'seed' or --seed)")
    sim_cfg = sim.SimConfig.from_dict({**cfg.simulation, "seed": cfg.seed})
    cfg.simulation = {k: v for k, v in sim_cfg.to_dict().items() if k != "seed"}
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, truth = sim.generate(sim_cfg)
    sim.write_dataset(records, truth, out / "data.csv", out / "ground_truth.json")
    _echo(cfg, out)
    logger.info("simulated %d ad-days for %d ads -> %s", len(records), sim_cfg.n_ads, out)
    return EXIT_OK


def _grid(spec, n):
    return np.linspace(spec.time_domain[0], spec.time_domain[1], n)


def cmd_fit(cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    records = _read_records(cfg.input)
    panel = sea.prepare_panel(records, cfg.prep_config())
    specs = cfg.model_specs()
    if len(specs) != 1:
        logger.info("fit uses the last of %d specs", len(specs))
    ms = specs[-1]
    spec = sea.make_basis(panel, ms.q, ms.H)
    res = sea.run_pipeline(panel, spec, correction=cfg.correction, standardize=cfg.standardize)
    grid = _grid(spec, cfg.grid_points)
    structural = sea.recover_structural(res.stage2.model, grid, cfg.eta_floor, cfg.beta_floor)

    out.mkdir(parents=True, exist_ok=True)
    res.stage2.model.save(out / "stage2_model.json")
    tvc.write_trajectories(sea.reduced_trajectories(res.stage2.model, grid),
                           out / "reduced_trajectories.csv", out / "reduced_trajectories.json")
    _write_csv(structural.to_frame(), out / "structural_trajectories.csv")
    _dump_json(structural.to_dict(), out / "structural_trajectories.json")
    stage1 = {"skipped": True}
    if res.stage1 is not None:
        res.stage1.model.save(out / "stage1_model.json")
        tvc.write_trajectories(sea.reduced_trajectories(res.stage1.model, grid),
                               out / "stage1_trajectories.csv")
        stage1 = {"skipped": False, **res.stage1.report}
    report = {
        "model": ms.name,
        "basis": spec.to_dict(),
        "panel": panel.meta,
        "stage1": stage1,
        "stage2": {
            "stats": res.stage2.model.stats,
            "lambdas": res.stage2.model.lambdas,
            "correction_included": res.stage2.correction_included,
            "alpha1_star": res.stage2.alpha1,
            "alpha1_star_se": res.stage2.alpha1_se,
            "boundary_flags": list(res.stage2.model.boundary_flags),
        },
        "structural": structural.to_dict(),
        "flags": res.flags,
        "notes": list(res.stage2.model.notes) + [
            "two-stage standard errors are not corrected for the generated regressor",
            f"AIC/BIC parameter count: {mm.PARAM_COUNT_CONVENTION}",
        ],
    }
    _dump_json(report, out / "report.json")
    _echo(cfg, out)
    for flag in res.flags:
        logger.warning(flag)
    logger.info("fit %s on %d rows -> %s", ms.name, panel.n, out)
    return EXIT_OK


def format_table(table: pd.DataFrame) -> str:
    lines = [f"{'Model specification':<32}{'Trend':<18}{'-2 Res Log Lik':>16}{'AIC':>16}{'BIC':>16}"]
    for _, row in table.iterrows():
        mark = " *" if row["best_aic"] else ""
        lines.append(f"{row['model']:<32}{row['trend']:<18}{row['neg2_res_log_likelihood']:>16.3f}"
                     f"{row['aic']:>16.3f}{row['bic']:>16.3f}{mark}")
    lines.append("* lowest AIC")
    return "\n".join(lines)


def cmd_compare(cfg: RunConfig) -> int:
    specs = cfg.model_specs()
    if len(specs) < 2:
        raise UsageError("need >=2 specs")
    records = _read_records(cfg.input)
    panel = sea.prepare_panel(records, cfg.prep_config())
    table = sea.compare_specs(panel, specs, n_jobs=cfg.n_jobs, correction=cfg.correction,
                              standardize=cfg.standardize)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(table, out / "comparison.csv")
    text = format_table(table)
    (out / "comparison.txt").write_text(text + "\n", encoding="utf-8")
    _echo(cfg, out)
    print(text)
    return EXIT_OK


def cmd_trajectories(args) -> int:
    model = tvc.FittedTvcModel.load(args.model)
    out = Path(args.out)
    grid = np.linspace(model.spec.time_domain[0], model.spec.time_domain[1], args.grid)
    requested = [c for c in (args.covariates or "").split(",") if c]
    if args.structural:
        st = sea.recover_structural(model, grid, args.eta_floor, args.beta_floor)
        frame = st.to_frame()
        if requested:
            unknown = [c for c in requested if c not in st.NAMES]
            if unknown:
                raise UsageError(f"unknown parameter(s) {unknown}; available: {list(st.NAMES)}")
            frame = frame[frame["parameter"].isin(requested)].reset_index(drop=True)
        payload = st.to_dict()
    else:
        label_of = {**sea.STAGE1_COEFFICIENT_OF, **sea.COEFFICIENT_OF}
        available = list(model.functions + model.constant_covariates)
        by_label = {label_of.get(f, f): f for f in available}
        names = requested or available
        unknown = [c for c in names if c not in available and c not in by_label]
        if unknown:
            raise UsageError(f"unknown covariate(s) {unknown}; available: "
                             f"{available + [l for l in by_label if l not in available]}")
        trajs = [model.eval_coefficient(by_label.get(c, c), grid, args.scale) for c in names]
        trajs = [tr.__class__(c, tr.t, tr.estimate, tr.se, tr.scale) for c, tr in zip(names, trajs)]
        frame = tvc.trajectories_frame(trajs)
        payload = [{"covariate": tr.covariate, "scale": tr.scale, "t": tr.t.tolist(),
                    "estimate": tr.estimate.tolist(), "se": tr.se.tolist()} for tr in trajs]
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(frame, out / "trajectories.csv")
    with open(out / "trajectories.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
    _dump_json({k: v for k, v in vars(args).items() if k != "func"}, out / "config.resolved.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seatvc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic campaign dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=lambda a: cmd_simulate(_load_config(a)))

    for name, fn, help_ in (("fit", cmd_fit, "run the two-stage model"),
                            ("compare", cmd_compare, "compare trend specifications")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config")
        p.add_argument("--input")
        p.add_argument("--out")
        p.set_defaults(func=lambda a, fn=fn: fn(_load_config(a)))

    p = sub.add_parser("trajectories", help="export coefficient trajectories from a model archive")
    p.add_argument("--model", required=True)
    p.add_argument("--grid", type=int, default=101)
    p.add_argument("--covariates")
    p.add_argument("--scale", choices=("raw", "standardized"), default="raw")
    p.add_argument("--structural", action="store_true")
    p.add_argument("--eta-floor", type=float, default=0.02)
    p.add_argument("--beta-floor", type=float, default=1e-6)
    p.add_argument("--out", default="trajectories")
    p.set_defaults(func=cmd_trajectories)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, sea.SchemaError, tvc.PanelError, BasisError, KeyError,
            TypeError, ValueError) as exc:
        parser.print_usage(sys.stderr)
        print(f"seatvc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (mm.MixedModelError, sim.SimulationError, np.linalg.LinAlgError) as exc:
        print(f"seatvc: fit failure: {exc}", file=sys.stderr)
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
