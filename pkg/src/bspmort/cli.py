"""Command-line frontend.

Every subcommand reads an optional JSON run configuration (``--config``),
applies flag overrides, writes its outputs into ``--out`` and finishes with a
``manifest.json`` recording the resolved configuration, seed, package
version, input checksums and output checksums. Outputs contain no
timestamps, so identical inputs and seeds give byte-identical files.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, kalman
from .backtest import BacktestSpec, BSPForecaster, naive_forecaster, run_backtest
from .basis import build_basis, build_default_basis, design_matrix
from .covariance import IDENTITY, KernelConfig, build_correlations
from .data import build_surface, read_hmd_table, read_surface_csv, write_surface_csv
from .errors import BSPError
from .estimation import FitConfig, fit
from .forecast import Z95, build_drift_model, forecast
from .simulate import SimConfig, check_prop1, default_initial, simulate_surface, trend_initial
from .statespace import HyperParams, assemble, regression_initial_belief

logger = logging.getLogger("bspmort")

COMMANDS = ("basis", "fit", "smooth", "forecast", "simulate", "backtest", "check-prop1")
MANIFEST = "manifest.json"

DEFAULTS = {
    "seed": 0,
    "out": "out",
    "inputs": {},
    "country": "",
    "gender": "f",
    "years": None,
    "age_max": 100,
    "basis": {"interior_knots": None, "degree": 3, "age_min": 0, "age_max": 100},
    "kernel": {"family": "matern", "smoothness": 0.5, "length_scale": 1.0},
    "fit": {},
    "hyperparameters": None,
    "forecast": {"window": 25, "horizons": 10, "n_draws": 200},
    "simulate": {"n_years": 80, "mode": "gaussian", "exposures": 1e5, "first_year": 1933,
                 "initial": "trend",
                 "hyperparameters": {"sigma2_obs": 0.01, "sigma2_beta": 1e-6,
                                     "sigma2_a": 1e-9, "lambda": 1.0}},
    "backtest": {"origins": [1990, 2010], "horizons": 10, "forecaster": "bsp",
                 "countries": None, "genders": None},
    "prop1": {"exposures": [1e2, 1e4, 1e6], "n_draws": 100000, "sigma_obs": 0.05},
}


class ValidationError(Exception):
    pass


# configuration ---------------------------------------------------------------

def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_origins(text: str):
    """``"1990..2010"`` or ``"1995"`` to an inclusive ``[first, last]`` pair."""
    parts = text.split("..")
    try:
        if len(parts) == 1:
            a = b = int(parts[0])
        elif len(parts) == 2:
            a, b = int(parts[0]), int(parts[1])
        else:
            raise ValueError
    except ValueError:
        raise argparse.ArgumentTypeError(f"origins must look like A..B, got {text!r}") from None
    if b < a:
        raise argparse.ArgumentTypeError("origins range is empty")
    return [a, b]


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ValidationError("config must be a JSON object")
        base = path.parent
        for key, val in list(user.get("inputs", {}).items()):
            if isinstance(val, str) and not os.path.isabs(val):
                user["inputs"][key] = str(base / val)
        cfg = _merge(cfg, user)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.horizons is not None:
        cfg["forecast"]["horizons"] = args.horizons
        cfg["backtest"]["horizons"] = args.horizons
    if args.origins is not None:
        cfg["backtest"]["origins"] = args.origins
    if args.country is not None:
        cfg["country"] = args.country
    if args.gender is not None:
        cfg["gender"] = args.gender
    for key, val in cfg["inputs"].items():
        if val is not None and not Path(val).exists():
            raise ValidationError(f"input {key} not found: {val}")
    return cfg


def make_basis(cfg):
    b = cfg["basis"]
    lo, hi = float(b.get("age_min", 0)), float(b.get("age_max", 100))
    if b.get("interior_knots") is None:
        return build_default_basis(lo, hi)
    knots = [lo, *map(float, b["interior_knots"]), hi]
    return build_basis(knots, int(b.get("degree", 3)))


def make_correlations(cfg, basis):
    k = cfg["kernel"]
    kc = KernelConfig(k.get("family", "matern"), float(k.get("smoothness", 0.5)),
                      float(k.get("length_scale", 1.0)))
    return build_correlations(basis, kc, k.get("instantaneous_mean", IDENTITY))


def make_fit_config(cfg):
    d = dict(cfg["fit"])
    d.setdefault("rng_seed", cfg["seed"])
    return FitConfig.from_dict(d)


def _hmd_path(inputs, kind, country):
    if inputs.get(kind.lower()):
        return inputs[kind.lower()]
    root = inputs.get("hmd_dir")
    if not root:
        return None
    for cand in (Path(root) / f"{country}.{kind}_1x1.txt", Path(root) / country / f"{kind}_1x1.txt",
                 Path(root) / f"{kind}_1x1.txt"):
        if cand.is_file():
            return str(cand)
    return None


def load_surfaces(cfg, countries=None, genders=None):
    """Surfaces named by the configuration; HMD tables or an interchange CSV."""
    inputs = cfg["inputs"]
    countries = countries or [cfg["country"]]
    genders = genders or [cfg["gender"]]
    years = tuple(cfg["years"]) if cfg.get("years") else None
    out = []
    if inputs.get("surface_csv"):
        with open(inputs["surface_csv"], encoding="utf-8", newline="") as fh:
            s = read_surface_csv(fh, genders[0], countries[0])
        if years:
            s = s.select_years(*years)
        return [s]
    for country in countries:
        paths = {k: _hmd_path(inputs, k, country) for k in ("Mx", "Deaths", "Exposures")}
        if not any(paths.values()):
            raise ValidationError("no input data: set inputs.surface_csv, inputs.mx, "
                                  "inputs.deaths/exposures or inputs.hmd_dir")
        tables = {k: read_hmd_table(p, k) if p else None for k, p in paths.items()}
        for g in genders:
            out.append(build_surface(tables["Mx"], g, deaths=tables["Deaths"],
                                     exposures=tables["Exposures"], age_cap=cfg["age_max"],
                                     year_range=years, country_code=country))
    return out


# output helpers --------------------------------------------------------------

def _num(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return repr(x) if np.isfinite(x) else ""


class Outputs:
    """Collects written files so the manifest can checksum them."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files = []

    def csv(self, name, header, rows):
        path = self.dir / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([v if isinstance(v, str) else _num(v) for v in r])
        self.files.append(name)

    def json(self, name, obj):
        obj = dict(obj)
        obj["manifest"] = MANIFEST
        _dump(self.dir / name, obj)
        self.files.append(name)

    def surface(self, name, surface):
        with open(self.dir / name, "w", encoding="utf-8", newline="") as fh:
            write_surface_csv(surface, fh)
        self.files.append(name)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    return obj


def _dump(path, obj):
    text = json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(outputs: Outputs, command, cfg):
    inputs = {}
    for key, val in sorted(cfg["inputs"].items()):
        if val and Path(val).is_file():
            inputs[key] = {"path": os.path.basename(val), "sha256": _sha256(val)}
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg["seed"],
        "config": {k: v for k, v in cfg.items() if k != "out"},
        "inputs": inputs,
        "outputs": {f: _sha256(outputs.dir / f) for f in sorted(outputs.files)},
    }
    _dump(outputs.dir / MANIFEST, manifest)


# hyperparameters ---------------------------------------------------------------

def _hyperparameters(cfg, surface, basis, correlations, out_dir):
    if cfg.get("hyperparameters"):
        return HyperParams.from_dict(cfg["hyperparameters"])
    fit_json = Path(out_dir) / "fit.json"
    if fit_json.is_file():
        saved = json.loads(fit_json.read_text(encoding="utf-8"))
        for entry in saved.get("surfaces", []):
            if entry["surface"] == _label(surface):
                return HyperParams.from_dict(entry["parameters"])
    logger.info("no stored parameters for %s; fitting", _label(surface))
    return fit(surface, basis, correlations, make_fit_config(cfg)).best


def _label(surface):
    return f"{surface.country_code or 'surface'}:{surface.gender}"


def _model(surface, basis, correlations, hp):
    design = design_matrix(basis, surface.ages)
    y = surface.observations()
    mask = surface.observed
    first = np.flatnonzero(mask.any(axis=1))
    if first.size == 0:
        raise ValidationError("surface has no observed cells")
    initial = regression_initial_belief(design, np.where(mask[first[0]], y[first[0]], np.nan),
                                        mask[first[0]])
    model = assemble(basis, correlations, hp, np.diff(surface.years.astype(float)),
                     initial=initial, design=design)
    return model, y, mask, design


# subcommands ---------------------------------------------------------------------

def cmd_basis(cfg, out: Outputs):
    basis = make_basis(cfg)
    G = basis.design()
    out.csv("basis.csv", ["age", *(f"g{j + 1}" for j in range(basis.p))],
            ([a, *G[i]] for i, a in enumerate(basis.age_grid)))
    out.csv("peaks.csv", ["spline", "peak_age"], ((j + 1, x) for j, x in enumerate(basis.peak_ages)))
    out.json("basis.json", {"degree": basis.degree, "knots": basis.knots.tolist(), "p": basis.p,
                            "peak_ages": basis.peak_ages.tolist()})


def cmd_fit(cfg, out: Outputs):
    basis = make_basis(cfg)
    cor = make_correlations(cfg, basis)
    entries = []
    for s in load_surfaces(cfg):
        res = fit(s, basis, cor, make_fit_config(cfg))
        entries.append({"surface": _label(s), **res.to_dict()})
    out.json("fit.json", {"seed": cfg["seed"], "surfaces": entries})


def cmd_smooth(cfg, out: Outputs):
    basis = make_basis(cfg)
    cor = make_correlations(cfg, basis)
    surf_rows, coef_rows = [], []
    for s in load_surfaces(cfg):
        hp = _hyperparameters(cfg, s, basis, cor, out.dir)
        model, y, mask, design = _model(s, basis, cor, hp)
        sm = kalman.smooth(model, kalman.filter(model, y, mask))
        lab = _label(s)
        for t, year in enumerate(s.years):
            f = design @ sm.mean[t, 0::3]
            sd = np.sqrt(np.einsum("ij,jk,ik->i", design, sm.cov[t][0::3, 0::3], design))
            surf_rows += [(lab, year, a, f[i], f[i] - Z95 * sd[i], f[i] + Z95 * sd[i])
                          for i, a in enumerate(s.ages)]
            csd = np.sqrt(np.clip(np.diag(sm.cov[t]), 0.0, None))
            mu = sm.mean[t]
            for j in range(basis.p):
                b, d = 3 * j, 3 * j + 1
                coef_rows.append((lab, year, j + 1, mu[b], mu[b] - Z95 * csd[b], mu[b] + Z95 * csd[b],
                                  mu[d], mu[d] - Z95 * csd[d], mu[d] + Z95 * csd[d], mu[d + 1]))
    out.csv("smoothed.csv", ["surface", "year", "age", "mean", "lo95", "hi95"], surf_rows)
    out.csv("smoothed_coefficients.csv",
            ["surface", "year", "spline", "beta", "beta_lo95", "beta_hi95",
             "derivative", "derivative_lo95", "derivative_hi95", "inst_mean"], coef_rows)


def cmd_forecast(cfg, out: Outputs):
    basis = make_basis(cfg)
    cor = make_correlations(cfg, basis)
    fc_cfg = cfg["forecast"]
    H = int(fc_cfg["horizons"])
    if H < 1:
        raise ValidationError("horizons must be at least 1")
    rows, coef_rows = [], []
    for s in load_surfaces(cfg):
        hp = _hyperparameters(cfg, s, basis, cor, out.dir)
        model, y, mask, design = _model(s, basis, cor, hp)
        fr = kalman.filter(model, y, mask)
        drift = build_drift_model(model, y, fr, kalman.smooth(model, fr), cor, hp,
                                  window=int(fc_cfg["window"]), mask=mask,
                                  n_draws=int(fc_cfg["n_draws"]), seed=cfg["seed"])
        res = forecast(drift, design, H)
        lab = _label(s)
        for h in range(H):
            year = int(s.years[-1]) + h + 1
            rows += [(lab, year, a, res.point[h, i], res.lower[h, i], res.upper[h, i])
                     for i, a in enumerate(s.ages)]
            coef_rows += [(lab, year, j + 1, res.coef_mean[h, j]) for j in range(basis.p)]
    out.csv("forecast.csv", ["surface", "year", "age", "point", "lo95", "hi95"], rows)
    out.csv("forecast_coefficients.csv", ["surface", "year", "spline", "mean"], coef_rows)


def _simulated(cfg, seed):
    basis = make_basis(cfg)
    cor = make_correlations(cfg, basis)
    sc = cfg["simulate"]
    hp = HyperParams.from_dict(sc["hyperparameters"])
    initials = {"trend": trend_initial, "prior": default_initial}
    if sc.get("initial") not in initials:
        raise ValidationError(f"simulate.initial must be one of {sorted(initials)}")
    conf = SimConfig(hp, basis, cor, int(sc["n_years"]), exposures=float(sc["exposures"]),
                     rng_seed=seed, mode=sc["mode"], first_year=int(sc["first_year"]),
                     initial=initials[sc["initial"]](basis))
    surface, states = simulate_surface(conf)
    return surface, states, hp


def cmd_simulate(cfg, out: Outputs):
    surface, states, _ = _simulated(cfg, cfg["seed"])
    out.surface("surface.csv", surface)
    p = states.shape[1] // 3
    out.csv("states.csv", ["year", "spline", "beta", "derivative", "inst_mean"],
            ((year, j + 1, *states[t, 3 * j:3 * j + 3])
             for t, year in enumerate(surface.years) for j in range(p)))


def cmd_backtest(cfg, out: Outputs):
    bc = cfg["backtest"]
    a, b = bc["origins"] if len(bc["origins"]) == 2 else (bc["origins"][0], bc["origins"][-1])
    spec = BacktestSpec(origins=tuple(range(int(a), int(b) + 1)), horizons=int(bc["horizons"]))
    basis = make_basis(cfg)
    cor = make_correlations(cfg, basis)
    has_data = any(v for v in cfg["inputs"].values())
    if has_data:
        surfaces = load_surfaces(cfg, bc.get("countries"), bc.get("genders"))
        hp = HyperParams.from_dict(cfg["hyperparameters"]) if cfg.get("hyperparameters") else None
    else:
        surface, _, hp = _simulated(cfg, cfg["seed"])
        surfaces = [surface]
    kind = bc.get("forecaster", "bsp")
    if kind == "bsp":
        fc = BSPForecaster(basis, cor, make_fit_config(cfg), window=int(cfg["forecast"]["window"]),
                           n_draws=int(cfg["forecast"]["n_draws"]), seed=cfg["seed"], hp=hp)
    elif kind == "naive":
        fc = naive_forecaster
    else:
        raise ValidationError(f"unknown forecaster {kind!r}")
    report = run_backtest(surfaces, spec, fc)
    out.json("backtest.json", {"seed": cfg["seed"], "forecaster": kind, **report.to_dict()})
    out.csv("backtest.csv", ["horizon", "n_cells", "median_abs_error", "q1", "q3", "coverage95"],
            ([r["horizon"], r["n_cells"],
              *("" if r[k] is None else r[k] for k in ("median_abs_error", "q1", "q3", "coverage95"))]
             for r in report.per_horizon))


def cmd_check_prop1(cfg, out: Outputs):
    pc = cfg["prop1"]
    res = check_prop1(pc["exposures"], int(pc["n_draws"]), sigma_obs=float(pc["sigma_obs"]),
                      seed=cfg["seed"])
    out.csv("prop1.csv", ["exposure", "ks_distance", "zero_fraction"],
            ((r["exposure"], r["ks_distance"], r["zero_fraction"]) for r in res))
    out.json("prop1.json", {"seed": cfg["seed"], "results": res})


HANDLERS = {"basis": cmd_basis, "fit": cmd_fit, "smooth": cmd_smooth, "forecast": cmd_forecast,
            "simulate": cmd_simulate, "backtest": cmd_backtest, "check-prop1": cmd_check_prop1}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--horizons", type=int, help="forecast horizons")
    common.add_argument("--origins", type=parse_origins, help="backtest origins, A..B")
    common.add_argument("--country", help="country code")
    common.add_argument("--gender", choices=["f", "m"], help="gender")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="bspmort", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Outputs(cfg["out"])
        HANDLERS[args.command](cfg, out)
        write_manifest(out, args.command, cfg)
    except (ValidationError, BSPError, ValueError, OSError, KeyError, TypeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"bspmort {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0
