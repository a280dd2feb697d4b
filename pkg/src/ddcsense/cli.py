"""Command-line front end.

Usage::

    ddcsense --config run.ini --out results --seed 7 <command>

Commands: ``simulate``, ``estimate``, ``sensitivity``, ``bounds``, ``monotone``,
``breakdown``. The config is an INI file; every key can be overridden by an
environment variable ``DDCSENSE_<SECTION>_<KEY>`` (e.g. ``DDCSENSE_MODEL_BETA``).
Each run writes ``manifest.json`` with the resolved config, its hash, the
seed and the files produced.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, analysis, dp, globalsens
from .estimate import EstimationSolution, nfxp_estimate
from .local import write_table1_csv
from .zurcher import CounterfactualSpec, ZurcherConfig, simulate_panel

logger = logging.getLogger("ddcsense")

ENV_PREFIX = "DDCSENSE_"

DEFAULTS = {
    "model": {"num_states": "20", "phi1": "0.35", "phi2": "0.10", "mc": "0.05", "rc": "8.0",
              "beta": "0.95"},
    "data": {"path": "", "units": "100", "periods": "200", "seed": "0"},
    "estimate": {"init_mc": "0.0", "init_rc": "0.0", "solution": ""},
    "counterfactual": {"mc_scale": "0.9"},
    "sensitivity": {"deltas": "1e-4, 1e-3, 1e-2"},
    "bounds": {"lower": "0.7", "upper": "0.8, 0.9", "targets": "RC, cf_ccp_max_state",
               "method": "profile", "grid_step": "1e-3"},
    "monotone": {"full_grid": "false", "sign_scan": "true"},
    "figures": {"betas": "0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95", "degree": "2"},
    "breakdown": {"target": "RC", "tau_star": "", "lower": "0.7", "upper": "0.95",
                  "direction": "above", "monotone": "false", "grid_points": "101"},
}


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"stage '{stage}' failed: {type(exc).__name__}: {exc}")
        self.stage = stage


class _Stage:
    def __init__(self, name, log):
        self.name = name
        self.log = log

    def __enter__(self):
        self.start = time.perf_counter()
        logger.info("stage %s", self.name)

    def __exit__(self, exc_type, exc, tb):
        self.log.append({"stage": self.name, "ok": exc is None,
                         "seconds": time.perf_counter() - self.start})
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def load_config(path=None, environ=None) -> configparser.ConfigParser:
    """Defaults, then the INI file, then ``DDCSENSE_<SECTION>_<KEY>`` variables."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.read_dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        text = p.read_text()
        if not text.lstrip().startswith("["):
            text = "[model]\n" + text
        parser.read_string(text, source=str(p))
    environ = os.environ if environ is None else environ
    for section in parser.sections():
        for key in list(parser[section]):
            name = f"{ENV_PREFIX}{section}_{key}".upper()
            if name in environ:
                parser[section][key] = environ[name]
    return parser


def config_as_dict(parser: configparser.ConfigParser) -> dict:
    return {s: dict(parser[s]) for s in sorted(parser.sections())}


def config_hash(parser: configparser.ConfigParser) -> str:
    blob = json.dumps(config_as_dict(parser), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _floats(text: str) -> list:
    return [float(t) for t in text.replace(",", " ").split()]


def _names(text: str) -> list:
    return [t for t in text.replace(",", " ").split()]


class Run:
    """State shared by the stages of one command."""

    def __init__(self, args, parser):
        self.args = args
        self.cfg = parser
        self.out = Path(args.out)
        self.seed = args.seed if args.seed is not None else parser.getint("data", "seed")
        self.zcfg = ZurcherConfig.from_mapping(parser["model"])
        self.stages = []
        self.outputs = []
        self.extra = {}

    def stage(self, name):
        return _Stage(name, self.stages)

    def path(self, name) -> Path:
        p = self.out / name
        self.outputs.append(name)
        return p

    def data(self) -> dp.PanelDataset:
        with self.stage("load-data"):
            src = self.cfg["data"]["path"].strip()
            if src:
                data = dp.PanelDataset.read_csv(src)
                data.check_ranges(self.zcfg.num_states, 2)
                self.extra["data_source"] = {"path": src}
            else:
                data = simulate_panel(self.zcfg, self.cfg.getint("data", "units"),
                                      self.cfg.getint("data", "periods"), seed=self.seed)
                self.extra["data_source"] = {"simulated": True, "seed": self.seed}
        return data

    def spec(self) -> CounterfactualSpec:
        return CounterfactualSpec.scale_maintenance(self.cfg.getfloat("counterfactual", "mc_scale"))

    def init_theta(self):
        return np.array([self.cfg.getfloat("estimate", "init_mc"),
                         self.cfg.getfloat("estimate", "init_rc")])

    def profile(self, data) -> analysis.BetaProfile:
        prof = analysis.BetaProfile(self.zcfg, data, init_theta=self.init_theta(), spec=self.spec())
        sol_path = self.cfg["estimate"]["solution"].strip()
        if sol_path:
            with self.stage("load-solution"):
                sol = EstimationSolution.read_json(sol_path)
                prof.add(sol)
        return prof

    def manifest(self, command, status, error=None) -> dict:
        return {"command": command, "status": status, "error": error, "version": __version__,
                "seed": self.seed, "config_hash": config_hash(self.cfg),
                "config": config_as_dict(self.cfg),
                "model": {"theta": {"mc": self.zcfg.mc, "rc": self.zcfg.rc},
                          "beta": self.zcfg.beta,
                          "phi": {"phi1": self.zcfg.phi1, "phi2": self.zcfg.phi2},
                          "num_states": self.zcfg.num_states},
                "threads": self.args.threads, "outputs": self.outputs, "stages": self.stages,
                **self.extra}


def cmd_simulate(run: Run) -> None:
    data = run.data()
    with run.stage("write"):
        data.write_csv(run.path("panel.csv"))


def cmd_estimate(run: Run) -> None:
    data = run.data()
    with run.stage("estimate"):
        sol = nfxp_estimate(run.zcfg.model(), data, init_theta=run.init_theta())
    with run.stage("write"):
        sol.write_json(run.path("solution.json"))


def cmd_sensitivity(run: Run) -> None:
    data = run.data()
    prof = run.profile(data)
    beta = run.zcfg.beta
    deltas = _floats(run.cfg["sensitivity"]["deltas"])
    with run.stage("estimate"):
        base = prof.solution(beta)
    with run.stage("re-estimate"):
        # independent fits, all warm-started from the base fit
        def fit(b):
            return b, nfxp_estimate(prof.model, data, gamma=b, init_theta=base.theta_hat,
                                    v0=base.v_hat)
        with ThreadPoolExecutor(max_workers=max(1, run.args.threads)) as pool:
            for b, sol in pool.map(fit, [beta - d for d in deltas]):
                prof.add(sol)
    with run.stage("local-sensitivity"):
        rows, local = analysis.table1_rows(prof, beta, deltas)
    with run.stage("write"):
        write_table1_csv(rows, run.path("table1.csv"))
        report = local.report.to_dict()
        report.update({"targets": local.values, "derivatives": local.derivatives,
                       "cf_ccp_derivative": local.cf_ccp_derivative.tolist(), "rows": rows})
        run.path("sensitivity.json").write_text(json.dumps(report, indent=2))
        base.write_json(run.path("solution.json"))


def cmd_bounds(run: Run) -> None:
    data = run.data()
    prof = run.profile(data)
    sec = run.cfg["bounds"]
    lower = float(sec["lower"])
    results = []
    for name in _names(sec["targets"]):
        for upper in _floats(sec["upper"]):
            with run.stage(f"bounds:{name}:{upper}"):
                results.append(globalsens.bounds_estimate(
                    prof.target(name), (lower, upper), method=sec["method"], name=name,
                    grid_step=float(sec["grid_step"])))
    with run.stage("write"):
        globalsens.write_table2_csv(results, run.path("table2.csv"))
        run.path("bounds.json").write_text(json.dumps([r.to_dict() for r in results], indent=2))


def cmd_monotone(run: Run) -> None:
    data = run.data()
    X = run.zcfg.num_states
    with run.stage("first-stage"):
        p = analysis.first_stage_ccp(run.zcfg, data, run.cfg.getint("figures", "degree"))
    q0, q1 = run.zcfg.model().transitions
    with run.stage("certificate"):
        verdict = globalsens.renewal_monotonicity_check(p[:, 1], q1)
        verdict.write_csv(run.path("verdicts.csv"))
        run.extra["verdict"] = {"certificate": verdict.certificate, "overall": verdict.overall,
                                "premise": verdict.premise}
    if run.cfg.getboolean("monotone", "sign_scan"):
        with run.stage("sign-scan"):
            grid = globalsens.default_beta_grid(run.cfg.getboolean("monotone", "full_grid"))
            scan = globalsens.sign_scan_verdict(p[:, 1], [q0], q1, grid)
            scan.write_csv(run.path("verdicts_sign_scan.csv"))
            run.extra["sign_scan"] = {"overall": scan.overall, "premise": scan.premise}
    with run.stage("figures"):
        prof = run.profile(data)
        betas = _floats(run.cfg["figures"]["betas"])
        rows = analysis.figure_rows(prof, betas, p_first_stage=p, states=(1, (X + 1) // 2, X))
        analysis.write_figure_csv(rows, run.path("figure_data.csv"))


def cmd_breakdown(run: Run) -> None:
    data = run.data()
    prof = run.profile(data)
    sec = run.cfg["breakdown"]
    if not sec["tau_star"].strip():
        raise StageError("config", ValueError("[breakdown] tau_star is required"))
    with run.stage("breakdown"):
        res = globalsens.breakdown_frontier(
            prof.target(sec["target"]), float(sec["tau_star"]),
            (float(sec["lower"]), float(sec["upper"])), direction=sec["direction"],
            monotone=run.cfg.getboolean("breakdown", "monotone"),
            grid_points=int(sec["grid_points"]))
    with run.stage("write"):
        res.write_json(run.path("breakdown.json"))
        run.extra["breakdown"] = {"verdict": res.verdict, "frontier": res.frontier}


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "sensitivity": cmd_sensitivity,
            "bounds": cmd_bounds, "monotone": cmd_monotone, "breakdown": cmd_breakdown}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ddcsense", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="INI config file (sections: " + ", ".join(DEFAULTS) + ")")
    ap.add_argument("--out", default="ddcsense-out", help="output directory (created if missing)")
    ap.add_argument("--seed", type=int, default=None, help="simulation seed (overrides [data] seed)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for independent fits")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("command", choices=sorted(COMMANDS))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        parser = load_config(args.config)
        run = Run(args, parser)
        run.out.mkdir(parents=True, exist_ok=True)
    except Exception as exc:
        print(f"ddcsense: stage 'config' failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](run)
    except StageError as exc:
        (run.out / "manifest.json").write_text(
            json.dumps(run.manifest(args.command, "failed", str(exc)), indent=2))
        print(f"ddcsense: {exc}", file=sys.stderr)
        return 1
    run.outputs.append("manifest.json")
    (run.out / "manifest.json").write_text(json.dumps(run.manifest(args.command, "ok"), indent=2))
    print(json.dumps({"command": args.command, "status": "ok", "out": str(run.out),
                      "outputs": run.outputs}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
