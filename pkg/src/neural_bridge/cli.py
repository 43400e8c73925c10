"""`estimate` command-line harness.

    estimate run   --config exp.json [--method nb] [--seed S] [--workers C] [--out DIR]
    estimate truth --config exp.json --samples M [--out FILE]
    estimate pca   --report trial.json --gamma-test G [--weighted]

Exit codes: 0 success, 2 config error, 3 simulation fault, 4 insufficient data.
Progress is streamed to stderr as one JSON object per line.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from scipy import stats

from . import densities, engine, envs
from .model import (
    ConfigError,
    EstimateReport,
    InsufficientData,
    NeuralBridgeError,
    RunConfig,
    make_problem,
)

log = logging.getLogger("neural_bridge")

ENVIRONMENTS = {
    "synthetic": ("std-gaussian", "synthetic"),
    "mountaincar": ("mountaincar-prior", "mountaincar"),
}
CI_LEVEL = 0.99


def load_schema(name: str) -> dict:
    text = resources.files("neural_bridge").joinpath("schemas", name).read_text()
    return json.loads(text)


def validate(instance: dict, schema_name: str) -> None:
    try:
        jsonschema.validate(instance, load_schema(schema_name))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{schema_name}: {where}: {exc.message}") from None


def clean_json(obj):
    """Replace non-finite floats by None so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: clean_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean_json(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean_json(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


@dataclass
class ExperimentConfig:
    environment: str
    gamma: float
    gamma_test: list[float] = field(default_factory=list)
    methods: list[str] = field(default_factory=lambda: ["nb"])
    trials: int = 1
    seed: int = 0
    workers: int = 1
    output_dir: str = "results"
    controller: str | None = None
    horizon: int = 999
    gradient_mode: str = "exact"
    budget: int | None = None
    p_reference: float | None = None
    truth: float | str | None = None
    run: dict = field(default_factory=dict)
    ams: dict = field(default_factory=dict)
    mc: dict = field(default_factory=dict)
    surrogate: dict | None = None
    name: str = "experiment"
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path = Path(".")) -> "ExperimentConfig":
        validate(raw, "config.schema.json")
        kw = {k: v for k, v in raw.items() if k != "schema_version"}
        cfg = cls(**kw, base_dir=base_dir)
        if not cfg.gamma_test:
            cfg.gamma_test = [cfg.gamma]
        if any(g < cfg.gamma for g in cfg.gamma_test):
            raise ConfigError("every gamma_test must be >= gamma")
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(raw, path.parent)

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q

    def problem(self, gamma: float | None = None):
        base_id, sim_id = ENVIRONMENTS[self.environment]
        controller = self.resolve(self.controller) if self.controller else None
        return make_problem(2, base_id, sim_id, self.gamma if gamma is None else gamma,
                            controller=controller, gradient_mode=self.gradient_mode,
                            horizon=self.horizon)

    def run_config(self, method: str, seed: int) -> RunConfig:
        return RunConfig(warping=method == "nb", master_seed=seed, workers=self.workers, **self.run)

    def ams_config(self, seed: int) -> engine.AmsConfig:
        kw = dict(self.ams)
        if "n_particles" not in kw:
            if self.budget is None or self.p_reference is None:
                raise ConfigError("AMS needs ams.n_particles or both budget and p_reference")
            kw["n_particles"] = engine.ams_particles_for_budget(
                self.budget, self.p_reference, kw.get("cull_fraction", 0.1), kw.get("mcmc_steps", 10))
        return engine.AmsConfig(master_seed=seed, workers=self.workers, **kw)

    def mc_samples(self) -> int:
        n = self.mc.get("n_samples", self.budget)
        if n is None:
            raise ConfigError("MC needs mc.n_samples or budget")
        return int(n)

    def truth_values(self) -> dict[float, float] | None:
        if self.truth is None:
            return None
        if self.truth == "closed-form":
            if self.environment != "synthetic":
                raise ConfigError("closed-form truth exists only for the synthetic problem")
            return {g: envs.synthetic_probability(g) for g in self.gamma_test}
        if isinstance(self.truth, (int, float)):
            return {self.gamma: float(self.truth)}
        data = json.loads(self.resolve(self.truth).read_text())
        return {float(row["gamma_test"]): row["p_hat"] for row in data.get("estimates", [])}


def _progress(event: dict) -> None:
    sys.stderr.write(json.dumps(clean_json(event)) + "\n")
    sys.stderr.flush()


def run_trial(cfg: ExperimentConfig, method: str, seed: int, mc_budgets=None, progress=_progress) -> EstimateReport:
    problem = cfg.problem()
    surrogate = engine.SurrogateConfig(**cfg.surrogate) if cfg.surrogate else None
    if method in ("b", "nb"):
        rep = engine.estimate(method, problem, cfg.run_config(method, seed), progress, surrogate)
    elif method == "ams":
        rep = engine.estimate(method, problem, cfg.ams_config(seed), progress)
    else:
        rc = RunConfig(n_particles=cfg.mc_samples(), master_seed=seed, workers=cfg.workers)
        rep = engine.estimate("mc", problem, rc, progress, keep_values=True)
    rep.curve = engine.extract_curve(rep, cfg.gamma_test, budgets=mc_budgets)
    return rep


def _ci(log_values, level=CI_LEVEL, single_var=None):
    """Normal-theory CI for exp(mean log p̂)."""
    z = stats.norm.ppf(0.5 + level / 2)
    vals = np.asarray(log_values, dtype=float)
    m = float(np.mean(vals))
    if len(vals) > 1:
        se = float(np.std(vals, ddof=1) / np.sqrt(len(vals)))
    elif single_var is not None and math.isfinite(single_var):
        se = math.sqrt(single_var)
    else:
        return m, float("nan"), float("nan")
    return m, math.exp(m - z * se), math.exp(m + z * se)


def summarize(results: dict[str, list[EstimateReport]], gamma_test, truth=None):
    """Per-(method, gamma_test) rows for the summary and curve CSVs."""
    summary, curve = [], []
    for method, reps in results.items():
        for i, gt in enumerate(gamma_test):
            pts = [r.curve[i] for r in reps if r is not None]
            n_failed = sum(r is None for r in reps)
            if not pts:
                summary.append({"method": method, "gamma_test": gt, "trials_ok": 0, "trials_failed": n_failed})
                continue
            p = np.array([pt["p_hat"] for pt in pts])
            logs = np.array([pt["log_p_hat"] for pt in pts])
            est = [pt["rel_mse_estimate"] for pt in pts if pt["rel_mse_estimate"] is not None]
            ref = None if truth is None else truth.get(gt)
            row = {
                "method": method, "gamma_test": gt, "trials_ok": len(pts), "trials_failed": n_failed,
                "mean_log_p_hat": float(np.mean(logs)) if np.all(np.isfinite(logs)) else None,
                "mean_p_hat": float(np.mean(p)),
                "empirical_rel_mse": (float(np.mean((p / ref - 1.0) ** 2)) if ref else
                                      float(np.var(p, ddof=1) / np.mean(p) ** 2) if len(p) > 1 and np.mean(p) > 0
                                      else None),
                "empirical_against": "truth" if ref else ("trials" if len(p) > 1 else ""),
                "mean_rel_mse_estimate": float(np.mean(est)) if est else None,
                "mean_queries": float(np.mean([pt["queries"] for pt in pts])),
            }
            summary.append(row)
            if np.all(np.isfinite(logs)):
                m, lo, hi = _ci(logs, single_var=est[0] if len(pts) == 1 and est else None)
                mono = [pt.get("log_p_hat_monotone", pt["log_p_hat"]) for pt in pts]
                curve.append({"method": method, "gamma_test": gt, "p_hat": math.exp(m),
                              "ci_low": lo, "ci_high": hi, "level": CI_LEVEL,
                              "p_hat_monotone": math.exp(float(np.mean(mono))), "truth": ref})
    return summary, curve


def write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in keys})


def write_report(rep: EstimateReport, path: Path) -> dict:
    d = clean_json(rep.to_dict())
    validate(d, "report.schema.json")
    path.write_text(json.dumps(d))
    return d


def run_experiment(cfg: ExperimentConfig, methods=None, seed=None, out=None) -> dict:
    methods = methods or cfg.methods
    seed = cfg.seed if seed is None else seed
    out = Path(out) if out else cfg.resolve(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    # ladder methods first so MC can be budget-matched per gamma_test
    order = sorted(methods, key=lambda m: ("nb", "b", "ams", "mc").index(m))
    results: dict[str, list] = {}
    fault = None
    for method in order:
        results[method] = []
        for t in range(cfg.trials):
            trial_seed = seed + t
            budgets = None
            if method == "mc":
                ladder = results.get("nb") or results.get("b")
                if ladder and ladder[t] is not None:
                    budgets = [min(pt["queries"], cfg.mc_samples()) for pt in ladder[t].curve]
            try:
                rep = run_trial(cfg, method, trial_seed, budgets)
            except engine.EngineAbort as exc:
                log.error("%s trial %d failed: %s", method, t, exc)
                fault = fault or exc
                if exc.report is not None:
                    write_report(exc.report, out / f"{method}_trial{t:03d}_partial.json")
                results[method].append(None)
                continue
            except ConfigError:
                raise
            except NeuralBridgeError as exc:
                log.error("%s trial %d failed: %s", method, t, exc)
                fault = fault or exc
                results[method].append(None)
                continue
            write_report(rep, out / f"{method}_trial{t:03d}.json")
            results[method].append(rep)
    summary, curve = summarize(results, cfg.gamma_test, cfg.truth_values())
    write_csv(out / "summary.csv", summary)
    write_csv(out / "curve.csv", curve)
    return {"results": results, "summary": summary, "curve": curve, "fault": fault, "out": out}


@dataclass
class PcaProjection:
    components: np.ndarray  # (k, d), rows orthonormal
    explained_variance_ratio: np.ndarray
    projected: np.ndarray
    mean: np.ndarray
    insufficient_variance: bool = False

    def to_dict(self) -> dict:
        return clean_json({k: getattr(self, k) for k in self.__dataclass_fields__})


def pca_failures(samples, gamma_test: float | None = None, f=None, weights=None, n_components: int = 2):
    """Top principal directions of failure samples (rows with f <= gamma_test).

    ``weights`` (optional, one per sample) give a weighted covariance, e.g.
    importance weights that undo the tilt of a ladder rung.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if f is not None:
        keep = np.asarray(f) <= gamma_test
        x = x[keep]
        if weights is not None:
            weights = np.asarray(weights, dtype=float)[keep]
    if len(x) < 3:
        raise InsufficientData(f"need at least 3 failure samples, got {len(x)}")
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    mean = w @ x
    xc = x - mean
    cov = (xc * w[:, None]).T @ xc
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n_components]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order].T
    total = float(np.trace(cov))
    if total <= 1e-300:
        k = min(n_components, x.shape[1])
        return PcaProjection(np.full((k, x.shape[1]), np.nan), np.full(k, np.nan),
                             np.zeros((len(x), k)), mean, insufficient_variance=True)
    return PcaProjection(vecs, vals / total, xc @ vecs.T, mean)


def ground_truth(cfg: ExperimentConfig, samples: int, seed: int | None = None,
                 chunk: int = 1_000_000, level: float = CI_LEVEL) -> dict:
    """Large-budget MC oracle with Clopper-Pearson intervals per gamma_test."""
    seed = cfg.seed if seed is None else seed
    out = {"samples": int(samples), "seed": seed, "environment": cfg.environment, "level": level,
           "estimates": [], "error": None}
    if samples <= 0:
        out["error"] = "zero budget"
        return out
    problem = cfg.problem()
    grid = np.asarray(cfg.gamma_test, dtype=float)
    hits = np.zeros(len(grid), dtype=np.int64)
    from .model import parallel_query, rng_stream

    for i, start in enumerate(range(0, samples, chunk)):
        m = min(chunk, samples - start)
        x = problem.base.sample(m, rng_stream(seed, "truth", i))
        fv, _ = parallel_query(problem, x, cfg.workers, need_grad=False)
        hits += (fv[:, None] <= grid[None, :]).sum(axis=0)
        _progress({"event": "truth", "done": start + m, "of": samples})
    for g, h in zip(grid, hits):
        ci = stats.binomtest(int(h), samples).proportion_ci(level, method="exact")
        out["estimates"].append({"gamma_test": float(g), "hits": int(h), "p_hat": h / samples,
                                 "ci_low": ci.low, "ci_high": ci.high})
    out["query_count"] = problem.counter.calls
    return out


def _base_for(problem_dict: dict):
    base = problem_dict.get("base")
    if base == "mountaincar-prior":
        return densities.mountaincar_prior()
    return densities.standard_gaussian(int(problem_dict.get("dimension", 2)))


def pca_from_report(path, gamma_test: float, weighted: bool = False) -> PcaProjection:
    d = json.loads(Path(path).read_text())
    rep = EstimateReport.from_dict(d)
    if not rep.rungs:
        raise InsufficientData("report has no retained rung samples (MC/AMS reports carry none)")
    rung = rep.rungs[-1]
    base = _base_for(rep.problem)
    x = base.to_constrained(np.asarray(rung.x))
    w = engine.threshold_weights(rung.f, rung.beta, rep.gamma, gamma_test) if weighted else None
    return pca_failures(x, gamma_test, f=rung.f, weights=w)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="estimate", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run trials of one or more estimators")
    r.add_argument("--config", required=True)
    r.add_argument("--method", choices=engine.METHODS)
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int)
    r.add_argument("--out")

    t = sub.add_parser("truth", help="large-budget Monte Carlo ground truth")
    t.add_argument("--config", required=True)
    t.add_argument("--samples", type=int, required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--out", help="output JSON (default: <output_dir>/truth.json)")

    p = sub.add_parser("pca", help="PCA of failure samples in a report's last rung")
    p.add_argument("--report", required=True)
    p.add_argument("--gamma-test", type=float, required=True)
    p.add_argument("--weighted", action="store_true", help="undo the rung's tilt with importance weights")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = ExperimentConfig.load(args.config)
            if args.workers:
                cfg.workers = args.workers
            res = run_experiment(cfg, [args.method] if args.method else None, args.seed, args.out)
            print(json.dumps(clean_json(res["summary"]), indent=1))
            if res["fault"] is not None:
                return getattr(res["fault"], "exit_code", 3)
        elif args.command == "truth":
            cfg = ExperimentConfig.load(args.config)
            if args.workers:
                cfg.workers = args.workers
            res = ground_truth(cfg, args.samples, args.seed)
            out = Path(args.out) if args.out else cfg.resolve(cfg.output_dir) / "truth.json"
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(json.dumps(clean_json(res), indent=1))
            print(json.dumps(clean_json(res), indent=1))
        else:
            proj = pca_from_report(args.report, args.gamma_test, args.weighted)
            print(json.dumps(proj.to_dict() | {"projected": None, "n_failures": len(proj.projected)}, indent=1))
    except NeuralBridgeError as exc:
        log.error("%s", exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
