"""Twin-experiment scenarios, presets, metrics, and report emission.

A scenario generates a truth trajectory (after burn-in), observes it through
the true function h with instrument noise, runs the correction loop under the
assumed function g, and writes tidy CSV artifacts plus a JSON report.  Two
independent seeds control the truth (initial condition and process noise) and
the observation noise.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .correction import (
    OmecConfig,
    OmecResult,
    iterate,
    solve_correction_system,
    write_iterations_csv,
)
from .dynamics import (
    ModelSpec,
    Trajectory,
    integrate,
    observe,
    write_observations_csv,
    write_trajectory_csv,
)
from .enkf import (
    FilterConfig,
    write_covariance_sidecar,
    write_filter_csv,
)
from .errors import InvalidArgumentError, OmecError
from .observation import (
    ComponentwiseObservation,
    IdentityObservation,
    LinearObservation,
    write_correction_csv,
    write_neighbors_csv,
)
from .serialize import write_csv

PRESET_NAMES = ("l63", "l96_10", "l96_40")


@dataclass
class ScenarioConfig:
    """Flat twin-experiment description; every field round-trips through
    ``key=value`` config files and the JSON report echo."""

    preset: str = "custom"
    model_name: str = "lorenz63"
    model_dim: int = 3
    dt: float = 0.1
    substeps: int = 10
    q_true: float = 0.0  # process noise variance per component (diagonal)
    num_steps: int = 1000
    burn_in: int = 1000
    r_true: float = 2.0  # instrument noise variance per component (diagonal)
    true_obs: str = "identity"
    assumed_obs: str = "identity"
    seed_truth: int = 1000
    seed_noise: int = 2000
    adaptive: bool = True
    tau: float = 50.0
    r_inflation: float = 1.0
    delays: int = 2
    neighbors: int = 100
    max_iter: int = 20
    threshold: Optional[float] = None
    localization: str = "none"
    record_history: bool = True
    save_covariances: bool = False
    diag_linear_system: bool = False
    svg: bool = True

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def preset(name: str) -> ScenarioConfig:
    """Frozen scenario configurations for the reference experiments."""
    if name == "l63":
        return ScenarioConfig(
            preset="l63",
            model_name="lorenz63",
            model_dim=3,
            dt=0.1,
            substeps=10,
            q_true=0.01,
            num_steps=8000,
            burn_in=1000,
            r_true=2.0,
            true_obs="sin,shift:-6,cos",
            assumed_obs="identity",
            tau=25.0,
            delays=2,
            neighbors=100,
            max_iter=20,
            localization="none",
            record_history=True,
        )
    if name == "l96_10":
        return ScenarioConfig(
            preset="l96_10",
            model_name="lorenz96",
            model_dim=10,
            dt=0.1,
            substeps=10,
            q_true=0.0,
            num_steps=10000,
            burn_in=1000,
            r_true=2.0,
            true_obs="ring_linear:1.1,1.0,1.2",
            assumed_obs="identity",
            tau=25.0,
            delays=2,
            neighbors=100,
            max_iter=15,
            localization="none",
            record_history=False,
        )
    if name == "l96_40":
        cfg = preset("l96_10")
        cfg.preset = "l96_40"
        cfg.model_dim = 40
        cfg.localization = "ring3"
        return cfg
    raise InvalidArgumentError(
        f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}"
    )


def build_observation_function(descriptor: str, dim: int):
    """Observation function from its config descriptor.

    ``identity``; ``ring_linear:left,center,right`` (cyclic tridiagonal
    matrix, row i reading left*x_{i-1} + center*x_i + right*x_{i+1}); or a
    comma list of componentwise maps like ``sin,shift:-6,cos``.
    """
    if descriptor == "identity":
        return IdentityObservation(dim)
    if descriptor.startswith("ring_linear:"):
        parts = descriptor.split(":", 1)[1].split(",")
        if len(parts) != 3:
            raise InvalidArgumentError(
                "ring_linear needs three coefficients left,center,right"
            )
        left, center, right = (float(p) for p in parts)
        mat = np.zeros((dim, dim))
        for i in range(dim):
            mat[i, (i - 1) % dim] = left
            mat[i, i] = center
            mat[i, (i + 1) % dim] = right
        return LinearObservation(mat)
    maps = []
    for token in descriptor.split(","):
        name, _, param = token.partition(":")
        maps.append((name.strip(), float(param) if param else None))
    if len(maps) != dim:
        raise InvalidArgumentError(
            f"componentwise descriptor has {len(maps)} entries for dimension {dim}"
        )
    return ComponentwiseObservation(maps)


def build_model(cfg: ScenarioConfig) -> ModelSpec:
    q = None
    if cfg.q_true > 0:
        q = cfg.q_true * np.eye(cfg.model_dim)
    return ModelSpec(
        name=cfg.model_name,
        dim=cfg.model_dim,
        dt=cfg.dt,
        substeps=cfg.substeps,
        process_noise_cov=q,
    )


def generate_truth(cfg: ScenarioConfig, model: ModelSpec) -> Trajectory:
    """Burned-in truth: uniform [-1, 1]^n start, burn_in intervals discarded."""
    rng = np.random.default_rng(cfg.seed_truth)
    x0 = rng.uniform(-1.0, 1.0, model.dim)
    traj = integrate(model, x0, cfg.burn_in + cfg.num_steps, rng=rng)
    return Trajectory(
        states=traj.states[cfg.burn_in :],
        dt=model.dt,
        t0=model.dt,
        model_name=model.name,
    )


def rmse(estimate, truth, spin_up: int = 50) -> np.ndarray:
    """Per-component root mean squared error after a spin-up discard."""
    est = estimate.states if isinstance(estimate, Trajectory) else np.asarray(estimate)
    tru = truth.states if isinstance(truth, Trajectory) else np.asarray(truth)
    if est.shape != tru.shape:
        raise InvalidArgumentError("estimate and truth shapes differ")
    if not 0 <= spin_up < len(est):
        raise InvalidArgumentError(
            f"spin_up must lie in [0, {len(est) - 1}], got {spin_up}"
        )
    d = est[spin_up:] - tru[spin_up:]
    return np.sqrt(np.mean(d * d, axis=0))


@dataclass
class Report:
    """Summary of one scenario run; numerically recomputable from the CSVs."""

    status: str
    preset: str
    config: dict
    version: str
    seed_truth: int
    seed_noise: int
    iterations_run: int
    stopped_early: bool
    threshold: float
    runtime_seconds: float
    rmse_uncorrected: list
    rmse_corrected: list
    rmse_by_iteration: list
    delta_g: list
    nll: list
    r_trace: list
    q_trace: list
    estimator_correlation: Optional[list] = None
    estimator_warned: Optional[bool] = None
    error: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def run_scenario(cfg: ScenarioConfig, out_dir=None) -> Report:
    """Run one full twin experiment and (optionally) write its artifacts.

    On any package error a failure report is still written to ``out_dir``
    before the exception propagates.
    """
    start = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    try:
        report = _run_scenario_inner(cfg, out, start)
    except OmecError as exc:
        if out is not None:
            failed = Report(
                status="failed",
                preset=cfg.preset,
                config=cfg.as_dict(),
                version=__version__,
                seed_truth=cfg.seed_truth,
                seed_noise=cfg.seed_noise,
                iterations_run=0,
                stopped_early=False,
                threshold=float("nan"),
                runtime_seconds=time.perf_counter() - start,
                rmse_uncorrected=[],
                rmse_corrected=[],
                rmse_by_iteration=[],
                delta_g=[],
                nll=[],
                r_trace=[],
                q_trace=[],
                error=f"{type(exc).__name__}: {exc}",
            )
            (out / "report.json").write_text(failed.to_json())
        raise
    return report


def _run_scenario_inner(cfg: ScenarioConfig, out, start) -> Report:
    model = build_model(cfg)
    h = build_observation_function(cfg.true_obs, cfg.model_dim)
    g = build_observation_function(cfg.assumed_obs, cfg.model_dim)
    truth = generate_truth(cfg, model)
    observations = observe(
        truth, h, cfg.r_true * np.eye(h.dim_out), rng=np.random.default_rng(cfg.seed_noise)
    )
    filter_config = FilterConfig(
        adaptive=cfg.adaptive, tau=cfg.tau, r_inflation=cfg.r_inflation
    )
    omec_config = OmecConfig(
        delays=cfg.delays,
        num_neighbors=cfg.neighbors,
        max_iterations=cfg.max_iter,
        threshold=cfg.threshold,
        localization=cfg.localization,
        record_history=cfg.record_history,
    )
    # likelihood diagnostic needs SPD covariances; substitute a small Q when
    # the truth is noise-free
    q_nll = (cfg.q_true if cfg.q_true > 0 else 0.01) * np.eye(cfg.model_dim)
    r_nll = cfg.r_true * np.eye(h.dim_out)
    result = iterate(
        observations,
        model,
        g,
        filter_config,
        omec_config,
        truth=truth,
        nll_covs=(q_nll, r_nll),
    )
    spin = max(cfg.delays, 50)
    rmse_iters = result.rmse
    est_corr = None
    est_warned = None
    comparison = None
    if cfg.diag_linear_system:
        _, smoothed_ls, est_warned = solve_correction_system(
            result.index, result.first_raw, cfg.neighbors
        )
        lo = cfg.delays
        est_corr = [
            float(np.corrcoef(result.first_smoothed[lo:, j], smoothed_ls[lo:, j])[0, 1])
            for j in range(smoothed_ls.shape[1])
        ]
        comparison = (result.first_smoothed, smoothed_ls)
    report = Report(
        status="ok",
        preset=cfg.preset,
        config=cfg.as_dict(),
        version=__version__,
        seed_truth=cfg.seed_truth,
        seed_noise=cfg.seed_noise,
        iterations_run=len(result.iterations),
        stopped_early=result.stopped_early,
        threshold=result.threshold,
        runtime_seconds=0.0,
        rmse_uncorrected=[float(v) for v in rmse_iters[0]],
        rmse_corrected=[float(v) for v in rmse_iters[-1]],
        rmse_by_iteration=[[float(v) for v in row] for row in rmse_iters],
        delta_g=[float(r.delta_g) for r in result.iterations],
        nll=[float(r.nll) for r in result.iterations],
        r_trace=[float(r.r_trace_stable) for r in result.iterations],
        q_trace=[float(r.q_trace_stable) for r in result.iterations],
        estimator_correlation=est_corr,
        estimator_warned=est_warned,
    )
    if out is not None:
        _write_artifacts(out, cfg, truth, observations, g, result, comparison)
    report.runtime_seconds = time.perf_counter() - start
    if out is not None:
        (out / "report.json").write_text(report.to_json())
    return report


def _write_artifacts(out, cfg, truth, observations, g, result: OmecResult, comparison):
    write_trajectory_csv(out / "truth.csv", truth)
    write_observations_csv(out / "observations.csv", observations)
    write_iterations_csv(out / "iterations.csv", result)
    write_neighbors_csv(
        out / "neighbors.csv", result.final_correction.neighbors, cfg.delays
    )
    if cfg.record_history:
        for rec in result.iterations:
            if rec.correction is not None:
                write_correction_csv(
                    out / f"correction_iter{rec.index:04d}.csv", rec.correction
                )
    write_correction_csv(out / "correction_final.csv", result.final_correction)
    write_filter_csv(out / "filter_final.csv", result.final_run)
    if cfg.save_covariances:
        write_covariance_sidecar(
            out / "filter_final_cov.bin", result.final_run.posterior_covs
        )
    corrected = g(result.final_run.posterior_means) + result.final_correction.smoothed
    T, m = corrected.shape
    write_csv(
        out / "corrected_observations.csv",
        ["k"] + [f"g_corrected_{i + 1}" for i in range(m)],
        [np.arange(T)] + [corrected[:, i] for i in range(m)],
    )
    if comparison is not None:
        simple, linsys = comparison
        lo = cfg.delays
        ks = np.arange(lo, T)
        write_csv(
            out / "estimator_comparison.csv",
            ["k"]
            + [f"simple_{i + 1}" for i in range(m)]
            + [f"linear_system_{i + 1}" for i in range(m)],
            [ks]
            + [simple[lo:, i] for i in range(m)]
            + [linsys[lo:, i] for i in range(m)],
        )
    if cfg.svg and result.rmse is not None:
        series = {
            f"x{i + 1}": (np.arange(len(result.iterations)), result.rmse[:, i])
            for i in range(result.rmse.shape[1])
        }
        _svg_line_chart(
            out / "rmse_vs_iteration.svg",
            series,
            title="RMSE by correction iteration",
            xlabel="iteration",
            ylabel="RMSE",
        )


_SVG_COLORS = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def _svg_line_chart(path, series, title="", xlabel="", ylabel=""):
    """Self-contained SVG line chart (no external renderer required)."""
    width, height = 640, 420
    ml, mr, mt, mb = 60, 20, 40, 50
    pw, ph = width - ml - mr, height - mt - mb
    xs_all = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    ys_all = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    x0, x1 = float(xs_all.min()), float(xs_all.max())
    y0, y1 = float(ys_all.min()), float(ys_all.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="15">{title}</text>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        xv = x0 + frac * (x1 - x0)
        yv = y0 + frac * (y1 - y0)
        parts.append(
            f'<text x="{px(xv):.1f}" y="{mt + ph + 16}" text-anchor="middle">{xv:.3g}</text>'
        )
        parts.append(
            f'<text x="{ml - 6}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>'
        )
        if frac not in (0.0, 1.0):
            parts.append(
                f'<line x1="{ml}" y1="{py(yv):.1f}" x2="{ml + pw}" y2="{py(yv):.1f}" '
                'stroke="#ddd"/>'
            )
    parts.append(
        f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">{xlabel}</text>'
    )
    parts.append(
        f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{ylabel}</text>'
    )
    for ci, (name, (xs, ys)) in enumerate(series.items()):
        color = _SVG_COLORS[ci % len(_SVG_COLORS)]
        pts = " ".join(f"{px(float(x)):.2f},{py(float(y)):.2f}" for x, y in zip(xs, ys))
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{ml + pw - 8}" y="{mt + 16 + 16 * ci}" text-anchor="end" '
            f'fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def render_report(run_dir) -> str:
    """Human summary re-rendered from the CSV artifacts of a run."""
    from .serialize import read_csv

    run_dir = Path(run_dir)
    it_path = run_dir / "iterations.csv"
    if not it_path.exists():
        raise InvalidArgumentError(f"{run_dir} does not contain iterations.csv")
    header, data = read_csv(it_path)
    lines = []
    meta = {}
    rp = run_dir / "report.json"
    if rp.exists():
        meta = json.loads(rp.read_text())
        lines.append(
            f"scenario {meta.get('preset', '?')}   seeds "
            f"(truth={meta.get('seed_truth')}, noise={meta.get('seed_noise')})   "
            f"status {meta.get('status')}"
        )
    ncomp = sum(1 for hname in header if hname.startswith("rmse_"))
    lines.append("  ".join(f"{hname:>12}" for hname in header))
    for row in data:
        lines.append(
            "  ".join(
                f"{int(v):>12}" if i == 0 else f"{v:>12.4g}"
                for i, v in enumerate(row)
            )
        )
    if len(data):
        first, last = data[0], data[-1]
        unc = first[2 : 2 + ncomp]
        cor = last[2 : 2 + ncomp]
        lines.append(
            "rmse uncorrected: "
            + ", ".join(f"{v:.3f}" for v in unc)
            + "   corrected: "
            + ", ".join(f"{v:.3f}" for v in cor)
        )
    return "\n".join(lines)


def _sweep_worker(args):
    cfg_dict, out_dir = args
    cfg = ScenarioConfig(**cfg_dict)
    report = run_scenario(cfg, out_dir)
    return dataclasses.asdict(report)


def max_workers(requested: Optional[int], jobs: int) -> int:
    cap = os.environ.get("OMEC_THREADS")
    w = requested if requested is not None else (os.cpu_count() or 1)
    if cap is not None:
        w = min(w, max(1, int(cap)))
    return max(1, min(w, jobs))


def sweep(
    cfg: ScenarioConfig,
    num_seeds: int,
    out_dir=None,
    workers: Optional[int] = None,
    seed_base: Optional[int] = None,
) -> tuple[list, dict]:
    """Run a scenario over consecutive seed pairs and aggregate RMSE.

    Seed pair i is (seed_truth + i, seed_noise + i) starting from the config
    seeds (or ``seed_base`` when given).  Scenarios run one per worker with
    independent output subdirectories ``seed_000`` etc.; OMEC_THREADS caps
    parallelism.

    Returns
    -------
    (reports, aggregate)
        Per-seed report dicts and a dict with per-component mean/stddev of
        uncorrected and corrected RMSE.
    """
    if num_seeds < 1:
        raise InvalidArgumentError("num_seeds must be >= 1")
    base_t = cfg.seed_truth if seed_base is None else seed_base
    base_n = cfg.seed_noise if seed_base is None else seed_base + 10000
    out = Path(out_dir) if out_dir is not None else None
    jobs = []
    for i in range(num_seeds):
        c = dataclasses.replace(cfg, seed_truth=base_t + i, seed_noise=base_n + i)
        sub = str(out / f"seed_{i:03d}") if out is not None else None
        jobs.append((c.as_dict(), sub))
    nworkers = max_workers(workers, len(jobs))
    if nworkers == 1:
        reports = [_sweep_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=nworkers) as pool:
            reports = list(pool.map(_sweep_worker, jobs))
    unc = np.array([r["rmse_uncorrected"] for r in reports])
    cor = np.array([r["rmse_corrected"] for r in reports])
    aggregate = {
        "num_seeds": num_seeds,
        "rmse_uncorrected_mean": unc.mean(axis=0).tolist(),
        "rmse_uncorrected_std": unc.std(axis=0).tolist(),
        "rmse_corrected_mean": cor.mean(axis=0).tolist(),
        "rmse_corrected_std": cor.std(axis=0).tolist(),
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        n = unc.shape[1]
        header = (
            ["seed_truth", "seed_noise"]
            + [f"rmse_unc_{i + 1}" for i in range(n)]
            + [f"rmse_cor_{i + 1}" for i in range(n)]
        )
        cols = [
            np.array([r["seed_truth"] for r in reports]),
            np.array([r["seed_noise"] for r in reports]),
        ]
        cols += [unc[:, i] for i in range(n)]
        cols += [cor[:, i] for i in range(n)]
        write_csv(out / "sweep.csv", header, cols)
        (out / "sweep.json").write_text(json.dumps(aggregate, indent=2, sort_keys=True))
    return reports, aggregate


def load_config_file(path) -> dict:
    """Flat ``key=value`` configuration; ``#`` starts a comment line."""
    values = {}
    fields = {f.name: f for f in dataclasses.fields(ScenarioConfig)}
    for ln, raw_line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"{path}:{ln}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in fields:
            raise InvalidArgumentError(f"{path}:{ln}: unknown key {key!r}")
        values[key] = _parse_value(val, fields[key].type)
    return values


def _parse_value(val: str, annotation: str = ""):
    # plain-string fields take the text verbatim, so localization=none means
    # the literal setting "none" rather than a null
    if annotation == "str":
        return val
    low = val.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    try:
        return int(val)
    except ValueError:
        pass
    try:
        return float(val)
    except ValueError:
        pass
    return val
