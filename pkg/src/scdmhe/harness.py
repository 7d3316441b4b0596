"""Monte Carlo benchmark harness: truth simulation, trial runner, CSV export.

A run is a pure function of (config, base seed): the noise generator, the
per-trial seed mixing, and the estimators are all deterministic, so repeated
runs produce byte-identical result files, and parallel execution equals
serial execution.  Wall-clock timing is collected around estimator steps only
(never truth simulation or I/O) and can be disabled entirely via
``timing.enabled = false`` when byte-stable summary files matter more than
latency numbers.

Within a trial every enabled estimator sees the identical measurement and
input sequences, so comparisons are paired.
"""

from __future__ import annotations

import concurrent.futures
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .baselines import (
    GaussianBelief,
    NonlinearMhe,
    ekf_predict,
    ekf_update,
    ukf_predict,
    ukf_update,
)
from .config import (
    BenchmarkConfig,
    ESTIMATOR_ORDER,
    make_estimator_config,
    make_model,
    make_noise,
    make_ukf_params,
)
from .diagnostics import observability_gramian
from .estimator import ScdMhe
from .exceptions import ScdMheError
from .models import control_signal
from .rng import GaussianStream, covariance_factor, mix_seed

WINDOW_ESTIMATORS = ("nmhe", "scdmhe")


@dataclass
class TrialResult:
    trial_index: int
    true_states: np.ndarray    # (N+1, n)
    measurements: np.ndarray   # (N, p)
    inputs: np.ndarray         # (N, m)
    estimates: dict = field(default_factory=dict)      # name -> (N, n)
    step_seconds: dict = field(default_factory=dict)   # name -> (N,)
    rmse: dict = field(default_factory=dict)           # name -> (n,)
    i_star: dict = field(default_factory=dict)         # name -> (N - horizon,)
    delta_final: dict = field(default_factory=dict)
    kkt_max: dict = field(default_factory=dict)
    arrival_eigs: dict = field(default_factory=dict)   # name -> (N - horizon, 2)
    alpha_hats: np.ndarray | None = None               # windows k = horizon-1 .. N-1
    failures: dict = field(default_factory=dict)
    nmhe_flagged_steps: int = 0


@dataclass
class SummaryTable:
    """Aggregate over a Monte Carlo run, rows in canonical estimator order."""

    estimators: tuple
    rmse: dict             # name -> (n,) pooled post-horizon RMSE per state
    mean_step_ms: dict     # name -> float
    n_trials: int = 0
    failed_trials: int = 0


def simulate_truth(model, cfg: BenchmarkConfig, stream: GaussianStream):
    """Roll out truth, measurements, and inputs for one trial.

    Per step the measurement noise is drawn before the process noise (this
    ordering is part of the reproducibility contract).  Zero covariances are
    allowed here (noise-free runs); estimators still require positive definite
    noise.
    """
    n_steps = cfg.steps
    lq = covariance_factor(np.diag(cfg.q_diag))
    lr = covariance_factor(np.diag(cfg.r_diag))
    states = np.empty((n_steps + 1, model.n))
    measurements = np.empty((n_steps, model.p))
    inputs = np.empty((n_steps, model.m))
    states[0] = np.asarray(cfg.x0_true, dtype=float)
    for k in range(n_steps):
        u_k = control_signal(k, gravity=cfg.gravity, amplitude=cfg.control_amplitude,
                             time_scale=cfg.control_time_scale)
        inputs[k] = u_k
        measurements[k] = model.measurement(states[k], k) + stream.multivariate_normal(lr)
        states[k + 1] = model.dynamics(states[k], inputs[k], k) + stream.multivariate_normal(lq)
    return states, measurements, inputs


def _recursive_driver(kind):
    """Per-step EKF/UKF loop; the first step is update-only on the prior."""

    def drive(model, cfg, measurements, inputs):
        noise = make_noise(cfg)
        q_cov, r_cov = noise.process, noise.measurement
        params = make_ukf_params(cfg)
        belief = GaussianBelief(mean=np.asarray(cfg.x0_hat, dtype=float),
                                cov=np.diag(cfg.p0_diag))
        n_steps = cfg.steps
        estimates = np.empty((n_steps, model.n))
        seconds = np.zeros(n_steps)
        timed = cfg.timing_enabled
        for k in range(n_steps):
            t0 = time.perf_counter() if timed else 0.0
            if kind == "ekf":
                if k > 0:
                    belief = ekf_predict(belief, model, inputs[k - 1], q_cov, k - 1)
                belief, _ = ekf_update(belief, model, measurements[k], r_cov, k)
            else:
                if k > 0:
                    belief = ukf_predict(belief, model, inputs[k - 1], q_cov, k - 1, params)
                belief, _ = ukf_update(belief, model, measurements[k], r_cov, k, params)
            if timed:
                seconds[k] = time.perf_counter() - t0
            estimates[k] = belief.mean
        return estimates, seconds, {}

    return drive


def _window_driver(kind):
    """EKF priming pass for the first window, then per-step window solves."""

    def drive(model, cfg, measurements, inputs):
        noise = make_noise(cfg)
        q_cov, r_cov = noise.process, noise.measurement
        est_cfg = make_estimator_config(cfg)
        ell = cfg.horizon
        n_steps = cfg.steps
        estimates = np.empty((n_steps, model.n))
        seconds = np.zeros(n_steps)
        timed = cfg.timing_enabled
        belief = GaussianBelief(mean=np.asarray(cfg.x0_hat, dtype=float),
                                cov=np.diag(cfg.p0_diag))
        for k in range(ell):
            t0 = time.perf_counter() if timed else 0.0
            if k > 0:
                belief = ekf_predict(belief, model, inputs[k - 1], q_cov, k - 1)
            belief, _ = ekf_update(belief, model, measurements[k], r_cov, k)
            if timed:
                seconds[k] = time.perf_counter() - t0
            estimates[k] = belief.mean

        t0 = time.perf_counter() if timed else 0.0
        if kind == "scdmhe":
            estimator = ScdMhe(model, est_cfg, noise,
                               x0_bar=np.asarray(cfg.x0_hat, dtype=float),
                               p0=np.diag(cfg.p0_diag))
        else:
            estimator = NonlinearMhe(model, est_cfg, noise,
                                     x0_bar=np.asarray(cfg.x0_hat, dtype=float),
                                     p0=np.diag(cfg.p0_diag),
                                     max_inner=cfg.nmhe_max_inner,
                                     max_halvings=cfg.nmhe_max_halvings)
        estimator.init_first_window(estimates[:ell], measurements[:ell],
                                    inputs[: ell - 1])
        if timed:
            seconds[ell - 1] += time.perf_counter() - t0

        i_star = np.empty(n_steps - ell, dtype=int)
        delta_final = np.empty(n_steps - ell)
        arrival_eigs = np.empty((n_steps - ell, 2))
        kkt_max = 0.0
        flagged = 0
        for k in range(ell, n_steps):
            cov = estimator.arrival.cov
            eigs = np.linalg.eigvalsh(cov)
            arrival_eigs[k - ell] = (eigs[0], eigs[-1])
            t0 = time.perf_counter() if timed else 0.0
            outcome = estimator.step(measurements[k], inputs[k - 1])
            if timed:
                seconds[k] = time.perf_counter() - t0
            estimates[k] = outcome.x_hat
            i_star[k - ell] = outcome.i_star
            delta_final[k - ell] = outcome.displacements[-1]
            if outcome.kkt_residuals:
                kkt_max = max(kkt_max, max(outcome.kkt_residuals))
            if not outcome.converged:
                flagged += 1
        extras = {
            "i_star": i_star,
            "delta_final": delta_final,
            "arrival_eigs": arrival_eigs,
            "kkt_max": kkt_max,
            "flagged": flagged,
        }
        return estimates, seconds, extras

    return drive


_DRIVERS = {
    "ekf": _recursive_driver("ekf"),
    "ukf": _recursive_driver("ukf"),
    "nmhe": _window_driver("nmhe"),
    "scdmhe": _window_driver("scdmhe"),
}


def _true_trajectory_alphas(model, cfg, true_states, inputs):
    """Smallest Gramian eigenvalue for every window along the true states."""
    ell = cfg.horizon
    n_steps = cfg.steps
    r_cov = np.diag(cfg.r_diag)
    a_all = [model.factors(true_states[k], inputs[k], k)[0] for k in range(n_steps - 1)]
    c_all = [model.output_matrix(true_states[k], k) for k in range(n_steps)]
    alphas = np.empty(n_steps - ell + 1)
    for k in range(ell - 1, n_steps):
        start = k - ell + 1
        report = observability_gramian(
            a_all[start: k], c_all[start: k + 1], [r_cov] * ell, window_start=start
        )
        alphas[k - ell + 1] = report.alpha_hat
    return alphas


def run_trial(cfg: BenchmarkConfig, trial_index: int) -> TrialResult:
    """Simulate one trial and run every enabled estimator on identical data."""
    model = make_model(cfg)
    stream = GaussianStream(mix_seed(cfg.seed, trial_index))
    true_states, measurements, inputs = simulate_truth(model, cfg, stream)
    result = TrialResult(trial_index=trial_index, true_states=true_states,
                         measurements=measurements, inputs=inputs)
    horizon = cfg.horizon
    for name in cfg.enabled:
        try:
            estimates, seconds, extras = _DRIVERS[name](model, cfg, measurements, inputs)
        except (ScdMheError, np.linalg.LinAlgError) as exc:
            result.failures[name] = f"{type(exc).__name__}: {exc}"
            result.estimates[name] = np.full((cfg.steps, model.n), np.nan)
            result.step_seconds[name] = np.zeros(cfg.steps)
            result.rmse[name] = np.full(model.n, np.nan)
            continue
        result.estimates[name] = estimates
        result.step_seconds[name] = seconds
        err = estimates[horizon:] - true_states[horizon: cfg.steps]
        result.rmse[name] = np.sqrt(np.mean(err ** 2, axis=0))
        if name in WINDOW_ESTIMATORS:
            result.i_star[name] = extras["i_star"]
            result.delta_final[name] = extras["delta_final"]
            result.arrival_eigs[name] = extras["arrival_eigs"]
            result.kkt_max[name] = extras["kkt_max"]
            if name == "nmhe":
                result.nmhe_flagged_steps = extras["flagged"]
    result.alpha_hats = _true_trajectory_alphas(model, cfg, true_states, inputs)
    return result


def _run_trial_star(args):
    return run_trial(*args)


def run_monte_carlo(cfg: BenchmarkConfig):
    """Run all trials (optionally in parallel) and aggregate.

    Returns ``(summary, results)``.  Failure policy: individual estimator
    failures are recorded and the run continues; if more than 10% of trials
    contain a failure the whole run errors out with per-trial diagnostics.
    """
    indices = list(range(cfg.trials))
    if cfg.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_trial_star, [(cfg, i) for i in indices]))
    else:
        results = [run_trial(cfg, i) for i in indices]
    results.sort(key=lambda r: r.trial_index)

    failed = [r for r in results if r.failures]
    if len(failed) > 0.1 * cfg.trials:
        lines = [f"trial {r.trial_index}: {r.failures}" for r in failed]
        raise ScdMheError(
            f"{len(failed)}/{cfg.trials} trials failed (>10%):\n" + "\n".join(lines)
        )

    horizon = cfg.horizon
    rmse = {}
    mean_ms = {}
    for name in cfg.enabled:
        sse = np.zeros(len(cfg.x0_true))
        count = 0
        t_total = 0.0
        t_count = 0
        for r in results:
            if name in r.failures:
                continue
            err = r.estimates[name][horizon:] - r.true_states[horizon: cfg.steps]
            sse += np.sum(err ** 2, axis=0)
            count += err.shape[0]
            # first trial excluded from timing (warm-up) unless it is the only one
            if r.trial_index > 0 or cfg.trials == 1:
                t_total += float(np.sum(r.step_seconds[name][horizon:]))
                t_count += cfg.steps - horizon
        rmse[name] = np.sqrt(sse / count) if count else np.full(len(cfg.x0_true), np.nan)
        mean_ms[name] = 1e3 * t_total / t_count if t_count else float("nan")
    summary = SummaryTable(estimators=cfg.enabled, rmse=rmse, mean_step_ms=mean_ms,
                           n_trials=cfg.trials, failed_trials=len(failed))
    return summary, results


def _fmt(x):
    return f"{float(x):.17g}"


def write_summary(path, summary: SummaryTable):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("estimator,rmse_z_m,rmse_zdot_mps,mean_step_ms\n")
        for name in summary.estimators:
            r = summary.rmse[name]
            fh.write(f"{name},{_fmt(r[0])},{_fmt(r[1])},{_fmt(summary.mean_step_ms[name])}\n")


def write_trajectories(path, result: TrialResult, cfg: BenchmarkConfig):
    names = [n for n in cfg.enabled]
    header = "k,t_s,z_true,zdot_true,y,u" + "".join(
        f",{n}_z,{n}_zdot" for n in names
    )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for k in range(cfg.steps):
            row = [str(k), _fmt(k * cfg.ts),
                   _fmt(result.true_states[k][0]), _fmt(result.true_states[k][1]),
                   _fmt(result.measurements[k][0]), _fmt(result.inputs[k][0])]
            for n in names:
                est = result.estimates[n][k]
                row += [_fmt(est[0]), _fmt(est[1])]
            fh.write(",".join(row) + "\n")


def write_diagnostics(path, result: TrialResult, cfg: BenchmarkConfig):
    """Per-step window-estimator diagnostics (rows only when scdmhe ran)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("k,i_star,delta_final,p_min_eig,p_max_eig,alpha_hat\n")
        if "scdmhe" not in result.i_star:
            return
        ell = cfg.horizon
        for k in range(ell, cfg.steps):
            i = k - ell
            fh.write(",".join([
                str(k),
                str(int(result.i_star["scdmhe"][i])),
                _fmt(result.delta_final["scdmhe"][i]),
                _fmt(result.arrival_eigs["scdmhe"][i][0]),
                _fmt(result.arrival_eigs["scdmhe"][i][1]),
                _fmt(result.alpha_hats[i + 1]),
            ]) + "\n")


def export_run(out_dir, cfg: BenchmarkConfig, summary: SummaryTable, results):
    """Write summary plus per-trial trajectory and diagnostic files."""
    os.makedirs(out_dir, exist_ok=True)
    write_summary(os.path.join(out_dir, "summary.csv"), summary)
    for r in results:
        write_trajectories(
            os.path.join(out_dir, f"trajectories_{r.trial_index}.csv"), r, cfg)
        write_diagnostics(
            os.path.join(out_dir, f"diagnostics_{r.trial_index}.csv"), r, cfg)


def run_linear_check(cfg: BenchmarkConfig | None = None, seeds=5, steps=200,
                     tol=1e-6):
    """Invariant suite on the constant-coefficient model.

    Every estimator must match the Kalman reference (the EKF, which is exact
    here) within ``tol`` post-horizon, and the window estimator must settle in
    at most two inner iterations.  Returns a list of (check, passed, detail).
    """
    from .config import with_updates

    base = cfg or BenchmarkConfig()
    base = with_updates(base, model_name="linear", steps=steps, trials=1,
                        estimators=ESTIMATOR_ORDER, timing_enabled=False,
                        x0_true=(10.0, 0.0), x0_hat=(12.0, -1.0))
    checks = []
    worst = {name: 0.0 for name in ("ukf", "nmhe", "scdmhe")}
    worst_i_star = 0
    for s in range(seeds):
        run_cfg = with_updates(base, seed=base.seed + s)
        result = run_trial(run_cfg, 0)
        if result.failures:
            checks.append(("trial execution", False, str(result.failures)))
            return checks
        ref = result.estimates["ekf"]
        for name in worst:
            diff = result.estimates[name][run_cfg.horizon:] - ref[run_cfg.horizon:]
            worst[name] = max(worst[name], float(np.linalg.norm(diff, axis=1).max()))
        worst_i_star = max(worst_i_star, int(result.i_star["scdmhe"].max()))
    for name, value in worst.items():
        checks.append((f"{name} matches Kalman reference (<= {tol:g})",
                       value <= tol, f"max deviation {value:.3e}"))
    checks.append(("window estimator settles in <= 2 iterations",
                   worst_i_star <= 2, f"max i_star {worst_i_star}"))
    return checks
