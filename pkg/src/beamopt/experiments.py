"""Sweeps behind the ``reproduce`` and ``bench`` commands.

Every curve point generates its own training and test channels, solves the
targets, trains a separate model and evaluates all methods on the test set.
Seeds are derived from the figure seed and the point index, so a figure is
reproducible point by point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bnn
from .neural import TrainConfig
from .sysmodel import SystemConfig, db_to_linear, dbm_to_watts, generate_channels

P1_METHODS = ["optimal", "zf", "rzf", "bnn"]
P2_METHODS = ["optimal", "zf", "bnn"]
P3_METHODS = ["wmmse", "wmmse_rand", "zf", "rzf", "bnn_supervised", "bnn"]

# figure id -> (problem, swept quantity, grid, fixed settings)
FIGURES = {
    "fig5a": ("p1", "snr_db", [0, 5, 10, 15, 20, 25, 30], dict(n=6, k=4, pathloss=False)),
    "fig5b": ("p1", "p_max_dbm", [0, 10, 20, 30, 40], dict(n=6, k=4, pathloss=True)),
    "fig6": ("p1", "k_eq_n", [4, 6, 8, 10, 12], dict(p_max_dbm=20, pathloss=True)),
    "fig7": ("p1", "n_used", [4, 5, 6, 7, 8, 9, 10], dict(n=10, k=4, p_max_dbm=20, pathloss=True)),
    "fig8a": ("p2", "sinr_db", [0, 2, 4, 6, 8, 10], dict(n=6, k=4, pathloss=False)),
    "fig8b": ("p2", "sinr_db", [0, 2, 4, 6, 8, 10], dict(n=6, k=4, pathloss=True)),
    "fig9a": ("p2", "k", [2, 4, 6, 8], dict(n=8, sinr_db=5, pathloss=True)),
    "fig9b": ("p2", "k", [2, 4, 6, 8], dict(n=8, sinr_db=5, pathloss=True, timing=True)),
    "fig10a": ("p3", "snr_db", [0, 5, 10, 15, 20, 25, 30], dict(n=4, k=4, pathloss=False)),
    "fig10b": ("p3", "p_max_dbm", [0, 10, 20, 30, 40], dict(n=4, k=4, pathloss=True)),
    "fig11a": ("p3", "k_eq_n", [2, 4, 6, 8], dict(p_max_dbm=30, pathloss=True)),
    "fig11b": ("p3", "k_eq_n", [2, 4, 6, 8], dict(p_max_dbm=30, pathloss=True, timing=True)),
}

FIGURE_HEADER = ["figure", "x_name", "x", "method", "objective_name", "objective", "feasibility_pct",
                 "time_per_sample_s"]


@dataclass
class Scale:
    train_count: int = 20000
    test_count: int = 5000
    epochs: int = 100
    stage2_epochs: int = bnn.STAGE2_EPOCHS
    timing: bool = True
    timing_count: int | None = None


def make_config(n, k, pathloss=True, p_max_dbm=20.0, snr_db=None, sinr_db=None) -> SystemConfig:
    """Scenario for one curve point.

    Without pathloss the channels are unit-variance and the noise power is
    1, so ``snr_db`` is the normalised power ``P_max / sigma^2``.
    """
    kw = {} if sinr_db is None else {"sinr_targets": db_to_linear(sinr_db)}
    if pathloss:
        return SystemConfig(n, k, p_max=dbm_to_watts(p_max_dbm), **kw)
    return SystemConfig(n, k, noise_power=1.0, p_max=db_to_linear(20.0 if snr_db is None else snr_db), **kw)


def build_datasets(problem, config, pathloss, train_count, test_count, seed):
    """Training and test sets drawn from one seeded stream and one target scale."""
    total = train_count + test_count
    samples = generate_channels(config, total, seed, with_pathloss=pathloss)
    rep = bnn.MAKE_TARGETS[problem](samples, config, with_pathloss=pathloss)
    ds = rep.dataset
    cut = int(round(len(ds) * train_count / total))
    return ds.subset(slice(0, cut)), ds.subset(slice(cut, None)), rep.dropped


def train_for(problem, train, scale: Scale, seed):
    cfg = TrainConfig(epochs=scale.epochs, seed=seed)
    if problem == "p3":
        stage1, hybrid = bnn.train_p3_hybrid(train, cfg, bnn.Stage2Config(epochs=scale.stage2_epochs, seed=seed))
        return {"bnn": hybrid, "bnn_supervised": stage1}
    return {"bnn": bnn.train_model(problem, train, cfg)}


def _point_settings(fixed, x_name, x):
    s = dict(fixed)
    s.pop("timing", None)
    if x_name == "k_eq_n":
        s["n"] = s["k"] = int(x)
    elif x_name == "k":
        s["k"] = int(x)
    elif x_name != "n_used":
        s[x_name] = x
    return s


def run_figure(figure, scale: Scale, seed=0, log=None):
    """Return ``(header, rows)`` of the figure's curve points."""
    problem, x_name, grid, fixed = FIGURES[figure]
    timing = scale.timing or fixed.get("timing", False)
    rows = []
    if x_name == "n_used":
        return FIGURE_HEADER, _run_padding(figure, problem, grid, fixed, scale, seed, log)
    for i, x in enumerate(grid):
        s = _point_settings(fixed, x_name, x)
        pathloss = s.pop("pathloss")
        config = make_config(**s, pathloss=pathloss)
        point_seed = seed * 1000 + i
        train, test, _ = build_datasets(problem, config, pathloss, scale.train_count, scale.test_count, point_seed)
        models = train_for(problem, train, scale, point_seed)
        rows += _evaluate_rows(figure, x_name, x, problem, models, test, timing, scale.timing_count, point_seed)
        if log:
            log(f"{figure}: {x_name}={x} done")
    return FIGURE_HEADER, rows


def _evaluate_rows(figure, x_name, x, problem, models, test, timing, timing_count, seed):
    methods = {"p1": P1_METHODS, "p2": P2_METHODS, "p3": P3_METHODS}[problem]
    rows = []
    report = bnn.evaluate(models, methods, test, "1e-4", timing=timing, timing_count=timing_count, seed=seed)
    for r in report.rows:
        name = "optimal_e2" if (r.method == "optimal" and problem == "p2") else r.method
        rows.append([figure, x_name, x, name, report.objective_name, r.objective, r.feasibility, r.time_per_sample])
    if problem == "p2":
        # the looser stopping threshold only changes the optimal solver
        extra = bnn.evaluate(models, ["optimal", "bnn"], test, "1e-2", timing=timing,
                             timing_count=timing_count, seed=seed).row("optimal")
        rows.append([figure, x_name, x, "optimal_e1", report.objective_name, extra.objective,
                     extra.feasibility, extra.time_per_sample])
    return rows


def _run_padding(figure, problem, grid, fixed, scale, seed, log):
    """One model at the largest antenna count, tested on smaller arrays by zero padding."""
    s = dict(fixed)
    pathloss = s.pop("pathloss")
    s.pop("timing", None)
    big = make_config(**s, pathloss=pathloss)
    train, _, _ = build_datasets(problem, big, pathloss, scale.train_count, 1, seed * 1000)
    models = train_for(problem, train, scale, seed * 1000)
    rows = []
    for i, n_used in enumerate(grid):
        config = big.replace(n_antennas=int(n_used))
        _, test, _ = build_datasets(problem, config, pathloss, 0, scale.test_count, seed * 1000 + 1 + i)
        rows += _evaluate_rows(figure, "n_used", n_used, problem, models, test, scale.timing,
                               scale.timing_count, seed)
        if log:
            log(f"{figure}: n_used={n_used} done")
    return rows


BENCH_METHODS = {
    "p1": ["zf", "rzf", "bnn", "optimal_e1", "optimal_e2"],
    "p2": ["zf", "bnn", "optimal_e1", "optimal_e2"],
    "p3": ["zf", "rzf", "bnn", "wmmse"],
}


def bench(problem, n, k, count, seed, methods=None, train_count=2000, epochs=5, sinr_db=5.0,
          p_max_dbm=20.0, model=None):
    """Per-sample timing rows ``(method, count, mean_s, median_s)``.

    Without ``model`` one is trained on the fly; timing does not depend on
    how well it was trained.  Run under a single-thread BLAS limit.
    """
    methods = methods or BENCH_METHODS[problem]
    config = make_config(n, k, True, p_max_dbm=p_max_dbm, sinr_db=sinr_db if problem == "p2" else None)
    if model is None:
        train, test, _ = build_datasets(problem, config, True, train_count, count, seed)
        if problem == "p3":
            model = bnn.train_model("p3", train, TrainConfig(epochs=epochs, seed=seed))
        else:
            model = bnn.train_model(problem, train, TrainConfig(epochs=epochs, seed=seed))
    else:
        config = model.config
        test = build_datasets(problem, config, True, 0, count, seed)[1]
    model.compile()
    models = {"bnn": model}
    rng = np.random.default_rng(seed)
    rows = []
    for m in methods:
        eps = bnn.EPS_PRESETS["1e-2" if m == "optimal_e1" else "1e-4"]
        name = "optimal" if m.startswith("optimal") else m
        t = bnn.time_samples(problem, name, test.channels, config, models, eps, rng)
        rows.append((m, len(t), float(np.mean(t)), float(np.median(t))))
    return rows
