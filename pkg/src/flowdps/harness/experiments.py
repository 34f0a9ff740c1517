"""Build priors, tasks and solvers from a config and run them end to end."""

from __future__ import annotations

import math
import time
from pathlib import Path

import numpy as np

from .. import gmm, solvers
from ..operators import (
    AvgPoolOperator,
    BlurOperator,
    ConjugateGradient,
    DenseOperator,
    GradientDescent,
    MaskOperator,
    gaussian_blur_kernel,
    make_measurement,
)
from ..schedule import get_schedule, make_time_grid
from ..velocity import (
    OPTIMIZER,
    AnalyticVelocity,
    ClassConditionalVelocity,
    MlpVelocity,
    TrainConfig,
    load_mlp,
    save_mlp,
    train_flow,
)
from .config import ConfigError, ExperimentConfig, to_text
from .io import load_matrix, load_mixture, parse_list, write_pgm
from .metrics import (
    MetricReport,
    MetricRow,
    image_psnr,
    oracle_errors,
    relative_residual,
    sliced_wasserstein,
)
from .priors import BUILTIN_PRIORS, IMAGE_SHAPES, builtin_prior

__all__ = [
    "ExperimentError",
    "build_prior",
    "build_operator",
    "build_field",
    "solver_config",
    "run_solver",
    "run_experiment",
    "METRICS_FILE",
    "SNAPSHOT_FILE",
]

METRICS_FILE = "metrics.csv"
SNAPSHOT_FILE = "config.snapshot"
_SW_PROJECTIONS = 64


class ExperimentError(RuntimeError):
    """A run failed; rows finished before the failure are already on disk."""


def _path(text, base_dir):
    p = Path(text)
    return p if p.is_absolute() else Path(base_dir) / p


def build_prior(cfg: ExperimentConfig, base_dir=".") -> gmm.GaussianMixture:
    if cfg.prior.file:
        return load_mixture(_path(cfg.prior.file, base_dir))
    if cfg.prior.name not in BUILTIN_PRIORS:
        raise ConfigError(f"unknown built-in prior {cfg.prior.name!r}; choose from {sorted(BUILTIN_PRIORS)}")
    return builtin_prior(cfg.prior.name)


def image_shape(cfg: ExperimentConfig):
    return None if cfg.prior.file else IMAGE_SHAPES.get(cfg.prior.name)


def build_operator(cfg: ExperimentConfig, dim: int, base_dir="."):
    """Forward model for the task; random pieces are seeded from the config seed."""
    t = cfg.task
    rng = np.random.default_rng([cfg.experiment.seed, 17])
    shape = image_shape(cfg)
    if t.task in ("sr_avgpool", "deblur_gauss"):
        if shape is None:
            raise ConfigError(f"task {t.task} needs an image prior")
        if t.task == "sr_avgpool":
            return AvgPoolOperator(*shape, t.factor)
        return BlurOperator(*shape, gaussian_blur_kernel(t.kernel_size, t.kernel_std))
    if t.task == "inpaint":
        if t.mask_file:
            idx = [int(v) for v in parse_list(_path(t.mask_file, base_dir).read_text())]
        else:
            keep = max(1, int(round(t.keep_fraction * dim)))
            idx = np.sort(rng.choice(dim, size=keep, replace=False))
        return MaskOperator(dim, idx)
    if t.task == "dense":
        if t.matrix_file:
            mat = load_matrix(_path(t.matrix_file, base_dir))
        else:
            rows = t.rows or max(1, dim // 2)
            mat = rng.standard_normal((rows, dim)) / math.sqrt(dim)
        if mat.shape[1] != dim:
            raise ConfigError(f"matrix has {mat.shape[1]} columns, prior dimension is {dim}")
        return DenseOperator(mat)
    return None


def _condition(cfg):
    c = cfg.solver.condition
    return None if c == "none" else int(c)


def build_field(cfg: ExperimentConfig, prior, base_dir="."):
    s = cfg.solver
    if s.field == "mlp":
        field = load_mlp(_path(s.params, base_dir))
        if field.dim != prior.dim:
            raise ConfigError(f"network dimension {field.dim} != prior dimension {prior.dim}")
        return field
    sched = get_schedule(s.schedule)
    if _condition(cfg) is None:
        return AnalyticVelocity(prior, sched)
    return ClassConditionalVelocity(prior, sched)


def _schedule_value(text, names):
    if text in names:
        return text
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"expected one of {names} or a number, got {text!r}") from None


def solver_config(cfg: ExperimentConfig, seed: int = 0) -> solvers.SolverConfig:
    s = cfg.solver
    if s.dc == "gd":
        dc = GradientDescent(s.dc_steps, s.dc_step_size, s.dc_reduction)
    elif s.dc == "cg":
        dc = ConjugateGradient(s.dc_steps)
    else:
        dc = None
    try:
        return solvers.SolverConfig(
            grid=make_time_grid(s.nfe, s.shift),
            schedule=get_schedule(s.schedule),
            gamma=_schedule_value(s.gamma, ("sigma_t", "one_minus_sigma_t", "one")),
            eta=_schedule_value(s.eta, ("flowdps", "zero")),
            dc=dc,
            guidance_lambda=s.guidance_lambda,
            condition=_condition(cfg),
            zeta_convention=s.zeta,
            flowchef_step=s.flowchef_step,
            n_samples=s.n_samples,
            seed=seed,
        )
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None


def run_solver(name, field, prior, meas, scfg, rng):
    if name == "flowdps":
        return solvers.flowdps_solve(field, meas, scfg, rng, record=False)
    if name == "dps_velocity":
        return solvers.dps_velocity_solve(field, meas, scfg, rng, record=False)
    if name == "flowchef":
        return solvers.flowchef_solve(field, meas, scfg, rng, record=False)
    if name == "oracle":
        return solvers.posterior_oracle_solve(prior, meas, scfg, rng, record=False)
    if name == "unconditional":
        return solvers.sample_flow(field, scfg, rng, record=False)
    raise ConfigError(f"unknown solver {name!r}")


class _Writer:
    """Collects rows and rewrites the CSV after each one."""

    def __init__(self, path):
        self.path = path
        self.report = MetricReport()
        self.report.write_csv(path)

    def add(self, row):
        self.report.add(row)
        self.report.write_csv(self.path)


def _save_image(out, name, img, ref, shape):
    lo, hi = float(ref.min()), float(ref.max())
    scale = hi - lo if hi > lo else 1.0
    write_pgm(out / name, ((np.asarray(img) - lo) / scale).reshape(shape))


def _solve(cfg, prior, out, writer, base_dir):
    e = cfg.experiment
    shape = image_shape(cfg) if e.images else None
    op = build_operator(cfg, prior.dim, base_dir)
    if op is None:
        raise ConfigError("mode = solve needs a task other than 'none'")
    field = build_field(cfg, prior, base_dir)
    scfg = solver_config(cfg, e.seed)
    task = cfg.task.task
    for r in range(e.runs):
        rng = np.random.default_rng([e.seed, r])
        x0 = gmm.sample(prior, rng, 1)[0]
        meas = make_measurement(op, x0, cfg.task.sigma_n, rng)
        post = None
        if meas.sigma_n > 0 and prior.dim <= 4096:
            post = gmm.linear_gaussian_posterior(prior, op.to_dense(), meas.y, meas.sigma_n)
        if shape is not None:
            _save_image(out, f"x0_{r:03d}.pgm", x0, x0, shape)
            if getattr(op, "out_shape", None) is not None:
                _save_image(out, f"y_{r:03d}.pgm", meas.y, x0, op.out_shape)
            else:
                _save_image(out, f"y_{r:03d}.pgm", op.adjoint(meas.y), x0, shape)
        for j, name in enumerate(cfg.solver.solver):
            run_id = f"{name}-{r:03d}"
            t0 = time.perf_counter()
            try:
                traj = run_solver(name, field, prior, meas, scfg, np.random.default_rng([e.seed, r, j]))
            except (solvers.SolverError, ArithmeticError, RuntimeError) as exc:
                raise ExperimentError(f"{run_id}: {exc}") from exc
            wall = 1e3 * (time.perf_counter() - t0)
            xs = traj.final
            row = MetricRow(
                run_id, name, task,
                psnr_db=image_psnr(xs[0], x0),
                mse=float(np.mean((xs[0] - x0) ** 2)),
                residual_rel=relative_residual(op, meas.y, xs[0]),
                wall_ms=wall,
            )
            if post is not None:
                row.oracle_mean_err, row.oracle_cov_err = oracle_errors(xs, post.mean(), post.covariance())
                if len(xs) > 1:
                    ref = gmm.sample(post, np.random.default_rng([e.seed, r, j, 1]), len(xs))
                    row.sliced_w = sliced_wasserstein(xs, ref, _SW_PROJECTIONS, np.random.default_rng(e.seed))
            writer.add(row)
            if shape is not None:
                _save_image(out, f"{name}_{r:03d}.pgm", xs[0], x0, shape)


def _distribution_row(run_id, solver, xs, prior, seed, wall):
    mean_err, cov_err = oracle_errors(xs, prior.mean(), prior.covariance())
    row = MetricRow(run_id, solver, "none", oracle_mean_err=mean_err, oracle_cov_err=cov_err, wall_ms=wall)
    if len(xs) > 1:
        ref = gmm.sample(prior, np.random.default_rng([seed, 99]), len(xs))
        row.sliced_w = sliced_wasserstein(xs, ref, _SW_PROJECTIONS, np.random.default_rng(seed))
    return row


def _sample(cfg, prior, out, writer, base_dir):
    e = cfg.experiment
    field = build_field(cfg, prior, base_dir)
    scfg = solver_config(cfg, e.seed)
    shape = image_shape(cfg) if e.images else None
    for r in range(e.runs):
        t0 = time.perf_counter()
        try:
            xs = solvers.sample_flow(field, scfg, np.random.default_rng([e.seed, r]), record=False).final
        except solvers.SolverError as exc:
            raise ExperimentError(f"unconditional-{r:03d}: {exc}") from exc
        wall = 1e3 * (time.perf_counter() - t0)
        np.savetxt(out / f"samples_{r:03d}.txt", xs, fmt="%.17g")
        writer.add(_distribution_row(f"unconditional-{r:03d}", "unconditional", xs, prior, e.seed + r, wall))
        if shape is not None:
            _save_image(out, f"sample_{r:03d}.pgm", xs[0], xs[0], shape)


def _train(cfg, prior, out, writer):
    e, tr = cfg.experiment, cfg.train
    field = MlpVelocity(
        prior.dim, tr.hidden, tr.n_freq, prior.n_components if tr.conditional else 0, seed=e.seed
    )
    tc = TrainConfig(tr.steps, tr.batch_size, tr.learning_rate, e.seed, tr.label_dropout, tr.lr_schedule)
    t0 = time.perf_counter()
    try:
        field, losses = train_flow(field, prior, tc)
    except RuntimeError as exc:
        raise ExperimentError(f"train: {exc}") from exc
    save_mlp(field, out / "params.bin")
    with open(out / "loss.csv", "w") as fh:
        fh.write(f"# optimizer: {OPTIMIZER}, lr={tr.learning_rate!r}, schedule={tr.lr_schedule}\n")
        fh.write("step,loss\n")
        fh.writelines(f"{k},{v!r}\n" for k, v in enumerate(losses.tolist()))
    scfg = solvers.SolverConfig(
        grid=make_time_grid(tr.eval_nfe, 1.0), eta="zero", dc=None, n_samples=tr.eval_samples, seed=e.seed
    )
    xs = solvers.sample_flow(field, scfg, np.random.default_rng([e.seed, 1]), record=False).final
    wall = 1e3 * (time.perf_counter() - t0)
    writer.add(_distribution_row("train-000", "train", xs, prior, e.seed, wall))
    return losses


def run_experiment(cfg: ExperimentConfig, output=None, base_dir=".") -> MetricReport:
    """Run the configured experiment and write CSV, images and the snapshot.

    Input files named in the config are resolved against ``base_dir``.
    """
    out = Path(cfg.experiment.output if output is None else output)
    out.mkdir(parents=True, exist_ok=True)
    (out / SNAPSHOT_FILE).write_text(to_text(cfg))
    prior = build_prior(cfg, base_dir)
    writer = _Writer(out / METRICS_FILE)
    mode = cfg.experiment.mode
    if mode == "solve":
        _solve(cfg, prior, out, writer, base_dir)
    elif mode == "sample":
        _sample(cfg, prior, out, writer, base_dir)
    else:
        _train(cfg, prior, out, writer)
    return writer.report
