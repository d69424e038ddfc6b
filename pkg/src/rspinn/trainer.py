"""Training loop with biased / unbiased / hybrid loss schedules."""
from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import residual_loss
from .nn import LR_SCHEDULES, AdamState, MlpModel, NonFiniteGradientError, adam_step
from .pdes import NON_POLYNOMIAL, make_problem, normalize_mode
from .sampling import ConfigError, RngStream, draw_perturbation_groups
from .smoothing import smooth

log = logging.getLogger(__name__)

WORKERS_ENV = "RSPINN_WORKERS"

# stream-key epochs reserved for objects drawn once per run
_TEST_SET, _TEST_NOISE, _INIT = -1, -2, -3
_TIME_NOISE_OFFSET = 1000
_EVAL_CHUNK = 256


@dataclass
class TrainConfig:
    problem: str = "fp_isotropic"
    dim: int = 10
    problem_seed: int = 2024
    nu: float = 0.5
    T: float = 1.0
    n_mc: int = 100_000
    hidden: tuple = (32, 32)
    activation: str = "tanh"
    epochs: int = 2000
    batch_size: int = 100
    K_train: int = 128
    K_test: int = 128
    sigma_x: float = 1e-2
    sigma_t: float = None
    antithetic: bool = True
    base_lr: float = 1e-3
    decay_coefficient: float = 0.9995
    lr_schedule: str = "exponential"
    mode: str = "biased"
    transition_epoch: int = None
    post_mode: str = None
    auto_transition: bool = False
    plateau_window: int = 200
    plateau_tol: float = 1e-3
    seeds: tuple = (0,)
    test_set_size: int = 2000
    eval_interval: int = 100

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.sigma_t is None:
            self.sigma_t = self.sigma_x
        self.validate()

    def build_problem(self):
        return make_problem(self.problem, self.dim, seed=self.problem_seed, nu=self.nu, T=self.T, n_mc=self.n_mc)

    def schedule_modes(self):
        """Loss modes this config can activate."""
        if self.mode == "hybrid":
            return ["biased", self.post_mode]
        return [self.mode]

    def validate(self, problem=None):
        for name in ("dim", "batch_size", "K_train", "K_test", "test_set_size", "eval_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not (self.sigma_x > 0 and self.sigma_t > 0 and self.base_lr > 0):
            raise ConfigError("sigma_x, sigma_t and base_lr must be positive")
        if not 0 < self.decay_coefficient <= 1:
            raise ConfigError("decay_coefficient must lie in (0, 1]")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}; choose from {', '.join(LR_SCHEDULES)}")
        if str(self.mode).lower() == "hybrid":
            self.mode = "hybrid"
            if self.transition_epoch is None and not self.auto_transition:
                raise ConfigError("hybrid mode needs transition_epoch or auto_transition")
            if self.transition_epoch is not None and not 0 <= self.transition_epoch < max(self.epochs, 1):
                raise ConfigError("transition_epoch must lie in [0, epochs)")
        else:
            self.mode = normalize_mode(self.mode)
        if self.post_mode is not None:
            self.post_mode = normalize_mode(self.post_mode)
        if problem is not None:
            if self.mode == "hybrid" and self.post_mode is None:
                self.post_mode = default_post_mode(problem)
            for m in {self.mode, self.post_mode} - {None, "hybrid"}:
                problem.groups_for(m)


def default_post_mode(problem):
    """unbiased2 where it exists, otherwise unbiased1."""
    if problem.order in (1, NON_POLYNOMIAL):
        return "unbiased1"
    return "unbiased2"


@dataclass
class EvalRow:
    epoch: int
    wall_time_s: float
    train_loss: float
    test_rel_l2: float
    mode: str
    lr: float


@dataclass
class RunRecord:
    seed: int
    rows: list = field(default_factory=list)
    transitions: list = field(default_factory=list)
    status: str = "ok"
    message: str = ""
    epoch_seconds: dict = field(default_factory=dict)

    @property
    def final_error(self):
        return self.rows[-1].test_rel_l2 if self.rows else math.nan

    def mode_at(self, epoch):
        """Loss mode used by the update with index ``epoch``."""
        active = None
        for start, mode in self.transitions:
            if start <= epoch:
                active = mode
        return active


def evaluate_error(fn, test_points, exact_values, K_test, noise_seed, sigma_x, times=None, sigma_t=None):
    """Relative L2 error of the smoothed prediction with frozen evaluation noise.

    Falls back to the absolute L2 norm (with a warning) if every exact value is 0.
    """
    pred = smoothed_prediction(fn, test_points, K_test, noise_seed, sigma_x, times, sigma_t)
    return relative_l2(pred, exact_values)


def relative_l2(pred, exact):
    num = float(np.sqrt(np.sum((np.asarray(pred) - np.asarray(exact)) ** 2)))
    den = float(np.sqrt(np.sum(np.asarray(exact) ** 2)))
    if den == 0.0:
        log.warning("all exact values are zero; reporting absolute L2 error")
        return num
    return num / den


def smoothed_prediction(fn, points, K, noise_seed, sigma_x, times=None, sigma_t=None):
    n, d = points.shape
    out = np.empty(n)
    base = RngStream(noise_seed, (_TEST_NOISE, 0, 0))
    for c, s in enumerate(range(0, n, _EVAL_CHUNK)):
        m = min(_EVAL_CHUNK, n - s)
        groups = draw_perturbation_groups(
            base.child(point=c), 1, K, d, sigma_x, sigma_t if times is not None else None, n_points=m
        )
        tt = None if times is None else times[s:s + m]
        out[s:s + m] = smooth(fn, points[s:s + m], groups[0], tt, need=("value",)).value
    return out


class _Plateau:
    def __init__(self, window, tol):
        self.window, self.tol, self.losses = window, tol, []

    def update(self, loss):
        self.losses.append(loss)
        w = self.window
        if len(self.losses) < 2 * w:
            return False
        prev = np.mean(self.losses[-2 * w:-w])
        cur = np.mean(self.losses[-w:])
        return (prev - cur) / max(abs(prev), 1e-300) < self.tol


def train(config, seed=None, problem=None, callback=None):
    """Run one training job and return its :class:`RunRecord`."""
    seed = config.seeds[0] if seed is None else int(seed)
    problem = config.build_problem() if problem is None else problem
    config.validate(problem)
    rng = RngStream(seed)
    dims = (problem.input_dim, *config.hidden, 1)
    model = MlpModel.glorot(dims, rng.child(epoch=_INIT), config.activation)
    fn = problem.surrogate(model)
    opt = AdamState(model.n_params, config.base_lr, config.decay_coefficient,
                    schedule=config.lr_schedule, total_steps=max(config.epochs, 1))
    sigma_t = config.sigma_t if problem.time_dependent else None

    test = problem.sample(rng.child(epoch=_TEST_SET), config.test_set_size)
    exact = problem.exact(test.spatial, test.time)
    record = RunRecord(seed)

    def evaluate(epoch, loss, mode):
        err = evaluate_error(fn, test.spatial, exact, config.K_test, seed, config.sigma_x, test.time, sigma_t)
        record.rows.append(EvalRow(epoch, time.perf_counter() - t0, loss, err, mode, opt.lr))
        if callback is not None:
            callback(record.rows[-1])

    mode = "biased" if config.mode == "hybrid" else config.mode
    record.transitions.append((0, mode))
    plateau = _Plateau(config.plateau_window, config.plateau_tol) if config.auto_transition else None
    t0 = time.perf_counter()
    evaluate(0, math.nan, mode)
    window_losses = []
    for epoch in range(config.epochs):
        if config.mode == "hybrid" and mode == "biased" and config.transition_epoch is not None:
            if epoch >= config.transition_epoch:
                mode = config.post_mode
                record.transitions.append((epoch, mode))
        n_groups = problem.groups_for(mode)
        tick = time.perf_counter()
        step_rng = rng.child(epoch=epoch)
        batch = problem.sample(step_rng.child(group=0), config.batch_size)
        groups = draw_perturbation_groups(
            step_rng.child(group=1), n_groups, config.K_train, problem.dim, config.sigma_x, sigma_t,
            n_points=config.batch_size,
        )
        try:
            lv = residual_loss(fn, batch, problem, mode, groups, antithetic=config.antithetic)
            if not math.isfinite(lv.loss):
                raise FloatingPointError(f"non-finite training loss {lv.loss}")
            adam_step(opt, model, lv.param_grad)
        except (FloatingPointError, NonFiniteGradientError) as exc:
            record.status = "diverged"
            record.message = f"epoch {epoch}: {exc}"
            log.error("seed %d diverged at epoch %d: %s", seed, epoch, exc)
            break
        record.epoch_seconds.setdefault(mode, []).append(time.perf_counter() - tick)
        window_losses.append(lv.loss)
        if plateau is not None and mode == "biased" and config.mode == "hybrid" and plateau.update(lv.loss):
            mode = config.post_mode
            record.transitions.append((epoch + 1, mode))
        done = epoch + 1
        if done % config.eval_interval == 0 or done == config.epochs:
            evaluate(done, float(np.mean(window_losses)), record.mode_at(epoch))
            window_losses = []
    record.model = model
    return record


@dataclass
class SuiteResult:
    records: list
    mean: float
    std: float

    @property
    def final_errors(self):
        return [r.final_error for r in self.records]


def _train_job(args):
    config, seed = args
    rec = train(config, seed)
    rec.model = None
    return rec


def worker_count():
    env = os.environ.get(WORKERS_ENV)
    if env:
        n = int(env)
        if n < 1:
            raise ConfigError(f"{WORKERS_ENV} must be >= 1")
        return n
    return os.cpu_count() or 1


def run_suite(config, seeds=None, workers=None):
    """Train once per seed and aggregate final errors (mean, population std)."""
    seeds = list(config.seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    workers = worker_count() if workers is None else workers
    jobs = [(config, s) for s in seeds]
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(min(workers, len(seeds))) as pool:
            records = list(pool.map(_train_job, jobs))
    else:
        records = [_train_job(j) for j in jobs]
    errs = np.array([r.final_error for r in records])
    return SuiteResult(records, float(np.mean(errs)), float(np.std(errs)))


def config_dict(config):
    return asdict(config)
