"""Class-conditional denoising diffusion over standardized link features.

The forward process corrupts a feature vector x0 with Gaussian noise at
increasing strength over T steps; a small conditional MLP learns to predict
the injected noise from (noised vector, step, class). Classification is
zero-shot: a sample is scored per class by its expected denoising error and
assigned to the class whose denoiser explains it best, with no separately
trained classifier head. Training logs a staged validation-RMSE trajectory.
"""

import json
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rngstream
from .errors import CheckpointError, ConfigError, InputError, TrainingFault
from .nn import Adam, Mlp, check_finite, init_mlp, mlp_backward, mlp_forward, softmax

_CHUNK = 16384  # rows per forward chunk in batch evaluation


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise variances and their cumulative signal retention."""

    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=float)
        abars = np.asarray(self.alpha_bars, dtype=float)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", abars)
        if self.T < 2 or betas.shape != (self.T,) or abars.shape != (self.T,):
            raise ConfigError(f"schedule needs T >= 2 matching arrays, got T={self.T}")
        if not (np.all(betas > 0) and np.all(betas < 1)):
            raise ConfigError("betas must lie strictly in (0, 1)")
        if np.any(np.diff(betas) < 0):
            raise ConfigError("betas must be nondecreasing")
        if np.any(np.diff(abars) >= 0):
            raise ConfigError("alpha_bars must be strictly decreasing")
        if abars[-1] >= 0.05:
            warnings.warn(
                f"alpha_bar_T = {abars[-1]:.4g} >= 0.05: final step keeps substantial "
                "signal; density scores will be dominated by low-noise steps",
                stacklevel=2,
            )


def linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Schedule with betas linearly interpolated between the endpoints."""
    if T < 2:
        raise ConfigError(f"need T >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T)
    return NoiseSchedule(T=T, betas=betas, alpha_bars=np.cumprod(1.0 - betas))


def default_schedule() -> NoiseSchedule:
    # T=100 suits tabular features; beta_end chosen so alpha_bar_T ~ 6e-3,
    # i.e. the final step is essentially pure noise.
    return linear_schedule(100, 0.02, 0.08)


def forward_diffuse(x0, t, eps, sched: NoiseSchedule):
    """x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps, broadcasting over
    leading axes; `t` is 1-indexed (1..T)."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise InputError(f"t must lie in 1..{sched.T}")
    ab = sched.alpha_bars[t - 1]
    if ab.ndim and np.ndim(x0) > ab.ndim:
        ab = np.expand_dims(ab, -1)
    return np.sqrt(ab) * np.asarray(x0, float) + np.sqrt(1.0 - ab) * np.asarray(eps, float)


# ---------------------------------------------------------------------------
# Conditional denoiser
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenoiserArch:
    """Architecture descriptor, fixed for the lifetime of a parameter set."""

    feature_dim: int
    T: int
    t_emb_dim: int = 16
    class_emb_dim: int = 8
    hidden: tuple = (64, 64)
    activation: str = "silu"
    n_classes: int = 2

    def __post_init__(self):
        if self.t_emb_dim % 2 != 0:
            raise ConfigError("t_emb_dim must be even (sin/cos pairs)")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def input_dim(self) -> int:
        return self.feature_dim + self.t_emb_dim + self.class_emb_dim

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim, "T": self.T, "t_emb_dim": self.t_emb_dim,
            "class_emb_dim": self.class_emb_dim, "hidden": list(self.hidden),
            "activation": self.activation, "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserArch":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class DenoiserParams:
    arch: DenoiserArch
    mlp: Mlp
    class_emb: np.ndarray  # (n_classes, class_emb_dim), learned

    @property
    def param_count(self) -> int:
        return self.mlp.param_count + self.class_emb.size

    def params(self) -> list:
        return self.mlp.params() + [self.class_emb]

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.arch, self.mlp.copy(), self.class_emb.copy())


def init_denoiser(arch: DenoiserArch, rng: np.random.Generator) -> DenoiserParams:
    sizes = (arch.input_dim, *arch.hidden, arch.feature_dim)
    mlp = init_mlp(sizes, arch.activation, rng)
    class_emb = rng.normal(0.0, 1.0, size=(arch.n_classes, arch.class_emb_dim))
    return DenoiserParams(arch, mlp, class_emb)


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal step embedding; deterministic, not learned."""
    t = np.asarray(t, dtype=float)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _assemble_input(params: DenoiserParams, x_t: np.ndarray, t: np.ndarray, c: np.ndarray) -> np.ndarray:
    temb = time_embedding(t, params.arch.t_emb_dim)
    cemb = params.class_emb[c]
    return np.concatenate([x_t, temb, cemb], axis=-1)


def denoise_predict(params: DenoiserParams, x_t, t, c) -> np.ndarray:
    """Predicted injection noise for a single sample or a batch.

    The step enters through its sinusoidal embedding and the class through a
    learned embedding, both concatenated into the first affine layer (i.e.
    added to its pre-activation through dedicated input columns).
    """
    x_t = np.asarray(x_t, dtype=float)
    single = x_t.ndim == 1
    if single:
        x_t = x_t[None, :]
    t = np.atleast_1d(np.asarray(t, dtype=int))
    c = np.atleast_1d(np.asarray(c, dtype=int))
    if np.any(t < 1) or np.any(t > params.arch.T):
        raise InputError(f"t must lie in 1..{params.arch.T}")
    if np.any(c < 0) or np.any(c >= params.arch.n_classes):
        raise InputError(f"class must lie in 0..{params.arch.n_classes - 1}")
    if t.shape[0] == 1 and x_t.shape[0] > 1:
        t = np.repeat(t, x_t.shape[0])
    if c.shape[0] == 1 and x_t.shape[0] > 1:
        c = np.repeat(c, x_t.shape[0])
    out, _ = mlp_forward(params.mlp, _assemble_input(params, x_t, t, c))
    check_finite("denoiser output", out)
    return out[0] if single else out


def _loss_and_grads(params: DenoiserParams, x0, t, c, eps, sched):
    """Mean per-sample squared noise residual and its parameter gradients."""
    x_t = forward_diffuse(x0, t, eps, sched)
    inp = _assemble_input(params, x_t, t, c)
    eps_hat, cache = mlp_forward(params.mlp, inp)
    check_finite("denoiser output", eps_hat)
    resid = eps_hat - eps
    n = x0.shape[0]
    loss = float(np.sum(resid * resid) / n)
    mlp_grads, d_in = mlp_backward(params.mlp, cache, 2.0 * resid / n)
    d_cemb_rows = d_in[:, params.arch.feature_dim + params.arch.t_emb_dim:]
    d_cemb = np.zeros_like(params.class_emb)
    np.add.at(d_cemb, c, d_cemb_rows)
    return loss, mlp_grads + [d_cemb]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 24
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    stage_interval: Optional[int] = None  # None: sized for a 10-stage run
    rmse_eval_draws: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.rmse_eval_draws < 1:
            raise ConfigError("epochs, batch_size and rmse_eval_draws must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")
        if self.stage_interval is not None and self.stage_interval < 1:
            raise ConfigError("stage_interval must be positive")


@dataclass(frozen=True)
class StageEntry:
    stage: int
    step: int
    rmse: float
    seconds: float


@dataclass
class StageLog:
    entries: list = field(default_factory=list)

    def append(self, entry: StageEntry) -> None:
        if self.entries and entry.stage <= self.entries[-1].stage:
            raise InputError("stage indices must increase strictly")
        if entry.rmse < 0:
            raise InputError("rmse must be nonnegative")
        self.entries.append(entry)

    @property
    def rmses(self) -> np.ndarray:
        return np.array([e.rmse for e in self.entries])

    @property
    def steps(self) -> np.ndarray:
        return np.array([e.step for e in self.entries])

    def __len__(self):
        return len(self.entries)


def export_stage_log(log: StageLog, path, include_seconds: bool = True) -> None:
    """CSV export. `include_seconds=False` leaves only the deterministic
    columns, which is what the pipeline byte-compares across reruns."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("stage,step,rmse,seconds\n" if include_seconds else "stage,step,rmse\n")
        for e in log.entries:
            row = f"{e.stage},{e.step},{repr(e.rmse)}"
            if include_seconds:
                row += f",{e.seconds:.3f}"
            fh.write(row + "\n")


def rmse_stage(params: DenoiserParams, val, sched: NoiseSchedule, n_eval: int, rng) -> float:
    """Root mean squared noise residual on the validation set.

    Draws (t, eps) once from `rng`; passing a generator in the same state at
    every stage makes stage values directly comparable.
    """
    if len(val) == 0:
        raise InputError("validation set is empty")
    x = val.standardized
    y = val.labels
    n, d = x.shape
    ts = rng.integers(1, sched.T + 1, size=(n, n_eval))
    eps = rng.standard_normal((n, n_eval, d))
    total = 0.0
    for lo in range(0, n, max(1, _CHUNK // n_eval)):
        hi = min(n, lo + max(1, _CHUNK // n_eval))
        x_rep = np.repeat(x[lo:hi], n_eval, axis=0)
        c_rep = np.repeat(y[lo:hi], n_eval)
        t_flat = ts[lo:hi].reshape(-1)
        e_flat = eps[lo:hi].reshape(-1, d)
        x_t = forward_diffuse(x_rep, t_flat, e_flat, sched)
        eps_hat = denoise_predict(params, x_t, t_flat, c_rep)
        total += float(np.sum((eps_hat - e_flat) ** 2))
    return math.sqrt(total / (n * n_eval))


def train(train_ds, val_ds, sched: NoiseSchedule, cfg: TrainConfig):
    """Train the conditional denoiser by noise-prediction MSE.

    Minibatches draw a uniform step and fresh noise per sample and condition
    on the sample's true class. Validation RMSE is logged at step 0 and then
    every stage interval (by default sized so the run emits 10 stages);
    identical (data, config) reruns produce identical parameters and an
    identical (stage, step, rmse) sequence.
    """
    y_train = train_ds.labels
    if set(np.unique(y_train)) != {0, 1}:
        raise TrainingFault("training data must contain both classes")
    x = train_ds.standardized
    n, d = x.shape

    arch = DenoiserArch(feature_dim=d, T=sched.T)
    rng = rngstream.stream(cfg.seed, rngstream.TRAIN)
    params = init_denoiser(arch, rng)
    adam = Adam(params.params(), lr=cfg.learning_rate, beta1=cfg.beta1,
                beta2=cfg.beta2, eps=cfg.adam_eps)

    steps_per_epoch = max(1, n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    interval = cfg.stage_interval or max(1, math.ceil(total_steps / 9))
    if interval > total_steps:
        raise ConfigError(f"stage_interval {interval} exceeds total steps {total_steps}")

    log = StageLog()
    t0 = time.perf_counter()
    stage = 0
    bad_stages = 0
    initial_rmse = None

    def log_stage(step):
        nonlocal stage, bad_stages, initial_rmse
        stage += 1
        r = rmse_stage(params, val_ds, sched, cfg.rmse_eval_draws,
                       rngstream.stream(cfg.seed, rngstream.EVAL))
        log.append(StageEntry(stage, step, r, time.perf_counter() - t0))
        if initial_rmse is None:
            initial_rmse = r
        elif r > 10.0 * initial_rmse:
            bad_stages += 1
            if bad_stages >= 3:
                raise TrainingFault(
                    f"validation RMSE {r:.4g} exceeded 10x the initial {initial_rmse:.4g} "
                    f"for 3 consecutive stages (step {step}); lower the learning rate"
                )
        else:
            bad_stages = 0

    log_stage(0)
    step = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            ts = rng.integers(1, sched.T + 1, size=idx.size)
            eps = rng.standard_normal((idx.size, d))
            loss, grads = _loss_and_grads(params, x[idx], ts, y_train[idx], eps, sched)
            if not math.isfinite(loss):
                raise TrainingFault(f"non-finite training loss at step {step + 1}")
            if cfg.learning_rate > 0:
                adam.step(params.params(), grads)
            step += 1
            if step % interval == 0 or step == total_steps:
                if not (log.entries and log.entries[-1].step == step):
                    log_stage(step)
    return params, log


# ---------------------------------------------------------------------------
# Zero-shot classification by class-conditional denoising error
# ---------------------------------------------------------------------------


def _errors_for_draws(params: DenoiserParams, sched, x, ts, eps, c: int) -> np.ndarray:
    """Mean denoising error per row of x for one class, under given draws."""
    n, n_eval = ts.shape
    d = x.shape[1]
    out = np.empty(n)
    rows = max(1, _CHUNK // n_eval)
    for lo in range(0, n, rows):
        hi = min(n, lo + rows)
        m = hi - lo
        x_rep = np.repeat(x[lo:hi], n_eval, axis=0)
        t_flat = ts[lo:hi].reshape(-1)
        e_flat = eps[lo:hi].reshape(-1, d)
        x_t = forward_diffuse(x_rep, t_flat, e_flat, sched)
        eps_hat = denoise_predict(params, x_t, t_flat, np.full(m * n_eval, c))
        sq = np.sum((eps_hat - e_flat) ** 2, axis=1).reshape(m, n_eval)
        out[lo:hi] = sq.mean(axis=1)
    return out


def paired_class_errors(params: DenoiserParams, sched: NoiseSchedule, x: np.ndarray,
                        n_eval: int, rng) -> np.ndarray:
    """(n, n_classes) denoising errors with the same (t, eps) draws shared by
    every class, which cancels the draw noise out of the class comparison."""
    x = np.asarray(x, dtype=float)
    if n_eval < 1:
        raise InputError(f"n_eval must be >= 1, got {n_eval}")
    n, d = x.shape
    ts = rng.integers(1, sched.T + 1, size=(n, n_eval))
    eps = rng.standard_normal((n, n_eval, d))
    return np.stack(
        [_errors_for_draws(params, sched, x, ts, eps, c) for c in range(params.arch.n_classes)],
        axis=1,
    )


def class_denoising_error(params: DenoiserParams, sched: NoiseSchedule, x, c: int,
                          n_eval: int, rng) -> float:
    """Monte-Carlo estimate of the expected denoising error of `x` under
    class `c`. Call with same-state generators per class to pair the draws."""
    x = np.asarray(x, dtype=float)
    if n_eval < 1:
        raise InputError(f"n_eval must be >= 1, got {n_eval}")
    ts = rng.integers(1, sched.T + 1, size=(1, n_eval))
    eps = rng.standard_normal((1, n_eval, x.shape[-1]))
    return float(_errors_for_draws(params, sched, x[None, :], ts, eps, c)[0])


def classify_batch(params: DenoiserParams, sched: NoiseSchedule, x: np.ndarray,
                   n_eval: int, tau: float, rng):
    """Zero-shot posteriors and labels for a batch.

    posterior = softmax over classes of (-error_c / d / tau), i.e. the
    temperature acts on per-dimension mean errors; the label is the argmin
    error class, which the softmax ordering preserves for any tau > 0.
    """
    if tau <= 0:
        raise InputError(f"tau must be positive, got {tau}")
    errors = paired_class_errors(params, sched, x, n_eval, rng)
    posteriors = softmax(-errors / params.arch.feature_dim / tau, axis=1)
    labels = np.argmin(errors, axis=1)
    return posteriors, labels


def classify(params: DenoiserParams, sched: NoiseSchedule, x, n_eval: int, tau: float, rng):
    """Posterior over {LOS, NLOS} for one feature vector (LOS at index 0)."""
    posteriors, _ = classify_batch(params, sched, np.asarray(x, float)[None, :], n_eval, tau, rng)
    return posteriors[0]


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: DenoiserParams, sched: NoiseSchedule,
                    config_fingerprint: str = "") -> None:
    meta = {
        "arch": params.arch.to_dict(),
        "n_layers": len(params.mlp.weights),
        "fingerprint": config_fingerprint,
    }
    arrays = {"betas": sched.betas, "class_emb": params.class_emb,
              "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for i, (w, b) in enumerate(zip(params.mlp.weights, params.mlp.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    np.savez(path, **arrays)


def load_checkpoint(path, expected_arch: Optional[DenoiserArch] = None):
    """Returns (params, schedule, fingerprint); refuses to load a checkpoint
    whose architecture descriptor differs from `expected_arch`."""
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            arch = DenoiserArch.from_dict(meta["arch"])
            if expected_arch is not None and arch != expected_arch:
                raise CheckpointError(
                    f"architecture mismatch: checkpoint {arch.to_dict()} vs expected {expected_arch.to_dict()}"
                )
            betas = data["betas"]
            sched = NoiseSchedule(T=len(betas), betas=betas, alpha_bars=np.cumprod(1.0 - betas))
            n_layers = meta["n_layers"]
            weights = [data[f"w{i}"] for i in range(n_layers)]
            biases = [data[f"b{i}"] for i in range(n_layers)]
            sizes = (arch.input_dim, *arch.hidden, arch.feature_dim)
            mlp = Mlp(sizes, arch.activation, weights, biases)
            params = DenoiserParams(arch, mlp, data["class_emb"])
            return params, sched, meta["fingerprint"]
    except CheckpointError:
        raise
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
