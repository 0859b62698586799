"""GNSS-style link measurement synthesis with LOS/NLOS ground truth.

Each sample is one transmitter-to-receiver measurement carrying a 7-feature
vector (elevation, azimuth, C/N0, excess delay, Doppler, pseudorange error,
L1-L2 delta), the geometric LOS/NLOS label (LOS encoded as 0), and the true
receiver position. Datasets split 75/25 by default, with feature
standardization fitted on the training portion only.
"""

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

import numpy as np

from . import rngstream
from .errors import GenerationError, InputError, ParseError
from .scene import (
    SPEED_OF_LIGHT,
    Scene,
    Transmitter,
    TxKind,
    excess_delay_ns,
    los_test,
    reflected_paths,
    segment_intersects_aabb,
)


class Label(IntEnum):
    LOS = 0
    NLOS = 1


FEATURE_NAMES = (
    "elevation_deg",
    "azimuth_deg",
    "cn0_dbhz",
    "excess_delay_ns",
    "doppler_hz",
    "pseudorange_error_m",
    "l1_l2_delta_m",
)

CSV_COLUMNS = (
    "gps_time",
    "sat_code",
    "tx_id",
    "elevation_deg",
    "azimuth_deg",
    "cn0_dbhz",
    "excess_delay_ns",
    "doppler_hz",
    "pseudorange_error_m",
    "l1_l2_delta_m",
    "los_label",
    "rx_x",
    "rx_y",
    "rx_z",
)


@dataclass(frozen=True)
class ChannelConfig:
    """Synthesis constants. Urban-canyon heuristics, all overridable."""

    sigma_excess_los_ns: float = 3.0
    sigma_pr_los_m: float = 1.0
    sigma_pr_nlos_m: float = 2.0
    reflection_loss_db: float = 6.0
    penetration_loss_db: float = 20.0      # per building blocking the direct ray
    penetration_only_loss_db: float = 40.0  # NLOS with no reflected path at all
    cn0_ref_dbhz: dict = field(default_factory=lambda: {
        TxKind.SATELLITE: 45.0, TxKind.UAV: 50.0, TxKind.GROUND: 52.0})
    cn0_ref_dist_m: dict = field(default_factory=lambda: {
        TxKind.SATELLITE: 550e3, TxKind.UAV: 300.0, TxKind.GROUND: 200.0})
    cn0_fspl_slope: float = 0.05
    cn0_noise_db: float = 1.0
    cn0_floor_dbhz: float = 10.0
    cn0_ceil_dbhz: float = 60.0
    doppler_amp_hz: dict = field(default_factory=lambda: {
        TxKind.SATELLITE: 40e3, TxKind.UAV: 200.0, TxKind.GROUND: 10.0})
    sat_doppler_period_s: float = 600.0
    doppler_noise_hz: float = 5.0
    l1l2_los_mean_m: float = 0.0
    l1l2_los_sigma_m: float = 0.2
    l1l2_nlos_mean_m: float = 1.0
    l1l2_nlos_sigma_m: float = 0.5
    user_jitter_m: float = 2.0
    jitter_tries: int = 16
    n_time_steps: int = 64
    time_step_s: float = 10.0


@dataclass
class LinkSample:
    gps_time_s: float
    tx_id: str
    sat_code: str
    features: np.ndarray  # in FEATURE_NAMES order
    label: Label
    rx_truth: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.rx_truth = np.asarray(self.rx_truth, dtype=float)
        self.label = Label(self.label)
        if self.features.shape != (len(FEATURE_NAMES),):
            raise InputError(f"expected {len(FEATURE_NAMES)} features, got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise InputError(f"non-finite features: {self.features}")

    def __eq__(self, other):
        if not isinstance(other, LinkSample):
            return NotImplemented
        return (
            self.gps_time_s == other.gps_time_s
            and self.tx_id == other.tx_id
            and self.sat_code == other.sat_code
            and np.array_equal(self.features, other.features)
            and self.label == other.label
            and np.array_equal(self.rx_truth, other.rx_truth)
        )


@dataclass
class Standardization:
    """Per-feature z-score transform fitted on training data only.

    Features whose training standard deviation is (numerically) zero are
    dropped; `kept` holds the surviving feature indices.
    """

    mean: np.ndarray
    std: np.ndarray
    kept: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardization":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        kept = np.flatnonzero(std > 1e-12)
        if kept.size == 0:
            raise GenerationError("all features are degenerate (zero variance)")
        return cls(mean=mean[kept], std=std[kept], kept=kept)

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x[..., self.kept] - self.mean) / self.std

    @property
    def dim(self) -> int:
        return int(self.kept.size)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "kept": self.kept.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float), np.asarray(d["kept"], int))

    def __eq__(self, other):
        if not isinstance(other, Standardization):
            return NotImplemented
        return (
            np.array_equal(self.mean, other.mean)
            and np.array_equal(self.std, other.std)
            and np.array_equal(self.kept, other.kept)
        )


@dataclass
class Dataset:
    samples: list
    feature_names: tuple = FEATURE_NAMES
    standardization: Optional[Standardization] = None

    def __len__(self):
        return len(self.samples)

    @property
    def features(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, len(self.feature_names)))
        return np.stack([s.features for s in self.samples])

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(s.label) for s in self.samples], dtype=int)

    @property
    def standardized(self) -> np.ndarray:
        if self.standardization is None:
            raise InputError("dataset has no standardization attached")
        return self.standardization.apply(self.features)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.feature_names == other.feature_names and self.samples == other.samples


def free_space_path_loss_db(d_m: float, f_hz: float) -> float:
    """Free-space path loss 20*log10(4*pi*d*f/c) in dB."""
    if not (d_m > 0 and f_hz > 0 and math.isfinite(d_m) and math.isfinite(f_hz)):
        raise InputError(f"d_m and f_hz must be positive and finite, got {d_m}, {f_hz}")
    return 20.0 * math.log10(4.0 * math.pi * d_m * f_hz / SPEED_OF_LIGHT)


_CODE_PREFIX = {TxKind.SATELLITE: "S", TxKind.UAV: "U", TxKind.GROUND: "G"}


def sat_code_for(tx: Transmitter) -> str:
    return f"{_CODE_PREFIX[tx.kind]}{zlib.crc32(tx.id.encode()) % 100:02d}"


def _doppler_phase(tx_id: str) -> float:
    return 2.0 * math.pi * (zlib.crc32(tx_id.encode()) % 4096) / 4096.0


def synthesize_link(
    scene: Scene,
    tx: Transmitter,
    rx,
    t: float,
    rng: np.random.Generator,
    cfg: ChannelConfig = ChannelConfig(),
) -> LinkSample:
    """Synthesize one link measurement at receiver `rx` and time `t`.

    LOS samples carry half-normal receiver timing noise and unbiased
    pseudorange noise; NLOS samples take the shortest single-bounce
    reflection (geometric excess delay, positively biased pseudorange,
    reflection plus per-wall penetration loss on C/N0), falling back to a
    heavily attenuated straight-through sample when no reflection exists.
    Identical (inputs, rng state) give a bit-identical sample.
    """
    rx = np.asarray(rx, dtype=float)
    if not scene.in_bounds(rx):
        raise InputError(f"rx {rx} outside scene bounds")
    los = los_test(scene, tx.position, rx)

    delta = tx.position - rx
    direct = float(np.linalg.norm(delta))
    elevation = math.degrees(math.atan2(delta[2], math.hypot(delta[0], delta[1])))
    elevation = min(max(elevation, 0.0), 90.0)
    azimuth = math.degrees(math.atan2(delta[0], delta[1])) % 360.0

    fspl = free_space_path_loss_db(direct, tx.carrier_hz)
    fspl_ref = free_space_path_loss_db(cfg.cn0_ref_dist_m[tx.kind], tx.carrier_hz)
    cn0_base = cfg.cn0_ref_dbhz[tx.kind] - cfg.cn0_fspl_slope * (fspl - fspl_ref)

    if los:
        delay_ns = abs(rng.normal(0.0, cfg.sigma_excess_los_ns))
        pr_err = rng.normal(0.0, cfg.sigma_pr_los_m)
        cn0 = cn0_base - rng.normal(0.0, cfg.cn0_noise_db)
        l1l2 = rng.normal(cfg.l1l2_los_mean_m, cfg.l1l2_los_sigma_m)
    else:
        paths = reflected_paths(scene, tx.position, rx)
        n_block = sum(1 for b in scene.buildings if segment_intersects_aabb(tx.position, rx, b))
        if paths:
            path_m = paths[0].length_m
            delay_ns = excess_delay_ns(direct, path_m)
            pr_err = (path_m - direct) + rng.normal(0.0, cfg.sigma_pr_nlos_m)
            loss = cfg.reflection_loss_db + cfg.penetration_loss_db * n_block
        else:
            delay_ns = 0.0
            pr_err = rng.normal(0.0, cfg.sigma_pr_nlos_m)
            loss = cfg.penetration_only_loss_db
        cn0 = cn0_base - loss - rng.normal(0.0, cfg.cn0_noise_db)
        l1l2 = rng.normal(cfg.l1l2_nlos_mean_m, cfg.l1l2_nlos_sigma_m)
    cn0 = min(max(cn0, cfg.cn0_floor_dbhz), cfg.cn0_ceil_dbhz)

    amp = cfg.doppler_amp_hz[tx.kind]
    if tx.kind is TxKind.SATELLITE:
        doppler = amp * math.sin(2.0 * math.pi * t / cfg.sat_doppler_period_s + _doppler_phase(tx.id))
    else:
        doppler = rng.uniform(-amp, amp)
    doppler += rng.normal(0.0, cfg.doppler_noise_hz)

    feats = np.array([elevation, azimuth, cn0, delay_ns, doppler, pr_err, l1l2])
    return LinkSample(
        gps_time_s=float(t),
        tx_id=tx.id,
        sat_code=sat_code_for(tx),
        features=feats,
        label=Label.LOS if los else Label.NLOS,
        rx_truth=rx.copy(),
    )


def _draw_sample(scene: Scene, cfg: ChannelConfig, seed: int, index: int) -> LinkSample:
    rng = rngstream.stream(seed, rngstream.DATASET, 0, index)
    user = scene.users[int(rng.integers(len(scene.users)))]
    rx = user
    for _ in range(cfg.jitter_tries):
        off = rng.normal(0.0, cfg.user_jitter_m, size=2)
        cand = user + np.array([off[0], off[1], 0.0])
        if scene.in_bounds(cand) and not any(b.contains(cand) for b in scene.buildings):
            rx = cand
            break
    tx = scene.transmitters[int(rng.integers(len(scene.transmitters)))]
    t = float(rng.integers(cfg.n_time_steps)) * cfg.time_step_s
    return synthesize_link(scene, tx, rx, t, rng, cfg)


def generate_dataset(
    scene: Scene,
    n: int,
    seed: int,
    train_frac: float = 0.75,
    cfg: ChannelConfig = ChannelConfig(),
    workers: int = 1,
):
    """Draw n samples over (jittered users x transmitters x time steps) and
    split train/val by a seeded shuffle. Per-sample random streams are keyed
    by (seed, index), so the result is bit-identical for any worker count.
    """
    if n < 8:
        raise InputError(f"need n >= 8, got {n}")
    if not 0.0 < train_frac < 1.0:
        raise InputError(f"train_frac must be in (0,1), got {train_frac}")
    if not scene.transmitters or not scene.users:
        raise InputError("scene needs at least one transmitter and one user")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(lambda i: _draw_sample(scene, cfg, seed, i), range(n)))
    else:
        samples = [_draw_sample(scene, cfg, seed, i) for i in range(n)]

    split_rng = rngstream.stream(seed, rngstream.DATASET, 1)
    perm = split_rng.permutation(n)
    n_train = min(max(int(round(n * train_frac)), 1), n - 1)
    train_samples = [samples[i] for i in perm[:n_train]]
    val_samples = [samples[i] for i in perm[n_train:]]

    train_labels = {int(s.label) for s in train_samples}
    if train_labels != {0, 1}:
        raise GenerationError(
            f"training split contains only label(s) {sorted(train_labels)}; "
            "the classifier needs both classes - use a different seed or scene"
        )

    std = Standardization.fit(np.stack([s.features for s in train_samples]))
    train = Dataset(train_samples, FEATURE_NAMES, std)
    val = Dataset(val_samples, FEATURE_NAMES, std)
    return train, val


# ---------------------------------------------------------------------------
# CSV round trip. Column order is CSV_COLUMNS; floats are written with
# shortest round-trip precision so read-back is bit-exact.
# ---------------------------------------------------------------------------


def dataset_to_csv(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for s in ds.samples:
            f = s.features
            row = [
                repr(s.gps_time_s), s.sat_code, s.tx_id,
                repr(f[0]), repr(f[1]), repr(f[2]), repr(f[3]), repr(f[4]), repr(f[5]), repr(f[6]),
                str(int(s.label)),
                repr(s.rx_truth[0]), repr(s.rx_truth[1]), repr(s.rx_truth[2]),
            ]
            fh.write(",".join(row) + "\n")


def csv_to_dataset(path) -> Dataset:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header.split(",") != list(CSV_COLUMNS):
            raise ParseError(f"bad header {header!r}, expected {','.join(CSV_COLUMNS)}", row=1)
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(CSV_COLUMNS):
                raise ParseError(f"expected {len(CSV_COLUMNS)} fields, got {len(parts)}", row=lineno)
            try:
                gps_time = float(parts[0])
                feats = [float(x) for x in parts[3:10]]
                label = int(parts[10])
                rx = [float(x) for x in parts[11:14]]
            except ValueError as e:
                raise ParseError(str(e), row=lineno) from e
            if label not in (0, 1):
                raise ParseError(f"los_label must be 0 or 1, got {label}", row=lineno)
            samples.append(
                LinkSample(
                    gps_time_s=gps_time,
                    tx_id=parts[2],
                    sat_code=parts[1],
                    features=np.array(feats),
                    label=Label(label),
                    rx_truth=np.array(rx),
                )
            )
    return Dataset(samples, FEATURE_NAMES, None)
