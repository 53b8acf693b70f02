"""Dataset model and generators.

Channel conventions for the lane-change scenario: a vehicle state is
[p_x, p_y, v_x, v_y]; histories stack the ego vehicle (rows 0..3) on top of
the other vehicle (rows 4..7), so the velocity channels are (2, 3, 6, 7).
The future window covers the ego vehicle only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    DimensionMismatch,
    DimsHeaderMismatch,
    EmptyDataset,
    GeneratorRequired,
    InvalidParams,
    MissingChannels,
    ParseError,
)

EGO_SLICE = slice(0, 4)
OTHER_SLICE = slice(4, 8)
VELOCITY_CHANNELS_HISTORY = (2, 3, 6, 7)
VELOCITY_CHANNELS_FUTURE = (2, 3)
STD_FLOOR = 1e-8


@dataclass
class Dims:
    p_in: int
    p_out: int
    H: int
    F: int
    n: int


@dataclass
class Sample:
    s_H: np.ndarray   # (p_in, H)
    s_F: np.ndarray   # (p_out, F)
    x0: np.ndarray    # (n,)


@dataclass
class Dataset:
    samples: list
    dims: Dims
    split: str = "train"      # train | test
    kind: str = "orig"        # orig | add | rand | adv | ood
    seed: int = 0
    meta: dict = field(default_factory=dict)
    _stacked: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        d = self.dims
        for i, s in enumerate(self.samples):
            if (s.s_H.shape != (d.p_in, d.H) or s.s_F.shape != (d.p_out, d.F)
                    or s.x0.shape != (d.n,)):
                raise DimensionMismatch(f"sample {i} does not match header dims")
            if not (np.all(np.isfinite(s.s_H)) and np.all(np.isfinite(s.s_F))
                    and np.all(np.isfinite(s.x0))):
                raise InvalidParams(f"sample {i} contains non-finite values")

    def __len__(self) -> int:
        return len(self.samples)

    def stacked(self):
        """(S_H, S_F, X0) as arrays of shape (N,p_in,H), (N,p_out,F), (N,n)."""
        if self._stacked is None:
            self._stacked = (
                np.stack([s.s_H for s in self.samples]),
                np.stack([s.s_F for s in self.samples]),
                np.stack([s.x0 for s in self.samples]),
            )
        return self._stacked

    def replaced(self, samples, kind=None, split=None, seed=None) -> "Dataset":
        return Dataset(samples, self.dims, split or self.split,
                       kind or self.kind, self.seed if seed is None else seed,
                       dict(self.meta))


@dataclass
class ArimaParams:
    sigma: float
    s0: float = 1.0
    T: int = 50
    H: int = 25
    F: int = 25
    x0: float = 1.0
    mu: Optional[float] = None      # drawn from mu_range when None
    alpha: Optional[float] = None
    beta: Optional[float] = None
    mu_range: tuple = (-0.1, 0.1)
    alpha_range: tuple = (0.5, 0.95)
    beta_range: tuple = (-0.5, 0.5)
    s0_range: Optional[tuple] = None    # per-sample initial values when set

    def __post_init__(self):
        if self.sigma < 0:
            raise InvalidParams("sigma must be >= 0")
        if self.H + self.F != self.T:
            raise InvalidParams("H + F must equal T")


@dataclass
class LaneChangeParams:
    dt: float = 0.25
    H: int = 20
    F: int = 20
    road_length: float = 135.0
    lane_offset: float = 3.5
    accel_std: float = 0.4
    speed_range: tuple = (20.0, 35.0)
    gap_range: tuple = (8.0, 20.0)

    def __post_init__(self):
        if self.dt <= 0 or self.accel_std < 0:
            raise InvalidParams("dt must be positive and accel_std >= 0")
        if not self.speed_range[0] < self.speed_range[1]:
            raise InvalidParams("speed_range must be increasing")


def arima_generate(params: ArimaParams, N: int, seed: int,
                   split: str = "train", kind: str = "orig") -> Dataset:
    """N series from s_{t+1} = mu + alpha s_t + beta w_{t-1} + w_t.

    The model parameters are drawn once per dataset (unless fixed in params)
    and recorded in the dataset metadata.  sigma is used as the noise scale
    (standard deviation) of w.  When s0_range is set, every series gets its
    own uniformly drawn initial value; otherwise all start at s0.
    """
    if N < 1:
        raise InvalidParams("N must be >= 1")
    rng = np.random.default_rng(seed)
    mu = params.mu if params.mu is not None else rng.uniform(*params.mu_range)
    alpha = params.alpha if params.alpha is not None else rng.uniform(*params.alpha_range)
    beta = params.beta if params.beta is not None else rng.uniform(*params.beta_range)
    T, H, F = params.T, params.H, params.F
    series = np.empty((N, T))
    if params.s0_range is not None:
        series[:, 0] = rng.uniform(*params.s0_range, size=N)
    else:
        series[:, 0] = params.s0
    w = rng.normal(0.0, params.sigma, size=(N, T)) if params.sigma > 0 else np.zeros((N, T))
    for t in range(1, T):
        prev_w = w[:, t - 2] if t >= 2 else np.zeros(N)
        series[:, t] = mu + alpha * series[:, t - 1] + beta * prev_w + w[:, t - 1]
    x0 = np.array([params.x0])
    samples = [Sample(series[i, :H][None, :].copy(),
                      series[i, H:][None, :].copy(), x0.copy())
               for i in range(N)]
    ds = Dataset(samples, Dims(1, 1, H, F, 1), split, kind, seed)
    ds.meta.update({"mu": mu, "alpha": alpha, "beta": beta,
                    "sigma": params.sigma, "sigma_is": "std"})
    return ds


def _lane_dynamics(dt: float):
    A = np.array([[1.0, 0.0, dt, 0.0],
                  [0.0, 1.0, 0.0, dt],
                  [0.0, 0.0, 1.0, 0.0],
                  [0.0, 0.0, 0.0, 1.0]])
    B = np.array([[0.5 * dt * dt, 0.0],
                  [0.0, 0.5 * dt * dt],
                  [dt, 0.0],
                  [0.0, dt]])
    return A, B


def lane_change_generate(params: LaneChangeParams, N: int, seed: int,
                         split: str = "train", kind: str = "orig") -> Dataset:
    """Synthetic two-vehicle lane swap with double-integrator kinematics.

    Both vehicles follow the same discrete dynamics the controller uses;
    the lane swap is a smooth sinusoidal lateral acceleration profile and
    the longitudinal channel carries zero-mean jitter of std accel_std.
    """
    if N < 1:
        raise InvalidParams("N must be >= 1")
    rng = np.random.default_rng(seed)
    H, F = params.H, params.F
    T = H + F
    A, B = _lane_dynamics(params.dt)
    T_sec = T * params.dt
    # a(t) = c sin(2 pi t / T_sec) displaces by c T_sec^2 / (2 pi) over T_sec
    c = params.lane_offset * 2.0 * np.pi / (T_sec * T_sec)
    t_grid = np.arange(T) * params.dt
    swap_profile = c * np.sin(2.0 * np.pi * t_grid / T_sec)
    samples = []
    for _ in range(N):
        v0 = rng.uniform(*params.speed_range, size=2)      # ego (v_x, v_y)
        v0_other = rng.uniform(*params.speed_range, size=2)
        gap = rng.uniform(*params.gap_range)
        states = np.zeros((2, 4, T))
        # ego starts at the origin in its lane; the other car sits one lane
        # over and a gap ahead, and they swap lateral offsets.
        x_ego = np.array([0.0, 0.0, v0[0], v0[1]])
        x_oth = np.array([gap, params.lane_offset, v0_other[0], v0_other[1]])
        for veh, (x, sign) in enumerate(((x_ego, 1.0), (x_oth, -1.0))):
            jitter = rng.normal(0.0, params.accel_std, size=T) \
                if params.accel_std > 0 else np.zeros(T)
            for t in range(T):
                states[veh, :, t] = x
                u = np.array([jitter[t], sign * swap_profile[t]])
                x = A @ x + B @ u
        s_H = np.vstack([states[0, :, :H], states[1, :, :H]])
        s_F = states[0, :, H:]
        x0 = states[0, :, H - 1].copy()
        samples.append(Sample(s_H.copy(), s_F.copy(), x0))
    ds = Dataset(samples, Dims(8, 4, H, F, 4), split, kind, seed)
    ds.meta.update({"dt": params.dt, "speed_range": list(params.speed_range)})
    return ds


def split_by_speed(dataset: Dataset, threshold: float = 35.0):
    """Partition into (in_dist, ood); a sample is OoD iff any velocity
    channel exceeds the threshold anywhere in its series."""
    d = dataset.dims
    if d.p_in < max(VELOCITY_CHANNELS_HISTORY) + 1 or \
            d.p_out < max(VELOCITY_CHANNELS_FUTURE) + 1:
        raise MissingChannels("dataset lacks the documented velocity channels")
    in_samples, ood_samples = [], []
    for s in dataset.samples:
        fast = (np.any(s.s_H[list(VELOCITY_CHANNELS_HISTORY), :] > threshold)
                or np.any(s.s_F[list(VELOCITY_CHANNELS_FUTURE), :] > threshold))
        (ood_samples if fast else in_samples).append(s)
    return (dataset.replaced(in_samples),
            dataset.replaced(ood_samples, kind="ood"))


def build_scheme(base: Dataset, scheme: str,
                 generator: Optional[Callable[[int, int], Dataset]] = None,
                 seed: int = 0) -> Dataset:
    """Assemble a training dataset for one of the baseline schemes.

    original: base unchanged.  data_added: base plus |base| fresh samples
    from generator(count, seed).  random: base plus copies of base whose
    histories get N(0,1) noise per time step (labels untouched).  Added
    counts always equal |base| so schemes stay comparable.
    """
    if scheme == "original":
        return base
    if scheme == "data_added":
        if generator is None:
            raise GeneratorRequired("data_added requires a generator")
        fresh = generator(len(base), seed)
        if fresh.dims != base.dims:
            raise DimensionMismatch("generator dims do not match base")
        return base.replaced(list(base.samples) + list(fresh.samples), kind="add")
    if scheme == "random":
        rng = np.random.default_rng(seed)
        noisy = [Sample(s.s_H + rng.normal(0.0, 1.0, size=s.s_H.shape),
                        s.s_F.copy(), s.x0.copy())
                 for s in base.samples]
        return base.replaced(list(base.samples) + noisy, kind="rand")
    raise InvalidParams(f"unknown scheme {scheme!r}")


def make_adversarial_testset(test: Dataset, pipeline) -> Dataset:
    """Replace every history with the trained adversary's perturbation of
    it; labels and initial states are untouched."""
    from .game import adversary_perturb
    samples = [Sample(adversary_perturb(pipeline, s.s_H), s.s_F.copy(), s.x0.copy())
               for s in test.samples]
    return test.replaced(samples, kind="adv")


def normalize_stats(dataset: Dataset):
    """Per input channel mean/std over all samples and time steps.

    Population std, floored at 1e-8 so constant channels stay usable.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot compute stats of an empty dataset")
    S_H, _, _ = dataset.stacked()
    mean = S_H.mean(axis=(0, 2))
    std = np.maximum(S_H.std(axis=(0, 2)), STD_FLOOR)
    return mean, std


# ---------------------------------------------------------------------------
# CSV round trip.  Format:
#   #dims,p_in,p_out,H,F,n,split,kind,seed
#   SH,i,<p_in*H values row-major>
#   SF,i,<p_out*F values row-major>
#   X0,i,<n values>
# repeated per sample, decimals with 17 significant digits.
# ---------------------------------------------------------------------------

def _fmt(values: np.ndarray) -> str:
    return ",".join(format(v, ".17g") for v in values.ravel())


def save_dataset(path, dataset: Dataset) -> None:
    d = dataset.dims
    with open(path, "w") as fh:
        fh.write(f"#dims,{d.p_in},{d.p_out},{d.H},{d.F},{d.n},"
                 f"{dataset.split},{dataset.kind},{dataset.seed}\n")
        for i, s in enumerate(dataset.samples):
            fh.write(f"SH,{i},{_fmt(s.s_H)}\n")
            fh.write(f"SF,{i},{_fmt(s.s_F)}\n")
            fh.write(f"X0,{i},{_fmt(s.x0)}\n")


def _parse_values(fields, count, lineno):
    if len(fields) != count:
        raise ParseError(f"expected {count} values, got {len(fields)}", lineno)
    try:
        return np.array([float(v) for v in fields])
    except ValueError as exc:
        raise ParseError(str(exc), lineno) from None


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#dims,"):
        raise ParseError("missing #dims header", 1)
    head = lines[0].split(",")
    if len(head) != 9:
        raise DimsHeaderMismatch(f"header has {len(head)} fields, expected 9")
    try:
        dims = Dims(*(int(v) for v in head[1:6]))
        split, kind, seed = head[6], head[7], int(head[8])
    except ValueError as exc:
        raise DimsHeaderMismatch(str(exc)) from None
    body = lines[1:]
    if len(body) % 3 != 0:
        raise ParseError("truncated file: sample record groups incomplete",
                         len(lines))
    samples = []
    for i in range(len(body) // 3):
        group = []
        for j, (tag, count, shape) in enumerate((
                ("SH", dims.p_in * dims.H, (dims.p_in, dims.H)),
                ("SF", dims.p_out * dims.F, (dims.p_out, dims.F)),
                ("X0", dims.n, (dims.n,)))):
            lineno = 2 + 3 * i + j
            fields = body[3 * i + j].split(",")
            if fields[0] != tag or fields[1] != str(i):
                raise ParseError(f"expected record {tag},{i}", lineno)
            group.append(_parse_values(fields[2:], count, lineno).reshape(shape))
        samples.append(Sample(*group))
    return Dataset(samples, dims, split, kind, seed)


def dataset_io(path, direction: str, dataset: Dataset | None = None):
    """save/load dispatcher kept for symmetry with the module surface."""
    if direction == "save":
        if dataset is None:
            raise InvalidParams("save requires a dataset")
        save_dataset(path, dataset)
        return None
    if direction == "load":
        return load_dataset(path)
    raise InvalidParams(f"unknown direction {direction!r}")
