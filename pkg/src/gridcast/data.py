"""Grid-series datasets: container I/O, synthetic families, splits, windows.

A grid series is a (T, C, H, W) float array sampled on a regular clock with
``steps_per_day`` frames per day; ``start_index`` records the time-of-day of
frame 0 so splits keep their alignment.  Channels are treated as independent
series downstream (channel_split), and every model input is normalized to
[-1, 1] with min-max bounds fitted on the training split only.
"""

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, ParseError, SizingError

_MAGIC = b"GRIDSER\x01"
SYNTHETIC_FAMILIES = ("traveling_wave", "diurnal", "diffusion", "mixture")


@dataclass
class GridSeries:
    """A named (T, C, H, W) series with day-clock metadata."""

    name: str
    values: np.ndarray
    steps_per_day: int
    start_index: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4:
            raise DataError(
                f"{self.name}: values must be (T, C, H, W), got shape {self.values.shape}")
        if self.steps_per_day <= 0:
            raise DataError(f"{self.name}: steps_per_day must be positive")
        self.start_index = int(self.start_index) % self.steps_per_day

    @property
    def shape(self):
        return self.values.shape

    def time_of_day(self, t):
        """Time-of-day step of frame t."""
        return (self.start_index + t) % self.steps_per_day


# ---------------------------------------------------------------------------
# container format: magic | u32 header length | JSON header | f32 payload
# ---------------------------------------------------------------------------

def save_dataset(series, path, extra=None):
    """Write a GridSeries to the self-describing binary container.

    extra: optional additional header fields (must not shadow the core ones).
    """
    header = {
        "dtype": "<f4",
        "name": series.name,
        "shape": list(series.shape),
        "start_index": int(series.start_index),
        "steps_per_day": int(series.steps_per_day),
    }
    if extra:
        clash = sorted(set(extra) & set(header))
        if clash:
            raise DataError(f"extra header fields shadow core fields: {clash}")
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(series.values, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_dataset(path, name=None):
    """Read a container file back into a GridSeries, validating as it goes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _MAGIC:
        raise ParseError(f"{path}: bad magic; not a grid-series container")
    if len(raw) < 12:
        raise ParseError(f"{path}: truncated header length field")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: header is not valid JSON ({exc})") from exc
    for field in ("dtype", "shape", "start_index", "steps_per_day"):
        if field not in header:
            raise ParseError(f"{path}: header missing field {field!r}")
    if header["dtype"] != "<f4":
        raise ParseError(f"{path}: unsupported dtype {header['dtype']!r}; expected '<f4'")
    shape = tuple(int(s) for s in header["shape"])
    if len(shape) != 4:
        raise ParseError(f"{path}: header field 'shape' must have 4 entries, got {shape}")
    expect = int(np.prod(shape)) * 4
    payload = raw[12 + hlen:]
    if len(payload) != expect:
        raise ParseError(
            f"{path}: payload length {len(payload)} does not match shape {shape} "
            f"(expected {expect} bytes)")
    values = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        t = int(np.argwhere(bad)[0][0])
        raise DataError(f"{path}: non-finite value in frame {t}")
    return GridSeries(
        name=name if name is not None else header.get("name", "unnamed"),
        values=values,
        steps_per_day=header["steps_per_day"],
        start_index=header["start_index"],
    )


def read_header(path):
    """The container's JSON header as a dict, without loading the payload."""
    with open(path, "rb") as fh:
        raw = fh.read(12)
        if raw[:8] != _MAGIC:
            raise ParseError(f"{path}: bad magic; not a grid-series container")
        (hlen,) = struct.unpack("<I", raw[8:12])
        blob = fh.read(hlen)
    try:
        return json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: header is not valid JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# splits and normalization
# ---------------------------------------------------------------------------

def split_dataset(series, l_h, k):
    """Contiguous 70/15/15 split with a guard gap of l_h+k-1 frames.

    The gap frames between adjacent splits are dropped so that no window can
    straddle a boundary: train [0, b1), val [b1+g, b2), test [b2+g, T).
    """
    T = series.shape[0]
    g = l_h + k - 1
    L = l_h + k
    b1 = int(0.7 * T)
    b2 = int(0.85 * T)
    sizes = (b1, b2 - (b1 + g), T - (b2 + g))
    if min(sizes) < L:
        raise SizingError(
            f"{series.name}: T={T} too short for l_h={l_h}, k={k}; "
            f"need at least {min_frames(l_h, k)} frames")
    parts = []
    for lo_f, hi_f in ((0, b1), (b1 + g, b2), (b2 + g, T)):
        parts.append(GridSeries(
            name=series.name,
            values=series.values[lo_f:hi_f],
            steps_per_day=series.steps_per_day,
            start_index=series.time_of_day(lo_f),
        ))
    return tuple(parts)


def min_frames(l_h, k):
    """Smallest T for which split_dataset succeeds."""
    L, g = l_h + k, l_h + k - 1
    T = 3 * L + 2 * g
    while True:
        b1, b2 = int(0.7 * T), int(0.85 * T)
        if min(b1, b2 - (b1 + g), T - (b2 + g)) >= L:
            return T
        T += 1


def fit_normalizer(series):
    """Per-channel min-max bounds from a (training) split.

    A constant channel gets hi = lo + 1 so it normalizes to exactly -1.
    """
    v = series.values
    lo = v.min(axis=(0, 2, 3))
    hi = v.max(axis=(0, 2, 3))
    hi = np.where(hi > lo, hi, lo + 1.0)
    return lo, hi


def normalize(series, lo, hi):
    """Map values to [-1, 1] under the given bounds.  No clipping: values
    outside [lo, hi] map outside [-1, 1]."""
    lo = np.asarray(lo, dtype=np.float64).reshape(1, -1, 1, 1)
    hi = np.asarray(hi, dtype=np.float64).reshape(1, -1, 1, 1)
    vals = 2.0 * (series.values - lo) / (hi - lo) - 1.0
    return replace(series, values=vals)


def denormalize(values, lo, hi):
    """Inverse of normalize for plain arrays (scalar or per-channel bounds)."""
    return (np.asarray(values, dtype=np.float64) + 1.0) * 0.5 * (hi - lo) + lo


def channel_split(series):
    """One single-channel GridSeries per channel; names gain /c<i> when C > 1."""
    C = series.shape[1]
    if C == 1:
        return [series]
    return [
        replace(series, name=f"{series.name}/c{c}", values=series.values[:, c:c + 1])
        for c in range(C)
    ]


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

@dataclass
class WindowSample:
    """One training/evaluation sample cut from a single-channel series."""

    history: np.ndarray               # (l_h, H, W)
    future: np.ndarray                # (k, H, W)
    period_context: object            # (n_days, l_h, H, W) or None
    t_index: int                      # start of history within its series
    dataset: str


def make_windows(series, l_h, k, n_period_days=0, stride=1):
    """Yield every window of l_h history + k future frames at the given stride.

    period_context holds, for j = 1..n_period_days, the l_h frames starting
    exactly j*steps_per_day before the history; windows too early to have all
    of them carry None instead.
    """
    if series.shape[1] != 1:
        raise DataError(
            f"{series.name}: windows need a single-channel series (use channel_split)")
    if l_h <= 0 or k <= 0:
        raise SizingError(f"l_h and k must be positive, got {l_h}, {k}")
    T = series.shape[0]
    vals = series.values[:, 0]
    spd = series.steps_per_day
    for t in range(0, T - (l_h + k) + 1, stride):
        ctx = None
        if n_period_days > 0 and t >= n_period_days * spd:
            ctx = np.stack([vals[t - j * spd: t - j * spd + l_h]
                            for j in range(1, n_period_days + 1)])
        yield WindowSample(
            history=vals[t:t + l_h],
            future=vals[t + l_h:t + l_h + k],
            period_context=ctx,
            t_index=t,
            dataset=series.name,
        )


def count_windows(series, l_h, k, stride=1):
    T = series.shape[0]
    n = T - (l_h + k) + 1
    return 0 if n <= 0 else (n - 1) // stride + 1


# ---------------------------------------------------------------------------
# synthetic families
# ---------------------------------------------------------------------------

def gen_synthetic(family, shape, seed, steps_per_day=24, name=None, **params):
    """Deterministic synthetic series of a given family.

    shape is (T, C, H, W).  Families:

    - traveling_wave: superposed plane waves advected over the grid
    - diurnal:        smooth daily profile with per-cell amplitude and a slow
                      day-to-day drift (periodicity dominates)
    - diffusion:      point sources that appear, spread and decay
    - mixture:        weighted sum of the three above
    """
    if family not in SYNTHETIC_FAMILIES:
        raise ParseError(f"unknown synthetic family {family!r}; expected one of {SYNTHETIC_FAMILIES}")
    T, C, H, W = shape
    rng = np.random.default_rng(seed)
    chans = []
    for c in range(C):
        crng = np.random.default_rng(rng.integers(0, 2 ** 63))
        if family == "traveling_wave":
            chans.append(_gen_wave(crng, T, H, W, **params))
        elif family == "diurnal":
            chans.append(_gen_diurnal(crng, T, H, W, steps_per_day, **params))
        elif family == "diffusion":
            chans.append(_gen_diffusion(crng, T, H, W, steps_per_day, **params))
        else:
            w = crng.uniform(0.2, 1.0, size=3)
            w /= w.sum()
            parts = [
                _gen_wave(np.random.default_rng(crng.integers(0, 2 ** 63)), T, H, W),
                _gen_diurnal(np.random.default_rng(crng.integers(0, 2 ** 63)), T, H, W, steps_per_day),
                _gen_diffusion(np.random.default_rng(crng.integers(0, 2 ** 63)), T, H, W, steps_per_day),
            ]
            chans.append(sum(wi * p for wi, p in zip(w, parts)))
    values = np.stack(chans, axis=1)
    return GridSeries(
        name=name if name is not None else f"{family}-{seed}",
        values=values,
        steps_per_day=steps_per_day,
    )


def _smooth_field(rng, H, W, lo, hi, n_modes=3):
    """Low-frequency random field rescaled into [lo, hi]."""
    yy = np.linspace(0.0, 2.0 * np.pi, H, endpoint=False)[:, None]
    xx = np.linspace(0.0, 2.0 * np.pi, W, endpoint=False)[None, :]
    f = np.zeros((H, W))
    for _ in range(n_modes):
        ky = rng.integers(0, 3)
        kx = rng.integers(0, 3)
        f += rng.normal() * np.cos(ky * yy + rng.uniform(0, 2 * np.pi)) \
                          * np.cos(kx * xx + rng.uniform(0, 2 * np.pi))
    span = f.max() - f.min()
    if span < 1e-12:
        return np.full((H, W), 0.5 * (lo + hi))
    return lo + (hi - lo) * (f - f.min()) / span


def _gen_wave(rng, T, H, W, omega=None, n_components=2):
    t = np.arange(T)[:, None, None]
    yy = np.arange(H)[None, :, None] / H
    xx = np.arange(W)[None, None, :] / W
    out = np.full((T, H, W), rng.uniform(0.0, 2.0))
    for _ in range(n_components):
        amp = rng.uniform(0.5, 1.5)
        ky = rng.integers(1, 4)
        kx = rng.integers(1, 4)
        om = rng.uniform(0.1, 0.5) if omega is None else omega
        phase = rng.uniform(0, 2 * np.pi)
        out += amp * np.sin(2 * np.pi * (kx * xx + ky * yy) - om * t + phase)
    return out


def _gen_diurnal(rng, T, H, W, spd, drift=0.1, noise=0.04):
    # smooth daily profile dominated by the one-cycle harmonic
    tau = np.arange(spd) * 2 * np.pi / spd
    prof = rng.uniform(0.8, 1.2) * np.sin(tau + rng.uniform(0, 2 * np.pi))
    for m in (2, 3):
        prof += rng.uniform(0.0, 0.4) * np.sin(m * tau + rng.uniform(0, 2 * np.pi))
    prof /= np.max(np.abs(prof))
    profile_t = prof[np.arange(T) % spd]
    # slow day-to-day multiplicative drift, linearly interpolated within days
    n_days = T // spd + 2
    day_mult = np.clip(rng.normal(1.0, drift, size=n_days), 1.0 - 2.5 * drift, 1.0 + 2.5 * drift)
    drift_t = np.interp(np.arange(T) / spd, np.arange(n_days), day_mult)
    base = _smooth_field(rng, H, W, 1.0, 3.0)
    amp = _smooth_field(rng, H, W, 0.5, 1.5)
    out = base[None] + amp[None] * (profile_t * drift_t)[:, None, None]
    out += rng.normal(0.0, noise, size=(T, H, W))
    return out


def _gen_diffusion(rng, T, H, W, spd, rate=None, noise=0.02):
    if rate is None:
        rate = max(3, T // spd)  # sources per run, roughly one a day
    n_src = int(rate)
    t = np.arange(T, dtype=np.float64)
    yy = np.arange(H)[:, None]
    xx = np.arange(W)[None, :]
    out = np.zeros((T, H, W))
    for _ in range(n_src):
        t0 = rng.uniform(-spd, T)
        cy = rng.uniform(0, H)
        cx = rng.uniform(0, W)
        sig = rng.uniform(1.0, max(2.0, min(H, W) / 3.0))
        tau = rng.uniform(spd / 4.0, spd)
        inten = rng.uniform(0.5, 2.0)
        dt = t - t0
        envelope = np.where(dt >= 0, (1.0 - np.exp(-dt / 2.0)) * np.exp(-dt / tau), 0.0)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
        out += inten * envelope[:, None, None] * bump[None]
    out += rng.normal(0.0, noise, size=(T, H, W))
    return out


def add_noise(values, level, seed):
    """Gaussian perturbation with std = level * std(values); level 0 is identity."""
    if level < 0:
        raise DataError(f"noise level must be non-negative, got {level}")
    values = np.asarray(values, dtype=np.float64)
    if level == 0:
        return values.copy()
    sigma = level * float(values.std())
    rng = np.random.default_rng(seed)
    return values + rng.normal(0.0, sigma, size=values.shape)


# ---------------------------------------------------------------------------
# prepared bundles: split + per-channel normalization in one step
# ---------------------------------------------------------------------------

@dataclass
class DatasetBundle:
    """Per-channel splits of one dataset, normalized with train-split bounds."""

    name: str
    train: GridSeries
    val: GridSeries
    test: GridSeries
    raw_train: GridSeries
    raw_val: GridSeries
    raw_test: GridSeries
    lo: float
    hi: float

    @property
    def steps_per_day(self):
        return self.train.steps_per_day


def prepare_dataset(series, l_h, k):
    """Split, fit train bounds per channel, normalize: one bundle per channel."""
    train, val, test = split_dataset(series, l_h, k)
    bundles = []
    for ch_train, ch_val, ch_test in zip(channel_split(train), channel_split(val),
                                         channel_split(test)):
        lo, hi = fit_normalizer(ch_train)
        bundles.append(DatasetBundle(
            name=ch_train.name,
            train=normalize(ch_train, lo, hi),
            val=normalize(ch_val, lo, hi),
            test=normalize(ch_test, lo, hi),
            raw_train=ch_train,
            raw_val=ch_val,
            raw_test=ch_test,
            lo=float(lo[0]),
            hi=float(hi[0]),
        ))
    return bundles
