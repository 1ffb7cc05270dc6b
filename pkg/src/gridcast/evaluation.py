"""Forecasting protocols, error metrics, and reference baselines.

Everything here is scored in the original data units: model inputs are
normalized on the way in and predictions are denormalized before any metric
is computed.  Test windows tile the test split without overlap (stride
l_h + k).  Zero-shot evaluation never touches the target's training split:
normalization bounds come from the evaluated history windows themselves.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .data import add_noise, count_windows, denormalize, make_windows
from .errors import GeometryError, SizingError
from .masking import temporal_mask_slices
from .patching import unpatchify

PROTOCOLS = ("short", "long", "zero_shot", "few_shot")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def rmse(pred, target):
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise SizingError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def mae(pred, target):
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise SizingError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))


@dataclass
class EvalRow:
    dataset: str
    protocol: str
    predictor: str       # "model", "ha", or "persistence"
    step: object         # "all" or a 0-based forecast step
    rmse: float
    mae: float
    n_windows: int


@dataclass
class EvalReport:
    rows: list

    def filter(self, **kv):
        out = self.rows
        for key, val in kv.items():
            out = [r for r in out if getattr(r, key) == val]
        return out

    def one(self, **kv):
        rows = self.filter(**kv)
        if len(rows) != 1:
            raise KeyError(f"expected one row for {kv}, found {len(rows)}")
        return rows[0]

    def extend(self, other):
        self.rows.extend(other.rows)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dataset", "protocol", "predictor", "step",
                             "rmse", "mae", "n_windows"])
            for r in self.rows:
                writer.writerow([r.dataset, r.protocol, r.predictor, r.step,
                                 f"{r.rmse:.10g}", f"{r.mae:.10g}", r.n_windows])

    def to_jsonl(self, path):
        """Line-delimited structured log: one JSON object per row."""
        import json
        from dataclasses import asdict
        with open(path, "w") as fh:
            for r in self.rows:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def metric_rows(dataset, protocol, predictor, pred, target):
    """Aggregate plus per-forecast-step rows, in original units."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape or pred.ndim != 4:
        raise SizingError(
            f"expected matching (n, k, H, W) arrays, got {pred.shape} vs {target.shape}")
    n, k = pred.shape[:2]
    rows = [EvalRow(dataset, protocol, predictor, "all",
                    rmse(pred, target), mae(pred, target), n)]
    for j in range(k):
        rows.append(EvalRow(dataset, protocol, predictor, j,
                            rmse(pred[:, j], target[:, j]),
                            mae(pred[:, j], target[:, j]), n))
    return rows


# ---------------------------------------------------------------------------
# model forecasting
# ---------------------------------------------------------------------------

def forecast(model, history, k, period=None, ctx_mask=None, use_prompts=False):
    """Predict k normalized future frames from normalized history.

    history: (B, l_h, H, W).  The future extent is filled with zeros, masked
    temporally, and reconstructed; only the future frames are returned.
    """
    history = np.asarray(history, dtype=np.float64)
    if history.ndim == 3:
        history = history[None]
    B, l_h, H, W = history.shape
    patch_l = model.cfg.patch[0]
    if k % patch_l or l_h % patch_l:
        raise GeometryError(
            f"temporal patch extent {patch_l} must divide l_h={l_h} and k={k}")
    windows = np.concatenate([history, np.zeros((B, k, H, W))], axis=1)
    geom = model.geometry(windows.shape[1:])
    spec = temporal_mask_slices(geom, k // patch_l)
    inputs = None
    if use_prompts:
        inputs = {"history": history, "period": period, "ctx_mask": ctx_mask}
    pred_blocks, _, geom = model.forward_reconstruct(windows, spec, inputs)
    frames = unpatchify(pred_blocks, geom)
    return frames[:, l_h:]


def predict(checkpoint, history, k, period=None, bounds=None):
    """Forecast in original units from a checkpoint and raw history.

    history: (l_h, H, W) or (B, l_h, H, W) raw values.  bounds: (lo, hi)
    normalization bounds; None fits them from the history itself (the
    zero-shot rule).  period: optional raw (B, n_days, l_h, H, W) context.
    Returns raw-scale predictions with the same leading shape as history.
    """
    history = np.asarray(history, dtype=np.float64)
    single = history.ndim == 3
    if single:
        history = history[None]
    if bounds is None:
        lo, hi = float(history.min()), float(history.max())
        if hi <= lo:
            hi = lo + 1.0
    else:
        lo, hi = float(bounds[0]), float(bounds[1])
    model = checkpoint.build_model()
    use_prompts = bool(checkpoint.trained.get("prompts_trained")) and \
        bool(model.prompts.enabled)
    norm = lambda v: 2.0 * (v - lo) / (hi - lo) - 1.0
    period_n, ctx_mask = None, None
    if period is not None:
        period_n = norm(np.asarray(period, dtype=np.float64))
        ctx_mask = np.ones(history.shape[0], dtype=bool)
    pred = forecast(model, norm(history), k, period_n, ctx_mask, use_prompts)
    pred = denormalize(pred, lo, hi)
    return pred[0] if single else pred


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def time_of_day_means(train):
    """Per time-of-day mean frame of a raw training split.

    Steps never observed in training fall back to the global mean frame.
    """
    spd = train.steps_per_day
    values = train.values[:, 0]
    global_mean = values.mean(axis=0)
    means = np.tile(global_mean, (spd, 1, 1))
    tods = (train.start_index + np.arange(values.shape[0])) % spd
    for tod in range(spd):
        sel = values[tods == tod]
        if len(sel):
            means[tod] = sel.mean(axis=0)
    return means


def baseline_ha(means, test, t_indices, l_h, k):
    """Historical average: the train-split mean frame at each future step's
    time of day."""
    spd = test.steps_per_day
    out = np.empty((len(t_indices), k) + means.shape[1:])
    for i, t in enumerate(t_indices):
        for j in range(k):
            out[i, j] = means[test.time_of_day(t + l_h + j)]
    return out


def baseline_persistence(history, k):
    """Repeat the last observed frame across the whole horizon."""
    history = np.asarray(history)
    return np.repeat(history[:, -1:], k, axis=1)


# ---------------------------------------------------------------------------
# protocol driver
# ---------------------------------------------------------------------------

def _eval_windows(raw_test, l_h, k, n_period_days):
    """Non-overlapping evaluation windows over a raw test split."""
    stride = l_h + k
    wins = list(make_windows(raw_test, l_h, k, n_period_days=n_period_days,
                             stride=stride))
    expected = count_windows(raw_test, l_h, k, stride=stride)
    assert len(wins) == expected
    if not wins:
        raise SizingError(
            f"{raw_test.name}: test split too short for any {l_h}+{k} window")
    return wins


def _stack_windows(wins, n_period_days):
    history = np.stack([w.history for w in wins])
    target = np.stack([w.future for w in wins])
    t_indices = [w.t_index for w in wins]
    period, ctx_mask = None, None
    if n_period_days > 0:
        l_h, H, W = history.shape[1:]
        period = np.zeros((len(wins), n_period_days, l_h, H, W))
        ctx_mask = np.zeros(len(wins), dtype=bool)
        for i, w in enumerate(wins):
            if w.period_context is not None:
                period[i] = w.period_context
                ctx_mask[i] = True
    return history, target, t_indices, period, ctx_mask


def evaluate_dataset(checkpoint, bundle, l_h, k, n_period_days=0,
                     protocol="short", zero_shot=False, baselines=True,
                     noise_level=0.0, noise_seed=0, model=None):
    """Score a checkpoint (and optionally the baselines) on one test split.

    zero_shot=True ignores the bundle's training bounds and normalizes with
    the min/max of the evaluated history windows themselves.  noise_level
    perturbs only the raw model inputs (history and period context), never
    the targets.
    """
    wins = _eval_windows(bundle.raw_test, l_h, k, n_period_days)
    history, target, t_indices, period, ctx_mask = _stack_windows(wins, n_period_days)
    if noise_level > 0.0:
        history = add_noise(history, noise_level, seed=noise_seed)
        if period is not None:
            period = add_noise(period, noise_level, seed=noise_seed + 1)
    if zero_shot:
        lo, hi = float(history.min()), float(history.max())
        if hi <= lo:
            hi = lo + 1.0
    else:
        lo, hi = bundle.lo, bundle.hi

    if model is None:
        model = checkpoint.build_model()
    use_prompts = bool(checkpoint.trained.get("prompts_trained")) and \
        bool(model.prompts.enabled)
    norm = lambda v: 2.0 * (v - lo) / (hi - lo) - 1.0
    pred_n = forecast(model, norm(history), k,
                      None if period is None else norm(period),
                      ctx_mask, use_prompts)
    pred = denormalize(pred_n, lo, hi)
    rows = metric_rows(bundle.name, protocol, "model", pred, target)
    if baselines:
        means = time_of_day_means(bundle.raw_train)
        ha = baseline_ha(means, bundle.raw_test, t_indices, l_h, k)
        rows += metric_rows(bundle.name, protocol, "ha", ha, target)
        pers = baseline_persistence(history, k)
        rows += metric_rows(bundle.name, protocol, "persistence", pers, target)
    return EvalReport(rows)


def run_protocol(checkpoint, bundles, l_h, k, n_period_days=0,
                 protocol="short", zero_shot=False, baselines=True):
    """Evaluate every bundle, sharing one rebuilt model."""
    model = checkpoint.build_model()
    report = EvalReport([])
    for b in bundles:
        report.extend(evaluate_dataset(
            checkpoint, b, l_h, k, n_period_days, protocol=protocol,
            zero_shot=zero_shot, baselines=baselines, model=model))
    return report


def run_noise_suite(checkpoint, bundle, l_h, k, n_period_days=0,
                    levels=(0.001, 0.01, 0.1), seed=0):
    """Model RMSE/MAE as input noise grows; targets stay clean.

    Returns {level: EvalRow} including the clean reference at level 0.
    """
    model = checkpoint.build_model()
    out = {}
    for i, level in enumerate((0.0,) + tuple(levels)):
        report = evaluate_dataset(
            checkpoint, bundle, l_h, k, n_period_days, protocol="short",
            baselines=False, noise_level=level, noise_seed=seed + 1000 * i,
            model=model)
        out[level] = report.one(predictor="model", step="all")
    return out
