"""Two-stage training: masked-reconstruction pre-training, then prompt tuning.

Stage 1 samples a dataset (probability proportional to its window count), a
batch of windows, and one of the four masking strategies per step, and
minimises plain MSE on the masked voxels.  Stage 2 tunes with temporal
masking over the future extent, prompts enabled, and an L2-norm penalty on
all parameters.  Both stages validate on a fixed window subset every
``val_every_epochs`` epochs and return the best-validation parameters.

Checkpoints are a deterministic binary container (magic, JSON header, raw
float64 payloads in sorted key order), so save -> load -> save is
byte-identical.
"""

import csv
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import make_windows
from .errors import CheckpointError, GeometryError, SizingError, TrainingError
from .masking import make_mask, sample_strategy, temporal_mask_slices
from .model import Forecaster, ModelConfig

_CKPT_MAGIC = b"GCSTATE\x01"
CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    seed: int = 0
    l_h: int = 6
    k: int = 6
    n_period_days: int = 1
    batch_size: int = 8
    max_steps: int = 1000
    lr_pretrain: float = 3e-4
    lr_finetune: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5       # lambda on the parameter-norm penalty
    squared_l2: bool = False
    mask_ratio: float = 0.5
    strategy_weights: dict = field(default_factory=lambda: {
        "random": 1.0, "tube": 1.0, "block": 1.0, "temporal": 1.0})
    extended_block_mask: bool = False
    val_every_epochs: int = 10
    val_max_windows: int = 32
    freeze_backbone: bool = False

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Adam:
    """Adam with bias correction over a named parameter dict."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(sorted(params.items()))
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for n, p in self.params.items():
            g = p.grad
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * g * g
            mhat = self.m[n] / c1
            vhat = self.v[n] / c2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(pred, target):
    """Mean squared error over all elements plus its gradient w.r.t. pred."""
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def l2_penalty(params, lam, squared=False):
    """lam * sum of per-tensor L2 norms (or squared norms)."""
    if lam == 0.0:
        return 0.0
    total = 0.0
    for p in params.values():
        nrm = float(np.linalg.norm(p.data))
        total += nrm * nrm if squared else nrm
    return lam * total


def add_l2_grads(params, lam, squared=False):
    """Accumulate the penalty gradient into each parameter's grad buffer."""
    if lam == 0.0:
        return
    for p in params.values():
        if squared:
            p.grad += 2.0 * lam * p.data
        else:
            nrm = float(np.linalg.norm(p.data))
            if nrm > 1e-12:
                p.grad += lam * p.data / nrm


def loss_mse_l2(pred, target, params, lam, squared=False):
    """Reconstruction MSE plus the parameter-norm penalty, as one scalar."""
    loss, _ = mse_loss(np.asarray(pred), np.asarray(target))
    return loss + l2_penalty(params, lam, squared)


# ---------------------------------------------------------------------------
# run bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    step: int
    dataset: str
    strategy: str
    loss: float
    val_loss: object = None   # float when a validation pass ran at this step


@dataclass
class TrainResult:
    checkpoint: "Checkpoint"
    records: list
    best_val: float

    @property
    def losses(self):
        return [r.loss for r in self.records]


def write_log(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "dataset", "strategy", "loss", "val_loss"])
        for r in records:
            writer.writerow([r.step, r.dataset, r.strategy, f"{r.loss:.10g}",
                             "" if r.val_loss is None else f"{r.val_loss:.10g}"])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Everything needed to rebuild a trained model and use it on data."""

    model_config: ModelConfig
    params: dict                 # name -> float64 ndarray
    norm_bounds: dict            # dataset name -> (lo, hi)
    steps_per_day: dict          # dataset name -> int
    trained: dict                # l_h, k, n_period_days, prompts_trained, best_val

    def build_model(self):
        model = Forecaster(self.model_config, np.random.default_rng(0))
        mp = model.named_parameters()
        if set(mp) != set(self.params):
            missing = sorted(set(mp) ^ set(self.params))
            raise CheckpointError(f"parameter names do not match model config: {missing[:4]}")
        for name, p in mp.items():
            stored = self.params[name]
            if p.data.shape != stored.shape:
                raise CheckpointError(
                    f"geometry mismatch for {name}: checkpoint {stored.shape}, "
                    f"model {p.data.shape}")
            p.data[...] = stored
        return model


def snapshot_checkpoint(model, norm_bounds, steps_per_day, trained):
    params = {n: p.data.copy() for n, p in model.named_parameters().items()}
    return Checkpoint(model.cfg, params, dict(norm_bounds), dict(steps_per_day),
                      dict(trained))


def save_checkpoint(ckpt, path):
    names = sorted(ckpt.params)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "norm_bounds": {k: [float(v[0]), float(v[1])] for k, v in ckpt.norm_bounds.items()},
        "steps_per_day": {k: int(v) for k, v in ckpt.steps_per_day.items()},
        "trained": ckpt.trained,
        "params": {n: list(ckpt.params[n].shape) for n in names},
        "dtype": "<f8",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(ckpt.params[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header is not valid JSON ({exc})") from exc
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format_version {header.get('format_version')!r}")
    if header.get("dtype") != "<f8":
        raise CheckpointError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    offset = 12 + hlen
    params = {}
    for name in sorted(header["params"]):
        shape = tuple(int(s) for s in header["params"][name])
        nbytes = int(np.prod(shape)) * 8 if shape else 8
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: payload truncated at parameter {name}")
        params[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    ckpt = Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        params=params,
        norm_bounds={k: (float(v[0]), float(v[1]))
                     for k, v in header["norm_bounds"].items()},
        steps_per_day={k: int(v) for k, v in header["steps_per_day"].items()},
        trained=header["trained"],
    )
    ckpt.build_model()   # validates names and shapes against the config
    return ckpt


# ---------------------------------------------------------------------------
# the shared training loop
# ---------------------------------------------------------------------------

def _window_bank(bundles, cfg, split="train", fraction=1.0, need_period=False):
    """Materialised windows per bundle, plus sampling probabilities."""
    n_days = cfg.n_period_days if need_period else 0
    banks = []
    for b in bundles:
        series = getattr(b, split)
        wins = list(make_windows(series, cfg.l_h, cfg.k, n_period_days=n_days))
        if fraction < 1.0:
            keep = int(np.ceil(fraction * len(wins)))
            wins = wins[:keep]
        if not wins:
            raise SizingError(
                f"{b.name}: {split} split has no {cfg.l_h}+{cfg.k} windows")
        banks.append(wins)
    counts = np.array([len(w) for w in banks], dtype=np.float64)
    return banks, counts / counts.sum()


def _batch_arrays(windows, idxs, n_period_days):
    """Stack chosen windows into model inputs."""
    chosen = [windows[i] for i in idxs]
    full = np.stack([np.concatenate([w.history, w.future]) for w in chosen])
    history = np.stack([w.history for w in chosen])
    period, ctx_mask = None, None
    if n_period_days > 0:
        l_h, H, W = history.shape[1:]
        period = np.zeros((len(chosen), n_period_days, l_h, H, W))
        ctx_mask = np.zeros(len(chosen), dtype=bool)
        for i, w in enumerate(chosen):
            if w.period_context is not None:
                period[i] = w.period_context
                ctx_mask[i] = True
    return full, history, period, ctx_mask


def _future_slices(cfg, patch_l):
    if cfg.k % patch_l or cfg.l_h % patch_l:
        raise GeometryError(
            f"temporal patch extent {patch_l} must divide l_h={cfg.l_h} and k={cfg.k}")
    return cfg.k // patch_l


def _validation_loss(model, bundles, cfg, use_prompts):
    """Masked temporal-reconstruction MSE over a fixed validation subset."""
    total, count = 0.0, 0
    for b in bundles:
        wins = list(make_windows(b.val, cfg.l_h, cfg.k,
                                 n_period_days=cfg.n_period_days if use_prompts else 0))
        if not wins:
            continue
        take = np.unique(np.linspace(0, len(wins) - 1,
                                     min(len(wins), cfg.val_max_windows)).astype(int))
        full, history, period, ctx_mask = _batch_arrays(wins, take,
            cfg.n_period_days if use_prompts else 0)
        geom = model.geometry(full.shape[1:])
        spec = temporal_mask_slices(geom, _future_slices(cfg, model.cfg.patch[0]))
        inputs = {"history": history, "period": period, "ctx_mask": ctx_mask} \
            if use_prompts else None
        pred, batch, _ = model.forward_reconstruct(full, spec, inputs)
        loss, _ = mse_loss(pred[:, batch.masked_indices], batch.targets)
        total += loss * len(take)
        count += len(take)
    return total / max(count, 1)


def _train_loop(model, bundles, cfg, lr, use_prompts, lam, fraction=1.0,
                strategies=None, trained_meta=None):
    banks, probs = _window_bank(bundles, cfg, "train", fraction,
                                need_period=use_prompts)
    rng = np.random.default_rng(cfg.seed)
    params = model.named_parameters()
    if cfg.freeze_backbone and use_prompts:
        params = {n: p for n, p in params.items() if n.startswith("prompts.")}
    opt = Adam(params, lr, cfg.beta1, cfg.beta2, cfg.eps)
    total_windows = sum(len(b) for b in banks)
    epoch_steps = max(1, total_windows // cfg.batch_size)
    val_interval = max(1, epoch_steps * cfg.val_every_epochs)
    future_slices = _future_slices(cfg, model.cfg.patch[0])

    records = []
    best_val, best_params = np.inf, None
    last_finite = None
    for step in range(cfg.max_steps):
        d_idx = int(rng.choice(len(banks), p=probs))
        bank = banks[d_idx]
        idxs = rng.integers(0, len(bank), size=min(cfg.batch_size, len(bank)))
        full, history, period, ctx_mask = _batch_arrays(
            bank, idxs, cfg.n_period_days if use_prompts else 0)
        geom = model.geometry(full.shape[1:])
        if strategies is None:
            strat = "temporal"
            spec = temporal_mask_slices(geom, future_slices)
        else:
            strat = sample_strategy(step, strategies, seed=cfg.seed)
            spec = make_mask(strat, geom, cfg.mask_ratio, seed=[cfg.seed, step],
                             extended_block=cfg.extended_block_mask)
        inputs = {"history": history, "period": period, "ctx_mask": ctx_mask} \
            if use_prompts else None
        pred, batch, _ = model.forward_reconstruct(full, spec, inputs)
        loss, d_masked = mse_loss(pred[:, batch.masked_indices], batch.targets)
        loss_total = loss + l2_penalty(params, lam, cfg.squared_l2)
        if not np.isfinite(loss_total):
            raise TrainingError(
                f"training diverged at step {step} "
                f"(last finite loss: {last_finite})",
                step=step, last_finite_loss=last_finite)
        last_finite = loss_total
        model.zero_grad()
        d_pred = np.zeros_like(pred)
        d_pred[:, batch.masked_indices] = d_masked
        model.backward_reconstruct(d_pred)
        add_l2_grads(params, lam, cfg.squared_l2)
        opt.step()

        val_loss = None
        if (step + 1) % val_interval == 0 or step == cfg.max_steps - 1:
            val_loss = _validation_loss(model, bundles, cfg, use_prompts)
            if val_loss < best_val:
                best_val = val_loss
                best_params = {n: p.data.copy()
                               for n, p in model.named_parameters().items()}
        records.append(RunRecord(step, bundles[d_idx].name, strat, loss_total, val_loss))

    if best_params is not None:
        for n, p in model.named_parameters().items():
            p.data[...] = best_params[n]
    norm_bounds = {b.name: (b.lo, b.hi) for b in bundles}
    spd = {b.name: b.steps_per_day for b in bundles}
    meta = {"l_h": cfg.l_h, "k": cfg.k, "n_period_days": cfg.n_period_days,
            "best_val": best_val if np.isfinite(best_val) else None}
    meta.update(trained_meta or {})
    ckpt = snapshot_checkpoint(model, norm_bounds, spd, meta)
    return TrainResult(checkpoint=ckpt, records=records,
                       best_val=best_val if np.isfinite(best_val) else None)


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def pretrain(bundles, model_cfg, cfg):
    """Stage 1: masked reconstruction over all four strategies, no prompts."""
    model = Forecaster(model_cfg, np.random.default_rng(cfg.seed))
    return _train_loop(model, list(bundles), cfg, cfg.lr_pretrain,
                       use_prompts=False, lam=0.0,
                       strategies=cfg.strategy_weights,
                       trained_meta={"prompts_trained": False})


def prompt_tune(bundles, checkpoint, cfg, fraction=1.0):
    """Stage 2: temporal masking over the future, prompts on, L2 penalty.

    ``bundles`` may be a single DatasetBundle or a list; ``fraction`` keeps
    only the leading share of training windows (few-shot protocol).
    """
    if not 0.0 < fraction <= 1.0:
        raise SizingError(f"fraction must lie in (0, 1], got {fraction}")
    if not isinstance(bundles, (list, tuple)):
        bundles = [bundles]
    model = checkpoint.build_model()
    result = _train_loop(model, list(bundles), cfg, cfg.lr_finetune,
                         use_prompts=True, lam=cfg.weight_decay,
                         fraction=fraction, strategies=None,
                         trained_meta={"prompts_trained": True})
    merged_bounds = dict(checkpoint.norm_bounds)
    merged_bounds.update(result.checkpoint.norm_bounds)
    merged_spd = dict(checkpoint.steps_per_day)
    merged_spd.update(result.checkpoint.steps_per_day)
    result.checkpoint.norm_bounds = merged_bounds
    result.checkpoint.steps_per_day = merged_spd
    return result
