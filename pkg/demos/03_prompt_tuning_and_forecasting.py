"""
Two-stage training and forecasting against heuristic baselines
===============================================================

Stage 1 pre-trains the backbone with all four masking strategies and no
prompts.  Stage 2 switches to temporal masking only — reconstructing the
future from the past, which IS forecasting — and turns on the knowledge
prompts: four small networks summarize the current window (spatial
closeness/hierarchy, temporal closeness/period), query two memory pools,
and prepend the retrieved prompt vectors to the token sequence.

The forecast quality bar: a model must beat the two classic heuristics,
History Average (per time-of-day train mean) and persistence (repeat the
last frame), before it has earned its parameters.
"""

import numpy as np

from gridcast.data import gen_synthetic, prepare_dataset
from gridcast.evaluation import run_protocol
from gridcast.model import ModelConfig
from gridcast.training import TrainConfig, pretrain, prompt_tune

# ---------------------------------------------------------------------------
# dataset: a diurnal series whose day-to-day amplitude drifts
# ---------------------------------------------------------------------------
# The daily profile repeats, but each day is scaled by a random multiplier.
# History Average cannot see the current multiplier; a model that reads the
# recent frames can.

series = gen_synthetic("diurnal", (600, 1, 16, 16), seed=11, steps_per_day=24,
                       name="diurnal-drift", drift=0.4)
bundle = prepare_dataset(series, l_h=6, k=6)[0]

model_cfg = ModelConfig(d_model=32, n_heads=4, enc_depth=2, dec_depth=2,
                        mlp_ratio=2.0, patch=(2, 4, 4), d_feat=6, d_key=12,
                        pool_size=16)

def cfg(max_steps, **kw):
    return TrainConfig(seed=0, l_h=6, k=6, n_period_days=1, batch_size=8,
                       max_steps=max_steps, lr_pretrain=3e-3, lr_finetune=5e-4,
                       val_every_epochs=4, **kw)

# ---------------------------------------------------------------------------
# stage 1: masked pre-training (no prompts, all strategies)
# ---------------------------------------------------------------------------

r1 = pretrain([bundle], model_cfg, cfg(1200))
print(f"stage 1: loss {r1.losses[0]:.4f} -> {np.mean(r1.losses[-50:]):.4f}, "
      f"best val {r1.best_val:.4f}")

# ---------------------------------------------------------------------------
# stage 2: prompt tuning (temporal masking, prompts on)
# ---------------------------------------------------------------------------
# The parameter-norm penalty defaults to the full-scale recipe; at this
# demo's 10x learning rate it would erode the not-yet-used pool keys, so
# desk-scale runs switch it off.

r2 = prompt_tune(bundle, r1.checkpoint, cfg(500, weight_decay=0.0))
print(f"stage 2: loss {r2.losses[0]:.4f} -> {np.mean(r2.losses[-50:]):.4f}, "
      f"best val {r2.best_val:.4f}")

# ---------------------------------------------------------------------------
# short-term forecasts (6 -> 6) on the test split, denormalized units
# ---------------------------------------------------------------------------

rep = run_protocol(r2.checkpoint, [bundle], 6, 6, n_period_days=1)
print(f"\n{'predictor':12s} {'RMSE':>8s} {'MAE':>8s}")
for predictor in ("model", "ha", "persistence"):
    row = rep.one(dataset=bundle.name, predictor=predictor, step="all")
    print(f"{predictor:12s} {row.rmse:8.4f} {row.mae:8.4f}")

# per-step error growth over the horizon (step j = j+1 frames ahead)
print(f"\n{'ahead':>5s} {'model':>8s} {'ha':>8s} {'persistence':>12s}")
for step in range(6):
    cells = [rep.one(dataset=bundle.name, predictor=p, step=step).rmse
             for p in ("model", "ha", "persistence")]
    print(f"  t+{step + 1} {cells[0]:8.4f} {cells[1]:8.4f} {cells[2]:12.4f}")

print("""
History Average is strong one step out but cannot see this week's amplitude,
so its error grows with the horizon; persistence dies as soon as the profile
moves.  The tuned model reads the current level from the history window and
stays flat across the horizon.""")
