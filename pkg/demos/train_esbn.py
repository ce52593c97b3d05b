"""Train a small ESBN and compare it with MNE.

Uses the smoke profile (500 training frames, 2 epochs) so it finishes in
seconds; pass a larger ``epochs`` in the config for a real run.
Run with ``python3 demos/train_esbn.py [output_dir]``.
"""

import sys

from esbn import harness
from esbn.config import smoke_config

out = sys.argv[1] if len(sys.argv) > 1 else "esbn_demo"
cfg = smoke_config(out)
harness.cmd_simulate(cfg)
train = harness.cmd_train(cfg)
print("supervised loss per epoch", [round(v, 3) for v in train["loss_trace"]])
print("held-out residual before/after fine-tuning",
      round(train["heldout_residual_before"], 3), round(train["heldout_residual_after"], 3))
rows = harness.cmd_eval(cfg)["report"].rows
for name, row in rows.items():
    print(f"{name:18s} LE {row['LE']:6.1f} mm  SD {row['SD']:6.1f} mm  AUC {row['AUC']:.3f}")
