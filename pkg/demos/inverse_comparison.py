"""Compare the four linear inverses on one simulated test set.

Run with ``python3 demos/inverse_comparison.py``.
"""

from esbn.inverse import PriorModel, apply_inverse, build_operators
from esbn.metrics import EvalReport, evaluate_method
from esbn.simulator import GaussianSourceConfig, estimate_noise_covariance, synthesize_batch
from esbn.source_space import build_grid_source_space, build_head_model, hemisphere_sensors

space, lf = build_head_model(build_grid_source_space(70.0, 10.0), hemisphere_sensors(64))
test = synthesize_batch(GaussianSourceConfig(snr_channel_db=5.0, seed=3), space, lf, 300)

# noise covariance from the injected measurement noise, lightly shrunk
c = estimate_noise_covariance(test.channel_noise, shrinkage=0.1)
prior = PriorModel.depth_weighted(lf, c)
ops = build_operators(lf, prior)

report = EvalReport()
for name, op in ops.items():
    report.add(evaluate_method(lambda phi, op=op: apply_inverse(op, phi), test, space, name))
print(report.to_csv())
