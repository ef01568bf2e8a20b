"""Backprop against central differences, and why the step size matters."""

import numpy as np

from fgmask import diffnet
from fgmask.cli import gradcheck_model

model = gradcheck_model(seed=3)
rng = np.random.default_rng(0)
x = rng.random((4,) + model.input_shape)
y = rng.integers(0, model.n_classes, 4)
print("parameters", model.n_params())

for h in (1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-8):
    report = diffnet.grad_check(model, x, y, h=h, tol=1e-3)
    print(f"h={h:.0e} max rel err {report.max_rel_err:.2e} pass={report.passed}")

# large steps straddle ReLU and pooling kinks; tiny steps drown in round-off.
# a tolerance of zero can never pass.
print("tol=0 passes:", diffnet.grad_check(model, x, y, tol=0.0).passed)

# one momentum step by hand: v = m*v + g, p = p - lr*v
single = diffnet.Model([diffnet.Dense(1, 1)], (1,), [(np.array([[1.0]]), np.array([0.0]))])
g = diffnet.Gradients([(np.array([[0.5]]), np.array([0.0]))])
stepped, _ = diffnet.sgd_step(single, g, lr=0.1)
print("p after one step", stepped.params[0][0].item())
