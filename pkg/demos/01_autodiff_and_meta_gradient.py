"""Second-order meta-gradients on a toy problem, checked against a closed form.

Each task is the scalar loss c * theta**2. Five inner steps of gradient
descent with rate alpha shrink theta by (1 - 2 alpha c) per step, so the
query loss after adaptation is c * (1 - 2 alpha c)**10 * theta**2 and its
derivative in theta has a closed form. The tape differentiates through the
inner updates and should land on the same number.
"""

import numpy as np

from pagnn.meta import MetaConfig, meta_gradient


class Quadratic:
    def __init__(self, c):
        self.c = c

    def support_loss(self, params):
        return self.c * params["theta"] * params["theta"]

    query_loss = support_loss


theta, alpha, steps = 0.7, 0.05, 5
tasks = [Quadratic(1.0), Quadratic(3.0)]

for second_order in (True, False):
    cfg = MetaConfig(inner_lr=alpha, outer_lr=0.1, inner_steps=steps, second_order=second_order)
    grads, _ = meta_gradient({"theta": np.array(theta)}, tasks, cfg)
    print(f"second_order={second_order}: meta-gradient {float(grads['theta']):.10f}")

exact = sum(2 * t.c * (1 - 2 * alpha * t.c) ** (2 * steps) * theta for t in tasks)
print(f"closed form:             {exact:.10f}")
# the first-order variant drops the (1 - 2 alpha c)**steps Jacobian factor,
# so it matches only sum(2 c (1 - 2 alpha c)**steps theta)
