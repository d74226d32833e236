"""
====================================
The tape-based autodiff engine
====================================

Everything in the package trains through a small reverse-mode engine:
tensors, a gradient tape, and a handful of differentiable ops.  This
walkthrough fits a tiny curve with AdamW to show the moving parts.
"""

import numpy as np

import equisphere.autodiff as ad
from equisphere.optim import AdamW, StepLR

rng = np.random.default_rng(0)

"""
Tensors wrap numpy arrays.  Ops executed inside a Tape record their
backward closures; tape.backward(loss) replays them in reverse.
"""

w = ad.parameter(np.array([[0.5], [-0.5]]))
x = ad.tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))

with ad.Tape() as tape:
    y = ad.matmul(x, w)
    loss = ad.mean(ad.mul(y, y))
    tape.backward(loss)

print(f"loss {loss.item():.4f}, dL/dw = {w.grad.ravel()}")

# analytic check: L = mean((X w)^2)  =>  dL/dw = 2 X^T X w / n
manual = 2.0 * x.data.T @ x.data @ w.data / y.data.size
print(f"analytic          {manual.ravel()}")

"""
Outside a tape the same ops run without recording, which is how
inference avoids graph overhead.
"""

before = w.grad.copy()
y2 = ad.matmul(x, w)
print(f"tapeless forward ok, grads left alone: {np.array_equal(w.grad, before)}")

"""
Fit y = sin(2 pi t) with a cubic polynomial using AdamW and the step
learning-rate schedule.  The optimizer applies decoupled weight decay,
so parameters shrink even when gradients vanish.
"""

t = np.linspace(-1.0, 1.0, 64)
target = ad.tensor(np.sin(2.0 * np.pi * t)[:, None])
powers = ad.tensor(np.stack([t ** k for k in range(4)], axis=1))
coef = ad.parameter(rng.normal(0.0, 0.1, size=(4, 1)))

opt = AdamW([coef], lr=0.05, weight_decay=0.0)
sched = StepLR(base_lr=0.05, step_epochs=120, factor=0.5)

for step in range(600):
    opt.lr = sched.lr_at(step)
    opt.zero_grad()
    with ad.Tape() as tape:
        resid = ad.sub(ad.matmul(powers, coef), target)
        loss = ad.mean(ad.mul(resid, resid))
        tape.backward(loss)
    if step % 150 == 0:
        print(f"step {step:3d}  lr {opt.lr:.4f}  loss {loss.item():.5f}")
    opt.step()

best = np.polynomial.polynomial.polyfit(t, np.sin(2.0 * np.pi * t), 3)
print(f"fitted coefficients  {np.round(coef.data.ravel(), 3)}")
print(f"least-squares answer {np.round(best, 3)}")
