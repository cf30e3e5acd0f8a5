# %% [markdown]
# # Reverse-mode gradients on numpy
#
# Every operation inside a `Tape` block records how to push gradients back to
# its inputs. Here we differentiate a small GRU-like expression and compare it
# with central finite differences.

# %%
import numpy as np

from ismrnn import tensor as T
from ismrnn.tensor import Tape, Tensor

rng = np.random.default_rng(0)
w = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
x = rng.standard_normal((5, 4))


def loss():
    h = T.tanh(T.affine(x, w))
    return T.mean(T.sigmoid(h) * h)


with Tape():
    T.backward(loss())
print("analytic:\n", w.grad)

# %% The oracle perturbs one entry at a time.
numeric, mask = T.finite_difference_gradient(lambda: loss().item(), [w.data])
print("max relative error:", T.relative_error(w.grad, numeric[0])[mask[0]].max())
