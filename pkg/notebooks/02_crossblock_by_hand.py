# %% [markdown]
# # What a CrossBlock computes
#
# A CrossBlock takes a query feature map `u` and a stack of support feature
# maps `V`. Every support item is concatenated with the query and passed
# through the same convolution; the results are averaged over the support
# set to update the query, and kept per item to update the support stream.
# Averaging is what makes the block indifferent to the order of the prompts
# and to how often each prompt is repeated.

# %%
import numpy as np

from contextseis.autodiff import Tensor
from contextseis.model import ContextSeisNet, CrossBlock, ModelSpec, SupportSet

rng = np.random.default_rng(0)
block = CrossBlock(cu=1, cv=2, cout=4, spec=ModelSpec(channels=(4,)), rng=rng)
u = rng.standard_normal((1, 1, 8, 8))
V = rng.standard_normal((3, 1, 2, 8, 8))  # S=3 support items, each (prompt, label)

u1, V1 = block(Tensor(u), Tensor(V))
u2, V2 = block(Tensor(u), Tensor(V[[2, 0, 1]]))
print("query update unchanged by reordering:", np.abs(u1.data - u2.data).max())
print("support update follows the reordering:", np.abs(V1.data[[2, 0, 1]] - V2.data).max())

# %% [markdown]
# The same holds for a whole network: prompts are a set, not a sequence.

# %%
net = ContextSeisNet(ModelSpec.preset("tiny"), seed=1)
X = rng.standard_normal((1, 1, 32, 16))
P, L = rng.standard_normal((2, 3, 32, 16))
a = net.predict(X, SupportSet(P, L))
b = net.predict(X, SupportSet(P[::-1], L[::-1]))
c = net.predict(X, SupportSet(np.concatenate([P, P]), np.concatenate([L, L])))
print("reversed prompts:", np.abs(a - b).max(), " duplicated prompts:", np.abs(a - c).max())
print("parameters:", net.num_parameters())
