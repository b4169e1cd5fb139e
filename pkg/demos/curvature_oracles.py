"""Check gradients and Gauss-Newton products against dense numerical oracles.

For a tiny mLSTM the full Jacobians fit in memory, so the matrix-free
products can be compared with explicit matrices built by central differences.

    python demos/curvature_oracles.py
"""

import numpy as np

from hfseq.core import InitScheme, ModelConfig, init_params, make_rng
from hfseq.models import Batch, gradient, gv_product, make_context, structural_gsv
from hfseq.verify import compare, dense_gauss_newton, fd_gradient, fd_jacobians

config = ModelConfig("mlstm", 5, (4,), (4,))
params = init_params(config, InitScheme.dense(0.3), make_rng(0, 0))
rng = make_rng(0, 9)
batch = Batch(rng.integers(5, size=(7, 2)), rng.integers(5, size=(7, 2)))
print(f"{params.size} parameters")

g, loss = gradient(config, params, batch)
print(compare("gradient", g, fd_gradient(config, params, batch), 1e-4))

J, Jh = fd_jacobians(config, params, batch)
G = dense_gauss_newton(config, params, batch, jacobians=(J, Jh))
Gs = dense_gauss_newton(config, params, batch, mu=1.0, jacobians=(np.zeros_like(J), Jh))
ctx = make_context(config, params, batch)
v = rng.normal(size=params.size)
print(compare("gauss-newton product", gv_product(ctx, v), G @ v, 1e-4))
print(compare("structural damping product", structural_gsv(ctx, v), Gs @ v, 1e-4))

eig = np.linalg.eigvalsh(G)
print(f"curvature spectrum: min {eig.min():.2e}, max {eig.max():.2e}")
