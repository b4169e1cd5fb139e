"""Train a small RNN on a repeating string with Hessian-free steps.

Shows the optimizer loop directly, without the run harness: one fixed
gradient batch, a quarter of it for curvature products, and the per-step
record of damping, CG iterations and the reason CG stopped.

    python demos/periodic_hf.py
"""

import numpy as np

from hfseq.analysis import sample
from hfseq.core import InitScheme, ModelConfig, init_params, make_rng
from hfseq.data import SyntheticTask, gen_synthetic
from hfseq.models import forward
from hfseq.optimizer import DampingState, TrainState, hf_train_step

task = SyntheticTask("periodic_text", 40, period="abcdefgh", random_phase=True)
vocab = task.vocabulary()
config = ModelConfig("rnn", vocab.size, (16,))
batch = gen_synthetic(task, 32, make_rng(0, 4))
curvature = batch.subset(np.arange(8))

state = TrainState(init_params(config, InitScheme.dense(0.1), make_rng(0, 0)), DampingState(0.01))
print("iter  bits/char    mu        cg  stop")
for i in range(30):
    state = hf_train_step(state, batch, curvature)
    row = state.history[-1]
    _, _, bpc = forward(config, state.params, batch)
    print(f"{i + 1:4d}  {bpc:9.5f}  {row['mu']:.2e}  {row['cg_iters']:3d}  {row['stop_reason']}")
    if bpc < 0.01:
        break

run = sample(config, state.params, vocab, "cde", 40, make_rng(0, 3))
print("continuation of 'cde':", run.text)
