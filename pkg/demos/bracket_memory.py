"""Train an mLSTM on the bracket language and probe how long it remembers "[[".

After training, the model samples letters after an opening "[[" and after a
control context "Th". The log ratio of P(']') to P('[') stays high only while
the model believes a bracket is open. Takes about five minutes on one core.

    python demos/bracket_memory.py [output_dir]
"""

import sys

from hfseq.analysis import timelag_probe
from hfseq.core import STREAM_SAMPLE, make_rng
from hfseq.run import load_run_config, train

out_dir = sys.argv[1] if len(sys.argv) > 1 else "runs/bracket-demo"
cfg = load_run_config("synthetic-brackets")
outcome = train(cfg, out_dir, stream=sys.stdout)

res = timelag_probe(outcome.params.config, outcome.params, outcome.data.vocab,
                    make_rng(0, STREAM_SAMPLE), steps=100, trials=10)
print()
print("block  after '[['  after 'Th'")
for i, (e, c) in enumerate(zip(res.exp_mean, res.ctrl_mean)):
    print(f"{i:5d}  {e:10.2f}  {c:10.2f}")
