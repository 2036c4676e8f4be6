"""A small hybrid model trained on the synthetic corpus, with a warmup-stable-decay schedule."""
import sys
import tempfile

from hybridssm.blocks import HybridConfig
from hybridssm.data import build_synthetic_corpus, load_corpus
from hybridssm.dynamics import ScheduleSpec
from hybridssm.train import TrainConfig, Trainer

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
with tempfile.TemporaryDirectory() as d:
    build_synthetic_corpus(d, 200_000, seed=0)
    tokens_per_step = 8 * 64
    sched = ScheduleSpec(eta0=2e-3, lam0=0.1, warmup_tokens=20 * tokens_per_step, batch=8,
                         stable_tokens=0.8 * steps * tokens_per_step, decay_tokens=0.2 * steps * tokens_per_step)
    cfg = TrainConfig(model=HybridConfig(d_model=64, n_layers=2, precision="training"), schedule=sched,
                      seq_len=64, steps=steps, log_every=max(1, steps // 10))
    tr = Trainer(cfg, load_corpus(d))
    tr.run(log=lambda r: print(f"step {r['step']:5d}  loss {r['loss']:.3f}  eta {r['eta']:.2e}  "
                               f"|W_in| {r['param_rms']['W_in']:.4f}"))
