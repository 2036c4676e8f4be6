"""Channel allocation and the three block arrangements."""
import numpy as np

from hybridssm.blocks import (ARRANGEMENTS, AttnConfig, HybridConfig, SsmConfig, allocate_channels,
                              init_model, model_forward, norm_names)

ssm, attn = SsmConfig(d_head=64), AttnConfig(d_head=64)
for alloc in [(2, 1, 5), (1, 1, 6), (3, 2, 3)]:
    cfg = HybridConfig(d_model=1280, alloc=alloc, bases=(4096, 6144, 4864), ssm=ssm, attn=attn)
    print("eighths", alloc, "-> (d_ssm, d_attn, d_mlp) =", allocate_channels(cfg))

rng = np.random.default_rng(0)
tokens = rng.integers(0, 257, 24)
resets = np.zeros(24, bool)
resets[[0, 10]] = True
for arr in ARRANGEMENTS:
    cfg = HybridConfig(d_model=64, n_layers=2, arrangement=arr, alloc=(2, 2, 4))
    model, mults = init_model(cfg)
    rec = []
    logits = model_forward(model, tokens, mults.forward, resets=resets, record=rec)
    rms = [float(np.sqrt(np.mean(a ** 2))) for a in rec]
    print(f"{arr:6s} norms {norm_names(arr)}  params {model.num_params():,}  "
          f"residual rms per block {np.round(rms, 3).tolist()}  logits {logits.shape}")
