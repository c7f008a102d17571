"""Scratch experiment harness (not part of the package)."""
import sys, time
import numpy as np
from edje.config import parse_config
from edje.pipeline import Dataset, run_training, run_precompute, run_evaluation
from pathlib import Path
import shutil

BASE = """
seed = 42
paths.data_dir = data/probe
paths.run_dir = runs/probe
model.layers = 2
model.hidden = 48
model.heads = 4
model.text_max_len = 16
model.embedding_dim = 16
model.adapter_variant = {variant}
model.adapter_tokens = 8
model.vision_dim = 32
model.adapter_hidden = 64
model.adapter_heads = 4
synth.images_train = 32
synth.images_heldout = 200
synth.raw_tokens = 24
synth.vision_dim = 32
synth.embedding_dim = 16
synth.factors = 3
synth.values_per_factor = 8
synth.token_noise = 0.1
synth.embedding_noise = 0.45
training.steps = {steps}
training.batch_size = 8
training.base_lr = {lr}
training.warmup_steps = 40
training.mask_prob = 0.5
training.weight_mlm = {wmlm}
training.weight_recovery = {wrec}
mining.negatives = 2
mining.mode = softmax
eval.pool_size = 10
"""

def run(tag, variant="compressed", steps=300, lr=0.003, wmlm=1.0, wrec=1.0, qstd=None, fresh_data=False):
    from edje import adapter as adapter_mod
    from edje import autograd as ag
    cfg = parse_config(BASE.format(variant=variant, steps=steps, lr=lr, wmlm=wmlm, wrec=wrec))
    if fresh_data or not Path("data/probe").exists():
        shutil.rmtree("data/probe", ignore_errors=True)
        from edje.synth import generate
        generate("data/probe", cfg.synth, cfg.seed)
    shutil.rmtree("runs/probe", ignore_errors=True)
    if qstd is not None:
        orig = adapter_mod.CompressionAdapterParams.init.__func__
        def patched(cls, rng, tokens, d_vision, d_language, hidden=8192, heads=8,
                    output_projection=True, biases=True):
            p = orig(cls, rng, tokens, d_vision, d_language, hidden=hidden, heads=heads,
                     output_projection=output_projection, biases=biases)
            p.queries = ag.Tensor(rng.normal(0.0, qstd, size=p.queries.data.shape))
            return p
        adapter_mod.CompressionAdapterParams.init = classmethod(patched)
    t0 = time.time()
    run_training(cfg)
    if qstd is not None:
        adapter_mod.CompressionAdapterParams.init = classmethod(orig)
    run_precompute(cfg)
    held = run_evaluation(cfg, split="heldout")
    trn = run_evaluation(cfg, split="train")
    dt = time.time() - t0
    def fmt(res):
        return " ".join(
            f"{d}:{res.baseline[d].recall[1]:.2f}->{res.reranked[d].recall[1]:.2f}"
            for d in ("t2i", "i2t")
        )
    print(f"[{tag}] {dt:5.0f}s  train({fmt(trn)})  held({fmt(held)})", flush=True)

if __name__ == "__main__":
    for spec in sys.argv[1:]:
        eval(f"run({spec})")
