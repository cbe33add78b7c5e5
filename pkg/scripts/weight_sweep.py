"""Sweep Eq-3 weight triples to find a schedule producing spread RD points."""

import os
import sys
import time

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np

from icm import codec, corpus as corpus_mod, probmodel, tasks, training

SIZE = 48
t0 = time.time()
train_set = corpus_mod.generate_corpus(seed=100, count=128, size=SIZE)
held_set = corpus_mod.generate_corpus(seed=200, count=16, size=SIZE)
tm = tasks.train_task_model(train_set, tasks.TaskConfig(seed=0), epochs=20, seed=0)
print(f"[{time.time()-t0:5.1f}s] setup done", flush=True)

ccfg = codec.CodecConfig(seed=0)
pcfg = probmodel.ProbConfig(latent_channels=ccfg.latent_channels, seed=0)

for w_rate in [0.0, 0.003, 0.01, 0.03, 0.1, 0.3]:
    tcfg = training.TrainConfig(epochs=10, batch_size=8, seed=0,
                                schedule=((w_rate, 0.1, 1.0),))
    ckpts, logs = training.train(tcfg, train_set, held_set, tm, ccfg, pcfg)
    traj = [(round(c.rd.bpp, 3), round(c.rd.metric, 3)) for c in ckpts[1::3]]
    print(f"[{time.time()-t0:5.1f}s] w_rate={w_rate}: "
          f"final mse={logs[-1].mean_mse:.4f} task={logs[-1].mean_task:.3f} "
          f"rd traj={traj}", flush=True)
