"""Exploratory run of the acceptance-5 pipeline; prints the decision numbers."""

import os
import sys
import time

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np

from icm import codec, corpus as corpus_mod, finetune, probmodel, rdeval, tasks, training

SIZE = int(os.environ.get("PROBE_SIZE", "48"))
EPOCHS = int(os.environ.get("PROBE_EPOCHS", "24"))
SEED = int(os.environ.get("PROBE_SEED", "0"))

t0 = time.time()
train_set = corpus_mod.generate_corpus(seed=100 + SEED, count=512, size=SIZE)
held_set = corpus_mod.generate_corpus(seed=200 + SEED, count=64, size=SIZE)
print(f"[{time.time()-t0:6.1f}s] corpora ready", flush=True)

tm = tasks.train_task_model(train_set, tasks.TaskConfig(seed=SEED), epochs=30, seed=SEED)
clean = np.mean([tasks.task_metric(__import__('icm.autograd', fromlist=['Tensor']).Tensor(img), lab, tm)
                 for img, lab in zip(held_set.images[:16], held_set.labels[:16])])
print(f"[{time.time()-t0:6.1f}s] task model trained; clean-image heldout mIoU ~ {clean:.3f}", flush=True)

ccfg = codec.CodecConfig(seed=SEED)
pcfg = probmodel.ProbConfig(latent_channels=ccfg.latent_channels, seed=SEED)
tcfg = training.TrainConfig(epochs=EPOCHS, batch_size=8, seed=SEED)


def progress(epoch, log, rd):
    print(f"[{time.time()-t0:6.1f}s] epoch {epoch:2d} w={log.weights} "
          f"rate={log.mean_rate_bpp:.4f} task={log.mean_task:.4f} mse={log.mean_mse:.5f} "
          f"| held bpp={rd.bpp:.4f} miou={rd.metric:.4f}", flush=True)


ckpts, logs = training.train(tcfg, train_set, held_set, tm, ccfg, pcfg, progress=progress)
print(f"[{time.time()-t0:6.1f}s] training done", flush=True)

baseline_points = [c.rd for c in ckpts]
front = rdeval.pareto_front(baseline_points)
print("pareto front:", [(p.label, round(p.bpp, 4), round(p.metric, 4)) for p in front.points], flush=True)

fe = tasks.init_extractor(tasks.ExtractorConfig(seed=SEED))
by_label = {c.rd.label: c for c in ckpts}
ft_cfg = finetune.FinetuneConfig()  # paper settings

decreased = 0
pairs = 0
ft_points = []
for p in front.points:
    ck = by_label[p.label]
    results = finetune.finetune_batch(held_set.images, ck.codec_weights, ck.prob_weights,
                                      fe, ft_cfg, workers=2)
    bpps, mets = [], []
    for (ydata, report), labels in zip(results, held_set.labels):
        pairs += 1
        if report.final_total < report.initial_total:
            decreased += 1
        from icm.autograd import Tensor

        ql = codec.quantize(Tensor(ydata), ccfg.quant_step)
        pyr = probmodel.build_pyramid(ql, pcfg.num_levels)
        est = probmodel.rate_loss(pyr, ck.prob_weights, num_pixels=SIZE * SIZE)
        xhat = codec.decode(ql, ck.codec_weights)
        bpps.append(est.bpp)
        mets.append(tasks.task_metric(xhat, labels, tm))
    before = p
    after_bpp, after_met = float(np.mean(bpps)), float(np.mean(mets))
    ft_points.append(rdeval.RDPoint(after_bpp, after_met, label=p.label + "_ft"))
    print(f"[{time.time()-t0:6.1f}s] {p.label}: bpp {before.bpp:.4f}->{after_bpp:.4f} "
          f"({(after_bpp/before.bpp-1)*100:+.2f}%) miou {before.metric:.4f}->{after_met:.4f}", flush=True)

print(f"L_total decreased on {decreased}/{pairs} pairs = {decreased/pairs*100:.1f}%", flush=True)

ft_front = rdeval.pareto_front(ft_points)
try:
    total_bd = rdeval.bd_rate(front, ft_front)
    print("full-range BD-rate (ft vs baseline):", round(total_bd, 3), flush=True)
    bpps = [p.bpp for p in front.points]
    edges = [float(np.quantile(bpps, 1 / 3)), float(np.quantile(bpps, 2 / 3))]
    rep = rdeval.bucket_report(front, ft_front, edges=edges)
    print("edges:", edges, "bucket BDs:", rep.bd_rates, "total:", rep.total, flush=True)
except rdeval.EvalError as e:
    print("BD failed:", e, flush=True)
print(f"[{time.time()-t0:6.1f}s] done", flush=True)
