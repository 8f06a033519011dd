"""Train a softmax and a softmax1 model side by side, then quantise both.

Uses a short schedule so it finishes in about a minute; the acceptance test
runs the full 2000-step version over five seeds.
"""
import sys

from outlierfree.attention import ModelConfig
from outlierfree.data import CorpusSpec, bpe_train, encode, encode_sample, gen_corpus
from outlierfree.outlier_metrics import collect_report
from outlierfree.quantizer import QuantSpec, calibrate, logit_deviation, quantize_model
from outlierfree.training import TrainConfig, pretrain

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
corpus = gen_corpus(CorpusSpec())
vocab = bpe_train(corpus, 64)
ids = [encode(s, vocab) for s in corpus]
held = gen_corpus(CorpusSpec(num_sequences=32, seed=1))
calib, sample = encode_sample(held[:16], vocab, 64), encode_sample(held[16:], vocab, 64)

print(f"{'variant':9} {'loss':>6} {'avg kurt':>9} {'max |x|':>8} " + " ".join(f"{b:>7}" for b in ("W8A8", "W6A6", "W4A4")))
for variant in ("softmax", "softmax1"):
    run = pretrain(TrainConfig(steps=steps, seed=0), ids, ModelConfig(variant=variant), vocab)
    ck = run.checkpoint
    rep = collect_report(ck, sample)
    stats = calibrate(ck, calib)
    devs = [logit_deviation(ck, quantize_model(ck, QuantSpec(b, b), stats), sample) for b in (8, 6, 4)]
    loss = sum(run.losses[-50:]) / 50
    print(f"{variant:9} {loss:6.3f} {rep.avg_kurtosis:9.2f} {rep.max_inf_norm:8.2f} "
          + " ".join(f"{d:7.4f}" for d in devs))
