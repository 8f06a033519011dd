"""Continual surgery: take a trained softmax model, switch its attention to
softmax1 and train a little longer instead of starting over."""
from outlierfree.attention import ModelConfig
from outlierfree.data import CorpusSpec, bpe_train, encode, encode_sample, gen_corpus
from outlierfree.outlier_metrics import collect_report
from outlierfree.training import TrainConfig, continue_training, eval_batches, eval_loss, pretrain, surgery

corpus = gen_corpus(CorpusSpec())
vocab = bpe_train(corpus, 64)
ids = [encode(s, vocab) for s in corpus]
sample = encode_sample(gen_corpus(CorpusSpec(num_sequences=16, seed=1)), vocab, 64)
cfg = TrainConfig(steps=500, seed=0)

base = pretrain(cfg, ids, ModelConfig(variant="softmax"), vocab).checkpoint
batches = eval_batches(ids, vocab, cfg, 64)
swapped = surgery(base)
resumed = continue_training(swapped, ids, vocab, cfg, steps=base.step // 5).checkpoint

for name, ck in (("pretrained", base), ("after surgery", swapped), ("resumed", resumed)):
    rep = collect_report(ck, sample)
    print(f"{name:14} step {ck.step:4d}  loss {eval_loss(ck, batches):.3f}  "
          f"avg kurt {rep.avg_kurtosis:6.2f}  max |x| {rep.max_inf_norm:6.2f}")
