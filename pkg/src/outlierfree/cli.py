"""Command-line entry point: ``outlierfree <command> ...``.

Exit codes: 0 success, 1 domain or I/O error, 2 usage error. Errors go to
stderr prefixed with ``E_USAGE``, ``E_DOMAIN`` or ``E_IO``. Every run writes a
``*.manifest.json`` next to its main output describing how to reproduce it.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attention import ModelConfig, forward_tokens
from .checkpoint import Checkpoint, load, save
from .data import (
    CorpusSpec,
    Vocab,
    bpe_train,
    encode,
    encode_sample,
    gen_corpus,
    gen_task,
    read_corpus,
    read_task,
    write_corpus,
    write_task,
)
from .errors import CheckpointError, ConfigError, OutlierFreeError
from .jsonio import read_json, write_json
from .lora import (
    AdapterSet,
    check_nonsingularity,
    construct_adapters,
    functionality_gap,
    random_formal_pair,
    verify_theorem,
)
from .outlier_metrics import collect_report
from .quantizer import QuantSpec, calibrate, logit_deviation, parse_bits, quantize_model
from .tensor_core import make_rng, numerical_rank
from .training import TrainConfig, continue_training, eval_batches, eval_loss, finetune_classifier, pretrain, surgery

SEED_ENV = "GERM_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- helpers ------------------------------------------------------------------


def _seed(default: int) -> int:
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return int(default)
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from exc


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _need_files(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise FileNotFoundError(f"input file not found: {p}")


def _write_manifest(next_to, command: str, args: argparse.Namespace, config: dict, seed, inputs, outputs, t0):
    next_to = Path(next_to)
    path = next_to / "manifest.json" if next_to.is_dir() else next_to.with_name(next_to.name + ".manifest.json")
    write_json(path, {
        "command": command,
        "argv": getattr(args, "argv", None),
        "arguments": {k: v for k, v in vars(args).items() if k not in ("func", "argv")},
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None},
        "outputs": {str(p): _sha256(p) for p in outputs if p is not None and Path(p).is_file()},
        "version": __version__,
        "wall_time_s": round(time.time() - t0, 3),
    })


def _vocab_from(ckpt: Checkpoint, override=None) -> Vocab:
    if override is not None:
        return Vocab.load(override)
    if "vocab" not in ckpt.meta:
        raise ConfigError("checkpoint carries no vocabulary; pass --vocab")
    return Vocab.from_dict(ckpt.meta["vocab"])


def _model_id(path) -> str:
    return _sha256(path)[:16]


def _save_losses(path, losses) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, format(v, ".17g")])


# -- commands -----------------------------------------------------------------


def cmd_gen_corpus(args, t0):
    _need_files(args.spec)
    spec = CorpusSpec.from_dict(read_json(args.spec)) if args.spec else CorpusSpec()
    spec.seed = _seed(spec.seed)
    seqs = gen_corpus(spec)
    write_corpus(args.out, seqs)
    _write_manifest(args.out, "gen-corpus", args, spec.to_dict(), spec.seed, [args.spec], [args.out], t0)
    print(f"wrote {len(seqs)} sequences to {args.out}")


def cmd_gen_task(args, t0):
    seed = _seed(args.seed)
    seqs, labels = gen_task(args.num, args.length, args.motif, seed, copies=args.copies)
    write_task(args.out, seqs, labels)
    config = {"num": args.num, "length": args.length, "motif": args.motif, "copies": args.copies}
    _write_manifest(args.out, "gen-task", args, config, seed, [], [args.out], t0)
    print(f"wrote {len(seqs)} labelled sequences to {args.out}")


def cmd_tokenizer(args, t0):
    if args.action == "train":
        _need_files(args.corpus)
        vocab = bpe_train(read_corpus(args.corpus), args.size, args.min_count)
        vocab.save(args.vocab)
        _write_manifest(args.vocab, "tokenizer train", args, {"size": args.size, "min_count": args.min_count},
                        None, [args.corpus], [args.vocab], t0)
        print(f"vocabulary of {len(vocab)} tokens ({len(vocab.merges)} merges) -> {args.vocab}")
    else:
        _need_files(args.vocab, args.corpus)
        vocab = Vocab.load(args.vocab)
        ids = [encode(s, vocab) for s in read_corpus(args.corpus)]
        if args.out:
            write_json(args.out, {"ids": ids})
            _write_manifest(args.out, "tokenizer encode", args, {}, None, [args.vocab, args.corpus], [args.out], t0)
        else:
            for row in ids:
                print(" ".join(map(str, row)))


def _load_run_config(path):
    raw = read_json(path) if path else {}
    model = ModelConfig.from_dict(raw.get("model", {})) if raw.get("model") else ModelConfig()
    train = TrainConfig.from_dict(raw.get("train", {}))
    return model, train, raw.get("tokenizer", {})


def cmd_pretrain(args, t0):
    _need_files(args.config, args.corpus, args.vocab)
    model_cfg, train_cfg, tok = _load_run_config(args.config)
    if args.variant:
        model_cfg = model_cfg.replace(variant=args.variant)
    if args.steps is not None:
        train_cfg.steps = args.steps
    train_cfg.seed = _seed(train_cfg.seed)
    corpus = read_corpus(args.corpus)
    if args.vocab:
        vocab = Vocab.load(args.vocab)
    else:
        vocab = bpe_train(corpus, int(tok.get("target_size", model_cfg.vocab_size)), int(tok.get("min_pair_count", 2)))
    ids = [encode(s, vocab) for s in corpus]
    run = pretrain(train_cfg, ids, model_cfg, vocab)
    ckpt = run.checkpoint
    ckpt.meta["vocab"] = vocab.to_dict()
    save(ckpt, args.out)
    loss_csv = Path(str(args.out) + ".loss.csv")
    _save_losses(loss_csv, run.losses)
    config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "tokenizer": tok}
    _write_manifest(args.out, "pretrain", args, config, train_cfg.seed, [args.config, args.corpus, args.vocab],
                    [args.out, loss_csv], t0)
    print(f"pretrained {model_cfg.variant.value} model for {train_cfg.steps} steps; "
          f"final loss {np.mean(run.losses[-20:]):.4f} -> {args.out}")


def cmd_surgery(args, t0):
    _need_files(args.input, args.corpus, args.vocab)
    if not 0.0 <= args.steps_frac <= 10.0:
        raise UsageError("--steps-frac must lie in [0, 10]")
    ckpt = load(args.input)
    vocab = _vocab_from(ckpt, args.vocab)
    train_cfg = TrainConfig.from_dict(ckpt.meta["train"]) if "train" in ckpt.meta else TrainConfig()
    train_cfg.seed = _seed(train_cfg.seed)
    ids = [encode(s, vocab) for s in read_corpus(args.corpus)]
    batches = eval_batches(ids, vocab, train_cfg, ckpt.config.max_seq_len)
    loss_before = eval_loss(ckpt, batches)
    swapped = surgery(ckpt)
    loss_after = eval_loss(swapped, batches)
    steps = int(round(args.steps_frac * ckpt.step))
    run = continue_training(swapped, ids, vocab, train_cfg, steps)
    out = run.checkpoint
    loss_final = eval_loss(out, batches)
    save(out, args.out)
    report = Path(str(args.out) + ".surgery.json")
    write_json(report, {"steps": steps, "loss_before_surgery": loss_before, "loss_after_surgery": loss_after,
                        "loss_after_continuation": loss_final})
    _write_manifest(args.out, "surgery", args, {"train": train_cfg.to_dict(), "steps": steps}, train_cfg.seed,
                    [args.input, args.corpus, args.vocab], [args.out, report], t0)
    print(f"surgery: loss {loss_before:.4f} -> {loss_after:.4f} (swap) -> {loss_final:.4f} after {steps} steps")


def cmd_finetune(args, t0):
    _need_files(args.input, args.task, args.vocab)
    ckpt = load(args.input)
    vocab = _vocab_from(ckpt, args.vocab)
    seqs, labels = read_task(args.task)
    seed = _seed(args.seed)
    order = make_rng(seed).permutation(len(seqs))
    n_test = max(1, int(round(args.test_frac * len(seqs))))
    test_idx, train_idx = order[:n_test], order[n_test:]
    ids = [encode(s, vocab) for s in seqs]
    train = ([ids[i] for i in train_idx], [labels[i] for i in train_idx])
    test = ([ids[i] for i in test_idx], [labels[i] for i in test_idx])
    res = finetune_classifier(ckpt, train, test, vocab, mode=args.mode, steps=args.steps, lr=args.lr,
                              batch_size=args.batch_size, seed=seed, rank=args.rank, alpha=args.alpha)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    c = res.counts
    write_json(out / "eval.json", {"mode": args.mode, "mcc": res.mcc,
                                   "counts": {"tp": c.tp, "tn": c.tn, "fp": c.fp, "fn": c.fn},
                                   "n_train": len(train_idx), "n_test": len(test_idx)})
    write_json(out / "head.json", {k: v for k, v in res.head.items()})
    _save_losses(out / "loss.csv", res.losses)
    outputs = [out / "eval.json", out / "head.json", out / "loss.csv"]
    if res.adapters is not None:
        aset = AdapterSet(adapters=dict(res.adapters))
        save(aset.to_checkpoint(ckpt.config, {"mode": args.mode}), out / "adapters.ckpt")
        outputs.append(out / "adapters.ckpt")
    config = {k: getattr(args, k) for k in ("mode", "rank", "alpha", "steps", "lr", "batch_size", "test_frac")}
    _write_manifest(out, "finetune", args, config, seed, [args.input, args.task, args.vocab], outputs, t0)
    print(f"{args.mode} fine-tuning: MCC {res.mcc:.4f} on {len(test_idx)} held-out sequences")


def cmd_quantize(args, t0):
    _need_files(args.input, args.calib, args.eval, args.vocab)
    w_bits, a_bits = parse_bits(args.bits)
    alpha = args.alpha if args.method == "smoothquant" else None
    spec = QuantSpec(w_bits, a_bits, args.granularity, not args.asymmetric, alpha)
    ckpt = load(args.input)
    vocab = _vocab_from(ckpt, args.vocab)
    max_len = ckpt.config.max_seq_len
    calib = encode_sample(read_corpus(args.calib), vocab, max_len, args.num_seqs)
    evals = encode_sample(read_corpus(args.eval), vocab, max_len, args.num_seqs) if args.eval else calib
    stats = calibrate(ckpt, calib, spec)
    qmodel = quantize_model(ckpt, spec, stats)
    dev = logit_deviation(ckpt, qmodel, evals)
    max_dev = max(float(np.max(np.abs(forward_tokens(s[None], ckpt.params, ckpt.config).logits - qmodel.logits(s[None]))))
                  for s in evals)
    report = {"model_id": _model_id(args.input), "bits": spec.label, "method": args.method, "spec": spec.to_dict(),
              "mean_abs_logit_deviation": dev, "max_abs_logit_deviation": max_dev,
              "n_calibration": len(calib), "n_eval": len(evals)}
    write_json(args.report, report)
    _write_manifest(args.report, "quantize", args, spec.to_dict(), None,
                    [args.input, args.calib, args.eval, args.vocab], [args.report], t0)
    print(f"{spec.label} {args.method}: mean |logit deviation| {dev:.6g}")


def _dump_attention(ckpt, seq, dirpath: Path, index: int) -> list[Path]:
    res = forward_tokens(seq[None], ckpt.params, ckpt.config, record=True)
    paths = []
    for probe in res.trace:
        if probe.kind != "attention_probs":
            continue
        t = probe.tensor[0]
        heads = t if t.ndim == 3 else t[None]
        for h, mat in enumerate(heads):
            p = dirpath / f"seq{index}_l{probe.layer}_h{h}.csv"
            with p.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["key\\query"] + [str(j) for j in range(mat.shape[1])])
                for i, row in enumerate(mat):
                    w.writerow([str(i)] + [format(v, ".17g") for v in row])
            paths.append(p)
    return paths


def cmd_diagnose(args, t0):
    _need_files(args.input, args.sample, args.vocab)
    ckpt = load(args.input)
    vocab = _vocab_from(ckpt, args.vocab)
    sample = encode_sample(read_corpus(args.sample), vocab, ckpt.config.max_seq_len, args.num_seqs)
    report = collect_report(ckpt, sample, model_id=_model_id(args.input))
    report.meta = {"variant": ckpt.config.variant.value, "step": ckpt.step}
    report.write_json(args.report)
    csv_path = Path(str(args.report) + ".csv")
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    outputs = [args.report, csv_path]
    attn_dir = Path(args.attention_dir) if args.attention_dir else Path(str(args.report) + ".attention")
    attn_dir.mkdir(parents=True, exist_ok=True)
    for i, seq in enumerate(sample[: args.dump_seqs]):
        outputs += _dump_attention(ckpt, seq, attn_dir, i)
    _write_manifest(args.report, "diagnose", args, {"num_seqs": args.num_seqs, "dump_seqs": args.dump_seqs}, None,
                    [args.input, args.sample, args.vocab], outputs, t0)
    avg = "n/a" if report.avg_kurtosis is None else f"{report.avg_kurtosis:.4f}"
    print(f"avg kurtosis {avg}, max inf-norm {report.max_inf_norm:.4f} over {len(sample)} sequences")


def cmd_theorem_check(args, t0):
    _need_files(args.frozen, args.target)
    frozen, target = load(args.frozen), load(args.target)
    seed = _seed(args.seed)
    gap = functionality_gap(frozen, target)
    ns = check_nonsingularity(frozen, target, args.rank)
    report = {"rank": args.rank, "gaps": gap.to_dict(), "non_singularity": ns.to_dict(), "trials": args.trials}
    if ns.passed and args.rank >= gap.required_rank:
        adapters = construct_adapters(frozen, target, args.rank)
        dev = verify_theorem(frozen, target, adapters, args.trials, make_rng(seed))
        report["max_deviation"] = dev
        report["adapter_ranks"] = {t: numerical_rank(a.delta()) for t, a in adapters.adapters.items()}
        if args.adapters_out:
            save(adapters.to_checkpoint(frozen.config), args.adapters_out)
    else:
        report["max_deviation"] = None
    write_json(args.report, report)
    _write_manifest(args.report, "theorem-check", args, {"rank": args.rank, "trials": args.trials}, seed,
                    [args.frozen, args.target], [args.report, args.adapters_out], t0)
    if report["max_deviation"] is None:
        raise OutlierFreeError("preconditions not met; see report for gaps and non-singularity failures")
    print(f"max deviation {report['max_deviation']:.3e} over {args.trials} random inputs")


def cmd_gen_pair(args, t0):
    seed = _seed(args.seed)
    rng = make_rng(seed)
    pair = random_formal_pair(rng, args.dim, args.heads, args.layers)
    out = []
    for path, ckpt in zip((args.frozen, args.target), pair):
        ckpt.meta = {"seed": seed}
        save(ckpt, path)
        out.append(path)
    cfg = pair[0].config
    _write_manifest(args.frozen, "gen-pair", args, cfg.to_dict(), seed, [], out, t0)
    print(f"wrote frozen {args.frozen} and target {args.target}")


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="outlierfree", description="Outlier-free attention toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-corpus", help="generate a synthetic DNA corpus")
    s.add_argument("--spec", help="JSON corpus spec (defaults used when omitted)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("gen-task", help="generate a balanced motif-presence classification task")
    s.add_argument("--motif", default="TATAAA")
    s.add_argument("--length", type=int, default=24)
    s.add_argument("--num", type=int, default=800)
    s.add_argument("--copies", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_task)

    s = sub.add_parser("tokenizer", help="train a BPE vocabulary or encode a corpus")
    s.add_argument("action", choices=["train", "encode"])
    s.add_argument("--vocab", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--min-count", type=int, default=2)
    s.add_argument("--out", help="JSON file for encoded ids (encode only; stdout otherwise)")
    s.set_defaults(func=cmd_tokenizer)

    s = sub.add_parser("pretrain", help="masked-language-model pretraining")
    s.add_argument("--config", help="JSON with optional 'model', 'train' and 'tokenizer' sections")
    s.add_argument("--corpus", required=True)
    s.add_argument("--vocab", help="vocabulary JSON (trained on the corpus when omitted)")
    s.add_argument("--variant", choices=["softmax", "softmax1"])
    s.add_argument("--steps", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("surgery", help="switch to softmax1 and continue training")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--vocab")
    s.add_argument("--steps-frac", type=float, default=0.2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_surgery)

    s = sub.add_parser("finetune", help="fine-tune a classifier on a labelled task file")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--task", required=True, help="lines of '<label>\\t<sequence>'")
    s.add_argument("--vocab")
    s.add_argument("--mode", choices=["full", "lora", "qlora", "loftq", "frozen"], default="full")
    s.add_argument("--rank", type=int, default=8)
    s.add_argument("--alpha", type=float, default=16.0)
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--lr", type=float, default=3e-3)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--test-frac", type=float, default=0.25)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("quantize", help="simulated post-training quantisation")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--bits", default="8W/8A")
    s.add_argument("--method", choices=["traditional", "smoothquant"], default="traditional")
    s.add_argument("--alpha", type=float, default=0.5)
    s.add_argument("--granularity", choices=["per_tensor", "per_channel"], default="per_tensor")
    s.add_argument("--asymmetric", action="store_true", help="asymmetric activation ranges")
    s.add_argument("--calib", required=True)
    s.add_argument("--eval", help="evaluation corpus (calibration corpus when omitted)")
    s.add_argument("--vocab")
    s.add_argument("--num-seqs", type=int, default=16)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("diagnose", help="outlier report and attention dumps")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--sample", required=True)
    s.add_argument("--vocab")
    s.add_argument("--num-seqs", type=int, default=16)
    s.add_argument("--dump-seqs", type=int, default=1)
    s.add_argument("--attention-dir")
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("theorem-check", help="build exact adapters between two formal models and verify them")
    s.add_argument("--frozen", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--rank", type=int, required=True)
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--adapters-out")
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_theorem_check)

    s = sub.add_parser("gen-pair", help="random formal-mode frozen/target pair for theorem-check")
    s.add_argument("--dim", type=int, default=4)
    s.add_argument("--heads", type=int, default=1)
    s.add_argument("--layers", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frozen", required=True)
    s.add_argument("--target", required=True)
    s.set_defaults(func=cmd_gen_pair)
    return p


def main(argv=None) -> int:
    t0 = time.time()
    try:
        argv = list(sys.argv[1:] if argv is None else argv)
        args = build_parser().parse_args(argv)
        args.argv = argv
        args.func(args, t0)
    except UsageError as exc:
        print(f"E_USAGE: {exc}", file=sys.stderr)
        return 2
    except (OSError, CheckpointError) as exc:
        print(f"E_IO: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OutlierFreeError, ValueError) as exc:
        print(f"E_DOMAIN: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
