"""Command-line entry point.

Every subcommand takes ``--config FILE`` (``key = value`` lines) and per-key
flags that win over the file. Artifacts land in ``--out``, together with the
resolved configuration in ``config.resolved``. Exit codes: 0 success, 1 usage
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as ds
from . import training as tr
from .config import ConfigError, build, field_names, format_resolved, read_config_file
from .decoding import DecodeConfig, decode_corpus
from .evaluation import average_lagging, corpus_bleu, format_trace, laal, sweep, write_tradeoff_csv
from .model import ModelConfig, Transducer
from .tensor import load_arrays

log = logging.getLogger("lstransducer")

LOG_FIELDS = ("epoch", "split", "ce", "ctc", "qua", "total", "perplexity")
MODEL_DERIVED = ("vocab_size", "feat_dim")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- helpers

def _opt(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_keys(p: argparse.ArgumentParser, names, help_prefix: str) -> None:
    for name in names:
        if name == "seed":
            continue
        p.add_argument(_opt(name), dest=name, default=None, metavar="V",
                       help=f"{help_prefix} {name}")


def _values(args, names) -> dict[str, str]:
    """File values, overridden by flags given on the command line."""
    values = read_config_file(args.config) if args.config else {}
    for name in list(names) + ["seed"]:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = str(v)
    return values


def _run_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, sections: dict) -> None:
    (out / "config.resolved").write_text(format_resolved(sections))


def _fmt(v) -> str:
    return f"{v:.10g}" if isinstance(v, float) else str(v)


def _write_log(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in rows:
            w.writerow([_fmt(row.get(k, "")) for k in LOG_FIELDS])


def save_model(out: Path, model: Transducer, name: str = "model") -> None:
    model.params.save(out / f"{name}.params")
    (out / f"{name}.json").write_text(json.dumps(model.cfg.to_dict(), indent=1, sort_keys=True) + "\n")


def load_model(path, name: str = "model") -> Transducer:
    """``path`` is a run directory (holding ``<name>.params``/``<name>.json``) or a ``.params`` file."""
    path = Path(path)
    if path.is_dir():
        params, cfg_file = path / f"{name}.params", path / f"{name}.json"
    else:
        params, cfg_file = path, path.with_suffix(".json")
    cfg = ModelConfig.from_dict(json.loads(cfg_file.read_text()))
    model = Transducer(cfg)
    model.params.load_arrays(load_arrays(params))
    return model


def _records(args, split: str | None = None):
    return ds.read_records(Path(args.data) / f"{split or args.split}.jsonl")


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> None:
    values = _values(args, args._keys)
    cfg = build(ds.SynthConfig, values)
    n_utts = int(values.get("n_utts", 2000))
    n_lm = int(values.get("lm_text", 5000))
    n_cross = int(values.get("cross_text", 5000))
    out = _run_dir(args)
    splits = ds.generate(cfg, n_utts)
    text = {"lm_text": ds.generate_text(cfg, n_lm, cfg.domain, cfg.seed + 101),
            "cross_text": ds.generate_text(cfg, n_cross, "skewed-markov", cfg.seed + 202)}
    ds.write_dataset(out, cfg, splits, text)
    _write_resolved(out, {"data": {**cfg.to_dict(), "n_utts": n_utts, "lm_text": n_lm,
                                   "cross_text": n_cross}})


def _model_cfg(values, meta) -> ModelConfig:
    return build(ModelConfig, values, skip=MODEL_DERIVED,
                 vocab_size=meta["vocab_size"], feat_dim=meta["feat_dim"])


def _text(path) -> list[list[int]]:
    corpus = ds.read_text(path)
    if not corpus:
        raise ValueError(f"{path}: empty text corpus")
    return corpus


def _split_heldout(corpus, frac: float = 0.05):
    n = max(1, int(len(corpus) * frac))
    return corpus[n:] or corpus, corpus[:n]


def cmd_pretrain_lm(args) -> None:
    values = _values(args, args._keys)
    meta = ds.read_meta(args.data)
    mcfg = _model_cfg(values, meta)
    tcfg = build(tr.TrainConfig, values)
    corpus, heldout = _split_heldout(_text(args.text or Path(args.data) / "lm_text.txt"))
    out = _run_dir(args)
    model = Transducer(mcfg, seed=tcfg.seed)
    rows = tr.pretrain_lm(model, corpus, tcfg, heldout)
    save_model(out, model)
    _write_log(out / "train_log.csv", rows)
    _write_resolved(out, {"model": mcfg.to_dict(), "train": tr.config_dict(tcfg)})


def cmd_train(args) -> None:
    values = _values(args, args._keys)
    meta = ds.read_meta(args.data)
    mcfg = _model_cfg(values, meta)
    tcfg = build(tr.TrainConfig, values)
    out = _run_dir(args)
    model = Transducer(mcfg, seed=tcfg.seed)
    if args.init_lm:
        tr.init_from_lm(model, load_model(args.init_lm), freeze_pred_net=not args.unfreeze_pred_net)
    rows = tr.train(model, _records(args, "train"), tcfg, dev=_records(args, "dev"))
    model.params.frozen = []
    save_model(out, model)
    _write_log(out / "train_log.csv", rows)
    _write_resolved(out, {"model": mcfg.to_dict(), "train": tr.config_dict(tcfg),
                          "init": {"init_lm": args.init_lm or "", "unfreeze_pred_net": args.unfreeze_pred_net}})


def cmd_adapt(args) -> None:
    values = _values(args, args._keys)
    tcfg = build(tr.TrainConfig, values)
    model = load_model(args.model)
    corpus, heldout = _split_heldout(_text(args.text))
    out = _run_dir(args)
    rows = tr.adapt_prediction_network(model, corpus, tcfg, heldout, keep_query_path=not args.whole_pred_net)
    save_model(out, model)
    _write_log(out / "train_log.csv", rows)
    _write_resolved(out, {"train": tr.config_dict(tcfg), "adapt": {"model": args.model, "text": args.text,
                                                                  "whole_pred_net": args.whole_pred_net}})


def _decode_setup(args):
    values = _values(args, args._keys)
    dcfg = build(DecodeConfig, values)
    model = load_model(args.model)
    lm = load_model(args.lm) if args.lm else None
    return values, dcfg, model, lm


def cmd_decode(args) -> None:
    _, dcfg, model, lm = _decode_setup(args)
    records = _records(args)
    out = _run_dir(args)
    results = decode_corpus(model, records, dcfg, lm, offline=args.offline)
    with open(out / "decode.jsonl", "w") as fh:
        for r, res in zip(records, results):
            fh.write(json.dumps({"utt_id": r.utt_id, "tokens": res.tokens,
                                 "emit_ms": [f * r.ms_per_frame for f in res.emit_frames],
                                 "source_ms_total": res.n_frames * r.ms_per_frame},
                                separators=(",", ":")) + "\n")
    with open(out / "trace.csv", "w") as fh:
        fh.write("utt_id,kind,ms,token\n")
        for r, res in zip(records, results):
            fh.write(format_trace(r.utt_id, res.trace))
    _write_resolved(out, {"decode": {**vars(dcfg), "model": args.model, "lm": args.lm or "",
                                     "split": args.split, "offline": args.offline}})


def cmd_eval(args) -> None:
    """Score a decode.jsonl against the references of a data split."""
    refs = {r.utt_id: r for r in _records(args)}
    hyps, al, la = [], [], []
    ref_list = []
    with open(args.decoded) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj["utt_id"] not in refs:
                raise ValueError(f"{args.decoded}:{lineno}: unknown utt_id {obj['utt_id']}")
            ref = refs[obj["utt_id"]].tgt_tokens
            trace = (obj["emit_ms"], obj["source_ms_total"])
            hyps.append(obj["tokens"])
            ref_list.append(ref)
            al.append(average_lagging(trace, len(obj["tokens"]), len(ref)))
            la.append(laal(trace, len(obj["tokens"]), len(ref)))
    if not hyps:
        raise ValueError("no decoded utterances")
    out = _run_dir(args)
    metrics = {"n_utts": len(hyps), "bleu": round(corpus_bleu(hyps, ref_list), 3),
               "al_ms": round(float(np.mean(al)), 3), "laal_ms": round(float(np.mean(la)), 3)}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    _write_resolved(out, {"eval": {"decoded": args.decoded, "data": args.data, "split": args.split}})
    print(json.dumps(metrics, sort_keys=True))


def cmd_sweep(args) -> None:
    _, dcfg, model, lm = _decode_setup(args)
    try:
        grid = [float(x) for x in args.grid.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--grid expects comma-separated numbers, got {args.grid!r}") from None
    if not grid:
        raise UsageError("--grid is empty")
    records = _records(args)
    out = _run_dir(args)
    points = sweep(model, records, grid, dcfg, lm)
    write_tradeoff_csv(out / "tradeoff.csv", points)
    _write_resolved(out, {"sweep": {**vars(dcfg), "grid": args.grid, "model": args.model,
                                    "lm": args.lm or "", "split": args.split}})


def cmd_gradcheck(args) -> None:
    values = _values(args, args._keys)
    tcfg = build(tr.TrainConfig, values)
    scfg = ds.SynthConfig(src_vocab=8, min_len=2, max_len=3, seed=tcfg.seed, dev_size=0,
                          test_size=0, cross_size=0)
    defaults = {"d_model": "8", "n_heads": "2", "ff_dim": "8", "enc_layers": "1", "pred_layers": "1",
                "query_layer": "0", "chunk_size": "4"}
    mcfg = _model_cfg({**defaults, **values}, {"vocab_size": scfg.vocab_size, "feat_dim": scfg.feat_dim})
    model = Transducer(mcfg, seed=tcfg.seed)
    batch = tr.collate(ds.generate(scfg, 2)["train"])
    err = tr.gradcheck(model, batch, tcfg)
    out = _run_dir(args)
    tol = float(values.get("tolerance", 1e-3))
    result = {"n_params": model.params.count(), "max_rel_error": float(f"{err:.6e}"),
              "tolerance": tol, "passed": bool(err < tol)}
    (out / "gradcheck.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    _write_resolved(out, {"model": mcfg.to_dict(), "train": tr.config_dict(tcfg)})
    print(json.dumps(result, sort_keys=True))
    if not result["passed"]:
        raise RuntimeError(f"gradient check failed: {err:.3e} >= {tol}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lstransducer", description="Label-synchronous streaming translation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def command(name, func, help, keys=(), data=True, split=False, model=False):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", help="key = value config file; flags override it")
        p.add_argument("--seed", default=None, help="random seed")
        p.add_argument("--out", required=True, help="run directory for artifacts")
        if data:
            p.add_argument("--data", required=True, help="dataset directory from gen-data")
        if split:
            p.add_argument("--split", default="test", choices=ds.SPLITS, help="data split (default test)")
        if model:
            p.add_argument("--model", required=True, help="run directory holding model.params/model.json")
        p.set_defaults(func=func, _keys=list(keys))
        return p

    synth = field_names(ds.SynthConfig, skip=("seed",))
    p = command("gen-data", cmd_gen_data, "generate the synthetic dataset and text corpora", data=False,
                keys=synth + ["n_utts", "lm_text", "cross_text"])
    _add_keys(p, synth, "synthetic task:")
    p.add_argument("--n-utts", dest="n_utts", default=None, metavar="N", help="training utterances (2000)")
    p.add_argument("--lm-text", dest="lm_text", default=None, metavar="N", help="in-domain text lines (5000)")
    p.add_argument("--cross-text", dest="cross_text", default=None, metavar="N",
                   help="cross-domain text lines (5000)")

    model_keys = field_names(ModelConfig, skip=MODEL_DERIVED)
    train_keys = field_names(tr.TrainConfig, skip=("seed",))
    p = command("pretrain-lm", cmd_pretrain_lm, "pretrain the prediction network as a language model",
                keys=model_keys + train_keys)
    p.add_argument("--text", help="text corpus (default DATA/lm_text.txt)")
    _add_keys(p, model_keys, "model:")
    _add_keys(p, train_keys, "training:")

    p = command("train", cmd_train, "train the transducer on DATA/train.jsonl", keys=model_keys + train_keys)
    p.add_argument("--init-lm", help="pretrained LM run directory for the prediction network")
    p.add_argument("--unfreeze-pred-net", action="store_true",
                   help="keep training the prediction network after LM initialisation")
    _add_keys(p, model_keys, "model:")
    _add_keys(p, train_keys, "training:")

    p = command("adapt", cmd_adapt, "fine-tune the prediction network on target-side text",
                data=False, model=True, keys=train_keys)
    p.add_argument("--text", required=True, help="adaptation text corpus")
    p.add_argument("--whole-pred-net", action="store_true",
                   help="also fine-tune the embedding and the blocks feeding the encoder query")
    _add_keys(p, train_keys, "training:")

    decode_keys = field_names(DecodeConfig)
    p = command("decode", cmd_decode, "streaming decode of a data split", split=True, model=True,
                keys=decode_keys)
    p.add_argument("--lm", help="external LM run directory for shallow fusion")
    p.add_argument("--offline", action="store_true", help="decode with the whole utterance visible")
    _add_keys(p, decode_keys, "decoding:")

    p = command("eval", cmd_eval, "BLEU, AL and LAAL of a decode.jsonl", split=True)
    p.add_argument("--decoded", required=True, help="decode.jsonl from the decode command")

    p = command("sweep", cmd_sweep, "quality-latency sweep over epsilon", split=True, model=True,
                keys=decode_keys)
    p.add_argument("--grid", default="0,1,3,5,7", help="comma-separated epsilon values")
    p.add_argument("--lm", help="external LM run directory for shallow fusion")
    _add_keys(p, [k for k in decode_keys if k != "epsilon"], "decoding:")

    gc_keys = [k for k in model_keys if k != "aif_mode"] + train_keys + ["tolerance"]
    p = command("gradcheck", cmd_gradcheck, "finite-difference check of the full objective on a tiny model",
                data=False, keys=gc_keys)
    _add_keys(p, gc_keys, "model/training:")
    p.add_argument("--aif-mode", dest="aif_mode", default=None, metavar="V", help="extraction mode")
    p.set_defaults(_keys=gc_keys + ["aif_mode"])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:        # --help
        return 0 if e.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(f"lstransducer {args.command}: {e}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError, OSError, KeyError, RuntimeError, ds.DatasetFormatError) as e:
        print(f"lstransducer {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
