"""Command-line entry point.

Every subcommand writes into a fresh run directory (``--out``) through a staging
directory that is renamed on success and deleted on failure; each run
directory carries ``run.json`` with the config digest, input digests and seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .encoder import checkpoint
from .encoder.masking import pretrain_mlm
from .encoder.sequence import EncoderKind, Pooling, Retriever, SequenceEncoder, SequenceEncoderConfig
from .fusion import RagModel, train
from .index import build_index, read_index, search, write_index
from .inspection import inspect, write_reports
from .metrics import MetricReport
from .pipeline import build_examples, featurize_examples
from .prototypes import export_usage
from .tasks import SyntheticDataset, generate, get_task, read_dataset, split, write_dataset
from .timeline import Vocabulary, compute_deltas, read_events_jsonl, split_query_history

log = logging.getLogger("timeline_rag")


class CliError(Exception):
    pass


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _need(path: Path) -> Path:
    if not path.exists():
        raise CliError(f"missing file: {path}")
    return path


class RunDir:
    """Staging directory that becomes ``final`` only if the command succeeds."""

    def __init__(self, final: str | Path):
        self.final = Path(final)
        self.path = self.final.with_name(f".{self.final.name}.partial-{os.getpid()}")
        self.inputs: dict[str, str] = {}

    def __enter__(self) -> "RunDir":
        if self.path.exists():
            shutil.rmtree(self.path)
        self.path.mkdir(parents=True)
        return self

    def track(self, path: Path) -> Path:
        self.inputs[str(path)] = file_digest(_need(path))
        return path

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.path, ignore_errors=True)
            return False
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.path, self.final)
        return False

    def manifest(self, command: str, cfg: cfgmod.RunConfig, argv, extra: dict | None = None) -> None:
        outputs = {p.name: file_digest(p) for p in sorted(self.path.iterdir()) if p.is_file()}
        rec = {
            "command": command,
            "argv": list(argv),
            "seed": cfg.seed,
            "config": asdict(cfg),
            "config_digest": cfg.digest(),
            "inputs": self.inputs,
            "outputs": outputs,
        }
        rec.update(extra or {})
        (self.path / "run.json").write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")


def encoder_config_json(c: SequenceEncoderConfig) -> dict:
    return {k: (v.value if hasattr(v, "value") else v) for k, v in asdict(c).items()}


def encoder_config_from_json(rec: dict) -> SequenceEncoderConfig:
    rec = dict(rec)
    rec["kind"] = EncoderKind(rec["kind"])
    rec["pooling"] = Pooling(rec["pooling"])
    return SequenceEncoderConfig(**rec)


def load_data(data: Path, run: RunDir | None = None) -> tuple[SyntheticDataset, dict]:
    for name in ("vocab.tsv", "events.jsonl", "labels.jsonl", "splits.json"):
        p = _need(data / name)
        if run is not None:
            run.track(p)
    vocab = Vocabulary.load(data / "vocab.tsv", frozen=True)
    ds = read_dataset(data, vocab)
    splits = json.loads((data / "splits.json").read_text())
    return ds, splits


def load_retriever(index_dir: Path, vocab_size: int, run: RunDir | None = None) -> tuple[Retriever, dict]:
    ckpt, meta = _need(index_dir / "retriever.ragp"), _need(index_dir / "encoder.json")
    if run is not None:
        run.track(ckpt)
        run.track(meta)
    ecfg = encoder_config_from_json(json.loads(meta.read_text()))
    enc = SequenceEncoder(vocab_size, ecfg)
    return Retriever(enc, checkpoint.load(ckpt)), json.loads(meta.read_text())


def _examples(ds, splits, names, cfg: cfgmod.RunConfig, index, retriever, M: int):
    task = get_task(cfg.task)
    records = {(r.patient_id, r.stay_ordinal): r for r in ds.labels_for(task.name.value)}
    out = {}
    for name in names:
        ids = set(splits[name])
        recs = [r for k, r in sorted(records.items()) if k[0] in ids]
        ex, excluded = build_examples(
            ds.timelines, recs, task, index, retriever, cfg.query_chunk_size, M, cfg.scaler(), cfgmod.SlotOrder(cfg.slot_order), cfg.threads
        )
        if excluded:
            log.warning("%s: %d examples excluded", name, len(excluded))
        out[name] = ex
    return out


# subcommands ---------------------------------------------------------------


def cmd_gen_data(args, cfg: cfgmod.RunConfig) -> None:
    with RunDir(args.out) as run:
        ds = generate(cfg.synthetic(), Vocabulary())
        write_dataset(run.path, ds)
        ds.vocab.save(run.path / "vocab.tsv")
        splits = split(ds.timelines, seed=cfg.seed)
        (run.path / "splits.json").write_text(json.dumps(splits, indent=1, sort_keys=True) + "\n")
        run.manifest("gen-data", cfg, args.argv, {"patients": len(ds.timelines), "excluded": ds.excluded})


def cmd_build_vocab(args, cfg: cfgmod.RunConfig) -> None:
    with RunDir(args.out) as run:
        raw = read_events_jsonl(run.track(Path(args.events)))
        vocab = Vocabulary(sorted({ev.code for evs in raw.values() for ev in evs}))
        vocab.save(run.path / "vocab.tsv")
        run.manifest("build-vocab", cfg, args.argv, {"size": len(vocab)})


def cmd_pretrain_mlm(args, cfg: cfgmod.RunConfig) -> None:
    data = Path(args.data)
    with RunDir(args.out) as run:
        ds, splits = load_data(data, run)
        enc = SequenceEncoder(len(ds.vocab), cfg.encoder_config())
        params = enc.init(np.random.default_rng(cfg.seed))
        train_tl = [ds.timelines[p] for p in splits["train"]]
        params, _, losses = pretrain_mlm(
            train_tl,
            enc,
            params,
            steps=cfg.mlm_steps,
            batch_size=cfg.mlm_batch_size,
            chunk_size=cfg.history_chunk_size,
            overlap=cfg.history_chunk_overlap,
            lr=cfg.mlm_lr,
            seed=cfg.seed,
        )
        digest = checkpoint.save(run.path / "encoder.ragp", {k: params[k] for k in enc.param_names(params)})
        (run.path / "encoder.json").write_text(json.dumps(encoder_config_json(enc.config), sort_keys=True))
        with open(run.path / "mlm_loss.csv", "w", encoding="utf-8") as fh:
            fh.write("step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses)))
        run.manifest("pretrain-mlm", cfg, args.argv, {"encoder_digest": digest})


def cmd_build_index(args, cfg: cfgmod.RunConfig) -> None:
    data = Path(args.data)
    with RunDir(args.out) as run:
        ds, _ = load_data(data, run)
        if args.encoder:
            edir = Path(args.encoder)
            ecfg = encoder_config_from_json(json.loads(run.track(edir / "encoder.json").read_text()))
            enc = SequenceEncoder(len(ds.vocab), ecfg)
            params = checkpoint.load(run.track(edir / "encoder.ragp"))
        else:
            # untrained snapshot: a seeded random encoder serves as the frozen retriever
            enc = SequenceEncoder(len(ds.vocab), cfg.encoder_config())
            params = enc.init(np.random.default_rng(cfg.seed))
        retriever = Retriever(enc, params)
        digest = checkpoint.save(run.path / "retriever.ragp", retriever.params)
        (run.path / "encoder.json").write_text(json.dumps(encoder_config_json(enc.config), sort_keys=True))
        index = build_index(list(ds.timelines.values()), cfg.chunking(), retriever, cfg.scaler(), digest, cfg.threads)
        write_index(run.path / "index.ergp", index)
        run.manifest("build-index", cfg, args.argv, {"entries": len(index), "encoder_digest": digest})


def cmd_retrieve(args, cfg: cfgmod.RunConfig) -> None:
    data, index_dir = Path(args.data), Path(args.index)
    ds, _ = load_data(data)
    retriever, _ = load_retriever(index_dir, len(ds.vocab))
    index = read_index(_need(index_dir / "index.ergp"))
    tl = ds.timelines.get(args.patient)
    if tl is None:
        raise CliError(f"unknown patient: {args.patient}")
    task = get_task(cfg.task)
    sp = split_query_history(tl, task, args.stay, cfg.query_chunk_size)
    deltas = compute_deltas(tl, cfg.scaler())
    qvec = retriever.encode(sp.query, deltas[sp.query_start : sp.query_stop])
    hits = search(index, tl.patient_id, qvec, args.m, sp.query_start)
    rows = [{**h.descriptor.to_json(), "similarity": h.similarity} for h in hits]
    print("patient_id\tstrategy\tstart\tend\tordinal\tsimilarity")
    for r in rows:
        print(f"{r['patient_id']}\t{r['strategy']}\t{r['start']}\t{r['end']}\t{r['ordinal']}\t{r['similarity']:.6f}")
    if args.out:
        with RunDir(args.out) as run:
            for p in (data / "events.jsonl", index_dir / "index.ergp"):
                run.track(p)
            with open(run.path / "retrieved.jsonl", "w", encoding="utf-8") as fh:
                for r in rows:
                    fh.write(json.dumps(r) + "\n")
            run.manifest("retrieve", cfg, args.argv, {"patient": args.patient, "query_start": sp.query_start})


def cmd_train(args, cfg: cfgmod.RunConfig) -> None:
    data, index_dir = Path(args.data), Path(args.index)
    with RunDir(args.out) as run:
        ds, splits = load_data(data, run)
        retriever, enc_json = load_retriever(index_dir, len(ds.vocab), run)
        index = read_index(run.track(index_dir / "index.ergp"))
        cfg = replace(cfg, **_encoder_overrides(enc_json))
        mcfg = cfg.model(len(ds.vocab), use_retrieval=not args.query_only)
        model = RagModel(mcfg)
        M = model.M
        ex = _examples(ds, splits, ("train", "val"), cfg, index, retriever, M)
        feats = {k: featurize_examples(v, model.encoder, cfg.query_chunk_size, cfg.history_chunk_size, M) for k, v in ex.items()}
        params = model.init(np.random.default_rng(cfg.seed), retriever.params)
        res = train(model, params, feats["train"], feats["val"], cfg.training(), run.path / "train_log.csv")
        digest = model.save(run.path / "model.ragp", res.params)
        run.manifest(
            "train",
            cfg,
            args.argv,
            {"model_digest": digest, "best_epoch": res.best_epoch, "epochs": len(res.history), "stopped_early": res.stopped_early},
        )


def _encoder_overrides(enc_json: dict) -> dict:
    # the backbone must match the retriever's architecture so it can start from its weights
    return {
        "d": enc_json["d"],
        "encoder": enc_json["kind"],
        "encoder_layers": enc_json["layers"],
        "encoder_heads": enc_json["heads"],
        "pooling": enc_json["pooling"],
        "rotary": enc_json["rotary"],
        "max_visits": enc_json["max_visits"],
    }


def _load_model(model_dir: Path, run: RunDir):
    ckpt = run.track(model_dir / "model.ragp")
    run.track(Path(str(ckpt) + ".json"))
    return RagModel.load(ckpt)


def _eval_setup(args, cfg, run):
    data, index_dir = Path(args.data), Path(args.index)
    ds, splits = load_data(data, run)
    retriever, _ = load_retriever(index_dir, len(ds.vocab), run)
    index = read_index(run.track(index_dir / "index.ergp"))
    model, params = _load_model(Path(args.model), run)
    cfg = replace(cfg, num_retrieved=model.config.num_retrieved, slot_order=model.config.slot_order.value)
    ex = _examples(ds, splits, (args.split,), cfg, index, retriever, model.M)[args.split]
    feats = featurize_examples(ex, model.encoder, cfg.query_chunk_size, cfg.history_chunk_size, model.M)
    return model, params, ex, feats


def cmd_eval(args, cfg: cfgmod.RunConfig) -> None:
    with RunDir(args.out) as run:
        model, params, ex, feats = _eval_setup(args, cfg, run)
        scores = model.predict_proba(params, feats)
        report = MetricReport.compute(scores, feats.labels, cfg.n_boot, cfg.seed)
        report.save(run.path / "metrics.json")
        with open(run.path / "predictions.csv", "w", encoding="utf-8") as fh:
            fh.write("patient_id,stay_ordinal,label,score\n")
            for e, s in zip(ex, scores):
                fh.write(f"{e.patient_id},{e.stay_ordinal},{e.label},{s!r}\n")
        run.manifest("eval", cfg, args.argv, {"split": args.split})
        print(report.to_json())


def cmd_inspect(args, cfg: cfgmod.RunConfig) -> None:
    with RunDir(args.out) as run:
        model, params, ex, feats = _eval_setup(args, cfg, run)
        if args.limit:
            ex, feats = ex[: args.limit], feats.take(np.arange(min(args.limit, len(ex))))
        reports = inspect(model, params, ex, feats, args.top_k)
        write_reports(run.path, reports)
        export_usage(run.path / "prototype_usage.json", model.usage(params, feats))
        run.manifest("inspect", cfg, args.argv, {"split": args.split, "examples": len(reports)})


# parser ---------------------------------------------------------------------


def _globals(parser: argparse.ArgumentParser, suppress: bool) -> None:
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", help="INI config file", **({"default": None} if not suppress else kw))
    parser.add_argument("--seed", type=int, help="global seed", **({"default": None} if not suppress else kw))
    parser.add_argument("--threads", type=int, help="worker threads for batch assembly", **({"default": None} if not suppress else kw))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="timeline-rag", description="Retrieval-augmented prediction over event timelines.")
    _globals(p, suppress=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _globals(common, suppress=True)

    s = sub.add_parser("gen-data", parents=[common], help="generate a synthetic cohort")
    s.add_argument("--out", required=True)
    s.add_argument("--patients", type=int)
    s.add_argument("--signal-strength", type=float)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("build-vocab", parents=[common], help="vocabulary from an events JSONL file")
    s.add_argument("--events", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_vocab)

    s = sub.add_parser("pretrain-mlm", parents=[common], help="masked-event pretraining of the encoder")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain_mlm)

    s = sub.add_parser("build-index", parents=[common], help="chunk, encode and index every timeline")
    s.add_argument("--data", required=True)
    s.add_argument("--encoder", help="pretrain-mlm run directory (default: seeded random encoder)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_index)

    s = sub.add_parser("retrieve", parents=[common], help="dump the top-M chunks for one patient's query")
    s.add_argument("--data", required=True)
    s.add_argument("--index", required=True)
    s.add_argument("--patient", required=True)
    s.add_argument("--stay", type=int, default=-1)
    s.add_argument("--m", type=int, default=24)
    s.add_argument("--out")
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("train", parents=[common], help="fine-tune the full model")
    s.add_argument("--data", required=True)
    s.add_argument("--index", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lambda-u", type=float)
    s.add_argument("--lr", type=float)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--query-only", action="store_true", help="ablation without retrieved history")
    s.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "metrics with bootstrap intervals"), ("inspect", cmd_inspect, "per-example weight reports")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--data", required=True)
        s.add_argument("--index", required=True)
        s.add_argument("--model", required=True)
        s.add_argument("--split", default="test", choices=("train", "val", "test"))
        s.add_argument("--out", required=True)
        if name == "inspect":
            s.add_argument("--top-k", type=int, default=5)
            s.add_argument("--limit", type=int, default=0)
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = cfgmod.load_config(args.config)
        cfg = cfgmod.with_overrides(
            cfg,
            seed=args.seed,
            threads=args.threads,
            patients=getattr(args, "patients", None),
            signal_strength=getattr(args, "signal_strength", None),
            lambda_u=getattr(args, "lambda_u", None),
            lr=getattr(args, "lr", None),
            max_epochs=getattr(args, "max_epochs", None),
        )
        args.func(args, cfg)
    except (CliError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"timeline-rag {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
