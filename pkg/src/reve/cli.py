"""Command-line entry point.

Every subcommand resolves a run configuration (defaults, then --config,
then --override key=value pairs, then --seed/--out), writes it to
``<out>/config.json`` next to its artifacts, and exits 0. Failures exit
nonzero after printing a JSON error record to stderr (also saved to
``<out>/error.json`` when the directory is writable).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path

import numpy as np
import torch

from . import config as runcfg
from .eeg_data import EegRecording, load_corpus, preprocess, save_corpus, sinusoid_corpus, synth_generate
from .finetune import (
    Classifier,
    LabeledSet,
    checksum,
    embed_dataset,
    evaluate,
    lora_merge,
    ncm_few_shot,
    probe_model,
    soup,
    two_step_finetune,
)
from .flops import flops_estimate
from .model import ConfigError, ModelConfig, load_checkpoint, save_checkpoint
from .optim import ScheduleConfig, wsd_lr
from .patching import PatchConfig
from .pretrain import REVE, Pretrainer, load_model, make_samples

EXIT_CONFIG = 2
EXIT_FAILURE = 1


# --------------------------------------------------------------------------
# shared plumbing


def _out_dir(rc: runcfg.RunConfig) -> Path:
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.save(out / "config.json")
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable), encoding="utf-8")


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _synthesize(rc: runcfg.RunConfig) -> list[EegRecording]:
    s = rc.synth
    if s.kind == "sinusoid":
        return sinusoid_corpus(
            s.recordings_per_class * s.n_classes, channels=s.channels, duration=s.duration,
            rate=s.sample_rate, freqs=[p[0] for p in s.peaks_per_class], seed=rc.seed,
        )
    if s.kind == "spectral":
        return synth_generate(rc.synth_spec())
    raise ConfigError([f"synth.kind must be 'spectral' or 'sinusoid', got {s.kind!r}"])


def _recordings(rc: runcfg.RunConfig) -> list[EegRecording]:
    """The configured corpus (or a synthetic one), preprocessed.

    Preprocessing is idempotent, so an already preprocessed corpus passes
    through unchanged up to float32 rounding.
    """
    raw = load_corpus(rc.data.corpus) if rc.data.corpus else _synthesize(rc)
    recs = preprocess(raw, rc.preprocess)
    if not recs:
        raise ValueError("no recordings survive the duration filter")
    return recs


def _patch(rc: runcfg.RunConfig) -> PatchConfig:
    return PatchConfig(rc.pretrain.patch_w, rc.pretrain.patch_o)


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError([f"data.{what} is required for this command"])
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"data.{what} {str(p)!r} does not exist")
    return p


def _split(n: int, labels: np.ndarray, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split into (train, test) indices."""
    from sklearn.model_selection import train_test_split

    idx = np.arange(n)
    tr, te = train_test_split(idx, test_size=frac, random_state=seed, stratify=labels)
    return np.sort(tr), np.sort(te)


def _labeled(rc: runcfg.RunConfig, model: REVE | None = None) -> tuple[LabeledSet, LabeledSet]:
    recs = _recordings(rc)
    if any(r.label is None for r in recs):
        raise ValueError("this command needs labeled recordings")
    if rc.data.keep_channels:
        recs = [r.select(rc.data.keep_channels) for r in recs]
    dtype = next(model.parameters()).dtype if model is not None else torch.float32
    data = LabeledSet.from_recordings(recs, _patch(rc), dtype)
    tr, te = _split(len(data), data.labels.numpy(), rc.data.test_fraction, rc.seed)
    return data.subset(tr), data.subset(te)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(rc):
    out = _out_dir(rc)
    recs = _synthesize(rc)
    save_corpus(recs, out / "corpus")
    return {"recordings": len(recs), "corpus": str(out / "corpus")}


def cmd_preprocess(rc):
    src = _require(rc.data.corpus, "corpus")
    out = _out_dir(rc)
    raw = load_corpus(src)
    recs = preprocess(raw, rc.preprocess)
    save_corpus(recs, out / "corpus")
    return {"input": len(raw), "kept": len(recs), "corpus": str(out / "corpus")}


def run_pretrain(rc) -> Pretrainer:
    out = _out_dir(rc)
    torch.manual_seed(rc.seed)
    recs = _recordings(rc)
    pc = rc.pretrain_config()
    samples = make_samples(recs, pc.window_seconds, pc.sample_rate)
    model = REVE(rc.model, seed=rc.seed)
    log = out / "train_log.jsonl"
    log.unlink(missing_ok=True)
    trainer = Pretrainer(model, samples, pc, log_path=log)
    if rc.data.checkpoint:
        trainer.load(_require(rc.data.checkpoint, "checkpoint"))
    trainer.run()
    trainer.save(out / "checkpoint", {"run_config": rc.to_dict()})
    return trainer


def cmd_pretrain(rc):
    trainer = run_pretrain(rc)
    h = trainer.history
    first = float(np.mean([e["primary"] for e in h[:10]])) if h else None
    last = float(np.mean([e["primary"] for e in h[-10:]])) if h else None
    return {"steps": trainer.step, "primary_first10": first, "primary_last10": last, "checkpoint": str(Path(rc.out) / "checkpoint")}


def cmd_embed(rc):
    model = load_model(_require(rc.data.checkpoint, "checkpoint"))
    out = _out_dir(rc)
    recs = _recordings(rc)
    data = LabeledSet.from_recordings(
        [r if r.label is not None else r.with_data(r.data, label=-1) for r in recs], _patch(rc)
    )
    feats = {pool: embed_dataset(model, data, pool) for pool in ("mean", "attention")}
    np.savez(out / "embeddings.npz", labels=data.labels.numpy(), **feats)
    return {"n": len(data), "dim": int(feats["mean"].shape[1]), "file": str(out / "embeddings.npz")}


def cmd_probe(rc):
    model = load_model(_require(rc.data.checkpoint, "checkpoint"))
    out = _out_dir(rc)
    train, test = _labeled(rc, model)
    res = probe_model(model, train, test, rc.probe)
    _write_json(out / "metrics.json", res.metrics)
    return res.metrics


def _save_classifier(clf: Classifier, directory: Path, meta: dict) -> None:
    save_checkpoint(directory, dict(clf.state_dict()), meta)


def _load_classifier(directory: Path) -> tuple[Classifier, dict]:
    tensors, meta = load_checkpoint(directory)
    if meta.get("kind") != "finetune":
        raise ValueError(f"{directory} is not a fine-tuned checkpoint")
    backbone = REVE(ModelConfig.from_dict(meta["model_config"]))
    clf = Classifier(backbone, meta["n_classes"], meta["pooling"], 0.0, n_tokens=meta["n_tokens"])
    clf.load_state_dict(tensors)
    return clf, meta


def finetune_one(raw: dict, seed: int, out: str) -> dict:
    """One fine-tuning run; module-level so worker processes can import it."""
    rc = runcfg.resolve(raw, overrides=[f"finetune.seed={seed}"], seed=raw["seed"], out=out)
    torch.manual_seed(seed)
    model = load_model(_require(rc.data.checkpoint, "checkpoint"))
    train_all, test = _labeled(rc, model)
    tr, va = _split(len(train_all), train_all.labels.numpy(), 0.2, seed)
    n_classes = int(max(train_all.labels.max(), test.labels.max())) + 1
    res = two_step_finetune(model, train_all.subset(tr), train_all.subset(va), rc.finetune, n_classes)
    clf = res.model
    lora_merge(clf.backbone.encoder)
    _, metrics = evaluate(clf, test)
    outp = Path(out)
    outp.mkdir(parents=True, exist_ok=True)
    rc.save(outp / "config.json")
    C, p = train_all.patches.shape[1:3]
    meta = {
        "kind": "finetune", "model_config": model.cfg.to_dict(), "n_classes": n_classes,
        "pooling": rc.finetune.pooling, "n_tokens": int(C * p), "seed": seed, "run_config": rc.to_dict(),
    }
    _save_classifier(clf, outp / "checkpoint", meta)
    with open(outp / "history.jsonl", "w", encoding="utf-8") as fh:
        for e in res.history:
            fh.write(json.dumps(e) + "\n")
    _write_json(outp / "metrics.json", metrics)
    return metrics


def _map_runs(raw: dict, seeds: list[int], base: Path, parallel: int) -> list[dict]:
    jobs = [(raw, s, str(base / f"seed{s}")) for s in seeds]
    if parallel <= 1:
        return [finetune_one(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=parallel, mp_context=get_context("spawn")) as pool:
        return list(pool.map(finetune_one, *zip(*jobs)))


def _aggregate(runs: list[dict]) -> dict:
    keys = sorted({k for r in runs for k, v in r.items() if isinstance(v, (int, float)) and not isinstance(v, bool)})
    out = {}
    for k in keys:
        vals = [r[k] for r in runs if r.get(k) is not None]
        out[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
    return out


def cmd_finetune(rc, parallel: int = 1):
    out = _out_dir(rc)
    seeds = [int(s) for s in rc.eval.seeds]
    runs = _map_runs(rc.to_dict(), seeds, out, parallel)
    summary = {"seeds": seeds, "runs": runs, "aggregate": _aggregate(runs)}
    _write_json(out / "metrics.json", summary)
    _metrics_csv(out / "metrics.csv", seeds, runs)
    return summary["aggregate"]


def _metrics_csv(path: Path, seeds, runs) -> None:
    keys = sorted({k for r in runs for k, v in r.items() if not isinstance(v, (list, dict, str))})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", *keys])
        for s, r in zip(seeds, runs):
            w.writerow([s, *[r.get(k) for k in keys]])


def cmd_soup(rc, parallel: int = 1):
    """Average fine-tuned checkpoints; without data.checkpoints, fine-tune one per eval seed first."""
    out = _out_dir(rc)
    if rc.data.checkpoints:
        dirs = [_require(d, "checkpoints") for d in rc.data.checkpoints]
    else:
        seeds = [int(s) for s in rc.eval.seeds]
        _map_runs(rc.to_dict(), seeds, out / "members", parallel)
        dirs = [out / "members" / f"seed{s}" / "checkpoint" for s in seeds]
    loaded = [load_checkpoint(d) for d in dirs]
    cfgs = {json.dumps(m["model_config"], sort_keys=True) for _, m in loaded}
    if len(cfgs) != 1:
        raise ValueError("soup members have different model configurations")
    avg = soup([t for t, _ in loaded])
    meta = dict(loaded[0][1])
    meta.update(souped_from=[str(d) for d in dirs], run_config=rc.to_dict())
    save_checkpoint(out / "checkpoint", avg, meta)
    return {"members": len(dirs), "checkpoint": str(out / "checkpoint")}


def cmd_eval(rc):
    """Fine-tuned checkpoint: held-out metrics. Pretrained checkpoint: probe + few-shot NCM."""
    ckpt = _require(rc.data.checkpoint, "checkpoint")
    out = _out_dir(rc)
    _, meta = load_checkpoint(ckpt)
    if meta.get("kind") == "finetune":
        clf, _ = _load_classifier(ckpt)
        _, test = _labeled(rc, clf.backbone)
        _, metrics = evaluate(clf, test)
    else:
        model = load_model(ckpt)
        train, test = _labeled(rc, model)
        res = probe_model(model, train, test, rc.probe)
        metrics = dict(res.metrics)
        before = checksum(model)
        emb = embed_dataset(model, LabeledSet(
            torch.cat([train.patches, test.patches]), torch.cat([train.positions, test.positions]),
            torch.cat([train.labels, test.labels]),
        ), rc.probe.pooling)
        labels = np.concatenate([train.labels.numpy(), test.labels.numpy()])
        ncm = ncm_few_shot(emb, labels, rc.eval.n_shots, rc.eval.n_runs, rc.seed)
        metrics["ncm_balanced_accuracy"] = ncm["mean"]
        metrics["ncm_balanced_accuracy_std"] = ncm["std"]
        assert checksum(model) == before
    metrics["channels"] = list(rc.data.keep_channels) if rc.data.keep_channels else "all"
    _write_json(out / "metrics.json", metrics)
    return metrics


def cmd_flops(rc):
    out = _out_dir(rc)
    f = rc.flops
    res = flops_estimate(f.D_tokens, f.N, f.L, f.H, f.Q, f.T_tokens, f.P_throughput, f.mfu)
    _write_json(out / "flops.json", res)
    return res


def cmd_lr_curve(rc):
    out = _out_dir(rc)
    s = rc.schedule
    sched = ScheduleConfig(s.steps_per_epoch, s.n_epochs, s.warmup_frac, s.stable_frac, s.floor_frac, s.cyclic)
    with open(out / "lr_curve.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr"])
        for step in range(sched.total_steps + 1):
            w.writerow([step, repr(wsd_lr(step, sched, rc.optim.lr_peak))])
    return {"steps": sched.total_steps, "file": str(out / "lr_curve.csv")}


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "embed": cmd_embed,
    "probe": cmd_probe,
    "finetune": cmd_finetune,
    "soup": cmd_soup,
    "eval": cmd_eval,
    "flops": cmd_flops,
    "lr-curve": cmd_lr_curve,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="reve", description="EEG masked-autoencoder toolkit")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="artifact directory")
    ap.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted path, JSON value")
    ap.add_argument("--parallel", type=int, default=1, help="worker processes for multi-seed runs")
    return ap


def _error_record(command: str, exc: BaseException) -> dict:
    errors = exc.errors if isinstance(exc, ConfigError) else [str(exc)]
    return {"status": "error", "command": command, "type": type(exc).__name__, "errors": errors}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out_hint = args.out
    try:
        rc = runcfg.load(args.config, args.override, args.seed, args.out)
        out_hint = rc.out
        fn = COMMANDS[args.command]
        result = fn(rc, args.parallel) if args.command in ("finetune", "soup") else fn(rc)
    except Exception as exc:  # reported as a JSON record, never a bare traceback
        record = _error_record(args.command, exc)
        if not isinstance(exc, (ConfigError, FileNotFoundError)):
            record["traceback"] = traceback.format_exc(limit=5)
        print(json.dumps(record), file=sys.stderr)
        if out_hint:
            try:
                Path(out_hint).mkdir(parents=True, exist_ok=True)
                _write_json(Path(out_hint) / "error.json", record)
            except OSError:
                pass
        return EXIT_CONFIG if isinstance(exc, ConfigError) else EXIT_FAILURE
    print(json.dumps({"status": "ok", "command": args.command, "result": result}, default=_jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
