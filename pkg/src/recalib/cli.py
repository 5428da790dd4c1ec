"""Command-line entry point: ``recalib <command> [--config PATH] [--seed N] [--out DIR]``.

Every command writes its outputs plus a ``manifest.json`` into the output
directory (default ``$RECALIB_OUT`` or ``./runs``). Outputs contain no
timestamps, so identical inputs give byte-identical CSVs; timestamps live
in the manifest only.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import train
from .config import ExperimentConfig
from .errors import ParameterError, ShapeError, TrainingError, ValidationError
from .model import forward, predict_proba
from .synthgen import read_container, write_container

OUT_ENV = "RECALIB_OUT"


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    started: str
    finished: str = ""
    outputs: list = field(default_factory=list)
    build_id: str = ""
    argv: list = field(default_factory=list)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def build_id():
    """Short digest of the package sources, standing in for a commit id."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def _stamp():
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


# --- config handling ------------------------------------------------------

def load_config(args):
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    for item in args.set or []:
        key, _, value = item.partition("=")
        section, _, name = key.partition(".")
        if not name:
            raise ValidationError(key, "overrides look like section.key=value")
        cfg = _merge(cfg, section, name, value)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg.validate()


def _merge(cfg, section, name, value):
    # round-trip through text so overrides get the same parsing and errors as files
    lines, seen, current = [], False, None
    for line in cfg.to_text().splitlines():
        if line.startswith("["):
            current = line.strip("[]")
        elif current == section and line.split("=")[0].strip() == name:
            line = f"{name} = {value}"
            seen = True
        lines.append(line)
    if not seen:
        raise ValidationError(f"{section}.{name}", "unknown key")
    return ExperimentConfig.from_text("\n".join(lines))


def out_dir(args):
    root = Path(args.out or os.environ.get(OUT_ENV, "runs"))
    root.mkdir(parents=True, exist_ok=True)
    return root


def _data(args, cfg):
    if getattr(args, "data", None):
        d = Path(args.data)
        pool = read_container(d / "train.bin")
        test = read_container(d / "test.bin")
        tr, val = train.split_train_val(pool, cfg.optim.val_fraction, cfg.run.seed)
        return tr, val, test
    return train.make_data(cfg)


def _trained(args, cfg):
    """Load ``--checkpoint`` if given, otherwise train from the config."""
    if getattr(args, "checkpoint", None):
        ckpt = train.load_checkpoint(args.checkpoint)
        model, ckfg = train.model_from_checkpoint(ckpt)
        if args.seed is not None:
            ckfg = ckfg.with_seed(args.seed)
        return ex.Trained(ckfg, train.FitResult(model, ckpt, [], ckpt.epoch), _data(args, ckfg))
    data = _data(args, cfg)
    return ex.Trained(cfg, train.fit(cfg, data, log=_log(args)), data)


def _log(args):
    return (lambda msg: print(msg, file=sys.stderr)) if getattr(args, "verbose", False) else None


# --- commands -------------------------------------------------------------

def cmd_generate(args, cfg, out):
    from .synthgen import Generator

    gen = Generator(cfg.generator)
    paths = [out / "train.bin", out / "test.bin"]
    write_container(paths[0], gen.generate(cfg.run.n_train))
    write_container(paths[1], gen.generate(cfg.run.n_test, offset=train.TEST_OFFSET))
    cfg.save(out / "config.ini")
    return paths + [out / "config.ini"]


def _predictions(out, seqs, probs):
    rows = [{"index": i, "label": s.label, "prob": float(p), "pred": int(p >= 0.5)}
            for i, (s, p) in enumerate(zip(seqs, probs))]
    path = out / "predictions.csv"
    train.write_csv(path, ("index", "label", "prob", "pred"), rows)
    return path


def _metrics_csv(out, m, name="metrics.csv", split="test"):
    path = out / name
    train.write_csv(path, ("split", "accuracy", "precision", "recall", "f1"), [{"split": split, **m.as_dict()}])
    return path


def cmd_train(args, cfg, out):
    data = _data(args, cfg)
    res = train.fit(cfg, data, log=_log(args))
    ckpt_path = out / "checkpoint.rckp"
    train.save_checkpoint(ckpt_path, res.checkpoint)
    hist = out / "history.csv"
    train.write_history(hist, res.history)
    test = data[2]
    probs = predict_proba(res.model, train.stack(test)[0], cfg.stages, cfg.dcr, cfg.ad.beta)
    m = train.metrics_from_predictions([s.label for s in test], probs >= 0.5)
    cfg.save(out / "config.ini")
    return [ckpt_path, hist, _metrics_csv(out, m), _predictions(out, test, probs), out / "config.ini"]


def cmd_eval(args, cfg, out):
    ckpt = train.load_checkpoint(args.checkpoint)
    model, ckfg = train.model_from_checkpoint(ckpt)
    test = _data(args, ckfg)[2]
    x = np.stack([s.frames for s in test])
    probs = predict_proba(model, x, ckfg.stages, ckfg.dcr, ckfg.ad.beta)
    m = train.metrics_from_predictions([s.label for s in test], probs >= 0.5)
    outputs = [_metrics_csv(out, m), _predictions(out, test, probs)]
    if args.trace_graphs:
        outputs.append(trace_graphs(out, model, ckfg, x[: args.trace_graphs]))
    return outputs


def trace_graphs(out, model, cfg, x):
    """A and A_hat of every graph for the first few sequences, one row per matrix entry."""
    res = forward(model, x, cfg.stages, cfg.dcr, cfg.ad.beta)
    rows = []
    for key, (A, A_hat) in sorted(res["graph_adjacency"].items()):
        for name, M in (("A", A.value), ("A_hat", A_hat.value)):
            rows += _matrix_rows(f"stage1_{key}", name, M)
    if res["A_cross"] is not None:
        from .dcr import normalize_adjacency

        Ac = res["A_cross"].value
        rows += _matrix_rows("stage2_cross", "A", Ac)
        rows += _matrix_rows("stage2_cross", "A_hat", normalize_adjacency(Ac).value)
    path = out / "graphs.csv"
    train.write_csv(path, ("graph", "matrix", "sample", "i", "j", "value"), rows)
    return path


def _matrix_rows(graph, name, M):
    return [{"graph": graph, "matrix": name, "sample": b, "i": i, "j": j, "value": float(M[b, i, j])}
            for b in range(M.shape[0]) for i in range(M.shape[1]) for j in range(M.shape[2])]


ABLATION_COLUMNS = ("row", "config_hash", "best_epoch") + ex.METRIC_COLUMNS


def cmd_ablate(args, cfg, out):
    rows = ex.ablate(cfg, log=_log(args))
    path = out / "ablation.csv"
    train.write_csv(path, ABLATION_COLUMNS, rows)
    outputs = [path]
    if args.graph_signs:
        sign_rows = ex.ablate(cfg, rows=[
            ("graph_sign=" + s, cfg.override("dcr", graph_loss_sign=s)) for s in ("flipped", "verbatim")])
        p2 = out / "graph_sign.csv"
        train.write_csv(p2, ABLATION_COLUMNS, sign_rows)
        outputs.append(p2)
    return outputs


def cmd_ea_test(args, cfg, out):
    rows = ex.ea_test(_trained(args, cfg))
    path = out / "ea_test.csv"
    train.write_csv(path, ("intensity", "model", "accuracy", "mean_ea_err", "tau"), rows)
    return [path]


def cmd_recombine(args, cfg, out):
    rows = ex.recombine(_trained(args, cfg), n_pairs=args.pairs)
    path = out / "recombine.csv"
    train.write_csv(path, ("row", "core", "shell", "core_label", "agreement", "n"), rows)
    return [path]


def cmd_probe_noise(args, cfg, out):
    rows = ex.probe_noise(_trained(args, cfg), n=args.n)
    path = out / "probe_noise.csv"
    train.write_csv(path, ("features", "accuracy", "n_identities", "n"), rows)
    return [path]


def cmd_trace_afr(args, cfg, out):
    ids = [int(v) for v in args.samples.split(",")] if args.samples else [0]
    rows = ex.trace_afr(_trained(args, cfg), ids, inject=not args.no_inject)
    path = out / "trace_afr.csv"
    train.write_csv(path, ("sample", "t", "w_t", "emotion_intensity", "burst", "label"), rows)
    return [path]


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
    "ea-test": cmd_ea_test, "recombine": cmd_recombine, "probe-noise": cmd_probe_noise, "trace-afr": cmd_trace_afr,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="overrides run and data seed")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")

    p = argparse.ArgumentParser(prog="recalib", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write train/test sequence containers")
    t = sub.add_parser("train", parents=[common], help="fit the pipeline, write checkpoint and metrics")
    t.add_argument("--data", help="directory with train.bin/test.bin from `generate`")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--trace-graphs", type=int, default=0, metavar="N",
                   help="also dump A and A_hat for the first N test sequences")
    a = sub.add_parser("ablate", parents=[common], help="stage ablations and hyperparameter grids")
    a.add_argument("--graph-signs", action="store_true", help="also compare both graph-loss signs")
    for name, helptext in (("ea-test", "burst-intensity robustness vs the naive baseline"),
                           ("recombine", "counterfactual core/shell recombination"),
                           ("probe-noise", "identity probe on F_n, F_d and raw frames"),
                           ("trace-afr", "per-frame attention weights")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--checkpoint", help="use a trained checkpoint instead of training")
        s.add_argument("--data")
        if name == "recombine":
            s.add_argument("--pairs", type=int, default=100)
        if name == "probe-noise":
            s.add_argument("--n", type=int, default=None, help="probe on N fresh sequences instead of the run data")
        if name == "trace-afr":
            s.add_argument("--samples", help="comma-separated test-set indices (default 0)")
            s.add_argument("--no-inject", action="store_true", help="trace without positive bursts")
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except ValidationError as exc:
        print(f"recalib: invalid config: {exc}", file=sys.stderr)
        return 2
    out = out_dir(args)
    manifest = RunManifest(args.command, cfg.hash(), cfg.run.seed, _stamp(), build_id=build_id(), argv=argv)
    try:
        outputs = COMMANDS[args.command](args, cfg, out)
    except ValidationError as exc:
        print(f"recalib: invalid config: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, ParameterError, ShapeError, OSError, ValueError) as exc:
        print(f"recalib {args.command}: {exc}", file=sys.stderr)
        return 1
    manifest.finished = _stamp()
    manifest.outputs = [str(p) for p in outputs]
    mpath = out / "manifest.json"
    manifest.outputs.append(str(mpath))
    manifest.write(mpath)
    for p in manifest.outputs:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
