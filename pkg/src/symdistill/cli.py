"""``symdistill`` command line.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import ConfigError, parse_config

log = logging.getLogger("symdistill")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_ckpt(p):
    p.add_argument("checkpoint", help="SYMC checkpoint")
    p.add_argument("features", help="SYMF feature file")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="symdistill", description="Symbolic-sequence distillation from frozen teacher features.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a student from a config file")
    p.add_argument("config")
    p.add_argument("--resume", help="continue from a SYMC checkpoint")
    p.add_argument("--stop-epoch", type=int)

    p = sub.add_parser("probe", help="kNN / linear / subsequence probing")
    psub = p.add_subparsers(dest="probe_kind", parser_class=_Parser)
    for kind in ("knn", "linear", "subseq"):
        q = psub.add_parser(kind)
        q.add_argument("checkpoint")
        q.add_argument("train_features")
        q.add_argument("eval_features")
        q.add_argument("--representation", default="student_pooled",
                       choices=["student_pooled", "student_aggregated", "teacher_feature"])
        q.add_argument("--prefix", type=int)
        q.add_argument("--csv", help="also write the report as CSV")
        if kind == "knn":
            q.add_argument("--k", type=int, nargs="+", default=[10, 20, 100, 200])
        elif kind == "subseq":
            q.add_argument("--k", type=int, default=20)
        else:
            q.add_argument("--epochs", type=int, default=100)
            q.add_argument("--lr", type=float, default=1e-2)

    p = sub.add_parser("generate", help="dump generated symbol ids as TSV")
    _add_ckpt(p)
    p.add_argument("--out", help="output TSV (default stdout)")
    p.add_argument("--views", type=int, nargs="+", default=[0])

    p = sub.add_parser("attend", help="export per-symbol attention maps for one sample")
    _add_ckpt(p)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--scale", type=int, default=16)
    p.add_argument("--head", type=int, help="export one head instead of the head mean")
    p.add_argument("--csv", action="store_true", help="write raw weights next to each PGM")
    p.add_argument("--out-dir", default="attn")

    p = sub.add_parser("symbol-scan", help="attention maps of one symbol across one class")
    _add_ckpt(p)
    p.add_argument("--symbol", type=int, required=True)
    p.add_argument("--class-id", type=int, required=True)
    p.add_argument("--scale", type=int, default=16)
    p.add_argument("--out-dir", default="scan")

    p = sub.add_parser("selfcheck", help="run the gradient / distribution / oracle checks")
    p.add_argument("--quick", action="store_true", help="fewer Monte-Carlo draws")

    p = sub.add_parser("features", help="feature file utilities")
    fsub = p.add_subparsers(dest="features_cmd", parser_class=_Parser)
    q = fsub.add_parser("info")
    q.add_argument("path")
    q = fsub.add_parser("synth", help="write a Gaussian-cluster train/eval pair")
    q.add_argument("train_out")
    q.add_argument("eval_out")
    q.add_argument("--n-train", type=int, default=600)
    q.add_argument("--n-eval", type=int, default=200)
    q.add_argument("--classes", type=int, default=10)
    q.add_argument("--d-t", type=int, default=64)
    q.add_argument("--views", type=int, default=2)
    q.add_argument("--seed", type=int, default=0)
    return ap


def _cmd_train(args) -> None:
    from .trainer import load_features_for, train

    cfg = parse_config(args.config, require=("train_features",))
    print(cfg.to_text(), end="")
    train_fs, eval_fs = load_features_for(cfg)
    path = train(cfg, train_fs, eval_fs, resume_from=args.resume, stop_epoch=args.stop_epoch)
    print(f"checkpoint: {path}")


def _cmd_probe(args) -> None:
    from . import probe
    from .featstore import read_features
    from .trainer import load_model

    if args.probe_kind is None:
        raise UsageError("probe needs one of: knn, linear, subseq")
    model, cfg, _ = load_model(args.checkpoint)
    tr = read_features(args.train_features)
    ev = read_features(args.eval_features)
    if tr.labels is None or ev.labels is None:
        raise RuntimeError("probing needs labelled feature files")
    n_classes = max(tr.n_classes, ev.n_classes)
    rows = []
    if args.probe_kind == "subseq":
        for n, (t1, t5) in probe.subsequence_report(model, cfg, tr, ev, args.k).items():
            rows.append({"probe": "knn", "representation": "student_pooled", "prefix_n": n,
                         "k": args.k, "top1": t1, "top5": t5})
    else:
        a = probe.extract_embeddings(model, cfg, tr, args.representation, args.prefix)
        b = probe.extract_embeddings(model, cfg, ev, args.representation, args.prefix)
        if args.probe_kind == "knn":
            rep = probe.knn_classify(a, tr.labels, b, ev.labels, args.k, cfg.train.knn_temp, n_classes)
        else:
            rep = probe.linear_probe(a, tr.labels, b, ev.labels, args.epochs, args.lr, n_classes=n_classes)
        rep.representation, rep.prefix_n = args.representation, args.prefix
        rows = list(rep.rows())
    print(probe.format_table(rows))
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(probe.format_csv(rows))


def _cmd_generate(args) -> None:
    import torch

    from .featstore import read_features
    from .seqgen import generate
    from .trainer import load_model

    model, cfg, _ = load_model(args.checkpoint)
    fs = read_features(args.features)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        model.eval()
        with torch.no_grad():
            for v in args.views:
                fs.view(0, v)
                for s in range(0, fs.n_samples, 256):
                    patches = torch.from_numpy(fs.tokens[s:s + 256, v, 1:])
                    seq = generate(model, cfg.disc, patches, cfg.disc.tau_end, deterministic=True)
                    for b, ids in enumerate(seq.ids.tolist()):
                        out.write(f"{s + b}\t{v}\t{','.join(map(str, ids))}\n")
    finally:
        if out is not sys.stdout:
            out.close()


def _cmd_attend(args) -> None:
    from .featstore import read_features
    from .interpret import attention_maps, export_pgm, write_weights_csv
    from .trainer import load_model

    model, cfg, _ = load_model(args.checkpoint)
    fs = read_features(args.features)
    maps = attention_maps(model, cfg, fs, args.sample, args.view, head=args.head)
    os.makedirs(args.out_dir, exist_ok=True)
    for m in maps:
        stem = os.path.join(args.out_dir, f"n{args.sample}_v{args.view}_p{m.position}_s{m.token_id}")
        export_pgm(m, args.scale, stem + ".pgm")
        if args.csv:
            write_weights_csv(m, stem + ".csv")
        print(f"{m.position}\t{m.token_id}\t{stem}.pgm")


def _cmd_symbol_scan(args) -> None:
    from .featstore import read_features
    from .interpret import symbol_scan
    from .trainer import load_model

    model, cfg, _ = load_model(args.checkpoint)
    fs = read_features(args.features)
    res = symbol_scan(model, cfg, fs, args.symbol, args.class_id, args.out_dir, scale=args.scale)
    print(f"symbol {args.symbol} in class {args.class_id}: {res.count} occurrences "
          f"in {res.n_sequences} sequences (rate {res.frequency:.4f} per sequence)")


def _cmd_features(args) -> None:
    from .featstore import read_features, write_features

    if args.features_cmd == "info":
        fs = read_features(args.path)
        print(f"N = {fs.n_samples}\nV = {fs.n_views}\ngrid = {fs.grid_h}x{fs.grid_w}\nd_t = {fs.d_t}")
        print(f"labels = {'yes (%d classes)' % fs.n_classes if fs.labels is not None else 'no'}")
    elif args.features_cmd == "synth":
        from .synthetic import cluster_features

        tr, ev = cluster_features(args.n_train, args.n_eval, args.classes, args.d_t, args.views, seed=args.seed)
        write_features(tr, args.train_out)
        write_features(ev, args.eval_out)
    else:
        raise UsageError("features needs one of: info, synth")


def _cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    return 0 if run_all(quick=args.quick) else 2


COMMANDS = {
    "train": _cmd_train,
    "probe": _cmd_probe,
    "generate": _cmd_generate,
    "attend": _cmd_attend,
    "symbol-scan": _cmd_symbol_scan,
    "features": _cmd_features,
    "selfcheck": _cmd_selfcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        rc = COMMANDS[args.command](args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (ConfigError, OSError, ValueError, IndexError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
