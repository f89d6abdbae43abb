"""a2net command line.

Settings resolve as: built-in defaults, then ``--config FILE`` (flat
``key = value`` lines), then ``--set key=value``, then explicit flags.
Every run writes ``config.resolved`` into its output directory. Exit codes:
0 success, 1 runtime failure, 2 invalid input or config.
"""

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as dk
from . import experiments as ex
from . import hashindex as hx
from . import metrics as mx
from . import objectives as obj
from .model import A2Net, CheckpointError, ConfigError, ModelConfig
from .trainer import TrainConfig, TrainingError, train

log = logging.getLogger("a2net")

ABLATE = {"feature_recon": ("feat_x", "feat_v"), "decorrelation": ("decor",),
          "image_recon": ("img_g", "img_gp"), "image_g": ("img_g",), "image_gp": ("img_gp",)}


class UsageError(ValueError):
    pass


def _fmt(x):
    return f"{x:.6f}" if isinstance(x, (float, np.floating)) else str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_config_file(path):
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _shape(text):
    try:
        shape = tuple(int(s) for s in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must be C,H,W integers, got {text!r}")
    if len(shape) != 3:
        raise argparse.ArgumentTypeError(f"shape must have 3 entries, got {text!r}")
    return shape


def _int_list(text):
    return [int(s) for s in str(text).split(",") if s]


# ------------------------------------------------------------------ codes I/O


def write_codes(path, ids, labels, attributes, codes):
    k = codes.shape[1]
    rows = []
    for i, (idx, lbl) in enumerate(zip(ids, labels)):
        attrs = "" if attributes is None else ";".join(str(a) for a in attributes[i])
        rows.append([int(idx), int(lbl), attrs] + [int(b) for b in codes[i]])
    write_csv(path, ["id", "label", "attributes"] + [f"b{j}" for j in range(k)], rows)


def read_codes(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][:3] != ["id", "label", "attributes"]:
        raise UsageError(f"{path}: not a codes CSV")
    body = rows[1:]
    ids = np.array([int(r[0]) for r in body], dtype=np.int64)
    labels = np.array([int(r[1]) for r in body], dtype=np.int64)
    attrs = [tuple(int(a) for a in r[2].split(";") if a) for r in body]
    codes = np.array([[int(b) for b in r[3:]] for r in body], dtype=np.int8).reshape(len(body), len(rows[0]) - 3)
    if codes.size and not np.isin(codes, (-1, 1)).all():
        raise UsageError(f"{path}: code entries must be -1 or +1")
    return ids, labels, attrs, codes


def _load_model(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return A2Net.load(path)


def _load_data(path):
    if not Path(path).is_dir():
        raise UsageError(f"dataset directory not found: {path}")
    return dk.load_manifest(path)


# ---------------------------------------------------------------- subcommands


def cmd_make_dataset(a, out):
    if a.kind == "synthetic":
        ds = dk.make_synthetic(a.classes, a.per_class, a.shape, a.difficulty, a.seed, a.query_per_class)
    elif a.kind == "simple":
        ds = dk.make_simple_shapes(a.classes, a.per_class, a.shape, a.seed, a.query_per_class)
    else:
        if not a.simple or not a.complex:
            raise UsageError("concat needs --simple DIR and --complex DIR")
        ds = dk.make_concat_dataset(dk.ConcatSpec(_load_data(a.simple), _load_data(a.complex)), a.seed)
    if a.mask:
        ds = dk.mask_part(ds, a.mask)
    dk.save_manifest(ds, out)
    print(f"wrote {ds.count} items {ds.image_shape} to {out}")


def _split_ids(ds, protocol, ratio, seed, role):
    """Database/query ids; zero-shot keeps seen classes for training, unseen for evaluation."""
    ids = ds.indices("database", "train") if role == "train" else None
    if protocol == "standard":
        return ids
    seen, unseen = mx.zero_shot_split(ds.labels, ratio, seed)
    keep = set(seen if role == "train" else unseen)
    mask = np.array([int(l) in keep for l in ds.labels])
    return np.flatnonzero(mask)


def cmd_train(a, out):
    ds = _load_data(a.data)
    terms = list(ex.SB_VARIANTS["a2net++"] if a.variant == "plus_plus" else ex.SB_VARIANTS["a2net"])
    for name in a.ablate or []:
        terms = [t for t in terms if t not in ABLATE[name]]
    if not any(t in terms for t in obj.IMAGE_TERMS):
        variant = "basic"
    else:
        variant = "plus_plus"
    if not terms:
        raise UsageError("every loss term was ablated")
    cfg = TrainConfig(epochs=a.epochs, iterations=a.iterations, lr=a.lr, lr_drop_iteration=a.lr_drop,
                      batch_size=a.batch_size, seed=a.seed, variant=variant, terms=tuple(terms),
                      mnist_cifar=ds.meta.get("kind") == "concat", z_refresh=a.z_refresh,
                      momentum=a.momentum, weight_decay=a.weight_decay)
    mcfg = ModelConfig(k=a.k, image_shape=ds.image_shape, seed=a.seed, variant=variant)
    db = _split_ids(ds, a.protocol, a.ratio, a.seed, "train")
    if "decorrelation" in (a.ablate or []):
        log.info("decorrelation ablated: alpha = 0")
    res = train(cfg, ds, mcfg, out_dir=out, db_ids=db)
    last = res.history[-1]["total"] if res.history else float("nan")
    print(f"trained {len(res.history)} iterations; final loss {last:.6f}; checkpoint {res.checkpoint}")


def cmd_encode(a, out):
    model = _load_model(a.model)
    ds = _load_data(a.data)
    ids = ds.indices(*a.split) if a.split else np.arange(ds.count)
    codes = model.encode(ds.batch(ids))
    attrs = None if ds.attributes is None else [ds.attributes[i] for i in ids]
    write_codes(out / "codes.csv", ids, ds.labels[ids], attrs, codes)
    print(f"encoded {len(ids)} items to {out / 'codes.csv'}")


def cmd_index(a, out):
    ids, labels, _, codes = read_codes(a.codes)
    index = hx.HashIndex.build(codes, ids=ids, labels=labels)
    index.save(out / "index.a2ix")
    print(f"indexed {len(index)} codes of {index.k} bits to {out / 'index.a2ix'}")


def cmd_query(a, out):
    index = hx.HashIndex.load(a.index) if Path(a.index).is_file() else None
    if index is None:
        raise UsageError(f"index not found: {a.index}")
    model = _load_model(a.model)
    ds = _load_data(a.data)
    if not 0 <= a.item < ds.count:
        raise UsageError(f"item {a.item} outside dataset of {ds.count}")
    code = hx.pack(model.encode(ds.image(a.item))[0])
    hits = hx.search_topk(code, index, a.topk)
    write_csv(out / "results.csv", ["id", "distance"], hits)
    for idx, dist in hits:
        print(f"{idx},{dist}")


def _eval_inputs(a):
    if a.query_codes and a.db_codes:
        qi, ql, qa, qc = read_codes(a.query_codes)
        di, dl, da, dc = read_codes(a.db_codes)
        return qi, ql, qa, qc, di, dl, da, dc
    if not (a.model and a.data):
        raise UsageError("eval needs --model and --data, or --query-codes and --db-codes")
    model = _load_model(a.model)
    ds = _load_data(a.data)
    q, d = ds.indices("query"), ds.indices("database")
    if a.protocol == "zero-shot":
        unseen = set(_split_ids(ds, a.protocol, a.ratio, a.seed, "eval").tolist())
        q = np.array([i for i in q if i in unseen], dtype=np.int64)
        d = np.array([i for i in d if i in unseen], dtype=np.int64)
    attrs = ds.attributes or [()] * ds.count
    return (q, ds.labels[q], [attrs[i] for i in q], model.encode(ds.batch(q)),
            d, ds.labels[d], [attrs[i] for i in d], model.encode(ds.batch(d)))


def cmd_eval(a, out):
    qi, ql, qa, qc, di, dl, da, dc = _eval_inputs(a)
    if len(qi) == 0 or len(di) == 0:
        raise UsageError("empty query or database set")
    if a.metric == "map":
        value = mx.retrieval_map(qc, dc, ql, dl, db_ids=di, query_ids=qi)
        name = "mAP"
    else:
        if any(len(s) == 0 for s in qa):
            raise UsageError("ndcg needs non-empty attribute sets for every query")
        value = mx.retrieval_ndcg(qc, dc, qa, da, a.k, db_ids=di, query_ids=qi)
        name = f"NDCG@{a.k}"
    write_csv(out / "metrics.csv", ["metric", "protocol", "queries", "database", "value"],
              [[name, a.protocol, len(qi), len(di), float(value)]])
    print(f"{name},{value:.6f}")


def cmd_sbexp(a, out):
    rows = []
    for k in a.bits:
        rows += ex.simplicity_bias(seeds=a.seeds, k=k, epochs=a.epochs, iterations=a.iterations,
                                   variants=a.variants, out_dir=out / "heatmaps", heatmaps=a.heatmaps)
    write_csv(out / "sbexp.csv", ["variant", "bits", "seed", "test_set", "mAP"], rows)
    for r in rows:
        print(",".join(_fmt(v) for v in r))


def cmd_gradcheck(a, out):
    terms = a.term or None
    results = ex.gradcheck(terms, seed=a.seed, eps=a.eps)
    rows, failed = [], False
    for name, res in results.items():
        ok = res.ok and res.max_error <= a.tol
        failed |= not ok
        rows.append([name, "pass" if ok else "fail", float(res.max_error)])
        print(f"{name}: {'PASS' if ok else 'FAIL'} max_rel_error={res.max_error:.3e}")
        if not ok:
            print(f"  worst param {res.worst[0]} coord {res.worst[1]}: analytic {res.analytic:.6e} "
                  f"numeric {res.numeric:.6e}; non-finite at {res.nonfinite[:5]}")
    write_csv(out / "gradcheck.csv", ["term", "status", "max_rel_error"], rows)
    return 1 if failed else 0


# --------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="a2net", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output directory (env A2NET_OUT also works)")
    p.add_argument("--config", default=None, help="flat key = value settings file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-dataset", help="write a synthetic, simple-shape or concat dataset")
    s.add_argument("kind", choices=["synthetic", "simple", "concat"])
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--query-per-class", type=int, default=0)
    s.add_argument("--shape", type=_shape, default=None)
    s.add_argument("--difficulty", type=float, default=0.5)
    s.add_argument("--simple", default=None)
    s.add_argument("--complex", default=None)
    s.add_argument("--mask", choices=["simple", "complex"], default=None, help="zero this part")
    s.set_defaults(func=cmd_make_dataset)

    s = sub.add_parser("train", help="train a model; writes model.a2ck and loss.csv")
    s.add_argument("--data", required=True)
    s.add_argument("--variant", choices=["basic", "plus_plus"], default="plus_plus")
    s.add_argument("--ablate", action="append", choices=sorted(ABLATE), default=None)
    s.add_argument("--k", type=int, default=12)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--iterations", type=int, default=50)
    s.add_argument("--lr", type=float, default=TrainConfig.lr)
    s.add_argument("--lr-drop", type=int, default=0)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--z-refresh", type=int, default=1)
    s.add_argument("--momentum", type=float, default=0.0)
    s.add_argument("--weight-decay", type=float, default=1e-4)
    s.add_argument("--protocol", choices=["standard", "zero-shot"], default="standard")
    s.add_argument("--ratio", type=float, default=0.5)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("encode", help="binary codes for dataset items")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", action="append", choices=list(dk.SPLITS), default=None)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("index", help="pack a codes CSV into an index file")
    s.add_argument("--codes", required=True)
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("query", help="top-K Hamming search for one dataset item")
    s.add_argument("--index", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--item", type=int, required=True)
    s.add_argument("--topk", type=int, default=10)
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("eval", help="mAP or NDCG@k of query codes against database codes")
    s.add_argument("--model", default=None)
    s.add_argument("--data", default=None)
    s.add_argument("--query-codes", default=None)
    s.add_argument("--db-codes", default=None)
    s.add_argument("--metric", choices=["map", "ndcg"], default="map")
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--protocol", choices=["standard", "zero-shot"], default="standard")
    s.add_argument("--ratio", type=float, default=0.5)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sbexp", help="simplicity-bias study on concat data")
    s.add_argument("--bits", type=_int_list, default=[12])
    s.add_argument("--seeds", type=_int_list, default=[0])
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--iterations", type=int, default=50)
    s.add_argument("--variants", type=lambda t: t.split(","), default=["baseline", "a2net", "a2net++"])
    s.add_argument("--heatmaps", type=int, default=4)
    s.set_defaults(func=cmd_sbexp)

    s = sub.add_parser("gradcheck", help="finite-difference check of the loss terms")
    s.add_argument("--term", action="append", choices=list(ex.GRADCHECK_TERMS) + ["composite"], default=None)
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return p


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        return action.choices[name]


def resolve(argv):
    """Parse ``argv`` with config-file and ``--set`` values as defaults."""
    parser = build_parser()
    a = parser.parse_args(argv)
    settings = read_config_file(a.config) if a.config else {}
    for item in a.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        settings[key.strip().replace("-", "_")] = value.strip()
    if settings:
        sub = _subparser(parser, a.command)
        known = {act.dest: act for act in sub._actions} | {act.dest: act for act in parser._actions}
        unknown = sorted(set(settings) - set(known) - {"func", "help"})
        if unknown:
            raise UsageError(f"unknown setting(s) {unknown} for {a.command}")
        typed = {}
        for key, value in settings.items():
            act = known[key]
            try:
                v = act.type(value) if act.type else value
            except (argparse.ArgumentTypeError, ValueError) as e:
                raise UsageError(f"setting {key}: {e}")
            if act.choices is not None and v not in act.choices:
                raise UsageError(f"setting {key}: {v!r} not in {sorted(act.choices)}")
            if isinstance(act, argparse._AppendAction):
                v = [v]
            typed[key] = v
        top = {k: v for k, v in typed.items() if k in {x.dest for x in parser._actions}}
        parser.set_defaults(**top)
        sub.set_defaults(**{k: v for k, v in typed.items() if k not in top})
        a = parser.parse_args(argv)
    return a


def write_snapshot(a, out):
    keys = sorted(k for k in vars(a) if k not in ("func", "set", "config"))
    lines = []
    for key in keys:
        v = getattr(a, key)
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key} = {'' if v is None else v}")
    (out / "config.resolved").write_text("\n".join(lines) + "\n")


def main(argv=None):
    try:
        a = resolve(sys.argv[1:] if argv is None else argv)
    except SystemExit as e:  # argparse usage errors exit 2 already
        return int(e.code or 0)
    except (UsageError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    out = Path(a.out or os.environ.get("A2NET_OUT") or Path("runs") / a.command)
    try:
        if a.command == "make-dataset":
            if a.shape is None:
                a.shape = (1, 16, 16) if a.kind == "simple" else (3, 16, 16)
        out.mkdir(parents=True, exist_ok=True)
        write_snapshot(a, out)
        return int(a.func(a, out) or 0)
    except (UsageError, ConfigError, CheckpointError, dk.DatasetError, hx.HashIndexError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (TrainingError, OSError, RuntimeError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
