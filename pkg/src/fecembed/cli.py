"""``fecembed`` command-line entry point.

Every command writes a JSON run manifest (resolved configuration, seeds,
input digests, tool version) next to its main output. Exit status: 0 on
success, 2 for usage errors, 3 for data errors, 4 for numeric failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, apps, dataset as ds, metrics, nn, synth, train
from ._accel import backend_name

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("fecembed")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, args: argparse.Namespace, inputs: list, extra: dict | None = None):
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    manifest = {
        "command": command,
        "config": config,
        "seeds": {k: v for k, v in config.items() if "seed" in k},
        "inputs": {str(p): _digest(p) for p in inputs if p is not None and os.path.exists(p)},
        "tool_version": __version__,
        "backend": backend_name(),
    }
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return manifest


def _emit(obj, out):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _manifest_path(out, default_dir=None) -> Path:
    if out:
        return Path(str(out) + ".manifest.json")
    return Path(default_dir or ".") / "manifest.json"


def _load_schema(arg):
    if arg in (None, "canonical"):
        return ds.canonical_schema()
    if arg == "fec":
        return ds.fec_schema()
    with open(arg, encoding="utf-8") as fh:
        return json.load(fh)


def _read_ids(path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


def read_face_labels(path) -> dict[str, list[str]]:
    """``faces.csv`` rows: id, uri, labels (``;``-separated emotion names)."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[row["id"]] = [x for x in row.get("labels", "").split(";") if x]
    return out


def write_face_labels(path, faces) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "uri", "labels"])
        for f in faces:
            w.writerow([f.id, f.source_uri or "", ";".join(l.title for l in sorted(f.labels))])


def _embedder(args):
    """Map a feature matrix to embeddings from --model, --oracle or --random-embeddings."""
    if getattr(args, "model", None):
        spec, params, meta = nn.load_model(args.model)
        return (lambda x: nn.embed(spec, params, x)), params.digest()
    if getattr(args, "oracle", None):
        oracle = synth.PlantedOracle.load(args.oracle)
        return oracle, f"oracle:{oracle.seed}"
    if getattr(args, "random_embeddings", None) is not None:
        seed, dim = args.random_embeddings, args.dim

        def rand(x):
            rng = np.random.default_rng([seed, 0x8A4D])
            return nn.l2_normalize(rng.standard_normal((len(x), dim)))
        return rand, f"random:{seed}:{dim}"
    raise UsageError("one of --model, --oracle or --random-embeddings is required")


def _add_embedder_args(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--model", help="FECH model file")
    g.add_argument("--oracle", help="planted oracle (.npz) written by `synth`")
    g.add_argument("--random-embeddings", type=int, metavar="SEED",
                   help="i.i.d. random unit embeddings (baseline)")
    p.add_argument("--dim", type=int, default=16, help="dimension for --random-embeddings")


def _load_triplets(path, features_path, schema_arg, policy: ds.AgreementPolicy):
    records = ds.read_triplet_file(path, _load_schema(schema_arg))
    items = ds.filter_by_agreement(ds.consensus_all(records), policy, require_label=True)
    store = ds.read_features(features_path)
    return [it[0] for it in items], ds.attach_features(items, store), store


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_import(args):
    schema = _load_schema(args.schema)
    records = ds.read_triplet_file(args.triplets, schema)
    ds.write_triplet_file(records, args.out)
    stats = ds.dataset_stats(ds.consensus_all(records))
    table = ds.format_stats_table(stats)
    Path(str(args.out) + ".stats.csv").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    write_manifest(_manifest_path(args.out), "import", args, [args.triplets, args.schema],
                   {"n_triplets": len(records), "faces": stats["faces"]})


def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    oracle = synth.make_oracle(args.seed, args.in_dim, args.emb_dim, gain=args.gain)
    faces = synth.generate_faces(oracle, args.faces, args.classes, seed=args.seed + 1, spread=args.spread)
    tau = synth.default_tau(oracle, faces, seed=args.seed) if args.tau is None else args.tau
    data = synth.generate_triplet_set(oracle, faces, [args.per_type] * 3, tau=tau, seed=args.seed + 2)
    all_faces = list(faces)
    ds.write_triplet_file(data.records, out / "triplets.csv")
    if args.heldout_faces:
        held_faces = synth.generate_faces(oracle, args.heldout_faces, args.classes, seed=args.seed + 3,
                                          spread=args.spread)
        held = synth.generate_triplet_set(oracle, held_faces, [args.heldout_per_type] * 3, tau=tau,
                                          seed=args.seed + 4)
        ds.write_triplet_file(held.records, out / "heldout_triplets.csv")
        all_faces += held_faces
    features_name = "features.bin" if args.binary else "features.txt"
    ds.write_features({f.id: f.feature for f in all_faces}, out / features_name, binary=args.binary)
    write_face_labels(out / "faces.csv", all_faces)
    oracle.save(out / "oracle.npz")
    write_manifest(out / "manifest.json", "synth", args, [],
                   {"tau": tau, "tau_rule": "0.1 x median squared pairwise oracle distance"
                    if args.tau is None else "user", "n_triplets": len(data.triplets)})
    print(f"wrote {len(data.triplets)} triplets over {len(faces)} faces to {out} (tau={tau:.6g})")


def cmd_train(args):
    policy = ds.AgreementPolicy.parse(args.agreement)
    _, data, store = _load_triplets(args.triplets, args.features, args.schema, policy)
    heldout = None
    if args.heldout_triplets:
        hstore = ds.read_features(args.heldout_features) if args.heldout_features else store
        hitems = ds.filter_by_agreement(ds.consensus_all(ds.read_triplet_file(args.heldout_triplets)),
                                        ds.AgreementPolicy.STRONG_ONLY, require_label=True)
        heldout = ds.attach_features(hitems, hstore)
    typed = np.array([t in ds.TYPED for t in data.types], dtype=bool)
    data = data.subset(typed)
    spec = nn.HeadSpec(in_dim=data.dim, emb_dim=args.dim, dropout_rate=args.dropout)
    config = train.TrainConfig(lr=args.lr, iterations=args.iters, batch_per_type=args.batch_per_type,
                               margin_one_class=args.margin_one, margin_two_class=args.margin_multi,
                               margin_three_class=args.margin_multi, seed=args.seed,
                               eval_every=args.eval_every)
    log_path = Path(str(args.out) + ".log")
    with open(log_path, "w", encoding="utf-8") as log_fh:
        def progress(line):
            log_fh.write(line + "\n")
            log_fh.flush()
            print(line, file=sys.stderr)
        report = train.train_embedding(data, heldout, spec, config, progress=progress)
    nn.save_model(args.out, spec, report.params, seed=args.seed, config_digest=config.digest())
    write_manifest(_manifest_path(args.out), "train", args,
                   [args.triplets, args.features, args.heldout_triplets],
                   {"effective": {"spec": spec.__dict__, "train": config.__dict__},
                    "training_pool": {"policy": policy.value, "n_triplets": len(data)},
                    "final_heldout_accuracy": report.final_accuracy,
                    "model_digest": report.params.digest()})


def cmd_eval(args):
    policy = ds.AgreementPolicy.parse(args.agreement)
    records, data, _ = _load_triplets(args.triplets, args.features, args.schema, policy)
    emb_fn, digest = _embedder(args)
    emb = emb_fn(data.features)
    report = metrics.evaluate(emb, data, records, args.distance, digest)
    _emit(report.to_dict(), args.out)
    write_manifest(_manifest_path(args.out), "eval", args, [args.triplets, args.features, args.model],
                   {"model_digest": digest})


def _embed_store(args):
    store = ds.read_features(args.features)
    ids = list(store)
    emb_fn, digest = _embedder(args)
    emb = emb_fn(np.array([store[i] for i in ids]))
    return ids, emb, digest


def cmd_retrieve(args):
    ids, emb, digest = _embed_store(args)
    pos = {f: i for i, f in enumerate(ids)}
    queries = _read_ids(args.queries)
    db_ids = _read_ids(args.database) if args.database else [i for i in ids if i not in set(queries)]
    missing = [q for q in queries + db_ids if q not in pos]
    if missing:
        raise ds.DataError(f"missing feature for {missing[0]}")
    db = emb[[pos[i] for i in db_ids]]
    result = {q: apps.retrieve(emb[pos[q]], db, db_ids, args.n, args.distance) for q in queries}
    _emit({"n": args.n, "distance": args.distance, "model_digest": digest, "results": result}, args.out)
    write_manifest(_manifest_path(args.out), "retrieve", args, [args.features, args.queries, args.model])


def cmd_rankdiff(args):
    cand = json.loads(Path(args.candidate).read_text(encoding="utf-8"))
    base = json.loads(Path(args.baseline).read_text(encoding="utf-8"))
    cand = cand.get("results", cand)
    base = base.get("results", base)
    if args.judgments:
        judgments = apps.read_judgments(args.judgments)
    else:
        if not (args.judge_oracle and args.features):
            raise UsageError("rankdiff needs --judgments or --judge-oracle with --features")
        oracle = synth.PlantedOracle.load(args.judge_oracle)
        store = ds.read_features(args.features)
        judgments = {}
        for q in cand:
            items = list(dict.fromkeys(cand[q] + base[q]))
            judgments[q] = apps.oracle_judgments(oracle(store[q]), items,
                                                 oracle(np.array([store[i] for i in items])))
        if args.write_judgments:
            apps.write_judgments(args.write_judgments, judgments)
    report = apps.rank_difference_report(cand, base, judgments)
    _emit(report, args.out)
    write_manifest(_manifest_path(args.out), "rankdiff", args,
                   [args.candidate, args.baseline, args.judgments])


def cmd_summarize(args):
    ids, emb, digest = _embed_store(args)
    pos = {f: i for i, f in enumerate(ids)}
    album = _read_ids(args.album) if args.album else ids
    missing = [a for a in album if a not in pos]
    if missing:
        raise ds.DataError(f"missing feature for {missing[0]}")
    summary = apps.summarize_album(emb[[pos[a] for a in album]], album, args.clusters)
    _emit({"clusters": args.clusters, "model_digest": digest, **summary.to_dict()}, args.out)
    write_manifest(_manifest_path(args.out), "summarize", args, [args.features, args.album, args.model])


def _read_class_labels(path) -> dict[str, int]:
    out = {}
    for fid, labels in read_face_labels(path).items():
        if labels:
            out[fid] = int(ds.EmotionLabel.parse(labels[0]))
    return out


def cmd_knn(args):
    ids, emb, digest = _embed_store(args)
    pos = {f: i for i, f in enumerate(ids)}
    train_lab = _read_class_labels(args.train_labels)
    query_lab = _read_class_labels(args.query_labels)
    t_ids = [i for i in train_lab if i in pos]
    q_ids = [i for i in query_lab if i in pos]
    classes = np.array([train_lab[i] for i in t_ids])
    present = np.unique(classes)
    remap = {c: r for r, c in enumerate(present)}
    scores = apps.knn_classify(emb[[pos[i] for i in q_ids]], emb[[pos[i] for i in t_ids]],
                               np.array([remap[c] for c in classes]), args.k, args.distance,
                               n_classes=len(present))
    truth = np.array([remap.get(query_lab[i], -1) for i in q_ids])
    names = [ds.EmotionLabel(int(c)).title for c in present]
    result = {
        "k": args.k,
        "distance": args.distance,
        "model_digest": digest,
        "classes": names,
        "per_class_auc": {names[c]: v for c, v in metrics.per_class_auc(scores, truth).items()},
        "macro_auc": metrics.macro_auc(scores, truth),
        "scores": {q: [float(x) for x in s] for q, s in zip(q_ids, scores)},
    }
    _emit(result, args.out)
    write_manifest(_manifest_path(args.out), "knn", args,
                   [args.features, args.train_labels, args.query_labels, args.model])


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fecembed", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("import", help="convert a triplet CSV to the canonical format and print stats")
    s.add_argument("--triplets", required=True)
    s.add_argument("--schema", default="fec", help="schema JSON path, or 'fec' / 'canonical'")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_import)

    s = sub.add_parser("synth", help="generate a planted-oracle dataset")
    s.add_argument("--faces", type=int, default=3000)
    s.add_argument("--classes", type=int, default=30)
    s.add_argument("--per-type", type=int, default=1000)
    s.add_argument("--in-dim", type=int, default=64)
    s.add_argument("--emb-dim", type=int, default=8, help="oracle embedding dimension")
    s.add_argument("--gain", type=float, default=synth.DEFAULT_GAIN)
    s.add_argument("--spread", type=float, default=synth.DEFAULT_SPREAD)
    s.add_argument("--tau", type=float, default=None)
    s.add_argument("--heldout-faces", type=int, default=0)
    s.add_argument("--heldout-per-type", type=int, default=0)
    s.add_argument("--binary", action="store_true", help="write the TRIF binary feature file")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train an embedding head with the triplet loss")
    s.add_argument("--triplets", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--schema", default="canonical")
    s.add_argument("--heldout-triplets")
    s.add_argument("--heldout-features")
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--iters", type=int, default=50_000)
    s.add_argument("--lr", type=float, default=5e-4)
    s.add_argument("--dropout", type=float, default=0.5)
    s.add_argument("--margin-one", type=float, default=0.1)
    s.add_argument("--margin-multi", type=float, default=0.2)
    s.add_argument("--batch-per-type", type=int, default=30)
    s.add_argument("--agreement", default="strong", choices=["strong", "strong+weak", "all"])
    s.add_argument("--eval-every", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="triplet prediction accuracy report")
    _add_embedder_args(s)
    s.add_argument("--triplets", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--schema", default="canonical")
    s.add_argument("--distance", default="l2", choices=["l1", "l2", "cosine"])
    s.add_argument("--agreement", default="strong", choices=["strong", "strong+weak", "all"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("retrieve", help="nearest-neighbour retrieval per query")
    _add_embedder_args(s)
    s.add_argument("--features", required=True)
    s.add_argument("--queries", required=True, help="file of query ids, one per line")
    s.add_argument("--database", help="file of database ids (default: every non-query face)")
    s.add_argument("--n", type=int, default=5)
    s.add_argument("--distance", default="l2", choices=["l1", "l2", "cosine"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("rankdiff", help="rank-difference of candidate vs baseline retrievals")
    s.add_argument("--candidate", required=True)
    s.add_argument("--baseline", required=True)
    s.add_argument("--judgments", help="judgment CSV: query_id,item_a,item_b,outcome")
    s.add_argument("--judge-oracle", help="planted oracle used to judge pairs instead of a file")
    s.add_argument("--features", help="feature file (needed with --judge-oracle)")
    s.add_argument("--write-judgments", help="save oracle judgments to this CSV")
    s.add_argument("--out")
    s.set_defaults(func=cmd_rankdiff)

    s = sub.add_parser("summarize", help="album summary by agglomerative clustering")
    _add_embedder_args(s)
    s.add_argument("--features", required=True)
    s.add_argument("--album", help="file of album face ids (default: every face)")
    s.add_argument("--clusters", type=int, default=10)
    s.add_argument("--out")
    s.set_defaults(func=cmd_summarize)

    s = sub.add_parser("knn", help="K-NN emotion classification with AUC-ROC")
    _add_embedder_args(s)
    s.add_argument("--features", required=True)
    s.add_argument("--train-labels", required=True, help="faces.csv-style labels for the database")
    s.add_argument("--query-labels", required=True, help="faces.csv-style labels for the queries")
    s.add_argument("--k", type=int, default=apps.DEFAULT_KNN_NEIGHBORS)
    s.add_argument("--distance", default="l2", choices=["l1", "l2", "cosine"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_knn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"fecembed: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ds.DataError, FileNotFoundError, KeyError) as exc:
        print(f"fecembed: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"fecembed: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"fecembed: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
