"""Command line: gen-data, train, eval, infer, bench.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DatasetError,
    InvalidQueryError,
    NumericError,
)
from .evaluation import (
    EvalConfig,
    EvalReport,
    TripletPrediction,
    apply_graph_constraint,
    corpus_recall_at_k,
    evaluate_outputs,
    exhaustive_score,
    mean_recall_at_k,
    run_model,
    split_outputs,
    write_predictions,
)
from .matching import GroundTruth
from .model import ModelConfig, SceneGraphViT
from .numerics import no_grad, sigmoid_np
from .relation_head import pair_reduction
from .scenes import (
    PREDICATES,
    VARIANTS,
    DataConfig,
    category_names,
    rasterize,
    read_dataset,
    record_to_example,
    sample_scene,
    write_dataset_dir,
)
from .text_queries import Vocabulary
from .training import config_fields, load_config, load_model, train

log = logging.getLogger("sgvit")

DEFAULT_SEED = 0
EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _bool(v: str) -> bool:
    lv = v.lower()
    if lv in ("1", "true", "yes", "on"):
        return True
    if lv in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


def _read_queries(path) -> list[str] | None:
    if path is None:
        return None
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    queries = [ln for ln in lines if ln]
    if not queries:
        raise InvalidQueryError(f"{path}: no queries")
    return queries


def _warn_oov(model: SceneGraphViT, queries) -> None:
    for q in queries:
        if model.text.oov_only(q):
            log.warning("query %r has only out-of-vocabulary words; using the OOV embedding", q)


# -- gen-data -----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
    if args.variant not in VARIANTS:
        raise UsageError(f"unknown variant {args.variant!r}; choose from {sorted(VARIANTS)}")
    cfg = DataConfig(scenes=args.scenes, seed=args.seed, skew=args.skew, variant=args.variant)
    freqs = write_dataset_dir(cfg, out)
    print(f"{'predicate':<16} frequency")
    for p, f in freqs.items():
        print(f"{p:<16} {f:.6f}")
    print(f"wrote {sum(cfg.split_sizes().values())} scenes to {out}")
    return 0


# -- train ------------------------------------------------------------------------

def cmd_train(args) -> int:
    overrides = {k: str(v) for k, v in vars(args).items()
                 if k in config_fields() and v is not None}
    if args.data is not None:
        overrides["datasets"] = args.data
    cfg = load_config(args.config, overrides)
    last = {}

    def report(row):
        last.update(row)
        if row["step"] % max(1, args.log_every) == 0:
            print(f"step {row['step']:6d} total {row['total']:.4f} cls {row['cls']:.4f} "
                  f"l1 {row['l1']:.4f} giou {row['giou']:.4f} score {row['score']:.4f}", flush=True)

    state = train(cfg, args.out, resume=args.resume, on_step=report)
    print(f"finished at step {state.step}; checkpoints in {args.out}")
    return 0


# -- eval -------------------------------------------------------------------------

def oracle_predictions(gt: GroundTruth) -> list[TripletPrediction]:
    """GT triplets re-expressed as perfect-score predictions."""
    preds = []
    for n, (s, pred, o) in enumerate(gt.triplets):
        preds.append(TripletPrediction(
            subject=s, object=o,
            subject_box=tuple(float(x) for x in gt.boxes[s]), object_box=tuple(float(x) for x in gt.boxes[o]),
            subject_category=gt.categories[s], object_category=gt.categories[o], predicate=pred,
            subject_objectness=1.0, subject_score=1.0, object_objectness=1.0, object_score=1.0,
            pair_score=1.0, predicate_score=1.0, score=1.0, class_id=n))
    return preds


def _choose_names(meta: dict, args) -> tuple[list[str], list[str]]:
    objects = _read_queries(args.queries_objects) or meta["object_names"]
    predicates = _read_queries(args.queries_predicates) or meta["predicate_names"]
    return objects, predicates


def cmd_eval(args) -> int:
    examples = read_dataset(Path(args.data) / f"{args.split}.jsonl")
    if args.limit:
        examples = examples[: args.limit]
    gts = [ex.gt for ex in examples]
    cfg = EvalConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.oracle:
        preds = [oracle_predictions(g) for g in gts]
        rep = EvalReport()
        for mode in ("constrained", "unconstrained"):
            for k in cfg.ks:
                rep.add("R@K", f"{mode}@{k}", corpus_recall_at_k(preds, gts, k))
                rep.add("mR@K", f"{mode}@{k}", mean_recall_at_k(preds, gts, k))
        con = unc = preds
    else:
        model, meta = load_model(args.checkpoint)
        objects, predicates = _choose_names(meta, args)
        _warn_oov(model, objects + predicates)
        m = args.m or meta["m"]
        k = meta["k"] if args.k is None else args.k
        outs = run_model(model, np.stack([ex.image for ex in examples]), objects, predicates, m, k)
        rep, con, unc = evaluate_outputs(outs, gts, objects, predicates, cfg)
    rep.write(out / "report.json", out / "report.csv")
    chosen = con if args.graph_constrained else unc
    write_predictions(out / "predictions.jsonl", chosen, [ex.spec.seed for ex in examples])
    for metric in ("R@K", "mR@K"):
        for name, v in sorted(rep.metrics.get(metric, {}).items()):
            print(f"{metric:<5} {name:<18} {v:.4f}")
    for metric in ("mAP", "box_recall"):
        for name, v in sorted(rep.metrics.get(metric, {}).items()):
            print(f"{metric:<5} {name:<18} {v:.4f}")
    return 0


# -- infer ------------------------------------------------------------------------

def read_scene_file(path) -> list[tuple[int, np.ndarray]]:
    """Scene records (one JSON object per line) or a .npy image array."""
    path = Path(path)
    if path.suffix == ".npy":
        try:
            arr = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise DatasetError(f"{path}: unreadable image array: {exc}") from None
        arr = arr[None] if arr.ndim == 3 else arr
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise DatasetError(f"{path}: expected (S, S, 3) or (B, S, S, 3), got {arr.shape}")
        return [(i, arr[i].astype(np.float32)) for i in range(len(arr))]
    scenes = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            rec.setdefault("triplets", [])
            ex = record_to_example(rec)
        except (json.JSONDecodeError, DatasetError, AttributeError) as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
        scenes.append((ex.spec.seed, ex.image))
    if not scenes:
        raise DatasetError(f"{path}: no scenes")
    return scenes


def infer_image(img_out, objects, predicates, top: int, threshold: float, constrained: bool):
    """Detections above ``threshold`` and the top triplets among them."""
    conf = sigmoid_np(img_out.instance_scores) * sigmoid_np(img_out.object_logits).max(axis=-1)
    keep = {int(t) for t, c in zip(img_out.instances, conf) if c >= threshold}
    dets = []
    for slot in np.lexsort((np.arange(len(conf)), -conf)):
        t = int(img_out.instances[slot])
        if t in keep:
            cls = int(np.argmax(img_out.object_logits[slot]))
            cx, cy, w, h = (float(x) for x in img_out.boxes[slot])
            dets.append({"kind": "object", "token": t, "category": objects[cls], "score": float(conf[slot]),
                         "box": [cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]})
    preds = exhaustive_score(img_out, objects, predicates)
    preds = [p for p in preds if p.subject in keep and p.object in keep]
    preds = apply_graph_constraint(preds, constrained, 4)[:top]
    return dets, preds


def cmd_infer(args) -> int:
    if args.top < 1:
        raise UsageError("--top must be >= 1")
    model, meta = load_model(args.checkpoint)
    objects, predicates = _choose_names(meta, args)
    _warn_oov(model, objects + predicates)
    scenes = read_scene_file(args.scene)
    m = args.m or meta["m"]
    k = meta["k"] if args.k is None else args.k
    outs = run_model(model, np.stack([img for _, img in scenes]), objects, predicates, m, k)
    lines = []
    for (seed, _), img_out in zip(scenes, outs):
        dets, preds = infer_image(img_out, objects, predicates, args.top, args.threshold, args.graph_constrained)
        lines += [json.dumps({"image": seed, **d}, sort_keys=True) for d in dets]
        lines += [json.dumps({"image": seed, "kind": "triplet", **p.to_record()}, sort_keys=True) for p in preds]
    text = "".join(ln + "\n" for ln in lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# -- bench ------------------------------------------------------------------------

def bench(model: SceneGraphViT, images: np.ndarray, ks, m: int, trials: int, objects, predicates,
          warmup: int = 2) -> list[dict]:
    """Median wall-clock per k at batch size 1, text embeddings precomputed.

    The k=0 (detection-only) row is always timed and is the relative-speed baseline.
    """
    if trials < 5:
        raise UsageError("need at least 5 trials for a stable median")
    n_tok = model.cfg.encoder.num_tokens
    max_k = m * (m - 1)
    ks = sorted(set(int(k) for k in ks) | {0})
    if any(k < 0 or k > max_k for k in ks):
        raise UsageError(f"k values must lie in [0, {max_k}] for M={m}")
    with no_grad():
        oq = model.embed_queries(list(objects))
        pq = model.embed_queries(list(predicates))

        def once(img, k):
            t0 = time.perf_counter()
            out = model.forward(img[None], oq, pq, m, k)
            preds = exhaustive_score(split_outputs(out)[0], objects, predicates)
            apply_graph_constraint(preds, True)
            return time.perf_counter() - t0

        for k in ks:
            for w in range(warmup):
                once(images[w % len(images)], k)
        # interleave k within each trial, rotating the start, so load drift hits every k alike
        times = {k: [] for k in ks}
        for t in range(trials):
            img = images[t % len(images)]
            for i in range(len(ks)):
                k = ks[(t + i) % len(ks)]
                times[k].append(once(img, k))
    base = statistics.median(times[0])
    rows = []
    for k in ks:
        med = statistics.median(times[k])
        rows.append({"k": k, "trials": trials, "median_ms": med * 1e3, "pair_count": min(k, max_k),
                     "relative_speed": base / med, "pair_reduction": pair_reduction(n_tok, m, k)})
    return rows


BENCH_COLUMNS = ("k", "trials", "median_ms", "pair_count", "relative_speed", "pair_reduction")


def cmd_bench(args) -> int:
    if args.checkpoint:
        model, meta = load_model(args.checkpoint)
        objects, predicates = meta["object_names"], meta["predicate_names"]
        m = args.m or meta["m"]
    else:
        model = SceneGraphViT(ModelConfig(seed=args.seed), vocab=Vocabulary())
        objects, predicates, m = category_names(), list(PREDICATES), args.m or 16
    objects = _read_queries(args.queries_objects) or objects
    predicates = _read_queries(args.queries_predicates) or predicates
    ks = [int(x) for x in args.k.split(",")] if args.k else [0, 8, 16, 32, 64, 128, m * (m - 1)]
    rng = np.random.default_rng(args.seed)
    images = np.stack([rasterize(sample_scene(int(s))) for s in rng.integers(0, 2**31, size=8)])
    rows = bench(model, images, ks, m, args.trials, objects, predicates)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in rows:
        w.writerow([r["k"], r["trials"], f"{r['median_ms']:.4f}", r["pair_count"],
                    f"{r['relative_speed']:.4f}", f"{r['pair_reduction']:.6f}"])
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    sys.stdout.write(buf.getvalue())
    return 0


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sgvit", description="Scene-graph detector on synthetic relational scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate train/val/test scene files")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=5000)
    g.add_argument("--seed", type=int, default=DEFAULT_SEED)
    g.add_argument("--skew", type=float, default=0.0)
    g.add_argument("--variant", default="full", help=f"one of {sorted(VARIANTS)}")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset directory (alias for --datasets)")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--log-every", type=int, default=100)
    for name, typ in config_fields().items():
        t.add_argument(f"--{name}", dest=name, default=None,
                       type=_bool if typ in (bool, "bool") else str)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--m", type=int)
    e.add_argument("--k", type=int)
    e.add_argument("--limit", type=int, default=0)
    e.add_argument("--graph-constrained", type=_bool, default=True)
    e.add_argument("--oracle", action="store_true", help="score GT triplets as predictions")
    e.add_argument("--queries-objects")
    e.add_argument("--queries-predicates")
    e.add_argument("--seed", type=int, default=DEFAULT_SEED)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict triplets for scene records or an image array")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--scene", required=True)
    i.add_argument("--queries-objects")
    i.add_argument("--queries-predicates")
    i.add_argument("--top", type=int, default=20)
    i.add_argument("--threshold", type=float, default=0.3)
    i.add_argument("--m", type=int)
    i.add_argument("--k", type=int)
    i.add_argument("--graph-constrained", type=_bool, default=True)
    i.add_argument("--out")
    i.add_argument("--seed", type=int, default=DEFAULT_SEED)
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="latency sweep over k at batch size 1")
    b.add_argument("--checkpoint")
    b.add_argument("--k", help="comma-separated k values")
    b.add_argument("--m", type=int)
    b.add_argument("--trials", type=int, default=30)
    b.add_argument("--seed", type=int, default=DEFAULT_SEED)
    b.add_argument("--queries-objects")
    b.add_argument("--queries-predicates")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and not args.oracle and not args.checkpoint:
        print("sgvit eval: error: --checkpoint is required unless --oracle is given", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"sgvit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, InvalidQueryError, FileNotFoundError) as exc:
        print(f"sgvit {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"sgvit {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as exc:
        print(f"sgvit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
