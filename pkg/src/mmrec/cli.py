"""Command-line entry point: ``mmrec <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, ctr, make as mk, report, retrieval, scl, synthdata as sd
from .config import ConfigError, ExperimentConfig, load
from .pipeline import IndexTable, Pipeline, read_events, simulate
from .pipeline.simulate import report_json

log = logging.getLogger("mmrec")

ARMS = {
    "full": {},
    "no_triplet": {"use_triplet": False},
    "no_triplet_moco": {"use_triplet": False, "use_moco": False},
    "untrained": {"epochs": 0},
}


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data plumbing


def generate(cfg: ExperimentConfig) -> dict:
    """Catalog, train/eval triplets and the impression log for a config, all from ``data.seed``."""
    d = cfg.data
    cat = sd.gen_catalog(
        d.n_items, d.n_clusters, d.d_lat, d.d_raw, d.zipf_exponent, d.noise_sigma, seed=d.seed,
        id_effect_sigma=d.id_effect_sigma, id_content_share=d.id_content_share,
    )
    trip = sd.gen_triplets(cat, d.n_triplets, d.query_noise, seed=d.seed + 1, negative_pool=d.negative_pool)
    trip_eval = sd.gen_triplets(cat, d.n_eval_triplets, d.query_noise, seed=d.seed + 2, negative_pool=d.negative_pool).distinct_positives()
    imp = sd.gen_impressions(
        cat, d.n_users, d.n_records, L_max=d.L_max, w_id=d.w_id, w_sem=d.w_sem, bias=d.bias, seed=d.seed + 3,
        n_days=d.n_days, pref_concentration=d.pref_concentration, p_target_preferred=d.p_target_preferred,
        cold_fraction=d.cold_fraction, cold_train_scale=d.cold_train_scale,
    )
    return {"catalog": cat, "triplets": trip, "triplets_eval": trip_eval, "impressions": imp}


def write_data(out: Path, data: dict, cfg: ExperimentConfig) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    sd.write_items(out / "items.jsonl", data["catalog"])
    sd.write_ground_truth(out / "ground_truth.jsonl", data["catalog"])
    sd.write_triplets(out / "triplets_train.jsonl", data["triplets"])
    sd.write_triplets(out / "triplets_eval.jsonl", data["triplets_eval"])
    sd.write_impressions(out / "impressions.jsonl", data["impressions"])
    imp = data["impressions"]
    meta = {
        "kind": "data",
        "config_hash": cfg.hash,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "counts": {
            "items": len(data["catalog"]),
            "triplets_train": len(data["triplets"]),
            "triplets_eval": len(data["triplets_eval"]),
            "impressions": len(imp),
            "click_rate": float(imp.labels.mean()) if len(imp) else None,
        },
    }
    report.write_run(out / "data.json", meta)
    return meta


def _need(path: Path) -> Path:
    if not path.exists():
        raise CliError(f"input not found: {path}")
    return path


def read_data(root: Path, cfg: ExperimentConfig, parts=("catalog", "triplets", "triplets_eval", "impressions")) -> dict:
    out = {}
    if "catalog" in parts:
        out["catalog"] = sd.read_items(_need(root / "items.jsonl"))
    if "triplets" in parts:
        out["triplets"] = sd.read_triplets(_need(root / "triplets_train.jsonl"))
    if "triplets_eval" in parts:
        out["triplets_eval"] = sd.read_triplets(_need(root / "triplets_eval.jsonl"))
    if "impressions" in parts:
        out["impressions"] = sd.read_impressions(_need(root / "impressions.jsonl"), L_max=cfg.data.L_max)
    return out


def retrieval_metrics(query_params, trip: sd.TripletSet, ns=(1, 5)) -> dict:
    rset = retrieval.RetrievalSet(scl.encode(query_params, trip.query), scl.encode(query_params, trip.positive))
    ranks = retrieval.true_positive_ranks(rset)
    return {f"acc{n}": float(np.mean(ranks < n)) for n in ns}


def item_reps(encoder_path: Path, catalog: sd.Catalog) -> np.ndarray:
    state, _ = scl.load_encoder(_need(encoder_path))
    return scl.encode(state.query, catalog.modal_features)


def _stamp(cfg: ExperimentConfig, **fields) -> dict:
    return {"config_hash": cfg.hash, "seed": cfg.seed, **fields}


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg):
    meta = write_data(Path(args.out), generate(cfg), cfg)
    return meta["counts"]


def run_pretrain_arm(arm: str, cfg: ExperimentConfig, trip, trip_eval, out: Path | None) -> dict:
    pcfg = replace(cfg.pretrain, **ARMS[arm])
    ns = cfg.eval.acc_n
    res = scl.pretrain(trip, pcfg, out_dir=None if out is None else out / arm, eval_fn=lambda s: retrieval_metrics(s.query, trip_eval, ns))
    run = _stamp(cfg, kind="pretrain", arm=arm, epochs=res.epochs, tau=res.state.tau)
    run["initial"] = retrieval_metrics(res.state.query, trip_eval, ns) if pcfg.epochs == 0 else None
    if out is not None:
        name = f"encoder_epoch{pcfg.epochs}.mmt"
        if pcfg.epochs == 0:
            scl.save_encoder(out / arm / name, res.state, {"epoch": 0, "config_hash": cfg.hash})
        run["encoder"] = f"{arm}/{name}"
        report.write_run(out / f"pretrain_{arm}.json", run)
    return run


def cmd_pretrain(args, cfg):
    data = read_data(Path(args.data), cfg, ("triplets", "triplets_eval"))
    arms = list(ARMS) if args.arm == "all" else [args.arm]
    out = Path(args.out)
    summary = {}
    for arm in arms:
        run = run_pretrain_arm(arm, cfg, data["triplets"], data["triplets_eval"], out)
        summary[arm] = run["epochs"][-1] if run["epochs"] else run["initial"]
    return summary


def cmd_eval_retrieval(args, cfg):
    data = read_data(Path(args.data), cfg, ("triplets_eval",))
    state, meta = scl.load_encoder(_need(Path(args.checkpoint)))
    acc = retrieval_metrics(state.query, data["triplets_eval"], cfg.eval.acc_n)
    run = _stamp(cfg, kind="retrieval", encoder_id=args.encoder_id or Path(args.checkpoint).stem,
                 acc={k[3:]: v for k, v in acc.items()}, n_queries=len(data["triplets_eval"]))
    if args.out:
        report.write_run(Path(args.out), run)
    return run["acc"]


def _make_for(cfg, train, ev, reps, epochs: int):
    mcfg = replace(cfg.make, seed=cfg.make.seed)
    return mk.make_pretrain(train, reps, epochs, mcfg, eval_set=ev)


def cmd_make_pretrain(args, cfg):
    data = read_data(Path(args.data), cfg, ("catalog", "impressions"))
    train, ev = data["impressions"].chronological_split()
    reps = item_reps(Path(args.encoder), data["catalog"])
    epochs = cfg.make.epochs if args.epochs is None else args.epochs
    res = _make_for(cfg, train, ev, reps, epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out / "make.mmt", res.params, {"epochs": epochs, "config_hash": cfg.hash})
    lines = ["epoch,gauc,auc,logloss"] + [f"{r['epoch']},{r['gauc']:.6f},{r['auc']:.6f},{r['logloss']:.6f}" for r in res.epochs]
    (out / "make_epochs.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    report.write_run(out / "make_pretrain.json", _stamp(cfg, kind="make_pretrain", epochs=res.epochs, make="make.mmt"))
    return res.epochs[-1] if res.epochs else {"epochs": 0}


def _world(cfg, data, reps, make_params) -> ctr.World:
    return ctr.World(cfg.data.n_items, cfg.data.n_users, data["catalog"].category_ids, cfg.data.L_max, reps, make_params)


def _ctr_run_doc(cfg, run: ctr.CtrRun, base: dict | None, **extra) -> dict:
    doc = _stamp(cfg, kind="ctr", variant=run.variant, metrics=run.metrics, max_visits=run.max_visits, **extra)
    doc["lifts"] = ctr.lifts(run.metrics, base) if base is not None else None
    return doc


def cmd_train_ctr(args, cfg):
    data = read_data(Path(args.data), cfg, ("catalog", "impressions"))
    train, ev = data["impressions"].chronological_split()
    reps = item_reps(Path(args.encoder), data["catalog"]) if args.encoder else None
    ccfg = cfg.ctr.model_config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {}
    if args.encoder_id:
        extra["encoder_id"] = args.encoder_id
    make_params = None
    if args.make_epochs is not None:
        # one point of the MAKE pre-training study: 0 means joint training with the CTR model
        extra["make_epochs_study"] = args.make_epochs
        if reps is None:
            raise CliError("--make-epochs needs --encoder")
        if args.make_epochs == 0:
            ccfg = replace(ccfg, make_trainable=True)
        else:
            make_params = _make_for(cfg, train, ev, reps, args.make_epochs).params
    elif args.make:
        make_params, _ = checkpoint.load(_need(Path(args.make)))
    variants = list(cfg.ctr.variants) if args.variant == "all" else args.variant.split(",")
    world = _world(cfg, data, reps, make_params)
    cache: dict = {}
    runs, summary = {}, {}
    base_metrics = None
    for v in sorted(variants, key=lambda v: v != "id_base"):
        run = ctr.train_ctr(train, ev, v, world, ccfg, cache)
        runs[v] = run
        if v == "id_base":
            base_metrics = run.metrics
        suffix = f"_{args.tag}" if args.tag else ""
        checkpoint.save(out / f"ctr_{v}{suffix}.mmt", run.params, {"variant": v, "config_hash": cfg.hash})
        report.write_run(out / f"ctr_{v}{suffix}.json", _ctr_run_doc(cfg, run, base_metrics, **extra))
        summary[v] = run.metrics
    if "id_base" in runs and "simtier_make" in runs:
        buckets = ctr.freq_bucket_eval(train, ev, runs["id_base"].eval_probs, runs["simtier_make"].eval_probs, cfg.data.n_items, cfg.eval.n_buckets)
        report.write_run(out / "buckets.json", _stamp(cfg, kind="buckets", mm="simtier_make", id="id_base", buckets=buckets))
    return summary


def cmd_epoch_sweep(args, cfg):
    data = read_data(Path(args.data), cfg, ("catalog", "impressions"))
    train, ev = data["impressions"].chronological_split()
    reps = item_reps(Path(args.encoder), data["catalog"]) if args.encoder else None
    epochs = cfg.ctr.sweep_epochs if args.epochs is None else args.epochs
    variants = list(cfg.ctr.sweep_variants) if args.variant == "all" else args.variant.split(",")
    world = _world(cfg, data, reps, None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for v in variants:
        curve = ctr.epoch_sweep(train, ev, v, world, epochs, cfg.ctr.model_config())
        report.write_run(out / f"sweep_{v}.json", _stamp(cfg, kind="epoch_sweep", variant=v, curve=curve))
        lines = ["epoch,gauc,auc,logloss"] + [f"{p['epoch']},{p['gauc']:.6f},{p['auc']:.6f},{p['logloss']:.6f}" for p in curve]
        (out / f"sweep_{v}.csv").write_text(f"# config_hash: {cfg.hash}\n" + "\n".join(lines) + "\n", encoding="utf-8")
        summary[v] = [round(p["gauc"], 6) for p in curve]
    return summary


def cmd_report(args, cfg):
    return report.build_report(Path(args.runs), Path(args.out), allow_mixed=args.allow_mixed)


def _pipeline_from(args, cfg) -> Pipeline:
    state, _ = scl.load_encoder(_need(Path(args.checkpoint)))
    p = cfg.pipeline
    return Pipeline(state.query, n_workers=p.n_workers, queue_capacity=p.queue_capacity, table=IndexTable(history=p.history))


def cmd_serve_pipeline(args, cfg):
    from .pipeline.server import serve

    serve(_pipeline_from(args, cfg), host=args.host or cfg.pipeline.host, port=args.port)
    return {"stopped": True}


def cmd_simulate_pipeline(args, cfg):
    state, _ = scl.load_encoder(_need(Path(args.checkpoint)))
    events = read_events(_need(Path(args.events)))
    res = simulate(events, state.query, n_workers=cfg.pipeline.n_workers, encode_time=cfg.pipeline.encode_delay)
    doc = _stamp(cfg, kind="pipeline_sim", **report_json(res))
    report.write_run(Path(args.report), doc)
    return doc["freshness"]


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmrec", description="Multimodal representation study: data, pre-training, CTR ladder, reports, pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate catalog, triplets and impression log")
    p.add_argument("--out", required=True)

    p = add("pretrain", cmd_pretrain, "contrastive pre-training of the item encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--arm", default="full", choices=["all", *ARMS])

    p = add("eval-retrieval", cmd_eval_retrieval, "Acc@N of an encoder checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--encoder-id")
    p.add_argument("--out")

    p = add("make-pretrain", cmd_make_pretrain, "multi-epoch pre-training of the knowledge extractor")
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)

    p = add("train-ctr", cmd_train_ctr, "train CTR variants for one epoch and evaluate")
    p.add_argument("--data", required=True)
    p.add_argument("--encoder")
    p.add_argument("--make")
    p.add_argument("--variant", default="all")
    p.add_argument("--make-epochs", type=int, help="pre-train MAKE for this many epochs inline (0 = joint)")
    p.add_argument("--encoder-id", help="tag runs for the retrieval/CTR correlation")
    p.add_argument("--tag", help="suffix for output file names")
    p.add_argument("--out", required=True)

    p = add("epoch-sweep", cmd_epoch_sweep, "held-out GAUC after each of several epochs")
    p.add_argument("--data", required=True)
    p.add_argument("--encoder")
    p.add_argument("--variant", default="all")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "aggregate run JSONs into CSV tables")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--allow-mixed", action="store_true")

    p = add("serve-pipeline", cmd_serve_pipeline, "serve the representation pipeline over TCP")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--port", type=int, default=7070)
    p.add_argument("--host")

    p = add("simulate-pipeline", cmd_simulate_pipeline, "replay item events through the pipeline on simulated time")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--report", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load(args.config, args.set)
        result = args.func(args, cfg)
    except (ConfigError, CliError, report.ReportError, sd.DatasetFormatError, checkpoint.CheckpointError, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(msg), "command": args.command}) + "\n")
        return 2
    print(json.dumps(result, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
