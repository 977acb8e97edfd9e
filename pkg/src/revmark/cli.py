"""Experiment driver: every subcommand is reproducible from one config + seed.

Reports are CSV/JSON; each run writes a manifest with the echoed config, the
resolved sub-seeds, and SHA-256 hashes of the artifacts it produced (ledger
files excluded: their timestamps are wall-clock). Exit codes: 0 success,
2 config error, 3 component error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import metrics, protocol
from .attack import fit_classifier, save_filter
from .config import ConfigError, ExperimentConfig, load_config, parse_override
from .evidence import ledger_lookup
from .model import (OracleModel, UniformRandomModel, gen_dataset, load_model,
                    make_dataset_labeler, save_model, train, embed_backdoor)
from .protocol import (OwnerState, build_reverse_set, clean_accuracy_of, oracle_for_owner,
                       owner_register, scenario_capsulation, scenario_overwrite,
                       verify_session, export_transcript)
from .scheme import IdentityKey, derive_seed, keygen, inverse_trigger_code
from .evidence import chain_labels
from .triggers import ALL_SCHEMES, build_trigger_set, load_trigger_set, save_trigger_set
from .model import accuracy as model_accuracy


def _outdir(cfg: ExperimentConfig) -> str:
    out = os.environ.get("REVMARK_OUTDIR", cfg.outdir)
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(out: str, name: str, cfg: ExperimentConfig,
                    seeds: dict, artifacts: list[str]) -> str:
    entries = {}
    for p in sorted(artifacts):
        base = os.path.basename(p)
        if "ledger" in base:
            entries[base] = "unhashed (timestamps)"
            continue
        with open(p, "rb") as fh:
            entries[base] = hashlib.sha256(fh.read()).hexdigest()
    path = os.path.join(out, f"manifest_{name}.json")
    _write_json(path, {"subcommand": name, "config": cfg.to_json(),
                       "seeds": seeds, "artifacts": entries})
    return path


def _dataset(cfg: ExperimentConfig):
    return gen_dataset(derive_seed(cfg.master_seed, "dataset"), cfg.n_per_class,
                       cfg.scheme_params())


def _owner_key(cfg: ExperimentConfig) -> IdentityKey:
    return keygen(derive_seed(cfg.master_seed, "key"), cfg.scheme_params())


def cmd_keygen(cfg: ExperimentConfig, args) -> tuple[dict, list[str]]:
    out = _outdir(cfg)
    key = _owner_key(cfg)
    path = os.path.join(out, "key.json")
    _write_json(path, {"seed": key.seed, "bits": key.hex})
    print(f"key {key.hex}")
    return {"key": key.seed}, [path]


def cmd_register(cfg: ExperimentConfig, args) -> tuple[dict, list[str]]:
    out = _outdir(cfg)
    params = cfg.scheme_params()
    dataset = _dataset(cfg)
    key = _owner_key(cfg)
    select_seed = derive_seed(cfg.master_seed, "select")
    ledger = os.path.join(out, "ledger.ndjson")
    owner = owner_register(key, dataset, params, select_seed, ledger)
    ts_dir = os.path.join(out, "triggerset")
    save_trigger_set(owner.trigger_set, ts_dir)
    owner_path = os.path.join(out, "owner.json")
    _write_json(owner_path, {
        "record_id": owner.record.record_id,
        "key_seed": key.seed,
        "key_bits": key.hex,
        "merkle_root": owner.record.root_hex,
        "select_seed": select_seed,
    })
    print(f"registered {owner.record.record_id} (root {owner.record.root_hex[:16]}…)")
    arts = [owner_path, ledger,
            *(os.path.join(ts_dir, f) for f in sorted(os.listdir(ts_dir)))]
    return {"key": key.seed, "select": select_seed}, arts


def _trigger_set_for(cfg: ExperimentConfig, key, dataset, params):
    if cfg.scheme == "reverse":
        ts, _, _ = build_reverse_set(key, dataset, params,
                                     derive_seed(cfg.master_seed, "select"))
        return ts
    return build_trigger_set(cfg.scheme, key, params, dataset)


def cmd_embed(cfg: ExperimentConfig, args) -> tuple[dict, list[str]]:
    out = _outdir(cfg)
    params = cfg.scheme_params()
    dataset = _dataset(cfg)
    key = _owner_key(cfg)
    hyper = cfg.train_hyper(derive_seed(cfg.master_seed, "model"))
    ts = _trigger_set_for(cfg, key, dataset, params)
    base = train(dataset, hyper, params.n_classes)
    marked = embed_backdoor(base, ts, dataset, hyper)
    ckpt = os.path.join(out, "model.bin")
    save_model(marked, ckpt)
    report = {
        "scheme": cfg.scheme,
        "clean_acc_plain": clean_accuracy_of(base, dataset),
        "clean_acc_watermarked": clean_accuracy_of(marked, dataset),
        "trigger_acc": model_accuracy(marked, ts.pairs()),
    }
    rpath = os.path.join(out, "embed_report.json")
    _write_json(rpath, report)
    print(f"embedded {cfg.scheme}: trigger acc {report['trigger_acc']:.3f}, "
          f"clean {report['clean_acc_watermarked']:.3f}")
    return {"model": hyper.seed}, [ckpt, ckpt + ".json", rpath]


def _load_owner(cfg: ExperimentConfig, out: str, params) -> OwnerState:
    with open(os.path.join(out, "owner.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    ts = load_trigger_set(os.path.join(out, "triggerset"))
    key = IdentityKey(bits=bytes.fromhex(meta["key_bits"]), seed=meta["key_seed"])
    codes = [inverse_trigger_code(t, params) for t in ts.triggers]
    chain = chain_labels(key, codes, params)
    record = ledger_lookup(meta["record_id"], os.path.join(out, "ledger.ndjson"))
    if record is None:
        raise RuntimeError(f"evidence {meta['record_id']} not found; run `register` first")
    return OwnerState(key=key, params=params, trigger_set=ts, codes=codes,
                      chain=chain, record=record)


def cmd_verify(cfg: ExperimentConfig, args) -> tuple[dict, list[str]]:
    out = _outdir(cfg)
    params = cfg.scheme_params()
    owner = _load_owner(cfg, out, params)
    dataset = _dataset(cfg)
    if args.service == "honest":
        service = oracle_for_owner(owner, dataset,
                                   seed=derive_seed(cfg.master_seed, "oracle"))
    elif args.service == "unrelated":
        service = OracleModel(trigger_map={}, base_labeler=make_dataset_labeler(dataset),
                              n_classes=params.n_classes,
                              seed=derive_seed(cfg.master_seed, "oracle"))
    elif args.service == "random":
        service = UniformRandomModel(n_classes=params.n_classes,
                                     seed=derive_seed(cfg.master_seed, "oracle"))
    else:
        service = load_model(args.service)
    session_seed = derive_seed(cfg.master_seed, "session", args.session)
    transcript = verify_session(owner, service, cfg.tau, session_seed,
                                os.path.join(out, "ledger.ndjson"))
    tpath = os.path.join(out, f"transcript_{args.session}.json")
    export_transcript(transcript, tpath)
    v = transcript.verdict
    print(f"verdict: accepted={v.accepted} merkle_ok={v.merkle_ok} "
          f"accuracy={v.accuracy:.3f} (tau={v.threshold})")
    return {"session": session_seed}, [tpath]


def cmd_attack(cfg: ExperimentConfig, args) -> tuple[dict, list[str]]:
    out = _outdir(cfg)
    params = cfg.scheme_params()
    q = args.q or max(cfg.q_values)
    report = scenario_capsulation(cfg.scheme, cfg.filter_kind, q, params,
                                  cfg.master_seed, n_per_class=cfg.n_per_class,
                                  hyper=cfg.train_hyper(derive_seed(cfg.master_seed, "model")))
    dataset = _dataset(cfg)
    filt = protocol.adversary_filter(cfg.scheme, cfg.filter_kind, q, params, dataset,
                                     cfg.master_seed)
    fpath = os.path.join(out, "filter.json")
    save_filter(filt, fpath)
    cpath = os.path.join(out, "attack_report.csv")
    with open(cpath, "w", encoding="utf-8") as fh:
        fh.write(report.csv_header() + "\n" + report.to_csv_row() + "\n")
    print(f"capsulated {cfg.scheme} with {cfg.filter_kind} (Q={q}): "
          f"trigger acc {report.trigger_acc_watermarked:.3f} -> "
          f"{report.trigger_acc_capsulated:.3f}, "
          f"clean {report.clean_acc_watermarked:.3f} -> {report.clean_acc_capsulated:.3f}")
    return {"attack": cfg.master_seed}, [fpath, cpath]


def cmd_cascore(cfg: ExperimentConfig, args) -> tuple[dict, list[str]]:
    out = _outdir(cfg)
    params = cfg.scheme_params()
    dataset = _dataset(cfg)
    schemes = list(ALL_SCHEMES) if args.all_schemes else [cfg.scheme]
    arts, summary = [], {}
    for scheme in schemes:
        rep = metrics.cascore_bound(scheme, dataset, params, kinds=cfg.filter_kinds,
                                    q_values=cfg.q_values,
                                    seed=derive_seed(cfg.master_seed, "cascore", scheme))
        cpath = os.path.join(out, f"cascore_{scheme}.csv")
        with open(cpath, "w", encoding="utf-8") as fh:
            fh.write(rep.to_csv())
        jpath = os.path.join(out, f"cascore_{scheme}.json")
        _write_json(jpath, rep.to_json())
        arts += [cpath, jpath]
        summary[scheme] = rep.bound
        print(f"{scheme}: CAScore bound {rep.bound:.3f} (max AUC {rep.max_auc:.3f})")
    spath = os.path.join(out, "cascore_summary.json")
    _write_json(spath, summary)
    return {"cascore": cfg.master_seed}, arts + [spath]


def cmd_chernoff(cfg: ExperimentConfig, args) -> tuple[dict, list[str]]:
    out = _outdir(cfg)
    tau = args.tau if args.tau is not None else cfg.tau
    c = args.c or cfg.n_classes
    n = args.n or cfg.n_triggers
    bound = metrics.chernoff_bound(tau, c, n)
    exact = metrics.binomial_tail_exact(tau, c, n)
    result = {"tau": tau, "c": c, "n": n, "chernoff_bound": bound, "exact_tail": exact}
    print(f"chernoff_bound={bound:.10g} exact_tail={exact:.10g}")
    if args.trials:
        mc = metrics.ambiguity_montecarlo(c, n, tau, args.trials,
                                          seed=derive_seed(cfg.master_seed, "mc"))
        result["montecarlo"] = mc
        result["trials"] = args.trials
        print(f"montecarlo={mc:.10g} (trials={args.trials})")
    path = os.path.join(out, "chernoff.json")
    _write_json(path, result)
    return {"mc": cfg.master_seed}, [path]


def cmd_scenario_capsulation(cfg: ExperimentConfig, args) -> tuple[dict, list[str]]:
    out = _outdir(cfg)
    params = cfg.scheme_params()
    q = args.q or max(cfg.q_values)
    schemes = args.schemes or list(ALL_SCHEMES)
    rows = []
    for scheme in schemes:
        rep = scenario_capsulation(scheme, cfg.filter_kind, q, params, cfg.master_seed,
                                   n_per_class=cfg.n_per_class,
                                   hyper=cfg.train_hyper(derive_seed(cfg.master_seed, "model")))
        rows.append(rep)
        print(rep.to_csv_row())
    cpath = os.path.join(out, "capsulation.csv")
    with open(cpath, "w", encoding="utf-8") as fh:
        fh.write(rows[0].csv_header() + "\n")
        for r in rows:
            fh.write(r.to_csv_row() + "\n")
    jpath = os.path.join(out, "capsulation.json")
    _write_json(jpath, [r.to_json() for r in rows])
    return {"scenario": cfg.master_seed}, [cpath, jpath]


def cmd_scenario_overwrite(cfg: ExperimentConfig, args) -> tuple[dict, list[str]]:
    out = _outdir(cfg)
    ledger = os.path.join(out, "overwrite_ledger.ndjson")
    if os.path.exists(ledger):
        raise RuntimeError(f"{ledger} already exists; the overwrite scenario needs a fresh ledger")
    report = scenario_overwrite(cfg.scheme_params(), cfg.master_seed, ledger, tau=cfg.tau,
                                n_per_class=cfg.n_per_class,
                                hyper=cfg.train_hyper(derive_seed(cfg.master_seed, "model")))
    path = os.path.join(out, "overwrite.json")
    _write_json(path, report.to_json())
    print(f"alice t={report.alice_timestamp} accepted={report.alice_accepted} | "
          f"carol t={report.carol_timestamp} accepted={report.carol_accepted} | "
          f"unfiltered: alice={report.alice_accepted_unfiltered} "
          f"carol={report.carol_accepted_unfiltered}")
    return {"scenario": cfg.master_seed}, [path, ledger]


def cmd_report(cfg: ExperimentConfig, args) -> tuple[dict, list[str]]:
    out = _outdir(cfg)
    lines = ["source,row"]
    for name in sorted(os.listdir(out)):
        if name.endswith(".csv") and name != "summary.csv":
            with open(os.path.join(out, name), encoding="utf-8") as fh:
                for line in fh.read().splitlines():
                    lines.append(f"{name},{line}")
    spath = os.path.join(out, "summary.csv")
    with open(spath, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"merged {len(lines) - 1} rows into {spath}")
    return {}, [spath]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="revmark",
                                     description="Watermarking schemes, capsulation attacks, "
                                                 "CAScore, and the reverse-scheme protocol.")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field (dots for nesting)")
    parser.add_argument("--seed", type=int, help="override master_seed")
    parser.add_argument("--scheme", choices=ALL_SCHEMES, help="override scheme")
    parser.add_argument("--outdir", help="override output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("keygen", help="derive the identity key")
    sub.add_parser("register", help="select reverse triggers and register evidence")
    sub.add_parser("embed", help="train a model and embed the configured watermark")

    p = sub.add_parser("verify", help="run a verification session")
    p.add_argument("--service", default="honest",
                   help="checkpoint path, or honest|unrelated|random")
    p.add_argument("--session", type=int, default=0, help="session index")

    p = sub.add_parser("attack", help="fit a filter and capsulate the watermarked model")
    p.add_argument("--q", type=int, help="adversary sample count per class")

    p = sub.add_parser("cascore", help="estimate the CAScore upper bound")
    p.add_argument("--all-schemes", action="store_true")

    p = sub.add_parser("chernoff", help="ambiguity-attack bound and exact tail")
    p.add_argument("--tau", type=float)
    p.add_argument("--c", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--trials", type=int, default=0)

    p = sub.add_parser("scenario", help="end-to-end attack scenarios")
    ssub = p.add_subparsers(dest="scenario", required=True)
    pc = ssub.add_parser("capsulation")
    pc.add_argument("--q", type=int)
    pc.add_argument("--schemes", nargs="*", choices=ALL_SCHEMES)
    ssub.add_parser("overwrite")

    sub.add_parser("report", help="merge CSV reports into summary.csv")
    return parser


_COMMANDS = {
    "keygen": cmd_keygen,
    "register": cmd_register,
    "embed": cmd_embed,
    "verify": cmd_verify,
    "attack": cmd_attack,
    "cascore": cmd_cascore,
    "chernoff": cmd_chernoff,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            print(f"config error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return 2
        key, _, value = item.partition("=")
        overrides[key] = parse_override(value)
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.scheme is not None:
        overrides["scheme"] = args.scheme
    if args.outdir is not None:
        overrides["outdir"] = args.outdir
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    if args.command == "scenario":
        handler = (cmd_scenario_capsulation if args.scenario == "capsulation"
                   else cmd_scenario_overwrite)
        name = f"scenario_{args.scenario}"
    else:
        handler = _COMMANDS[args.command]
        name = args.command
    try:
        seeds, artifacts = handler(cfg, args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    _write_manifest(_outdir(cfg), name, cfg, seeds, artifacts)
    return 0


if __name__ == "__main__":
    sys.exit(main())
