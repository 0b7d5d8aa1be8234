"""Command-line entry points for the pipeline stages.

    lungsound synth     generate the synthetic two-domain corpus
    lungsound split     write a stratified k-fold split for a manifest
    lungsound run       train/evaluate one or more experiment setups
    lungsound evaluate  score a saved checkpoint against a manifest
    lungsound report    render a saved report file as a results table
    lungsound serve     start the assessment service
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import datasets, signals
from .errors import ConfigError, LungSoundError
from .features import FeatureConfig
from .metrics import MetricsReport, compute_metrics, confusion
from .model import MixStyleConfig, ModelConfig
from .training import TrainConfig, run_experiment


def _filtered_kwargs(cls, data: dict) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys {unknown}")
    return data


def load_run_config(path=None) -> tuple[FeatureConfig, MixStyleConfig, dict, TrainConfig]:
    """Read the run config file: features/mixstyle/model/train sections."""
    data = {}
    if path is not None:
        data = json.loads(Path(path).read_text())
    fdata = _filtered_kwargs(FeatureConfig, data.get("features", {}))
    fcfg = FeatureConfig(**fdata)
    mixdata = data.get("mixstyle", {})
    if "insertion_depths" in mixdata:
        mixdata["insertion_depths"] = tuple(mixdata["insertion_depths"])
    if "epoch_windows" in mixdata and mixdata["epoch_windows"] is not None:
        mixdata["epoch_windows"] = tuple(
            tuple(w) if w is not None else None for w in mixdata["epoch_windows"])
    mixstyle = MixStyleConfig(**_filtered_kwargs(MixStyleConfig, mixdata))
    model_overrides = data.get("model", {})
    tdata = _filtered_kwargs(TrainConfig, data.get("train", {}))
    if "betas" in tdata:
        tdata["betas"] = tuple(tdata["betas"])
    tcfg = TrainConfig(**tdata)
    return fcfg, mixstyle, model_overrides, tcfg


def cmd_synth(args) -> int:
    if args.spec is not None:
        spec = datasets.synthesis_spec_from_dict(json.loads(Path(args.spec).read_text()))
        if args.seed is not None:
            spec = replace(spec, seed=args.seed)
    else:
        spec = datasets.default_corpus_spec(steth_total=args.steth, phone_total=args.phone,
                                            seed=args.seed if args.seed is not None else 0)
    manifest = datasets.synth_generate(spec, args.out)
    print(f"wrote {len(manifest)} clips under {args.out}")
    for domain in sorted(datasets.split_by_domain(manifest)):
        print(f"  manifest_{domain}.csv")
    return 0


def cmd_split(args) -> int:
    manifest = datasets.load_manifest(args.manifest)
    split = datasets.stratified_kfold(manifest, k=args.k, seed=args.seed,
                                      group_by_patient=args.by_patient)
    Path(args.out).write_text(json.dumps(split.to_json_dict(), indent=2))
    sizes = [len(te) for _, te in split.folds]
    print(f"wrote {args.k}-fold split for {len(manifest)} entries to {args.out} "
          f"(test fold sizes {sizes})")
    return 0


def _load_split(path) -> datasets.FoldSplit:
    return datasets.FoldSplit.from_json_dict(json.loads(Path(path).read_text()))


def cmd_run(args) -> int:
    import torch

    fcfg, mixstyle, model_overrides, tcfg = load_run_config(args.config)
    if tcfg.cpu_only:
        torch.set_num_threads(max(1, torch.get_num_threads()))
    manifests = {}
    manifest_paths = {}
    if args.manifest_phone:
        manifests["smartphone"] = datasets.load_manifest(args.manifest_phone)
        manifest_paths["smartphone"] = args.manifest_phone
    if args.manifest_steth:
        manifests["stethoscope"] = datasets.load_manifest(args.manifest_steth)
        manifest_paths["stethoscope"] = args.manifest_steth
    if not manifests:
        raise ConfigError("at least one of --manifest-phone/--manifest-steth is required")

    splits = {}
    for domain, path in (("smartphone", args.split_phone), ("stethoscope", args.split_steth)):
        if path:
            splits[domain] = _load_split(path)
        elif domain in manifests:
            splits[domain] = datasets.stratified_kfold(manifests[domain], k=args.k,
                                                       seed=args.split_seed)

    clip_samples = int(round(tcfg.window_s * signals.CANONICAL_RATE_HZ))
    mcfg = ModelConfig.for_features(fcfg, clip_samples, mixstyle=mixstyle,
                                    **model_overrides)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = run_experiment(args.setup, manifests, splits, manifest_paths,
                            fcfg, mcfg, tcfg,
                            progress=print if not args.quiet else None)
    (out_dir / "report.json").write_text(result.report.to_json())
    table = result.report.render_text()
    (out_dir / "report.txt").write_text(table + "\n")
    print(table)
    print(f"total wall time {result.wall_s:.1f} s; reports in {out_dir}")
    if args.save_checkpoints:
        from .training import save_checkpoint

        for (setup, fold), fr in result.fold_results.items():
            ckpt = out_dir / f"setup{setup}_fold{fold + 1}.pt"
            save_checkpoint(ckpt, fr.model, fr.standardization, fcfg)
    return 0


def cmd_evaluate(args) -> int:
    from .training import evaluate, featurize_entries, load_checkpoint, pack_windows

    model, std, fcfg = load_checkpoint(args.checkpoint)
    manifest = datasets.load_manifest(args.manifest)
    tcfg = TrainConfig()
    windows = featurize_entries(manifest.entries, args.manifest, fcfg, tcfg)
    pack = pack_windows(windows, std, fcfg)
    y_true, y_pred, _ = evaluate(model, pack)
    m = compute_metrics(confusion(y_true, y_pred))
    print(json.dumps({"sensitivity": m.sensitivity, "specificity": m.specificity,
                      "score": m.score, "f1": m.f1,
                      "counts": {"tp": m.counts.tp, "tn": m.counts.tn,
                                 "fp": m.counts.fp, "fn": m.counts.fn},
                      "windows": len(pack)}, indent=2))
    return 0


def cmd_report(args) -> int:
    report = MetricsReport.from_json(Path(args.report).read_text())
    print(report.render_text())
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app, load_service_config

    config = load_service_config(args.config)
    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lungsound",
                                     description="lung-sound assessment workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steth", type=int, default=2000, help="stethoscope clip count")
    p.add_argument("--phone", type=int, default=300, help="smartphone clip count")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--spec", default=None, help="JSON synthesis spec (overrides counts)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write a stratified k-fold split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--by-patient", action="store_true",
                   help="group folds by patient_id (balance best-effort)")
    p.add_argument("--out", required=True, help="output split JSON path")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("run", help="train and evaluate experiment setups")
    p.add_argument("--setup", type=int, action="append", required=True,
                   choices=range(1, 6), help="setup id; repeat for several")
    p.add_argument("--manifest-steth", default=None)
    p.add_argument("--manifest-phone", default=None)
    p.add_argument("--split-steth", default=None, help="split JSON (else computed)")
    p.add_argument("--split-phone", default=None, help="split JSON (else computed)")
    p.add_argument("--k", type=int, default=5, help="folds when computing splits here")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--out", required=True, help="output directory for reports")
    p.add_argument("--save-checkpoints", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="score a checkpoint against a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render a saved report.json as a table")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="start the assessment service")
    p.add_argument("--config", default=None, help="JSON service config file")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LungSoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
