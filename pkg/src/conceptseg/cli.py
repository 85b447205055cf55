"""Operator commands: data generation, training, evaluation, inference,
pilot study, annotation QC, and corpus statistics.

Every run writes a manifest next to its primary output recording the
config snapshot, input and output hashes, and wall time. Reports never
contain timestamps, so reruns with identical inputs are byte-identical.

Exit codes: 0 success, 2 config error, 3 IO error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_config
from .core import rle_decode
from .evaluation import MetricsReport, grefcoco_protocol, jf_metric, muse_protocol
from .inference import (
    ConceptPipeline,
    result_record,
    video_record,
    write_predictions,
)
from .pilot import build_pilot_report, build_probe_set, probe_vectors, save_pilot_plots
from .qc import MockAnnotator, HttpAnnotatorClient, QcRules, corpus_stats, read_corpus, run_qc, write_corpus
from .shapeworld import (
    GenerationError,
    ParseError,
    generate_dataset,
    generate_scene,
    read_dataset,
    rebuild_clip,
    write_dataset,
)
from .training import (
    NumericAbortError,
    Trainer,
    load_checkpoint,
    load_model,
    new_trainer,
    save_checkpoint,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(primary_out: Path, command: str, config: RunConfig,
                    inputs: list[Path], outputs: list[Path], started: float) -> None:
    manifest = {
        "command": command,
        "config": config.to_json(),
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": {str(p): _sha256(Path(p)) for p in outputs},
        "wall_time_s": time.time() - started,
        "created_unix": time.time(),
    }
    path = Path(str(primary_out) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _gt_masks(sample, order=None):
    ids = list(sample.annotation.selected_ids)
    return [rle_decode(sample.masks[i]) for i in ids]


def cmd_gen_data(args, config: RunConfig, video: bool) -> int:
    started = time.time()
    seed = args.seed if args.seed is not None else config.seed
    ds = generate_dataset(seed, args.count, config.gen, video=video)
    out = Path(args.out)
    write_dataset(ds, out)
    _write_manifest(out, "gen-video" if video else "gen-data", config, [], [out], started)
    print(f"wrote {len(ds.samples)} samples to {out}")
    return EXIT_OK


def cmd_train(args, config: RunConfig) -> int:
    started = time.time()
    data_path = Path(args.data)
    dataset = read_dataset(data_path)
    train_cfg = config.train
    if args.steps is not None:
        train_cfg = dataclasses.replace(train_cfg, steps=args.steps)
    if args.mode is not None:
        train_cfg = dataclasses.replace(train_cfg, mode=args.mode)
    seed = args.seed if args.seed is not None else config.seed

    if args.resume:
        trainer = load_checkpoint(args.resume, dataset)
    else:
        trainer = new_trainer(
            dataset,
            lm_config=config.lm,
            dec_config=config.decoder,
            trainer_config=train_cfg,
            weights=config.weights,
            root_seed=seed,
        )
    out = Path(args.out)
    log_path = Path(args.log) if args.log else Path(str(out) + ".metrics.jsonl")
    remaining = train_cfg.steps - trainer.step
    with log_path.open("a", encoding="utf-8") as log:
        def log_fn(entry: dict) -> None:
            for component in ("lm", "set", "total"):
                log.write(json.dumps(
                    {"step": entry["step"], "component": component, "value": entry[component]},
                    sort_keys=True) + "\n")
            log.flush()
            print(f"step {entry['step']}: total {entry['total']:.4f} "
                  f"(lm {entry['lm']:.4f}, set {entry['set']:.4f})")

        trainer.run(remaining, log_every=args.log_every, log_fn=log_fn)
    save_checkpoint(out, trainer, extra={"dataset_sha256": _sha256(data_path)})
    _write_manifest(out, "train", config, [data_path], [out, log_path], started)
    print(f"checkpoint written to {out} at step {trainer.step}")
    return EXIT_OK


def _run_image_inference(pipeline: ConceptPipeline, dataset, threshold: float):
    """Corpus inference; a malformed response scores as a miss, not an abort."""
    from .inference import InferenceError

    records, preds, gts = [], [], []
    abstain_hits, abstain_total = 0, 0
    parse_failures = 0
    for sample in dataset.samples:
        scene = generate_scene(sample.seed, dataset.config)
        try:
            result = pipeline.segment_image(scene, sample.query.text, threshold=threshold)
            rec = result_record(sample.sample_id, result)
            masks = [lm.mask for lm in result.labeled_masks]
            abstained = result.abstained
        except InferenceError as exc:
            parse_failures += 1
            rec = {"sample_id": sample.sample_id, "response": exc.response_text,
                   "set_concept": None, "abstained": False, "masks": [],
                   "error": "span-parse"}
            masks, abstained = [], False
        records.append(rec)
        preds.append(masks)
        gts.append(_gt_masks(sample))
        if sample.kind == "no-target":
            abstain_total += 1
            abstain_hits += abstained or not masks
    rate = abstain_hits / abstain_total if abstain_total else None
    return records, preds, gts, rate, parse_failures


def _run_video_inference(pipeline: ConceptPipeline, dataset, threshold: float):
    records = []
    pred_frames_all, gt_frames_all = [], []
    for sample in dataset.samples:
        clip = rebuild_clip(sample, dataset.config)
        frames = pipeline.segment_video(clip, sample.query.text, threshold=threshold)
        records.append(video_record(sample.sample_id, "", frames))
        selected = set(sample.annotation.selected_ids)
        pred_frames = [[tm.mask.mask for tm in emitted] for emitted in frames]
        gt_frames = []
        for frame_scene in clip.frames:
            from .shapeworld import visible_masks

            vis = visible_masks(frame_scene)
            gt_frames.append([vis[i] for i in sorted(selected)])
        pred_frames_all.append(pred_frames)
        gt_frames_all.append(gt_frames)
    return records, pred_frames_all, gt_frames_all


def cmd_eval(args, config: RunConfig) -> int:
    started = time.time()
    if not args.checkpoint and not args.from_predictions:
        raise ConfigError("eval needs --checkpoint or --from-predictions")
    data_path = Path(args.data)
    dataset = read_dataset(data_path)
    threshold = args.threshold if args.threshold is not None else config.infer.threshold
    protocol = args.protocol or config.eval.protocol

    out_report = Path(args.out)
    out_preds = Path(args.predictions) if args.predictions else Path(str(out_report) + ".predictions.jsonl")

    extra: dict = {}
    inputs = [data_path]
    outputs = [out_report]
    if args.from_predictions:
        if protocol == "video":
            raise ConfigError("--from-predictions supports image protocols only")
        from .inference import read_predictions, record_masks

        preds_path = Path(args.from_predictions)
        inputs.append(preds_path)
        by_id = {rec["sample_id"]: rec for rec in read_predictions(preds_path)}
        preds, gts = [], []
        for sample in dataset.samples:
            rec = by_id.get(sample.sample_id)
            preds.append(record_masks(rec) if rec else [])
            gts.append(_gt_masks(sample))
        if protocol == "grefcoco":
            report = grefcoco_protocol(preds, gts, dataset.config.height, dataset.config.width)
        else:
            report = muse_protocol(preds, gts)
        extra["predictions_sha256"] = _sha256(preds_path)
    else:
        ck_path = Path(args.checkpoint)
        inputs.append(ck_path)
        pipeline = ConceptPipeline.from_checkpoint(ck_path)
        if protocol == "video":
            records, pred_frames, gt_frames = _run_video_inference(pipeline, dataset, threshold)
            per_clip = [
                jf_metric(p, g, dataset.config.height, dataset.config.width)
                for p, g in zip(pred_frames, gt_frames)
            ]
            j = float(np.mean([r.j for r in per_clip]))
            f = float(np.mean([r.f for r in per_clip]))
            report = MetricsReport(j=j, f=f, jandf=(j + f) / 2, sample_count=len(per_clip))
        else:
            records, preds, gts, abstain_rate, parse_failures = _run_image_inference(pipeline, dataset, threshold)
            extra["parse_failures"] = parse_failures
            if protocol == "grefcoco":
                report = grefcoco_protocol(preds, gts, dataset.config.height, dataset.config.width)
            else:
                report = muse_protocol(preds, gts)
            extra["no_target_abstention_rate"] = abstain_rate
        write_predictions(records, out_preds)
        extra["checkpoint_sha256"] = _sha256(ck_path)
        outputs.append(out_preds)
    payload = {
        "metrics": report.to_json(),
        "protocol": protocol,
        "threshold": threshold,
        "corpus_sha256": _sha256(data_path),
        **extra,
    }
    out_report.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(out_report, "eval", config, inputs, outputs, started)
    print(json.dumps(payload["metrics"], sort_keys=True))
    return EXIT_OK


def cmd_infer(args, config: RunConfig, video: bool) -> int:
    started = time.time()
    data_path, ck_path = Path(args.data), Path(args.checkpoint)
    dataset = read_dataset(data_path)
    pipeline = ConceptPipeline.from_checkpoint(ck_path)
    threshold = args.threshold if args.threshold is not None else config.infer.threshold
    if video:
        records, _, _ = _run_video_inference(pipeline, dataset, threshold)
    else:
        records, _, _, _, _ = _run_image_inference(pipeline, dataset, threshold)
    out = Path(args.out)
    write_predictions(records, out)
    _write_manifest(out, "infer-video" if video else "infer", config,
                    [data_path, ck_path], [out], started)
    print(f"wrote {len(records)} prediction records to {out}")
    return EXIT_OK


def cmd_pilot(args, config: RunConfig) -> int:
    started = time.time()
    data_path = Path(args.data)
    dataset = read_dataset(data_path)
    concept_path, baseline_path = Path(args.concept), Path(args.baseline)
    concept_model, concept_vocab, concept_payload = load_model(concept_path)
    baseline_model, baseline_vocab, baseline_payload = load_model(baseline_path)
    if concept_payload.get("dataset_sha256") != baseline_payload.get("dataset_sha256"):
        raise ConfigError("pilot checkpoints were trained on different corpora")
    threshold = args.threshold if args.threshold is not None else config.infer.threshold

    concept_pipe = ConceptPipeline(concept_model, concept_vocab, mode=concept_payload["mode"])
    baseline_pipe = ConceptPipeline(baseline_model, baseline_vocab, mode=baseline_payload["mode"])
    _, concept_preds, gts, _, _ = _run_image_inference(concept_pipe, dataset, threshold)
    _, baseline_preds, _, _, _ = _run_image_inference(baseline_pipe, dataset, threshold)

    probe = build_probe_set(args.probe_seed, per_category=args.probe_per_category,
                            config=dataset.config)
    vec_c = probe_vectors(concept_model, concept_vocab, probe, mode="concept")
    vec_b = probe_vectors(baseline_model, baseline_vocab, probe, mode="seg_token")
    from .evaluation import cluster_separability

    sep_c = cluster_separability(*vec_c)
    sep_b = cluster_separability(*vec_b)
    report = build_pilot_report(concept_preds, baseline_preds, gts, sep_c, sep_b)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / "pilot_report.json"
    out.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    outputs = [out]
    if args.plots:
        outputs += [Path(p) for p in save_pilot_plots(
            report, {"concept": vec_c, "seg_token": vec_b}, out_dir)]
    _write_manifest(out, "pilot", config, [data_path, concept_path, baseline_path],
                    outputs, started)
    print(json.dumps(report.to_json(), sort_keys=True))
    return EXIT_OK


def cmd_qc(args, config: RunConfig) -> int:
    started = time.time()
    corpus_path = Path(args.corpus)
    corpus = read_corpus(corpus_path)
    rules = QcRules.load(args.rules)
    client = HttpAnnotatorClient(args.endpoint) if args.endpoint else MockAnnotator()
    cleaned, report = run_qc(corpus, client, rules)
    out = Path(args.out)
    write_corpus(cleaned, out)
    report_path = Path(str(out) + ".qc_report.json")
    report.write(report_path)
    _write_manifest(out, "qc", config, [corpus_path], [out, report_path], started)
    print(f"residual collisions: {report.residual_collisions}")
    return EXIT_OK if report.residual_collisions == 0 else EXIT_NUMERIC


def cmd_stats(args, config: RunConfig) -> int:
    started = time.time()
    corpus_path = Path(args.corpus)
    corpus = read_corpus(corpus_path)
    stats = corpus_stats(corpus)
    text = json.dumps(stats.to_json(), indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.write_text(text, encoding="utf-8")
        _write_manifest(out, "stats", config, [corpus_path], [out], started)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptseg",
                                     description="set-level concept segmentation toolkit")
    parser.add_argument("--config", default=None, help="JSON run-config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an image dataset")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-video", help="generate a video-clip dataset")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the concept model or the baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["concept", "seg_token"], default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--log", default=None)
    p.add_argument("--log-every", type=int, default=50)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a predictions file")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--from-predictions", default=None,
                   help="score an existing predictions file instead of running a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=["muse", "grefcoco", "video"], default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--predictions", default=None)

    p = sub.add_parser("infer", help="write image predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer-video", help="write video predictions with track ids")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pilot", help="per-count comparison plus separability probe")
    p.add_argument("--concept", required=True, help="concept-mode checkpoint")
    p.add_argument("--baseline", required=True, help="seg_token-mode checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--probe-seed", type=int, default=77)
    p.add_argument("--probe-per-category", type=int, default=9)
    p.add_argument("--plots", action="store_true")

    p = sub.add_parser("qc", help="run annotation quality control")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rules", default=None)
    p.add_argument("--endpoint", default=None, help="remote annotator URL (mock when absent)")

    p = sub.add_parser("stats", help="corpus statistics")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default=None)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        if args.command == "gen-data":
            return cmd_gen_data(args, config, video=False)
        if args.command == "gen-video":
            return cmd_gen_data(args, config, video=True)
        if args.command == "train":
            return cmd_train(args, config)
        if args.command == "eval":
            return cmd_eval(args, config)
        if args.command == "infer":
            return cmd_infer(args, config, video=False)
        if args.command == "infer-video":
            return cmd_infer(args, config, video=True)
        if args.command == "pilot":
            return cmd_pilot(args, config)
        if args.command == "qc":
            return cmd_qc(args, config)
        if args.command == "stats":
            return cmd_stats(args, config)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ParseError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericAbortError, GenerationError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
