"""Command-line harness around the experiment functions.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .audiomap import (FixtureClient, HttpChatClient, LLMClientConfig, MappingCache,
                       VideoLabelSpace, build_prompt, load_mapping_examples,
                       map_via_lexical, map_via_llm, prompt_hash)
from .databench import DatasetSpec, gen_dataset, load_dataset, save_dataset
from .experiment import ConfigError, load_config, run_experiment
from .model import ModelConfig, VideoClassifier, load_checkpoint, save_checkpoint, train_source
from .stats import compute_train_stats, save_train_stats


def _cmd_gen_data(args) -> int:
    spec_doc = json.loads(Path(args.spec).read_text())
    try:
        spec = DatasetSpec.from_dict(spec_doc) if spec_doc else DatasetSpec()
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"dataset spec: {exc}") from exc
    ds = gen_dataset(spec)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.train)} train / {len(ds.test)} test clips to {args.out}")
    return 0


def _cmd_compute_train_stats(args) -> int:
    ds = load_dataset(args.data)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        t, h, w, c = ds.spec.clip_shape
        widths = tuple(int(v) for v in args.widths.split(","))
        config = ModelConfig(num_classes=ds.spec.num_classes, layer_widths=widths,
                             input_shape=(16, h, w, c), seed=args.model_seed)
        model = VideoClassifier(config)
        import numpy as np
        model, acc = train_source(model, ds.train, args.epochs, args.lr,
                                  np.random.default_rng([args.model_seed, 7]))
        print(f"trained source model: {100 * acc:.2f}% train accuracy")
        if args.save_checkpoint:
            save_checkpoint(model, args.save_checkpoint)
            print(f"saved checkpoint to {args.save_checkpoint}")
    layers = args.layers.split(",") if args.layers else None
    stats = compute_train_stats(model, ds.train, layers=layers)
    save_train_stats(stats, args.out)
    print(f"wrote statistics for layers {stats.layer_ids} to {args.out}")
    return 0


def _cmd_map_labels(args) -> int:
    ds = load_dataset(args.data)
    space = VideoLabelSpace(ds.spec.class_names)
    cache = MappingCache(args.out)
    if args.mapper == "llm":
        client = HttpChatClient(LLMClientConfig(endpoint_url=args.llm_endpoint,
                                                model=args.llm_model))
    elif args.mapper == "fixture":
        client = FixtureClient.from_examples(load_mapping_examples()["rows"])
    else:
        client = None
    resolved = 0
    for sample_id, topk in ds.audio.items():
        prompt = build_prompt(space, topk)
        if client is None:
            result = map_via_lexical(space, topk)
            cache.put(sample_id, prompt_hash(prompt.render()), result.raw_reply,
                      result.resolved_label)
        else:
            result = map_via_llm(client, prompt, space, cache=cache, sample_id=sample_id)
        resolved += result.valid
    print(f"cached {len(ds.audio)} mappings ({resolved} resolved) in {args.out}")
    return 0


def _cmd_run(args) -> int:
    config = load_config(args.config)
    if args.seeds:
        config.seeds = [int(s) for s in args.seeds.split(",")]
    report = run_experiment(config, args.out)
    averages = report["metrics"]["average"]
    for name, value in averages.items():
        print(f"{name}: {value:.2f}%")
    print(f"report written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avtta",
                                     description="audio-assisted test-time adaptation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic benchmark dataset")
    p.add_argument("spec", help="dataset spec JSON file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("compute-train-stats", help="pool source feature statistics")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output statistics JSON file")
    p.add_argument("--checkpoint", help="existing model checkpoint to load")
    p.add_argument("--save-checkpoint", help="write the trained checkpoint here")
    p.add_argument("--widths", default="8,8", help="layer widths when training fresh")
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--layers", help="comma-separated layer subset to align")
    p.set_defaults(func=_cmd_compute_train_stats)

    p = sub.add_parser("map-labels", help="warm an offline mapping cache")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="cache JSONL path")
    p.add_argument("--mapper", default="lexical", choices=["lexical", "llm", "fixture"])
    p.add_argument("--llm-endpoint", help="chat completion endpoint URL")
    p.add_argument("--llm-model", help="model name for the endpoint")
    p.set_defaults(func=_cmd_map_labels)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config", help="experiment config JSON file")
    p.add_argument("--out", required=True, help="output report directory")
    p.add_argument("--seeds", help="comma-separated seed override")
    p.set_defaults(func=_cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
