"""Command-line surface for scripted experiments.

All progress goes to stderr; machine-readable results go to stdout or
--out files.  Exit codes: 0 success, 1 data/config error, 2 usage
error.  Configuration is a JSON file with "encoder", "train" and
"data" sections; any key can be overridden with repeated
--set section.key=value flags.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from maskfew import backend
from maskfew import data as dio
from maskfew import pipeline as pl
from maskfew.attribution import integrated_gradients
from maskfew.encoder import EncoderConfig
from maskfew.errors import ConfigError, MaskFewError
from maskfew.masking import mask_generator
from maskfew.pipeline import (EpisodeSpec, ExperimentData, TrainConfig,
                              arm_config, evaluate, run_experiment, run_fsl,
                              sample_episode, train_base)

DEFAULT_CONFIG = {
    "encoder": {k: v for k, v in EncoderConfig().to_dict().items() if k != "n_classes"},
    "train": TrainConfig().to_dict(),
    "data": {"train_path": "train.jsonl", "test_path": "test.jsonl",
             "novel_labels": []},
}


def log(msg: str):
    print(msg, file=sys.stderr)


def load_config(path, overrides) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            user = json.load(fh)
        for section, values in user.items():
            if section not in cfg:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            for key, val in values.items():
                if key not in cfg[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                cfg[section][key] = val
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2 or parts[0] not in cfg or parts[1] not in cfg[parts[0]]:
            raise ConfigError(f"override references unknown config key {dotted!r}")
        section, key = parts
        old = cfg[section][key]
        if isinstance(old, bool):
            cfg[section][key] = raw.lower() in ("1", "true", "yes")
        elif isinstance(old, int):
            cfg[section][key] = int(raw)
        elif isinstance(old, float):
            cfg[section][key] = float(raw)
        elif isinstance(old, list):
            cfg[section][key] = [s for s in raw.split(",") if s]
        else:
            cfg[section][key] = raw
    return cfg


def build_workspace(cfg: dict, need_test: bool = True) -> ExperimentData:
    """Load corpora, split base/novel, build the tokenizer and encoder config."""
    dcfg = cfg["data"]
    if not dcfg["novel_labels"]:
        raise ConfigError("data.novel_labels is empty; nothing to adapt to")
    train = dio.load_corpus(dcfg["train_path"], split_tag="train")
    base_train, novel_train = dio.split_base_novel(train, dcfg["novel_labels"])
    if need_test:
        test = dio.load_corpus(dcfg["test_path"], split_tag="test")
        base_test, novel_test = dio.split_base_novel(test, dcfg["novel_labels"])
    else:
        base_test, novel_test = base_train, novel_train
    n_classes = len(base_train.label_map) + len(novel_train.label_map)
    enc_cfg = EncoderConfig(n_classes=n_classes, **cfg["encoder"])
    tok = dio.build_tokenizer(train, enc_cfg.vocab_size, max_len=enc_cfg.max_len)
    return ExperimentData(base_train=base_train, novel_train=novel_train,
                          base_test=base_test, novel_test=novel_test,
                          tokenizer=tok, enc_cfg=enc_cfg)


def train_cfg_of(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


def parse_seeds(spec: str) -> list:
    """Seed list syntax: "7", "1,2,5" or "1..10" (inclusive)."""
    if ".." in spec:
        lo, hi = spec.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in spec.split(",") if s]


def _load_model(path):
    params, cfgs = dio.load_checkpoint(path)
    return params, cfgs


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(args) -> int:
    train, test, novel = dio.synth_corpus(
        n_base=args.base_classes, n_novel=args.novel_classes,
        train_per_class=args.train_per_class, test_per_class=args.test_per_class,
        seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_path, test_path = out / "train.jsonl", out / "test.jsonl"
    dio.write_jsonl(train, train_path)
    dio.write_jsonl(test, test_path)
    log(f"wrote {len(train)} train and {len(test)} test records to {out}")
    print(json.dumps({"train": str(train_path), "test": str(test_path),
                      "novel_labels": novel}, sort_keys=True))
    return 0


def cmd_train_base(args) -> int:
    cfg = load_config(args.config, args.set)
    data = build_workspace(cfg, need_test=False)
    tcfg = train_cfg_of(cfg)
    if args.seed is not None:
        tcfg = pl.replace(tcfg, seed=args.seed)
    log(f"training base model: {len(data.base_train)} samples, "
        f"{tcfg.epoch_b} epochs, backend={backend.name}")
    params = train_base(data.base_train, data.tokenizer, data.enc_cfg, tcfg)
    dio.save_checkpoint(params, {"train": tcfg.to_dict()}, args.out)
    log(f"saved checkpoint to {args.out}")
    print(json.dumps({"checkpoint": str(args.out)}))
    return 0


def cmd_select_anchors(args) -> int:
    cfg = load_config(args.config, args.set)
    data = build_workspace(cfg, need_test=False)
    tcfg = train_cfg_of(cfg)
    seed = args.seed if args.seed is not None else tcfg.seed
    params, _ = _load_model(args.checkpoint)
    episode = sample_episode(data.novel_train, tcfg.K, seed)
    base_seqs = [dio.encode_text(data.tokenizer, t) for t in data.base_train.texts()]
    shot_rows = [r for c in episode.classes for r in episode.shots[c]]
    novel_seqs = [dio.encode_text(data.tokenizer, data.novel_train.records[r]["text"])
                  for r in shot_rows]
    base_fm = pl.extract_features(base_seqs, params, data.base_train.labels_of(),
                                  np.arange(len(data.base_train)))
    novel_fm = pl.extract_features(novel_seqs, params,
                                   data.novel_train.labels_of()[shot_rows],
                                   np.asarray(shot_rows))
    from maskfew.anchors import select_anchors
    anchor_set = select_anchors(base_fm, novel_fm, tcfg.K, tcfg.d_n_mode)
    inv = {v: k for k, v in data.base_train.label_map.items()}
    payload = json.dumps(anchor_set.to_jsonable(inv), sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
        log(f"wrote anchors to {args.out}")
    else:
        print(payload)
    return 0


def cmd_attribute(args) -> int:
    cfg = load_config(args.config, args.set)
    data = build_workspace(cfg, need_test=False)
    tcfg = train_cfg_of(cfg)
    params, _ = _load_model(args.checkpoint)
    seq = dio.encode_text(data.tokenizer, args.text)
    if args.target is None:
        from maskfew.encoder import classify
        from maskfew import tensor as T
        with T.no_grad():
            target = int(classify(seq, params).data.argmax())
    else:
        target = args.target
    steps = args.steps if args.steps else tcfg.ig_steps
    scores = integrated_gradients(seq, target, params, steps=steps)
    tokens = data.tokenizer.decode(seq.ids)
    sink = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for pos, (tok_str, score) in enumerate(zip(tokens, scores.scores)):
            sink.write(json.dumps({"position": pos, "token": tok_str,
                                   "score": float(score)}) + "\n")
        sink.write(json.dumps({"target_class": target, "steps": steps,
                               "completeness_gap": scores.completeness_gap,
                               "delta": scores.delta}, sort_keys=True) + "\n")
    finally:
        if args.out:
            sink.close()
    return 0


def cmd_mask_preview(args) -> int:
    cfg = load_config(args.config, args.set)
    data = build_workspace(cfg, need_test=False)
    tcfg = train_cfg_of(cfg)
    params, _ = _load_model(args.checkpoint)
    seq = dio.encode_text(data.tokenizer, args.text)
    if args.target is None:
        from maskfew.encoder import classify
        from maskfew import tensor as T
        with T.no_grad():
            target = int(classify(seq, params).data.argmax())
    else:
        target = args.target
    scores = integrated_gradients(seq, target, params,
                                  steps=args.steps or tcfg.ig_steps)
    spec = mask_generator(seq, scores, args.ratio)
    words = data.tokenizer.tokenize(args.text)[: data.tokenizer.max_len - 1]
    lo, hi = spec.keep_start - 1, spec.keep_start - 1 + spec.keep_len
    rendered = words[:lo] + ["["] + words[lo:hi] + ["]"] + words[hi:]
    print(" ".join(rendered))
    return 0


def cmd_finetune(args) -> int:
    cfg = load_config(args.config, args.set)
    data = build_workspace(cfg, need_test=False)
    tcfg = train_cfg_of(cfg)
    if args.arm:
        tcfg = arm_config(tcfg, args.arm)
    seed = args.seed if args.seed is not None else tcfg.seed
    tcfg = pl.replace(tcfg, seed=seed)
    params, _ = _load_model(args.checkpoint)
    episode = sample_episode(data.novel_train, tcfg.K, seed)
    log(f"fsl fine-tuning: {len(episode.classes)}-way {tcfg.K}-shot, "
        f"{tcfg.epoch_f} epochs, ratio={tcfg.ratio}")
    run_fsl(params, data.base_train, data.novel_train, episode, data.tokenizer, tcfg)
    dio.save_checkpoint(params, {"train": tcfg.to_dict()}, args.out)
    log(f"saved checkpoint to {args.out}")
    print(json.dumps({"checkpoint": str(args.out)}))
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, args.set)
    data = build_workspace(cfg)
    tcfg = train_cfg_of(cfg)
    params, _ = _load_model(args.checkpoint)
    episode = EpisodeSpec(
        classes=sorted(data.novel_train.label_map.values()),
        shots={c: [] for c in data.novel_train.label_map.values()},
        seed=args.seed if args.seed is not None else tcfg.seed)
    acc = evaluate(params, data.novel_test, episode, data.tokenizer)
    print(json.dumps({"accuracy": round(acc, 6)}))
    return 0


def cmd_experiment(args) -> int:
    cfg = load_config(args.config, args.set)
    data = build_workspace(cfg)
    tcfg = train_cfg_of(cfg)
    seeds = parse_seeds(args.seeds)
    if args.ratio_grid:
        ratios = list(pl.RATIO_GRID)
    elif args.ratios:
        ratios = [float(r) for r in args.ratios.split(",") if r]
    else:
        ratios = [tcfg.ratio]
    hook = None
    if args.ckpt_dir:
        ckpt_dir = Path(args.ckpt_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)

        def hook(seed, params):
            dio.save_checkpoint(params, {"train": tcfg.to_dict()},
                                ckpt_dir / f"seed{seed}.ckpt")

    log(f"experiment: arm={args.arm}, seeds={seeds}, ratios={ratios}, "
        f"workers={pl.worker_count()}, backend={backend.name}")
    report = run_experiment(data, tcfg, seeds, ratios=ratios, arm=args.arm,
                            checkpoint_hook=hook)
    csv_text = report.to_csv()
    table = report.to_table()
    if args.out:
        Path(args.out).write_text(csv_text, encoding="utf-8")
        Path(args.out).with_suffix(".txt").write_text(table, encoding="utf-8")
        log(f"wrote {args.out} and {Path(args.out).with_suffix('.txt')}")
        print(table, end="")
    else:
        print(csv_text, end="")
        print(table, end="")
    return 0


def cmd_project(args) -> int:
    cfg = load_config(args.config, args.set)
    data = build_workspace(cfg, need_test=False)
    params, _ = _load_model(args.checkpoint)
    corpus = dio.load_corpus(args.data) if args.data else None
    if corpus is None:
        raise ConfigError("project needs --data pointing at a JSONL corpus")
    pl.project_features(params, corpus, data.tokenizer, args.out)
    log(f"wrote 2-d projection to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskfew",
        description="Attribution-guided masking and contrastive fine-tuning "
                    "for few-shot text classification.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, default=None)
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint")

    p = sub.add_parser("gen-synth", help="write a synthetic benchmark corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-classes", type=int, default=4)
    p.add_argument("--novel-classes", type=int, default=2)
    p.add_argument("--train-per-class", type=int, default=50)
    p.add_argument("--test-per-class", type=int, default=30)
    p.set_defaults(fn=cmd_gen_synth)

    p = sub.add_parser("train-base", help="fine-tune the encoder on the base split")
    common(p)
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.set_defaults(fn=cmd_train_base)

    p = sub.add_parser("select-anchors", help="pick anchor samples, write JSON")
    common(p, checkpoint=True)
    p.add_argument("--out", help="output JSON path (default: stdout)")
    p.set_defaults(fn=cmd_select_anchors)

    p = sub.add_parser("attribute", help="per-token attribution scores as JSON lines")
    common(p, checkpoint=True)
    p.add_argument("--text", required=True)
    p.add_argument("--target", type=int, default=None,
                   help="target class index (default: predicted class)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", help="output path (default: stdout)")
    p.set_defaults(fn=cmd_attribute)

    p = sub.add_parser("mask-preview", help="show the kept segment of a sentence")
    common(p, checkpoint=True)
    p.add_argument("--text", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--target", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_mask_preview)

    p = sub.add_parser("finetune", help="run few-shot adaptation from a base checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--arm", choices=pl.ARMS, default=None,
                   help="ablation arm (default: flags from config)")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("evaluate", help="novel-class accuracy of a checkpoint")
    common(p, checkpoint=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("experiment", help="seed-averaged episodes, CSV report")
    common(p)
    p.add_argument("--seeds", required=True, help='e.g. "1..10" or "3,5,9"')
    p.add_argument("--arm", choices=pl.ARMS, default="full")
    p.add_argument("--ratio-grid", action="store_true",
                   help="sweep the 9-point mask-ratio grid")
    p.add_argument("--ratios", help="comma-separated ratio list")
    p.add_argument("--out", help="CSV path; a .txt table is written beside it")
    p.add_argument("--ckpt-dir", help="directory for per-seed final checkpoints")
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("project", help="2-d PCA of sentence features as CSV")
    common(p, checkpoint=True)
    p.add_argument("--data", help="JSONL corpus to project")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_project)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MaskFewError as e:
        log(f"error: {e}")
        return 1
    except OSError as e:
        log(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
