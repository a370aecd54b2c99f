"""End-to-end training pipeline and the seed-averaged experiment harness.

Stage 1 fine-tunes the encoder on the base dataset with AdamW and
cross-entropy only.  Stage 2 selects anchor samples once, using the
base-trained encoder as the feature extractor.  Stage 3 runs SignSGD
over mixed batches of unmasked novel shots and masked anchors, with
the anchor masks regenerated from fresh attribution scores every epoch
(or before every batch, per config).  Evaluation is accuracy on the
test samples of the episode's novel classes, argmax over all classes.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from maskfew import encoder as enc
from maskfew import tensor as T
from maskfew.anchors import AnchorSet, FeatureMatrix, select_anchors
from maskfew.attribution import integrated_gradients
from maskfew.data import Corpus, Tokenizer, encode_text
from maskfew.encoder import EncoderConfig, ModelParams, TokenSequence, init_params
from maskfew.errors import ConfigError, ContractError
from maskfew.masking import apply_mask, mask_generator
from maskfew.objective import (AdamW, Batch, ORIGIN_ANCHOR, ORIGIN_NOVEL,
                               SignSGD, cross_entropy, total_loss)

RATIO_GRID = tuple(round(0.05 + 0.1 * k, 2) for k in range(9))

ARMS = ("plain", "contrastive", "anchor", "anchor_contrastive", "full")

_EVAL_CHUNK = 64
_FULL_BATCH_LIMIT = 64
_FSL_BATCH = 32


@dataclass(frozen=True)
class TrainConfig:
    epoch_b: int = 8
    epoch_f: int = 30
    ratio: float = 0.45
    base_lr: float = 2e-5
    fsl_lr: float = 4e-5
    batch_size_base: int = 64
    K: int = 5
    seed: int = 0
    ig_steps: int = 64
    d_n_mode: str = "mean"
    mask_mode: str = "attention"
    mask_refresh: str = "per-epoch"
    use_anchors: bool = True
    use_contrastive: bool = True
    use_mask: bool = True

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.K < 1 or self.epoch_b < 1 or self.epoch_f < 1:
            raise ConfigError("K, epoch_b and epoch_f must all be >= 1")
        if self.batch_size_base < 1 or self.ig_steps < 1:
            raise ConfigError("batch_size_base and ig_steps must be >= 1")
        if self.d_n_mode not in ("mean", "min"):
            raise ConfigError(f"d_n_mode must be mean or min, got {self.d_n_mode!r}")
        if self.mask_mode not in ("attention", "replace"):
            raise ConfigError(f"mask_mode must be attention or replace, got {self.mask_mode!r}")
        if self.mask_refresh not in ("per-epoch", "per-batch"):
            raise ConfigError(f"mask_refresh must be per-epoch or per-batch, got {self.mask_refresh!r}")

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def arm_config(cfg: TrainConfig, arm: str) -> TrainConfig:
    """Ablation wiring: which of anchors/contrastive/mask an arm enables."""
    flags = {
        "plain": (False, False, False),
        "contrastive": (False, True, False),
        "anchor": (True, False, False),
        "anchor_contrastive": (True, True, False),
        "full": (True, True, True),
    }
    if arm not in flags:
        raise ConfigError(f"unknown arm {arm!r}; expected one of {ARMS}")
    anchors, contrastive, mask = flags[arm]
    return replace(cfg, use_anchors=anchors, use_contrastive=contrastive, use_mask=mask)


@dataclass
class EpisodeSpec:
    """One seeded N-way draw of K shots per novel class."""

    classes: list  # novel class indices in the joint space
    shots: dict    # class index -> list of row ids into the novel train corpus
    seed: int

    def __post_init__(self):
        for cls, rows in self.shots.items():
            if len(set(rows)) != len(rows):
                raise ContractError(f"episode class {cls} repeats a shot row")


def sample_episode(novel_train: Corpus, K: int, seed: int) -> EpisodeSpec:
    """Uniform draw, without replacement, of K shots per novel class."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE15]))
    labels = novel_train.labels_of()
    classes = sorted(int(c) for c in np.unique(labels))
    shots = {}
    for cls in classes:
        rows = np.flatnonzero(labels == cls)
        if len(rows) < K:
            raise ContractError(f"novel class {cls} has only {len(rows)} samples; need K={K}")
        picked = rng.choice(rows, size=K, replace=False)
        shots[cls] = sorted(int(r) for r in picked)
    return EpisodeSpec(classes=classes, shots=shots, seed=seed)


# ---------------------------------------------------------------------------
# stage 1: base fine-tuning


def _encode_corpus(corpus: Corpus, tok: Tokenizer) -> list:
    return [encode_text(tok, text) for text in corpus.texts()]


def _batch_logits(seqs, params):
    z = enc.encode_batch(seqs, params)
    feats = T.tslice(z, (slice(None), 0))
    return enc.head_logits(feats, params), feats


def train_base(base_train: Corpus, tok: Tokenizer, enc_cfg: EncoderConfig,
               cfg: TrainConfig, params: ModelParams | None = None) -> ModelParams:
    """epoch_b epochs of AdamW on cross-entropy over shuffled mini-batches."""
    if len(base_train) == 0:
        raise ContractError("base dataset is empty")
    if params is None:
        params = init_params(enc_cfg, seed=cfg.seed)
    seqs = _encode_corpus(base_train, tok)
    labels = base_train.labels_of()
    opt = AdamW(params, lr=cfg.base_lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xBA5E]))
    for _ in range(cfg.epoch_b):
        order = rng.permutation(len(seqs))
        for lo in range(0, len(order), cfg.batch_size_base):
            idx = order[lo:lo + cfg.batch_size_base]
            with T.fresh_tape():
                logits, _ = _batch_logits([seqs[i] for i in idx], params)
                loss = cross_entropy(logits, labels[idx])
                params.zero_grads()
                T.backward(loss)
                opt.step()
        if not params.all_finite():
            raise ContractError("non-finite parameter after a base-training epoch")
    return params


# ---------------------------------------------------------------------------
# stage 2+3: anchors, masks, mixed fine-tuning


def extract_features(seqs: list, params: ModelParams, labels, refs) -> FeatureMatrix:
    """CLS features in no-grad chunks; rows follow the input order."""
    feats = []
    with T.no_grad():
        for lo in range(0, len(seqs), _EVAL_CHUNK):
            chunk = seqs[lo:lo + _EVAL_CHUNK]
            z = enc.encode_batch(chunk, params)
            feats.append(z.data[:, 0, :])
    return FeatureMatrix(np.concatenate(feats, axis=0), labels, refs)


def _mask_anchor(seq: TokenSequence, label: int, origin: str, params: ModelParams,
                 cfg: TrainConfig) -> TokenSequence:
    if origin != ORIGIN_ANCHOR:
        raise ContractError("mask generation attempted on a non-anchor sample")
    scores = integrated_gradients(seq, int(label), params, steps=cfg.ig_steps)
    spec = mask_generator(seq, scores, cfg.ratio)
    return apply_mask(seq, spec, mode=cfg.mask_mode)


def run_fsl(params: ModelParams, base_train: Corpus, novel_train: Corpus,
            episode: EpisodeSpec, tok: Tokenizer, cfg: TrainConfig) -> ModelParams:
    """Anchor selection plus epoch_f epochs of SignSGD on the mixed set."""
    novel_labels = novel_train.labels_of()
    novel_space = set(int(c) for c in np.unique(novel_labels)) if len(novel_train) else set()
    base_space = set(int(c) for c in np.unique(base_train.labels_of()))
    for cls in episode.classes:
        if cls in base_space or cls not in novel_space:
            raise ContractError(f"episode class {cls} is not a novel-space class")

    shot_rows = [r for cls in episode.classes for r in episode.shots[cls]]
    novel_seqs = [encode_text(tok, novel_train.records[r]["text"]) for r in shot_rows]
    novel_y = novel_labels[shot_rows]

    anchor_entries = []
    if cfg.use_anchors:
        base_seqs = _encode_corpus(base_train, tok)
        base_fm = extract_features(base_seqs, params, base_train.labels_of(),
                                   np.arange(len(base_train)))
        novel_fm = extract_features(novel_seqs, params, novel_y,
                                    np.asarray(shot_rows))
        anchor_set = select_anchors(base_fm, novel_fm, cfg.K, cfg.d_n_mode)
        base_y = base_train.labels_of()
        anchor_entries = [(base_seqs[r], int(base_y[r])) for r in anchor_set.refs()]

    rng = np.random.default_rng(np.random.SeedSequence([episode.seed, cfg.seed, 0xF51]))
    opt = SignSGD(params, lr=cfg.fsl_lr)

    def build_mixed(masked_anchors):
        seqs = list(novel_seqs) + [s for s, _ in masked_anchors]
        ys = np.concatenate([novel_y, np.array([y for _, y in masked_anchors], dtype=np.int64)]) \
            if masked_anchors else novel_y.copy()
        origin = [ORIGIN_NOVEL] * len(novel_seqs) + [ORIGIN_ANCHOR] * len(masked_anchors)
        return seqs, ys, origin

    def regenerate():
        if not cfg.use_anchors:
            return []
        if not cfg.use_mask:
            return list(anchor_entries)
        return [(_mask_anchor(s, y, ORIGIN_ANCHOR, params, cfg), y)
                for s, y in anchor_entries]

    for _ in range(cfg.epoch_f):
        if cfg.mask_refresh == "per-epoch":
            mixed_seqs, mixed_y, mixed_origin = build_mixed(regenerate())
        order = rng.permutation(len(novel_seqs) + len(anchor_entries))
        if len(order) <= _FULL_BATCH_LIMIT:
            groups = [order]
        else:
            groups = [order[lo:lo + _FSL_BATCH] for lo in range(0, len(order), _FSL_BATCH)]
        for group in groups:
            if cfg.mask_refresh == "per-batch":
                mixed_seqs, mixed_y, mixed_origin = build_mixed(regenerate())
            batch = Batch([mixed_seqs[i] for i in group], mixed_y[group],
                          [mixed_origin[i] for i in group])
            with T.fresh_tape():
                logits, feats = _batch_logits(batch.sequences, params)
                loss = total_loss(logits, feats, batch.labels,
                                  use_contrastive=cfg.use_contrastive)
                params.zero_grads()
                T.backward(loss)
                opt.step()
        if not params.all_finite():
            raise ContractError("non-finite parameter after an FSL epoch")
    return params


def evaluate(params: ModelParams, test_corpus: Corpus, episode: EpisodeSpec,
             tok: Tokenizer) -> float:
    """Accuracy on test samples of the episode's novel classes.

    The prediction is the argmax over all classes, so leakage back into
    the base label space counts as an error.
    """
    wanted = set(episode.classes)
    labels = test_corpus.labels_of()
    rows = [i for i, y in enumerate(labels) if int(y) in wanted]
    if not rows:
        raise ContractError("test corpus has no samples of the episode's classes")
    seqs = [encode_text(tok, test_corpus.records[i]["text"]) for i in rows]
    truth = labels[rows]
    correct = 0
    with T.no_grad():
        for lo in range(0, len(seqs), _EVAL_CHUNK):
            logits, _ = _batch_logits(seqs[lo:lo + _EVAL_CHUNK], params)
            pred = logits.data.argmax(axis=1)
            correct += int((pred == truth[lo:lo + _EVAL_CHUNK]).sum())
    return correct / len(rows)


# ---------------------------------------------------------------------------
# experiment harness


@dataclass
class ExperimentData:
    """Everything one experiment needs: splits, tokenizer, encoder config."""

    base_train: Corpus
    novel_train: Corpus
    base_test: Corpus
    novel_test: Corpus
    tokenizer: Tokenizer
    enc_cfg: EncoderConfig


@dataclass
class ReportRow:
    seed: int
    ratio: float
    K: int
    n_way: int
    accuracy: float


@dataclass
class Report:
    rows: list = field(default_factory=list)

    def accuracies(self, ratio=None) -> np.ndarray:
        vals = [r.accuracy for r in self.rows if ratio is None or r.ratio == ratio]
        return np.array(vals)

    def ratios(self) -> list:
        return sorted({r.ratio for r in self.rows})

    def mean_std(self, ratio=None) -> tuple:
        acc = self.accuracies(ratio)
        return float(acc.mean()), float(acc.std())

    def ratio_stability_std(self) -> float:
        """Std of the per-ratio mean accuracies across the grid."""
        means = np.array([self.mean_std(r)[0] for r in self.ratios()])
        return float(means.std())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "ratio", "K", "n_way", "accuracy"])
        for r in self.rows:
            w.writerow([r.seed, f"{r.ratio:g}", r.K, r.n_way, f"{r.accuracy:.6f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        """Aligned text table, one mean±std row per ratio."""
        lines = [f"{'ratio':>8}  {'episodes':>8}  {'accuracy':>14}"]
        for ratio in self.ratios():
            acc = self.accuracies(ratio)
            lines.append(f"{ratio:>8g}  {len(acc):>8d}  "
                         f"{acc.mean():>7.3f}±{acc.std():.3f}")
        if len(self.ratios()) > 1:
            lines.append(f"ratio_stability_std={self.ratio_stability_std():.6f}")
        return "\n".join(lines) + "\n"


def run_episode(data: ExperimentData, cfg: TrainConfig, seed: int,
                base_params: ModelParams | None = None) -> tuple:
    """Train (or reuse) the base model, adapt on one episode, evaluate."""
    cfg = replace(cfg, seed=seed)
    if base_params is None:
        base_params = train_base(data.base_train, data.tokenizer, data.enc_cfg, cfg)
    params = base_params.clone()
    episode = sample_episode(data.novel_train, cfg.K, seed)
    run_fsl(params, data.base_train, data.novel_train, episode, data.tokenizer, cfg)
    acc = evaluate(params, data.novel_test, episode, data.tokenizer)
    return acc, episode, params


def _seed_worker(args):
    data, cfg, seed, ratios, arm = args
    out = []
    base = train_base(data.base_train, data.tokenizer, data.enc_cfg,
                      replace(cfg, seed=seed))
    run_cfg = arm_config(cfg, arm)
    last_params = None
    for ratio in ratios:
        acc, episode, params = run_episode(
            data, replace(run_cfg, ratio=ratio), seed, base_params=base)
        out.append((ReportRow(seed=seed, ratio=ratio, K=cfg.K,
                              n_way=len(episode.classes), accuracy=acc)))
        last_params = params
    return out, last_params


def worker_count() -> int:
    raw = os.environ.get("MASKFEW_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MASKFEW_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def run_experiment(data: ExperimentData, cfg: TrainConfig, seeds: list,
                   ratios: list | None = None, arm: str = "full",
                   checkpoint_hook=None) -> Report:
    """One arm over a seed list (and optional ratio grid); mean±std report.

    The base model is trained once per seed and shared across the ratio
    grid.  Episodes run on parallel workers when MASKFEW_THREADS > 1;
    rows are merged in seed order either way.  ``checkpoint_hook(seed,
    params)`` receives the final adapted params of each seed's last run.
    """
    ratios = list(ratios) if ratios is not None else [cfg.ratio]
    tasks = [(data, cfg, int(seed), ratios, arm) for seed in seeds]
    workers = worker_count()
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_seed_worker, tasks))
    else:
        results = [_seed_worker(t) for t in tasks]
    report = Report()
    for (rows, params), (_, _, seed, _, _) in zip(results, tasks):
        report.rows.extend(rows)
        if checkpoint_hook is not None:
            checkpoint_hook(seed, params)
    return report


def project_features(params: ModelParams, corpus: Corpus, tok: Tokenizer,
                     out_path):
    """2-D PCA of CLS features, written as x,y,label CSV for plotting."""
    seqs = _encode_corpus(corpus, tok)
    fm = extract_features(seqs, params, corpus.labels_of(), np.arange(len(corpus)))
    centered = fm.features - fm.features.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    # deterministic sign: largest-magnitude loading is positive
    for i in range(comps.shape[0]):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    xy = centered @ comps.T
    inv_label = {v: k for k, v in corpus.label_map.items()}
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "label"])
        for row, y in zip(xy, fm.labels):
            w.writerow([f"{row[0]:.6f}", f"{row[1]:.6f}", inv_label[int(y)]])
