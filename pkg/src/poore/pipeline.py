"""End-to-end protocol: base training, Mahalanobis fit, keyword selection,
post-hoc fine-tuning, and multi-estimator evaluation.

Every stage writes its artifacts into the run directory and can be rerun from
them.  Training stages hold the corpus OOD lock, so test-time OOD data is
unreachable until evaluation.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from . import estimators, keywords as kw, mahalanobis, metrics
from .data import (Corpus, SynthConfig, generate_synthetic, load_jsonl, pad_batch,
                   synth_config_from_dict, synth_config_to_dict)
from .encoder import (EncoderConfig, ModelState, TextClassifier, attention_received,
                      load_checkpoint, make_optimizer, save_checkpoint, train_step)
from .errors import ConfigError, NumericError
from .losses import LossLog, LossSpec, LossWeights, TrainBatch

logger = logging.getLogger(__name__)

RECALL = 0.90
# masking stream reserved for before/after distance measurements
MEASURE_EPOCH = 1_000_000


def lambda_por_grid() -> list[float]:
    """1e-5 ... 1e2 in factors of ten."""
    return [float(f"1e{k}") for k in range(-5, 3)]


@dataclass
class ExperimentConfig:
    synth: SynthConfig | None = field(default_factory=SynthConfig)
    data_path: str | None = None
    # encoder
    depth: int = 2
    heads: int = 2
    model_dim: int = 64
    mlp_dim: int = 128
    max_len: int = 32
    dropout: float = 0.1
    embed_init_std: float = 0.02
    # base training
    base_epochs: int = 25
    base_lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 32
    # post-hoc fine-tuning
    posthoc_epochs: int = 1
    posthoc_lr: float | None = None
    lambda_skl: float = 0.1
    lambda_por: float = 0.1
    stop_grad_pseudo: bool = False
    freeze_token_embeddings: bool = False
    distance_cap: float | None = None
    criterion: str = "maha"
    top_m: int | None = None
    p_mask: float = 0.9
    protect_keywords: bool = True
    attention_mode: str = "cls_query"
    feature_layer: int = -1
    refit_after: bool = True
    # evaluation
    estimators: list[str] = field(default_factory=lambda: list(estimators.ROSTER))
    odin_temperature: float = 1000.0
    odin_epsilon: float = 0.0
    dropout_passes: int = 10
    out_dir: str = "runs/default"
    seed: int = 0

    def validate(self) -> None:
        if (self.synth is None) == (self.data_path is None):
            raise ConfigError("exactly one of synth / data_path must be set")
        if self.data_path is not None and not Path(self.data_path).exists():
            raise ConfigError(f"data file {self.data_path} does not exist")
        if self.posthoc_epochs < 1:
            raise ConfigError("posthoc_epochs must be >= 1")
        if self.base_epochs < 0:
            raise ConfigError("base_epochs must be >= 0")
        if self.criterion not in kw.CRITERIA:
            raise ConfigError(f"criterion must be one of {kw.CRITERIA}")
        if self.attention_mode not in ("cls_query", "all_query"):
            raise ConfigError("attention_mode must be cls_query or all_query")
        unknown = set(self.estimators) - set(estimators.ROSTER)
        if unknown:
            raise ConfigError(f"unknown estimators: {sorted(unknown)}")
        LossWeights(self.lambda_skl, self.lambda_por)
        kw.MaskingConfig(self.p_mask)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_skl, self.lambda_por)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["synth"] = None if self.synth is None else synth_config_to_dict(self.synth)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "synth" in d and d["synth"] is not None:
            d["synth"] = synth_config_from_dict(d["synth"])
        return cls(**d)


def derive_seed(master: int, stage: str) -> int:
    """Stage seed from the master seed; stable across runs and platforms."""
    ss = np.random.SeedSequence([master, zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


def load_corpus(cfg: ExperimentConfig) -> Corpus:
    if cfg.data_path is not None:
        return load_jsonl(cfg.data_path, max_len=cfg.max_len)
    synth = copy.deepcopy(cfg.synth)
    if synth.seed is None:
        synth.seed = derive_seed(cfg.seed, "data")
    if synth.max_len + 1 > cfg.max_len:
        raise ConfigError(f"synthetic sentences (+CLS) exceed encoder max_len {cfg.max_len}")
    return generate_synthetic(synth)


def encoder_config(cfg: ExperimentConfig, corpus: Corpus) -> EncoderConfig:
    return EncoderConfig(vocab_size=corpus.vocab.size, num_classes=corpus.num_classes,
                         depth=cfg.depth, heads=cfg.heads, model_dim=cfg.model_dim,
                         mlp_dim=cfg.mlp_dim, max_len=cfg.max_len, dropout=cfg.dropout,
                         embed_init_std=cfg.embed_init_std, seed=derive_seed(cfg.seed, "init"))


def estimator_settings(cfg: ExperimentConfig) -> estimators.EstimatorSettings:
    return estimators.EstimatorSettings(
        odin_temperature=cfg.odin_temperature, odin_epsilon=cfg.odin_epsilon,
        dropout_passes=cfg.dropout_passes, dropout_seed=derive_seed(cfg.seed, "mc-dropout"),
        feature_layer=cfg.feature_layer)


def _tokens(examples) -> list[tuple[int, ...]]:
    return [e.tokens for e in examples]


def _labels(examples) -> np.ndarray:
    return np.array([e.label for e in examples], dtype=np.int64)


@torch.no_grad()
def accuracy(model: TextClassifier, examples) -> float:
    if not examples:
        return float("nan")
    _, _, logits = estimators.extract(model, _tokens(examples))
    return float((logits.argmax(axis=1) == _labels(examples)).mean())


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def save_config(cfg: ExperimentConfig, out_dir: Path) -> None:
    _dump_json(cfg.to_dict(), out_dir / "config.json")


def _ce_batch(examples, idx) -> TrainBatch:
    ids = torch.from_numpy(pad_batch([examples[i].tokens for i in idx]))
    labels = torch.tensor([examples[i].label for i in idx], dtype=torch.long)
    return TrainBatch(ids, labels)


def run_base_training(cfg: ExperimentConfig, corpus: Corpus,
                      out_dir: str | Path | None = None) -> TextClassifier:
    """CE-only training with AdamW; keeps the best-validation-accuracy model.

    Ties in validation accuracy go to the later epoch.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with corpus.ood_locked():
        train, val = corpus.split("train"), corpus.split("val")
        model = TextClassifier(encoder_config(cfg, corpus))
        state = ModelState(model, make_optimizer(model, cfg.base_lr, cfg.weight_decay))
        spec = LossSpec(LossWeights(0.0, 0.0))
        order_rng = np.random.default_rng(derive_seed(cfg.seed, "base-order"))
        best_acc, best_state = -1.0, copy.deepcopy(model.state_dict())
        curve = []
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(cfg.seed, "base-dropout"))
            for epoch in range(cfg.base_epochs):
                perm = order_rng.permutation(len(train))
                losses = []
                for start in range(0, len(perm), cfg.batch_size):
                    try:
                        _, loss, _ = train_step(state, _ce_batch(train, perm[start:start + cfg.batch_size]), spec)
                    except NumericError as err:
                        raise NumericError(f"base training diverged at step {err.step}: {err}",
                                           term=err.term, step=err.step) from err
                    losses.append(loss)
                train_acc, val_acc = accuracy(model, train), accuracy(model, val)
                curve.append((epoch + 1, repr(float(np.mean(losses))), repr(train_acc), repr(val_acc)))
                logger.info("base epoch %d loss %.4f train_acc %.4f val_acc %.4f",
                            epoch + 1, np.mean(losses), train_acc, val_acc)
                if not val or val_acc >= best_acc:
                    best_acc, best_state = val_acc, copy.deepcopy(model.state_dict())
        model.load_state_dict(best_state)
        _write_csv(out / "train_curve.csv", ("epoch", "train_loss", "train_acc", "val_acc"), curve)
        save_checkpoint(model, out / "base.pt", {"stage": "base", "best_val_acc": best_acc})
    return model


@dataclass
class PooreResult:
    model: TextClassifier
    keywords: kw.KeywordSet
    maha_pre: mahalanobis.MahalanobisParams
    maha: mahalanobis.MahalanobisParams
    distance_before: float
    distance_after: float


@torch.no_grad()
def attention_profile(model: TextClassifier, seqs: Sequence[Sequence[int]], mode: str = "cls_query",
                      layer: int = -1, batch_size: int = 128) -> tuple[np.ndarray, list[np.ndarray]]:
    """Eval-mode features and per-example attention a_i (trimmed to each sequence)."""
    feats, atts = [], []
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start:start + batch_size]
        out = model(torch.from_numpy(pad_batch(chunk)))
        feats.append(estimators.features_of(out, layer).double().numpy())
        a = attention_received(out, mode).double().numpy()
        atts.extend(a[i, :len(s)] for i, s in enumerate(chunk))
    return np.concatenate(feats), atts


@torch.no_grad()
def mean_pseudo_distance(model: TextClassifier, seqs: Sequence[Sequence[int]],
                         keywords: kw.KeywordSet, mask_cfg: kw.MaskingConfig,
                         batch_size: int = 128) -> float:
    """Mean eval-mode ||f(x) - f(x~)|| over ``seqs`` with a fixed masking stream."""
    total = 0.0
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start:start + batch_size]
        tilde = [kw.context_mask(s, keywords, mask_cfg, kw.masking_rng(mask_cfg.seed, MEASURE_EPOCH, start + i))
                 for i, s in enumerate(chunk)]
        fx = model(torch.from_numpy(pad_batch(chunk))).cls_embedding.double()
        fxt = model(torch.from_numpy(pad_batch(tilde))).cls_embedding.double()
        total += float(torch.linalg.vector_norm(fx - fxt, dim=-1).sum())
    return total / len(seqs)


def select_stage_keywords(cfg: ExperimentConfig, model: TextClassifier, train) -> tuple[
        kw.KeywordSet, mahalanobis.MahalanobisParams]:
    """Fit Mahalanobis on train features, weight attention by normalized score, pick top M."""
    seqs, labels = _tokens(train), _labels(train)
    feats, atts = attention_profile(model, seqs, cfg.attention_mode, cfg.feature_layer)
    maha_pre = mahalanobis.fit(feats, labels)
    weights = mahalanobis.normalized_score(maha_pre, feats)
    importance = kw.token_importance(seqs, atts, weights, cfg.criterion)
    m = cfg.top_m or kw.default_top_m(seqs)
    return kw.select_keywords(importance, m, cfg.criterion), maha_pre


def _poore_batch(train, idx, keywords, mask_cfg, epoch) -> TrainBatch:
    seqs = [train[i].tokens for i in idx]
    tilde = [kw.context_mask(s, keywords, mask_cfg, kw.masking_rng(mask_cfg.seed, epoch, int(i)))
             for s, i in zip(seqs, idx)]
    km = [kw.keyword_mask(s, keywords) for s in seqs]
    ids = torch.from_numpy(pad_batch(seqs))
    width = ids.shape[1]
    return TrainBatch(
        ids=ids,
        labels=torch.tensor([train[i].label for i in idx], dtype=torch.long),
        pseudo_ids=torch.from_numpy(pad_batch(tilde)),
        km_ids=torch.from_numpy(pad_batch([m for m, _ in km])),
        km_targets=torch.from_numpy(kw.targets_to_array([t for _, t in km], width)),
    )


def run_poore(cfg: ExperimentConfig, base_model: TextClassifier, corpus: Corpus,
              out_dir: str | Path | None = None) -> PooreResult:
    """Post-hoc fine-tuning of ``base_model`` with CE + SKL + POR; the input model is not modified."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with corpus.ood_locked():
        train = corpus.split("train")
        seqs, labels = _tokens(train), _labels(train)
        try:
            keywords, maha_pre = select_stage_keywords(cfg, base_model, train)
        except (ConfigError, NumericError) as err:
            raise type(err)(f"[keywords] {err}") from err
        mask_cfg = kw.MaskingConfig(cfg.p_mask, protect_keywords=cfg.protect_keywords,
                                    seed=derive_seed(cfg.seed, "masking"))

        model = copy.deepcopy(base_model)
        if cfg.lambda_skl > 0:
            model.reset_token_head(derive_seed(cfg.seed, "token-head"))
        distance_before = mean_pseudo_distance(model, seqs, keywords, mask_cfg)

        lr = cfg.base_lr if cfg.posthoc_lr is None else cfg.posthoc_lr
        model.tok_emb.weight.requires_grad_(not cfg.freeze_token_embeddings)
        state = ModelState(model, make_optimizer(model, lr, cfg.weight_decay))
        spec = LossSpec(cfg.loss_weights, True, cfg.stop_grad_pseudo, cfg.distance_cap)
        order_rng = np.random.default_rng(derive_seed(cfg.seed, "posthoc-order"))
        with LossLog(out / "poore_losses.csv") as log, torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(cfg.seed, "posthoc-dropout"))
            for epoch in range(cfg.posthoc_epochs):
                perm = order_rng.permutation(len(train))
                for start in range(0, len(perm), cfg.batch_size):
                    batch = _poore_batch(train, perm[start:start + cfg.batch_size], keywords, mask_cfg, epoch)
                    try:
                        _, _, comps = train_step(state, batch, spec)
                    except NumericError as err:
                        raise NumericError(f"[fine-tune] step {err.step}: {err}",
                                           term=err.term, step=err.step) from err
                    log.write(state.step, comps)

        model.tok_emb.weight.requires_grad_(True)
        distance_after = mean_pseudo_distance(model, seqs, keywords, mask_cfg)
        if cfg.refit_after:
            feats, _ = attention_profile(model, seqs, cfg.attention_mode, cfg.feature_layer)
            maha = mahalanobis.fit(feats, labels)
        else:
            maha = maha_pre

        save_checkpoint(model, out / "poore.pt", {"stage": "poore"})
        kw.write_keywords(keywords, out / "keywords.tsv")
        mahalanobis.save(maha, out / "maha.params")
        mahalanobis.save(maha_pre, out / "maha_pre.params")
        _dump_json({"distance_before": distance_before, "distance_after": distance_after,
                    "num_keywords": len(keywords), "criterion": cfg.criterion},
                   out / "poore_summary.json")
    logger.info("pseudo-OOD distance %.4f -> %.4f", distance_before, distance_after)
    return PooreResult(model, keywords, maha_pre, maha, distance_before, distance_after)


def fit_for_eval(cfg: ExperimentConfig, model: TextClassifier, corpus: Corpus,
                 maha: mahalanobis.MahalanobisParams | None = None) -> estimators.FittedState:
    """Fitted estimator state on IND train data; ``maha`` overrides the Mahalanobis fit."""
    with corpus.ood_locked():
        train = corpus.split("train")
        fitted = estimators.fit_estimators(model, _tokens(train), _labels(train), estimator_settings(cfg))
    if maha is not None:
        fitted.maha = maha
    return fitted


@dataclass
class EvalReport:
    scores: dict[str, np.ndarray]
    is_ood: np.ndarray
    summary: dict[str, dict[str, float]]


def summarize(scores: dict[str, np.ndarray], is_ood: np.ndarray) -> dict[str, dict[str, float]]:
    return {name: {"auroc": metrics.auroc(s, is_ood), "fpr90": metrics.fpr_at_recall(s, is_ood, RECALL)}
            for name, s in scores.items()}


def write_histograms(scores: dict[str, np.ndarray], is_ood: np.ndarray, out_dir: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": "poore", "svg.fonttype": "none"}):
        for name, s in scores.items():
            fig, ax = plt.subplots(figsize=(5, 3.2))
            bins = np.histogram_bin_edges(s, bins=30)
            ax.hist(s[~is_ood], bins=bins, alpha=0.6, label="IND", density=True)
            ax.hist(s[is_ood], bins=bins, alpha=0.6, label="OOD", density=True)
            ax.set_xlabel(f"{name} score")
            ax.set_ylabel("density")
            ax.legend()
            fig.tight_layout()
            fig.savefig(out_dir / f"{name}.svg", format="svg", metadata={"Date": None})
            plt.close(fig)


def run_eval(cfg: ExperimentConfig, model: TextClassifier, corpus: Corpus,
             fitted: estimators.FittedState, out_dir: str | Path | None = None,
             plots: bool = True) -> EvalReport:
    """Score the full test split with every estimator in the roster and write the report."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    test = corpus.test_examples()
    is_ood = np.array([e.is_ood for e in test])
    if is_ood.all() or not is_ood.any():
        raise ConfigError("test split needs both IND and OOD examples")
    scores = estimators.score_all(model, _tokens(test), cfg.estimators, fitted, estimator_settings(cfg))
    summary = summarize(scores, is_ood)
    _dump_json(summary, out / "report.json")
    rows = [(i, int(is_ood[i]), name, repr(float(s[i]))) for name, s in scores.items() for i in range(len(test))]
    _write_csv(out / "scores.csv", ("example_id", "is_ood", "estimator", "score"), rows)
    if plots:
        write_histograms(scores, is_ood, out / "histograms")
    return EvalReport(scores, is_ood, summary)


def run_experiment(cfg: ExperimentConfig, plots: bool = True) -> dict[str, Any]:
    """train -> eval(base) -> poore -> eval(poore); returns the comparison summary."""
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out)
    corpus = load_corpus(cfg)
    base = run_base_training(cfg, corpus, out)
    base_report = run_eval(cfg, base, corpus, fit_for_eval(cfg, base, corpus), out / "eval_base", plots)
    result = run_poore(cfg, base, corpus, out)
    poore_report = run_eval(cfg, result.model, corpus,
                            fit_for_eval(cfg, result.model, corpus, result.maha), out / "eval_poore", plots)
    summary = {
        "base": base_report.summary,
        "poore": poore_report.summary,
        "distance_before": result.distance_before,
        "distance_after": result.distance_after,
    }
    _dump_json(summary, out / "summary.json")
    return summary


def comparison_table(reports: dict[str, dict[str, dict[str, float]]]) -> str:
    """Markdown table, one row per (run, estimator)."""
    lines = ["| run | estimator | AUROC | FPR@90 |", "|---|---|---|---|"]
    for run, report in reports.items():
        for est, m in report.items():
            lines.append(f"| {run} | {est} | {100 * m['auroc']:.2f} | {100 * m['fpr90']:.2f} |")
    return "\n".join(lines) + "\n"


def run_ablation(cfg: ExperimentConfig, plots: bool = False) -> dict[str, Any]:
    """Shared base model, then POORE with each keyword criterion."""
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out)
    corpus = load_corpus(cfg)
    base = run_base_training(cfg, corpus, out)
    reports, keyword_sets = {}, {}
    for criterion in kw.CRITERIA:
        sub = _replace(cfg, criterion=criterion)
        run_dir = out / f"ablation_{criterion}"
        result = run_poore(sub, base, corpus, run_dir)
        rep = run_eval(sub, result.model, corpus, fit_for_eval(sub, result.model, corpus, result.maha),
                       run_dir, plots)
        reports[criterion] = rep.summary
        keyword_sets[criterion] = sorted(result.keywords.keywords)
    (out / "ablation.md").write_text(comparison_table(reports), encoding="utf-8")
    overlap = len(set(keyword_sets["maha"]) & set(keyword_sets["baseline"]))
    summary = {"reports": reports, "keywords": keyword_sets, "keyword_overlap": overlap}
    _dump_json(summary, out / "ablation.json")
    return summary


def run_sweep(cfg: ExperimentConfig, grid: Sequence[float] | None = None,
              plots: bool = False) -> dict[str, Any]:
    """POORE at each lambda_por in ``grid`` on a shared base model."""
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out)
    corpus = load_corpus(cfg)
    base = run_base_training(cfg, corpus, out)
    reports = {}
    for lam in grid or lambda_por_grid():
        sub = _replace(cfg, lambda_por=lam)
        run_dir = out / f"lambda_por_{lam:g}"
        result = run_poore(sub, base, corpus, run_dir)
        reports[f"lambda_por={lam:g}"] = run_eval(
            sub, result.model, corpus, fit_for_eval(sub, result.model, corpus, result.maha), run_dir, plots).summary
    (out / "sweep.md").write_text(comparison_table(reports), encoding="utf-8")
    _dump_json(reports, out / "sweep.json")
    return reports


def _replace(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    new = copy.deepcopy(cfg)
    for k, v in changes.items():
        setattr(new, k, v)
    return new


def load_model(path: str | Path) -> TextClassifier:
    model, _ = load_checkpoint(path)
    return model
