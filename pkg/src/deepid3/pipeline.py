"""Stage-by-stage orchestration: data -> train -> extract -> fit -> eval.

Each stage reads its inputs from ``out_dir`` and writes its outputs there, so
the CLI can run stages separately and ``run_pipeline`` is just the stages in
order. Output layout::

    data/            train.did3, test.did3, manifest.json
    nets/<entry>.did3, logs/<entry>.tsv
    features.did3    per-entry train/test features and labels
    recognition.did3 PCA and Joint Bayesian parameters
    reports/         verification.csv, roc.csv, identification.csv,
                     region_net1.csv, region_net2.csv, summary.csv
    STATUS           "complete", or the failed stage and message
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, replace

import numpy as np

from . import evaluation as ev
from .config import PipelineConfig
from .dataset import gen_dataset, load_dataset
from .errors import DeepIDError, StageError
from .nets import ScaleConfig, build, extract_feature
from .recognition import (JointBayesianModel, PcaModel, crop_region, jb_fit, jb_score_matrix,
                          pca_fit, pca_transform)
from .tensor import Rng
from .training import LabeledDataset, format_training_log, train
from .weights import load_weights, save_weights

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train", "extract", "fit-recognition", "eval")


@dataclass
class PlanEntry:
    index: int
    region: object
    arch: str
    flip: bool
    role: str  # "ensemble" or "baseline"

    @property
    def name(self):
        return f"{self.region.name}.{self.arch}{'.flip' if self.flip else ''}"


def plan_entries(cfg: PipelineConfig):
    """Ensemble entries followed by the per-region comparison baselines."""
    entries = [PlanEntry(i, r, a, f, "ensemble") for i, (r, a, f) in enumerate(cfg.ensemble_plan())]
    if cfg.comparison.enabled:
        seen = []
        for e in list(entries):
            if e.region.name not in seen:
                seen.append(e.region.name)
                entries.append(PlanEntry(len(entries), e.region, cfg.comparison.baseline, False, "baseline"))
    return entries


def _data_dir(cfg, out_dir):
    return cfg.data_dir or os.path.join(out_dir, "data")


def _write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _crop_dataset(ds: LabeledDataset, region, flip):
    crops = np.stack([crop_region(img, region, flip) for img in ds.images])
    return LabeledDataset(crops, ds.identities)


def _scale_config(cfg: PipelineConfig, region, channels, num_identities):
    h, w = region.out_shape
    n = cfg.net
    return ScaleConfig(height=h, width=w, channels=channels, widths=tuple(n.widths),
                       feature_dim=n.feature_dim, num_identities=num_identities, dropout=n.dropout,
                       head_dim=n.head_dim or None, verif_weight=n.verif_weight,
                       margin=n.margin or 1.0)


def _net_seed(cfg, entry):
    return (cfg.seed << 16) + entry.index + 1


# ---------------------------------------------------------------------------
# stages


def stage_gen_data(cfg: PipelineConfig, out_dir):
    spec = replace(cfg.dataset, seed=cfg.seed)
    return gen_dataset(spec, _data_dir(cfg, out_dir))


def _load_nets(cfg, out_dir, entries, channels, num_identities):
    nets = {}
    for e in entries:
        net = build(e.arch, _scale_config(cfg, e.region, channels, num_identities))
        path = os.path.join(out_dir, "nets", f"{e.name}.did3")
        stored = load_weights(path)
        if set(stored) != set(net.params):
            raise DeepIDError(f"{path} does not match the configured {e.arch} geometry")
        for k in net.params:
            if stored[k].shape != net.params[k].shape:
                raise DeepIDError(f"{path}: tensor '{k}' has shape {stored[k].shape}, "
                                  f"expected {net.params[k].shape}")
            net.params[k] = stored[k]
        nets[e.name] = net
    return nets


def stage_train(cfg: PipelineConfig, out_dir, only=None):
    """Train every planned net (or those named in ``only``) and save weights and logs."""
    train_ds, _, _ = load_dataset(_data_dir(cfg, out_dir))
    os.makedirs(os.path.join(out_dir, "nets"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "logs"), exist_ok=True)
    histories = {}
    channels = train_ds.images.shape[1]
    for e in plan_entries(cfg):
        if only is not None and e.name not in only:
            continue
        ds = _crop_dataset(train_ds, e.region, e.flip)
        seed = _net_seed(cfg, e)
        net = build(e.arch, _scale_config(cfg, e.region, channels, train_ds.num_identities), Rng(seed, 0x1A17))
        tcfg = replace(cfg.train, seed=seed, margin=cfg.net.margin or None)
        log.info("training %s", e.name)
        _, history = train(net, ds, tcfg)
        save_weights(os.path.join(out_dir, "nets", f"{e.name}.did3"), net.params)
        _write_text(os.path.join(out_dir, "logs", f"{e.name}.tsv"), format_training_log(history))
        histories[e.name] = history
    return histories


def stage_extract(cfg: PipelineConfig, out_dir):
    """Per-entry features of every train and test image."""
    train_ds, test_ds, _ = load_dataset(_data_dir(cfg, out_dir))
    entries = plan_entries(cfg)
    nets = _load_nets(cfg, out_dir, entries, train_ds.images.shape[1], train_ds.num_identities)
    tensors = {"train.labels": train_ds.identities.astype(np.float64),
               "test.labels": test_ds.identities.astype(np.float64)}
    for e in entries:
        net = nets[e.name]
        for split, ds in (("train", train_ds), ("test", test_ds)):
            tensors[f"{split}.{e.name}"] = np.stack(
                [extract_feature(net, crop_region(img, e.region, e.flip)) for img in ds.images])
    save_weights(os.path.join(out_dir, "features.did3"), tensors)
    return tensors


def _ensemble_features(cfg, feats, split, entries=None):
    entries = entries if entries is not None else [e for e in plan_entries(cfg) if e.role == "ensemble"]
    return np.concatenate([feats[f"{split}.{e.name}"] for e in entries], axis=1)


def fit_recognition(train_features, labels, pca_dim, jb_iters):
    p = min(pca_dim, train_features.shape[1], train_features.shape[0] - 1)
    pca = pca_fit(train_features, p)
    jb = jb_fit(pca_transform(pca, train_features), labels, iters=jb_iters)
    return pca, jb


def stage_fit(cfg: PipelineConfig, out_dir):
    """PCA and Joint Bayesian on the ensemble's training features only."""
    feats = load_weights(os.path.join(out_dir, "features.did3"))
    x = _ensemble_features(cfg, feats, "train")
    labels = np.rint(feats["train.labels"]).astype(np.int64)
    pca, jb = fit_recognition(x, labels, cfg.recognition.pca_dim, cfg.recognition.jb_iters)
    save_weights(os.path.join(out_dir, "recognition.did3"), {
        "pca.mean": pca.mean, "pca.components": pca.components, "pca.eigenvalues": pca.eigenvalues,
        "jb.s_mu": jb.s_mu, "jb.s_eps": jb.s_eps, "jb.mean": jb.mean,
    })
    return pca, jb


def load_recognition(path):
    t = load_weights(path)
    pca = PcaModel(t["pca.mean"], t["pca.components"], t["pca.eigenvalues"])
    jb = JointBayesianModel(t["jb.s_mu"], t["jb.s_eps"], t["jb.mean"])
    return pca, jb


@dataclass
class EvalSets:
    verification: ev.VerificationSet  # pairs of test-image indices
    closed: ev.IdentificationSet
    open: ev.IdentificationSet


def build_eval_sets(labels, cfg: PipelineConfig) -> EvalSets:
    """Index-based protocol sets over the held-out split.

    Verification: half genuine, half impostor pairs drawn without replacement.
    Closed set: each identity's first image is its gallery entry, the rest
    are probes. Open set: the first ``open_set_gallery`` identities are
    enrolled the same way; every image of the others is an impostor probe.
    """
    labels = np.asarray(labels)
    ids = np.unique(labels)
    rng = Rng(cfg.seed, 0xE7A1)
    n_pairs = cfg.eval.verification_pairs
    n_gen = n_pairs // 2
    gen, imp = [], []
    n = len(labels)
    for i in range(n):
        for j in range(i + 1, n):
            (gen if labels[i] == labels[j] else imp).append((i, j))
    if len(gen) < n_gen or len(imp) < n_pairs - n_gen:
        raise ev.ProtocolError(f"held-out split cannot supply {n_pairs} distinct pairs")
    gi = rng.choice(len(gen), size=n_gen, replace=False)
    ii = rng.choice(len(imp), size=n_pairs - n_gen, replace=False)
    pairs = [(gen[k][0], gen[k][1], True) for k in gi] + [(imp[k][0], imp[k][1], False) for k in ii]
    folds = ev.assign_folds([p[2] for p in pairs], cfg.eval.folds)
    vs = ev.VerificationSet(pairs, folds)

    first = {int(k): int(np.flatnonzero(labels == k)[0]) for k in ids}
    gallery = [(k, first[k]) for k in first]
    probes = [(int(labels[i]), i) for i in range(n) if i not in first.values()]
    closed = ev.IdentificationSet(gallery, probes)

    n_open = cfg.eval.open_set_gallery
    if not 0 < n_open < len(ids):
        raise ev.ProtocolError(f"open_set_gallery must be in [1, {len(ids) - 1}]")
    enrolled = set(int(k) for k in ids[:n_open])
    o_gallery = [(k, first[k]) for k in sorted(enrolled)]
    o_probes = [(int(labels[i]) if int(labels[i]) in enrolled else ev.IMPOSTOR, i)
                for i in range(n) if int(labels[i]) not in enrolled or i != first[int(labels[i])]]
    return EvalSets(vs, closed, ev.IdentificationSet(o_gallery, o_probes))


def _scorer(pca, jb, test_features):
    y = pca_transform(pca, test_features)
    s = jb_score_matrix(jb, y, y)
    return lambda a, b: s[a, b]


def _verification_only(sets, scorer):
    return ev.verification_accuracy(sets.verification, scorer)


def stage_eval(cfg: PipelineConfig, out_dir):
    feats = load_weights(os.path.join(out_dir, "features.did3"))
    pca, jb = load_recognition(os.path.join(out_dir, "recognition.did3"))
    labels = np.rint(feats["test.labels"]).astype(np.int64)
    sets = build_eval_sets(labels, cfg)
    scorer = _scorer(pca, jb, _ensemble_features(cfg, feats, "test"))

    mean, std, fold_accs = _verification_only(sets, scorer)
    scores = sets.verification.scores(scorer)
    lab = sets.verification.labels
    roc = ev.roc_curve(scores[lab], scores[~lab])
    rank1 = ev.rank1_closed_set(sets.closed, scorer)
    far = cfg.eval.open_set_far
    dir_ = ev.dir_at_far(sets.open, scorer, far)

    reports = os.path.join(out_dir, "reports")
    os.makedirs(reports, exist_ok=True)
    _write_text(os.path.join(reports, "verification.csv"), ev.verification_csv(fold_accs))
    _write_text(os.path.join(reports, "roc.csv"), ev.roc_csv(roc))
    _write_text(os.path.join(reports, "identification.csv"),
                ev.identification_csv({"rank1_closed_set": rank1, f"dir_at_far_{far!r}": dir_}))
    summary = {"verification_mean": mean, "verification_std": std,
               "rank1_closed_set": rank1, f"dir_at_far_{far!r}": dir_}

    if cfg.comparison.enabled:
        summary.update(_region_comparison(cfg, feats, sets, reports))
    _write_text(os.path.join(reports, "summary.csv"), ev.identification_csv(summary))
    return summary


def _entry_accuracy(cfg, feats, sets, entry):
    x = feats[f"train.{entry.name}"]
    labels = np.rint(feats["train.labels"]).astype(np.int64)
    pca, jb = fit_recognition(x, labels, cfg.recognition.pca_dim, cfg.recognition.jb_iters)
    mean, _, _ = _verification_only(sets, _scorer(pca, jb, feats[f"test.{entry.name}"]))
    return mean


def _region_comparison(cfg, feats, sets, reports):
    """Single-net verification accuracy per region: each DeepID3 net vs the baseline."""
    entries = plan_entries(cfg)
    baseline = {e.region.name: e for e in entries if e.role == "baseline"}
    out = {}
    for k, item in enumerate(cfg.ensemble.nets):
        arch, _, view = item.partition(":")
        flip = view == "mirrored"
        family = [e for e in entries if e.role == "ensemble" and e.arch == arch and e.flip == flip]
        regions = [e.region.name for e in family]
        acc_a = [_entry_accuracy(cfg, feats, sets, e) for e in family]
        acc_b = [_entry_accuracy(cfg, feats, sets, baseline[r]) for r in regions]
        rows, delta = ev.region_comparison_report(regions, acc_a, acc_b)
        tag = f"net{k + 1}"
        _write_text(os.path.join(reports, f"region_{tag}.csv"), ev.region_csv(rows))
        out[f"{tag}_error_reduction"] = delta
    return out


_RUNNERS = {
    "gen-data": stage_gen_data,
    "train": stage_train,
    "extract": stage_extract,
    "fit-recognition": stage_fit,
    "eval": stage_eval,
}


def run_stage(stage: str, cfg: PipelineConfig, out_dir):
    """Run one stage; any failure is re-raised as :class:`StageError` naming it."""
    os.makedirs(out_dir, exist_ok=True)
    try:
        return _RUNNERS[stage](cfg, out_dir)
    except StageError:
        raise
    except (DeepIDError, OSError, ValueError, KeyError) as exc:
        raise StageError(stage, exc) from exc


def run_pipeline(cfg: PipelineConfig, out_dir, skip_data_if_present=True):
    """All stages in order. ``STATUS`` records completion or the failing stage,
    so partial outputs are recognisable as such."""
    os.makedirs(out_dir, exist_ok=True)
    status = os.path.join(out_dir, "STATUS")
    _write_text(status, "running\n")
    result = None
    try:
        for stage in STAGES:
            if stage == "gen-data" and cfg.data_dir and skip_data_if_present \
                    and os.path.exists(os.path.join(cfg.data_dir, "manifest.json")):
                continue
            log.info("stage %s", stage)
            result = run_stage(stage, cfg, out_dir)
    except StageError as exc:
        _write_text(status, f"failed\t{exc.stage}\t{exc.cause}\n")
        raise
    _write_text(status, "complete\n")
    return result
