"""Evaluation protocols and metrics.

Split generation (random / cross-subject / cross-set / strict cross-source),
accuracy metrics (macro, micro, cross-source off-diagonal) and feature
distribution alignment metrics (centroid distance, CORAL, MMD).
"""

import csv
import math
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial.distance import cdist, pdist

from .core import FormatError, ValidationError, decode_sample_id

PROTOCOLS = ("random", "c_sub", "c_set", "strict_cross_source")

# Fixed assignments for the real sources (1-based subject / environment ids;
# the original datasets number their subjects and scenes from 0).
C_SUB_TRAIN_SUBJECTS = {
    "mri": frozenset(range(1, 11)),  # original subjects 0-9
    "mmfi": frozenset(range(1, 21)),  # original subjects 0-19
}
C_SET_ASSIGNMENTS = {
    "radhar": {"train": "all"},
    "mri": {"train": "all"},
    "mmfi": {"test_envs": frozenset({1, 2})},  # original scenes 0-1 held out
}
STRICT_DEFAULT_TRAIN = ("radhar", "mri")
STRICT_DEFAULT_TEST = "mmfi"


@dataclass
class SplitManifest:
    """Disjoint train/test id lists for one protocol run."""

    protocol: str
    train_ids: list
    test_ids: list
    seed: int = 0

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise ValidationError(f"split has {len(overlap)} overlapping ids")


def write_split(path, split: SplitManifest):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["role", "sample_id"])
        for sid in split.train_ids:
            writer.writerow(["train", sid])
        for sid in split.test_ids:
            writer.writerow(["test", sid])


def read_split(path, protocol="unknown") -> SplitManifest:
    train, test = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            (train if row["role"] == "train" else test).append(row["sample_id"])
    return SplitManifest(protocol, train, test)


def _row_fields(row):
    sid = decode_sample_id(row.sample_id)
    return sid.subject_idx, sid.env_idx


def split(rows, protocol: str, seed: int = 0, train_sources=None, test_source=None) -> SplitManifest:
    """Partition manifest rows into train/test ids under a named protocol.

    ``random``: per-source 60:40 shuffle. ``c_sub``: fixed subject tables for
    the real sources (RadHAR excluded), first-half subjects for other sources.
    ``c_set``: fixed scene tables for the real sources, last-third
    environments held out otherwise. ``strict_cross_source``: whole sources
    held out, both sides restricted to the classes they share.
    """
    if protocol not in PROTOCOLS:
        raise ValidationError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    by_source = {}
    for row in rows:
        by_source.setdefault(row.source, []).append(row)

    train_ids, test_ids = [], []
    if protocol == "random":
        for source in sorted(by_source):
            group = by_source[source]
            rng = np.random.default_rng(
                np.random.SeedSequence((int(seed), zlib.crc32(source.encode())))
            )
            order = rng.permutation(len(group))
            n_train = int(math.floor(0.6 * len(group) + 0.5))
            for pos, j in enumerate(order):
                (train_ids if pos < n_train else test_ids).append(group[j].sample_id)

    elif protocol == "c_sub":
        for source in sorted(by_source):
            group = by_source[source]
            if source in C_SUB_TRAIN_SUBJECTS:
                train_subjects = C_SUB_TRAIN_SUBJECTS[source]
            elif source == "radhar":
                continue  # no subject protocol for this source
            else:
                subjects = sorted({_row_fields(r)[0] for r in group})
                half = (len(subjects) + 1) // 2
                train_subjects = frozenset(subjects[:half])
            for row in group:
                subject, _ = _row_fields(row)
                (train_ids if subject in train_subjects else test_ids).append(row.sample_id)
        if not train_ids or not test_ids:
            raise ValidationError("c_sub split needs subject metadata on both sides")

    elif protocol == "c_set":
        for source in sorted(by_source):
            group = by_source[source]
            if source in C_SET_ASSIGNMENTS:
                assign = C_SET_ASSIGNMENTS[source]
                test_envs = assign.get("test_envs", frozenset())
            else:
                envs = sorted({_row_fields(r)[1] for r in group})
                n_test = max(1, round(len(envs) / 3)) if len(envs) > 1 else 0
                test_envs = frozenset(envs[len(envs) - n_test :]) if n_test else frozenset()
            for row in group:
                _, env = _row_fields(row)
                (test_ids if env in test_envs else train_ids).append(row.sample_id)
        if not test_ids:
            raise ValidationError("c_set split produced an empty test set")

    else:  # strict_cross_source
        sources = sorted(by_source)
        if train_sources is None or test_source is None:
            if set((STRICT_DEFAULT_TEST,) + STRICT_DEFAULT_TRAIN) <= set(sources):
                train_sources = STRICT_DEFAULT_TRAIN
                test_source = STRICT_DEFAULT_TEST
            elif len(sources) >= 2:
                train_sources = tuple(sources[:-1])
                test_source = sources[-1]
            else:
                raise ValidationError("strict_cross_source needs at least two sources")
        missing = [s for s in tuple(train_sources) + (test_source,) if s not in by_source]
        if missing:
            raise ValidationError(f"strict_cross_source sources not in manifest: {missing}")
        train_rows = [r for s in train_sources for r in by_source[s]]
        test_rows = by_source[test_source]
        shared = {r.label for r in train_rows} & {r.label for r in test_rows}
        if not shared:
            raise ValidationError("train and test sources share no classes")
        train_ids = [r.sample_id for r in train_rows if r.label in shared]
        test_ids = [r.sample_id for r in test_rows if r.label in shared]

    return SplitManifest(protocol, train_ids, test_ids, seed)


# ---------------------------------------------------------------------------
# Accuracy metrics
# ---------------------------------------------------------------------------


def confusion_matrix(y_true, y_pred, k: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValidationError("y_true and y_pred lengths differ")
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    return conf


def macro_micro(confusion) -> tuple:
    """Per-class mean accuracy and overall accuracy from a confusion matrix.

    Classes with zero support are excluded from the macro mean.
    """
    conf = np.asarray(confusion, dtype=np.float64)
    support = conf.sum(axis=1)
    total = conf.sum()
    if total == 0:
        raise ValidationError("confusion matrix is all-zero")
    per_class = np.divide(np.diag(conf), support, out=np.full(len(conf), np.nan), where=support > 0)
    macro = float(np.nanmean(per_class))
    micro = float(np.trace(conf) / total)
    return macro, micro


def offdiag_acc(y_true, y_pred, sources) -> float:
    """Prediction consistency over cross-source same-class sample pairings.

    Enumeration: all ordered pairs (i, j), i != j, whose sources differ and
    whose true classes agree; a pair counts as correct when sample j's
    prediction matches sample i's true class. This weights each sample's
    correctness by how many cross-source partners share its class, exposing
    inter-source confusion that overall accuracy hides.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    src = np.asarray([str(s) for s in sources])
    if len(set(src.tolist())) < 2:
        raise ValidationError("off-diagonal accuracy requires at least two sources")
    n = y_true.size
    n_pairs = 0
    n_correct = 0
    # Row blocks keep the pair enumeration linear in memory for large sets.
    block = max(1, 2_000_000 // max(n, 1))
    for start in range(0, n, block):
        stop = min(start + block, n)
        same_class = y_true[start:stop, None] == y_true[None, :]
        diff_source = src[start:stop, None] != src[None, :]
        valid = same_class & diff_source
        for i in range(start, stop):
            valid[i - start, i] = False
        n_pairs += int(valid.sum())
        n_correct += int((valid & (y_pred[None, :] == y_true[start:stop, None])).sum())
    if n_pairs == 0:
        raise ValidationError("no cross-source pairs share a class")
    return float(n_correct / n_pairs)


# ---------------------------------------------------------------------------
# Distribution alignment metrics
# ---------------------------------------------------------------------------


def centroid_distance(features_a, features_b) -> float:
    """Euclidean distance between the two feature means."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    return float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))


def coral(features_a, features_b) -> float:
    """Covariance discrepancy: ||C_a - C_b||_F^2 / (4 d^2), unbiased covariances."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValidationError(f"feature shapes disagree: {a.shape} vs {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValidationError("CORAL needs at least two samples per side")
    d = a.shape[1]
    ca = np.atleast_2d(np.cov(a, rowvar=False, ddof=1))
    cb = np.atleast_2d(np.cov(b, rowvar=False, ddof=1))
    return float(((ca - cb) ** 2).sum() / (4.0 * d * d))


def median_heuristic_bandwidth(features_a, features_b) -> float:
    """Median pairwise Euclidean distance of the pooled sample (1.0 if zero)."""
    pooled = np.concatenate(
        [np.asarray(features_a, np.float64), np.asarray(features_b, np.float64)], axis=0
    )
    if pooled.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(pooled)))
    return med if med > 0 else 1.0


def mmd(features_a, features_b, bandwidth=None) -> float:
    """Biased squared maximum mean discrepancy with a Gaussian kernel.

    ``k(x, y) = exp(-||x - y||^2 / (2 h^2))``; the bandwidth defaults to the
    median pairwise distance of the pooled sample.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValidationError(f"feature shapes disagree: {a.shape} vs {b.shape}")
    h = median_heuristic_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ValidationError(f"bandwidth must be > 0, got {h}")
    scale = 2.0 * h * h
    kaa = np.exp(-cdist(a, a, "sqeuclidean") / scale)
    kbb = np.exp(-cdist(b, b, "sqeuclidean") / scale)
    kab = np.exp(-cdist(a, b, "sqeuclidean") / scale)
    return float(kaa.mean() + kbb.mean() - 2.0 * kab.mean())


# ---------------------------------------------------------------------------
# Model evaluation
# ---------------------------------------------------------------------------

def eval_seed(sample_id: str, base: int = 0) -> int:
    """Per-sample densification seed, stable across processes and runs."""
    return int(
        np.random.SeedSequence((int(base), zlib.crc32(sample_id.encode()))).generate_state(
            1, dtype=np.uint64
        )[0]
    )


def forward_dataset(model, dataset, batch_size: int = 64, seed_base: int = 0):
    """Run the model over a ClipDataset; returns (predictions, global features)."""
    preds, feats = [], []
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = dataset.subset(range(start, min(start + batch_size, len(dataset))))
            seeds = [eval_seed(sid, seed_base) for sid in batch.ids]
            y_hat, diag = model(batch.clips.to(dtype), batch.pad, seeds=seeds)
            preds.append(y_hat.argmax(dim=1).cpu().numpy())
            feats.append(diag["global_feature"].cpu().numpy())
    return np.concatenate(preds), np.concatenate(feats)


@dataclass
class MetricReport:
    """Accuracy plus cross-source alignment statistics for one evaluation."""

    macro_acc: float
    micro_acc: float
    offdiag_acc: float  # None when the test set has one source
    centroid_distance: float  # mean over source pairs; None when one source
    coral: float
    mmd: float
    per_class_acc: np.ndarray
    confusion: np.ndarray
    n_test: int = 0
    protocol: str = ""
    mmd_bandwidth: float = None

    SCALARS = (
        "macro_acc",
        "micro_acc",
        "offdiag_acc",
        "centroid_distance",
        "coral",
        "mmd",
        "mmd_bandwidth",
    )

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["record", "key", "value"])
            writer.writerow(["scalar", "protocol", self.protocol])
            writer.writerow(["scalar", "n_test", self.n_test])
            for name in self.SCALARS:
                value = getattr(self, name)
                writer.writerow(["scalar", name, "" if value is None else repr(float(value))])
            for i, acc in enumerate(self.per_class_acc):
                writer.writerow(["per_class", i, "" if np.isnan(acc) else repr(float(acc))])
            k = self.confusion.shape[0]
            for i in range(k):
                for j in range(k):
                    if self.confusion[i, j]:
                        writer.writerow(["confusion", f"{i}:{j}", int(self.confusion[i, j])])
            writer.writerow(["scalar", "k", k])

    @classmethod
    def from_csv(cls, path) -> "MetricReport":
        scalars, per_class, conf_entries = {}, {}, {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["record", "key", "value"]:
                raise FormatError(f"report {path} has unexpected columns {reader.fieldnames}")
            for row in reader:
                if row["record"] == "scalar":
                    scalars[row["key"]] = row["value"]
                elif row["record"] == "per_class":
                    per_class[int(row["key"])] = row["value"]
                elif row["record"] == "confusion":
                    i, j = row["key"].split(":")
                    conf_entries[(int(i), int(j))] = int(row["value"])
        try:
            k = int(scalars["k"])
        except KeyError:
            raise FormatError(f"report {path} missing class count") from None
        per = np.full(k, np.nan)
        for i, v in per_class.items():
            per[i] = float(v) if v else np.nan
        conf = np.zeros((k, k), dtype=np.int64)
        for (i, j), v in conf_entries.items():
            conf[i, j] = v

        def scal(name):
            v = scalars.get(name, "")
            return None if v == "" else float(v)

        return cls(
            macro_acc=scal("macro_acc"),
            micro_acc=scal("micro_acc"),
            offdiag_acc=scal("offdiag_acc"),
            centroid_distance=scal("centroid_distance"),
            coral=scal("coral"),
            mmd=scal("mmd"),
            per_class_acc=per,
            confusion=conf,
            n_test=int(scalars.get("n_test", 0)),
            protocol=scalars.get("protocol", ""),
            mmd_bandwidth=scal("mmd_bandwidth"),
        )


def pairwise_alignment(features_by_source: dict):
    """Mean centroid / CORAL / MMD over all source pairs (None if < 2 sources)."""
    names = sorted(features_by_source)
    pairs = [(a, b) for i, a in enumerate(names) for b in names[i + 1 :]]
    if not pairs:
        return None, None, None, None
    cents, corals, mmds, bws = [], [], [], []
    for a, b in pairs:
        fa, fb = features_by_source[a], features_by_source[b]
        cents.append(centroid_distance(fa, fb))
        corals.append(coral(fa, fb))
        bw = median_heuristic_bandwidth(fa, fb)
        bws.append(bw)
        mmds.append(mmd(fa, fb, bandwidth=bw))
    return (
        float(np.mean(cents)),
        float(np.mean(corals)),
        float(np.mean(mmds)),
        float(np.mean(bws)),
    )


def evaluate(model, dataset, batch_size: int = 64, protocol: str = "", seed_base: int = 0) -> MetricReport:
    """Forward the test set and assemble the full metric report."""
    if len(dataset) == 0:
        raise ValidationError("empty test set")
    k = model.config.k
    preds, feats = forward_dataset(model, dataset, batch_size=batch_size, seed_base=seed_base)
    y_true = dataset.labels.numpy()
    conf = confusion_matrix(y_true, preds, k)
    macro, micro = macro_micro(conf)
    support = conf.sum(axis=1)
    per_class = np.divide(
        np.diag(conf), support, out=np.full(k, np.nan), where=support > 0
    ).astype(np.float64)

    sources = np.asarray(dataset.sources)
    distinct = sorted(set(dataset.sources))
    off = None
    if len(distinct) >= 2:
        try:
            off = offdiag_acc(y_true, preds, sources)
        except ValidationError:
            off = None
    feats_by_source = {s: feats[sources == s] for s in distinct}
    feats_by_source = {s: f for s, f in feats_by_source.items() if f.shape[0] >= 2}
    cent, cor, mm, bw = pairwise_alignment(feats_by_source) if len(feats_by_source) >= 2 else (
        None,
        None,
        None,
        None,
    )
    return MetricReport(
        macro_acc=macro,
        micro_acc=micro,
        offdiag_acc=off,
        centroid_distance=cent,
        coral=cor,
        mmd=mm,
        per_class_acc=per_class,
        confusion=conf,
        n_test=len(dataset),
        protocol=protocol,
        mmd_bandwidth=bw,
    )


# Higher-is-better metrics use (ours - base) / base; lower-is-better metrics
# use (base - ours) / base, both in percent.
INCREASING_METRICS = ("macro_acc", "micro_acc", "offdiag_acc")
DECREASING_METRICS = ("centroid_distance", "coral", "mmd")


def relative_improvement(baseline: MetricReport, ours: MetricReport) -> dict:
    out = {}
    for name in INCREASING_METRICS + DECREASING_METRICS:
        b = getattr(baseline, name)
        o = getattr(ours, name)
        if b is None or o is None or b == 0:
            out[name] = None
        elif name in INCREASING_METRICS:
            out[name] = (o - b) / b * 100.0
        else:
            out[name] = (b - o) / b * 100.0
    return out
