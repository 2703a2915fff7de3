"""Losses and evaluation metrics: two-hinge loss, CIDEr, recall@k, curves."""

import csv
import io
import math
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import ContractError
from .world import BOS, EOS, PAD

CURVE_HEADER = ("method", "lambda", "rho", "tau", "seed", "epoch", "cider", "recall1", "recall5", "recall10")


@dataclass(frozen=True)
class LossWeights:
    lam: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"lambda must lie in [0, 1], got {self.lam}")


def strip_specials(tokens):
    """Content tokens of a caption: everything before the first EOS, minus PAD/BOS."""
    out = []
    for t in tokens:
        t = int(t)
        if t == EOS:
            break
        if t not in (PAD, BOS):
            out.append(t)
    return out


class NGramStats:
    """Document frequencies of 1..4-grams over a reference corpus.

    Each document is the reference set of one scene. The idf of an n-gram is
    ``log(N / df)``; n-grams never seen get ``log(N)``.
    """

    def __init__(self, documents):
        self.num_docs = len(documents)
        if self.num_docs == 0:
            raise ContractError("NGramStats needs at least one document")
        df = {}
        for refs in documents:
            seen = set()
            for ref in refs:
                toks = strip_specials(ref)
                for n in range(1, kernels.MAX_N + 1):
                    seen.update(kernels.ngram_ids(toks, n))
            for key in seen:
                df[key] = df.get(key, 0) + 1
        self.df = df
        self.default_idf = math.log(self.num_docs)
        keys = np.fromiter(df.keys(), dtype=np.int64, count=len(df))
        counts = np.fromiter(df.values(), dtype=np.float64, count=len(df))
        self._scorer = kernels.CiderScorer(keys, self.default_idf - np.log(counts), self.default_idf)

    @classmethod
    def from_world(cls, world, split="train"):
        return cls([[r.tokens for r in world.refs(sid)] for sid in world.splits[split]])

    def idf(self, tokens):
        key = kernels.ngram_id(list(tokens), 0, len(tokens))
        return self.default_idf - math.log(self.df[key]) if key in self.df else self.default_idf

    def score(self, candidate, references):
        return self._scorer.score(strip_specials(candidate), [strip_specials(r) for r in references])

    def score_many(self, candidates, references):
        return self._scorer.score_many(
            [strip_specials(c) for c in candidates],
            [[strip_specials(r) for r in refs] for refs in references],
        )


def cider(candidate, references, stats):
    """Mean over n=1..4 of the reference-averaged TF-IDF cosine, in [0, 1].

    No x10 scaling and no length penalty.
    """
    if not references:
        raise ContractError("cider needs at least one reference")
    return float(stats.score(candidate, references))


def _hardest(values):
    """Hardest-negative indices for each row and each column (diagonal excluded)."""
    b = values.shape[0]
    masked = values.copy()
    masked[np.arange(b), np.arange(b)] = -np.inf
    return masked.argmax(axis=1), masked.argmax(axis=0)


def hinge_terms(scores, margin=1.0):
    """Per-target two-hinge loss; ``scores[i, j]`` is Phi(caption_i, scene_j).

    For target i the hardest negative scene is the row maximum and the
    hardest negative caption the column maximum, both excluding i. Selection
    is treated as constant within the step.
    """
    b = scores.shape[0]
    if scores.ndim != 2 or scores.shape[1] != b:
        raise ContractError(f"score matrix must be square, got {scores.shape}")
    if b < 2:
        raise ContractError("hinge loss needs at least 2 items in the batch")
    neg_scene, neg_caption = _hardest(scores.value)
    pos = ad.gather(scores, np.arange(b))
    hard_scene = ad.gather(scores, neg_scene)
    hard_caption = ad.gather(ad.transpose(scores), neg_caption)
    return ad.add(
        ad.relu(ad.add(ad.sub(hard_caption, pos), margin)),
        ad.relu(ad.add(ad.sub(hard_scene, pos), margin)),
    )


def disc_hinge_loss(scores, target_index=None, margin=1.0):
    """Two-hinge discriminative loss averaged over targets (or for one target)."""
    terms = hinge_terms(scores, margin)
    if target_index is not None:
        return ad.gather(terms, np.array([target_index]))
    return ad.mean(terms)


def hinge_terms_value(scores, margin=1.0):
    """Numpy twin of :func:`hinge_terms` for reward and baseline computation."""
    s = np.asarray(scores, dtype=np.float64)
    b = s.shape[0]
    neg_scene, neg_caption = _hardest(s)
    idx = np.arange(b)
    pos = s[idx, idx]
    return np.maximum(0.0, margin - pos + s[neg_caption, idx]) + np.maximum(0.0, margin - pos + s[idx, neg_scene])


def target_ranks(scores, targets, pool_ids=None):
    """0-based rank of each query's target among the pool.

    Ties are broken by ascending pool id (defaults to column index).
    """
    s = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    q = np.arange(s.shape[0])
    ids = np.arange(s.shape[1]) if pool_ids is None else np.asarray(pool_ids)
    t_score = s[q, targets][:, None]
    t_id = ids[targets][:, None]
    ahead = (s > t_score) | ((s == t_score) & (ids[None, :] < t_id))
    return ahead.sum(axis=1)


def recall_at_k(scores, targets, k, pool_ids=None):
    """Fraction of queries whose target ranks within the top ``k``."""
    s = np.asarray(scores)
    if k < 1 or k > s.shape[1]:
        raise ContractError(f"k must lie in [1, {s.shape[1]}], got {k}")
    return float((target_ranks(s, targets, pool_ids) < k).mean())


def composite_loss(l_disc, l_nat, weights):
    """``lam * l_disc + (1 - lam) * l_nat``; a zero-weighted term is left off the graph."""
    lam = weights.lam if isinstance(weights, LossWeights) else float(weights)
    if lam == 0.0:
        return ad.mul(l_nat, 1.0)
    if lam == 1.0:
        return ad.mul(l_disc, 1.0)
    return ad.add(ad.mul(l_disc, lam), ad.mul(l_nat, 1.0 - lam))


@dataclass
class CurvePoint:
    method: str
    lam: float
    rho: float | None
    tau: float | None
    seed: int
    epoch: int
    cider: float
    recall1: float
    recall5: float
    recall10: float

    def row(self):
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)
            return str(v)

        return [fmt(getattr(self, f.name)) for f in fields(self)]

    @classmethod
    def from_row(cls, row):
        def opt(v):
            return None if v == "" else float(v)

        return cls(
            row["method"],
            float(row["lambda"]),
            opt(row["rho"]),
            opt(row["tau"]),
            int(row["seed"]),
            int(row["epoch"]),
            float(row["cider"]),
            float(row["recall1"]),
            float(row["recall5"]),
            float(row["recall10"]),
        )


def curve_csv(points):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_HEADER)
    for p in points:
        writer.writerow(p.row())
    return buf.getvalue()


def write_curve_csv(path, points):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(curve_csv(points))


def read_curve_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CURVE_HEADER:
            raise ContractError(f"{path}: unexpected curve header {reader.fieldnames}")
        return [CurvePoint.from_row(r) for r in reader]


def interpolate_recall(points, cider_level):
    """Linearly interpolate recall at ``cider_level`` along a (cider, recall) curve.

    Points are sorted by CIDEr; queries outside the curve's range are clamped
    to the nearest endpoint.
    """
    pts = sorted((float(c), float(r)) for c, r in points)
    if not pts:
        raise ContractError("cannot interpolate an empty curve")
    xs = np.array([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])
    return float(np.interp(cider_level, xs, ys))


def pareto_front(points):
    """Points not dominated in both CIDEr and recall, sorted by CIDEr."""
    pts = sorted(((float(c), float(r)) for c, r in points), key=lambda p: (-p[0], -p[1]))
    front = []
    best = -np.inf
    for c, r in pts:
        if r > best:
            front.append((c, r))
            best = r
    return front[::-1]
