"""kNN and linear probing of frozen representations."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .config import RunConfig
from .featstore import FeatureSet
from .netcore import SymbolicModel
from .seqgen import embed_prefixes, generate, prefix_lengths

REPRESENTATIONS = ("student_pooled", "student_aggregated", "teacher_feature")
NORM_EPS = 1e-12


@dataclass
class ProbeReport:
    kind: str  # "knn" or "linear"
    representation: str = "student_pooled"
    prefix_n: Optional[int] = None
    k_values: list = field(default_factory=list)
    top1: list = field(default_factory=list)  # percentages, one per k (or one for linear)
    top5: list = field(default_factory=list)

    def rows(self):
        keys = self.k_values if self.kind == "knn" else ["-"]
        for k, a, b in zip(keys, self.top1, self.top5):
            yield {"probe": self.kind, "representation": self.representation,
                   "prefix_n": self.prefix_n if self.prefix_n is not None else "-",
                   "k": k, "top1": a, "top5": b}


@torch.no_grad()
def extract_embeddings(
    model: SymbolicModel,
    cfg: RunConfig,
    features: FeatureSet,
    representation: str = "student_pooled",
    prefix_n: Optional[int] = None,
    batch_size: int = 256,
    view: int = 0,
) -> np.ndarray:
    """Embeddings of ``view`` of every sample, generated deterministically (argmax feeding)."""
    if representation not in REPRESENTATIONS:
        raise ValueError(f"representation must be one of {REPRESENTATIONS}")
    if representation == "teacher_feature":
        return features.tokens[:, view, 0].copy()
    L = model.cfg.seq_len
    n = L if prefix_n is None else prefix_n
    if n not in prefix_lengths(L):
        raise ValueError(f"prefix_n={n} is not one of {prefix_lengths(L)}")
    was_training = model.training
    model.eval()
    dtype = model.center.dtype
    tau = cfg.disc.tau_end
    out = []
    for s in range(0, features.n_samples, batch_size):
        patches = torch.from_numpy(features.tokens[s:s + batch_size, view, 1:]).to(dtype)
        seq = generate(model, cfg.disc, patches, tau, deterministic=True)
        if representation == "student_pooled":
            out.append(model.enc(seq.emb[:, :n]))
        else:
            out.append(embed_prefixes(model, seq).aggregated)
    model.train(was_training)
    return torch.cat(out).double().numpy()


def _normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), NORM_EPS)


def _topk_hits(scores: np.ndarray, labels: np.ndarray) -> tuple[int, int]:
    # stable sort on -score: ties go to the lowest class index
    order = np.argsort(-scores, axis=1, kind="stable")
    top1 = int((order[:, 0] == labels).sum())
    top5 = int((order[:, :5] == labels[:, None]).any(axis=1).sum())
    return top1, top5


def knn_classify(
    train_emb,
    train_labels,
    eval_emb,
    eval_labels,
    k_values: Sequence[int] = (10, 20, 100, 200),
    temperature: float = 0.07,
    n_classes: Optional[int] = None,
    chunk: int = 512,
) -> ProbeReport:
    """Cosine-similarity kNN with ``exp(sim / T)`` weighted class votes."""
    train_labels = np.asarray(train_labels, dtype=np.int64)
    eval_labels = np.asarray(eval_labels, dtype=np.int64)
    n_train = len(train_labels)
    k_values = list(k_values)
    if not k_values or max(k_values) > n_train or min(k_values) < 1:
        raise ValueError(f"k must lie in [1, {n_train}], got {k_values}")
    if n_classes is None:
        n_classes = int(max(train_labels.max(), eval_labels.max())) + 1
    tr = _normalize(train_emb)
    ev = _normalize(eval_emb)
    kmax = max(k_values)
    hits1 = dict.fromkeys(k_values, 0)
    hits5 = dict.fromkeys(k_values, 0)
    for s in range(0, len(ev), chunk):
        sims = ev[s:s + chunk] @ tr.T
        nbr = np.argsort(-sims, axis=1, kind="stable")[:, :kmax]
        nbr_sims = np.take_along_axis(sims, nbr, axis=1)
        nbr_labels = train_labels[nbr]
        weights = np.exp(nbr_sims / temperature)
        y = eval_labels[s:s + chunk]
        rows = np.arange(len(y))[:, None]
        for k in k_values:
            scores = np.zeros((len(y), n_classes))
            np.add.at(scores, (np.broadcast_to(rows, (len(y), k)), nbr_labels[:, :k]), weights[:, :k])
            a, b = _topk_hits(scores, y)
            hits1[k] += a
            hits5[k] += b
    n_eval = max(len(eval_labels), 1)
    return ProbeReport(
        kind="knn", k_values=k_values,
        top1=[100.0 * hits1[k] / n_eval for k in k_values],
        top5=[100.0 * hits5[k] / n_eval for k in k_values],
    )


def linear_probe(
    train_emb,
    train_labels,
    eval_emb,
    eval_labels,
    epochs: int = 100,
    lr: float = 1e-2,
    batch_size: int = 256,
    weight_decay: float = 0.0,
    seed: int = 0,
    n_classes: Optional[int] = None,
) -> ProbeReport:
    """Multinomial logistic regression on standardized frozen embeddings."""
    y_tr = torch.as_tensor(np.asarray(train_labels), dtype=torch.long)
    y_ev = torch.as_tensor(np.asarray(eval_labels), dtype=torch.long)
    if len(torch.unique(y_tr)) < 2:
        raise ValueError("linear probe needs at least two classes in the training set")
    if n_classes is None:
        n_classes = int(max(y_tr.max(), y_ev.max())) + 1
    x_tr = torch.as_tensor(np.asarray(train_emb), dtype=torch.float32)
    x_ev = torch.as_tensor(np.asarray(eval_emb), dtype=torch.float32)
    mu = x_tr.mean(0)
    sd = x_tr.std(0, unbiased=False).clamp_min(1e-6)
    x_tr = (x_tr - mu) / sd
    x_ev = (x_ev - mu) / sd

    g = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        clf = torch.nn.Linear(x_tr.shape[1], n_classes)
    opt = torch.optim.AdamW(clf.parameters(), lr=lr, weight_decay=weight_decay)
    for _ in range(epochs):
        order = torch.randperm(len(y_tr), generator=g)
        for s in range(0, len(y_tr), batch_size):
            idx = order[s:s + batch_size]
            loss = torch.nn.functional.cross_entropy(clf(x_tr[idx]), y_tr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        scores = clf(x_ev).double().numpy()
    a, b = _topk_hits(scores, y_ev.numpy())
    n_eval = max(len(y_ev), 1)
    return ProbeReport(kind="linear", top1=[100.0 * a / n_eval], top5=[100.0 * b / n_eval])


def subsequence_report(
    model: SymbolicModel, cfg: RunConfig, train_set: FeatureSet, eval_set: FeatureSet, k: int = 20,
) -> dict:
    """kNN Top1/Top5 on the pooled embedding of each power-of-two prefix."""
    out = {}
    for n in prefix_lengths(model.cfg.seq_len):
        tr = extract_embeddings(model, cfg, train_set, "student_pooled", n)
        ev = extract_embeddings(model, cfg, eval_set, "student_pooled", n)
        rep = knn_classify(tr, train_set.labels, ev, eval_set.labels, [k], cfg.train.knn_temp)
        out[n] = (rep.top1[0], rep.top5[0])
    return out


REPORT_FIELDS = ["probe", "representation", "prefix_n", "k", "top1", "top5"]


def format_table(rows: list[dict]) -> str:
    cells = [REPORT_FIELDS] + [
        [f"{r[f]:.2f}" if isinstance(r[f], float) else str(r[f]) for f in REPORT_FIELDS] for r in rows
    ]
    widths = [max(len(c[i]) for c in cells) for i in range(len(REPORT_FIELDS))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells)


def format_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
