"""Per-symbol cross-attention maps over the teacher patch grid, PGM export,
and class-level scans for a single symbol."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch

from .config import RunConfig
from .featstore import FeatureSet
from .netcore import SymbolicModel
from .seqgen import generate


@dataclass
class AttentionMap:
    position: int
    token_id: int
    weights: np.ndarray  # [grid_h, grid_w], raw softmax weights (head mean)

    @property
    def normalized(self) -> np.ndarray:
        lo, hi = float(self.weights.min()), float(self.weights.max())
        if hi - lo <= 0.0:
            return np.zeros_like(self.weights)
        return (self.weights - lo) / (hi - lo)


@torch.no_grad()
def _generate_batch(model: SymbolicModel, cfg: RunConfig, features: FeatureSet, samples, view: int):
    was_training = model.training
    model.eval()
    patches = torch.from_numpy(features.tokens[np.asarray(samples), view, 1:]).to(model.center.dtype)
    seq = generate(model, cfg.disc, patches, cfg.disc.tau_end, deterministic=True)
    model.train(was_training)
    return seq


def maps_from_sequence(seq, b: int, grid_h: int, grid_w: int, head=None) -> list[AttentionMap]:
    attn = seq.deepest_attn[b]  # [H, L, P-1]
    attn = attn.mean(0) if head is None else attn[head]
    return [
        AttentionMap(position=l, token_id=int(seq.ids[b, l]),
                     weights=attn[l].double().numpy().reshape(grid_h, grid_w))
        for l in range(attn.shape[0])
    ]


def attention_maps(
    model: SymbolicModel, cfg: RunConfig, features: FeatureSet, sample: int, view: int = 0, head=None,
) -> list[AttentionMap]:
    """One map per generated symbol, from the deepest decoder layer (head mean unless ``head`` given)."""
    features.view(sample, view)  # range check
    seq = _generate_batch(model, cfg, features, [sample], view)
    return maps_from_sequence(seq, 0, features.grid_h, features.grid_w, head)


def export_pgm(amap: AttentionMap, scale: int, path) -> None:
    """Binary PGM (P5), nearest-neighbour upsampled by ``scale``."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    img = np.rint(amap.normalized * 255.0).astype(np.uint8)
    img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def write_weights_csv(amap: AttentionMap, path) -> None:
    np.savetxt(path, amap.weights, delimiter=",", fmt="%.9g")


@dataclass
class ScanResult:
    rows: list  # (sample, view, position, symbol, path)
    count: int
    n_sequences: int

    @property
    def frequency(self) -> float:
        return self.count / self.n_sequences if self.n_sequences else 0.0


def symbol_scan(
    model: SymbolicModel,
    cfg: RunConfig,
    features: FeatureSet,
    symbol_id: int,
    class_id: int,
    out_dir,
    view: int = 0,
    scale: int = 16,
    batch_size: int = 256,
) -> ScanResult:
    """Export the attention map of every occurrence of ``symbol_id`` in sequences of ``class_id``.

    Writes ``manifest.tsv`` (sample, view, position, symbol, path) into ``out_dir``.
    """
    if features.labels is None:
        raise ValueError("symbol scan needs labelled features")
    samples = np.flatnonzero(features.labels == class_id)
    if samples.size == 0:
        raise ValueError(f"class {class_id} has no samples")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for s in range(0, samples.size, batch_size):
        chunk = samples[s:s + batch_size]
        seq = _generate_batch(model, cfg, features, chunk, view)
        for b, sample in enumerate(chunk):
            for amap in maps_from_sequence(seq, b, features.grid_h, features.grid_w):
                if amap.token_id != symbol_id:
                    continue
                path = os.path.join(out_dir, f"s{symbol_id}_n{sample}_v{view}_p{amap.position}.pgm")
                export_pgm(amap, scale, path)
                rows.append((int(sample), view, amap.position, symbol_id, path))
    with open(os.path.join(out_dir, "manifest.tsv"), "w") as f:
        for r in rows:
            f.write("\t".join(str(c) for c in r) + "\n")
    return ScanResult(rows=rows, count=len(rows), n_sequences=int(samples.size))
