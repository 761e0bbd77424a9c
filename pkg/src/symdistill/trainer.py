"""Training loop: teacher targets, student generation, granularity loss, AdamW with
global-norm clipping, EMA of the teacher projector, centering, probing, SYMC checkpoints."""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
import os
from dataclasses import dataclass
from typing import Optional

import torch

from . import checkpoint as symc
from .config import RunConfig, TrainConfig, parse_config_text
from .featstore import FeatureSet
from .losses import ssl_loss, teacher_distribution, total_loss, update_center
from .netcore import ModelConfig, SymbolicModel, ema_update_
from .discretize import schedule_tau
from .seqgen import embed_prefixes, generate, sequence_entropy, sequence_info

log = logging.getLogger(__name__)

METRIC_FIELDS = [
    "step", "loss", "ssl", "teacher_entropy", "kl_teacher_student",
    "seq_entropy", "seq_info", "tau", "lr", "ema_lambda",
]
PROBE_FIELDS = ["epoch", "step", "k", "top1", "top5"]
PROBE_K = 20


class TrainingError(RuntimeError):
    pass


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr_base``, then cosine decay to ``lr_base / 100``."""
    if total_steps <= 0:
        return cfg.lr_base
    if step > total_steps:
        raise ValueError(f"step {step} beyond total_steps {total_steps}")
    warmup = min(total_steps, round(total_steps * cfg.warmup_epochs / cfg.epochs)) if cfg.epochs else 0
    if step < warmup:
        return cfg.lr_base * step / warmup
    lr_min = cfg.lr_base * 1e-2
    if total_steps == warmup:
        return cfg.lr_base
    frac = (step - warmup) / (total_steps - warmup)
    return lr_min + (cfg.lr_base - lr_min) * (1.0 + math.cos(math.pi * frac)) / 2.0


def ema_lambda_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine ramp from ``ema_start`` to ``ema_end``."""
    if total_steps <= 0:
        return cfg.ema_start
    if step > total_steps:
        raise ValueError(f"step {step} beyond total_steps {total_steps}")
    return cfg.ema_end - (cfg.ema_end - cfg.ema_start) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def epoch_generator(seed: int, epoch: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed((seed * 1_000_003 + epoch) % (2 ** 63))
    return g


def build_model(model_cfg: ModelConfig, seed: int, dtype=torch.float32) -> SymbolicModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SymbolicModel(model_cfg)
    return model.to(dtype)


def make_optimizer(model: SymbolicModel, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if name.startswith("proj_t."):
            continue
        (no_decay if p.ndim <= 1 else decay).append(p)
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.lr_base, betas=(0.9, 0.999), eps=1e-8,
    )


def features_digest(fs: FeatureSet) -> str:
    return hashlib.sha256(fs.tokens.tobytes()).hexdigest()


@dataclass
class TrainState:
    cfg: RunConfig
    model: SymbolicModel
    optimizer: torch.optim.AdamW
    epoch: int = 0
    step: int = 0


def _student_param_names(model: SymbolicModel) -> list[str]:
    return [n for n, _ in model.named_parameters() if not n.startswith("proj_t.")]


def save_state(state: TrainState, path) -> None:
    tensors = dict(state.model.state_dict())
    params = dict(state.model.named_parameters())
    lookup = {id(p): n for n, p in params.items()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if not st:
                continue
            name = lookup[id(p)]
            tensors[f"opt.{name}.exp_avg"] = st["exp_avg"]
            tensors[f"opt.{name}.exp_avg_sq"] = st["exp_avg_sq"]
            tensors[f"opt.{name}.step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(())
    tensors["rng.seed"] = symc.encode_u32(state.cfg.train.seed)
    tensors["state.epoch"] = torch.tensor(float(state.epoch))
    tensors["state.step"] = torch.tensor(float(state.step))
    symc.save_checkpoint(path, tensors, state.cfg.to_text())


def _model_cfg_from(tensors: dict, cfg: RunConfig) -> ModelConfig:
    if "dec.mem_proj.weight" not in tensors:
        raise symc.CheckpointError("checkpoint lacks decoder entries")
    d_t = tensors["dec.mem_proj.weight"].shape[1]
    return ModelConfig(**{**cfg.model.to_dict(), "d_t": d_t})


def load_model(path) -> tuple[SymbolicModel, RunConfig, dict]:
    """Rebuild the model from a SYMC checkpoint. Returns (model, run config, raw tensors)."""
    tensors, text = symc.load_checkpoint(path)
    cfg = parse_config_text(text, source=f"{path}:config")
    cfg.model = _model_cfg_from(tensors, cfg)
    model = SymbolicModel(cfg.model)
    sd = model.state_dict()
    missing = [k for k in sd if k not in tensors]
    if missing:
        raise symc.CheckpointError(f"checkpoint missing entries: {', '.join(missing[:5])}")
    for k, v in sd.items():
        if tuple(tensors[k].shape) != tuple(v.shape):
            raise symc.CheckpointError(f"entry {k} has shape {tuple(tensors[k].shape)}, expected {tuple(v.shape)}")
    model.load_state_dict({k: tensors[k] for k in sd})
    model.cfg = cfg.model
    return model, cfg, tensors


def resume(path, features: Optional[FeatureSet] = None) -> TrainState:
    """Restore model, optimizer moments, epoch/step counters and seed from a checkpoint."""
    model, cfg, tensors = load_model(path)
    if features is not None and features.d_t != cfg.model.d_t:
        raise TrainingError(f"checkpoint expects d_t={cfg.model.d_t}, features have d_t={features.d_t}")
    for key in ("rng.seed", "state.epoch", "state.step"):
        if key not in tensors:
            raise symc.CheckpointError(f"checkpoint missing entry {key}")
    if symc.decode_u32(tensors["rng.seed"]) != cfg.train.seed:
        raise symc.CheckpointError("rng.seed disagrees with the config snapshot")
    opt = make_optimizer(model, cfg.train)
    params = dict(model.named_parameters())
    for name in _student_param_names(model):
        key = f"opt.{name}"
        if f"{key}.exp_avg" not in tensors:
            if int(tensors["state.step"]) > 0:
                raise symc.CheckpointError(f"checkpoint missing optimizer entry {key}.exp_avg")
            continue
        opt.state[params[name]] = {
            "step": tensors[f"{key}.step"].clone(),
            "exp_avg": tensors[f"{key}.exp_avg"].clone(),
            "exp_avg_sq": tensors[f"{key}.exp_avg_sq"].clone(),
        }
    return TrainState(cfg, model, opt, epoch=int(tensors["state.epoch"]), step=int(tensors["state.step"]))


def _student_views(model, cfg: RunConfig, patches: torch.Tensor, tau: float, gen: torch.Generator):
    """Generate for all views at once; ``patches`` is ``[B, V, P-1, d_t]``."""
    b, v = patches.shape[:2]
    seq = generate(model, cfg.disc, patches.reshape(b * v, *patches.shape[2:]), tau, generator=gen)
    emb = embed_prefixes(model, seq)
    per_view = [{n: p.view(b, v, -1)[:, i] for n, p in emb.proj.items()} for i in range(v)]
    agg = emb.aggregated.view(b, v, -1)
    return seq, per_view, [agg[:, i] for i in range(v)]


def train_step(state: TrainState, batch: torch.Tensor, gen: torch.Generator, total_steps: int) -> dict:
    """One optimisation step on ``batch`` (``[B, V, P, d_t]`` teacher tokens)."""
    cfg, model, opt = state.cfg, state.model, state.optimizer
    tc, ls = cfg.train, cfg.loss
    step = state.step
    tau = schedule_tau(cfg.disc, min(step, total_steps), max(total_steps, 1))
    lr = lr_at(min(step, total_steps), total_steps, tc)
    lam = ema_lambda_at(min(step, total_steps), total_steps, tc)
    batch = batch.to(model.center.dtype)
    n_views = batch.shape[1]

    def abort(what, ssl=float("nan")):
        return TrainingError(
            f"non-finite {what} at step {step}: ssl={float(ssl)}, "
            f"teacher logit range=({min(float(l.min()) for l in logits_t)}, {max(float(l.max()) for l in logits_t)}), "
            f"batch feature norm={float(batch.norm())}, non-finite features={int((~torch.isfinite(batch)).sum())}, "
            f"tau={tau}"
        )

    logits_t = [model.teacher_logits(batch[:, i, 0]) for i in range(n_views)]
    if not all(torch.isfinite(l).all() for l in logits_t):
        raise abort("teacher logits")
    p_t = [teacher_distribution(l, model.center, ls.teacher_temp) for l in logits_t]
    seq, student, agg = _student_views(model, cfg, batch[:, :, 1:], tau, gen)
    ssl, _ = ssl_loss(p_t, student, ls, agg)
    loss = total_loss(ssl, seq.soft, ls, seq.vq_aux, state.epoch)
    if not torch.isfinite(loss):
        raise abort("loss", ssl)

    for group in opt.param_groups:
        group["lr"] = lr
    opt.zero_grad(set_to_none=True)
    loss.backward()
    torch.nn.utils.clip_grad_norm_(list(model.student_parameters()), tc.clip_norm)
    opt.step()
    ema_update_(model.proj_t, model.proj_s, lam)
    model.center.copy_(update_center(model.center, torch.cat(logits_t), ls.center_momentum))

    with torch.no_grad():
        h_t = torch.stack([-(p * torch.log(p.clamp_min(1e-30))).sum(-1).mean() for p in p_t]).mean()
        row = {
            "step": step,
            "loss": float(loss),
            "ssl": float(ssl),
            "teacher_entropy": float(h_t),
            "kl_teacher_student": float(ssl) - float(h_t),
            "seq_entropy": float(sequence_entropy(seq.soft).mean()),
            "seq_info": float(sequence_info(seq.soft).mean()),
            "tau": tau,
            "lr": lr,
            "ema_lambda": lam,
        }
    state.step += 1
    return row


class MetricsLog:
    """Append-only CSV writer with full-precision floats."""

    def __init__(self, path, fields):
        self.path = path
        self.fields = fields
        if not os.path.exists(path) or os.path.getsize(path) == 0:
            with open(path, "w", newline="") as f:
                csv.writer(f).writerow(fields)

    def append(self, row: dict) -> None:
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in self.fields])


def train(
    cfg: RunConfig,
    features: FeatureSet,
    eval_features: Optional[FeatureSet] = None,
    resume_from=None,
    stop_epoch: Optional[int] = None,
    out_dir=None,
) -> str:
    """Train (or continue training) and return the path of the last checkpoint written.

    ``stop_epoch`` ends the run early while keeping the schedules of the full
    ``epochs`` budget, which is what a later :func:`resume` expects.
    """
    out_dir = out_dir or cfg.paths.out_dir
    os.makedirs(out_dir, exist_ok=True)
    if features.n_views < 1:
        raise TrainingError("features need at least one view")
    if resume_from is not None:
        state = resume(resume_from, features)
        cfg = state.cfg
    else:
        cfg = copy.deepcopy(cfg)
        cfg.model = ModelConfig(**{**cfg.model.to_dict(), "d_t": features.d_t})
        model = build_model(cfg.model, cfg.train.seed)
        state = TrainState(cfg, model, make_optimizer(model, cfg.train))
    if state.model.cfg.d_t != features.d_t:
        raise TrainingError(f"model expects d_t={state.model.cfg.d_t}, features have d_t={features.d_t}")

    tc = cfg.train
    n = features.n_samples
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total_steps = tc.epochs * steps_per_epoch
    last_epoch = tc.epochs if stop_epoch is None else min(stop_epoch, tc.epochs)
    metrics = MetricsLog(os.path.join(out_dir, "metrics.csv"), METRIC_FIELDS)
    probes = MetricsLog(os.path.join(out_dir, "probe.csv"), PROBE_FIELDS) if eval_features is not None else None
    digest = features_digest(features)
    tokens = torch.from_numpy(features.tokens)
    last_ckpt = None
    if resume_from is not None:
        last_ckpt = str(resume_from)

    state.model.train()
    while state.epoch < last_epoch:
        gen = epoch_generator(tc.seed, state.epoch)
        order = torch.randperm(n, generator=gen)
        for s in range(steps_per_epoch):
            idx = order[s * tc.batch_size:(s + 1) * tc.batch_size]
            metrics.append(train_step(state, tokens[idx], gen, total_steps))
        state.epoch += 1
        done = state.epoch == last_epoch
        if (tc.eval_every_epochs and state.epoch % tc.eval_every_epochs == 0) or done:
            if probes is not None:
                _periodic_probe(state, features, eval_features, probes)
            last_ckpt = os.path.join(out_dir, f"ckpt_epoch{state.epoch:04d}.symc")
            save_state(state, last_ckpt)
            log.info("epoch %d step %d: checkpoint %s", state.epoch, state.step, last_ckpt)

    if features_digest(features) != digest:
        raise TrainingError("teacher features were mutated during training")
    if last_ckpt is None:
        last_ckpt = os.path.join(out_dir, f"ckpt_epoch{state.epoch:04d}.symc")
        save_state(state, last_ckpt)
    return last_ckpt


def _periodic_probe(state: TrainState, train_fs: FeatureSet, eval_fs: FeatureSet, out: MetricsLog) -> None:
    from .probe import extract_embeddings, knn_classify

    if train_fs.labels is None or eval_fs.labels is None:
        return
    model, cfg = state.model, state.cfg
    was_training = model.training
    model.eval()
    tr = extract_embeddings(model, cfg, train_fs, "student_pooled")
    ev = extract_embeddings(model, cfg, eval_fs, "student_pooled")
    k = min(PROBE_K, train_fs.n_samples)
    rep = knn_classify(tr, train_fs.labels, ev, eval_fs.labels, [k], cfg.train.knn_temp)
    out.append({"epoch": state.epoch, "step": state.step, "k": k, "top1": rep.top1[0], "top5": rep.top5[0]})
    log.info("epoch %d kNN(k=%d) top1=%.2f top5=%.2f", state.epoch, k, rep.top1[0], rep.top5[0])
    model.train(was_training)


def load_features_for(cfg: RunConfig):
    from .featstore import read_features

    train_fs = read_features(cfg.paths.train_features)
    eval_fs = read_features(cfg.paths.eval_features) if cfg.paths.eval_features else None
    return train_fs, eval_fs


__all__ = [
    "TrainState", "TrainingError", "build_model", "ema_lambda_at", "load_model", "lr_at",
    "resume", "save_state", "train", "train_step",
]
