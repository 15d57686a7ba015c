"""The knowledge-infused fusion network and its training loop.

Data flow for one document::

    x_domain (embedded phrase-tagged post) --self-attention------------+
                                                                        +-- concat --> LayerNorm --> self-attention
    x_cs (embedded post + five aspects) --self-attn (KINN2) / cross-attn (KINN1)
                                                                             |
                          logits <-- head <-- tanh(dense) <-- masked mean-pool

Sequences are padded into (batch, length, dim) tensors with boolean masks
(True = real position). Masked keys get exactly zero attention weight; no
positional encoding is added.
"""

from __future__ import annotations

import copy
import enum
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError, NumericError, TrainingDiverged
from .metrics import MetricReport, Task, evaluate

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "kinn-checkpoint"
CHECKPOINT_VERSION = 1


class Variant(str, enum.Enum):
    KINN1 = "KINN1"  # cross-attention over the aspect-augmented branch
    KINN2 = "KINN2"  # self-attention over the aspect-augmented branch


@dataclass
class KinnConfig:
    variant: Variant = Variant.KINN2
    dim: int = 128
    heads: int = 4
    max_len: int = 150
    num_classes: int = 2
    task: Task = Task.BINARY
    lr: float = 1e-3
    epochs: int = 15
    batch_size: int = 16
    epsilon: float = 1e-3
    seed: int = 0
    class_weights: bool = True
    dense_dim: int | None = None

    def __post_init__(self) -> None:
        try:
            self.variant = Variant(self.variant)
            self.task = Task(self.task)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.validate()

    def validate(self) -> None:
        if self.dim <= 0 or self.heads <= 0:
            raise ConfigError("dim and heads must be positive")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.task == Task.BINARY and self.num_classes != 2:
            raise ConfigError("BINARY task needs num_classes == 2")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError("lr must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.max_len < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and max_len >= 1 required")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.dense_dim is not None and self.dense_dim < 1:
            raise ConfigError("dense_dim must be positive")

    @property
    def hidden_dim(self) -> int:
        return self.dense_dim or self.dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["task"] = self.task.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KinnConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class AttentionBlock(nn.Module):
    """Multi-head scaled dot-product attention with a residual connection."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise InputError("dim must be divisible by heads")
        self.dim, self.heads = dim, heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, xq: torch.Tensor, xkv: torch.Tensor, kv_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, lq, d = xq.shape
        lk = xkv.shape[1]
        if xkv.shape[0] != b or xkv.shape[2] != d or d != self.dim:
            raise InputError(f"shape mismatch: queries {tuple(xq.shape)}, keys {tuple(xkv.shape)}, dim {self.dim}")
        if kv_mask.shape != (b, lk):
            raise InputError(f"mask shape {tuple(kv_mask.shape)} != {(b, lk)}")
        if not bool(kv_mask.any(1).all()):
            raise InputError("every sequence needs at least one unmasked position")
        h, dh = self.heads, d // self.heads
        q = self.query(xq).view(b, lq, h, dh).transpose(1, 2)
        k = self.key(xkv).view(b, lk, h, dh).transpose(1, 2)
        v = self.value(xkv).view(b, lk, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(~kv_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, lq, d)
        return xq + self.out(ctx), attn.mean(1)


def _batched(x: torch.Tensor, mask: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor, bool]:
    x = torch.as_tensor(x)
    single = x.dim() == 2
    if single:
        x = x.unsqueeze(0)
    if mask is None:
        mask = torch.ones(x.shape[:2], dtype=torch.bool)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.dim() == 1:
        mask = mask.unsqueeze(0)
    return x, mask, single


def self_attention(x, block: AttentionBlock, mask=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Self-attention over ``x`` ((L, D) or (B, L, D)); returns output and head-averaged weights."""
    x, mask, single = _batched(x, mask)
    if x.shape[1] < 1:
        raise InputError("empty sequence")
    if mask.shape != x.shape[:2]:
        raise InputError("mask length differs from sequence length")
    y, a = block(x, x, mask)
    return (y[0], a[0]) if single else (y, a)


def cross_attention(q_src, kv_src, block: AttentionBlock, kv_mask=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Queries from ``q_src``, keys and values from ``kv_src``."""
    q, _, single = _batched(q_src, None)
    kv, kv_mask, _ = _batched(kv_src, kv_mask)
    if q.shape[1] < 1 or kv.shape[1] < 1:
        raise InputError("empty sequence")
    y, a = block(q, kv, kv_mask)
    return (y[0], a[0]) if single else (y, a)


@dataclass
class ForwardTrace:
    """Everything one forward pass produced, batched along dim 0."""

    A_domain: torch.Tensor
    A_commonsense: torch.Tensor
    A_fused: torch.Tensor
    h: torch.Tensor
    z: torch.Tensor
    logits: torch.Tensor
    probs: torch.Tensor
    mask_domain: torch.Tensor
    mask_cs: torch.Tensor  # rows of the commonsense branch output
    mask_fused: torch.Tensor
    mask_cs_keys: torch.Tensor  # positions of the aspect-augmented input

    def item(self, i: int) -> "DocumentTrace":
        md = self.mask_domain[i]
        mc = self.mask_cs[i]
        mk = self.mask_cs_keys[i]
        mf = self.mask_fused[i]
        return DocumentTrace(
            A_domain=self.A_domain[i][md][:, md].detach().cpu().numpy(),
            A_commonsense=self.A_commonsense[i][mc][:, mk].detach().cpu().numpy(),
            A_fused=self.A_fused[i][mf][:, mf].detach().cpu().numpy(),
            h=self.h[i][mf].detach().cpu().numpy(),
            z=self.z[i].detach().cpu().numpy(),
            logits=self.logits[i].detach().cpu().numpy(),
            probs=self.probs[i].detach().cpu().numpy(),
            n_domain=int(md.sum()),
            n_cs=int(mk.sum()),
        )


@dataclass
class DocumentTrace:
    """Unpadded numpy view of one document's trace."""

    A_domain: np.ndarray
    A_commonsense: np.ndarray
    A_fused: np.ndarray
    h: np.ndarray
    z: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    n_domain: int
    n_cs: int


class KinnNet(nn.Module):
    def __init__(self, cfg: KinnConfig):
        super().__init__()
        self.cfg = cfg
        self.attn_domain = AttentionBlock(cfg.dim, cfg.heads)
        self.attn_commonsense = AttentionBlock(cfg.dim, cfg.heads)
        self.layernorm = nn.LayerNorm(cfg.dim)
        self.attn_fused = AttentionBlock(cfg.dim, cfg.heads)
        self.dense = nn.Linear(cfg.dim, cfg.hidden_dim)
        self.head = nn.Linear(cfg.hidden_dim, cfg.num_classes)

    @staticmethod
    def _check(name: str, t: torch.Tensor) -> None:
        if not bool(torch.isfinite(t).all()):
            raise NumericError(name)

    def forward(self, x_domain: torch.Tensor, mask_domain: torch.Tensor,
                x_cs: torch.Tensor, mask_cs: torch.Tensor) -> ForwardTrace:
        s_dom, a_dom = self.attn_domain(x_domain, x_domain, mask_domain)
        self._check("attn_domain", s_dom)
        if self.cfg.variant == Variant.KINN2:
            s_cs, a_cs = self.attn_commonsense(x_cs, x_cs, mask_cs)
            out_mask_cs = mask_cs
        else:
            s_cs, a_cs = self.attn_commonsense(x_domain, x_cs, mask_cs)
            out_mask_cs = mask_domain
        self._check("attn_commonsense", s_cs)
        h = self.layernorm(torch.cat([s_dom, s_cs], dim=1))
        self._check("layernorm", h)
        mask_fused = torch.cat([mask_domain, out_mask_cs], dim=1)
        s_h, a_fused = self.attn_fused(h, h, mask_fused)
        self._check("attn_fused", s_h)
        w = mask_fused.to(s_h.dtype).unsqueeze(-1)
        pooled = (s_h * w).sum(1) / w.sum(1)
        z = torch.tanh(self.dense(pooled))
        self._check("dense", z)
        logits = self.head(z)
        self._check("head", logits)
        probs = torch.softmax(logits, -1) if self.cfg.task == Task.MULTICLASS else torch.sigmoid(logits)
        return ForwardTrace(a_dom, a_cs, a_fused, h, z, logits, probs, mask_domain, out_mask_cs, mask_fused, mask_cs)


def build_model(cfg: KinnConfig, dtype: torch.dtype = torch.float32) -> KinnNet:
    torch.manual_seed(cfg.seed)
    return KinnNet(cfg).to(dtype)


def pad_batch(seqs: Sequence[np.ndarray], dim: int, dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad (L_i, dim) arrays into (B, max L, dim) plus a validity mask.

    An empty sequence becomes a single zero vector so attention always has a key.
    """
    lengths = [max(1, len(s)) for s in seqs]
    out = torch.zeros((len(seqs), max(lengths, default=1), dim), dtype=dtype)
    mask = torch.zeros((len(seqs), max(lengths, default=1)), dtype=torch.bool)
    for i, s in enumerate(seqs):
        s = np.asarray(s)
        if len(s):
            if s.shape[1] != dim:
                raise InputError(f"sequence {i} has dim {s.shape[1]}, expected {dim}")
            out[i, : len(s)] = torch.as_tensor(s, dtype=dtype)
        mask[i, : lengths[i]] = True
    return out, mask


def forward(cfg: KinnConfig, model: KinnNet, x_domain, x_cs) -> ForwardTrace:
    """Forward pass on one or more documents given as (L, dim) arrays."""
    single = isinstance(x_domain, np.ndarray) and x_domain.ndim == 2 or hasattr(x_domain, "vectors")
    xd = [x_domain] if single else list(x_domain)
    xc = [x_cs] if single else list(x_cs)
    xd = [getattr(s, "vectors", s) for s in xd]
    xc = [getattr(s, "vectors", s) for s in xc]
    for s in xd + xc:
        if len(s) and np.asarray(s).shape[1] != cfg.dim:
            raise InputError(f"embedding dim {np.asarray(s).shape[1]} != configured dim {cfg.dim}")
    dtype = next(model.parameters()).dtype
    td, md = pad_batch(xd, cfg.dim, dtype)
    tc, mc = pad_batch(xc, cfg.dim, dtype)
    model.eval()
    with torch.no_grad():
        return model(td, md, tc, mc)


def loss(cfg: KinnConfig, logits: torch.Tensor, y_true, class_weights: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-entropy (single-label) or mean per-label binary cross-entropy (multi-label)."""
    logits = torch.as_tensor(logits)
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    if cfg.task == Task.MULTILABEL:
        y = torch.as_tensor(np.asarray(y_true), dtype=logits.dtype)
        if y.dim() == 1:
            y = y.unsqueeze(0)
        if y.shape != logits.shape:
            raise InputError(f"multi-label targets {tuple(y.shape)} do not match logits {tuple(logits.shape)}")
        if not bool(((y == 0) | (y == 1)).all()):
            raise InputError("multi-label targets must be 0/1")
        return F.binary_cross_entropy_with_logits(logits, y, pos_weight=class_weights)
    y = torch.as_tensor(np.asarray(y_true), dtype=torch.long).reshape(-1)
    if y.shape[0] != logits.shape[0]:
        raise InputError("label count differs from batch size")
    if bool((y < 0).any() or (y >= cfg.num_classes).any()):
        raise InputError(f"label out of range [0, {cfg.num_classes})")
    return F.cross_entropy(logits, y, weight=class_weights)


def decide(cfg: KinnConfig, probs) -> np.ndarray:
    """Class index per row (ties go to the lower index) or 0/1 label vectors (>= 0.5)."""
    p = np.asarray(probs.detach().cpu().numpy() if isinstance(probs, torch.Tensor) else probs, dtype=np.float64)
    single = p.ndim == 1
    if single:
        p = p[None, :]
    if cfg.task == Task.MULTILABEL:
        out = (p >= 0.5).astype(np.int64)
    else:
        out = np.argmax(p, axis=1)
    return out[0] if single else out


def predict(cfg: KinnConfig, model: KinnNet, x_domain, x_cs) -> np.ndarray:
    return decide(cfg, forward(cfg, model, x_domain, x_cs).probs)


@dataclass
class Example:
    x_domain: np.ndarray
    x_cs: np.ndarray
    y: object  # class index or 0/1 vector
    doc_id: str = ""


@dataclass
class EpochLog:
    epoch: int
    split: str
    loss: float
    P: float
    R: float
    F1: float
    MCC: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: KinnNet
    log: list[EpochLog] = field(default_factory=list)
    stopped_early: bool = False


def _labels_array(cfg: KinnConfig, ys: Sequence) -> np.ndarray:
    if cfg.task == Task.MULTILABEL:
        arr = np.asarray(ys, dtype=np.int64).reshape(len(ys), -1)
        if arr.shape[1] != cfg.num_classes:
            raise InputError(f"expected {cfg.num_classes}-label vectors, got {arr.shape[1]}")
        return arr
    return np.asarray(ys, dtype=np.int64).reshape(-1)


def class_weight_tensor(cfg: KinnConfig, labels: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    """Inverse-frequency weights (normalized to mean 1) or per-label positive weights."""
    if cfg.task == Task.MULTILABEL:
        pos = labels.sum(0).astype(np.float64)
        neg = labels.shape[0] - pos
        w = np.where(pos > 0, neg / np.maximum(pos, 1), 1.0)
        return torch.as_tensor(np.clip(w, 1e-3, 1e3), dtype=dtype)
    counts = np.bincount(labels, minlength=cfg.num_classes).astype(np.float64)
    w = np.where(counts > 0, counts.sum() / (cfg.num_classes * np.maximum(counts, 1)), 0.0)
    present = w > 0
    w[present] /= w[present].mean()
    return torch.as_tensor(w, dtype=dtype)


def evaluate_model(cfg: KinnConfig, model: KinnNet, data: Sequence[Example],
                   batch_size: int | None = None, class_weights: torch.Tensor | None = None) -> tuple[float, MetricReport, np.ndarray]:
    """Mean loss, metric report and predictions over ``data``."""
    bs = batch_size or max(cfg.batch_size, 64)
    dtype = next(model.parameters()).dtype
    preds, losses, weights = [], [], []
    model.eval()
    with torch.no_grad():
        for lo in range(0, len(data), bs):
            chunk = data[lo:lo + bs]
            td, md = pad_batch([e.x_domain for e in chunk], cfg.dim, dtype)
            tc, mc = pad_batch([e.x_cs for e in chunk], cfg.dim, dtype)
            trace = model(td, md, tc, mc)
            y = _labels_array(cfg, [e.y for e in chunk])
            losses.append(float(loss(cfg, trace.logits, y, class_weights)))
            weights.append(len(chunk))
            preds.append(decide(cfg, trace.probs))
    y_true = _labels_array(cfg, [e.y for e in data])
    y_pred = np.concatenate(preds) if preds else y_true[:0]
    report = evaluate(y_true, y_pred, cfg.task, cfg.num_classes)
    mean_loss = float(np.average(losses, weights=weights)) if losses else float("nan")
    return mean_loss, report, y_pred


def train(
    cfg: KinnConfig,
    dataset: Sequence[Example],
    dev: Sequence[Example] | None = None,
    *,
    dtype: torch.dtype = torch.float32,
    model: KinnNet | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam training; stops once a batch loss drops to ``cfg.epsilon``."""
    if not dataset:
        raise InputError("training set is empty")
    model = model if model is not None else build_model(cfg, dtype)
    dtype = next(model.parameters()).dtype
    result = TrainResult(model)
    if cfg.epochs == 0:
        return result
    labels = _labels_array(cfg, [e.y for e in dataset])
    weights = class_weight_tensor(cfg, labels, dtype) if cfg.class_weights else None
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = torch.randperm(len(dataset), generator=gen).tolist()
        batch_losses, batch_sizes = [], []
        converged = False
        for lo in range(0, len(order), cfg.batch_size):
            chunk = [dataset[i] for i in order[lo:lo + cfg.batch_size]]
            td, md = pad_batch([e.x_domain for e in chunk], cfg.dim, dtype)
            tc, mc = pad_batch([e.x_cs for e in chunk], cfg.dim, dtype)
            y = _labels_array(cfg, [e.y for e in chunk])
            good_state = copy.deepcopy(model.state_dict())
            try:
                trace = model(td, md, tc, mc)
                batch_loss = loss(cfg, trace.logits, y, weights)
            except NumericError:
                raise TrainingDiverged(epoch, step, good_state) from None
            if not bool(torch.isfinite(batch_loss)):
                raise TrainingDiverged(epoch, step, good_state)
            opt.zero_grad()
            batch_loss.backward()
            opt.step()
            step += 1
            batch_losses.append(float(batch_loss.detach()))
            batch_sizes.append(len(chunk))
            if batch_losses[-1] <= cfg.epsilon:
                converged = True
                break
        train_loss, train_rep, _ = evaluate_model(cfg, model, dataset, class_weights=weights)
        entries = [EpochLog(epoch, "train", train_loss, train_rep.precision_macro, train_rep.recall_macro,
                            train_rep.f1_macro, train_rep.mcc)]
        if dev:
            dev_loss, dev_rep, _ = evaluate_model(cfg, model, dev, class_weights=weights)
            entries.append(EpochLog(epoch, "dev", dev_loss, dev_rep.precision_macro, dev_rep.recall_macro,
                                    dev_rep.f1_macro, dev_rep.mcc))
        for entry in entries:
            result.log.append(entry)
            if on_epoch:
                on_epoch(entry)
        logger.info("epoch %d: batch loss %.5f, train F1 %.4f", epoch, np.average(batch_losses, weights=batch_sizes),
                    train_rep.f1_macro)
        if converged:
            result.stopped_early = True
            break
    return result


def save_checkpoint(path: str | Path, cfg: KinnConfig, model: KinnNet, extra: dict | None = None) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": cfg.to_dict(),
            "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
            "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
            "extra": extra or {},
        },
        Path(path),
    )


def load_checkpoint(path: str | Path) -> tuple[KinnConfig, KinnNet, dict]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"{path} is not a checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise InputError(f"unsupported checkpoint version {blob.get('version')}")
    cfg = KinnConfig.from_dict(blob["config"])
    model = KinnNet(cfg).to(getattr(torch, blob.get("dtype", "float32")))
    model.load_state_dict(blob["state"])
    model.eval()
    return cfg, model, blob.get("extra", {})


def parameter_groups(model: KinnNet) -> dict[str, list[torch.nn.Parameter]]:
    """Parameters bucketed by block, for per-group gradient checks."""
    groups: dict[str, list[torch.nn.Parameter]] = {}
    for name, p in model.named_parameters():
        groups.setdefault(name.split(".")[0], []).append(p)
    return groups


def iter_batches(items: Sequence, size: int) -> Iterable[Sequence]:
    for lo in range(0, len(items), size):
        yield items[lo:lo + size]
