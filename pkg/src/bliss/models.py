"""Proxy, score and target models and their losses.

All three share one decoder-only transformer body (token + learned position
embeddings, pre-norm causal self-attention and GELU feed-forward blocks, final
layer norm).  The proxy and target put a vocabulary projection on top; the
score model mean-pools the body features and maps them through an affine
layer and a logistic squash to a single value in (0, 1).

Models are written functionally over a :class:`ParamVector` so that the
optimizers can differentiate with respect to any parameter set.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .autodiff import ParamVector, ScalarGraph, value_and_grad
from .data import DataError, SampleBatch, TokenDataset, batch_iter, rng_for

FAMILIES = ("proxy", "target")
SCORE_HEAD = ("score_head.weight", "score_head.bias")
LM_HEAD = ("lm_head.weight", "lm_head.bias")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    seq_len: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    family: str = "proxy"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.seq_len < 2 or self.vocab_size < 2:
            raise ValueError("seq_len and vocab_size must both be at least 2")
        if self.n_layers < 1:
            raise ValueError("n_layers must be at least 1")
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")


PROXY_CONFIG = ModelConfig()
TARGET_CONFIG = ModelConfig(d_model=128, n_layers=4, n_heads=4, family="target")


# -- parameters -------------------------------------------------------------
def body_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, h = cfg.d_model, 4 * cfg.d_model
    shapes = [("embed.tok", (cfg.vocab_size, d)), ("embed.pos", (cfg.seq_len, d))]
    for i in range(cfg.n_layers):
        p = f"block{i}."
        shapes += [
            (p + "ln1.weight", (d,)), (p + "ln1.bias", (d,)),
            (p + "attn.qkv", (d, 3 * d)), (p + "attn.qkv_bias", (3 * d,)),
            (p + "attn.proj", (d, d)), (p + "attn.proj_bias", (d,)),
            (p + "ln2.weight", (d,)), (p + "ln2.bias", (d,)),
            (p + "mlp.fc", (d, h)), (p + "mlp.fc_bias", (h,)),
            (p + "mlp.out", (h, d)), (p + "mlp.out_bias", (d,)),
        ]
    shapes += [("final_ln.weight", (d,)), ("final_ln.bias", (d,))]
    return shapes


def init_params(
    cfg: ModelConfig,
    seed: int,
    head: str = "lm",
    dtype: torch.dtype = torch.float32,
    std: float = 0.02,
) -> ParamVector:
    """Gaussian initialisation; norms start at identity, biases at zero."""
    gen = torch.Generator().manual_seed(int(rng_for(seed, 0x1417).integers(2**62)))
    shapes = body_shapes(cfg)
    if head == "lm":
        shapes += [(LM_HEAD[0], (cfg.d_model, cfg.vocab_size)), (LM_HEAD[1], (cfg.vocab_size,))]
    elif head == "score":
        shapes += [(SCORE_HEAD[0], (cfg.d_model,)), (SCORE_HEAD[1], ())]
    else:
        raise ValueError(f"unknown head {head!r}")
    resid_std = std / math.sqrt(2 * cfg.n_layers)
    blocks = []
    for name, shape in shapes:
        if name.endswith(("ln1.weight", "ln2.weight", "final_ln.weight")):
            t = torch.ones(shape, dtype=torch.float64)
        elif name.endswith("bias") or name in SCORE_HEAD:
            t = torch.zeros(shape, dtype=torch.float64)
        else:
            s = resid_std if name.endswith(("attn.proj", "mlp.out")) else std
            t = torch.randn(shape, generator=gen, dtype=torch.float64) * s
        blocks.append((name, t.to(dtype)))
    return ParamVector(tuple(blocks))


# -- forward ----------------------------------------------------------------
def as_tokens(batch: SampleBatch | np.ndarray | torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    tokens = batch.tokens if isinstance(batch, SampleBatch) else batch
    tokens = torch.as_tensor(np.asarray(tokens, dtype=np.int64))
    if tokens.dim() == 1:
        tokens = tokens[None]
    if tokens.shape[-1] != cfg.seq_len:
        raise DataError(f"sample length {tokens.shape[-1]} != seq_len {cfg.seq_len}")
    if tokens.numel() and (int(tokens.max()) >= cfg.vocab_size or int(tokens.min()) < 0):
        raise DataError(f"token id out of range for vocab {cfg.vocab_size}")
    return tokens


def body(p: ParamVector | dict, tokens: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    """Transformer body: (B, L) token ids -> (B, L, d) normalised features."""
    p = p.as_dict() if isinstance(p, ParamVector) else p
    B, L = tokens.shape
    d, nh = cfg.d_model, cfg.n_heads
    hd = d // nh
    x = p["embed.tok"][tokens] + p["embed.pos"][:L]
    mask = torch.ones(L, L, dtype=torch.bool).triu(1)
    for i in range(cfg.n_layers):
        q = f"block{i}."
        h = F.layer_norm(x, (d,), p[q + "ln1.weight"], p[q + "ln1.bias"])
        qkv = h @ p[q + "attn.qkv"] + p[q + "attn.qkv_bias"]
        qh, kh, vh = (t.reshape(B, L, nh, hd).transpose(1, 2) for t in qkv.split(d, dim=-1))
        att = (qh @ kh.transpose(-1, -2)) / math.sqrt(hd)
        att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
        y = (att @ vh).transpose(1, 2).reshape(B, L, d)
        x = x + y @ p[q + "attn.proj"] + p[q + "attn.proj_bias"]
        h = F.layer_norm(x, (d,), p[q + "ln2.weight"], p[q + "ln2.bias"])
        h = F.gelu(h @ p[q + "mlp.fc"] + p[q + "mlp.fc_bias"])
        x = x + h @ p[q + "mlp.out"] + p[q + "mlp.out_bias"]
    return F.layer_norm(x, (d,), p["final_ln.weight"], p["final_ln.bias"])


def lm_logits(p: ParamVector | dict, tokens: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    p = p.as_dict() if isinstance(p, ParamVector) else p
    return body(p, tokens, cfg) @ p[LM_HEAD[0]] + p[LM_HEAD[1]]


def per_sample_ce(p, tokens: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    """Next-token cross-entropy averaged over positions, one value per row."""
    logits = lm_logits(p, tokens, cfg)[:, :-1]
    nll = F.cross_entropy(
        logits.reshape(-1, cfg.vocab_size), tokens[:, 1:].reshape(-1), reduction="none"
    )
    return nll.reshape(tokens.shape[0], -1).mean(dim=1)


def score_values(p, tokens: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    """h(θs; ξ) for every row: sigmoid(mean-pooled body features · w + b)."""
    p = p.as_dict() if isinstance(p, ParamVector) else p
    pooled = body(p, tokens, cfg).mean(dim=1)
    return torch.sigmoid(pooled @ p[SCORE_HEAD[0]] + p[SCORE_HEAD[1]])


def kl_per_position(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """KL(student || teacher) per position, summed over the vocabulary; 0·log 0 = 0."""
    log_s = student_logits.log_softmax(dim=-1)
    log_t = teacher_logits.log_softmax(dim=-1)
    p_s = log_s.exp()
    terms = torch.where(p_s > 0, p_s * (log_s - log_t), torch.zeros_like(p_s))
    return terms.sum(dim=-1)


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """KL between explicit distributions along the last axis, with 0·log 0 = 0."""
    return torch.where(p > 0, p * (torch.log(p) - torch.log(q)), torch.zeros_like(p)).sum(-1)


# -- model records ----------------------------------------------------------
@dataclass(frozen=True, eq=False)
class ProxyModel:
    config: ModelConfig
    params: ParamVector

    def with_params(self, params: ParamVector):
        return replace(self, params=params)


class TargetModel(ProxyModel):
    """Same family as the proxy, larger; frozen while the bilevel problem runs."""


@dataclass(frozen=True, eq=False)
class ScoreModel:
    config: ModelConfig
    params: ParamVector

    def with_params(self, params: ParamVector) -> "ScoreModel":
        return replace(self, params=params)


def new_proxy(cfg: ModelConfig, seed: int, dtype=torch.float32, std: float = 0.02) -> ProxyModel:
    return ProxyModel(cfg, init_params(cfg, seed, "lm", dtype, std))


def new_target(cfg: ModelConfig, seed: int, dtype=torch.float32, std: float = 0.02) -> TargetModel:
    return TargetModel(cfg, init_params(cfg, seed, "lm", dtype, std))


def new_score(cfg: ModelConfig, seed: int, dtype=torch.float32, std: float = 0.02) -> ScoreModel:
    return ScoreModel(cfg, init_params(cfg, seed, "score", dtype, std))


# -- losses -------------------------------------------------------------------
def lm_loss(model: ProxyModel, batch: SampleBatch) -> ScalarGraph:
    """Mean next-token cross-entropy over every (row, position) pair."""
    cfg = model.config
    tokens = as_tokens(batch, cfg)
    return ScalarGraph(lambda params: per_sample_ce(params, tokens, cfg).mean(), {"params": model.params})


def teacher_logits(teacher: ProxyModel, tokens: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    with torch.no_grad():
        return lm_logits(teacher.params, tokens, teacher.config).to(dtype)


def kl_loss(student: ProxyModel, teacher: ProxyModel, batch: SampleBatch) -> ScalarGraph:
    """Mean per-position KL(student || teacher); the teacher is a constant."""
    cfg = student.config
    if teacher.config.vocab_size != cfg.vocab_size:
        raise ValueError("student and teacher vocabularies differ")
    tokens = as_tokens(batch, cfg)
    t_logits = teacher_logits(teacher, tokens, student.params.dtype)
    return ScalarGraph(
        lambda params: kl_per_position(lm_logits(params, tokens, cfg), t_logits).mean(),
        {"params": student.params},
    )


def score(model: ScoreModel, sample) -> float:
    tokens = as_tokens(sample, model.config)
    if tokens.shape[0] != 1:
        raise DataError("score() takes a single sample; use score_batch for many")
    with torch.no_grad():
        return float(score_values(model.params, tokens, model.config)[0])


def score_batch(model: ScoreModel, tokens) -> np.ndarray:
    tokens = as_tokens(tokens, model.config)
    with torch.no_grad():
        return score_values(model.params, tokens, model.config).double().numpy()


def init_score_from_proxy(proxy: ProxyModel) -> ScoreModel:
    """Copy the proxy body; the affine head starts at zero so every score is 0.5."""
    body_names = [n for n in proxy.params.names if n not in LM_HEAD]
    blocks = [(n, proxy.params[n].clone()) for n in body_names]
    dtype = proxy.params.dtype
    blocks += [
        (SCORE_HEAD[0], torch.zeros(proxy.config.d_model, dtype=dtype)),
        (SCORE_HEAD[1], torch.zeros((), dtype=dtype)),
    ]
    return ScoreModel(proxy.config, ParamVector(tuple(blocks)))


def body_of(params: ParamVector) -> ParamVector:
    return params.select([n for n in params.names if n not in LM_HEAD + SCORE_HEAD])


# -- plain training ---------------------------------------------------------
def sgd_train(
    model: ProxyModel,
    dataset: TokenDataset,
    steps: int,
    lr: float,
    seed: int,
    batch_size: int = 16,
) -> tuple[ProxyModel, float]:
    """Unweighted cross-entropy SGD on uniformly shuffled batches.

    Returns the trained model and the loss of the last step (NaN if ``steps`` is 0).
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    params, last = model.params, float("nan")
    batches = batch_iter(dataset, min(batch_size, len(dataset)), seed)
    for step in range(steps):
        graph = lm_loss(model.with_params(params), next(batches))
        last, g = value_and_grad(graph, "params")
        params = params.zip_map(g, lambda t, gt: t - lr * gt)
    return model.with_params(params), last


warmup_train = sgd_train


def mean_kl(student: ProxyModel, teacher: ProxyModel, dataset: TokenDataset, chunk: int = 64) -> float:
    """Mean per-position KL(student || teacher) over a whole dataset."""
    total, count = 0.0, 0
    for lo in range(0, len(dataset), chunk):
        b = dataset.batch(np.arange(lo, min(lo + chunk, len(dataset))))
        with torch.no_grad():
            total += kl_loss(student, teacher, b).value() * b.size
        count += b.size
    return total / count


def mean_ce(model: ProxyModel, dataset: TokenDataset, chunk: int = 64) -> float:
    total, count = 0.0, 0
    for lo in range(0, len(dataset), chunk):
        b = dataset.batch(np.arange(lo, min(lo + chunk, len(dataset))))
        total += lm_loss(model, b).value() * b.size
        count += b.size
    return total / count


# -- manifests --------------------------------------------------------------
def write_manifest(path: str | Path, cfg: ModelConfig) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in asdict(cfg).items()))


def read_manifest(path: str | Path) -> ModelConfig:
    kv = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
    fields = {k: (v if k == "family" else int(v)) for k, v in kv.items()}
    return ModelConfig(**fields)
