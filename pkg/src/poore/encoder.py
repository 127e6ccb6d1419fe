"""Small bidirectional self-attention encoder with a two-layer classifier head.

The encoder f maps a padded batch of token ids to the final hidden state of the
CLS position; the head g maps that to class logits.  A linear token-prediction
head over the final hidden states serves the self-supervised keyword loss.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import losses
from .data import PAD_ID
from .errors import ConfigError, NumericError

ATTENTION_MODES = ("cls_query", "all_query")


@dataclass
class EncoderConfig:
    vocab_size: int
    num_classes: int
    depth: int = 2
    heads: int = 2
    model_dim: int = 64
    mlp_dim: int = 128
    max_len: int = 32
    dropout: float = 0.1
    embed_init_std: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        for name in ("vocab_size", "num_classes", "depth", "heads", "model_dim", "mlp_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


@dataclass
class EncoderOutput:
    cls_embedding: torch.Tensor        # (B, d), f(x)
    logits: torch.Tensor               # (B, C), g(f(x))
    attention: torch.Tensor            # (B, H, T), final-layer rows of the CLS query
    attention_full: torch.Tensor       # (B, H, T, T), final layer
    hidden_states: list[torch.Tensor] = field(default_factory=list)  # embeddings, then each layer
    pad_mask: torch.Tensor | None = None  # (B, T), True at PAD


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, pad_mask):
        B, T, D = x.shape
        q, k, v = self.qkv(x).view(B, T, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, T, D)
        return self.proj(out), attn


class EncoderBlock(nn.Module):
    """Post-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_dim: int, dropout: float):
        super().__init__()
        self.attn = SelfAttention(dim, heads)
        self.ln1 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, mlp_dim)
        self.ff2 = nn.Linear(mlp_dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.dropout = dropout

    def forward(self, x, pad_mask, train_mode: bool):
        a, attn = self.attn(x, pad_mask)
        x = self.ln1(x + F.dropout(a, self.dropout, train_mode))
        h = self.ff2(F.gelu(self.ff1(x)))
        x = self.ln2(x + F.dropout(h, self.dropout, train_mode))
        return x, attn


class TextClassifier(nn.Module):
    """g∘f with learned absolute positions and a token-prediction head."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            d = cfg.model_dim
            self.tok_emb = nn.Embedding(cfg.vocab_size, d)
            self.pos_emb = nn.Embedding(cfg.max_len, d)
            self.emb_ln = nn.LayerNorm(d)
            self.blocks = nn.ModuleList(
                EncoderBlock(d, cfg.heads, cfg.mlp_dim, cfg.dropout) for _ in range(cfg.depth))
            self.head = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, cfg.num_classes))
            self.token_head = nn.Linear(d, cfg.vocab_size)
            nn.init.normal_(self.tok_emb.weight, std=cfg.embed_init_std)
            nn.init.normal_(self.pos_emb.weight, std=cfg.embed_init_std)

    def reset_token_head(self, seed: int) -> None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.token_head.reset_parameters()

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        """Token embeddings only (no positions); the ODIN perturbation acts here."""
        self._check_ids(ids)
        return self.tok_emb(ids)

    def _check_ids(self, ids: torch.Tensor) -> None:
        if ids.dim() != 2:
            raise ValueError(f"expected a (batch, length) id tensor, got shape {tuple(ids.shape)}")
        if ids.shape[1] > self.cfg.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len {self.cfg.max_len}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size):
            raise ValueError(f"token ids must lie in [0, {self.cfg.vocab_size})")

    def forward(self, ids: torch.Tensor, train_mode: bool = False,
                token_embeds: torch.Tensor | None = None) -> EncoderOutput:
        self._check_ids(ids)
        pad_mask = ids == PAD_ID
        if token_embeds is None:
            token_embeds = self.tok_emb(ids)
        pos = torch.arange(ids.shape[1], device=ids.device)
        x = self.emb_ln(token_embeds + self.pos_emb(pos)[None])
        x = F.dropout(x, self.cfg.dropout, train_mode)
        hidden = [x]
        attn = None
        for block in self.blocks:
            x, attn = block(x, pad_mask, train_mode)
            hidden.append(x)
        cls = x[:, 0]
        logits = self.head(F.dropout(cls, self.cfg.dropout, train_mode))
        return EncoderOutput(cls, logits, attn[:, :, 0, :], attn, hidden, pad_mask)

    def token_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.token_head(hidden)


def attention_received(out: EncoderOutput, mode: str = "cls_query") -> torch.Tensor:
    """Per-position attention a_i from the final layer, averaged over heads.

    ``cls_query`` uses the CLS row only; ``all_query`` also averages over every
    non-PAD query position.  Returns (B, T) with zeros at PAD.
    """
    if mode == "cls_query":
        return out.attention.mean(dim=1)
    if mode == "all_query":
        per_query = out.attention_full.mean(dim=1)  # (B, Tq, Tk)
        if out.pad_mask is None:
            return per_query.mean(dim=1)
        valid = (~out.pad_mask).to(per_query.dtype)
        return (per_query * valid[:, :, None]).sum(dim=1) / valid.sum(dim=1, keepdim=True)
    raise ValueError(f"attention mode must be one of {ATTENTION_MODES}")


@dataclass
class ModelState:
    model: TextClassifier
    optimizer: torch.optim.Optimizer
    step: int = 0


def make_optimizer(model: nn.Module, lr: float, weight_decay: float = 0.01) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def init_state(cfg: EncoderConfig, lr: float = 1e-3, weight_decay: float = 0.01) -> ModelState:
    model = TextClassifier(cfg)
    return ModelState(model, make_optimizer(model, lr, weight_decay))


def train_step(state: ModelState, batch: losses.TrainBatch,
               loss_spec: losses.LossSpec) -> tuple[ModelState, float, dict[str, float]]:
    """One AdamW step on the composite loss named by ``loss_spec``.

    Raises NumericError naming the offending term when any component or the
    total is non-finite; the parameters are left untouched in that case.
    """
    state.optimizer.zero_grad(set_to_none=True)
    comps = losses.compute_components(state.model, batch, loss_spec)
    try:
        total = losses.total_loss(loss_spec.weights, comps)
    except NumericError as err:
        err.step = state.step
        raise
    total.backward()
    state.optimizer.step()
    state.step += 1
    for name, p in state.model.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericError(f"parameter {name} became non-finite", term=name, step=state.step)
    logged = {k: float(v.detach()) for k, v in comps.items()}
    logged["total"] = float(total.detach())
    return state, logged["total"], logged


CHECKPOINT_FORMAT = "poore-checkpoint-v1"


def save_checkpoint(model: TextClassifier, path: str | Path, meta: dict | None = None) -> None:
    torch.save({"format": CHECKPOINT_FORMAT, "config": asdict(model.cfg),
                "state_dict": model.state_dict(), "meta": meta or {}}, path)


def load_checkpoint(path: str | Path) -> tuple[TextClassifier, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    model = TextClassifier(EncoderConfig(**blob["config"]))
    dtype = next(iter(blob["state_dict"].values())).dtype
    model.to(dtype)
    model.load_state_dict(blob["state_dict"])
    return model, blob["meta"]
