"""Tiny shared-parameter autoregressive model used for both policy and repair mode.

Everything runs in float64 on CPU.  Policy mode and repair mode are the same
network; they differ only in the context layout (repair contexts start with
``REPAIR_INSTR``).
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .task_env import EOS, PAD, VOCAB_SIZE, ContextOverflowError

DTYPE = torch.float64
MAGIC = b"IOPCKPT1"


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Architecture:
    vocab_size: int = VOCAB_SIZE
    context_len: int = 96
    width: int = 48
    n_layers: int = 2
    n_heads: int = 4
    kind: str = "gru"  # "attention" or "gru"

    def __post_init__(self):
        if self.kind not in ("attention", "gru"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.kind == "attention" and self.width % self.n_heads:
            raise ValueError("width must be divisible by n_heads")
        if self.vocab_size > 64:
            raise ValueError("vocab_size must be <= 64")


class _Block(nn.Module):
    def __init__(self, width: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(width, dtype=DTYPE)
        self.qkv = nn.Linear(width, 3 * width, dtype=DTYPE)
        self.proj = nn.Linear(width, width, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(width, dtype=DTYPE)
        self.fc = nn.Linear(width, 4 * width, dtype=DTYPE)
        self.out = nn.Linear(4 * width, width, dtype=DTYPE)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        B, T, C = h.shape
        q, k, v = self.qkv(self.ln1(h)).split(C, dim=2)
        q, k, v = (t.view(B, T, self.n_heads, C // self.n_heads).transpose(1, 2) for t in (q, k, v))
        att = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        h = h + self.proj(att.transpose(1, 2).reshape(B, T, C))
        return h + self.out(F.gelu(self.fc(self.ln2(h))))


class TinyLM(nn.Module):
    """Causal sequence model; ``forward`` maps token ids (B, T) to logits (B, T, V)."""

    def __init__(self, arch: Architecture):
        super().__init__()
        self.arch = arch
        self.tok = nn.Embedding(arch.vocab_size, arch.width, dtype=DTYPE)
        if arch.kind == "attention":
            self.pos = nn.Embedding(arch.context_len, arch.width, dtype=DTYPE)
            self.blocks = nn.ModuleList(_Block(arch.width, arch.n_heads) for _ in range(arch.n_layers))
        else:
            self.rnn = nn.GRU(arch.width, arch.width, num_layers=arch.n_layers, batch_first=True, dtype=DTYPE)
        self.ln_f = nn.LayerNorm(arch.width, dtype=DTYPE)
        self.head = nn.Linear(arch.width, arch.vocab_size, dtype=DTYPE)

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        T = idx.shape[1]
        if T > self.arch.context_len:
            raise ContextOverflowError(f"sequence of length {T} exceeds context {self.arch.context_len}")
        h = self.tok(idx)
        if self.arch.kind == "attention":
            h = h + self.pos(torch.arange(T))
            for blk in self.blocks:
                h = blk(h)
        else:
            h, _ = self.rnn(h)
        return self.head(self.ln_f(h))

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init(seed: int, arch: Architecture = Architecture()) -> TinyLM:
    """Deterministic init: weights ~ N(0, 0.02^2), biases 0, norm gains 1."""
    gen = torch.Generator().manual_seed(int(seed))
    model = TinyLM(arch)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "ln" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif "bias" in name:
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * 0.02)
    return model


def snapshot(model: TinyLM) -> TinyLM:
    """Frozen copy (old policy or KL reference)."""
    snap = copy.deepcopy(model)
    for p in snap.parameters():
        p.requires_grad_(False)
    snap.eval()
    return snap


def get_flat(model: TinyLM) -> np.ndarray:
    return torch.nn.utils.parameters_to_vector(model.parameters()).detach().numpy().copy()


def set_flat(model: TinyLM, flat: np.ndarray) -> None:
    flat = np.asarray(flat, dtype=np.float64)
    if not np.all(np.isfinite(flat)):
        raise NonFiniteError("refusing to load non-finite parameters")
    with torch.no_grad():
        torch.nn.utils.vector_to_parameters(torch.from_numpy(flat.copy()), model.parameters())


# -- batched evaluation ------------------------------------------------------

def _pad(rows: Sequence[Sequence[int]]) -> torch.Tensor:
    width = max(len(r) for r in rows)
    out = torch.full((len(rows), width), PAD, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, :len(r)] = torch.as_tensor(list(r), dtype=torch.long)
    return out


def batch_logprobs(model: TinyLM, contexts: Sequence[Sequence[int]],
                   tokens: Sequence[Sequence[int]], with_dists: bool = False):
    """Per-token log-probabilities of ``tokens[b]`` given ``contexts[b]``.

    Returns a (B, T) tensor padded with zeros and a (B, T) 0/1 validity mask.
    With ``with_dists`` the full (B, T, V) log-distributions are returned too.
    Gradients flow into ``model``.
    """
    full = [list(c) + list(t) for c, t in zip(contexts, tokens)]
    if any(len(c) == 0 for c in contexts):
        raise ValueError("context must be non-empty")
    idx = _pad(full)
    logp_all = F.log_softmax(model(idx), dim=-1)
    T = max((len(t) for t in tokens), default=0)
    B = len(full)
    pos = torch.zeros((B, max(T, 1)), dtype=torch.long)
    tgt = torch.full((B, max(T, 1)), 0, dtype=torch.long)
    valid = torch.zeros((B, max(T, 1)), dtype=DTYPE)
    for b, (c, t) in enumerate(zip(contexts, tokens)):
        n = len(t)
        if n:
            pos[b, :n] = torch.arange(len(c) - 1, len(c) - 1 + n)
            tgt[b, :n] = torch.as_tensor(list(t), dtype=torch.long)
            valid[b, :n] = 1.0
    rows = torch.arange(B).unsqueeze(1)
    dists = logp_all[rows, pos]  # (B, T, V)
    lp = dists.gather(2, tgt.unsqueeze(2)).squeeze(2) * valid
    if with_dists:
        return lp, valid, dists
    return lp, valid


def per_token_logprobs(model: TinyLM, context: Sequence[int], tokens: Sequence[int]) -> np.ndarray:
    with torch.no_grad():
        lp, _ = batch_logprobs(model, [context], [tokens])
    return lp[0, :len(tokens)].numpy().copy()


def next_token_distribution(model: TinyLM, context: Sequence[int]) -> np.ndarray:
    with torch.no_grad():
        logits = model(_pad([context]))[0, -1]
    return torch.softmax(logits, dim=-1).numpy()


def sample(model: TinyLM, contexts: Sequence[Sequence[int]], temperature: float = 1.0,
           max_len: int = 24, seed: int = 0, greedy: bool = False,
           prefixes: Sequence[Sequence[int]] | None = None) -> list[tuple[list[int], list[float]]]:
    """Batched autoregressive sampling until EOS or ``max_len`` generated tokens.

    Returned log-probabilities are from the untempered distribution.  When
    ``prefixes`` is given, generation continues after each forced prefix and
    the prefix tokens count toward ``max_len`` (their log-probs are included).
    """
    if temperature <= 0 and not greedy:
        raise ValueError("temperature must be > 0 (use greedy=True for argmax)")
    gen = torch.Generator().manual_seed(int(seed) % (2**63))
    B = len(contexts)
    prefixes = [list(p) for p in prefixes] if prefixes is not None else [[] for _ in range(B)]
    outs = [list(p) for p in prefixes]
    lps: list[list[float]] = [[] for _ in range(B)]
    if any(prefixes):
        pre_lp = per_batch_prefix_logprobs(model, contexts, prefixes)
        lps = [list(v) for v in pre_lp]
    done = [len(o) >= max_len or (len(o) > 0 and o[-1] == EOS) for o in outs]
    ctx_len = model.arch.context_len
    if max(len(c) + len(o) for c, o in zip(contexts, outs)) > ctx_len:
        raise ContextOverflowError("context exceeds the model window")
    if model.arch.kind == "gru":
        _sample_recurrent(model, contexts, outs, lps, done, temperature, max_len, gen, greedy)
        return list(zip(outs, lps))
    with torch.no_grad():
        while not all(done):
            active = [b for b in range(B) if not done[b]]
            rows = [list(contexts[b]) + outs[b] for b in active]
            if max(len(r) for r in rows) > ctx_len:
                raise ContextOverflowError("generation would exceed the context window")
            logits = model(_pad(rows))
            last = torch.as_tensor([len(r) - 1 for r in rows])
            step_logits = logits[torch.arange(len(active)), last]
            logp = F.log_softmax(step_logits, dim=-1)
            if greedy:
                nxt = step_logits.argmax(dim=-1)
            else:
                probs = torch.softmax(step_logits / temperature, dim=-1)
                nxt = torch.multinomial(probs, 1, generator=gen).squeeze(1)
            for k, b in enumerate(active):
                t = int(nxt[k])
                outs[b].append(t)
                lps[b].append(float(logp[k, t]))
                if t == EOS or len(outs[b]) >= max_len:
                    done[b] = True
    return list(zip(outs, lps))


def _sample_recurrent(model, contexts, outs, lps, done, temperature, max_len, gen, greedy):
    # carry the GRU state instead of re-reading the whole prefix every step
    B = len(contexts)
    rows = [list(contexts[b]) + outs[b] for b in range(B)]
    lengths = torch.as_tensor([len(r) for r in rows])
    with torch.no_grad():
        emb = model.tok(_pad(rows))
        packed = nn.utils.rnn.pack_padded_sequence(emb, lengths, batch_first=True, enforce_sorted=False)
        _, h = model.rnn(packed)
        top = h[-1]
        active = [b for b in range(B) if not done[b]]
        while active:
            for b in active:
                if len(contexts[b]) + len(outs[b]) >= model.arch.context_len:
                    raise ContextOverflowError("generation would exceed the context window")
            idx = torch.as_tensor(active)
            step_logits = model.head(model.ln_f(top[idx]))
            logp = F.log_softmax(step_logits, dim=-1)
            if greedy:
                nxt = step_logits.argmax(dim=-1)
            else:
                probs = torch.softmax(step_logits / temperature, dim=-1)
                nxt = torch.multinomial(probs, 1, generator=gen).squeeze(1)
            for k, b in enumerate(active):
                t = int(nxt[k])
                outs[b].append(t)
                lps[b].append(float(logp[k, t]))
                if t == EOS or len(outs[b]) >= max_len:
                    done[b] = True
            out, h_new = model.rnn(model.tok(nxt).unsqueeze(1), h[:, idx])
            h = h.clone()
            h[:, idx] = h_new
            top = h[-1]
            active = [b for b in active if not done[b]]


def per_batch_prefix_logprobs(model, contexts, prefixes) -> list[list[float]]:
    idx = [i for i, p in enumerate(prefixes) if p]
    res: list[list[float]] = [[] for _ in prefixes]
    if idx:
        with torch.no_grad():
            lp, _ = batch_logprobs(model, [contexts[i] for i in idx], [prefixes[i] for i in idx])
        for k, i in enumerate(idx):
            res[i] = lp[k, :len(prefixes[i])].tolist()
    return res


def token_kl(model: TinyLM, ref: TinyLM, contexts: Sequence[Sequence[int]],
             tokens: Sequence[Sequence[int]]) -> torch.Tensor:
    """Mean over positions of the exact categorical KL(model || ref)."""
    _, valid, dists = batch_logprobs(model, contexts, tokens, with_dists=True)
    with torch.no_grad():
        _, _, ref_dists = batch_logprobs(ref, contexts, tokens, with_dists=True)
    kl = (dists.exp() * (dists - ref_dists)).sum(-1)
    n = valid.sum()
    if n == 0:
        return torch.zeros((), dtype=DTYPE)
    return (kl * valid).sum() / n


def gradient(model: TinyLM, objective: Callable[[TinyLM], torch.Tensor]) -> np.ndarray:
    """Reverse-mode gradient of a scalar objective with respect to the flat parameters."""
    model.zero_grad(set_to_none=True)
    value = objective(model)
    if not torch.isfinite(value):
        raise NonFiniteError(f"objective value is {float(value.detach())}")
    params = list(model.parameters())
    if not value.requires_grad:
        return np.zeros(sum(p.numel() for p in params))
    grads = torch.autograd.grad(value, params, allow_unused=True)
    flat = []
    for (name, p), g in zip(model.named_parameters(), grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.all(torch.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {name}")
        flat.append(g.reshape(-1))
    return torch.cat(flat).numpy().copy()


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 20


def apply_update(model: TinyLM, grad: np.ndarray, state: AdamState,
                 cfg: AdamConfig = AdamConfig(), maximize: bool = False) -> bool:
    """One AdamW step with linear warmup.  Returns False (and leaves params intact) on NaN."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        return False
    if maximize:
        grad = -grad
    theta = get_flat(model)
    b1, b2 = cfg.betas
    t = state.step + 1
    lr = cfg.lr * min(1.0, t / cfg.warmup_steps) if cfg.warmup_steps > 0 else cfg.lr
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    new = theta * (1 - lr * cfg.weight_decay) - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    if not np.all(np.isfinite(new)):
        return False
    set_flat(model, new)
    state.m, state.v, state.step = m, v, t
    return True


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path: str | Path, model: TinyLM, state: AdamState | None = None,
                    step: int = 0, seed: int = 0, extra: dict | None = None) -> None:
    """Header record then little-endian float64 parameters (and Adam moments when present)."""
    flat = get_flat(model)
    header = {
        "arch": asdict(model.arch), "step": step, "seed": seed, "n_params": int(flat.size),
        "has_moments": state is not None, "adam_step": state.step if state else 0,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(flat.astype("<f8").tobytes())
        if state is not None:
            fh.write(np.asarray(state.m, dtype="<f8").tobytes())
            fh.write(np.asarray(state.v, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[TinyLM, AdamState | None, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        n = header["n_params"]
        flat = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64)
        state = None
        if header["has_moments"]:
            m = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64)
            v = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64)
            state = AdamState(m, v, header["adam_step"])
    model = TinyLM(Architecture(**header["arch"]))
    set_flat(model, flat)
    return model, state, header

