"""scikit-learn style wrapper: ``fit`` runs the two-stage pipeline, ``predict`` solves chains."""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import policy_model as pm
from .task_env import ANS, Problem, is_digit, parse_chain, parse_prompt, verify
from .trainer import TrainConfig, Trainer, evaluate, run_training

_FIELDS = tuple(f.name for f in dataclasses.fields(TrainConfig))


def check_problems(X) -> list[Problem]:
    """Accept chain strings (``"3 +4 ×2"``), token prompts or :class:`Problem` objects."""
    if X is None:
        raise ValueError("X is required")
    if isinstance(X, (str, Problem)):
        X = [X]
    out = []
    for i, x in enumerate(X):
        if isinstance(x, Problem):
            out.append(x)
        elif isinstance(x, str):
            try:
                out.append(parse_chain(x))
            except ValueError as exc:
                raise ValueError(f"X[{i}]: {exc}") from None
        else:
            try:
                out.append(parse_prompt([int(t) for t in x]))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"X[{i}] is not a chain string, prompt or Problem: {exc}") from None
    if not out:
        raise ValueError("X is empty")
    return out


def check_answers(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"y must have shape ({n},), got {y.shape}")
    if not np.all((y >= 0) & (y <= 9)) or not np.issubdtype(y.dtype, np.integer):
        raise ValueError("answers must be integers in 0..9")
    return y


class IOPGSPO(BaseEstimator):
    """Train a tiny chain-arithmetic policy with IOP-GSPO (or the GSPO baseline).

    Every :class:`~iopgspo.trainer.TrainConfig` field not exposed here can be
    passed through ``config``.  Problems are generated internally, so ``fit``
    takes no data.
    """

    def __init__(self, method: str = "iop", seed: int = 0, token_budget: int = 1_100_000, K: float = 4.0,
                 G_rep: int = 4, group_size: int = 16, lambda_rep: float = 0.2, lambda_edit: float = 0.3,
                 beta_kl: float = 0.002, lr: float = 3e-4, config: dict | None = None,
                 cache_dir: str | None = None, out_dir: str | None = None):
        self.method = method
        self.seed = seed
        self.token_budget = token_budget
        self.K = K
        self.G_rep = G_rep
        self.group_size = group_size
        self.lambda_rep = lambda_rep
        self.lambda_edit = lambda_edit
        self.beta_kl = beta_kl
        self.lr = lr
        self.config = config
        self.cache_dir = cache_dir
        self.out_dir = out_dir

    def _train_config(self) -> TrainConfig:
        extra = dict(self.config or {})
        unknown = sorted(set(extra) - set(_FIELDS))
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        params = {k: v for k, v in self.get_params().items() if k in _FIELDS}
        return TrainConfig(**{**extra, **params})

    def fit(self, X=None, y=None) -> "IOPGSPO":
        cfg = self._train_config()
        tr: Trainer = run_training(cfg, self.out_dir, self.cache_dir)
        self.model_ = tr.model
        self.config_ = cfg
        self.history_ = [dataclasses.asdict(r) for r in tr.records]
        self.n_steps_ = tr.step
        self.tokens_ = tr.tokens
        return self

    @classmethod
    def from_checkpoint(cls, path: str, **params) -> "IOPGSPO":
        est = cls(**params)
        est.model_, _, _ = pm.load_checkpoint(path)
        est.config_ = est._train_config()
        return est

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit() before using this estimator")

    def generate(self, X, temperature: float | None = None, seed: int = 0) -> list[tuple[int, ...]]:
        """Raw solution tokens; greedy unless ``temperature`` is given."""
        self._check_fitted()
        probs = check_problems(X)
        greedy = temperature is None
        outs = pm.sample(self.model_, [p.prompt for p in probs], temperature or 1.0, self.config_.max_len,
                         seed=seed, greedy=greedy)
        return [tuple(o[0]) for o in outs]

    def predict(self, X) -> np.ndarray:
        """Greedy answer digit per problem, -1 when no answer can be parsed."""
        probs = check_problems(X)
        out = np.full(len(probs), -1, dtype=np.int64)
        for i, toks in enumerate(self.generate(probs)):
            out[i] = _answer(toks)
        return out

    def score(self, X=None, y=None) -> float:
        """Greedy accuracy on ``X`` (answers default to the true ones); avg@k on fresh problems if ``X`` is None."""
        self._check_fitted()
        if X is None:
            cfg = self.config_
            return evaluate(self.model_, cfg.eval_problems, cfg.final_eval_samples, cfg.eval_seed,
                            cfg.temperature, cfg.max_len, cfg.min_chain, cfg.max_chain)
        probs = check_problems(X)
        if y is None:
            return float(np.mean([verify(p, t) for p, t in zip(probs, self.generate(probs))]))
        y = check_answers(y, len(probs))
        return float(np.mean(self.predict(probs) == y))


def _answer(tokens: Sequence[int]) -> int:
    toks = list(tokens)
    if ANS not in toks:
        return -1
    i = toks.index(ANS)
    return int(toks[i + 1]) if i + 1 < len(toks) and is_digit(toks[i + 1]) else -1
