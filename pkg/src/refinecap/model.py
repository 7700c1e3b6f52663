"""Concept-refined Transformer captioner.

Pipeline for one batch::

    X (B,M,D_raw) --proj--> (B,M,D) --encoder--> F (B,M,D)
    F --W0, concat over objects, sigmoid--> v_hat (B,K)
    tokens --embed+pos--> decoder(F) --> H (B,T,D) --out--> z (B,T,V)
    (H, F) --W1,W2,u--> c (B,T,M) --W3, sigmoid--> g (B,T,K)
    o = g * v_hat;  z[..., scatter_index] += o;  log_softmax
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, ModelConfig
from .tensor import ContractError, DimensionError, Tensor

NEG_INF = -1e9


def sinusoid_table(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class Encoded:
    """Per-scene encoder output shared by every decoding step."""

    F: Tensor  # (B, M, D)
    mask: np.ndarray  # (B, M) True where the object is real
    v_hat: Tensor | None  # (B, K), None when refinement is off
    v_logits: Tensor | None = None

    def select(self, rows: np.ndarray) -> "Encoded":
        rows = np.asarray(rows)
        pick = lambda t: None if t is None else T.constant(t.data[rows], dtype=t.dtype)
        return Encoded(pick(self.F), self.mask[rows], pick(self.v_hat), pick(self.v_logits))


class Captioner:
    def __init__(
        self,
        cfg: ModelConfig,
        vocab_size: int,
        scatter_index: Sequence[int],
        seed: int = 0,
        dtype=None,
    ):
        cfg.validate()
        scatter_index = np.asarray(scatter_index, dtype=np.int64)
        if scatter_index.shape != (cfg.K,):
            raise ConfigError(f"scatter index has length {scatter_index.shape[0]}, expected K={cfg.K}")
        if len(set(scatter_index.tolist())) != cfg.K:
            raise ContractError("scatter index is not injective")
        if scatter_index.min() < 0 or scatter_index.max() >= vocab_size:
            raise ContractError("scatter index points outside the caption vocabulary")
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.scatter_index = scatter_index
        self.dtype = np.dtype(dtype or T.get_default_dtype())
        self.training = False
        self._drop_rng = np.random.default_rng([seed, 99])
        self.pos_table = sinusoid_table(cfg.T_max + 1, cfg.D).astype(self.dtype)
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # ------------------------------------------------------------------
    # parameters

    def _add(self, name: str, shape: tuple[int, ...], rng: np.random.Generator, kind: str = "dense") -> None:
        if kind == "zeros":
            data = np.zeros(shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            fan_in = shape[0] if kind == "dense" else shape[-1]
            data = rng.standard_normal(shape) / math.sqrt(fan_in)
        self.params[name] = T.parameter(data.astype(self.dtype), name=name, dtype=self.dtype)

    def _add_linear(self, name: str, d_in: int, d_out: int, rng) -> None:
        self._add(f"{name}.w", (d_in, d_out), rng)
        self._add(f"{name}.b", (d_out,), rng, "zeros")

    def _add_norm(self, name: str, dim: int, rng) -> None:
        self._add(f"{name}.g", (dim,), rng, "ones")
        self._add(f"{name}.b", (dim,), rng, "zeros")

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.cfg
        self._add_linear("proj", c.D_raw, c.D, rng)
        for layer in range(c.N_enc):
            p = f"enc.{layer}"
            for part in ("q", "k", "v", "o"):
                self._add_linear(f"{p}.attn.{part}", c.D, c.D, rng)
            self._add_norm(f"{p}.ln1", c.D, rng)
            self._add_linear(f"{p}.ffn1", c.D, c.ffn_width, rng)
            self._add_linear(f"{p}.ffn2", c.ffn_width, c.D, rng)
            self._add_norm(f"{p}.ln2", c.D, rng)
        self._add("embed", (self.vocab_size, c.D), rng, "rows")
        for layer in range(c.N_dec):
            p = f"dec.{layer}"
            for part in ("q", "k", "v", "o"):
                self._add_linear(f"{p}.self.{part}", c.D, c.D, rng)
            self._add_norm(f"{p}.ln1", c.D, rng)
            for part in ("q", "k", "v", "o"):
                self._add_linear(f"{p}.cross.{part}", c.D, c.D, rng)
            self._add_norm(f"{p}.ln2", c.D, rng)
            self._add_linear(f"{p}.ffn1", c.D, c.ffn_width, rng)
            self._add_linear(f"{p}.ffn2", c.ffn_width, c.D, rng)
            self._add_norm(f"{p}.ln3", c.D, rng)
        self._add_linear("out", c.D, self.vocab_size, rng)
        # concept layer and decoder-guided gate; W1, W2, W3 in (out, in) layout
        self._add("W0", (c.D, c.K // c.M), rng)
        self._add("W1", (c.D_prime, c.D), rng, "rows")
        self._add("W2", (c.D_prime, c.D), rng, "rows")
        self._add("u", (c.D_prime,), rng, "rows")
        self._add("W3", (c.K, c.M), rng, "rows")

    REFINE_PARAMS = ("W0", "W1", "W2", "u", "W3")

    def parameters(self, group: str = "all") -> list[Tensor]:
        """Trainable tensors reachable from the loss of the given phase.

        ``all``: captioning loss (refinement params only when enabled).
        ``tag``: feature projection, encoder and W0.
        """
        if group == "tag":
            return [p for n, p in self.params.items() if n.startswith(("proj.", "enc.")) or n == "W0"]
        if group != "all":
            raise ValueError(f"unknown parameter group {group!r}")
        if self.cfg.refinement_enabled:
            return list(self.params.values())
        return [p for n, p in self.params.items() if n not in self.REFINE_PARAMS]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, p in self.params.items():
            arr = np.asarray(state[n])
            if arr.shape != p.shape:
                raise DimensionError(f"{n}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = arr.astype(self.dtype).copy()

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        save_checkpoint(path, self.state_dict())
        meta = {
            "model": asdict(self.cfg),
            "vocab_size": self.vocab_size,
            "scatter_index": self.scatter_index.tolist(),
        }
        if extra:
            meta.update(extra)
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path, dtype=np.float32) -> tuple["Captioner", dict]:
        meta = json.loads(Path(str(path) + ".json").read_text())
        cfg = ModelConfig(**meta["model"])
        model = cls(cfg, meta["vocab_size"], meta["scatter_index"], dtype=dtype)
        model.load_state_dict(load_checkpoint(path))
        return model, meta

    def train(self, mode: bool = True) -> "Captioner":
        self.training = mode
        return self

    def eval(self) -> "Captioner":
        return self.train(False)

    # ------------------------------------------------------------------
    # building blocks

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _linear(self, name: str, x: Tensor) -> Tensor:
        return T.matmul(x, self._p(f"{name}.w")) + self._p(f"{name}.b")

    def _norm(self, name: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, eps=self.cfg.ln_eps) * self._p(f"{name}.g") + self._p(f"{name}.b")

    def _dropout(self, x: Tensor) -> Tensor:
        if not self.training or self.cfg.dropout_rate == 0.0:
            return x
        seed = int(self._drop_rng.integers(2**63))
        return T.dropout(x, self.cfg.dropout_rate, seed)

    def _attention(self, name: str, q_in: Tensor, kv_in: Tensor, blocked: np.ndarray, keep: dict | None) -> Tensor:
        """Multi-head scaled dot-product attention; ``blocked`` is True where a key is hidden."""
        B, Tq, D = q_in.shape
        Tk = kv_in.shape[1]
        h = self.cfg.heads
        dk = D // h

        def heads(x: Tensor, length: int) -> Tensor:
            return x.reshape(B, length, h, dk).transpose(0, 2, 1, 3)

        q = heads(self._linear(f"{name}.q", q_in), Tq)
        k = heads(self._linear(f"{name}.k", kv_in), Tk)
        v = heads(self._linear(f"{name}.v", kv_in), Tk)
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk))
        scores = T.mask_fill(scores, blocked, NEG_INF)
        attn = T.softmax(scores)
        if keep is not None:
            keep.setdefault(name, attn.data)
        ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, Tq, D)
        return self._linear(f"{name}.o", ctx)

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        return self._linear(f"{prefix}.ffn2", T.relu(self._linear(f"{prefix}.ffn1", x)))

    # ------------------------------------------------------------------
    # the five stages

    def project_features(self, X: np.ndarray, mask: np.ndarray) -> Tensor:
        X = np.asarray(X)
        if X.ndim != 3 or X.shape[2] != self.cfg.D_raw:
            raise DimensionError(f"project_features: expected (B, M, {self.cfg.D_raw}) features, got {X.shape}")
        out = self._linear("proj", T.constant(X, dtype=self.dtype))
        return T.mask_fill(out, ~mask[..., None], 0.0)

    def encode(self, P: Tensor, mask: np.ndarray, keep: dict | None = None) -> Tensor:
        """Relational encoder over the object set; no positional signal."""
        blocked = ~mask[:, None, None, :]
        x = P
        for layer in range(self.cfg.N_enc):
            p = f"enc.{layer}"
            x = self._norm(f"{p}.ln1", x + self._dropout(self._attention(f"{p}.attn", x, x, blocked, keep)))
            x = self._norm(f"{p}.ln2", x + self._dropout(self._ffn(p, x)))
        return x

    def concept_logits(self, F: Tensor, mask: np.ndarray) -> Tensor:
        """v = f_1 W0 || ... || f_M W0, padded objects contributing zero blocks."""
        B, M, _ = F.shape
        per_obj = T.mask_fill(T.matmul(F, self._p("W0")), ~mask[..., None], 0.0)
        # row-major reshape of (B, M, K/M) is the concatenation over m
        return per_obj.reshape(B, self.cfg.K)

    def concept_probs(self, F: Tensor, mask: np.ndarray) -> Tensor:
        return T.sigmoid(self.concept_logits(F, mask))

    def encode_scene(self, X: np.ndarray, mask: np.ndarray, keep: dict | None = None) -> Encoded:
        mask = np.asarray(mask, dtype=bool)
        F = self.encode(self.project_features(X, mask), mask, keep)
        if not self.cfg.refinement_enabled:
            return Encoded(F, mask, None)
        v = self.concept_logits(F, mask)
        return Encoded(F, mask, T.sigmoid(v), v)

    def decode_hidden(self, tokens: np.ndarray, enc: Encoded, keep: dict | None = None) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        B, L = tokens.shape
        if L > self.cfg.T_max + 1:
            raise ContractError(f"decoder input of length {L} exceeds T_max + 1 = {self.cfg.T_max + 1}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise ContractError("token id outside the caption vocabulary")
        x = T.embedding(self._p("embed"), tokens) * math.sqrt(self.cfg.D) + T.constant(self.pos_table[:L], dtype=self.dtype)
        x = self._dropout(x)
        causal = np.triu(np.ones((L, L), dtype=bool), k=1)[None, None]
        cross_blocked = ~enc.mask[:, None, None, :]
        for layer in range(self.cfg.N_dec):
            p = f"dec.{layer}"
            x = self._norm(f"{p}.ln1", x + self._dropout(self._attention(f"{p}.self", x, x, causal, keep)))
            x = self._norm(f"{p}.ln2", x + self._dropout(self._attention(f"{p}.cross", x, enc.F, cross_blocked, keep)))
            x = self._norm(f"{p}.ln3", x + self._dropout(self._ffn(p, x)))
        return x

    def output_logits(self, H: Tensor) -> Tensor:
        return self._linear("out", H)

    def guided_gate(self, H: Tensor, F: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """c[b,t,m] = u . tanh(W1 h_t + W2 f_m) over real objects; g = sigmoid(W3 c)."""
        B, L, _ = H.shape
        M = F.shape[1]
        dp = self.cfg.D_prime
        a = T.matmul(H, self._p("W1").transpose(1, 0)).reshape(B, L, 1, dp)
        b = T.matmul(F, self._p("W2").transpose(1, 0)).reshape(B, 1, M, dp)
        s = T.tanh(a + b)
        c = T.matmul(s, self._p("u").reshape(dp, 1)).reshape(B, L, M)
        c = T.mask_fill(c, ~mask[:, None, :], 0.0)
        g = T.sigmoid(T.matmul(c, self._p("W3").transpose(1, 0)))
        return c, g

    def refine(self, z: Tensor, g: Tensor, v_hat: Tensor) -> tuple[Tensor, Tensor]:
        """o = g * v_hat, then add o[k] onto logit scatter_index[k]."""
        B, K = v_hat.shape
        o = g * v_hat.reshape(B, 1, K)
        return T.index_scatter_add(z, o, self.scatter_index), o

    def logits(self, tokens: np.ndarray, enc: Encoded, keep: dict | None = None) -> Tensor:
        return self.logits_from_hidden(self.decode_hidden(tokens, enc, keep), enc, keep)

    def logits_from_hidden(self, H: Tensor, enc: Encoded, keep: dict | None = None) -> Tensor:
        z = self.output_logits(H)
        if keep is not None:
            keep.update(H=H.data, z=z.data)
        if not self.cfg.refinement_enabled:
            return z
        c, g = self.guided_gate(H, enc.F, enc.mask)
        refined, o = self.refine(z, g, enc.v_hat)
        if keep is not None:
            keep.update(c=c.data, g=g.data, o=o.data, refined=refined.data)
        return refined

    def forward(self, tokens: np.ndarray, X: np.ndarray, mask: np.ndarray, keep: dict | None = None) -> Tensor:
        """Log-probabilities of shape (B, L, V) for every decoder position."""
        enc = self.encode_scene(X, mask, keep)
        if keep is not None:
            keep["F"] = enc.F.data
            if enc.v_hat is not None:
                keep["v_hat"] = enc.v_hat.data
        return T.log_softmax(self.logits(tokens, enc, keep))

    # ------------------------------------------------------------------
    # decoding interface

    def prepare(self, X: np.ndarray, mask: np.ndarray) -> Encoded:
        with T.no_grad():
            return self.encode_scene(X, mask)

    def next_log_probs(self, enc: Encoded, prefixes: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
        """Log-probabilities of the token following each prefix.

        ``rows[i]`` names the scene in ``enc`` that prefix ``i`` belongs to.
        """
        prefixes = np.asarray(prefixes, dtype=np.int64)
        sub = enc if rows is None else enc.select(rows)
        with T.no_grad():
            H = self.decode_hidden(prefixes, sub)
            last = T.constant(H.data[:, -1:, :], dtype=self.dtype)
            return T.log_softmax(self.logits_from_hidden(last, sub)).data[:, 0, :]
