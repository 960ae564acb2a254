"""Scaled-down late-fusion navigation agent.

Three unimodal encoders (text, panorama, history) feed a cross-modal
fusion transformer that scores move candidates. The instruction encoder
consumes the dual-level form [CLS] + instruction + extracted landmark
words, with a configurable separation strategy between the two parts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import Tensor, concat, gather_rows, layer_norm, linear, masked_softmax, stack
from .numerics.functional import softmax
from .worldsim import NOUN_IDS, NUM_FEATURES, VOCAB, Observation

SEPARATION_MODES = ("mutual", "separate", "independent")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    text_layers: int = 2
    history_layers: int = 1
    fusion_layers: int = 2
    heads: int = 4
    vocab_size: int = len(VOCAB)
    num_features: int = NUM_FEATURES
    dropout: float = 0.1
    max_len: int = 64
    max_steps: int = 16
    separation: str = "mutual"
    ffn_mult: int = 2
    dtype: str = "float64"

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError("embedding dim must be divisible by the head count")
        if self.separation not in SEPARATION_MODES:
            raise ValueError(f"separation must be one of {SEPARATION_MODES}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def cls_id(self) -> int:
        return self.vocab_size

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


def extract_landmarks(instruction: Sequence[int],
                      lexicon: frozenset[int] = NOUN_IDS) -> list[int]:
    """All lexicon members of the instruction, occurrence order, duplicates kept."""
    if not lexicon:
        raise ValueError("lexicon must be nonempty")
    return [w for w in instruction if w in lexicon]


def _block(prefix: str, d: int, ffn: int) -> list[tuple[str, tuple[int, ...], int]]:
    return [
        (f"{prefix}.ln1.gain", (d,), 0), (f"{prefix}.ln1.bias", (d,), -1),
        (f"{prefix}.attn.wq", (d, d), d), (f"{prefix}.attn.bq", (d,), -1),
        (f"{prefix}.attn.wk", (d, d), d), (f"{prefix}.attn.bk", (d,), -1),
        (f"{prefix}.attn.wv", (d, d), d), (f"{prefix}.attn.bv", (d,), -1),
        (f"{prefix}.attn.wo", (d, d), d), (f"{prefix}.attn.bo", (d,), -1),
        (f"{prefix}.ln2.gain", (d,), 0), (f"{prefix}.ln2.bias", (d,), -1),
        (f"{prefix}.ffn.w1", (d, ffn), d), (f"{prefix}.ffn.b1", (ffn,), -1),
        (f"{prefix}.ffn.w2", (ffn, d), ffn), (f"{prefix}.ffn.b2", (d,), -1),
    ]


def _fusion_block(prefix: str, d: int, ffn: int) -> list[tuple[str, tuple[int, ...], int]]:
    spec: list[tuple[str, tuple[int, ...], int]] = []
    for sub in ("cross", "self"):
        spec += [
            (f"{prefix}.{sub}_ln.gain", (d,), 0), (f"{prefix}.{sub}_ln.bias", (d,), -1),
            (f"{prefix}.{sub}.wq", (d, d), d), (f"{prefix}.{sub}.bq", (d,), -1),
            (f"{prefix}.{sub}.wk", (d, d), d), (f"{prefix}.{sub}.bk", (d,), -1),
            (f"{prefix}.{sub}.wv", (d, d), d), (f"{prefix}.{sub}.bv", (d,), -1),
            (f"{prefix}.{sub}.wo", (d, d), d), (f"{prefix}.{sub}.bo", (d,), -1),
        ]
    spec += [
        (f"{prefix}.ffn_ln.gain", (d,), 0), (f"{prefix}.ffn_ln.bias", (d,), -1),
        (f"{prefix}.ffn.w1", (d, ffn), d), (f"{prefix}.ffn.b1", (ffn,), -1),
        (f"{prefix}.ffn.w2", (ffn, d), ffn), (f"{prefix}.ffn.b2", (d,), -1),
    ]
    return spec


def _parameter_schema(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """Ordered (path, shape, fan_in) triples; fan_in 0 = ones, -1 = zeros."""
    d, ffn = cfg.d, cfg.d * cfg.ffn_mult
    schema: list[tuple[str, tuple[int, ...], int]] = [
        ("text.tok_emb", (cfg.vocab_size + 1, d), d),
        ("text.pos_emb", (cfg.max_len, d), d),
        ("text.seg_emb", (2, d), d),
    ]
    for i in range(cfg.text_layers):
        schema += _block(f"text.layer{i}", d, ffn)
    schema += [("text.ln_out.gain", (d,), 0), ("text.ln_out.bias", (d,), -1)]
    if cfg.separation == "independent":
        schema += [
            ("text2.tok_emb", (cfg.vocab_size + 1, d), d),
            ("text2.pos_emb", (cfg.max_len, d), d),
            ("text2.seg_emb", (2, d), d),
        ]
        for i in range(cfg.text_layers):
            schema += _block(f"text2.layer{i}", d, ffn)
        schema += [("text2.ln_out.gain", (d,), 0), ("text2.ln_out.bias", (d,), -1)]

    schema += [
        ("obs.feat_emb", (cfg.num_features, d), d),
        ("obs.angle_w", (2, d), 2),
        ("obs.angle_b", (d,), -1),
        ("obs.proj_w", (d, d), d),
        ("obs.proj_b", (d,), -1),
        ("obs.ln.gain", (d,), 0), ("obs.ln.bias", (d,), -1),
        ("obs.stop_emb", (d,), d),
    ]

    schema += [
        ("hist.begin", (d,), d),
        ("hist.angle_w", (2, d), 2),
        ("hist.angle_b", (d,), -1),
        ("hist.step_emb", (cfg.max_steps + 1, d), d),
        ("hist.ln_in.gain", (d,), 0), ("hist.ln_in.bias", (d,), -1),
    ]
    for i in range(cfg.history_layers):
        schema += _block(f"hist.layer{i}", d, ffn)
    schema += [("hist.ln_out.gain", (d,), 0), ("hist.ln_out.bias", (d,), -1)]

    schema += [("fuse.type_emb", (3, d), d)]
    for i in range(cfg.fusion_layers):
        schema += _fusion_block(f"fuse.layer{i}", d, ffn)
    schema += [
        ("fuse.ln_out.gain", (d,), 0), ("fuse.ln_out.bias", (d,), -1),
        ("score.w1", (d, d), d), ("score.b1", (d,), -1),
        ("score.w2", (d, 1), d), ("score.b2", (1,), -1),
        ("value.w", (d, 1), d), ("value.b", (1,), -1),
    ]
    return schema


@dataclass
class AgentParams:
    """Learnable weights keyed by module path, plus the init seed."""

    config: ModelConfig
    seed: int
    values: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "AgentParams":
        rng = np.random.default_rng(seed)
        dtype = config.np_dtype()
        values: dict[str, Tensor] = {}
        for path, shape, fan_in in _parameter_schema(config):
            if fan_in == 0:
                data = np.ones(shape, dtype=dtype)
            elif fan_in == -1:
                data = np.zeros(shape, dtype=dtype)
            else:
                bound = 1.0 / math.sqrt(fan_in)
                data = rng.uniform(-bound, bound, size=shape).astype(dtype)
            values[path] = Tensor(data, requires_grad=True, checked=True)
        return cls(config=config, seed=seed, values=values)

    def __getitem__(self, path: str) -> Tensor:
        return self.values[path]

    def items(self):
        return self.values.items()

    def zero_grad(self) -> None:
        for t in self.values.values():
            t.grad = None

    def state_dict(self) -> dict:
        return {path: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
                for path, t in self.values.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.values) ^ set(state)
        if missing:
            raise ValueError(f"checkpoint parameter mismatch: {sorted(missing)[:4]}")
        for path, record in state.items():
            target = self.values[path]
            shape = tuple(record["shape"])
            if shape != target.shape:
                raise ValueError(f"shape mismatch for {path}: {shape} vs {target.shape}")
            target.data = np.asarray(record["values"],
                                     dtype=target.data.dtype).reshape(shape)


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return x * keep


def _attention(params: AgentParams, prefix: str, queries: Tensor, keys: Tensor,
               heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention; `mask` is (Sq, Sk) allowed."""
    d = queries.shape[-1]
    dh = d // heads
    sq, sk = queries.shape[0], keys.shape[0]
    q = linear(queries, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = linear(keys, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = linear(keys, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    q = q.reshape(sq, heads, dh).transpose(1, 0, 2)
    k = k.reshape(sk, heads, dh).transpose(1, 2, 0)
    v = v.reshape(sk, heads, dh).transpose(1, 0, 2)
    scores = (q @ k) * (1.0 / math.sqrt(dh))  # (h, Sq, Sk)
    if mask is None:
        weights = softmax(scores, axis=-1)
    else:
        weights = masked_softmax(scores, mask[None, :, :], axis=-1)
    ctx = (weights @ v).transpose(1, 0, 2).reshape(sq, d)
    return linear(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _encoder_layer(params: AgentParams, prefix: str, x: Tensor, heads: int,
                   mask: np.ndarray | None, dropout: float, rng) -> Tensor:
    normed = layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    x = x + _dropout(_attention(params, f"{prefix}.attn", normed, normed, heads, mask),
                     dropout, rng)
    normed = layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    hidden = linear(normed, params[f"{prefix}.ffn.w1"], params[f"{prefix}.ffn.b1"]).relu()
    return x + _dropout(linear(hidden, params[f"{prefix}.ffn.w2"],
                               params[f"{prefix}.ffn.b2"]), dropout, rng)


class Agent:
    """Bundles config + params with the forward passes of every encoder."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0,
                 params: AgentParams | None = None):
        self.config = config or ModelConfig()
        self.params = params or AgentParams.initialize(self.config, seed)

    # -- text -----------------------------------------------------------------

    def encode_dual_instruction(self, instruction: Sequence[int],
                                landmarks: Sequence[int], rng=None
                                ) -> tuple[Tensor, Tensor, Tensor]:
        """Encode [CLS] + instruction + landmarks; returns (x_cls, X, L)."""
        cfg = self.config
        m, n = len(instruction), len(landmarks)
        if 1 + m + n > cfg.max_len:
            raise ValueError(f"dual instruction length {1 + m + n} exceeds {cfg.max_len}")
        if cfg.separation == "independent":
            main = self._run_text("text", [cfg.cls_id, *instruction],
                                  segments=np.zeros(1 + m, np.intp), mask=None, rng=rng)
            x_cls, x_words = main[0], main[1:]
            if n:
                lm = self._run_text("text2", list(landmarks),
                                    segments=np.ones(n, np.intp), mask=None, rng=rng)
            else:
                lm = Tensor(np.zeros((0, cfg.d), dtype=cfg.np_dtype()))
            return x_cls, x_words, lm

        ids = [cfg.cls_id, *instruction, *landmarks]
        segments = np.array([0] * (1 + m) + [1] * n, dtype=np.intp)
        mask = None
        if cfg.separation == "separate":
            part = segments[None, :] == segments[:, None]
            mask = part
        out = self._run_text("text", ids, segments, mask, rng)
        return out[0], out[1:1 + m], out[1 + m:]

    def _run_text(self, prefix: str, ids: Sequence[int], segments: np.ndarray,
                  mask: np.ndarray | None, rng) -> Tensor:
        cfg = self.config
        params = self.params
        ids = np.asarray(ids, dtype=np.intp)
        x = (gather_rows(params[f"{prefix}.tok_emb"], ids)
             + gather_rows(params[f"{prefix}.pos_emb"], np.arange(len(ids)))
             + gather_rows(params[f"{prefix}.seg_emb"], segments))
        for i in range(cfg.text_layers):
            x = _encoder_layer(params, f"{prefix}.layer{i}", x, cfg.heads, mask,
                               cfg.dropout, rng)
        return layer_norm(x, params[f"{prefix}.ln_out.gain"],
                          params[f"{prefix}.ln_out.bias"])

    # -- observation ----------------------------------------------------------

    def encode_observation(self, obs: Observation) -> tuple[Tensor, Tensor]:
        """Embed all k views and the move candidates (STOP included).

        Returns (views (k x d), candidates (n_t+1 x d)).
        """
        params = self.params
        view_vecs = self._embed_feature_sets(
            [v.features for v in obs.views], [v.angle for v in obs.views])
        cand_moves = [c for c in obs.candidates if not c.is_stop]
        rows = []
        if cand_moves:
            rows.append(self._embed_feature_sets(
                [c.features for c in cand_moves], [c.angle for c in cand_moves]))
        rows.append(self._finish_view(params["obs.stop_emb"].reshape(1, -1)))
        cand_vecs = concat(rows, axis=0) if len(rows) > 1 else rows[0]
        return view_vecs, cand_vecs

    def _embed_feature_sets(self, feature_sets: list[tuple[int, ...]],
                            angles: list[float]) -> Tensor:
        cfg = self.config
        params = self.params
        for fs in feature_sets:
            for f in fs:
                if not (0 <= f < cfg.num_features):
                    raise ValueError(f"unknown feature id {f}")
        width = max(len(fs) for fs in feature_sets)
        idx = np.zeros((len(feature_sets), width), dtype=np.intp)
        valid = np.zeros((len(feature_sets), width, 1), dtype=cfg.np_dtype())
        for row, fs in enumerate(feature_sets):
            idx[row, :len(fs)] = fs
            valid[row, :len(fs), 0] = 1.0
        gathered = gather_rows(params["obs.feat_emb"], idx.reshape(-1)).reshape(
            len(feature_sets), width, cfg.d)
        feat_sum = (gathered * valid).sum(axis=1)
        trig = np.stack([np.sin(angles), np.cos(angles)], axis=1).astype(cfg.np_dtype())
        angle_part = linear(Tensor(trig), params["obs.angle_w"], params["obs.angle_b"])
        return self._finish_view(feat_sum + angle_part)

    def _finish_view(self, base: Tensor) -> Tensor:
        params = self.params
        projected = linear(base, params["obs.proj_w"], params["obs.proj_b"])
        return layer_norm(projected, params["obs.ln.gain"], params["obs.ln.bias"])

    # -- history --------------------------------------------------------------

    def encode_history(self, history: Sequence[tuple[Observation, float]],
                       view_embeds: Sequence[Tensor] | None = None, rng=None
                       ) -> Tensor:
        """Causal encoding of the trajectory; row 0 is the learned begin token.

        `view_embeds` may carry the already-encoded panorama of each step to
        avoid re-embedding; row t+1 summarizes step t.
        """
        cfg = self.config
        params = self.params
        t_len = len(history)
        if t_len + 1 > cfg.max_steps + 1:
            raise ValueError(f"history length {t_len} exceeds {cfg.max_steps}")
        tokens = [params["hist.begin"].reshape(1, -1) + gather_rows(
            params["hist.step_emb"], np.array([0], dtype=np.intp))]
        if t_len:
            if view_embeds is None:
                view_embeds = [self.encode_observation(obs)[0] for obs, _ in history]
            pooled = stack([v.mean(axis=0) for v in view_embeds])
            angles = np.array([[math.sin(a), math.cos(a)] for _, a in history],
                              dtype=cfg.np_dtype())
            angle_part = linear(Tensor(angles), params["hist.angle_w"],
                                params["hist.angle_b"])
            step_ids = np.arange(1, t_len + 1, dtype=np.intp)
            tokens.append(pooled + angle_part + gather_rows(params["hist.step_emb"],
                                                            step_ids))
        x = concat(tokens, axis=0) if len(tokens) > 1 else tokens[0]
        x = layer_norm(x, params["hist.ln_in.gain"], params["hist.ln_in.bias"])
        causal = np.tril(np.ones((t_len + 1, t_len + 1), dtype=bool))
        for i in range(cfg.history_layers):
            x = _encoder_layer(params, f"hist.layer{i}", x, cfg.heads, causal,
                               cfg.dropout, rng)
        return layer_norm(x, params["hist.ln_out.gain"], params["hist.ln_out.bias"])

    # -- fusion ---------------------------------------------------------------

    def fuse_and_score(self, x_cls: Tensor, x_words: Tensor, hist: Tensor,
                       views: Tensor, candidates: Tensor, rng=None
                       ) -> tuple[Tensor, Tensor]:
        """Cross-modal fusion; returns (action logits, state value).

        Visual tokens [history; views; candidates] attend to the text tokens,
        then to each other; logits come from a shared scoring head on the
        fused candidate tokens, the value from the fused begin token.
        """
        cfg = self.config
        params = self.params
        if candidates.shape[0] < 1:
            raise ValueError("need at least one candidate")
        text = concat([x_cls.reshape(1, -1), x_words], axis=0)
        type_emb = params["fuse.type_emb"]
        visual = concat([
            hist + type_emb[np.array([0])],
            views + type_emb[np.array([1])],
            candidates + type_emb[np.array([2])],
        ], axis=0)
        for i in range(cfg.fusion_layers):
            prefix = f"fuse.layer{i}"
            normed = layer_norm(visual, params[f"{prefix}.cross_ln.gain"],
                                params[f"{prefix}.cross_ln.bias"])
            visual = visual + _dropout(
                _attention(params, f"{prefix}.cross", normed, text, cfg.heads),
                cfg.dropout, rng)
            normed = layer_norm(visual, params[f"{prefix}.self_ln.gain"],
                                params[f"{prefix}.self_ln.bias"])
            visual = visual + _dropout(
                _attention(params, f"{prefix}.self", normed, normed, cfg.heads),
                cfg.dropout, rng)
            normed = layer_norm(visual, params[f"{prefix}.ffn_ln.gain"],
                                params[f"{prefix}.ffn_ln.bias"])
            hidden = linear(normed, params[f"{prefix}.ffn.w1"],
                            params[f"{prefix}.ffn.b1"]).relu()
            visual = visual + _dropout(
                linear(hidden, params[f"{prefix}.ffn.w2"], params[f"{prefix}.ffn.b2"]),
                cfg.dropout, rng)
        fused = layer_norm(visual, params["fuse.ln_out.gain"], params["fuse.ln_out.bias"])
        n_cand = candidates.shape[0]
        cand_tokens = fused[-n_cand:]
        hidden = linear(cand_tokens, params["score.w1"], params["score.b1"]).relu()
        logits = linear(hidden, params["score.w2"], params["score.b2"]).reshape(-1)
        value = linear(fused[np.array([0])], params["value.w"],
                       params["value.b"]).reshape(())
        return logits, value


# ---------------------------------------------------------------------------
# Batched forward passes
# ---------------------------------------------------------------------------
# The training loop steps a whole batch of episodes in lockstep; these
# variants process (B, S, d) stacks with key-side validity masks so the
# per-step Python/graph overhead is shared across the batch. Padded rows
# carry finite garbage and are excluded from every attention softmax.


def _attention_b(params: AgentParams, prefix: str, queries: Tensor, keys: Tensor,
                 heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Batched multi-head attention over (B, S, d) stacks.

    `mask` broadcasts against the (B, h, Sq, Sk) score tensor.
    """
    b, sq, d = queries.shape
    sk = keys.shape[1]
    dh = d // heads
    q = linear(queries, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = linear(keys, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = linear(keys, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    q = q.reshape(b, sq, heads, dh).transpose(0, 2, 1, 3)
    k = k.reshape(b, sk, heads, dh).transpose(0, 2, 3, 1)
    v = v.reshape(b, sk, heads, dh).transpose(0, 2, 1, 3)
    scores = (q @ k) * (1.0 / math.sqrt(dh))
    if mask is None:
        weights = softmax(scores, axis=-1)
    else:
        weights = masked_softmax(scores, mask, axis=-1)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, sq, d)
    return linear(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _encoder_layer_b(params: AgentParams, prefix: str, x: Tensor, heads: int,
                     mask: np.ndarray | None, dropout: float, rng) -> Tensor:
    normed = layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    x = x + _dropout(_attention_b(params, f"{prefix}.attn", normed, normed, heads,
                                  mask), dropout, rng)
    normed = layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    hidden = linear(normed, params[f"{prefix}.ffn.w1"], params[f"{prefix}.ffn.b1"]).relu()
    return x + _dropout(linear(hidden, params[f"{prefix}.ffn.w2"],
                               params[f"{prefix}.ffn.b2"]), dropout, rng)


class BatchedText:
    """Batched dual-instruction encoding with per-instance views."""

    def __init__(self, fused: Tensor, instr_valid: np.ndarray,
                 per_instance: list[tuple[Tensor, Tensor, Tensor]]):
        self.fusion_tokens = fused          # (B, 1 + m_max, d): [CLS] + words
        self.fusion_mask = instr_valid      # (B, 1 + m_max)
        self.per_instance = per_instance    # (x_cls, X, L) with exact lengths


def encode_dual_instruction_batch(agent: Agent,
                                  token_pairs: Sequence[tuple[Sequence[int],
                                                              Sequence[int]]],
                                  rng=None) -> BatchedText:
    """Encode [CLS]+instruction+landmarks for a whole batch.

    Layout pads the instruction part to the batch maximum before the
    landmark part, so the fusion slice [:, :1+m_max] holds [CLS]+words for
    every instance. Position ids stay compact (pad slots reuse position 0
    and are masked), matching the unbatched encoder.
    """
    cfg = agent.config
    params = agent.params
    batch = len(token_pairs)
    m_max = max(len(instr) for instr, _ in token_pairs)
    n_max = max(len(lms) for lms, in [(p[1],) for p in token_pairs])
    if 1 + m_max + n_max > cfg.max_len:
        raise ValueError(f"dual instruction length {1 + m_max + n_max} exceeds "
                         f"{cfg.max_len}")
    if cfg.separation == "independent":
        return _encode_independent_batch(agent, token_pairs, m_max, n_max, rng)

    s_len = 1 + m_max + n_max
    ids = np.zeros((batch, s_len), dtype=np.intp)
    pos = np.zeros((batch, s_len), dtype=np.intp)
    seg = np.zeros((batch, s_len), dtype=np.intp)
    valid = np.zeros((batch, s_len), dtype=bool)
    ids[:, 0] = cfg.cls_id
    valid[:, 0] = True
    for row, (instr, lms) in enumerate(token_pairs):
        m, n = len(instr), len(lms)
        ids[row, 1:1 + m] = instr
        pos[row, 1:1 + m] = np.arange(1, 1 + m)
        valid[row, 1:1 + m] = True
        lo = 1 + m_max
        ids[row, lo:lo + n] = lms
        pos[row, lo:lo + n] = np.arange(1 + m, 1 + m + n)
        seg[row, lo:lo + n] = 1
        valid[row, lo:lo + n] = True

    x = (gather_rows(params["text.tok_emb"], ids.reshape(-1))
         + gather_rows(params["text.pos_emb"], pos.reshape(-1))
         + gather_rows(params["text.seg_emb"], seg.reshape(-1))).reshape(
        batch, s_len, cfg.d)
    if cfg.separation == "separate":
        same_part = seg[:, :, None] == seg[:, None, :]
        mask = (same_part & valid[:, None, :])[:, None, :, :]
    else:
        mask = valid[:, None, None, :]
    for i in range(cfg.text_layers):
        x = _encoder_layer_b(params, f"text.layer{i}", x, cfg.heads, mask,
                             cfg.dropout, rng)
    out = layer_norm(x, params["text.ln_out.gain"], params["text.ln_out.bias"])

    per_instance = []
    for row, (instr, lms) in enumerate(token_pairs):
        m, n = len(instr), len(lms)
        x_cls = out[row, 0]
        words = out[row, 1:1 + m]
        lm = out[row, 1 + m_max:1 + m_max + n]
        per_instance.append((x_cls, words, lm))
    return BatchedText(fused=out[:, :1 + m_max], instr_valid=valid[:, :1 + m_max],
                       per_instance=per_instance)


def _encode_independent_batch(agent: Agent, token_pairs, m_max: int, n_max: int,
                              rng) -> BatchedText:
    cfg = agent.config
    params = agent.params
    batch = len(token_pairs)
    s_len = 1 + m_max
    ids = np.zeros((batch, s_len), dtype=np.intp)
    pos = np.zeros((batch, s_len), dtype=np.intp)
    valid = np.zeros((batch, s_len), dtype=bool)
    ids[:, 0] = cfg.cls_id
    valid[:, 0] = True
    for row, (instr, _) in enumerate(token_pairs):
        m = len(instr)
        ids[row, 1:1 + m] = instr
        pos[row, 1:1 + m] = np.arange(1, 1 + m)
        valid[row, 1:1 + m] = True
    seg = np.zeros((batch, s_len), dtype=np.intp)
    x = (gather_rows(params["text.tok_emb"], ids.reshape(-1))
         + gather_rows(params["text.pos_emb"], pos.reshape(-1))
         + gather_rows(params["text.seg_emb"], seg.reshape(-1))).reshape(
        batch, s_len, cfg.d)
    mask = valid[:, None, None, :]
    for i in range(cfg.text_layers):
        x = _encoder_layer_b(params, f"text.layer{i}", x, cfg.heads, mask,
                             cfg.dropout, rng)
    main = layer_norm(x, params["text.ln_out.gain"], params["text.ln_out.bias"])

    lm_rows: list[Tensor | None] = [None] * batch
    with_lms = [row for row, (_, lms) in enumerate(token_pairs) if len(lms) > 0]
    if with_lms:
        ids2 = np.zeros((len(with_lms), n_max), dtype=np.intp)
        pos2 = np.zeros((len(with_lms), n_max), dtype=np.intp)
        valid2 = np.zeros((len(with_lms), n_max), dtype=bool)
        for out_row, row in enumerate(with_lms):
            lms = token_pairs[row][1]
            ids2[out_row, :len(lms)] = lms
            pos2[out_row, :len(lms)] = np.arange(len(lms))
            valid2[out_row, :len(lms)] = True
        seg2 = np.ones((len(with_lms), n_max), dtype=np.intp)
        y = (gather_rows(params["text2.tok_emb"], ids2.reshape(-1))
             + gather_rows(params["text2.pos_emb"], pos2.reshape(-1))
             + gather_rows(params["text2.seg_emb"], seg2.reshape(-1))).reshape(
            len(with_lms), n_max, cfg.d)
        mask2 = valid2[:, None, None, :]
        for i in range(cfg.text_layers):
            y = _encoder_layer_b(params, f"text2.layer{i}", y, cfg.heads, mask2,
                                 cfg.dropout, rng)
        lm_out = layer_norm(y, params["text2.ln_out.gain"],
                            params["text2.ln_out.bias"])
        for out_row, row in enumerate(with_lms):
            lm_rows[row] = lm_out[out_row, :len(token_pairs[row][1])]

    empty = Tensor(np.zeros((0, cfg.d), dtype=cfg.np_dtype()))
    per_instance = []
    for row, (instr, lms) in enumerate(token_pairs):
        m = len(instr)
        lm = lm_rows[row] if lm_rows[row] is not None else empty
        per_instance.append((main[row, 0], main[row, 1:1 + m], lm))
    return BatchedText(fused=main, instr_valid=valid, per_instance=per_instance)


def encode_observation_batch(agent: Agent, observations: Sequence[Observation]
                             ) -> tuple[Tensor, Tensor, np.ndarray]:
    """Embed panoramas and candidates for a batch of same-k observations.

    Returns (views (B, k, d), candidates (B, C_max, d), candidate mask).
    The STOP slot of each instance uses the dedicated learned embedding.
    """
    cfg = agent.config
    params = agent.params
    batch = len(observations)
    k = len(observations[0].views)
    c_max = max(len(obs.candidates) for obs in observations)

    feature_sets: list[tuple[int, ...]] = []
    angles: list[float] = []
    for obs in observations:
        if len(obs.views) != k:
            raise ValueError("observations must share the view count")
        for view in obs.views:
            feature_sets.append(view.features)
            angles.append(view.angle)
    cand_mask = np.zeros((batch, c_max), dtype=bool)
    stop_mask = np.zeros((batch, c_max, 1), dtype=cfg.np_dtype())
    for row, obs in enumerate(observations):
        for col, cand in enumerate(obs.candidates):
            cand_mask[row, col] = True
            if cand.is_stop:
                stop_mask[row, col, 0] = 1.0
                feature_sets.append(())
                angles.append(0.0)
            else:
                feature_sets.append(cand.features)
                angles.append(cand.angle)
        for _ in range(c_max - len(obs.candidates)):
            feature_sets.append(())
            angles.append(0.0)

    for fs in feature_sets:
        for f in fs:
            if not (0 <= f < cfg.num_features):
                raise ValueError(f"unknown feature id {f}")
    width = max(1, max(len(fs) for fs in feature_sets))
    idx = np.zeros((len(feature_sets), width), dtype=np.intp)
    valid = np.zeros((len(feature_sets), width, 1), dtype=cfg.np_dtype())
    for row, fs in enumerate(feature_sets):
        idx[row, :len(fs)] = fs
        valid[row, :len(fs), 0] = 1.0
    gathered = gather_rows(params["obs.feat_emb"], idx.reshape(-1)).reshape(
        len(feature_sets), width, cfg.d)
    feat_sum = (gathered * valid).sum(axis=1)
    trig = np.stack([np.sin(angles), np.cos(angles)], axis=1).astype(cfg.np_dtype())
    base = feat_sum + linear(Tensor(trig), params["obs.angle_w"],
                             params["obs.angle_b"])
    view_base = base[:batch * k].reshape(batch, k, cfg.d)
    cand_base = base[batch * k:].reshape(batch, c_max, cfg.d)
    stop_row = params["obs.stop_emb"].reshape(1, 1, -1)
    cand_base = cand_base * (1.0 - stop_mask) + stop_row * stop_mask
    views = agent._finish_view(view_base)
    cands = agent._finish_view(cand_base)
    return views, cands, cand_mask


def encode_history_batch(agent: Agent, pooled: Tensor | None,
                         angles: np.ndarray, rng=None) -> Tensor:
    """Causal batched history encoding.

    `pooled` is (B, t, d) mean-pooled panoramas (None when t = 0);
    `angles` is (B, t) turned angles. Returns (B, t+1, d) with the begin
    token at row 0 of every instance.
    """
    cfg = agent.config
    params = agent.params
    if pooled is None:
        batch, t_len = angles.shape[0], 0
    else:
        batch, t_len = pooled.shape[0], pooled.shape[1]
    begin = (params["hist.begin"].reshape(1, 1, -1)
             + gather_rows(params["hist.step_emb"],
                           np.array([0], dtype=np.intp)).reshape(1, 1, -1))
    rows = [begin * Tensor(np.ones((batch, 1, 1), dtype=cfg.np_dtype()))]
    if t_len:
        trig = np.stack([np.sin(angles), np.cos(angles)], axis=-1).astype(
            cfg.np_dtype())
        angle_part = linear(Tensor(trig), params["hist.angle_w"],
                            params["hist.angle_b"])
        step_ids = np.arange(1, t_len + 1, dtype=np.intp)
        step_part = gather_rows(params["hist.step_emb"], step_ids).reshape(
            1, t_len, cfg.d)
        rows.append(pooled + angle_part + step_part)
    x = concat(rows, axis=1) if len(rows) > 1 else rows[0]
    x = layer_norm(x, params["hist.ln_in.gain"], params["hist.ln_in.bias"])
    causal = np.tril(np.ones((t_len + 1, t_len + 1), dtype=bool))
    for i in range(cfg.history_layers):
        x = _encoder_layer_b(params, f"hist.layer{i}", x, cfg.heads, causal,
                             cfg.dropout, rng)
    return layer_norm(x, params["hist.ln_out.gain"], params["hist.ln_out.bias"])


def fuse_and_score_batch(agent: Agent, text: Tensor, text_mask: np.ndarray,
                         hist: Tensor, views: Tensor, cands: Tensor,
                         cand_mask: np.ndarray, rng=None
                         ) -> tuple[Tensor, Tensor]:
    """Batched fusion; returns (logits (B, C_max), values (B,)).

    Padded candidate slots are masked out of the attention keys; their
    logits are garbage and must be masked by the caller.
    """
    cfg = agent.config
    params = agent.params
    batch, c_max = cand_mask.shape
    type_emb = params["fuse.type_emb"]
    visual = concat([
        hist + type_emb[np.array([0])].reshape(1, 1, -1),
        views + type_emb[np.array([1])].reshape(1, 1, -1),
        cands + type_emb[np.array([2])].reshape(1, 1, -1),
    ], axis=1)
    vis_valid = np.ones((batch, visual.shape[1]), dtype=bool)
    vis_valid[:, -c_max:] = cand_mask
    self_mask = vis_valid[:, None, None, :]
    cross_mask = text_mask[:, None, None, :]
    for i in range(cfg.fusion_layers):
        prefix = f"fuse.layer{i}"
        normed = layer_norm(visual, params[f"{prefix}.cross_ln.gain"],
                            params[f"{prefix}.cross_ln.bias"])
        visual = visual + _dropout(
            _attention_b(params, f"{prefix}.cross", normed, text, cfg.heads,
                         cross_mask), cfg.dropout, rng)
        normed = layer_norm(visual, params[f"{prefix}.self_ln.gain"],
                            params[f"{prefix}.self_ln.bias"])
        visual = visual + _dropout(
            _attention_b(params, f"{prefix}.self", normed, normed, cfg.heads,
                         self_mask), cfg.dropout, rng)
        normed = layer_norm(visual, params[f"{prefix}.ffn_ln.gain"],
                            params[f"{prefix}.ffn_ln.bias"])
        hidden = linear(normed, params[f"{prefix}.ffn.w1"],
                        params[f"{prefix}.ffn.b1"]).relu()
        visual = visual + _dropout(
            linear(hidden, params[f"{prefix}.ffn.w2"], params[f"{prefix}.ffn.b2"]),
            cfg.dropout, rng)
    fused = layer_norm(visual, params["fuse.ln_out.gain"], params["fuse.ln_out.bias"])
    cand_tokens = fused[:, -c_max:]
    hidden = linear(cand_tokens, params["score.w1"], params["score.b1"]).relu()
    logits = linear(hidden, params["score.w2"], params["score.b2"]).reshape(
        batch, c_max)
    values = linear(fused[:, 0], params["value.w"], params["value.b"]).reshape(batch)
    return logits, values


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, agent: Agent, extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": {k: getattr(agent.config, k)
                   for k in agent.config.__dataclass_fields__},
        "seed": agent.params.seed,
        "params": agent.params.state_dict(),
        "extra": extra or {},
    }
    with open(path, "w") as handle:
        json.dump(payload, handle, sort_keys=True)


def load_checkpoint(path) -> tuple[Agent, dict]:
    with open(path) as handle:
        payload = json.load(handle)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {payload.get('version')}")
    config = ModelConfig(**payload["config"])
    agent = Agent(config=config, seed=int(payload["seed"]))
    agent.params.load_state_dict(payload["params"])
    return agent, payload.get("extra", {})
