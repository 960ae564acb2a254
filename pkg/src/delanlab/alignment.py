"""Dual-level pre-fusion alignment losses.

Two contrastive levels couple the unimodal embeddings before fusion:
the full instruction against the navigation history (four granularities:
instruction-trajectory, word-trajectory, instruction-viewpoint,
word-viewpoint), and the landmark words against the panoramic observation
at every time step. A FIFO memory bank of detached past instances widens
the negative pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .numerics import EmptySupportError, Tensor, as_tensor, concat, masked_softmax, mean_pool, stack
from .numerics.functional import log_softmax


@dataclass
class ContrastConfig:
    """Weights, temperature and ablation switches for both levels."""

    tau: float = 1.0
    lambda_ih: float = 0.01
    lambda_lo: float = 0.1
    use_it: bool = True
    use_wt: bool = True
    use_iv: bool = True
    use_wv: bool = True
    use_lo: bool = True
    level: str = "dual"  # dual | single
    bank_enabled: bool = True
    bank_capacity: int = 480
    lo_bank_enabled: bool = False  # per-step observation negatives from the bank
    cosine: bool = False  # normalize embeddings before the dot products

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.level not in ("dual", "single"):
            raise ValueError(f"unknown level mode: {self.level}")

    def enabled_granularities(self) -> tuple[str, ...]:
        names = [("it", self.use_it), ("wt", self.use_wt),
                 ("iv", self.use_iv), ("wv", self.use_wv)]
        return tuple(name for name, on in names if on)


@dataclass
class InstanceEmbeddings:
    """Per-episode embedding set shared by both alignment levels.

    Token matrices are padded with zero rows; the masks mark real tokens.
    `views` holds one (k x d) matrix per navigation step.
    """

    text_global: Tensor
    words: Tensor
    word_mask: np.ndarray
    landmarks: Tensor
    landmark_mask: np.ndarray
    steps: Tensor
    step_mask: np.ndarray
    traj_global: Tensor
    views: list[Tensor] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.text_global.shape[-1]

    @property
    def num_steps(self) -> int:
        return len(self.views)

    def validate(self) -> None:
        d = self.dim
        for name in ("words", "landmarks", "steps"):
            mat = getattr(self, name)
            if mat.ndim != 2 or mat.shape[1] != d:
                raise ValueError(f"{name} must be (tokens x {d})")
        if self.word_mask.shape != (self.words.shape[0],):
            raise ValueError("word mask inconsistent with words")
        if self.landmark_mask.shape != (self.landmarks.shape[0],):
            raise ValueError("landmark mask inconsistent with landmarks")
        if self.step_mask.shape != (self.steps.shape[0],):
            raise ValueError("step mask inconsistent with steps")
        for v in self.views:
            if v.ndim != 2 or v.shape[1] != d:
                raise ValueError("views must be (k x d)")
        if self.step_mask.any():
            pooled = mean_pool(self.steps, self.step_mask).data
            if not np.allclose(pooled, self.traj_global.data, atol=1e-9):
                raise ValueError("traj_global must be the mean of the valid steps")

    def detach(self) -> "InstanceEmbeddings":
        return InstanceEmbeddings(
            text_global=self.text_global.detach(),
            words=self.words.detach(),
            word_mask=self.word_mask.copy(),
            landmarks=self.landmarks.detach(),
            landmark_mask=self.landmark_mask.copy(),
            steps=self.steps.detach(),
            step_mask=self.step_mask.copy(),
            traj_global=self.traj_global.detach(),
            views=[v.detach() for v in self.views],
        )

    def requires_grad(self) -> bool:
        tensors = [self.text_global, self.words, self.landmarks, self.steps,
                   self.traj_global, *self.views]
        return any(t.requires_grad for t in tensors)


@dataclass
class SimilarityBundle:
    """Raw similarity scores of one (text, trajectory) pair before reduction."""

    instruction_trajectory: Tensor  # scalar
    word_trajectory: Tensor  # (1, m)
    instruction_viewpoint: Tensor  # (T, 1)
    word_viewpoint: Tensor  # (T, m)
    landmark_observation: list[Tensor]  # per step (k, n)


@dataclass(frozen=True)
class MemoryBank:
    """FIFO store of gradient-detached instances used as extra negatives."""

    capacity: int = 480
    level: str = "instruction-history"
    entries: tuple[InstanceEmbeddings, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)


def bank_push(bank: MemoryBank, items: Sequence[InstanceEmbeddings]) -> MemoryBank:
    """Append detached instances, evicting oldest-first past capacity."""
    for item in items:
        if item.requires_grad():
            raise ValueError("memory bank items must be gradient-detached")
    merged = bank.entries + tuple(items)
    if len(merged) > bank.capacity:
        merged = merged[len(merged) - bank.capacity:]
    return replace(bank, entries=merged)


# ---------------------------------------------------------------------------
# Reduce function
# ---------------------------------------------------------------------------

def reduce_similarity(matrix, row_mask=None, col_mask=None) -> Tensor:
    """Aggregate a (p x q) similarity matrix to a scalar.

    Stage one attends over rows within each column and over columns within
    each row; stage two attends over the two stage-one vectors; the two
    branch scalars are averaged. Invalid rows/columns are dropped before
    any softmax, so padding never leaks into the attention weights.
    """
    m = as_tensor(matrix)
    if m.ndim != 2:
        raise ValueError("reduce_similarity expects a 2-D matrix")
    p, q = m.shape
    rows = np.ones(p, bool) if row_mask is None else np.asarray(row_mask, bool)
    cols = np.ones(q, bool) if col_mask is None else np.asarray(col_mask, bool)
    if not rows.any() or not cols.any():
        raise EmptySupportError("empty support")
    if not (rows.all() and cols.all()):
        m = m[np.ix_(np.flatnonzero(rows), np.flatnonzero(cols))]
    return _reduce_dense(m)


def _reduce_dense(m: Tensor) -> Tensor:
    w_rows = _softmax_cols(m)
    m_r = (w_rows * m).sum(axis=0)
    w_cols = _softmax_rows(m)
    m_c = (w_cols * m).sum(axis=1)
    r1 = (_softmax_vec(m_r) * m_r).sum()
    r2 = (_softmax_vec(m_c) * m_c).sum()
    return (r1 + r2) * 0.5


def _softmax_cols(m: Tensor) -> Tensor:
    z = (m - m.max_detached(axis=0, keepdims=True)).exp()
    return z / z.sum(axis=0, keepdims=True)


def _softmax_rows(m: Tensor) -> Tensor:
    z = (m - m.max_detached(axis=1, keepdims=True)).exp()
    return z / z.sum(axis=1, keepdims=True)


def _softmax_vec(v: Tensor) -> Tensor:
    z = (v - v.max_detached()).exp()
    return z / z.sum()


def _reduce_batched(s: Tensor, row_mask: np.ndarray, col_mask: np.ndarray) -> Tensor:
    """Vectorized reduce over the two trailing axes of `s`.

    `row_mask` / `col_mask` broadcast against the leading batch axes.
    Masked positions carry exact zero attention weight, which matches the
    compacting scalar path to floating-point accuracy.
    """
    w_rows = masked_softmax(s, row_mask[..., :, None], axis=-2)
    m_r = (w_rows * s).sum(axis=-2)
    w_cols = masked_softmax(s, col_mask[..., None, :], axis=-1)
    m_c = (w_cols * s).sum(axis=-1)
    r1 = (masked_softmax(m_r, col_mask, axis=-1) * m_r).sum(axis=-1)
    r2 = (masked_softmax(m_c, row_mask, axis=-1) * m_c).sum(axis=-1)
    return (r1 + r2) * 0.5


def _reduce_vector_batched(v: Tensor, mask: np.ndarray) -> Tensor:
    """Reduce along the last axis; both branches coincide for vectors."""
    w = masked_softmax(v, mask, axis=-1)
    return (w * v).sum(axis=-1)


# ---------------------------------------------------------------------------
# Contrastive loss
# ---------------------------------------------------------------------------

def per_row_nll(scores, tau: float, positives=None) -> Tensor:
    """-log softmax(scores/tau) at each row's positive column."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    s = as_tensor(scores)
    if s.ndim != 2:
        raise ValueError("scores must be 2-D")
    b, bp = s.shape
    if positives is None:
        positives = np.arange(b)
    positives = np.asarray(positives, dtype=np.intp)
    if positives.shape != (b,) or positives.min() < 0 or positives.max() >= bp:
        raise ValueError("invalid positive index")
    logp = log_softmax(s * (1.0 / tau), axis=-1)
    return -logp[np.arange(b), positives]


def contrastive_loss(scores, tau: float, positives=None) -> Tensor:
    """One direction of the InfoNCE objective.

    Mean over rows of -log softmax(scores/tau) at the positive column.
    Columns beyond the batch (memory-bank entries) only enlarge the
    denominator. Callers evaluate both directions and sum them.
    """
    s = as_tensor(scores)
    if s.ndim != 2:
        raise ValueError("scores must be 2-D")
    if s.shape[1] < s.shape[0]:
        raise ValueError("need at least as many columns as rows")
    return per_row_nll(s, tau, positives).mean()


# ---------------------------------------------------------------------------
# Pair similarities
# ---------------------------------------------------------------------------

def similarity_bundle(a: InstanceEmbeddings, b: InstanceEmbeddings) -> SimilarityBundle:
    """All raw similarity scores between text side `a` and trajectory side `b`."""
    s_it = (b.traj_global * a.text_global).sum()
    s_wt = (a.words @ b.traj_global.reshape(-1, 1)).reshape(1, -1)
    s_iv = b.steps @ a.text_global.reshape(-1, 1)
    s_wv = b.steps @ a.words.T
    s_lo = [v @ a.landmarks.T for v in b.views]
    return SimilarityBundle(s_it, s_wt, s_iv, s_wv, s_lo)


def _maybe_normalize(mat: Tensor, cfg: ContrastConfig) -> Tensor:
    if not cfg.cosine:
        return mat
    norm = (mat * mat).sum(axis=-1, keepdims=True).clip_min(1e-12).sqrt()
    return mat / norm


def instruction_history_sim(a: InstanceEmbeddings, b: InstanceEmbeddings,
                            cfg: ContrastConfig | None = None) -> Tensor:
    """Mean of the enabled granularity scores between one text/history pair."""
    cfg = cfg or ContrastConfig()
    enabled = cfg.enabled_granularities()
    if not enabled:
        raise ValueError("no enabled instruction-history component")
    if cfg.cosine:
        a = replace(a, text_global=_maybe_normalize(a.text_global, cfg),
                    words=_maybe_normalize(a.words, cfg))
        b = replace(b, traj_global=_maybe_normalize(b.traj_global, cfg),
                    steps=_maybe_normalize(b.steps, cfg))
    bundle = similarity_bundle(a, b)
    parts = []
    if "it" in enabled:
        parts.append(bundle.instruction_trajectory)
    if "wt" in enabled:
        parts.append(reduce_similarity(bundle.word_trajectory,
                                       col_mask=a.word_mask))
    if "iv" in enabled:
        parts.append(reduce_similarity(bundle.instruction_viewpoint,
                                       row_mask=b.step_mask))
    if "wv" in enabled:
        parts.append(reduce_similarity(bundle.word_viewpoint,
                                       row_mask=b.step_mask, col_mask=a.word_mask))
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return total * (1.0 / len(parts))


def landmark_observation_sim(a: InstanceEmbeddings, b: InstanceEmbeddings,
                             t: int, cfg: ContrastConfig | None = None) -> Tensor:
    """Reduced landmark/view similarity at navigation step `t` (0-based)."""
    cfg = cfg or ContrastConfig()
    if not a.landmark_mask.any():
        raise EmptySupportError("empty landmark set")
    if t < 0 or t >= b.num_steps:
        raise ValueError(f"step {t} out of range for {b.num_steps}-step instance")
    scores = _maybe_normalize(b.views[t], cfg) @ _maybe_normalize(a.landmarks, cfg).T
    return reduce_similarity(scores, col_mask=a.landmark_mask)


# ---------------------------------------------------------------------------
# Batched level losses
# ---------------------------------------------------------------------------

def _pad_rows(mat: Tensor, rows: int, d: int) -> Tensor:
    short = rows - mat.shape[0]
    if short == 0:
        return mat
    return concat([mat, Tensor(np.zeros((short, d)))], axis=0)


def _stack_text(instances: Sequence[InstanceEmbeddings], cfg: ContrastConfig):
    d = instances[0].dim
    m_max = max(int(i.words.shape[0]) for i in instances)
    x_cls = stack([_maybe_normalize(i.text_global.reshape(1, -1), cfg).reshape(-1)
                   for i in instances])
    words = stack([_pad_rows(_maybe_normalize(i.words, cfg), m_max, d)
                   for i in instances])
    mask = np.zeros((len(instances), m_max), bool)
    for row, inst in enumerate(instances):
        mask[row, :inst.words.shape[0]] = inst.word_mask
    return x_cls, words, mask


def _stack_hist(instances: Sequence[InstanceEmbeddings], cfg: ContrastConfig):
    d = instances[0].dim
    t_max = max(int(i.steps.shape[0]) for i in instances)
    h_bar = stack([_maybe_normalize(i.traj_global.reshape(1, -1), cfg).reshape(-1)
                   for i in instances])
    steps = stack([_pad_rows(_maybe_normalize(i.steps, cfg), t_max, d)
                   for i in instances])
    mask = np.zeros((len(instances), t_max), bool)
    for row, inst in enumerate(instances):
        mask[row, :inst.steps.shape[0]] = inst.step_mask
    return h_bar, steps, mask


def _pairwise_ih_scores(texts, hists, cfg: ContrastConfig) -> Tensor:
    """Score matrix S[i, j] = sim(text_i, history_j), fully vectorized."""
    x_cls, words, word_mask = texts
    h_bar, steps, step_mask = hists
    enabled = cfg.enabled_granularities()
    if not enabled:
        raise ValueError("no enabled instruction-history component")
    parts = []
    if "it" in enabled:
        parts.append(x_cls @ h_bar.T)
    if "wt" in enabled:
        scores = (words @ h_bar.T).transpose(0, 2, 1)  # (Nt, Nh, m)
        parts.append(_reduce_vector_batched(scores, word_mask[:, None, :]))
    if "iv" in enabled:
        scores = (steps @ x_cls.T).transpose(2, 0, 1)  # (Nt, Nh, T)
        parts.append(_reduce_vector_batched(scores, step_mask[None, :, :]))
    if "wv" in enabled:
        nt = x_cls.shape[0]
        scores = steps.reshape(1, *steps.shape) @ words.transpose(0, 2, 1).reshape(
            nt, 1, words.shape[2], words.shape[1])  # (Nt, Nh, T, m)
        parts.append(_reduce_batched(scores, step_mask[None, :, :],
                                     word_mask[:, None, :]))
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return total * (1.0 / len(parts))


def instruction_history_loss(batch: Sequence[InstanceEmbeddings],
                             bank: MemoryBank | None,
                             cfg: ContrastConfig) -> Tensor:
    """Bidirectional contrastive loss over full instructions and trajectories.

    Bank entries extend the columns of both directional score matrices
    (history negatives one way, instruction negatives the other); they
    are detached, so no gradient reaches them.
    """
    if not batch:
        raise ValueError("empty batch")
    extras = list(bank.entries) if (bank is not None and cfg.bank_enabled) else []
    cols = list(batch) + extras
    s_tv = _pairwise_ih_scores(_stack_text(batch, cfg), _stack_hist(cols, cfg), cfg)
    s_vt = _pairwise_ih_scores(_stack_text(cols, cfg), _stack_hist(batch, cfg), cfg).T
    return contrastive_loss(s_tv, cfg.tau) + contrastive_loss(s_vt, cfg.tau)


def _stack_landmarks(instances: Sequence[InstanceEmbeddings], cfg: ContrastConfig):
    d = instances[0].dim
    n_max = max(int(i.landmarks.shape[0]) for i in instances)
    lms = stack([_pad_rows(_maybe_normalize(i.landmarks, cfg), n_max, d)
                 for i in instances])
    mask = np.zeros((len(instances), n_max), bool)
    for row, inst in enumerate(instances):
        mask[row, :inst.landmarks.shape[0]] = inst.landmark_mask
    return lms, mask


def landmark_observation_loss(batch: Sequence[InstanceEmbeddings],
                              bank: MemoryBank | None,
                              cfg: ContrastConfig) -> Tensor:
    """Per-step landmark/observation contrast, averaged over each episode's T.

    At step t only episodes still navigating participate; a step where a
    single episode remains contributes zero (no negatives to contrast).
    """
    if not batch:
        raise ValueError("empty batch")
    for inst in batch:
        if not inst.landmark_mask.any():
            raise EmptySupportError("empty landmark set")
        if inst.num_steps < 1:
            raise ValueError("every instance needs at least one step")
    lengths = [inst.num_steps for inst in batch]
    k_sizes = {v.shape[0] for inst in batch for v in inst.views}
    if len(k_sizes) > 1:
        raise ValueError("all panoramas must share the same view count")
    extras = list(bank.entries) if (bank is not None and cfg.lo_bank_enabled) else []
    acc: list[Tensor | None] = [None] * len(batch)
    for t in range(max(lengths)):
        group = [i for i, n in enumerate(lengths) if n > t]
        active = [batch[i] for i in group]
        bank_active = [e for e in extras if e.num_steps > t]
        lms, lm_mask = _stack_landmarks(active + bank_active, cfg)
        views = stack([_maybe_normalize(inst.views[t], cfg)
                       for inst in active + bank_active])
        k = views.shape[1]
        g = len(active)
        n_all = len(active) + len(bank_active)
        # scores[i, j] = R(views_j @ landmarks_i^T) over (k x n) matrices
        raw = views.reshape(1, n_all, k, -1) @ lms.transpose(0, 2, 1).reshape(
            n_all, 1, lms.shape[2], lms.shape[1])
        view_mask = np.ones((1, 1, k), bool)
        reduced = _reduce_batched(raw, view_mask, lm_mask[:, None, :])
        s_tv = reduced[:g, :]          # landmark rows vs observation columns
        s_vt = reduced.T[:g, :]        # observation rows vs landmark columns
        nll = per_row_nll(s_tv, cfg.tau) + per_row_nll(s_vt, cfg.tau)
        for pos, i in enumerate(group):
            term = nll[np.array([pos])].sum()
            acc[i] = term if acc[i] is None else acc[i] + term
    total = None
    for i, count in enumerate(lengths):
        contribution = acc[i] * (1.0 / count)
        total = contribution if total is None else total + contribution
    return total * (1.0 / len(batch))


def _concat_visual(inst: InstanceEmbeddings) -> InstanceEmbeddings:
    """View every step's panorama plus the history rows as one token matrix."""
    if inst.num_steps == 0 and not inst.step_mask.any():
        raise EmptySupportError("instance has no visual content")
    valid_steps = inst.steps[np.flatnonzero(inst.step_mask)] if not inst.step_mask.all() \
        else inst.steps
    rows = [valid_steps] + list(inst.views)
    merged = concat(rows, axis=0) if len(rows) > 1 else rows[0]
    mask = np.ones(merged.shape[0], bool)
    return InstanceEmbeddings(
        text_global=inst.text_global,
        words=inst.words,
        word_mask=inst.word_mask,
        landmarks=inst.landmarks,
        landmark_mask=inst.landmark_mask,
        steps=merged,
        step_mask=mask,
        traj_global=mean_pool(merged, mask),
        views=[],
    )


def single_level_loss(batch: Sequence[InstanceEmbeddings],
                      bank: MemoryBank | None,
                      cfg: ContrastConfig) -> Tensor:
    """Single-level ablation: one alignment of instructions against the
    concatenation of history and all per-step observation tokens."""
    merged = [_concat_visual(inst) for inst in batch]
    merged_bank = None
    if bank is not None and cfg.bank_enabled:
        merged_bank = replace(bank, entries=tuple(_concat_visual(e) for e in bank.entries))
    return instruction_history_loss(merged, merged_bank, cfg)
