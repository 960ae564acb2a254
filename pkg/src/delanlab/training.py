"""Combined optimization loop: imitation, advantage actor-critic, and the
two pre-fusion alignment losses in one weighted objective.

Each iteration runs a teacher-forced batch and a sampled batch over the
same episodes, computes the alignment losses on the teacher-forced
embeddings (whose trajectories match the instructions by construction),
backpropagates the weighted sum, and pushes detached embeddings into the
memory bank.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .agent import (
    Agent,
    ModelConfig,
    encode_dual_instruction_batch,
    encode_history_batch,
    encode_observation_batch,
    extract_landmarks,
    fuse_and_score_batch,
)
from .alignment import (
    ContrastConfig,
    InstanceEmbeddings,
    MemoryBank,
    bank_push,
    instruction_history_loss,
    landmark_observation_loss,
    single_level_loss,
)
from .metrics import MetricReport, TrajectoryPair, aggregate, evaluate
from .numerics import Tensor, as_tensor, mean_pool, no_grad, stack
from .numerics.functional import log_softmax
from .worldsim import Episode, World, initial_state, observe, step, teacher_action

LOG_HEADER = "iter,L_IL,L_RL,L_IH,L_LO,total,val_SR,val_SPL,val_nDTW"
LOG_EPS = 1e-12  # clamp for log of near-zero action probabilities


@dataclass
class TrainConfig:
    lambda1: float = 1.0     # reinforcement
    lambda2: float = 0.2     # imitation
    lambda3: float = 0.01    # instruction-history alignment
    lambda4: float = 0.1     # landmark-observation alignment
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    iterations: int = 500
    eval_interval: int = 100
    gamma: float = 0.9
    seed: int = 0
    max_steps: int = 15
    success_radius: float = 0.0
    success_reward: float = 2.0
    align_on_sampled: bool = False
    log_unweighted_alignment: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


@dataclass
class RolloutRecord:
    """Per-step bookkeeping of one episode rollout."""

    episode: Episode
    log_probs: list[Tensor]       # (n_candidates,) per step, graph-connected
    actions: list[int]            # executed candidate index
    teacher_actions: list[int]
    sampled: bool
    rewards: list[float]
    values: list[Tensor]          # scalar value estimates, graph-connected
    returns: list[float] = field(default_factory=list)
    advantages: list[float] = field(default_factory=list)
    path: list[int] = field(default_factory=list)
    step_nodes: list[int] = field(default_factory=list)
    success: bool = False

    @property
    def num_steps(self) -> int:
        return len(self.actions)

    def finalize_returns(self, gamma: float) -> None:
        """Discounted returns and detached advantages (constants for the
        policy term, per the two-pass protocol)."""
        running = 0.0
        out = []
        for reward in reversed(self.rewards):
            running = reward + gamma * running
            out.append(running)
        self.returns = list(reversed(out))
        self.advantages = [g - float(v.data) for g, v in zip(self.returns, self.values)]


@dataclass
class TrainResult:
    agent: Agent
    log_rows: list[str]
    bank: MemoryBank
    optimizer_state: dict
    final_iteration: int
    sample_rng_state: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

def rollout(agent: Agent, world: World, episode: Episode, mode: str,
            cfg: TrainConfig, rng=None, dropout_rng=None,
            collect_embeddings: bool = True
            ) -> tuple[RolloutRecord, InstanceEmbeddings | None]:
    """Run one episode to termination.

    Modes: 'teacher' executes optimal actions while scoring the model,
    'sampled' draws actions from the predicted distribution (needs rng),
    'greedy' takes the argmax.
    """
    if mode not in ("teacher", "sampled", "greedy"):
        raise ValueError(f"unknown rollout mode: {mode}")
    if mode == "sampled" and rng is None:
        raise ValueError("sampled rollouts need an rng")

    landmarks = extract_landmarks(episode.instruction)
    x_cls, x_words, lm_emb = agent.encode_dual_instruction(
        episode.instruction, landmarks, rng=dropout_rng)
    state = initial_state(world, episode.start, episode.goal,
                          max_steps=cfg.max_steps, success_radius=cfg.success_radius)
    record = RolloutRecord(episode=episode, log_probs=[], actions=[],
                           teacher_actions=[], sampled=mode == "sampled",
                           rewards=[], values=[], path=[state.current])
    step_views: list[Tensor] = []
    goal_dist = world.distances_from(episode.goal)

    while not state.terminated:
        obs = observe(world, state)
        views, cands = agent.encode_observation(obs)
        hist = agent.encode_history(state.history, view_embeds=step_views,
                                    rng=dropout_rng)
        logits, value = agent.fuse_and_score(x_cls, x_words, hist, views, cands,
                                             rng=dropout_rng)
        log_p = log_softmax(logits)
        teacher = teacher_action(world, state, episode.goal)
        if mode == "teacher":
            action = teacher
        elif mode == "greedy":
            action = int(np.argmax(logits.data))
        else:
            probs = np.exp(log_p.data)
            if not np.all(np.isfinite(probs)):
                raise RuntimeError(
                    f"non-finite action distribution at step {state.elapsed} "
                    f"of episode seed {episode.seed}: logits={logits.data}")
            probs = probs / probs.sum()
            action = int(rng.choice(len(probs), p=probs))
        record.step_nodes.append(state.current)
        before = goal_dist.get(state.current, math.inf)
        state = step(world, state, action)
        after = goal_dist.get(state.current, math.inf)
        reward = before - after
        if state.terminated:
            reward += cfg.success_reward if state.success else -cfg.success_reward
        record.log_probs.append(log_p)
        record.actions.append(action)
        record.teacher_actions.append(teacher)
        record.rewards.append(reward)
        record.values.append(value)
        step_views.append(views)
        if record.path[-1] != state.current:
            record.path.append(state.current)

    record.success = state.success
    record.finalize_returns(cfg.gamma)

    embeddings = None
    if collect_embeddings:
        full_hist = agent.encode_history(state.history, view_embeds=step_views,
                                         rng=dropout_rng)
        steps = full_hist[1:]  # begin token carries no visited viewpoint
        t_len = steps.shape[0]
        step_mask = np.ones(t_len, bool)
        word_mask = np.ones(len(episode.instruction), bool)
        lm_mask = np.ones(len(landmarks), bool)
        embeddings = InstanceEmbeddings(
            text_global=x_cls, words=x_words, word_mask=word_mask,
            landmarks=lm_emb, landmark_mask=lm_mask, steps=steps,
            step_mask=step_mask, traj_global=mean_pool(steps, step_mask),
            views=step_views)
    return record, embeddings


def rollout_batch(agent: Agent, items: Sequence[tuple[World, Episode]], mode: str,
                  cfg: TrainConfig, rng=None, dropout_rng=None,
                  collect_embeddings: bool = True
                  ) -> tuple[list[RolloutRecord], list[InstanceEmbeddings | None]]:
    """Lockstep batched version of :func:`rollout` used by the training loop.

    All episodes advance one step per round; finished ones drop out of the
    active set. Numerically equivalent to per-episode rollouts up to
    floating-point reassociation from padding.
    """
    if mode not in ("teacher", "sampled", "greedy"):
        raise ValueError(f"unknown rollout mode: {mode}")
    if mode == "sampled" and rng is None:
        raise ValueError("sampled rollouts need an rng")
    batch = len(items)
    landmarks = [extract_landmarks(ep.instruction) for _, ep in items]
    text = encode_dual_instruction_batch(
        agent, [(ep.instruction, lms) for (_, ep), lms in zip(items, landmarks)],
        rng=dropout_rng)
    states = [initial_state(world, ep.start, ep.goal, max_steps=cfg.max_steps,
                            success_radius=cfg.success_radius)
              for world, ep in items]
    goal_dists = [world.distances_from(ep.goal) for world, ep in items]
    records = [RolloutRecord(episode=ep, log_probs=[], actions=[],
                             teacher_actions=[], sampled=mode == "sampled",
                             rewards=[], values=[], path=[st.current])
               for (_, ep), st in zip(items, states)]
    step_views: list[list[Tensor]] = [[] for _ in range(batch)]
    pooled_cache: list[tuple[Tensor, dict[int, int]]] = []
    active = list(range(batch))

    while active:
        b_a = len(active)
        obs_list = [observe(items[e][0], states[e]) for e in active]
        views, cands, cand_mask = encode_observation_batch(agent, obs_list)
        pooled = views.mean(axis=1)
        t_len = len(pooled_cache)
        if t_len:
            gathered = [past[np.array([lookup[e] for e in active], dtype=np.intp)]
                        for past, lookup in pooled_cache]
            prefix = stack(gathered, axis=0).transpose(1, 0, 2)  # (B_a, t, d)
            angles = np.array([[turn for _, turn in states[e].history]
                               for e in active], dtype=agent.config.np_dtype())
        else:
            prefix = None
            angles = np.zeros((b_a, 0), dtype=agent.config.np_dtype())
        hist = encode_history_batch(agent, prefix, angles, rng=dropout_rng)
        pooled_cache.append((pooled, {e: pos for pos, e in enumerate(active)}))

        rows = np.array(active, dtype=np.intp)
        logits, values = fuse_and_score_batch(
            agent, text.fusion_tokens[rows], text.fusion_mask[rows], hist, views,
            cands, cand_mask, rng=dropout_rng)
        log_p = log_softmax(logits, mask=cand_mask)

        still_active = []
        for pos, e in enumerate(active):
            world, episode = items[e]
            state = states[e]
            obs = obs_list[pos]
            n_options = len(obs.candidates)
            row_log_p = log_p[pos, :n_options]
            teacher = teacher_action(world, state, episode.goal)
            if mode == "teacher":
                action = teacher
            elif mode == "greedy":
                action = int(np.argmax(row_log_p.data))
            else:
                probs = np.exp(row_log_p.data)
                if not np.all(np.isfinite(probs)):
                    raise RuntimeError(
                        f"non-finite action distribution at step {state.elapsed} "
                        f"of episode seed {episode.seed}: logits={logits.data[pos]}")
                probs = probs / probs.sum()
                action = int(rng.choice(n_options, p=probs))
            record = records[e]
            record.step_nodes.append(state.current)
            before = goal_dists[e].get(state.current, math.inf)
            state = step(world, state, action)
            after = goal_dists[e].get(state.current, math.inf)
            reward = before - after
            if state.terminated:
                reward += cfg.success_reward if state.success else -cfg.success_reward
            states[e] = state
            record.log_probs.append(row_log_p)
            record.actions.append(action)
            record.teacher_actions.append(teacher)
            record.rewards.append(reward)
            record.values.append(values[np.array([pos])].reshape(()))
            if collect_embeddings:
                step_views[e].append(views[pos])
            if record.path[-1] != state.current:
                record.path.append(state.current)
            if not state.terminated:
                still_active.append(e)
        active = still_active

    for e, record in enumerate(records):
        record.success = states[e].success
        record.finalize_returns(cfg.gamma)

    embeddings: list[InstanceEmbeddings | None] = [None] * batch
    if collect_embeddings:
        by_length: dict[int, list[int]] = {}
        for e, record in enumerate(records):
            by_length.setdefault(record.num_steps, []).append(e)
        for t_len in sorted(by_length):
            group = by_length[t_len]
            gathered = [past[np.array([lookup[e] for e in group], dtype=np.intp)]
                        for past, lookup in pooled_cache[:t_len]]
            prefix = stack(gathered, axis=0).transpose(1, 0, 2)
            angles = np.array([[turn for _, turn in states[e].history]
                               for e in group], dtype=agent.config.np_dtype())
            full = encode_history_batch(agent, prefix, angles, rng=dropout_rng)
            for pos, e in enumerate(group):
                steps_mat = full[pos, 1:]
                step_mask = np.ones(t_len, bool)
                x_cls, words, lm_emb = text.per_instance[e]
                embeddings[e] = InstanceEmbeddings(
                    text_global=x_cls, words=words,
                    word_mask=np.ones(words.shape[0], bool),
                    landmarks=lm_emb,
                    landmark_mask=np.ones(lm_emb.shape[0], bool),
                    steps=steps_mat, step_mask=step_mask,
                    traj_global=mean_pool(steps_mat, step_mask),
                    views=step_views[e])
    return records, embeddings


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def il_loss(records: Sequence[RolloutRecord]) -> Tensor:
    """Mean over episodes of the per-step teacher-action cross-entropy."""
    if not records:
        raise ValueError("no rollout records")
    floor = math.log(LOG_EPS)
    total = None
    for record in records:
        acc = None
        for log_p, teacher in zip(record.log_probs, record.teacher_actions):
            term = -log_p[teacher].clip_min(floor)
            acc = term if acc is None else acc + term
        episode_loss = acc * (1.0 / record.num_steps)
        total = episode_loss if total is None else total + episode_loss
    return total * (1.0 / len(records))


def rl_loss(records: Sequence[RolloutRecord]) -> Tensor:
    """Advantage-weighted policy surrogate plus 0.5x value regression.

    Advantages enter as plain floats, so no gradient flows through them;
    the value head learns from the squared error to the discounted return.
    """
    if not records:
        raise ValueError("no rollout records")
    floor = math.log(LOG_EPS)
    total = None
    for record in records:
        policy = None
        value = None
        for log_p, action, advantage, ret, v in zip(
                record.log_probs, record.actions, record.advantages,
                record.returns, record.values):
            p_term = -log_p[action].clip_min(floor) * advantage
            policy = p_term if policy is None else policy + p_term
            diff = v - ret
            v_term = diff * diff
            value = v_term if value is None else value + v_term
        scale = 1.0 / record.num_steps
        episode_loss = policy * scale + value * (0.5 * scale)
        total = episode_loss if total is None else total + episode_loss
    return total * (1.0 / len(records))


def total_loss(l_rl, l_il, l_ih, l_lo, cfg: TrainConfig) -> Tensor:
    """Eq-style weighted sum of the four components."""
    return (as_tensor(l_rl) * cfg.lambda1 + as_tensor(l_il) * cfg.lambda2
            + as_tensor(l_ih) * cfg.lambda3 + as_tensor(l_lo) * cfg.lambda4)


def alignment_losses(embeddings: Sequence[InstanceEmbeddings], bank: MemoryBank,
                     cfg: TrainConfig) -> tuple[Tensor, Tensor]:
    """(instruction-history, landmark-observation) losses for one batch."""
    contrast = cfg.contrast
    if contrast.level == "single":
        l_ih = single_level_loss(embeddings, bank, contrast)
        return l_ih, Tensor(0.0)
    if contrast.enabled_granularities():
        l_ih = instruction_history_loss(embeddings, bank, contrast)
    else:
        l_ih = Tensor(0.0)
    if not contrast.use_lo:
        return l_ih, Tensor(0.0)
    with_landmarks = [e for e in embeddings if e.landmark_mask.any()]
    if not with_landmarks:
        warnings.warn("no instance has landmarks; landmark-observation loss skipped")
        return l_ih, Tensor(0.0)
    if len(with_landmarks) < len(embeddings):
        warnings.warn(f"{len(embeddings) - len(with_landmarks)} instances without "
                      "landmarks skipped in the landmark-observation loss")
    l_lo = landmark_observation_loss(with_landmarks, bank, contrast)
    return l_ih, l_lo


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay; decay skips 1-D params (norms, biases)."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 weight_decay: float = 0.01, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.moments = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.velocities = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for key, tensor in self.params.items():
            grad = tensor.grad
            if grad is None:
                continue
            m = self.moments[key]
            v = self.velocities[key]
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay > 0 and tensor.data.ndim >= 2:
                update = update + self.weight_decay * tensor.data
            tensor.data = tensor.data - self.lr * update

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "moments": {k: v.reshape(-1).tolist() for k, v in self.moments.items()},
            "velocities": {k: v.reshape(-1).tolist()
                           for k, v in self.velocities.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        for k in self.moments:
            self.moments[k] = np.asarray(state["moments"][k],
                                         dtype=self.moments[k].dtype).reshape(
                self.moments[k].shape)
            self.velocities[k] = np.asarray(state["velocities"][k],
                                            dtype=self.velocities[k].dtype).reshape(
                self.velocities[k].shape)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate_agent(agent: Agent, pool: Sequence[tuple[World, Episode]],
                   cfg: TrainConfig, trajectory_sink=None
                   ) -> tuple[MetricReport, list[MetricReport]]:
    """Greedy single-run evaluation; returns (aggregate, per-episode reports)."""
    reports = []
    for index, (world, episode) in enumerate(pool):
        with no_grad():
            record, _ = rollout(agent, world, episode, "greedy", cfg,
                                collect_embeddings=False)
        pair = TrajectoryPair(tuple(record.path), episode.path, world,
                              success_radius=cfg.success_radius)
        reports.append(evaluate(pair))
        if trajectory_sink is not None:
            for step_index, (node, logp) in enumerate(
                    zip(record.step_nodes, record.log_probs)):
                trajectory_sink.write_step(index, step_index, node,
                                           record.actions[step_index],
                                           logp.data.tolist())
    return aggregate(reports), reports


class TrajectoryLog:
    """JSON-lines trajectory sink: one record per step."""

    def __init__(self, path):
        self.handle = open(path, "w")

    def write_step(self, episode_id, step_index, node, action, logits) -> None:
        import json
        self.handle.write(json.dumps({
            "episode_id": episode_id, "step": step_index, "node": node,
            "action": action, "logits": logits,
        }, sort_keys=True) + "\n")

    def close(self) -> None:
        self.handle.close()


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------

def _format_row(iteration: int, l_il, l_rl, l_ih, l_lo, total,
                val: MetricReport | None) -> str:
    cells = [str(iteration), repr(float(l_il)), repr(float(l_rl)),
             repr(float(l_ih)), repr(float(l_lo)), repr(float(total))]
    if val is None:
        cells += ["", "", ""]
    else:
        cells += [repr(val.SR), repr(val.SPL), repr(val.nDTW)]
    return ",".join(cells)


def train(cfg: TrainConfig, train_pool: Sequence[tuple[World, Episode]],
          val_pool: Sequence[tuple[World, Episode]] = (),
          agent: Agent | None = None, bank: MemoryBank | None = None,
          start_iteration: int = 0, optimizer_state: dict | None = None,
          sample_rng_state: dict | None = None) -> TrainResult:
    """Run the combined objective for cfg.iterations and log every component.

    Resuming restores the iteration counter, parameters and optimizer
    moments from a checkpoint; the memory bank restarts empty (it refills
    within capacity/batch iterations).
    """
    if not train_pool:
        raise ValueError("empty training pool")
    agent = agent or Agent(config=cfg.model, seed=cfg.seed)
    bank = bank or MemoryBank(capacity=cfg.contrast.bank_capacity)
    optimizer = AdamW(agent.params.values, lr=cfg.learning_rate,
                      weight_decay=cfg.weight_decay)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    rng = np.random.default_rng(cfg.seed + 1)
    if sample_rng_state is not None:
        rng.bit_generator.state = sample_rng_state
    dropout_rng = rng if cfg.model.dropout > 0 else None

    weighted_alignment = cfg.lambda3 > 0 or cfg.lambda4 > 0
    rows: list[str] = []
    for iteration in range(start_iteration, cfg.iterations):
        picks = rng.choice(len(train_pool),
                           size=min(cfg.batch_size, len(train_pool)), replace=False)
        batch = [train_pool[int(i)] for i in picks]

        il_records, il_embeddings = rollout_batch(
            agent, batch, "teacher", cfg, dropout_rng=dropout_rng,
            collect_embeddings=True)
        embeddings: list[InstanceEmbeddings] = list(il_embeddings)
        rl_records, rl_embeddings = rollout_batch(
            agent, batch, "sampled", cfg, rng=rng, dropout_rng=dropout_rng,
            collect_embeddings=cfg.align_on_sampled)
        if cfg.align_on_sampled:
            embeddings.extend(inst for inst in rl_embeddings if inst is not None)

        l_il = il_loss(il_records)
        l_rl = rl_loss(rl_records)
        if weighted_alignment:
            l_ih, l_lo = alignment_losses(embeddings, bank, cfg)
            objective = total_loss(l_rl, l_il, l_ih, l_lo, cfg)
            ih_value, lo_value = float(l_ih.data), float(l_lo.data)
        else:
            # Unweighted components are computed outside the graph so the
            # backward pass is bitwise identical to an alignment-free build.
            objective = total_loss(l_rl, l_il, 0.0, 0.0, cfg)
            ih_value = lo_value = float("nan")
            if cfg.log_unweighted_alignment:
                with no_grad():
                    l_ih, l_lo = alignment_losses(embeddings, bank, cfg)
                ih_value, lo_value = float(l_ih.data), float(l_lo.data)

        total_value = float(objective.data)
        components = {"L_IL": float(l_il.data), "L_RL": float(l_rl.data),
                      "L_IH": ih_value, "L_LO": lo_value, "total": total_value}
        if not math.isfinite(total_value):
            raise RuntimeError(f"non-finite loss at iteration {iteration}: {components}")

        agent.params.zero_grad()
        objective.backward()
        optimizer.step()
        bank = bank_push(bank, [inst.detach() for inst in embeddings])

        val_report = None
        is_last = iteration + 1 == cfg.iterations
        if val_pool and ((iteration + 1) % cfg.eval_interval == 0 or is_last):
            val_report, _ = evaluate_agent(agent, val_pool, cfg)
        rows.append(_format_row(iteration, components["L_IL"], components["L_RL"],
                                components["L_IH"], components["L_LO"],
                                total_value, val_report))
    return TrainResult(agent=agent, log_rows=rows, bank=bank,
                       optimizer_state=optimizer.state_dict(),
                       final_iteration=cfg.iterations,
                       sample_rng_state=rng.bit_generator.state)
