"""Push-to-lift agent: patch extraction, epsilon-greedy actions over the
8x32x32 Q-map, the push-or-lift episode loop, and DQN training with uniform
experience replay and a periodically synced target network."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .affordance import SurrogateParams, compute_affordance
from .metric import MetricParams, MetricReport, compute_metric, reward
from .scene import (ImageMeta, NoObjectError, RgbdImage, Scene, apply_push, pixel_to_world,
                    remove_object, render)

log = logging.getLogger(__name__)

WINDOW = 128
FACTOR = 4
DEPTH_SCALE = 0.3  # m


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.6
    eps_start: float = 1.0
    eps_end: float = 0.2
    eps_decay_episodes: int | None = None  # None: first 60% of episodes
    lr_start: float = 1e-3
    lr_end: float = 2.5e-4
    momentum: float = 0.9
    delta: float = 0.01
    phi_threshold: float = 0.85
    max_ops: int = 30
    success_removals: int = 5
    replay_capacity: int = 10_000
    batch_size: int = 16
    target_sync_interval: int = 200
    episodes: int = 300
    train_every: int = 1  # operations per gradient step
    augment: bool = False  # store all 8 rotations/reflections of each transition
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        if not 0.0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")
        for name in ("max_ops", "success_removals", "replay_capacity", "batch_size",
                     "target_sync_interval", "episodes", "train_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def linear_schedule(start: float, end: float, length: int, t: int) -> float:
    """``start`` at t=0, ``end`` from t=length-1 on, linear in between."""
    if length <= 1:
        return end
    if t >= length - 1:
        return end
    t = max(t, 0)
    return start + (end - start) * t / (length - 1)


def epsilon_at(cfg: TrainConfig, episode: int) -> float:
    n = cfg.eps_decay_episodes or max(1, int(round(0.6 * cfg.episodes)))
    return linear_schedule(cfg.eps_start, cfg.eps_end, n, episode)


# ---------------------------------------------------------------- patches & actions

@dataclass
class Patch:
    data: np.ndarray                # (4, 32, 32)
    origin: tuple[int, int]         # full-res pixel of the window's top-left (may be negative)
    p_M: tuple[int, int]
    factor: int = FACTOR


def crop_patch(image: RgbdImage, p_M) -> Patch:
    r, c = int(p_M[0]), int(p_M[1])
    H, W = image.shape
    if not (0 <= r < H and 0 <= c < W):
        raise ValueError(f"p_M {p_M} outside the {H}x{W} image")
    r0, c0 = r - WINDOW // 2, c - WINDOW // 2
    stack = np.zeros((4, WINDOW, WINDOW))
    rs, re = max(r0, 0), min(r0 + WINDOW, H)
    cs, ce = max(c0, 0), min(c0 + WINDOW, W)
    src = np.concatenate([image.color[rs:re, cs:ce].transpose(2, 0, 1),
                          image.depth[None, rs:re, cs:ce] / DEPTH_SCALE])
    stack[:, rs - r0:re - r0, cs - c0:ce - c0] = src
    n = WINDOW // FACTOR
    data = stack.reshape(4, n, FACTOR, n, FACTOR).mean(axis=(2, 4))
    return Patch(data, (r0, c0), (r, c))


@dataclass(frozen=True)
class PushActionChoice:
    direction_index: int
    patch_pixel: tuple[int, int]
    q_value: float = 0.0

    def __post_init__(self):
        n = WINDOW // FACTOR
        if not 0 <= self.direction_index < nn.N_HEADS:
            raise ValueError(f"direction {self.direction_index} outside [0, 8)")
        if not all(0 <= x < n for x in self.patch_pixel):
            raise ValueError(f"patch pixel {self.patch_pixel} outside the {n}x{n} grid")


def _choice_from_flat(q: np.ndarray, flat: int) -> PushActionChoice:
    d, u, v = np.unravel_index(flat, q.shape)
    return PushActionChoice(int(d), (int(u), int(v)), float(q[d, u, v]))


def select_action(q: np.ndarray, eps: float, rng: np.random.Generator) -> PushActionChoice:
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must be in [0, 1]")
    if eps > 0.0 and rng.random() < eps:
        return _choice_from_flat(q, int(rng.integers(q.size)))
    return _choice_from_flat(q, int(np.argmax(q)))  # argmax keeps the lowest flat index


def action_to_push(patch: Patch, choice: PushActionChoice, meta: ImageMeta,
                   workspace=None) -> tuple[tuple[float, float], int, float]:
    """World push ``(start, direction, distance)`` for a Q-map cell.

    A cell maps to the full-resolution pixel at its anchor, ``origin + 4 * cell``,
    so the patch-centre cell lands exactly on p_M. Starts beyond the image are
    clamped onto the workspace boundary.
    """
    u, v = choice.patch_pixel
    r = patch.origin[0] + patch.factor * u
    c = patch.origin[1] + patch.factor * v
    x = meta.origin[0] + (c + 0.5) * meta.pixel_size
    y = meta.origin[1] + (r + 0.5) * meta.pixel_size
    if workspace is None:
        workspace = (meta.origin[0], meta.origin[0] + meta.width * meta.pixel_size,
                     meta.origin[1], meta.origin[1] + meta.height * meta.pixel_size)
    x = min(max(x, workspace[0]), workspace[1])
    y = min(max(y, workspace[2]), workspace[3])
    distance = (WINDOW // 2) * meta.pixel_size
    return (x, y), choice.direction_index, distance


# ---------------------------------------------------------------- policies

Policy = Callable[[Patch, np.random.Generator], PushActionChoice]


def random_policy(patch: Patch, rng: np.random.Generator) -> PushActionChoice:
    shape = (nn.N_HEADS, WINDOW // FACTOR, WINDOW // FACTOR)
    return _choice_from_flat(np.zeros(shape), int(rng.integers(np.prod(shape))))


@dataclass
class GreedyPolicy:
    net: nn.QNetwork
    eps: float = 0.0

    def __call__(self, patch: Patch, rng: np.random.Generator) -> PushActionChoice:
        return select_action(nn.q_forward(self.net, patch.data), self.eps, rng)


# ---------------------------------------------------------------- episodes

@dataclass
class Transition:
    patch: np.ndarray
    action: PushActionChoice
    reward: int
    next_patch: np.ndarray
    terminal: bool

    def __post_init__(self):
        if self.reward not in (-1, 1):
            raise ValueError("reward must be +1 or -1")


@dataclass
class EpisodeLog:
    records: list = field(default_factory=list)
    transitions: list = field(default_factory=list)
    operations: int = 0
    removals: int = 0
    success: bool = False
    phi_increments: list = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path


@dataclass
class Frame:
    image: RgbdImage
    report: MetricReport


def observe(scene: Scene, metric: MetricParams | None = None,
            surrogate: SurrogateParams | None = None) -> Frame:
    image = render(scene)
    return Frame(image, compute_metric(compute_affordance(image, surrogate), metric))


def _record(step, rep: MetricReport, action=None, rew=None, removed=False) -> dict:
    return {"step": step, "phi": rep.phi, "phi_f": rep.phi_f, "phi_d": rep.phi_d,
            "v_M": rep.v_M,
            "action": None if action is None else {"dir": action.direction_index,
                                                   "u": action.patch_pixel[0],
                                                   "v": action.patch_pixel[1]},
            "reward": rew, "removed": removed}


def run_episode(scene: Scene, policy: Policy, cfg: TrainConfig, rng: np.random.Generator,
                metric: MetricParams | None = None,
                surrogate: SurrogateParams | None = None,
                keep_transitions: bool = False) -> EpisodeLog:
    """Lift while the map is trustworthy, push otherwise.

    The episode succeeds at ``cfg.success_removals`` lifts and fails once
    ``cfg.max_ops`` pushes are spent; lifts are not counted as operations.
    """
    ep = EpisodeLog()
    frame = observe(scene, metric, surrogate)
    step = 0
    while True:
        rep = frame.report
        if rep.degenerate:
            ep.records.append(_record(step, rep))
            break
        if rep.phi > cfg.phi_threshold:
            try:
                scene = remove_object(scene, pixel_to_world(frame.image.meta, rep.p_M))
            except NoObjectError:
                break
            ep.removals += 1
            ep.records.append(_record(step, rep, removed=True))
            step += 1
            if ep.removals >= cfg.success_removals:
                ep.success = True
                break
            frame = observe(scene, metric, surrogate)
            continue
        if ep.operations >= cfg.max_ops:
            ep.records.append(_record(step, rep))
            break
        patch = crop_patch(frame.image, rep.p_M)
        choice = policy(patch, rng)
        start, d, dist = action_to_push(patch, choice, frame.image.meta, scene.workspace)
        pushed = apply_push(scene, start, d, dist)
        ep.operations += 1
        if pushed is not scene:
            scene = pushed
            frame = observe(scene, metric, surrogate)
        new = frame.report
        r = reward(rep.phi, new.phi, cfg.delta)
        ep.phi_increments.append(new.phi - rep.phi)
        ep.records.append(_record(step, rep, choice, r))
        step += 1
        if keep_transitions:
            terminal = (new.degenerate or new.phi > cfg.phi_threshold
                        or ep.operations >= cfg.max_ops)
            nxt = (np.zeros_like(patch.data) if new.degenerate
                   else crop_patch(frame.image, new.p_M).data)
            ep.transitions.append(Transition(patch.data, choice, r, nxt, terminal))
    return ep


def dihedral_variants(t: Transition) -> list[Transition]:
    """The transition under the 8 symmetries of the square patch.

    Rotating the patch a quarter turn (``np.rot90`` over the spatial axes) takes
    cell (u, v) to (n-1-v, u) and turns every push by -90 degrees; mirroring
    columns takes v to n-1-v and reflects the direction about the y axis.
    The identity comes first.
    """
    n = t.patch.shape[-1]
    out = []
    for flip in (False, True):
        p, q = t.patch, t.next_patch
        d = t.action.direction_index
        u, v = t.action.patch_pixel
        if flip:
            p, q, v, d = p[:, :, ::-1], q[:, :, ::-1], n - 1 - v, (4 - d) % 8
        for _ in range(4):
            out.append(Transition(np.ascontiguousarray(p), PushActionChoice(d, (u, v)), t.reward,
                                  np.ascontiguousarray(q), t.terminal))
            p, q = np.rot90(p, axes=(1, 2)), np.rot90(q, axes=(1, 2))
            u, v, d = n - 1 - v, u, (d - 2) % 8
    return out


# ---------------------------------------------------------------- replay & learning

class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions with uniform sampling."""

    def __init__(self, capacity: int, shape=(4, 32, 32)):
        self.capacity = capacity
        self.patch = np.zeros((capacity, *shape))
        self.next_patch = np.zeros((capacity, *shape))
        self.action = np.zeros((capacity, 3), dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.stamp = np.zeros(capacity, dtype=np.int64)  # bumps whenever a slot is rewritten
        self.size = 0
        self._pos = 0

    def __len__(self) -> int:
        return self.size

    def add(self, t: Transition) -> None:
        i = self._pos
        self.patch[i] = t.patch
        self.next_patch[i] = t.next_patch
        self.action[i] = (t.action.direction_index, *t.action.patch_pixel)
        self.reward[i] = t.reward
        self.terminal[i] = t.terminal
        self.stamp[i] += 1
        self._pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=n)


class Learner:
    """Online network, target network and optimiser state."""

    def __init__(self, cfg: TrainConfig, total_steps: int, net: nn.QNetwork | None = None):
        self.cfg = cfg
        self.net = net or nn.QNetwork.init(cfg.seed)
        self.target = self.net.copy()
        self.opt = [nn.RMSPropState() for _ in self.net.heads]
        self.total_steps = max(1, total_steps)
        self.steps = 0
        # max_a Q_target(s', a) per replay slot; valid until the slot or the target changes
        self._qmax = {}

    def lr(self) -> float:
        return linear_schedule(self.cfg.lr_start, self.cfg.lr_end, self.total_steps, self.steps)

    def td_targets(self, buf: ReplayBuffer, idx: np.ndarray) -> np.ndarray:
        y = buf.reward[idx].copy()
        live = np.flatnonzero(~buf.terminal[idx])
        stale = sorted({int(i) for i in idx[live]
                        if self._qmax.get(int(i), (None,))[0] != buf.stamp[i]})
        if stale:
            q_next = self.target.forward(buf.next_patch[stale])
            for i, q in zip(stale, q_next.reshape(len(stale), -1).max(axis=1)):
                self._qmax[i] = (buf.stamp[i], float(q))
        for k in live:
            y[k] += self.cfg.gamma * self._qmax[int(idx[k])][1]
        return y

    def step(self, buf: ReplayBuffer, rng: np.random.Generator) -> float:
        """One gradient step on a uniform minibatch; returns the mean loss."""
        idx = buf.sample(self.cfg.batch_size, rng)
        y = self.td_targets(buf, idx)
        acts = buf.action[idx]
        n = len(idx)
        total = 0.0
        lr = self.lr()
        for d, head in enumerate(self.net.heads):
            sel = np.flatnonzero(acts[:, 0] == d)
            if sel.size:
                out, cache = head.forward(buf.patch[idx[sel]])
                rows = np.arange(sel.size)
                pred = out[rows, 0, acts[sel, 1], acts[sel, 2]]
                loss, g = nn.td_loss(pred, y[sel])
                total += float(loss.sum())
                gout = np.zeros_like(out)
                gout[rows, 0, acts[sel, 1], acts[sel, 2]] = g / n
                grads, _ = head.backward(cache, gout)
            else:
                grads = {k: np.zeros_like(v) for k, v in head.params.items()}
            nn.rmsprop_step(head.params, grads, self.opt[d], lr, self.cfg.momentum)
        mean = total / n
        if not math.isfinite(mean):
            raise nn.NonFiniteError(f"non-finite TD loss at step {self.steps}: targets {y}")
        self.steps += 1
        if self.steps % self.cfg.target_sync_interval == 0:
            self.target = self.net.copy()
            self._qmax.clear()
        return mean


@dataclass
class CurvePoint:
    episode: int
    mean_reward_100: float
    success_rate_100: float
    epsilon: float
    lr: float


@dataclass
class TrainResult:
    net: nn.QNetwork
    curves: list
    seconds: float


def curves_csv(curves: Sequence[CurvePoint]) -> str:
    lines = ["episode,mean_reward_100,success_rate_100,epsilon,lr"]
    for c in curves:
        lines.append(f"{c.episode},{c.mean_reward_100:.6f},{c.success_rate_100:.6f},"
                     f"{c.epsilon:.6f},{c.lr:.8f}")
    return "\n".join(lines) + "\n"


def expected_steps(cfg: TrainConfig, ops_per_episode: float = 20.0) -> int:
    """Step horizon for the learning-rate schedule."""
    return max(1, int(cfg.episodes * ops_per_episode / cfg.train_every))


EpisodeRunner = Callable[[Policy, np.random.Generator], EpisodeLog]


def train_loop(cfg: TrainConfig, run: Callable[[int, Policy, np.random.Generator], EpisodeLog],
               total_steps: int, progress: Callable[[CurvePoint], None] | None = None,
               ) -> TrainResult:
    """Generic DQN loop; ``run(episode, policy, rng)`` plays one episode."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    learner = Learner(cfg, total_steps)
    buf = ReplayBuffer(cfg.replay_capacity)
    rewards, wins, curves = [], [], []
    pending = 0
    for episode in range(cfg.episodes):
        policy = GreedyPolicy(learner.net, epsilon_at(cfg, episode))
        ep = run(episode, policy, rng)
        for t in ep.transitions:
            for v in dihedral_variants(t) if cfg.augment else (t,):
                buf.add(v)
            pending += 1
            while pending >= cfg.train_every and len(buf) >= cfg.batch_size:
                learner.step(buf, rng)
                pending -= cfg.train_every
        rs = [r["reward"] for r in ep.records if r["reward"] is not None]
        rewards.append(float(np.mean(rs)) if rs else 0.0)
        wins.append(1.0 if ep.success else 0.0)
        point = CurvePoint(episode, float(np.mean(rewards[-100:])), float(np.mean(wins[-100:])),
                           policy.eps, learner.lr())
        curves.append(point)
        if progress:
            progress(point)
    return TrainResult(learner.net, curves, time.perf_counter() - t0)


def train(cfg: TrainConfig, scene_suite: Sequence[Scene],
          metric: MetricParams | None = None, surrogate: SurrogateParams | None = None,
          progress=None) -> TrainResult:
    """DQN on the push-or-lift task, cycling through a shuffled scene suite."""
    if not scene_suite:
        raise ValueError("empty scene suite")
    order = np.random.default_rng([cfg.seed, 1]).permutation(len(scene_suite))

    def run(episode, policy, rng):
        scene = scene_suite[order[episode % len(order)]]
        return run_episode(scene, policy, cfg, rng, metric, surrogate, keep_transitions=True)

    return train_loop(cfg, run, expected_steps(cfg), progress)


# ---------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class EvalStats:
    avg_operations: float
    avg_phi_increment_per_push: float
    test_success_rate: float
    episodes: int

    def to_dict(self) -> dict:
        return asdict(self)


def episode_seed(base: int, index: int) -> np.random.Generator:
    return np.random.default_rng([base, index])


def evaluate(policy: Policy, scene_suite: Sequence[Scene], cfg: TrainConfig,
             metric: MetricParams | None = None, surrogate: SurrogateParams | None = None,
             workers: int = 1) -> EvalStats:
    """Aggregate the three comparison metrics over a suite (one episode per scene).

    Each episode draws from its own seed-keyed generator, so the result does
    not depend on ``workers``.
    """
    if not scene_suite:
        raise ValueError("empty scene suite")

    def one(i):
        ep = run_episode(scene_suite[i], policy, cfg, episode_seed(cfg.seed, i), metric, surrogate)
        return ep.operations, ep.phi_increments, ep.success

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, range(len(scene_suite))))
    else:
        results = [one(i) for i in range(len(scene_suite))]
    ops = [r[0] for r in results]
    incs = [x for r in results for x in r[1]]
    wins = [r[2] for r in results]
    return EvalStats(float(np.mean(ops)), float(np.mean(incs)) if incs else 0.0,
                     float(np.mean(wins)), len(results))
