"""POMDP navigation environment.

The latent state tracks the current layer, the focused option, the stack of
selected ancestors, and the per-episode memory store. The agent only sees a
fixed-shape observation: a local panel over the options of the current layer
(scent and history gated by memory strength), a global panel of the Top-K
remembered cues with their action-path distances, two context scalars, and
the action legality mask.

Actions are integers: 0..N_max-1 focus a slot (Visit), N_max drills into the
focused option or finishes on the target (Select), N_max+1 goes back up one
level (Return). Every step costs ``step_cost``; reaching the target adds
``reward_success`` on top, so an episode's return is exactly
``reward_success * success - step_cost * steps``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .ia import Layout, action_path_cost
from .memory import MemoryParams, MemoryStore, select_global_panel, strength


class IllegalAction(ValueError):
    pass


class EpisodeFinished(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    t_max: int = 100
    n_max: int = 12
    panel_rows: int = 5  # global-panel display rows; k_glob fills at most this many
    reward_success: float = 20.0
    step_cost: float = 0.01

    @property
    def n_actions(self) -> int:
        return self.n_max + 2

    @property
    def select_action(self) -> int:
        return self.n_max

    @property
    def return_action(self) -> int:
        return self.n_max + 1


def action_name(action: int, cfg: EnvConfig) -> str:
    if 0 <= action < cfg.n_max:
        return f"visit:{action}"
    if action == cfg.select_action:
        return "select"
    if action == cfg.return_action:
        return "return"
    raise IllegalAction(f"action id {action} outside the action space")


# Display buckets for view/click counts: 0, 1, 2, 3+ map to 0, 1/3, 2/3, 1.
def _bucket(count: int) -> float:
    return min(count, 3) / 3.0


@dataclass
class Observation:
    local: np.ndarray        # (n_max, 3): revealed scent, view bucket, click bucket
    global_panel: np.ndarray  # (panel_rows, 2): revealed scent, normalized distance
    context: np.ndarray      # (2,): normalized depth, step fraction
    mask: np.ndarray         # (n_max + 2,) bool

    def vector(self) -> np.ndarray:
        """Flat policy input; mask bits ride along as 0/1 features."""
        return np.concatenate(
            [
                self.local.ravel(),
                self.global_panel.ravel(),
                self.context,
                self.mask.astype(np.float64),
            ]
        )

    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        h.update(self.local.tobytes())
        h.update(self.global_panel.tobytes())
        h.update(self.context.tobytes())
        h.update(self.mask.tobytes())
        return h.hexdigest()


def observation_size(cfg: EnvConfig) -> int:
    return cfg.n_max * 3 + cfg.panel_rows * 2 + 2 + cfg.n_actions


@dataclass
class StepRecord:
    t: int
    action: int
    focused_id: Optional[int]
    reward: float
    layer_path: tuple[int, ...]
    revealed_scent: Optional[float]
    panel_hash: str

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "action": self.action,
            "focused_id": self.focused_id,
            "reward": self.reward,
            "layer_path": list(self.layer_path),
            "revealed_scent": self.revealed_scent,
            "panel_hash": self.panel_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        return cls(
            t=d["t"],
            action=d["action"],
            focused_id=d["focused_id"],
            reward=d["reward"],
            layer_path=tuple(d["layer_path"]),
            revealed_scent=d["revealed_scent"],
            panel_hash=d["panel_hash"],
        )


@dataclass
class EpisodeLog:
    """Ordered record of one episode, sufficient to replay it bit for bit."""

    layout_hash: str
    target: int
    seed: int
    t_max: int
    n_max: int
    success: bool
    steps: int
    ep_return: float
    records: list[StepRecord] = field(default_factory=list)
    condition: Optional[str] = None
    goal_index: Optional[int] = None

    def actions(self) -> list[int]:
        return [r.action for r in self.records]

    def meta_dict(self) -> dict:
        return {
            "layout_hash": self.layout_hash,
            "target": self.target,
            "seed": self.seed,
            "t_max": self.t_max,
            "n_max": self.n_max,
            "success": self.success,
            "steps": self.steps,
            "return": self.ep_return,
            "condition": self.condition,
            "goal_index": self.goal_index,
        }

    def to_json_lines(self) -> list[str]:
        lines = [json.dumps({"episode": self.meta_dict()}, sort_keys=True)]
        lines.extend(json.dumps(r.to_dict(), sort_keys=True) for r in self.records)
        return lines


def logs_to_jsonl(logs: Iterable[EpisodeLog]) -> str:
    out = []
    for log in logs:
        out.extend(log.to_json_lines())
    return "\n".join(out) + "\n"


def logs_from_jsonl(text: str) -> list[EpisodeLog]:
    logs: list[EpisodeLog] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if "episode" in d:
            m = d["episode"]
            logs.append(
                EpisodeLog(
                    layout_hash=m["layout_hash"],
                    target=m["target"],
                    seed=m["seed"],
                    t_max=m["t_max"],
                    n_max=m["n_max"],
                    success=m["success"],
                    steps=m["steps"],
                    ep_return=m["return"],
                    condition=m.get("condition"),
                    goal_index=m.get("goal_index"),
                )
            )
        else:
            if not logs:
                raise ValueError("step record before any episode header")
            logs[-1].records.append(StepRecord.from_dict(d))
    return logs


def save_logs(path, logs: Iterable[EpisodeLog]) -> None:
    with open(path, "w") as f:
        f.write(logs_to_jsonl(logs))


def load_logs(path) -> list[EpisodeLog]:
    with open(path) as f:
        return logs_from_jsonl(f.read())


class NavigationEnv:
    """One episode at a time over a fixed layout.

    The environment owns its RNG; noise draws happen only on Visit, one
    standard-normal sample each, so runs with equal seeds and action sequences
    coincide exactly regardless of sigma.
    """

    def __init__(self, layout: Layout, params: MemoryParams, cfg: EnvConfig = EnvConfig()):
        if layout.n_max > cfg.n_max:
            raise ValueError(
                f"layout allows layers up to {layout.n_max} options, env only {cfg.n_max}"
            )
        self.layout = layout
        self.params = params
        self.cfg = cfg
        self._started = False

    # -- state ------------------------------------------------------------

    def reset(self, seed: int, goal: Optional[int] = None) -> Observation:
        target = self.layout.target_id if goal is None else goal
        node = self.layout.node(target)
        if not node.is_leaf:
            raise ValueError(f"goal {target} is not a leaf")
        self.target = target
        self.path_stack: list[int] = []
        self.current_layer: tuple[int, ...] = self.layout.root_layer
        self.focus: Optional[int] = None
        self.step_count = 0
        self.memory = MemoryStore()
        self.rng = np.random.default_rng(np.random.SeedSequence(seed & (2**64 - 1)))
        self.done = False
        self.success = False
        self._seed = seed
        self._records: list[StepRecord] = []
        self._started = True
        return self.build_observation()

    @property
    def focused_node(self) -> Optional[int]:
        if self.focus is None:
            return None
        return self.current_layer[self.focus]

    # -- action legality ---------------------------------------------------

    def legal_actions(self) -> np.ndarray:
        if self.done:
            raise EpisodeFinished("episode is over")
        mask = np.zeros(self.cfg.n_actions, dtype=bool)
        mask[: len(self.current_layer)] = True
        mask[self.cfg.select_action] = self.focus is not None
        mask[self.cfg.return_action] = bool(self.path_stack)
        return mask

    # -- transition ---------------------------------------------------------

    def step(self, action: int) -> "StepOutcome":
        if not self._started:
            raise RuntimeError("call reset() first")
        if self.done:
            raise EpisodeFinished("episode is over")
        mask = self.legal_actions()
        if not (0 <= action < self.cfg.n_actions) or not mask[action]:
            raise IllegalAction(f"action {action} is masked in the current state")

        t = self.step_count + 1
        reward = -self.cfg.step_cost
        revealed: Optional[float] = None
        event = ""
        node: Optional[int] = None

        if action < self.cfg.n_max:  # Visit
            self.focus = action
            node = self.current_layer[action]
            z = self.rng.standard_normal()
            psi = self.layout.scent(node) + self.params.sigma * z
            revealed = min(1.0, max(0.0, psi))
            trace = self.memory.record_event(node, "view", t)
            trace.revealed_scent = revealed
            event = "visit"
        elif action == self.cfg.select_action:
            node = self.current_layer[self.focus]
            self.memory.record_event(node, "click", t)
            if node == self.target:
                reward = self.cfg.reward_success - self.cfg.step_cost
                self.done = True
                self.success = True
                event = "success"
            elif not self.layout.node(node).is_leaf:
                self.path_stack.append(node)
                self.current_layer = self.layout.node(node).children
                self.focus = None
                event = "descend"
            else:
                event = "wrong_click"
        else:  # Return
            node = self.path_stack.pop()
            parent = self.path_stack[-1] if self.path_stack else None
            self.current_layer = self.layout.layer_options(parent)
            self.focus = None
            event = "return"

        self.step_count = t
        if t >= self.cfg.t_max and not self.success:
            self.done = True

        obs = self.build_observation()
        self._records.append(
            StepRecord(
                t=t,
                action=action,
                focused_id=node,
                reward=reward,
                layer_path=tuple(self.path_stack),
                revealed_scent=revealed,
                panel_hash=obs.digest(),
            )
        )
        info = {"event": event, "node": node, "success": self.success}
        return StepOutcome(observation=obs, reward=reward, done=self.done, info=info)

    # -- observation --------------------------------------------------------

    def build_observation(self) -> Observation:
        p = self.params
        now = self.step_count
        local = np.zeros((self.cfg.n_max, 3), dtype=np.float64)
        for slot, nid in enumerate(self.current_layer):
            trace = self.memory.get(nid)
            if trace is None:
                continue
            if strength(trace, now, p, self.layout.scent(nid)) < p.theta:
                continue
            local[slot, 0] = trace.revealed_scent or 0.0
            local[slot, 1] = _bucket(trace.views)
            local[slot, 2] = _bucket(trace.clicks)

        glob = np.zeros((self.cfg.panel_rows, 2), dtype=np.float64)
        chosen = select_global_panel(self.memory, now, p, self.layout)
        focus_node = self.focused_node
        for row, nid in enumerate(chosen[: self.cfg.panel_rows]):
            trace = self.memory.get(nid)
            cost = action_path_cost(self.layout, self.path_stack, focus_node, nid)
            glob[row, 0] = trace.revealed_scent or 0.0
            glob[row, 1] = cost / self.layout.d_max

        depth_span = max(1, self.layout.depth_max - 1)
        context = np.array(
            [len(self.path_stack) / depth_span, self.step_count / self.cfg.t_max],
            dtype=np.float64,
        )
        mask = (
            self.legal_actions()
            if not self.done
            else np.zeros(self.cfg.n_actions, dtype=bool)
        )
        return Observation(local=local, global_panel=glob, context=context, mask=mask)

    # -- logging ------------------------------------------------------------

    def episode_log(self, condition: Optional[str] = None, goal_index: Optional[int] = None) -> EpisodeLog:
        return EpisodeLog(
            layout_hash=self.layout.content_hash(),
            target=self.target,
            seed=self._seed,
            t_max=self.cfg.t_max,
            n_max=self.cfg.n_max,
            success=self.success,
            steps=self.step_count,
            ep_return=self.episode_return(),
            records=list(self._records),
            condition=condition,
            goal_index=goal_index,
        )

    def episode_return(self) -> float:
        """Exact return: success bonus minus one step cost per action taken.

        The per-step rewards in the log sum to the same value up to float
        summation order; tests verify both sides against each other.
        """
        return self.cfg.reward_success * self.success - self.cfg.step_cost * self.step_count


@dataclass
class StepOutcome:
    observation: Observation
    reward: float
    done: bool
    info: dict


def replay_episode(
    layout: Layout, params: MemoryParams, cfg: EnvConfig, log: EpisodeLog
) -> bool:
    """Re-run a logged episode and verify every recorded hash and reward."""
    env = NavigationEnv(layout, params, cfg)
    env.reset(seed=log.seed, goal=log.target)
    for rec in log.records:
        out = env.step(rec.action)
        if out.observation.digest() != rec.panel_hash:
            raise AssertionError(f"panel hash mismatch at t={rec.t}")
        if out.reward != rec.reward:
            raise AssertionError(f"reward mismatch at t={rec.t}")
    if env.success != log.success or env.step_count != log.steps:
        raise AssertionError("episode summary mismatch after replay")
    return True


def random_policy(obs: Observation, rng: np.random.Generator) -> int:
    """Uniform choice over legal actions; the reference lower baseline."""
    legal = np.flatnonzero(obs.mask)
    return int(legal[rng.integers(len(legal))])


def rollout(
    env: NavigationEnv,
    choose: Callable[[Observation], int],
    seed: int,
    goal: Optional[int] = None,
    condition: Optional[str] = None,
    goal_index: Optional[int] = None,
) -> EpisodeLog:
    """Run one full episode driven by ``choose`` and return its log."""
    obs = env.reset(seed=seed, goal=goal)
    while not env.done:
        out = env.step(choose(obs))
        obs = out.observation
    return env.episode_log(condition=condition, goal_index=goal_index)
