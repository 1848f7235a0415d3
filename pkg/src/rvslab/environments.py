"""Built-in desk-scale environments and the scripted collectors that feed them.

All dynamics are deterministic pure functions of ``(state, action)``;
randomness lives only in resets (seeded) and in the behavior policies.

FourRooms     11x11 grid, four rooms joined by two-cell doorways, 5 actions.
PointReach    point in [0, 10]^2 driven by a velocity in [-1, 1]^2.
TwoModeLine   1-D track; the action is a speed in [0, 1] and is also the reward.
StitchMaze    15x15 walls with an L-shaped corridor visiting waypoints A, B, C.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from rvslab.seeding import derive_rng, derive_seed
from rvslab.trajectory_data import Dataset, Trajectory

HORIZON = 50

UP, DOWN, LEFT, RIGHT, STAY = range(5)
MOVES = {UP: (0, 1), DOWN: (0, -1), LEFT: (-1, 0), RIGHT: (1, 0), STAY: (0, 0)}


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class Discrete:
    n: int

    def to_dict(self):
        return {"type": "discrete", "n": self.n}


@dataclass(frozen=True)
class Box:
    low: tuple[float, ...]
    high: tuple[float, ...]

    @property
    def dims(self) -> int:
        return len(self.low)

    def to_dict(self):
        return {"type": "box", "low": list(self.low), "high": list(self.high)}


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    state_dim: int
    action_space: Discrete | Box
    horizon: int
    goal_extractor: str | None
    random_return: float
    expert_return: float
    goal_space: str
    success_radius: float = 0.0
    terminate_on_goal: bool = True

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.expert_return > self.random_return:
            raise ValueError("expert reference must exceed random reference")

    @property
    def action_dim(self) -> int:
        return 1 if isinstance(self.action_space, Discrete) else self.action_space.dims

    def to_dict(self) -> dict:
        return {
            "env_id": self.env_id,
            "state_dim": self.state_dim,
            "action_space": self.action_space.to_dict(),
            "horizon": self.horizon,
            "goal_extractor": self.goal_extractor,
            "reference_scores": {"random_return": self.random_return, "expert_return": self.expert_return},
            "goal_space": self.goal_space,
            "success_radius": self.success_radius,
            "terminate_on_goal": self.terminate_on_goal,
        }


@dataclass(frozen=True)
class EnvState:
    env_id: str
    obs: tuple[float, ...]
    elapsed: int = 0
    goal: tuple[float, ...] | None = None
    done: bool = False
    reached: bool = False
    clipped: int = 0

    def observation(self) -> np.ndarray:
        return np.array(self.obs, dtype=np.float64)


# ---------------------------------------------------------------------------
# Base class


class Env:
    spec: EnvSpec
    scripted_policies: tuple[str, ...] = ()

    def reset(self, seed: int, goal=None, start=None) -> EnvState:
        goal = None if goal is None else self.validate_goal(goal)
        obs = self.validate_start(start) if start is not None else self.sample_start(derive_rng(seed, "reset"))
        reached = goal is not None and self.goal_reached(obs, goal)
        done = reached and self.spec.terminate_on_goal
        return EnvState(self.spec.env_id, obs, 0, goal, done, reached)

    def step(self, state: EnvState, action) -> tuple[EnvState, float, bool]:
        if state.done:
            raise EnvError("cannot step an episode that is already done")
        if state.env_id != self.spec.env_id:
            raise EnvError(f"state belongs to {state.env_id}, not {self.spec.env_id}")
        action = np.atleast_1d(np.asarray(action, dtype=np.float64))
        obs, reward, clipped = self.transition(state.obs, action)
        reached_now = state.goal is not None and self.goal_reached(obs, state.goal)
        if reached_now and self.spec.terminate_on_goal:
            reward += 1.0
        elapsed = state.elapsed + 1
        done = (reached_now and self.spec.terminate_on_goal) or elapsed >= self.spec.horizon
        new = EnvState(state.env_id, obs, elapsed, state.goal, done, state.reached or reached_now, state.clipped + clipped)
        return new, float(reward), done

    def goal_reached(self, obs, goal) -> bool:
        g = np.asarray(goal, dtype=np.float64)
        achieved = self.extract_goal(np.asarray(obs, dtype=np.float64))
        return bool(np.linalg.norm(achieved - g) <= self.spec.success_radius + 1e-12)

    def extract_goal(self, obs: np.ndarray) -> np.ndarray:
        from rvslab.trajectory_data import get_goal_extractor

        return get_goal_extractor(self.spec.goal_extractor or "identity")(obs)

    def random_action(self, rng: np.random.Generator) -> np.ndarray:
        space = self.spec.action_space
        if isinstance(space, Discrete):
            return np.array([float(rng.integers(space.n))])
        return rng.uniform(space.low, space.high)

    # subclass hooks
    def transition(self, obs, action) -> tuple[tuple[float, ...], float, int]:
        raise NotImplementedError

    def sample_start(self, rng) -> tuple[float, ...]:
        raise NotImplementedError

    def validate_start(self, start) -> tuple[float, ...]:
        return tuple(float(x) for x in start)

    def validate_goal(self, goal) -> tuple[float, ...]:
        raise NotImplementedError

    def sample_eval_goal(self, seed: int, **kw) -> tuple[float, ...]:
        raise NotImplementedError

    def expert_action(self, state: EnvState) -> np.ndarray:
        raise NotImplementedError

    def scripted_action(self, policy_id: str, state: EnvState, rng, noise: float, context: dict) -> np.ndarray:
        raise EnvError(f"{self.spec.env_id} has no scripted policy {policy_id!r}")

    def scripted_reset(self, policy_id: str, seed: int) -> tuple[EnvState, dict]:
        return self.reset(seed), {}


# ---------------------------------------------------------------------------
# Grid worlds


class GridEnv(Env):
    """Shared machinery for the two grid worlds: walls, moves, BFS."""

    size: int

    @cached_property
    def free_cells(self) -> list[tuple[int, int]]:
        return [(x, y) for y in range(self.size) for x in range(self.size) if not self.is_wall(x, y)]

    @cached_property
    def _free_set(self) -> frozenset:
        return frozenset(self.free_cells)

    def is_wall(self, x: int, y: int) -> bool:
        raise NotImplementedError

    def is_free(self, x, y) -> bool:
        return (x, y) in self._free_set

    def transition(self, obs, action):
        a = int(round(float(action[0])))
        if a not in MOVES:
            raise EnvError(f"action {a} not in 0..4")
        dx, dy = MOVES[a]
        x, y = int(obs[0]), int(obs[1])
        nx, ny = x + dx, y + dy
        if not self.is_free(nx, ny):
            nx, ny = x, y
        return (float(nx), float(ny)), 0.0, 0

    def sample_start(self, rng):
        x, y = self.free_cells[int(rng.integers(len(self.free_cells)))]
        return (float(x), float(y))

    def validate_start(self, start):
        x, y = (float(v) for v in start)
        if not (x.is_integer() and y.is_integer() and self.is_free(int(x), int(y))):
            raise EnvError(f"start {start} is not a free cell")
        return (x, y)

    def validate_goal(self, goal):
        g = tuple(float(v) for v in np.atleast_1d(goal))
        if len(g) != 2 or not (g[0].is_integer() and g[1].is_integer()) or not self.is_free(int(g[0]), int(g[1])):
            raise EnvError(f"goal {goal} is not a free cell of {self.spec.env_id}")
        return g

    def bfs_distances(self, target: tuple[int, int]) -> dict[tuple[int, int], int]:
        dist = {target: 0}
        queue = deque([target])
        while queue:
            x, y = queue.popleft()
            for dx, dy in ((0, 1), (0, -1), (-1, 0), (1, 0)):
                n = (x + dx, y + dy)
                if n in self._free_set and n not in dist:
                    dist[n] = dist[(x, y)] + 1
                    queue.append(n)
        return dist

    def greedy_action(self, pos, target) -> int:
        """Lowest-numbered action that decreases the BFS distance to ``target``."""
        target = (int(target[0]), int(target[1]))
        dist = self._dist_cache.get(target)
        if dist is None:
            dist = self._dist_cache[target] = self.bfs_distances(target)
        x, y = int(pos[0]), int(pos[1])
        here = dist[(x, y)]
        if here == 0:
            return STAY
        for a in (UP, DOWN, LEFT, RIGHT):
            dx, dy = MOVES[a]
            if dist.get((x + dx, y + dy), here) < here:
                return a
        return STAY

    @cached_property
    def _dist_cache(self) -> dict:
        return {}

    def expert_action(self, state):
        return np.array([float(self.greedy_action(state.obs, state.goal))])

    def render(self, state: EnvState | None = None) -> str:
        rows = []
        for y in reversed(range(self.size)):
            row = []
            for x in range(self.size):
                if state is not None and (x, y) == (int(state.obs[0]), int(state.obs[1])):
                    row.append("@")
                elif state is not None and state.goal is not None and (x, y) == (int(state.goal[0]), int(state.goal[1])):
                    row.append("G")
                else:
                    row.append("#" if self.is_wall(x, y) else ".")
            rows.append("".join(row))
        return "\n".join(rows)


class FourRooms(GridEnv):
    size = 11
    # two-cell doorways in the middle of each inner wall
    doors = frozenset({(5, 2), (5, 3), (5, 7), (5, 8), (2, 5), (3, 5), (7, 5), (8, 5)})
    spec = EnvSpec(
        env_id="four_rooms",
        state_dim=2,
        action_space=Discrete(5),
        horizon=HORIZON,
        goal_extractor="identity",
        random_return=0.151,
        expert_return=1.0,
        goal_space="any free cell (x, y) of the 11x11 grid",
    )

    def is_wall(self, x, y):
        if not (0 <= x < self.size and 0 <= y < self.size):
            return True
        return (x == 5 or y == 5) and (x, y) not in self.doors

    def room_of(self, x, y) -> int | None:
        if x == 5 or y == 5:
            return None
        return (x > 5) + 2 * (y > 5)

    def sample_eval_goal(self, seed, **kw):
        x, y = self.free_cells[int(derive_rng(seed, "eval_goal").integers(len(self.free_cells)))]
        return (float(x), float(y))


class StitchMaze(GridEnv):
    """An L-shaped corridor: A (west end) -> B (north-east corner) -> C (south end).

    Scripted data only ever covers A->B (then holds at B) and B->C (then holds
    at C); reaching C from A requires chaining the two.
    """

    size = 15
    row = 12  # the east-west corridor
    col = 12  # the north-south corridor
    waypoint_a = (1, 12)
    waypoint_b = (12, 12)
    waypoint_c = (12, 1)
    region_a = frozenset((x, 12) for x in range(1, 4))
    region_b = frozenset({(11, 12), (12, 12), (12, 11)})
    region_c = frozenset((12, y) for y in range(1, 4))
    scripted_policies = ("corridor_AB", "corridor_BC")
    spec = EnvSpec(
        env_id="stitch_maze",
        state_dim=2,
        action_space=Discrete(5),
        horizon=HORIZON,
        goal_extractor="identity",
        random_return=0.0,
        expert_return=1.0,
        goal_space="any free corridor cell; the stitching task commands C = (12, 1)",
    )

    def is_wall(self, x, y):
        if not (0 <= x < self.size and 0 <= y < self.size):
            return True
        on_row = y == self.row and 1 <= x <= self.col
        on_col = x == self.col and 1 <= y <= self.row
        return not (on_row or on_col)

    def region(self, name: str) -> frozenset:
        return {"A": self.region_a, "B": self.region_b, "C": self.region_c}[name]

    def sample_start(self, rng):
        cells = sorted(self.region_a)
        x, y = cells[int(rng.integers(len(cells)))]
        return (float(x), float(y))

    def sample_eval_goal(self, seed, stitching: bool = True, **kw):
        if stitching:
            return tuple(float(v) for v in self.waypoint_c)
        x, y = self.free_cells[int(derive_rng(seed, "eval_goal").integers(len(self.free_cells)))]
        return (float(x), float(y))

    def scripted_reset(self, policy_id, seed):
        rng = derive_rng(seed, "scripted_start")
        if policy_id == "corridor_AB":
            cells, target = sorted(self.region_a), self.waypoint_b
        elif policy_id == "corridor_BC":
            cells, target = sorted(self.region_b), self.waypoint_c
        else:
            raise EnvError(f"stitch_maze has no scripted policy {policy_id!r}")
        start = cells[int(rng.integers(len(cells)))]
        return self.reset(seed, start=start), {"target": target}

    def scripted_action(self, policy_id, state, rng, noise, context):
        if noise > 0 and rng.random() < noise:
            return np.array([float(rng.integers(5))])
        return np.array([float(self.greedy_action(state.obs, context["target"]))])

    def visits(self, traj: Trajectory, name: str) -> bool:
        cells = self.region(name)
        return any((int(s[0]), int(s[1])) in cells for s in traj.states)


# ---------------------------------------------------------------------------
# Continuous environments


class PointReach(Env):
    size = 10.0
    spec = EnvSpec(
        env_id="point_reach",
        state_dim=2,
        action_space=Box((-1.0, -1.0), (1.0, 1.0)),
        horizon=HORIZON,
        goal_extractor="xy",
        random_return=0.16,
        expert_return=1.0,
        goal_space="any point of [0, 10]^2",
        success_radius=0.5,
    )

    def transition(self, obs, action):
        if action.shape != (2,):
            raise EnvError(f"point_reach expects a 2-d action, got shape {action.shape}")
        a = np.clip(action, -1.0, 1.0)
        clipped = int(np.any(a != action))
        pos = np.clip(np.asarray(obs) + a, 0.0, self.size)
        return (float(pos[0]), float(pos[1])), 0.0, clipped

    def sample_start(self, rng):
        x, y = rng.uniform(0.0, self.size, size=2)
        return (float(x), float(y))

    def validate_start(self, start):
        s = tuple(float(v) for v in start)
        if len(s) != 2 or not all(0.0 <= v <= self.size for v in s):
            raise EnvError(f"start {start} outside [0, 10]^2")
        return s

    def validate_goal(self, goal):
        g = tuple(float(v) for v in np.atleast_1d(goal))
        if len(g) != 2 or not all(0.0 <= v <= self.size for v in g):
            raise EnvError(f"goal {goal} outside [0, 10]^2")
        return g

    def sample_eval_goal(self, seed, **kw):
        x, y = derive_rng(seed, "eval_goal").uniform(0.0, self.size, size=2)
        return (float(x), float(y))

    def expert_action(self, state):
        return np.clip(np.asarray(state.goal) - np.asarray(state.obs), -1.0, 1.0)


class TwoModeLine(Env):
    """State is (position, last speed). Reward per step is the realized speed.

    A commanded goal is a position; reaching it is recorded but does not end
    the episode, so every episode runs for the full horizon.
    """

    scripted_policies = ("medium", "expert")
    mode_speed = {"medium": 0.5, "expert": 1.0}
    spec = EnvSpec(
        env_id="two_mode_line",
        state_dim=2,
        action_space=Box((0.0,), (1.0,)),
        horizon=HORIZON,
        goal_extractor="first",
        random_return=24.9560468735549,
        expert_return=50.0,
        goal_space="a track position in [0, 50]",
        success_radius=0.5,
        terminate_on_goal=False,
    )

    def transition(self, obs, action):
        if action.shape != (1,):
            raise EnvError(f"two_mode_line expects a 1-d action, got shape {action.shape}")
        speed = float(np.clip(action[0], 0.0, 1.0))
        clipped = int(speed != action[0])
        return (obs[0] + speed, speed), speed, clipped

    def sample_start(self, rng):
        return (0.0, 0.0)

    def validate_goal(self, goal):
        g = tuple(float(v) for v in np.atleast_1d(goal))
        if len(g) != 1 or not 0.0 <= g[0] <= float(self.spec.horizon):
            raise EnvError(f"goal {goal} outside the track [0, {self.spec.horizon}]")
        return g

    def sample_eval_goal(self, seed, **kw):
        return (float(derive_rng(seed, "eval_goal").uniform(0.0, self.spec.horizon)),)

    def expert_action(self, state):
        return np.array([1.0])

    def scripted_action(self, policy_id, state, rng, noise, context):
        if policy_id not in self.mode_speed:
            raise EnvError(f"two_mode_line has no scripted policy {policy_id!r}")
        speed = self.mode_speed[policy_id] + (noise * rng.standard_normal() if noise > 0 else 0.0)
        return np.array([min(max(speed, 0.0), 1.0)])


# the reference constants above are frozen outputs of reference_scores(env_id, 1000, seed=0)
_REGISTRY: dict[str, Env] = {cls.spec.env_id: cls() for cls in (FourRooms, PointReach, TwoModeLine, StitchMaze)}


def env_ids() -> list[str]:
    return sorted(_REGISTRY)


def get_env(env) -> Env:
    if isinstance(env, Env):
        return env
    key = env.env_id if isinstance(env, (EnvSpec, EnvState)) else env
    try:
        return _REGISTRY[key]
    except KeyError:
        raise EnvError(f"unknown environment {key!r}; available: {', '.join(env_ids())}") from None


def get_spec(env) -> EnvSpec:
    return get_env(env).spec


def reset(env, seed: int, goal=None, start=None) -> EnvState:
    return get_env(env).reset(seed, goal, start)


def step(state: EnvState, action) -> tuple[EnvState, float, bool]:
    return get_env(state.env_id).step(state, action)


def sample_eval_goal(env, seed: int, **kw) -> tuple[float, ...]:
    return get_env(env).sample_eval_goal(seed, **kw)


# ---------------------------------------------------------------------------
# Collection


@dataclass
class _Episode:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)

    def add(self, state: EnvState, action, reward):
        self.states.append(state.observation())
        self.actions.append(np.asarray(action, dtype=np.float64))
        self.rewards.append(reward)

    def to_trajectory(self, terminated: bool) -> Trajectory:
        return Trajectory(np.array(self.states), np.array(self.actions), np.array(self.rewards), terminated)


def _run_episode(env: Env, state: EnvState, choose) -> Trajectory:
    ep = _Episode()
    done = state.done
    while not done:
        action = choose(state)
        nxt, reward, done = env.step(state, action)
        ep.add(state, action, reward)
        state = nxt
    return ep.to_trajectory(terminated=len(ep.states) < env.spec.horizon)


def collect_random(env, n_steps: int, seed: int) -> Dataset:
    """Uniform-random actions toward random commanded goals until >= n_steps transitions."""
    env = get_env(env)
    if n_steps < env.spec.horizon:
        raise ValueError(f"n_steps must be at least the horizon ({env.spec.horizon})")
    rng = derive_rng(seed, "collect_random", "actions")
    trajs, total, episode = [], 0, 0
    while total < n_steps:
        ep_seed = derive_seed(seed, "collect_random", episode)
        goal = None
        if env.spec.goal_extractor is not None and env.spec.terminate_on_goal:
            start = env.reset(ep_seed).obs
            k = 0
            while True:
                goal = env.sample_eval_goal(derive_seed(ep_seed, "goal", k), stitching=False)
                if not env.goal_reached(start, goal):
                    break
                k += 1
        state = env.reset(ep_seed, goal)
        traj = _run_episode(env, state, lambda s: env.random_action(rng))
        trajs.append(traj)
        total += len(traj)
        episode += 1
    return Dataset(env.spec.env_id, env.spec.horizon, tuple(trajs),
                   f"collect_random(seed={seed}, n_steps={n_steps})", env.spec.to_dict())


def collect_scripted(env, policy_id: str, n_episodes: int, seed: int, noise: float = 0.0) -> Dataset:
    env = get_env(env)
    if policy_id not in env.scripted_policies:
        raise EnvError(
            f"{env.spec.env_id} has no scripted policy {policy_id!r}; "
            f"available: {', '.join(env.scripted_policies) or 'none'}"
        )
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rng = derive_rng(seed, "collect_scripted", policy_id)
    trajs = []
    for episode in range(n_episodes):
        state, context = env.scripted_reset(policy_id, derive_seed(seed, "collect_scripted", policy_id, episode))
        trajs.append(_run_episode(env, state, lambda s: env.scripted_action(policy_id, s, rng, noise, context)))
    return Dataset(env.spec.env_id, env.spec.horizon, tuple(trajs),
                   f"collect_scripted(policy={policy_id}, seed={seed}, n={n_episodes}, noise={noise})",
                   env.spec.to_dict())


def audit_stitching_dataset(dataset: Dataset) -> list[int]:
    """Indices of trajectories that visit both region A and region C (should be empty)."""
    env = get_env("stitch_maze")
    if dataset.env_id != env.spec.env_id:
        raise EnvError(f"dataset is for {dataset.env_id}, not stitch_maze")
    return [i for i, t in enumerate(dataset) if env.visits(t, "A") and env.visits(t, "C")]


def check_compatible(dataset: Dataset, env) -> None:
    """Raise if a dataset was not collected on (an identical copy of) ``env``."""
    spec = get_spec(env)
    if dataset.env_id != spec.env_id:
        raise EnvError(f"dataset is for {dataset.env_id}, environment is {spec.env_id}")
    if dataset.state_dim != spec.state_dim or dataset.action_dim != spec.action_dim:
        raise EnvError("dataset dimensions do not match the environment")
    if dataset.env_spec is not None and dataset.env_spec != spec.to_dict():
        raise EnvError("dataset was collected with a different environment specification")


def reference_scores(env, n_episodes: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Mean episode return of the uniform-random and the expert policy under the eval protocol."""
    env = get_env(env)
    out = []
    for policy in ("random", "expert"):
        rng = derive_rng(seed, "reference", policy)
        total = 0.0
        for i in range(n_episodes):
            ep_seed = derive_seed(seed, "reference", i)
            goal = env.sample_eval_goal(ep_seed) if env.spec.terminate_on_goal else None
            state = env.reset(ep_seed, goal)
            if state.done:
                total += 1.0
                continue
            choose = (lambda s: env.random_action(rng)) if policy == "random" else env.expert_action
            total += _run_episode(env, state, choose).total_reward
        out.append(total / n_episodes)
    return out[0], out[1]


def with_reference_scores(spec: EnvSpec, random_return: float, expert_return: float) -> EnvSpec:
    return replace(spec, random_return=random_return, expert_return=expert_return)
