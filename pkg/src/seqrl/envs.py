"""Multi-step mutation environments and rollouts.

One :class:`MutationEnv` covers both regimes used for mutation design:

* kinase-style: mask over the mutable sites, terminal-only reward,
  optional termination once fitness beats the starting sequence;
* antibody-style: CDR mask and a reward after every edit.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import json

import numpy as np

from .core import Alphabet, as_sequence
from .exceptions import InvalidAction, InvalidConfig, InvalidInput
from .policy import MutationBatch, atomic_write_text

DEFAULT_FITNESS_BINS = ((0.0, 0.0), (0.0, 1.0), (1.0, 10.0), (10.0, np.inf))


@dataclass
class AnnealSchedule:
    """Linear interpolation from ``start`` to ``end`` over ``horizon_steps``, then flat."""

    start: float = 1.0
    end: float = 0.5
    horizon_steps: int = 1000

    def __post_init__(self):
        if self.horizon_steps < 0:
            raise InvalidInput("horizon_steps must be non-negative")

    def __call__(self, step):
        if self.horizon_steps == 0 or step >= self.horizon_steps:
            return float(self.end)
        h = max(int(step), 0)
        return self.start + (self.end - self.start) * h / self.horizon_steps


@dataclass
class Trajectory:
    """One mutation episode; list fields are parallel, one entry per step."""

    wild_type: np.ndarray
    mask: np.ndarray
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs_old: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    temperatures: list = field(default_factory=list)
    position_temps: list = field(default_factory=list)
    advantages: list = field(default_factory=list)
    returns: list = field(default_factory=list)
    final_state: np.ndarray | None = None
    final_fitness: float = float("nan")
    done: bool = False
    episode_id: int = 0

    def __len__(self):
        return len(self.actions)

    def to_batch(self):
        return MutationBatch(
            np.array(self.states),
            [a[0] for a in self.actions],
            [a[1] for a in self.actions],
            self.wild_type,
            self.mask,
            self.temperatures,
            self.position_temps,
        )


class MutationEnv:
    """Mutation MDP over a pool of starting (wild-type) sequences.

    Parameters
    ----------
    wild_type_pool : sequence of token arrays
        Episodes start from a uniform draw of this pool.
    mask : bool array
        Positions that may be edited.
    reward : callable
        Oracle mapping a sequence to its fitness.
    max_steps : int
        Episode horizon.
    terminate_on_improvement : bool
        End the episode as soon as fitness exceeds the starting fitness.
    terminal_only : bool
        Intermediate rewards are 0 and only the final fitness is paid out.
    """

    def __init__(self, wild_type_pool, mask, reward, max_steps=4, terminate_on_improvement=False,
                 terminal_only=False):
        pool = [as_sequence(s) for s in wild_type_pool]
        if not pool:
            raise InvalidConfig("wild_type_pool must be non-empty")
        length = pool[0].size
        if any(s.size != length for s in pool):
            raise InvalidConfig("all pool sequences must have the same length")
        self.wild_type_pool = np.stack(pool)
        self.mask = np.asarray(mask, dtype=bool)
        if self.mask.shape != (length,):
            raise InvalidConfig(f"mask length {self.mask.size} != sequence length {length}")
        if not self.mask.any():
            raise InvalidConfig("mask must select at least one position")
        if max_steps < 1:
            raise InvalidConfig("max_steps must be >= 1")
        self.reward = reward
        self.max_steps = int(max_steps)
        self.terminate_on_improvement = bool(terminate_on_improvement)
        self.terminal_only = bool(terminal_only)
        self.state = None
        self.wild_type = None
        self.improvement_baseline = float("nan")
        self.t = 0

    @property
    def length(self):
        return self.wild_type_pool.shape[1]

    def clone(self):
        return MutationEnv(self.wild_type_pool, self.mask, self.reward, self.max_steps,
                           self.terminate_on_improvement, self.terminal_only)

    def reset(self, rng, start_index=None):
        """Start an episode from a uniformly drawn (or the given) pool entry."""
        i = int(rng.integers(0, len(self.wild_type_pool))) if start_index is None else int(start_index)
        return self._start(self.wild_type_pool[i])

    def _start(self, seq):
        self.wild_type = as_sequence(seq)
        self.state = self.wild_type
        self.improvement_baseline = float(self.reward(self.state))
        self.t = 0
        return self.state

    def check_action(self, state, action):
        pos, res = int(action[0]), int(action[1])
        if not (0 <= pos < self.length) or not self.mask[pos]:
            raise InvalidAction(f"position {pos} is not editable")
        if res == state[pos]:
            raise InvalidAction(f"residue {res} already present at position {pos}")
        if res == self.wild_type[pos]:
            raise InvalidAction(f"residue {res} is the wild-type residue at position {pos}")
        return pos, res

    def step(self, action):
        """Apply ``(position, residue)``; returns ``(next_state, reward, done)``."""
        if self.state is None:
            raise InvalidConfig("call reset() before step()")
        if self.t >= self.max_steps:
            raise InvalidAction("episode already finished")
        pos, res = self.check_action(self.state, action)
        nxt = np.array(self.state)
        nxt[pos] = res
        nxt = as_sequence(nxt)
        self.t += 1
        fitness = float(self.reward(nxt))
        done = self.t >= self.max_steps or (
            self.terminate_on_improvement and fitness > self.improvement_baseline)
        reward = fitness if (done or not self.terminal_only) else 0.0
        self.state = nxt
        self.last_fitness = fitness
        return nxt, reward, done


def reset(env, rng):
    return env.reset(rng)


def step(env, state, action):
    if env.state is None or not np.array_equal(env.state, state):
        raise InvalidInput("state does not match the environment's current state")
    return env.step(action)


def rollout(env, policy, schedule=None, global_step=0, rng=None, value_fn=None, start_index=None,
            episode_id=0):
    """Run one episode with ``policy``, recording old log-probs and values.

    Both the residue and the position temperatures follow ``schedule`` at
    ``global_step``.
    """
    if policy.length != env.length:
        raise InvalidInput(f"policy length {policy.length} != environment length {env.length}")
    schedule = schedule or AnnealSchedule(1.0, 1.0, 0)
    temp = schedule(global_step)
    state = env.reset(rng, start_index)
    traj = Trajectory(wild_type=env.wild_type, mask=env.mask, episode_id=episode_id)
    done = False
    while not done:
        pos, res, lp = policy.sample_action(state, env.wild_type, env.mask, rng, temp, temp)
        traj.states.append(state)
        traj.values.append(0.0 if value_fn is None else float(value_fn(state)))
        nxt, reward, done = env.step((pos, res))
        traj.actions.append((pos, res))
        traj.log_probs_old.append(lp)
        traj.rewards.append(reward)
        traj.temperatures.append(temp)
        traj.position_temps.append(temp)
        state = nxt
    traj.final_state = state
    traj.final_fitness = env.last_fitness
    traj.done = True
    return traj


def replay(env, traj):
    """Re-apply ``traj.actions`` from its wild type; returns the visited states."""
    env._start(traj.wild_type)
    states = [env.state]
    for action in traj.actions:
        nxt, _, _ = env.step(action)
        states.append(nxt)
    return states


def seed_pool_by_bins(land, rng, per_bin=100, bins=DEFAULT_FITNESS_BINS):
    """Stratified starting pool drawn from a table landscape.

    ``bins`` are ``(lo, hi]`` fitness intervals, with ``(x, x)`` meaning
    exactly ``x``.  Up to ``per_bin`` labeled variants are drawn from each
    bin without replacement and returned as full sequences.
    """
    keys, values = land.keys(), land.values()
    chosen = []
    for lo, hi in bins:
        in_bin = values == lo if lo == hi else (values > lo) & (values <= hi)
        idx = np.flatnonzero(in_bin)
        if idx.size:
            take = rng.generator.choice(idx, size=min(per_bin, idx.size), replace=False)
            chosen.append(np.sort(take))
    if not chosen:
        raise InvalidConfig("no labeled variants fall into the requested bins")
    return land.sequences_for(keys[np.concatenate(chosen)])


def trajectory_records(trajs, alphabet=None):
    alphabet = alphabet or Alphabet()
    for traj in trajs:
        for t, (state, action) in enumerate(zip(traj.states, traj.actions)):
            yield {
                "episode": traj.episode_id,
                "step": t,
                "state": alphabet.decode(state),
                "action": [int(action[0]), int(action[1])],
                "reward": float(traj.rewards[t]),
                "log_prob": float(traj.log_probs_old[t]),
            }


def write_trajectory_log(trajs, path, alphabet=None):
    lines = [json.dumps(r, sort_keys=True) for r in trajectory_records(trajs, alphabet)]
    atomic_write_text(path, "".join(line + "\n" for line in lines))
