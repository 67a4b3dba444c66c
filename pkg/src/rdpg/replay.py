"""Episodic replay buffer with fixed-length slice sampling.

Transitions are grouped by episode.  A minibatch is built in two stages: pick
an episode (native weight 1, injected teacher episodes weight = anneal
factor), then pick a window start uniformly inside it.  Each slice carries up
to ``s`` preceding steps for hidden-state scanning, the ``l``-step
optimization window, and the observation that follows the window.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import BufferNotReady, ConfigurationError, UsageError

NATIVE = "native"
INJECTED = "injected"


@dataclass
class Transition:
    o: np.ndarray
    a: np.ndarray
    r: float
    o_next: np.ndarray
    done: bool
    # episode ended by the time limit: done, but the tail is still bootstrapped
    timeout: bool = False


@dataclass
class Episode:
    """Arrays for one finished episode of ``T`` steps.

    ``obs`` holds ``T + 1`` rows (``o_0 .. o_T``), so ``obs[t + 1]`` is the
    ``o_next`` of step ``t``.  ``terminal`` means the final state has no
    future value (collision or goal); a time-limit end is not terminal.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminal: bool
    tag: str = NATIVE
    id: int = -1

    def __len__(self):
        return len(self.rewards)

    @classmethod
    def from_transitions(cls, transitions, tag=NATIVE):
        if not transitions:
            raise UsageError("empty episode")
        obs = np.array([t.o for t in transitions] + [transitions[-1].o_next], dtype=np.float64)
        actions = np.array([t.a for t in transitions], dtype=np.float64)
        rewards = np.array([t.r for t in transitions], dtype=np.float64)
        last = transitions[-1]
        return cls(obs, actions, rewards, bool(last.done and not last.timeout), tag)

    def transitions(self):
        T = len(self)
        out = []
        for t in range(T):
            end = t == T - 1
            out.append(Transition(self.obs[t], self.actions[t], float(self.rewards[t]),
                                  self.obs[t + 1], end and self.terminal,
                                  end and not self.terminal))
        return out


@dataclass
class SliceBatch:
    """``N`` slices stacked along axis 0.

    Scan prefixes are left-padded to a common length ``prefix_obs.shape[1]``;
    ``prefix_len[n]`` counts the real steps of row ``n``.
    """

    prefix_obs: np.ndarray      # [N, s_max, D]
    prefix_actions: np.ndarray  # [N, s_max, A]
    prefix_len: np.ndarray      # [N]
    obs: np.ndarray             # [N, l, D]
    actions: np.ndarray         # [N, l, A]
    rewards: np.ndarray         # [N, l]
    tail_obs: np.ndarray        # [N, D]
    tail_done: np.ndarray       # [N] bool, window ends in a terminal state
    episode_ids: np.ndarray     # [N] buffer ids, for diagnostics
    starts: np.ndarray          # [N]
    injected: np.ndarray        # [N] bool

    @property
    def size(self):
        return self.obs.shape[0]

    @property
    def length(self):
        return self.obs.shape[1]


@dataclass
class EpisodeStore:
    """Append-only episodic buffer; whole episodes are evicted oldest-first.

    Injected episodes live in their own FIFO with a separate capacity, so
    teacher data never pushes out fresh native experience.
    """

    capacity: int = 500
    injected_capacity: int = 200
    half_life: float = 500.0
    anneal: float = 1.0
    obs_dim: int | None = None
    action_dim: int | None = None
    native: deque = field(default_factory=deque)
    injected: deque = field(default_factory=deque)
    _open: list = field(default_factory=list)
    _closed_by_done: bool = False
    _next_id: int = 0

    # writing ----------------------------------------------------------------
    def push(self, t: Transition):
        if self._closed_by_done:
            raise UsageError("push after a done transition without end_episode()")
        self._check_dims(np.asarray(t.o), np.asarray(t.a))
        self._open.append(t)
        if t.done:
            self._store(Episode.from_transitions(self._open, NATIVE), self.native, self.capacity)
            self._open = []
            self._closed_by_done = True

    def end_episode(self):
        """Close the open episode (no-op if ``push`` already closed it on done)."""
        if self._open:
            self._store(Episode.from_transitions(self._open, NATIVE), self.native, self.capacity)
            self._open = []
        self._closed_by_done = False

    def inject(self, episodes):
        """Add teacher episodes (``Episode`` objects or lists of ``Transition``)."""
        for ep in episodes:
            if not isinstance(ep, Episode):
                ep = Episode.from_transitions(list(ep), INJECTED)
            else:
                ep = Episode(ep.obs, ep.actions, ep.rewards, ep.terminal, INJECTED)
            try:
                self._check_dims(ep.obs[0], ep.actions[0])
            except ConfigurationError as exc:
                raise ConfigurationError(f"rejected teacher episode: {exc}") from None
            self._store(ep, self.injected, self.injected_capacity)

    def _store(self, ep, queue, cap):
        ep.id = self._next_id
        self._next_id += 1
        queue.append(ep)
        while len(queue) > cap:
            queue.popleft()

    def _check_dims(self, o, a):
        if self.obs_dim is None:
            self.obs_dim = o.shape[-1]
        if self.action_dim is None:
            self.action_dim = a.shape[-1]
        if o.shape[-1] != self.obs_dim or a.shape[-1] != self.action_dim:
            raise ConfigurationError(
                f"dims (obs {o.shape[-1]}, action {a.shape[-1]}) do not match buffer "
                f"(obs {self.obs_dim}, action {self.action_dim})")

    # annealing --------------------------------------------------------------
    def set_anneal(self, episode_index):
        """Set and return the injected sampling weight ``0.5 ** (episode / half_life)``."""
        self.anneal = float(0.5 ** (episode_index / self.half_life))
        return self.anneal

    # reading ----------------------------------------------------------------
    def __len__(self):
        return len(self.native) + len(self.injected)

    def episodes(self):
        return list(self.native) + list(self.injected)

    def _eligible(self, l):
        eps, weights = [], []
        for ep in self.native:
            if len(ep) >= l:
                eps.append(ep)
                weights.append(1.0)
        if self.anneal > 0:
            for ep in self.injected:
                if len(ep) >= l:
                    eps.append(ep)
                    weights.append(self.anneal)
        return eps, np.array(weights)

    def ready(self, l):
        return bool(self._eligible(l)[0])

    def sample_batch(self, N, s, l, rng) -> SliceBatch:
        if l < 1 or s < 0 or N < 1:
            raise ConfigurationError(f"bad slice geometry N={N} s={s} l={l}")
        eps, weights = self._eligible(l)
        if not eps:
            raise BufferNotReady(f"no stored episode has at least {l} steps")
        picks = rng.choice(len(eps), size=N, p=weights / weights.sum())
        chosen = [eps[i] for i in picks]
        starts = np.array([rng.integers(0, len(ep) - l + 1) for ep in chosen])
        return self.make_batch(chosen, starts, s, l)

    @staticmethod
    def make_batch(episodes, starts, s, l) -> SliceBatch:
        """Cut slices at explicit window starts (used by sampling and tests)."""
        N = len(episodes)
        D = episodes[0].obs.shape[1]
        A = episodes[0].actions.shape[1]
        plen = np.array([min(s, int(st)) for st in starts], dtype=np.int64)
        s_max = int(plen.max(initial=0))
        prefix_obs = np.zeros((N, s_max, D))
        prefix_act = np.zeros((N, s_max, A))
        obs = np.empty((N, l, D))
        act = np.empty((N, l, A))
        rew = np.empty((N, l))
        tail = np.empty((N, D))
        done = np.zeros(N, dtype=bool)
        for n, (ep, st) in enumerate(zip(episodes, starts)):
            st = int(st)
            if st < 0 or st + l > len(ep):
                raise ConfigurationError(f"window [{st}, {st + l}) outside episode of {len(ep)}")
            p = plen[n]
            if p:
                prefix_obs[n, s_max - p:] = ep.obs[st - p:st]
                prefix_act[n, s_max - p:] = ep.actions[st - p:st]
            obs[n] = ep.obs[st:st + l]
            act[n] = ep.actions[st:st + l]
            rew[n] = ep.rewards[st:st + l]
            tail[n] = ep.obs[st + l]
            done[n] = ep.terminal and st + l == len(ep)
        return SliceBatch(prefix_obs, prefix_act, plen, obs, act, rew, tail, done,
                          np.array([ep.id for ep in episodes]),
                          np.asarray(starts, dtype=np.int64),
                          np.array([ep.tag == INJECTED for ep in episodes]))


def window_starts(T, l):
    """All valid window starts of an episode of length ``T``."""
    return list(range(0, T - l + 1)) if T >= l else []


def backup_lengths(t, T, l):
    """Backup lengths with which step ``t`` is measured, one per window holding it.

    A step at window position ``i`` is bootstrapped from the window tail, so
    its backup length is ``l - i``.
    """
    return [l - (t - st) for st in window_starts(T, l) if st <= t < st + l]
