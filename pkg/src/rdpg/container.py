"""Versioned binary container for named float64 arrays plus JSON metadata.

Layout (all integers little-endian)::

    offset  size  content
    0       8     magic  b"RDPGARR\\0"
    8       4     format version (uint32), currently 1
    12      4     kind length k (uint32)
    16      k     kind, ASCII (e.g. "paramset", "checkpoint", "teacher")
    16+k    8     header length n (uint64)
    24+k    n     header, UTF-8 JSON:
                    {"meta": {...}, "entries": [{"name", "shape", "offset"}, ...]}
    24+k+n  ...   payload: each array as little-endian IEEE-754 float64 in
                  row-major order, at ``offset`` bytes from payload start

Round trips are bit-exact: payload bytes are the array bytes.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .diffcore import AdamState, ParamSet
from .errors import ConfigurationError

MAGIC = b"RDPGARR\0"
VERSION = 1


def write_container(path, arrays, meta=None, kind="arrays"):
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"meta": meta or {}, "entries": entries}).encode("utf-8")
    k = kind.encode("ascii")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(k)))
        fh.write(k)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_container(path, expect_kind=None):
    """Returns ``(arrays, meta, kind)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ConfigurationError(f"{path}: not an array container")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise ConfigurationError(f"{path}: unsupported container version {version}")
    (klen,) = struct.unpack_from("<I", data, 12)
    kind = data[16:16 + klen].decode("ascii")
    if expect_kind is not None and kind != expect_kind:
        raise ConfigurationError(f"{path}: expected a {expect_kind!r} container, found {kind!r}")
    (hlen,) = struct.unpack_from("<Q", data, 16 + klen)
    hstart = 24 + klen
    header = json.loads(data[hstart:hstart + hlen].decode("utf-8"))
    base = hstart + hlen
    arrays = {}
    for e in header["entries"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        a = np.frombuffer(data, dtype="<f8", count=count, offset=base + e["offset"])
        arrays[e["name"]] = a.reshape(shape).astype(np.float64)
    return arrays, header["meta"], kind


# ---------------------------------------------------------------------------
# ParamSets and checkpoints


def save_params(path, params: ParamSet):
    write_container(path, params, {"paramset": params.meta}, kind="paramset")


def load_params(path) -> ParamSet:
    arrays, meta, _ = read_container(path, "paramset")
    return ParamSet(arrays, meta=meta.get("paramset"))


def _prefixed(prefix, params):
    return {f"{prefix}/{k}": v for k, v in params.items()}


def _unprefix(arrays, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix + "/")}


def save_checkpoint(path, learner, meta=None):
    """Actor, critic, both targets and both ADAM states in one container."""
    arrays = {}
    for name, ps in learner.param_sets().items():
        arrays.update(_prefixed(name, ps))
    adam_meta = {}
    for name, opt in (("actor", learner.actor_opt), ("critic", learner.critic_opt)):
        hyper = {"alpha": opt.alpha, "beta1": opt.beta1, "beta2": opt.beta2,
                 "eps": opt.eps, "clip": opt.clip, "t": {}}
        for k, st in opt.states.items():
            arrays[f"adam/{name}/m/{k}"] = st.m
            arrays[f"adam/{name}/v/{k}"] = st.v
            hyper["t"][k] = st.t
        adam_meta[name] = hyper
    full = {"net": learner.actor_params.meta, "adam": adam_meta,
            "updates": learner.updates, **(meta or {})}
    write_container(path, arrays, full, kind="checkpoint")


def load_checkpoint(path, net_cfg=None, td_cfg=None):
    """Rebuild a :class:`~rdpg.tdlearn.Learner`; returns ``(learner, meta)``.

    With ``net_cfg`` given, the stored widths must match it.
    """
    from .networks import ActorNet, CriticNet, NetConfig
    from .tdlearn import Learner, TdConfig
    from .diffcore import Adam

    arrays, meta, _ = read_container(path, "checkpoint")
    stored = {k: v for k, v in meta["net"].items() if k in NetConfig.__dataclass_fields__}
    cfg = NetConfig(**stored)
    if net_cfg is not None and net_cfg != cfg:
        raise ConfigurationError(f"checkpoint network {cfg} does not match configuration {net_cfg}")
    actor, critic = ActorNet(cfg), CriticNet(cfg)
    sets = {name: ParamSet(_unprefix(arrays, name), meta=meta["net"] if name.startswith("actor") else None)
            for name in ("actor", "critic", "actor_target", "critic_target")}
    lr = Learner.from_params(actor, critic, sets["actor"], sets["critic"], td_cfg or TdConfig())
    lr.actor_target, lr.critic_target = sets["actor_target"], sets["critic_target"]
    for name in ("actor", "critic"):
        hyper = meta["adam"][name]
        opt = Adam(hyper["alpha"], hyper["beta1"], hyper["beta2"], hyper["eps"], hyper["clip"])
        opt.states = {k: AdamState(arrays[f"adam/{name}/m/{k}"], arrays[f"adam/{name}/v/{k}"],
                                   hyper["t"][k], opt.alpha, opt.beta1, opt.beta2, opt.eps)
                      for k in hyper["t"]}
        setattr(lr, f"{name}_opt", opt)
    lr.updates = meta.get("updates", 0)
    return lr, meta


# ---------------------------------------------------------------------------
# teacher trajectories


def save_episodes(path, episodes, meta=None):
    """Teacher file: per episode ``obs``/``actions``/``rewards`` arrays."""
    arrays, info = {}, []
    obs_dim = action_dim = None
    for i, ep in enumerate(episodes):
        arrays[f"ep{i:06d}/obs"] = ep.obs
        arrays[f"ep{i:06d}/actions"] = ep.actions
        arrays[f"ep{i:06d}/rewards"] = ep.rewards
        info.append({"terminal": bool(ep.terminal), "steps": len(ep)})
        obs_dim, action_dim = ep.obs.shape[1], ep.actions.shape[1]
    full = {"episodes": info, "obs_dim": obs_dim, "action_dim": action_dim, **(meta or {})}
    write_container(path, arrays, full, kind="teacher")


def load_episodes(path):
    from .replay import Episode

    arrays, meta, _ = read_container(path, "teacher")
    out = []
    for i, info in enumerate(meta["episodes"]):
        p = f"ep{i:06d}"
        out.append(Episode(arrays[f"{p}/obs"], arrays[f"{p}/actions"], arrays[f"{p}/rewards"],
                           info["terminal"]))
    return out, meta
