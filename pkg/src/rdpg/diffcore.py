"""Small reverse-mode differentiation kernel in float64 numpy.

Layers are written twice over the same arithmetic: a pure forward function
(used for rollouts and scans) and a tape-recording variant used when
gradients are needed.  Both paths call the same forward helpers, so a value
computed with or without a tape is bitwise identical.

All batched arrays carry the batch on axis 0.  Dense weights are stored
``[out, in]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigurationError, NonFiniteError

GRAD_CLIP_NORM = 10.0

_ACTIVATIONS = ("relu", "tanh", "identity")


def sigmoid(z):
    # tanh form is overflow-free for any finite z
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def _activate(z, act):
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "tanh":
        return np.tanh(z)
    if act == "identity":
        return z
    raise ConfigurationError(f"unknown activation {act!r}")


def _activation_grad(y, z, act):
    if act == "relu":
        return (z > 0).astype(np.float64)
    if act == "tanh":
        return 1.0 - y * y
    return None


# ---------------------------------------------------------------------------
# pure forward functions


def dense_forward(x, W, b, act="identity"):
    """``act(x W^T + b)`` for ``x`` of shape ``[in]`` or ``[N, in]``."""
    x = np.asarray(x, dtype=np.float64)
    if act not in _ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {act!r}")
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ConfigurationError(
            f"dense shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    z = x @ W.T + b
    return _activate(z, act)


_GATE_SCALE = {}


def _gates(z, width):
    # sigmoid(z) = (tanh(z/2) + 1)/2: one tanh call covers all four gates
    scale = _GATE_SCALE.get(width)
    if scale is None:
        scale = np.concatenate([np.full(3 * width, 0.5), np.ones(width)])
        _GATE_SCALE[width] = scale
    t = np.tanh(z * scale)
    s = 0.5 * t[..., :3 * width] + 0.5
    return s[..., :width], s[..., width:2 * width], s[..., 2 * width:], t[..., 3 * width:]


def _check_lstm(x, h, c, W, b):
    width = h.shape[-1]
    n_in = x.shape[-1]
    if (W.shape != (n_in + width, 4 * width) or b.shape != (4 * width,)
            or c.shape != h.shape):
        raise ConfigurationError(
            f"lstm width mismatch: x{x.shape} h{h.shape} c{c.shape} W{W.shape} b{b.shape}")
    return width


def lstm_forward(x, h, c, W, b):
    """One LSTM cell step.

    ``W`` stacks input rows over recurrent rows (``[in + width, 4*width]``);
    gate columns are packed ``[input, forget, output, candidate]``.
    Returns ``(h', c')``.
    """
    width = _check_lstm(x, h, c, W, b)
    i, f, o, g = _gates(np.concatenate([x, h], axis=-1) @ W + b, width)
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def _conv(signal, filters, bias):
    """Valid cross-correlation ``[..., K] -> [..., J, F]`` with ``J = K - w + 1``.

    Accumulated tap by tap with elementwise ops, so each output value is
    computed the same way whatever the batch size.
    """
    w = filters.shape[1]
    K = signal.shape[-1]
    if K < w:
        raise ConfigurationError(f"signal length {K} shorter than filter width {w}")
    J = K - w + 1
    conv = bias + signal[..., 0:J, None] * filters[:, 0]
    for k in range(1, w):
        conv = conv + signal[..., k:k + J, None] * filters[:, k]
    return conv


def conv1d_pool_forward(signal, filters, bias):
    """Valid 1-D cross-correlation per channel, global max-pool, then relu.

    ``signal`` is ``[K]`` or ``[N, K]``; ``filters`` is ``[F, w]``; the result
    has one value per channel regardless of ``K``.
    """
    signal = np.asarray(signal, dtype=np.float64)
    return np.maximum(_conv(signal, filters, bias).max(axis=-2), 0.0)


# ---------------------------------------------------------------------------
# tape


class Var:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("value", "grad", "needs_grad", "backward", "parents", "name")

    def __init__(self, value, needs_grad=False, parents=(), backward=None, name=None):
        self.value = value
        self.grad = None
        self.needs_grad = needs_grad
        self.parents = parents
        self.backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape


def _val(v):
    return v.value if isinstance(v, Var) else v


class Tape:
    """Ordered record of forward operations.

    ``param(name, value)`` registers a learnable leaf; repeated calls with the
    same name return the same leaf so gradients from every use accumulate.
    ``backprop`` walks the record in exact reverse order.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self.params: dict[str, Var] = {}

    def __len__(self):
        return len(self.nodes)

    def __bool__(self):
        # an empty tape is still a tape
        return True

    # leaves -----------------------------------------------------------
    def param(self, name, value, trainable=True):
        if not trainable:
            return value
        leaf = self.params.get(name)
        if leaf is None:
            leaf = Var(value, needs_grad=True, name=name)
            self.params[name] = leaf
        return leaf

    def const(self, value):
        return value

    def _record(self, value, parents, backward):
        needs = any(isinstance(p, Var) and p.needs_grad for p in parents)
        if not needs:
            return value
        node = Var(value, True, parents, backward)
        self.nodes.append(node)
        return node

    # ops --------------------------------------------------------------
    def dense(self, x, W, b, act="identity"):
        xv, Wv, bv = _val(x), _val(W), _val(b)
        if act not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {act!r}")
        if Wv.ndim != 2 or bv.shape != (Wv.shape[0],) or xv.shape[-1] != Wv.shape[1]:
            raise ConfigurationError(
                f"dense shape mismatch: x{xv.shape} W{Wv.shape} b{bv.shape}")
        z = xv @ Wv.T + bv
        y = _activate(z, act)

        def backward(gy):
            d = _activation_grad(y, z, act)
            gz = gy if d is None else gy * d
            gx = gz @ Wv if _needs(x) else None
            if gz.ndim == 1:
                gW = np.outer(gz, xv) if _needs(W) else None
                gb = gz if _needs(b) else None
            else:
                gW = gz.T @ xv if _needs(W) else None
                gb = gz.sum(axis=0) if _needs(b) else None
            return gx, gW, gb

        return self._record(y, (x, W, b), backward)

    def lstm(self, x, h, c, W, b):
        """Tape-recorded LSTM step; returns ``(h', c')`` as two nodes."""
        xv, hv, cv = _val(x), _val(h), _val(c)
        Wv, bv = _val(W), _val(b)
        width = _check_lstm(xv, hv, cv, Wv, bv)
        xh = np.concatenate([xv, hv], axis=-1)
        i, f, o, g = _gates(xh @ Wv + bv, width)
        c_new = f * cv + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        parents = (x, h, c, W, b)
        if not any(isinstance(p, Var) and p.needs_grad for p in parents):
            return h_new, c_new
        n_in = xv.shape[-1]

        # c' node carries the joint backward; h' only collects its gradient
        def backward_c(gc):
            gh = h_node.grad
            if gh is None:
                gh = np.zeros_like(h_new)
            g_o = gh * tc
            gc_tot = gc + gh * o * (1.0 - tc * tc)
            dz = np.concatenate([
                gc_tot * g * i * (1.0 - i),
                gc_tot * cv * f * (1.0 - f),
                g_o * o * (1.0 - o),
                gc_tot * i * (1.0 - g * g),
            ], axis=-1)
            gx = gh_prev = None
            if _needs(x) or _needs(h):
                gxh = dz @ Wv.T
                gx, gh_prev = gxh[..., :n_in], gxh[..., n_in:]
            gc_prev = gc_tot * f if _needs(c) else None
            if dz.ndim > 1:
                gW = xh.T @ dz if _needs(W) else None
                gb = dz.sum(axis=0) if _needs(b) else None
            else:
                gW = np.outer(xh, dz) if _needs(W) else None
                gb = dz if _needs(b) else None
            return gx, gh_prev, gc_prev, gW, gb

        h_node = Var(h_new, True, (), lambda gh: (), None)
        c_node = Var(c_new, True, parents, backward_c)
        self.nodes.append(c_node)
        self.nodes.append(h_node)
        # c' must run its backward even when only h' received gradient
        c_node.grad = np.zeros_like(c_new)
        return h_node, c_node

    def conv_pool(self, signal, filters, bias):
        sv, Fv, bv = _val(signal), _val(filters), _val(bias)
        conv = _conv(sv, Fv, bv)                      # [..., J, F]
        idx = conv.argmax(axis=-2)                    # [..., F]
        pooled = np.take_along_axis(conv, idx[..., None, :], axis=-2)[..., 0, :]
        y = np.maximum(pooled, 0.0)

        def backward(gy):
            gp = gy * (pooled > 0)
            w = Fv.shape[1]
            # signal value under tap k of the winning window, per channel
            taps = [np.take_along_axis(sv, idx + k, axis=-1) for k in range(w)]
            picked = np.stack(taps, axis=-1)          # [..., F, w]
            batched = gp.ndim > 1
            gF = None
            if _needs(filters):
                gF = np.einsum("nf,nfw->fw", gp, picked) if batched else gp[:, None] * picked
            gb = (gp.sum(axis=0) if batched else gp) if _needs(bias) else None
            gs = None
            if _needs(signal):
                gs = np.zeros_like(sv)
                contrib = gp[..., None] * Fv          # [..., F, w]
                for k in range(w):
                    if batched:
                        np.add.at(gs, (np.arange(gs.shape[0])[:, None], idx + k), contrib[..., k])
                    else:
                        np.add.at(gs, idx + k, contrib[..., k])
            return gs, gF, gb

        return self._record(y, (signal, filters, bias), backward)

    def concat(self, parts):
        vals = [_val(p) for p in parts]
        y = np.concatenate(vals, axis=-1)
        sizes = np.cumsum([v.shape[-1] for v in vals])[:-1]

        def backward(gy):
            return tuple(np.split(gy, sizes, axis=-1))

        return self._record(y, tuple(parts), backward)

    # backward ---------------------------------------------------------
    def backprop(self, seeds, names: Iterable[str] | None = None):
        """Propagate ``seeds`` (pairs of output node and upstream gradient).

        Returns a map parameter name -> gradient.  Every parameter registered
        on the tape (plus any extra ``names``) gets an entry; untouched ones
        are zero.
        """
        if isinstance(seeds, dict):
            seeds = seeds.items()
        for node, g in seeds:
            if not isinstance(node, Var):
                continue
            g = np.asarray(g, dtype=np.float64)
            if g.shape != node.value.shape:
                raise ConfigurationError(
                    f"seed gradient shape {g.shape} != output shape {node.value.shape}")
            node.grad = g.copy() if node.grad is None else node.grad + g
        for node in reversed(self.nodes):
            if node.grad is None or node.backward is None:
                continue
            grads = node.backward(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not isinstance(parent, Var) or not parent.needs_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        out = {}
        for name, leaf in self.params.items():
            out[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        for name in names or ():
            out.setdefault(name, None)
        return out


def _needs(v):
    return isinstance(v, Var) and v.needs_grad


class Eager:
    """Tape stand-in that only evaluates values (no recording)."""

    def param(self, name, value, trainable=True):
        return value

    def const(self, value):
        return value

    def dense(self, x, W, b, act="identity"):
        return dense_forward(x, W, b, act)

    def lstm(self, x, h, c, W, b):
        return lstm_forward(x, h, c, W, b)

    def conv_pool(self, signal, filters, bias):
        return conv1d_pool_forward(signal, filters, bias)

    def concat(self, parts):
        return np.concatenate(parts, axis=-1)


EAGER = Eager()


def value_of(v):
    return _val(v)


def backprop(tape: Tape, seeds, names=None):
    return tape.backprop(seeds, names)


# ---------------------------------------------------------------------------
# parameters and optimisation


class ParamSet(dict):
    """Named float64 arrays of one network (insertion-ordered)."""

    def __init__(self, *args, meta=None, **kwargs):
        super().__init__(*args, **kwargs)
        self.meta = dict(meta or {})

    def copy(self):
        return ParamSet({k: v.copy() for k, v in self.items()}, meta=self.meta)

    def zeros_like(self):
        return ParamSet({k: np.zeros_like(v) for k, v in self.items()}, meta=self.meta)

    def size(self):
        return sum(v.size for v in self.values())

    def assign(self, other):
        """Copy values of ``other`` into this set in place."""
        _check_compatible(self, other)
        for k in self:
            self[k][...] = other[k]

    def bitwise_equal(self, other):
        if list(self) != list(other):
            return False
        return all(self[k].shape == other[k].shape
                   and self[k].tobytes() == other[k].tobytes() for k in self)


def _check_compatible(a, b):
    if list(a) != list(b):
        raise ConfigurationError(f"parameter names differ: {list(a)} vs {list(b)}")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ConfigurationError(f"shape mismatch for {k}: {a[k].shape} vs {b[k].shape}")


def soft_update(target: ParamSet, source: ParamSet, tau: float) -> ParamSet:
    """In-place ``target <- tau*source + (1-tau)*target``; returns ``target``."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError(f"tau must lie in [0, 1], got {tau}")
    _check_compatible(target, source)
    for k in target:
        target[k][...] = tau * source[k] + (1.0 - tau) * target[k]
    return target


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, p, **hyper):
        return cls(np.zeros_like(p), np.zeros_like(p), **hyper)

    def copy(self):
        return AdamState(self.m.copy(), self.v.copy(), self.t,
                         self.alpha, self.beta1, self.beta2, self.eps)


def adam_step(p, g, s: AdamState):
    """Bias-corrected ADAM step.  Returns new ``(p, state)``; inputs untouched."""
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if not (p.shape == g.shape == s.m.shape == s.v.shape):
        raise ConfigurationError(
            f"adam shapes differ: p{p.shape} g{g.shape} m{s.m.shape} v{s.v.shape}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient passed to adam_step",
                             {"nan": int(np.isnan(g).sum()), "inf": int(np.isinf(g).sum())})
    t = s.t + 1
    m = s.beta1 * s.m + (1.0 - s.beta1) * g
    v = s.beta2 * s.v + (1.0 - s.beta2) * (g * g)
    m_hat = m / (1.0 - s.beta1 ** t)
    v_hat = v / (1.0 - s.beta2 ** t)
    p_new = p - s.alpha * m_hat / (np.sqrt(v_hat) + s.eps)
    return p_new, AdamState(m, v, t, s.alpha, s.beta1, s.beta2, s.eps)


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_by_global_norm(grads, max_norm=GRAD_CLIP_NORM):
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NonFiniteError("non-finite gradient norm", {"norm": norm})
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass
class Adam:
    """ADAM over a whole :class:`ParamSet` with global-norm clipping."""

    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float | None = GRAD_CLIP_NORM
    states: dict = field(default_factory=dict)

    def init(self, params: ParamSet):
        self.states = {k: AdamState.like(v, alpha=self.alpha, beta1=self.beta1,
                                         beta2=self.beta2, eps=self.eps)
                       for k, v in params.items()}
        return self

    def step(self, params: ParamSet, grads) -> float:
        """Apply one update in place; returns the pre-clip gradient norm.

        Non-finite gradients raise before any parameter changes.
        """
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {k}",
                                     {"param": k, "nan": int(np.isnan(g).sum())})
        if self.clip is not None:
            grads, norm = clip_by_global_norm(grads, self.clip)
        else:
            norm = global_norm(grads)
        for k, p in params.items():
            if not self.states:
                raise ConfigurationError("Adam.init() not called")
            new_p, self.states[k] = adam_step(p, grads[k], self.states[k])
            p[...] = new_p
        return norm

    def snapshot(self):
        return {k: s.copy() for k, s in self.states.items()}

    def restore(self, snap):
        self.states = {k: s.copy() for k, s in snap.items()}


# ---------------------------------------------------------------------------
# verification


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5):
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a, b, floor=1e-8) -> float:
    """``max|a-b| / max(max|a|, max|b|, floor)`` over all entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)
