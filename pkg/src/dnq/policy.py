"""Bidirectional recurrent bit-width policy, numpy forward and BPTT.

Layer embeddings go through a tanh projection. A backward-in-depth recurrent
chain reads the whole projected sequence; a forward chain reads the
projection plus a one-hot of the previous action. The action head sees both
hidden states, so step ``l`` is conditioned on the full network description
and on the already chosen bit-widths ``b_1 .. b_{l-1}``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

NUM_ACTIONS = 7


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class GRUCell:
    gates = 3

    @staticmethod
    def init_state(h):
        return (np.zeros(h),)

    @staticmethod
    def forward(p, pre, x, state):
        (h,) = state
        H = len(h)
        W, U, b = p[pre + "W"], p[pre + "U"], p[pre + "b"]
        ax = W @ x + b
        zr = _sigmoid(ax[: 2 * H] + U[: 2 * H] @ h)
        z, r = zr[:H], zr[H:]
        n = np.tanh(ax[2 * H :] + U[2 * H :] @ (r * h))
        h_new = (1.0 - z) * n + z * h
        return (h_new,), (x, h, z, r, n)

    @staticmethod
    def backward(p, g, pre, cache, dstate):
        x, h, z, r, n = cache
        (dh_new,) = dstate
        H = len(h)
        U = p[pre + "U"]
        dz = dh_new * (h - n)
        dn = dh_new * (1.0 - z)
        dh = dh_new * z
        dn_pre = dn * (1.0 - n * n)
        drh = U[2 * H :].T @ dn_pre
        dr = drh * h
        dh += drh * r
        dpre = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r), dn_pre])
        g[pre + "W"] += np.outer(dpre, x)
        g[pre + "U"][: 2 * H] += np.outer(dpre[: 2 * H], h)
        g[pre + "U"][2 * H :] += np.outer(dn_pre, r * h)
        g[pre + "b"] += dpre
        dx = p[pre + "W"].T @ dpre
        dh += U[: 2 * H].T @ dpre[: 2 * H]
        return dx, (dh,)


class LSTMCell:
    gates = 4

    @staticmethod
    def init_state(h):
        return (np.zeros(h), np.zeros(h))

    @staticmethod
    def forward(p, pre, x, state):
        h, c = state
        H = len(h)
        a = p[pre + "W"] @ x + p[pre + "U"] @ h + p[pre + "b"]
        i, f, o = _sigmoid(a[:H]), _sigmoid(a[H : 2 * H]), _sigmoid(a[2 * H : 3 * H])
        gg = np.tanh(a[3 * H :])
        c_new = f * c + i * gg
        tc = np.tanh(c_new)
        return (o * tc, c_new), (x, h, c, i, f, o, gg, tc)

    @staticmethod
    def backward(p, g, pre, cache, dstate):
        x, h, c, i, f, o, gg, tc = cache
        dh_new, dc_new = dstate
        do = dh_new * tc
        dc = dc_new + dh_new * o * (1.0 - tc * tc)
        dpre = np.concatenate([
            dc * gg * i * (1.0 - i),
            dc * c * f * (1.0 - f),
            do * o * (1.0 - o),
            dc * i * (1.0 - gg * gg),
        ])
        g[pre + "W"] += np.outer(dpre, x)
        g[pre + "U"] += np.outer(dpre, h)
        g[pre + "b"] += dpre
        return p[pre + "W"].T @ dpre, (p[pre + "U"].T @ dpre, dc * f)


CELLS = {"gru": GRUCell, "lstm": LSTMCell}


@dataclass
class Context:
    """Action-independent part of a forward pass over one embedding sequence."""

    emb: np.ndarray
    x: np.ndarray
    hb: list
    bwd_caches: list


class PolicyModel:
    def __init__(self, feature_dim: int, hidden: int = 32, cell: str = "lstm", seed: int = 0, num_actions: int = NUM_ACTIONS):
        if cell not in CELLS:
            raise ValueError(f"unknown recurrent cell {cell!r}")
        self.feature_dim, self.hidden, self.cell_name = feature_dim, hidden, cell
        self.num_actions = num_actions
        self.cell = CELLS[cell]
        rng = np.random.default_rng(seed)
        H, G = hidden, self.cell.gates
        fwd_in = H + num_actions + 1
        s = 1.0 / np.sqrt(H)

        def u(*shape):
            return rng.uniform(-s, s, size=shape)

        self.params = {
            "proj_W": u(H, feature_dim),
            "proj_b": np.zeros(H),
            "bwd_W": u(G * H, H),
            "bwd_U": u(G * H, H),
            "bwd_b": np.zeros(G * H),
            "fwd_W": u(G * H, fwd_in),
            "fwd_U": u(G * H, H),
            "fwd_b": np.zeros(G * H),
            "head_W": u(num_actions, 2 * H),
            "head_b": np.zeros(num_actions),
        }

    def copy(self) -> "PolicyModel":
        new = object.__new__(PolicyModel)
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new

    # -- forward pieces ------------------------------------------------------

    def context(self, emb: np.ndarray) -> Context:
        p = self.params
        emb = np.asarray(emb, dtype=np.float64)
        x = np.tanh(emb @ p["proj_W"].T + p["proj_b"])
        L = len(x)
        hb = [None] * L
        caches = [None] * L
        state = self.cell.init_state(self.hidden)
        for l in range(L - 1, -1, -1):
            state, caches[l] = self.cell.forward(p, "bwd_", x[l], state)
            hb[l] = state[0]
        return Context(emb, x, hb, caches)

    def initial_state(self):
        return self.cell.init_state(self.hidden)

    def step(self, ctx: Context, l: int, state, prev_action: int):
        """Distribution over actions at step ``l``; returns (probs, new_state, cache)."""
        p = self.params
        # the extra last slot marks "no previous action"
        onehot = np.zeros(self.num_actions + 1)
        onehot[self.num_actions if prev_action is None else prev_action] = 1.0
        u = np.concatenate([ctx.x[l], onehot])
        state, cache = self.cell.forward(p, "fwd_", u, state)
        hcat = np.concatenate([state[0], ctx.hb[l]])
        z = p["head_W"] @ hcat + p["head_b"]
        z = z - z.max()
        e = np.exp(z)
        probs = e / e.sum()
        return probs, state, (cache, hcat)

    def advance(self, ctx: Context, actions: Sequence[int]):
        """Run the forward chain over a fixed action prefix; returns the state after it."""
        state = self.initial_state()
        prev = None
        for l, a in enumerate(actions):
            _, state, _ = self.step(ctx, l, state, prev)
            prev = a
        return state, prev

    def sample(self, ctx: Context, rng: np.random.Generator, prefix: Sequence[int] = ()):
        """Complete ``prefix`` to full length by sampling; returns (actions, log-probs of sampled steps)."""
        L = len(ctx.x)
        actions = list(prefix)
        state, prev = self.advance(ctx, actions)
        logps = []
        for l in range(len(actions), L):
            probs, state, _ = self.step(ctx, l, state, prev)
            a = int(rng.choice(self.num_actions, p=probs))
            actions.append(a)
            logps.append(float(np.log(probs[a])))
            prev = a
        return actions, logps

    def step_probs(self, ctx: Context, actions: Sequence[int]) -> np.ndarray:
        """Per-step distributions under teacher forcing, shape (L, num_actions)."""
        out = []
        state, prev = self.initial_state(), None
        for l in range(len(actions)):
            probs, state, _ = self.step(ctx, l, state, prev)
            out.append(probs)
            prev = actions[l]
        return np.array(out)

    def log_prob(self, ctx: Context, actions: Sequence[int]) -> np.ndarray:
        probs = self.step_probs(ctx, actions)
        return np.log(probs[np.arange(len(actions)), actions])

    # -- gradient -----------------------------------------------------------

    def grad_log_prob(self, ctx: Context, actions: Sequence[int], weights: Sequence[float]) -> dict:
        """Gradient of ``sum_l weights[l] * log P(a_l | a_<l)`` w.r.t. every parameter."""
        p = self.params
        L = len(ctx.x)
        if len(actions) != L or len(weights) != L:
            raise ValueError("actions and weights must cover every step")
        g = {k: np.zeros_like(v) for k, v in p.items()}
        H = self.hidden
        state, prev = self.initial_state(), None
        steps = []
        for l in range(L):
            probs, state, (cache, hcat) = self.step(ctx, l, state, prev)
            steps.append((probs, cache, hcat))
            prev = actions[l]
        dhb = [None] * L
        dx = np.zeros_like(ctx.x)
        dstate = tuple(np.zeros(H) for _ in self.initial_state())
        for l in range(L - 1, -1, -1):
            probs, cache, hcat = steps[l]
            dz = -weights[l] * probs
            dz[actions[l]] += weights[l]
            g["head_W"] += np.outer(dz, hcat)
            g["head_b"] += dz
            dh = p["head_W"].T @ dz
            dhb[l] = dh[H:]
            dstate = (dstate[0] + dh[:H],) + dstate[1:]
            du, dstate = self.cell.backward(p, g, "fwd_", cache, dstate)
            dx[l] += du[:H]
        dstate = tuple(np.zeros(H) for _ in self.initial_state())
        for l in range(L):
            dstate = (dstate[0] + dhb[l],) + dstate[1:]
            du, dstate = self.cell.backward(p, g, "bwd_", ctx.bwd_caches[l], dstate)
            dx[l] += du
        dpre = dx * (1.0 - ctx.x**2)
        g["proj_W"] += dpre.T @ ctx.emb
        g["proj_b"] += dpre.sum(axis=0)
        return g

    # -- flat views, used by tests and the update rule ------------------------

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for k, v in self.params.items():
            self.params[k] = vec[pos : pos + v.size].reshape(v.shape).copy()
            pos += v.size

    @staticmethod
    def flatten_grads(g: dict) -> np.ndarray:
        return np.concatenate([v.ravel() for v in g.values()])
