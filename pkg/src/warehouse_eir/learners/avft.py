"""Return-to-go conditioned action-value predictor over the last K steps.

Each step contributes three tokens, (R~_{t-1}, s_t, u_t), embedded by a
per-modality linear map. The 3K tokens, in order, are flattened into a
position-aware dense aggregator that outputs Q.
"""
from __future__ import annotations

import numpy as np

from ..approximator import ApproximatorSpec, Network, Optimizer, apply_step, mse


def rtg_init(target: float) -> float:
    return float(target)


def rtg_update(rtg, r):
    """Return-to-go after receiving reward r."""
    return rtg - r


class AvftModel:
    def __init__(self, state_dim: int, n_actions: int, K: int = 8, embed: int = 16, hidden: int = 64,
                 lr: float = 1e-3, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.K, self.embed = K, embed
        self.state_dim, self.n_actions = state_dim, n_actions
        self.emb_r = Network(ApproximatorSpec(1, ((embed, "identity"),)), rng=rng)
        self.emb_s = Network(ApproximatorSpec(state_dim, ((embed, "identity"),)), rng=rng)
        self.emb_u = Network(ApproximatorSpec(n_actions, ((embed, "identity"),)), rng=rng)
        self.agg = Network(ApproximatorSpec(3 * K * embed, ((hidden, "tanh"), (1, "identity"))), rng=rng)
        self.opts = [Optimizer("adam", lr=lr) for _ in self.networks]

    @property
    def networks(self) -> list:
        return [self.emb_r, self.emb_s, self.emb_u, self.agg]

    @property
    def n_tokens(self) -> int:
        return 3 * self.K

    def copy(self) -> "AvftModel":
        other = object.__new__(AvftModel)
        other.__dict__.update(self.__dict__)
        other.emb_r, other.emb_s, other.emb_u, other.agg = (n.copy() for n in self.networks)
        other.opts = [Optimizer("adam", lr=o.lr) for o in self.opts]
        return other

    def tokens(self, rtg, s, u):
        """(B, 3K, E) token tensor plus embedder caches.

        rtg: (K, B); s: (K, B, state_dim); u: (K, B, n_actions), oldest first.
        """
        rtg = np.asarray(rtg, dtype=np.float64)
        s = np.asarray(s, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        K, B = rtg.shape
        if K != self.K or s.shape != (K, B, self.state_dim) or u.shape != (K, B, self.n_actions):
            raise ValueError("window shape does not match the model")
        er, cr = self.emb_r.forward(rtg.reshape(K * B, 1))
        es, cs = self.emb_s.forward(s.reshape(K * B, -1))
        eu, cu = self.emb_u.forward(u.reshape(K * B, -1))
        E = self.embed
        tok = np.stack([er.reshape(K, B, E), es.reshape(K, B, E), eu.reshape(K, B, E)], axis=1)  # (K, 3, B, E)
        tok = tok.reshape(3 * K, B, E).transpose(1, 0, 2)
        return tok, (cr, cs, cu, K, B)

    def forward(self, rtg, s, u):
        tok, tcache = self.tokens(rtg, s, u)
        B = tok.shape[0]
        q, acache = self.agg.forward(tok.reshape(B, -1))
        return q[:, 0], (tcache, acache)

    def __call__(self, rtg, s, u):
        return self.forward(rtg, s, u)[0]

    def backward(self, cache, dq) -> list:
        """Flat gradients for [emb_r, emb_s, emb_u, agg]."""
        (cr, cs, cu, K, B), acache = cache
        g_agg, dflat = self.agg.backward(acache, np.asarray(dq, dtype=np.float64)[:, None])
        E = self.embed
        dtok = dflat.reshape(B, 3 * K, E).transpose(1, 0, 2).reshape(K, 3, B, E)
        g_r, _ = self.emb_r.backward(cr, dtok[:, 0].reshape(K * B, E))
        g_s, _ = self.emb_s.backward(cs, dtok[:, 1].reshape(K * B, E))
        g_u, _ = self.emb_u.backward(cu, dtok[:, 2].reshape(K * B, E))
        return [g_r, g_s, g_u, g_agg]

    def update(self, rtg, s, u, target) -> float:
        """One MSE regression step toward ``target``."""
        q, cache = self.forward(rtg, s, u)
        loss, dq = mse(q, np.asarray(target, dtype=np.float64))
        for net, opt, g in zip(self.networks, self.opts, self.backward(cache, dq)):
            apply_step(opt, net, g)
        return loss


def avft_q(model: AvftModel, window) -> np.ndarray:
    """Q for a (rtg, s, u) window; zero-padded steps stand for pre-episode history."""
    rtg, s, u = window
    return model(rtg, s, u)
