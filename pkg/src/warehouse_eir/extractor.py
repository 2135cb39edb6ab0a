"""Learned constraint extraction: operation-graph sequences plus the local
observation window in, constraint mask M_c and tolerance h_c out.

Pipeline: node embedder -> one mean-aggregation graph convolution -> mean
pool per frame -> recurrent cell over frames. Each window cell is scored
from its node's final-frame embedding, its raw observation channels, an
embedding of the whole window, the sequence latent and its position.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .approximator import ApproximatorSpec, Network, Optimizer, _sigmoid, apply_step, bce, mse
from .constraints import N_MOVES, check_space
from .env import CH_GOODS, DONE, FAILED, N_CHANNELS, NODE_FEATURES, WarehouseEnv
from .scenario import Scenario, dumps_scenario

OBS_CHANNELS = CH_GOODS + 1  # raw entity channels of the window
DSET_MAGIC = b"EIRDSET1"
DSET_VERSION = 1


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------

def window_cells(env: WarehouseEnv, agent_id: int) -> np.ndarray:
    """Node index of each window cell (row-major), -1 off the map."""
    n, r = env.window, env.window // 2
    x, y = env.g.coords[env.state.agents[agent_id].node]
    out = np.full(n * n, -1, dtype=np.int64)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            out[(dy + r) * n + dx + r] = env.g.index.get((x + dx, y + dy), -1)
    return out


def label_oracle(env: WarehouseEnv, agent_id: int) -> tuple[np.ndarray, int]:
    """Rule-based (M_c, h_c) for one agent in the env's current state.

    A window cell is a constraint entity when it holds another agent or a
    running device that some move of this agent would bring within d_safe,
    an active incident, or the pickup node of a task whose deadline is live.
    """
    s = env.state
    snap = env.snapshot()
    n = env.window
    coords = env.g.coords
    me = s.agents[agent_id].node
    reach = [coords[snap.move_node(me, m)] for m in range(N_MOVES)]
    cells = window_cells(env, agent_id)
    where = {int(v): k for k, v in enumerate(cells) if v >= 0}
    m = np.zeros(n * n, dtype=np.int64)

    def mark(node):
        k = where.get(node)
        if k is not None:
            m[k] = 1

    others = [a.node for j, a in enumerate(s.agents) if j != agent_id] + list(snap.running_devices)
    for q in others:
        if any(not check_space(p, coords[q], env.const.d_safe) for p in reach):
            mark(q)
    for v in s.incidents:
        mark(v)
    for t, status in zip(s.tasks, s.omega):
        if status not in (DONE, FAILED) and t.t_d >= s.tick:
            mark(t.node)
    return m.reshape(n, n), int(env.const.h_c)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

def scenario_hash(sc: Scenario) -> str:
    return hashlib.sha256(dumps_scenario(sc).encode("utf-8")).hexdigest()


@dataclass
class ExtractorDataset:
    frames: np.ndarray  # (F, N, n_features) uint8 graph snapshots
    frame_idx: np.ndarray  # (S, T) int32, oldest first, -1 = before episode start
    cells: np.ndarray  # (S, n*n) int32 window cell nodes
    obs: np.ndarray  # (S, n*n*OBS_CHANNELS) uint8 raw window channels
    labels: np.ndarray  # (S, n*n) uint8
    h: np.ndarray  # (S,) int32
    edges: tuple  # operation-graph edges (i, j)
    n_nodes: int
    window: int
    seed: int
    scenario: str  # scenario hash

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def seq_len(self) -> int:
        return int(self.frame_idx.shape[1])

    def subset(self, idx) -> "ExtractorDataset":
        idx = np.asarray(idx)
        return ExtractorDataset(self.frames, self.frame_idx[idx], self.cells[idx], self.obs[idx],
                                self.labels[idx], self.h[idx], self.edges, self.n_nodes, self.window,
                                self.seed, self.scenario)

    def batch(self, idx):
        """Model inputs for sample indices: frames (B, T, N, F) float64 etc."""
        fi = self.frame_idx[idx]
        fr = np.zeros(fi.shape + self.frames.shape[1:])
        ok = fi >= 0
        fr[ok] = self.frames[fi[ok]]
        return fr, self.cells[idx].astype(np.int64), self.obs[idx].astype(np.float64)

    # --- file format -----------------------------------------------------
    def _record_dtype(self):
        n2 = self.window * self.window
        return np.dtype([
            ("frame_idx", "<i4", (self.seq_len,)),
            ("cells", "<i4", (n2,)),
            ("obs", "u1", (n2 * OBS_CHANNELS,)),
            ("labels", "u1", (n2,)),
            ("h", "<i4"),
        ])

    def save(self, path) -> None:
        """magic, uint32 LE header length, JSON header, uint8 frame block,
        then one fixed-size little-endian record per sample."""
        header = {
            "version": DSET_VERSION, "n_samples": len(self), "n_frames": int(self.frames.shape[0]),
            "n_nodes": self.n_nodes, "n_features": int(self.frames.shape[2]), "window": self.window,
            "obs_channels": OBS_CHANNELS, "seq_len": self.seq_len, "seed": self.seed,
            "scenario": self.scenario, "edges": [list(e) for e in self.edges],
        }
        rec = np.zeros(len(self), dtype=self._record_dtype())
        rec["frame_idx"], rec["cells"], rec["obs"] = self.frame_idx, self.cells, self.obs
        rec["labels"], rec["h"] = self.labels, self.h
        raw = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(DSET_MAGIC + struct.pack("<I", len(raw)) + raw)
            fh.write(np.ascontiguousarray(self.frames, dtype=np.uint8).tobytes())
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path) -> "ExtractorDataset":
        buf = Path(path).read_bytes()
        if buf[:8] != DSET_MAGIC:
            raise ValueError("not an extractor dataset file")
        (k,) = struct.unpack("<I", buf[8:12])
        hd = json.loads(buf[12 : 12 + k].decode("utf-8"))
        if hd["version"] != DSET_VERSION:
            raise ValueError(f"unsupported dataset version {hd['version']}")
        off = 12 + k
        fsize = hd["n_frames"] * hd["n_nodes"] * hd["n_features"]
        frames = np.frombuffer(buf[off : off + fsize], dtype=np.uint8).reshape(
            hd["n_frames"], hd["n_nodes"], hd["n_features"]).copy()
        proto = cls(frames, np.zeros((0, hd["seq_len"]), np.int32), None, None, None, None, (),
                    hd["n_nodes"], hd["window"], hd["seed"], hd["scenario"])
        rec = np.frombuffer(buf[off + fsize :], dtype=proto._record_dtype())
        if rec.shape[0] != hd["n_samples"]:
            raise ValueError("truncated dataset file")
        return cls(frames, rec["frame_idx"].astype(np.int32), rec["cells"].astype(np.int32),
                   rec["obs"].astype(np.uint8), rec["labels"].astype(np.uint8), rec["h"].astype(np.int32),
                   tuple(tuple(e) for e in hd["edges"]), hd["n_nodes"], hd["window"], hd["seed"],
                   hd["scenario"])


def raw_window(obs_flat: np.ndarray, window: int) -> np.ndarray:
    """Entity channels of a flat observation, (n*n*OBS_CHANNELS,)."""
    n2 = window * window
    return obs_flat[: n2 * N_CHANNELS].reshape(n2, N_CHANNELS)[:, :OBS_CHANNELS].ravel()


def generate_dataset(scenario: Scenario, episodes: int, seed: int, seq_len: int = 4) -> ExtractorDataset:
    """Random-policy rollouts; one sample per agent per tick."""
    env = WarehouseEnv(scenario)
    rng = np.random.default_rng(seed)
    frames, fidx, cells, obs, labels, hs = [], [], [], [], [], []
    for _ in range(episodes):
        env.reset(int(rng.integers(2**63)))
        recent: deque = deque(maxlen=seq_len)
        done = False
        while not done:
            frames.append(env.graph_features().astype(np.uint8))
            recent.append(len(frames) - 1)
            hist = [-1] * (seq_len - len(recent)) + list(recent)
            all_obs = env.observe_all()
            for i in range(env.n_agents):
                m, h = label_oracle(env, i)
                fidx.append(hist)
                cells.append(window_cells(env, i))
                obs.append(raw_window(all_obs[i], env.window).astype(np.uint8))
                labels.append(m.ravel().astype(np.uint8))
                hs.append(h)
            _, _, done, _ = env.step(rng.integers(0, 20, size=env.n_agents))
    n2 = env.window**2
    return ExtractorDataset(
        frames=np.array(frames, dtype=np.uint8).reshape(-1, env.g.n_nodes, len(NODE_FEATURES)),
        frame_idx=np.array(fidx, dtype=np.int32).reshape(-1, seq_len),
        cells=np.array(cells, dtype=np.int32).reshape(-1, n2),
        obs=np.array(obs, dtype=np.uint8).reshape(-1, n2 * OBS_CHANNELS),
        labels=np.array(labels, dtype=np.uint8).reshape(-1, n2),
        h=np.array(hs, dtype=np.int32),
        edges=tuple((i, j) for i, j, _ in env.g.edges),
        n_nodes=env.g.n_nodes,
        window=env.window,
        seed=seed,
        scenario=scenario_hash(scenario),
    )


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def mean_adjacency(n_nodes: int, edges) -> np.ndarray:
    """Row-normalised (A + I): mean over a node's neighbours and itself."""
    a = np.eye(n_nodes)
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    return a / a.sum(axis=1, keepdims=True)


class ExtractorNet:
    def __init__(self, n_nodes: int, edges, window: int, embed: int = 16, hidden: int = 32,
                 obs_embed: int = 32, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.window, self.n_nodes = window, n_nodes
        self.edges = tuple(tuple(e) for e in edges)
        self.adj = mean_adjacency(n_nodes, self.edges)
        n2, E, F = window * window, embed, len(NODE_FEATURES)
        self.embed = E
        self.node_embed = Network(ApproximatorSpec(F, ((E, "relu"),)), rng=rng)
        self.gcn = Network(ApproximatorSpec(E, ((E, "relu"),)), rng=rng)
        self.seq = Network(ApproximatorSpec(E, (), recurrent=E), rng=rng)
        self.obs_embed = Network(ApproximatorSpec(n2 * OBS_CHANNELS, ((obs_embed, "relu"),)), rng=rng)
        self.cell_in = E + OBS_CHANNELS + obs_embed + E + n2
        self.cell_head = Network(ApproximatorSpec(self.cell_in, ((hidden, "relu"), (1, "identity"))), rng=rng)
        self.h_head = Network(ApproximatorSpec(E + obs_embed, ((hidden, "relu"), (1, "identity"))), rng=rng)

    @property
    def networks(self) -> list:
        return [self.node_embed, self.gcn, self.seq, self.obs_embed, self.cell_head, self.h_head]

    @property
    def names(self) -> list:
        return ["node_embed", "gcn", "seq", "obs_embed", "cell_head", "h_head"]

    def embed_frames(self, frames):
        """Node embedding then one graph convolution: (..., N, F) -> (..., N, E)."""
        frames = np.asarray(frames, dtype=np.float64)
        lead, (N, F) = frames.shape[:-2], frames.shape[-2:]
        if N != self.n_nodes:
            raise ValueError(f"graph has {N} nodes, model expects {self.n_nodes}")
        E = self.embed
        h0, c0 = self.node_embed.forward(frames.reshape(-1, F))
        agg = np.matmul(self.adj, h0.reshape(-1, N, E))
        h1, c1 = self.gcn.forward(agg.reshape(-1, E))
        return h1.reshape(lead + (N, E)), (c0, c1)

    def head_forward(self, h1, cells, obs):
        """Sequence model and both heads from per-frame node embeddings
        h1 (B, T, N, E)."""
        B, T, N, E = h1.shape
        n2 = self.window**2
        latent, cs = self.seq.forward(h1.mean(axis=2).transpose(1, 0, 2))
        cells = np.asarray(cells)
        valid = (cells >= 0)[..., None]
        safe = np.where(cells >= 0, cells, 0)
        cell_emb = h1[np.arange(B)[:, None], -1, safe] * valid
        ob, co = self.obs_embed.forward(obs)
        parts = [
            cell_emb,
            np.asarray(obs, dtype=np.float64).reshape(B, n2, OBS_CHANNELS),
            np.broadcast_to(ob[:, None, :], (B, n2, ob.shape[1])),
            np.broadcast_to(latent[:, None, :], (B, n2, E)),
            np.broadcast_to(np.eye(n2), (B, n2, n2)),
        ]
        cell_x = np.concatenate(parts, axis=2).reshape(B * n2, -1)
        logits, ch = self.cell_head.forward(cell_x)
        h, chh = self.h_head.forward(np.concatenate([latent, ob], axis=1))
        return logits.reshape(B, n2), h[:, 0], (cs, co, ch, chh, safe, valid, ob.shape[1])

    def forward(self, frames, cells, obs):
        """frames (B, T, N, F), cells (B, n*n), obs (B, n*n*OBS_CHANNELS).

        Returns M_c logits (B, n*n), raw h_c (B,), cache.
        """
        frames = np.asarray(frames, dtype=np.float64)
        B, T, N, _ = frames.shape
        h1, (c0, c1) = self.embed_frames(frames)
        logits, h, hc = self.head_forward(h1, cells, obs)
        return logits, h, (B, T, N, c0, c1) + hc

    def backward(self, cache, dlogits, dh) -> list:
        B, T, N, c0, c1, cs, co, ch, chh, safe, valid, O = cache
        n2, E = self.window**2, self.embed
        g_cell, dcell = self.cell_head.backward(ch, np.asarray(dlogits).reshape(B * n2, 1))
        dcell = dcell.reshape(B, n2, -1)
        d_cemb = dcell[:, :, :E] * valid
        d_ob = dcell[:, :, E + OBS_CHANNELS : E + OBS_CHANNELS + O].sum(axis=1)
        d_lat = dcell[:, :, E + OBS_CHANNELS + O : E + OBS_CHANNELS + O + E].sum(axis=1)
        g_h, dhin = self.h_head.backward(chh, np.asarray(dh)[:, None])
        d_lat = d_lat + dhin[:, :E]
        d_ob = d_ob + dhin[:, E:]
        g_obs, _ = self.obs_embed.backward(co, d_ob)
        g_seq, dpool = self.seq.backward(cs, d_lat)
        dh1 = np.repeat((dpool.transpose(1, 0, 2) / N)[:, :, None, :], N, axis=2)
        last = dh1[:, -1]
        np.add.at(last, (np.repeat(np.arange(B), n2), safe.ravel()), d_cemb.reshape(B * n2, E))
        dh1[:, -1] = last
        g_gcn, dagg = self.gcn.backward(c1, dh1.reshape(-1, E))
        dh0 = np.matmul(self.adj.T, dagg.reshape(-1, N, E))
        g_emb, _ = self.node_embed.backward(c0, dh0.reshape(-1, E))
        return [g_emb, g_gcn, g_seq, g_obs, g_cell, g_h]

    def loss(self, frames, cells, obs, labels, h_labels):
        """(loss_mc + loss_hc, gradients, parts)."""
        logits, h, cache = self.forward(frames, cells, obs)
        p = _sigmoid(logits)
        l_mc, dp = loss_mc(p, labels)
        l_hc, dh = loss_hc(h, h_labels)
        grads = self.backward(cache, dp * p * (1 - p), dh)
        return l_mc + l_hc, grads, (l_mc, l_hc)


def loss_mc(pred, label):
    """Cell-averaged binary cross-entropy of predicted M_c probabilities."""
    return bce(pred, label)


def loss_hc(pred, label):
    """Squared error of the raw h_c head (batch mean)."""
    return mse(pred, np.asarray(label, dtype=np.float64))


def binarize(prob) -> np.ndarray:
    """Threshold at 0.5; ties count as constrained."""
    return (np.asarray(prob) >= 0.5).astype(np.int64)


def round_threshold(raw) -> np.ndarray:
    return np.maximum(0, np.rint(np.asarray(raw))).astype(np.int64)


def extract(model: ExtractorNet, graph_seq, obs, cells) -> tuple[np.ndarray, int]:
    """M_c (n, n) and h_c for one agent from a (T, N, F) graph sequence."""
    graph_seq = np.asarray(graph_seq, dtype=np.float64)
    if graph_seq.ndim != 3 or graph_seq.shape[0] < 1:
        raise ValueError("graph sequence must be a nonempty (T, N, F) array")
    n = model.window
    logits, h, _ = model.forward(graph_seq[None], np.asarray(cells)[None], np.asarray(obs)[None])
    return binarize(_sigmoid(logits[0])).reshape(n, n), int(round_threshold(h[0]))


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------

class ConstraintExtractor(BaseEstimator):
    """Estimator wrapper: ``fit(dataset)`` trains on a seeded 80/20 split and
    records held-out cell accuracy and h_c MAE in ``metrics_``."""

    def __init__(self, embed=16, hidden=32, obs_embed=32, epochs=20, batch_size=64, lr=3e-3,
                 holdout=0.2, seed=0):
        self.embed = embed
        self.hidden = hidden
        self.obs_embed = obs_embed
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.holdout = holdout
        self.seed = seed

    def _init_net(self, ds: ExtractorDataset, rng) -> ExtractorNet:
        return ExtractorNet(ds.n_nodes, ds.edges, ds.window, self.embed, self.hidden, self.obs_embed, rng=rng)

    def fit(self, dataset: ExtractorDataset, y=None):
        if len(dataset) == 0:
            raise ValueError("empty dataset")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        rng = np.random.default_rng(self.seed)
        self.net_ = self._init_net(dataset, rng)
        order = rng.permutation(len(dataset))
        n_hold = int(round(len(dataset) * self.holdout)) if len(dataset) > 1 else 0
        self.heldout_idx_, self.train_idx_ = order[:n_hold], order[n_hold:]
        opts = [Optimizer("adam", lr=self.lr) for _ in self.net_.networks]
        self.loss_curve_ = []
        for _ in range(self.epochs):
            perm = rng.permutation(self.train_idx_)
            total = 0.0
            for start in range(0, len(perm), self.batch_size):
                idx = perm[start : start + self.batch_size]
                fr, cells, obs = dataset.batch(idx)
                loss, grads, _ = self.net_.loss(fr, cells, obs, dataset.labels[idx], dataset.h[idx])
                for net, opt, g in zip(self.net_.networks, opts, grads):
                    apply_step(opt, net, g)
                total += loss * len(idx)
            self.loss_curve_.append(total / len(perm))
        eval_idx = self.heldout_idx_ if n_hold else self.train_idx_
        self.metrics_ = self.evaluate(dataset.subset(eval_idx))
        return self

    def predict_proba(self, dataset: ExtractorDataset, batch: int = 256):
        check_is_fitted(self, "net_")
        probs, hs = [], []
        for start in range(0, len(dataset), batch):
            idx = np.arange(start, min(start + batch, len(dataset)))
            fr, cells, obs = dataset.batch(idx)
            logits, h, _ = self.net_.forward(fr, cells, obs)
            probs.append(_sigmoid(logits))
            hs.append(h)
        return np.concatenate(probs), np.concatenate(hs)

    def predict(self, dataset: ExtractorDataset):
        """Binary M_c (S, n, n) and integer h_c (S,)."""
        p, h = self.predict_proba(dataset)
        n = dataset.window
        return binarize(p).reshape(-1, n, n), round_threshold(h)

    def evaluate(self, dataset: ExtractorDataset) -> dict:
        m, h = self.predict(dataset)
        return {
            "cell_accuracy": float(np.mean(m.reshape(len(dataset), -1) == dataset.labels)),
            "h_mae": float(np.mean(np.abs(h - dataset.h))),
            "n_samples": len(dataset),
        }

    def score(self, dataset: ExtractorDataset, y=None) -> float:
        return self.evaluate(dataset)["cell_accuracy"]


def train_extractor(dataset: ExtractorDataset, epochs: int, seed: int = 0, **kw):
    """Functional form: returns (fitted ConstraintExtractor, held-out metrics)."""
    est = ConstraintExtractor(epochs=epochs, seed=seed, **kw).fit(dataset)
    return est, est.metrics_


class LiveExtractor:
    """Feeds a running env's recent graph frames to a trained extractor.

    Each frame's graph embedding is computed once and reused while it stays
    inside the sequence window.
    """

    def __init__(self, extractor: ConstraintExtractor, seq_len: int = 4):
        check_is_fitted(extractor, "net_")
        self.net = extractor.net_
        self.seq_len = seq_len
        self.embedded: deque = deque(maxlen=seq_len)

    def reset(self) -> None:
        self.embedded.clear()

    def __call__(self, env: WarehouseEnv, obs_all: Optional[np.ndarray] = None):
        self.embedded.append(self.net.embed_frames(env.graph_features())[0])
        if len(self.embedded) == 1:
            # frames before the episode start are all-zero graphs
            self._pad = self.net.embed_frames(np.zeros_like(env.graph_features()))[0]
        seq = np.stack([self._pad] * (self.seq_len - len(self.embedded)) + list(self.embedded))
        k = env.n_agents
        if obs_all is None:
            obs_all = env.observe_all()
        obs = np.stack([raw_window(obs_all[i], env.window) for i in range(k)])
        cells = np.stack([window_cells(env, i) for i in range(k)])
        logits, h, _ = self.net.head_forward(np.broadcast_to(seq, (k,) + seq.shape), cells, obs)
        n = env.window
        return binarize(_sigmoid(logits)).reshape(k, n, n), round_threshold(h)


def save_extractor(est: ConstraintExtractor, path) -> None:
    from .approximator import save_checkpoint

    check_is_fitted(est, "net_")
    net = est.net_
    meta = {"kind": "extractor", "params": est.get_params(), "n_nodes": net.n_nodes,
            "edges": [list(e) for e in net.edges], "window": net.window, "metrics": est.metrics_}
    save_checkpoint(path, dict(zip(net.names, net.networks)), meta)


def load_extractor(path) -> ConstraintExtractor:
    from .approximator import load_checkpoint

    entries, meta = load_checkpoint(path)
    if meta.get("kind") != "extractor":
        raise ValueError("checkpoint does not hold an extractor")
    est = ConstraintExtractor(**meta["params"])
    net = ExtractorNet(meta["n_nodes"], [tuple(e) for e in meta["edges"]], meta["window"],
                       est.embed, est.hidden, est.obs_embed)
    for name in net.names:
        setattr(net, name, entries[name][0])
    est.net_ = net
    est.metrics_ = meta.get("metrics", {})
    return est
