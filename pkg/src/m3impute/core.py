"""Mask-aware imputation model: initialization, correlation units, fusion and training.

Layout conventions: sample embeddings ``H_S`` are ``(n, d)`` rows, feature
embeddings ``H_F`` are ``(m, d)`` rows, masks are ``(n, m)`` with 1 = observed.
Scaled data keeps continuous columns in [0, 1] and discrete columns as class
codes; the "unit" view maps code ``k`` of a C-class column to ``k / (C - 1)``.

Two forms of the forward pass are provided. The per-cell functions
(:func:`feature_correlation`, :func:`pair_similarity`,
:func:`sample_correlation`, :func:`fuse_and_predict`) follow the definitions
one cell at a time. :func:`predict_cells` evaluates the same quantities for a
batch of cells, sharing every per-(sample, feature) intermediate between the
cells and peers that need it.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .dataio import sample_message_edges, unit_values
from .exceptions import ConfigurationError, ContractError, SchemaError, TrainingError
from .graph import EncoderParams, build_graph, encode
from .layers import MLP
from .seeding import as_generator, stream
from .tensor import Adam, GradTape, Tensor, uniform_init

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
SIMILARITY_FLOOR = 1e-6


@dataclass(frozen=True)
class VariantConfig:
    enable_fcu: bool = True
    enable_scu: bool = True
    init_mode: str = "m3"  # or "grape_onehot"
    peer_sampling: str = "cosine"  # or "uniform"
    decoder: str = "m3_fusion"  # or "dot_product"

    def __post_init__(self):
        if self.init_mode not in ("m3", "grape_onehot"):
            raise ConfigurationError(f"unknown init_mode {self.init_mode!r}")
        if self.peer_sampling not in ("cosine", "uniform"):
            raise ConfigurationError(f"unknown peer_sampling {self.peer_sampling!r}")
        if self.decoder == "m3_fusion":
            if not (self.enable_fcu or self.enable_scu):
                raise ConfigurationError("the fusion decoder needs FCU or SCU enabled")
        elif self.decoder == "dot_product":
            if self.enable_fcu or self.enable_scu:
                raise ConfigurationError("the dot-product decoder bypasses FCU and SCU")
        else:
            raise ConfigurationError(f"unknown decoder {self.decoder!r}")


VARIANTS = {
    "m3": VariantConfig(),
    "init_only": VariantConfig(enable_fcu=False, enable_scu=False, decoder="dot_product"),
    "init_fcu": VariantConfig(enable_scu=False),
    "init_scu": VariantConfig(enable_fcu=False),
    "m3_uniform": VariantConfig(peer_sampling="uniform"),
}


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 128
    layers: int = 3
    peer_count: int = 5
    epsilon: float = 1e-4
    alpha_hidden: int = 16
    learnable_alpha: bool = True
    fixed_alpha: float = 0.5
    normalize_embeddings: bool = True
    variant: VariantConfig = field(default_factory=VariantConfig)

    def __post_init__(self):
        if self.dim < 1 or self.layers < 1:
            raise ConfigurationError("dim and layers must be positive")
        if self.peer_count < 1:
            raise ConfigurationError("peer_count must be at least 1")
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")

    @property
    def uses_peers(self) -> bool:
        return self.variant.enable_scu

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["variant"] = VariantConfig(**d.get("variant", {}))
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5000
    lr: float = 1e-3
    edge_keep: float = 0.5
    full_batch_limit: int = 50_000
    batch_cells: int = 4096

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 < self.edge_keep <= 1:
            raise ConfigurationError(f"edge_keep must lie in (0, 1], got {self.edge_keep}")


class M3Params:
    """Every learnable array of the model.

    Attribute to role: ``feature_embed`` initial feature embeddings;
    ``init_proj`` maps the masked feature mix to initial sample embeddings;
    ``mask_gate`` turns a binary mask into a soft mask; ``profile_proj`` lifts
    the gated feature-similarity profile to width d; ``fcu_out`` closes the
    feature correlation unit; ``relevance`` builds a soft feature-relevance
    vector from a peer mask and the target feature; ``peer_proj`` and
    ``scu_out`` wrap peer aggregation; ``alpha_net`` maps peer similarities to
    the fusion weight; ``value_head`` and ``class_heads`` decode.
    """

    def __init__(self, rng: np.random.Generator, n_classes, config: ModelConfig):
        n_classes = np.asarray(n_classes, np.int64)
        m, d, k = n_classes.size, config.dim, config.peer_count
        self.n_classes = n_classes
        self.config = config
        self.feature_embed = uniform_init(rng, (m, d), d, "feature_embed")
        self.encoder = EncoderParams(rng, n_classes, d, config.layers)
        self.init_proj = MLP(rng, d, d, d, "init_proj")
        self.mask_gate = MLP(rng, m, m, d, "mask_gate")
        self.profile_proj = MLP(rng, m, d, d, "profile_proj")
        self.fcu_out = MLP(rng, d, d, d, "fcu_out")
        self.relevance = MLP(rng, 2 * m, d, d, "relevance")
        self.peer_proj = MLP(rng, d, d, d, "peer_proj")
        self.scu_out = MLP(rng, d, d, d, "scu_out")
        self.alpha_net = MLP(rng, k, 1, config.alpha_hidden, "alpha_net")
        self.value_head = MLP(rng, d, 1, d, "value_head")
        self.class_heads = {
            int(j): MLP(rng, d, int(n_classes[j]), d, f"class_head{j}")
            for j in np.flatnonzero(n_classes)
        }
        if config.variant.init_mode == "grape_onehot":
            if m > d:
                raise ConfigurationError(f"one-hot feature embeddings need m <= d ({m} > {d})")
            self.feature_embed = Tensor(np.eye(m, d), name="feature_embed")

    def modules(self) -> dict:
        out = {
            "init_proj": self.init_proj,
            "mask_gate": self.mask_gate,
            "profile_proj": self.profile_proj,
            "fcu_out": self.fcu_out,
            "relevance": self.relevance,
            "peer_proj": self.peer_proj,
            "scu_out": self.scu_out,
            "alpha_net": self.alpha_net,
            "value_head": self.value_head,
        }
        out.update({f"class_head{j}": h for j, h in self.class_heads.items()})
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        named = {"feature_embed": self.feature_embed}
        named.update({p.name: p for p in self.encoder.parameters()})
        for mod in self.modules().values():
            named.update({p.name: p for p in mod.parameters()})
        return named

    def trainable(self) -> list[Tensor]:
        """Parameters the configured variant actually uses."""
        v = self.config.variant
        used = [*self.encoder.parameters()]
        if v.init_mode == "m3":
            used += [self.feature_embed, *self.init_proj.parameters()]
        if v.decoder == "m3_fusion":
            used += self.mask_gate.parameters() + self.profile_proj.parameters()
            used += self.fcu_out.parameters()
            if v.enable_scu:
                used += self.relevance.parameters() + self.peer_proj.parameters()
                used += self.scu_out.parameters()
                if v.enable_fcu and self.config.learnable_alpha:
                    used += self.alpha_net.parameters()
            if (self.n_classes == 0).any():
                used += self.value_head.parameters()
            for head in self.class_heads.values():
                used += head.parameters()
        return used


# Per-cell building blocks


def init_sample_embeddings(D_unit, M, H_F0, init_proj, epsilon) -> Tensor:
    """``init_proj(H_F0^T [d_s + eps (1 - m_s)])`` for every sample, as ``(n, d)`` rows.

    Unobserved cells contribute ``epsilon`` times their feature embedding, so
    a missing value is distinguishable from an observed zero.
    """
    if epsilon < 0:
        raise ConfigurationError(f"epsilon must be >= 0, got {epsilon}")
    M = np.asarray(M, dtype=np.float64)
    mixed = np.where(M > 0, np.asarray(D_unit, dtype=np.float64), 0.0) + epsilon * (1.0 - M)
    return init_proj(T.matmul(Tensor(mixed), H_F0))


def feature_correlation(h_x, mask, f, H_F, params) -> Tensor:
    """Feature correlation unit for one embedding under one mask and target feature.

    The target feature's similarity profile against all features is gated by
    the soft mask, lifted to width d and multiplied into ``h_x``.
    """
    H_F = T.as_tensor(H_F)
    if not 0 <= f < H_F.shape[0]:
        raise ContractError(f"target feature {f} outside [0, {H_F.shape[0]})")
    profile = T.matmul(T.take(H_F, f), T.transpose(H_F))
    gate = params.mask_gate(Tensor(np.asarray(mask, dtype=np.float64)))
    return params.fcu_out(T.hadamard(T.as_tensor(h_x), params.profile_proj(T.hadamard(profile, gate))))


def pair_similarity(s, p, f, H_S, masks, H_F, params) -> Tensor:
    """Similarity of samples ``s`` and ``p`` for feature ``f`` under swapped masks."""
    H_S = T.as_tensor(H_S)
    a = feature_correlation(T.take(H_S, s), masks[p], f, H_F, params)
    b = feature_correlation(T.take(H_S, p), masks[s], f, H_F, params)
    return T.tsum(T.hadamard(a, b))


def _onehot(f, m):
    e = np.zeros(m)
    e[f] = 1.0
    return e


def sample_correlation(s, peers, f, H_S, masks, H_F, params) -> tuple[Tensor, Tensor]:
    """Sample correlation unit; returns ``(z, sims)`` for target cell ``(s, f)``."""
    peers = np.asarray(getattr(peers, "peers", peers))
    if peers.size == 0:
        raise ContractError("sample correlation needs at least one peer")
    H_S = T.as_tensor(H_S)
    m = np.shape(masks)[1]
    sims, weighted = [], None
    for p in peers:
        sim = pair_similarity(s, p, f, H_S, masks, H_F, params)
        relevance = params.relevance(Tensor(np.concatenate([masks[p], _onehot(f, m)])))
        term = params.peer_proj(T.hadamard(T.take(H_S, p), relevance)) * sim
        weighted = term if weighted is None else weighted + term
        sims.append(T.reshape(sim, (1,)))
    return params.scu_out(weighted), T.concat(sims)


def fusion_weight(sims, params) -> Tensor:
    cfg = params.config
    if not cfg.learnable_alpha:
        return Tensor(np.full(np.shape(sims)[:-1] + (1,), cfg.fixed_alpha))
    return T.gamma_act(params.alpha_net(sims))


def decode(fused, params, column) -> Tensor:
    """Continuous head ends in ReLU; a discrete column's head returns logits."""
    if params.n_classes[column] > 0:
        return params.class_heads[int(column)](fused)
    return T.relu(params.value_head(fused))


def fuse_and_predict(c, z, sims, params, column) -> tuple[Tensor, Tensor]:
    """Blend the two context vectors and decode; returns ``(prediction, alpha)``.

    Discrete predictions are class probabilities.
    """
    v = params.config.variant
    if not v.enable_scu:
        fused, alpha = c, None
    elif not v.enable_fcu:
        fused, alpha = z, None
    else:
        alpha = fusion_weight(sims, params)
        fused = c * (1.0 - alpha) + z * alpha
    out = decode(fused, params, column)
    if params.n_classes[column] > 0:
        out = T.softmax(out)
    return out, alpha


# Peers


@dataclass(frozen=True)
class PeerSet:
    target: int
    peers: np.ndarray
    weights: np.ndarray  # sampling weight of every sample (0 for the target itself)


def _peer_keys(H_S, rows, strategy, rng):
    n = H_S.shape[0]
    if strategy == "uniform":
        keys = rng.random((rows.size, n))
        weights = np.ones((rows.size, n))
    else:
        norms = np.linalg.norm(H_S, axis=1)
        unit = H_S / np.where(norms > 0, norms, 1.0)[:, None]
        cos = unit[rows] @ unit.T
        weights = np.maximum(cos, 0.0) + SIMILARITY_FLOOR
        # Gumbel-top-k: the k largest log w + G are an ordered draw without replacement.
        keys = np.log(weights) - np.log(-np.log(rng.random((rows.size, n))))
    keys[np.arange(rows.size), rows] = -np.inf
    weights[np.arange(rows.size), rows] = 0.0
    return keys, weights


def _top_k(keys, k):
    part = np.argpartition(-keys, k - 1, axis=1)[:, :k]
    order = np.argsort(-np.take_along_axis(keys, part, axis=1), axis=1, kind="stable")
    return np.take_along_axis(part, order, axis=1)


def _check_peer_count(n, k):
    if n <= k:
        raise ConfigurationError(f"peer_count {k} needs more than {k} samples, got {n}")


def sample_peers(s, H_S, peer_count, strategy="cosine", seed=None) -> PeerSet:
    H_S = np.asarray(getattr(H_S, "data", H_S))
    _check_peer_count(H_S.shape[0], peer_count)
    keys, weights = _peer_keys(H_S, np.array([s]), strategy, as_generator(seed))
    return PeerSet(int(s), _top_k(keys, peer_count)[0], weights[0])


def sample_peer_table(H_S, peer_count, strategy, seed, chunk=1024) -> np.ndarray:
    """Draw a peer list for every sample; returns an ``(n, peer_count)`` index array."""
    H_S = np.asarray(getattr(H_S, "data", H_S))
    n = H_S.shape[0]
    _check_peer_count(n, peer_count)
    rng = as_generator(seed)
    out = np.empty((n, peer_count), dtype=np.int64)
    for lo in range(0, n, chunk):
        rows = np.arange(lo, min(lo + chunk, n))
        keys, _ = _peer_keys(H_S, rows, strategy, rng)
        out[rows] = _top_k(keys, peer_count)
    return out


# Batched forward


def embed(params: M3Params, D_scaled, M_message) -> tuple[Tensor, Tensor]:
    """Initial embeddings plus encoder over the graph of ``M_message`` edges."""
    cfg = params.config
    n = np.shape(D_scaled)[0]
    if cfg.variant.init_mode == "m3":
        H_F0 = params.feature_embed
        D_unit = unit_values(D_scaled, params.n_classes)
        H_S0 = init_sample_embeddings(D_unit, M_message, H_F0, params.init_proj, cfg.epsilon)
    else:
        H_F0 = params.feature_embed
        H_S0 = Tensor(np.ones((n, cfg.dim)))
    G = build_graph(D_scaled, M_message, params.n_classes)
    return encode(G, H_S0, H_F0, params.encoder, normalize=cfg.normalize_embeddings)


@dataclass
class CellOutputs:
    """Raw decoder outputs for a batch of cells, grouped by column kind.

    ``value_rows`` index into the batch for continuous (or dot-product) cells
    whose predictions are in ``values``; ``class_rows[j]`` and
    ``logits[j]`` hold discrete column ``j``.
    """

    value_rows: np.ndarray
    values: Tensor | None
    class_rows: dict
    logits: dict
    alpha: Tensor | None = None


def _pair_index(q, f, m):
    keys = q * m + f
    uniq, inverse = np.unique(keys.reshape(-1), return_inverse=True)
    return uniq // m, uniq % m, inverse.reshape(keys.shape)


def predict_cells(params: M3Params, H_S, H_F, masks, rows, cols, peers=None) -> CellOutputs:
    """Decode cells ``(rows[i], cols[i])`` from encoded embeddings.

    ``peers`` is an ``(n, K)`` table and is required when SCU is enabled.
    """
    cfg, v = params.config, params.config.variant
    rows = np.asarray(rows, np.int64)
    cols = np.asarray(cols, np.int64)
    masks = np.asarray(masks, np.float64)
    n_cells, m = rows.size, masks.shape[1]

    if v.decoder == "dot_product":
        scores = T.relu(T.tsum(T.hadamard(T.take(H_S, rows), T.take(H_F, cols)), axis=1))
        return CellOutputs(np.arange(n_cells), scores, {}, {})

    if v.enable_scu:
        if peers is None:
            raise ContractError("peer table required when SCU is enabled")
        cell_peers = np.asarray(peers)[rows]
        k = cell_peers.shape[1]
        all_q = np.concatenate([rows[:, None], cell_peers], axis=1)
        all_f = np.repeat(cols[:, None], k + 1, axis=1)
    else:
        all_q, all_f = rows[:, None], cols[:, None]
    pair_q, pair_f, where = _pair_index(all_q, all_f, m)

    # Per (sample, feature) pair: gated similarity profile lifted to width d.
    profiles = T.matmul(H_F, T.transpose(H_F))
    gate = params.mask_gate(Tensor(masks[pair_q]))
    lifted = params.profile_proj(T.hadamard(T.take(profiles, pair_f), gate))

    h_s = T.take(H_S, rows)
    own = T.take(lifted, where[:, 0])
    c = params.fcu_out(T.hadamard(h_s, own)) if v.enable_fcu else None

    z = alpha = None
    if v.enable_scu:
        d = cfg.dim
        h_p = T.take(H_S, cell_peers)
        # FCU(h_s, m_p, f) and FCU(h_p, m_s, f): the mutual-masking pair.
        s_under_p = params.fcu_out(T.mul(T.reshape(h_s, (n_cells, 1, d)), T.take(lifted, where[:, 1:])))
        p_under_s = params.fcu_out(T.mul(h_p, T.reshape(own, (n_cells, 1, d))))
        sims = T.tsum(T.hadamard(s_under_p, p_under_s), axis=2)

        onehots = np.eye(m)[pair_f]
        relevance = params.relevance(Tensor(np.concatenate([masks[pair_q], onehots], axis=1)))
        masked_peer = params.peer_proj(T.hadamard(T.take(H_S, pair_q), relevance))
        weighted = T.mul(T.take(masked_peer, where[:, 1:]), T.reshape(sims, (n_cells, k, 1)))
        z = params.scu_out(T.tsum(weighted, axis=1))
        if v.enable_fcu:
            alpha = fusion_weight(sims, params)
            fused = c * (1.0 - alpha) + z * alpha
        else:
            fused = z
    else:
        fused = c

    disc = params.n_classes[cols] > 0
    value_rows = np.flatnonzero(~disc)
    values = None
    if value_rows.size:
        values = T.reshape(T.relu(params.value_head(T.take(fused, value_rows))), (value_rows.size,))
    class_rows, logits = {}, {}
    for j in np.unique(cols[disc]):
        idx = np.flatnonzero(cols == j)
        class_rows[int(j)] = idx
        logits[int(j)] = params.class_heads[int(j)](T.take(fused, idx))
    return CellOutputs(value_rows, values, class_rows, logits, alpha)


def cell_loss(out: CellOutputs, params: M3Params, D_scaled, rows, cols) -> Tensor:
    """Per-cell average of squared error (continuous) and cross-entropy (discrete)."""
    n_cells = np.size(rows)
    D_unit = unit_values(D_scaled, params.n_classes)
    terms = []
    if out.values is not None:
        r = out.value_rows
        target = D_unit[rows[r], cols[r]]
        terms.append(T.mse_loss(out.values, Tensor(target)) * (r.size / n_cells))
    for j, idx in out.class_rows.items():
        labels = D_scaled[rows[idx], j].astype(np.int64)
        terms.append(T.ce_loss(out.logits[j], labels) * (idx.size / n_cells))
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return loss


def outputs_to_values(out: CellOutputs, params: M3Params, cols, n_cells) -> np.ndarray:
    """Predictions in scaled space: continuous values, discrete class codes."""
    pred = np.empty(n_cells)
    cols = np.asarray(cols)
    if out.values is not None:
        vals = out.values.data
        if params.config.variant.decoder == "dot_product":
            c = params.n_classes[cols[out.value_rows]]
            disc = c > 0
            vals = vals.copy()
            vals[disc] = np.clip(np.rint(vals[disc] * (c[disc] - 1)), 0, c[disc] - 1)
        pred[out.value_rows] = vals
    for j, idx in out.class_rows.items():
        pred[idx] = out.logits[j].data.argmax(axis=1)
    return pred


# Training and inference


@dataclass
class FitResult:
    params: M3Params
    losses: list[float]
    train_seconds: float


def loss_cells(M, train: TrainConfig, rng):
    rows, cols = np.nonzero(M)
    if M.size > train.full_batch_limit and rows.size > train.batch_cells:
        pick = np.sort(rng.choice(rows.size, size=train.batch_cells, replace=False))
        rows, cols = rows[pick], cols[pick]
    return rows, cols


def fit(D_scaled, M, n_classes, config: ModelConfig = ModelConfig(),
        train: TrainConfig = TrainConfig(), seed: int = 0, params: M3Params | None = None,
        callback=None) -> FitResult:
    """Train on the observed cells of ``D_scaled``.

    Randomness comes from named streams of ``seed``: ``init`` for parameters,
    ``dropout`` for message edges, ``peers`` for peer draws and ``batch`` for
    loss-cell subsampling.

    Raises
    ------
    TrainingError
        The loss became non-finite; ``exc.epoch`` is the 1-based epoch.
    """
    D_scaled = np.asarray(D_scaled, np.float64)
    M = np.asarray(M, bool)
    if D_scaled.shape != M.shape:
        raise ContractError(f"data {D_scaled.shape} and mask {M.shape} differ in shape")
    if config.uses_peers:
        _check_peer_count(M.shape[0], config.peer_count)
    if params is None:
        params = M3Params(stream(seed, "init"), n_classes, config)
    rng_drop, rng_peer, rng_batch = (stream(seed, s) for s in ("dropout", "peers", "batch"))
    trainable = params.trainable()
    opt = Adam(trainable, lr=train.lr)
    masks = M.astype(np.float64)
    losses = []
    start = time.perf_counter()
    for epoch in range(1, train.epochs + 1):
        with GradTape() as tape:
            kept = sample_message_edges(M, train.edge_keep, rng_drop)
            H_S, H_F = embed(params, D_scaled, kept)
            peers = None
            if config.uses_peers:
                peers = sample_peer_table(H_S.data, config.peer_count,
                                          config.variant.peer_sampling, rng_peer)
            rows, cols = loss_cells(M, train, rng_batch)
            out = predict_cells(params, H_S, H_F, masks, rows, cols, peers)
            loss = cell_loss(out, params, D_scaled, rows, cols)
            value = loss.item()
            if not math.isfinite(value):
                tape.clear()
                raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            tape.backward(loss)
        for p in trainable:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        opt.step()
        losses.append(value)
        if epoch % 500 == 0:
            log.info("epoch %d loss %.5f (%.0fs)", epoch, value, time.perf_counter() - start)
        if callback is not None:
            callback(epoch, value)
    return FitResult(params, losses, time.perf_counter() - start)


def predict_matrix(params: M3Params, D_scaled, M, seed: int = 0, cells=None,
                   chunk: int = 2048) -> np.ndarray:
    """Impute cells of a matrix; observed cells are returned unchanged.

    By default every unobserved cell is predicted. Embeddings use all observed
    cells; peers are drawn once from the ``peers`` stream of ``seed``.
    """
    D_scaled = np.asarray(D_scaled, np.float64)
    M = np.asarray(M, bool)
    out = np.where(M, D_scaled, 0.0)
    rows, cols = np.nonzero(~M) if cells is None else map(np.asarray, cells)
    if rows.size == 0:
        return out
    cfg = params.config
    with T.no_grad():
        H_S, H_F = embed(params, D_scaled, M)
        peers = None
        if cfg.uses_peers:
            peers = sample_peer_table(H_S.data, cfg.peer_count, cfg.variant.peer_sampling,
                                      stream(seed, "peers"))
        masks = M.astype(np.float64)
        for lo in range(0, rows.size, chunk):
            r, c = rows[lo:lo + chunk], cols[lo:lo + chunk]
            res = predict_cells(params, H_S, H_F, masks, r, c, peers)
            out[r, c] = outputs_to_values(res, params, c, r.size)
    return out


def impute_cell(params: M3Params, D_scaled, M, s, f, seed: int = 0) -> float:
    return float(predict_matrix(params, D_scaled, M, seed, cells=([s], [f]))[s, f])


# Checkpoints


def save_checkpoint(path, params: M3Params) -> None:
    """Write all parameter arrays plus a JSON header into one ``.npz`` file."""
    meta = {
        "format": "m3impute-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "n_classes": params.n_classes.tolist(),
        "shapes": {k: list(p.shape) for k, p in params.named_parameters().items()},
    }
    arrays = {k: p.data for k, p in params.named_parameters().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> M3Params:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != "m3impute-checkpoint":
            raise SchemaError(f"{path}: not a checkpoint file")
        if meta["version"] != CHECKPOINT_VERSION:
            raise SchemaError(f"{path}: unsupported checkpoint version {meta['version']}")
        config = ModelConfig.from_dict(meta["config"])
        params = M3Params(np.random.default_rng(0), meta["n_classes"], config)
        for name, p in params.named_parameters().items():
            if name not in z.files:
                raise SchemaError(f"{path}: missing array {name!r}")
            arr = z[name]
            if arr.shape != p.shape:
                raise SchemaError(f"{path}: {name!r} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.astype(np.float64)
    return params


def with_variant(config: ModelConfig, method: str) -> ModelConfig:
    if method not in VARIANTS:
        raise ConfigurationError(f"unknown model variant {method!r}; choose from {sorted(VARIANTS)}")
    return replace(config, variant=VARIANTS[method])
