"""Frame encoder with attention pooling, projector and predictor heads.

Parameters live in flat ``dict[str, Tensor]`` maps keyed by slash-separated
names (``encoder/w0``, ``projector/bn1/gamma`` ...). Names listed by
:func:`is_buffer` hold non-trainable state such as input statistics and
batch-norm running moments.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .audio import N_MELS
from .errors import ConfigError, DimensionError, EmptyInputError
from .tensor import DTYPE, RunningStats, Tensor, batch_norm, matmul, no_grad, relu, softmax

EMBEDDING_DIM = 1024
PROJECTION_DIM = 2048
DEFAULT_TIME_POOL = 8

Params = dict[str, Tensor]

_BUFFER_SUFFIXES = ("/input_mean", "/input_std", "/running_mean", "/running_var")


def is_buffer(name: str) -> bool:
    return name.endswith(_BUFFER_SUFFIXES)


def trainable(params: Params) -> list[tuple[str, Tensor]]:
    return [(k, v) for k, v in params.items() if not is_buffer(k)]


@dataclass
class EncoderConfig:
    frame_dim: int = N_MELS
    hidden_dims: list[int] = field(default_factory=lambda: [256, 512])
    embedding_dim: int = EMBEDDING_DIM
    # mean-pool this many consecutive frames before the frame MLP
    time_pool: int = DEFAULT_TIME_POOL
    seed: int = 0

    def validate(self) -> None:
        if self.embedding_dim != EMBEDDING_DIM:
            raise ConfigError(f"embedding_dim is fixed at {EMBEDDING_DIM}, got {self.embedding_dim}")
        if self.frame_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("layer widths must be positive")
        if self.time_pool < 1:
            raise ConfigError("time_pool must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(DTYPE)


def init_weights(config: EncoderConfig) -> Params:
    """Encoder parameters; the attention scorer starts at zero (uniform pooling)."""
    config.validate()
    rng = np.random.default_rng([config.seed, 1])
    p: Params = {
        "encoder/input_mean": Tensor(np.zeros(config.frame_dim)),
        "encoder/input_std": Tensor(np.ones(config.frame_dim)),
    }
    dims = [config.frame_dim, *config.hidden_dims]
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        p[f"encoder/w{i}"] = Tensor(_he_uniform(rng, a, b), requires_grad=True)
        p[f"encoder/b{i}"] = Tensor(np.zeros(b), requires_grad=True)
    p["encoder/w_out"] = Tensor(_he_uniform(rng, dims[-1], config.embedding_dim), requires_grad=True)
    p["encoder/b_out"] = Tensor(np.zeros(config.embedding_dim), requires_grad=True)
    p["encoder/attn_w"] = Tensor(np.zeros((config.embedding_dim, 1)), requires_grad=True)
    p["encoder/attn_b"] = Tensor(np.zeros(1), requires_grad=True)
    return p


def _mlp_block_params(rng, prefix: str, dims: list[int]) -> Params:
    p: Params = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        p[f"{prefix}/w{i}"] = Tensor(_he_uniform(rng, a, b), requires_grad=True)
        p[f"{prefix}/b{i}"] = Tensor(np.zeros(b), requires_grad=True)
        p[f"{prefix}/bn{i}/gamma"] = Tensor(np.ones(b), requires_grad=True)
        p[f"{prefix}/bn{i}/beta"] = Tensor(np.zeros(b), requires_grad=True)
        p[f"{prefix}/bn{i}/running_mean"] = Tensor(np.zeros(b))
        p[f"{prefix}/bn{i}/running_var"] = Tensor(np.ones(b))
    return p


def init_projector(seed: int, in_dim: int = EMBEDDING_DIM) -> Params:
    """Two linear + batch-norm + ReLU blocks: ``in_dim -> 1024 -> 2048``."""
    return _mlp_block_params(np.random.default_rng([seed, 2]), "projector", [in_dim, 1024, PROJECTION_DIM])


def init_predictor(seed: int) -> Params:
    return _mlp_block_params(
        np.random.default_rng([seed, 3]), "predictor", [PROJECTION_DIM, PROJECTION_DIM, PROJECTION_DIM]
    )


def n_hidden(params: Params) -> int:
    n = 0
    while f"encoder/w{n}" in params:
        n += 1
    return n


def parameter_count(params: Params) -> int:
    return int(sum(v.size for _, v in trainable(params)))


def _prepare(params: Params, frames: np.ndarray, time_pool: int) -> np.ndarray:
    x = np.asarray(frames, dtype=DTYPE)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise DimensionError(f"expected B x T x F frames, got shape {x.shape}")
    if x.shape[1] == 0:
        raise EmptyInputError("segment has no frames")
    x = (x - params["encoder/input_mean"].data) / params["encoder/input_std"].data
    if time_pool > 1:
        t = x.shape[1] // time_pool
        if t == 0:
            raise EmptyInputError(f"segment of {x.shape[1]} frames is shorter than time_pool={time_pool}")
        x = x[:, : t * time_pool].reshape(x.shape[0], t, time_pool, x.shape[2]).mean(axis=2)
    return x


def _hidden(params: Params, x: np.ndarray) -> Tensor:
    b, t, f = x.shape
    h = Tensor(x.reshape(b * t, f))
    for i in range(n_hidden(params)):
        h = relu(h @ params[f"encoder/w{i}"] + params[f"encoder/b{i}"])
    return h


def encode_batch(params: Params, frames: np.ndarray, time_pool: int = DEFAULT_TIME_POOL, return_attention: bool = False):
    """Embed a batch of mel segments (``B x T x 128``) to ``B x 1024``.

    Frame features are ``f_t = W h_t + b`` on top of a ReLU MLP, scored by a
    linear map and pooled with softmax weights over time. Because the last
    frame layer is affine and the weights sum to one, pooling is carried out
    on ``h_t`` and ``W`` is applied once per segment; the result is the same
    weighted sum of frame features.
    """
    x = _prepare(params, frames, time_pool)
    b, t, _ = x.shape
    h = _hidden(params, x)
    w_out, b_out = params["encoder/w_out"], params["encoder/b_out"]
    score_dir = matmul(w_out, params["encoder/attn_w"])  # H x 1
    scores = (h @ score_dir).reshape(b, t)
    # the constant part of the score (b_out . attn_w + attn_b) cancels in the softmax
    attn = softmax(scores, axis=1)
    pooled = (h.reshape(b, t, h.shape[1]) * attn.reshape(b, t, 1)).sum(axis=1)
    emb = pooled @ w_out + b_out
    if return_attention:
        return emb, attn
    return emb


def frame_features(params: Params, frames: np.ndarray, time_pool: int = DEFAULT_TIME_POOL) -> np.ndarray:
    """Materialized per-frame 1024-d features (``B x T' x 1024``); for inspection."""
    with no_grad():
        x = _prepare(params, frames, time_pool)
        h = _hidden(params, x).data
    f = h @ params["encoder/w_out"].data + params["encoder/b_out"].data
    return f.reshape(x.shape[0], x.shape[1], -1)


def encode(segment, params: Params, time_pool: int = DEFAULT_TIME_POOL) -> np.ndarray:
    """Embedding of a single :class:`MelSegment` (or ``T x 128`` array) without recording a graph."""
    frames = getattr(segment, "frames", segment)
    with no_grad():
        return encode_batch(params, np.asarray(frames)[None], time_pool).data[0]


def _blocks(x: Tensor, params: Params, prefix: str, mode: str) -> Tensor:
    i = 1
    while f"{prefix}/w{i}" in params:
        x = x @ params[f"{prefix}/w{i}"] + params[f"{prefix}/b{i}"]
        stats = RunningStats(params[f"{prefix}/bn{i}/running_mean"].data, params[f"{prefix}/bn{i}/running_var"].data)
        x = batch_norm(
            x,
            params[f"{prefix}/bn{i}/gamma"],
            params[f"{prefix}/bn{i}/beta"],
            mode="eval" if mode == "eval" else "train",
            running_stats=None if mode == "frozen_stats" else stats,
        )
        x = relu(x)
        i += 1
    return x


def project(embedding: Tensor, params: Params, mode: str = "train") -> Tensor:
    """Projector head. ``mode`` is ``train`` (batch stats, running stats
    updated), ``frozen_stats`` (batch stats, running stats untouched) or ``eval``."""
    return _blocks(embedding, params, "projector", mode)


def predict(projection: Tensor, params: Params, mode: str = "train") -> Tensor:
    return _blocks(projection, params, "predictor", mode)


def set_input_stats(params: Params, frames: np.ndarray) -> None:
    """Store per-bin mean and std of ``frames`` (``N x 128``) as the input normalization."""
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    params["encoder/input_mean"].data[...] = mean
    params["encoder/input_std"].data[...] = np.where(std > 1e-6, std, 1.0)

