"""A tiny autoregressive LM in numpy with hand-written backprop.

Architecture: token embedding + learned positional embedding, then
``n_layers`` residual blocks, then an output projection. A block is either

* ``mlp``:  h <- h + tanh(h W1 + b1) W2 + b2
* ``attn``: h <- h + softmax_causal(q k^T / sqrt(d)) v Wo, followed by the mlp update

There is no normalization layer. Everything runs in the dtype of the
parameter arrays (float32 by default, float64 for gradient checks).
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

MAGIC = b"WSLM"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    V: int
    d: int = 16
    context: int = 64
    hidden: int = 64
    n_layers: int = 1
    block: str = "mlp"
    tied: bool = False

    def __post_init__(self):
        if self.V < 2:
            raise ValueError("V must be at least 2")
        if self.d < 2 or self.context < 2 or self.hidden < 1:
            raise ValueError("need d >= 2, context >= 2, hidden >= 1")
        if not 1 <= self.n_layers <= 4:
            raise ValueError("n_layers must be in [1, 4]")
        if self.block not in ("mlp", "attn"):
            raise ValueError(f"block must be 'mlp' or 'attn', got {self.block!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    batch: int = 32
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    seed: int = 0
    frozen: tuple[str, ...] = ()

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EmbeddingStats:
    mean: float
    std: float
    histogram: list[tuple[float, int]]


def tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every parameter tensor, in canonical order."""
    d, H = cfg.d, cfg.hidden
    shapes = {"embedding": (cfg.V, d), "positional": (cfg.context, d)}
    for i in range(cfg.n_layers):
        if cfg.block == "attn":
            for w in ("wq", "wk", "wv", "wo"):
                shapes[f"l{i}.{w}"] = (d, d)
        shapes[f"l{i}.w1"] = (d, H)
        shapes[f"l{i}.b1"] = (H,)
        shapes[f"l{i}.w2"] = (H, d)
        shapes[f"l{i}.b2"] = (d,)
    if not cfg.tied:
        shapes["out_w"] = (d, cfg.V)
    shapes["out_b"] = (cfg.V,)
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(repr=False)

    @property
    def embedding(self) -> np.ndarray:
        return self.tensors["embedding"]

    @property
    def out_weight(self) -> np.ndarray:
        return self.tensors["embedding"].T if self.config.tied else self.tensors["out_w"]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def digest(self) -> str:
        return hashlib.sha256(checkpoint_bytes(self)).hexdigest()


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Uniform(-a, a) weights with a = 1/sqrt(fan_in); biases start at zero.

    The embedding and positional tables use a = 1/sqrt(d).
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in tensor_shapes(config).items():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape, dtype=np.float32)
            continue
        fan_in = config.d if name in ("embedding", "positional") else shape[0]
        a = 1.0 / math.sqrt(fan_in)
        tensors[name] = rng.uniform(-a, a, size=shape).astype(np.float32)
    return ModelParams(config, tensors)


def zero_model(config: ModelConfig) -> ModelParams:
    return ModelParams(config, {n: np.zeros(s, dtype=np.float32) for n, s in tensor_shapes(config).items()})


# ---------------------------------------------------------------- forward / backward

def _forward(params: ModelParams, x: np.ndarray, hidden_noise: np.ndarray | None = None):
    """x: (B, T, d) input embeddings, positional not yet added. Returns (logits, cache)."""
    cfg, p = params.config, params.tensors
    T = x.shape[1]
    if T > cfg.context:
        raise ValueError(f"sequence of length {T} exceeds context {cfg.context}")
    h = x + p["positional"][:T]
    layers = []
    scale = 1.0 / math.sqrt(cfg.d)
    for i in range(cfg.n_layers):
        lc = {}
        if cfg.block == "attn":
            q, k, v = h @ p[f"l{i}.wq"], h @ p[f"l{i}.wk"], h @ p[f"l{i}.wv"]
            s = (q @ k.transpose(0, 2, 1)) * scale
            s = np.where(np.tri(T, dtype=bool), s, -np.inf)
            s = s - s.max(axis=-1, keepdims=True)
            a = np.exp(s)
            a /= a.sum(axis=-1, keepdims=True)
            o = a @ v
            lc.update(h_attn=h, q=q, k=k, v=v, a=a, o=o)
            h = h + o @ p[f"l{i}.wo"]
        z = np.tanh(h @ p[f"l{i}.w1"] + p[f"l{i}.b1"])
        lc.update(h_mlp=h, z=z)
        h = h + z @ p[f"l{i}.w2"] + p[f"l{i}.b2"]
        layers.append(lc)
    if hidden_noise is not None:
        h = h + hidden_noise
    logits = h @ params.out_weight + p["out_b"]
    return logits, {"layers": layers, "h_final": h}


def _backward(params: ModelParams, cache, dlogits: np.ndarray):
    """Gradients of a scalar loss given dL/dlogits. Returns (grads, dL/dx)."""
    cfg, p = params.config, params.tensors
    g = {name: np.zeros_like(t) for name, t in p.items()}
    h = cache["h_final"]
    T = h.shape[1]
    g["out_b"] += dlogits.sum(axis=(0, 1))
    w_out = params.out_weight
    if cfg.tied:
        g["embedding"] += np.einsum("btv,btd->vd", dlogits, h)
    else:
        g["out_w"] += np.einsum("btd,btv->dv", h, dlogits)
    dh = dlogits @ w_out.T
    scale = 1.0 / math.sqrt(cfg.d)
    for i in reversed(range(cfg.n_layers)):
        lc = cache["layers"][i]
        z = lc["z"]
        g[f"l{i}.w2"] += np.einsum("bth,btd->hd", z, dh)
        g[f"l{i}.b2"] += dh.sum(axis=(0, 1))
        du = (dh @ p[f"l{i}.w2"].T) * (1.0 - z * z)
        g[f"l{i}.w1"] += np.einsum("btd,bth->dh", lc["h_mlp"], du)
        g[f"l{i}.b1"] += du.sum(axis=(0, 1))
        dh = dh + du @ p[f"l{i}.w1"].T
        if cfg.block == "attn":
            a, q, k, v, o, hin = lc["a"], lc["q"], lc["k"], lc["v"], lc["o"], lc["h_attn"]
            g[f"l{i}.wo"] += np.einsum("bti,btj->ij", o, dh)
            do = dh @ p[f"l{i}.wo"].T
            da = do @ v.transpose(0, 2, 1)
            dv = a.transpose(0, 2, 1) @ do
            ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
            dq = ds @ k
            dk = ds.transpose(0, 2, 1) @ q
            for name, dproj in (("wq", dq), ("wk", dk), ("wv", dv)):
                g[f"l{i}.{name}"] += np.einsum("bti,btj->ij", hin, dproj)
            dh = dh + dq @ p[f"l{i}.wq"].T + dk @ p[f"l{i}.wk"].T + dv @ p[f"l{i}.wv"].T
    g["positional"][:T] += dh.sum(axis=0)
    return g, dh


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean next-token cross-entropy over positions with target >= 0.

    Returns (loss as float64, dL/dlogits in the logits dtype).
    """
    mask = targets >= 0
    n = int(mask.sum())
    if n == 0:
        raise ValueError("batch has no scored positions")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    total = expd.sum(axis=-1, keepdims=True)
    logp = shifted - np.log(total)
    safe_t = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -float(np.sum(picked[mask], dtype=np.float64)) / n
    dlogits = expd / total
    np.put_along_axis(dlogits, safe_t[..., None],
                      np.take_along_axis(dlogits, safe_t[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= mask[..., None] / n
    return loss, dlogits.astype(logits.dtype, copy=False)


def _embed_batch(params: ModelParams, inputs: Sequence[np.ndarray]):
    """Right-pad a batch of token-id or pre-embedded inputs to (B, T, d)."""
    d = params.config.d
    T = max(len(x) for x in inputs)
    dtype = params.embedding.dtype
    x = np.zeros((len(inputs), T, d), dtype=dtype)
    ids = None
    if np.asarray(inputs[0]).ndim == 1:
        ids = np.zeros((len(inputs), T), dtype=np.int64)
        for b, seq in enumerate(inputs):
            ids[b, :len(seq)] = seq
        x = params.embedding[ids]
    else:
        for b, emb in enumerate(inputs):
            emb = np.asarray(emb)
            if emb.shape[1] != d:
                raise ValueError(f"embedded input has dimension {emb.shape[1]}, model expects {d}")
            x[b, :len(emb)] = emb
    return x, ids


def _pad_targets(targets, T):
    out = np.full((len(targets), T), -1, dtype=np.int64)
    for b, t in enumerate(targets):
        out[b, :len(t)] = t
    return out


def _pad_noise(noises, T, d, dtype):
    if all(n is None for n in noises):
        return None
    out = np.zeros((len(noises), T, d), dtype=dtype)
    for b, n in enumerate(noises):
        if n is not None:
            out[b, :len(n)] = n
    return out


def loss_and_grads(params: ModelParams, batch: Sequence[tuple]):
    """Mean cross-entropy and parameter gradients for one batch.

    Each batch item is ``(inputs, targets)`` or ``(inputs, targets, hidden_noise)``.
    ``inputs`` is either a 1-D token-id sequence (embedded here, so the
    embedding table receives gradient) or a ``(T, d)`` array of pre-embedded
    vectors. Targets of -1 are ignored.
    """
    inputs = [item[0] for item in batch]
    x, ids = _embed_batch(params, inputs)
    T = x.shape[1]
    targets = _pad_targets([item[1] for item in batch], T)
    noise = _pad_noise([item[2] if len(item) > 2 else None for item in batch], T,
                       params.config.d, x.dtype)
    logits, cache = _forward(params, x, noise)
    loss, dlogits = cross_entropy(logits, targets)
    grads, dx = _backward(params, cache, dlogits)
    if ids is not None:
        np.add.at(grads["embedding"], ids, dx)
    return loss, grads


def forward_from_embeddings(params: ModelParams, embedded_context) -> np.ndarray:
    emb = np.asarray(embedded_context, dtype=params.embedding.dtype)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise ValueError("empty context")
    if emb.shape[1] != params.config.d:
        raise ValueError(f"embedding dimension {emb.shape[1]} != d={params.config.d}")
    logits, _ = _forward(params, emb[None])
    return logits[0, -1]


def forward_logits(params: ModelParams, context) -> np.ndarray:
    """Next-token logits after ``context`` (length 1..config.context)."""
    ids = np.asarray(context, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty context")
    return forward_from_embeddings(params, params.embedding[ids])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = np.exp(z - z.max())
    return z / z.sum()


# ---------------------------------------------------------------- generation

# sampler(logits, tokens_so_far, step, rng) -> token id
SamplerHook = Callable[[np.ndarray, list, int, np.random.Generator], int]


def greedy_sampler(logits, tokens, step, rng) -> int:
    return int(np.argmax(logits))


def multinomial_sampler(logits, tokens, step, rng) -> int:
    return sample_from(softmax(logits), rng)


def sample_from(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(probs) - 1))


def generate(
    params: ModelParams,
    prompt,
    max_tokens: int,
    sampler: SamplerHook = multinomial_sampler,
    rng_seed: int = 0,
    embedding_noise: float = 0.0,
) -> list[int]:
    """Extend ``prompt`` by ``max_tokens`` sampled tokens; returns the full sequence.

    With ``embedding_noise > 0`` each token position gets one Laplace vector of
    that scale added to its embedding lookup, drawn once per call.
    """
    seq = [int(t) for t in prompt]
    if not seq:
        raise ValueError("empty prompt")
    rng = np.random.default_rng(rng_seed)
    C = params.config.context
    E = params.embedding
    noise = None
    if embedding_noise > 0:
        from .ldp import sample_laplace

        noise_rng = np.random.default_rng([rng_seed, 0x11D7])
        noise = [sample_laplace(params.config.d, embedding_noise, noise_rng) for _ in seq]
    for step in range(max_tokens):
        start = max(0, len(seq) - C)
        emb = E[seq[start:]]
        if noise is not None:
            emb = (emb + np.asarray(noise[start:])).astype(E.dtype)
        logits = forward_from_embeddings(params, emb)
        tok = sampler(logits, seq, step, rng)
        seq.append(int(tok))
        if noise is not None:
            noise.append(sample_laplace(params.config.d, embedding_noise, noise_rng))
    return seq


# ---------------------------------------------------------------- training

class DivergenceError(RuntimeError):
    pass


def _clip(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        f = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= f
    return norm


def train(params: ModelParams, dataset: Sequence[tuple], cfg: TrainConfig):
    """Minibatch training on next-token cross-entropy.

    Returns a new ``ModelParams`` and the per-epoch mean loss (token weighted).
    Data order is reshuffled each epoch from ``cfg.seed``.
    """
    if not dataset:
        raise ValueError("empty dataset")
    params = params.copy()
    rng = np.random.default_rng(cfg.seed)
    m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    s = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    step = 0
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        tot, count = 0.0, 0
        for b0 in range(0, len(order), cfg.batch):
            batch = [dataset[i] for i in order[b0:b0 + cfg.batch]]
            loss, grads = loss_and_grads(params, batch)
            if not math.isfinite(loss):
                raise DivergenceError(f"divergence at epoch {epoch + 1}")
            n = sum(int(np.sum(np.asarray(item[1]) >= 0)) for item in batch)
            tot += loss * n
            count += n
            _clip(grads, cfg.grad_clip)
            step += 1
            for k, g in grads.items():
                if k in cfg.frozen:
                    continue
                w = params.tensors[k]
                if cfg.optimizer == "sgd":
                    w -= np.asarray(cfg.lr * g, dtype=w.dtype)
                    continue
                m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g
                s[k] = cfg.beta2 * s[k] + (1 - cfg.beta2) * g * g
                mhat = m[k] / (1 - cfg.beta1 ** step)
                vhat = s[k] / (1 - cfg.beta2 ** step)
                w -= (cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(w.dtype)
        epoch_loss = tot / count
        if not math.isfinite(epoch_loss):
            raise DivergenceError(f"divergence at epoch {epoch + 1}")
        curve.append(epoch_loss)
    return params, curve


def lm_dataset(seqs, start: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """(inputs, targets) items for plain next-token training on token sequences.

    Targets before position ``start`` (e.g. a prompt) are masked out.
    """
    items = []
    for seq in seqs:
        seq = np.asarray(seq, dtype=np.int64)
        targets = seq[1:].copy()
        targets[:max(0, start - 1)] = -1
        items.append((seq[:-1], targets))
    return items


# ---------------------------------------------------------------- evaluation

def token_logprobs(score_model: ModelParams, seq) -> np.ndarray:
    """log p(seq[t] | seq[<t]) for t = 1..len-1, context truncated to the window."""
    seq = np.asarray(seq, dtype=np.int64)
    C = score_model.config.context
    E = score_model.embedding
    if len(seq) - 1 <= C:
        logits, _ = _forward(score_model, E[seq[:-1]][None])
        rows = logits[0].astype(np.float64)
    else:
        head, _ = _forward(score_model, E[seq[:C]][None])
        rows = [r for r in head[0].astype(np.float64)]
        for t in range(C + 1, len(seq)):
            rows.append(forward_logits(score_model, seq[t - C:t]).astype(np.float64))
        rows = np.stack(rows)
    rows = rows - rows.max(axis=-1, keepdims=True)
    logp = rows - np.log(np.exp(rows).sum(axis=-1, keepdims=True))
    return logp[np.arange(len(seq) - 1), seq[1:]]


def perplexity(score_model: ModelParams, seq, start: int = 0) -> float:
    """exp(mean NLL); only targets at positions >= max(start, 1) are scored."""
    if len(seq) < 2:
        raise ValueError("perplexity needs a sequence of length >= 2")
    lp = token_logprobs(score_model, seq)[max(0, start - 1):]
    if lp.size == 0:
        raise ValueError("nothing to score")
    return float(math.exp(-np.mean(lp, dtype=np.float64)))


def embedding_stats(params: ModelParams, n_bins: int = 50) -> EmbeddingStats:
    e = params.embedding.astype(np.float64).ravel()
    counts, edges = np.histogram(e, bins=n_bins)
    return EmbeddingStats(
        mean=float(e.mean()),
        std=float(e.std()),
        histogram=[(float(lo), int(c)) for lo, c in zip(edges[:-1], counts)],
    )


# ---------------------------------------------------------------- checkpoint container

def container_bytes(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    """WSLM container: magic, u32 version, u32 header length, JSON header, tensor data.

    The JSON header lists ``[name, shape]`` for each tensor in storage order;
    data follows as row-major little-endian float32.
    """
    head = dict(header)
    head["tensors"] = [[name, list(arr.shape)] for name, arr in tensors.items()]
    blob = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(arr, dtype="<f4").tobytes() for arr in tensors.values()]
    return b"".join(parts)


def parse_container(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise ValueError("not a WSLM container")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported container version {version}")
    header = json.loads(data[12:12 + hlen])
    off = 12 + hlen
    tensors = {}
    for name, shape in header.pop("tensors"):
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    if off != len(data):
        raise ValueError("trailing bytes in container")
    return header, tensors


def checkpoint_bytes(params: ModelParams) -> bytes:
    return container_bytes({"kind": "model", **asdict(params.config)}, params.tensors)


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path) -> ModelParams:
    header, tensors = parse_container(Path(path).read_bytes())
    if header.pop("kind", None) != "model":
        raise ValueError(f"{path} is not a model checkpoint")
    cfg = ModelConfig(**header)
    expected = tensor_shapes(cfg)
    if {k: tuple(v.shape) for k, v in tensors.items()} != expected:
        raise ValueError(f"{path}: tensor shapes do not match header")
    return ModelParams(cfg, tensors)
