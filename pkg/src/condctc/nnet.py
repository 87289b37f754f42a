"""Spliced-input tanh encoder, softmax heads, Adam and the checkpoint format.

Parameters are plain ``dict[str, ndarray]`` values (float64). Forward
functions return ``(output, cache)``; the matching ``*_backward`` consumes
the cache.
"""
import os
import struct
from pathlib import Path

import numpy as np


class CheckpointError(ValueError):
    pass


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def encoder_input_dim(in_dim, context=1, utt_context=False):
    return in_dim * (2 * context + 1) + (in_dim + 2 if utt_context else 0)


def init_encoder(rng, in_dim, hidden=128, layers=2, context=1, utt_context=False):
    params = {}
    fan_in = encoder_input_dim(in_dim, context, utt_context)
    for k in range(layers):
        params[f"W{k}"] = _uniform(rng, (hidden, fan_in), fan_in)
        params[f"b{k}"] = _uniform(rng, (hidden,), fan_in)
        fan_in = hidden
    return params


def init_head(rng, hidden, n_out):
    return {"W": _uniform(rng, (n_out, hidden), hidden), "b": _uniform(rng, (n_out,), hidden)}


def encoder_layers(params):
    return sum(1 for k in params if k.startswith("W"))


def splice_index(T, context):
    return np.clip(np.arange(T)[:, None] + np.arange(-context, context + 1)[None, :], 0, T - 1)


def splice(x, context):
    """Stack ``+-context`` neighbours of every frame, replicating edge frames."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"features must be a non-empty T x D matrix, got {x.shape}")
    return x[splice_index(x.shape[0], context)].reshape(x.shape[0], -1)


def frame_inputs(x, context, utt_context=False):
    """Spliced frames, optionally followed by utterance-level side inputs.

    The side inputs are the utterance-mean feature vector and two 0/1 flags
    marking the first and last frame. Edge replication makes a boundary frame
    look like the middle of a run, so without the flags a frame-local encoder
    cannot tell where the utterance starts or ends.
    """
    spliced = splice(x, context)
    if not utt_context:
        return spliced
    T = spliced.shape[0]
    mean = np.asarray(x, dtype=np.float64).mean(axis=0)
    edges = np.zeros((T, 2))
    edges[0, 0] = edges[-1, 1] = 1.0
    return np.hstack([spliced, np.broadcast_to(mean, (T, mean.shape[0])), edges])


def mlp_forward(params, inp):
    n = encoder_layers(params)
    expected = params["W0"].shape[1]
    if inp.shape[1] != expected:
        raise ValueError(f"encoder expects {expected} spliced inputs, got {inp.shape[1]}")
    acts = [inp]
    h = inp
    for k in range(n):
        h = np.tanh(h @ params[f"W{k}"].T + params[f"b{k}"])
        acts.append(h)
    return h, acts


def mlp_backward(params, acts, grad_h):
    if acts is None:
        raise ValueError("backward called without a forward cache")
    grads = {}
    g = grad_h
    for k in reversed(range(encoder_layers(params))):
        g = g * (1.0 - acts[k + 1] ** 2)
        grads[f"W{k}"] = g.T @ acts[k]
        grads[f"b{k}"] = g.sum(axis=0)
        g = g @ params[f"W{k}"]
    return grads, g


def encode(params, x, context=1, utt_context=False):
    """Latent ``T x H`` sequence for one utterance; ``T`` is preserved."""
    x = np.asarray(x, dtype=np.float64)
    h, acts = mlp_forward(params, frame_inputs(x, context, utt_context))
    return h, {"acts": acts, "T": x.shape[0], "D": x.shape[1], "context": context, "utt_context": utt_context}


def encode_backward(params, cache, grad_h):
    """Parameter gradients and the gradient w.r.t. the raw (unspliced) input."""
    if cache is None:
        raise ValueError("backward called without a forward cache")
    grads, g_in = mlp_backward(params, cache["acts"], grad_h)
    T, D, c = cache["T"], cache["D"], cache["context"]
    width = (2 * c + 1) * D
    g_x = np.zeros((T, D))
    np.add.at(g_x, splice_index(T, c), g_in[:, :width].reshape(T, 2 * c + 1, D))
    if cache["utt_context"]:
        g_x += g_in[:, width : width + D].sum(axis=0) / T
    return grads, g_x


def log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    z = z - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def head_logprobs(params, h):
    z = h @ params["W"].T + params["b"]
    logp = log_softmax(z)
    return logp, {"h": h, "logp": logp}


def head_backward(params, cache, grad_logp):
    if cache is None:
        raise ValueError("backward called without a forward cache")
    p = np.exp(cache["logp"])
    g_z = grad_logp - p * grad_logp.sum(axis=1, keepdims=True)
    grads = {"W": g_z.T @ cache["h"], "b": g_z.sum(axis=0)}
    return grads, g_z @ params["W"]


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        """Return bias-corrected updated parameters; ``params`` is left untouched."""
        self.t += 1
        out = {}
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


# -- checkpoint format -------------------------------------------------------

CHECKPOINT_MAGIC = b"CFCK"
CHECKPOINT_VERSION = 1


def write_checkpoint(path, tensors):
    """Named float64 tensors, little-endian, written atomically."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def read_checkpoint(path):
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return tensors
