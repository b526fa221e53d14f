"""Transformer decoder that turns a cost volume into relative pose guesses.

The cost volume is lifted to 256 channels by two densely connected 3x3
convolutions, tagged with a 2D sinusoidal positional embedding, and
flattened into one token per coarse cell.  A stack of six decoder layers
(post-norm residual, self-attention over the pose queries, cross
attention into the tokens, feed-forward) refines a set of randomly
initialized query vectors that implicitly represent the pose.  After
every layer the queries are averaged and a small two-layer head decodes
the average into a 7D pose: translation plus unit quaternion.

All per-layer predictions come back from the forward pass.  Training
supervises every one of them; inference keeps only the last.  More than
one query may be used at inference without retraining: extra queries
mean extra hypotheses whose average steadies the prediction.

Sizes are read from the parameter dict, so miniature models (smaller
width or fewer layers) run through the same code paths as the full one;
``init_poet_params`` defaults to the full configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .correlation import CostVolume
from .geometry import Pose7D
from .tensor import (
    Tensor,
    add_channel_bias,
    concat,
    conv2d,
    layer_norm,
    leaky_relu,
    linear,
    reciprocal,
    scale_by,
    softmax,
    sqrt,
    stack_rows,
)

D_MODEL = 256
N_LAYERS = 6
N_ATTENTION_HEADS = 8
LIFT_HIDDEN = 128
LEAK = 0.1

# Raw 7D head outputs are ordered translation first, then quaternion.
IDENTITY_HEAD_BIAS = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])


def positional_embedding(hc, wc, dim):
    """2D absolute sinusoidal embedding over a (hc, wc) grid.

    Channels cycle through sin/cos of the column coordinate then sin/cos
    of the row coordinate, the frequency dropping every four channels:
    channel 4k holds sin(w_k * x), 4k+1 cos(w_k * x), 4k+2 sin(w_k * y),
    4k+3 cos(w_k * y), with w_k = 10000^(-2k/dim).
    """
    if dim % 4:
        raise ValueError("embedding dimension must be divisible by 4")
    ys, xs = np.meshgrid(np.arange(hc), np.arange(wc), indexing="ij")
    out = np.empty((hc, wc, dim))
    for k in range(dim // 4):
        w = 10000.0 ** (-2.0 * k / dim)
        out[:, :, 4 * k] = np.sin(w * xs)
        out[:, :, 4 * k + 1] = np.cos(w * xs)
        out[:, :, 4 * k + 2] = np.sin(w * ys)
        out[:, :, 4 * k + 3] = np.cos(w * ys)
    return Tensor(out)


def layer_count(params):
    """Number of decoder layers present in a parameter dict."""
    n = 0
    while ("poet.dec%d.self.wq" % n) in params:
        n += 1
    return n


def lift_and_flatten(cv: CostVolume, params) -> Tensor:
    """Raise the volume to the model width and flatten to tokens.

    Two 3x3 convolutions with a dense connection (the second one sees
    the raw volume concatenated with the first one's activations).  The
    content is then normalized per cell before the positional embedding
    is added: correlation scores are channel averages and come out
    orders of magnitude smaller than the embedding, so without the
    normalization the decoder would effectively see position only.
    Finally the grid is flattened row by row into an (Hc*Wc, D') token
    matrix.
    """
    x = cv.values
    w0, b0 = params["poet.lift.conv0.w"], params["poet.lift.conv0.b"]
    w1, b1 = params["poet.lift.conv1.w"], params["poet.lift.conv1.b"]
    h1 = leaky_relu(add_channel_bias(conv2d(x, w0, stride=1, padding=1), b0), LEAK)
    h2 = add_channel_bias(
        conv2d(concat([x, h1], axis=2), w1, stride=1, padding=1), b1
    )
    h2 = layer_norm(h2, params["poet.lift.norm.g"], params["poet.lift.norm.b"])
    hc, wc, d = h2.shape
    pe = Tensor(positional_embedding(hc, wc, d).data.astype(h2.dtype))
    return (h2 + pe).reshape(hc * wc, d)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention: softmax(q k^T / sqrt(d)) v."""
    if q.shape[1] != k.shape[1]:
        raise ValueError("query and key widths differ")
    if k.shape[0] != v.shape[0]:
        raise ValueError("key and value counts differ")
    scores = q.matmul(k.transpose()) * (1.0 / math.sqrt(q.shape[1]))
    return softmax(scores, axis=1).matmul(v)


def multi_head_attention(q: Tensor, kv: Tensor, params, prefix) -> Tensor:
    """Project, split into equal head slices, attend, concatenate, project."""
    d = params[prefix + ".wq"].shape[0]
    if d % N_ATTENTION_HEADS:
        raise ValueError(
            "model width %d not divisible by %d heads" % (d, N_ATTENTION_HEADS)
        )
    qp = linear(q, params[prefix + ".wq"], params[prefix + ".bq"])
    kp = linear(kv, params[prefix + ".wk"], params[prefix + ".bk"])
    vp = linear(kv, params[prefix + ".wv"], params[prefix + ".bv"])
    dh = d // N_ATTENTION_HEADS
    heads = []
    for h in range(N_ATTENTION_HEADS):
        cols = (slice(None), slice(h * dh, (h + 1) * dh))
        heads.append(attention(qp[cols], kp[cols], vp[cols]))
    merged = concat(heads, axis=1)
    return linear(merged, params[prefix + ".wo"], params[prefix + ".bo"])


def decoder_layer(queries: Tensor, tokens: Tensor, params, index) -> Tensor:
    """One refinement step of the pose queries against the tokens.

    Post-norm residual sublayers: self-attention among the queries,
    cross-attention from queries into tokens, then the feed-forward.
    Output shape equals input shape.
    """
    p = "poet.dec%d" % index
    d = params[p + ".self.wq"].shape[0]
    if queries.ndim != 2 or queries.shape[1] != d:
        raise ValueError("queries must be (nq, %d)" % d)
    if tokens.ndim != 2 or tokens.shape[1] != d:
        raise ValueError("tokens must be (m, %d)" % d)
    x = queries
    x = layer_norm(
        x + multi_head_attention(x, x, params, p + ".self"),
        params[p + ".norm0.g"],
        params[p + ".norm0.b"],
    )
    x = layer_norm(
        x + multi_head_attention(x, tokens, params, p + ".cross"),
        params[p + ".norm1.g"],
        params[p + ".norm1.b"],
    )
    hidden = leaky_relu(
        linear(x, params[p + ".ffn.w0"], params[p + ".ffn.b0"]), LEAK
    )
    x = layer_norm(
        x + linear(hidden, params[p + ".ffn.w1"], params[p + ".ffn.b1"]),
        params[p + ".norm2.g"],
        params[p + ".norm2.b"],
    )
    return x


@dataclass(eq=False)
class PosePrediction:
    """Differentiable 7D pose emitted by one head.

    ``q`` is already unit length.  ``quaternion_degenerate`` flags the
    pathological case where the raw quaternion came out exactly zero and
    the identity rotation was substituted.
    """

    t: Tensor
    q: Tensor
    quaternion_degenerate: bool = False

    def to_pose7d(self) -> Pose7D:
        return Pose7D(self.t.data.astype(np.float64), self.q.data.astype(np.float64))


def pose_head(query: Tensor, params, index) -> PosePrediction:
    """Decode one query vector into a relative pose.

    Two affine layers with a LeakyReLU between; the last four outputs
    are normalized into a unit quaternion.
    """
    p = "poet.head%d" % index
    hidden = leaky_relu(linear(query, params[p + ".fc0.w"], params[p + ".fc0.b"]), LEAK)
    raw = linear(hidden, params[p + ".fc1.w"], params[p + ".fc1.b"])
    t = raw[0:3]
    raw_q = raw[3:7]
    norm = sqrt((raw_q * raw_q).sum())
    if norm.item() == 0.0:
        identity = np.zeros(4, dtype=raw_q.data.dtype)
        identity[0] = 1.0
        return PosePrediction(t, Tensor(identity), quaternion_degenerate=True)
    return PosePrediction(t, scale_by(raw_q, reciprocal(norm)))


def poet_forward(cv: CostVolume, params, nq: int, rng, aggregation="queries"):
    """Run the decoder stack; returns one PosePrediction per layer.

    ``nq`` query hypotheses are drawn from N(0, 1/sqrt(D')).  With the
    default aggregation the queries are averaged after each layer and
    the layer's head decodes the average, while the un-averaged queries
    flow on to the next layer.  ``aggregation="poses"`` decodes every
    query separately and averages the 7D outputs instead.
    """
    if nq < 1:
        raise ValueError("need at least one pose query")
    if aggregation not in ("queries", "poses"):
        raise ValueError("aggregation must be 'queries' or 'poses'")
    tokens = lift_and_flatten(cv, params)
    d = tokens.shape[1]
    queries = Tensor(
        rng.normal(0.0, 1.0 / math.sqrt(d), size=(nq, d)).astype(tokens.dtype)
    )
    predictions = []
    for k in range(layer_count(params)):
        queries = decoder_layer(queries, tokens, params, k)
        if aggregation == "queries":
            pooled = queries.sum(axis=0) * (1.0 / nq)
            predictions.append(pose_head(pooled, params, k))
        else:
            predictions.append(_average_poses(
                [pose_head(queries[i], params, k) for i in range(nq)]
            ))
    return predictions


def _average_poses(preds):
    if len(preds) == 1:
        return preds[0]
    inv = 1.0 / len(preds)
    t = stack_rows([p.t for p in preds]).sum(axis=0) * inv
    q_mean = stack_rows([p.q for p in preds]).sum(axis=0) * inv
    norm = sqrt((q_mean * q_mean).sum())
    degenerate = any(p.quaternion_degenerate for p in preds)
    if norm.item() == 0.0:
        identity = np.zeros(4, dtype=q_mean.data.dtype)
        identity[0] = 1.0
        return PosePrediction(t, Tensor(identity), quaternion_degenerate=True)
    return PosePrediction(t, scale_by(q_mean, reciprocal(norm)), degenerate)


# -- initialization ----------------------------------------------------------


def init_poet_params(
    cv_channels,
    rng,
    dtype=np.float32,
    d_model=D_MODEL,
    n_layers=N_LAYERS,
    lift_hidden=LIFT_HIDDEN,
):
    """Fresh decoder parameters for a cost volume with ``cv_channels``.

    Attention and feed-forward weights scale with fan-in; each head's
    final layer starts near zero with an identity-pose bias, so the
    untrained network predicts poses close to the identity.  The size
    keywords exist for miniature test models; defaults are the real
    configuration.
    """
    if d_model % N_ATTENTION_HEADS:
        raise ValueError("model width must be divisible by the head count")
    params = {}
    ffn_width = 4 * d_model

    def weight(name, shape, std):
        params[name] = Tensor(
            rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True
        )

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    leaky_gain = math.sqrt(2.0 / (1.0 + LEAK * LEAK))
    weight(
        "poet.lift.conv0.w",
        (3, 3, cv_channels, lift_hidden),
        leaky_gain / math.sqrt(9 * cv_channels),
    )
    zeros("poet.lift.conv0.b", lift_hidden)
    weight(
        "poet.lift.conv1.w",
        (3, 3, cv_channels + lift_hidden, d_model),
        1.0 / math.sqrt(9 * (cv_channels + lift_hidden)),
    )
    zeros("poet.lift.conv1.b", d_model)
    params["poet.lift.norm.g"] = Tensor(
        np.ones(d_model, dtype=dtype), requires_grad=True
    )
    zeros("poet.lift.norm.b", d_model)

    attn_std = 1.0 / math.sqrt(d_model)
    for k in range(n_layers):
        base = "poet.dec%d" % k
        for sub in (".self", ".cross"):
            for leaf in ("wq", "wk", "wv", "wo"):
                weight("%s%s.%s" % (base, sub, leaf), (d_model, d_model), attn_std)
            for leaf in ("bq", "bk", "bv", "bo"):
                zeros("%s%s.%s" % (base, sub, leaf), d_model)
        weight(base + ".ffn.w0", (d_model, ffn_width), leaky_gain / math.sqrt(d_model))
        zeros(base + ".ffn.b0", ffn_width)
        weight(base + ".ffn.w1", (ffn_width, d_model), 1.0 / math.sqrt(ffn_width))
        zeros(base + ".ffn.b1", d_model)
        for n in range(3):
            params["%s.norm%d.g" % (base, n)] = Tensor(
                np.ones(d_model, dtype=dtype), requires_grad=True
            )
            zeros("%s.norm%d.b" % (base, n), d_model)

        head = "poet.head%d" % k
        weight(head + ".fc0.w", (d_model, d_model), leaky_gain / math.sqrt(d_model))
        zeros(head + ".fc0.b", d_model)
        weight(head + ".fc1.w", (d_model, 7), 1e-3)
        params[head + ".fc1.b"] = Tensor(
            IDENTITY_HEAD_BIAS.astype(dtype), requires_grad=True
        )
    return params
