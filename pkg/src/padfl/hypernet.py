"""Server-side hyper-network.

Learnable per-client embeddings are encoded by a shared MLP; for each
target layer the encoded embeddings are mixed with similarity-softmax
weights under a per-layer learnable temperature, and a per-layer linear
decoder maps the mixed embedding to that layer's flat personal
parameters (factor + channel bias; the personal head gets its own
decoder). Generated parameters are pruned to the client's width before
being sent, and the whole pipeline is differentiable so the server can
regress generated parameters onto locally trained ones.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, NumericError
from .model import Layout, PersonalParams


@dataclass
class LinearMap:
    w: np.ndarray
    b: np.ndarray


@dataclass
class HyperNetState:
    embeddings: np.ndarray   # (embed_dim, num_clients), one column per client
    encoder: list            # LinearMap stack; empty list = identity encoder
    decoders: list           # LinearMap per decomposed layer
    head_decoder: LinearMap
    log_temp: np.ndarray     # one log-temperature per decoder (layers + head)

    @property
    def num_clients(self):
        return self.embeddings.shape[1]

    def copy(self):
        return HyperNetState(
            self.embeddings.copy(),
            [LinearMap(m.w.copy(), m.b.copy()) for m in self.encoder],
            [LinearMap(m.w.copy(), m.b.copy()) for m in self.decoders],
            LinearMap(self.head_decoder.w.copy(), self.head_decoder.b.copy()),
            self.log_temp.copy(),
        )


def decoder_out_dim(layout: Layout, layer_idx: int) -> int:
    spec, coef = layout.specs[layer_idx], layout.coefs[layer_idx]
    blocks = spec.out_channels // coef.base_count
    return coef.rank * blocks * spec.in_channels + spec.out_channels


def init_hypernet(layout: Layout, num_clients, embed_dim, hidden_dim, depth, rng) -> HyperNetState:
    """Fresh state: embeddings uniform in +-1/sqrt(d); decoder biases are
    seeded with a decomposition-style init so round-0 generated weights
    start at a sensible operating point, with the learned part adding
    per-client variation on top."""
    from . import decomp  # local import to keep module load order simple

    bound = 1.0 / np.sqrt(embed_dim)
    embeddings = rng.uniform(-bound, bound, size=(embed_dim, num_clients))
    encoder = []
    prev = embed_dim
    for _ in range(depth):
        b = 1.0 / np.sqrt(prev)
        encoder.append(LinearMap(rng.uniform(-b, b, size=(hidden_dim, prev)),
                                 rng.uniform(-b, b, size=hidden_dim)))
        prev = hidden_dim
    d_out = prev
    decoders = []
    for idx, (spec, coef) in enumerate(zip(layout.specs, layout.coefs)):
        out_dim = decoder_out_dim(layout, idx)
        seed = decomp.init_layer(spec, coef, rng)
        bias = np.concatenate([seed.personal.ravel(), np.zeros(spec.out_channels)])
        # fan-out bound keeps every decoder column near unit norm, so the
        # regression is well conditioned whatever the output size
        wb = np.sqrt(3.0 / out_dim)
        decoders.append(LinearMap(rng.uniform(-wb, wb, size=(out_dim, d_out)), bias))
    hb = 1.0 / np.sqrt(layout.head_in_full)
    head_flat = np.concatenate([
        rng.uniform(-hb, hb, size=layout.classes * layout.head_in_full),
        np.zeros(layout.classes),
    ])
    wb = np.sqrt(3.0 / head_flat.size)
    head_decoder = LinearMap(
        rng.uniform(-wb, wb, size=(head_flat.size, d_out)), head_flat)
    log_temp = np.zeros(len(decoders) + 1)
    return HyperNetState(embeddings, encoder, decoders, head_decoder, log_temp)


# ---------------------------------------------------------------------------
# forward pieces

def encode(state: HyperNetState) -> np.ndarray:
    """Encoded embeddings E' = Encoder(E), applied column-wise."""
    h = state.embeddings
    for i, lm in enumerate(state.encoder):
        h = lm.w @ h + lm.b[:, None]
        if i < len(state.encoder) - 1:
            h = np.where(h > 0, h, 0.0)
    return h


def aggregate_embedding(encoded, client, tau) -> np.ndarray:
    """Similarity-softmax mixture of encoded embeddings for one client."""
    if not 0 <= client < encoded.shape[1]:
        raise DimensionError(f"client {client} outside 0..{encoded.shape[1] - 1}")
    e_i = encoded[:, client]
    s = encoded.T @ e_i
    w = ad._softmax_np(s * (1.0 / tau))
    return encoded @ w


@dataclass
class GeneratedNodes:
    """Graph nodes of one client's generated personal parameters."""

    factors: list
    biases: list
    head_w: object
    head_b: object

    def components(self):
        return list(self.factors) + list(self.biases) + [self.head_w, self.head_b]

    def values(self) -> PersonalParams:
        return PersonalParams([f.data.copy() for f in self.factors],
                              [b.data.copy() for b in self.biases],
                              self.head_w.data.copy(), self.head_b.data.copy())


def state_nodes(state: HyperNetState, trainable: bool):
    """Wrap every state array as a graph node; ordered dict of leaves."""
    wrap = ad.leaf if trainable else ad.const
    nodes = {"embeddings": wrap(state.embeddings)}
    for i, lm in enumerate(state.encoder):
        nodes[f"enc_w{i}"] = wrap(lm.w)
        nodes[f"enc_b{i}"] = wrap(lm.b)
    for i, lm in enumerate(state.decoders):
        nodes[f"dec_w{i}"] = wrap(lm.w)
        nodes[f"dec_b{i}"] = wrap(lm.b)
    nodes["head_w"] = wrap(state.head_decoder.w)
    nodes["head_b"] = wrap(state.head_decoder.b)
    nodes["log_temp"] = wrap(state.log_temp)
    return nodes


def _encode_t(nodes, depth):
    h = nodes["embeddings"]
    for i in range(depth):
        h = ad.add(ad.matmul(nodes[f"enc_w{i}"], h),
                   ad.reshape(nodes[f"enc_b{i}"], (-1, 1)))
        if i < depth - 1:
            h = ad.relu(h)
    return h


def generation_graph(state: HyperNetState, clients, layout: Layout, widths,
                     trainable=False, prune_kind="padfl"):
    """Build the generation graph for the given clients.

    Returns (leaf nodes, {client: GeneratedNodes}); generation for the
    same state and client is deterministic, so values extracted here are
    bit-identical to what any other call produces. prune_kind picks the
    column layout the flat decoder output is pruned under: whole
    personal blocks ("padfl") or per-channel input slabs ("flanc").
    """
    nodes = state_nodes(state, trainable)
    encoded = _encode_t(nodes, len(state.encoder))
    n = state.num_clients
    n_dec = len(state.decoders)
    inv_temps = [ad.exp(ad.neg(ad.slice_t(nodes["log_temp"], (l,)))) for l in range(n_dec + 1)]
    out = {}
    for i in clients:
        e_col = ad.slice_t(encoded, (slice(None), slice(i, i + 1)))
        sims = ad.reshape(ad.matmul(ad.transpose(encoded, (1, 0)), e_col), (n,))
        p = Fraction(widths[i])
        factors, biases = [], []
        for l, (spec, coef) in enumerate(zip(layout.specs, layout.coefs)):
            mixed = _mix(encoded, sims, inv_temps[l], n)
            flat = ad.add(ad.matmul(nodes[f"dec_w{l}"], mixed),
                          ad.reshape(nodes[f"dec_b{l}"], (-1, 1)))
            flat = ad.reshape(flat, (-1,))
            blocks = spec.out_channels // coef.base_count
            n_v = coef.rank * blocks * spec.in_channels
            t_kept = layout.kept_outputs(l, p)
            ik = layout.kept_inputs(l, p)
            vflat = ad.slice_t(flat, (slice(0, n_v),))
            if prune_kind == "padfl":
                v = ad.reshape(vflat, (coef.rank, blocks, spec.in_channels))
                v = ad.slice_t(v, (slice(None), slice(0, t_kept // coef.base_count),
                                   slice(0, ik)))
                v = ad.reshape(v, (coef.rank, (t_kept // coef.base_count) * ik))
            else:
                r1 = coef.base_count
                if spec.in_channels % r1 or ik % r1:
                    raise DimensionError(
                        f"input channels {spec.in_channels}/{ik} not divisible by {r1}")
                v = ad.reshape(vflat, (coef.rank, spec.out_channels,
                                       spec.in_channels // r1))
                v = ad.slice_t(v, (slice(None), slice(0, t_kept), slice(0, ik // r1)))
                v = ad.reshape(v, (coef.rank, t_kept * (ik // r1)))
            factors.append(v)
            biases.append(ad.slice_t(flat, (slice(n_v, n_v + t_kept),)))
        mixed = _mix(encoded, sims, inv_temps[n_dec], n)
        flat = ad.add(ad.matmul(nodes["head_w"], mixed),
                      ad.reshape(nodes["head_b"], (-1, 1)))
        flat = ad.reshape(flat, (-1,))
        n_w = layout.classes * layout.head_in_full
        hw = ad.reshape(ad.slice_t(flat, (slice(0, n_w),)),
                        (layout.classes, layout.head_in_full))
        hw = ad.slice_t(hw, (slice(None), slice(0, layout.head_in(p))))
        hb = ad.slice_t(flat, (slice(n_w, n_w + layout.classes),))
        out[i] = GeneratedNodes(factors, biases, hw, hb)
    return nodes, out


def _mix(encoded, sims, inv_temp, n):
    w = ad.softmax(ad.mul_scalar(sims, inv_temp))
    return ad.matmul(encoded, ad.reshape(w, (n, 1)))


def generate_personal(state: HyperNetState, client, layout: Layout, width,
                      prune_kind="padfl") -> PersonalParams:
    """Decode one client's personal parameters, pruned to its width."""
    _, gen = generation_graph(state, [client], layout, {client: width},
                              prune_kind=prune_kind)
    return gen[client].values()


# ---------------------------------------------------------------------------
# training step

def regression_loss_t(gen_by_client, returned):
    """L = (1/n) sum_i 0.5 * ||returned_i - generated_i||^2 over all
    personal components (pruned shapes; only kept entries contribute)."""
    terms = []
    for i in sorted(returned):
        got = returned[i].arrays()
        nodes = gen_by_client[i].components()
        if len(got) != len(nodes):
            raise DimensionError("returned/generated component count mismatch")
        for node, arr in zip(nodes, got):
            if node.data.shape != arr.shape:
                raise DimensionError(
                    f"returned shape {arr.shape} vs generated {node.data.shape}")
            terms.append(ad.frobenius_sq(ad.add(node, ad.const(-arr))))
    return ad.scale(ad.add_n(terms), 0.5 / len(returned))


def hn_loss(state: HyperNetState, returned, widths, layout: Layout,
            prune_kind="padfl") -> float:
    """Loss value only (used by tests to finite-difference the state)."""
    _, gen = generation_graph(state, sorted(returned), layout, widths,
                              prune_kind=prune_kind)
    return float(regression_loss_t(gen, returned).data)


def hn_step(state: HyperNetState, returned, widths, layout: Layout, lr,
            prune_kind="padfl") -> tuple:
    """One SGD step of the hyper-network on the regression loss.

    `returned` maps client id -> locally trained PersonalParams (pruned
    shapes). Returns (new state, loss value). A zero loss leaves the
    state bit-identical.
    """
    if not returned:
        return state, 0.0
    nodes, gen = generation_graph(state, sorted(returned), layout, widths,
                                  trainable=True, prune_kind=prune_kind)
    loss = regression_loss_t(gen, returned)
    val = float(loss.data)
    if not np.isfinite(val):
        raise NumericError("non-finite hyper-network loss")
    ad.backward(loss)

    def step(arr, node):
        return arr if node.grad is None else arr - lr * node.grad

    new = HyperNetState(
        step(state.embeddings, nodes["embeddings"]),
        [LinearMap(step(m.w, nodes[f"enc_w{i}"]), step(m.b, nodes[f"enc_b{i}"]))
         for i, m in enumerate(state.encoder)],
        [LinearMap(step(m.w, nodes[f"dec_w{i}"]), step(m.b, nodes[f"dec_b{i}"]))
         for i, m in enumerate(state.decoders)],
        LinearMap(step(state.head_decoder.w, nodes["head_w"]),
                  step(state.head_decoder.b, nodes["head_b"])),
        step(state.log_temp, nodes["log_temp"]),
    )
    return new, val
