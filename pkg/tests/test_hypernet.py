from fractions import Fraction

import numpy as np
import pytest

from padfl import autodiff as ad
from padfl import hypernet as hn
from padfl.model import CnnArch, Layout, PersonalParams, build_layout

from util import finite_diff, rel_err


def tiny_layout():
    # one decomposable linear layer (2 -> 4) plus a 2-class head
    arch = CnnArch(in_channels=1, height=1, width=2, convs=(), hidden=(4,), classes=2)
    return build_layout(arch, Fraction(1, 2))


def make_state(layout, n_clients=3, embed=4, hidden=6, depth=2, seed=0):
    return hn.init_hypernet(layout, n_clients, embed, hidden, depth,
                            np.random.default_rng(seed))


class TestEncode:
    def test_identity_when_depth_zero(self):
        layout = tiny_layout()
        state = make_state(layout, depth=0)
        assert np.array_equal(hn.encode(state), state.embeddings)

    def test_identical_columns_encode_identically(self):
        layout = tiny_layout()
        state = make_state(layout, n_clients=4, depth=3, seed=1)
        emb = state.embeddings.copy()
        emb[:, 2] = emb[:, 0]
        state.embeddings = emb
        enc = hn.encode(state)
        assert np.array_equal(enc[:, 2], enc[:, 0])

    def test_encoder_gradient_matches_fd(self):
        layout = tiny_layout()
        state = make_state(layout, n_clients=3, embed=3, hidden=4, depth=2, seed=2)

        def f(arrays):
            s = state.copy()
            s.embeddings = arrays[0]
            return float(hn.encode(s).sum())

        nodes = hn.state_nodes(state, trainable=True)
        enc = hn._encode_t(nodes, len(state.encoder))
        total = ad.matmul(ad.matmul(ad.const(np.ones((1, enc.data.shape[0]))), enc),
                          ad.const(np.ones((enc.data.shape[1], 1))))
        ad.backward(ad.reshape(total, (1, 1)))
        fd = finite_diff(f, [state.embeddings], eps=1e-5)
        assert rel_err(nodes["embeddings"].grad, fd[0]) <= 1e-4


class TestAggregate:
    def test_single_client_returns_own_embedding(self):
        enc = np.random.default_rng(3).normal(size=(5, 1))
        for tau in (0.1, 1.0, 100.0):
            out = hn.aggregate_embedding(enc, 0, tau)
            assert np.allclose(out, enc[:, 0])

    def test_large_temperature_gives_row_mean(self):
        rng = np.random.default_rng(4)
        enc = rng.uniform(-1, 1, size=(4, 6)) / 2.0
        out = hn.aggregate_embedding(enc, 2, 1e6)
        assert np.abs(out - enc.mean(axis=1)).max() <= 1e-6

    def test_small_temperature_selects_argmax(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            enc = rng.normal(size=(4, 7))
            i = int(rng.integers(0, 7))
            sims = enc.T @ enc[:, i]
            out = hn.aggregate_embedding(enc, i, 1e-6)
            assert np.allclose(out, enc[:, sims.argmax()], atol=1e-9)

    def test_softmax_weights_partition_unity(self):
        rng = np.random.default_rng(6)
        enc = rng.normal(size=(3, 5))
        s = enc.T @ enc[:, 1]
        for tau in (0.5, 1.0, 7.0):
            w = ad._softmax_np(s / tau)
            assert abs(w.sum() - 1.0) <= 1e-12
            assert np.all((w > 0) & (w < 1))


class TestGenerate:
    def test_full_width_shapes(self):
        layout = tiny_layout()
        state = make_state(layout)
        gen = hn.generate_personal(state, 0, layout, Fraction(1))
        spec, coef = layout.specs[0], layout.coefs[0]
        blocks = spec.out_channels // coef.base_count
        assert gen.factors[0].shape == (coef.rank, blocks * spec.in_channels)
        assert gen.biases[0].shape == (spec.out_channels,)
        assert gen.head_w.shape == (2, layout.head_in_full)
        assert gen.head_b.shape == (2,)

    def test_identical_embeddings_same_width_same_output(self):
        layout = tiny_layout()
        state = make_state(layout, n_clients=4, seed=7)
        emb = state.embeddings.copy()
        emb[:, 3] = emb[:, 1]
        state.embeddings = emb
        a = hn.generate_personal(state, 1, layout, Fraction(1, 2))
        b = hn.generate_personal(state, 3, layout, Fraction(1, 2))
        for x, y in zip(a.arrays(), b.arrays()):
            assert np.array_equal(x, y)

    def test_generation_deterministic(self):
        layout = tiny_layout()
        state = make_state(layout, seed=8)
        a = hn.generate_personal(state, 2, layout, Fraction(1, 2))
        b = hn.generate_personal(state, 2, layout, Fraction(1, 2))
        for x, y in zip(a.arrays(), b.arrays()):
            assert np.array_equal(x, y)

    def test_prune_commutes_with_generation(self):
        from padfl import decomp

        layout = tiny_layout()
        state = make_state(layout, seed=9)
        full = hn.generate_personal(state, 0, layout, Fraction(1))
        half = hn.generate_personal(state, 0, layout, Fraction(1, 2))
        spec, coef = layout.specs[0], layout.coefs[0]
        layer = decomp.DecomposedLayer(
            np.zeros((spec.kernel ** 2 * coef.base_count, coef.rank)),
            full.factors[0], full.biases[0], spec, coef)
        pruned = decomp.prune_personal(layer, Fraction(1, 2), layout.kept_inputs(0, Fraction(1, 2)))
        assert np.array_equal(half.factors[0], pruned.personal)
        assert np.array_equal(half.biases[0], pruned.bias)
        assert np.array_equal(half.head_w, full.head_w[:, :layout.head_in(Fraction(1, 2))])


class TestHnStep:
    def widths(self, state):
        return {i: Fraction(1) for i in range(state.num_clients)}

    def returned_equal_to_sent(self, state, layout, clients):
        return {i: hn.generate_personal(state, i, layout, Fraction(1)) for i in clients}

    def test_fixed_point_when_returned_equals_sent(self):
        layout = tiny_layout()
        state = make_state(layout, seed=10)
        returned = self.returned_equal_to_sent(state, layout, [0, 1, 2])
        new, loss = hn.hn_step(state, returned, self.widths(state), layout, lr=0.5)
        assert loss == 0.0
        assert np.array_equal(new.embeddings, state.embeddings)
        assert np.array_equal(new.log_temp, state.log_temp)
        for a, b in zip(new.decoders, state.decoders):
            assert np.array_equal(a.w, b.w)
            assert np.array_equal(a.b, b.b)

    def test_embedding_gradient_matches_fd(self):
        layout = tiny_layout()
        state = make_state(layout, n_clients=3, embed=3, hidden=4, depth=2, seed=11)
        rng = np.random.default_rng(12)
        widths = self.widths(state)
        returned = {
            i: PersonalParams(
                [g + 0.1 * rng.normal(size=g.shape) for g in gen.factors],
                [b + 0.1 * rng.normal(size=b.shape) for b in gen.biases],
                gen.head_w + 0.1 * rng.normal(size=gen.head_w.shape),
                gen.head_b + 0.1 * rng.normal(size=gen.head_b.shape))
            for i, gen in ((i, hn.generate_personal(state, i, layout, Fraction(1)))
                           for i in range(3))
        }
        nodes, gen = hn.generation_graph(state, [0, 1, 2], layout, widths, trainable=True)
        loss = hn.regression_loss_t(gen, returned)
        ad.backward(loss)

        def f_emb(arrays):
            s = state.copy()
            s.embeddings = arrays[0]
            return hn.hn_loss(s, returned, widths, layout)

        fd = finite_diff(f_emb, [state.embeddings])
        assert rel_err(nodes["embeddings"].grad, fd[0]) <= 1e-4

        def f_temp(arrays):
            s = state.copy()
            s.log_temp = arrays[0]
            return hn.hn_loss(s, returned, widths, layout)

        fd_t = finite_diff(f_temp, [state.log_temp])
        assert rel_err(nodes["log_temp"].grad, fd_t[0]) <= 1e-4

        def f_dec(arrays):
            s = state.copy()
            s.decoders[0].w = arrays[0]
            return hn.hn_loss(s, returned, widths, layout)

        fd_d = finite_diff(f_dec, [state.decoders[0].w])
        assert rel_err(nodes["dec_w0"].grad, fd_d[0]) <= 1e-4

        def f_enc(arrays):
            s = state.copy()
            s.encoder[0].w = arrays[0]
            return hn.hn_loss(s, returned, widths, layout)

        fd_e = finite_diff(f_enc, [state.encoder[0].w])
        assert rel_err(nodes["enc_w0"].grad, fd_e[0]) <= 1e-4

    def test_one_local_step_identity_single_client(self):
        # with theta^+ = theta - eta * dF/dtheta, dL/dphi == eta * dF/dphi
        self._identity_check(n_clients=1, seed=13, rel_tol=1e-6)

    def test_one_local_step_identity_three_clients(self):
        self._identity_check(n_clients=3, seed=14, rel_tol=1e-6)

    def _identity_check(self, n_clients, seed, rel_tol):
        layout = tiny_layout()
        state = make_state(layout, n_clients=n_clients, embed=2, hidden=3, depth=0, seed=seed)
        widths = {i: Fraction(1) for i in range(n_clients)}
        rng = np.random.default_rng(seed + 100)
        eta = 0.05
        # quadratic local objective per client over all personal components
        targets = {}
        for i in range(n_clients):
            gen = hn.generate_personal(state, i, layout, Fraction(1))
            targets[i] = [rng.normal(size=a.shape) for a in gen.arrays()]

        def local_grads(params: PersonalParams, i):
            return [a - t for a, t in zip(params.arrays(), targets[i])]

        returned = {}
        for i in range(n_clients):
            gen = hn.generate_personal(state, i, layout, Fraction(1))
            stepped = [a - eta * g for a, g in zip(gen.arrays(), local_grads(gen, i))]
            f = len(gen.factors)
            returned[i] = PersonalParams(stepped[:f], stepped[f:2 * f],
                                         stepped[-2], stepped[-1])

        # left side: HN regression loss gradient
        nodes_l, gen_l = hn.generation_graph(state, sorted(returned), layout, widths,
                                             trainable=True)
        ad.backward(hn.regression_loss_t(gen_l, returned))

        # right side: direct gradient of F = (1/n) sum_i f_i(generated_i)
        nodes_r, gen_r = hn.generation_graph(state, sorted(returned), layout, widths,
                                             trainable=True)
        terms = []
        for i in sorted(returned):
            for node, t in zip(gen_r[i].components(), targets[i]):
                terms.append(ad.frobenius_sq(ad.add(node, ad.const(-t))))
        f_node = ad.scale(ad.add_n(terms), 0.5 / n_clients)
        ad.backward(f_node)

        for key in nodes_l:
            gl = nodes_l[key].grad
            gr = nodes_r[key].grad
            if gl is None and gr is None:
                continue
            gl = np.zeros_like(state.log_temp) if gl is None else gl
            assert rel_err(gl, eta * gr) <= rel_tol, key

    def test_nan_loss_raises(self):
        layout = tiny_layout()
        state = make_state(layout, seed=15)
        gen = hn.generate_personal(state, 0, layout, Fraction(1))
        bad = PersonalParams([f * np.nan for f in gen.factors], list(gen.biases),
                             gen.head_w, gen.head_b)
        with pytest.raises(Exception):
            hn.hn_step(state, {0: bad}, {0: Fraction(1)}, layout, lr=0.1)
