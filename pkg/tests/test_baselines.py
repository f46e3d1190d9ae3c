from fractions import Fraction

import numpy as np

from padfl import baselines, protocol
from padfl.model import PlainModel, init_plain

from test_protocol import small_setup


class TestFedAvgMinWidth:
    def test_ideal_capacities_full_width(self):
        cfg, layout, profiles = small_setup(seed=5, capacity="ideal")
        method = baselines.FedAvgMinWidth(profiles, layout, cfg, seed=5)
        assert method.width == 1

    def test_single_client_is_local_sgd(self):
        cfg, layout, profiles = small_setup(seed=6, clients=4)
        cfg.per_round = 1
        method = baselines.FedAvgMinWidth(profiles, layout, cfg, seed=6)
        start = method.model.copy()
        selected = method.sample_clients(1)
        i = selected[0]
        res = method.train_client(0, i, cfg.lr)
        method.aggregate(0, [i], {i: res}, audit=False)
        # aggregate of one client is exactly that client's model
        for a, b in zip(method.model.arrays(), res.model.arrays()):
            assert np.array_equal(a, b)
        ref, _, _ = baselines.plain_sgd(start, layout.arch, profiles[i].data,
                                        epochs=cfg.epochs, batch=cfg.batch,
                                        lr=cfg.lr, rng=method.client_rng(0, i))
        for a, b in zip(method.model.arrays(), ref.arrays()):
            assert np.array_equal(a, b)

    def test_aggregate_of_equal_models_is_identity(self):
        cfg, layout, profiles = small_setup(seed=7)
        method = baselines.FedAvgMinWidth(profiles, layout, cfg, seed=7)
        snap = [a.copy() for a in method.model.arrays()]
        mk = lambda i: type("R", (), {"client": i, "ok": True,
                                      "model": method.model.copy()})()
        method.aggregate(0, [0, 1], {0: mk(0), 1: mk(1)}, audit=False)
        for a, b in zip(method.model.arrays(), snap):
            assert np.array_equal(a, b)

    def test_round_produces_metrics(self):
        cfg, layout, profiles = small_setup(seed=8)
        method = baselines.FedAvgMinWidth(profiles, layout, cfg, seed=8)
        m = method.run_round(0)
        assert len(m.rows) == len(profiles)
        assert all(np.isnan(r.alpha) for r in m.rows)


class TestPWidthNested:
    def test_uniform_widths_equal_plain_mean(self):
        cfg, layout, profiles = small_setup(seed=9, capacity="ideal")
        method = baselines.PWidthNested(profiles, layout, cfg, seed=9)
        rng = np.random.default_rng(0)
        models = [PlainModel.from_arrays(method.model,
                                         [rng.normal(size=a.shape)
                                          for a in method.model.arrays()])
                  for _ in range(2)]
        mk = lambda i: type("R", (), {"client": i, "ok": True, "model": models[i]})()
        method.aggregate(0, [0, 1], {0: mk(0), 1: mk(1)}, audit=False)
        for got, a, b in zip(method.model.arrays(), models[0].arrays(),
                             models[1].arrays()):
            assert np.allclose(got, (a + b) / 2, atol=1e-15)

    def test_singleton_coverage_takes_client_value(self):
        cfg, layout, profiles = small_setup(seed=10, capacity="ideal")
        profiles[0].width = Fraction(1, 2)
        method = baselines.PWidthNested(profiles, layout, cfg, seed=10)
        view = method.client_view(0)
        new = PlainModel.from_arrays(view, [np.full_like(a, 7.0) for a in view.arrays()])
        mk = type("R", (), {"client": 0, "ok": True, "model": new})()
        before = [a.copy() for a in method.model.arrays()]
        method.aggregate(0, [0], {0: mk}, audit=False)
        for idx, (got, old) in enumerate(zip(method.model.arrays(), before)):
            key = method.keys[0][idx]
            assert np.all(got[key] == 7.0)
            untouched = old.copy()
            untouched[key] = 7.0
            assert np.array_equal(got, untouched)

    def test_two_widths_against_coverage_oracle(self):
        cfg, layout, profiles = small_setup(seed=11, capacity="ideal", clients=4)
        profiles[0].width = Fraction(1, 2)
        profiles[1].width = Fraction(1)
        method = baselines.PWidthNested(profiles, layout, cfg, seed=11)
        rng = np.random.default_rng(1)
        m0 = PlainModel.from_arrays(method.client_view(0),
                                    [rng.normal(size=a.shape)
                                     for a in method.client_view(0).arrays()])
        m1 = PlainModel.from_arrays(method.client_view(1),
                                    [rng.normal(size=a.shape)
                                     for a in method.client_view(1).arrays()])
        base = [a.copy() for a in method.model.arrays()]
        mk = lambda i, m: type("R", (), {"client": i, "ok": True, "model": m})()
        method.aggregate(0, [0, 1], {0: mk(0, m0), 1: mk(1, m1)}, audit=False)
        # brute-force oracle: scatter every entry, then average by coverage
        for idx, got in enumerate(method.model.arrays()):
            acc = np.zeros_like(base[idx])
            cnt = np.zeros_like(base[idx])
            for cid, mm in ((0, m0), (1, m1)):
                key = method.keys[cid][idx]
                acc[key] += mm.arrays()[idx]
                cnt[key] += 1
            expect = base[idx].copy()
            expect[cnt > 0] = acc[cnt > 0] / cnt[cnt > 0]
            assert np.array_equal(got, expect)

    def test_round_runs(self):
        cfg, layout, profiles = small_setup(seed=12, capacity="hetero")
        method = baselines.PWidthNested(profiles, layout, cfg, seed=12)
        m = method.run_round(0)
        assert len(m.rows) == len(profiles)


class TestLocalOnly:
    def test_no_communication(self):
        cfg, layout, profiles = small_setup(seed=13)
        method = baselines.LocalOnly(profiles, layout, cfg, seed=13)
        m = method.run_round(0)
        assert m.params_exchanged == 0

    def test_unselected_models_untouched(self):
        cfg, layout, profiles = small_setup(seed=14)
        method = baselines.LocalOnly(profiles, layout, cfg, seed=14)
        snaps = {i: [a.copy() for a in method.models[i].arrays()]
                 for i in method.models}
        m = method.run_round(0)
        for i in range(len(profiles)):
            same = all(np.array_equal(a, b) for a, b in
                       zip(method.models[i].arrays(), snaps[i]))
            assert same == (i not in m.selected)


class TestAblationWiring:
    def test_no_hn_agg_first_round_matches_default_up_to_hn(self):
        cfg, layout, profiles_a = small_setup(seed=15)
        _, _, profiles_b = small_setup(seed=15)
        full = protocol.DecomposedFL(profiles_a, layout, cfg, seed=15,
                                     hn_aggregation=True)
        ablated = protocol.DecomposedFL(profiles_b, layout, cfg, seed=15,
                                        hn_aggregation=False)
        ma = full.run_round(0)
        mb = ablated.run_round(0)
        assert ma.selected == mb.selected
        for a, b in zip(full.general.factors, ablated.general.factors):
            assert np.array_equal(a, b)
        # trained personal params identical client by client
        for i in ma.selected:
            pa = profiles_a[i].local_model.personal
            pb = profiles_b[i].local_model.personal
            for x, y in zip(pa.arrays(), pb.arrays()):
                assert np.array_equal(x, y)
        assert np.isnan(mb.hn_loss)
        assert not np.isnan(ma.hn_loss)

    def test_no_hn_agg_keeps_personal_local(self):
        cfg, layout, profiles = small_setup(seed=16)
        method = protocol.DecomposedFL(profiles, layout, cfg, seed=16,
                                       hn_aggregation=False)
        method.run_round(0)
        trained = {i: method.local_personal[i] for i in method.local_personal}
        assert trained
        for i, personal in trained.items():
            sent = method.sent_personal(i)
            for a, b in zip(sent.arrays(), personal.arrays()):
                assert np.array_equal(a, b)

    def test_flanc_recovery_shapes_match(self):
        cfg, layout, profiles_a = small_setup(seed=17)
        _, _, profiles_b = small_setup(seed=17)
        a = protocol.DecomposedFL(profiles_a, layout, cfg, seed=17, recovery="padfl")
        b = protocol.DecomposedFL(profiles_b, layout, cfg, seed=17, recovery="flanc")
        ma = a.run_round(0)
        mb = b.run_round(0)
        for fa, fb in zip(a.general.factors, b.general.factors):
            assert fa.shape == fb.shape
        assert len(ma.rows) == len(mb.rows)
