import math

import numpy as np
import pytest

from fedbasin.datasets import gen_synthetic_classification, partition_iid
from fedbasin.federation import (
    AdaptiveParams,
    ClientUpdate,
    FederationConfig,
    GlobalState,
    GmaParams,
    ImaConfig,
    client_batch,
    client_rng,
    fedadam_step,
    fedgma_mask,
    fednova_aggregate,
    fedyogi_step,
    fma_aggregate,
    ima_average,
    local_train,
    mild_exponential,
    run_federation,
    sample_clients,
    weighted_delta,
)
from fedbasin.nn import (
    LrSchedule,
    ModelSpec,
    OptimizerState,
    ParamVector,
    evaluate,
    init_params,
    loss_and_grad,
    schedule_lr,
    sgd_step,
)


def make_update(cid, delta, n_samples, n_steps, init):
    final = ParamVector(init.values + delta, init.spec_fingerprint)
    return ClientUpdate(cid, np.asarray(delta, dtype=float), n_samples, n_steps, final)


@pytest.fixture
def small_spec():
    return ModelSpec.mlp([2, 3, 2])


@pytest.fixture
def small_init(small_spec):
    return init_params(small_spec, 0)


class TestSampleClients:
    def test_full_sample_is_permutation(self):
        rng = np.random.default_rng(0)
        ids = sample_clients(rng, 7, 7)
        assert sorted(ids) == list(range(7))

    def test_deterministic(self):
        a = sample_clients(np.random.default_rng(42), 10, 4)
        b = sample_clients(np.random.default_rng(42), 10, 4)
        assert a == b

    def test_uniform_frequency(self):
        # 10000 draws of one client from K=10: each count within 3 sigma
        counts = np.zeros(10)
        for i in range(10_000):
            counts[sample_clients(np.random.default_rng(i), 10, 1)[0]] += 1
        sigma = math.sqrt(10_000 * 0.1 * 0.9)
        assert np.all(np.abs(counts - 1000) <= 3 * sigma)

    def test_count_out_of_range(self):
        with pytest.raises(ValueError):
            sample_clients(np.random.default_rng(0), 5, 6)


class TestLocalTrain:
    def test_zero_lr_no_update(self, small_spec, small_init):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(10, 2))
        y = rng.normal(size=(10, 2))
        upd = local_train(small_spec, small_init, (x, y), epochs=5, batch_size=50,
                          lr=0.0, momentum=0.9, prox_mu=0.0,
                          rng=np.random.default_rng(1))
        assert np.all(upd.delta == 0.0)
        assert upd.n_steps == 5

    def test_step_count_ceil(self, small_spec, small_init):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(10, 2))
        y = rng.normal(size=(10, 2))
        upd = local_train(small_spec, small_init, (x, y), epochs=5, batch_size=50,
                          lr=0.01, momentum=0.0, prox_mu=0.0,
                          rng=np.random.default_rng(1))
        assert upd.n_steps == 5 * math.ceil(10 / 50)

    def test_partial_batches_counted(self, small_spec, small_init):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(7, 2))
        y = rng.normal(size=(7, 2))
        upd = local_train(small_spec, small_init, (x, y), epochs=2, batch_size=3,
                          lr=0.01, momentum=0.0, prox_mu=0.0,
                          rng=np.random.default_rng(1))
        assert upd.n_steps == 2 * math.ceil(7 / 3)

    def test_init_not_mutated(self, small_spec, small_init):
        before = small_init.values.copy()
        rng = np.random.default_rng(0)
        x = rng.normal(size=(8, 2))
        y = rng.normal(size=(8, 2))
        local_train(small_spec, small_init, (x, y), epochs=3, batch_size=4,
                    lr=0.05, momentum=0.9, prox_mu=0.0,
                    rng=np.random.default_rng(2))
        assert np.array_equal(small_init.values, before)

    def test_prox_shrinks_delta(self, small_spec, small_init):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(20, 2))
        y = rng.normal(size=(20, 2))
        norms = []
        for mu in (0.0, 1.0, 100.0):
            upd = local_train(small_spec, small_init, (x, y), epochs=20,
                              batch_size=5, lr=0.01, momentum=0.0, prox_mu=mu,
                              rng=np.random.default_rng(7))
            norms.append(np.linalg.norm(upd.delta))
        assert norms[0] > norms[1] > norms[2]

    def test_empty_client(self, small_spec, small_init):
        with pytest.raises(ValueError, match="no data"):
            local_train(small_spec, small_init, (np.zeros((0, 2)), np.zeros((0, 2))),
                        epochs=1, batch_size=1, lr=0.1, momentum=0.0,
                        prox_mu=0.0, rng=np.random.default_rng(0))


class TestFmaAggregate:
    def test_identical_clients(self, small_init):
        d = np.random.default_rng(0).normal(size=small_init.values.size)
        updates = [make_update(k, d, 10, 3, small_init) for k in range(4)]
        out = fma_aggregate(updates, small_init)
        assert np.max(np.abs(out.values - (small_init.values + d))) < 1e-12

    def test_weighted_mean(self, small_init):
        zero = ParamVector(np.zeros_like(small_init.values), small_init.spec_fingerprint)
        v = np.linspace(-1, 1, zero.values.size)
        updates = [make_update(0, np.zeros_like(v), 1, 1, zero),
                   make_update(1, v, 3, 1, zero)]
        out = fma_aggregate(updates, zero)
        assert np.max(np.abs(out.values - 0.75 * v)) < 1e-12

    def test_matches_two_loop_oracle(self, small_init):
        rng = np.random.default_rng(5)
        updates = [make_update(k, rng.normal(size=small_init.values.size),
                               int(rng.integers(1, 20)), 2, small_init)
                   for k in range(5)]
        out = fma_aggregate(updates, small_init)
        # naive per-coordinate loop over weighted *final params*
        n_total = sum(u.n_samples for u in updates)
        expect = np.zeros_like(small_init.values)
        for j in range(expect.size):
            for u in updates:
                expect[j] += (u.n_samples / n_total) * u.final_params.values[j]
        assert np.max(np.abs(out.values - expect)) < 1e-12

    def test_convexity(self, small_init):
        rng = np.random.default_rng(8)
        updates = [make_update(k, rng.normal(size=small_init.values.size),
                               int(rng.integers(1, 9)), 1, small_init)
                   for k in range(6)]
        out = fma_aggregate(updates, small_init)
        stacked = np.stack([u.final_params.values for u in updates])
        assert np.all(out.values >= stacked.min(axis=0) - 1e-12)
        assert np.all(out.values <= stacked.max(axis=0) + 1e-12)

    def test_empty(self, small_init):
        with pytest.raises(ValueError):
            fma_aggregate([], small_init)


class TestFedNova:
    def test_equal_steps_bitwise_fedavg(self, small_init):
        rng = np.random.default_rng(1)
        updates = [make_update(k, rng.normal(size=small_init.values.size),
                               int(rng.integers(1, 30)), 7, small_init)
                   for k in range(5)]
        nova = fednova_aggregate(updates, small_init)
        avg = fma_aggregate(updates, small_init)
        assert np.array_equal(nova.values, avg.values)

    def test_single_client(self, small_init):
        d = np.random.default_rng(2).normal(size=small_init.values.size)
        upd = make_update(0, d, 5, 9, small_init)
        out = fednova_aggregate([upd], small_init)
        assert np.allclose(out.values, small_init.values + d, atol=1e-12)

    def test_hand_formula(self, small_init):
        d = np.random.default_rng(3).normal(size=small_init.values.size)
        updates = [make_update(0, d, 10, 1, small_init),
                   make_update(1, d, 10, 4, small_init)]
        out = fednova_aggregate(updates, small_init)
        # tau_eff = (1+4)/2 = 2.5; result = init + 2.5*(d/1 + d/4)/2
        expect = small_init.values + 2.5 * (d / 1 + d / 4) / 2
        assert np.max(np.abs(out.values - expect)) < 1e-12

    def test_zero_steps_rejected(self, small_init):
        upd = make_update(0, np.zeros_like(small_init.values), 5, 0, small_init)
        with pytest.raises(ValueError):
            fednova_aggregate([upd], small_init)


def adaptive_state(init, m=None, v=None):
    st = GlobalState(round=0, global_model=init.copy(), history=[], history_cap=1)
    n = init.values.size
    st.server_m = np.zeros(n) if m is None else np.asarray(m, dtype=float).copy()
    st.server_v = np.zeros(n) if v is None else np.asarray(v, dtype=float).copy()
    return st


class TestAdaptiveAggregators:
    def test_adam_momentum_off(self, small_init):
        n = small_init.values.size
        c = 0.04
        delta = np.random.default_rng(0).normal(size=n)
        st = adaptive_state(small_init, v=np.full(n, c))
        params = AdaptiveParams(eta=0.5, beta1=0.0, beta2=1.0, tau=0.01)
        fedadam_step(st, delta, params)
        expect = small_init.values + 0.5 * delta / (np.sqrt(c) + 0.01)
        assert np.max(np.abs(st.global_model.values - expect)) < 1e-12

    def test_yogi_equals_adam_on_sign_boundary_family(self, small_init):
        # the two v-updates agree exactly on v_prev = 2*delta^2, which
        # satisfies the nonnegative sign condition v_prev - delta^2 >= 0
        n = small_init.values.size
        rng = np.random.default_rng(1)
        delta = rng.normal(size=n)
        v0 = 2.0 * delta * delta
        m0 = rng.normal(size=n) * 0.01
        params = AdaptiveParams()
        st_adam = adaptive_state(small_init, m=m0, v=v0)
        st_yogi = adaptive_state(small_init, m=m0, v=v0)
        fedadam_step(st_adam, delta, params)
        fedyogi_step(st_yogi, delta, params)
        assert np.max(np.abs(st_adam.global_model.values
                             - st_yogi.global_model.values)) < 1e-12
        assert np.max(np.abs(st_adam.server_v - st_yogi.server_v)) < 1e-12

    def test_yogi_additive_below(self, small_init):
        # from v = 0 the yogi and adam second moments coincide for one step
        n = small_init.values.size
        delta = np.random.default_rng(2).normal(size=n)
        params = AdaptiveParams()
        st_adam = adaptive_state(small_init)
        st_yogi = adaptive_state(small_init)
        fedadam_step(st_adam, delta, params)
        fedyogi_step(st_yogi, delta, params)
        assert np.allclose(st_adam.server_v, st_yogi.server_v, atol=1e-15)

    def test_length_mismatch(self, small_init):
        st = adaptive_state(small_init)
        with pytest.raises(ValueError):
            fedadam_step(st, np.zeros(3), AdaptiveParams())


class TestFedGma:
    def test_full_agreement_passes_everything(self, small_init):
        rng = np.random.default_rng(0)
        base = rng.normal(size=small_init.values.size)
        updates = [make_update(k, base * (1 + 0.1 * k), 10, 1, small_init)
                   for k in range(4)]
        masked = fedgma_mask(updates, epsilon=0.8)
        assert np.array_equal(masked, weighted_delta(updates))

    def test_opposite_deltas_zero_step(self, small_init):
        d = np.random.default_rng(1).normal(size=small_init.values.size)
        updates = [make_update(0, d, 10, 1, small_init),
                   make_update(1, -d, 10, 1, small_init)]
        masked = fedgma_mask(updates, epsilon=0.8)
        assert np.all(masked == 0.0)

    def test_epsilon_zero_is_unmasked(self, small_init):
        rng = np.random.default_rng(2)
        updates = [make_update(k, rng.normal(size=small_init.values.size),
                               int(rng.integers(1, 10)), 1, small_init)
                   for k in range(3)]
        masked = fedgma_mask(updates, epsilon=0.0)
        assert np.max(np.abs(masked - weighted_delta(updates))) < 1e-12


class TestImaAverage:
    def test_window_one(self, small_init):
        hist = [small_init.copy()]
        out = ima_average(hist, 1)
        assert np.array_equal(out.values, small_init.values)

    def test_two_models(self, small_init):
        v = np.linspace(0.1, 1.0, small_init.values.size)
        hist = [ParamVector(v, small_init.spec_fingerprint),
                ParamVector(3 * v, small_init.spec_fingerprint)]
        out = ima_average(hist, 2)
        assert np.max(np.abs(out.values - 2 * v)) < 1e-12

    def test_matches_loop_oracle(self, small_init):
        rng = np.random.default_rng(4)
        hist = [ParamVector(rng.normal(size=small_init.values.size),
                            small_init.spec_fingerprint) for _ in range(5)]
        out = ima_average(hist, 5)
        expect = np.zeros_like(small_init.values)
        for j in range(expect.size):
            for h in hist:
                expect[j] += h.values[j] / 5
        assert np.max(np.abs(out.values - expect)) < 1e-12

    def test_too_few_models(self, small_init):
        with pytest.raises(ValueError):
            ima_average([small_init], 2)


def tiny_task(seed=0, n_classes=3, dim=2):
    ds = gen_synthetic_classification(seed, n_classes, 30, dim, 3.0)
    spec = ModelSpec.mlp([dim, 6, n_classes])
    return ds, spec


def base_config(**kw):
    defaults = dict(n_clients=4, participation=0.5, rounds=12, local_epochs=2,
                    batch_size=10, lr_schedule=LrSchedule.exponential(0.05, 0.01),
                    momentum=0.9, seed=3)
    defaults.update(kw)
    return FederationConfig(**defaults)


def records_equal(a, b):
    return all(
        ra.round == rb.round and ra.lr == rb.lr and ra.test_loss == rb.test_loss
        and ra.test_acc == rb.test_acc and ra.locality_l2 == rb.locality_l2
        and ra.client_ids == rb.client_ids
        for ra, rb in zip(a, b)) and len(a) == len(b)


class TestRunFederation:
    def test_deterministic(self):
        ds, spec = tiny_task()
        part = partition_iid(ds, 4, seed=1)
        cfg = base_config()
        r1 = run_federation(spec, cfg, ds, part)
        r2 = run_federation(spec, cfg, ds, part)
        assert records_equal(r1.records, r2.records)
        assert np.array_equal(r1.state.global_model.values,
                              r2.state.global_model.values)

    def test_ima_never_triggering_matches_disabled(self):
        ds, spec = tiny_task()
        part = partition_iid(ds, 4, seed=1)
        plain = run_federation(spec, base_config(), ds, part)
        inert = ImaConfig(start_round=999, window=3,
                          mild_schedule=LrSchedule.constant(0.001))
        with_ima = run_federation(spec, base_config(ima=inert), ds, part)
        assert records_equal(plain.records, with_ima.records)
        assert np.array_equal(plain.state.global_model.values,
                              with_ima.state.global_model.values)
        assert with_ima.state.ima_model is None

    def test_window_one_same_mild_is_bitwise_plain(self):
        ds, spec = tiny_task()
        part = partition_iid(ds, 4, seed=1)
        sched = LrSchedule.exponential(0.05, 0.01)
        plain = run_federation(spec, base_config(lr_schedule=sched), ds, part)
        degenerate = ImaConfig(start_round=6, window=1, mild_schedule=sched)
        with_ima = run_federation(
            spec, base_config(lr_schedule=sched, ima=degenerate), ds, part)
        assert records_equal(plain.records, with_ima.records)
        assert np.array_equal(plain.state.global_model.values,
                              with_ima.state.global_model.values)

    def test_single_client_equals_centralized_sgd(self):
        # K=1, full participation: the loop must reduce to plain SGD
        ds, spec = tiny_task(seed=5)
        part = partition_iid(ds, 1, seed=0)
        sched = LrSchedule.exponential(0.03, 0.0)
        cfg = base_config(n_clients=1, participation=1.0, rounds=15,
                          local_epochs=2, batch_size=8, lr_schedule=sched, seed=11)
        result = run_federation(spec, cfg, ds, part)

        # centralized oracle: same rng derivation, fresh momentum per round
        params = init_params(spec, cfg.seed)
        feats, targets = client_batch(ds, part.client_indices[0], spec)
        losses = []
        for t in range(1, cfg.rounds + 1):
            rng = client_rng(cfg.seed, t, 0)
            opt = OptimizerState.zeros(params.values.size, cfg.momentum)
            lr = schedule_lr(sched, t)
            for _ in range(cfg.local_epochs):
                order = rng.permutation(feats.shape[0])
                for start in range(0, feats.shape[0], cfg.batch_size):
                    idx = order[start:start + cfg.batch_size]
                    _, grad = loss_and_grad(params, spec, (feats[idx], targets[idx]))
                    sgd_step(params, grad, lr, opt)
            loss, _ = evaluate(params, spec, ds.features, ds.labels)
            losses.append(loss)
        fed_losses = [r.test_loss for r in result.records]
        assert np.max(np.abs(np.array(fed_losses) - np.array(losses))) < 1e-9

    def test_branch_law_and_window_law(self):
        ds, spec = tiny_task()
        part = partition_iid(ds, 4, seed=1)
        sched = LrSchedule.exponential(0.05, 0.01)
        t_s, P = 7, 3
        ima = ImaConfig(start_round=t_s, window=P,
                        mild_schedule=mild_exponential(sched, t_s, 0.03))
        seen = []
        aggregates = []

        def hook(record, ctx):
            seen.append((ctx.round, ctx.broadcast_kind, ctx.broadcast.values.copy()))
            aggregates.append(ctx.global_model.values.copy())
            if ctx.ima_model is not None:
                window = np.stack(aggregates[-P:]) if len(aggregates) >= P else None
                if window is not None:
                    assert np.max(np.abs(ctx.ima_model.values
                                         - window.mean(axis=0))) < 1e-12

        run_federation(spec, base_config(lr_schedule=sched, ima=ima), ds, part,
                       on_round=hook)
        for t, kind, _ in seen:
            assert kind == ("ima" if t >= t_s else "fma")
        # the model broadcast at t is the mean of the P aggregates before t
        for i, (t, kind, broadcast) in enumerate(seen):
            if t > t_s:
                window = np.stack(aggregates[i - P:i]).mean(axis=0)
                assert np.max(np.abs(broadcast - window)) < 1e-12

    def test_history_never_contains_ima_outputs(self):
        ds, spec = tiny_task()
        part = partition_iid(ds, 4, seed=1)
        sched = LrSchedule.exponential(0.05, 0.01)
        ima = ImaConfig(start_round=6, window=3, mild_schedule=sched)
        aggregates = []

        def hook(record, ctx):
            aggregates.append(ctx.global_model.values.copy())

        result = run_federation(spec, base_config(lr_schedule=sched, ima=ima),
                                ds, part, on_round=hook)
        for stored, computed in zip(result.state.history,
                                    aggregates[::-1]):
            assert np.array_equal(stored.values, computed)

    @pytest.mark.parametrize("aggregator", ["fednova", "fedadam", "fedyogi", "fedgma"])
    def test_all_aggregators_run(self, aggregator):
        ds, spec = tiny_task()
        part = partition_iid(ds, 4, seed=1)
        cfg = base_config(aggregator=aggregator, rounds=6)
        result = run_federation(spec, cfg, ds, part)
        assert len(result.records) == 6
        assert np.all(np.isfinite(result.state.global_model.values))

    def test_checkpoint_cadence(self):
        ds, spec = tiny_task()
        part = partition_iid(ds, 4, seed=1)
        sched = LrSchedule.exponential(0.05, 0.01)
        ima = ImaConfig(start_round=8, window=2, mild_schedule=sched)
        result = run_federation(spec, base_config(rounds=12, ima=ima), ds, part,
                                checkpoint_rounds=5)
        periodic = [k for k in result.checkpoints if k.startswith("round_")]
        assert sorted(periodic) == ["round_00005", "round_00010"]
        assert "final_fma" in result.checkpoints
        assert "final_ima" in result.checkpoints

    def test_partition_size_mismatch(self):
        ds, spec = tiny_task()
        part = partition_iid(ds, 3, seed=1)
        with pytest.raises(ValueError, match="clients"):
            run_federation(spec, base_config(), ds, part)


class TestMildExponential:
    def test_restarts_from_in_effect_lr(self):
        base = LrSchedule.exponential(0.05, 0.01)
        mild = mild_exponential(base, start_round=90, gamma=0.03)
        assert schedule_lr(mild, 90) == pytest.approx(schedule_lr(base, 90), rel=1e-9)
        assert schedule_lr(mild, 91) == pytest.approx(
            schedule_lr(base, 90) * 0.97, rel=1e-9)


class TestImaConfigValidation:
    def test_window_le_start(self):
        with pytest.raises(ValueError):
            ImaConfig(start_round=2, window=5,
                      mild_schedule=LrSchedule.constant(0.01))
