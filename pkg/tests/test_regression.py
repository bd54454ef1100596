import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voltvar.regression import DegenerateWindowError, ResponseModel, Sample
from voltvar.verify import (
    batch_weighted_ls,
    direct_weighted_gram,
    forbid_factorizations,
    run_update_stream,
)


def make_stream(rng, g, m, w_true=None, noise=0.0):
    def make(t):
        q = rng.uniform(-0.2, 0.2, g)
        x = np.append(q, 1.0)
        if w_true is None:
            y = rng.normal(1.0, 0.02, m)
        else:
            y = w_true.T @ x + (rng.normal(0.0, noise, m) if noise else 0.0)
        return Sample(x=x, y=y, t=t)

    return make


class TestSample:
    def test_bias_entry_must_be_one(self):
        with pytest.raises(ValueError, match="must be 1"):
            Sample(x=np.array([0.1, 0.9]), y=np.array([1.0]))

    def test_vectors_must_be_1d(self):
        with pytest.raises(ValueError):
            Sample(x=np.ones((2, 2)), y=np.array([1.0]))


class TestInitBatch:
    def test_collinear_window_still_well_defined(self):
        x = np.array([0.1, -0.2, 1.0])
        samples = [Sample(x=x, y=np.array([1.0, 0.9]), t=t) for t in range(6)]
        model = ResponseModel.init_batch(samples, beta=0.95, lam=1.0)
        assert np.all(np.isfinite(model.w))
        assert np.all(np.isfinite(model.phi))

    def test_recovers_known_map(self, rng):
        g, m = 5, 3
        w_true = rng.normal(0.0, 0.3, (g + 1, m))
        make = make_stream(rng, g, m, w_true)
        model = ResponseModel.init_batch([make(t) for t in range(12)], 0.95, 1e-8)
        assert np.linalg.norm(model.w - w_true) < 1e-6

    def test_matches_weighted_batch_oracle(self, rng):
        make = make_stream(rng, 6, 4)
        window = [make(t) for t in range(10)]
        model = ResponseModel.init_batch(window, beta=0.95, lam=1e-2)
        w_ref = batch_weighted_ls(window, 0.95, 1e-2)
        assert np.linalg.norm(model.w - w_ref) / np.linalg.norm(w_ref) < 1e-10

    def test_parameter_validation(self, rng):
        make = make_stream(rng, 3, 2)
        with pytest.raises(ValueError):
            ResponseModel.init_batch([make(0)], beta=0.0, lam=1.0)
        with pytest.raises(ValueError):
            ResponseModel.init_batch([make(0)], beta=0.95, lam=0.0)
        with pytest.raises(ValueError):
            ResponseModel.init_batch([], beta=0.95, lam=1.0)


class TestAddRemove:
    def test_zero_residual_add_leaves_w(self, rng):
        make = make_stream(rng, 4, 3)
        model = ResponseModel.init_batch([make(t) for t in range(8)], 0.95, 1e-3)
        x = np.append(rng.uniform(-0.2, 0.2, 4), 1.0)
        y = model.w.T @ x  # exactly the current prediction
        w_before, phi_before = model.w.copy(), model.phi.copy()
        model.add_sample(Sample(x=x, y=y, t=99))
        assert np.allclose(model.w, w_before, atol=1e-12)
        assert not np.allclose(model.phi, phi_before)

    def test_add_matches_direct_inverse_at_beta_one(self, rng):
        make = make_stream(rng, 4, 2)
        window = [make(t) for t in range(8)]
        model = ResponseModel.init_batch(window, beta=1.0, lam=1e-3)
        s = make(9)
        model.add_sample(s)
        gram = direct_weighted_gram(window + [s], 1.0, 1e-3)
        phi_ref = np.linalg.inv(gram)
        assert np.linalg.norm(model.phi - phi_ref) / np.linalg.norm(phi_ref) < 1e-9

    def test_add_remove_duplicate_cancels_at_beta_one(self, rng):
        make = make_stream(rng, 4, 2)
        window = [make(t) for t in range(8)]
        model = ResponseModel.init_batch(window, beta=1.0, lam=1e-3)
        w0, phi0 = model.w.copy(), model.phi.copy()
        # add a duplicate of the current oldest, then remove the oldest:
        # the window is unchanged as a multiset
        dup = window[0]
        model.add_sample(Sample(x=dup.x, y=dup.y, t=99))
        model.remove_oldest()
        assert np.allclose(model.w, w0, atol=1e-9)
        assert np.allclose(model.phi, phi0, atol=1e-9)

    def test_post_removal_matches_batch_oracle(self, rng):
        make = make_stream(rng, 5, 3)
        model = ResponseModel.init_batch([make(t) for t in range(10)], 0.95, 1e-2)
        for t in range(30):
            model.update(make(10 + t))
            w_ref = batch_weighted_ls(model.window, 0.95, model.ridge_residue)
            assert np.linalg.norm(model.w - w_ref) / np.linalg.norm(w_ref) < 1e-8

    def test_degenerate_window_raises(self):
        x_dup = np.append(np.zeros(3), 1.0)
        x_unique = np.append(np.array([1.0, 0.0, 0.0]), 1.0)
        window = [Sample(x=x_unique, y=np.ones(2), t=0)] + [
            Sample(x=x_dup, y=np.ones(2), t=t) for t in range(1, 6)
        ]
        model = ResponseModel.init_batch(window, 1.0, 1e-12)
        with pytest.raises(DegenerateWindowError):
            model.update(Sample(x=x_dup, y=np.ones(2), t=6))

    def test_remove_requires_two_samples(self, rng):
        make = make_stream(rng, 3, 2)
        model = ResponseModel.init_batch([make(0)], 0.95, 1e-2)
        with pytest.raises(ValueError):
            model.remove_oldest()


class TestUpdate:
    def test_window_length_invariant(self, rng):
        make = make_stream(rng, 4, 2)
        model = ResponseModel.init_batch([make(t) for t in range(10)], 0.95, 1e-2)
        for t in range(20):
            model.update(make(10 + t))
            assert model.window_length == 10

    def test_phi_stays_symmetric(self, rng):
        make = make_stream(rng, 6, 3)
        model = ResponseModel.init_batch([make(t) for t in range(10)], 0.95, 1e-2)
        for t in range(50):
            model.update(make(10 + t))
            assert np.linalg.norm(model.phi - model.phi.T) <= 1e-9 * np.linalg.norm(model.phi)

    def test_tracks_drifting_map(self, rng):
        g, m, big_l = 5, 3, 10
        w_a = rng.normal(0.0, 0.3, (g + 1, m))
        w_b = w_a + rng.normal(0.0, 0.15, (g + 1, m))
        make_a = make_stream(rng, g, m, w_a)
        make_b = make_stream(rng, g, m, w_b)
        model = ResponseModel.init_batch([make_a(t) for t in range(big_l)], 0.95, 1e-8)
        for t in range(20):
            model.update(make_a(big_l + t))
        assert np.linalg.norm(model.w - w_a) < 1e-6
        model.update(make_b(0))
        err_just_after = np.linalg.norm(model.w - w_b)
        for t in range(1, 2 * big_l):
            model.update(make_b(t))
        assert np.linalg.norm(model.w - w_b) < min(1e-6, err_just_after)

    def test_beta_one_stationary_reaches_ls_solution(self, rng):
        g, m = 4, 2
        w_true = rng.normal(0.0, 0.3, (g + 1, m))
        make = make_stream(rng, g, m, w_true)
        # at beta=1 the ridge residue never decays, so keep it tiny
        model = ResponseModel.init_batch([make(t) for t in range(10)], 1.0, 1e-8)
        for t in range(40):
            model.update(make(10 + t))
        assert np.linalg.norm(model.w - w_true) < 1e-6

    def test_shift_invariance_at_beta_one(self, rng):
        make = make_stream(rng, 4, 2)
        window = [make(t) for t in range(10)]
        model = ResponseModel.init_batch(window, 1.0, 1e-3)
        w0, phi0 = model.w.copy(), model.phi.copy()
        oldest = window[0]
        model.update(Sample(x=oldest.x, y=oldest.y, t=10))
        assert np.allclose(model.w, w0, atol=1e-9)
        assert np.allclose(model.phi, phi0, atol=1e-9)

    def test_output_scaling_linearity(self, rng):
        make = make_stream(rng, 5, 3)
        window = [make(t) for t in range(10)]
        stream = [make(10 + t) for t in range(15)]
        c = -3.7
        scaled = lambda s: Sample(x=s.x, y=c * s.y, t=s.t)
        m1 = ResponseModel.init_batch(window, 0.95, 1e-2)
        m2 = ResponseModel.init_batch([scaled(s) for s in window], 0.95, 1e-2)
        for s in stream:
            m1.update(s)
            m2.update(scaled(s))
        assert np.allclose(m2.w, c * m1.w, rtol=1e-11, atol=1e-13)

    def test_no_factorization_after_init(self, rng):
        make = make_stream(rng, 6, 4)
        model = ResponseModel.init_batch([make(t) for t in range(10)], 0.95, 1e-2)
        with forbid_factorizations():
            for t in range(10):
                model.update(make(10 + t))
                model.predict(np.zeros(6))
                model.sensitivity()

    def test_wide_stream_with_refresh_stays_on_oracle(self, rng):
        g, m = 25, 26
        make = make_stream(rng, g, m)
        model = ResponseModel.init_batch([make(t) for t in range(10)], 0.95, 1e-2)
        errs = []

        def compare(_i, mdl):
            w_ref = batch_weighted_ls(mdl.window, 0.95, mdl.ridge_residue)
            errs.append(np.linalg.norm(mdl.w - w_ref) / np.linalg.norm(w_ref))

        run_update_stream(model, [make(10 + t) for t in range(150)], refresh_every=100,
                          callback=compare)
        assert max(errs) < 1e-8


class TestPredictSensitivity:
    def test_bias_only_model(self):
        w = np.zeros((5, 3))
        w[-1] = [1.0, 0.98, 1.02]
        model = ResponseModel(w=w.copy(), phi=np.eye(5))
        for q in (np.zeros(4), np.array([0.1, -0.2, 0.3, 0.0])):
            assert np.allclose(model.predict(q), w[-1])
        assert np.allclose(model.sensitivity(), 0.0)

    def test_zero_dispatch_returns_bias_row(self, rng):
        w = rng.normal(size=(6, 4))
        model = ResponseModel(w=w.copy(), phi=np.eye(6))
        assert np.allclose(model.predict(np.zeros(5)), w[-1])

    def test_shape_contract(self, rng):
        w = rng.normal(size=(7, 3))
        model = ResponseModel(w=w.copy(), phi=np.eye(7))
        assert model.sensitivity().shape == (6, 3)

    def test_heldout_prediction_on_linear_plant(self, rng):
        g, m = 5, 3
        w_true = rng.normal(0.0, 0.3, (g + 1, m))
        make = make_stream(rng, g, m, w_true)
        model = ResponseModel.init_batch([make(t) for t in range(12)], 0.95, 1e-8)
        q = rng.uniform(-0.2, 0.2, g)
        truth = w_true.T @ np.append(q, 1.0)
        assert np.max(np.abs(model.predict(q) - truth)) < 1e-6

    def test_dimension_mismatch(self, rng):
        w = rng.normal(size=(6, 4))
        model = ResponseModel(w=w.copy(), phi=np.eye(6))
        with pytest.raises(ValueError):
            model.predict(np.zeros(7))

    def test_sensitivity_matches_plant_finite_differences(self):
        from voltvar import powerflow as pf
        from voltvar.baselines import stale_sensitivity
        from voltvar.verify import two_bus_case

        case = two_bus_case(with_inverter=True)
        system = pf.build_admittance(case)

        def probe(q):
            fixed = {case.inverters[0].location: 1j * q[0]}
            sol = pf.solve(system, pf.InjectionSet.build(system, case.loads, fixed), tol=1e-12)
            return sol.magnitudes(case.monitored)

        rng = np.random.default_rng(3)
        samples = [
            Sample(x=np.append(q, 1.0), y=probe(q), t=t)
            for t, q in enumerate(rng.uniform(-0.05, 0.05, (12, 1)))
        ]
        model = ResponseModel.init_batch(samples, 0.95, 1e-10)
        w_fd = stale_sensitivity(probe, np.zeros(1), 1e-5)
        assert np.max(np.abs(model.sensitivity() - w_fd[:-1])) < 2e-3


def test_state_dump_round_trip(rng, tmp_path):
    make = make_stream(rng, 5, 3)
    model = ResponseModel.init_batch([make(t) for t in range(10)], 0.95, 1e-2)
    for t in range(7):
        model.update(make(10 + t))
    path = tmp_path / "model.json"
    model.dump(path)
    clone = ResponseModel.load(path)
    assert np.array_equal(clone.w, model.w)
    assert np.array_equal(clone.phi, model.phi)
    assert clone.step == model.step and clone.ridge_residue == model.ridge_residue
    # the clone continues identically
    s = make(99)
    model.update(s)
    clone.update(s)
    assert np.array_equal(clone.w, model.w)


@settings(max_examples=30, deadline=None)
@given(st.floats(min_value=-5.0, max_value=5.0, allow_nan=False))
def test_scaling_property_on_fixed_window(c):
    rng = np.random.default_rng(0)
    make = make_stream(rng, 3, 2)
    window = [make(t) for t in range(8)]
    m1 = ResponseModel.init_batch(window, 0.9, 1e-3)
    m2 = ResponseModel.init_batch(
        [Sample(x=s.x, y=c * s.y, t=s.t) for s in window], 0.9, 1e-3
    )
    assert np.allclose(m2.w, c * m1.w, rtol=1e-10, atol=1e-12)
