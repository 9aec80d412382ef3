import numpy as np
import pytest

from expr3d import (CameraIntrinsics, ContractError, FitterConfig, MorphableModel,
                    Pose6DoF, ValidationError, batch_fit, fit_expression,
                    make_synthetic_model, project_landmarks, projection_matrix,
                    residual_norm)


def setup_case(seed, n=120, s=4, m=6, L=16):
    model = make_synthetic_model(n=n, s=s, m=m, n_landmarks=L, seed=seed)
    rng = np.random.default_rng(1000 + seed)
    pose = Pose6DoF(rng.uniform(-0.25, 0.25, 3),
                    np.array([rng.normal(), rng.normal(), rng.uniform(320.0, 400.0)]))
    intr = CameraIntrinsics(96.0, np.array([32.0, 32.0]))
    pi = projection_matrix(pose, intr)
    alpha = rng.normal(size=s)
    return model, pi, alpha, rng


def test_residual_norm_zero_for_perfect_landmarks():
    model, pi, alpha, rng = setup_case(0)
    eta = rng.uniform(-1, 1, model.expr_dim) * model.expr_stddev
    p = project_landmarks(model, pi, alpha, eta)
    assert residual_norm(model, pi, alpha, eta, p) == 0.0


def test_residual_norm_single_offset_is_hypotenuse():
    model, pi, alpha, _ = setup_case(1)
    eta = np.zeros(model.expr_dim)
    p = project_landmarks(model, pi, alpha, eta)
    p[3] += np.array([3.0, 4.0])
    assert abs(residual_norm(model, pi, alpha, eta, p) - 5.0) <= 1e-12


def test_residual_norm_matches_accumulation_oracle():
    model, pi, alpha, rng = setup_case(2)
    eta = rng.uniform(-1, 1, model.expr_dim) * model.expr_stddev
    p = project_landmarks(model, pi, alpha, np.zeros(model.expr_dim)) + rng.normal(size=(model.n_landmarks, 2))
    proj = project_landmarks(model, pi, alpha, eta)
    acc = 0.0
    for i in range(model.n_landmarks):
        acc += (p[i, 0] - proj[i, 0]) ** 2 + (p[i, 1] - proj[i, 1]) ** 2
    assert abs(residual_norm(model, pi, alpha, eta, p) - np.sqrt(acc)) <= 1e-12


def test_noiseless_recovery_inside_box():
    for seed in range(20):
        model, pi, alpha, rng = setup_case(seed)
        eta_true = rng.uniform(-0.8, 0.8, model.expr_dim) * (3.0 * model.expr_stddev)
        p = project_landmarks(model, pi, alpha, eta_true)
        res = fit_expression(model, alpha, pi, p)
        assert res.converged
        assert np.max(np.abs(res.eta - eta_true)) <= 1e-4
        assert res.objective <= 1e-6


def test_landmarks_from_zero_eta_converge_immediately():
    model, pi, alpha, _ = setup_case(3)
    p = project_landmarks(model, pi, alpha, np.zeros(model.expr_dim))
    res = fit_expression(model, alpha, pi, p)
    assert res.converged
    assert res.iterations <= 2
    assert np.max(np.abs(res.eta)) <= 1e-6


def grid_axis_objective(model, pi, alpha, p, eta, j, n_points=601):
    """Objective along component j with the others frozen, over the full box."""
    lo, hi = -3.0 * model.expr_stddev[j], 3.0 * model.expr_stddev[j]
    values = np.linspace(lo, hi, n_points)
    objs = []
    for v in values:
        probe = np.array(eta)
        probe[j] = v
        objs.append(residual_norm(model, pi, alpha, probe, p))
    return values, np.array(objs)


def test_out_of_box_truth_lands_on_boundary():
    for seed in (0, 5, 9):
        model, pi, alpha, rng = setup_case(seed)
        eta_out = rng.uniform(-0.5, 0.5, model.expr_dim) * (3.0 * model.expr_stddev)
        j = int(rng.integers(model.expr_dim))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        eta_out[j] = sign * 5.0 * model.expr_stddev[j]
        p = project_landmarks(model, pi, alpha, eta_out)
        res = fit_expression(model, alpha, pi, p)
        bound = 3.0 * model.expr_stddev[j]
        assert abs(res.eta[j]) == bound
        assert np.sign(res.eta[j]) == sign
        assert j in res.active_constraints
        # 0.01-delta grid along the active axis: minimum sits at the boundary.
        values, objs = grid_axis_objective(model, pi, alpha, p, res.eta, j)
        k = int(np.argmin(objs))
        assert k in (0, len(values) - 1)
        assert np.sign(values[k]) == sign


def test_box_satisfied_exactly_under_noise():
    model, pi, alpha, rng = setup_case(7)
    bound = 3.0 * model.expr_stddev
    for _ in range(50):
        eta_true = rng.uniform(-1.2, 1.2, model.expr_dim) * bound
        p = project_landmarks(model, pi, alpha, np.clip(eta_true, -bound, bound))
        p = p + rng.normal(scale=1.5, size=p.shape)
        res = fit_expression(model, alpha, pi, p)
        assert np.all(np.abs(res.eta) <= bound)


def test_objective_trace_monotone():
    model, pi, alpha, rng = setup_case(8)
    eta_true = rng.uniform(-0.9, 0.9, model.expr_dim) * (3.0 * model.expr_stddev)
    p = project_landmarks(model, pi, alpha, eta_true) + rng.normal(scale=1.0, size=(model.n_landmarks, 2))
    res = fit_expression(model, alpha, pi, p, keep_trace=True)
    trace = np.array(res.trace)
    assert trace.size >= 2
    assert np.all(np.diff(trace) <= 0.0)
    assert trace[-1] == res.objective


def test_fit_determinism():
    model, pi, alpha, rng = setup_case(9)
    p = project_landmarks(model, pi, alpha, np.zeros(model.expr_dim)) + rng.normal(size=(model.n_landmarks, 2))
    a = fit_expression(model, alpha, pi, p)
    b = fit_expression(model, alpha, pi, p)
    assert np.array_equal(a.eta, b.eta)
    assert a.objective == b.objective
    assert a.iterations == b.iterations
    assert a.converged == b.converged
    assert a.active_constraints == b.active_constraints


def test_noise_robustness_monotone():
    sigmas = [0.0, 0.5, 1.0, 2.0]
    medians = []
    for sigma in sigmas:
        errors = []
        for trial in range(50):
            model, pi, alpha, rng = setup_case(trial % 10)
            noise_rng = np.random.default_rng(50_000 + trial * 7 + int(sigma * 10))
            eta_true = noise_rng.uniform(-0.8, 0.8, model.expr_dim) * (3.0 * model.expr_stddev)
            p = project_landmarks(model, pi, alpha, eta_true)
            p = p + noise_rng.normal(scale=sigma, size=p.shape)
            res = fit_expression(model, alpha, pi, p)
            errors.append(np.max(np.abs(res.eta - eta_true)))
        medians.append(np.median(errors))
    assert all(medians[i] <= medians[i + 1] + 1e-12 for i in range(len(medians) - 1))


def test_identifiability_with_two_m_landmarks():
    for seed in range(20):
        m = 5
        model = make_synthetic_model(n=80, s=3, m=m, n_landmarks=2 * m, seed=300 + seed)
        rng = np.random.default_rng(400 + seed)
        pose = Pose6DoF(rng.uniform(-0.2, 0.2, 3),
                        np.array([0.0, 0.0, rng.uniform(330.0, 390.0)]))
        pi = projection_matrix(pose, CameraIntrinsics(96.0, np.array([32.0, 32.0])))
        alpha = rng.normal(size=3)
        eta_true = rng.uniform(-0.95, 0.95, m) * (3.0 * model.expr_stddev)
        res = fit_expression(model, alpha, pi, project_landmarks(model, pi, alpha, eta_true))
        assert np.max(np.abs(res.eta - eta_true)) <= 1e-3


def test_underdetermined_and_invalid_inputs():
    model = make_synthetic_model(n=30, s=2, m=8, n_landmarks=3, seed=2)  # 2L=6 < m=8
    pose = Pose6DoF(np.zeros(3), np.array([0.0, 0.0, 350.0]))
    pi = projection_matrix(pose, CameraIntrinsics(96.0, np.array([32.0, 32.0])))
    with pytest.raises(ContractError):
        fit_expression(model, np.zeros(2), pi, np.zeros((3, 2)))

    model2, pi2, alpha2, _ = setup_case(4)
    p = project_landmarks(model2, pi2, alpha2, np.zeros(model2.expr_dim))
    p[0, 0] = np.nan
    with pytest.raises(ValidationError):
        fit_expression(model2, alpha2, pi2, p)
    with pytest.raises(ContractError):
        fit_expression(model2, alpha2, pi2, p[:-1])


def test_batch_matches_sequential_bitwise():
    model, pi, alpha, rng = setup_case(11)
    items = []
    rng = np.random.default_rng(29)
    for _ in range(100):
        eta_true = rng.uniform(-0.9, 0.9, model.expr_dim) * (3.0 * model.expr_stddev)
        p = project_landmarks(model, pi, alpha, eta_true) + rng.normal(scale=0.3, size=(model.n_landmarks, 2))
        items.append((alpha, pi, p))
    batch = batch_fit(model, items)
    assert not batch.errors
    assert len(batch.seconds) == 100
    for item, got in zip(items, batch.results):
        single = fit_expression(model, item[0], item[1], item[2])
        assert np.array_equal(got.eta, single.eta)
        assert got.objective == single.objective

    threaded = batch_fit(model, items, threads=4)
    for a, b in zip(batch.results, threaded.results):
        assert np.array_equal(a.eta, b.eta)


def test_batch_isolates_failures():
    model, pi, alpha, rng = setup_case(12)
    good = project_landmarks(model, pi, alpha, np.zeros(model.expr_dim))
    items = [(alpha, pi, good) for _ in range(5)]
    bad = np.array(good)
    bad[2, 1] = np.inf
    items.insert(3, (alpha, pi, bad))
    batch = batch_fit(model, items)
    assert len(batch.results) == 6
    assert batch.results[3] is None
    assert [e.index for e in batch.errors] == [3]
    assert batch.errors[0].kind == "ValidationError"
    assert all(r is not None for i, r in enumerate(batch.results) if i != 3)
