import numpy as np
import pytest

from koopman_training.errors import ConfigurationError, ConstructionError, IngestionError, PredictionDiverged
from koopman_training.koopman import (KoopmanModel, KoopmanPatch, build_model, finite_section, koopman_train,
                                      load_model, predict, save_model, spectral_report)
from koopman_training.param_space import Architecture, build_partition
from koopman_training.recorder import SnapshotPair, Trajectory

A2 = np.array([[0.9, 0.1], [0.0, 0.8]])


def series(A, w0, k):
    out = [np.asarray(w0, dtype=float)]
    for _ in range(k - 1):
        out.append(A @ out[-1])
    return np.array(out).T  # m x k


def pair_from(X):
    return SnapshotPair(X[:, :-1], X[:, 1:], np.arange(X.shape[0]))


def test_geometric_series():
    p = finite_section(pair_from(0.5 ** np.arange(5)[None, :]))
    assert p.U[0, 0] == pytest.approx(0.5, abs=1e-14)


def test_constant_series():
    p = finite_section(pair_from(np.full((1, 6), 3.0)))
    assert p.U[0, 0] == pytest.approx(1.0, abs=1e-14)


def test_recovers_generating_matrix():
    p = finite_section(pair_from(series(A2, [1, 1], 10)))
    assert np.max(np.abs(p.U - A2)) < 1e-8
    assert p.lam == 0 and np.isfinite(p.condition_estimate)


def test_rank_deficient_falls_back_to_svd():
    # k = 2: one snapshot pair for a 3-dim group
    X = np.array([[1.0, 2.0], [0.5, 0.4], [-1.0, 1.0]])
    p = finite_section(pair_from(X))
    assert p.method == "svd" and p.rank == 1
    assert np.allclose(p.U @ X[:, 0], X[:, 1])


def test_ill_conditioned_gram_falls_back():
    # second coordinate is a copy of the first, so F F^T is singular
    x = 0.9 ** np.arange(20)
    p = finite_section(pair_from(np.vstack([x, x])))
    assert p.method == "svd" and "fallback" in p.note
    assert np.allclose(p.U @ np.array([1.0, 1.0]), [0.9, 0.9])


def test_minimum_norm_solution_matches_pinv():
    rng = np.random.default_rng(0)
    F, Fp = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    p = finite_section(SnapshotPair(F, Fp, np.arange(6)))
    assert np.allclose(p.U, Fp @ np.linalg.pinv(F), atol=1e-12)


def test_ridge():
    rng = np.random.default_rng(1)
    F, Fp = rng.standard_normal((3, 30)), rng.standard_normal((3, 30))
    p = finite_section(SnapshotPair(F, Fp, np.arange(3)), lam=0.5)
    expect = Fp @ F.T @ np.linalg.inv(F @ F.T + 0.5 * np.eye(3))
    assert p.method == "ridge" and np.allclose(p.U, expect)
    with pytest.raises(ConfigurationError):
        finite_section(SnapshotPair(F, Fp, np.arange(3)), lam=-1)


def test_construction_errors():
    with pytest.raises(ConstructionError):
        finite_section(SnapshotPair(np.zeros((2, 0)), np.zeros((2, 0)), np.arange(2)))
    bad = np.ones((2, 3))
    bad[0, 1] = np.nan
    with pytest.raises(ConstructionError):
        finite_section(SnapshotPair(bad, np.ones((2, 3)), np.arange(2)))


def test_spectral_reports():
    eye = KoopmanPatch(np.eye(3), np.arange(3))
    r = spectral_report(eye)
    assert r.available and r.max_modulus == pytest.approx(1.0) and r.on_unit_circle == 3
    half = spectral_report(KoopmanPatch(np.array([[0.5]]), np.array([0])))
    assert half.max_modulus == 0.5 and half.on_unit_circle == 0
    p = finite_section(pair_from(series(A2, [1, 1], 10)))
    assert np.allclose(np.sort(np.abs(p.spectrum)), [0.8, 0.9])
    assert spectral_report(p).on_unit_circle == 0


def test_large_patch_uses_estimate():
    U = np.diag(np.linspace(0.1, 0.95, 300))
    r = spectral_report(KoopmanPatch(U, np.arange(300)))
    assert r.estimated and r.on_unit_circle is None
    assert r.max_modulus == pytest.approx(0.95, rel=0.05)


def _model(patches, seed, T):
    return KoopmanModel(patches, np.asarray(seed, dtype=float), T)


def test_identity_patches_repeat_seed():
    seed = np.array([1.0, 2.0, 3.0])
    m = _model([KoopmanPatch(np.eye(2), [0, 1]), KoopmanPatch(np.eye(1), [2])], seed, 4)
    out = predict(m)
    assert out.shape == (4, 3) and np.all(out == seed)


def test_scalar_patch_powers():
    m = _model([KoopmanPatch([[0.5]], [0])], [1.0], 3)
    assert predict(m)[:, 0].tolist() == [0.5, 0.25, 0.125]


def test_keep_modes():
    m = _model([KoopmanPatch([[0.5]], [0])], [1.0], 5)
    assert predict(m, keep="last")[:, 0].tolist() == [0.5**5]
    assert predict(m, keep=[2, 4])[:, 0].tolist() == [0.25, 0.5**4]
    with pytest.raises(ConfigurationError):
        predict(m, keep=[6])


def test_linear_oracle_prediction():
    X = series(A2, [1, 1], 10)
    arch = Architecture((1, 2), has_bias=False)
    traj = Trajectory(arch, 0, 9, X.T.copy())
    model, pred = koopman_train(traj, build_partition(arch, "network"), 20)
    truth = series(A2, X[:, -1], 21)[:, 1:].T
    assert np.max(np.abs(pred - truth)) < 1e-6


def test_block_diagonal_oracle_with_node_partition():
    arch = Architecture((2, 3))  # 3 nodes of 3 params
    rng = np.random.default_rng(5)
    blocks = []
    for _ in range(3):
        B = rng.standard_normal((3, 3))
        blocks.append(0.97 * B / np.abs(np.linalg.eigvals(B)).max())
    A = np.zeros((9, 9))
    for i, B in enumerate(blocks):
        A[3 * i:3 * i + 3, 3 * i:3 * i + 3] = B
    X = series(A, rng.standard_normal(9), 40)
    traj = Trajectory(arch, 0, 39, X.T.copy())
    model, pred = koopman_train(traj, build_partition(arch, "node"), 20)
    truth = series(A, X[:, -1], 21)[:, 1:].T
    assert np.max(np.abs(pred - truth)) < 1e-6
    assert [p.m for p in model.patches] == [3, 3, 3]


def test_de_node_model_shapes():
    arch = Architecture.parse("1:10:10:2")
    rng = np.random.default_rng(0)
    traj = Trajectory(arch, 0, 30, np.cumsum(rng.standard_normal((31, 152)), axis=0))
    model = build_model(traj, build_partition(arch, "node"), 5)
    assert len(model.patches) == 22 and {p.m for p in model.patches} == {2, 11}
    assert model.per_step_flops == 10 * 4 + 12 * 121


def test_k2_trajectory_uses_svd():
    arch = Architecture((2, 2))
    rng = np.random.default_rng(0)
    traj = Trajectory(arch, 0, 1, rng.standard_normal((2, 6)))
    model = build_model(traj, build_partition(arch, "node"), 3)
    assert all(p.method == "svd" and p.rank == 1 for p in model.patches)


def test_partition_order_does_not_change_prediction():
    arch = Architecture.parse("3:4:2")
    rng = np.random.default_rng(2)
    traj = Trajectory(arch, 0, 40, np.cumsum(0.01 * rng.standard_normal((41, arch.n_params)), axis=0) + 1)
    model = build_model(traj, build_partition(arch, "node"), 30)
    shuffled = KoopmanModel([model.patches[i] for i in rng.permutation(len(model.patches))],
                            model.seed_state, 30)
    assert predict(model).tobytes() == predict(shuffled).tobytes()


def test_divergence_aborts_with_step():
    m = _model([KoopmanPatch([[10.0]], [0]), KoopmanPatch([[1.0]], [1])], [1.0, 1.0], 40)
    with pytest.raises(PredictionDiverged) as info:
        predict(m)
    assert info.value.step == 13 and info.value.index == 0
    assert len(info.value.partial) == 12


def test_model_rejects_bad_cover():
    with pytest.raises(ConfigurationError):
        _model([KoopmanPatch(np.eye(1), [0])], [1.0, 2.0], 3)
    with pytest.raises(ConfigurationError):
        _model([KoopmanPatch(np.eye(1), [0])], [1.0], 0)


def test_model_file_round_trip(tmp_path):
    arch = Architecture.parse("2:3:2")
    rng = np.random.default_rng(0)
    traj = Trajectory(arch, 0, 20, rng.standard_normal((21, arch.n_params)))
    model = build_model(traj, build_partition(arch, "node"), 7)
    save_model(tmp_path / "m.kmod", model)
    back = load_model(tmp_path / "m.kmod")
    assert back.T == 7 and back.scheme == "node"
    assert back.seed_state.tobytes() == model.seed_state.tobytes()
    for a, b in zip(model.patches, back.patches):
        assert a.U.tobytes() == b.U.tobytes() and np.array_equal(a.group, b.group)
    raw = (tmp_path / "m.kmod").read_bytes()
    (tmp_path / "cut.kmod").write_bytes(raw[:-5])
    with pytest.raises(IngestionError):
        load_model(tmp_path / "cut.kmod")


def test_construction_flops_recorded():
    X = series(A2, [1, 1], 10)
    p = finite_section(pair_from(X))
    assert p.flops > 0
