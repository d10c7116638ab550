import numpy as np
import pytest

from pialnn.geometry import TriMesh, adjacency_from_faces, laplacian_smooth
from pialnn.model import DeformationModel, ModelConfig, load_model, normalization_affine, save_model
from pialnn.nn import CheckpointError, NumericalError, ParamStore
from pialnn.synthetic import SynthConfig, generate_case
from pialnn.training import (
    AdamState,
    Case,
    ConnectivityError,
    TrainConfig,
    adam_step,
    predict,
    read_loss_log,
    train,
    write_loss_log,
)

TINY = SynthConfig(level=1, radius=8.0, white_amp=0.5, disp_min=1.0, disp_amp=2.0, dims=32, lipschitz=3.0)


def tiny_case(i=0):
    white, pial, vol = generate_case(TINY, i)
    return Case(f"case_{i:04d}", white, pial, vol)


def fast_cfg(**kw):
    return TrainConfig(**{"K": 3, "epochs": 3, "lr": 1e-3, **kw})


def test_config_validation():
    for bad in ({"lr": 0}, {"epochs": 0}, {"K": 4}, {"scales": 2}, {"sampling": "x"}, {"batch_size": 2}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1.0})
    cfg = TrainConfig(lr=3e-4, K=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def _store(rng):
    s = ParamStore()
    s.add("a", rng.normal(size=(4, 3)))
    s.add("b", rng.normal(size=5))
    return s


def test_adam_zero_gradient_keeps_parameters():
    s = _store(np.random.default_rng(0))
    before = {k: s[k].copy() for k in s}
    st = AdamState.zeros(s)
    adam_step(s, st, TrainConfig())
    assert st.step == 1
    for k in s:
        np.testing.assert_array_equal(s[k], before[k])


def test_adam_first_step_is_signed_learning_rate():
    rng = np.random.default_rng(1)
    s = _store(rng)
    before = {k: s[k].copy() for k in s}
    g = {k: rng.normal(size=s[k].shape) for k in s}
    for k in s:
        s.grads[k][...] = g[k]
    cfg = TrainConfig(lr=1e-3)
    adam_step(s, AdamState.zeros(s), cfg)
    for k in s:
        expected = -cfg.lr * g[k] / (np.abs(g[k]) + cfg.eps)
        np.testing.assert_allclose(s[k] - before[k], expected, rtol=1e-9, atol=1e-15)
        step = np.abs(s[k] - before[k])
        assert np.all(step <= cfg.lr * (1 + 1e-12))
        assert np.all(cfg.lr - step <= cfg.lr * cfg.eps / np.abs(g[k]) + 1e-15)
        assert np.all(np.sign(before[k] - s[k]) == np.sign(g[k]))
        assert np.all(s.grads[k] == 0)


def test_adam_rejects_non_finite_gradient():
    s = _store(np.random.default_rng(2))
    s.grads["b"][1] = np.nan
    with pytest.raises(NumericalError, match="parameter b"):
        adam_step(s, AdamState.zeros(s), TrainConfig())


def test_ten_steps_are_bit_identical():
    data = [tiny_case(0)]
    cfg = fast_cfg(epochs=10)
    a, b = train(data, cfg), train(data, cfg)
    assert a.adam.step == 10
    for k in a.model.params:
        assert a.model.params[k].tobytes() == b.model.params[k].tobytes()
    assert a.log == b.log


def test_identity_targets_are_already_optimal():
    # smoothing would move the vertices, so it is switched off here
    data = []
    for i in range(2):
        c = tiny_case(i)
        data.append(Case(c.case_id, c.white, TriMesh(c.white.vertices.copy(), c.white.faces), c.volume))
    res = train(data, fast_cfg(epochs=1, lam=0.0))
    assert all(loss < 1e-6 for _, _, loss in res.log)


def test_training_reduces_loss():
    res = train([tiny_case(0)], fast_cfg(epochs=30, lr=1e-3))
    losses = [r[2] for r in res.log]
    assert losses[-1] < 0.5 * losses[0]


def test_resume_matches_uninterrupted(tmp_path):
    data = [tiny_case(0), tiny_case(1)]
    cfg = fast_cfg(epochs=4, checkpoint_interval=2)
    ref = train(data, cfg, tmp_path / "ref")
    train(data, cfg, tmp_path / "run", max_epochs=2)
    assert (tmp_path / "run" / "checkpoints" / "epoch_0002.json").exists()
    assert not (tmp_path / "run" / "checkpoints" / "epoch_0004.json").exists()
    res = train(data, cfg, tmp_path / "run", resume=tmp_path / "run" / "checkpoints" / "epoch_0002.json")
    for k in ref.model.params:
        assert res.model.params[k].tobytes() == ref.model.params[k].tobytes()
    assert res.adam.step == ref.adam.step == 8
    assert read_loss_log(tmp_path / "run" / "loss.csv") == read_loss_log(tmp_path / "ref" / "loss.csv")
    assert (tmp_path / "run" / "model.json").read_bytes() == (tmp_path / "ref" / "model.json").read_bytes()
    assert (tmp_path / "run" / "model.bin").read_bytes() == (tmp_path / "ref" / "model.bin").read_bytes()


def test_resume_rejects_other_architecture(tmp_path):
    data = [tiny_case(0)]
    train(data, fast_cfg(epochs=1), tmp_path)
    with pytest.raises(CheckpointError):
        train(data, fast_cfg(epochs=2, K=5), resume=tmp_path / "model.json")


def test_loss_log_layout(tmp_path):
    data = [tiny_case(0), tiny_case(1), tiny_case(2)]
    res = train(data, fast_cfg(epochs=2), tmp_path)
    text = (tmp_path / "loss.csv").read_text().splitlines()
    assert text[0] == "epoch,case,loss"
    assert len(text) == 1 + 6
    rows = read_loss_log(tmp_path / "loss.csv")
    assert [r[0] for r in rows] == [1, 1, 1, 2, 2, 2]
    assert sorted(r[1] for r in rows[:3]) == ["case_0000", "case_0001", "case_0002"]
    assert rows == [(e, c, float(x)) for e, c, x in res.log]


def test_loss_log_round_trip_is_exact(tmp_path):
    rows = [(1, "a", 0.1 + 0.2), (2, "b", 1e-300)]
    write_loss_log(tmp_path / "l.csv", rows)
    assert read_loss_log(tmp_path / "l.csv") == rows


def test_connectivity_mismatch_rejected():
    c = tiny_case(0)
    faces = c.pial.faces.copy()
    faces[0] = faces[0][[0, 2, 1]]
    bad = Case("bad", c.white, TriMesh(c.pial.vertices, faces), c.volume)
    with pytest.raises(ConnectivityError, match="bad"):
        train([c, bad], fast_cfg(epochs=1))
    with pytest.raises(ValueError):
        train([], fast_cfg())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    with pytest.raises(NumericalError):
        train([tiny_case(0)], fast_cfg(epochs=3, lr=1e12))


def test_predict_zero_model_identity(tmp_path):
    c = tiny_case(3)
    cfg = ModelConfig(K=3, lam=0.0)
    m = DeformationModel.create(cfg, 0, normalization_affine(c.volume))
    m.zero_params()
    out = predict(m, c.white, c.volume, extra_smooth=0)
    np.testing.assert_array_equal(out.vertices, c.white.vertices)
    np.testing.assert_array_equal(out.faces, c.white.faces)
    save_model(tmp_path / "z.json", m)
    np.testing.assert_array_equal(predict(tmp_path / "z.json", c.white, c.volume).vertices, c.white.vertices)
    adj = adjacency_from_faces(c.white.faces, c.white.n_vertices)
    twice = predict(m, c.white, c.volume, extra_smooth=2).vertices
    np.testing.assert_allclose(twice, laplacian_smooth(laplacian_smooth(c.white.vertices, adj, 1.0), adj, 1.0))
    with pytest.raises(ValueError):
        predict(m, c.white, c.volume, extra_smooth=-1)


def test_predict_preserves_connectivity(tmp_path):
    data = [tiny_case(0)]
    res = train(data, fast_cfg(epochs=2), tmp_path)
    model, man, _ = load_model(tmp_path / "model.json")
    assert man["epoch"] == 2 and man["train_config"]["K"] == 3
    c = tiny_case(7)
    out = predict(model, c.white, c.volume, extra_smooth=1)
    assert out.faces.tobytes() == c.white.faces.tobytes()
    assert np.array_equal(out.edges(), c.white.edges())
    assert not np.array_equal(out.vertices, c.white.vertices)
    same = predict(res.model, c.white, c.volume, extra_smooth=1)
    assert same.vertices.tobytes() == out.vertices.tobytes()


@pytest.mark.slow
def test_single_reference_case_converges():
    white, pial, vol = generate_case(SynthConfig(), 0)
    res = train([Case("case_0000", white, pial, vol)], TrainConfig())
    losses = [r[2] for r in res.log]
    assert len(losses) == 200
    assert losses[-1] < 0.1 * losses[0], (losses[0], losses[-1])
