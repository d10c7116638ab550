import numpy as np
import pytest

from pialnn.diagnostics import model_grad_check
from pialnn.geometry import adjacency_from_faces, icosahedron, icosphere, laplacian_smooth, vertex_normals
from pialnn.model import (
    DeformationModel,
    ModelConfig,
    block_forward,
    load_model,
    model_backward,
    model_forward,
    mse_loss,
    normalization_affine,
    save_model,
)
from pialnn.nn import grad_check
from pialnn.volume import Volume, build_pyramid

SMALL = dict(point_widths=(8, 8), conv_channels=6, local_width=8, head_widths=(8, 6))


@pytest.fixture(scope="module")
def scene():
    rng = np.random.default_rng(0)
    x, y, z = np.meshgrid(*[np.arange(16.0)] * 3, indexing="ij")
    vol = Volume(np.tanh(8.0 - np.sqrt((x - 7.5) ** 2 + (y - 7.5) ** 2 + (z - 7.5) ** 2)) + 0.1 * np.sin(x))
    mesh = icosahedron()
    v0 = 7.5 + 4.0 * mesh.vertices + 0.2 * rng.normal(size=(12, 3))
    return vol, build_pyramid(vol), mesh.faces, adjacency_from_faces(mesh.faces, 12), v0


def make_model(vol, seed=1, **kw):
    cfg = ModelConfig(**{"K": 3, "zero_init_head": False, **SMALL, **kw})
    return DeformationModel.create(cfg, seed, normalization_affine(vol))


def test_layout_follows_design_widths():
    m = DeformationModel.create(ModelConfig(), 0)
    P = m.params
    assert P["block0.point0.W"].shape == (6, 128)
    assert P["block0.point1.W"].shape == (128, 128)
    assert P["block0.conv.W"].shape == (64, 3, 5, 5, 5)
    assert P["block0.local0.W"].shape == (64, 128)
    assert P["block0.head0.W"].shape == (256, 128)
    assert P["block0.head1.W"].shape == (128, 64)
    assert P["block0.head2.W"].shape == (64, 3)
    assert np.all(P["block2.head2.W"] == 0)
    assert len([k for k in P if k.startswith("block")]) == 3 * 14


def test_point_sampling_and_single_scale_shapes():
    m = DeformationModel.create(ModelConfig(sampling="point"), 0)
    assert m.params["block0.conv.W"].shape == (64, 3, 1, 1, 1)
    m = DeformationModel.create(ModelConfig(scales=1), 0)
    assert m.params["block0.conv.W"].shape == (64, 1, 5, 5, 5)


def test_zero_parameters_give_zero_displacement(scene):
    vol, pyr, faces, adj, v0 = scene
    m = make_model(vol)
    m.zero_params()
    dv = block_forward(v0, vertex_normals(v0, faces), pyr, m, 0)
    np.testing.assert_array_equal(dv, 0.0)


def test_block_is_per_vertex_equivariant(scene):
    vol, pyr, faces, adj, v0 = scene
    m = make_model(vol)
    n = vertex_normals(v0, faces)
    rng = np.random.default_rng(2)
    for _ in range(5):
        perm = rng.permutation(12)
        a = block_forward(v0, n, pyr, m, 1)[perm]
        b = block_forward(v0[perm], n[perm], pyr, m, 1)
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_block_shape_mismatch(scene):
    vol, pyr, faces, adj, v0 = scene
    with pytest.raises(ValueError):
        block_forward(v0, np.zeros((11, 3)), pyr, make_model(vol), 0)


def test_zero_model_with_and_without_smoothing(scene):
    vol, pyr, faces, adj, v0 = scene
    m = make_model(vol, lam=0.0)
    m.zero_params()
    np.testing.assert_array_equal(model_forward(v0, faces, adj, pyr, m).vertices, v0)
    m1 = make_model(vol, lam=1.0)
    m1.zero_params()
    np.testing.assert_allclose(model_forward(v0, faces, adj, pyr, m1).vertices, laplacian_smooth(v0, adj, 1.0), atol=1e-12)


def test_model_forward_equals_manual_chain(scene):
    vol, pyr, faces, adj, v0 = scene
    m = make_model(vol, lam=0.6)
    v = v0.copy()
    for l in range(3):
        v = v + block_forward(v, vertex_normals(v, faces), pyr, m, l)
    res = model_forward(v0, faces, adj, pyr, m)
    assert res.vertices.tobytes() == laplacian_smooth(v, adj, 0.6).tobytes()
    assert res.intermediates[-1].tobytes() == v.tobytes()
    assert len(res.intermediates) == 3


def test_mse_loss_examples():
    assert mse_loss(np.ones((4, 3)), np.ones((4, 3)))[0] == 0.0
    loss, g = mse_loss(np.array([[1.0, 0, 0]]), np.zeros((1, 3)))
    assert loss == pytest.approx(1 / 3)
    np.testing.assert_allclose(g, [[2 / 3, 0, 0]])
    with pytest.raises(ValueError):
        mse_loss(np.zeros((3, 3)), np.zeros((4, 3)))


def test_mse_gradient_finite_differences():
    rng = np.random.default_rng(0)
    t = rng.normal(size=(7, 3))

    def f(a):
        return mse_loss(a["v"], t)[0], {"v": mse_loss(a["v"], t)[1]}

    assert grad_check(f, {"v": rng.normal(size=(7, 3))}) < 1e-8


def _gradient_fn(m, pyr, faces, adj, target, normals=None):
    def f(arrays):
        for k in m.params:
            m.params.values[k][...] = arrays[k]
        m.params.zero_grad()
        res = model_forward(arrays["v0"], faces, adj, pyr, m, normals=normals)
        loss, g = mse_loss(res.vertices, target)
        gv = model_backward(g, res.tape, pyr, m)
        out = {k: m.params.grads[k].copy() for k in m.params}
        out["v0"] = gv
        return loss, out

    return f


@pytest.mark.parametrize("seed", [0, 1])
def test_small_model_gradients_all_coordinates(seed):
    res = model_grad_check(config=ModelConfig(**SMALL), max_coords=None, seed=seed)
    assert res.n_params == 2661
    assert res.max_error < 1e-4, res


def test_single_block_gradient(scene):
    vol, pyr, faces, adj, v0 = scene
    m = make_model(vol, L=1, lam=0.0)
    target = v0 + 1.0
    frozen = [vertex_normals(v0, faces)]
    arrays = {k: m.params[k].copy() for k in m.params}
    arrays["v0"] = v0.copy()
    assert grad_check(_gradient_fn(m, pyr, faces, adj, target, frozen), arrays) < 1e-4


def test_full_width_model_gradient_check():
    res = model_grad_check(K=3, L=3, n_vertices=12, dims=16, max_coords=16)
    assert res.n_vertices == 12
    assert res.max_error < 1e-4, res


def test_backward_linearity_and_zero(scene):
    vol, pyr, faces, adj, v0 = scene
    m = make_model(vol)
    target = v0 + 0.5
    res = model_forward(v0, faces, adj, pyr, m)
    _, g = mse_loss(res.vertices, target)
    m.params.zero_grad()
    model_backward(np.zeros_like(g), res.tape, pyr, m)
    assert all(np.all(m.params.grads[k] == 0) for k in m.params)
    res = model_forward(v0, faces, adj, pyr, m)
    model_backward(g, res.tape, pyr, m)
    g1 = {k: m.params.grads[k].copy() for k in m.params}
    m.params.zero_grad()
    res = model_forward(v0, faces, adj, pyr, m)
    model_backward(2 * g, res.tape, pyr, m)
    for k in m.params:
        np.testing.assert_allclose(m.params.grads[k], 2 * g1[k], rtol=1e-12, atol=1e-300)


def test_backward_needs_tape(scene):
    vol, pyr, faces, adj, v0 = scene
    m = make_model(vol)
    res = model_forward(v0, faces, adj, pyr, m)
    model_backward(np.zeros_like(v0), res.tape, pyr, m)
    with pytest.raises(RuntimeError):
        model_backward(np.zeros_like(v0), res.tape, pyr, m)
    with pytest.raises(RuntimeError):
        model_backward(np.zeros_like(v0), None, pyr, m)


def test_loss_reads_only_final_mesh(scene):
    vol, pyr, faces, adj, v0 = scene
    m = make_model(vol)
    target = v0 + 0.3
    res = model_forward(v0, faces, adj, pyr, m)
    loss = mse_loss(res.vertices, target)[0]
    res.intermediates[0][:] = 1e6
    res.intermediates[1][:] = -1e6
    assert mse_loss(res.vertices, target)[0] == loss


def test_small_step_decreases_loss(scene):
    vol, pyr, faces, adj, v0 = scene
    m = make_model(vol, lam=0.5)
    target = v0 + 0.7 * vertex_normals(v0, faces)
    res = model_forward(v0, faces, adj, pyr, m)
    loss0, g = mse_loss(res.vertices, target)
    m.params.zero_grad()
    model_backward(g, res.tape, pyr, m)
    base = {k: m.params[k].copy() for k in m.params}
    grads = {k: m.params.grads[k].copy() for k in m.params}
    decreased = []
    for lr in (1e-2, 1e-3, 1e-4):
        for k in m.params:
            m.params.values[k][...] = base[k] - lr * grads[k]
        decreased.append(mse_loss(model_forward(v0, faces, adj, pyr, m, record=False).vertices, target)[0] < loss0)
    assert any(decreased) and decreased[-1]


def test_non_finite_displacement_raises(scene):
    from pialnn.nn import NumericalError

    vol, pyr, faces, adj, v0 = scene
    m = make_model(vol)
    m.params.values["block0.head2.b"][:] = np.inf
    with pytest.raises(NumericalError):
        model_forward(v0, faces, adj, pyr, m)


def test_checkpoint_round_trip(tmp_path, scene):
    vol, pyr, faces, adj, v0 = scene
    m = make_model(vol, lam=0.4, sampling="point")
    save_model(tmp_path / "m.json", m)
    back, man, extra = load_model(tmp_path / "m.json")
    assert back.config == m.config
    assert man["normal_gradient"] == "truncated" and man["pyramid_scales"] == 3
    np.testing.assert_array_equal(back.norm_affine, m.norm_affine)
    a = model_forward(v0, faces, adj, pyr, m, record=False).vertices
    b = model_forward(v0, faces, adj, pyr, back, record=False).vertices
    assert a.tobytes() == b.tobytes()
    assert extra == {}


def test_normalization_maps_volume_to_unit_cube():
    vol = Volume(np.zeros((17, 33, 9)))
    N = normalization_affine(vol)
    corners = np.array([[0, 0, 0], [16, 32, 8]], dtype=float)
    out = corners @ N[:3, :3].T + N[:3, 3]
    np.testing.assert_allclose(out, [[-1, -1, -1], [1, 1, 1]])


def test_forward_deterministic(scene):
    vol, pyr, faces, adj, v0 = scene
    m = make_model(vol)
    a = model_forward(v0, faces, adj, pyr, m, record=False).vertices
    b = model_forward(v0.copy(), faces, adj, pyr, m, record=False).vertices
    assert a.tobytes() == b.tobytes()


def test_icosphere_level_one_runs():
    m = DeformationModel.create(ModelConfig(K=3, **SMALL), 0)
    mesh = icosphere(1)
    vol = Volume(np.ones((16, 16, 16)))
    v = 7.5 + 5 * mesh.vertices
    out = model_forward(v, mesh.faces, adjacency_from_faces(mesh.faces, 42), build_pyramid(vol), m, record=False)
    assert out.vertices.shape == (42, 3)
