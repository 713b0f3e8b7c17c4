import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from auxfas import face_model as fm
from auxfas.face_model import FaceBasis, Pose, ShapeParams


@pytest.fixture(scope="module")
def basis():
    return fm.procedural_basis(30, n_id=4, n_exp=3, seed=1)


def test_zero_params_give_mean(basis):
    assert np.array_equal(fm.synthesize_shape(basis, ShapeParams.zeros(basis)), basis.mean)


def test_single_identity_basis(basis):
    a = np.zeros(basis.n_id)
    a[0] = 1.0
    out = fm.synthesize_shape(basis, ShapeParams(a, np.zeros(basis.n_exp)))
    assert np.allclose(out, basis.mean + basis.id_bases[0], atol=1e-15)


def test_synthesis_matches_loop_sum(basis):
    rng = np.random.default_rng(0)
    a_id, a_exp = rng.normal(size=basis.n_id), rng.normal(size=basis.n_exp)
    ref = basis.mean.copy()
    for i in range(basis.n_id):
        ref = ref + a_id[i] * basis.id_bases[i]
    for i in range(basis.n_exp):
        ref = ref + a_exp[i] * basis.exp_bases[i]
    assert np.max(np.abs(fm.synthesize_shape(basis, ShapeParams(a_id, a_exp)) - ref)) < 1e-12


def test_synthesis_length_mismatch(basis):
    with pytest.raises(ValueError):
        fm.synthesize_shape(basis, ShapeParams(np.zeros(basis.n_id + 1), np.zeros(basis.n_exp)))


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.integers(0, 1000))
def test_synthesis_is_linear(a, seed):
    b = fm.procedural_basis(12, n_id=3, n_exp=2, seed=2)
    rng = np.random.default_rng(seed)
    p = ShapeParams(rng.normal(size=3), rng.normal(size=2))
    scaled = ShapeParams(a * p.alpha_id, a * p.alpha_exp)
    lhs = fm.synthesize_shape(b, scaled) - b.mean
    rhs = a * (fm.synthesize_shape(b, p) - b.mean)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_pose_examples():
    pts = np.random.default_rng(1).normal(size=(3, 5))
    assert np.array_equal(fm.pose_transform(pts, Pose.identity()), pts)
    out = fm.pose_transform(np.zeros((3, 1)), Pose(2.0, np.eye(3), [1, 0, 0]))
    assert np.allclose(out[:, 0], [1, 0, 0])
    rz = fm.rotation(roll=np.pi / 2)
    out = fm.pose_transform(np.array([[1.0], [0.0], [0.0]]), Pose(1.0, rz, np.zeros(3)))
    assert np.allclose(out[:, 0], [0, 1, 0], atol=1e-15)


def test_pose_rejects_non_rotation():
    with pytest.raises(fm.PoseError):
        fm.pose_transform(np.zeros((3, 1)), Pose(1.0, np.diag([1.0, 1.0, 2.0]), np.zeros(3)))
    with pytest.raises(fm.PoseError):
        fm.pose_transform(np.zeros((3, 1)), Pose(1.0, np.diag([1.0, 1.0, -1.0]), np.zeros(3)))
    with pytest.raises(fm.PoseError):
        fm.pose_transform(np.zeros((3, 1)), Pose(0.0, np.eye(3), np.zeros(3)))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 5), st.floats(-3, 3), st.floats(-1.5, 1.5), st.floats(-3, 3))
def test_pose_preserves_distances_up_to_scale(s, yaw, pitch, roll):
    pts = np.random.default_rng(3).normal(size=(3, 6))
    out = fm.pose_transform(pts, Pose(s, fm.rotation(yaw, pitch, roll), [4.0, -2.0, 1.0]))
    d_in = np.linalg.norm(pts[:, :, None] - pts[:, None, :], axis=0)
    d_out = np.linalg.norm(out[:, :, None] - out[:, None, :], axis=0)
    assert np.allclose(d_out, s * d_in, atol=1e-9)


@pytest.mark.parametrize("z, expected", [([5, 7, 9], [0, 0.5, 1]), ([0, 1], [0, 1])])
def test_normalize_depth(z, expected):
    shape = np.zeros((3, len(z)))
    shape[2] = z
    assert np.allclose(fm.normalize_depth(shape)[2], expected)


def test_normalize_fixed_point_and_degenerate():
    shape = np.array([[0.0, 1.0, 2.0], [0.0, 0.0, 0.0], [0.0, 0.25, 1.0]])
    assert np.array_equal(fm.normalize_depth(shape), shape)
    with pytest.raises(fm.DegenerateShapeError):
        fm.normalize_depth(np.ones((3, 4)))


def test_zbuffer_nearest_wins_and_background():
    shape = np.array([[10.1, 10.9], [20.2, 20.7], [0.3, 0.8]])
    d = fm.render_depth(shape, 64, 64)
    assert d[10, 5] == 0.8
    mask = np.ones_like(d, dtype=bool)
    mask[10, 5] = False
    assert np.all(d[mask] == 0)


def test_render_outside_image_warns():
    shape = np.array([[-50.0, 500.0], [10.0, 10.0], [0.0, 1.0]])
    with pytest.warns(RuntimeWarning):
        d = fm.render_depth(shape, 64, 64)
    assert np.all(d == 0)


def _hemisphere(radius=20.0, center=32.0, n=400):
    g = np.linspace(center - radius, center + radius, n)
    x, y = np.meshgrid(g, g)
    r2 = (x - center) ** 2 + (y - center) ** 2
    keep = r2 <= radius ** 2
    z = np.sqrt(radius ** 2 - r2[keep])
    rim = np.linspace(0, 2 * np.pi, 200, endpoint=False)
    xs = np.r_[x[keep], center + radius * np.cos(rim) * 0.999]
    ys = np.r_[y[keep], center + radius * np.sin(rim) * 0.999]
    zs = np.r_[z, np.zeros(rim.size)]
    return np.stack([xs, ys, zs])


def test_hemisphere_matches_analytic_depth():
    radius, center = 20.0, 32.0
    d = fm.render_depth(fm.normalize_depth(_hemisphere(radius, center)), 64, 64)
    c = (np.arange(32) + 0.5) * 2.0
    px, py = np.meshgrid(c, c)
    analytic = np.sqrt(np.clip(radius ** 2 - (px - center) ** 2 - (py - center) ** 2, 0, None)) / radius
    assert np.abs(d - analytic).mean() < 0.05


def test_depth_map_invariants_on_posed_faces(basis):
    rng = np.random.default_rng(4)
    for _ in range(10):
        p = ShapeParams(rng.normal(size=basis.n_id), rng.normal(size=basis.n_exp))
        pose = Pose(25.0, fm.rotation(*rng.uniform(-0.4, 0.4, 3)), [32 + rng.normal(), 32, 0])
        d = fm.ground_truth_depth(basis, p, pose, 64, 64)
        assert d.shape == (32, 32) and d.min() >= 0 and d.max() == 1.0


def test_translation_by_one_cell_shifts_map(basis):
    posed = fm.normalize_depth(fm.pose_transform(basis.mean, fm.canonical_pose(64, 64)))
    d0 = fm.render_depth(posed, 64, 64)
    shifted = posed.copy()
    shifted[0] += 2.0
    d1 = fm.render_depth(shifted, 64, 64)
    assert np.array_equal(d1[1:-1, 2:-1], d0[1:-1, 1:-2])


def _single_vertex_basis(means):
    mean = np.array(means, dtype=float).T
    q = mean.shape[1]
    return FaceBasis(mean, np.zeros((1, 3, q)), np.zeros((1, 3, q)))


def test_vertex_map_single_vertex():
    vm = fm.build_vertex_index_map(_single_vertex_basis([[-1.2, -1.2, 0.0]]))
    assert vm.m[0, 0] == 0 and vm.K == 1
    assert np.all(vm.m.reshape(-1)[1:] == fm.NONE)


def test_vertex_map_two_vertices_nearest_wins():
    vm = fm.build_vertex_index_map(_single_vertex_basis([[-1.2, -1.2, 0.1], [-1.19, -1.21, 0.5],
                                                          [0.0, 0.0, -3.0]]))
    assert vm.m[0, 0] == 1 and vm.K == 2


def test_vertex_map_count_matches_projection(basis):
    vm = fm.build_vertex_index_map(basis)
    posed = fm.pose_transform(basis.mean, fm.canonical_pose(32, 32))
    cells = {(int(np.floor(y)), int(np.floor(x))) for x, y in zip(posed[0], posed[1])
             if 0 <= x < 32 and 0 <= y < 32}
    assert vm.K == len(cells)
    assert np.all(vm.m[vm.valid] < basis.n_vertices)


def test_procedural_basis_is_consistent_across_densities():
    coarse, dense = fm.procedural_basis(21, seed=3), fm.procedural_basis(41, seed=3)
    u, v = fm.face_grid(21)
    ud, vd = fm.face_grid(41)
    # every coarse grid point also lies on the dense grid
    lookup = {(round(a, 9), round(b, 9)): i for i, (a, b) in enumerate(zip(ud, vd))}
    idx = [lookup[(round(a, 9), round(b, 9))] for a, b in zip(u, v)]
    assert np.allclose(coarse.mean, dense.mean[:, idx])
    assert np.allclose(coarse.id_bases, dense.id_bases[:, :, idx])
    assert coarse.n_vertices > 0 and len(coarse.forehead) > 0
