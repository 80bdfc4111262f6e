import numpy as np
import pytest

from conftest import assert_grad_close, central_diff, make_camera, make_cloud, oracle_render
from wxsplat import gaussians as ga


def _single(mu, sigma, opacity, color, quat=(1.0, 0, 0, 0)):
    return ga.GaussianCloud(
        np.array([mu], dtype=float),
        np.log(np.full((1, 3), sigma)),
        np.array([quat], dtype=float),
        np.array([ga.inverse_sigmoid(opacity)]),
        np.array([color], dtype=float),
    )


# ---------------------------------------------------------------------------
# Quaternions
# ---------------------------------------------------------------------------

def test_quat_to_rot_orthonormal(rng):
    q = ga.quat_normalize(rng.normal(size=(20, 4)))
    r = ga.quat_to_rot(q)
    eye = np.einsum("nij,nkj->nik", r, r)
    np.testing.assert_allclose(eye, np.broadcast_to(np.eye(3), (20, 3, 3)), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(r), 1.0, atol=1e-12)


def test_rot_quat_roundtrip(rng):
    q = ga.quat_normalize(rng.normal(size=(10, 4)))
    for i in range(10):
        r = ga.quat_to_rot(q[i : i + 1])[0]
        q2 = ga.rot_to_quat(r)
        r2 = ga.quat_to_rot(q2[None, :])[0]
        np.testing.assert_allclose(r2, r, atol=1e-12)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def test_project_on_axis_center():
    cam = ga.Camera(np.zeros(3), np.eye(3), 100.0, 32.0, 32.0, 64, 64)
    cloud = _single((0.0, 0.0, 1.0), 0.01, 0.5, (1, 0, 0))
    frag = ga.project(cloud, cam)
    assert len(frag) == 1
    np.testing.assert_allclose(frag.center[0], [32.0, 32.0], atol=1e-12)
    assert frag.depth[0] == pytest.approx(1.0)


def test_project_isotropic_radius_closed_form():
    cam = ga.Camera(np.zeros(3), np.eye(3), 100.0, 32.0, 32.0, 64, 64)
    sigma, z = 0.05, 2.0
    cloud = _single((0.0, 0.0, z), sigma, 0.5, (1, 0, 0))
    frag = ga.project(cloud, cam)
    expect = 3.0 * np.sqrt((100.0 * sigma / z) ** 2 + ga.COV2D_FLOOR)
    assert frag.radius[0] == pytest.approx(expect, rel=1e-12)


def test_project_culls_behind_camera():
    cam = ga.Camera(np.zeros(3), np.eye(3), 100.0, 32.0, 32.0, 64, 64)
    cloud = _single((0.0, 0.0, -1.0), 0.05, 0.5, (1, 0, 0))
    assert len(ga.project(cloud, cam)) == 0


def test_project_culls_off_image():
    cam = ga.Camera(np.zeros(3), np.eye(3), 100.0, 32.0, 32.0, 64, 64)
    cloud = _single((50.0, 0.0, 1.0), 0.01, 0.5, (1, 0, 0))
    assert len(ga.project(cloud, cam)) == 0


def test_project_rejects_non_finite():
    cam = ga.Camera(np.zeros(3), np.eye(3), 100.0, 32.0, 32.0, 64, 64)
    cloud = _single((np.nan, 0.0, 1.0), 0.05, 0.5, (1, 0, 0))
    with pytest.raises(RuntimeError):
        ga.project(cloud, cam)


# ---------------------------------------------------------------------------
# Rendering: hand-blend examples
# ---------------------------------------------------------------------------

def _pixel_cam():
    # 1x1 image; its single pixel center sits exactly on the optical axis.
    return ga.Camera(np.zeros(3), np.eye(3), 10.0, 0.5, 0.5, 1, 1)


def test_render_single_fragment_half_alpha():
    cam = _pixel_cam()
    cloud = _single((0.0, 0.0, 1.0), 0.5, 0.5, (1.0, 0.0, 0.0))
    img, alpha, _ = ga.render(cloud, cam)
    assert img[0, 0, 0] == pytest.approx(0.5, abs=1e-12)
    assert img[0, 0, 1] == 0.0
    assert alpha[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_render_two_fragment_blend():
    cam = _pixel_cam()
    cloud = ga.GaussianCloud(
        np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]]),
        np.log(np.full((2, 3), 1.0)),
        np.array([[1.0, 0, 0, 0], [1.0, 0, 0, 0]]),
        ga.inverse_sigmoid(np.array([0.5, 0.5])),
        np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
    )
    img, _, _ = ga.render(cloud, cam)
    assert img[0, 0, 0] == pytest.approx(0.5, abs=1e-12)
    assert img[0, 0, 1] == pytest.approx(0.25, abs=1e-12)


def test_render_matches_naive_oracle_exactly():
    cloud = make_cloud(n=20, seed=42)
    cam = make_camera(16, 16)
    img, alpha, depth = ga.render(cloud, cam)
    o_img, o_alpha, o_depth = oracle_render(cloud, cam)
    assert np.array_equal(img, o_img)
    assert np.array_equal(alpha, o_alpha)
    assert np.array_equal(depth, o_depth)


def test_render_storage_order_invariant(rng):
    cloud = make_cloud(n=15, seed=3)
    cam = make_camera(16, 16)
    img1, _, _ = ga.render(cloud, cam)
    perm = rng.permutation(15)
    cloud2 = ga.GaussianCloud(
        cloud.position[perm], cloud.scale[perm], cloud.rotation[perm],
        cloud.opacity[perm], cloud.color[perm],
    )
    img2, _, _ = ga.render(cloud2, cam)
    assert np.array_equal(img1, img2)


def test_render_alpha_in_unit_interval():
    cloud = make_cloud(n=30, seed=9, opacity=(0.7, 0.98))
    cam = make_camera(16, 16)
    _, alpha, _ = ga.render(cloud, cam)
    assert np.all(alpha >= 0.0) and np.all(alpha <= 1.0)


def test_render_empty_scene_rejected():
    cam = make_camera(4, 4)
    empty = ga.GaussianCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        ga.render(empty, cam)


# ---------------------------------------------------------------------------
# Rendering: gradients
# ---------------------------------------------------------------------------

def _render_loss(cloud, cam, adj_img, adj_alpha=None, adj_depth=None):
    res = ga.render_forward(cloud, cam)
    total = float(np.sum(res.image * adj_img))
    if adj_alpha is not None:
        total += float(np.sum(res.alpha_map * adj_alpha))
    if adj_depth is not None:
        total += float(np.sum(res.depth_map * adj_depth))
    return total


def test_backward_zero_adjoint_gives_zero_grads():
    cloud = make_cloud(n=5, seed=1)
    cam = make_camera(12, 12)
    res = ga.render_forward(cloud, cam)
    grads, screen = ga.render_backward(res, np.zeros((12, 12, 3)))
    for g in grads.values():
        assert not np.any(g)
    assert not np.any(screen)


def test_backward_without_forward_raises():
    with pytest.raises(RuntimeError):
        ga.render_backward(None, np.zeros((4, 4, 3)))


@pytest.mark.parametrize("seed", [0, 7])
def test_backward_matches_finite_differences(seed):
    cloud = make_cloud(n=6, seed=seed, opacity=(0.3, 0.7))
    cam = make_camera(16, 16)
    rng = np.random.default_rng(seed + 100)
    adj = rng.standard_normal((16, 16, 3))
    res = ga.render_forward(cloud, cam)
    grads, _ = ga.render_backward(res, adj)
    fn = lambda: _render_loss(cloud, cam, adj)
    for name, arr in cloud.params().items():
        num = central_diff(fn, arr)
        assert_grad_close(grads[name], num, what=f"render d{name}")


def test_backward_alpha_and_depth_adjoints_match_fd():
    cloud = make_cloud(n=5, seed=11, opacity=(0.6, 0.9))
    cam = make_camera(12, 12)
    rng = np.random.default_rng(5)
    adj_img = rng.standard_normal((12, 12, 3)) * 0.1
    res = ga.render_forward(cloud, cam)
    # Depth adjoint only where coverage is comfortably above the fallback
    # threshold, away from the switch.
    adj_alpha = rng.standard_normal((12, 12)) * (res.alpha_map > 0.05)
    adj_depth = rng.standard_normal((12, 12)) * 0.1 * (res.alpha_map > 0.05)
    grads, _ = ga.render_backward(res, adj_img, adj_alpha, adj_depth)
    fn = lambda: _render_loss(cloud, cam, adj_img, adj_alpha, adj_depth)
    for name in ("position", "scale", "opacity"):
        num = central_diff(fn, cloud.params()[name])
        assert_grad_close(grads[name], num, what=f"render+maps d{name}")


def test_color_gradient_is_blend_weight_sum():
    # dC/dc_i must equal sum over covered pixels of alpha_i * prod_(j<i) (1 - alpha_j).
    cloud = make_cloud(n=3, seed=2, opacity=(0.4, 0.6))
    cam = make_camera(12, 12)
    res = ga.render_forward(cloud, cam)
    grads, _ = ga.render_backward(res, np.ones((12, 12, 3)))
    frag = res.frags

    weight_sums = np.zeros(len(cloud))
    for i in range(12):
        for j in range(12):
            t = 1.0
            for m in range(len(frag)):
                x0, x1, y0, y1 = frag.bbox[m]
                if not (x0 <= j < x1 and y0 <= i < y1):
                    continue
                if t < 1e-4:
                    break
                dx = j + 0.5 - frag.center[m, 0]
                dy = i + 0.5 - frag.center[m, 1]
                ca, cb, cc = frag.conic[m]
                alpha = min(frag.opac[m] * np.exp(-0.5 * ca * dx * dx - cb * dx * dy - 0.5 * cc * dy * dy), 0.99)
                weight_sums[frag.idx[m]] += t * alpha
                t *= 1.0 - alpha
    for k in range(len(cloud)):
        np.testing.assert_allclose(grads["color"][k], weight_sums[k], rtol=1e-10)


# ---------------------------------------------------------------------------
# Densify / prune
# ---------------------------------------------------------------------------

def _dense_cfg(**kw):
    base = dict(grad_threshold=1e-3, scale_split_threshold=0.2, opacity_prune_threshold=0.005, interval=100, max_gaussians=100)
    base.update(kw)
    return ga.DensifyConfig(**base)


def test_densify_noop_below_threshold(rng):
    cloud = make_cloud(n=6, seed=4)
    out = ga.densify_and_prune(cloud, np.zeros(6), np.ones(6), _dense_cfg(), rng)
    assert len(out.cloud) == 6
    assert np.array_equal(out.cloud.position, cloud.position)


def test_densify_clone_small_gaussian(rng):
    cloud = make_cloud(n=4, seed=5)
    cloud.scale[:] = np.log(0.05)  # below split threshold -> clone
    acc = np.zeros(4)
    acc[2] = 1.0
    out = ga.densify_and_prune(cloud, acc, np.ones(4), _dense_cfg(), rng)
    assert len(out.cloud) == 5
    assert out.n_cloned == 1 and out.n_split == 0
    # clone duplicates the parent's parameters exactly
    np.testing.assert_array_equal(out.cloud.position[-1], cloud.position[2])
    assert not out.fresh_mask[-1]


def test_densify_split_large_gaussian(rng):
    cloud = make_cloud(n=4, seed=6)
    cloud.scale[1] = np.log(0.5)  # above split threshold
    acc = np.zeros(4)
    acc[1] = 1.0
    out = ga.densify_and_prune(cloud, acc, np.ones(4), _dense_cfg(), rng)
    assert len(out.cloud) == 5  # parent replaced by two children
    assert out.n_split == 1
    children = out.cloud.scale[-2:]
    expect = np.broadcast_to(cloud.scale[1] - np.log(1.6), (2, 3))
    np.testing.assert_allclose(children, expect, atol=1e-12)
    assert np.all(out.fresh_mask[-2:])


def test_densify_prunes_transparent(rng):
    cloud = make_cloud(n=5, seed=7)
    cloud.opacity[3] = ga.inverse_sigmoid(0.001)
    out = ga.densify_and_prune(cloud, np.zeros(5), np.ones(5), _dense_cfg(), rng)
    assert len(out.cloud) == 4
    assert out.n_pruned == 1


def test_densify_respects_max_budget(rng):
    cloud = make_cloud(n=6, seed=8)
    cloud.scale[:] = np.log(0.05)
    acc = np.linspace(1.0, 2.0, 6)  # all trigger, increasing gradient
    out = ga.densify_and_prune(cloud, acc, np.ones(6), _dense_cfg(max_gaussians=8), rng)
    assert len(out.cloud) == 8
    # the two accepted clones are the two highest-gradient candidates
    np.testing.assert_array_equal(np.sort(out.triggered), [4, 5])


def test_densify_counter_mismatch_rejected(rng):
    cloud = make_cloud(n=5, seed=9)
    with pytest.raises(ValueError):
        ga.densify_and_prune(cloud, np.zeros(4), np.ones(5), _dense_cfg(), rng)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def test_scene_checkpoint_roundtrip(tmp_path):
    cloud = make_cloud(n=7, seed=10)
    path = tmp_path / "scene.nimg"
    cloud.save(path)
    back = ga.GaussianCloud.load(path)
    for a, b in zip(cloud.params().values(), back.params().values()):
        assert np.array_equal(a, b)


def test_scene_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.nimg"
    path.write_bytes(b"XXXX" + b"\0" * 32)
    with pytest.raises(ValueError):
        ga.GaussianCloud.load(path)


def test_camera_file_roundtrip(tmp_path):
    cams = [
        ga.Camera.looking_at([3.0, 1.0, 0.5], [0, 0, 0], [0, 1, 0], 80.0, 64, 48),
        ga.Camera.looking_at([-2.0, 2.0, 2.0], [0, 0.2, 0], [0, 1, 0], 100.0, 32, 32),
    ]
    path = tmp_path / "cameras.txt"
    ga.save_cameras(path, cams)
    back = ga.load_cameras(path)
    assert len(back) == 2
    for orig, got in zip(cams, back):
        np.testing.assert_allclose(got.position, orig.position, atol=1e-12)
        np.testing.assert_allclose(got.rotation, orig.rotation, atol=1e-9)
        assert got.focal == orig.focal
        assert (got.width, got.height) == (orig.width, orig.height)


def test_camera_rejects_improper_rotation():
    bad = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError):
        ga.Camera(np.zeros(3), bad, 10.0, 8.0, 8.0, 16, 16)
