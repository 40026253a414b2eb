import math

import numpy as np
import pytest

from blurrast.bary import naive_bary
from blurrast.geometry import Camera, Mesh, MotionTrajectory, icosphere, cube, rotation_x, segment
from blurrast.grad import (FDReport, PixelAdjoint, UnrecordedForwardError, backward_blur,
                           finite_diff_check, grad_image, mean_alpha_loss, screen_backward)
from blurrast.raster import BlurFrame, RasterConfig, render_blur, render_static
from blurrast.scene import Scene


def ico_scene(solver="fast", width=32, segments=12, samples=5, kind="rotation-y"):
    m = icosphere(0, radius=0.8)
    m = m.with_vertices(m.vertices @ rotation_x(math.radians(23)).T)
    rng = np.random.default_rng(3)
    m = Mesh(m.vertices, m.faces, rng.uniform(0.1, 0.9, m.vertices.shape))
    cam = Camera.from_spherical(elevation=30, width=width, height=width)
    return Scene(m, cam, MotionTrajectory(kind), segments, samples, solver=solver)


def rgb_alpha_loss(frame):
    # fixed random weights make every pixel and channel matter
    rng = np.random.default_rng(7)
    wr = rng.normal(size=frame.rgb.shape)
    wa = rng.normal(size=frame.alpha.shape)
    n = frame.alpha.size
    value = float((wr * frame.rgb).sum() + (wa * frame.alpha).sum()) / n
    return value, PixelAdjoint(wr / n, wa / n)


def test_zero_adjoint_gives_zero():
    s = ico_scene()
    f = s.render(record=True)
    st = backward_blur(f, PixelAdjoint.zeros(32, 32))
    assert not st.d_vertices.any() and not st.d_colors.any() and not st.d_screen.any()


def test_unrecorded_forward():
    f = ico_scene().render()
    with pytest.raises(UnrecordedForwardError):
        backward_blur(f, PixelAdjoint.zeros(32, 32))


def test_adjoint_shape_checks():
    with pytest.raises(ValueError):
        PixelAdjoint(np.zeros((4, 4, 3)), np.zeros((4, 5)))
    f = ico_scene().render(record=True)
    with pytest.raises(ValueError):
        backward_blur(f, PixelAdjoint.zeros(16, 16))


def test_static_triangle_color_gradient():
    # loss = mean over pixels and channels of rgb; d loss / d c_k = sum of w_k over covered pixels / (3 N)
    W = 24
    P = np.array([[3.2, 4.1, 1.0], [20.7, 6.3, 1.2], [8.9, 19.6, 0.9]])
    rng = np.random.default_rng(0)
    C = rng.uniform(size=(3, 3))
    cam = Camera.from_spherical(width=W, height=W)
    from blurrast.geometry import SegmentedMotion
    sm = SegmentedMotion(np.stack([P, P]), [[0, 1, 2]], 1, np.array([0.0, 1.0]))
    cfg = RasterConfig(W, W)
    f = render_blur(sm, C, cfg, record=True)
    N = W * W
    st = backward_blur(f, PixelAdjoint(np.full((W, W, 3), 1 / (3 * N)), np.zeros((W, W))))
    expect = np.zeros(3)
    F = np.vstack([P[:, 0], P[:, 1], np.ones(3)])
    for r in range(W):
        for c in range(W):
            w = naive_bary(F, [c + 0.5, r + 0.5])
            if np.all(w >= 0):
                expect += w
    np.testing.assert_allclose(st.d_colors, np.tile(expect[:, None] / (3 * N), (1, 3)), rtol=1e-12)
    assert st.d_vertices is None


@pytest.mark.parametrize("solver,h", [("fast", 2e-6), ("naive", 2e-5)])
def test_vertex_gradient_matches_fd(solver, h):
    # the fast root has sharper local curvature, so its truncation error needs a smaller step
    rep = finite_diff_check(ico_scene(solver), h=h, threshold=1e-3)
    assert rep.passed, rep.to_dict()
    assert rep.skipped_fraction < 0.05
    assert rep.n_checked > 20


@pytest.mark.parametrize("solver", ["fast", "naive"])
def test_rgb_alpha_loss_matches_fd(solver):
    h = 2e-6 if solver == "fast" else 2e-5
    rep = finite_diff_check(ico_scene(solver, segments=3, samples=4), loss_fn=rgb_alpha_loss, h=h)
    assert rep.passed, rep.to_dict()


def test_translation_gradient_matches_fd():
    rep = finite_diff_check(ico_scene(kind="translation-x", segments=1, samples=12), h=2e-5)
    assert rep.passed, rep.to_dict()


def test_color_fd_is_near_exact():
    s = ico_scene(kind="static", segments=1, samples=1)
    rep = finite_diff_check(s, loss_fn=rgb_alpha_loss, wrt="colors", h=1e-3, threshold=1e-6)
    assert rep.passed, rep.to_dict()


def test_constant_loss_reports_zero():
    def const(frame):
        return 1.0, PixelAdjoint.zeros(*frame.shape)

    rep = finite_diff_check(ico_scene(segments=2, samples=2), loss_fn=const)
    assert rep.max_rel_err == 0.0 and rep.n_checked == 0


def test_fd_argument_checks():
    with pytest.raises(ValueError):
        finite_diff_check(ico_scene(), h=0)
    with pytest.raises(ValueError):
        finite_diff_check(ico_scene(), wrt="camera")


def test_fd_report_json(tmp_path):
    import json
    rep = FDReport(2e-4, (3, 1), 50, 1, 4)
    data = json.loads(rep.write_json(tmp_path / "r.json").read_text())
    assert set(data) >= {"max_rel_err", "worst_index", "n_checked", "n_skipped"}
    assert data["worst_index"] == [3, 1]


def test_seed_linearity():
    s = ico_scene()
    f = s.render(record=True)
    _, adj = rgb_alpha_loss(f)
    a = backward_blur(f, adj)
    b = backward_blur(f, adj.scaled(-2.5))
    np.testing.assert_allclose(b.d_vertices, -2.5 * a.d_vertices, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(b.d_colors, -2.5 * a.d_colors, rtol=1e-12, atol=1e-15)


def test_color_channel_separability():
    s = ico_scene()
    f = s.render(record=True)
    d = np.zeros(f.rgb.shape)
    d[..., 0] = 1.0
    st = backward_blur(f, PixelAdjoint(d, np.zeros(f.shape)))
    assert st.d_colors[:, 0].any()
    assert not st.d_colors[:, 1:].any()


@pytest.mark.parametrize("solver", ["fast", "naive"])
def test_sum_rule_global_shift(solver):
    s = ico_scene(solver, segments=4, samples=3)
    f = s.render(record=True)
    value, adj = mean_alpha_loss(f)
    d_screen, _, _ = screen_backward(f.record, adj)
    sm = f.record.segmotion
    h = 1e-5
    vals = []
    for sign in (1, -1):
        kf = sm.keyframes.copy()
        kf[..., 0] += sign * h
        from blurrast.geometry import SegmentedMotion
        sm2 = SegmentedMotion(kf, sm.faces, sm.samples_per_segment, sm.times)
        vals.append(render_blur(sm2, f.record.colors, f.record.config, solver=solver).alpha.mean())
    fd = (vals[0] - vals[1]) / (2 * h)
    assert d_screen[..., 0].sum() == pytest.approx(fd, rel=1e-4)


def test_unseen_vertices_get_zero():
    m = icosphere(0, radius=0.5)
    far = np.array([[30.0, 0.0, 0.0], [30.0, 1.0, 0.0], [31.0, 0.0, 0.0]])
    V = np.vstack([m.vertices, far])
    F = np.vstack([m.faces, [[12, 13, 14]]])
    s = Scene(Mesh(V, F), Camera.from_spherical(width=32, height=32), MotionTrajectory("static"))
    f = s.render(record=True)
    st = backward_blur(f, mean_alpha_loss(f)[1])
    assert st.is_finite()
    assert not st.d_vertices[12:].any()
    assert st.d_vertices[:12].any()


def test_grad_image_mirror_symmetry():
    # a cube seen head-on is mirror symmetric left to right; its diagonal split is not
    s = Scene(cube(0.5), Camera.from_spherical(width=32, height=32), MotionTrajectory("static"))
    gx = grad_image(s, axis=0).values
    gy = grad_image(s, axis=1).values
    scale = np.abs(gx).max()
    assert scale > 0
    np.testing.assert_allclose(gx, -gx[:, ::-1], atol=2e-2 * scale)
    np.testing.assert_allclose(gy, gy[:, ::-1], atol=2e-2 * scale)


def test_grad_image_rotation_support():
    s = ico_scene(width=48, segments=12, samples=20)
    g = grad_image(s)
    assert np.isfinite(g.values).all()
    assert g.rgb.shape == (48, 48, 3) and g.rgb.dtype == np.uint8
    alpha = s.render().alpha
    nz = g.values != 0
    assert nz.any()
    # nothing far outside the swept coverage band
    assert np.abs(g.values[alpha == 0]).max() < 1e-12


def _bbox_aspect(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return (cols[-1] - cols[0] + 1) / (rows[-1] - rows[0] + 1)


def test_grad_image_translation_elongated():
    m = icosphere(2, radius=0.4)
    cam = Camera.from_spherical(width=64, height=64)
    static = Scene(m, cam, MotionTrajectory("static"))
    moving = Scene(m, cam, MotionTrajectory("translation-x"), 1, 50)
    a0 = _bbox_aspect(np.abs(grad_image(static).values) > 1e-9)
    a1 = _bbox_aspect(np.abs(grad_image(moving).values) > 1e-9)
    assert a1 > 1.5 * a0


def test_grad_image_png(tmp_path):
    s = ico_scene(segments=2, samples=2)
    p = grad_image(s, channel="rgb").write_png(tmp_path / "g.png")
    assert p.exists() and p.stat().st_size > 0
    with pytest.raises(ValueError):
        grad_image(s, channel="depth")
