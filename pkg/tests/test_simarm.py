
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskvla import data, simarm
from deskvla.core import DEFAULT_LIMITS, NumericError

CFG = simarm.SimConfig()


def test_reset_deterministic_and_home():
    a, b = simarm.reset(CFG, seed=5), simarm.reset(CFG, seed=5)
    np.testing.assert_array_equal(a.button, b.button)
    assert np.all(a.joints >= DEFAULT_LIMITS.lo) and np.all(a.joints <= DEFAULT_LIMITS.hi)
    assert not simarm.check_success(a)


def test_reset_uniform_chi_square():
    (x0, x1), (y0, y1) = CFG.button_bounds
    pts = np.array([simarm.reset(CFG, seed=s).button[:2] for s in range(1000)])
    counts, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=4, range=[[x0, x1], [y0, y1]])
    expected = 1000 / 16
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # 15 degrees of freedom, 0.999 quantile is 37.7
    assert chi2 < 37.7


def test_button_area_is_40cm_square():
    (x0, x1), (y0, y1) = CFG.button_bounds
    assert x1 - x0 == pytest.approx(0.4) and y1 - y0 == pytest.approx(0.4)


def test_whole_button_area_reachable():
    (x0, x1), (y0, y1) = CFG.button_bounds
    for x in np.linspace(x0, x1, 9):
        for y in np.linspace(y0, y1, 9):
            assert simarm.reachable((x, y), CFG)


def test_step_fixed_point():
    s = simarm.reset(CFG, seed=0)
    s2 = simarm.step(s, s.joints, CFG)
    np.testing.assert_array_equal(s2.joints, s.joints)


def test_velocity_limit_one_tick():
    s = simarm.reset(CFG, seed=0)
    cmd = s.joints.copy()
    cmd[0] = 170.0
    s2 = simarm.step(s, cmd, CFG)
    assert s2.joints[0] - s.joints[0] == pytest.approx(90.0 / 20.0)


def test_non_finite_command():
    with pytest.raises(NumericError):
        simarm.step(simarm.reset(CFG), [np.nan] * 6, CFG)


def test_forward_kinematics_straight_up():
    links = CFG.link_lengths
    p = simarm.forward_kinematics([0, 0, 0, 0, 0, 0], links)
    np.testing.assert_allclose(p, [0, 0, sum(links)], atol=1e-12)
    p = simarm.forward_kinematics([90, 90, 0, 0, 0, 0], links)
    np.testing.assert_allclose(p, [0, sum(links[1:]), links[0]], atol=1e-12)


def test_inverse_kinematics_round_trip():
    for xyz in [(0.3, 0.0, 0.05), (0.45, 0.15, 0.03), (0.12, -0.2, 0.09)]:
        q = simarm.inverse_kinematics(xyz, CFG)
        assert q is not None
        np.testing.assert_allclose(simarm.forward_kinematics(np.append(q, 0), CFG.link_lengths), xyz, atol=1e-9)


def test_expert_episode_presses_button():
    ep = data.record_expert_episode(CFG, seed=11)
    assert ep.success


def test_press_requires_descent_from_above():
    s = simarm.reset(CFG, seed=2)
    below = simarm.inverse_kinematics(s.button + [0, 0, -0.01], CFG)
    # teleport to a pressed depth without coming from above the button
    start = simarm.SimState(joints=np.append(below, 0), velocities=np.zeros(6), button=s.button,
                            ee=simarm.forward_kinematics(np.append(below, 0), CFG.link_lengths))
    s2 = simarm.step(start, start.joints, CFG)
    assert not s2.pressed


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.floats(-1e4, 1e4), min_size=6, max_size=6), min_size=1, max_size=20),
       st.integers(0, 2**16))
def test_limits_never_violated(commands, seed):
    s = simarm.reset(CFG, seed=seed)
    lim = CFG.limits
    pressed = False
    for c in commands:
        prev = s.joints
        s = simarm.step(s, c, CFG)
        assert np.all(s.joints >= lim.lo) and np.all(s.joints <= lim.hi)
        assert np.all(np.abs(s.joints - prev) <= lim.vmax * CFG.dt + 1e-9)
        assert s.pressed or not pressed
        pressed = s.pressed


def test_determinism_of_renders():
    s = simarm.reset(CFG, seed=4)
    a = simarm.render_views(s, CFG)
    b = simarm.render_views(s, CFG)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def _red_centroid(img, background):
    # red-channel excess is proportional to button coverage, up to 8-bit rounding
    w = np.clip(img[..., 0].astype(float) - background[0], 0, None)
    rows, cols = np.indices(w.shape)
    return np.average(rows, weights=w), np.average(cols, weights=w)


def test_button_at_centre_renders_at_image_centre():
    s = simarm.with_button(simarm.reset(CFG, seed=0), (0.30, 0.0))
    s = simarm.SimState(joints=s.joints, velocities=s.velocities, button=s.button, ee=np.array([10.0, 10, 10]))
    r, c = _red_centroid(simarm.render_top(s, CFG), simarm.TABLE_RGB)
    assert (r, c) == pytest.approx((31.5, 31.5), abs=0.02)


def test_top_view_pixels_per_meter():
    base = simarm.reset(CFG, seed=0)
    far = np.array([10.0, 10, 10])
    a = simarm.SimState(joints=base.joints, velocities=base.velocities, button=np.array([0.2, 0.0, 0.03]), ee=far)
    b = simarm.SimState(joints=base.joints, velocities=base.velocities, button=np.array([0.3, 0.0, 0.03]), ee=far)
    ra, _ = _red_centroid(simarm.render_top(a, CFG), simarm.TABLE_RGB)
    rb, _ = _red_centroid(simarm.render_top(b, CFG), simarm.TABLE_RGB)
    assert rb - ra == pytest.approx(0.1 * CFG.top_pixels_per_meter, abs=0.02)


def test_wrist_view_centred_and_largest_above_button():
    s = simarm.reset(CFG, seed=3)
    above = s.button + [0, 0, 0.06]
    offset = s.button + [0.03, 0.0, 0.06]

    def view(ee):
        st_ = simarm.SimState(joints=s.joints, velocities=s.velocities, button=s.button, ee=np.array(ee))
        img = simarm.render_wrist(st_, CFG)
        return img, int(((img[..., 0].astype(float) - img[..., 1]) > 60).sum())

    img, area_above = view(above)
    h, w = CFG.wrist_shape
    assert _red_centroid(img, simarm.WRIST_BG_RGB) == pytest.approx(((h - 1) / 2, (w - 1) / 2), abs=0.02)
    _, area_off = view(offset)
    assert area_above >= area_off


def test_camera_failure_blanks_view():
    cfg = simarm.SimConfig(camera_failures=(simarm.CameraFailure("wrist", 0, 5),))
    s = simarm.reset(cfg, seed=0)
    top, wrist = simarm.render_views(s, cfg)
    assert not wrist.any() and top.any()


def _ee_path(commands):
    # the arm path does not depend on where the button is
    s = simarm.reset(CFG, seed=0)
    path = []
    for c in commands:
        s = simarm.step(s, c, CFG)
        path.append(s.ee)
    return np.array(path)


def _presses(path, buttons):
    """Press rule evaluated for many buttons at once: enter the column from above, then sink."""
    top = buttons[:, 2][:, None]
    within = np.hypot(path[None, :, 0] - buttons[:, :1], path[None, :, 1] - buttons[:, 1:2]) <= CFG.success_radius
    z = path[None, :, 2]
    armed = np.zeros(len(buttons), bool)
    pressed = np.zeros(len(buttons), bool)
    for t in range(path.shape[0]):
        armed = within[:, t] & ((z[:, t] >= top[:, 0]) | armed)
        pressed |= armed & (z[:, t] <= top[:, 0] - CFG.press_depth)
    return pressed


def _plan_commands(button):
    plan = data.plan_expert(button, CFG)
    return [plan((k + 1) * CFG.dt) for k in range(int(plan.total * CFG.tick_rate))]


def test_press_rule_replica_matches_simulator():
    buttons = np.array([simarm.reset(CFG, seed=s).button for s in range(6)])
    cmds = _plan_commands(buttons[0])
    got = _presses(_ee_path(cmds), buttons)
    for b, g in zip(buttons, got):
        s = simarm.with_button(simarm.reset(CFG, seed=0), b[:2])
        for c in cmds:
            s = simarm.step(s, c, CFG)
        assert s.pressed == g
    assert got[0]


def test_vision_necessity_for_open_loop_sequences():
    """No single blind command sequence presses the button on more than 30% of resets."""
    buttons = np.array([simarm.reset(CFG, seed=s).button for s in range(100)])
    candidates = [_plan_commands(b) for b in buttons]
    (x0, x1), (y0, y1) = CFG.button_bounds
    for x in np.linspace(x0, x1, 9):
        for y in np.linspace(y0, y1, 9):
            candidates.append(_plan_commands((x, y, CFG.button_height)))
    best = max(int(_presses(_ee_path(c), buttons).sum()) for c in candidates)
    assert best <= 30
