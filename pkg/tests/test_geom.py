import numpy as np
import pytest

from residrl.errors import NumericalDivergenceError
from residrl.geom import ActionDelta, Pose2, clamp_action, compose, pose_error, within_success, wrap_deg
from residrl.seeding import make_rng


@pytest.mark.parametrize("angle, expected", [(0.0, 0.0), (180.0, 180.0), (-180.0, 180.0), (181.0, -179.0),
                                             (540.0, 180.0), (-190.0, 170.0)])
def test_wrap_deg(angle, expected):
    assert wrap_deg(angle) == pytest.approx(expected)


def test_wrap_deg_arrays():
    np.testing.assert_allclose(wrap_deg(np.array([359.0, -359.0])), [-1.0, 1.0])


def test_compose():
    assert compose(Pose2(0, 0, 0), Pose2(1, 2, 3)) == Pose2(1, 2, 3)
    wrapped = compose(Pose2(0, 0, 179), Pose2(0, 0, 2))
    assert wrapped.theta == pytest.approx(-179.0)
    inverse = compose(Pose2(5, -5, 90), Pose2(-5, 5, -90))
    assert inverse.as_array() == pytest.approx([0.0, 0.0, 0.0])


def test_pose_error():
    assert pose_error(Pose2(1, 2, 3), Pose2(1, 2, 3)) == (0.0, 0.0)
    trans, rot = pose_error(Pose2(2, 2, 4), Pose2())
    assert trans == pytest.approx(np.sqrt(8.0))
    assert rot == pytest.approx(4.0)
    _, rot = pose_error(Pose2(0, 0, 179), Pose2(0, 0, -179))
    assert rot == pytest.approx(2.0)


def test_success_boundaries():
    assert bool(within_success(0.0, 0.0))
    assert not bool(within_success(3.1, 0.0))
    assert bool(within_success(np.hypot(2.0, 2.0), 4.9))
    assert bool(within_success(3.0, 5.0))
    assert not bool(within_success(0.0, 5.01))


def test_clamp_action():
    assert clamp_action([0.3, -0.2, 0.0]) == ActionDelta(0.3, -0.2, 0.0)
    assert clamp_action([1.3, -2.0, 0.5]) == ActionDelta(1.0, -1.0, 0.5)
    with pytest.raises(NumericalDivergenceError):
        clamp_action([np.nan, 0.0, 0.0])


def test_action_delta_rejects_out_of_range():
    with pytest.raises(ValueError):
        ActionDelta(1.5, 0.0, 0.0)


def test_pose_rejects_non_finite():
    with pytest.raises(NumericalDivergenceError):
        Pose2(np.inf, 0.0, 0.0)


def _random_poses(rng, n):
    return [Pose2(*row) for row in np.column_stack([rng.uniform(-100.0, 100.0, size=(n, 2)),
                                                     rng.uniform(-360.0, 360.0, size=n)])]


def _assert_same_pose(a, b):
    assert a.x == pytest.approx(b.x, abs=1e-9)
    assert a.y == pytest.approx(b.y, abs=1e-9)
    assert wrap_deg(a.theta - b.theta) == pytest.approx(0.0, abs=1e-9)


def test_compose_is_associative_with_identity():
    rng = make_rng(101)
    ps, qs, rs = (_random_poses(rng, 500) for _ in range(3))
    for p, q, r in zip(ps, qs, rs):
        _assert_same_pose(compose(compose(p, q), r), compose(p, compose(q, r)))
        _assert_same_pose(compose(p, Pose2()), p)
        _assert_same_pose(compose(Pose2(), p), p)


def test_pose_error_is_symmetric():
    rng = make_rng(102)
    for p, q in zip(_random_poses(rng, 500), _random_poses(rng, 500)):
        trans_pq, rot_pq = pose_error(p, q)
        trans_qp, rot_qp = pose_error(q, p)
        assert trans_pq == trans_qp
        assert rot_pq == pytest.approx(rot_qp, abs=1e-9)
        assert 0.0 <= rot_pq <= 180.0


def test_clamp_action_is_idempotent():
    rng = make_rng(103)
    for raw in rng.uniform(-3.0, 3.0, size=(500, 3)):
        once = clamp_action(raw)
        assert clamp_action(once.as_array()) == once
        assert np.all(np.abs(once.as_array()) <= 1.0)
