import numpy as np

from residrl import render as raster
from residrl.domain import sim_domain
from residrl.sim import FRONT, WRIST, render, render_labels, reset


def test_empty_scene_is_background():
    cfg = sim_domain()
    image = render(reset(cfg, 0), cfg, FRONT, draw_peg=False, draw_socket=False)
    assert image.shape == (32, 32)
    assert np.all(image == raster.palette(cfg.render_seed).background)


def test_peg_mask_matches_point_in_box_oracle():
    cfg = sim_domain()
    state = reset(cfg, 0)
    labels, _ = render_labels(state, cfg, FRONT)
    ee = state.ee_pose
    half, size, fov = cfg.peg_width / 2.0, cfg.image_size, cfg.front_view_mm
    cam_x, cam_y = cfg.front_camera.x, cfg.front_camera.y
    expected = np.zeros((size, size), dtype=bool)
    for i in range(size):
        for j in range(size):
            x = cam_x - fov / 2.0 + (j + 0.5) * fov / size
            y = cam_y + fov / 2.0 - (i + 0.5) * fov / size
            expected[i, j] = (ee.x - half <= x <= ee.x + half) and (ee.y - cfg.peg_height <= y <= ee.y)
    np.testing.assert_array_equal(labels == raster.PEG, expected)
    assert expected.sum() == 28


def test_wrist_view_is_centred_on_peg_tip():
    cfg = sim_domain()
    labels, _ = render_labels(reset(cfg, 0), cfg, WRIST)
    assert np.all(labels[:16, 9:23] == raster.PEG)
    assert not np.any(labels[16:] == raster.PEG)


def test_render_seed_changes_appearance_only():
    cfg = sim_domain()
    other = sim_domain(render_seed=5)
    state = reset(cfg, 0)
    for view in (FRONT, WRIST):
        labels_a, _ = render_labels(state, cfg, view)
        labels_b, _ = render_labels(state, other, view)
        np.testing.assert_array_equal(labels_a, labels_b)
    assert not np.array_equal(render(state, cfg, FRONT), render(state, other, FRONT))


def test_images_are_exact_in_uint8():
    cfg = sim_domain()
    image = render(reset(cfg, 0), cfg, FRONT)
    np.testing.assert_array_equal(raster.from_uint8(raster.to_uint8(image)), image)


def test_pgm_round_trip(tmp_path):
    cfg = sim_domain()
    image = render(reset(cfg, 0), cfg, WRIST)
    path = raster.write_pgm(tmp_path / "wrist.pgm", image)
    np.testing.assert_array_equal(raster.read_pgm(path), raster.to_uint8(image))
