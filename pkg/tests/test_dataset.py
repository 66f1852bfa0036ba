import json

import numpy as np
import pytest

from stablenode.dataset import (
    DemoFormatError,
    DemoSet,
    Trajectory,
    handwriting_shape,
    load_bundled,
    load_demos,
    make_windows,
    read_trajectory,
    save_demos,
    synth_multimodal,
    write_trajectory,
)


def test_csv_round_trip_is_exact(tmp_path, rng):
    tr = Trajectory(np.cumsum(rng.uniform(0.01, 0.1, 30)), rng.normal(size=(30, 3)))
    write_trajectory(tmp_path / "a.csv", tr)
    back = read_trajectory(tmp_path / "a.csv")
    np.testing.assert_array_equal(back.times, tr.times)
    np.testing.assert_array_equal(back.points, tr.points)


@pytest.mark.parametrize(
    "text,where",
    [
        ("t,x,y\n0,1,2\n1,1,2\n", ":1:"),
        ("t,z1\n0,1\n1,oops\n", ":3:"),
        ("t,z1\n0,1\n1,2,3\n", ":3:"),
        ("t,z1\n0,1\n0.5,2\n0.5,3\n", ":4:"),
    ],
)
def test_malformed_files_report_line(tmp_path, text, where):
    (tmp_path / "bad.csv").write_text(text)
    with pytest.raises(DemoFormatError, match=where):
        read_trajectory(tmp_path / "bad.csv")


def test_mixed_dimensions_rejected(tmp_path):
    write_trajectory(tmp_path / "a.csv", Trajectory([0, 1], [[0, 0], [1, 1]]))
    write_trajectory(tmp_path / "b.csv", Trajectory([0, 1], [[0], [1]]))
    with pytest.raises(DemoFormatError, match="mixed"):
        load_demos(tmp_path)


def test_save_and_load_with_annotations(tmp_path):
    demos = synth_multimodal([handwriting_shape("angle", 2), handwriting_shape("hook", 2)], [[0, 0], [0, -0.2]])
    save_demos(tmp_path, demos)
    back = load_demos(tmp_path)
    assert back.names == sorted(demos.names)
    np.testing.assert_array_equal(back.attractors, [[0, 0], [0, -0.2]])
    assert json.loads((tmp_path / "attractors.json").read_text())["groups"]["g1_hook_0"] == 1


def test_windows_are_consecutive_and_deterministic():
    demos = handwriting_shape("hook", 3)
    w1 = make_windows(demos, 25, 40, seed=5)
    w2 = make_windows(demos, 25, 40, seed=5)
    np.testing.assert_array_equal(w1.points, w2.points)
    assert w1.points.shape == (40, 25, 2)
    for i, s, pts in zip(w1.demo_index, w1.starts, w1.points):
        np.testing.assert_array_equal(pts, demos[i].points[s : s + 25])
    with pytest.raises(ValueError):
        make_windows(demos, 10_000, 4, seed=0)


def test_synth_multimodal_translates_endpoints():
    demos = synth_multimodal([handwriting_shape("angle", 3), handwriting_shape("hook", 3)], [[0, 0], [0, -0.2]])
    for tr, g in zip(demos, demos.groups):
        np.testing.assert_array_equal(tr.points[-1], demos.attractors[g])
    with pytest.raises(ValueError):
        synth_multimodal([handwriting_shape("angle", 1)], [[0, 0], [1, 1]])


def test_bundled_shapes_load():
    for name in ("angle", "hook"):
        demos = load_bundled(name)
        assert len(demos) == 7
        assert demos.dim == 2
        for tr in demos:
            np.testing.assert_allclose(tr.points[-1], 0.0)
            np.testing.assert_allclose(np.diff(tr.times), 0.01, atol=1e-12)


def test_demoset_validation():
    with pytest.raises(ValueError):
        DemoSet(["a"], [])
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], [[0.0], [1.0]])
