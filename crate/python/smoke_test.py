"""Smoke test for the gspose Python module.

Build and install first:
    maturin build --release -m crates/py/Cargo.toml && pip install target/wheels/gspose-*.whl
"""
import math
import tempfile
from pathlib import Path

import gspose


def close(a, b, tol=1e-9):
    return all(abs(x - y) < tol for x, y in zip(a, b))


def main():
    # poses
    q = [math.cos(0.2), math.sin(0.2), 0.0, 0.0]
    p = gspose.Pose.from_quaternion(q, [0.01, -0.02, 0.6])
    assert close(p.compose(p.inverse()).t, [0.0, 0.0, 0.0])
    assert abs(gspose.geodesic(p, gspose.Pose.identity()) - 0.4) < 1e-12
    assert close(gspose.Pose.from_json(p.to_json()).quaternion(), p.quaternion())
    try:
        gspose.Pose.from_quaternion([0, 0, 0, 0], [0, 0, 1])
    except ValueError as e:
        assert "degenerate quaternion" in str(e)
    else:
        raise AssertionError("zero quaternion accepted")

    # a synthetic scene: ground truth reproduces the query
    scene = gspose.synth(3)
    k = scene.intrinsics
    rgb, alpha = gspose.render(scene.object, scene.gt_pose, k)
    assert len(rgb) == k.width * k.height * 3 and len(alpha) == k.width * k.height
    assert gspose.loss(rgb, rgb, k) < 1e-12

    db = scene.database
    with tempfile.TemporaryDirectory() as d:
        db.save(Path(d) / "db")
        db = gspose.Database.load(Path(d) / "db")
    assert len(db) == 64

    init, index = gspose.init_pose(db, scene.mask, scene.embedding, k)
    assert 0 <= index < len(db) and init.t[2] > 0

    pose, losses = gspose.refine(db, scene.image, scene.mask, init, k, max_steps=20)
    assert 1 <= len(losses) <= 20

    est = gspose.estimate(db, scene.image, scene.mask, scene.embedding, k, max_steps=20)
    assert close(est["initial"].t, init.t, 1e-6)

    pts = scene.object.means
    gt = scene.gt_pose
    assert gspose.add_error(gt, gt, pts) == 0.0
    assert gspose.adds_error(pose, gt, pts) <= gspose.add_error(pose, gt, pts) + 1e-12
    assert gspose.proj_error(gt, gt, pts, k) == 0.0
    assert gspose.rotation_error(gt, gt) < 1e-6

    report = gspose.gradcheck(0)
    assert report["max_rel_error"] < 1e-3

    print("smoke test ok: add %.4f m after %d steps" % (gspose.add_error(est["pose"], gt, pts), len(est["losses"])))


if __name__ == "__main__":
    main()
