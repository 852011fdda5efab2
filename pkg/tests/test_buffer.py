import threading

import numpy as np
import pytest

from vesselscreen.buffer import (
    BoundaryCloud,
    CloudRingBuffer,
    EmptyInputError,
    coplanarity_ratio,
    read_ply,
    spread_clouds,
)


def cloud(k, n=12, offset=(0.0, 0.0, 0.0), rng=None):
    rng = rng or np.random.default_rng(k)
    pts = rng.normal(size=(n, 3)) + np.asarray(offset, float)
    return BoundaryCloud(pts, timestamp=0.02 * k, frame_id=k)


def test_centroid_is_mean():
    c = cloud(3)
    assert np.allclose(c.centroid, c.points.mean(axis=0), atol=1e-12)


def test_push_beyond_capacity_evicts_oldest():
    buf = CloudRingBuffer(capacity=10)
    clouds = [cloud(k) for k in range(11)]
    for c in clouds:
        buf.push(c)
    held = buf.clouds()
    assert len(held) == 10 and held[0] is clouds[1] and clouds[0] not in held
    assert buf.is_full


def test_single_push_not_full():
    buf = CloudRingBuffer(capacity=10)
    buf.push(cloud(0))
    assert len(buf) == 1 and not buf.is_full


def test_trailing_window_matches_reference_list():
    rng = np.random.default_rng(0)
    buf = CloudRingBuffer(capacity=10)
    ref = []
    for k in range(100):
        c = cloud(k)
        buf.push(c)
        ref.append(c)
        if rng.random() < 0.5:
            assert buf.clouds() == ref[-10:]
    assert buf.clouds() == ref[-10:]


def test_empty_cloud_rejected():
    buf = CloudRingBuffer()
    with pytest.raises(EmptyInputError):
        buf.push(BoundaryCloud(np.zeros((0, 3))))


def test_empty_buffer_read_raises():
    with pytest.raises(EmptyInputError):
        CloudRingBuffer().spread_view()


def test_invalid_parameters():
    with pytest.raises(ValueError):
        CloudRingBuffer(capacity=0)
    with pytest.raises(ValueError):
        CloudRingBuffer(spread_mu=-1)


def test_mu_zero_is_plain_concatenation():
    buf = CloudRingBuffer(4, spread_mu=0.0)
    cs = [cloud(k, offset=(0, k, 0)) for k in range(4)]
    for c in cs:
        buf.push(c)
    assert np.array_equal(buf.spread_view(), np.concatenate([c.points for c in cs]))


def test_two_cloud_spread_by_mu():
    base = np.random.default_rng(1).normal(size=(8, 3))
    c1 = BoundaryCloud(base)
    c2 = BoundaryCloud(base + [0, 1, 0])
    out = spread_clouds([c1, c2], 5.0)
    assert np.allclose(out[:8], c1.points)
    assert np.allclose(out[8:], c2.points + [0, 5, 0])


def test_spreading_does_not_mutate_storage():
    buf = CloudRingBuffer(3, 5.0)
    cs = [cloud(k, offset=(0, 2 * k, 0)) for k in range(3)]
    before = [c.points.copy() for c in cs]
    for c in cs:
        buf.push(c)
    buf.spread_view()
    assert all(np.array_equal(c.points, b) for c, b in zip(buf.clouds(), before))


def test_paused_probe_is_degenerate():
    rng = np.random.default_rng(2)
    th = rng.uniform(0, 2 * np.pi, 30)
    ring = np.stack([np.cos(th), np.zeros(30), np.sin(th)], axis=1) * 7.5
    buf = CloudRingBuffer(5, 5.0)
    for k in range(5):
        buf.push(BoundaryCloud(ring))
    spread, raw, degenerate = buf.views()
    assert np.allclose(spread, raw)
    assert degenerate and buf.degenerate()


def test_moving_probe_is_not_degenerate():
    buf = CloudRingBuffer(5, 5.0)
    th = np.linspace(0, 2 * np.pi, 30, endpoint=False)
    for k in range(5):
        buf.push(BoundaryCloud(np.stack([np.cos(th), np.full(30, 0.2 * k), np.sin(th)], axis=1)))
    assert not buf.degenerate()
    assert coplanarity_ratio(buf.spread_view()) > 1e-3


def test_spread_preserves_cloud_shape():
    cs = [cloud(k, offset=(k, 3 * k, 0)) for k in range(5)]
    out = spread_clouds(cs, 5.0)
    for j, c in enumerate(cs):
        moved = out[j * 12 : (j + 1) * 12]
        d0 = np.linalg.norm(c.points[:, None] - c.points[None], axis=2)
        d1 = np.linalg.norm(moved[:, None] - moved[None], axis=2)
        assert np.allclose(d0, d1, atol=1e-12)


def test_spread_union_centroid_formula():
    rng = np.random.default_rng(4)
    cs = [BoundaryCloud(rng.normal(size=(12, 3)) + rng.normal(size=3) * 4) for _ in range(6)]
    mu = 5.0
    out = spread_clouds(cs, mu)
    raw = np.concatenate([c.points for c in cs])
    cents = np.array([c.centroid for c in cs])
    want = raw.mean(axis=0) + mu * (cents.mean(axis=0) - cents[0])
    assert np.allclose(out.mean(axis=0), want, atol=1e-9)


def test_concurrent_push_and_read_see_whole_clouds():
    buf = CloudRingBuffer(10, 5.0)
    stop = threading.Event()
    errors = []

    def writer():
        k = 0
        while not stop.is_set():
            buf.push(BoundaryCloud(np.full((12, 3), float(k))))
            k += 1

    def reader():
        for _ in range(300):
            snap = buf.clouds()
            for c in snap:
                if len(c) != 12 or not np.all(c.points == c.points[0, 0]):
                    errors.append("torn")
            if snap:
                pts = buf.raw_points()
                if len(pts) % 12:
                    errors.append("partial")

    t = threading.Thread(target=writer)
    t.start()
    try:
        reader()
    finally:
        stop.set()
        t.join()
    assert not errors


def test_ply_roundtrip(tmp_path):
    buf = CloudRingBuffer(3, 5.0)
    for k in range(3):
        buf.push(cloud(k, offset=(0, k, 0)))
    raw = buf.dump_ply(tmp_path / "raw.ply")
    spread = buf.dump_ply(tmp_path / "spread.ply", spread=True)
    assert np.allclose(read_ply(raw), buf.raw_points(), atol=1e-6)
    assert np.allclose(read_ply(spread), buf.spread_view(), atol=1e-6)
    assert "property int slot" in raw.read_text()
