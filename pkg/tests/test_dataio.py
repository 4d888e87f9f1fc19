import gzip
import json
import struct

import numpy as np
import pytest

from bittol import dataio
from bittol.errors import DataFormatError
from bittol.model import forward, random_model


def _write_idx_pair(tmp_path, images, labels, gz=False):
    n, h, w = images.shape
    img_bytes = struct.pack(">IIII", 0x803, n, h, w) + images.tobytes()
    lbl_bytes = struct.pack(">II", 0x801, n) + labels.tobytes()
    opener = gzip.open if gz else open
    suffix = ".gz" if gz else ""
    ip = tmp_path / f"images-idx3-ubyte{suffix}"
    lp = tmp_path / f"labels-idx1-ubyte{suffix}"
    with opener(ip, "wb") as f:
        f.write(img_bytes)
    with opener(lp, "wb") as f:
        f.write(lbl_bytes)
    return str(ip), str(lp)


@pytest.mark.parametrize("gz", [False, True])
def test_load_idx_round_trip(tmp_path, gz):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (5, 4, 3), dtype=np.uint8)
    labels = rng.integers(0, 10, 5, dtype=np.uint8)
    ip, lp = _write_idx_pair(tmp_path, images, labels, gz=gz)
    ds = dataio.load_idx(ip, lp)
    assert ds.images.shape == (5, 1, 4, 3)
    assert np.array_equal(ds.images[:, 0], images)
    assert np.array_equal(ds.labels, labels)
    assert ds.n_classes == 10
    assert ds.z_max == 255


def test_load_idx_rejects_bad_magic(tmp_path):
    ip = tmp_path / "img"
    lp = tmp_path / "lbl"
    ip.write_bytes(struct.pack(">IIII", 0x999, 1, 2, 2) + bytes(4))
    lp.write_bytes(struct.pack(">II", 0x801, 1) + bytes(1))
    with pytest.raises(DataFormatError):
        dataio.load_idx(str(ip), str(lp))


def test_load_idx_rejects_truncated_images(tmp_path):
    ip = tmp_path / "img"
    lp = tmp_path / "lbl"
    ip.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + bytes(5))
    lp.write_bytes(struct.pack(">II", 0x801, 2) + bytes(2))
    with pytest.raises(DataFormatError):
        dataio.load_idx(str(ip), str(lp))


def test_load_idx_rejects_count_mismatch(tmp_path):
    rng = np.random.default_rng(1)
    images = rng.integers(0, 256, (4, 2, 2), dtype=np.uint8)
    labels = rng.integers(0, 10, 3, dtype=np.uint8)
    ip = tmp_path / "img"
    lp = tmp_path / "lbl"
    ip.write_bytes(struct.pack(">IIII", 0x803, 4, 2, 2) + images.tobytes())
    lp.write_bytes(struct.pack(">II", 0x801, 3) + labels.tobytes())
    with pytest.raises(DataFormatError):
        dataio.load_idx(str(ip), str(lp))


def test_load_cifar10_bin(tmp_path):
    rng = np.random.default_rng(2)
    n = 4
    recs = bytearray()
    labels = rng.integers(0, 10, n, dtype=np.uint8)
    pixels = rng.integers(0, 256, (n, 3, 32, 32), dtype=np.uint8)
    for i in range(n):
        recs.append(labels[i])
        recs.extend(pixels[i].tobytes())
    p = tmp_path / "data_batch_1.bin"
    p.write_bytes(bytes(recs))
    ds = dataio.load_cifar10_bin([str(p)])
    assert ds.images.shape == (4, 3, 32, 32)
    assert np.array_equal(ds.images, pixels)
    assert np.array_equal(ds.labels, labels)


def test_load_cifar10_rejects_ragged_file(tmp_path):
    p = tmp_path / "data_batch_1.bin"
    p.write_bytes(bytes(3073 + 17))
    with pytest.raises(DataFormatError):
        dataio.load_cifar10_bin([str(p)])


def test_synth_blobs_deterministic_and_separated():
    a = dataio.synth_blobs(4, 200, (1, 6, 6), separation=30.0, seed=5, noise=2.0)
    b = dataio.synth_blobs(4, 200, (1, 6, 6), separation=30.0, seed=5, noise=2.0)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    c = dataio.synth_blobs(4, 200, (1, 6, 6), separation=30.0, seed=6, noise=2.0)
    assert not np.array_equal(a.images, c.images)
    # nearest class center classifies nearly everything at this separation
    centers = np.stack([a.images[a.labels == k].mean(axis=0).ravel() for k in range(4)])
    flat = a.images.reshape(len(a.labels), -1).astype(np.float64)
    d2 = ((flat[:, None, :] - centers[None]) ** 2).sum(axis=2)
    assert (np.argmin(d2, axis=1) == a.labels).mean() > 0.95


def test_synth_blobs_shared_centers_across_splits():
    tr = dataio.synth_blobs(3, 300, (1, 4, 4), 25.0, seed=1, noise=1.0, center_seed=9)
    te = dataio.synth_blobs(3, 300, (1, 4, 4), 25.0, seed=2, noise=1.0, center_seed=9)
    for k in range(3):
        mu_tr = tr.images[tr.labels == k].mean(axis=0).ravel()
        mu_te = te.images[te.labels == k].mean(axis=0).ravel()
        assert np.linalg.norm(mu_tr - mu_te) < 3.0
    other = dataio.synth_blobs(3, 300, (1, 4, 4), 25.0, seed=2, noise=1.0, center_seed=10)
    gaps = [
        np.linalg.norm(
            tr.images[tr.labels == k].mean(axis=0).ravel()
            - other.images[other.labels == k].mean(axis=0).ravel()
        )
        for k in range(3)
    ]
    assert max(gaps) > 10.0


def test_synth_patterns_mostly_dark_with_bright_motifs():
    ds = dataio.synth_patterns(10, 500, (1, 28, 28), seed=1, center_seed=7)
    dark = float((ds.images < 30).mean())
    bright = float((ds.images > 100).mean())
    assert dark > 0.6
    assert bright > 0.01
    again = dataio.synth_patterns(10, 500, (1, 28, 28), seed=1, center_seed=7)
    assert np.array_equal(ds.images, again.images)


def test_synth_patterns_classes_are_separable():
    ds = dataio.synth_patterns(5, 400, (1, 10, 10), seed=2, center_seed=8, noise=10.0)
    centers = np.stack([ds.images[ds.labels == k].mean(axis=0).ravel() for k in range(5)])
    flat = ds.images.reshape(len(ds.labels), -1).astype(np.float64)
    d2 = ((flat[:, None, :] - centers[None]) ** 2).sum(axis=2)
    assert (np.argmin(d2, axis=1) == ds.labels).mean() > 0.95


def test_synth_patterns_validates_fraction():
    with pytest.raises(ValueError):
        dataio.synth_patterns(2, 10, (1, 4, 4), seed=0, on_fraction=0.0)
    with pytest.raises(ValueError):
        dataio.synth_patterns(2, 10, (1, 4, 4), seed=0, on_fraction=1.0)


def test_synth_patterns_validates_cluster_arguments():
    with pytest.raises(ValueError):
        dataio.synth_patterns(4, 10, (1, 4, 4), seed=0, clusters=0)
    with pytest.raises(ValueError):
        dataio.synth_patterns(4, 10, (1, 4, 4), seed=0, clusters=5)
    with pytest.raises(ValueError):
        dataio.synth_patterns(4, 10, (1, 4, 4), seed=0, clusters=2, mix=0.0)
    with pytest.raises(ValueError):
        dataio.synth_patterns(4, 10, (1, 4, 4), seed=0, clusters=2, mix=1.5)


def test_synth_patterns_clusters_group_related_classes():
    """Classes sharing a cluster motif sit closer than classes across clusters."""
    ds = dataio.synth_patterns(
        6, 1200, (1, 12, 12), seed=3, center_seed=9, clusters=3, mix=0.2
    )
    centers = np.stack(
        [ds.images[ds.labels == k].mean(axis=0).ravel() for k in range(6)]
    )
    # Classes k and k+3 share a cluster under round-robin assignment.
    within = [float(np.linalg.norm(centers[k] - centers[k + 3])) for k in range(3)]
    across = [
        float(np.linalg.norm(centers[k] - centers[j]))
        for k in range(6)
        for j in range(k + 1, 6)
        if k % 3 != j % 3
    ]
    assert np.mean(within) < 0.75 * np.mean(across)


def test_load_fashion_env_fallback_is_deterministic(monkeypatch):
    monkeypatch.delenv(dataio.FASHION_ENV, raising=False)
    a = dataio.load_fashion("test")
    b = dataio.load_fashion("test")
    assert np.array_equal(a.images, b.images)
    assert a.images.shape == (10000, 1, 28, 28)
    assert a.n_classes == 10
    tr = dataio.load_fashion("train")
    assert tr.images.shape == (60000, 1, 28, 28)
    assert not np.array_equal(tr.images[: len(a.images)], a.images)


def test_load_fashion_reads_idx_dir(tmp_path, monkeypatch):
    rng = np.random.default_rng(3)
    images = rng.integers(0, 256, (6, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, 6, dtype=np.uint8)
    (tmp_path / "t10k-images-idx3-ubyte").write_bytes(
        struct.pack(">IIII", 0x803, 6, 28, 28) + images.tobytes()
    )
    (tmp_path / "t10k-labels-idx1-ubyte").write_bytes(
        struct.pack(">II", 0x801, 6) + labels.tobytes()
    )
    monkeypatch.setenv(dataio.FASHION_ENV, str(tmp_path))
    ds = dataio.load_fashion("test")
    assert np.array_equal(ds.images[:, 0], images)
    assert np.array_equal(ds.labels, labels)


def test_dataset_subset_and_validation():
    ds = dataio.synth_blobs(3, 50, (1, 3, 3), 10.0, seed=0)
    sub = ds.subset(10)
    assert len(sub) == 10
    assert np.array_equal(sub.images, ds.images[:10])
    with pytest.raises(Exception):
        dataio.Dataset(ds.images, ds.labels[:-1], n_classes=3)


@pytest.mark.parametrize("arch,shape", [("In-FC16-FC16-10", (1, 5, 5)), ("In-C3-MP2-FC8-10", (1, 8, 8))])
def test_model_save_load_round_trip(tmp_path, arch, shape):
    model = random_model(arch, shape, seed=44, threshold_span=12)
    p = tmp_path / "m.btol"
    dataio.save_model(str(p), model)
    back = dataio.load_model(str(p))
    assert back == model
    rng = np.random.default_rng(4)
    x = rng.integers(0, 256, shape).astype(np.int32)
    assert np.array_equal(forward(model, x)[0], forward(back, x)[0])


def test_load_model_rejects_corruption(tmp_path):
    model = random_model("In-FC8-10", (1, 4, 4), seed=1)
    p = tmp_path / "m.btol"
    dataio.save_model(str(p), model)
    raw = bytearray(p.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError):
        dataio.load_model(str(p))


def test_load_model_rejects_bad_magic(tmp_path):
    p = tmp_path / "m.btol"
    p.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(DataFormatError):
        dataio.load_model(str(p))


def test_load_model_rejects_trailing_garbage(tmp_path):
    model = random_model("In-FC8-10", (1, 4, 4), seed=2)
    p = tmp_path / "m.btol"
    dataio.save_model(str(p), model)
    p.write_bytes(p.read_bytes() + b"x")
    with pytest.raises(DataFormatError):
        dataio.load_model(str(p))


def test_write_json_stable(tmp_path):
    p = tmp_path / "out.json"
    dataio.write_json(str(p), {"b": 2, "a": [1, 2]})
    first = p.read_bytes()
    dataio.write_json(str(p), {"a": [1, 2], "b": 2})
    assert p.read_bytes() == first
    assert json.loads(first) == {"a": [1, 2], "b": 2}


def test_write_csv_format(tmp_path):
    p = tmp_path / "out.csv"
    dataio.write_csv(str(p), ["x", "y"], [[1, 2.5], ["a", "b"]])
    lines = p.read_text().splitlines()
    assert lines[0] == "x,y"
    assert lines[1] == "1,2.5"
    assert len(lines) == 3


def test_payload_round_trips(tmp_path):
    from bittol import metrics

    rng = np.random.default_rng(5)
    model = random_model("In-FC8-10", (1, 4, 4), seed=3, threshold_span=10)
    images = rng.integers(0, 256, (6, 1, 4, 4)).astype(np.int32)
    labels = np.argmax([forward(model, x)[0] for x in images], axis=1)
    tol = metrics.dataset_tolerance(model, images)
    payload = dataio.tolerance_payload(tol)
    assert payload["grid"] == list(tol.grid)
    assert payload["t_bar"] == pytest.approx(tol.t_bar)
    imp = metrics.neuron_importance(model, images, labels)
    ipay = dataio.importance_payload(imp)
    assert ipay["variance"] == pytest.approx(imp.variance)
    assert len(ipay["pi"]) == len(imp.pi)
    dataio.write_json(str(tmp_path / "t.json"), payload)
    dataio.write_json(str(tmp_path / "i.json"), ipay)
