import csv

import numpy as np
import pytest

from a2net import autodiff as ad
from a2net import objectives as obj
from a2net import trainer as tr
from a2net.dataset import from_arrays, make_synthetic
from a2net.model import A2Net, ModelConfig


def micro_model(seed=0, variant="plus_plus"):
    return ModelConfig(k=4, image_shape=(3, 8, 8), backbone_channels=[4], local_dim=2, global_dim=4,
                       d_prime=4, seed=seed, variant=variant)


def micro_data(seed=0):
    return make_synthetic(classes=2, per_class=4, shape=(3, 8, 8), seed=seed)


def micro_cfg(seed=0, **kw):
    base = dict(epochs=2, iterations=3, lr=1e-5, batch_size=8, seed=seed, z_refresh=0)
    base.update(kw)
    return tr.TrainConfig(**base)


def test_build_similarity_examples():
    assert tr.build_similarity([3], [3, 5]).tolist() == [[1, -1]]
    assert tr.build_similarity([{1, 4}], [{4, 9}], multi_label=True).tolist() == [[1]]
    with pytest.raises(ValueError):
        tr.build_similarity([set()], [{1}], multi_label=True)


def test_similarity_symmetric_on_shared_items():
    labels = np.random.default_rng(0).integers(0, 4, 20)
    S = tr.build_similarity(labels, labels)
    assert np.array_equal(S, S.T)


def test_sample_query_set():
    ids = np.arange(10, 15)
    assert sorted(tr.sample_query_set(ids, 5, seed=1).tolist()) == ids.tolist()
    assert len(tr.sample_query_set(ids, 0, seed=1)) == 0
    a = tr.sample_query_set(np.arange(100), 20, seed=7)
    assert np.array_equal(a, tr.sample_query_set(np.arange(100), 20, seed=7))
    assert len(set(a.tolist())) == 20
    with pytest.raises(ValueError):
        tr.sample_query_set(ids, 6, seed=0)


def test_zero_encoder_gives_all_plus_one_codes():
    m = A2Net(micro_model())
    m.params["W"].data = np.zeros_like(m.params["W"].data)
    Z = tr.update_database_codes(m, micro_data().batch(range(8)))
    assert (Z == 1).all()


def test_database_codes_match_per_item_loop():
    m = A2Net(micro_model())
    imgs = micro_data().batch(range(8))
    m.data_init(imgs)
    Z = tr.update_database_codes(m, imgs, batch_size=3)
    assert set(np.unique(Z)) <= {-1, 1}
    assert np.array_equal(Z, np.concatenate([m.encode(imgs[i]) for i in range(8)]))


@pytest.mark.parametrize("seed", range(3))
def test_micro_run_lowers_total_loss(seed):
    res = tr.train(micro_cfg(seed), micro_data(seed), micro_model(seed))
    totals = [row["total"] for row in res.history]
    assert len(totals) == 6 and [r["iteration"] for r in res.history] == list(range(6))
    assert totals[-1] < totals[0]


@pytest.mark.parametrize("seed", range(3))
def test_autoencoder_only_training_lowers_feature_reconstruction(seed):
    cfg = micro_cfg(seed, beta=0.0, eta=0.0, epochs=3, variant="basic", lr=1e-4)
    res = tr.train(cfg, micro_data(seed), micro_model(seed, "basic"))
    assert cfg.weights(4).beta == 0.0
    feat = [row["feat_x"] + row["feat_v"] for row in res.history]
    assert feat[-1] < feat[0]


def test_same_seed_reproduces_history_and_checkpoint(tmp_path):
    runs = []
    for name in ("a", "b"):
        res = tr.train(micro_cfg(4), micro_data(4), micro_model(4), out_dir=tmp_path / name)
        runs.append(res)
    assert runs[0].history == runs[1].history
    assert (tmp_path / "a" / "model.a2ck").read_bytes() == (tmp_path / "b" / "model.a2ck").read_bytes()
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()


def test_loss_csv_columns_and_format(tmp_path):
    tr.train(micro_cfg(), micro_data(), micro_model(), out_dir=tmp_path)
    with open(tmp_path / "loss.csv") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == tr.CSV_COLUMNS
    for row in rows[1:]:
        for cell in row[2:]:
            assert cell == "" or len(cell.split(".")[1]) == 6
        assert all(np.isfinite(float(c)) for c in row[2:] if c)


def test_lr_drop_at_global_iteration():
    cfg = micro_cfg(epochs=2, iterations=30, lr=1e-6, lr_drop_iteration=50)
    res = tr.train(cfg, micro_data(), micro_model())
    lrs = [row["lr"] for row in res.history]
    assert len(lrs) == 60
    assert lrs[49] == pytest.approx(1e-6) and lrs[50] == pytest.approx(1e-7) and lrs[-1] == pytest.approx(1e-7)


def test_variant_term_sets():
    assert tr.TrainConfig(variant="basic").terms == ("feat_x", "feat_v", "decor", "hash")
    assert tr.TrainConfig().terms == obj.TERM_NAMES
    with pytest.raises(ValueError):
        tr.TrainConfig(terms=("hash", "nope"))


def test_image_terms_need_plus_plus_model():
    with pytest.raises(tr.TrainingError):
        tr.train(micro_cfg(), micro_data(), micro_model(variant="basic"))


def test_empty_dataset_rejected():
    ds = from_arrays(np.zeros((2, 3, 8, 8)), [0, 1], splits=["query", "query"])
    with pytest.raises(tr.TrainingError):
        tr.train(micro_cfg(), ds, micro_model())


def test_non_finite_loss_aborts_with_checkpoint(tmp_path, monkeypatch):
    calls = {"n": 0}
    real = obj.hash_similarity_loss

    def flaky(Q, Z, S, k=None):
        calls["n"] += 1
        out = real(Q, Z, S, k)
        if calls["n"] == 3:
            return ad.scale(out, np.inf)
        return out

    monkeypatch.setattr(obj, "hash_similarity_loss", flaky)
    with pytest.raises(tr.TrainingError, match="non-finite loss at iteration 2"):
        tr.train(micro_cfg(), micro_data(), micro_model(), out_dir=tmp_path)
    assert (tmp_path / "model.a2ck").exists()
    A2Net.load(tmp_path / "model.a2ck")
    with open(tmp_path / "loss.csv") as f:
        assert len(list(csv.reader(f))) == 3  # header plus two good iterations


def test_z_refresh_changes_codes_within_epoch(monkeypatch):
    seen = []
    real = tr.update_database_codes

    def spy(model, images, batch_size=64):
        seen.append(1)
        return real(model, images, batch_size)

    monkeypatch.setattr(tr, "update_database_codes", spy)
    tr.train(micro_cfg(epochs=1, iterations=6, z_refresh=2), micro_data(), micro_model())
    assert len(seen) == 3
    seen.clear()
    tr.train(micro_cfg(epochs=2, iterations=6, z_refresh=0), micro_data(), micro_model())
    assert len(seen) == 2
