"""Orchestration layer: config parsing, deterministic partitions, grid
selection, the result grid, and table rendering."""

import json

import numpy as np
import pytest

from oodkit import harness, nn, toydata
from oodkit.data import Dataset
from oodkit.errors import ConfigError, DisjointnessError


def minimal_config_dict(tmp_path):
    ds_dir = tmp_path / "train_ds"
    xx, yy = toydata.inlier_images(12, seed=0)
    from oodkit.data import save_dataset
    save_dataset(Dataset(images=xx, labels=yy, role="d_in_train", name="t",
                         num_classes=4), ds_dir)
    return {
        "seed": 5,
        "out_dir": "out",
        "tuning_protocol": "zero-shot",
        "datasets": {"d_in_train": "train_ds"},
        "network": {
            "input_shape": [3, 8, 8],
            "num_classes": 4,
            "layers": [
                {"kind": "flatten"},
                {"kind": "dense", "out_dim": 16},
                {"kind": "relu"},
                {"kind": "dense", "out_dim": 4},
            ],
        },
        "train": {"epochs": 1, "batch_in": 8,
                  "lr": {"kind": "cosine", "initial": 0.05}},
    }


def test_config_roundtrip(tmp_path):
    obj = minimal_config_dict(tmp_path)
    cfg = harness.config_from_dict(obj, base_dir=tmp_path)
    assert cfg.seed == 5
    assert cfg.tuning_protocol == "zero-shot"
    assert cfg.num_classes == 4
    assert len(cfg.layers) == 4
    assert cfg.train.epochs == 1
    assert cfg.finetune is None
    assert cfg.lam1_grid == harness.DEFAULT_LAM_GRID
    assert cfg.detectors.methods == ("msp", "md", "fcgm")
    # seed and out_dir overrides win over the file values
    cfg2 = harness.config_from_dict(obj, base_dir=tmp_path, seed=9,
                                    out_dir="elsewhere")
    assert cfg2.seed == 9 and cfg2.out_dir == "elsewhere"


def test_config_error_paths(tmp_path):
    good = minimal_config_dict(tmp_path)

    def variant(**changes):
        obj = json.loads(json.dumps(good))
        obj.update(changes)
        return obj

    with pytest.raises(ConfigError):
        harness.config_from_dict(variant(tuning_protocol="leaky"), tmp_path)
    with pytest.raises(ConfigError):
        harness.config_from_dict(variant(network=None), tmp_path)
    with pytest.raises(ConfigError):
        harness.config_from_dict(
            variant(datasets={"d_in_train": "missing_dir"}), tmp_path)
    with pytest.raises(ConfigError):
        harness.config_from_dict(variant(grid={"lam1": []}), tmp_path)
    with pytest.raises(ConfigError):
        harness.config_from_dict(
            variant(detectors={"methods": ["msp", "energy"]}), tmp_path)
    with pytest.raises(ConfigError):
        harness.config_from_dict(
            variant(detectors={"val_partition_fraction": 1.0}), tmp_path)
    with pytest.raises(ConfigError):
        harness.config_from_dict(variant(metrics=["auroc", "f1"]), tmp_path)
    with pytest.raises(ConfigError):
        harness.config_from_dict(
            variant(synthetic={"kinds": ["sepia"]}), tmp_path)
    bad_layers = json.loads(json.dumps(good))
    bad_layers["network"]["layers"] = [{"kind": "dense", "out_dim": 4}]
    with pytest.raises(ConfigError):
        harness.config_from_dict(bad_layers, tmp_path)
    bad_pool = json.loads(json.dumps(good))
    bad_pool["network"]["layers"] = [{"kind": "avgpool", "pool": 3}]
    with pytest.raises(ConfigError):
        harness.config_from_dict(bad_pool, tmp_path)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        harness.load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        harness.load_config(bad)


def test_config_layer_inference_matches_builder(tmp_path):
    obj = minimal_config_dict(tmp_path)
    obj["network"]["layers"] = [
        {"kind": "conv2d", "out_channels": 4, "kernel": 3, "padding": 1},
        {"kind": "relu"},
        {"kind": "avgpool", "pool": 2},
        {"kind": "flatten"},
        {"kind": "dense", "out_dim": 4},
    ]
    cfg = harness.config_from_dict(obj, base_dir=tmp_path)
    net = harness.build_network(cfg)
    logits = nn.predict_logits(net, np.zeros((2, 3, 8, 8)))
    assert logits.shape == (2, 4)


def _tiny_cfg(tmp_path, protocol="zero-shot", **det_kwargs):
    det = harness.DetectorConfig(eps_grid=(0.0,), **det_kwargs)
    return harness.ExperimentConfig(
        seed=3, out_dir=str(tmp_path / "out"), tuning_protocol=protocol,
        dataset_paths={}, input_shape=(3, 8, 8), num_classes=4,
        layers=(), train=None,
        finetune=harness.PhaseConfig(
            epochs=1, batch_in=128, momentum=0.9,
            lr=nn.LrSchedule("cosine", 0.01), batch_oe=64),
        lam1_grid=(0.0, 0.1), lam2_grid=(0.5,), detectors=det)


def test_partitions_are_deterministic(tmp_path):
    cfg = _tiny_cfg(tmp_path)
    xx, yy = toydata.inlier_images(128, seed=11)
    ds = Dataset(images=xx, labels=yy, role="d_in_test", name="t",
                 num_classes=4)
    calib_a, eval_a = harness.partition_in_test(cfg, ds)
    calib_b, eval_b = harness.partition_in_test(cfg, ds)
    assert np.array_equal(calib_a.images, calib_b.images)
    assert len(calib_a) + len(eval_a) == 128
    assert abs(len(calib_a) - 0.2 * 128) <= 1
    out = Dataset(images=toydata.outlier_images(64, seed=12),
                  role="d_out_test", name="o")
    tune, evl = harness.partition_oracle(cfg, out)
    assert len(tune) == len(evl) == 32
    assert not np.array_equal(tune.images, out.images[:32])


def test_method_label():
    assert harness.method_label("ce", "msp") == "msp"
    assert harness.method_label("oecc", "md") == "oecc+md"


def test_msp_scores_range(trained_blob_net):
    net, xx, yy = trained_blob_net
    s = harness.msp_scores(net, xx[:16])
    assert s.shape == (16,)
    assert np.all(s >= 0.25 - 1e-12) and np.all(s <= 1.0)


def test_finetune_grid_selection(tmp_path, trained_blob_net):
    net, xx, yy = trained_blob_net
    cfg = _tiny_cfg(tmp_path)
    d_in_train = Dataset(images=xx, labels=yy, role="d_in_train", name="t",
                         num_classes=4)
    rng = np.random.default_rng(0)
    oe = Dataset(images=rng.uniform(size=(64, 3, 8, 8)), role="d_out_oe",
                 name="oe")
    val = [Dataset(images=rng.uniform(size=(32, 3, 8, 8)), role="d_out_val",
                   name="v")]
    best_net, best_record, records, nets = harness.finetune_grid(
        cfg, net, 0.9, d_in_train, oe, xx[:32], val, keep_all=True)
    assert len(records) == 2
    assert [r["unit"] for r in records] == [0, 1]
    assert [r["seed"] for r in records] == [cfg.seed + 1, cfg.seed + 2]
    assert records[0]["lam1"] == 0.0 and records[1]["lam1"] == 0.1
    best_idx = max(range(2), key=lambda u: (records[u]["mean_val_auroc"], -u))
    assert best_record is records[best_idx]
    assert len(nets) == 2
    for li, layer_params in best_net.params.items():
        for key, value in layer_params.items():
            assert np.array_equal(value, nets[best_idx].params[li][key])


def test_evaluate_models_grid(tmp_path, trained_blob_net):
    net, xx, yy = trained_blob_net
    cfg = _tiny_cfg(tmp_path)
    d_in_train = Dataset(images=xx, labels=yy, role="d_in_train", name="t",
                         num_classes=4)
    tx, ty = toydata.inlier_images(128, seed=21)
    d_in_test = Dataset(images=tx, labels=ty, role="d_in_test",
                        name="blobs", num_classes=4)
    rng = np.random.default_rng(1)
    vals = [Dataset(images=rng.uniform(size=(48, 3, 8, 8)), role="d_out_val",
                    name="noise")]
    tests = [Dataset(images=toydata.outlier_images(64, seed=22),
                     role="d_out_test", name="scatter")]
    seen = []
    table = harness.evaluate_models(
        cfg, {"ce": net}, d_in_train, d_in_test, vals, tests,
        score_sink=lambda *args: seen.append(args))
    assert table.protocol == "zero-shot"
    assert len(table.rows) == 3
    assert not table.failed_rows
    assert {r.method for r in table.rows} == {"msp", "md", "fcgm"}
    for row in table.rows:
        assert row.d_in == "blobs" and row.d_out == "scatter"
        for key in harness.METRIC_KEYS:
            assert 0.0 <= row.result[key] <= 1.0
    assert len(seen) == 3
    d_in, d_out, method, in_s, out_s = seen[0]
    assert len(in_s) == len(harness.partition_in_test(cfg, d_in_test)[1])


def test_evaluate_models_records_cell_failures(tmp_path, trained_blob_net):
    net, xx, yy = trained_blob_net
    cfg = _tiny_cfg(tmp_path)
    # a single training image cannot cover all predicted classes, so both
    # fitted detectors fail while msp still evaluates
    d_in_train = Dataset(images=xx[:1], labels=yy[:1], role="d_in_train",
                         name="t", num_classes=4)
    tx, ty = toydata.inlier_images(64, seed=23)
    d_in_test = Dataset(images=tx, labels=ty, role="d_in_test", name="b",
                        num_classes=4)
    rng = np.random.default_rng(2)
    vals = [Dataset(images=rng.uniform(size=(16, 3, 8, 8)), role="d_out_val",
                    name="n")]
    tests = [Dataset(images=toydata.outlier_images(32, seed=24),
                     role="d_out_test", name="s")]
    table = harness.evaluate_models(cfg, {"ce": net}, d_in_train, d_in_test,
                                    vals, tests)
    failed = {r.method for r in table.failed_rows}
    assert failed == {"md", "fcgm"}
    ok = [r for r in table.rows if r.error is None]
    assert [r.method for r in ok] == ["msp"]


def test_enforce_disjointness(trained_blob_net):
    rng = np.random.default_rng(3)
    oe = Dataset(images=rng.uniform(size=(8, 3, 8, 8)), role="d_out_oe",
                 name="oe")
    test_imgs = rng.uniform(size=(8, 3, 8, 8))
    test_imgs[4] = oe.images[1]
    test_ds = Dataset(images=test_imgs, role="d_out_test", name="t")
    with pytest.raises(DisjointnessError) as err:
        harness.enforce_disjointness(oe, [], [test_ds])
    assert err.value.index_a == 1 and err.value.index_b == 4
    clean = Dataset(images=rng.uniform(size=(8, 3, 8, 8)), role="d_out_test",
                    name="c")
    harness.enforce_disjointness(oe, [], [clean])


def test_render_table_marks_best():
    rows = [
        harness.TableRow("cifar", "svhn", "msp",
                         {"tnr95": 0.5, "auroc": 0.75, "dacc": 0.7}),
        harness.TableRow("cifar", "svhn", "oecc+md",
                         {"tnr95": 0.9, "auroc": 0.953, "dacc": 0.88}),
        harness.TableRow("cifar", "svhn", "fcgm", None, "ShapeError: boom"),
    ]
    table = harness.ResultTable(protocol="oracle",
                                metrics=harness.METRIC_KEYS, rows=rows)
    text = harness.render_table(table)
    lines = text.splitlines()
    assert lines[0] == "tuning protocol: oracle"
    assert "TNR95" in lines[1] and "AUROC" in lines[1] and "DACC" in lines[1]
    assert "*95.3" in text and "75.0" in text and "*75.0" not in text
    assert "FAILED: ShapeError: boom" in text
    assert table.failed_rows == [rows[2]]


def test_table_json_roundtrip():
    rows = [harness.TableRow("a", "b", "msp",
                             {"tnr95": 0.1, "auroc": 0.2, "dacc": 0.3})]
    table = harness.ResultTable(protocol="zero-shot",
                                metrics=harness.METRIC_KEYS, rows=rows)
    obj = harness.table_to_json(table)
    assert obj["tuning_protocol"] == "zero-shot"
    assert obj["rows"][0]["result"]["auroc"] == 0.2


def test_score_path_sanitizes():
    p = harness._score_path("/tmp/out", "a/b", "c d", "oecc+md")
    assert p.name == "a-b__c-d__oecc+md.json"
    assert p.parent.name == "scores"


def test_hash_path_file_and_dir(tmp_path):
    f1 = tmp_path / "a.txt"
    f1.write_text("hello")
    f2 = tmp_path / "b.txt"
    f2.write_text("hello")
    assert harness._hash_path(f1) == harness._hash_path(f2)
    d1 = tmp_path / "d1"
    d2 = tmp_path / "d2"
    for d in (d1, d2):
        d.mkdir()
        (d / "x.bin").write_bytes(b"abc")
    assert harness._hash_path(d1) == harness._hash_path(d2)
    (d2 / "x.bin").write_bytes(b"abd")
    assert harness._hash_path(d1) != harness._hash_path(d2)


def test_small_conv_layers_shape():
    layers = harness.small_conv_layers(3, 8, 4)
    net = nn.build_network(layers, (3, 8, 8), 4, seed=0)
    logits = nn.predict_logits(net, np.zeros((2, 3, 8, 8)))
    assert logits.shape == (2, 4)
