import json

import jsonschema
import numpy as np
import pytest

from dsdgp.bench import (
    Dataset, ExperimentConfig, NormStats, evaluate, ingest_csv, load_schema, normalize, run_experiment,
    split_indices, strip_timing,
)
from dsdgp.errors import ConfigError, EmptyDataset, ParseError
from dsdgp.kernels import RbfArd, ZeroMean
from dsdgp.layer import GPLayer
from dsdgp.likelihoods import Bernoulli, Gaussian
from dsdgp.model import DGPModel
from dsdgp.rng import RngStream


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_ingest_three_rows(tmp_path):
    ds = ingest_csv(write(tmp_path, "1,2\n3,4\n5,6"))
    assert (ds.n, ds.d) == (3, 1)
    np.testing.assert_array_equal(ds.y.ravel(), [2, 4, 6])


def test_ingest_header(tmp_path):
    p = write(tmp_path, "a,b\n1,2\n3,4\n")
    assert ingest_csv(p, header=True).n == 2
    assert ingest_csv(p).n == 2  # detected
    assert ingest_csv(write(tmp_path, "1,2\n3,4\n", "n.csv"), header=True).n == 1


def test_ingest_malformed_row_cites_line(tmp_path):
    with pytest.raises(ParseError) as info:
        ingest_csv(write(tmp_path, "1,2\n3,x\n5,6\n"))
    assert info.value.line == 2
    with pytest.raises(ParseError) as info:
        ingest_csv(write(tmp_path, "h1,h2\n1,2\n3,4,5\n"), header=True)
    assert info.value.line == 3
    with pytest.raises(ParseError):
        ingest_csv(write(tmp_path, "1,2\n3,\n"))


def test_ingest_empty(tmp_path):
    with pytest.raises(EmptyDataset):
        ingest_csv(write(tmp_path, "a,b\n"), header=True)
    with pytest.raises(EmptyDataset):
        ingest_csv(write(tmp_path, ""))


def test_ingest_target_columns(tmp_path):
    ds = ingest_csv(write(tmp_path, "1,2,3,4\n5,6,7,8\n"), target_columns=[0, -1])
    np.testing.assert_array_equal(ds.x, [[2, 3], [6, 7]])
    np.testing.assert_array_equal(ds.y, [[1, 4], [5, 8]])


def ds(x, y, task="regression"):
    return Dataset(np.asarray(x, float), np.asarray(y, float), "t", task)


def test_normalize_uses_sample_std():
    train, test, stats = normalize(ds([[0.0], [2.0]], [[1.0], [1.0]]), ds([[1.0]], [[3.0]]))
    np.testing.assert_allclose(train.x.ravel(), [-1 / np.sqrt(2), 1 / np.sqrt(2)])
    # constant target column keeps unit scale
    np.testing.assert_array_equal(train.y.ravel(), [0.0, 0.0])
    np.testing.assert_array_equal(test.y.ravel(), [2.0])
    assert stats.y_std[0] == 1.0


def test_normalize_round_trip_and_centering():
    rng = np.random.default_rng(0)
    raw = ds(rng.normal(3, 2, size=(30, 4)), rng.normal(-1, 5, size=(30, 2)))
    train, _, stats = normalize(raw, raw)
    np.testing.assert_allclose(train.x.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(stats.denormalize_y(train.y), raw.y, rtol=1e-12)


def test_normalize_leaves_labels_alone():
    train, _, stats = normalize(ds([[0.0], [1.0]], [[0.0], [1.0]], "classification"), ds([[0.5]], [[1.0]], "classification"))
    np.testing.assert_array_equal(train.y.ravel(), [0.0, 1.0])
    assert stats.y_std[0] == 1.0


def test_splits_are_disjoint_and_seeded():
    tr, te = split_indices(506, 0.1, RngStream.from_key(0, 3))
    assert len(te) == 51 and len(tr) == 455
    assert not set(tr) & set(te)
    tr2, te2 = split_indices(506, 0.1, RngStream.from_key(0, 3))
    np.testing.assert_array_equal(te, te2)


def perfect_model(noise):
    z = np.array([[-1.0], [0.0], [1.0]])
    layer = GPLayer.create(z, RbfArd.create(1.0, [1.0]), ZeroMean(1), 1, q_sqrt_scale=1e-12)
    return DGPModel((layer,), Gaussian.create(noise), 3)


def test_evaluate_change_of_variables():
    z = np.array([[-1.0], [0.0], [1.0]])
    # q_mu = 0 and tiny S: the prediction at z is exactly 0 with (nearly) zero variance
    test = ds(z, np.zeros((3, 1)))
    stats = NormStats(np.zeros(1), np.ones(1), np.array([5.0]), np.array([2.0]))
    out = evaluate(perfect_model(1.0), test, stats, RngStream(0), 10)
    assert out["test_ll"] == pytest.approx(-0.5 * np.log(2 * np.pi) - np.log(2.0), abs=1e-9)
    assert out["test_rmse"] == pytest.approx(0.0, abs=1e-9)


def test_evaluate_accuracy():
    z = np.array([[-1.0], [1.0]])
    layer = GPLayer.create(z, RbfArd.create(1.0, [0.3]), ZeroMean(1), 1, q_mu=np.array([[-40.0], [40.0]]), q_sqrt_scale=1e-12)
    model = DGPModel((layer,), Bernoulli(), 2)
    test = ds(z, [[0.0], [1.0]], "classification")
    stats = NormStats(np.zeros(1), np.ones(1), np.zeros(1), np.ones(1))
    out = evaluate(model, test, stats, RngStream(0), 5)
    assert out["test_accuracy"] == 1.0
    assert out["test_ll"] == pytest.approx(0.0, abs=1e-9)


def test_config_validation_names_the_field():
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_mapping({"dataset": "x.csv", "layers": 0})
    assert info.value.field == "layers"
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_mapping({"dataset": "x.csv", "bogus": 1})
    assert info.value.field == "bogus"
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_mapping({"layers": 1})
    assert info.value.field == "dataset"
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_mapping({"dataset": "x.csv", "lr": "fast"})
    assert info.value.field == "lr"


def small_csv(tmp_path, n=40):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(n, 2))
    y = np.sin(x[:, 0]) + 0.1 * rng.normal(size=n)
    p = tmp_path / "small.csv"
    np.savetxt(p, np.column_stack([x, y]), delimiter=",", fmt="%.17g")
    return p


@pytest.fixture
def quick_cfg(tmp_path):
    return {"dataset": str(small_csv(tmp_path)), "layers": 2, "inducing": 6, "iterations": 30, "folds": 3, "samples_pred": 5}


def test_run_experiment_document(quick_cfg, tmp_path):
    doc = run_experiment(quick_cfg, artifacts=str(tmp_path / "art"))
    jsonschema.validate(doc, load_schema())
    assert len(doc["folds"]) == 3 and doc["model"] == "DGP-2"
    vals = [f["test_ll"] for f in doc["folds"]]
    assert doc["aggregate"]["test_ll"]["mean"] == pytest.approx(np.mean(vals))
    assert doc["aggregate"]["test_ll"]["stderr"] == pytest.approx(np.std(vals, ddof=1) / np.sqrt(3))
    assert (tmp_path / "art" / "fold2.checkpoint.json").exists()
    assert (tmp_path / "art" / "fold0.trace.csv").exists()
    for f in doc["folds"]:
        assert f["n_test"] == 4 and f["n_train"] == 36


def test_run_experiment_is_deterministic(quick_cfg):
    a, b = run_experiment(quick_cfg), run_experiment(quick_cfg)
    assert json.dumps(strip_timing(a)) == json.dumps(strip_timing(b))
    assert "seconds" not in strip_timing(a)["folds"][0]


def test_parallel_folds_match_sequential(quick_cfg):
    seq = run_experiment(quick_cfg)
    par = run_experiment({**quick_cfg, "jobs": 2})
    seq["config"].pop("jobs")
    par["config"].pop("jobs")
    assert strip_timing(seq) == strip_timing(par)


def test_schema_rejects_malformed_documents(quick_cfg):
    doc = run_experiment({**quick_cfg, "folds": 1, "layers": 1})
    jsonschema.validate(doc, load_schema())
    assert doc["aggregate"]["test_ll"]["stderr"] is None
    broken = json.loads(json.dumps(doc))
    del broken["folds"][0]["test_ll"]
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(broken, load_schema())


def test_too_many_inducing_points(quick_cfg):
    with pytest.raises(ConfigError) as info:
        run_experiment({**quick_cfg, "inducing": 1000})
    assert info.value.field == "inducing"
