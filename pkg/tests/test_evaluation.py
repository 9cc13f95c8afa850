import csv
import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import sseds
from sseds.errors import DataError
from sseds.evaluation import (
    StageTimer,
    auc,
    build_report,
    count_params,
    top_fraction_mass,
    write_report,
)
from sseds.pruning import apply_mask, prune_report, saliency, select_mask

from conftest import small_model

SCHEMAS = Path(sseds.__file__).parent / "schemas"


def brute_auc(pred, labels):
    pos = [p for p, y in zip(pred, labels) if y]
    neg = [p for p, y in zip(pred, labels) if not y]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_single_class():
    with pytest.raises(DataError, match="undefined AUC"):
        auc([0.1, 0.2], [1, 1])


_labels = st.lists(st.booleans(), min_size=2, max_size=60).filter(lambda y: 0 < sum(y) < len(y))


@settings(max_examples=200, deadline=None)
@given(_labels, st.data())
def test_auc_matches_brute_force(labels, data):
    pred = data.draw(st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.9, 1.0]),
                              min_size=len(labels), max_size=len(labels)))
    assert auc(pred, labels) == brute_auc(pred, labels)


@settings(max_examples=100, deadline=None)
@given(_labels, st.data())
def test_auc_invariant_under_increasing_maps(labels, data):
    # a coarse grid keeps the maps strictly increasing in floating point too
    pred = np.array(data.draw(st.lists(st.integers(-40, 40), min_size=len(labels), max_size=len(labels)))) / 8
    base = auc(pred, labels)
    assert auc(np.exp(pred), labels) == pytest.approx(base, abs=1e-12)
    assert auc(3 * pred + 7, labels) == pytest.approx(base, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(_labels)
def test_auc_complement_without_ties(labels):
    pred = np.random.default_rng(len(labels)).permutation(len(labels)) / len(labels)
    assert auc(1 - pred, labels) == pytest.approx(1 - auc(pred, labels), abs=1e-12)


def test_count_params():
    assert count_params([np.zeros((10, 4)), np.zeros((20, 4))]) == 120
    assert count_params([]) == 0
    a, b = [np.zeros((3, 2))], [np.zeros((5, 7))]
    assert count_params(a + b) == count_params(a) + count_params(b)
    assert count_params(a, transforms=[np.zeros((2, 2))], theta=[np.zeros(3)]) == 6 + 4 + 3


def test_top_fraction_mass():
    s = np.array([0.5, 0.2] + [0.3 / 18] * 18)
    assert top_fraction_mass(s, 0.1) == pytest.approx(0.7)
    assert top_fraction_mass(np.ones(10)) == pytest.approx(0.1)


def test_stage_timer_accumulates():
    t = StageTimer()
    with t.stage("a"):
        pass
    with t.stage("a"):
        pass
    assert set(t.wall_ms) == {"a"} and t.wall_ms["a"] >= 0


def _prune_rep(kappa, seed=0):
    model = small_model("FM", sizes=(10, 20, 5), d=4)
    model.step = 1
    s = saliency(np.random.default_rng(seed).random((3, 4)))
    pm = select_mask(s, model.field_sizes, kappa)
    return prune_report(model, s, pm, apply_mask(model, pm), 1)


def test_report_kappa_one_keeps_full_dims():
    rep = build_report(_prune_rep(1.0))
    assert [f["d_i"] for f in rep["searched_dims"]] == [4, 4, 4]
    assert sum(rep["saliency_histogram"]["counts"]) == 12
    assert len(rep["sorted_saliency"]) == 12
    assert rep["sorted_saliency"] == sorted(rep["sorted_saliency"], reverse=True)


def test_write_report_files_and_schema(tmp_path):
    pr = _prune_rep(0.5)
    metrics = [{"stage": "pretrain", "auc": 0.7, "param_count": 140},
               {"stage": "retrain/slim", "auc": 0.71, "param_count": 60}]
    rep = write_report(pr, metrics, tmp_path)
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc == rep
    jsonschema.validate(doc, json.loads((SCHEMAS / "report.schema.json").read_text()))
    with open(tmp_path / "saliency.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 12
    assert sum(int(r["kept"]) for r in rows) == sum(f["d_i"] for f in pr["fields"])
    assert sum(float(r["s"]) for r in rows) == pytest.approx(1.0)
    with open(tmp_path / "dims.csv") as fh:
        assert list(csv.reader(fh))[0] == ["field_id", "n_i", "d_i"]


def test_report_requires_artifacts():
    with pytest.raises(DataError):
        build_report({"kappa": 0.1})
