import math

import numpy as np
import pytest
import torch

from csvr import evals
from csvr.config import TrainConfig
from csvr.context import VideoEncoder
from csvr.data import TAXONOMY
from csvr.exceptions import ConfigValueError, DataShapeError, ZeroNormError
from csvr.evals import (EvalReport, correlation_from_rows, correlation_study, finetune, per_class_report,
                        random_feature_recall, retrieve, retrieve_from_features, spearman, video_representation,
                        window, window_starts, write_per_class_csv)
from csvr.trainer import init_state, save_checkpoint


@pytest.fixture
def ft():
    return TrainConfig(batch_size=4, epochs=1, transfer_epochs=1, seed=0)


def test_report_invariants():
    confusion = np.array([[3, 1, 0], [0, 2, 2], [1, 0, 1]])
    rep = EvalReport.from_confusion(confusion, [0, 4, 7], "f_d", 1)
    assert rep.top1 == pytest.approx(6 / 10)
    assert rep.per_class == {0: 0.75, 4: 0.5, 7: 0.5}
    assert 0 <= rep.top1 <= 1 and rep.confusion.sum() == 10
    empty = EvalReport.from_confusion(np.zeros((2, 2)), [0, 1], "f_d", 0)
    assert math.isnan(empty.per_class[0]) and math.isnan(empty.top1)


def test_report_json(tmp_path):
    rep = EvalReport.from_confusion(np.eye(2, dtype=int), [0, 1], "scratch", 3)
    rep.write_json(tmp_path / "r.json")
    text = (tmp_path / "r.json").read_text()
    assert '"top1": 1.0' in text and '"feature_source": "scratch"' in text


def test_window_starts(tiny_cfg):
    span = tiny_cfg.clip_span
    starts = window_starts(16, tiny_cfg, 5)
    assert starts[0] == 0 and starts[-1] == 16 - span and starts == sorted(starts)
    assert window_starts(16, tiny_cfg, 1) == [(16 - span) // 2]
    with pytest.raises(DataShapeError):
        window_starts(span - 1, tiny_cfg, 3)


def test_video_representation_mean(tiny_cfg, tiny_corpus):
    torch.manual_seed(0)
    model = VideoEncoder(tiny_cfg)
    ep = tiny_corpus.episodes[0]
    rep = video_representation(model, ep, num_windows=10)
    model.eval()
    loop = np.zeros(tiny_cfg.video_feature_dim)
    with torch.no_grad():
        for s in window_starts(len(ep), tiny_cfg, 10):
            loop += model.pool(torch.as_tensor(window(ep, s, tiny_cfg)[None])).numpy()[0]
    assert np.allclose(rep, loop / 10, atol=1e-6)


def test_recall_monotone_and_ties():
    rng = np.random.default_rng(0)
    g = rng.standard_normal((40, 6))
    gl = np.repeat(np.arange(8), 5)
    rep = retrieve_from_features(rng.standard_normal((16, 6)), np.repeat(np.arange(8), 2), g, gl)
    values = [rep.recalls[k] for k in sorted(rep.recalls)]
    assert values == sorted(values)
    # identical gallery rows: the lower index wins
    gallery = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    tie = retrieve_from_features(np.array([[1.0, 0.0]]), [7], gallery, [7, 3, 3], ks=(1,))
    assert tie.recalls[1] == 1.0
    tie = retrieve_from_features(np.array([[1.0, 0.0]]), [3], gallery, [7, 3, 3], ks=(1, 2))
    assert tie.recalls == {1: 0.0, 2: 1.0}


def test_recall_errors():
    with pytest.raises(DataShapeError):
        retrieve_from_features(np.ones((1, 2)), [0], np.zeros((0, 2)), [])
    with pytest.raises(DataShapeError):
        retrieve_from_features(np.zeros((0, 2)), [], np.ones((1, 2)), [0])
    with pytest.raises(ZeroNormError):
        retrieve_from_features(np.zeros((1, 2)), [0], np.ones((1, 2)), [0])


def test_random_features_sit_at_chance():
    labels = np.repeat(np.arange(8), 5)
    gallery = np.repeat(np.arange(8), 20)
    rep = random_feature_recall(labels, gallery, draws=40, seed=3)
    assert abs(rep.recalls[1] - 1 / 8) <= 0.05


def test_retrieve_on_corpus(tiny_cfg, tiny_corpus):
    torch.manual_seed(0)
    rep = retrieve(VideoEncoder(tiny_cfg), tiny_corpus)
    assert rep.num_queries == len(tiny_corpus.test) and rep.gallery_size == len(tiny_corpus.train)
    assert list(rep.recalls.values()) == sorted(rep.recalls.values())


def _report(source, per_class_correct, classes, per=5):
    confusion = np.zeros((len(classes), len(classes)), dtype=int)
    for i, right in enumerate(per_class_correct):
        confusion[i, i] = right
        confusion[i, (i + 1) % len(classes)] = per - right
    return EvalReport.from_confusion(confusion, classes, source, 0)


def test_per_class_groups(tmp_path):
    classes = list(range(8))
    kinds = [TAXONOMY[c].kind for c in classes]
    f_d = _report("f_d", [5 if k == "motion" else 1 for k in kinds], classes)
    f_s = _report("f_s", [1 if k == "motion" else 5 for k in kinds], classes)
    table = per_class_report({"f_d": f_d, "f_s": f_s})
    assert table["groups"]["motion"]["f_d"] == 1.0 and table["groups"]["motion"]["f_s"] == 0.2
    assert table["groups"]["context"]["f_s"] == 1.0
    assert table["groups"]["motion"]["f_d"] - table["groups"]["motion"]["f_s"] == pytest.approx(0.8)
    write_per_class_csv(table, tmp_path / "pc.csv")
    assert "motion mean" in (tmp_path / "pc.csv").read_text()
    with pytest.raises(ConfigValueError):
        per_class_report({})
    with pytest.raises(ConfigValueError):
        per_class_report({"a": f_d, "b": _report("b", [1, 1], [0, 1])})


def test_spearman_cases():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == (pytest.approx(1.0), False)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1])[0] == pytest.approx(-1.0)
    rho, flag = spearman([1, 2, 3], [5, 5, 5])
    assert math.isnan(rho) and flag


def test_correlation_from_rows():
    rows = [{"downstream_top1": d, "context_top1": d * 2, "pose_mse": 1 - d, "video_quality": 0.5}
            for d in (0.1, 0.3, 0.2, 0.6, 0.5)]
    table = correlation_from_rows(rows)
    assert table.rho["context_top1"] == pytest.approx(1.0)
    assert table.rho["pose_mse"] == pytest.approx(-1.0)
    assert table.undefined["video_quality"]


def test_correlation_needs_three(tiny_corpus, ft):
    with pytest.raises(ConfigValueError):
        correlation_study([None, None], tiny_corpus, ft)


def test_test_windows_empty(tiny_cfg):
    with pytest.raises(DataShapeError):
        evals.test_windows([], tiny_cfg)


def test_finetune_sources(tmp_path, tiny_cfg, tiny_corpus, ft):
    state = init_state(tiny_cfg, TrainConfig(seed=0))
    path = save_checkpoint(state, tmp_path / "ck.safetensors")
    before = path.read_bytes()
    for source in ("f_d", "f_s", "f_i", "f_i_full"):
        _, rep = finetune(path, source, tiny_corpus, ft)
        assert rep.feature_source == source and 0 <= rep.top1 <= 1
        assert rep.confusion.sum() == len(tiny_corpus.test) * evals.TEST_WINDOWS
    assert path.read_bytes() == before
    with pytest.raises(ConfigValueError):
        finetune(None, "f_s", tiny_corpus, ft)
    with pytest.raises(ConfigValueError):
        finetune(path, "bogus", tiny_corpus, ft)


def test_finetune_is_deterministic(tiny_corpus, ft):
    _, a = finetune(None, "scratch", tiny_corpus, ft)
    _, b = finetune(None, "scratch", tiny_corpus, ft)
    assert np.array_equal(a.confusion, b.confusion) and a.top1 == b.top1


def test_finetune_leaves_in_memory_state_untouched(tiny_cfg, tiny_corpus, ft):
    state = init_state(tiny_cfg, TrainConfig(seed=0))
    snapshot = {k: v.clone() for k, v in state.nets.flat_state().items()}
    finetune(state, "f_i_full", tiny_corpus, ft)
    assert all(torch.equal(v, snapshot[k]) for k, v in state.nets.flat_state().items())


def test_linear_probe_freezes_backbone(tiny_cfg, tiny_corpus, ft):
    state = init_state(tiny_cfg, TrainConfig(seed=0))
    model, _ = finetune(state, "f_s", tiny_corpus, ft, linear_probe=True)
    original = state.nets.v_net.state_dict()
    for k, v in model.state_dict().items():
        if not k.startswith(("classifier", "head")) and "running" not in k and "num_batches" not in k:
            assert torch.equal(v, original[k]), k
