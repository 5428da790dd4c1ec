from dataclasses import replace

import numpy as np
import pytest
from sklearn.metrics import accuracy_score, f1_score, precision_score, recall_score

from conftest import tiny_config
from recalib import ad, hfs, train
from recalib import numkit as nk
from recalib.config import ExperimentConfig
from recalib.errors import ParameterError, TrainingError, ValidationError
from recalib.experiments import ablation_configs, config_diff
from recalib.model import STAGE_NAMES, Stages, forward
from recalib.numkit import Tensor, make_rng


# --- metrics --------------------------------------------------------------

def test_metrics_all_correct():
    m = train.metrics_from_predictions([0, 1, 1, 0], [0, 1, 1, 0])
    assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)


def test_metrics_all_positive_on_balanced():
    m = train.metrics_from_predictions([0, 1] * 5, [1] * 10)
    assert (m.accuracy, m.precision, m.recall) == (0.5, 0.5, 1.0)
    assert m.f1 == pytest.approx(2 / 3, abs=1e-15)


def test_metrics_all_negative_defines_zero():
    m = train.metrics_from_predictions([0, 1, 1], [0, 0, 0])
    assert m.precision == 0.0 and m.recall == 0.0 and m.f1 == 0.0


def test_metrics_against_confusion_oracle():
    rng = make_rng(0, "metrics")
    y, p = rng.integers(0, 2, 1000), rng.integers(0, 2, 1000)
    m = train.metrics_from_predictions(y, p)
    assert m.accuracy == pytest.approx(accuracy_score(y, p), abs=1e-15)
    assert m.precision == pytest.approx(precision_score(y, p), abs=1e-15)
    assert m.recall == pytest.approx(recall_score(y, p), abs=1e-15)
    assert m.f1 == pytest.approx(f1_score(y, p), abs=1e-15)


def test_metrics_guards():
    with pytest.raises(ParameterError):
        train.metrics_from_predictions([], [])
    with pytest.raises(ParameterError):
        train.metrics_from_predictions([0, 1], [0])


# --- losses -----------------------------------------------------------------

SMALL = tiny_config()


@pytest.fixture(scope="module")
def batch_out():
    model = train.build_model(SMALL)
    x = make_rng(1, "batch").normal(size=(6, SMALL.generator.T, SMALL.widths.d_in))
    y = np.array([0, 1, 0, 1, 1, 0], dtype=float)
    return model, forward(model, x, SMALL.stages, SMALL.dcr, SMALL.ad.beta, SMALL.ad.tau), y


def test_breakdown_sums_to_total(batch_out):
    model, out, y = batch_out
    total, parts = train.total_loss(model, out, y, SMALL)
    assert set(parts) == set(train.TERMS) | {"total"}
    assert abs(sum(v for k, v in parts.items() if k != "total") - total.value) < 1e-12
    assert parts["total"] == total.value


def test_zero_weight_removes_term(batch_out):
    model, out, y = batch_out
    weights = {"w_" + t: 0.0 for t in train.TERMS if t != "cls"}
    cfg = SMALL.override("loss", **weights)
    total, parts = train.total_loss(model, out, y, cfg)
    assert set(parts) == {"cls", "total"}
    assert total.value == ad.bce_with_logits(out["logit"], y).value


def test_scaling_one_weight_scales_its_term(batch_out):
    model, out, y = batch_out
    _, base = train.total_loss(model, out, y, SMALL)
    _, doubled = train.total_loss(model, out, y, SMALL.override("loss", w_flow=0.2))
    assert doubled["flow"] == pytest.approx(2 * base["flow"], rel=1e-12)
    assert all(doubled[k] == base[k] for k in train.TERMS if k != "flow")


def test_perfect_predictions_cost_nothing():
    y = np.array([1.0, 0.0, 1.0])
    assert ad.bce_with_logits(Tensor(np.array([60.0, -60.0, 60.0])), y).value < 1e-25


@pytest.mark.parametrize("stage,term", [("first_level", "orth"), ("first_level", "mi1"),
                                        ("graph_reg_1", "graph"), ("graph_reg_2", "flow"),
                                        ("second_level", "mi2"), ("distill", "distill"),
                                        ("noise_stream", "adv")])
def test_stage_toggle_drops_its_loss(stage, term):
    cfg = SMALL.with_stages(**{stage: False})
    model = train.build_model(cfg)
    x = make_rng(2, "batch").normal(size=(4, cfg.generator.T, cfg.widths.d_in))
    out = forward(model, x, cfg.stages, cfg.dcr, cfg.ad.beta, cfg.ad.tau)
    assert train.loss_terms(model, out, np.array([0.0, 1.0, 0.0, 1.0]), cfg)[term] is None


@pytest.mark.parametrize("stage", ["noise_stream", "emotion_stream", "second_level", "graph_update_1",
                                   "graph_update_2", "distill", "fuse"])
def test_stage_toggle_drops_parameters(stage):
    model = train.build_model(SMALL)
    full = {id(p) for p in model.trainable_parameters(Stages())}
    less = {id(p) for p in model.trainable_parameters(replace(Stages(), **{stage: False}))}
    assert less < full


def test_frozen_parameters_never_trainable():
    model = train.build_model(SMALL)
    frozen = {id(p) for p in model.frozen_parameters()}
    assert not frozen & {id(p) for p in model.trainable_parameters()}
    assert all(not p.requires_grad for p in model.gru.teacher_parameters())


# --- fitting --------------------------------------------------------------

@pytest.fixture(scope="module")
def fitted():
    return train.fit(SMALL.override("optim", epochs=3)), train.fit(SMALL.override("optim", epochs=3))


def test_fit_is_deterministic(fitted):
    a, b = fitted
    assert a.checkpoint.params.keys() == b.checkpoint.params.keys()
    assert all(np.array_equal(a.checkpoint.params[k], b.checkpoint.params[k]) for k in a.checkpoint.params)
    assert a.history == b.history


def test_returned_model_is_best_epoch(fitted):
    res = fitted[0]
    best = max(row["f1"] for row in res.history)
    assert res.history[res.best_epoch]["f1"] == best
    assert res.checkpoint.metrics["val_f1"] == best
    _, val, _ = train.make_data(SMALL)
    assert train.evaluate(res.model, val, SMALL).f1 == best


def test_emotion_stream_frozen_during_main_loop(fitted):
    # pretraining is deterministic, so any drift would come from the main loop
    zero = train.fit(SMALL.override("optim", epochs=0))
    names = {n for n, _ in zero.model.named_parameters() if n.startswith(("encoders.emotion", "emotion_head"))}
    assert names
    for n in names:
        assert np.array_equal(zero.checkpoint.params[n], fitted[0].checkpoint.params[n])


def test_untrained_model_is_at_chance():
    cfg = SMALL.override("optim", epochs=0).override("run", n_test=200)
    res = train.fit(cfg)
    _, _, test = train.make_data(cfg)
    assert res.best_epoch == 0 and len(res.history) == 1
    assert abs(train.evaluate(res.model, test, cfg).accuracy - 0.5) <= 0.15


def test_non_finite_loss_raises(monkeypatch):
    monkeypatch.setattr(hfs, "orth_loss_cosine", lambda a, b: Tensor(np.array(np.nan)))
    with pytest.raises(TrainingError) as exc:
        train.fit(SMALL)
    assert exc.value.diagnostics["term"] == "orth" and exc.value.diagnostics["epoch"] == 1


def test_pretrain_target_enforced():
    with pytest.raises(TrainingError, match="emotion pretraining"):
        train.fit(SMALL.override("optim", pretrain_target=1.01, pretrain_epochs=1))


def test_checkpoint_round_trip(fitted, tmp_path):
    res = fitted[0]
    p1, p2 = tmp_path / "a.rckp", tmp_path / "b.rckp"
    train.save_checkpoint(p1, res.checkpoint)
    back = train.load_checkpoint(p1)
    train.save_checkpoint(p2, back)
    assert p1.read_bytes() == p2.read_bytes()
    assert back.epoch == res.checkpoint.epoch and back.metrics == res.checkpoint.metrics
    assert back.config.hash() == SMALL.override("optim", epochs=3).hash()
    model, cfg = train.model_from_checkpoint(back)
    _, _, test = train.make_data(cfg)
    x, _ = train.stack(test)
    from recalib.model import predict_proba
    assert np.array_equal(predict_proba(model, x, cfg.stages, cfg.dcr, cfg.ad.beta),
                          predict_proba(res.model, x, cfg.stages, cfg.dcr, cfg.ad.beta))


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.rckp"
    p.write_bytes(b"ABCD" + bytes(20))
    with pytest.raises(ValueError):
        train.load_checkpoint(p)


def test_history_csv_format(fitted, tmp_path):
    res = fitted[0]
    path = tmp_path / "history.csv"
    train.write_history(path, res.history)
    lines = path.read_text().splitlines()
    assert lines[0] == train.CSV_VERSION
    assert lines[1].split(",") == list(train.HISTORY_COLUMNS)
    rows = train.read_csv(path)
    assert len(rows) == len(res.history)
    for got, want in zip(rows, res.history):
        assert int(got["epoch"]) == want["epoch"] and float(got["f1"]) == want["f1"]
        assert float(got["loss_total"]) == want["loss_total"]


def test_split_is_disjoint_and_seeded():
    seqs = list(range(50))
    tr, va = train.split_train_val(seqs, 0.2, 3)
    assert len(va) == 10 and sorted(tr + va) == seqs
    assert train.split_train_val(seqs, 0.2, 3) == (tr, va)
    assert train.split_train_val(seqs, 0.2, 4) != (tr, va)


# --- configuration --------------------------------------------------------

def test_defaults_validate_and_round_trip():
    cfg = ExperimentConfig()
    back = ExperimentConfig.from_text(cfg.to_text())
    assert back == cfg and back.hash() == cfg.hash()


def test_hash_ignores_layout():
    a = "[optim]\nlr = 0.01\nepochs = 5\n\n[ad]\nbeta = 0.25\n"
    b = "[ad]\nbeta=0.250\n[optim]\nepochs = 5\nlr = 1e-2\n"
    assert ExperimentConfig.from_text(a).hash() == ExperimentConfig.from_text(b).hash()
    assert ExperimentConfig.from_text(a).hash() != ExperimentConfig().hash()


@pytest.mark.parametrize("text,field", [
    ("[optim]\nlearning_rate = 1\n", "optim.learning_rate"),
    ("[bogus]\nx = 1\n", "bogus"),
    ("[optim]\nepochs = many\n", "optim.epochs"),
    ("[stages]\nfuse = maybe\n", "stages.fuse"),
    ("[dcr]\nK = 0\n", "dcr.K"),
    ("[generator]\nnoise_level = -1\n", "generator.noise_level"),
    ("[ad]\nbeta = 2\n", "ad.beta"),
    ("[loss]\nw_cls = 0\n", "loss.w_cls"),
])
def test_invalid_config_names_field(text, field):
    with pytest.raises(ValidationError) as exc:
        ExperimentConfig.from_text(text)
    assert exc.value.field == field


def test_with_seed_sets_both_seeds():
    cfg = ExperimentConfig().with_seed(7)
    assert cfg.run.seed == 7 and cfg.generator.seed == 7


def test_ablation_grid_shape():
    rows = ablation_configs(ExperimentConfig())
    names = [n for n, _ in rows]
    assert len(rows) == 20 and names.count("full") == 1
    assert len(set(names)) == 20


def test_ablation_rows_toggle_one_stage():
    base = ExperimentConfig()
    rows = ablation_configs(base)
    for (name, cfg), stage in zip(rows, STAGE_NAMES):
        assert config_diff(base, cfg) == [f"stages.{stage}"]
    for name, cfg in rows[len(STAGE_NAMES):]:
        assert len(config_diff(base, cfg)) <= 1
