import dataclasses

import numpy as np
import pytest

from coopinit import checkpoint as C
from coopinit.activations import ActivationSpec, MixedActivation
from coopinit.data import make_synthetic_xor
from coopinit.optim import StepSchedule
from coopinit.trainer import (METRICS_HEADER, PlanError, TrainPlan, export_features, phase_swap,
                              read_metrics_csv, reduced_data_study, run_plan, write_metrics_csv,
                              epoch_fraction_sweep, initial_network)

from conftest import mnist_like

RELU = ActivationSpec("relu")


def lenet_plan(**kw):
    base = dict(arch="lenet-mnist", phase2_epochs=2, phase1_fraction=0.5, batch_size=32, seed=1,
                phase1_schedule=StepSchedule(0.01, 5, 1), phase2_schedule=StepSchedule(0.01, 5, 1))
    base.update(kw)
    return TrainPlan(**base)


@pytest.fixture(scope="module")
def tiny():
    return mnist_like(96, 48, seed=3)


def csv_text(tmp_path, name, records):
    write_metrics_csv(tmp_path / name, records)
    return (tmp_path / name).read_text()


def test_phase1_epoch_rounding():
    assert TrainPlan(phase2_epochs=300, phase1_fraction=0.2).phase1_epochs == 60
    assert TrainPlan(phase2_epochs=3, phase1_fraction=0.2).phase1_epochs == 1
    assert TrainPlan(phase2_epochs=5, phase1_fraction=0.1).phase1_epochs == 1
    assert TrainPlan(phase2_epochs=4, phase1_fraction=0.1).phase1_epochs == 0
    assert TrainPlan(mode="baseline", phase2_epochs=10).phase1_epochs == 0


def test_stage_layout():
    plan = TrainPlan(mode="mix", phase2_epochs=10)
    st = plan.stages()
    assert [(s.phase, s.epochs) for s in st] == [(1, 2), (2, 10)]
    assert isinstance(st[0].act, MixedActivation) and st[1].act == RELU
    assert [s.act.kind for s in TrainPlan(mode="wnla").stages()] == ["identity", "identity"]
    assert len(TrainPlan(mode="baseline").stages()) == 1


def test_plan_validation():
    with pytest.raises(PlanError):
        TrainPlan(mode="nope").validate()
    with pytest.raises(PlanError):
        TrainPlan(gamma=ActivationSpec("identity")).validate()
    with pytest.raises(PlanError):
        TrainPlan(dataset_fraction=0.0).validate()


def test_plan_dict_round_trip():
    plan = TrainPlan(mode="mix", gamma=ActivationSpec("prelu"))
    assert TrainPlan.from_dict(plan.to_dict()) == plan
    assert plan.fingerprint() == TrainPlan.from_dict(plan.to_dict()).fingerprint()
    assert plan.fingerprint() != dataclasses.replace(plan, seed=9).fingerprint()


def test_vacuous_baseline(tiny):
    ck, recs = run_plan(lenet_plan(mode="baseline", phase2_epochs=0), tiny)
    assert recs == []
    fresh = initial_network(lenet_plan(mode="baseline", phase2_epochs=0))
    for n, v in ck.params.items():
        np.testing.assert_array_equal(v, fresh.params[n].data)


def test_degenerate_plans_match(tmp_path, tiny):
    one_relu = MixedActivation((RELU,), (1.0,))
    texts = [
        csv_text(tmp_path, "mix.csv", run_plan(lenet_plan(mode="mix", mixture=one_relu), tiny)[1]),
        csv_text(tmp_path, "tpt.csv", run_plan(lenet_plan(mode="baseline-tpt"), tiny)[1]),
        csv_text(tmp_path, "cat.csv", run_plan(lenet_plan(mode="baseline", baseline_schedule="concatenated"), tiny)[1]),
    ]
    assert texts[0] == texts[1] == texts[2]
    assert texts[0].count("\n") == 1 + 3


def test_metrics_header_and_phases(tiny, tmp_path):
    _, recs = run_plan(lenet_plan(mode="mix"), tiny)
    write_metrics_csv(tmp_path / "m.csv", recs)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(METRICS_HEADER)
    assert [(r.epoch, r.phase) for r in recs] == [(0, 1), (0, 2), (1, 2)]
    assert [r.lr for r in recs] == pytest.approx([0.01, 0.01, 0.002], rel=1e-15)
    back = read_metrics_csv(tmp_path / "m.csv")
    assert [r.epoch for r in back] == [0, 0, 1]


def test_lr_chain_mode(tiny):
    _, recs = run_plan(lenet_plan(mode="mix", phase2_epochs=2, phase1_fraction=1.0, lr_chain="chain"), tiny)
    assert [r.lr for r in recs] == pytest.approx([0.01, 0.002, 0.002, 0.0004], rel=1e-15)


def test_swap_conserves_weights_and_drops_slopes(tmp_path):
    net = initial_network(lenet_plan(mode="mix"))
    x = np.random.default_rng(0).standard_normal((2, 1, 28, 28)).astype(np.float32)
    C.save(tmp_path / "before.ckpt", C.Checkpoint.from_network(net))
    weights = {n: net.params[n].data.copy() for n in net.weight_names()}
    phase_swap(net, RELU)
    assert not [n for n in net.params if "prelu_slope" in n]
    for n, v in weights.items():
        np.testing.assert_array_equal(net.params[n].data, v)
    C.save(tmp_path / "after.ckpt", C.Checkpoint.from_network(net))
    np.testing.assert_array_equal(C.load(tmp_path / "after.ckpt").to_network().forward(x).data,
                                  net.forward(x).data)
    before = C.load(tmp_path / "before.ckpt").to_network()
    assert any("prelu_slope" in n for n in before.params)


def test_prelu_gamma_gets_fresh_slopes():
    net = initial_network(lenet_plan(mode="mix"))
    net.params["conv1.act.mix1.prelu_slope"].assign(np.full(20, 0.9, np.float32))
    phase_swap(net, ActivationSpec("prelu"))
    assert np.all(net.params["conv1.act.prelu_slope"].data == np.float32(0.25))


def test_resume_matches_uninterrupted(tmp_path, tiny):
    plan = lenet_plan(mode="mix", gamma=ActivationSpec("prelu"))
    full_ck, full = run_plan(plan, tiny)
    part_ck, first = run_plan(plan, tiny, stop_after=1)
    C.save(tmp_path / "mid.ckpt", part_ck)
    rest_ck, rest = run_plan(plan, tiny, resume=C.load(tmp_path / "mid.ckpt"))
    assert all(np.isfinite(r.train_loss) for r in full)
    assert csv_text(tmp_path, "a", full) == csv_text(tmp_path, "b", first + rest)
    for n, v in full_ck.params.items():
        np.testing.assert_array_equal(rest_ck.params[n], v)


def test_resume_rejects_other_plan(tiny):
    ck, _ = run_plan(lenet_plan(mode="mix"), tiny, stop_after=1)
    with pytest.raises(PlanError):
        run_plan(lenet_plan(mode="mix", seed=5), tiny, resume=ck)


def test_seed_determinism(tiny, tmp_path):
    a = run_plan(lenet_plan(mode="baseline"), tiny)[1]
    b = run_plan(lenet_plan(mode="baseline"), tiny)[1]
    assert csv_text(tmp_path, "a", a) == csv_text(tmp_path, "b", b)


def test_dataset_mismatch_rejected(tiny):
    with pytest.raises(PlanError):
        run_plan(TrainPlan(arch="xor-mlp"), tiny)


def test_export_features(tmp_path, tiny):
    ck, _ = run_plan(lenet_plan(mode="baseline", phase2_epochs=1), tiny)
    n = export_features(ck, tiny.x_test[:10], tiny.y_test[:10], "flatten", tmp_path / "f.tsv")
    lines = (tmp_path / "f.tsv").read_text().splitlines()
    assert n == 10 and len(lines) == 11
    assert all(len(line.split("\t")) == 481 for line in lines)
    assert lines[0].startswith("label\tf0\tf1")
    empty = export_features(ck, tiny.x_test[:0], tiny.y_test[:0], "flatten", tmp_path / "e.tsv")
    assert empty == 0 and len((tmp_path / "e.tsv").read_text().splitlines()) == 1
    with pytest.raises(KeyError, match="conv2.act"):
        export_features(ck, tiny.x_test, tiny.y_test, "nope", tmp_path / "x.tsv")


def test_reduced_data_study_full_fraction_matches_run(tiny):
    plan = lenet_plan(mode="baseline", phase2_epochs=1)
    study = reduced_data_study(plan, tiny, 1.0)
    last = run_plan(plan, tiny)[1][-1]
    assert study == {"train_acc": last.train_acc, "test_acc": last.test_acc,
                     "gap": last.train_acc - last.test_acc}
    with pytest.raises(ValueError):
        reduced_data_study(plan, tiny, 0.01)


def test_epoch_fraction_sweep_single_row(tiny):
    table = epoch_fraction_sweep(lenet_plan(mode="mix", phase2_epochs=1), tiny, [1.0])
    assert list(table) == [1.0]
    with pytest.raises(PlanError):
        epoch_fraction_sweep(lenet_plan(mode="mix"), tiny, [0.0])


def test_xor_mlp_learns():
    data = make_synthetic_xor(400, 0)
    _, recs = run_plan(TrainPlan(mode="mix", arch="xor-mlp", phase2_epochs=5), data)
    assert recs[-1].test_acc > 95
