import pytest

from coopinit.config import KEYS, ConfigError, RunConfig, load, parse_text


def test_defaults_build_a_plan():
    plan = RunConfig().plan()
    assert plan.mode == "mix" and plan.phase2_epochs == 10 and plan.weight_decay == 1e-4


def test_file_and_overrides(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text("# comment\nmode = baseline-tpt  # trailing\n\nphase2.lr.step_every = 7\nseed = 1\n")
    cfg = load(str(path), ("seed=3", "seed=4", "gamma = elu"))
    plan = cfg.plan()
    assert (plan.mode, plan.seed, plan.gamma.kind) == ("baseline-tpt", 4, "elu")
    assert plan.phase2_schedule.step_every == 7
    assert "seed = 4" in cfg.dumps()


def test_resolved_config_reloads_identically(tmp_path):
    cfg = load(None, ("mode=wnla", "phase1.fraction=0.3", "augment=true"))
    (tmp_path / "r.cfg").write_text(cfg.dumps())
    again = load(str(tmp_path / "r.cfg"))
    assert again.raw == cfg.raw
    assert again.plan().fingerprint() == cfg.plan().fingerprint()


def test_unknown_key_names_it():
    with pytest.raises(ConfigError, match="phse1_fraction"):
        load(None, ("phse1_fraction=0.1",))


def test_bad_value_names_key():
    with pytest.raises(ConfigError, match="batch_size"):
        load(None, ("batch_size=lots",))
    with pytest.raises(ConfigError, match="gamma"):
        load(None, ("gamma=mix(relu,elu)",))


def test_baseline_without_phase1_keys(tmp_path):
    (tmp_path / "b.cfg").write_text("mode = baseline\nphase2.epochs = 3\n")
    assert load(str(tmp_path / "b.cfg")).plan().phase1_epochs == 0


def test_malformed_line():
    with pytest.raises(ConfigError, match="line|:2:"):
        parse_text("mode = mix\njust words\n")


def test_missing_file():
    with pytest.raises(ConfigError):
        load("/nonexistent/x.cfg")


def test_augment_auto():
    assert RunConfig({"dataset": "cifar10"}).augment() is True
    assert RunConfig({"dataset": "mnist"}).augment() is False


def test_every_plan_field_is_addressable():
    plan_fields = {"mode", "gamma", "phase1.mixture", "phase1.fraction", "phase1.lr.base", "phase1.lr.factor",
                   "phase1.lr.step_every", "phase2.epochs", "phase2.lr.base", "phase2.lr.factor",
                   "phase2.lr.step_every", "sgd.momentum", "sgd.weight_decay", "batch_size", "seed",
                   "dataset_fraction", "augment", "init", "dtype", "lr_chain", "baseline_schedule",
                   "reset_momentum", "eval_batch_size", "arch"}
    assert plan_fields <= set(KEYS)
