import filecmp
from pathlib import Path

import numpy as np
import pytest

from learnsam.cli import main
from learnsam.config import ConfigError, from_dict, load_config
from learnsam.harness import (
    CENSORED,
    MetricReport,
    RunResult,
    build_env,
    convergence_check,
    iterations_to_threshold,
    make_demonstrations,
    run_baseline,
    run_learn_sam,
    run_method,
    sweep,
)
from learnsam.lambdas import ConstantLambda
from learnsam.learner import LOG_COLUMNS, LearnSAM, TrainingLog

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = [
    "env.size=5",
    "budget.total_steps=768",
    "budget.steps_per_epoch=256",
    "budget.eval_episodes=2",
    "demo.n_pairs=40",
    "policy.hidden=[8]",
    "policy.value_hidden=[8]",
    "trpo.value_iters=10",
]


def small(*extra, seed=0):
    return load_config(None, SMALL + list(extra), seed)


def csv_bytes(log, tmp_path, name):
    p = tmp_path / name
    log.to_csv(p)
    return p.read_bytes()


# -- configuration ---------------------------------------------------------


def test_shipped_configs_load():
    g = load_config(CONFIGS / "gridworld12.yaml")
    assert g.env.size == 12 and g.sam.c == 400.0 and g.n_epochs == 20
    p = load_config(CONFIGS / "pointmass.yaml")
    assert p.env.kind == "pointmass" and not p.demo.analytic_expert


def test_overrides_and_seed():
    cfg = load_config(CONFIGS / "gridworld12.yaml", ["sam.c=4", "lambda.metric=zero_one", "demo.noise_sd=1"], 7)
    assert cfg.sam.c == 4.0 and cfg.lam.metric == "zero_one" and cfg.demo.noise_sd == 1.0 and cfg.seed == 7


@pytest.mark.parametrize("bad", ["nope.x=1", "sam.c=-1", "sam.c=abc", "demo.m=1.5", "method=sarsa", "sam.b=[1,0]",
                                 "env.kind=maze", "sam.enabled=3", "missing_equals", "lambda.metric=cosine"])
def test_bad_overrides_are_config_errors(bad):
    with pytest.raises(ConfigError):
        load_config(None, [bad])


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")
    (tmp_path / "x.yaml").write_text("sam: [1, 2]\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "x.yaml")


def test_resolved_config_reloads(tmp_path):
    cfg = load_config(CONFIGS / "gridworld12.yaml", ["sam.c=12.5"], 3)
    cfg.dump(tmp_path / "config.resolved")
    again = load_config(tmp_path / "config.resolved")
    assert again.to_dict() == cfg.to_dict()
    assert from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


# -- metrics ---------------------------------------------------------------


def test_iterations_to_threshold_examples():
    assert iterations_to_threshold([0.1, 0.5, 0.9, 0.95], 0.9) == 3
    assert iterations_to_threshold([0.1, 0.2], 0.9) == CENSORED
    assert iterations_to_threshold([0.95], 0.9) == 1


def _log(rewards):
    rows = []
    for i, r in enumerate(rewards):
        row = dict.fromkeys(LOG_COLUMNS, 0.0)
        row.update(epoch=i, env_steps=100 * i, eval_reward=r)
        rows.append(row)
    return TrainingLog(rows)


def test_training_log_counts_epochs():
    assert iterations_to_threshold(_log([0.2, 0.4, 1.0]), 1.0) == 2
    assert iterations_to_threshold(_log([1.0, 0.4]), 1.0) == 0
    assert iterations_to_threshold(_log([0.0, 0.0]), 1.0) == CENSORED


def test_convergence_check_examples():
    r = [0.1, 0.5, 0.90, 0.91, 0.905]
    assert convergence_check(r, 3, 0.02)
    assert not convergence_check(r, 4, 0.02)
    assert not convergence_check(r, 10, 0.02)
    assert convergence_check(_log(r), 3, 0.02)
    with pytest.raises(ValueError):
        convergence_check(r, 1, 0.1)


def test_log_requires_increasing_steps(tmp_path):
    log = _log([0.0, 0.5])
    with pytest.raises(ValueError):
        log.append(dict(log.records[-1]))
    log.to_csv(tmp_path / "l.csv")
    assert TrainingLog.from_csv(tmp_path / "l.csv").records == log.records


def test_metric_report_with_censoring():
    runs = [RunResult("x", i, _log(r), [], None, 1.0) for i, r in enumerate([[0, 1.0], [0, 0, 1.0], [0, 0, 0]])]
    rep = MetricReport.from_results("x", runs, budget_epochs=2)
    assert rep.n_censored == 1 and rep.iterations_mean == 1.5 and rep.iterations_median == 2.0
    assert rep.final_mean == pytest.approx(2 / 3)


# -- runs ------------------------------------------------------------------


def test_runs_are_reproducible(tmp_path):
    cfg = small()
    a = run_learn_sam(cfg)
    b = run_learn_sam(cfg)
    assert csv_bytes(a.log, tmp_path, "a.csv") == csv_bytes(b.log, tmp_path, "b.csv")
    assert list(a.log.column("epoch")) == [0, 1, 2, 3]
    assert np.all(np.diff(a.log.column("env_steps")) > 0)
    free = a.log.column("expert_free_weight")
    assert np.all((free >= 0) & (free <= 1))


def test_no_demonstrations_reduce_to_trpo(tmp_path):
    cfg = small("demo.m=0")
    a = run_learn_sam(cfg)
    b = run_baseline(cfg, "trpo")
    assert csv_bytes(a.log, tmp_path, "a.csv") == csv_bytes(b.log, tmp_path, "b.csv")


def test_trpo_ignores_demonstration_settings(tmp_path):
    a = run_baseline(small("demo.noise_sd=0.0"), "trpo")
    b = run_baseline(small("demo.noise_sd=1.0", "demo.n_pairs=10"), "trpo")
    assert csv_bytes(a.log, tmp_path, "a.csv") == csv_bytes(b.log, tmp_path, "b.csv")


def test_perfect_local_demo_is_followed():
    cfg = load_config(CONFIGS / "gridworld12.yaml", ["lambda.metric=zero_one", "demo.noise_sd=0", "demo.n_pairs=22",
                                                      "budget.total_steps=2048", "budget.eval_episodes=1"])
    res = run_learn_sam(cfg)
    assert res.threshold == 1.0
    assert res.log.eval_rewards[0] >= 0.9 and res.log.eval_rewards[1] >= 0.9


def test_pretraining_helps_at_the_start():
    cfg = load_config(CONFIGS / "gridworld12.yaml", ["demo.noise_sd=0", "budget.total_steps=2048",
                                                      "budget.eval_episodes=1"])
    pre = run_baseline(cfg, "pretrain")
    plain = run_baseline(cfg, "trpo")
    assert pre.log.eval_rewards[0] >= plain.log.eval_rewards[0]
    assert pre.log.eval_rewards[0] == 1.0


def test_naive_ensemble_is_unlocalised():
    res = run_baseline(small(), "naive_ensemble")
    ens = res.estimator.ensemble_
    assert all(isinstance(lam, ConstantLambda) for lam in ens.lambdas)
    assert not res.log.column("sam_applied").any()
    assert np.all(res.log.column("n_expert_slots") == 1)
    S = np.array([[0.0, 0.0], [4.0, 4.0]])
    np.testing.assert_allclose(ens.coefficients(S)[:, 1], ens.weights()[0])


def test_unknown_baseline():
    with pytest.raises(ValueError):
        run_baseline(small(), "sarsa")
    with pytest.raises(ValueError):
        LearnSAM(env=build_env(small()), method="sarsa").fit()


def test_demonstrations_are_seeded():
    cfg = small()
    env = build_env(cfg)
    a, b = make_demonstrations(cfg, env), make_demonstrations(cfg, env)
    np.testing.assert_array_equal(a[0].actions, b[0].actions)
    assert make_demonstrations(small("demo.m=0"), env) == []


# -- sweeps ----------------------------------------------------------------


def test_quality_sweep_grid(tmp_path):
    cfg = small("budget.total_steps=512")
    rows, reports = sweep(cfg, "quality", [0.0, 1.0], ["learn_sam", "trpo"], 2, tmp_path / "s.csv")
    assert len(rows) == 2 * 2 * 2 and len(reports) == 4
    for seed in (0, 1):
        trpo = {r["final_reward"] for r in rows if r["method"] == "trpo" and r["seed"] == seed}
        assert len(trpo) == 1
    assert (tmp_path / "s.csv").read_text().count("\n") == 9


def test_sparsity_sweep_nests_subsets():
    cfg = small("budget.total_steps=256")
    rows, _ = sweep(cfg, "sparsity", [10, 40], ["learn_sam"], 1)
    assert [r["n_pairs"] for r in rows] == [10, 40]
    with pytest.raises(ValueError):
        sweep(cfg, "size", [1], ["trpo"], 1)


# -- command line ----------------------------------------------------------


def _cli(cmd, out, *extra):
    args = [cmd, "--out", str(out), "--seed", "1"]
    for s in SMALL:
        args += ["--set", s]
    return main(args + list(extra))


def test_cli_learn_and_eval(tmp_path):
    assert _cli("learn", tmp_path / "l") == 0
    for name in ("log.csv", "metrics.csv", "demo.csv", "config.resolved", "policy.json", "timing.csv"):
        assert (tmp_path / "l" / name).exists(), name
    header = (tmp_path / "l" / "log.csv").read_text().splitlines()[0]
    assert header.split(",") == list(LOG_COLUMNS)
    assert _cli("eval", tmp_path / "e", "--policy", str(tmp_path / "l" / "policy.json"), "--episodes", "3") == 0
    assert (tmp_path / "e" / "metrics.csv").exists()


def test_cli_other_commands(tmp_path):
    assert _cli("train-expert", tmp_path / "t") == 0
    assert (tmp_path / "t" / "expert.json").exists()
    assert _cli("gen-demo", tmp_path / "g") == 0
    assert (tmp_path / "g" / "demo.csv").exists()
    assert _cli("baseline", tmp_path / "b", "--kind", "pretrain") == 0
    assert (tmp_path / "b" / "log.csv").exists()
    assert _cli("sweep", tmp_path / "s", "--set", "sweep.seeds=1", "--set", "sweep.values=[0.0]",
                "--set", "budget.total_steps=256") == 0
    assert (tmp_path / "s" / "sweep.csv").exists() and (tmp_path / "s" / "metrics.csv").exists()


def test_cli_runs_are_reproducible(tmp_path):
    assert _cli("learn", tmp_path / "a") == 0
    assert _cli("learn", tmp_path / "b") == 0
    assert filecmp.cmp(tmp_path / "a" / "log.csv", tmp_path / "b" / "log.csv", shallow=False)


def test_cli_exit_codes(tmp_path):
    assert _cli("learn", tmp_path / "x", "--set", "sam.nonsense=1") == 1
    assert _cli("eval", tmp_path / "y", "--policy", str(tmp_path / "absent.json")) == 1
    assert _cli("learn", tmp_path / "z", "--set", f"demo.expert_path={tmp_path / 'absent.json'}") == 2
