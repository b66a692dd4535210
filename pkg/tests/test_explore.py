"""Episode loop: scoring, certification gate, selection, data growth."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from safeshift.bounds import certify_trajectory, gamma
from safeshift.controller import ControllerGains
from safeshift.core import Dataset
from safeshift.explore import (
    ConfigError,
    ExperimentConfig,
    GpLearner,
    RobustLearner,
    default_config,
    make_learner,
    run_episode,
    run_experiment,
)
from safeshift.gp_baseline import gp_predict


class StubLearner:
    """Scripted sigma per candidate; no-op model hooks."""

    kind = "stub"

    def __init__(self, sigma_for=None, default=0.0):
        self.sigma_for = dict(sigma_for or {})
        self.default = default
        self.retrain_calls = 0

    def eval_candidate(self, traj, pts, src_kde):
        key = round(traj.params.get("C", 0.0), 10)
        return float(self.sigma_for.get(key, self.default)), None

    def d_hat_fn(self, src_kde, trg_kde):
        return lambda q, qdot: 0.0

    def bind(self, src_kde, trg_kde):
        pass

    def retrain(self, dataset, src_kde, trg_kde, rng):
        self.retrain_calls += 1

    def moment_residual_max(self):
        return math.nan


def tube02_config(**kw):
    # gains chosen so the tube gain is exactly sqrt(4.25)/k = 0.2
    k = 5.0 * math.sqrt(4.25)
    return ExperimentConfig(
        task="pendulum",
        gains=ControllerGains(k, 2.0),
        beta=1.0,
        amplitudes=(0.2, 0.6, 1.0),
        horizon=2.0,
        **kw,
    )


# -- config ---------------------------------------------------------------


def test_default_config_pendulum_values():
    cfg = default_config("pendulum", seed=7)
    assert cfg.task == "pendulum" and cfg.seed == 7
    assert cfg.beta == 0.5 and cfg.sigma0_sq == 0.5
    assert (cfg.gains.k, cfg.gains.lam) == (1.0, 2.0)
    assert cfg.horizon == 20.0 and cfg.episodes == 15
    assert cfg.model_kind == "robust"
    assert len(cfg.pool()) == 10


def test_default_config_landing_values():
    cfg = default_config("landing", seed=3, model_kind="gp_rbf")
    assert cfg.task == "landing" and cfg.model_kind == "gp_rbf"
    assert cfg.beta == 1.0 and cfg.sigma0_sq == 1.0
    assert (cfg.gains.k, cfg.gains.lam) == (3.2, 2.0)
    assert cfg.horizon == 10.0 and cfg.output_dim == 3
    assert len(cfg.pool()) == 60


@pytest.mark.parametrize(
    "kw, field_name",
    [
        (dict(task="rover"), "task"),
        (dict(episodes=0), "episodes"),
        (dict(beta=0.0), "beta"),
        (dict(sigma0_sq=-1.0), "sigma0_sq"),
        (dict(sample_hz=0.0), "sample_hz"),
        (dict(output_dim=0), "output_dim"),
        (dict(model_kind="svm"), "model_kind"),
        (dict(cert_stride=0), "cert_stride"),
        (dict(label_noise=-0.1), "label_noise"),
        (dict(w_max=0.0), "w_max"),
    ],
)
def test_config_error_names_offending_field(kw, field_name):
    with pytest.raises(ConfigError, match=field_name):
        ExperimentConfig(**kw)


def test_default_config_unknown_task():
    with pytest.raises(ConfigError, match="task"):
        default_config("rover")


# -- selection logic ------------------------------------------------------


def test_three_candidate_worked_example():
    # sigma {0.1, 0.5, 4.0} with gamma 0.2 -> tubes {0.02, 0.1, 0.8};
    # worst excursions {0.22, 0.7, 1.8} against a 1.5 box: C=1.0 rejected,
    # cheapest certified survivor is C=0.6.
    cfg = tube02_config()
    stub = StubLearner({0.2: 0.1, 0.6: 0.5, 1.0: 4.0})
    out = run_episode(cfg.pool(), stub, None, cfg)
    assert out.status == "ok"
    assert out.chosen.params["C"] == pytest.approx(0.6)
    assert out.n_certified == 2
    assert out.sigma_max == pytest.approx(0.5)
    assert out.eps_m == pytest.approx(0.5)
    assert out.certification.rho == pytest.approx(0.1, rel=1e-12)


def test_outcome_unpacks_as_four_tuple():
    cfg = tube02_config()
    out = run_episode(cfg.pool(), StubLearner(default=0.0), None, cfg)
    status, chosen, rollout, new_data = out
    assert status == "ok"
    assert chosen is out.chosen and rollout is out.rollout and new_data is out.new_data


def test_single_certified_candidate_is_chosen_despite_cheaper_rejects():
    cfg = tube02_config()
    stub = StubLearner({0.2: 99.0, 0.6: 0.5, 1.0: 99.0})
    out = run_episode(cfg.pool(), stub, None, cfg)
    assert out.n_certified == 1
    assert out.chosen.params["C"] == pytest.approx(0.6)


def test_all_uncertified_yields_no_safe_candidate():
    cfg = tube02_config()
    out = run_episode(cfg.pool(), StubLearner(default=50.0), None, cfg)
    assert out.status == "no_safe_candidate"
    assert out.chosen is None and out.rollout is None and out.new_data is None
    assert out.n_certified == 0
    assert math.isnan(out.sigma_max) and math.isnan(out.eps_m)


def test_track_fallback_picks_max_margin():
    # all tubes blown: margins 1.5 - C - 10*0.2 favor the smallest amplitude
    cfg = tube02_config(track_fallback=True)
    out = run_episode(cfg.pool(), StubLearner(default=10.0), None, cfg)
    assert out.status == "ok"
    assert out.chosen.params["C"] == pytest.approx(0.2)


def test_zero_sigma_certifies_everything_and_picks_cost_argmin():
    cfg = replace(default_config("pendulum"), horizon=2.0)
    out = run_episode(cfg.pool(), StubLearner(default=0.0), None, cfg)
    assert out.n_certified == 10
    assert out.chosen.params["C"] == pytest.approx(1.0)
    # with sigma = 0 the budget is beta-invariant
    out_b = run_episode(
        replace(cfg, beta=7.0).pool(), StubLearner(default=0.0), None, replace(cfg, beta=7.0)
    )
    assert out_b.chosen.params["C"] == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(5))
def test_chosen_is_always_cheapest_certified(seed):
    cfg = replace(default_config("pendulum"), horizon=2.0)
    pool = cfg.pool()
    rng = np.random.default_rng(seed)
    sigmas = {round(t.params["C"], 10): float(s) for t, s in zip(pool, rng.uniform(0, 4, len(pool)))}
    out = run_episode(pool, StubLearner(sigmas), None, cfg)

    gv = gamma(cfg.tube())
    box = cfg.safety_set()
    certified = [
        t
        for t in pool
        if certify_trajectory(t, gv, cfg.beta * sigmas[round(t.params["C"], 10)], box).safe
    ]
    if not certified:
        assert out.status == "no_safe_candidate"
    else:
        expected = min(
            certified,
            key=lambda t: (t.cost, t.params.get("h_g", 0.0), -t.params.get("C", 0.0)),
        )
        assert out.chosen.params == expected.params
        assert out.n_certified == len(certified)


def test_landing_tie_break_prefers_lower_hover():
    # two hover candidates, both cost inf: tie-break goes to the lower h_g
    cfg = replace(default_config("landing"), rates=(0.5,), hovers=(0.5, 0.3))
    out = run_episode(cfg.pool(), StubLearner(default=0.0), None, cfg)
    assert out.chosen.params["h_g"] == pytest.approx(0.3)


def test_landing_tie_break_prefers_aggressive_rate():
    cfg = replace(default_config("landing"), rates=(0.3, 0.8), hovers=(0.2,))
    out = run_episode(cfg.pool(), StubLearner(default=0.0), None, cfg)
    assert out.chosen.params["C"] == pytest.approx(0.8)


def test_empty_pool_rejected():
    cfg = tube02_config()
    with pytest.raises(ValueError):
        run_episode([], StubLearner(), None, cfg)


# -- episode 1 with the real learner ---------------------------------------


def test_episode_one_runs_on_base_model_uncertainty():
    cfg = default_config("pendulum")
    learner = RobustLearner(cfg, np.random.default_rng(0))
    out = run_episode(cfg.pool(), learner, None, cfg)

    assert out.status == "ok"
    # untrained model: sigma is the prior everywhere, ratios pinned to 1
    assert out.sigma_max == pytest.approx(math.sqrt(0.5), rel=1e-12)
    assert out.eps_m == pytest.approx(0.5 * math.sqrt(0.5), rel=1e-12)
    assert out.certification.rho == pytest.approx(gamma(cfg.tube()) * out.eps_m, rel=1e-12)
    assert out.w_hat == 1.0
    # rho ~ 0.729 against the 1.5 box: amplitudes 0.1..0.7 certify
    assert out.n_certified == 7
    assert out.chosen.params["C"] == pytest.approx(0.7)
    # 20 s horizon sampled at 50 Hz
    assert len(out.new_data) == 1001
    assert out.new_data.targets.shape == (1001, 1)


# -- run_experiment bookkeeping --------------------------------------------


def test_dataset_growth_and_retrain_cadence():
    cfg = replace(
        default_config("pendulum"),
        episodes=3,
        sample_hz=5.0,
        max_train_points=5000,
    )
    stub = StubLearner(default=0.01)
    result = run_experiment(cfg, learner=stub)
    assert [r.status for r in result.records] == ["ok", "ok", "ok"]
    assert [r.n_train for r in result.records] == [101, 202, 303]
    assert stub.retrain_calls == 3
    assert result.violations == 0


def test_no_safe_candidate_skips_collection_and_retraining():
    cfg = replace(default_config("pendulum"), episodes=2)
    stub = StubLearner(default=50.0)
    result = run_experiment(cfg, learner=stub)
    assert [r.status for r in result.records] == ["no_safe_candidate"] * 2
    assert [r.n_train for r in result.records] == [0, 0]
    assert stub.retrain_calls == 0
    assert math.isnan(result.final_cost)


# -- learner factory --------------------------------------------------------


def test_make_learner_kinds():
    rng = np.random.default_rng(0)
    assert isinstance(make_learner(default_config("pendulum"), rng), RobustLearner)
    gp1 = make_learner(default_config("pendulum", model_kind="gp_rbf"), rng)
    gp2 = make_learner(default_config("pendulum", model_kind="gp_matern"), rng)
    assert isinstance(gp1, GpLearner) and gp1.hyper.kernel == "rbf" and gp1.kind == "gp_rbf"
    assert isinstance(gp2, GpLearner) and gp2.hyper.kernel == "matern52" and gp2.kind == "gp_matern"


def test_gp_learner_prior_sigma_and_zero_compensation():
    cfg = default_config("pendulum", model_kind="gp_rbf")
    learner = make_learner(cfg, np.random.default_rng(0))
    sigma, trg = learner.eval_candidate(cfg.pool()[0], None, None)
    assert sigma == pytest.approx(math.sqrt(cfg.gp.sigma_f_sq))
    assert trg is None
    assert learner.d_hat_fn(None, None)(0.3, -0.2) == 0.0


@pytest.mark.parametrize("model_kind", ["gp_rbf", "gp_matern"])
def test_gp_learner_d_hat_matches_posterior_mean(model_kind, rng):
    cfg = default_config("pendulum", model_kind=model_kind)
    learner = make_learner(cfg, rng)
    x = rng.normal(size=(8, 2))
    y = np.sin(x[:, 0:1]) * 0.5
    learner.retrain(Dataset(x, y), None, None, rng)
    fn = learner.d_hat_fn(None, None)
    for q, qdot in [(0.0, 0.0), (0.4, -1.1), (-0.9, 0.3)]:
        mu, _ = gp_predict(learner.model, np.array([q, qdot]))
        assert fn(q, qdot) == pytest.approx(float(mu[0]), abs=1e-10)
