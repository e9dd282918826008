import numpy as np
import pytest
from scipy.special import expit

from mdam.glm import GLM, LINEAR, LOGISTIC
from mdam.simgen import (
    PAPER_EXPECTED_N,
    PAPER_N,
    PopulationConfig,
    PopulationError,
    appendix_b,
    draw_poisson_sample,
    generate_population,
    inject_item_nonresponse,
    inject_unit_nonresponse,
    simulate_replicate,
    unit_nr_cell_probabilities,
)


@pytest.fixture(scope="module")
def pop():
    return generate_population(appendix_b(), np.random.default_rng(99))


def test_unit_propensity_mean(pop):
    assert abs(pop.u_latent.mean() - expit(-1.2)) < 0.005
    assert expit(-1.2) == pytest.approx(0.2315, abs=5e-5)


def test_weights_and_probabilities(pop):
    np.testing.assert_allclose(pop.w * pop.pi, 1.0)
    assert np.all((pop.pi > 0) & (pop.pi <= 1))
    assert pop.pi.sum() == pytest.approx(2000.0)


def test_null_model_is_fair_coin():
    cfg = PopulationConfig(
        N=100_000, nu0=0.0, omega1=(0.0, 0.0), theta1=0.0, omega2=(0.0, 0.0), theta2=0.0,
        omega3=(0.0, 0.0, 0.0), omega4=(0.0,) * 4,
    )
    p = generate_population(cfg, np.random.default_rng(1))
    assert np.all(np.abs(p.x[:, :4].mean(axis=0) - 0.5) < 4 * 0.5 / np.sqrt(p.N))
    probs = unit_nr_cell_probabilities(p)
    assert max(probs.values()) - min(probs.values()) < 0.02


def test_refit_recovers_omega6():
    cfg = appendix_b(N=1_000_000, expected_sample_size=2000)
    p = generate_population(cfg, np.random.default_rng(4))
    X = np.column_stack([np.ones(p.N), p.x[:, :5]])
    m = GLM(LINEAR).fit(X, p.x[:, 5])
    assert np.all(np.abs(m.coef_ - np.array(cfg.omega6)) < 0.02)


def test_census_sample_is_population():
    cfg = appendix_b(N=500, expected_sample_size=500)
    p = generate_population(cfg, np.random.default_rng(2))
    assert np.all(p.pi == 1.0)
    s = draw_poisson_sample(p, np.random.default_rng(3))
    np.testing.assert_array_equal(s.values, p.x)


def test_paper_scale_preset():
    cfg = appendix_b(paper_scale=True)
    assert cfg.N == PAPER_N and cfg.expected_sample_size == PAPER_EXPECTED_N
    assert appendix_b(theta1=-0.5).theta1 == -0.5
    with pytest.raises(PopulationError):
        PopulationConfig(sigma5=0.0)


def test_ht_total_unbiased(pop):
    r = np.random.default_rng(8)
    est = []
    for _ in range(2000):
        take = r.random(pop.N) < pop.pi
        est.append(np.sum(pop.w[take] * pop.x[take, 0]))
    est = np.array(est)
    truth = pop.x[:, 0].sum()
    assert abs(est.mean() - truth) < 3 * est.std(ddof=1) / np.sqrt(len(est))


def test_cell_probabilities_match_enumeration(pop):
    probs = unit_nr_cell_probabilities(pop)
    for (a, b), p in probs.items():
        cell = (pop.x[:, 0] == a) & (pop.x[:, 1] == b)
        assert p == np.count_nonzero(pop.u_latent & cell) / np.count_nonzero(cell)


def test_nonresponse_structure(pop):
    rep = simulate_replicate(pop, np.random.default_rng(5))
    t = rep.observed
    assert np.all(t.item_mask[t.unit_flag])
    resp = ~t.unit_flag
    assert not t.item_mask[resp][:, [0, 4]].any()  # X1 and X5 never item-missing
    for name in ("X2", "X3", "X4", "X6"):
        assert 0.15 < t.item_missing_rate(name) < 0.35
    np.testing.assert_array_equal(rep.complete.values[~t.item_mask], t.values[~t.item_mask])


def test_item_rates_over_replicates(pop):
    r = np.random.default_rng(6)
    rates = {n: [] for n in ("X2", "X3", "X4", "X6")}
    for _ in range(10):
        t = simulate_replicate(pop, r).observed
        resp = ~t.unit_flag
        for n in rates:
            rates[n].append(t.item_mask[resp, t.index(n)].mean())
    for n, v in rates.items():
        assert abs(np.mean(v) - 0.25) < 0.03


def test_item_nonresponse_switched_off(pop):
    off = (-np.inf, 0.0, 0.0, 0.0, 0.0, 0.0)
    cfg = appendix_b(phi={k: (off, p) for k, (_, p) in pop.config.phi.items()})
    s = draw_poisson_sample(pop, np.random.default_rng(1))
    t = inject_item_nonresponse(s, cfg, np.random.default_rng(2))
    assert not t.item_mask.any()


def test_icin_oracle():
    r = np.random.default_rng(10)
    cfg = appendix_b(N=150_000, expected_sample_size=150_000)
    p = generate_population(cfg, r)
    s = draw_poisson_sample(p, r)
    t = inject_item_nonresponse(s, cfg, r)
    X = np.column_stack([np.ones(t.n_rows), s.values[:, :5]])
    m = GLM(LOGISTIC).fit(X, t.item_mask[:, 1].astype(float))
    assert abs(m.coef_[2]) < 0.1  # coefficient on X2 itself


def test_seeded_determinism():
    cfg = appendix_b(N=20_000, expected_sample_size=500)
    a = simulate_replicate(generate_population(cfg, np.random.default_rng(1)), np.random.default_rng(2))
    b = simulate_replicate(generate_population(cfg, np.random.default_rng(1)), np.random.default_rng(2))
    assert np.array_equal(a.observed.values, b.observed.values, equal_nan=True)
    assert np.array_equal(a.observed.item_mask, b.observed.item_mask)


def test_keep_weights_option(pop):
    s = draw_poisson_sample(pop, np.random.default_rng(1))
    t = inject_unit_nonresponse(s, pop, np.random.default_rng(2), keep_weights=True)
    assert not np.isnan(t.design_weight).any()


def test_preset_parameter_values():
    cfg = appendix_b()
    assert cfg.nu0 == -1.2 and cfg.theta1 == -2.0 and cfg.theta2 == -2.0
    assert cfg.omega1 == (0.06, -0.0002) and cfg.omega2 == (0.2, 0.4)
    assert cfg.omega3 == (0.2, 0.3, 0.1) and cfg.omega4 == (0.2, 0.4, 0.4, 0.1)
    assert cfg.omega5 == (0.4, 1.2, -0.9, 0.1, 0.2) and cfg.sigma5 == 0.5
    assert cfg.omega6 == (0.4, 1.2, -0.9, 0.1, -0.1, 0.1) and cfg.sigma6 == 0.5
    for name in ("X2", "X3", "X4"):
        assert tuple(cfg.phi[name][0]) == (-1.4, 0.1, 0.1, 0.1, 0.1, 0.0)
    assert tuple(cfg.phi["X6"][0]) == (-1.4, 0.1, 0.1, 0.1, 0.1, 0.1)
    assert PAPER_N == 3_373_378 and PAPER_EXPECTED_N == 6000
