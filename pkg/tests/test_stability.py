import numpy as np
import pytest

from maskfed.core import ConfigError, DomainBall
from maskfed.data import ObjectiveSpec, estimate_constants, gen_clients, gen_like
from maskfed.masking import DATA_NS, MaskPlan, substream
from maskfed.stability import (
    coupled_run,
    generalization_gap,
    loglog_slope,
    make_neighbor,
)
from maskfed.trainer import TrainConfig

BALL = DomainBall(10.0)


def quad_setup(N=2, n=20, d=4, het=0.5, seed=3):
    datasets = gen_clients(N, n, d, het, "quadratic", seed)
    spec = ObjectiveSpec("quadratic", ridge=0.0)
    return spec, datasets


def test_make_neighbor_differs_in_exactly_one_sample():
    _, datasets = quad_setup()
    rng = substream(0, 50)
    pair = make_neighbor(datasets, i=1, j=7, rng=rng)
    diff_count = 0
    for a, b in zip(pair.base, pair.perturbed):
        feature_rows = np.any(a.features != b.features, axis=1)
        target_rows = a.targets != b.targets
        diff_count += int(np.sum(feature_rows | target_rows))
        assert a.generator.params_equal(b.generator)
    assert diff_count == 1
    assert np.any(pair.perturbed[1].features[7] != pair.base[1].features[7])


def test_make_neighbor_identity_is_bitwise_equal():
    _, datasets = quad_setup()
    pair = make_neighbor(datasets, 0, 3, substream(1, 51), identity=True)
    for a, b in zip(pair.base, pair.perturbed):
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.targets, b.targets)


def test_make_neighbor_bad_indices():
    _, datasets = quad_setup()
    with pytest.raises(ConfigError):
        make_neighbor(datasets, 5, 0, substream(0, 0))
    with pytest.raises(ConfigError):
        make_neighbor(datasets, 0, 99, substream(0, 0))


def coupled_config(spec, datasets, plan, **overrides):
    kwargs = dict(
        spec=spec, datasets=datasets, plan=plan, K=2, rounds=8, ball=BALL,
        seed=17, eta=0.05, compute_mask_metrics=False,
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def test_identity_perturbation_zero_divergence():
    spec, datasets = quad_setup()
    plan = MaskPlan(mode="random", p=np.full(2, 0.5))
    pair = make_neighbor(datasets, 0, 2, substream(2, 52), identity=True)
    res = coupled_run(coupled_config(spec, datasets, plan), pair)
    assert res.param_divergence == 0.0
    assert res.loss_divergence == 0.0
    assert res.base.rng_digest == res.perturbed.rng_digest


def test_one_step_divergence_closed_form():
    # N=1, K=1, R=1, full mask: both runs take a single stochastic step from
    # zero and one full-batch output step; reproduced here with literal
    # array arithmetic on both datasets.
    spec, datasets = quad_setup(N=1, n=12)
    plan = MaskPlan(mode="full", p=np.ones(1))
    eta = 0.07
    seed = 23
    huge = DomainBall(1e12)
    consts = estimate_constants(spec, datasets, huge, np.ones(1), trials=16, seed=0)

    idx = int(substream(seed, DATA_NS, 0, 0).integers(0, datasets[0].n, size=1)[0])
    pick = substream(seed, 60)
    pair = make_neighbor(datasets, 0, idx, pick)
    cfg = coupled_config(spec, datasets, plan, K=1, rounds=1, seed=seed,
                         eta=eta, ball=huge, constants=consts)
    res = coupled_run(cfg, pair)

    def hand_what(ds):
        a, b = ds.features[idx], float(ds.targets[idx])
        w1 = -eta * a * (a @ np.zeros(4) - b)
        grad = np.zeros(4)
        for k in range(ds.n):
            grad += ds.features[k] * (ds.features[k] @ w1 - ds.targets[k])
        grad /= ds.n
        return w1 - grad / consts.L

    expect = float(np.linalg.norm(hand_what(pair.base[0]) - hand_what(pair.perturbed[0])))
    assert res.param_divergence == pytest.approx(expect, rel=1e-12)
    assert res.param_divergence > 0


def test_coupled_run_rolling_mode():
    spec, datasets = quad_setup(N=2, d=4)
    plan = MaskPlan(mode="rolling", s=np.full(2, 2), R=4)
    pair = make_neighbor(datasets, 1, 5, substream(3, 53))
    cfg = coupled_config(spec, datasets, plan, rounds=4, epochs=3)
    res = coupled_run(cfg, pair)
    assert res.param_divergence >= 0
    assert res.base.rng_digest == res.perturbed.rng_digest
    assert res.lipschitz_surrogate >= res.param_divergence * 0  # G >= 0


def test_generalization_gap_zero_on_train():
    spec, datasets = quad_setup()
    w = substream(4, 54).normal(size=4)
    assert generalization_gap(spec, w, datasets, datasets) == 0.0


def test_generalization_gap_nonnegative_fresh_split():
    spec, datasets = quad_setup(het=0.8)
    test = gen_like(datasets, 50, seed=3, split=1)
    w = substream(5, 55).normal(size=4)
    gap = generalization_gap(spec, w, datasets, test)
    assert gap >= 0
    with pytest.raises(ConfigError):
        generalization_gap(spec, w, datasets, [])


def test_loglog_slope_recovers_power_law():
    ns = [50, 100, 200, 400]
    divs = [3.0 * n ** -0.5 for n in ns]
    assert loglog_slope(ns, divs) == pytest.approx(-0.5, abs=1e-12)


def test_generalization_bounded_by_lipschitz_stability_chain():
    # Measured generalization gap stays below G times the mean coupled
    # divergence plus a 3-standard-error noise band, on convex runs.
    import math

    from maskfed.data import ClientDataset, ClientGenerator, estimate_constants

    spec = ObjectiveSpec("quadratic", ridge=0.0)
    N, d, n, K = 4, 10, 50, 2
    scales = np.array([2.0, 2.0] + [0.1] * 8)
    gaps, divs, gs = [], [], []
    for si in range(12):
        seed = substream(808, n, si).integers(1 << 31)
        base = gen_clients(N, n, d, 0.0, "quadratic", int(seed))
        datasets = []
        for b in base:
            g0 = b.generator
            gen = ClientGenerator(g0.kind, g0.mean_shift, g0.w_gen, g0.label_bias, 1.0, scales)
            x, y = gen.draw(substream(int(seed), 5, b.client_id, 0), n)
            datasets.append(ClientDataset(b.client_id, x, y, gen))
        plan = MaskPlan(mode="random", p=np.ones(N))
        consts = estimate_constants(spec, datasets, BALL, plan.p, trials=16, seed=7)
        R = max(2 * n, math.ceil(consts.L_tilde * math.sqrt(N * n)))
        pick = substream(909, n, si)
        pair = make_neighbor(datasets, int(pick.integers(0, N)), int(pick.integers(0, n)), pick)
        cfg = TrainConfig(
            spec=spec, datasets=datasets, plan=plan, K=K, rounds=R, ball=BALL,
            seed=int(seed) ^ 3, eta="thm5", constants=consts, compute_mask_metrics=False,
        )
        res = coupled_run(cfg, pair)
        divs.append(res.param_divergence)
        test = gen_like(datasets, 300, seed=int(seed), split=1)
        gaps.append(generalization_gap(spec, res.base.w_hat, pair.base, test))
        gs.append(consts.G)
    G = max(gs)
    band = 3 * (np.std(gaps, ddof=1) / np.sqrt(12) + G * np.std(divs, ddof=1) / np.sqrt(12))
    assert np.mean(gaps) <= G * np.mean(divs) + band
