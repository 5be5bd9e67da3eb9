import warnings
from itertools import product

import numpy as np
import pytest

from mixfl.losses import LogisticDevice, QuadraticDevice
from mixfl.model import L1Regularizer, MixtureProblem, block_average, grad_F, objective_value
from mixfl.solvers import (
    CommCounter,
    ConfigError,
    ControlVariates,
    FullParticipation,
    ImportanceSingle,
    IndependentParticipation,
    IndependentSampling,
    IndexStream,
    JacobianRule,
    NumericalError,
    SolverConfig,
    SolverWarning,
    TauNice,
    TauNiceParticipation,
    UniformSingle,
    Variant,
    aggregation_replay,
    coin_bits,
    comm_rounds_expected,
    count_rounds,
    default_eso,
    direction,
    expected_direction,
    l2gd_step,
    run,
    stochastic_gradient_l2gd,
    target_gradient,
)
from mixfl.solvers.directions import l2sgd_plus_direction
from mixfl.theory import reference_solution

from conftest import logistic_problem, quadratic_problem

ALL_VARIANTS = list(Variant)


def trajectory(x0, P, cfg, **kw):
    path = []
    res = run(x0, P, cfg.with_(record_every=1), callback=lambda k, x: path.append(x), **kw)
    return np.array(path), res


# randomness and communication

def test_coin_frequency_and_determinism():
    k, p = 10 ** 6, 0.3
    bits = coin_bits(7, p, k)
    assert abs(bits.mean() - p) <= 3 * np.sqrt(p * (1 - p) / k)
    assert np.array_equal(bits, coin_bits(7, p, k))
    assert not np.array_equal(bits[:1000], coin_bits(8, p, 1000))


def test_streams_are_prefix_stable():
    a = IndexStream(3, 1, 10).take(5000)
    s = IndexStream(3, 1, 10)
    b = np.concatenate([s.take(7), s.take(4093), s.take(900)])
    assert np.array_equal(a, b)
    assert not np.array_equal(a, IndexStream(3, 2, 10).take(5000))


def test_count_rounds_example():
    coins = [0, 0, 1, 0, 1, 1, 1, 0]
    assert count_rounds(coins) == 2
    cc = CommCounter()
    cc.feed(coins[:3])
    cc.feed(coins[3:])
    assert cc.rounds == 2 and cc.switches == 4 and cc.length == 8
    assert count_rounds([1, 1]) == 1
    assert count_rounds([0, 0, 0]) == 0


def test_comm_rounds_expected():
    assert comm_rounds_expected(0.5, 1000) == 250
    assert comm_rounds_expected(0.1, 1000) == pytest.approx(90)
    with pytest.raises(ValueError):
        comm_rounds_expected(1.0, 10)


@pytest.mark.parametrize("p", [0.1, 0.5, 0.9])
def test_comm_rounds_monte_carlo(p):
    k = 10 ** 4
    q = p * (1 - p)
    for seed in range(5):
        got = count_rounds(coin_bits(seed, p, k))
        assert abs(got - q * k) <= 3 * np.sqrt(k * q * (1 - q)) + 1


# L2GD step and estimator

def test_l2gd_step_examples(rng):
    P, C = quadratic_problem(rng, n=4, d=3, lam=2.0)
    x = rng.standard_normal((4, 3))
    p = 0.3
    alpha = 0.5 * 4 * p / 2.0
    cfg = SolverConfig("L2GD", alpha, p, 0)
    agg = l2gd_step(x, P, cfg, 1)
    assert np.allclose(agg, 0.5 * (x + block_average(x)), atol=1e-15)
    assert np.max(np.abs(block_average(agg) - block_average(x))) <= 1e-13
    loc = l2gd_step(x, P, cfg, 0)
    assert np.allclose(loc, x - alpha / (4 * (1 - p)) * (x - C), atol=1e-14)


def test_l2gd_aggregation_preserves_average(rng):
    P, _ = quadratic_problem(rng, n=5, d=2, lam=1.0)
    cfg = SolverConfig("L2GD", 0.4, 0.4, 0)
    for _ in range(50):
        x = rng.standard_normal((5, 2)) * 10
        assert np.max(np.abs(block_average(l2gd_step(x, P, cfg, 1)) - block_average(x))) <= 1e-13


def test_stochastic_gradient_l2gd(rng):
    P = logistic_problem(rng, n=3, m=4, d=2, lam=0.6)
    p = 0.35
    for _ in range(100):
        x = rng.standard_normal((3, 2))
        G = (1 - p) * stochastic_gradient_l2gd(x, P, p, 0) + p * stochastic_gradient_l2gd(x, P, p, 1)
        g = np.asarray(grad_F(P, x))
        assert np.max(np.abs(G - g)) <= 1e-13 * max(1.0, np.abs(g).max())
    x = rng.standard_normal((3, 2))
    assert np.all(stochastic_gradient_l2gd(x, P.with_lambda(0.0), p, 1) == 0)
    assert np.all(stochastic_gradient_l2gd(np.tile(x[0], (3, 1)), P, p, 1) == 0)


def test_l2gd_step_rejects_large_aggregation(rng):
    P, _ = quadratic_problem(rng, n=2, d=1, lam=1.0)
    with pytest.raises(ConfigError):
        l2gd_step(np.zeros((2, 1)), P, SolverConfig("L2GD", 1.0, 0.1, 0), 1)
    with pytest.warns(SolverWarning):
        l2gd_step(np.zeros((2, 1)), P, SolverConfig("L2GD", 0.15, 0.1, 0), 1)
    with pytest.raises(ValueError):
        l2gd_step(np.zeros((3, 1)), P, SolverConfig("L2GD", 0.1, 0.1, 0), 0)


# unbiasedness

def _random_cv(P, rng, variant):
    m1 = 1 if variant == Variant.VR_LOCAL_GD else None
    cv = ControlVariates.random(P, rng, m_override=m1)
    if variant in (Variant.L2GD, Variant.L2SGD):
        return None
    return cv


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_unbiased_all_variants(rng, variant):
    P = logistic_problem(rng, n=2, m=2, d=2, lam=0.9)
    p = 0.3
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal((2, 2))
        cv = _random_cv(P, rng, variant)
        g = expected_direction(variant, P, x, cv, p)
        t = target_gradient(variant, P, x)
        worst = max(worst, np.linalg.norm(g - t) / np.linalg.norm(t))
    assert worst <= 1e-11


@pytest.mark.parametrize("setup", ["taunice", "independent", "importance", "tau_part", "unequal_m"])
def test_unbiased_general_samplings(rng, setup):
    ms = [2, 3] if setup == "unequal_m" else [3, 3]
    P = logistic_problem(rng, n=2, d=2, lam=0.5, ms=ms)
    part, samp = None, None
    if setup == "taunice":
        samp = [TauNice(3, 2), TauNice(3, 2)]
        part = IndependentParticipation([0.6, 0.9])
    elif setup == "independent":
        samp = [IndependentSampling([0.2, 0.5, 0.9]), IndependentSampling([0.3, 0.3, 1.0])]
    elif setup == "importance":
        samp = [ImportanceSingle([0.2, 0.3, 0.5]), ImportanceSingle([0.6, 0.2, 0.2])]
    elif setup == "tau_part":
        P = logistic_problem(rng, n=3, d=2, lam=0.5, ms=[2, 2, 2])
        part = TauNiceParticipation(3, 2)
    for _ in range(20):
        x = rng.standard_normal((P.n, 2))
        cv = ControlVariates.random(P, rng)
        g = expected_direction("L2SGDPP", P, x, cv, 0.4, participation=part, samplings=samp)
        t = target_gradient(Variant.L2SGDPP, P, x)
        assert np.linalg.norm(g - t) <= 1e-11 * np.linalg.norm(t)


# fixed points

@pytest.mark.parametrize("variant", ["L2SGD_PLUS", "VR_LOCAL_GD", "L2SGDPP"])
def test_fixed_point(rng, variant):
    P = logistic_problem(rng, n=3, m=3, d=2, lam=0.8)
    ref = reference_solution(P, tol=1e-13)
    xs = ref.x_star
    vr = variant == "VR_LOCAL_GD"
    J = [np.stack([dev.grad(xi)]) if vr else dev.component_grads(xi) for dev, xi in zip(P.devices, xs)]
    cv = ControlVariates(J, np.stack([Ji.sum(axis=0) for Ji in J]), P.lam * (xs - block_average(xs)))
    p = 0.3
    worst = np.abs(direction(variant, P, xs, cv, p, 1)).max()
    if variant == "VR_LOCAL_GD":
        worst = max(worst, np.abs(direction(variant, P, xs, cv, p, 0)).max())
    elif variant == "L2SGD_PLUS":
        for js in product(range(3), repeat=3):
            worst = max(worst, np.abs(direction(variant, P, xs, cv, p, 0, js=np.array(js))).max())
    else:
        marg = [np.full(3, 1 / 3)] * 3
        for js in product(range(3), repeat=3):
            g = direction(variant, P, xs, cv, p, 0, active=np.ones(3, bool), subsets=[(j,) for j in js],
                          marginals=marg, pg=np.ones(3))
            worst = max(worst, np.abs(g).max())
    assert worst <= 1e-10


# reductions under shared randomness

def test_pp_reduces_to_l2sgd_plus(rng):
    P = logistic_problem(rng, n=3, m=4, d=2, lam=0.7)
    x0 = np.zeros((3, 2))
    cfg = SolverConfig("L2SGD_PLUS", 0.3, 0.3, 11, max_iters=500)
    a, _ = trajectory(x0, P, cfg, backend="numpy")
    b, _ = trajectory(x0, P, cfg.with_(variant="L2SGDPP", participation=FullParticipation(3),
                                        samplings=[UniformSingle(4)] * 3, jacobian_rule="SAGA"))
    assert np.max(np.abs(a - b)) <= 1e-12


def test_pp_reduces_to_vr_local_gd(rng):
    P = logistic_problem(rng, n=3, m=1, d=2, lam=0.7)
    x0 = np.zeros((3, 2))
    cfg = SolverConfig("VR_LOCAL_GD", 0.3, 0.3, 5, max_iters=500)
    a, _ = trajectory(x0, P, cfg)
    b, _ = trajectory(x0, P, cfg.with_(variant="L2SGDPP"))
    c, _ = trajectory(x0, P, cfg.with_(variant="L2SGD_PLUS"), backend="numpy")
    assert np.max(np.abs(a - b)) <= 1e-12
    assert np.max(np.abs(a - c)) <= 1e-12


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_efficient_equals_l2sgd_plus(rng, seed):
    P = logistic_problem(rng, n=3, m=4, d=2, lam=0.7)
    x0 = np.ones((3, 2))
    cfg = SolverConfig("L2SGD_PLUS", 0.4, 0.4, seed, max_iters=500)
    a, ra = trajectory(x0, P, cfg, backend="numpy")
    b, rb = trajectory(x0, P, cfg.with_(variant="L2SGD_PLUS_EFFICIENT"))
    assert np.max(np.abs(a - b)) <= 1e-9
    assert np.allclose(ra.cv.Psi, rb.cv.Psi, atol=1e-9)
    assert ra.trace.comm_rounds == rb.trace.comm_rounds


def test_efficient_without_aggregation_is_identical(rng):
    P = logistic_problem(rng, n=2, m=3, d=2, lam=0.5)
    cfg = SolverConfig("L2SGD_PLUS", 0.3, 0.5, 0, max_iters=50)
    coins = np.zeros(50, dtype=np.int8)
    a, _ = trajectory(np.zeros((2, 2)), P, cfg, coins=coins, backend="numpy")
    b, _ = trajectory(np.zeros((2, 2)), P, cfg.with_(variant="L2SGD_PLUS_EFFICIENT"), coins=coins)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("c", [1, 2, 5, 17])
def test_aggregation_replay_matches_explicit_steps(rng, c):
    P = logistic_problem(rng, n=3, m=2, d=2, lam=0.6)
    cv = ControlVariates.random(P, rng)
    cv.Psi -= block_average(cv.Psi)  # realizable shifts have zero mean
    x = rng.standard_normal((3, 2))
    alpha, p, n, m = 0.3, 0.4, 3, 2
    x_exp, psi = x.copy(), cv.Psi.copy()
    for _ in range(c):
        g, _ = l2sgd_plus_direction(P, x_exp, ControlVariates(cv.J, cv.Jsum, psi), p, 1)
        psi = P.lam * (x_exp - block_average(x_exp))
        x_exp = x_exp - alpha * g
    q, r, s = aggregation_replay(c, alpha, P.lam, p, n)
    a = cv.Jsum / (n * m)
    e0 = x - block_average(x)
    xb = block_average(x) - c * alpha * block_average(a)
    e_c = q[c] * e0 + r[c] * cv.Psi + s[c] * (a - block_average(a))
    e_prev = q[c - 1] * e0 + r[c - 1] * cv.Psi + s[c - 1] * (a - block_average(a))
    assert np.max(np.abs(xb + e_c - x_exp)) <= 1e-13
    assert np.max(np.abs(P.lam * e_prev - psi)) <= 1e-13


def test_l2sgd2_without_aggregation_equals_l2sgd(rng):
    P = logistic_problem(rng, n=2, m=3, d=2, lam=0.5)
    cfg = SolverConfig("L2SGD", 0.3, 0.3, 4, max_iters=200)
    coins = np.zeros(200, dtype=np.int8)
    a, _ = trajectory(np.zeros((2, 2)), P, cfg, coins=coins, backend="numpy")
    b, _ = trajectory(np.zeros((2, 2)), P, cfg.with_(variant="L2SGD2"), coins=coins, backend="numpy")
    assert np.array_equal(a, b)


def test_lambda_zero_decouples(rng):
    P = logistic_problem(rng, n=2, m=3, d=2, lam=0.0)
    other = LogisticDevice(rng.standard_normal((3, 2)), [1.0, 1.0, -1.0], 0.1)
    Q = MixtureProblem([P.devices[0], other], 0.0)
    for variant in ("L2SGD", "L2SGD2", "L2SGD_PLUS", "L2GD"):
        cfg = SolverConfig(variant, 0.3, 0.3, 2, max_iters=300)
        a, _ = trajectory(np.zeros((2, 2)), P, cfg, backend="numpy")
        b, _ = trajectory(np.zeros((2, 2)), Q, cfg, backend="numpy")
        assert np.array_equal(a[:, 0], b[:, 0])


@pytest.mark.parametrize("variant", ["L2SGD", "L2SGD2", "L2SGD_PLUS"])
def test_numba_matches_numpy(rng, variant):
    P = logistic_problem(rng, n=3, m=5, d=4, lam=0.4)
    cfg = SolverConfig(variant, 0.5, 0.2, 9, max_iters=3000, record_every=37)
    a = run(np.zeros((3, 4)), P, cfg, backend="numpy")
    b = run(np.zeros((3, 4)), P, cfg, backend="numba")
    assert np.max(np.abs(a.x - b.x)) <= 1e-12
    assert a.trace.k == b.trace.k and a.trace.comm_rounds == b.trace.comm_rounds
    assert a.trace.data_passes == b.trace.data_passes


def test_numba_rejects_quadratics(rng):
    P, _ = quadratic_problem(rng)
    with pytest.raises(ConfigError):
        run(np.zeros((3, 2)), P, SolverConfig("L2SGD", 0.1, 0.5, 0), backend="numba")


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_traces_deterministic(rng, variant):
    P = logistic_problem(rng, n=2, m=3, d=2, lam=0.5)
    cfg = SolverConfig(variant, 0.2, 0.3, 13, max_iters=400, record_every=10)
    ref = reference_solution(P)
    a = run(np.zeros((2, 2)), P, cfg, reference=ref)
    b = run(np.zeros((2, 2)), P, cfg, reference=ref)
    assert a.trace.to_csv() == b.trace.to_csv()
    assert a.trace.rel_subopt[0] == 1.0
    assert a.trace.coin_length == 400


@pytest.mark.parametrize("variant", ["L2SGD_PLUS", "L2SGD_PLUS_EFFICIENT", "VR_LOCAL_GD", "L2SGDPP"])
def test_vr_variants_converge(rng, variant):
    P = logistic_problem(rng, n=3, m=4, d=2, lam=0.5)
    ref = reference_solution(P, tol=1e-12)
    cfg = SolverConfig(variant, 0.4, 0.3, 1, max_iters=20000, target=1e-10)
    res = run(np.zeros((3, 2)), P, cfg, reference=ref)
    assert res.trace.final_rel() <= 1e-10
    assert res.trace.first_reaching(1e-10)[0] == res.trace.k[-1]


def test_rounds_in_trace_match_coins(rng):
    P = logistic_problem(rng, n=2, m=2, d=2, lam=0.5)
    cfg = SolverConfig("L2SGD_PLUS", 0.2, 0.3, 21, max_iters=1000, record_every=100)
    res = run(np.zeros((2, 2)), P, cfg)
    assert res.trace.comm_rounds[-1] == count_rounds(coin_bits(21, 0.3, 1000))
    passes = np.diff(res.trace.data_passes)
    assert np.all(passes >= 0)


# general method

def test_pp_with_l1_prox(rng):
    P = logistic_problem(rng, n=2, m=3, d=3, lam=0.5)
    R = MixtureProblem(P.devices, P.lam, [L1Regularizer(0.2), L1Regularizer(0.2)])
    cfg = SolverConfig("L2SGDPP", 0.2, 0.3, 0, max_iters=20000, record_every=1000)
    res = run(np.ones((2, 3)), R, cfg)
    F = res.trace.objective
    assert F[-1] < F[0]
    # the proximal fixed point: x = prox(x - alpha * grad)
    x = res.x
    g = np.asarray(grad_F(R, x))
    y = np.stack([r.prox(xi - 0.05 * gi, 0.05) for r, xi, gi in zip(R.regularizers, x, g)])
    assert np.max(np.abs(y - x)) <= 1e-4
    Z = MixtureProblem(P.devices, P.lam, [L1Regularizer(0.0), L1Regularizer(0.0)])
    a = run(np.ones((2, 3)), Z, cfg.with_(max_iters=300))
    b = run(np.ones((2, 3)), P, cfg.with_(max_iters=300))
    assert np.array_equal(a.x, b.x)


def test_pp_lsvrg_and_partial_participation(rng):
    P = logistic_problem(rng, n=3, d=2, lam=0.5, ms=[2, 3, 4])
    ref = reference_solution(P, tol=1e-12)
    cfg = SolverConfig("L2SGDPP", 0.1, 0.3, 3, max_iters=60000, target=1e-8,
                       participation=IndependentParticipation([0.5, 0.8, 1.0]),
                       samplings=[UniformSingle(2), TauNice(3, 2), IndependentSampling([0.5, 0.5, 0.5, 0.9])],
                       jacobian_rule=JacobianRule.LSVRG)
    res = run(np.zeros((3, 2)), P, cfg, reference=ref)
    assert res.trace.final_rel() <= 1e-8


def test_pp_requires_sample_weighting(rng):
    devs = logistic_problem(rng, n=2, d=2, ms=[2, 3]).devices
    with pytest.raises(ConfigError):
        run(np.zeros((2, 2)), MixtureProblem(devs, 0.5), SolverConfig("L2SGDPP", 0.1, 0.3, 0))
    with pytest.raises(ValueError):
        run(np.zeros((2, 2)), MixtureProblem(devs, 0.5), SolverConfig("L2SGD_PLUS", 0.1, 0.3, 0))


def test_sampling_marginals_empirical():
    rng = np.random.default_rng(0)
    for s in (TauNice(5, 2), IndependentSampling([0.1, 0.5, 0.9]), ImportanceSingle([0.1, 0.3, 0.6])):
        stream = IndexStream(0, 0, s.m)
        counts = np.zeros(s.m)
        T = 20000
        for _ in range(T):
            for j in s.draw(stream, rng):
                counts[j] += 1
        pj = s.marginals()
        assert np.all(np.abs(counts / T - pj) <= 4 * np.sqrt(pj * (1 - pj) / T) + 1e-12)
        total = sum(w for w, _ in s.outcomes())
        assert total == pytest.approx(1.0)
    for part in (TauNiceParticipation(4, 3), IndependentParticipation([0.2, 0.7])):
        draws = np.array([part.draw(rng) for _ in range(20000)])
        pg = part.probs()
        assert np.all(np.abs(draws.mean(axis=0) - pg) <= 4 * np.sqrt(pg * (1 - pg) / 20000) + 1e-12)


def test_sampling_validation():
    with pytest.raises(ValueError):
        IndependentSampling([0.0, 0.5])
    with pytest.raises(ValueError):
        ImportanceSingle([0.5, 0.6])
    with pytest.raises(ValueError):
        TauNice(3, 4)


def test_default_eso():
    L = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(default_eso(UniformSingle(3), L), L)
    assert np.array_equal(default_eso(TauNice(3, 2), L), 2 * L)
    s = IndependentSampling([0.2, 0.5, 0.9])
    assert np.allclose(default_eso(s, L), L * s.expected_size_given())


def test_eso_bound_holds(rng):
    # E||sum_{j in S} h_j / p_j||^2 <= sum_j p_j^-1 v_j / L_j ||h_j||^2 for the default v
    for s in (TauNice(4, 2), IndependentSampling([0.3, 0.6, 0.9, 0.5])):
        v = default_eso(s, np.ones(s.m))
        pj = s.marginals()
        for _ in range(50):
            H = rng.standard_normal((s.m, 3))
            lhs = sum(w * np.sum(sum((H[j] / pj[j] for j in S), np.zeros(3)) ** 2) for w, S in s.outcomes())
            rhs = float(np.sum(v / pj * np.sum(H * H, axis=1)))
            assert lhs <= rhs * (1 + 1e-12)


# configuration and failures

@pytest.mark.parametrize("kw", [
    dict(alpha=0.0), dict(alpha=float("nan")), dict(p=0.0), dict(p=1.0), dict(seed=None),
    dict(lam=-1.0), dict(target=0.0), dict(record_every=0), dict(variant="nope"),
    dict(lsvrg_probs=[0.0]),
])
def test_config_errors(kw):
    base = dict(variant="L2GD", alpha=0.1, p=0.5, seed=0)
    base.update(kw)
    with pytest.raises(ConfigError):
        SolverConfig(**base)


def test_variant_parse():
    assert Variant.parse("l2sgd+") == Variant.L2SGD_PLUS
    assert Variant.parse("L2SGD++") == Variant.L2SGDPP
    assert Variant.parse("vr-local-gd") == Variant.VR_LOCAL_GD


def test_bad_x0(rng):
    P, _ = quadratic_problem(rng)
    cfg = SolverConfig("L2GD", 0.1, 0.5, 0, max_iters=5)
    with pytest.raises(ConfigError):
        run(np.zeros((2, 2)), P, cfg)
    with pytest.raises(ConfigError):
        run(np.full((3, 2), np.nan), P, cfg)
    with pytest.warns(SolverWarning):
        with warnings.catch_warnings():
            warnings.filterwarnings("default", category=SolverWarning)
            run(rng.standard_normal((3, 2)), P, cfg)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(rng):
    P, _ = quadratic_problem(rng, lam=0.0)
    with pytest.raises(NumericalError):
        run(np.ones((3, 2)), P, SolverConfig("L2SGD", 1e8, 0.5, 0, max_iters=5000, record_every=1))


def test_lambda_override(rng):
    P, C = quadratic_problem(rng, lam=5.0)
    cfg = SolverConfig("L2GD", 0.1, 0.5, 0, max_iters=100, lam=0.0)
    res = run(np.zeros((3, 2)), P, cfg)
    assert res.trace.objective[-1] == pytest.approx(objective_value(P.with_lambda(0.0), res.x))
