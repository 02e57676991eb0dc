"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary (and to stdout when the file is run as a script).
"""
import time

import numpy as np
import pytest

from multitsls import (
    Population,
    bias_decomposition,
    build_judge_design,
    covariate_weight_analysis,
    identification_report,
    just_identified_analysis,
    monotonicity_checks,
    response_weight_matrix,
    sample_dataset,
    tsls_estimate,
    tsls_population_estimand,
)
from multitsls.implications import linearity_test, subsample_first_stage_test
from multitsls.oracle import weighted_effect_sum
from multitsls.simulate import Judge

from conftest import ACCEPTANCE_LINES
from helpers import (
    PADDED_TYPES,
    all_types,
    brute_force_weights,
    court_design,
    just_identified_population,
    random_population,
    two_instrument_population,
)

N_RANDOM = 1000


def _record(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def random_populations():
    rng = np.random.default_rng(20240601)
    return [random_population(rng) for _ in range(N_RANDOM)]


def _grid_judges(p1=np.linspace(0.5, 0.7, 5), p2=np.linspace(0.1, 0.3, 5)):
    return [Judge(a, b, 1 / (len(p1) * len(p2))) for a in p1 for b in p2]


def _grid_population():
    # y0 = u, so a flag probability linear in y0 is linear in the latent index
    return build_judge_design(_grid_judges(), effects=lambda u: ((-0.2 + 0.3 * u, -0.3 - 0.2 * u), u))


def _quadratic_population():
    p1 = np.linspace(0.2, 0.9, 25)
    return build_judge_design([Judge(a, a - a * a, 1 / 25) for a in p1])


def test_mixture_identity(random_populations):
    start = time.perf_counter()
    worst = 0.0
    for pop in random_populations:
        total = sum(c.prob * response_weight_matrix(pop, c.assignment).weights for c in pop.components)
        worst = max(worst, float(np.abs(total - np.eye(pop.n)).max()))
    elapsed = time.perf_counter() - start
    _record(1, "probability-weighted type weights sum to I", worst < 1e-10 and elapsed < 30,
            f"{N_RANDOM} populations, max |error| {worst:.2e}, {elapsed:.1f}s")


def test_estimand_equals_weighted_effects(random_populations):
    worst = max(float(np.abs(tsls_population_estimand(p) - weighted_effect_sum(p)).max()) for p in random_populations)
    _record(2, "estimand equals weighted effect sum", worst < 1e-10, f"max |error| {worst:.2e}")


def test_two_instrument_example():
    pop = two_instrument_population()
    exact = response_weight_matrix(pop, (2, 1, 2)).weights
    brute = brute_force_weights(pop, (2, 1, 2))
    quiet = response_weight_matrix(pop, (0, 1, 0)).weights
    ok = (
        np.abs(exact - brute).max() < 1e-10
        and np.abs(quiet - brute_force_weights(pop, (0, 1, 0))).max() < 1e-10
        and abs(quiet[0, 1]) < 1e-12
        and np.abs(quiet[1]).max() < 1e-12
    )
    detail = (
        f"type (2,1,2) first row exact {exact[0].round(10).tolist()}, brute force {brute[0].round(10).tolist()}, "
        "a residual rescaled by 5/4 gives (2, -2); type (0,1,0) cross weight and second row are 0 "
        f"(max |entry| {max(abs(quiet[0, 1]), np.abs(quiet[1]).max()):.1e})"
    )
    _record(3, "two-instrument example weights", ok, detail)


def test_padded_types_are_exactly_the_allowed_set():
    start = time.perf_counter()
    passing = set()
    for a in all_types(3, 3):
        pop = just_identified_population(PADDED_TYPES + [a], probs=[1] * 6 + [0.5])
        if identification_report(pop).proper:
            passing.add(a)
    elapsed = time.perf_counter() - start
    ok = passing == set(PADDED_TYPES) and elapsed < 5
    _record(4, "27 types with padding pass iff listed", ok, f"{len(passing)} pass, {elapsed:.2f}s")


def test_kirkeboen_matches_identity_matching():
    rng = np.random.default_rng(7)
    types = all_types(3, 3)
    agree, implied, ranked = 0, True, 0
    n_sets = 10_000
    for _ in range(n_sets):
        k = int(rng.integers(1, 5))
        idx = rng.choice(len(types), k, replace=False)
        pop = just_identified_population([types[i] for i in idx], probs=rng.dirichlet(np.ones(k)))
        ji = just_identified_analysis(pop, labeling=(0, 1, 2))
        agree += monotonicity_checks(pop).kirkeboen_holds == ji.passes
        if ji.weight_route is not None:
            ranked += 1
            # passing the matching check guarantees proper weights
            implied &= ji.weight_route or not ji.passes
    ok = agree == n_sets and implied
    _record(5, "Kirkeboen conditions iff identity matching", ok,
            f"{agree}/{n_sets} agree; weight route consistent on {ranked} full-rank sets")


def _affine_both_ways(pop):
    return linearity_test(pop, (1, 0))["f_stat"] == 0.0 and linearity_test(pop, (0, 1))["f_stat"] == 0.0


def test_threshold_designs():
    affine = [
        build_judge_design(_grid_judges()),
        build_judge_design(_grid_judges(np.linspace(0.4, 0.8, 3), np.linspace(0.05, 0.35, 4))),
        # correlated two-by-two lattice: two-point conditionals are always affine
        build_judge_design([Judge(0.5, 0.1, 0.35), Judge(0.5, 0.3, 0.15), Judge(0.7, 0.1, 0.15), Judge(0.7, 0.3, 0.35)]),
    ]
    affine_ok = all(_affine_both_ways(p) and identification_report(p).proper for p in affine)
    # affine in one direction only is not enough
    sheared = build_judge_design([Judge(a, 0.02 + 0.2 * a + c, 1 / 12) for a in (0.5, 0.6, 0.7) for c in (0.0, 0.1, 0.2, 0.3)])
    sheared_ok = not _affine_both_ways(sheared) and not identification_report(sheared).nce_holds
    quad = identification_report(_quadratic_population())
    margin = quad.worst_nce[3]
    ok = affine_ok and sheared_ok and not quad.nce_holds and abs(margin) > 1e-3
    _record(6, "affine threshold designs pass, quadratic fails", ok,
            f"{len(affine)} affine designs proper; quadratic worst cross weight {margin:.4f} at {quad.worst_nce[:3]}")


@pytest.mark.slow
def test_estimator_consistency():
    pop = _grid_population()
    target = tsls_population_estimand(pop)
    covered = 0
    reps = 100
    for seed in range(reps):
        res = tsls_estimate(sample_dataset(pop, 100_000, seed=seed), pop.coding)
        covered += bool(np.all(np.abs(res.beta - target) < 3 * res.se))
    _record(7, "2SLS within 3 SE of the estimand", covered >= 95,
            f"{covered}/{reps} replicates, estimand {np.round(target, 4).tolist()}")


def _violating_population(share=0.15):
    grid = _grid_population()
    violator = tuple(1 if (j // 5 >= 3 and j % 5 <= 1) else 0 for j in range(25))
    comps = [(c.assignment, c.prob * (1 - share), c.beta, c.y0) for c in grid.components]
    comps.append((violator, share, np.array([-0.2, -0.3]), 0.5))
    return Population.from_types(grid.design, grid.coding, comps), violator


@pytest.mark.slow
def test_size_and_power():
    pop = _grid_population()
    assert identification_report(pop).proper
    flags = [0.3 + 0.4 * c.y0 for c in pop.components]
    size_reps = 200
    size = np.mean([
        subsample_first_stage_test(sample_dataset(pop, 100_000, seed=s, flags={"g": flags}), pop.coding, "g").reject
        for s in range(size_reps)
    ])

    bad, violator = _violating_population()
    cross = abs(response_weight_matrix(bad, violator).weights[1, 0])
    bad_flags = [0.9 if c.assignment == violator else 0.1 for c in bad.components]
    power_reps = 100
    power = np.mean([
        subsample_first_stage_test(sample_dataset(bad, 100_000, seed=1000 + s, flags={"g": bad_flags}), bad.coding, "g").reject
        for s in range(power_reps)
    ])

    quad = _quadratic_population()
    lin_reps = 100
    lin = np.mean([
        linearity_test(sample_dataset(quad, 10_000, seed=2000 + s), coding=quad.coding)["reject"] for s in range(lin_reps)
    ])
    ok = size <= 0.07 and cross >= 0.3 and power >= 0.9 and lin >= 0.9
    _record(8, "subsample test size and power, linearity power", ok,
            f"size {size:.3f} ({size_reps} reps), power {power:.2f} at cross weight {cross:.3f}, "
            f"linearity rejection {lin:.2f}")


def test_two_judge_courts_variance_ratio():
    zero = ([(0.6, 0.3), (0.7, 0.2)], [("II", 0.2), ("IC", 0.1), ("CC", 0.3), ("AC", 0.1), ("AA", 0.3)])
    one = ([(0.5, 0.4), (0.8, 0.1)], [("II", 0.1), ("IC", 0.3), ("CC", 0.1), ("AC", 0.3), ("AA", 0.2)])
    res = covariate_weight_analysis(court_design({0: zero, 1: one}))
    err = float(np.abs(res.var_cells[1] - 9 * res.var_cells[0]).max())
    _record(9, "cell variance ratio of 9", err < 1e-12 and res.covary_similarly, f"max |error| {err:.1e}")


def test_decomposition_reconstructs(random_populations):
    worst = 0.0
    for pop in random_populations:
        for k in range(pop.n):
            dec = bias_decomposition(pop, k)
            worst = max(worst, abs(dec.reconstruct() - dec.estimand))
    proper = [_grid_population()]
    rng = np.random.default_rng(3)
    for _ in range(50):
        proper.append(just_identified_population(PADDED_TYPES, probs=rng.dirichlet(np.ones(6)), betas=rng.normal(size=(6, 2))))
    proper += [p for p in random_populations if identification_report(p).proper]
    gap = 0.0
    for pop in proper:
        for k in range(pop.n):
            dec = bias_decomposition(pop, k)
            assert dec.w_negative == 0 and dec.w_cross == 0
            gap = max(gap, abs(dec.beta_compliers - dec.estimand))
    ok = worst < 1e-10 and gap < 1e-10
    _record(10, "decomposition reconstructs the estimand", ok,
            f"max reconstruction error {worst:.2e}; complier term gap {gap:.2e} on {len(proper)} proper populations")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
