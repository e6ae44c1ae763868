import math

import numpy as np
import pytest
from scipy import stats as ref

from persona_probe import stats
from persona_probe.stats import StatsError


def datasets(n=24, seed=7):
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for i in range(n):
        k = 2 + i % 4
        sizes = [int(rng.integers(4, 30)) for _ in range(k)]
        groups = [rng.normal(rng.normal(0, 1), rng.uniform(0.3, 3), size=s) for s in sizes]
        out.append(groups)
    return out


DATA = datasets()


# -- distributions ---------------------------------------------------------


@pytest.mark.parametrize("df", [1, 2, 3.5, 10, 47, 300, 1e5])
def test_t_sf_matches_reference(df):
    for t in np.linspace(-12, 12, 49):
        assert stats.dist_t_sf(t, df) == pytest.approx(ref.t.sf(t, df), abs=1e-8)


@pytest.mark.parametrize("d1,d2", [(1, 1), (1, 30), (2, 6), (4, 57), (9, 490), (30, 3)])
def test_f_sf_matches_reference(d1, d2):
    for f in [0.0, 0.05, 0.5, 1.0, 2.0, 3.0, 7.5, 40.0]:
        assert stats.dist_f_sf(f, d1, d2) == pytest.approx(ref.f.sf(f, d1, d2), abs=1e-8)


def test_t_sf_symmetry_point():
    for df in (1, 5, 200):
        assert stats.dist_t_sf(0.0, df) == 0.5


@pytest.mark.parametrize("d", [1, 3, 10, 80])
def test_f_median_for_equal_df(d):
    assert stats.dist_f_sf(1.0, d, d) == pytest.approx(0.5, abs=1e-6)


@pytest.mark.parametrize("k", [2, 3, 5, 10])
@pytest.mark.parametrize("df", [2, 5, 12, 27, 60, 500])
def test_q_sf_matches_reference(k, df):
    for q in [0.5, 1.5, 2.5, 3.5, 5.0, 8.0]:
        assert stats.dist_q_sf(q, k, df) == pytest.approx(ref.studentized_range.sf(q, k, df), abs=1e-4)


@pytest.mark.parametrize("df", [3, 40, 1e5])
def test_q_sf_two_groups_equals_scaled_t(df):
    # For k=2 the studentized range is sqrt(2)|T|.
    for q in [0.5, 1.0, 2.0, 4.0]:
        expected = 2 * ref.t.sf(q / math.sqrt(2), df)
        assert stats.dist_q_sf(q, 2, df) == pytest.approx(expected, abs=1e-8)


def test_q_sf_table_value():
    assert stats.dist_q_sf(3.77, 3, 27) == pytest.approx(0.0316, abs=2e-3)


def test_q_sf_simulation_fallback_agrees():
    exact = stats.dist_q_sf(3.2, 4, 20)
    mc = stats.dist_q_sf(3.2, 4, 20, method="simulation", n_sim=200_000, seed=3)
    assert mc == pytest.approx(exact, abs=5e-3)
    assert mc == stats.dist_q_sf(3.2, 4, 20, method="simulation", n_sim=200_000, seed=3)


def test_sf_plus_cdf_is_one():
    for t in np.linspace(-5, 5, 11):
        assert stats.dist_t_sf(t, 7) + stats.dist_t_sf(-t, 7) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("fn,args", [
    (stats.dist_t_sf, (5,)),
    (lambda x, *a: stats.dist_f_sf(x, 3, 12), ()),
    (lambda x, *a: stats.dist_q_sf(x, 4, 15), ()),
])
def test_p_monotone_in_statistic(fn, args):
    grid = np.linspace(0.0, 10.0, 41)
    values = [fn(x, *args) for x in grid]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert all(0.0 <= v <= 1.0 for v in values)


def test_nonconvergence_is_reported():
    with pytest.raises(stats.ConvergenceError):
        stats.betainc_reg(500.0, 500.0, 0.5, max_iter=3)


def test_bad_df_rejected():
    with pytest.raises(StatsError):
        stats.dist_t_sf(1.0, 0)
    with pytest.raises(StatsError):
        stats.dist_q_sf(1.0, 1, 10)


# -- tests -----------------------------------------------------------------


def test_pearson_examples():
    x = [1, 2, 3, 4]
    assert stats.pearson_r(x, x) == 1.0
    assert stats.pearson_r(x, [-v for v in x]) == -1.0
    assert stats.pearson_r(x, [2, 1, 4, 3]) == pytest.approx(0.6, abs=1e-12)


def test_pearson_errors():
    with pytest.raises(StatsError):
        stats.pearson_r([1, 1, 1], [1, 2, 3])
    with pytest.raises(StatsError):
        stats.pearson_r([1, 2, 3], [1, 2])
    with pytest.raises(StatsError):
        stats.pearson_r([1, 2], [2, 1])


@pytest.mark.parametrize("i", range(len(DATA)))
def test_pearson_matches_reference(i):
    a, b = DATA[i][0], DATA[i][1]
    n = min(len(a), len(b))
    assert stats.pearson_r(a[:n], b[:n]) == pytest.approx(ref.pearsonr(a[:n], b[:n])[0], abs=1e-4)


def test_spearman_matches_reference():
    for groups in DATA[:10]:
        a, b = groups[0], groups[1]
        n = min(len(a), len(b))
        assert stats.spearman_r(a[:n], b[:n]) == pytest.approx(ref.spearmanr(a[:n], b[:n])[0], abs=1e-10)


def test_welch_worked_example():
    res = stats.welch_t([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
    assert res.statistic == pytest.approx(-1.0)
    assert res.df[0] == pytest.approx(8.0)
    assert res.p_value == pytest.approx(0.3466, abs=1e-4)


def test_welch_edge_cases():
    res = stats.welch_t([1, 2, 3], [1, 2, 3])
    assert res.statistic == 0.0 and res.p_value == pytest.approx(1.0)
    assert stats.welch_t([1, 2, 3], [-8, 2, 12]).statistic == 0.0
    with pytest.raises(StatsError):
        stats.welch_t([2, 2], [3, 3])


@pytest.mark.parametrize("i", range(len(DATA)))
def test_welch_matches_reference(i):
    a, b = DATA[i][0], DATA[i][1]
    mine = stats.welch_t(a, b)
    theirs = ref.ttest_ind(a, b, equal_var=False)
    assert mine.statistic == pytest.approx(theirs.statistic, abs=1e-4)
    assert mine.p_value == pytest.approx(theirs.pvalue, abs=1e-4)
    flipped = stats.welch_t(b, a)
    assert flipped.statistic == -mine.statistic and flipped.p_value == mine.p_value


def test_anova_worked_example():
    res = stats.one_way_anova([[1, 2, 3], [2, 3, 4], [3, 4, 5]])
    assert res.statistic == pytest.approx(3.0)
    assert res.df == (2.0, 6.0)
    assert res.p_value == pytest.approx(0.125, abs=1e-3)


def test_anova_degenerate():
    res = stats.one_way_anova([[4, 4, 4], [4, 4, 4]])
    assert res.degenerate and res.p_value == 1.0
    res = stats.one_way_anova([[4, 4, 4], [5, 5, 5]])
    assert res.degenerate and res.p_value == 0.0


def test_anova_two_groups_is_t_squared():
    a, b = DATA[0][0], DATA[0][1]
    f = stats.one_way_anova([a, b]).statistic
    t = stats.student_t(a, b).statistic
    assert f == pytest.approx(t * t, rel=1e-9)


@pytest.mark.parametrize("i", range(len(DATA)))
def test_anova_matches_reference(i):
    mine = stats.one_way_anova(DATA[i])
    theirs = ref.f_oneway(*DATA[i])
    assert mine.statistic == pytest.approx(theirs.statistic, abs=1e-4)
    assert mine.p_value == pytest.approx(theirs.pvalue, abs=1e-4)


def test_anova_invariances():
    g = DATA[3]
    base = stats.one_way_anova(g).statistic
    assert stats.one_way_anova([x + 17.0 for x in g]).statistic == pytest.approx(base, rel=1e-9)
    assert stats.one_way_anova([x * -3.0 for x in g]).statistic == pytest.approx(base, rel=1e-9)


@pytest.mark.parametrize("i", range(len(DATA)))
def test_tukey_matches_reference(i):
    groups = [g for g in DATA[i]]
    if len(groups) < 3:
        groups = groups + [DATA[(i + 1) % len(DATA)][0]]
    mine = stats.tukey_hsd(groups)
    theirs = ref.tukey_hsd(*groups)
    for c in mine:
        a, b = int(c.group_a), int(c.group_b)
        assert c.mean_difference == pytest.approx(theirs.statistic[a, b], abs=1e-9)
        assert c.p_value == pytest.approx(theirs.pvalue[a, b], abs=1e-3)


def test_tukey_balanced_3x10():
    rng = np.random.Generator(np.random.PCG64(11))
    groups = [rng.normal(m, 1.0, 10) for m in (0.0, 0.3, 1.2)]
    theirs = ref.tukey_hsd(*groups)
    for c in stats.tukey_hsd(groups):
        assert c.p_value == pytest.approx(theirs.pvalue[int(c.group_a), int(c.group_b)], abs=1e-3)


def test_tukey_extreme_separation():
    rng = np.random.Generator(np.random.PCG64(5))
    groups = [rng.normal(m, 1.0, 10) for m in (0.0, 0.0, 100.0)]
    sig = {(c.group_a, c.group_b) for c in stats.tukey_hsd(groups, labels=["a", "b", "c"]) if c.significant}
    assert sig == {("a", "c"), ("b", "c")}


def test_tukey_identical_groups():
    assert not any(c.significant for c in stats.tukey_hsd([[1, 2, 3]] * 3))


def test_bonferroni():
    assert stats.bonferroni(0.05, 10) == 0.005
    assert stats.bonferroni(0.05, 6) == 0.05 / 6
    assert stats.bonferroni(0.05, 1) == 0.05
    with pytest.raises(StatsError):
        stats.bonferroni(0.05, 0)
