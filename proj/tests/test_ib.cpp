#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "dms/corpus.hpp"
#include "dms/ib.hpp"
#include "dms/model.hpp"
#include "dms/rng.hpp"

using namespace dms;
using ib::BinningSpec;
using ib::DiscreteJoint;
using ib::InfoPlanePoint;

namespace {

// Random joint table with the Markov structure y <- x -> z, i.e.
// p(x,y,z) = p(x) p(y|x) p(z|x). The chain-rule decomposition
// I(X;Z) = I(Z;Y) + I(X;Z|Y) is an algebraic identity for these.
struct MarkovTable {
    int nx, ny, nz;
    std::vector<double> p;  // [x][y][z]

    double at(int x, int y, int z) const {
        return p[(static_cast<size_t>(x) * ny + y) * nz + z];
    }
    double i_xz() const {
        DiscreteJoint j;
        j.na = nx;
        j.nb = nz;
        j.p.assign(static_cast<size_t>(nx) * nz, 0.0);
        for (int x = 0; x < nx; ++x) {
            for (int y = 0; y < ny; ++y) {
                for (int z = 0; z < nz; ++z) {
                    j.p[static_cast<size_t>(x) * nz + z] += at(x, y, z);
                }
            }
        }
        return ib::mutual_information_bits(j);
    }
    double i_zy() const {
        DiscreteJoint j;
        j.na = nz;
        j.nb = ny;
        j.p.assign(static_cast<size_t>(nz) * ny, 0.0);
        for (int x = 0; x < nx; ++x) {
            for (int y = 0; y < ny; ++y) {
                for (int z = 0; z < nz; ++z) {
                    j.p[static_cast<size_t>(z) * ny + y] += at(x, y, z);
                }
            }
        }
        return ib::mutual_information_bits(j);
    }
    double i_xz_given_y() const {
        double total = 0.0;
        for (int y = 0; y < ny; ++y) {
            double py = 0.0;
            DiscreteJoint j;
            j.na = nx;
            j.nb = nz;
            j.p.assign(static_cast<size_t>(nx) * nz, 0.0);
            for (int x = 0; x < nx; ++x) {
                for (int z = 0; z < nz; ++z) {
                    const double v = at(x, y, z);
                    j.p[static_cast<size_t>(x) * nz + z] = v;
                    py += v;
                }
            }
            if (py <= 0.0) {
                continue;
            }
            for (double& v : j.p) {
                v /= py;
            }
            total += py * ib::mutual_information_bits(j);
        }
        return total;
    }
};

MarkovTable random_markov_table(Rng& rng, int nx, int ny, int nz) {
    auto randomize = [&](std::vector<double>& p) {
        double total = 0.0;
        for (double& v : p) {
            v = rng.next_unit() + 1e-3;
            total += v;
        }
        for (double& v : p) {
            v /= total;
        }
    };
    std::vector<double> px(static_cast<size_t>(nx));
    randomize(px);
    MarkovTable t;
    t.nx = nx;
    t.ny = ny;
    t.nz = nz;
    t.p.assign(static_cast<size_t>(nx) * ny * nz, 0.0);
    for (int x = 0; x < nx; ++x) {
        std::vector<double> py(static_cast<size_t>(ny)), pz(static_cast<size_t>(nz));
        randomize(py);
        randomize(pz);
        for (int y = 0; y < ny; ++y) {
            for (int z = 0; z < nz; ++z) {
                t.p[(static_cast<size_t>(x) * ny + y) * nz + z] =
                    px[static_cast<size_t>(x)] * py[static_cast<size_t>(y)] *
                    pz[static_cast<size_t>(z)];
            }
        }
    }
    return t;
}

}  // namespace

TEST_CASE("entropy and MI analytic values") {
    // independent uniform A, B: MI = 0
    DiscreteJoint indep;
    indep.na = 2;
    indep.nb = 2;
    indep.p = {0.25, 0.25, 0.25, 0.25};
    CHECK(ib::mutual_information_bits(indep) == doctest::Approx(0.0).epsilon(1e-12));

    // A = B uniform over 4 symbols: MI = 2 bits
    DiscreteJoint eq;
    eq.na = 4;
    eq.nb = 4;
    eq.p.assign(16, 0.0);
    for (int i = 0; i < 4; ++i) {
        eq.p[static_cast<size_t>(i) * 4 + i] = 0.25;
    }
    CHECK(ib::mutual_information_bits(eq) == doctest::Approx(2.0).epsilon(1e-12));

    // hand joint [[0.4, 0.1], [0.1, 0.4]]; plug-in oracle evaluated directly:
    // MI = 1 + 0.8 log2 0.8 + 0.2 log2 0.2
    DiscreteJoint hand;
    hand.na = 2;
    hand.nb = 2;
    hand.p = {0.4, 0.1, 0.1, 0.4};
    const double oracle = 1.0 + 0.8 * std::log2(0.8) + 0.2 * std::log2(0.2);
    CHECK(ib::mutual_information_bits(hand) == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(oracle == doctest::Approx(0.2780719051126377).epsilon(1e-12));

    // entropy: uniform over 8 symbols = 3 bits; bounds respected
    std::vector<double> u8(8, 0.125);
    CHECK(ib::entropy_bits(u8) == doctest::Approx(3.0));
    CHECK(ib::entropy_bits(std::vector<double>{1.0}) == doctest::Approx(0.0));

    std::vector<double> not_normalized{0.5, 0.2};
    CHECK_THROWS_AS(ib::entropy_bits(not_normalized), std::invalid_argument);
    DiscreteJoint bad;
    bad.na = 1;
    bad.nb = 2;
    bad.p = {0.7, 0.7};
    CHECK_THROWS_AS(ib::mutual_information_bits(bad), std::invalid_argument);
}

TEST_CASE("MI symmetry and non-negativity on random joints") {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const int na = 2 + static_cast<int>(rng.next_below(4));
        const int nb = 2 + static_cast<int>(rng.next_below(4));
        DiscreteJoint j;
        j.na = na;
        j.nb = nb;
        j.p.resize(static_cast<size_t>(na) * nb);
        double total = 0.0;
        for (double& v : j.p) {
            v = rng.next_unit();
            total += v;
        }
        for (double& v : j.p) {
            v /= total;
        }
        DiscreteJoint jt;
        jt.na = nb;
        jt.nb = na;
        jt.p.resize(j.p.size());
        for (int a = 0; a < na; ++a) {
            for (int b = 0; b < nb; ++b) {
                jt.p[static_cast<size_t>(b) * na + a] = j.p[static_cast<size_t>(a) * nb + b];
            }
        }
        const double mi = ib::mutual_information_bits(j);
        CHECK(mi >= 0.0);
        CHECK(mi == doctest::Approx(ib::mutual_information_bits(jt)).epsilon(1e-9));
        // entropy bounds: H <= log2(n)
        const auto pa = j.marginal_a();
        CHECK(ib::entropy_bits(pa) <= std::log2(static_cast<double>(na)) + 1e-12);
    }
}

TEST_CASE("chain-rule decomposition is exact on random Markov tables") {
    Rng rng(17);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const MarkovTable t = random_markov_table(rng, 4, 4, 4);
        const double residual = t.i_xz() - t.i_zy() - t.i_xz_given_y();
        worst = std::max(worst, std::abs(residual));
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("decomposition residual vanishes when y and z are functions of x") {
    // y = x, z = x: I_xz = H(X), I_zy = H(X), I(X;Z|Y) = 0
    std::vector<int> x{0, 1, 0, 1, 2, 2, 1, 0};
    const double i_xz = ib::mi_from_samples_bits(x, x);
    const double i_zy = ib::mi_from_samples_bits(x, x);
    const double i_xz_y = ib::conditional_mi_from_samples_bits(x, x, x);
    CHECK(i_xz_y == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(i_xz - i_zy - i_xz_y == doctest::Approx(0.0).epsilon(1e-12));

    // instance-unique x with arbitrary y(x), z(x): the info-plane situation
    Rng rng(23);
    const int n = 300;
    std::vector<int> xs(n), ys(n), zs(n);
    for (int i = 0; i < n; ++i) {
        xs[static_cast<size_t>(i)] = i;
        ys[static_cast<size_t>(i)] = static_cast<int>(rng.next_below(7));
        zs[static_cast<size_t>(i)] = static_cast<int>(rng.next_below(13));
    }
    const double residual = ib::mi_from_samples_bits(xs, zs) - ib::mi_from_samples_bits(zs, ys) -
                            ib::conditional_mi_from_samples_bits(xs, zs, ys);
    CHECK(std::abs(residual) < 1e-9);
}

TEST_CASE("ib lagrangian forms") {
    CHECK(ib::ib_lagrangian(2.0, 3.0, 0.0) == doctest::Approx(2.0));
    CHECK(ib::ib_lagrangian(2.0, 3.0, 1.0) == doctest::Approx(-1.0));
    CHECK_THROWS_AS(ib::ib_lagrangian(1.0, 1.0, -0.5), std::invalid_argument);

    // the two algebraic forms agree whenever i_xz = i_zy + i_xz_given_y
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        const double i_zy = rng.next_unit() * 3.0;
        const double i_xz_y = rng.next_unit() * 3.0;
        const double i_xz = i_zy + i_xz_y;
        const double beta = rng.next_unit() * 2.0;
        CHECK(ib::ib_lagrangian(i_zy, i_xz, beta) ==
              doctest::Approx(ib::ib_lagrangian_decomposed(i_zy, i_xz_y, beta)).epsilon(1e-12));
    }
}

TEST_CASE("binning: median edge, determinism, occupancy") {
    // 1-D data with 2 quantile bins: the edge sits at the median
    std::vector<std::vector<float>> data;
    for (int i = 0; i < 100; ++i) {
        data.push_back({static_cast<float>(i)});
    }
    const BinningSpec spec = ib::fit_binning(data, 1, 2);
    REQUIRE(spec.edges.size() == 1);
    REQUIRE(spec.edges[0].size() == 1);
    // data 0..99 centered at 49.5: the median edge projects to +-0.5
    CHECK(std::abs(spec.edges[0][0]) == doctest::Approx(0.5).epsilon(1e-4));

    for (const auto& row : data) {
        const int cell = ib::discretize(row, spec);
        CHECK(cell >= 0);
        CHECK(cell < spec.n_cells());
        CHECK(ib::discretize(row, spec) == cell);  // total and deterministic
    }

    // occupancy near-uniform per dimension on continuous data
    Rng rng(3);
    std::vector<std::vector<float>> gauss;
    for (int i = 0; i < 4000; ++i) {
        std::vector<float> row(6);
        for (float& v : row) {
            v = static_cast<float>(rng.next_normal());
        }
        gauss.push_back(std::move(row));
    }
    const BinningSpec gspec = ib::fit_binning(gauss, 2, 8);
    std::vector<int> counts(static_cast<size_t>(gspec.n_cells()), 0);
    for (const auto& row : gauss) {
        counts[static_cast<size_t>(ib::discretize(row, gspec))]++;
    }
    // per-component marginals within 20 percent of the equal share
    const int cells1 = static_cast<int>(gspec.edges[1].size()) + 1;
    std::vector<int> marg0(static_cast<size_t>(gspec.edges[0].size()) + 1, 0);
    std::vector<int> marg1(static_cast<size_t>(cells1), 0);
    for (size_t cell = 0; cell < counts.size(); ++cell) {
        marg0[cell / static_cast<size_t>(cells1)] += counts[cell];
        marg1[cell % static_cast<size_t>(cells1)] += counts[cell];
    }
    const double share0 = 4000.0 / static_cast<double>(marg0.size());
    for (int c : marg0) {
        CHECK(std::abs(c - share0) <= 0.2 * share0);
    }
    const double share1 = 4000.0 / static_cast<double>(marg1.size());
    for (int c : marg1) {
        CHECK(std::abs(c - share1) <= 0.2 * share1);
    }
}

TEST_CASE("binning handles rank deficiency by dropping components") {
    // rank-1 data in 4 dimensions
    std::vector<std::vector<float>> data;
    Rng rng(9);
    for (int i = 0; i < 200; ++i) {
        const float t = static_cast<float>(rng.next_normal());
        data.push_back({t, 2.0f * t, -t, 0.5f * t});
    }
    ib::BinningFitReport report;
    const BinningSpec spec = ib::fit_binning(data, 3, 4, &report);
    CHECK(report.requested_components == 3);
    CHECK(report.used_components == 1);
    CHECK(spec.basis.size() == 1);

    // basis rows orthonormal within 1e-6 on richer data
    std::vector<std::vector<float>> rich;
    for (int i = 0; i < 500; ++i) {
        std::vector<float> row(5);
        for (float& v : row) {
            v = static_cast<float>(rng.next_normal());
        }
        rich.push_back(std::move(row));
    }
    const BinningSpec rspec = ib::fit_binning(rich, 3, 4);
    for (size_t a = 0; a < rspec.basis.size(); ++a) {
        for (size_t b = 0; b < rspec.basis.size(); ++b) {
            double acc = 0.0;
            for (size_t j = 0; j < rspec.basis[a].size(); ++j) {
                acc += static_cast<double>(rspec.basis[a][j]) * rspec.basis[b][j];
            }
            CHECK(acc == doctest::Approx(a == b ? 1.0 : 0.0).epsilon(1e-6).scale(1.0));
        }
    }

    CHECK_THROWS_AS(ib::fit_binning(data, 0, 4), std::invalid_argument);
    CHECK_THROWS_AS(ib::fit_binning({{1.0f}}, 1, 2), std::invalid_argument);
}

TEST_CASE("info plane on a tiny model: invariants hold") {
    corpus::TaskConfig tc;
    tc.modulus = 7;
    tc.n_fact_keys = 8;
    tc.contamination_fraction = 0.1;
    tc.rule_holdout_fraction = 0.2;
    tc.vocab_size = 24;
    tc.seed = 2;
    const corpus::Corpus c = corpus::generate_corpus(tc);
    model::ModelConfig mc;
    mc.n_layers = 3;
    mc.d_model = 16;
    mc.n_heads = 2;
    mc.vocab_size = tc.vocab_size;
    mc.context_len = 12;
    mc.seed = 77;
    const model::Weights w = model::init_weights(mc);

    const auto sample = c.trainable_items();
    const std::vector<int> layers{0, 1, 2};
    const auto points = ib::info_plane(w, sample, layers, 2, 4, 0);
    REQUIRE(points.size() == 3);
    for (const InfoPlanePoint& pt : points) {
        CHECK(pt.i_xz >= -1e-9);
        CHECK(pt.i_zy >= -1e-9);
        CHECK(pt.i_xz_given_y >= -1e-9);
        CHECK(pt.i_xz >= pt.i_zy - 1e-9);  // deterministic-map bound
        CHECK(std::abs(ib::mi_decomposition_residual(pt)) < 1e-9);
        CHECK(pt.n_samples == static_cast<int>(sample.size()));
    }
}

TEST_CASE("constant activations carry zero information") {
    corpus::TaskConfig tc;
    tc.modulus = 5;
    tc.n_fact_keys = 4;
    tc.contamination_fraction = 0.1;
    tc.rule_holdout_fraction = 0.2;
    tc.vocab_size = 24;
    tc.seed = 4;
    const corpus::Corpus c = corpus::generate_corpus(tc);
    model::ModelConfig mc;
    mc.n_layers = 2;
    mc.d_model = 16;
    mc.n_heads = 2;
    mc.vocab_size = tc.vocab_size;
    mc.context_len = 12;
    mc.seed = 1;
    model::Weights w = model::init_weights(mc);
    // zero every parameter: all activations collapse to a constant
    w.visit_tensors([](const std::string&, std::vector<float>& t, bool) {
        std::fill(t.begin(), t.end(), 0.0f);
    });

    const auto sample = c.trainable_items();
    const auto points = ib::info_plane(w, sample, std::vector<int>{1}, 2, 4, 0);
    REQUIRE(points.size() == 1);
    CHECK(points[0].i_xz == doctest::Approx(0.0));
    CHECK(points[0].i_zy == doctest::Approx(0.0));
    CHECK(points[0].i_xz_given_y == doctest::Approx(0.0));
}

TEST_CASE("within-class variance ratio") {
    // two tight clusters: ratio 0
    std::vector<std::vector<float>> acts{{0.0f, 0.0f}, {0.0f, 0.0f}, {1.0f, 1.0f}, {1.0f, 1.0f}};
    std::vector<int> labels{0, 0, 1, 1};
    CHECK(ib::within_class_variance_ratio(acts, labels) == doctest::Approx(0.0));

    // spread clusters: positive ratio that grows when labels are shuffled
    Rng rng(13);
    std::vector<std::vector<float>> spread;
    std::vector<int> true_labels;
    for (int i = 0; i < 200; ++i) {
        const int cls = i % 2;
        spread.push_back({static_cast<float>(rng.next_normal() * 0.3 + cls * 3.0),
                          static_cast<float>(rng.next_normal() * 0.3)});
        true_labels.push_back(cls);
    }
    const double tight = ib::within_class_variance_ratio(spread, true_labels);
    std::vector<int> shuffled = true_labels;
    Rng srng(14);
    srng.shuffle(shuffled);
    const double loose = ib::within_class_variance_ratio(spread, shuffled);
    CHECK(tight < loose);

    // degenerate between-class scatter
    std::vector<std::vector<float>> equal{{1.0f}, {1.0f}, {1.0f}, {1.0f}};
    std::vector<int> two{0, 0, 1, 1};
    CHECK_THROWS_AS(ib::within_class_variance_ratio(equal, two), std::runtime_error);

    std::vector<int> single{0, 0, 0, 0};
    CHECK_THROWS_AS(ib::within_class_variance_ratio(equal, single), std::invalid_argument);
    std::vector<int> lone{0, 0, 0, 1};
    CHECK_THROWS_AS(ib::within_class_variance_ratio(equal, lone), std::invalid_argument);
}

TEST_CASE("info plane file round trip") {
    std::vector<InfoPlanePoint> points;
    points.push_back({2, 5.25, 1.5, 3.75, 4000, 1024});
    const auto path = std::filesystem::temp_directory_path() / "dms_ib_test.jsonl";
    ib::save_info_plane(points, path);
    const auto back = ib::load_info_plane(path);
    REQUIRE(back.size() == 1);
    CHECK(back[0].layer == 2);
    CHECK(back[0].i_xz == 5.25);
    CHECK(back[0].step == 4000);
    CHECK(std::abs(ib::mi_decomposition_residual(back[0])) < 1e-9);
    std::filesystem::remove(path);
}
