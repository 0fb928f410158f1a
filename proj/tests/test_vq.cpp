#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "glyphrl/errors.hpp"
#include "glyphrl/rng.hpp"
#include "glyphrl/tensor.hpp"
#include "glyphrl/vq.hpp"

using namespace glyphrl;

namespace {

Codebook random_codebook(int k, int d, Rng& rng) {
    Codebook cb;
    cb.k = k;
    cb.d = d;
    cb.vectors.resize(static_cast<std::size_t>(k) * d);
    for (double& x : cb.vectors) x = rng.normal();
    return cb;
}

// Exhaustive scan with explicit tie-to-lowest-index resolution.
int nn_oracle(const Codebook& cb, const double* x) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int c = 0; c < cb.k; ++c) {
        double s = 0.0;
        for (int i = 0; i < cb.d; ++i) {
            const double diff = x[i] - cb.row(c)[i];
            s += diff * diff;
        }
        if (s < best_d) {
            best_d = s;
            best = c;
        }
    }
    return best;
}

std::string temp_path(const char* name) {
    return std::string("vq_test_") + name + ".bin";
}

}  // namespace

TEST_CASE("quantize matches the exhaustive nearest-neighbor oracle on 1000 queries") {
    Rng rng(42);
    const Codebook cb = random_codebook(97, 12, rng);
    std::vector<double> q(12);
    for (int i = 0; i < 1000; ++i) {
        for (double& x : q) x = 3.0 * rng.normal();
        CHECK(quantize(cb, q) == nn_oracle(cb, q.data()));
    }
}

TEST_CASE("quantize ties resolve to the lowest index") {
    // Duplicate rows: the later copies can never win.
    Codebook cb;
    cb.k = 4;
    cb.d = 2;
    cb.vectors = {1.0, 1.0, 5.0, 5.0, 1.0, 1.0, 5.0, 5.0};
    CHECK(quantize(cb, {1.1, 0.9}) == 0);
    CHECK(quantize(cb, {5.0, 5.0}) == 1);
    // Exact midpoint between distinct rows 0 and 1: equal distance, lowest wins.
    CHECK(quantize(cb, {3.0, 3.0}) == 0);
}

TEST_CASE("quantize rejects malformed queries") {
    Rng rng(43);
    const Codebook cb = random_codebook(4, 3, rng);
    CHECK_THROWS_AS((void)quantize(cb, std::vector<double>{1.0, 2.0}), DimensionError);
    CHECK_THROWS_AS((void)quantize(cb, {1.0, std::nan(""), 0.0}), NumericError);
    Codebook empty;
    CHECK_THROWS_AS((void)quantize(empty, std::vector<double>{}), ConfigError);
}

TEST_CASE("codebook objective equals the summed nearest squared distances") {
    Rng rng(44);
    const Codebook cb = random_codebook(7, 4, rng);
    Tensor feats = Tensor::zeros({30, 4});
    for (double& x : feats.v) x = rng.normal();
    double want = 0.0;
    for (int i = 0; i < 30; ++i) {
        const double* x = feats.v.data() + static_cast<std::size_t>(i) * 4;
        const int c = nn_oracle(cb, x);
        for (int j = 0; j < 4; ++j) {
            const double diff = x[j] - cb.row(c)[j];
            want += diff * diff;
        }
    }
    CHECK(codebook_objective(cb, feats) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("k-means objective is monotonically non-increasing over 20 iterations") {
    Rng rng(45);
    // 16 well-separated planted clusters with tight noise.
    const int k = 16, d = 6, per = 12;
    Tensor feats = Tensor::zeros({k * per, d});
    for (int c = 0; c < k; ++c) {
        std::vector<double> center(d);
        for (double& x : center) x = 10.0 * rng.normal();
        for (int s = 0; s < per; ++s)
            for (int j = 0; j < d; ++j)
                feats.at(c * per + s, j) = center[static_cast<std::size_t>(j)] + 0.1 * rng.normal();
    }

    KmeansTrace trace;
    const Codebook cb = fit_codebook(feats, k, 20, 5, &trace);
    REQUIRE(trace.objective.size() == 20);
    for (std::size_t i = 1; i < trace.objective.size(); ++i)
        CHECK(trace.objective[i] <= trace.objective[i - 1] + 1e-9);
    // Planted structure is recovered: mean squared distance near the noise floor.
    CHECK(trace.objective.back() / (k * per) < 0.5);
    CHECK(cb.k == k);
    CHECK(cb.d == d);

    // Deterministic: the same seed reproduces the identical codebook.
    const Codebook again = fit_codebook(feats, k, 20, 5);
    CHECK(again.vectors == cb.vectors);
    const Codebook other = fit_codebook(feats, k, 20, 6);
    CHECK(other.vectors != cb.vectors);
}

TEST_CASE("degenerate inputs exercise the empty-cluster reseed") {
    // All points identical: seeding and updates must stay finite and the
    // reseed path fills every empty cluster.
    Tensor same = Tensor::full({5, 3}, 2.5);
    KmeansTrace trace;
    const Codebook cb = fit_codebook(same, 3, 4, 1, &trace);
    for (double x : cb.vectors) CHECK(x == 2.5);
    for (double o : trace.objective) CHECK(o == 0.0);

    // Two tight groups, k=4: at least two centers start empty-ish; objective
    // still decreases and every center lands on real data.
    Tensor two = Tensor::zeros({8, 2});
    for (int i = 0; i < 4; ++i) {
        two.at(i, 0) = 0.0;
        two.at(i, 1) = static_cast<double>(i) * 1e-3;
        two.at(4 + i, 0) = 9.0;
        two.at(4 + i, 1) = static_cast<double>(i) * 1e-3;
    }
    KmeansTrace t2;
    const Codebook cb2 = fit_codebook(two, 4, 20, 3, &t2);
    for (std::size_t i = 1; i < t2.objective.size(); ++i)
        CHECK(t2.objective[i] <= t2.objective[i - 1] + 1e-12);
    for (int c = 0; c < 4; ++c)
        CHECK((std::abs(cb2.row(c)[0] - 0.0) < 0.1 || std::abs(cb2.row(c)[0] - 9.0) < 0.1));
}

TEST_CASE("fit_codebook validates its arguments") {
    Tensor feats = Tensor::zeros({3, 2});
    CHECK_THROWS_AS((void)fit_codebook(feats, 0, 5, 1), ConfigError);
    CHECK_THROWS_AS((void)fit_codebook(feats, 4, 5, 1), ConfigError);  // n < k
    CHECK_THROWS_AS((void)fit_codebook(feats, 2, -1, 1), ConfigError);
    Tensor bad = feats;
    bad.v[0] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS((void)fit_codebook(bad, 2, 5, 1), NumericError);
}

TEST_CASE("codebook files round-trip exactly and reject corruption") {
    Rng rng(46);
    const Codebook cb = random_codebook(17, 5, rng);
    const std::string path = temp_path("roundtrip");
    save_codebook(cb, path);
    const Codebook back = load_codebook(path);
    CHECK(back.k == cb.k);
    CHECK(back.d == cb.d);
    CHECK(back.vectors == cb.vectors);

    CHECK_THROWS_AS((void)load_codebook("no_such_file.bin"), IoError);

    const std::string bad_magic = temp_path("badmagic");
    {
        std::ofstream f(bad_magic, std::ios::binary);
        f << "NOTACDBKxxxxxxxxxxxxxxxx";
    }
    CHECK_THROWS_AS((void)load_codebook(bad_magic), IoError);

    const std::string truncated = temp_path("truncated");
    {
        std::ifstream in(path, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
        std::ofstream f(truncated, std::ios::binary);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS((void)load_codebook(truncated), IoError);

    std::remove(path.c_str());
    std::remove(bad_magic.c_str());
    std::remove(truncated.c_str());
}
