#include "fedtabgan/data.hpp"
#include "fedtabgan/errors.hpp"
#include "fedtabgan/eval.hpp"

#include "oracles.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace fedtabgan;
using namespace fedtabgan::data;

namespace {

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("fedtabgan_test_data_" + name);
}

}  // namespace

TEST_CASE("matrix CSV round trip keeps labels") {
    Rng rng(1, 1);
    for (int trial = 0; trial < 20; ++trial) {
        auto m = testsupport::random_patients(rng, rng.below(12), 1 + rng.below(9));
        if (trial % 2) {
            std::vector<std::string> labels;
            for (std::size_t c = 0; c < m.cols(); ++c) labels.push_back("V" + std::to_string(10 * c + trial));
            m.set_labels(labels);
        }
        const auto path = temp_path("roundtrip.csv");
        save_matrix(m, path);
        auto back = load_matrix(path);
        if (!m.has_labels()) back.set_labels({});
        CHECK(back == m);
        CHECK(parse_matrix(format_matrix(m)).bits().size() == m.bits().size());
    }
}

TEST_CASE("parse errors carry locations") {
    std::string text = "a,b,c,d\n";
    for (int r = 0; r < 4; ++r) text += "0,1,0,1\n";
    text += "0,1,2,1\n";
    try {
        parse_matrix(text);
        FAIL("expected parse error");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("(row 5, column 3)") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_matrix(""), ParseError);
    CHECK_THROWS_AS(parse_matrix("a,b\n1\n"), ParseError);
    CHECK_THROWS_AS(parse_matrix("a,b\n1,0,1\n"), ParseError);
    CHECK_THROWS_AS(load_matrix(temp_path("does_not_exist.csv")), IoError);
}

TEST_CASE("labelled fixture with diagnosis codes") {
    const auto m = parse_matrix("0389,51881\n1,0\n");
    CHECK(m.rows() == 1);
    CHECK(m.cols() == 2);
    CHECK(m.labels() == std::vector<std::string>{"0389", "51881"});
    CHECK(m.at(0, 0) == 1);
    CHECK(m.at(0, 1) == 0);
}

TEST_CASE("plus-minus encoding and binarization") {
    PatientMatrix zero(1, 4);
    const auto e = encode_pm1(zero);
    for (Eigen::Index i = 0; i < e.size(); ++i) CHECK(e.data()[i] == -1.0);

    nn::Matrix v(1, 3);
    v << 0.0001, -0.0001, 0.0;
    const auto b = binarize(v);
    CHECK(b.at(0, 0) == 1);
    CHECK(b.at(0, 1) == 0);
    CHECK(b.at(0, 2) == 0);

    Rng rng(2, 2);
    for (int trial = 0; trial < 20; ++trial) {
        const auto m = testsupport::random_patients(rng, 1 + rng.below(10), 1 + rng.below(10));
        CHECK(binarize(encode_pm1(m)) == m);
    }
}

TEST_CASE("matrix construction checks") {
    CHECK_THROWS_AS(PatientMatrix(2, 2, {0, 1, 1}), ShapeError);
    CHECK_THROWS_AS(PatientMatrix(1, 2, {0, 2}), ValidationError);
    PatientMatrix m(2, 3);
    CHECK_THROWS_AS(m.set_labels({"a"}), ShapeError);
    const std::vector<std::size_t> bad{5};
    CHECK_THROWS_AS(m.select_rows(bad), UsageError);
}

TEST_CASE("synthetic source calibration") {
    SourceParams p;
    p.n_patients = 5000;
    p.sparsity_target = 0.02;
    p.seed = 5;
    const auto m = synth_source(p, 0);
    const double fraction = static_cast<double>(m.count_ones()) / static_cast<double>(m.rows() * m.cols());
    CHECK(fraction >= 0.018);
    CHECK(fraction <= 0.022);

    const auto expected = synth_feature_probabilities(p, 0);
    double mean = 0;
    for (double v : expected) mean += v;
    mean /= static_cast<double>(expected.size());
    CHECK(mean == doctest::Approx(0.02).epsilon(0.1));
}

TEST_CASE("synthetic source is deterministic and labelled") {
    SourceParams p;
    p.n_patients = 300;
    p.n_features = 40;
    p.seed = 9;
    CHECK(synth_source(p, 0) == synth_source(p, 0));
    CHECK(synth_source(p, 1) == synth_source(p, 1));
    CHECK_FALSE(synth_source(p, 0) == synth_source(p, 1));
    CHECK(synthetic_labels(40).size() == 40);

    SourceParams bad = p;
    bad.sparsity_target = 1.5;
    CHECK_THROWS_AS(synth_source(bad, 0), ConfigError);
    bad = p;
    bad.n_features = 0;
    CHECK_THROWS_AS(validate(bad), ConfigError);
    bad = p;
    bad.silo_shift = -1;
    CHECK_THROWS_AS(validate(bad), ConfigError);
}

TEST_CASE("zero silo shift leaves only sampling noise") {
    SourceParams p;
    p.n_patients = 5000;
    p.n_features = 200;
    p.sparsity_target = 0.03;
    p.silo_shift = 0.0;
    for (std::uint64_t seed : {1, 2, 3}) {
        p.seed = seed;
        const auto a = oracle::column_means(synth_source(p, 0));
        const auto b = oracle::column_means(synth_source(p, 1));
        double pbar = 0;
        for (double v : a) pbar += v;
        pbar /= static_cast<double>(a.size());
        const double bound = 3.0 * std::sqrt(pbar * (1 - pbar) / static_cast<double>(p.n_patients));
        CHECK(oracle::rmse(a, b) < bound);
    }
}

TEST_CASE("silo drift grows with the shift") {
    const std::vector<double> shifts{0.0, 0.5, 1.0, 2.0};
    std::vector<double> mean_rmse(shifts.size(), 0.0);
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        for (std::size_t s = 0; s < shifts.size(); ++s) {
            SourceParams p;
            p.n_patients = 1000;
            p.n_features = 60;
            p.silo_shift = shifts[s];
            p.seed = seed;
            mean_rmse[s] += oracle::rmse(oracle::column_means(synth_source(p, 0)),
                                         oracle::column_means(synth_source(p, 1))) / 20.0;
        }
    }
    for (std::size_t s = 1; s < shifts.size(); ++s) CHECK(mean_rmse[s] >= mean_rmse[s - 1]);
}

TEST_CASE("describe_patient") {
    auto m = parse_matrix("0389,51881,4019\n1,0,0\n0,0,0\n1,1,1\n");
    const CodeDictionary dict = parse_dictionary("code,description\n0389,Septicemia NOS\n51881,\"Acute respiratry failure\"\n");
    CHECK(describe_patient(m, 0, dict) == std::vector<std::string>{"Septicemia NOS"});
    CHECK(describe_patient(m, 1, dict).empty());
    CHECK(describe_patient(m, 2, dict) ==
          std::vector<std::string>{"Septicemia NOS", "Acute respiratry failure", "4019"});
    CHECK_THROWS_AS(describe_patient(m, 3, dict), UsageError);
}

TEST_CASE("dictionary parsing") {
    const auto d = parse_dictionary("code,description\n\"0389\",\"Septicemia, NOS\"\n");
    CHECK(d.at("0389") == "Septicemia, NOS");
    CHECK_THROWS_AS(parse_dictionary("code,description\n1,a\n1,b\n"), ParseError);
    CHECK_THROWS_AS(parse_dictionary("code,description\n1,a,b\n"), ParseError);
    CHECK(split_csv_line("a,\"b,\"\"c\"\"\",d") == std::vector<std::string>{"a", "b,\"c\"", "d"});
    CHECK(csv_escape("x,y") == "\"x,y\"");
    CHECK(csv_escape("plain") == "plain");
}

TEST_CASE("shipped ICD-9 sample dictionary") {
    const auto d = load_dictionary(std::filesystem::path(FEDTABGAN_SOURCE_DIR) / "data" / "icd9_sample.csv");
    CHECK(d.at("0389") == "Septicemia NOS");
    CHECK(d.size() >= 10);
}
