#include <cmath>

#include "helpers.hpp"
#include "unlearnkit/errors.hpp"
#include "unlearnkit/eval.hpp"
#include "unlearnkit/rng.hpp"

using namespace unlearnkit;
using namespace testing;

namespace {

Eigen::MatrixXd gaussian(Eigen::Index n, Eigen::Index p, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> n01;
    Eigen::MatrixXd x(n, p);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n01(rng);
    return x;
}

// Linear CKA written from its definition: HSIC with explicit centering matrices.
double cka_reference(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    const auto n = x.rows();
    const Eigen::MatrixXd h = Eigen::MatrixXd::Identity(n, n) - Eigen::MatrixXd::Constant(n, n, 1.0 / static_cast<double>(n));
    const Eigen::MatrixXd k = h * x * x.transpose() * h, l = h * y * y.transpose() * h;
    return (k.cwiseProduct(l)).sum() / (k.norm() * l.norm());
}

Eigen::MatrixXd random_rotation(Eigen::Index p, std::uint64_t seed) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian(p, p, seed));
    return qr.householderQ();
}

ConfusionMatrix brute_confusion(const ClassifierState& a, const ClassifierState& b, const Dataset& ds) {
    ConfusionMatrix m(a.num_classes(), std::vector<std::int64_t>(a.num_classes(), 0));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto pa = logits_row(a, ds.row(i)), pb = logits_row(b, ds.row(i));
        const auto ia = std::max_element(pa.begin(), pa.end()) - pa.begin();
        const auto ib = std::max_element(pb.begin(), pb.end()) - pb.begin();
        ++m[static_cast<std::size_t>(ia)][static_cast<std::size_t>(ib)];
    }
    return m;
}

std::int64_t total(const ConfusionMatrix& m) {
    std::int64_t t = 0;
    for (const auto& r : m)
        for (auto v : r) t += v;
    return t;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("confusion: same model is diagonal, empty split is zero") {
    const auto& s = blob_model();
    const auto m = confusion_prepost(s, s, blob_data());
    CHECK(total(m) == static_cast<std::int64_t>(blob_data().size()));
    for (std::size_t a = 0; a < m.size(); ++a)
        for (std::size_t b = 0; b < m.size(); ++b)
            if (a != b) CHECK(m[a][b] == 0);
    const auto empty = subset(blob_data(), std::vector<std::size_t>{});
    CHECK(total(confusion_prepost(s, s, empty)) == 0);
}

TEST_CASE("confusion: matches a brute-force count between two models") {
    const auto other = init_state(make_mlp2(8, 5, 32), 7);
    const auto m = confusion_prepost(blob_model(), other, blob_data());
    CHECK(m == brute_confusion(blob_model(), other, blob_data()));
    CHECK(total(m) == static_cast<std::int64_t>(blob_data().size()));
}

TEST_CASE("cka: self-similarity, symmetry and the reference formula") {
    const auto x = gaussian(40, 6, 1), y = gaussian(40, 9, 2);
    CHECK(std::abs(cka_linear(x, x) - 1.0) < 1e-9);
    CHECK(std::abs(cka_linear(x, y) - cka_linear(y, x)) < 1e-9);
    CHECK(std::abs(cka_linear(x, y) - cka_reference(x, y)) < 1e-9);
    // Wide inputs take the Gram path.
    const auto wx = gaussian(10, 50, 3), wy = gaussian(10, 70, 4);
    CHECK(std::abs(cka_linear(wx, wy) - cka_reference(wx, wy)) < 1e-9);
    CHECK(std::abs(cka_linear(wx, wx) - 1.0) < 1e-9);
}

TEST_CASE("cka: invariant to orthogonal transforms and isotropic scaling") {
    const Eigen::MatrixXd x = gaussian(60, 8, 5), y = gaussian(60, 5, 6) + x.leftCols(5);
    const double base = cka_linear(x, y);
    CHECK(std::abs(cka_linear(x * random_rotation(8, 7), y) - base) < 1e-6);
    CHECK(std::abs(cka_linear(3.5 * x, y) - base) < 1e-6);
    CHECK(std::abs(cka_linear(x.rowwise() + Eigen::RowVectorXd::Constant(8, 4.0), y) - base) < 1e-9);
}

TEST_CASE("cka: independent data scores low") {
    for (std::uint64_t seed = 0; seed < 5; ++seed)
        CHECK(cka_linear(gaussian(500, 10, 100 + seed), gaussian(500, 10, 200 + seed)) < 0.1);
}

TEST_CASE("cka: degenerate inputs raise") {
    CHECK_THROWS_AS(cka_linear(gaussian(1, 3, 0), gaussian(1, 3, 1)), DegenerateInputError);
    CHECK_THROWS_AS(cka_linear(Eigen::MatrixXd::Ones(5, 3), gaussian(5, 3, 1)), DegenerateInputError);
    CHECK_THROWS_AS(cka_linear(gaussian(5, 3, 0), gaussian(6, 3, 1)), ContractError);
}

TEST_CASE("layerwise cka: identical models give a unit diagonal") {
    const auto s = init_state(make_cnn_s(4, 10, 10, 3), 2);
    const auto ds = tiny_images(10, 1);
    const auto m = layerwise_cka(s, s, ds);
    REQUIRE(m.rows() == 4);
    REQUIRE(m.cols() == 4);
    for (Eigen::Index i = 0; i < 4; ++i) CHECK(m(i, i) >= 0.999);
    CHECK((m - m.transpose()).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(layerwise_cka(init_state(make_linear(8, 5), 0), init_state(make_linear(8, 5), 1), blob_data()).size() == 1);
}

TEST_CASE("layerwise cka: hand-built two-layer model") {
    // Non-negative weights and inputs keep the ReLU in its linear regime, so activations are x A^T and x A^T B^T.
    Architecture arch;
    arch.name = "two_layer";
    arch.input_shape = {3};
    arch.num_classes = 2;
    arch.layers = {{.name = "hidden", .kind = LayerKind::dense, .activation = Activation::relu, .units = 2},
                   {.name = "out", .kind = LayerKind::dense, .units = 2}};
    arch.resolve();
    auto before = zero_state(arch), after = zero_state(arch);
    before.params.layers[0][0].values = {1, 0, 2, 0, 1, 1};
    before.params.layers[1][0].values = {1, 1, 0, 2};
    after.params.layers[0][0].values = {2, 1, 0, 1, 0, 3};
    after.params.layers[1][0].values = {1, 0, 1, 1};
    Dataset ds;
    ds.shape = {3};
    ds.num_classes = 2;
    Rng rng(0);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (int i = 0; i < 12; ++i) {
        for (int j = 0; j < 3; ++j) ds.inputs.push_back(u(rng));
        ds.labels.push_back(i % 2);
        ds.ids.push_back(i);
    }
    Eigen::MatrixXd x(12, 3);
    for (int i = 0; i < 12; ++i)
        for (int j = 0; j < 3; ++j) x(i, j) = ds.inputs[static_cast<std::size_t>(i * 3 + j)];
    auto mat = [](const ClassifierState& s, std::size_t l, Eigen::Index rows, Eigen::Index cols) {
        return Eigen::Map<const Matrix<float>>(s.params.layers[l][0].values.data(), rows, cols).cast<double>().eval();
    };
    const Eigen::MatrixXd ha = x * mat(before, 0, 2, 3).transpose(), hb = x * mat(after, 0, 2, 3).transpose();
    const Eigen::MatrixXd oa = ha * mat(before, 1, 2, 2).transpose(), ob = hb * mat(after, 1, 2, 2).transpose();
    const auto m = layerwise_cka(before, after, ds);
    REQUIRE(m.rows() == 2);
    CHECK(std::abs(m(0, 0) - cka_reference(ha, hb)) < 1e-6);
    CHECK(std::abs(m(0, 1) - cka_reference(ha, ob)) < 1e-6);
    CHECK(std::abs(m(1, 0) - cka_reference(oa, hb)) < 1e-6);
    CHECK(std::abs(m(1, 1) - cka_reference(oa, ob)) < 1e-6);
}

TEST_CASE("evaluate: untouched model, counting oracle and relabel scoring") {
    const auto m = select_forget_set(blob_data(), 10, ForgetMode::relabel, 3);
    const auto [f, r] = split_remaining(blob_data(), m);
    const auto test = make_synthetic(5, 10, 8, 0.3, 50);
    const auto rep = evaluate(blob_model(), blob_model(), f, r, test, m);
    for (const auto& [split, a] : rep.accuracies) CHECK(a.before == a.after);
    const auto pred = predict(blob_model(), r);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < r.size(); ++i) hits += pred[i] == r.labels[i];
    CHECK(rep.accuracies.at("remain").after == 100.0 * (static_cast<double>(hits) / static_cast<double>(r.size())));
    const auto targets = forget_targets(f, m);
    const auto fp = predict(blob_model(), f);
    std::size_t relabeled = 0;
    for (std::size_t i = 0; i < f.size(); ++i) relabeled += fp[i] == targets[i];
    CHECK(rep.accuracies.at("forget").after == 100.0 * (static_cast<double>(relabeled) / static_cast<double>(f.size())));
    CHECK(total(rep.confusion) == static_cast<std::int64_t>(f.size()));
    CHECK(rep.cka.at("forget")(0, 0) >= 0.999);
    CHECK(rep.metadata["mode"] == "relabel");
}

TEST_CASE("evaluate: a single-row forget split skips its CKA") {
    const auto m = select_forget_set(blob_data(), 1, ForgetMode::misclassify, 3);
    const auto [f, r] = split_remaining(blob_data(), m);
    const auto rep = evaluate(blob_model(), blob_model(), f, r, subset(r, std::vector<std::size_t>{}), m);
    CHECK(rep.cka.count("forget") == 0);
    CHECK(rep.metadata["cka_skipped"].contains("forget"));
    CHECK(rep.accuracies.count("test") == 0);
}

TEST_CASE("report: JSON round trip keeps values bit-exact") {
    EvalReport r;
    r.accuracies["remain"] = {92.59, 79.65};
    r.accuracies["forget"] = {100.0, 0.0};
    r.confusion = {{3, 1}, {0, 4}};
    r.cka["forget"] = Eigen::MatrixXd::Constant(2, 2, 0.1 + 0.2);
    const auto text = report_to_json(r).dump();
    const auto back = report_from_json(nlohmann::json::parse(text));
    CHECK(back.accuracies.at("remain").before == 92.59);
    CHECK(back.accuracies.at("remain").after == 79.65);
    CHECK(back.confusion == r.confusion);
    CHECK(back.cka.at("forget")(1, 1) == 0.1 + 0.2);
    CHECK_THROWS_AS(report_from_json(nlohmann::json{{"accuracies", 1}}), IoError);
}

TEST_CASE("report: CSV layout and shortest number formatting") {
    EvalReport r;
    r.accuracies["remain"] = {92.59, 79.65};
    r.confusion = {{3, 1}, {0, 4}};
    CHECK(accuracies_csv(r, "run0", "adv", 16) ==
          "run_id,method,k,split,state,accuracy\nrun0,adv,16,remain,before,92.59\nrun0,adv,16,remain,after,79.65\n");
    CHECK(matrix_csv(r.confusion) == "3,1\n0,4\n");
    CHECK(format_number(0.1 + 0.2) == "0.30000000000000004");
    CHECK(std::stod(format_number(1.0 / 3.0)) == 1.0 / 3.0);
    const auto dir = temp_dir("report");
    r.cka["remain"] = Eigen::MatrixXd::Identity(2, 2);
    write_report_files(dir, r, "run0", "adv", 16);
    for (const char* name : {"report.json", "accuracies.csv", "confusion.csv", "cka_remain.csv"})
        CHECK(std::filesystem::exists(dir / name));
    CHECK(read_bytes(dir / "cka_remain.csv") == "1,0\n0,1\n");
}

}  // TEST_SUITE
