// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
// Everything runs against the in-process mock runner.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <iostream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "cli.hpp"
#include "oracles/oracles.hpp"
#include "steerkit/errors.hpp"
#include "steerkit/mock_runner.hpp"
#include "steerkit/protocol.hpp"
#include "steerkit/sae_engine.hpp"
#include "steerkit/search_eval.hpp"
#include "steerkit/stats.hpp"
#include "steerkit/steering_core.hpp"
#include "steerkit/toy_sim.hpp"
#include "steerkit/vector_extractors.hpp"
#include "support.hpp"

using namespace steerkit;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

class Check {
public:
    void expect(bool ok, const std::string& what) {
        ++total_;
        if (!ok && failures_.size() < 5) failures_.push_back(what);
        if (!ok) ++failed_;
    }
    void note(std::string s) { notes_.push_back(std::move(s)); }
    bool ok() const { return failed_ == 0; }
    std::string summary() const {
        std::string s;
        if (!ok()) {
            s = std::to_string(failed_) + "/" + std::to_string(total_) + " checks failed: ";
            for (std::size_t i = 0; i < failures_.size(); ++i) s += (i ? "; " : "") + failures_[i];
            return s;
        }
        s = std::to_string(total_) + " checks";
        for (const auto& n : notes_) s += ", " + n;
        return s;
    }

private:
    std::size_t total_ = 0;
    std::size_t failed_ = 0;
    std::vector<std::string> failures_;
    std::vector<std::string> notes_;
};

std::string fmt(double x) {
    std::ostringstream s;
    s.precision(6);
    s << x;
    return s.str();
}

double seconds_since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

Eigen::MatrixXd random_rows(rng::Generator& g, Eigen::Index n, Eigen::Index d, double scale, double shift = 0.0) {
    Eigen::MatrixXd m(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < d; ++j) m(i, j) = g.normal() * scale + shift;
    return m;
}

oracle::Matrix to_rows(const Eigen::MatrixXd& m) {
    oracle::Matrix out(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
    return out;
}

int run_cli(std::vector<std::string> args, std::string* out = nullptr) {
    std::ostringstream o, e;
    const int code = cli::run(args, o, e);
    if (out != nullptr) *out = o.str();
    if (code != 0) std::cerr << "  cli " << args.front() << " ...: exit " << code << ": " << e.str();
    return code;
}

std::string write_dataset(const fs::path& p, std::size_t n) {
    std::ostringstream s;
    write_dataset_jsonl(test::make_items(n), s);
    test::write_file(p, s.str());
    return p.string();
}

std::string write_script(const fs::path& p, const MockScript& s) {
    test::write_file(p, s.to_json().dump());
    return p.string();
}

std::string write_vectors(const fs::path& dir, std::uint32_t d, const std::vector<std::uint32_t>& layers) {
    fs::create_directories(dir);
    for (auto l : layers) {
        SteeringVector v;
        v.taxonomy = "counting";
        v.layer = l;
        v.values.assign(d, 0.05 * (l + 1));
        save_svec(v, (dir / ("layer_" + std::to_string(l) + ".svec")).string());
    }
    return dir.string();
}

MockRule cell_rule(std::uint32_t layer, double alpha, double accuracy) {
    MockRule r;
    r.layer = layer;
    r.alpha = alpha;
    r.accuracy = accuracy;
    return r;
}

// ------------------------------------------------------------------ criteria

void mock_only_pipeline(Check& c) {
    ::unsetenv("STEERKIT_RUNNER");
    const auto dir = test::temp_dir("acc_pipeline");
    MockScript script;
    script.n_layers = 12;
    script.d_model = 16;
    script.default_accuracy = 0.5;
    script.rules.push_back(cell_rule(4, 1.0, 0.7));
    const auto runner = "mock:" + write_script(dir / "script.json", script);
    const auto concepts = dir / "counting.tsv";
    {
        std::ostringstream doc;
        doc << "taxonomy: counting\ndefinition: the number of objects of a kind in the image\n";
        for (int i = 0; i < 12; ++i) doc << "There are " << (i + 2) << " cups on shelf " << i << ".\t" << (i + 2) << "\n";
        test::write_file(concepts, doc.str());
    }
    const auto data = write_dataset(dir / "data.jsonl", 80);
    const auto out = (dir / "out").string();
    c.expect(run_cli({"--runner", runner, "--out", out, "extract", "--method", "probe", "--concepts", concepts.string(),
                      "--layers", "3-5"}) == 0,
             "extract");
    c.expect(run_cli({"--runner", runner, "--out", out, "grid", "--vectors", out + "/counting/probe", "--dataset", data,
                      "--alphas", "0.5,1"}) == 0,
             "grid");
    c.expect(run_cli({"--runner", runner, "--out", out, "ood", "--dataset", data, "--from-grid", out + "/grid_manifest.json",
                      "--validation-size", "20"}) == 0,
             "ood");
    std::string table;
    c.expect(run_cli({"stats", "--base", out + "/ood_baseline.json", "--treated", out + "/ood_steered.json", "--samples",
                      "2000"},
                     &table) == 0,
             "stats");
    c.expect(table.find("\n60,") != std::string::npos, "stats table covers the 60 test items");
    c.note("extract -> grid -> ood -> stats on mock only");
}

void extraction_oracles(Check& c) {
    rng::Generator g(2024);
    double worst_ms = 0.0;
    for (int iter = 0; iter < 200; ++iter) {
        const auto d = static_cast<Eigen::Index>(1 + g.below(48));
        const auto a = random_rows(g, 1 + g.below(30), d, 1.0 + 20.0 * g.uniform(), g.normal() * 5.0);
        const auto b = random_rows(g, 1 + g.below(30), d, 1.0 + 20.0 * g.uniform(), g.normal() * 5.0);
        const auto v = compute_meanshift(a, b);
        const auto expect = oracle::mean_difference(to_rows(a), to_rows(b));
        for (std::size_t j = 0; j < expect.size(); ++j) worst_ms = std::max(worst_ms, std::abs(v.values[j] - expect[j]));
    }
    c.expect(worst_ms < 1e-6, "mean shift error " + fmt(worst_ms));

    double worst_pca = 0.0;
    for (int iter = 0; iter < 40; ++iter) {
        const auto d = static_cast<Eigen::Index>(2 + g.below(10));
        const auto n = iter % 2 == 0 ? d + 5 + static_cast<Eigen::Index>(g.below(20)) : static_cast<Eigen::Index>(2 + g.below(d - 1));
        Eigen::MatrixXd xs = random_rows(g, n, d, 1.0);
        for (Eigen::Index j = 0; j < d; ++j) xs.col(j) *= std::pow(1.6, static_cast<double>(d - j));
        Eigen::MatrixXd rot = Eigen::HouseholderQR<Eigen::MatrixXd>(random_rows(g, d, d, 1.0)).householderQ();
        xs = xs * rot;
        const auto k = static_cast<std::size_t>(1 + g.below(static_cast<std::uint64_t>(std::min(n - 1, d))));
        const auto fit = pca_fit(xs, k);
        const auto eig = oracle::jacobi_eigen(oracle::covariance(to_rows(xs)));
        for (std::size_t r = 0; r < k; ++r) {
            const auto row = fit.matrix.row(static_cast<Eigen::Index>(r));
            double dot = 0.0;
            for (Eigen::Index j = 0; j < d; ++j) dot += row(j) * eig.vectors[r][j];
            const double sign = dot < 0 ? -1.0 : 1.0;
            for (Eigen::Index j = 0; j < d; ++j) worst_pca = std::max(worst_pca, std::abs(row(j) - sign * eig.vectors[r][j]));
        }
    }
    c.expect(worst_pca < 1e-6, "PCA error " + fmt(worst_pca));

    double min_acc = 1.0, worst_span = 0.0;
    for (int iter = 0; iter < 20; ++iter) {
        const Eigen::Index d = 16 + static_cast<Eigen::Index>(g.below(24));
        const Eigen::Index n = 10 + static_cast<Eigen::Index>(g.below(static_cast<std::uint64_t>(d)));
        Eigen::VectorXd dir(d);
        for (Eigen::Index j = 0; j < d; ++j) dir(j) = g.normal();
        dir.normalize();
        Eigen::MatrixXd pos = random_rows(g, n, d, 1.0);
        Eigen::MatrixXd neg = random_rows(g, n, d, 1.0);
        pos.rowwise() += (5.0 * dir).transpose();
        neg.rowwise() -= (5.0 * dir).transpose();
        const auto model = train_probe(pos, neg);
        min_acc = std::min(min_acc, model.train_accuracy);
        const auto v = probe_steering_vector(model);
        Eigen::Map<const Eigen::VectorXd> vv(v.values.data(), d);
        const Eigen::MatrixXd& q = model.projection.matrix;
        worst_span = std::max(worst_span, (q.transpose() * (q * vv) - vv).cwiseAbs().maxCoeff());
    }
    c.expect(min_acc >= 0.99, "probe train accuracy " + fmt(min_acc));
    c.expect(worst_span < 1e-6, "probe row-space residual " + fmt(worst_span));
    c.note("max mean-shift err " + fmt(worst_ms) + ", max PCA err " + fmt(worst_pca) + ", min probe acc " + fmt(min_acc));
}

void sae_math(Check& c) {
    rng::Generator g(77);
    double worst = 0.0;
    for (int iter = 0; iter < 200; ++iter) {
        const auto d = static_cast<std::uint32_t>(1 + g.below(16));
        const auto f = static_cast<std::uint32_t>(1 + g.below(32));
        const auto sae = test::random_sae(g, d, f, iter % 2 == 1);
        oracle::DenseSae o;
        o.w_enc.resize(f, d);
        o.w_dec.resize(d, f);
        o.b_enc.resize(f);
        o.b_dec.resize(d);
        for (std::uint32_t i = 0; i < f; ++i)
            for (std::uint32_t j = 0; j < d; ++j) o.w_enc(i, j) = sae.enc_weights()[i * d + j];
        for (std::uint32_t j = 0; j < d; ++j)
            for (std::uint32_t i = 0; i < f; ++i) o.w_dec(j, i) = sae.dec_weights()[j * f + i];
        for (std::uint32_t i = 0; i < f; ++i) o.b_enc(i) = sae.enc_bias()[i];
        for (std::uint32_t j = 0; j < d; ++j) o.b_dec(j) = sae.dec_bias()[j];
        if (sae.activation().kind == SaeActivationKind::jumprelu) {
            o.jump = true;
            o.theta.resize(f);
            for (std::uint32_t i = 0; i < f; ++i) o.theta(i) = sae.activation().thresholds[i];
        }
        std::vector<double> x(d);
        for (auto& v : x) v = g.normal();
        const Eigen::Map<const Eigen::VectorXd> ex(x.data(), d);
        const auto fx = encode(sae, x);
        const auto ofx = o.encode(ex);
        const auto xhat = decode(sae, fx);
        const auto oxhat = o.decode(ofx);
        const auto os = o.strengths(ex);
        for (std::uint32_t i = 0; i < f; ++i) {
            worst = std::max(worst, std::abs(fx[i] - ofx(i)));
            worst = std::max(worst, std::abs(activation_strength(sae, x, i) - os(i)));
        }
        for (std::uint32_t j = 0; j < d; ++j) worst = std::max(worst, std::abs(xhat[j] - oxhat(j)));
    }
    c.expect(worst < 1e-6, "encode/decode/strength error " + fmt(worst));

    const auto relu = test::random_sae(g, 8, 24, false);
    const SAEModel jr(0, 8, 24, relu.enc_weights(), relu.enc_bias(), relu.dec_weights(), relu.dec_bias(),
                      SaeActivation{SaeActivationKind::jumprelu, std::vector<float>(24, 0.0f)});
    std::size_t mismatches = 0;
    for (int i = 0; i < 10000; ++i) {
        std::vector<double> x(8);
        for (auto& v : x) v = g.normal();
        mismatches += encode(relu, x) != encode(jr, x);
    }
    c.expect(mismatches == 0, std::to_string(mismatches) + " JumpReLU(0) vs ReLU mismatches");

    std::size_t topn_bad = 0;
    for (int iter = 0; iter < 100; ++iter) {
        const auto d = static_cast<std::uint32_t>(2 + g.below(15));
        const auto f = static_cast<std::uint32_t>(2 + g.below(31));
        const auto sae = test::random_sae(g, d, f, false);
        std::vector<double> x(d);
        for (auto& v : x) v = g.normal();
        std::vector<double> strengths(f);
        for (std::uint32_t i = 0; i < f; ++i) strengths[i] = activation_strength(sae, x, i);
        const auto n = 1 + g.below(f);
        const auto expect = oracle::top_n(strengths, n);
        const auto got = top_n_candidates(sae, x, n);
        bool same = got.size() == expect.size();
        for (std::size_t k = 0; same && k < n; ++k) same = got[k].feature_id == static_cast<std::int64_t>(expect[k]);
        topn_bad += !same;
    }
    c.expect(topn_bad == 0, std::to_string(topn_bad) + " top-n mismatches");
    c.note("max err " + fmt(worst));
}

bool rows_identical(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

void intervention_contract(Check& c) {
    rng::Generator g(99);
    auto make = [&](std::size_t d, bool dyadic, HiddenStates& h, TokenRoles& roles) {
        const auto n = 1 + g.below(20);
        for (std::uint32_t t = 0; t < n; ++t) {
            std::vector<float> row(d);
            for (auto& x : row)
                x = dyadic ? static_cast<float>(static_cast<std::int64_t>(g.below(257)) - 128) / 4.0f
                           : static_cast<float>(g.normal() * 50.0);
            h[t] = row;
            roles[t] = static_cast<TokenRole>(g.below(6));
        }
    };
    auto vec = [&](std::size_t d, bool dyadic) {
        SteeringVector v;
        v.taxonomy = "color";
        v.values.resize(d);
        for (auto& x : v.values) x = dyadic ? static_cast<double>(static_cast<std::int64_t>(g.below(65)) - 32) / 8.0 : g.normal();
        return v;
    };
    auto classes = [&] {
        switch (g.below(3)) {
            case 0: return TokenClasses::image_only();
            case 1: return TokenClasses::text_only();
            default: return TokenClasses::both();
        }
    };
    std::size_t identity_bad = 0, output_bad = 0, linear_bad = 0, mask_bad = 0;
    for (int iter = 0; iter < 1000; ++iter) {
        const auto d = 1 + g.below(24);
        HiddenStates h;
        TokenRoles roles;
        make(d, false, h, roles);
        const auto v = vec(d, false);
        const auto zero = apply_intervention(h, roles, build_plan(v, 0, 0.0, classes()));
        for (const auto& [t, row] : h) identity_bad += !rows_identical(zero.at(t), row);

        const auto cls = classes();
        const auto out = apply_intervention(h, roles, build_plan(v, 0, g.uniform() * 100.0, cls));
        for (const auto& [t, row] : h) {
            if (roles.at(t) == TokenRole::output) output_bad += !rows_identical(out.at(t), row);
            const bool is_image = roles.at(t) == TokenRole::image;
            const bool masked = is_image ? !cls.image : !cls.text;
            if (roles.at(t) != TokenRole::output && masked) mask_bad += !rows_identical(out.at(t), row);
        }

        HiddenStates hd;
        TokenRoles rd;
        make(d, true, hd, rd);
        const auto vd = vec(d, true);
        const double a = static_cast<double>(g.below(17)) / 4.0, b = static_cast<double>(g.below(17)) / 4.0;
        const auto k = classes();
        const auto twice = apply_intervention(apply_intervention(hd, rd, build_plan(vd, 1, a, k)), rd, build_plan(vd, 1, b, k));
        const auto once = apply_intervention(hd, rd, build_plan(vd, 1, a + b, k));
        for (const auto& [t, row] : once) linear_bad += !rows_identical(twice.at(t), row);
    }
    c.expect(identity_bad == 0, std::to_string(identity_bad) + " rows changed at alpha 0");
    c.expect(output_bad == 0, std::to_string(output_bad) + " output rows changed");
    c.expect(linear_bad == 0, std::to_string(linear_bad) + " rows break a+b linearity");
    c.expect(mask_bad == 0, std::to_string(mask_bad) + " masked rows changed");
    c.note("1000 randomized cases");
}

void toy_simulator(Check& c) {
    const auto start = Clock::now();
    const auto alphas = alpha_sweep(100.0, 0.5);
    double worst_drop = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto m = make_planted_model(16, {"yellow", "red", "blue", "green"}, seed);
        add_intermediate(m, "orange", "yellow", "red");
        const auto curve = crossover_curve(m, "yellow", "red", alphas);
        const auto r = check_crossover(curve, "yellow", "orange", "red");
        const auto t = m.index_of("red");
        for (std::size_t i = 1; i < alphas.size(); ++i) {
            worst_drop = std::max(worst_drop, curve.probabilities[i - 1][t] - curve.probabilities[i][t]);
        }
        c.expect(r.argmax_runs == std::vector<std::string>{"yellow", "orange", "red"}, "seed " + std::to_string(seed) + " argmax order");
        c.expect(r.intermediate_unimodal, "seed " + std::to_string(seed) + " intermediate not unimodal");
    }
    c.expect(worst_drop <= 1e-9, "target probability drops by " + fmt(worst_drop));
    const double secs = seconds_since(start);
    c.expect(secs < 5.0, "runtime " + fmt(secs) + " s");
    c.note("20 seeds in " + fmt(secs) + " s");
}

void grid_and_ood(Check& c) {
    rng::Generator g(505);
    std::size_t scan_bad = 0;
    for (int iter = 0; iter < 50; ++iter) {
        const auto items = test::make_items(10 + g.below(30));
        MockScript script;
        script.n_layers = 26;
        script.d_model = 8;
        script.with_answers_for(items);
        script.default_accuracy = 0.1 * static_cast<double>(g.below(11));
        script.seed = g.next();
        const auto first = static_cast<std::uint32_t>(g.below(10));
        std::vector<std::uint32_t> layers;
        for (std::uint32_t l = first; l <= first + g.below(6); ++l) layers.push_back(l);
        std::vector<double> alphas;
        for (std::uint64_t k = 0, n = 1 + g.below(5); k < n; ++k) alphas.push_back(0.2 * static_cast<double>(k + 1));
        for (auto l : layers)
            for (double a : alphas)
                if (g.bernoulli(0.7)) script.rules.push_back(cell_rule(l, a, 0.25 * static_cast<double>(g.below(5))));
        std::map<std::uint32_t, SteeringVector> vectors;
        for (auto l : layers) {
            SteeringVector v;
            v.layer = l;
            v.values.assign(8, 0.5);
            vectors[l] = v;
        }
        LocalMockRunner mock(script);
        const auto result = grid_search(mock.connect(), items, vectors, GridSpec{layers, alphas, TokenClasses::both()});
        std::stringstream csv;
        write_grid_csv(result.cells, csv);
        const auto table = read_grid_csv(csv);
        // Exhaustive scan: max accuracy, then smaller alpha, then smaller layer.
        const GridCell* best = nullptr;
        for (const auto& cell : table) {
            if (best == nullptr || cell.accuracy > best->accuracy ||
                (cell.accuracy == best->accuracy &&
                 (cell.alpha < best->alpha || (cell.alpha == best->alpha && cell.layer < best->layer)))) {
                best = &cell;
            }
        }
        scan_bad += best == nullptr || table.size() != layers.size() * alphas.size() || best->layer != result.best.layer ||
                    best->alpha != result.best.alpha;
    }
    c.expect(scan_bad == 0, std::to_string(scan_bad) + "/50 grids disagree with the exhaustive scan");

    // `grid` over layers 5..20 with (5, 1.0) uniquely optimal.
    const auto dir = test::temp_dir("acc_grid");
    const auto data = write_dataset(dir / "data.jsonl", 60);
    MockScript script;
    script.n_layers = 26;
    script.d_model = 8;
    script.default_accuracy = 0.4;
    for (std::uint32_t l = 5; l <= 20; ++l)
        for (double a : {0.1, 0.2, 0.4, 0.6, 0.8, 1.0})
            if (!(l == 5 && a == 1.0)) script.rules.push_back(cell_rule(l, a, 0.4 + 0.01 * (l % 7) + 0.05 * a));
    script.rules.push_back(cell_rule(5, 1.0, 0.9));
    const auto runner = "mock:" + write_script(dir / "script.json", script);
    std::vector<std::uint32_t> layers;
    for (std::uint32_t l = 5; l <= 20; ++l) layers.push_back(l);
    const auto vectors = write_vectors(dir / "vectors", 8, layers);
    std::string out;
    c.expect(run_cli({"--runner", runner, "--out", (dir / "out").string(), "grid", "--vectors", vectors, "--dataset", data}, &out) == 0,
             "grid command failed");
    json gm;
    try {
        gm = json::parse(test::read_file(dir / "out/grid_manifest.json"));
    } catch (const std::exception&) {
    }
    const bool planted = gm.contains("best") && gm["best"]["layer"] == 5 && gm["best"]["alpha"] == 1.0;
    c.expect(planted, "grid best is not (5, 1.0): " + out);

    // `ood`: {both} wins validation and lifts the test remainder by +10%.
    MockScript ood;
    ood.n_layers = 26;
    ood.d_model = 8;
    ood.default_accuracy = 0.5;
    MockRule both;
    both.classes = "both";
    both.accuracy = 0.6;
    ood.rules.push_back(both);
    const auto ood_runner = "mock:" + write_script(dir / "ood.json", ood);
    const auto ood_data = write_dataset(dir / "ood.jsonl", 408);
    c.expect(run_cli({"--runner", ood_runner, "--out", (dir / "ood_out").string(), "ood", "--dataset", ood_data, "--from-grid",
                      (dir / "out/grid_manifest.json").string(), "--validation-size", "50"}) == 0,
             "ood command failed");
    json om;
    try {
        om = json::parse(test::read_file(dir / "ood_out/ood_manifest.json"));
    } catch (const std::exception&) {
    }
    const bool both_won = om.value("token_classes", "") == "both";
    c.expect(both_won, "ood picked " + om.value("token_classes", std::string("nothing")));
    const double acc = om.value("test_accuracy", -1.0), base = om.value("baseline_accuracy", -1.0);
    c.expect(std::abs(acc - 0.6) <= 0.01, "ood accuracy " + fmt(acc) + " vs scripted 0.6");
    c.expect(std::abs((acc - base) - 0.1) <= 0.01, "ood lift " + fmt(acc - base) + " vs planted 0.1");
    c.note("grid best (" + (gm.contains("best") ? gm["best"]["layer"].dump() + ", " + gm["best"]["alpha"].dump() : "?") +
           "), ood " + om.value("token_classes", std::string("?")) + " acc " + fmt(acc) + " base " + fmt(base));
}

void statistics(Check& c) {
    const auto exact = mcnemar_from_counts(0, 8);
    c.expect(exact.exact && exact.p_value == 0.0078125, "McNemar b=0,c=8 p=" + fmt(exact.p_value));
    const auto chi = mcnemar_from_counts(10, 40);
    const double oracle_p = oracle::chi2_sf(16.82, 1.0);
    c.expect(!chi.exact && std::abs(chi.p_value - oracle_p) < 1e-4, "McNemar b=10,c=40 p=" + fmt(chi.p_value) + " vs " + fmt(oracle_p));

    // Coverage of a planted +10% effect: 500 replications, n = 300, 10,000 resamples each.
    constexpr std::size_t kReps = 500, kN = 300, kSamples = 10000;
    const auto start = Clock::now();
    std::vector<char> covered(kReps, 0);
    const auto workers = std::max(1u, std::thread::hardware_concurrency());
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t r = w; r < kReps; r += workers) {
                rng::Generator g(rng::derive_seed(20240601, r));
                PairedOutcomes p;
                for (std::size_t i = 0; i < kN; ++i) {
                    p.base.push_back(g.bernoulli(0.5));
                    p.treated.push_back(g.bernoulli(0.6));
                }
                const auto ci = bootstrap_ci(p, kSamples, 0.95, g.next(), 1);
                covered[r] = ci.lo <= 0.1 && 0.1 <= ci.hi;
            }
        });
    }
    for (auto& t : pool) t.join();
    const double coverage = static_cast<double>(std::count(covered.begin(), covered.end(), 1)) / kReps;
    const double secs = seconds_since(start);
    c.expect(coverage >= 0.93 && coverage <= 0.97, "bootstrap coverage " + fmt(coverage));
    c.expect(secs < 60.0, "coverage run took " + fmt(secs) + " s");
    c.note("coverage " + fmt(coverage) + " in " + fmt(secs) + " s");
}

void formats_protocol(Check& c) {
    rng::Generator g(808);
    std::size_t strc_bad = 0, svec_bad = 0;
    for (int iter = 0; iter < 200; ++iter) {
        const auto t = test::random_trace(g, 1 + g.below(12), g.below(20), 1 + g.below(4));
        std::ostringstream a;
        write_trace(t, a);
        std::istringstream in(a.str());
        const auto back = read_trace(in);
        std::ostringstream b;
        write_trace(back, b);
        strc_bad += !(back == t) || a.str() != b.str();

        SteeringVector v;
        v.taxonomy = "tax" + std::to_string(g.below(10));
        v.layer = static_cast<std::uint32_t>(g.below(40));
        v.method = static_cast<ExtractionMethod>(g.below(2) + 1);
        v.normalized = v.method == ExtractionMethod::probe;
        v.values.resize(1 + g.below(64));
        for (auto& x : v.values) x = g.normal();
        if (v.normalized) {
            const double n = v.norm();
            for (auto& x : v.values) x /= n;
        }
        std::ostringstream sa;
        write_svec(v, sa);
        std::istringstream sin(sa.str());
        std::ostringstream sb;
        write_svec(read_svec(sin), sb);
        svec_bad += sa.str() != sb.str();
    }
    c.expect(strc_bad == 0, std::to_string(strc_bad) + " STRC round-trip failures");
    c.expect(svec_bad == 0, std::to_string(svec_bad) + " SVEC round-trip failures");

    // Golden byte files.
    const auto golden = [](const char* name) { return test::read_file(test::data_dir() / "golden" / name); };
    {
        ActivationTrace t("golden", 2, {0}, {{"cat", 0, TokenRole::text, 0}});
        t.row(0, 0)[0] = 1.0f;
        t.row(0, 0)[1] = -2.5f;
        std::ostringstream s;
        write_trace(t, s);
        c.expect(!golden("trace_1x1.strc").empty() && s.str() == golden("trace_1x1.strc"), "trace_1x1.strc differs");
        SteeringVector ms;
        ms.taxonomy = "counting";
        ms.method = ExtractionMethod::meanshift;
        ms.layer = 5;
        ms.values = {0.5, -1.25, 3.0};
        ms.provenance = {"dataset:counting"};
        std::ostringstream sv;
        write_svec(ms, sv);
        c.expect(sv.str() == golden("vec_meanshift.svec"), "vec_meanshift.svec differs");
    }

    // Codec: frames up to 64 MiB round-trip; one byte more is refused.
    for (std::size_t size : std::vector<std::size_t>{0, 1, 4093, std::size_t(1) << 20, protocol::kMaxFrameBytes}) {
        std::vector<std::uint8_t> payload(size);
        for (std::size_t i = 0; i < size; i += 4099) payload[i] = static_cast<std::uint8_t>(i * 31);
        if (size > 0) payload.back() = 0xA5;
        protocol::MemoryTransport mem(protocol::encode_frame(payload));
        bool same = false;
        try {
            same = protocol::read_frame(mem) == payload;
        } catch (const std::exception&) {
        }
        c.expect(same, "frame of " + std::to_string(size) + " bytes does not round-trip");
    }
    {
        std::vector<std::uint8_t> big(protocol::kMaxFrameBytes + 1);
        bool refused = false;
        try {
            protocol::encode_frame(big);
        } catch (const ProtocolError&) {
            refused = true;
        }
        c.expect(refused, "oversize frame accepted");
    }

    // Truncated frame.
    {
        auto bytes = protocol::encode_frame(std::vector<std::uint8_t>(100, 7));
        bytes.resize(50);
        protocol::MemoryTransport mem(bytes);
        bool rejected = false;
        try {
            protocol::read_frame(mem);
        } catch (const ProtocolError&) {
            rejected = true;
        }
        c.expect(rejected, "truncated frame not rejected");
    }

    // Out-of-order chunks reassemble bit-exactly.
    for (int iter = 0; iter < 10; ++iter) {
        auto fixture = test::random_trace(g, 8, 10 + g.below(30), 1 + g.below(4));
        MockScript script;
        script.n_layers = 40;
        script.d_model = 8;
        script.trace.chunk_tokens = static_cast<std::uint32_t>(1 + g.below(5));
        script.trace.shuffle_chunks = true;
        script.seed = g.next();
        LocalMockRunner mock(script, fixture);
        c.expect(mock.connect().request_trace(test::counting_set(), {fixture.layers().front()}) == fixture,
                 "shuffled trace differs after reassembly");
    }

    // Version mismatch.
    {
        MockScript script;
        script.protocol_version = 2;
        LocalMockRunner mock(script);
        bool refused = false;
        try {
            mock.client().handshake();
        } catch (const ProtocolError& e) {
            refused = std::string(e.what()).find("version mismatch") != std::string::npos;
        }
        c.expect(refused, "protocol version 2 not refused");
    }
    c.note("200 STRC/SVEC fixtures, frames to 64 MiB");
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<void(Check&)>>> criteria = {
        {"suite runs end to end on the mock runner alone", mock_only_pipeline},
        {"extraction oracles (mean shift, PCA, probe)", extraction_oracles},
        {"SAE math (encode/decode/strength, JumpReLU, top-n)", sae_math},
        {"intervention contract (identity, outputs, linearity, masking)", intervention_contract},
        {"toy simulator crossover structure", toy_simulator},
        {"grid search and OOD protocol", grid_and_ood},
        {"statistics (McNemar, chi-square, bootstrap coverage)", statistics},
        {"formats and protocol (STRC, SVEC, codec, chunks, version)", formats_protocol},
    };
    bool all = true;
    for (const auto& [name, fn] : criteria) {
        Check c;
        try {
            fn(c);
        } catch (const std::exception& e) {
            c.expect(false, std::string("exception: ") + e.what());
        }
        all = all && c.ok();
        std::cout << (c.ok() ? "PASS" : "FAIL") << "  " << name << " (" << c.summary() << ")" << std::endl;
    }
    return all ? 0 : 1;
}
