#include "doctest.h"

#include "dreg/error.hpp"
#include "dreg/keyvalue.hpp"
#include "dreg/trainer.hpp"
#include "test_util.hpp"

#include <cmath>
#include <limits>
#include <set>

using namespace dreg;

namespace {

std::vector<TrainingPair> toy_data(int count, std::int64_t n, std::uint64_t seed) {
    SynthConfig sc;
    sc.spatial = {n, n, n};
    sc.max_disp = 2.0;
    sc.affine_shift = 0.5;
    std::vector<TrainingPair> out;
    for (const auto& p : synth_dataset(sc, count, seed)) out.push_back(to_training_pair(p));
    return out;
}

TrainConfig toy_config(int steps) {
    TrainConfig c;
    c.lr0 = 1e-3;
    c.epochs = 1;
    c.halve_after_epochs = {};
    c.steps_per_epoch = steps;
    return c;
}

bool same_blobs(const Checkpoint& a, const Checkpoint& b) {
    if (a.step != b.step || a.config != b.config || a.blobs.size() != b.blobs.size()) return false;
    for (std::size_t i = 0; i < a.blobs.size(); ++i) {
        if (a.blobs[i].name != b.blobs[i].name || a.blobs[i].values != b.blobs[i].values) return false;
    }
    return true;
}

} // namespace

TEST_CASE("lr_at halves after the configured epochs") {
    const TrainConfig c;
    for (int e = 1; e <= 4; ++e) CHECK(lr_at(e, c) == 1e-4);
    CHECK(lr_at(5, c) == 5e-5);
    CHECK(lr_at(7, c) == 5e-5);
    CHECK(lr_at(8, c) == 2.5e-5);
    CHECK(lr_at(10, c) == 2.5e-5);
}

TEST_CASE("adam_step: first step, zero gradient, two-step oracle") {
    ParamSet ps;
    Tensor& a = ps.add("a", Tensor::from_data({3}, {1.0, -2.0, 0.5}, true));
    Tensor& b = ps.add("b", Tensor::from_data({2}, {0.25, 4.0}, true));
    AdamState st;

    for (double& g : a.mutable_grad()) g = 1.0;
    // b has no gradient at all: treated as zero.
    adam_step(ps, st, 0.01);
    // Bias-corrected first step moves each coordinate by lr * g / (|g| + eps).
    CHECK(std::abs(a.data()[0] - (1.0 - 0.01 / (1.0 + 1e-8))) < 1e-15);
    CHECK(b.data()[0] == 0.25);
    CHECK(b.data()[1] == 4.0);

    // Scalar re-computation of two steps with varying gradients.
    ParamSet qs;
    Tensor& x = qs.add("x", Tensor::from_data({2}, {0.3, -0.7}, true));
    AdamState qst;
    const double g1[] = {0.5, -2.0}, g2[] = {-1.5, 0.25};
    double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {0.3, -0.7};
    for (int t = 1; t <= 2; ++t) {
        const double* g = t == 1 ? g1 : g2;
        x.zero_grad();
        for (int j = 0; j < 2; ++j) x.mutable_grad()[j] = g[j];
        adam_step(qs, qst, 0.05);
        for (int j = 0; j < 2; ++j) {
            m[j] = 0.9 * m[j] + 0.1 * g[j];
            v[j] = 0.999 * v[j] + 0.001 * g[j] * g[j];
            const double mh = m[j] / (1 - std::pow(0.9, t)), vh = v[j] / (1 - std::pow(0.999, t));
            ref[j] -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
        }
    }
    CHECK(std::abs(x.data()[0] - ref[0]) < 1e-12);
    CHECK(std::abs(x.data()[1] - ref[1]) < 1e-12);
    CHECK(qst.t == 2);
}

TEST_CASE("step records: round trip, optional L_seg, components sum to the total") {
    StepRecord r{.step = 3, .epoch = 1, .lr = 1e-3, .aff = 0.2, .reg = 0.01, .sim = -0.5, .seg = -0.6, .total = 0};
    const LossWeights w;
    r.total = w.alpha1 * r.aff + w.alpha2 * r.reg + w.alpha3 * r.sim + w.alpha4 * *r.seg;
    const StepRecord back = StepRecord::parse(r.to_line());
    CHECK(back.step == 3);
    CHECK(back.total == r.total);
    CHECK(back.seg == r.seg);
    r.seg.reset();
    CHECK(r.to_line().find("L_seg") == std::string::npos);
    CHECK_FALSE(StepRecord::parse(r.to_line()).seg.has_value());

    auto data = toy_data(2, 16, 3);
    RegistrationNet net(NetConfig{}, 2);
    for (bool supervised : {true, false}) {
        TrainConfig c = toy_config(2);
        c.supervised = supervised;
        Trainer tr(net, c);
        const StepRecord s = tr.step(data[0]);
        CHECK(s.seg.has_value() == supervised);
        const double sum = w.alpha1 * s.aff + w.alpha2 * s.reg + w.alpha3 * s.sim + (s.seg ? w.alpha4 * *s.seg : 0.0);
        CHECK(std::abs(sum - s.total) < 1e-9);
    }
}

TEST_CASE("train config parsing") {
    const TrainConfig d;
    const TrainConfig back = TrainConfig::from_keys(KeyValues::parse(d.to_text(), "t"));
    CHECK(back.to_text() == d.to_text());
    CHECK_THROWS_AS(TrainConfig::from_keys(KeyValues::parse("lr0=-1\n", "t")), FormatError);
    CHECK_THROWS_AS(TrainConfig::from_keys(KeyValues::parse("epochs=3\nhalve_after=4\n", "t")), FormatError);
    const TrainConfig none = TrainConfig::from_keys(KeyValues::parse("halve_after=\n", "t"));
    CHECK(none.halve_after_epochs.empty());
}

TEST_CASE("pair order is a fixed permutation per pass") {
    RegistrationNet net(NetConfig{}, 1);
    Trainer tr(net, toy_config(10));
    std::set<std::size_t> seen;
    for (int s = 1; s <= 7; ++s) seen.insert(tr.pair_index(s, 7));
    CHECK(seen.size() == 7);
    Trainer again(net, toy_config(10));
    for (int s = 1; s <= 20; ++s) CHECK(tr.pair_index(s, 7) == again.pair_index(s, 7));
}

TEST_CASE("no parameter is dead after one step") {
    for (std::uint64_t seed : {1, 2, 3}) {
        auto data = toy_data(1, 16, seed);
        RegistrationNet net(NetConfig{}, seed);
        Trainer tr(net, toy_config(1));
        tr.step(data[0]);
        net.params().zero_grad();
        const TrainingPair probe{test::random_tensor({1, 16, 16, 16}, seed + 10, 0, 1, false),
                                 test::random_tensor({1, 16, 16, 16}, seed + 20, 0, 1, false), data[0].masks_moving,
                                 data[0].masks_fixed};
        const RegistrationResult r = net.forward(probe.moving, probe.fixed);
        total_loss(compute_losses(r, probe.fixed, &probe.masks_moving, &probe.masks_fixed), LossWeights{}).backward();
        for (const auto& [name, t] : net.params()) {
            bool any = false;
            if (t.has_grad()) {
                for (double g : t.grad()) any = any || g != 0.0;
            }
            CHECK_MESSAGE(any, name << " (seed " << seed << ")");
        }
    }
}

TEST_CASE("training reduces the loss on a toy dataset") {
    auto data = toy_data(10, 16, 5);
    RegistrationNet net(NetConfig{}, 4);
    Trainer tr(net, toy_config(200));
    std::vector<double> totals;
    tr.train(data, {[&](const StepRecord& r) { totals.push_back(r.total); }, {}});
    REQUIRE(totals.size() == 200);
    double first = 0, last = 0;
    for (int i = 0; i < 20; ++i) {
        first += totals[static_cast<std::size_t>(i)];
        last += totals[totals.size() - 1 - static_cast<std::size_t>(i)];
    }
    MESSAGE("mean total over the first/last 20 steps: " << first / 20 << " / " << last / 20);
    CHECK(last < first);
}

TEST_CASE("training is deterministic and resumable") {
    auto data = toy_data(3, 16, 6);
    auto run = [&](int steps) {
        RegistrationNet net(NetConfig{}, 9);
        Trainer tr(net, toy_config(6));
        for (int s = 0; s < steps; ++s) tr.step(data[tr.pair_index(tr.steps_done() + 1, data.size())]);
        return tr.checkpoint();
    };
    const Checkpoint a = run(6), b = run(6);
    CHECK(same_blobs(a, b));

    const Checkpoint half = run(3);
    RegistrationNet net(NetConfig{}, 123);
    Trainer resumed(net, toy_config(6));
    resumed.restore(half);
    CHECK(resumed.steps_done() == 3);
    resumed.train(data);
    CHECK(same_blobs(resumed.checkpoint(), a));

    NetConfig other;
    other.encoder_widths = {4, 8, 16, 32};
    RegistrationNet small(other, 1);
    Trainer mismatched(small, toy_config(6));
    CHECK_THROWS_AS(mismatched.restore(a), FormatError);
}

TEST_CASE("a non-finite loss aborts with the step and components") {
    auto data = toy_data(1, 16, 7);
    data[0].moving.mutable_data()[100] = std::numeric_limits<double>::quiet_NaN();
    RegistrationNet net(NetConfig{}, 1);
    Trainer tr(net, toy_config(5));
    try {
        tr.step(data[0]);
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        const std::string what = e.what();
        CHECK(what.find("step 1") != std::string::npos);
        CHECK(what.find("L_sim=") != std::string::npos);
    }
}

TEST_CASE("evaluation baselines") {
    auto data = toy_data(1, 16, 8);
    const RegistrationNet net(NetConfig{}, 1);
    const MetricReport id = evaluate_pair(net, data[0], Baseline::identity);
    const MetricReport aff = evaluate_pair(net, data[0], Baseline::affine_only);
    const MetricReport full = evaluate_pair(net, data[0]);
    REQUIRE(id.dice.has_value());
    // An untrained affine head is the identity.
    CHECK(*aff.dice == *id.dice);
    CHECK(full.folding_fraction.has_value());
    CHECK_FALSE(id.folding_fraction.has_value());
}
