#include "dreg/trainer.hpp"

#include "dreg/error.hpp"
#include "dreg/keyvalue.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

namespace dreg {

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string breakdown(const StepRecord& r) {
    std::string s = "L_aff=" + fmt(r.aff) + " L_reg=" + fmt(r.reg) + " L_sim=" + fmt(r.sim);
    if (r.seg) s += " L_seg=" + fmt(*r.seg);
    return s;
}

} // namespace

void TrainConfig::validate() const {
    if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw std::invalid_argument("train config: lr0 must be positive");
    if (epochs < 1) throw std::invalid_argument("train config: epochs must be at least 1");
    if (steps_per_epoch < 1) throw std::invalid_argument("train config: steps_per_epoch must be at least 1");
    if (batch_size != 1) throw std::invalid_argument("train config: only batch_size 1 is supported");
    for (int e : halve_after_epochs) {
        if (e < 1 || e > epochs) throw std::invalid_argument("train config: halve_after epoch " + std::to_string(e) + " out of range");
    }
    weights.validate();
}

const std::vector<std::string>& TrainConfig::keys() {
    static const std::vector<std::string> k{"lr0",    "epochs", "halve_after", "batch_size", "steps_per_epoch", "alpha1",
                                            "alpha2", "alpha3", "alpha4",      "seed",       "supervised"};
    return k;
}

std::string TrainConfig::to_text() const {
    std::ostringstream os;
    os << "lr0=" << fmt(lr0) << '\n' << "epochs=" << epochs << '\n' << "halve_after=";
    for (std::size_t i = 0; i < halve_after_epochs.size(); ++i) os << (i ? "," : "") << halve_after_epochs[i];
    os << '\n'
       << "batch_size=" << batch_size << '\n'
       << "steps_per_epoch=" << steps_per_epoch << '\n'
       << "alpha1=" << fmt(weights.alpha1) << '\n'
       << "alpha2=" << fmt(weights.alpha2) << '\n'
       << "alpha3=" << fmt(weights.alpha3) << '\n'
       << "alpha4=" << fmt(weights.alpha4) << '\n'
       << "seed=" << seed << '\n'
       << "supervised=" << (supervised ? "true" : "false") << '\n';
    return os.str();
}

TrainConfig TrainConfig::from_keys(const KeyValues& kv) {
    TrainConfig c;
    c.lr0 = kv.number("lr0", c.lr0);
    c.epochs = static_cast<int>(kv.integer("epochs", c.epochs));
    if (kv.has("halve_after")) {
        c.halve_after_epochs.clear();
        if (!kv.text("halve_after").empty()) {
            for (auto e : kv.integers("halve_after")) c.halve_after_epochs.push_back(static_cast<int>(e));
        }
    }
    c.batch_size = static_cast<int>(kv.integer("batch_size", c.batch_size));
    c.steps_per_epoch = static_cast<int>(kv.integer("steps_per_epoch", c.steps_per_epoch));
    c.weights.alpha1 = kv.number("alpha1", c.weights.alpha1);
    c.weights.alpha2 = kv.number("alpha2", c.weights.alpha2);
    c.weights.alpha3 = kv.number("alpha3", c.weights.alpha3);
    c.weights.alpha4 = kv.number("alpha4", c.weights.alpha4);
    c.seed = static_cast<std::uint64_t>(kv.integer("seed", static_cast<std::int64_t>(c.seed)));
    c.supervised = kv.boolean("supervised", c.supervised);
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(FormatError::Kind::syntax, e.what());
    }
    return c;
}

double lr_at(int epoch, const TrainConfig& cfg) {
    double lr = cfg.lr0;
    for (int e : cfg.halve_after_epochs) {
        if (epoch > e) lr *= 0.5;
    }
    return lr;
}

void adam_step(ParamSet& params, AdamState& state, double lr, const AdamOptions& opt) {
    if (state.m.empty()) {
        for (const auto& [name, t] : params) {
            state.m.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
            state.v.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match the parameter set");
    ++state.t;
    const double c1 = 1.0 - std::pow(opt.b1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(opt.b2, static_cast<double>(state.t));
    std::size_t i = 0;
    for (auto& [name, t] : params) {
        auto& m = state.m[i];
        auto& v = state.v[i];
        ++i;
        const auto g = t.grad();
        auto x = t.mutable_data();
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double gj = g.empty() ? 0.0 : g[j];
            m[j] = opt.b1 * m[j] + (1.0 - opt.b1) * gj;
            v[j] = opt.b2 * v[j] + (1.0 - opt.b2) * gj * gj;
            x[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + opt.eps);
        }
    }
}

TrainingPair to_training_pair(const SyntheticPair& p) {
    return {to_tensor(p.moving), to_tensor(p.fixed), to_tensor(p.masks_moving), to_tensor(p.masks_fixed)};
}

std::string StepRecord::to_line() const {
    std::string s = "step=" + std::to_string(step) + " epoch=" + std::to_string(epoch) + " lr=" + fmt(lr) + " " +
                    breakdown(*this) + " total=" + fmt(total);
    return s;
}

StepRecord StepRecord::parse(const std::string& line) {
    std::string text = line;
    std::replace(text.begin(), text.end(), ' ', '\n');
    const KeyValues kv = KeyValues::parse(text, "train log");
    kv.reject_unknown({"step", "epoch", "lr", "L_aff", "L_reg", "L_sim", "L_seg", "total"});
    StepRecord r;
    r.step = kv.integer("step");
    r.epoch = static_cast<int>(kv.integer("epoch"));
    r.lr = kv.number("lr");
    r.aff = kv.number("L_aff");
    r.reg = kv.number("L_reg");
    r.sim = kv.number("L_sim");
    if (kv.has("L_seg")) r.seg = kv.number("L_seg");
    r.total = kv.number("total");
    return r;
}

LossParts compute_losses(const RegistrationResult& r, const Tensor& fixed, const Tensor* masks_moving,
                         const Tensor* masks_fixed) {
    LossParts parts{affine_loss(r.affine.a_star), smoothness_loss(r.phi_def), nlcc_loss(r.moved, fixed), std::nullopt};
    if (masks_moving && masks_fixed) parts.seg = dice_loss(*masks_moving, *masks_fixed, r.phi_aff, r.phi_def);
    return parts;
}

Trainer::Trainer(RegistrationNet& net, TrainConfig cfg) : net_(net), cfg_(std::move(cfg)) { cfg_.validate(); }

std::size_t Trainer::pair_index(std::int64_t step, std::size_t dataset_size) const {
    if (dataset_size == 0) throw std::invalid_argument("trainer: empty dataset");
    const auto n = static_cast<std::int64_t>(dataset_size);
    const std::int64_t pass = (step - 1) / n;
    std::vector<std::size_t> order(dataset_size);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(cfg_.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(pass));
    // Fisher-Yates with an explicit draw so the order does not depend on the
    // standard library's shuffle.
    for (std::size_t i = dataset_size - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);
    return order[static_cast<std::size_t>((step - 1) % n)];
}

StepRecord Trainer::step(const TrainingPair& pair) {
    StepRecord rec;
    rec.step = steps_done() + 1;
    rec.epoch = static_cast<int>((rec.step - 1) / cfg_.steps_per_epoch) + 1;
    rec.lr = lr_at(rec.epoch, cfg_);

    net_.params().zero_grad();
    const RegistrationResult r = net_.forward(pair.moving, pair.fixed);
    const bool supervised = cfg_.supervised && pair.masks_moving.defined() && pair.masks_fixed.defined();
    // The affine term throws on a singular prediction; it is recorded as NaN
    // so the abort message still carries every component.
    std::string affine_error;
    LossParts parts{Tensor{}, smoothness_loss(r.phi_def), nlcc_loss(r.moved, pair.fixed), std::nullopt};
    try {
        parts.aff = affine_loss(r.affine.a_star);
    } catch (const NumericalError& e) {
        affine_error = e.what();
    }
    if (supervised) parts.seg = dice_loss(pair.masks_moving, pair.masks_fixed, r.phi_aff, r.phi_def);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    rec.aff = parts.aff.defined() ? parts.aff.item() : nan;
    rec.reg = parts.reg.item();
    rec.sim = parts.sim.item();
    if (parts.seg) rec.seg = parts.seg->item();
    const Tensor total = parts.aff.defined() ? total_loss(parts, cfg_.weights) : Tensor::scalar(nan);
    rec.total = total.item();
    if (!std::isfinite(rec.total)) {
        throw NumericalError("non-finite loss at step " + std::to_string(rec.step) + ": " + breakdown(rec) +
                             " total=" + fmt(rec.total) + (affine_error.empty() ? "" : " (" + affine_error + ")"));
    }
    total.backward();
    adam_step(net_.params(), adam_, rec.lr);
    return rec;
}

void Trainer::train(const std::vector<TrainingPair>& data, const Hooks& hooks) {
    if (data.empty()) throw std::invalid_argument("trainer: empty dataset");
    while (steps_done() < cfg_.total_steps()) {
        const StepRecord rec = step(data[pair_index(steps_done() + 1, data.size())]);
        if (hooks.on_step) hooks.on_step(rec);
        if (rec.step % cfg_.steps_per_epoch == 0 && hooks.on_epoch_end) hooks.on_epoch_end(rec.epoch);
    }
}

Checkpoint Trainer::checkpoint() const {
    Checkpoint c;
    c.config = net_.config().to_text();
    c.step = adam_.t;
    c.blobs = param_blobs(net_.params());
    std::size_t i = 0;
    for (const auto& [name, t] : net_.params()) {
        const std::vector<double> zeros(static_cast<std::size_t>(t.numel()), 0.0);
        c.blobs.push_back({"adam.m/" + name, adam_.m.empty() ? zeros : adam_.m[i]});
        c.blobs.push_back({"adam.v/" + name, adam_.v.empty() ? zeros : adam_.v[i]});
        ++i;
    }
    return c;
}

void Trainer::restore(const Checkpoint& ckpt) {
    if (NetConfig::from_text(ckpt.config) != net_.config()) {
        throw FormatError(FormatError::Kind::mismatch, "checkpoint network config differs from the model");
    }
    restore_params(ckpt, net_.params());
    AdamState s;
    s.t = ckpt.step;
    for (const auto& [name, t] : net_.params()) {
        const NamedBlob* m = ckpt.find("adam.m/" + name);
        const NamedBlob* v = ckpt.find("adam.v/" + name);
        const auto n = static_cast<std::size_t>(t.numel());
        if (!m || !v || m->values.size() != n || v->values.size() != n) {
            throw FormatError(FormatError::Kind::mismatch, "checkpoint lacks optimizer state for " + name);
        }
        s.m.push_back(m->values);
        s.v.push_back(v->values);
    }
    adam_ = std::move(s);
}

RegistrationNet load_network(const Checkpoint& ckpt) {
    RegistrationNet net(NetConfig::from_text(ckpt.config));
    restore_params(ckpt, net.params());
    return net;
}

MetricReport evaluate_pair(const RegistrationNet& net, const TrainingPair& pair, Baseline mode, int cascades) {
    NoGradGuard no_grad;
    const Shape spatial{pair.moving.dim(1), pair.moving.dim(2), pair.moving.dim(3)};
    EvalInputs in;
    in.fixed = pair.fixed;
    if (pair.masks_moving.defined() && pair.masks_fixed.defined()) {
        in.masks_moving = pair.masks_moving;
        in.masks_fixed = pair.masks_fixed;
    }
    switch (mode) {
    case Baseline::identity:
        in.moved = pair.moving;
        in.transform = zero_field(spatial);
        break;
    case Baseline::affine_only: {
        const DisplacementField phi = apply_affine(net.affine_net(pair.moving, pair.fixed), spatial);
        in.moved = warp(pair.moving, phi);
        in.transform = phi;
        break;
    }
    case Baseline::full: {
        const RegistrationResult r = net.forward(pair.moving, pair.fixed, cascades);
        in.moved = r.moved;
        in.transform = compose(r.phi_aff, r.phi_def);
        in.phi_def = r.phi_def;
        break;
    }
    }
    return evaluate(in);
}

} // namespace dreg
