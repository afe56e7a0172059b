#include "cli.hpp"

#include "dreg/data_io.hpp"
#include "dreg/error.hpp"
#include "dreg/gradcheck.hpp"
#include "dreg/keyvalue.hpp"
#include "dreg/trainer.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <sstream>

namespace dreg::cli {

namespace fs = std::filesystem;

namespace {

// Flag values that parse but make no sense.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

Shape parse_shape(const std::string& text) {
    std::string s = text;
    std::replace(s.begin(), s.end(), 'x', ',');
    std::vector<std::int64_t> dims;
    std::stringstream ss(s);
    for (std::string part; std::getline(ss, part, ',');) {
        try {
            std::size_t used = 0;
            const long long v = std::stoll(part, &used);
            if (used != part.size()) throw std::invalid_argument(part);
            dims.push_back(v);
        } catch (const std::exception&) {
            throw UsageError("--shape: expected N or D,H,W, got '" + text + "'");
        }
    }
    if (dims.size() == 1) dims.assign(3, dims[0]);
    if (dims.size() != 3) throw UsageError("--shape: expected N or D,H,W, got '" + text + "'");
    for (auto d : dims) {
        if (d < 8 || d % 8 != 0) {
            throw UsageError("--shape: every extent must be a positive multiple of 8 (three 2x downsamplings), got '" +
                             text + "'");
        }
    }
    return {dims[0], dims[1], dims[2]};
}

// --- synth ------------------------------------------------------------------

struct SynthArgs {
    std::string shape = "48";
    int n = 1;
    double noise = 0.02;
    std::uint64_t seed = 1;
    std::string out_dir;
    double max_disp = 8.0;
    int structures = 3;
    int channels = 1;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
    SynthConfig sc;
    sc.spatial = parse_shape(a.shape);
    sc.noise_sigma = a.noise;
    sc.max_disp = a.max_disp;
    sc.n_structures = a.structures;
    sc.channels = a.channels;
    try {
        sc.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    if (a.n < 1) throw UsageError("--n must be at least 1");
    fs::create_directories(a.out_dir);
    const auto pairs = synth_dataset(sc, a.n, a.seed);
    for (int i = 0; i < a.n; ++i) write_pair(fs::path(a.out_dir) / pair_dir_name(i), pairs[static_cast<std::size_t>(i)]);
    out << "wrote " << a.n << " pairs to " << a.out_dir << '\n';
    return ok;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
    std::string config, data_dir, out_ckpt, log;
    bool unsupervised = false, resume = false;
};

std::vector<TrainingPair> load_training_data(const fs::path& dir, std::int64_t channels) {
    std::vector<TrainingPair> data;
    for (const auto& p : list_pairs(dir)) {
        data.push_back(to_training_pair(read_pair(p)));
        const TrainingPair& t = data.back();
        if (t.moving.dim(0) != channels) {
            throw FormatError(FormatError::Kind::mismatch, p.string() + ": " + std::to_string(t.moving.dim(0)) +
                                                               " image channels, the network expects " +
                                                               std::to_string(channels));
        }
        if (t.moving.shape() != data.front().moving.shape()) {
            throw FormatError(FormatError::Kind::mismatch, p.string() + ": shape " + to_string(t.moving.shape()) +
                                                               " differs from " + to_string(data.front().moving.shape()));
        }
    }
    return data;
}

std::string join_lines(const std::vector<std::string>& lines) {
    std::string s;
    for (const auto& l : lines) s += l + '\n';
    return s;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
    const KeyValues kv = KeyValues::parse(read_text(a.config), a.config);
    TrainConfig tc = TrainConfig::from_keys(kv);
    if (a.unsupervised) tc.supervised = false;
    // Keys not owned by the training config describe the network.
    std::string net_text;
    const auto& train_keys = TrainConfig::keys();
    for (const auto& [k, v] : kv.entries()) {
        if (std::find(train_keys.begin(), train_keys.end(), k) == train_keys.end()) net_text += k + "=" + v + "\n";
    }
    const NetConfig nc = NetConfig::from_text(net_text);

    const auto data = load_training_data(a.data_dir, nc.input_channels);
    RegistrationNet net(nc, tc.seed);
    Trainer trainer(net, tc);
    const fs::path log_path = a.log.empty() ? fs::path(a.out_ckpt + ".log") : fs::path(a.log);
    std::vector<std::string> log_lines;
    if (a.resume) {
        trainer.restore(load_checkpoint(a.out_ckpt));
        // Keep the log consistent with the checkpoint: records past its step
        // belong to an interrupted epoch that is about to be redone.
        if (fs::exists(log_path)) {
            std::istringstream is(read_text(log_path));
            for (std::string line; std::getline(is, line);) {
                if (!line.empty() && StepRecord::parse(line).step <= trainer.steps_done()) log_lines.push_back(line);
            }
        }
        out << "resuming at step " << trainer.steps_done() << '\n';
    }
    Trainer::Hooks hooks;
    hooks.on_step = [&](const StepRecord& r) {
        log_lines.push_back(r.to_line());
        out << log_lines.back() << '\n' << std::flush;
    };
    hooks.on_epoch_end = [&](int epoch) {
        save_checkpoint(a.out_ckpt, trainer.checkpoint());
        write_text_atomic(log_path, join_lines(log_lines));
        out << "epoch " << epoch << " checkpoint written to " << a.out_ckpt << '\n';
    };
    trainer.train(data, hooks);
    if (trainer.steps_done() % tc.steps_per_epoch != 0 || log_lines.empty()) {
        save_checkpoint(a.out_ckpt, trainer.checkpoint());
        write_text_atomic(log_path, join_lines(log_lines));
    }
    out << "trained " << trainer.steps_done() << " steps\n";
    return ok;
}

// --- register ---------------------------------------------------------------

struct RegisterArgs {
    std::string ckpt, moving, fixed, out_moved, out_field;
    int cascades = 1;
    std::string masks, out_masks, out_affine;
};

int cmd_register(const RegisterArgs& a, std::ostream& out) {
    if (a.cascades < 1) throw UsageError("--cascades must be at least 1");
    if (a.masks.empty() != a.out_masks.empty()) throw UsageError("--masks and --out-masks go together");
    const RegistrationNet net = load_network(load_checkpoint(a.ckpt));
    const Volume mv = read_volume(a.moving), fv = read_volume(a.fixed);
    if (mv.shape() != fv.shape()) {
        throw FormatError(FormatError::Kind::mismatch,
                          "moving " + to_string(mv.shape()) + " and fixed " + to_string(fv.shape()) + " differ in shape");
    }
    if (mv.channels != net.config().input_channels) {
        throw FormatError(FormatError::Kind::mismatch, "images have " + std::to_string(mv.channels) +
                                                           " channels, the checkpoint expects " +
                                                           std::to_string(net.config().input_channels));
    }
    NoGradGuard no_grad;
    const RegistrationResult r = net.forward(to_tensor(mv), to_tensor(fv), a.cascades);
    write_volume(a.out_moved, to_volume(r.moved, fv.spacing));
    write_volume(a.out_field, to_volume(r.phi_def.vectors, fv.spacing));
    if (!a.out_affine.empty()) write_volume(a.out_affine, to_volume(r.phi_aff.vectors, fv.spacing));
    if (!a.masks.empty()) {
        const Volume masks = read_volume(a.masks);
        if (masks.spatial() != mv.spatial()) {
            throw FormatError(FormatError::Kind::mismatch,
                              "masks " + to_string(masks.shape()) + " do not match the images " + to_string(mv.shape()));
        }
        const Tensor warped = warp(to_tensor(masks), compose(r.phi_aff, r.phi_def), Interp::nearest);
        write_volume(a.out_masks, to_volume(warped, fv.spacing));
    }
    out << "det(A*+I)=" << r.affine.linear_determinant() << '\n';
    return ok;
}

// --- evaluate ---------------------------------------------------------------

struct EvaluateArgs {
    std::string moved, fixed, masks_moved, masks_fixed, field, out;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
    if (a.masks_moved.empty() != a.masks_fixed.empty()) throw UsageError("--masks-moved and --masks-fixed go together");
    const Volume moved = read_volume(a.moved), fixed = read_volume(a.fixed);
    EvalInputs in;
    in.moved = to_tensor(moved);
    in.fixed = to_tensor(fixed);
    in.spacing = fixed.spacing;
    if (!a.masks_moved.empty()) {
        in.masks_moving = to_tensor(read_volume(a.masks_moved));
        in.masks_fixed = to_tensor(read_volume(a.masks_fixed));
    }
    if (!a.field.empty()) {
        const Tensor f = to_tensor(read_volume(a.field));
        if (f.dim(0) != 3 || f.dim(1) != fixed.depth || f.dim(2) != fixed.height || f.dim(3) != fixed.width) {
            throw ShapeError("field " + to_string(f.shape()) + " does not match the images " + to_string(fixed.shape()));
        }
        in.phi_def = DisplacementField{f};
    }
    const MetricReport report = evaluate(in);
    std::ostringstream os;
    report.write(os);
    write_text_atomic(a.out, os.str());
    out << os.str();
    return ok;
}

// --- gradcheck --------------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed, const std::string& fault, std::ostream& out) {
    const GradCheckReport r = run_gradcheck(seed, fault);
    out << r.to_text();
    return r.passed() ? ok : numerical;
}

} // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Deformable 3D registration: synthetic data, training, inference and evaluation"};
    app.name("dreg");
    app.require_subcommand(1);

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "Generate synthetic moving/fixed pairs with masks and ground-truth fields");
    synth->add_option("--shape", sa.shape, "N or D,H,W; multiples of 8")->required();
    synth->add_option("--n", sa.n, "Number of pairs")->required();
    synth->add_option("--noise", sa.noise, "Gaussian intensity noise sigma")->default_val(sa.noise);
    synth->add_option("--seed", sa.seed, "Dataset seed")->required();
    synth->add_option("--out-dir", sa.out_dir, "Output directory")->required();
    synth->add_option("--max-disp", sa.max_disp, "B-spline displacement cap in voxels")->default_val(sa.max_disp);
    synth->add_option("--structures", sa.structures, "Labelled structures per image")->default_val(sa.structures);
    synth->add_option("--channels", sa.channels, "Image channels (1 or 2)")->default_val(sa.channels);

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Train a network on a directory of pairs");
    train->add_option("--config", ta.config, "key=value training and network config")->required();
    train->add_option("--data-dir", ta.data_dir, "Directory of pair_* subdirectories")->required();
    train->add_option("--out-ckpt", ta.out_ckpt, "Checkpoint path, rewritten after every epoch")->required();
    train->add_option("--log", ta.log, "Per-step log (default: <out-ckpt>.log)");
    train->add_flag("--unsupervised", ta.unsupervised, "Drop the segmentation loss");
    train->add_flag("--resume", ta.resume, "Continue from the checkpoint at --out-ckpt");

    RegisterArgs ra;
    auto* reg = app.add_subcommand("register", "Register a moving image to a fixed image");
    reg->add_option("--ckpt", ra.ckpt, "Trained checkpoint")->required();
    reg->add_option("--moving", ra.moving, "Moving volume")->required();
    reg->add_option("--fixed", ra.fixed, "Fixed volume")->required();
    reg->add_option("--out-moved", ra.out_moved, "Warped moving volume")->required();
    reg->add_option("--out-field", ra.out_field, "Deformable displacement field (3 channels)")->required();
    reg->add_option("--cascades", ra.cascades, "Deformable passes")->default_val(ra.cascades);
    reg->add_option("--masks", ra.masks, "Moving label masks to carry along");
    reg->add_option("--out-masks", ra.out_masks, "Warped masks (nearest interpolation)");
    reg->add_option("--out-affine", ra.out_affine, "Affine displacement field (3 channels)");

    EvaluateArgs ea;
    auto* eval = app.add_subcommand("evaluate", "Compute the metric report of a registration result");
    eval->add_option("--moved", ea.moved, "Moved volume")->required();
    eval->add_option("--fixed", ea.fixed, "Fixed volume")->required();
    eval->add_option("--masks-moved", ea.masks_moved, "Warped moving masks");
    eval->add_option("--masks-fixed", ea.masks_fixed, "Fixed masks");
    eval->add_option("--field", ea.field, "Deformable field for the Jacobian statistics");
    eval->add_option("--out", ea.out, "Report path")->required();

    std::uint64_t gc_seed = 1;
    std::string fault;
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable operation");
    gc->add_option("--seed", gc_seed, "Seed for inputs and probes")->default_val(gc_seed);
    gc->add_option("--inject-fault", fault, "Break the backward pass of the named case (harness self-test)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? ok : usage;
    }

    try {
        if (synth->parsed()) return cmd_synth(sa, out);
        if (train->parsed()) return cmd_train(ta, out);
        if (reg->parsed()) return cmd_register(ra, out);
        if (eval->parsed()) return cmd_evaluate(ea, out);
        if (gc->parsed()) return cmd_gradcheck(gc_seed, fault, out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return usage;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << '\n';
        return numerical;
    } catch (const FormatError& e) {
        err << "data error: " << e.what() << '\n';
        return data;
    } catch (const ShapeError& e) {
        err << "data error: " << e.what() << '\n';
        return data;
    } catch (const fs::filesystem_error& e) {
        err << "data error: " << e.what() << '\n';
        return data;
    } catch (const std::invalid_argument& e) {
        // Remaining argument checks inside the library (bad gradcheck case
        // names, out-of-range config values).
        err << "error: " << e.what() << '\n';
        return usage;
    }
    return usage;
}

} // namespace dreg::cli
