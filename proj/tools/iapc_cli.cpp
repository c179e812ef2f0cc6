// Command-line front end: dataset generation, source pretraining, source-free
// adaptation, evaluation, diagnostics, weight sweeps and feature export.
//
// Every command writes into a run directory. By default that is
// $IAPC_OUTPUT_ROOT/<command>-<UTC timestamp>-<config hash> (root defaults to
// ./runs); --out overrides it. Exit codes: 0 success, 1 runtime error,
// 2 usage error, 3 quality gate (--min-miou / --min-gain) not met.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "iapc/iapc.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitGate = 3;
constexpr const char* kArtifactVersion = "iapc-artifacts/1";

std::string utc_stamp(const char* fmt) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), fmt, &tm);
    return buf;
}

fs::path output_root() {
    const char* env = std::getenv("IAPC_OUTPUT_ROOT");
    return env && *env ? fs::path(env) : fs::path("runs");
}

/// Explicit --out, or a fresh timestamped directory under the output root.
fs::path make_run_dir(const std::string& explicit_out, const std::string& command, std::uint64_t hash) {
    fs::path dir = explicit_out.empty()
                       ? output_root() / (command + "-" + utc_stamp("%Y%m%dT%H%M%SZ") + "-" + iapc::hex64(hash).substr(0, 8))
                       : fs::path(explicit_out);
    fs::create_directories(dir);
    return dir;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw iapc::Error("cannot write " + path.string());
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw iapc::LoadError("cannot open " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

/// Written before any training work starts; records what is needed to replay.
struct RunManifest {
    std::string command;
    std::vector<std::string> argv;
    json config = json::object();
    json datasets = json::object();
    json checkpoints = json::object();
    std::string started;

    void write(const fs::path& dir, const std::optional<std::string>& finished = std::nullopt) const {
        json j = {{"command", command},
                  {"argv", argv},
                  {"config", config},
                  {"dataset_hashes", datasets},
                  {"checkpoints", checkpoints},
                  {"artifact_version", kArtifactVersion},
                  {"started_utc", started}};
        if (finished) j["finished_utc"] = *finished;
        write_text(dir / "manifest.json", j.dump(2) + "\n");
    }
};

RunManifest start_manifest(const std::string& command, int argc, char** argv) {
    RunManifest m;
    m.command = command;
    m.argv.assign(argv, argv + argc);
    m.started = utc_stamp("%Y-%m-%dT%H:%M:%SZ");
    return m;
}

iapc::Checkpoint<float> require_checkpoint(const std::string& path) {
    if (!fs::exists(path)) throw iapc::LoadError("checkpoint not found: " + path);
    return iapc::load_checkpoint<float>(path);
}

/// Resolves --config: "default", "desk" or a key=value file; then --set overrides.
iapc::AdaptationConfig resolve_adaptation_config(const std::string& config, const std::vector<std::string>& sets) {
    iapc::AdaptationConfig c;
    if (config == "desk") {
        c = iapc::AdaptationConfig::desk();
    } else if (config != "default" && !config.empty()) {
        c = iapc::parse_adaptation_config(read_text(config));
    }
    for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw iapc::ParameterError("--set expects key=value, got '" + kv + "'");
        iapc::set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    c.validate();
    return c;
}

int fail_gate(const std::string& what) {
    std::cerr << "gate failed: " << what << '\n';
    return kExitGate;
}

void progress_line(const char* stage, long it, const iapc::TrainLog& log, long every) {
    if (every <= 0 || (it + 1) % every != 0) return;
    const auto& row = log.row(log.size() - 1);
    std::cerr << stage << " iter " << (it + 1);
    for (std::size_t c = 1; c < row.size(); ++c) std::cerr << ' ' << log.columns()[c] << '=' << row[c];
    std::cerr << '\n';
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataOpts {
    int classes = 5;
    int size = 64;
    int n_train = 200;
    int n_val = 50;
    std::string shift = "paper-analog";
    std::uint64_t seed = 0;
    std::string out;
    bool force = false;
};

iapc::DomainShiftSpec parse_shift(const std::string& name) {
    if (name == "identity") return iapc::DomainShiftSpec::identity();
    if (name == "paper-analog") return iapc::DomainShiftSpec::paper_analog();
    throw iapc::ParameterError("unknown shift '" + name + "' (expected identity or paper-analog)");
}

int cmd_gen_data(const GenDataOpts& o, int argc, char** argv) {
    if (o.out.empty()) throw iapc::ParameterError("gen-data: --out is required");
    const fs::path root(o.out);
    if (fs::exists(root) && fs::is_directory(root) && !fs::is_empty(root) && !o.force) {
        throw iapc::ParameterError("gen-data: output directory " + root.string() +
                                   " exists and is not empty (use --force to overwrite)");
    }
    const iapc::DomainShiftSpec shift = parse_shift(o.shift);
    // Validate before touching the disk.
    iapc::generate_scene_dataset(1, o.classes, o.size, o.size, shift, o.seed);
    if (o.n_train < 1 || o.n_val < 0) throw iapc::ParameterError("gen-data: --n-train must be >= 1, --n-val >= 0");
    if (o.force && fs::exists(root)) {
        for (const char* sub : {"source", "target", "source_val", "target_val"}) fs::remove_all(root / sub);
    }
    fs::create_directories(root);

    auto manifest = start_manifest("gen-data", argc, argv);
    manifest.config = {{"classes", o.classes}, {"size", o.size},   {"n_train", o.n_train},
                       {"n_val", o.n_val},     {"shift", o.shift}, {"seed", o.seed}};
    manifest.write(root);

    // Train splits share one geometry seed so that source and target label
    // maps coincide; validation splits use a derived seed.
    const std::uint64_t val_seed = iapc::synth_detail::mix(o.seed, 0x76616c);
    struct Split {
        const char* name;
        int n;
        std::uint64_t seed;
        iapc::DomainShiftSpec shift;
        const char* domain;
    };
    const std::vector<Split> splits{{"source", o.n_train, o.seed, iapc::DomainShiftSpec::identity(), "source"},
                                    {"target", o.n_train, o.seed, shift, "target"},
                                    {"source_val", o.n_val, val_seed, iapc::DomainShiftSpec::identity(), "source"},
                                    {"target_val", o.n_val, val_seed, shift, "target"}};
    for (const auto& sp : splits) {
        if (sp.n == 0) continue;
        const auto data = iapc::generate_scene_dataset(sp.n, o.classes, o.size, o.size, sp.shift, sp.seed);
        iapc::DatasetMeta meta{o.classes, o.size, o.size, sp.n, sp.seed, sp.domain, sp.shift};
        iapc::save_dataset(root / sp.name, data, meta);
        manifest.datasets[sp.name] = iapc::hex64(iapc::hash_dataset_dir(root / sp.name));
        std::cout << sp.name << ": " << sp.n << " samples, hash " << manifest.datasets[sp.name].get<std::string>()
                  << '\n';
    }
    manifest.write(root, utc_stamp("%Y-%m-%dT%H:%M:%SZ"));
    return 0;
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainOpts {
    std::string data;
    std::string val;
    std::string config = "desk";
    std::vector<std::string> sets;
    std::optional<int> iterations;
    std::optional<double> lr;
    std::optional<std::uint64_t> seed;
    std::string out;
    long log_every = 100;
};

int cmd_pretrain(const PretrainOpts& o, int argc, char** argv) {
    iapc::PretrainConfig cfg;
    if (o.config == "desk") {
        cfg = iapc::PretrainConfig::desk();
    } else if (o.config != "default") {
        cfg = iapc::parse_pretrain_config(read_text(o.config));
    }
    const auto meta = iapc::read_meta(o.data);
    if (meta) cfg.arch.num_classes = meta->num_classes;
    for (const auto& kv : o.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw iapc::ParameterError("--set expects key=value, got '" + kv + "'");
        iapc::set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (o.iterations) cfg.iterations = *o.iterations;
    if (o.lr) cfg.lr = *o.lr;
    if (o.seed) cfg.seed = *o.seed;
    cfg.validate();

    const auto data = iapc::load_dataset(o.data, iapc::LoadMode::Labeled, cfg.arch.num_classes);
    const std::uint64_t hash = iapc::config_hash(cfg);
    const fs::path dir = make_run_dir(o.out, "pretrain", hash);
    auto manifest = start_manifest("pretrain", argc, argv);
    manifest.config = {{"text", iapc::to_config_text(cfg)}, {"hash", iapc::hex64(hash)}};
    manifest.datasets["source"] = iapc::hex64(iapc::hash_dataset_dir(o.data));
    manifest.checkpoints["output"] = (dir / "source.ckpt").string();
    manifest.write(dir);
    write_text(dir / "config.txt", iapc::to_config_text(cfg));

    const auto result = iapc::pretrain_source<float>(
        data, cfg, [&](long it, const iapc::TrainLog& log) { progress_line("pretrain", it, log, o.log_every); });
    iapc::save_checkpoint(dir / "source.ckpt", result.model, static_cast<std::uint64_t>(cfg.iterations), hash);
    write_text(dir / "train_log.csv", result.log.to_csv());
    write_text(dir / "timing.csv", result.log.to_csv(true));

    if (!o.val.empty()) {
        const auto report = iapc::evaluate(result.model, iapc::load_dataset(o.val, iapc::LoadMode::Labeled,
                                                                            cfg.arch.num_classes));
        write_text(dir / "val_metrics.json", iapc::to_json(report).dump(2) + "\n");
        std::cout << iapc::to_text_table(report);
    }
    manifest.write(dir, utc_stamp("%Y-%m-%dT%H:%M:%SZ"));
    std::cout << "checkpoint: " << (dir / "source.ckpt").string() << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// adapt

struct AdaptOpts {
    std::string source;
    std::string data;
    std::string config = "default";
    std::vector<std::string> sets;
    std::optional<int> iterations;
    std::optional<double> lr;
    std::optional<std::uint64_t> seed;
    std::string importance_mode;
    std::string prototype_mode;
    bool no_ema = false;
    std::string out;
    long log_every = 50;
};

iapc::AdaptationConfig adapt_config(const AdaptOpts& o) {
    auto c = resolve_adaptation_config(o.config, o.sets);
    if (o.iterations) c.iterations = *o.iterations;
    if (o.lr) c.lr = *o.lr;
    if (o.seed) c.seed = *o.seed;
    if (!o.importance_mode.empty()) c.importance_mode = iapc::parse_importance_mode(o.importance_mode);
    if (!o.prototype_mode.empty()) c.prototype_mode = iapc::parse_prototype_mode(o.prototype_mode);
    if (o.no_ema) c.ema_enabled = false;
    c.validate();
    return c;
}

int cmd_adapt(const AdaptOpts& o, int argc, char** argv) {
    const auto cfg = adapt_config(o);
    const auto src = require_checkpoint(o.source);
    // Images-only view: the labels directory of the target set is never opened.
    const auto data = iapc::load_dataset(o.data, iapc::LoadMode::ImagesOnly);
    const std::uint64_t hash = iapc::config_hash(cfg);
    const fs::path dir = make_run_dir(o.out, "adapt", hash);

    auto manifest = start_manifest("adapt", argc, argv);
    manifest.config = {{"text", iapc::to_config_text(cfg)}, {"hash", iapc::hex64(hash)}};
    manifest.datasets["target_images"] = iapc::hex64(iapc::hash_dataset_dir(o.data, false));
    manifest.checkpoints["source"] = o.source;
    manifest.checkpoints["source_hash"] = iapc::hex64(iapc::hash_file(o.source));
    manifest.checkpoints["output"] = (dir / "target.ckpt").string();
    manifest.write(dir);
    write_text(dir / "config.txt", iapc::to_config_text(cfg));

    const std::uint64_t before = src.model.parameter_hash();
    const auto result = iapc::adapt<float>(
        src.model, data, cfg, std::nullopt,
        [&](long it, const iapc::TrainLog& log) { progress_line("adapt", it, log, o.log_every); });
    if (src.model.parameter_hash() != before) throw iapc::Error("adapt: source parameters changed");

    iapc::save_checkpoint(dir / "target.ckpt", result.target, static_cast<std::uint64_t>(cfg.iterations), hash);
    iapc::save_checkpoint(dir / "memory.ckpt", result.memory, static_cast<std::uint64_t>(cfg.iterations), hash);
    write_text(dir / "train_log.csv", result.log.to_csv());
    write_text(dir / "timing.csv", result.log.to_csv(true));
    manifest.write(dir, utc_stamp("%Y-%m-%dT%H:%M:%SZ"));
    std::cout << "checkpoint: " << (dir / "target.ckpt").string() << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOpts {
    std::string ckpt;
    std::string data;
    std::optional<double> min_miou;
    std::string baseline;
    std::optional<double> min_gain;
    std::string out;
};

int cmd_evaluate(const EvaluateOpts& o, int argc, char** argv) {
    const auto ck = require_checkpoint(o.ckpt);
    const int C = ck.model.arch().num_classes;
    const auto data = iapc::load_dataset(o.data, iapc::LoadMode::Labeled, C);
    const fs::path dir = make_run_dir(o.out, "evaluate", iapc::hash_file(o.ckpt));
    auto manifest = start_manifest("evaluate", argc, argv);
    manifest.datasets["eval"] = iapc::hex64(iapc::hash_dataset_dir(o.data));
    manifest.checkpoints["model"] = o.ckpt;
    manifest.write(dir);

    const auto report = iapc::evaluate(ck.model, data);
    json j = iapc::to_json(report);
    std::optional<double> gain;
    if (!o.baseline.empty()) {
        const auto base = iapc::evaluate(require_checkpoint(o.baseline).model, data);
        gain = report.miou - base.miou;
        j["baseline_miou"] = base.miou;
        j["gain"] = *gain;
    }
    write_text(dir / "metrics.json", j.dump(2) + "\n");
    std::cout << iapc::to_text_table(report);
    if (gain) std::cout << "gain vs baseline: " << 100.0 * *gain << " points\n";
    std::cout << j.dump() << '\n';
    manifest.write(dir, utc_stamp("%Y-%m-%dT%H:%M:%SZ"));

    if (o.min_miou && report.miou < *o.min_miou) {
        return fail_gate("mIoU " + std::to_string(report.miou) + " < " + std::to_string(*o.min_miou));
    }
    if (o.min_gain) {
        if (!gain) throw iapc::ParameterError("--min-gain requires --baseline");
        if (*gain < *o.min_gain) {
            return fail_gate("gain " + std::to_string(*gain) + " < " + std::to_string(*o.min_gain));
        }
    }
    return 0;
}

// ---------------------------------------------------------------------------
// diagnose

struct DiagnoseOpts {
    std::string ckpt;
    std::string data;
    std::size_t sample_n = 1000;
    std::uint64_t seed = 0;
    int maps = 4;
    std::string out;
};

int cmd_diagnose(const DiagnoseOpts& o, int argc, char** argv) {
    const auto ck = require_checkpoint(o.ckpt);
    const auto data = iapc::load_dataset(o.data, iapc::LoadMode::Labeled, ck.model.arch().num_classes);
    const fs::path dir = make_run_dir(o.out, "diagnose", iapc::hash_file(o.ckpt) ^ o.seed);
    auto manifest = start_manifest("diagnose", argc, argv);
    manifest.config = {{"sample_n", o.sample_n}, {"seed", o.seed}};
    manifest.datasets["eval"] = iapc::hex64(iapc::hash_dataset_dir(o.data));
    manifest.checkpoints["model"] = o.ckpt;
    manifest.write(dir);

    const auto stats = iapc::margin_diagnostics(ck.model, data, o.sample_n, o.seed);
    write_text(dir / "margins.csv", iapc::margin_csv(stats));
    write_text(dir / "margins.json", iapc::to_json(stats).dump(2) + "\n");
    if (o.maps > 0) fs::create_directories(dir / "importance");
    for (int i = 0; i < o.maps && i < static_cast<int>(data.size()); ++i) {
        const auto& s = data[static_cast<std::size_t>(i)];
        const auto p = iapc::softmax(ck.model.forward(s.image).logits);
        iapc::io::write_png(dir / "importance" / (s.id + ".png"),
                            iapc::io::to_raw(iapc::importance_to_gray(iapc::importance_map(p))));
    }
    std::cout << iapc::margin_csv(stats);
    manifest.write(dir, utc_stamp("%Y-%m-%dT%H:%M:%SZ"));
    return 0;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepOpts {
    std::string source;
    std::string data;
    std::string eval;
    std::string param;
    std::vector<double> values;
    std::string config = "default";
    std::vector<std::string> sets;
    std::optional<int> iterations;
    std::optional<std::uint64_t> seed;
    std::string out;
};

const std::vector<std::string>& sweep_params() {
    static const std::vector<std::string> names{"lambda_ia", "lambda_pe", "lambda_ps", "lambda_im"};
    return names;
}

int cmd_sweep(const SweepOpts& o, int argc, char** argv) {
    if (std::find(sweep_params().begin(), sweep_params().end(), o.param) == sweep_params().end()) {
        std::string valid;
        for (const auto& n : sweep_params()) valid += (valid.empty() ? "" : ", ") + n;
        throw iapc::ParameterError("sweep: unknown parameter '" + o.param + "' (valid: " + valid + ")");
    }
    if (o.values.empty()) throw iapc::ParameterError("sweep: --values is empty");
    auto base = resolve_adaptation_config(o.config, o.sets);
    if (o.iterations) base.iterations = *o.iterations;
    if (o.seed) base.seed = *o.seed;
    base.validate();

    const auto src = require_checkpoint(o.source);
    const auto data = iapc::load_dataset(o.data, iapc::LoadMode::ImagesOnly);
    const auto eval = iapc::load_dataset(o.eval.empty() ? o.data : o.eval, iapc::LoadMode::Labeled,
                                         src.model.arch().num_classes);
    iapc::Fnv1a h;
    h.update(iapc::to_config_text(base));
    h.update(o.param);
    for (double v : o.values) h.update_values(std::span<const double>(&v, 1));
    const fs::path dir = make_run_dir(o.out, "sweep", h.digest());
    auto manifest = start_manifest("sweep", argc, argv);
    manifest.config = {{"base", iapc::to_config_text(base)}, {"param", o.param}, {"values", o.values}};
    manifest.datasets["target_images"] = iapc::hex64(iapc::hash_dataset_dir(o.data, false));
    manifest.datasets["eval"] = iapc::hex64(iapc::hash_dataset_dir(o.eval.empty() ? o.data : o.eval));
    manifest.checkpoints["source"] = o.source;
    manifest.write(dir);

    std::ostringstream csv;
    csv << "param,value,miou\n";
    for (double v : o.values) {
        auto cfg = base;
        std::ostringstream val;
        val << std::setprecision(17) << v;
        iapc::set_config_value(cfg, o.param, val.str());
        cfg.validate();
        const auto result = iapc::adapt<float>(src.model, data, cfg);
        const auto report = iapc::evaluate(result.target, eval);
        csv << o.param << ',' << v << ',' << std::setprecision(9) << report.miou << '\n';
        std::cerr << o.param << '=' << v << " miou=" << report.miou << '\n';
    }
    write_text(dir / "sweep.csv", csv.str());
    std::cout << csv.str();
    manifest.write(dir, utc_stamp("%Y-%m-%dT%H:%M:%SZ"));
    return 0;
}

// ---------------------------------------------------------------------------
// export-features

struct ExportOpts {
    std::string ckpt;
    std::string data;
    int limit = 4;
    std::string out;
};

int cmd_export_features(const ExportOpts& o, int argc, char** argv) {
    const auto ck = require_checkpoint(o.ckpt);
    const auto data = iapc::load_dataset(o.data, iapc::LoadMode::ImagesOnly);
    const fs::path dir = make_run_dir(o.out, "export-features", iapc::hash_file(o.ckpt));
    auto manifest = start_manifest("export-features", argc, argv);
    manifest.datasets["images"] = iapc::hex64(iapc::hash_dataset_dir(o.data, false));
    manifest.checkpoints["model"] = o.ckpt;
    manifest.write(dir);

    fs::create_directories(dir / "features");
    fs::create_directories(dir / "prototypes");
    const int n = o.limit <= 0 ? static_cast<int>(data.size()) : std::min<int>(o.limit, static_cast<int>(data.size()));
    for (int i = 0; i < n; ++i) {
        const auto& s = data[static_cast<std::size_t>(i)];
        const auto f = ck.model.forward(s.image);
        iapc::export_tensor(dir / "features" / s.id, f.features, s.id, "features");
        const auto protos = iapc::estimate_prototypes(f.features, iapc::softmax(f.logits_feat), s.id);
        iapc::Tensor3<float> k(protos.num_classes, 1, protos.dim);
        std::copy(protos.vectors.begin(), protos.vectors.end(), k.data());
        iapc::export_tensor(dir / "prototypes" / s.id, k, s.id, "prototypes");
        json present = json::array();
        for (int c = 0; c < protos.num_classes; ++c) present.push_back(protos.is_present(c));
        write_text(dir / "prototypes" / (s.id + ".present.json"), present.dump() + "\n");
    }
    std::cout << "exported " << n << " images to " << dir.string() << '\n';
    manifest.write(dir, utc_stamp("%Y-%m-%dT%H:%M:%SZ"));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Source-free domain adaptation for semantic segmentation (importance-aware + prototype-contrast)"};
    app.require_subcommand(1);

    GenDataOpts gen;
    auto* c_gen = app.add_subcommand("gen-data", "Generate paired synthetic source/target datasets");
    c_gen->add_option("--classes", gen.classes, "Number of classes")->capture_default_str();
    c_gen->add_option("--size", gen.size, "Image height and width in pixels")->capture_default_str();
    c_gen->add_option("--n-train", gen.n_train, "Training images per domain")->capture_default_str();
    c_gen->add_option("--n-val", gen.n_val, "Validation images per domain")->capture_default_str();
    c_gen->add_option("--shift", gen.shift, "identity | paper-analog")->capture_default_str();
    c_gen->add_option("--seed", gen.seed, "Geometry/appearance seed")->capture_default_str();
    c_gen->add_option("--out", gen.out, "Output directory")->required();
    c_gen->add_flag("--force", gen.force, "Overwrite an existing non-empty output directory");

    PretrainOpts pre;
    auto* c_pre = app.add_subcommand("pretrain", "Train the source model on labeled source data");
    c_pre->add_option("--data", pre.data, "Labeled source dataset directory")->required();
    c_pre->add_option("--val", pre.val, "Optional labeled validation directory");
    c_pre->add_option("--config", pre.config, "default | desk | path to key=value file")->capture_default_str();
    c_pre->add_option("--set", pre.sets, "Override a config key (key=value), repeatable");
    c_pre->add_option("--iterations", pre.iterations, "Training iterations");
    c_pre->add_option("--lr", pre.lr, "Base learning rate");
    c_pre->add_option("--seed", pre.seed, "Seed");
    c_pre->add_option("--out", pre.out, "Run directory (default: timestamped under $IAPC_OUTPUT_ROOT)");
    c_pre->add_option("--log-every", pre.log_every, "Progress interval in iterations (0 = quiet)");

    AdaptOpts ad;
    auto* c_ad = app.add_subcommand("adapt", "Adapt a source checkpoint to unlabeled target images");
    c_ad->add_option("--source", ad.source, "Source checkpoint")->required();
    c_ad->add_option("--data", ad.data, "Target dataset directory (images only are read)")->required();
    c_ad->add_option("--config", ad.config, "default | desk | path to key=value file")->capture_default_str();
    c_ad->add_option("--set", ad.sets, "Override a config key (key=value), repeatable");
    c_ad->add_option("--iterations", ad.iterations, "Adaptation iterations");
    c_ad->add_option("--lr", ad.lr, "Base learning rate");
    c_ad->add_option("--seed", ad.seed, "Seed");
    c_ad->add_option("--importance-mode", ad.importance_mode, "iapc | rpl | fpl | spl");
    c_ad->add_option("--prototype-mode", ad.prototype_mode, "dynamic | static | momentum");
    c_ad->add_flag("--no-ema", ad.no_ema, "Use the target model itself as the memory model");
    c_ad->add_option("--out", ad.out, "Run directory (default: timestamped under $IAPC_OUTPUT_ROOT)");
    c_ad->add_option("--log-every", ad.log_every, "Progress interval in iterations (0 = quiet)");

    EvaluateOpts ev;
    auto* c_ev = app.add_subcommand("evaluate", "Per-class IoU and mIoU of a checkpoint on a labeled set");
    c_ev->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
    c_ev->add_option("--data", ev.data, "Labeled dataset directory")->required();
    c_ev->add_option("--min-miou", ev.min_miou, "Exit 3 when mIoU (0..1) is below this value");
    c_ev->add_option("--baseline", ev.baseline, "Baseline checkpoint for --min-gain");
    c_ev->add_option("--min-gain", ev.min_gain, "Exit 3 when mIoU gain over the baseline (0..1) is below this value");
    c_ev->add_option("--out", ev.out, "Run directory");

    DiagnoseOpts dg;
    auto* c_dg = app.add_subcommand("diagnose", "Confidence-margin statistics and importance maps");
    c_dg->add_option("--ckpt", dg.ckpt, "Checkpoint")->required();
    c_dg->add_option("--data", dg.data, "Labeled dataset directory")->required();
    c_dg->add_option("--sample-n", dg.sample_n, "Pixels sampled per group")->capture_default_str();
    c_dg->add_option("--seed", dg.seed, "Sampling seed")->capture_default_str();
    c_dg->add_option("--maps", dg.maps, "Number of importance maps to write as PNG")->capture_default_str();
    c_dg->add_option("--out", dg.out, "Run directory");

    SweepOpts sw;
    auto* c_sw = app.add_subcommand("sweep", "Adapt once per value of one loss weight, others fixed");
    c_sw->add_option("--source", sw.source, "Source checkpoint")->required();
    c_sw->add_option("--data", sw.data, "Target dataset directory (images only are read)")->required();
    c_sw->add_option("--eval", sw.eval, "Labeled evaluation directory (default: --data)");
    c_sw->add_option("--param", sw.param, "lambda_ia | lambda_pe | lambda_ps | lambda_im")->required();
    c_sw->add_option("--values", sw.values, "Comma-separated values")->required()->delimiter(',');
    c_sw->add_option("--config", sw.config, "default | desk | path to key=value file")->capture_default_str();
    c_sw->add_option("--set", sw.sets, "Override a config key (key=value), repeatable");
    c_sw->add_option("--iterations", sw.iterations, "Adaptation iterations per run");
    c_sw->add_option("--seed", sw.seed, "Seed");
    c_sw->add_option("--out", sw.out, "Run directory");

    ExportOpts ex;
    auto* c_ex = app.add_subcommand("export-features", "Write encoder features and per-image prototypes");
    c_ex->add_option("--ckpt", ex.ckpt, "Checkpoint")->required();
    c_ex->add_option("--data", ex.data, "Dataset directory (images only are read)")->required();
    c_ex->add_option("--limit", ex.limit, "Number of images (0 = all)")->capture_default_str();
    c_ex->add_option("--out", ex.out, "Run directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*c_gen) return cmd_gen_data(gen, argc, argv);
        if (*c_pre) return cmd_pretrain(pre, argc, argv);
        if (*c_ad) return cmd_adapt(ad, argc, argv);
        if (*c_ev) return cmd_evaluate(ev, argc, argv);
        if (*c_dg) return cmd_diagnose(dg, argc, argv);
        if (*c_sw) return cmd_sweep(sw, argc, argv);
        if (*c_ex) return cmd_export_features(ex, argc, argv);
    } catch (const iapc::ParameterError& e) {
        std::cerr << "parameter error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
