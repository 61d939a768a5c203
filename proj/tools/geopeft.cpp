#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include <json.hpp>

#include "geopeft/config.hpp"
#include "geopeft/diagnostics.hpp"

using namespace geopeft;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
    std::string data;
    std::string checkpoint;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "Config file (INI-style sections)")->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "Seed override for this command");
    cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << text;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Loads the config, applies command-line overrides and writes the
// resolved copy beside the outputs.
ProjectConfig prepare(const Common& c, const std::function<void(ProjectConfig&, std::uint64_t)>& apply_seed) {
    ProjectConfig cfg = c.config.empty() ? ProjectConfig{} : load_config(c.config);
    if (c.seed) apply_seed(cfg, *c.seed);
    if (!c.data.empty()) cfg.dataset = fs::absolute(c.data);
    if (!c.checkpoint.empty()) cfg.checkpoint = fs::absolute(c.checkpoint);
    fs::create_directories(c.out);
    write_file(fs::path(c.out) / "resolved.cfg", write_config(cfg));
    return cfg;
}

void run_seed(ProjectConfig& cfg, std::uint64_t s) { cfg.run.seed = s; }

Dataset open_dataset(const ProjectConfig& cfg) {
    if (cfg.dataset.empty()) throw std::runtime_error("no dataset: set [data] root or pass --data");
    auto manifest = load_manifest(cfg.dataset);
    if (!cfg.split_map.empty()) manifest = apply_split_map(manifest, SplitMap::from_json(read_file(cfg.split_map)));
    return load_dataset(manifest, cfg.bands);
}

SegmentationModel load_model(const ProjectConfig& cfg, const Dataset& data) {
    auto model = build_model(cfg.resolved_run(), data);
    if (!cfg.checkpoint.empty()) {
        auto params = model.parameters();
        restore_parameters(params, load_checkpoint(cfg.checkpoint));
    }
    return model;
}

void write_run(const fs::path& dir, const RunResult& r) {
    fs::create_directories(dir);
    write_file(dir / "history.csv", history_csv(r.history));
    write_file(dir / "timing.csv", timing_csv(r.history));
    write_file(dir / "metrics.json", metrics_json(r));
    save_checkpoint(dir / "checkpoint", r.model.parameters());
}

std::string split_summary(const SplitAudit& a) {
    std::ostringstream os;
    for (const auto& [s, n] : a.sizes) os << to_string(s) << "=" << n << " ";
    os << "unassigned=" << a.unassigned.size() << " min_cross_split_km=" << a.min_cross_split_km
       << " disjoint=" << (a.disjoint ? "yes" : "no");
    return os.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Parameter-efficient fine-tuning of ViT encoders for multispectral segmentation"};
    app.require_subcommand(1);
    Common c;

    auto* synth = app.add_subcommand("synth", "Generate a synthetic multispectral dataset into --out");
    add_common(synth, c);

    std::string split_method;
    std::optional<double> buffer_km;
    auto* split = app.add_subcommand("split", "Build a split map (buffered or class-balanced) and audit it");
    add_common(split, c);
    split->add_option("--data", c.data, "Dataset root (overrides [data] root)");
    split->add_option("--method", split_method, "buffered | balanced");
    split->add_option("--buffer-km", buffer_km, "Buffer distance for buffered splits");

    std::string split_file;
    auto* audit = app.add_subcommand("audit-splits", "Audit a split map against dataset locations");
    add_common(audit, c);
    audit->add_option("--data", c.data, "Dataset root (overrides [data] root)");
    audit->add_option("--splits", split_file, "Split map JSON (defaults to [data] split_map)");

    auto* sweep = app.add_subcommand("sweep", "Log-uniform learning-rate search");
    add_common(sweep, c);
    sweep->add_option("--data", c.data, "Dataset root");

    auto* train_cmd = app.add_subcommand("train", "Fine-tune one model");
    add_common(train_cmd, c);
    train_cmd->add_option("--data", c.data, "Dataset root");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on dataset splits");
    add_common(eval, c);
    eval->add_option("--data", c.data, "Dataset root");
    eval->add_option("--checkpoint", c.checkpoint, "Checkpoint directory");

    auto* rep = app.add_subcommand("replicate", "Train once per seed and aggregate");
    add_common(rep, c);
    rep->add_option("--data", c.data, "Dataset root");

    std::string embed_split = "test";
    auto* embed = app.add_subcommand("embed", "Export mean patch embeddings of a split as CSV");
    add_common(embed, c);
    embed->add_option("--data", c.data, "Dataset root");
    embed->add_option("--checkpoint", c.checkpoint, "Checkpoint directory (default: initial weights)");
    embed->add_option("--split", embed_split, "train | val | test | ghos")->capture_default_str();

    auto* dist = app.add_subcommand("distances", "Mean minimum embedding distance to train per split");
    add_common(dist, c);
    dist->add_option("--data", c.data, "Dataset root");
    dist->add_option("--checkpoint", c.checkpoint, "Checkpoint directory (default: initial weights)");

    auto* report = app.add_subcommand("report", "Parameter and memory accounting for a configuration");
    add_common(report, c);

    CLI11_PARSE(app, argc, argv);

    try {
        const fs::path out = c.out;
        if (synth->parsed()) {
            auto cfg = prepare(c, [](ProjectConfig& p, std::uint64_t s) { p.synthetic.seed = s; });
            auto m = generate_synthetic(cfg.synthetic, out);
            std::cout << "wrote " << m.splits.size() << " samples to " << out.string() << "\n";
        } else if (split->parsed()) {
            auto cfg = prepare(c, [](ProjectConfig& p, std::uint64_t s) { p.split.seed = s; });
            if (!split_method.empty()) cfg.split.method = split_method;
            if (buffer_km) cfg.split.buffer_km = *buffer_km;
            write_file(out / "resolved.cfg", write_config(cfg));
            if (cfg.dataset.empty()) throw std::runtime_error("no dataset: set [data] root or pass --data");
            auto manifest = load_manifest(cfg.dataset);
            auto pool = pool_from_manifest(manifest);
            SplitMap map;
            if (cfg.split.method == "buffered") {
                map = build_buffered_spatial_splits(pool, cfg.split.buffer_km, cfg.split.ratios, cfg.split.seed);
            } else if (cfg.split.method == "balanced") {
                map = build_class_balanced_splits(pool, cfg.split.quotas, cfg.split.excluded_regions, cfg.split.seed);
            } else {
                throw std::runtime_error("unknown split method '" + cfg.split.method + "'");
            }
            write_file(out / "splits.json", map.to_json());
            auto a = audit_splits(pool, map);
            write_file(out / "audit.csv", a.to_csv());
            for (const auto& w : map.warnings) std::cerr << "warning: " << w << "\n";
            std::cout << split_summary(a) << "\n";
        } else if (audit->parsed()) {
            auto cfg = prepare(c, [](ProjectConfig& p, std::uint64_t s) { p.split.seed = s; });
            const fs::path file = split_file.empty() ? cfg.split_map : fs::path(split_file);
            if (file.empty()) throw std::runtime_error("no split map: pass --splits or set [data] split_map");
            if (cfg.dataset.empty()) throw std::runtime_error("no dataset: set [data] root or pass --data");
            auto pool = pool_from_manifest(load_manifest(cfg.dataset));
            auto a = audit_splits(pool, SplitMap::from_json(read_file(file)));
            write_file(out / "audit.csv", a.to_csv());
            std::cout << split_summary(a) << "\n";
        } else if (sweep->parsed()) {
            auto cfg = prepare(c, run_seed);
            auto data = open_dataset(cfg);
            auto r = lr_search(cfg.resolved_run(), data, cfg.sweep.trials, cfg.sweep.lr_min, cfg.sweep.lr_max,
                               cfg.sweep.budget_epochs);
            std::ostringstream os;
            os << std::setprecision(9) << "trial,lr,val_miou\n";
            for (std::size_t i = 0; i < r.trials.size(); ++i) os << i << ',' << r.trials[i].lr << ',' << r.trials[i].val_miou << '\n';
            write_file(out / "sweep.csv", os.str());
            std::cout << std::setprecision(9) << "best_lr " << r.best_lr << "\n";
        } else if (train_cmd->parsed()) {
            auto cfg = prepare(c, run_seed);
            auto data = open_dataset(cfg);
            auto r = train(cfg.resolved_run(), data);
            write_run(out, r);
            std::cout << "best epoch " << r.best_epoch << ", val mIoU " << r.best_val_miou;
            if (r.metrics.count(Split::Test)) std::cout << ", test mIoU " << r.metrics.at(Split::Test).miou;
            std::cout << "\n";
        } else if (eval->parsed()) {
            auto cfg = prepare(c, run_seed);
            if (cfg.checkpoint.empty()) throw std::runtime_error("eval needs --checkpoint or [eval] checkpoint");
            auto data = open_dataset(cfg);
            auto model = load_model(cfg, data);
            nlohmann::json j = nlohmann::json::object();
            for (auto s : cfg.eval_splits) {
                if (!data.has(s)) continue;
                auto m = evaluate(model, data.split(s), data.bands, data.manifest.num_classes, cfg.run.batch_size);
                nlohmann::json iou = nlohmann::json::array();
                for (double v : m.per_class_iou) iou.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(100.0 * v));
                j[to_string(s)] = {{"miou", m.miou}, {"per_class_iou", iou}, {"pixel_accuracy", m.pixel_accuracy}, {"loss", m.loss}};
                std::cout << to_string(s) << " mIoU " << m.miou << "\n";
            }
            write_file(out / "eval.json", j.dump(2) + "\n");
        } else if (rep->parsed()) {
            auto cfg = prepare(c, [](ProjectConfig& p, std::uint64_t s) { p.seeds = {s}; });
            auto data = open_dataset(cfg);
            auto r = run_replicates(cfg.resolved_run(), data, cfg.seeds);
            for (std::size_t i = 0; i < r.runs.size(); ++i) write_run(out / ("seed_" + std::to_string(r.seeds[i])), r.runs[i]);
            write_file(out / "aggregate.csv", aggregate_csv(to_string(cfg.method), r));
            for (const auto& [k, a] : r.summary) std::cout << k << " " << a.mean << " +- " << a.std << " (n=" << a.n << ")\n";
        } else if (embed->parsed()) {
            auto cfg = prepare(c, run_seed);
            auto data = open_dataset(cfg);
            auto model = load_model(cfg, data);
            const auto s = parse_split(embed_split);
            auto rows = export_embeddings(model, data, s, cfg.run.batch_size);
            write_file(out / ("embeddings_" + to_string(s) + ".csv"), embeddings_csv(rows));
            std::cout << "wrote " << rows.size() << " embeddings\n";
        } else if (dist->parsed()) {
            auto cfg = prepare(c, run_seed);
            auto data = open_dataset(cfg);
            auto model = load_model(cfg, data);
            auto r = distance_report(model, data, cfg.run.batch_size);
            write_file(out / "distances.csv", r.to_csv());
            std::cout << r.to_csv();
        } else if (report->parsed()) {
            auto cfg = prepare(c, run_seed);
            auto r = parameter_memory_report(cfg.resolved_run());
            write_file(out / "report.txt", r.to_text());
            write_file(out / "report.csv", r.to_csv());
            std::cout << r.to_text();
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
