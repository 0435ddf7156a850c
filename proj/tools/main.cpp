#include <algorithm>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "meddiff/analysis.hpp"
#include "meddiff/corpus.hpp"
#include "meddiff/error.hpp"
#include "meddiff/metrics.hpp"
#include "meddiff/model.hpp"
#include "meddiff/trainer.hpp"

namespace fs = std::filesystem;
using namespace meddiff;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

TrainConfig load_train_config(const std::string& path, std::optional<std::uint64_t> seed_override) {
    TrainConfig config = train_config_from_kv(parse_kv_file(path));
    if (seed_override) {
        config.seed = *seed_override;
        validate_train_config(config);
    }
    return config;
}

std::string run_dir(const std::string& out, int run, int runs) {
    if (runs == 1) return out;
    return (fs::path(out) / ("run" + std::to_string(run))).string();
}

void write_history_csv(const std::string& path, const std::vector<EpochStats>& history) {
    std::string csv = "epoch,train_loss,val_f1,learning_rate\n";
    for (const EpochStats& row : history) {
        csv += std::to_string(row.epoch) + "," + format_fixed6(row.train_loss) + "," +
               format_fixed6(row.val_f1) + "," + format_fixed6(row.learning_rate) + "\n";
    }
    write_text_file_atomic(path, csv);
}

KvMap checkpoint_config(const TrainConfig& config, const TrainResult& result, int vocab_size) {
    KvMap kv = train_config_to_kv(config);
    kv["vocab_size"] = std::to_string(vocab_size);
    kv["best_val_f1"] = format_fixed6(result.best_val_f1);
    kv["epoch_of_best"] = std::to_string(result.epoch_of_best);
    return kv;
}

void print_kv(const KvMap& kv) { std::cout << serialize_kv(kv); }

// A checkpoint argument may be the file itself, a directory holding
// checkpoint.bin, or a directory of run<i>/ subdirectories.
std::vector<std::string> resolve_checkpoints(const std::string& path) {
    if (fs::is_regular_file(path)) return {path};
    const fs::path direct = fs::path(path) / "checkpoint.bin";
    if (fs::is_regular_file(direct)) return {direct.string()};
    std::vector<std::pair<long, std::string>> runs;
    if (fs::is_directory(path)) {
        for (const fs::directory_entry& entry : fs::directory_iterator(path)) {
            const std::string name = entry.path().filename().string();
            if (entry.is_directory() && name.rfind("run", 0) == 0) {
                const fs::path ckpt = entry.path() / "checkpoint.bin";
                if (fs::is_regular_file(ckpt)) {
                    try {
                        runs.emplace_back(std::stol(name.substr(3)), ckpt.string());
                    } catch (const std::exception&) {
                    }
                }
            }
        }
    }
    std::sort(runs.begin(), runs.end());
    std::vector<std::string> out;
    for (auto& [idx, p] : runs) out.push_back(std::move(p));
    if (out.empty()) throw ValidationError("no checkpoint found under " + path);
    return out;
}

const Cohort& pick_split(const CohortSplit& split, const Cohort& full, const std::string& name) {
    if (name == "train") return split.train;
    if (name == "val") return split.val;
    if (name == "test") return split.test;
    if (name == "all") return full;
    throw ValidationError("unknown split `" + name + "` (train|val|test|all)");
}

int cmd_generate(const std::string& spec_path, std::uint64_t seed, const std::string& out) {
    const CohortSpec spec = cohort_spec_from_kv(parse_kv_file(spec_path));
    const Cohort cohort = generate_cohort(spec, seed);
    save_corpus(cohort, out);
    std::cout << "wrote " << cohort.records.size() << " records (vocab " << cohort.vocab_size
              << ") to " << out << "\n";
    return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& data_path, const std::string& out,
              std::optional<std::uint64_t> seed, int runs) {
    if (runs < 1) throw ValidationError("--runs must be >= 1");
    const TrainConfig base = load_train_config(config_path, seed);
    const Cohort cohort = load_corpus(data_path);

    std::vector<MetricsReport> val_reports;
    for (int r = 0; r < runs; ++r) {
        TrainConfig config = base;
        config.seed = base.seed + static_cast<std::uint64_t>(r);
        const CohortSplit split =
            split_cohort(cohort, {config.train_ratio, config.val_ratio, config.test_ratio}, config.seed);
        const TrainResult result = train(config, split.train, split.val);

        const std::string dir = run_dir(out, r, runs);
        ModelParams best = result.params;
        KvMap ckpt_kv = checkpoint_config(config, result, cohort.vocab_size);
        save_checkpoint((fs::path(dir) / "checkpoint.bin").string(), ckpt_kv, best);
        write_history_csv((fs::path(dir) / "history.csv").string(), result.history);

        const MetricsReport val_report = evaluate_model(best, split.val, config.threshold);
        write_text_file_atomic((fs::path(dir) / "val_report.kv").string(),
                               serialize_kv(report_to_kv(val_report)));
        val_reports.push_back(val_report);
        std::cout << "run " << r << ": best val f1 " << format_fixed6(result.best_val_f1)
                  << " at epoch " << result.epoch_of_best << "\n";
    }
    if (runs > 1) {
        const MetricsAggregate agg = aggregate_runs(val_reports);
        write_text_file_atomic((fs::path(out) / "aggregate_val.kv").string(),
                               serialize_kv(aggregate_to_kv(agg)));
        print_kv(aggregate_to_kv(agg));
    } else {
        print_kv(report_to_kv(val_reports.front()));
    }
    return kExitOk;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& data_path,
                 const std::string& split_name, std::optional<std::uint64_t> seed,
                 const std::string& out) {
    const Cohort cohort = load_corpus(data_path);
    const std::vector<std::string> paths = resolve_checkpoints(ckpt_path);

    std::vector<MetricsReport> reports;
    for (const std::string& path : paths) {
        Checkpoint ckpt = load_checkpoint(path);
        TrainConfig config = train_config_from_kv(ckpt.config);
        if (seed) config.seed = *seed;
        if (cohort.vocab_size != static_cast<int>(kv_get_int(ckpt.config, "vocab_size", 0))) {
            throw ValidationError("cohort vocab_size does not match checkpoint " + path);
        }
        const CohortSplit split =
            split_cohort(cohort, {config.train_ratio, config.val_ratio, config.test_ratio}, config.seed);
        const Cohort& part = pick_split(split, cohort, split_name);
        reports.push_back(evaluate_model(ckpt.params, part, config.threshold));
    }

    KvMap result_kv;
    if (reports.size() > 1) {
        result_kv = aggregate_to_kv(aggregate_runs(reports));
    } else {
        result_kv = report_to_kv(reports.front());
    }
    result_kv["split"] = split_name;
    print_kv(result_kv);
    if (!out.empty()) write_text_file_atomic(out, serialize_kv(result_kv));
    return kExitOk;
}

int cmd_ablate(const std::string& mode_name, const std::string& config_path,
               const std::string& data_path, std::optional<std::uint64_t> seed, int runs,
               const std::string& out) {
    if (runs < 1) throw ValidationError("--runs must be >= 1");
    const AblationMode mode = ablation_from_string(mode_name);
    const TrainConfig base = load_train_config(config_path, seed);
    const Cohort cohort = load_corpus(data_path);

    std::vector<MetricsReport> reports;
    for (int r = 0; r < runs; ++r) {
        TrainConfig config = base;
        config.seed = base.seed + static_cast<std::uint64_t>(r);
        reports.push_back(run_ablation(mode, config, cohort));
    }
    KvMap result_kv = reports.size() > 1 ? aggregate_to_kv(aggregate_runs(reports))
                                         : report_to_kv(reports.front());
    result_kv["mode"] = ablation_to_string(mode);
    print_kv(result_kv);
    if (!out.empty()) write_text_file_atomic(out, serialize_kv(result_kv));
    return kExitOk;
}

std::vector<double> parse_grid(const std::string& csv) {
    std::vector<double> grid;
    size_t start = 0;
    while (start <= csv.size()) {
        const size_t pos = csv.find(',', start);
        const std::string token = csv.substr(start, pos == std::string::npos ? pos : pos - start);
        KvMap one{{"v", token}};
        grid.push_back(kv_get_double(one, "v", 0.0));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    if (grid.empty()) throw ValidationError("empty grid");
    return grid;
}

int cmd_sweep(const std::string& config_path, const std::string& data_path, const std::string& out,
              std::optional<std::uint64_t> seed, const std::string& grid_d_csv,
              const std::string& grid_s_csv) {
    const TrainConfig config = load_train_config(config_path, seed);
    const Cohort cohort = load_corpus(data_path);
    const std::vector<double> grid_d = parse_grid(grid_d_csv);
    const std::vector<double> grid_s = parse_grid(grid_s_csv);

    const std::vector<SweepCell> cells = sweep(grid_d, grid_s, config, cohort);
    std::string csv = "lambda_D,lambda_S,pr_auc,f1,kappa,n_samples\n";
    for (const SweepCell& cell : cells) {
        csv += format_fixed6(cell.lambda_D) + "," + format_fixed6(cell.lambda_S) + "," +
               format_fixed6(cell.report.pr_auc) + "," + format_fixed6(cell.report.f1) + "," +
               format_fixed6(cell.report.kappa) + "," + std::to_string(cell.report.n_samples) + "\n";
    }
    write_text_file_atomic(out, csv);
    std::cout << "wrote " << cells.size() << " sweep cells to " << out << "\n";
    return kExitOk;
}

int cmd_analyze(const std::string& ckpt_path, const std::string& data_path, const std::string& out,
                std::uint64_t seed, int sample_size, int repetitions) {
    const std::vector<std::string> paths = resolve_checkpoints(ckpt_path);
    Checkpoint ckpt = load_checkpoint(paths.front());
    const TrainConfig config = train_config_from_kv(ckpt.config);
    const TrainContext ctx = make_context(config);
    const DiffusionSchedule schedule =
        build_schedule(config.diffusion_steps, config.beta_start, config.beta_end);
    const Cohort cohort = load_corpus(data_path);
    if (cohort.vocab_size != static_cast<int>(kv_get_int(ckpt.config, "vocab_size", 0))) {
        throw ValidationError("cohort vocab_size does not match checkpoint");
    }

    const RngStream root(seed);
    const std::vector<long> frequencies = code_frequencies(cohort);
    const CodeMapResult mapped = map_synthetic_codes(ckpt.params, schedule, ctx.fusion_mode,
                                                     root.child(0), &frequencies, repetitions);
    for (int code : mapped.excluded_codes) {
        std::cerr << "warning: embedding column " << code << " has zero norm; excluded from mapping\n";
    }
    std::string map_csv = "code,count,synth_rank,orig_rank\n";
    for (const CodeMapEntry& entry : mapped.entries) {
        map_csv += std::to_string(entry.code) + "," + std::to_string(entry.count) + "," +
                   std::to_string(entry.synth_rank) + "," + std::to_string(entry.orig_rank) + "\n";
    }
    write_text_file_atomic((fs::path(out) / "code_map.csv").string(), map_csv);

    // Random sample without replacement for the hidden-state export.
    RngStream sample_rng = root.child(1);
    std::vector<size_t> order(cohort.records.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (size_t i = order.size(); i > 1; --i) {
        const size_t j = static_cast<size_t>(sample_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(order[i - 1], order[j]);
    }
    const size_t take = std::min(order.size(), static_cast<size_t>(sample_size));
    Cohort sample;
    sample.vocab_size = cohort.vocab_size;
    std::vector<size_t> chosen(order.begin(), order.begin() + static_cast<long>(take));
    std::sort(chosen.begin(), chosen.end());
    for (size_t idx : chosen) sample.records.push_back(cohort.records[idx]);

    export_hidden_states(ckpt.params, schedule, ctx.fusion_mode, sample,
                         (fs::path(out) / "hidden_states.csv").string(), root.child(2));
    std::cout << "wrote code_map.csv (" << mapped.entries.size() << " mapped codes) and "
              << "hidden_states.csv (" << sample.records.size() << " records) to " << out << "\n";
    return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, double tolerance, const std::string& out) {
    // Micro configuration: tiny dims keep the finite-difference sweep fast.
    TrainConfig config;
    config.d_e = 8;
    config.d_h = 8;
    config.d_f = 4;
    config.d_b = 4;
    config.d_s = 4;
    config.diffusion_steps = 4;
    config.seed = seed;
    const ModelDims dims{6, config.d_e, config.d_h, config.d_f, config.d_b, config.d_s};

    std::vector<PatientRecord> batch;
    PatientRecord a;
    a.label = 1;
    a.visits = {{{0, 2}, 0}, {{1, 3, 4}, 30}, {{2}, 90}};
    PatientRecord b;
    b.label = 0;
    b.visits = {{{5}, 10}, {{0, 5}, 45}};
    batch.push_back(a);
    batch.push_back(b);

    bool all_passed = true;
    std::string summary;
    for (const bool full : {false, true}) {
        TrainConfig variant = config;
        if (!full) {
            variant.lambda_S = 0.0;
            variant.lambda_D = 0.0;
        }
        const GradCheckReport report = gradient_check(dims, batch, variant, tolerance);
        all_passed = all_passed && report.passed;
        summary += std::string(full ? "full loss" : "ce-only loss") + ": max rel error " +
                   format_fixed6(report.max_rel_error) + (report.passed ? " PASS" : " FAIL") + "\n";
        for (const GradCheckEntry& entry : report.entries) {
            if (entry.max_rel_error > tolerance) {
                summary += "  " + entry.tensor + " rel " + format_fixed6(entry.max_rel_error) + "\n";
            }
        }
    }
    std::cout << summary;
    if (!out.empty()) write_text_file_atomic(out, summary);
    if (!all_passed) {
        std::cerr << "gradient check failed\n";
        return kExitRuntime;
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"EHR risk prediction with diffusion-based sequence augmentation"};
    app.require_subcommand(1);

    std::string spec_path, config_path, data_path, out_path, ckpt_path;
    std::string mode_name = "AS1", split_name = "test";
    std::string grid_d = "0.1,0.25,0.5,0.75,1.0", grid_s = "0.1,0.25,0.5,0.75,1.0";
    std::uint64_t seed_value = 0;
    bool seed_given = false;
    int runs = 5;
    int sample_size = 50;
    int repetitions = 1;
    double tolerance = 1e-3;

    auto add_seed = [&](CLI::App* cmd) {
        cmd->add_option("--seed", seed_value, "rng seed")->each([&](const std::string&) {
            seed_given = true;
        });
    };

    CLI::App* gen = app.add_subcommand("generate-cohort", "Generate a synthetic cohort file");
    gen->add_option("--spec", spec_path, "cohort spec (key = value)")->required();
    gen->add_option("--out", out_path, "output corpus path")->required();
    add_seed(gen);

    CLI::App* tr = app.add_subcommand("train", "Train and checkpoint the model");
    tr->add_option("--config", config_path, "train config (key = value)")->required();
    tr->add_option("--data", data_path, "corpus file")->required();
    tr->add_option("--out", out_path, "checkpoint directory")->required();
    tr->add_option("--runs", runs, "seeded runs (aggregated when > 1)");
    add_seed(tr);

    CLI::App* ev = app.add_subcommand("evaluate", "Evaluate checkpoints on a cohort split");
    ev->add_option("--ckpt", ckpt_path, "checkpoint file or directory")->required();
    ev->add_option("--data", data_path, "corpus file")->required();
    ev->add_option("--split", split_name, "train|val|test|all");
    ev->add_option("--out", out_path, "write the report here as well");
    add_seed(ev);

    CLI::App* ab = app.add_subcommand("ablate", "Train and evaluate one ablation mode");
    ab->add_option("--mode", mode_name, "AS1|AS2|AS3|none")->required();
    ab->add_option("--config", config_path, "train config")->required();
    ab->add_option("--data", data_path, "corpus file")->required();
    ab->add_option("--runs", runs, "seeded runs")->default_val(1);
    ab->add_option("--out", out_path, "write the report here as well");
    add_seed(ab);

    CLI::App* sw = app.add_subcommand("sweep", "Grid sweep over the loss weights");
    sw->add_option("--config", config_path, "train config")->required();
    sw->add_option("--data", data_path, "corpus file")->required();
    sw->add_option("--out", out_path, "output csv")->required();
    sw->add_option("--lambda-d-grid", grid_d, "comma separated values");
    sw->add_option("--lambda-s-grid", grid_s, "comma separated values");
    add_seed(sw);

    CLI::App* an = app.add_subcommand("analyze", "Code mapping and hidden-state export");
    an->add_option("--ckpt", ckpt_path, "checkpoint file or directory")->required();
    an->add_option("--data", data_path, "corpus file")->required();
    an->add_option("--out", out_path, "output directory")->required();
    an->add_option("--sample-size", sample_size, "records in the hidden-state export");
    an->add_option("--repetitions", repetitions, "samples per probed code");
    add_seed(an);

    CLI::App* gc = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
    gc->add_option("--tolerance", tolerance, "max relative error");
    gc->add_option("--out", out_path, "write the summary here as well");
    add_seed(gc);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitValidation;
    }

    const std::optional<std::uint64_t> seed_opt =
        seed_given ? std::optional<std::uint64_t>(seed_value) : std::nullopt;
    try {
        if (gen->parsed()) return cmd_generate(spec_path, seed_value, out_path);
        if (tr->parsed()) return cmd_train(config_path, data_path, out_path, seed_opt, runs);
        if (ev->parsed()) return cmd_evaluate(ckpt_path, data_path, split_name, seed_opt, out_path);
        if (ab->parsed()) return cmd_ablate(mode_name, config_path, data_path, seed_opt, runs, out_path);
        if (sw->parsed()) return cmd_sweep(config_path, data_path, out_path, seed_opt, grid_d, grid_s);
        if (an->parsed()) return cmd_analyze(ckpt_path, data_path, out_path, seed_value, sample_size, repetitions);
        if (gc->parsed()) return cmd_gradcheck(seed_value, tolerance, out_path);
    } catch (const ValidationError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& err) {
        std::cerr << "runtime error: " << err.what() << "\n";
        return kExitRuntime;
    }
    return kExitValidation;
}
