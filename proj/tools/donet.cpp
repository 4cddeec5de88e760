// Command-line front end: train, eval, predict, ablate, gradcheck, synth.
#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "donet/data.hpp"
#include "donet/gradcheck_suite.hpp"
#include "donet/train.hpp"

namespace fs = std::filesystem;
using namespace donet;

namespace {

enum Exit { ok = 0, usage = 1, data = 2, numeric = 3 };

std::vector<std::uint64_t> parse_seeds(const std::string& list) {
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            seeds.push_back(std::stoull(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError("bad seed '" + item + "' in --seeds");
        }
    }
    if (seeds.empty()) throw ConfigError("--seeds needs at least one value");
    return seeds;
}

void apply_overrides(TrainConfig& cfg, const std::vector<std::string>& sets) {
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
        set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
}

void write_csv(const fs::path& path, const std::vector<MetricsRow>& rows) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    write_metrics_csv(out, rows);
}

fs::path with_suffix(const fs::path& p, const std::string& tag) {
    return p.parent_path() / (p.stem().string() + "." + tag + p.extension().string());
}

int report_gradchecks(const std::vector<GradCheckCase>& cases, bool verbose) {
    std::size_t failed = 0;
    for (const auto& c : cases) {
        if (!c.report.pass) ++failed;
        if (verbose || !c.report.pass) std::cout << c.name << ": " << c.report.summary() << "\n";
    }
    std::cout << (failed ? "FAIL" : "PASS") << " " << cases.size() - failed << "/" << cases.size()
              << " gradient checks passed\n";
    return failed ? Exit::numeric : Exit::ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DONet: dual-objective segmentation network"};
    app.require_subcommand(1);

    std::string config_path, out, ckpt, data_dir, split = "test", image, scale = "unit", seeds = "1,2,3", resume;
    std::vector<std::string> sets;
    std::uint64_t seed = 0;
    std::size_t count = 16, size = 64, channels = 3, cases = 120;
    double tol = 0;
    bool verbose = false, all_heads = false;

    auto* train_cmd = app.add_subcommand("train", "Train a model");
    train_cmd->add_option("--config", config_path, "Config file (key = value lines)")->check(CLI::ExistingFile);
    auto* seed_opt = train_cmd->add_option("--seed", seed, "Override the training seed");
    train_cmd->add_option("--out", out, "Run directory")->default_val("runs/donet");
    train_cmd->add_option("--resume", resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
    train_cmd->add_option("--set", sets, "Extra key=value overrides");

    auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a dataset split");
    eval_cmd->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--data", data_dir, "Dataset root (default: the checkpoint's dataset)");
    eval_cmd->add_option("--split", split)->default_val("test");
    eval_cmd->add_option("--out", out, "Metrics CSV")->required();
    eval_cmd->add_flag("--all-heads", all_heads, "Also write <out>.y1.csv and <out>.y2.csv");

    auto* predict_cmd = app.add_subcommand("predict", "Write masks and probability maps for one image");
    predict_cmd->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
    predict_cmd->add_option("--image", image)->required()->check(CLI::ExistingFile);
    predict_cmd->add_option("--out", out)->required();

    auto* ablate_cmd = app.add_subcommand("ablate", "Train and test the four ablation variants");
    ablate_cmd->add_option("--config", config_path)->check(CLI::ExistingFile);
    ablate_cmd->add_option("--seeds", seeds)->default_val("1,2,3");
    ablate_cmd->add_option("--out", out, "Output TSV")->required();
    ablate_cmd->add_option("--set", sets, "Extra key=value overrides");

    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    grad_cmd->add_option("--scale", scale)->check(CLI::IsMember({"unit", "model"}))->default_val("unit");
    grad_cmd->add_option("--cases", cases, "Number of unit cases")->default_val(120);
    grad_cmd->add_option("--tol", tol, "Relative error tolerance (default 1e-4 unit, 1e-3 model)");
    grad_cmd->add_option("--seed", seed)->default_val(1);
    grad_cmd->add_flag("-v,--verbose", verbose);

    auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset split");
    synth_cmd->add_option("--count", count)->default_val(16);
    synth_cmd->add_option("--size", size)->default_val(64);
    synth_cmd->add_option("--channels", channels)->default_val(3);
    synth_cmd->add_option("--out", out, "Dataset root")->required();
    synth_cmd->add_option("--split", split)->default_val("train");
    synth_cmd->add_option("--seed", seed)->default_val(1);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? Exit::ok : Exit::usage;
    }

    try {
        if (*train_cmd) {
            auto log = [](const std::string& line) { std::cout << line << std::endl; };
            if (!resume.empty()) {
                Trainer trainer = Trainer::resume(resume);
                // Only the budget may change; anything else would fork the run.
                TrainConfig extended = trainer.config();
                apply_overrides(extended, sets);
                TrainConfig same = extended;
                same.epochs = trainer.config().epochs;
                if (format_config(same) != format_config(trainer.config())) {
                    throw ConfigError("--resume accepts only --set epochs=N");
                }
                trainer.set_epochs(extended.epochs);
                train(trainer, out, log);
            } else {
                TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
                apply_overrides(cfg, sets);
                if (*seed_opt) cfg.seed = seed;
                const RunReport r = train(cfg, out, log);
                std::cerr << "best epoch " << r.best_epoch << " val_dsc " << r.best_val_dsc << "\n";
            }
        } else if (*eval_cmd) {
            LoadedCheckpoint ck = load_checkpoint(ckpt);
            std::vector<Sample> samples;
            if (!data_dir.empty()) {
                samples = load_split(data_dir, split);
            } else {
                DatasetSplits d = load_datasets(ck.config);
                if (split == "train") samples = std::move(d.train);
                else if (split == "val") samples = std::move(d.val);
                else if (split == "test") samples = std::move(d.test);
                else throw ConfigError("unknown split '" + split + "'");
            }
            if (samples.empty()) throw DataError("split '" + split + "' is empty");
            const EvalResult r = evaluate(ck.model, samples);
            write_csv(out, r.joint);
            if (all_heads) {
                write_csv(with_suffix(out, "y1"), r.y1);
                write_csv(with_suffix(out, "y2"), r.y2);
            }
            const auto s = summarize(r.joint);
            std::printf("images %zu dsc %.6f ji %.6f recall %.6f precision %.6f accuracy %.6f\n", r.joint.size(),
                        s.mean.dsc, s.mean.ji, s.mean.recall, s.mean.precision, s.mean.accuracy);
        } else if (*predict_cmd) {
            LoadedCheckpoint ck = load_checkpoint(ckpt);
            write_prediction(predict(ck.model, load_image(image)), out);
        } else if (*ablate_cmd) {
            TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
            apply_overrides(cfg, sets);
            const AblationReport r =
                ablate(cfg, parse_seeds(seeds), [](const std::string& line) { std::cerr << line << std::endl; });
            fs::path p(out);
            if (p.has_parent_path()) fs::create_directories(p.parent_path());
            std::ofstream os(p, std::ios::binary);
            if (!os) throw DataError("cannot write " + out);
            write_ablation_tsv(os, r);
            write_ablation_tsv(std::cout, r);
        } else if (*grad_cmd) {
            if (scale == "unit") {
                return report_gradchecks(run_unit_gradchecks(cases, seed, tol > 0 ? tol : 1e-4), verbose);
            }
            ModelGradCheckOptions o;
            o.seed = seed;
            if (tol > 0) o.tolerance = tol;
            return report_gradchecks(run_model_gradcheck(o), verbose);
        } else if (*synth_cmd) {
            SyntheticSpec spec;
            spec.count = count;
            spec.height = size;
            spec.width = size;
            spec.channels = channels;
            spec.seed = seed;
            spec.validate();
            save_split(generate_synthetic(spec), out, split);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return Exit::usage;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return Exit::numeric;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return Exit::data;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return Exit::data;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return Exit::data;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return Exit::usage;
    }
    return Exit::ok;
}
