#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "donet/data.hpp"
#include "donet/losses.hpp"
#include "donet/metrics.hpp"
#include "donet/model.hpp"

namespace donet {

struct TrainConfig {
    double lr = 0.01;
    std::size_t epochs = 80;
    std::size_t batch_size = 8;
    std::size_t decay_every = 40;
    double decay_factor = 10.0;
    // Per-decoder rate overrides; 0 means "use lr". Encoder and RCEM always use lr.
    double lr_decoder1 = 0.0;
    double lr_decoder2 = 0.0;
    std::uint64_t seed = 1;
    ObjectiveConfig objective;
    DonetConfig model;

    // Dataset: a directory with train/ (and optionally val/, test/) splits,
    // or, when data_dir is empty, the synthetic generator.
    std::string data_dir;
    SyntheticSpec synthetic;               // train pool; extents follow the model input
    std::size_t synthetic_test_count = 0;  // held-out synthetic samples
    double val_fraction = 0.15;
    // Validate on the training samples themselves (no split).
    bool overfit = false;
    // Validate every n-th epoch (and always after the last one).
    std::size_t val_every = 1;
    bool augment = false;
    AugmentConfig augmentation;

    void validate() const;
};

// `key = value` lines, `#` comments. Unknown keys and malformed values throw
// ConfigError naming the line.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);
std::string format_config(const TrainConfig& cfg);
// Applies one `key = value` assignment.
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);

// lr / factor^floor(epoch / decay_every)
double learning_rate(const TrainConfig& cfg, std::size_t epoch);

// theta <- theta - rate * grad for every parameter, then clears the grads.
// Throws ContractError when a parameter that requires grad has none.
template <typename T>
void sgd_step(const NamedTensors<T>& params, double rate);
template <typename T>
void sgd_step(const NamedTensors<T>& params, const std::function<double(const std::string&)>& rate_for);

struct DatasetSplits {
    std::vector<Sample> train;
    std::vector<Sample> val;
    std::vector<Sample> test;
};

// Deterministic in the config. Throws DataError when the train split is empty
// or sample extents disagree with the model input.
DatasetSplits load_datasets(const TrainConfig& cfg);

struct StepLosses {
    double l1 = 0, l2 = 0, lf = 0, total = 0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double lr = 0;
    std::size_t steps = 0;
    StepLosses mean;  // over the epoch's batches
    bool validated = false;
    double val_dsc = 0;
    bool best = false;
};

std::string to_json_line(const EpochRecord& r);

// Holds the model and the shuffling stream. All randomness is derived from
// (seed, epoch, position), so a checkpoint restores training exactly.
class Trainer {
public:
    Trainer(TrainConfig cfg, DatasetSplits data);

    // One pass over the training split. Throws NumericError on a non-finite loss.
    EpochRecord run_epoch();
    // Forward, backward and update on one batch at the current epoch's rate.
    StepLosses step(const Batch& batch);

    // Mean per-image DSC of the binarized joint prediction.
    double validation_dsc();

    std::size_t epoch() const { return epoch_; }
    std::size_t steps_taken() const { return steps_; }
    bool finished() const;
    const TrainConfig& config() const { return cfg_; }
    DonetModel<float>& model() { return model_; }
    const DatasetSplits& data() const { return data_; }
    const std::vector<StepLosses>& step_log() const { return step_log_; }

    void save_checkpoint(const std::filesystem::path& path) const;
    void write_checkpoint(std::ostream& os) const;
    // Rebuilds the trainer from a checkpoint; datasets are regenerated from
    // the stored config unless provided.
    static Trainer resume(const std::filesystem::path& path, std::optional<DatasetSplits> data = std::nullopt);
    // Changes the epoch budget of a resumed run; must not be below epoch().
    void set_epochs(std::size_t epochs);

private:
    std::vector<std::vector<std::size_t>> epoch_batches();
    Batch prepare_batch(const std::vector<std::size_t>& indices);

    TrainConfig cfg_;
    DatasetSplits data_;
    DonetModel<float> model_;
    CounterRng shuffle_rng_;
    std::size_t epoch_ = 0;
    std::size_t steps_ = 0;
    std::vector<StepLosses> step_log_;
};

struct RunReport {
    std::vector<EpochRecord> epochs;
    double best_val_dsc = 0;
    std::size_t best_epoch = 0;
    std::string best_checkpoint;  // serialized best-validation state
};

// Runs the remaining epochs. Writes train_log.jsonl, loss_curve.csv,
// last.ckpt and best.ckpt into out_dir when it is non-empty. `log` receives
// each JSON line.
RunReport train(const TrainConfig& cfg, const std::filesystem::path& out_dir,
                const std::function<void(const std::string&)>& log = {});
RunReport train(Trainer& trainer, const std::filesystem::path& out_dir,
                const std::function<void(const std::string&)>& log = {});

struct LoadedCheckpoint {
    TrainConfig config;
    std::size_t epoch = 0;
    std::size_t steps = 0;
    std::uint64_t rng_key = 0;
    std::uint64_t rng_counter = 0;
    DonetModel<float> model;
};

// Layout: "DONET1\n", config lines, state lines, a blank line, then for each
// parameter and buffer its name on one line followed by a tensor dump.
void write_checkpoint(std::ostream& os, const TrainConfig& cfg, const DonetModel<float>& model, std::size_t epoch,
                      std::size_t steps, const CounterRng& rng);
LoadedCheckpoint read_checkpoint(std::istream& is);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

struct EvalResult {
    std::vector<MetricsRow> joint;
    std::vector<MetricsRow> y1;
    std::vector<MetricsRow> y2;
};

// Eval-mode forward of every sample; metrics of the binarized maps.
EvalResult evaluate(DonetModel<float>& model, const std::vector<Sample>& samples);

struct Prediction {
    Tensorf y1, y2, y_joint;  // (1, 1, H, W)
};

Prediction predict(DonetModel<float>& model, const Tensorf& image);
// pred1.pgm, pred2.pgm, joint.pgm and prob1.dot, prob2.dot, joint.dot.
void write_prediction(const Prediction& p, const std::filesystem::path& out_dir);

struct AblationVariant {
    std::string name;
    bool use_rcem = false;
    bool use_dual = false;
};

const std::vector<AblationVariant>& ablation_variants();

struct AblationRow {
    AblationVariant variant;
    std::size_t parameter_count = 0;
    std::vector<SegmentationMetrics> per_seed;  // macro means on the test split
    MetricsSummary summary;                     // over seeds
};

struct AblationReport {
    std::vector<AblationRow> rows;
    bool ordering_ok = false;  // full mean DSC >= baseline mean DSC
};

// Trains and tests every variant for every seed. `on_run` is told about each
// finished (variant, seed) run.
AblationReport ablate(const TrainConfig& base, const std::vector<std::uint64_t>& seeds,
                      const std::function<void(const std::string&)>& on_run = {});
void write_ablation_tsv(std::ostream& os, const AblationReport& report);

}  // namespace donet
