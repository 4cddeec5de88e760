#include "donet/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "donet/ops.hpp"
#include "donet/tensor_io.hpp"

namespace donet {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

double to_double(const std::string& key, const std::string& v) {
    double out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
    return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
    return out;
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt_bool(bool v) { return v ? "true" : "false"; }

struct Field {
    std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const TrainConfig&)> get;
};

#define DONET_DOUBLE(path)                                                                          \
    Field {                                                                                         \
        [](TrainConfig& c, const std::string& k, const std::string& v) { c.path = to_double(k, v); }, \
            [](const TrainConfig& c) { return fmt_double(c.path); }                                 \
    }
#define DONET_SIZE(path)                                                                                          \
    Field {                                                                                                       \
        [](TrainConfig& c, const std::string& k, const std::string& v) {                                          \
            c.path = static_cast<decltype(c.path)>(to_u64(k, v));                                                 \
        },                                                                                                        \
            [](const TrainConfig& c) { return std::to_string(c.path); }                                           \
    }
#define DONET_BOOL(path)                                                                          \
    Field {                                                                                       \
        [](TrainConfig& c, const std::string& k, const std::string& v) { c.path = to_bool(k, v); }, \
            [](const TrainConfig& c) { return fmt_bool(c.path); }                                 \
    }

// Ordered so that format_config output is stable and readable.
const std::vector<std::pair<std::string, Field>>& fields() {
    static const std::vector<std::pair<std::string, Field>> table = {
        {"lr", DONET_DOUBLE(lr)},
        {"epochs", DONET_SIZE(epochs)},
        {"batch_size", DONET_SIZE(batch_size)},
        {"decay_every", DONET_SIZE(decay_every)},
        {"decay_factor", DONET_DOUBLE(decay_factor)},
        {"lr_decoder1", DONET_DOUBLE(lr_decoder1)},
        {"lr_decoder2", DONET_DOUBLE(lr_decoder2)},
        {"seed", DONET_SIZE(seed)},
        {"l1_kind",
         {[](TrainConfig& c, const std::string&, const std::string& v) { c.objective.l1_kind = parse_loss_kind(v); },
          [](const TrainConfig& c) { return to_string(c.objective.l1_kind); }}},
        {"l2_kind",
         {[](TrainConfig& c, const std::string&, const std::string& v) { c.objective.l2_kind = parse_loss_kind(v); },
          [](const TrainConfig& c) { return to_string(c.objective.l2_kind); }}},
        {"epsilon", DONET_DOUBLE(objective.params.epsilon)},
        {"alpha", DONET_DOUBLE(objective.params.alpha)},
        {"beta", DONET_DOUBLE(objective.params.beta)},
        {"gamma", DONET_DOUBLE(objective.params.gamma)},
        {"focal_gamma", DONET_DOUBLE(objective.params.focal_gamma)},
        {"focal_alpha", DONET_DOUBLE(objective.params.focal_alpha)},
        {"input_channels", DONET_SIZE(model.input_channels)},
        {"input_height", DONET_SIZE(model.input_height)},
        {"input_width", DONET_SIZE(model.input_width)},
        {"base_channels", DONET_SIZE(model.base_channels)},
        {"stages", DONET_SIZE(model.stages)},
        {"dilation_rates",
         {[](TrainConfig& c, const std::string& k, const std::string& v) {
              std::vector<std::size_t> rates;
              std::stringstream ss(v);
              std::string item;
              while (std::getline(ss, item, ',')) rates.push_back(static_cast<std::size_t>(to_u64(k, trim(item))));
              c.model.dilation_rates = std::move(rates);
          },
          [](const TrainConfig& c) {
              std::string out;
              for (std::size_t i = 0; i < c.model.dilation_rates.size(); ++i) {
                  if (i) out += ",";
                  out += std::to_string(c.model.dilation_rates[i]);
              }
              return out;
          }}},
        {"use_rcem", DONET_BOOL(model.use_rcem)},
        {"use_dual", DONET_BOOL(model.use_dual)},
        {"use_pyramid_inputs", DONET_BOOL(model.use_pyramid_inputs)},
        {"data_dir",
         {[](TrainConfig& c, const std::string&, const std::string& v) { c.data_dir = v; },
          [](const TrainConfig& c) { return c.data_dir; }}},
        {"synthetic_count", DONET_SIZE(synthetic.count)},
        {"synthetic_test_count", DONET_SIZE(synthetic_test_count)},
        {"synthetic_seed", DONET_SIZE(synthetic.seed)},
        {"area_fraction_min", DONET_DOUBLE(synthetic.area_fraction_min)},
        {"area_fraction_max", DONET_DOUBLE(synthetic.area_fraction_max)},
        {"blob_irregularity", DONET_DOUBLE(synthetic.blob_irregularity)},
        {"noise_std", DONET_DOUBLE(synthetic.noise_std)},
        {"min_contrast", DONET_DOUBLE(synthetic.min_contrast)},
        {"val_fraction", DONET_DOUBLE(val_fraction)},
        {"overfit", DONET_BOOL(overfit)},
        {"val_every", DONET_SIZE(val_every)},
        {"augment", DONET_BOOL(augment)},
        {"rotation_degrees", DONET_DOUBLE(augmentation.rotation_degrees)},
        {"hflip_prob", DONET_DOUBLE(augmentation.hflip_prob)},
        {"crop_fraction", DONET_DOUBLE(augmentation.crop_fraction)},
    };
    return table;
}

#undef DONET_DOUBLE
#undef DONET_SIZE
#undef DONET_BOOL

}  // namespace

void TrainConfig::validate() const {
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2 (batchnorm)");
    if (val_every < 1) throw ConfigError("val_every must be at least 1");
    if (decay_every < 1) throw ConfigError("decay_every must be at least 1");
    if (!(decay_factor >= 1)) throw ConfigError("decay_factor must be >= 1");
    if (lr_decoder1 < 0 || lr_decoder2 < 0) throw ConfigError("decoder rate overrides must be >= 0");
    if (!(val_fraction >= 0 && val_fraction < 1)) throw ConfigError("val_fraction must lie in [0, 1)");
    objective.params.validate();
    model.validate();
    if (data_dir.empty()) {
        SyntheticSpec spec = synthetic;
        spec.height = model.input_height;
        spec.width = model.input_width;
        spec.channels = model.input_channels;
        spec.validate();
    }
    if (augment) augmentation.validate();
}

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "input_size") {
        // Square shorthand.
        const auto side = static_cast<std::size_t>(to_u64(key, value));
        cfg.model.input_height = side;
        cfg.model.input_width = side;
        return;
    }
    for (const auto& [name, field] : fields()) {
        if (name == key) {
            field.set(cfg, key, value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

TrainConfig parse_config(const std::string& text) {
    TrainConfig cfg;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string t = trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(std::string_view(t).substr(0, eq));
        const std::string value = trim(std::string_view(t).substr(eq + 1));
        try {
            set_config_value(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

TrainConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string format_config(const TrainConfig& cfg) {
    std::string out;
    for (const auto& [name, field] : fields()) out += name + " = " + field.get(cfg) + "\n";
    return out;
}

double learning_rate(const TrainConfig& cfg, std::size_t epoch) {
    return cfg.lr / std::pow(cfg.decay_factor, static_cast<double>(epoch / cfg.decay_every));
}

// ---------------------------------------------------------------------------
// SGD

template <typename T>
void sgd_step(const NamedTensors<T>& params, const std::function<double(const std::string&)>& rate_for) {
    for (const auto& p : params) {
        if (!p.tensor.requires_grad()) continue;
        if (!p.tensor.has_grad()) throw ContractError("sgd_step: parameter " + p.name + " received no gradient");
    }
    for (const auto& p : params) {
        if (!p.tensor.requires_grad()) continue;
        Tensor<T> t = p.tensor;
        const T rate = static_cast<T>(rate_for(p.name));
        auto d = t.data();
        const auto g = t.grad();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] -= rate * g[i];
        t.zero_grad();
    }
}

template <typename T>
void sgd_step(const NamedTensors<T>& params, double rate) {
    sgd_step<T>(params, [rate](const std::string&) { return rate; });
}

template void sgd_step(const NamedTensors<float>&, double);
template void sgd_step(const NamedTensors<double>&, double);
template void sgd_step(const NamedTensors<float>&, const std::function<double(const std::string&)>&);
template void sgd_step(const NamedTensors<double>&, const std::function<double(const std::string&)>&);

// ---------------------------------------------------------------------------
// Data

namespace {

constexpr std::uint64_t kSplitLabel = 0x73706c6974;  // "split"
constexpr std::uint64_t kTestLabel = 0x74657374;     // "test"
constexpr std::uint64_t kShuffleLabel = 0x73687566;  // "shuf"
constexpr std::uint64_t kAugmentLabel = 0x61756720;  // "aug "

void check_extents(const std::vector<Sample>& samples, const DonetConfig& m, const std::string& split) {
    const Shape want{1, m.input_channels, m.input_height, m.input_width};
    for (const auto& s : samples) {
        if (s.image.shape() != want) {
            throw DataError(split + " sample " + s.id + " has shape " + s.image.shape().str() + ", model expects " +
                            want.str());
        }
    }
}

// Moves a seeded random val_fraction of `pool` into `val`.
void split_validation(std::vector<Sample>& pool, std::vector<Sample>& val, double fraction, std::uint64_t seed) {
    if (fraction <= 0 || pool.size() < 2) return;
    auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pool.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, pool.size() - 1);
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng rng(derive_key(seed, kSplitLabel));
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
    std::vector<bool> is_val(pool.size(), false);
    for (std::size_t i = 0; i < n_val; ++i) is_val[order[i]] = true;
    std::vector<Sample> train;
    for (std::size_t i = 0; i < pool.size(); ++i) (is_val[i] ? val : train).push_back(std::move(pool[i]));
    pool = std::move(train);
}

}  // namespace

DatasetSplits load_datasets(const TrainConfig& cfg) {
    DatasetSplits out;
    if (cfg.data_dir.empty()) {
        SyntheticSpec spec = cfg.synthetic;
        spec.height = cfg.model.input_height;
        spec.width = cfg.model.input_width;
        spec.channels = cfg.model.input_channels;
        out.train = generate_synthetic(spec);
        if (cfg.synthetic_test_count > 0) {
            SyntheticSpec test = spec;
            test.count = cfg.synthetic_test_count;
            test.seed = derive_key(spec.seed, kTestLabel);
            out.test = generate_synthetic(test);
        }
        if (!cfg.overfit) split_validation(out.train, out.val, cfg.val_fraction, spec.seed);
    } else {
        const fs::path root = cfg.data_dir;
        out.train = load_split(root, "train");
        if (fs::is_directory(root / "test")) out.test = load_split(root, "test");
        if (!cfg.overfit) {
            if (fs::is_directory(root / "val")) {
                out.val = load_split(root, "val");
            } else {
                split_validation(out.train, out.val, cfg.val_fraction, cfg.synthetic.seed);
            }
        }
    }
    if (cfg.overfit) out.val = out.train;
    if (out.train.empty()) throw DataError("training split is empty");
    check_extents(out.train, cfg.model, "train");
    check_extents(out.val, cfg.model, "val");
    check_extents(out.test, cfg.model, "test");
    return out;
}

// ---------------------------------------------------------------------------
// Trainer

std::string to_json_line(const EpochRecord& r) {
    char val[32] = "null";
    if (r.validated) std::snprintf(val, sizeof val, "%.6f", r.val_dsc);
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "{\"epoch\":%zu,\"lr\":%.10g,\"steps\":%zu,\"l1\":%.9g,\"l2\":%.9g,\"lf\":%.9g,\"total\":%.9g,"
                  "\"val_dsc\":%s,\"best\":%s}",
                  r.epoch, r.lr, r.steps, r.mean.l1, r.mean.l2, r.mean.lf, r.mean.total, val,
                  r.best ? "true" : "false");
    return buf;
}

Trainer::Trainer(TrainConfig cfg, DatasetSplits data)
    : cfg_(std::move(cfg)),
      data_(std::move(data)),
      model_(cfg_.model, cfg_.seed),
      shuffle_rng_(derive_key(cfg_.seed, kShuffleLabel)) {
    cfg_.validate();
    if (data_.train.empty()) throw DataError("training split is empty");
}

bool Trainer::finished() const { return epoch_ >= cfg_.epochs; }

std::vector<std::vector<std::size_t>> Trainer::epoch_batches() {
    std::vector<std::size_t> order(data_.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[shuffle_rng_.below(i + 1)]);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t b = 0; b < order.size(); b += cfg_.batch_size) {
        const std::size_t e = std::min(order.size(), b + cfg_.batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b), order.begin() + static_cast<std::ptrdiff_t>(e));
    }
    // A lone trailing sample joins the previous batch.
    if (batches.size() > 1 && batches.back().size() == 1) {
        batches[batches.size() - 2].push_back(batches.back().front());
        batches.pop_back();
    }
    return batches;
}

Batch Trainer::prepare_batch(const std::vector<std::size_t>& indices) {
    if (!cfg_.augment) return make_batch(data_.train, indices);
    std::vector<Sample> augmented;
    augmented.reserve(indices.size());
    const std::uint64_t epoch_key = derive_key(derive_key(cfg_.seed, kAugmentLabel), epoch_);
    for (std::size_t i : indices) {
        CounterRng rng(derive_key(epoch_key, i));
        augmented.push_back(augment(data_.train[i], cfg_.augmentation, rng));
    }
    std::vector<std::size_t> all(indices.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return make_batch(augmented, all);
}

StepLosses Trainer::step(const Batch& batch) {
    const double base = learning_rate(cfg_, epoch_);
    const double multiplier = base / cfg_.lr;
    auto triple = model_.forward(batch.images, Mode::train);
    auto terms = combined_objective(cfg_.objective, triple, batch.masks);
    StepLosses s{terms.l1.item(), terms.l2.item(), terms.lf.item(), 0.0};
    // The reported total is the sum of the reported terms; the graph total
    // differs from it only by float rounding.
    s.total = s.l1 + s.l2 + s.lf;
    if (!std::isfinite(terms.total.item()) || !std::isfinite(s.total)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch_) + ", step " + std::to_string(steps_));
    }
    terms.total.backward();
    const auto params = model_.parameters();
    sgd_step<float>(params, [&](const std::string& name) {
        if (cfg_.lr_decoder1 > 0 && name.rfind("decoder1.", 0) == 0) return cfg_.lr_decoder1 * multiplier;
        if (cfg_.lr_decoder2 > 0 && name.rfind("decoder2.", 0) == 0) return cfg_.lr_decoder2 * multiplier;
        return base;
    });
    ++steps_;
    step_log_.push_back(s);
    return s;
}

double Trainer::validation_dsc() {
    if (data_.val.empty()) return 0.0;
    const auto result = evaluate(model_, data_.val);
    return summarize(result.joint).mean.dsc;
}

EpochRecord Trainer::run_epoch() {
    if (finished()) throw ContractError("run_epoch: all configured epochs are done");
    EpochRecord rec;
    rec.epoch = epoch_;
    rec.lr = learning_rate(cfg_, epoch_);
    for (const auto& indices : epoch_batches()) {
        const StepLosses s = step(prepare_batch(indices));
        rec.mean.l1 += s.l1;
        rec.mean.l2 += s.l2;
        rec.mean.lf += s.lf;
        rec.mean.total += s.total;
        ++rec.steps;
    }
    const double n = static_cast<double>(rec.steps);
    rec.mean.l1 /= n;
    rec.mean.l2 /= n;
    rec.mean.lf /= n;
    rec.mean.total /= n;
    ++epoch_;
    rec.validated = epoch_ % cfg_.val_every == 0 || finished();
    if (rec.validated) rec.val_dsc = validation_dsc();
    return rec;
}

void Trainer::save_checkpoint(const fs::path& path) const {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw DataError("cannot write checkpoint " + path.string());
        write_checkpoint(out);
        if (!out) throw DataError("write failed for checkpoint " + path.string());
    }
    fs::rename(tmp, path);
}

void Trainer::write_checkpoint(std::ostream& os) const {
    donet::write_checkpoint(os, cfg_, model_, epoch_, steps_, shuffle_rng_);
}

Trainer Trainer::resume(const fs::path& path, std::optional<DatasetSplits> data) {
    LoadedCheckpoint ck = load_checkpoint(path);
    DatasetSplits splits = data ? std::move(*data) : load_datasets(ck.config);
    Trainer t(ck.config, std::move(splits));
    t.model_ = std::move(ck.model);
    t.epoch_ = ck.epoch;
    t.steps_ = ck.steps;
    t.shuffle_rng_ = CounterRng(ck.rng_key, ck.rng_counter);
    return t;
}

void Trainer::set_epochs(std::size_t epochs) {
    if (epochs == 0 || epochs < epoch_) {
        throw ConfigError("epochs = " + std::to_string(epochs) + " is below the " + std::to_string(epoch_) +
                          " already completed");
    }
    cfg_.epochs = epochs;
}

// ---------------------------------------------------------------------------
// Run

RunReport train(Trainer& trainer, const fs::path& out_dir, const std::function<void(const std::string&)>& log) {
    RunReport report;
    std::ofstream jsonl;
    std::ofstream curve;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        const bool fresh = trainer.epoch() == 0;
        const auto mode = fresh ? std::ios::trunc : std::ios::app;
        jsonl.open(out_dir / "train_log.jsonl", std::ios::out | mode);
        curve.open(out_dir / "loss_curve.csv", std::ios::out | mode);
        if (!jsonl || !curve) throw DataError("cannot write run logs in " + out_dir.string());
        if (fs::file_size(out_dir / "loss_curve.csv") == 0) curve << "step,epoch,lr,l1,l2,lf,total\n";
    }
    bool have_best = false;
    while (!trainer.finished()) {
        const std::size_t first_step = trainer.step_log().size();
        EpochRecord rec = trainer.run_epoch();
        if (rec.validated && (!have_best || rec.val_dsc > report.best_val_dsc)) {
            have_best = true;
            rec.best = true;
            report.best_val_dsc = rec.val_dsc;
            report.best_epoch = rec.epoch;
            std::ostringstream os(std::ios::binary);
            trainer.write_checkpoint(os);
            report.best_checkpoint = os.str();
            if (!out_dir.empty()) {
                std::ofstream best(out_dir / "best.ckpt", std::ios::binary);
                best << report.best_checkpoint;
            }
        }
        const std::string line = to_json_line(rec);
        if (log) log(line);
        if (!out_dir.empty()) {
            jsonl << line << "\n" << std::flush;
            const auto& steps = trainer.step_log();
            const std::size_t base_step = trainer.steps_taken() - (steps.size() - first_step);
            for (std::size_t i = first_step; i < steps.size(); ++i) {
                char buf[256];
                std::snprintf(buf, sizeof buf, "%zu,%zu,%.10g,%.9g,%.9g,%.9g,%.9g\n", base_step + (i - first_step),
                              rec.epoch, rec.lr, steps[i].l1, steps[i].l2, steps[i].lf, steps[i].total);
                curve << buf;
            }
            curve << std::flush;
            trainer.save_checkpoint(out_dir / "last.ckpt");
        }
        report.epochs.push_back(rec);
    }
    return report;
}

RunReport train(const TrainConfig& cfg, const fs::path& out_dir, const std::function<void(const std::string&)>& log) {
    cfg.validate();
    Trainer trainer(cfg, load_datasets(cfg));
    return train(trainer, out_dir, log);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kCheckpointMagic = "DONET1";

}  // namespace

void write_checkpoint(std::ostream& os, const TrainConfig& cfg, const DonetModel<float>& model, std::size_t epoch,
                      std::size_t steps, const CounterRng& rng) {
    os << kCheckpointMagic << "\n" << format_config(cfg);
    os << "state.epoch = " << epoch << "\n";
    os << "state.steps = " << steps << "\n";
    os << "state.rng_key = " << rng.key() << "\n";
    os << "state.rng_counter = " << rng.counter() << "\n\n";
    for (const auto& p : model.parameters()) {
        os << p.name << "\n";
        write_tensor_dump(os, p.tensor);
    }
    for (const auto& b : model.buffers()) {
        os << b.name << "\n";
        write_tensor_dump(os, b.tensor);
    }
}

LoadedCheckpoint read_checkpoint(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != kCheckpointMagic) throw DataError("checkpoint: bad header");
    std::string config_text;
    std::map<std::string, std::string> state;
    while (true) {
        if (!std::getline(is, line)) throw DataError("checkpoint: truncated config block");
        if (line.empty()) break;
        if (line.rfind("state.", 0) == 0) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw DataError("checkpoint: malformed state line");
            state[trim(std::string_view(line).substr(0, eq))] = trim(std::string_view(line).substr(eq + 1));
        } else {
            config_text += line + "\n";
        }
    }
    LoadedCheckpoint out;
    try {
        out.config = parse_config(config_text);
        out.config.validate();
    } catch (const ConfigError& e) {
        throw DataError(std::string("checkpoint: ") + e.what());
    }
    auto state_u64 = [&](const std::string& key) {
        const auto it = state.find(key);
        if (it == state.end()) throw DataError("checkpoint: missing " + key);
        try {
            return to_u64(key, it->second);
        } catch (const ConfigError& e) {
            throw DataError(std::string("checkpoint: ") + e.what());
        }
    };
    out.epoch = static_cast<std::size_t>(state_u64("state.epoch"));
    out.steps = static_cast<std::size_t>(state_u64("state.steps"));
    out.rng_key = state_u64("state.rng_key");
    out.rng_counter = state_u64("state.rng_counter");

    out.model = DonetModel<float>(out.config.model, out.config.seed);
    std::map<std::string, Tensorf> params;
    for (const auto& p : out.model.parameters()) params.emplace(p.name, p.tensor);
    std::map<std::string, Shape> buffers;
    for (const auto& b : out.model.buffers()) buffers.emplace(b.name, b.tensor.shape());
    std::size_t loaded_params = 0, loaded_buffers = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const Tensorf t = read_tensor_dump(is);
        if (auto it = params.find(line); it != params.end()) {
            if (it->second.shape() != t.shape()) {
                throw ShapeError("checkpoint: " + line + " has shape " + t.shape().str() + ", model expects " +
                                 it->second.shape().str());
            }
            std::copy(t.data().begin(), t.data().end(), it->second.data().begin());
            ++loaded_params;
        } else if (auto bt = buffers.find(line); bt != buffers.end()) {
            if (bt->second != t.shape()) throw ShapeError("checkpoint: buffer " + line + " shape mismatch");
            out.model.load_buffer(line, t.data());
            ++loaded_buffers;
        } else {
            throw DataError("checkpoint: unknown tensor " + line);
        }
    }
    if (loaded_params != params.size() || loaded_buffers != buffers.size()) {
        throw DataError("checkpoint: missing tensors (" + std::to_string(loaded_params) + "/" +
                        std::to_string(params.size()) + " parameters, " + std::to_string(loaded_buffers) + "/" +
                        std::to_string(buffers.size()) + " buffers)");
    }
    return out;
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read checkpoint " + path.string());
    return read_checkpoint(in);
}

// ---------------------------------------------------------------------------
// Evaluation and prediction

namespace {

constexpr std::size_t kEvalChunk = 8;

MetricsRow row_for(const std::string& id, const Tensorf& probs, const BinaryMask& gt) {
    return {id, compute_metrics(binarize(probs), gt).metrics};
}

}  // namespace

EvalResult evaluate(DonetModel<float>& model, const std::vector<Sample>& samples) {
    NoGradGuard no_grad;
    EvalResult out;
    for (std::size_t b = 0; b < samples.size(); b += kEvalChunk) {
        std::vector<std::size_t> idx(std::min(kEvalChunk, samples.size() - b));
        std::iota(idx.begin(), idx.end(), b);
        const Batch batch = make_batch(samples, idx);
        const auto triple = model.forward(batch.images, Mode::eval);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const Sample& s = samples[idx[i]];
            const BinaryMask gt = binarize(s.mask);
            out.joint.push_back(row_for(s.id, slice_batch(triple.y_joint, i, 1), gt));
            out.y1.push_back(row_for(s.id, slice_batch(triple.y1, i, 1), gt));
            out.y2.push_back(row_for(s.id, slice_batch(triple.y2, i, 1), gt));
        }
    }
    return out;
}

Prediction predict(DonetModel<float>& model, const Tensorf& image) {
    const auto& m = model.config();
    const Shape want{1, m.input_channels, m.input_height, m.input_width};
    if (image.shape() != want) {
        throw ShapeError("predict: image shape " + image.shape().str() + " does not match model input " + want.str());
    }
    NoGradGuard no_grad;
    const auto triple = model.forward(image, Mode::eval);
    return {triple.y1.clone(), triple.y2.clone(), triple.y_joint.clone()};
}

void write_prediction(const Prediction& p, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    save_mask(binarize(p.y1), out_dir / "pred1.pgm");
    save_mask(binarize(p.y2), out_dir / "pred2.pgm");
    save_mask(binarize(p.y_joint), out_dir / "joint.pgm");
    const std::pair<const char*, const Tensorf*> dumps[] = {
        {"prob1.dot", &p.y1}, {"prob2.dot", &p.y2}, {"joint.dot", &p.y_joint}};
    for (const auto& [name, t] : dumps) {
        std::ofstream out(out_dir / name, std::ios::binary);
        if (!out) throw DataError("cannot write " + (out_dir / name).string());
        write_tensor_dump(out, *t);
    }
}

// ---------------------------------------------------------------------------
// Ablation

const std::vector<AblationVariant>& ablation_variants() {
    static const std::vector<AblationVariant> variants = {
        {"baseline", false, false},
        {"+RCEM", true, false},
        {"+DOA", false, true},
        {"+RCEM+DOA", true, true},
    };
    return variants;
}

AblationReport ablate(const TrainConfig& base, const std::vector<std::uint64_t>& seeds,
                      const std::function<void(const std::string&)>& on_run) {
    if (seeds.empty()) throw ConfigError("ablate: at least one seed is required");
    base.validate();
    const DatasetSplits data = load_datasets(base);
    const auto& eval_set = data.test.empty() ? data.val : data.test;
    if (eval_set.empty()) throw DataError("ablate: no test or validation samples to score");

    AblationReport report;
    for (const auto& v : ablation_variants()) {
        AblationRow row;
        row.variant = v;
        std::vector<MetricsRow> seed_rows;
        for (std::uint64_t seed : seeds) {
            TrainConfig cfg = base;
            cfg.seed = seed;
            cfg.model.use_rcem = v.use_rcem;
            cfg.model.use_dual = v.use_dual;
            Trainer trainer(cfg, data);
            row.parameter_count = trainer.model().parameter_count();
            const RunReport run = train(trainer, {});
            std::istringstream is(run.best_checkpoint, std::ios::binary);
            LoadedCheckpoint best = read_checkpoint(is);
            const auto result = evaluate(best.model, eval_set);
            const SegmentationMetrics m = summarize(result.joint).mean;
            row.per_seed.push_back(m);
            seed_rows.push_back({std::to_string(seed), m});
            if (on_run) {
                char buf[256];
                std::snprintf(buf, sizeof buf, "%s seed=%llu best_epoch=%zu val_dsc=%.4f test_dsc=%.4f", v.name.c_str(),
                              static_cast<unsigned long long>(seed), run.best_epoch, run.best_val_dsc, m.dsc);
                on_run(buf);
            }
        }
        row.summary = summarize(seed_rows);
        report.rows.push_back(std::move(row));
    }
    report.ordering_ok = report.rows.back().summary.mean.dsc >= report.rows.front().summary.mean.dsc;
    return report;
}

void write_ablation_tsv(std::ostream& os, const AblationReport& report) {
    os << "variant\tparameters\tdsc\tji\trecall\tprecision\taccuracy\n";
    for (const auto& r : report.rows) {
        const auto& m = r.summary.mean;
        const auto& s = r.summary.stddev;
        const double means[] = {m.dsc, m.ji, m.recall, m.precision, m.accuracy};
        const double stds[] = {s.dsc, s.ji, s.recall, s.precision, s.accuracy};
        os << r.variant.name << "\t" << r.parameter_count;
        for (int i = 0; i < 5; ++i) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "\t%.4f±%.4f", means[i], stds[i]);
            os << buf;
        }
        os << "\n";
    }
    os << "# ordering full>=baseline: " << (report.ordering_ok ? "ok" : "VIOLATED") << "\n";
}

}  // namespace donet
