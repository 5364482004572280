#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "qure/embedding_store.hpp"
#include "qure/miner.hpp"
#include "qure/scorer.hpp"

namespace qure {

struct TrainingConfig {
  std::int64_t n_epoch = 30;
  std::int64_t n_def = 6;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  double inv_tau_init = 20.0;
  Strategy strategy = Strategy::TwoDrops;
  std::size_t k = kDefaultTopK;
  std::size_t d_out = 0;        // 0: same as the input dimension
  std::int64_t eval_every = 0;  // 0: evaluate only when an eval set is given, at the last epoch

  // Throws Config naming the first violated invariant.
  void validate() const;

  // Epochs between hard-negative redefinitions, floor(n_epoch / n_def).
  std::int64_t mining_period() const { return n_epoch / n_def; }
  bool is_mining_epoch(std::int64_t epoch) const {
    return epoch == 0 || epoch % mining_period() == 0;
  }
  std::vector<std::int64_t> mining_epochs() const;

  // FNV-1a 64 of the canonical JSON form.
  std::uint64_t hash() const;
};

nlohmann::json to_json(const TrainingConfig& config);
// Unknown keys and mistyped values are Config errors. Missing keys keep defaults.
TrainingConfig training_config_from_json(const nlohmann::json& j,
                                         TrainingConfig base = TrainingConfig{});

// Stable in [0,1]: 1 / (1 + exp(-(s_pos - s_neg))).
double bt_probability(double s_pos, double s_neg);
// -log p for p = bt_probability(s_pos, s_neg), evaluated as softplus(s_neg - s_pos).
double nll_loss(double s_pos, double s_neg);
// -log p for a probability given directly; prefer the two-score form in training.
double nll_loss(double p);
double softplus(double x);

struct TrainingExample {
  std::string_view query_id;
  std::span<const float> x_img;
  std::span<const float> x_txt;
  std::span<const float> positive;
  std::span<const float> negative;
};

struct LossAndGradients {
  double loss = 0.0;  // mean over the batch
  AdapterParams grads;
};

// Examples are processed in fixed shards of this many and reduced in shard
// order, so the result is the same for any thread count.
inline constexpr std::size_t kGradientShard = 16;

LossAndGradients loss_and_gradients(const AdapterParams& params,
                                    std::span<const TrainingExample> batch,
                                    std::size_t threads = 1);

struct OptimizerState {
  AdapterParams first_moment;
  AdapterParams second_moment;
  std::uint64_t step = 0;

  static OptimizerState zeros_like(const AdapterParams& params);
  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

// Bias-corrected Adam step, then decoupled weight decay on the two weight
// matrices, then the temperature clamp. Throws NonFinite naming the block.
void adamw_step(AdapterParams& params, const AdapterParams& grads, OptimizerState& state,
                const TrainingConfig& config);

// Stacked scaled-identity blocks plus uniform noise in [-1e-3, 1e-3].
AdapterParams initial_params(std::size_t d_in, const TrainingConfig& config);

// Negative pool of one query as stored in a checkpoint: either the warm-up
// marker or explicit corpus rows in rank order.
struct StoredNegatives {
  bool warmup = false;
  std::vector<std::uint32_t> rows;
  friend bool operator==(const StoredNegatives&, const StoredNegatives&) = default;
};

struct Checkpoint {
  AdapterParams params;
  OptimizerState optimizer;
  std::int64_t epoch = 0;  // completed epochs
  std::uint64_t rng_seed = 0;
  std::uint64_t config_hash = 0;
  std::vector<StoredNegatives> negatives;  // per manifest query
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void write_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& destination);
Checkpoint load_checkpoint(const std::filesystem::path& source);

struct EpochLog {
  std::int64_t epoch = 0;
  double mean_loss = 0.0;
  std::size_t steps = 0;
  double inv_tau = 0.0;
  std::optional<MinerStats> mining;
  std::vector<std::pair<std::string, double>> eval;  // metric name -> percent
};

struct TrainingLog {
  std::vector<EpochLog> epochs;
};

nlohmann::json to_json(const MinerStats& stats);
nlohmann::json to_json(const EpochLog& entry);
std::string format_training_log(const TrainingLog& log);  // JSON lines

struct TrainOptions {
  std::size_t threads = 1;
  // When set, Recall@k on this dataset is logged per eval_every / final epoch.
  const Dataset* eval_data = nullptr;
  std::vector<std::size_t> eval_ks = {1, 5, 10, 50};
  // Called after every epoch with the state a resume would need.
  std::function<void(const Checkpoint&, const EpochLog&)> on_epoch_end;
};

struct TrainResult {
  Checkpoint checkpoint;
  TrainingLog log;
};

// Full training loop: warm-up negatives at epoch 0, redefinition from a frozen
// snapshot every mining_period() epochs, one uniformly drawn negative per
// query per epoch, shuffled batches, AdamW updates.
TrainResult train(const TrainingConfig& config, const Dataset& data,
                  const std::optional<Checkpoint>& init = std::nullopt,
                  const TrainOptions& options = TrainOptions{});

}  // namespace qure
