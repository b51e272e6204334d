#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "nse/data.hpp"
#include "nse/model.hpp"
#include "nse/prediction.hpp"

namespace nse {

struct TrainConfig {
  Eigen::Index k = 436;
  Eigen::Index embed_dim = 300;
  int steps = 1;  // T
  HaltingVariant mode = HaltingVariant::QueryGating;
  double lr = 0.001;
  int batch_size = 32;
  int pool_factor = 32;  // pool size = pool_factor * batch_size
  double clip_threshold = 15.0;
  double dropout = 0.2;
  int patience = 1;
  int max_epochs = 50;
  std::uint64_t seed = 1;

  HaltingMode halting() const { return {mode, steps}; }
};

// ---- optimizer --------------------------------------------------------------

// Scales all gradients by threshold/norm when the global L2 norm exceeds
// the threshold. Returns the pre-clip norm.
double clip_global_norm(GradMap& grads, double threshold);

struct AdamState {
  GradMap m, v;
  long step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

void adam_step(ModelParams& params, const GradMap& grads, AdamState& state,
               double lr);

// ---- per-example passes -----------------------------------------------------

// Forward (and optionally backward) for one example. Returns the loss;
// fills `predicted` with the argmax candidate index. When `grads` is given,
// parameter gradients for this example are added into it.
double example_pass(const ModelParams& params, const ModelInput& input,
                    const std::vector<Vec>& candidate_masks, int answer_index,
                    const HaltingMode& mode, const DropoutSpec& drop,
                    Rng* rng, GradMap* grads, int* predicted = nullptr,
                    ForwardResult* trace_out = nullptr);

// ---- evaluation -------------------------------------------------------------

struct EvalRecord {
  int example_id;
  int predicted;
  int gold;
  double gold_prob;
};

struct EvalResult {
  double accuracy = 0.0;
  std::vector<EvalRecord> records;  // ordered by example id
};

EvalResult evaluate(const ModelParams& params,
                    const std::vector<Example>& split,
                    const HaltingMode& mode, int batch_size);

// ---- checkpointing ----------------------------------------------------------

struct Checkpoint {
  TrainConfig config;
  ModelParams params;
  AdamState optimizer;
  int epoch = 0;
  double dev_accuracy = 0.0;
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Versioned little-endian binary container (magic, version, config block,
// named parameter and moment blobs). Save -> load -> save is byte-identical.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// ---- the training loop ------------------------------------------------------

// Per epoch: regenerate pool-sorted batches, forward/backward per example,
// clip, Adam step; then evaluate dev with dropout off. Keeps the best
// checkpoint and stops after `patience` consecutive non-improving epochs
// (patience 0 disables early stopping). A non-finite loss aborts with a
// diagnostic naming the batch.
Checkpoint train(const TrainConfig& config,
                 const std::vector<Example>& train_split,
                 const std::vector<Example>& dev_split,
                 std::ostream* log = nullptr);

}  // namespace nse
