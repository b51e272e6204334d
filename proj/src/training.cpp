#include "nse/training.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <ostream>
#include <sstream>

namespace nse {

double clip_global_norm(GradMap& grads, double threshold) {
  if (threshold <= 0.0) throw ShapeError("clip_global_norm: threshold <= 0");
  double sq = 0.0;
  for (const auto& [name, g] : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > threshold) {
    const double s = threshold / norm;
    for (auto& [name, g] : grads) g *= s;
  }
  return norm;
}

void adam_step(ModelParams& params, const GradMap& grads, AdamState& state,
               double lr) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, state.step);
  const double bc2 = 1.0 - std::pow(state.beta2, state.step);
  params.for_each([&](const char* name, Mat& p) {
    auto git = grads.find(name);
    if (git == grads.end()) throw ShapeError(std::string("adam_step: missing gradient for ") + name);
    const Mat& g = git->second;
    if (g.rows() != p.rows() || g.cols() != p.cols())
      throw ShapeError(std::string("adam_step: shape mismatch for ") + name);
    Mat& m = state.m.try_emplace(name, Mat::Zero(p.rows(), p.cols()))
                 .first->second;
    Mat& v = state.v.try_emplace(name, Mat::Zero(p.rows(), p.cols()))
                 .first->second;
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseProduct(g);
    const Mat m_hat = m / bc1;
    const Mat v_hat = v / bc2;
    p.array() -= lr * m_hat.array() / (v_hat.array().sqrt() + state.eps);
  });
}

double example_pass(const ModelParams& params, const ModelInput& input,
                    const std::vector<Vec>& candidate_masks, int answer_index,
                    const HaltingMode& mode, const DropoutSpec& drop,
                    Rng* rng, GradMap* grads, int* predicted,
                    ForwardResult* trace_out) {
  if (answer_index < 0 ||
      answer_index >= static_cast<int>(candidate_masks.size()))
    throw ShapeError("example_pass: answer index out of range");
  Tape tape;
  TapedModel model = TapedModel::put_on_tape(tape, params);
  ForwardResult result = forward_pass(tape, model, input, mode, drop, rng);
  std::vector<Tensor> probs =
      candidate_probabilities(result, candidate_masks, mode);
  if (predicted) {
    std::vector<double> values;
    for (const Tensor& p : probs) values.push_back(p.scalar());
    *predicted = select_answer(values);
  }
  Tensor loss = cross_entropy_loss(probs[answer_index]);
  const double loss_value = loss.scalar();
  if (grads) {
    tape.backward(loss);
    model.accumulate_grads(*grads);
  }
  if (trace_out) *trace_out = std::move(result);
  return loss_value;
}

EvalResult evaluate(const ModelParams& params,
                    const std::vector<Example>& split,
                    const HaltingMode& mode, int batch_size) {
  if (split.empty()) throw ShapeError("evaluate: empty split");
  EvalResult out;
  int correct = 0;
  for (const Batch& batch : make_eval_batches(split, batch_size)) {
    for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
      int predicted = -1;
      Tape tape;
      TapedModel model = TapedModel::put_on_tape(tape, params);
      ForwardResult result =
          forward_pass(tape, model, batch.inputs[i], mode);
      std::vector<Tensor> probs =
          candidate_probabilities(result, batch.candidate_masks[i], mode);
      std::vector<double> values;
      for (const Tensor& p : probs) values.push_back(p.scalar());
      predicted = select_answer(values);
      if (predicted == batch.answers[i]) ++correct;
      out.records.push_back({batch.example_ids[i], predicted,
                             batch.answers[i], values[batch.answers[i]]});
    }
  }
  std::sort(out.records.begin(), out.records.end(),
            [](const EvalRecord& a, const EvalRecord& b) {
              return a.example_id < b.example_id;
            });
  out.accuracy = static_cast<double>(correct) / split.size();
  return out;
}

// ---- checkpoint serialization ----------------------------------------------

namespace {

constexpr char kMagic[8] = {'N', 'S', 'E', 'C', 'K', 'P', 'T', '\x01'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

void put_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void put_mat(std::ostream& out, const Mat& m) {
  put_u64(out, static_cast<std::uint64_t>(m.rows()));
  put_u64(out, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) put_f64(out, m(i, j));
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw CheckpointError("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw CheckpointError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& in) {
  std::uint64_t bits = get_u64(in);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

std::string get_string(std::istream& in) {
  std::uint32_t n = get_u32(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw CheckpointError("checkpoint truncated");
  return s;
}

Mat get_mat(std::istream& in) {
  const auto rows = static_cast<Eigen::Index>(get_u64(in));
  const auto cols = static_cast<Eigen::Index>(get_u64(in));
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = get_f64(in);
  return m;
}

void put_grad_map(std::ostream& out, const GradMap& m) {
  put_u32(out, static_cast<std::uint32_t>(m.size()));
  for (const auto& [name, mat] : m) {
    put_string(out, name);
    put_mat(out, mat);
  }
}

GradMap get_grad_map(std::istream& in) {
  GradMap m;
  const std::uint32_t n = get_u32(in);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = get_string(in);
    m.emplace(std::move(name), get_mat(in));
  }
  return m;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ostringstream out(std::ios::binary);
  out.write(kMagic, 8);
  put_u32(out, kVersion);

  const TrainConfig& c = ckpt.config;
  put_u64(out, static_cast<std::uint64_t>(c.k));
  put_u64(out, static_cast<std::uint64_t>(c.embed_dim));
  put_u32(out, static_cast<std::uint32_t>(c.steps));
  put_u32(out, c.mode == HaltingVariant::QueryGating ? 0 : 1);
  put_f64(out, c.lr);
  put_u32(out, static_cast<std::uint32_t>(c.batch_size));
  put_u32(out, static_cast<std::uint32_t>(c.pool_factor));
  put_f64(out, c.clip_threshold);
  put_f64(out, c.dropout);
  put_u32(out, static_cast<std::uint32_t>(c.patience));
  put_u32(out, static_cast<std::uint32_t>(c.max_epochs));
  put_u64(out, c.seed);

  put_u64(out, static_cast<std::uint64_t>(ckpt.params.config.vocab));
  GradMap params;
  const_cast<ModelParams&>(ckpt.params).for_each(
      [&params](const char* name, Mat& m) { params.emplace(name, m); });
  put_grad_map(out, params);

  put_grad_map(out, ckpt.optimizer.m);
  put_grad_map(out, ckpt.optimizer.v);
  put_u64(out, static_cast<std::uint64_t>(ckpt.optimizer.step));
  put_f64(out, ckpt.optimizer.beta1);
  put_f64(out, ckpt.optimizer.beta2);
  put_f64(out, ckpt.optimizer.eps);

  put_u32(out, static_cast<std::uint32_t>(ckpt.epoch));
  put_f64(out, ckpt.dev_accuracy);

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw CheckpointError("cannot write checkpoint: " + path);
  const std::string bytes = out.str();
  file.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw CheckpointError("not a checkpoint file (bad magic): " + path);
  const std::uint32_t version = get_u32(in);
  if (version != kVersion)
    throw CheckpointError("incompatible checkpoint version " +
                          std::to_string(version) + " (expected " +
                          std::to_string(kVersion) + "): " + path);

  Checkpoint ckpt;
  TrainConfig& c = ckpt.config;
  c.k = static_cast<Eigen::Index>(get_u64(in));
  c.embed_dim = static_cast<Eigen::Index>(get_u64(in));
  c.steps = static_cast<int>(get_u32(in));
  c.mode = get_u32(in) == 0 ? HaltingVariant::QueryGating
                            : HaltingVariant::AdaptiveComputation;
  c.lr = get_f64(in);
  c.batch_size = static_cast<int>(get_u32(in));
  c.pool_factor = static_cast<int>(get_u32(in));
  c.clip_threshold = get_f64(in);
  c.dropout = get_f64(in);
  c.patience = static_cast<int>(get_u32(in));
  c.max_epochs = static_cast<int>(get_u32(in));
  c.seed = get_u64(in);

  const auto vocab = static_cast<Eigen::Index>(get_u64(in));
  GradMap params = get_grad_map(in);
  Rng dummy(0);
  ckpt.params =
      ModelParams::init(dummy, ModelConfig{vocab, c.embed_dim, c.k});
  ckpt.params.for_each([&params, &path](const char* name, Mat& m) {
    auto it = params.find(name);
    if (it == params.end())
      throw CheckpointError(std::string("checkpoint missing parameter ") +
                            name + ": " + path);
    if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
      throw CheckpointError(std::string("checkpoint shape mismatch for ") +
                            name + ": " + path);
    m = it->second;
  });

  ckpt.optimizer.m = get_grad_map(in);
  ckpt.optimizer.v = get_grad_map(in);
  ckpt.optimizer.step = static_cast<long>(get_u64(in));
  ckpt.optimizer.beta1 = get_f64(in);
  ckpt.optimizer.beta2 = get_f64(in);
  ckpt.optimizer.eps = get_f64(in);

  ckpt.epoch = static_cast<int>(get_u32(in));
  ckpt.dev_accuracy = get_f64(in);
  return ckpt;
}

// ---- training loop ----------------------------------------------------------

Checkpoint train(const TrainConfig& config,
                 const std::vector<Example>& train_split,
                 const std::vector<Example>& dev_split,
                 std::ostream* log) {
  if (train_split.empty() || dev_split.empty())
    throw ShapeError("train: empty split");

  Eigen::Index vocab = 0;
  for (const Example& ex : train_split)
    for (int id : ex.document) vocab = std::max<Eigen::Index>(vocab, id + 1);
  for (const Example& ex : dev_split)
    for (int id : ex.document) vocab = std::max<Eigen::Index>(vocab, id + 1);
  for (const Example& ex : train_split)
    for (int id : ex.query) vocab = std::max<Eigen::Index>(vocab, id + 1);
  for (const Example& ex : dev_split)
    for (int id : ex.query) vocab = std::max<Eigen::Index>(vocab, id + 1);

  Rng init_rng(config.seed);
  ModelParams params = ModelParams::init(
      init_rng, ModelConfig{vocab, config.embed_dim, config.k});
  AdamState opt;
  Rng dropout_rng(config.seed ^ 0xD09E0B97F4A7C15ull);
  const HaltingMode mode = config.halting();
  const DropoutSpec drop{config.dropout, true};

  Checkpoint best;
  best.config = config;
  best.params = params;
  best.epoch = 0;
  best.dev_accuracy = -1.0;
  int bad_epochs = 0;
  long global_step = 0;

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::vector<Batch> batches = make_epoch_batches(
        train_split, config.batch_size,
        std::min<int>(config.pool_factor * config.batch_size,
                      static_cast<int>(train_split.size())),
        config.seed, epoch);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const Batch& batch = batches[b];
      GradMap grads;
      double batch_loss = 0.0;
      for (std::size_t i = 0; i < batch.inputs.size(); ++i)
        batch_loss += example_pass(params, batch.inputs[i],
                                   batch.candidate_masks[i], batch.answers[i],
                                   mode, drop, &dropout_rng, &grads);
      const double n = static_cast<double>(batch.inputs.size());
      batch_loss /= n;
      if (!std::isfinite(batch_loss))
        throw std::runtime_error("train: non-finite loss in epoch " +
                                 std::to_string(epoch) + ", batch " +
                                 std::to_string(b));
      for (auto& [name, g] : grads) g /= n;
      clip_global_norm(grads, config.clip_threshold);
      adam_step(params, grads, opt, config.lr);
      ++global_step;
      if (log)
        *log << "epoch=" << epoch << " step=" << global_step
             << " loss=" << batch_loss << '\n';
    }

    EvalResult dev = evaluate(params, dev_split, mode, config.batch_size);
    if (log)
      *log << "epoch=" << epoch << " dev_accuracy=" << dev.accuracy << '\n';

    if (dev.accuracy > best.dev_accuracy) {
      best.params = params;
      best.optimizer = opt;
      best.epoch = epoch;
      best.dev_accuracy = dev.accuracy;
      bad_epochs = 0;
    } else {
      ++bad_epochs;
      if (config.patience > 0 && bad_epochs >= config.patience) break;
    }
  }
  return best;
}

}  // namespace nse
