#include "nse/prediction.hpp"

namespace nse {

Tensor pointer_sum_attention(Tensor attention, const Vec& candidate_mask) {
  if (attention.cols() != 1 || attention.rows() != candidate_mask.size())
    throw ShapeError("pointer_sum: mask length mismatch");
  return dot(attention.tape->leaf(candidate_mask), attention);
}

Tensor pointer_sum(Tensor l_d, const Vec& candidate_mask,
                   const Vec* pad_mask) {
  return pointer_sum_attention(softmax(l_d, pad_mask), candidate_mask);
}

Tensor mixture_prediction(const std::vector<Tensor>& per_step_probs,
                          const std::vector<Tensor>& halting) {
  if (per_step_probs.empty() || per_step_probs.size() != halting.size())
    throw ShapeError("mixture_prediction: length mismatch");
  Tensor acc = mul(halting[0], per_step_probs[0]);
  for (std::size_t t = 1; t < halting.size(); ++t)
    acc = add(acc, mul(halting[t], per_step_probs[t]));
  return acc;
}

int select_answer(const std::vector<double>& candidate_probs) {
  if (candidate_probs.empty())
    throw ShapeError("select_answer: empty candidate set");
  int best = 0;
  for (int i = 1; i < static_cast<int>(candidate_probs.size()); ++i)
    if (candidate_probs[i] > candidate_probs[best]) best = i;
  return best;
}

Tensor cross_entropy_loss(Tensor p_true) {
  return scale(log_t(add_const(p_true, 1e-12)), -1.0);
}

std::vector<Tensor> candidate_probabilities(
    const ForwardResult& result, const std::vector<Vec>& candidate_masks,
    const HaltingMode& mode) {
  if (candidate_masks.empty())
    throw ShapeError("candidate_probabilities: empty candidate set");
  std::vector<Tensor> probs;
  probs.reserve(candidate_masks.size());
  if (mode.variant == HaltingVariant::QueryGating) {
    Tensor last = result.doc_attention.back();
    for (const Vec& mask : candidate_masks)
      probs.push_back(pointer_sum_attention(last, mask));
  } else {
    for (const Vec& mask : candidate_masks) {
      std::vector<Tensor> per_step;
      per_step.reserve(result.doc_attention.size());
      for (const Tensor& att : result.doc_attention)
        per_step.push_back(pointer_sum_attention(att, mask));
      probs.push_back(mixture_prediction(per_step, result.halting));
    }
  }
  return probs;
}

}  // namespace nse
