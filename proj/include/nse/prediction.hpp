#pragma once

#include <vector>

#include "nse/model.hpp"
#include "nse/tensor.hpp"

namespace nse {

// v^T softmax(l_d), padding masked. `candidate_mask` marks every document
// occurrence of one candidate token. An all-zero mask yields probability 0
// (candidate absent from the document; a data anomaly, not an error).
Tensor pointer_sum(Tensor l_d, const Vec& candidate_mask,
                   const Vec* pad_mask = nullptr);

// Same, over an attention vector that is already a softmax output.
Tensor pointer_sum_attention(Tensor attention, const Vec& candidate_mask);

// P(a) = sum_t p_t * P_t(a).
Tensor mixture_prediction(const std::vector<Tensor>& per_step_probs,
                          const std::vector<Tensor>& halting);

// Argmax over candidate probabilities; ties break to the lowest index.
int select_answer(const std::vector<double>& candidate_probs);

// -log(P + 1e-12); the floor keeps gradients finite at P = 0.
Tensor cross_entropy_loss(Tensor p_true);

// Per-candidate answer probabilities for one completed forward pass.
// Gating mode uses the last step's attention; adaptive mode mixes all
// steps with the halting distribution.
std::vector<Tensor> candidate_probabilities(
    const ForwardResult& result, const std::vector<Vec>& candidate_masks,
    const HaltingMode& mode);

}  // namespace nse
