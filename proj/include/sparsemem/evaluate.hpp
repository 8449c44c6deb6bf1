#pragma once

#include <span>
#include <vector>

#include "sparsemem/data.hpp"
#include "sparsemem/model.hpp"

namespace smem {

// All evaluation is read-only over the model and must run outside any
// active gradient tape. Sets are processed in fixed-size chunks; results
// are pooled means over positions, so chunking never changes the value.

// Mean next-token cross entropy over every non-pad target position.
double eval_lm_loss(const Model& model, std::span<const std::vector<int>> sequences,
                    Index batch_size = 32);

// Mean cross entropy over answer target positions only.
double eval_qa_loss(const Model& model, std::span<const FactRecord> facts,
                    Index batch_size = 32);

// Greedy argmax decode of each fact's answer span, ties broken toward the
// lower token id; fraction of exact object matches.
double fact_accuracy(const Model& model, std::span<const FactRecord> facts,
                     Index batch_size = 32);

// Bag-of-tokens F1 between a predicted and a gold answer span.
double token_f1(std::span<const int> predicted, std::span<const int> gold);

// Mean token F1 of the greedy decodes; coincides with fact_accuracy when
// every object is a single token.
double fact_token_f1(const Model& model, std::span<const FactRecord> facts,
                     Index batch_size = 32);

}  // namespace smem
