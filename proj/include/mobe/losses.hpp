#pragma once

#include "mobe/autodiff.hpp"
#include "mobe/tensor.hpp"

namespace mobe::loss {

inline constexpr double kSraEpsilon = 1e-6;

/// Mean cross-entropy of softmax(logits) against one-hot subject identities.
ad::Var router_loss(ad::Var logits, const Tensor& identity);

/// Mean over batch and labels of sigmoid binary cross-entropy.
ad::Var classification_loss(ad::Var logits, const Tensor& labels);

/// Bidirectional InfoNCE over in-batch logits hf . y^T / tau, summed over the
/// batch in both directions. Rows of hf and y are expected to be unit norm.
ad::Var retrieval_loss(ad::Var hf, ad::Var y, double tau = 1.0);

/// Mean squared error over all entries.
ad::Var mse(ad::Var a, ad::Var b);

/// Prior MSE against the image embeddings plus the retrieval loss.
ad::Var reconstruction_loss(ad::Var prior_out, ad::Var y, ad::Var hf, double tau = 1.0);

/// Cosine similarity of two flattened matrices.
ad::Var matrix_cosine(ad::Var a, ad::Var b);

/// -log(a / (a + b)) with both similarities clamped below at eps.
ad::Var sra_from_similarities(ad::Var sim_fy, ad::Var sim_fi, double eps = kSraEpsilon);

/// Semantic relation alignment over batch Gram matrices of the row-normalized
/// representations, image embeddings, and identities. Requires two or more
/// subjects in the batch.
ad::Var sra_loss(ad::Var f, ad::Var y, const Tensor& identity, double eps = kSraEpsilon);

}  // namespace mobe::loss
