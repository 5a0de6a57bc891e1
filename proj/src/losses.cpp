#include "mobe/losses.hpp"

#include <cmath>
#include <set>

#include "mobe/model.hpp"

namespace mobe::loss {
namespace {

Tensor eye(std::size_t n) {
  Tensor t(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

void require_rows(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != 2 || b.size() != 2 || a[0] != b[0]) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace

ad::Var router_loss(ad::Var logits, const Tensor& identity) {
  require_rows(logits.shape(), identity.shape(), "router_loss");
  if (logits.shape() != identity.shape()) {
    throw ShapeError("router_loss: shape mismatch " + shape_str(logits.shape()) + " vs " +
                     shape_str(identity.shape()));
  }
  ad::Tape& t = logits.tape();
  const double batch = static_cast<double>(identity.rows());
  ad::Var picked = ad::sum(ad::mul(t.constant(identity), ad::log_softmax(logits, 1)));
  return ad::scale(picked, -1.0 / batch);
}

ad::Var classification_loss(ad::Var logits, const Tensor& labels) {
  if (logits.shape() != labels.shape()) {
    throw ShapeError("classification_loss: shape mismatch " + shape_str(logits.shape()) + " vs " +
                     shape_str(labels.shape()));
  }
  for (double v : labels.data()) {
    if (v != 0.0 && v != 1.0) throw DomainError("classification labels must be 0 or 1");
  }
  ad::Tape& t = logits.tape();
  // BCE(z, y) = softplus(z) - y z
  return ad::mean(ad::sub(ad::softplus(logits), ad::mul(t.constant(labels), logits)));
}

ad::Var retrieval_loss(ad::Var hf, ad::Var y, double tau) {
  if (!(tau > 0.0)) throw DomainError("retrieval temperature must be positive");
  if (hf.shape() != y.shape() || hf.shape().size() != 2) {
    throw ShapeError("retrieval_loss: shape mismatch " + shape_str(hf.shape()) + " vs " +
                     shape_str(y.shape()));
  }
  ad::Tape& t = hf.tape();
  const std::size_t batch = hf.shape()[0];
  ad::Var logits = ad::matmul_nt(hf, y);
  if (tau != 1.0) logits = ad::scale(logits, 1.0 / tau);
  ad::Var diag = t.constant(eye(batch));
  ad::Var fmri_to_image = ad::sum(ad::mul(diag, ad::log_softmax(logits, 1)));
  ad::Var image_to_fmri = ad::sum(ad::mul(diag, ad::log_softmax(logits, 0)));
  return ad::scale(ad::add(fmri_to_image, image_to_fmri), -1.0);
}

ad::Var mse(ad::Var a, ad::Var b) {
  ad::Var d = ad::sub(a, b);
  return ad::mean(ad::mul(d, d));
}

ad::Var reconstruction_loss(ad::Var prior_out, ad::Var y, ad::Var hf, double tau) {
  return ad::add(mse(prior_out, y), retrieval_loss(hf, y, tau));
}

ad::Var matrix_cosine(ad::Var a, ad::Var b) {
  ad::Var dot = ad::sum(ad::mul(a, b));
  ad::Var na = ad::sqrt(ad::sum(ad::mul(a, a)));
  ad::Var nb = ad::sqrt(ad::sum(ad::mul(b, b)));
  return ad::div(dot, ad::mul(na, nb));
}

ad::Var sra_from_similarities(ad::Var sim_fy, ad::Var sim_fi, double eps) {
  ad::Var a = ad::clamp_min(sim_fy, eps);
  ad::Var b = ad::clamp_min(sim_fi, eps);
  return ad::sub(ad::log(ad::add(a, b)), ad::log(a));
}

ad::Var sra_loss(ad::Var f, ad::Var y, const Tensor& identity, double eps) {
  require_rows(f.shape(), y.shape(), "sra_loss");
  require_rows(f.shape(), identity.shape(), "sra_loss");
  const std::size_t batch = identity.rows();
  if (batch < 2) throw DomainError("sra_loss needs a batch of at least 2 samples");
  std::set<std::size_t> subjects;
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t c = 0; c < identity.cols(); ++c)
      if (identity(r, c) != 0.0) subjects.insert(c);
  if (subjects.size() < 2) {
    throw DomainError(
        "sra_loss: batch holds a single subject, so the identity relation is constant; "
        "draw batches with the stratified multi-subject sampler");
  }
  ad::Tape& t = f.tape();
  op_counters().gram_matrices += 3;
  ad::Var fn = ad::l2_normalize(f, 1);
  ad::Var yn = ad::l2_normalize(y, 1);
  ad::Var m_f = ad::matmul_nt(fn, fn);
  ad::Var m_y = ad::matmul_nt(yn, yn);
  ad::Var ident = t.constant(identity);
  ad::Var m_i = ad::matmul_nt(ident, ident);
  return sra_from_similarities(matrix_cosine(m_f, m_y), matrix_cosine(m_f, m_i), eps);
}

}  // namespace mobe::loss
