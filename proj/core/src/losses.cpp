#include "tcaf/losses.hpp"

#include "tcaf/errors.hpp"
#include "tcaf/ops.hpp"

namespace tcaf {

LossConfig LossConfig::parse(std::string_view name) {
  if (name == "reg") return {false, false};
  if (name == "reg+ce") return {true, false};
  if (name == "full") return {true, true};
  throw ConfigError("unknown loss configuration '" + std::string(name) + "' (expected reg, reg+ce or full)");
}

std::string LossConfig::name() const {
  if (enable_ce && enable_rec) return "full";
  if (enable_ce) return "reg+ce";
  if (!enable_rec) return "reg";
  return "reg+rec";
}

template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& theta_o, const Tensor<T>& theta_w_seen,
                             std::span<const std::size_t> gt_index) {
  if (theta_o.rank() != 2 || theta_w_seen.rank() != 2 || theta_o.dim(1) != theta_w_seen.dim(1)) {
    throw DimensionError("cross_entropy_loss: " + shape_str(theta_o.shape()) + " vs " + shape_str(theta_w_seen.shape()));
  }
  return cross_entropy(matmul(theta_o, transpose(theta_w_seen)), gt_index);
}

template <typename T>
Tensor<T> regression_loss(const Tensor<T>& theta_o, const Tensor<T>& theta_w_gt) {
  return mse(theta_o, theta_w_gt);
}

template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& rho_o, const Tensor<T>& rho_w, const Tensor<T>& w) {
  return add(mse(rho_o, w), mse(rho_w, w));
}

template <typename T>
LossBreakdown<T> total_loss(TcafModel<T>& model, std::span<const ClipView> clips, std::span<const std::size_t> gt_index,
                            const Tensor<T>& seen_embeddings, const LossConfig& config, Mode mode, RngStream& rng) {
  if (gt_index.size() != clips.size()) {
    throw DimensionError("total_loss: " + std::to_string(gt_index.size()) + " labels for " +
                         std::to_string(clips.size()) + " clips");
  }
  for (std::size_t g : gt_index) {
    if (g >= seen_embeddings.dim(0)) {
      throw DataError("total_loss: label index " + std::to_string(g) + " outside " +
                      std::to_string(seen_embeddings.dim(0)) + " seen classes");
    }
  }
  const Tensor<T> theta_o = model.encode(clips, mode, rng);
  const Tensor<T> theta_w = model.project_word(seen_embeddings, mode, rng);
  const Tensor<T> theta_w_gt = gather_rows(theta_w, gt_index);

  LossBreakdown<T> out;
  const Tensor<T> reg = regression_loss(theta_o, theta_w_gt);
  out.l_reg = static_cast<double>(reg.item());
  out.total = reg;
  if (config.enable_ce) {
    const Tensor<T> ce = cross_entropy_loss(theta_o, theta_w, gt_index);
    out.l_ce = static_cast<double>(ce.item());
    out.total = add(out.total, ce);
  }
  if (config.enable_rec) {
    const Tensor<T> rho_o = model.decode(theta_o, Decoder::output, mode, rng);
    const Tensor<T> rho_w = model.decode(theta_w_gt, Decoder::word, mode, rng);
    const Tensor<T> rec = reconstruction_loss(rho_o, rho_w, gather_rows(seen_embeddings, gt_index));
    out.l_rec = static_cast<double>(rec.item());
    out.total = add(out.total, rec);
  }
  out.total_value = static_cast<double>(out.total.item());
  return out;
}

#define TCAF_INSTANTIATE_LOSSES(T)                                                                              \
  template Tensor<T> cross_entropy_loss(const Tensor<T>&, const Tensor<T>&, std::span<const std::size_t>);     \
  template Tensor<T> regression_loss(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> reconstruction_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template LossBreakdown<T> total_loss(TcafModel<T>&, std::span<const ClipView>, std::span<const std::size_t>, \
                                       const Tensor<T>&, const LossConfig&, Mode, RngStream&);

TCAF_INSTANTIATE_LOSSES(float)
TCAF_INSTANTIATE_LOSSES(double)

}  // namespace tcaf
