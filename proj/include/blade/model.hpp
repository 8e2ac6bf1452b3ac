#pragma once

// Parameters of the convolutional classifier and its "BLMD" checkpoint format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "blade/common.hpp"

namespace blade {

inline constexpr std::size_t kClasses = 2;

enum class ParamGroup { kEmbeddings, kFilters, kOutput };

// All trainable tensors, flattened. Gradients and optimizer state reuse the
// same layout.
struct Parameters {
  std::vector<double> embeddings;      // V x D_w, row-major
  std::vector<double> filters;         // per filter m: D x K_m, index d * K_m + k
  std::vector<double> filter_bias;     // M
  std::vector<double> output_weights;  // C x M, row-major
  std::vector<double> output_bias;     // C

  // Visits the blocks in checkpoint order.
  template <typename F>
  void for_each_block(F&& f) {
    f(ParamGroup::kEmbeddings, std::span<double>(embeddings));
    f(ParamGroup::kFilters, std::span<double>(filters));
    f(ParamGroup::kFilters, std::span<double>(filter_bias));
    f(ParamGroup::kOutput, std::span<double>(output_weights));
    f(ParamGroup::kOutput, std::span<double>(output_bias));
  }

  template <typename F>
  void for_each_block(F&& f) const {
    f(ParamGroup::kEmbeddings, std::span<const double>(embeddings));
    f(ParamGroup::kFilters, std::span<const double>(filters));
    f(ParamGroup::kFilters, std::span<const double>(filter_bias));
    f(ParamGroup::kOutput, std::span<const double>(output_weights));
    f(ParamGroup::kOutput, std::span<const double>(output_bias));
  }

  Parameters zeros_like() const {
    Parameters z;
    z.embeddings.assign(embeddings.size(), 0.0);
    z.filters.assign(filters.size(), 0.0);
    z.filter_bias.assign(filter_bias.size(), 0.0);
    z.output_weights.assign(output_weights.size(), 0.0);
    z.output_bias.assign(output_bias.size(), 0.0);
    return z;
  }

  std::size_t total_size() const {
    return embeddings.size() + filters.size() + filter_bias.size() + output_weights.size() +
           output_bias.size();
  }

  bool operator==(const Parameters&) const = default;
};

struct ModelShape {
  std::uint32_t vocab_size = 2;
  std::uint32_t word_dim = 0;
  std::uint32_t external_dim = 0;
  std::vector<std::uint32_t> widths;  // one entry per filter
};

// Expands e.g. widths {3,4,5} x 100 maps into the per-filter width list.
inline std::vector<std::uint32_t> expand_widths(std::span<const std::uint32_t> widths,
                                                std::uint32_t maps_per_width) {
  std::vector<std::uint32_t> out;
  for (auto k : widths) out.insert(out.end(), maps_per_width, k);
  return out;
}

class BladeModel {
 public:
  BladeModel() = default;

  explicit BladeModel(ModelShape shape) : shape_(std::move(shape)) {
    if (shape_.word_dim + shape_.external_dim == 0) throw UsageError("input dimension must be > 0");
    if (shape_.widths.empty()) throw UsageError("model needs at least one filter");
    if (shape_.vocab_size < 2) throw UsageError("vocabulary size must be at least 2");
    std::size_t offset = 0;
    for (auto k : shape_.widths) {
      if (k < 1) throw UsageError("filter widths must be >= 1");
      offsets_.push_back(offset);
      offset += static_cast<std::size_t>(dim()) * k;
    }
    params_.embeddings.assign(std::size_t{shape_.vocab_size} * shape_.word_dim, 0.0);
    params_.filters.assign(offset, 0.0);
    params_.filter_bias.assign(filters(), 0.0);
    params_.output_weights.assign(kClasses * filters(), 0.0);
    params_.output_bias.assign(kClasses, 0.0);
  }

  const ModelShape& shape() const { return shape_; }
  std::size_t vocab_size() const { return shape_.vocab_size; }
  std::size_t word_dim() const { return shape_.word_dim; }
  std::size_t external_dim() const { return shape_.external_dim; }
  std::size_t dim() const { return std::size_t{shape_.word_dim} + shape_.external_dim; }
  std::size_t filters() const { return shape_.widths.size(); }
  std::size_t width(std::size_t m) const { return shape_.widths[m]; }
  std::size_t max_width() const { return *std::ranges::max_element(shape_.widths); }
  bool all_unit_width() const {
    return std::ranges::all_of(shape_.widths, [](auto k) { return k == 1; });
  }
  std::size_t filter_offset(std::size_t m) const { return offsets_[m]; }

  std::span<const double> filter(std::size_t m) const {
    return std::span(params_.filters).subspan(offsets_[m], dim() * width(m));
  }
  std::span<double> filter(std::size_t m) {
    return std::span(params_.filters).subspan(offsets_[m], dim() * width(m));
  }

  double out_weight(std::size_t c, std::size_t m) const {
    return params_.output_weights[c * filters() + m];
  }

  Parameters& params() { return params_; }
  const Parameters& params() const { return params_; }

  bool operator==(const BladeModel& o) const {
    return shape_.vocab_size == o.shape_.vocab_size && shape_.word_dim == o.shape_.word_dim &&
           shape_.external_dim == o.shape_.external_dim && shape_.widths == o.shape_.widths &&
           params_ == o.params_;
  }

 private:
  ModelShape shape_;
  std::vector<std::size_t> offsets_;
  Parameters params_;
};

// Uniform initialization in the Kim-style CNN tradition: word vectors in
// [-0.25, 0.25], Glorot-uniform filters and output layer, zero biases. The
// padding row stays zero.
inline BladeModel init_model(ModelShape shape, std::uint64_t seed) {
  BladeModel model(std::move(shape));
  Rng rng(seed);
  auto& p = model.params();
  for (std::size_t i = model.word_dim(); i < p.embeddings.size(); ++i) {
    p.embeddings[i] = rng.uniform(-0.25, 0.25);
  }
  for (std::size_t m = 0; m < model.filters(); ++m) {
    const double fan = static_cast<double>(model.dim() * model.width(m));
    const double a = std::sqrt(6.0 / (fan + 1.0));
    for (auto& w : model.filter(m)) w = rng.uniform(-a, a);
  }
  const double a = std::sqrt(6.0 / static_cast<double>(model.filters() + kClasses));
  for (auto& w : p.output_weights) w = rng.uniform(-a, a);
  return model;
}

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const BladeModel& model) {
  ByteWriter w;
  w.put_magic("BLMD");
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.vocab_size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.word_dim()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.external_dim()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.filters()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(kClasses));
  for (auto k : model.shape().widths) w.put<std::uint32_t>(k);
  model.params().for_each_block([&](ParamGroup, std::span<const double> block) {
    for (double v : block) w.put<double>(v);
  });
  return w.release();
}

inline BladeModel decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "checkpoint");
  r.expect_magic("BLMD");
  if (auto v = r.get<std::uint32_t>(); v != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(v));
  }
  ModelShape shape;
  shape.vocab_size = r.get<std::uint32_t>();
  shape.word_dim = r.get<std::uint32_t>();
  shape.external_dim = r.get<std::uint32_t>();
  const auto filters = r.get<std::uint32_t>();
  const auto classes = r.get<std::uint32_t>();
  if (classes != kClasses) throw DataError("only binary checkpoints are supported");
  if (std::uint64_t{filters} * 4 > r.remaining()) throw DataError("checkpoint truncated");
  for (std::uint32_t m = 0; m < filters; ++m) shape.widths.push_back(r.get<std::uint32_t>());
  BladeModel model;
  try {
    model = BladeModel(std::move(shape));
  } catch (const UsageError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
  if (r.remaining() != model.params().total_size() * sizeof(double)) {
    throw DataError("checkpoint payload size does not match its header");
  }
  model.params().for_each_block([&](ParamGroup, std::span<double> block) {
    for (double& v : block) v = r.get<double>();
  });
  return model;
}

inline void save_checkpoint(const std::filesystem::path& path, const BladeModel& model) {
  write_file_atomic(path, encode_checkpoint(model));
}

inline BladeModel load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

// SHA-256 of the checkpoint bytes; guards model/database pairing.
inline Digest fingerprint(const BladeModel& model) { return sha256(encode_checkpoint(model)); }

}  // namespace blade
