#pragma once

#include <unistd.h>

#include <filesystem>
#include <string>
#include <vector>

#include "blade/blade.hpp"

namespace blade::testing {

// Every word a single WordPiece, no padding.
inline IndexedInstance plain_instance(std::vector<std::int32_t> ids) {
  IndexedInstance inst;
  inst.mask.assign(ids.size(), 1);
  for (std::size_t i = 0; i < ids.size(); ++i) inst.alignment.push_back({i, i + 1});
  inst.ids = std::move(ids);
  return inst;
}

// D=2; ids 2,3,4 embed to [1,0], [0,1], [1,1]; two width-1 filters reading
// one coordinate each; W = identity; all biases zero.
inline BladeModel hand_model() {
  ModelShape shape{5, 2, 0, {1, 1}};
  BladeModel model(shape);
  auto& p = model.params();
  p.embeddings = {0, 0, 0, 0, 1, 0, 0, 1, 1, 1};
  p.filters = {1, 0, 0, 1};
  p.output_weights = {1, 0, 0, 1};
  return model;
}

inline IndexedInstance hand_input() { return plain_instance({2, 3, 4}); }

// Random model with random parameters everywhere, biases included.
inline BladeModel random_model(ModelShape shape, Rng& rng, double scale = 0.5) {
  BladeModel model(std::move(shape));
  model.params().for_each_block([&](ParamGroup, std::span<double> block) {
    for (auto& v : block) v = rng.uniform(-scale, scale);
  });
  const auto dw = model.word_dim();
  for (std::size_t i = 0; i < dw; ++i) model.params().embeddings[i] = 0.0;
  return model;
}

inline IndexedInstance random_instance(Rng& rng, std::size_t vocab, std::size_t words,
                                       std::size_t min_len, std::size_t max_frag = 1) {
  IndexedInstance inst;
  std::size_t pos = 0;
  for (std::size_t w = 0; w < words; ++w) {
    const std::size_t frags = 1 + rng.below(max_frag);
    const auto id = static_cast<std::int32_t>(1 + rng.below(vocab - 1));
    inst.alignment.push_back({pos, pos + frags});
    for (std::size_t f = 0; f < frags; ++f) {
      inst.ids.push_back(id);
      inst.mask.push_back(1);
    }
    pos += frags;
  }
  while (inst.ids.size() < min_len) {
    inst.ids.push_back(Vocabulary::kPad);
    inst.mask.push_back(0);
  }
  return inst;
}

class TempDir {
 public:
  explicit TempDir(const std::string& name)
      : path_(std::filesystem::temp_directory_path() /
              (name + "-" + std::to_string(::getpid()))) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  write_file_atomic(p, text);
}

inline std::string read_text(const std::filesystem::path& p) {
  const auto bytes = read_file_bytes(p);
  return {bytes.begin(), bytes.end()};
}

}  // namespace blade::testing
