#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "dico/networks.hpp"

namespace dico::test_support {

/// Networks small enough for 8^3 crops.
inline ModelConfig tiny_models() {
  ModelConfig m;
  m.m1.kind = BackboneKind::conv;
  m.m1.base_channels = 4;
  m.m1.depth = 2;
  m.m2.kind = BackboneKind::transformer;
  m.m2.base_channels = 4;
  m.m2.depth = 2;
  m.m2.patch_size = 2;
  m.m2.embed_dim = 16;
  m.m2.num_heads = 2;
  m.discriminator.base_channels = 4;
  m.discriminator.layers = 2;
  return m;
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name)
      : path_(std::filesystem::temp_directory_path() /
              ("dico_" + name + "_" + std::to_string(::getpid()))) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline torch::Tensor random_mask(std::vector<int64_t> shape, double p, torch::Generator& gen) {
  return (torch::rand(shape, gen) < p).to(torch::kUInt8);
}

}  // namespace dico::test_support
