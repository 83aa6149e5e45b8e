#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "sisda/tensor.hpp"

namespace sisda {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // global L2 norm; 0 disables
};

// Adam over a name -> tensor map. Moments are created lazily per name.
class Adam {
 public:
  explicit Adam(AdamConfig config = {});

  // Parameters absent from `grads` are left untouched.
  void step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads);
  std::size_t steps() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return config_; }

  // Binary snapshot of step count and moments; `extra` is an opaque counter
  // stored alongside (the trainer keeps its epoch count there).
  void save(const std::filesystem::path& path, std::uint64_t extra = 0) const;
  static Adam load(const std::filesystem::path& path, std::uint64_t* extra = nullptr);

 private:
  AdamConfig config_;
  std::size_t t_ = 0;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
};

double global_norm(const std::map<std::string, Tensor>& grads);

}  // namespace sisda
