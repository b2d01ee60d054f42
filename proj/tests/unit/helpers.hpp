#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "mope/backbone.hpp"
#include "mope/tensor.hpp"

namespace mope::test {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, float scale = 1.0f) {
  std::normal_distribution<float> dist(0.0f, scale);
  std::vector<float> d(shape_numel(shape));
  for (auto& v : d) v = dist(rng);
  return Tensor(std::move(shape), std::move(d));
}

inline BackboneConfig tiny_config(int vocab = 12) {
  BackboneConfig c;
  c.vocab_size = vocab;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_context = 24;
  c.prefix_len = 4;
  return c;
}

// Central finite difference of f with respect to entry i of x.
inline double central_difference(const std::function<double(const std::vector<float>&)>& f, std::vector<float> x,
                                 std::size_t i, double h) {
  const float orig = x[i];
  x[i] = static_cast<float>(orig + h);
  const double up = f(x);
  x[i] = static_cast<float>(orig - h);
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

// Fresh directory removed on scope exit.
class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("mope_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline bool grad_close(double analytic, double numeric, double rel, double abs_floor) {
  const double diff = std::abs(analytic - numeric);
  return diff <= abs_floor || diff <= rel * std::max(std::abs(analytic), std::abs(numeric));
}

}  // namespace mope::test
