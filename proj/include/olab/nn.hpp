#pragma once

#include <random>
#include <string>

#include "olab/tensor.hpp"

namespace olab {

/// Affine map y = x W + b with W stored [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;
};

Tensor linear(const Tensor& x, const Linear& layer);

Tensor normal_parameter(Shape shape, double stddev, std::mt19937_64& rng);
Linear init_linear(std::size_t in, std::size_t out, double stddev, std::mt19937_64& rng);

/// Receives every named activation site during a forward pass and returns the
/// tensor that continues downstream (identity for observers that only record,
/// a fake-quantized copy for the quantized forward).
class ActivationObserver {
 public:
  virtual ~ActivationObserver() = default;
  virtual Tensor observe(const std::string& site, const Tensor& x) = 0;
};

/// Site-name prefix plus an optional observer; calling it with no observer is
/// the identity.
struct SiteTap {
  ActivationObserver* observer = nullptr;
  std::string prefix;

  Tensor operator()(const char* name, const Tensor& x) const {
    if (observer == nullptr) return x;
    return observer->observe(prefix + name, x);
  }
  SiteTap nested(const std::string& sub) const { return {observer, prefix + sub}; }
};

}  // namespace olab
