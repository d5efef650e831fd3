#include "olab/nn.hpp"

namespace olab {

Tensor linear(const Tensor& x, const Linear& layer) {
  return add(matmul(x, layer.weight), layer.bias);
}

Tensor normal_parameter(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel_of(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

Linear init_linear(std::size_t in, std::size_t out, double stddev,
                   std::mt19937_64& rng) {
  Linear l;
  l.weight = normal_parameter({in, out}, stddev, rng);
  l.bias = Tensor::parameter({out}, std::vector<double>(out, 0.0));
  return l;
}

}  // namespace olab
