#include "clusterformer/grad_suite.hpp"

#include <random>

#include "clusterformer/cluster_ops.hpp"
#include "clusterformer/model.hpp"
#include "clusterformer/ops.hpp"

namespace clusterformer {

namespace {

struct Sampler {
  std::mt19937_64 rng;

  Tensor leaf(Shape shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor::from_data(std::move(shape), std::move(v), true);
  }

  LinearParams linear(std::size_t in, std::size_t out) { return {leaf({in, out}, -0.5, 0.5), leaf({out}, -0.5, 0.5)}; }

  RcaParams rca(std::size_t d, std::size_t heads) {
    RcaParams p;
    p.query = linear(d, d);
    p.key = linear(d, d);
    p.value = linear(d, d);
    p.init_ffn = {linear(d, 2 * d), linear(2 * d, d), Activation::kGelu};
    p.dispatch_mlp = {linear(d, 2 * d), linear(2 * d, d), Activation::kGelu};
    p.num_heads = heads;
    p.head_dim = d / heads;
    return p;
  }
};

using In = std::vector<Tensor>;

}  // namespace

std::vector<GradReport> op_grad_suite(double tol, std::uint64_t seed) {
  PrecisionScope precision(Precision::kDouble);
  Sampler s{std::mt19937_64(seed)};
  std::vector<GradReport> out;
  auto check = [&](const char* name, const TensorFn& fn, In inputs) {
    out.push_back(grad_check(name, fn, std::move(inputs), {}, tol));
  };

  check("matmul", [](const In& in) { return matmul(in[0], in[1]); }, {s.leaf({3, 4}), s.leaf({4, 5})});
  check("transpose", [](const In& in) { return transpose(in[0]); }, {s.leaf({3, 2})});
  check("add", [](const In& in) { return add(in[0], in[1]); }, {s.leaf({2, 3}), s.leaf({2, 3})});
  check("sub", [](const In& in) { return sub(in[0], in[1]); }, {s.leaf({2, 3}), s.leaf({2, 3})});
  check("mul", [](const In& in) { return mul(in[0], in[1]); }, {s.leaf({2, 3}), s.leaf({2, 3})});
  check("scale", [](const In& in) { return scale(in[0], -1.7); }, {s.leaf({4})});
  check("add_row_bias", [](const In& in) { return add_row_bias(in[0], in[1]); }, {s.leaf({3, 4}), s.leaf({4})});
  check("linear", [](const In& in) { return linear(in[0], in[1], in[2]); },
        {s.leaf({3, 4}), s.leaf({4, 2}), s.leaf({2})});
  check("sum", [](const In& in) { return sum(in[0]); }, {s.leaf({2, 2})});
  check("mean", [](const In& in) { return mean(in[0]); }, {s.leaf({2, 5})});
  for (std::size_t axis = 0; axis < 2; ++axis) {
    check("softmax_axis", [axis](const In& in) { return softmax_axis(in[0], axis); }, {s.leaf({3, 4}, -3, 3)});
  }
  check("gelu", [](const In& in) { return gelu(in[0]); }, {s.leaf({3, 4}, -3, 3)});
  check("layer_norm", [](const In& in) { return layer_norm(in[0], in[1], in[2], 1e-5); },
        {s.leaf({3, 5}), s.leaf({5}), s.leaf({5})});
  const std::vector<std::size_t> labels{2, 0, 1};
  check("cross_entropy", [labels](const In& in) { return cross_entropy(in[0], labels); }, {s.leaf({3, 4}, -2, 2)});
  check("row_normalize", [](const In& in) { return row_normalize(in[0], 1e-12); }, {s.leaf({3, 4})});
  check("adaptive_avg_pool", [](const In& in) { return adaptive_avg_pool(in[0], 2, 3); }, {s.leaf({3, 5, 2})});
  check("reshape", [](const In& in) { return reshape(in[0], {6, 2}); }, {s.leaf({3, 4})});
  check("slice_rows", [](const In& in) { return slice_rows(in[0], 1, 3); }, {s.leaf({4, 3})});
  check("slice_cols", [](const In& in) { return slice_cols(in[0], 1, 3); }, {s.leaf({2, 4})});
  check("concat_rows", [](const In& in) { return concat_rows({in[0], in[1]}); }, {s.leaf({2, 3}), s.leaf({1, 3})});
  check("concat_cols", [](const In& in) { return concat_cols({in[0], in[1]}); }, {s.leaf({2, 3}), s.leaf({2, 1})});
  check("mean_rows", [](const In& in) { return mean_rows(in[0]); }, {s.leaf({4, 3})});
  check("patchify", [](const In& in) { return patchify(in[0], 2); }, {s.leaf({4, 4, 2})});

  const RcaParams p = s.rca(4, 2);
  check("init_centers", [p](const In& in) { return init_centers(in[0], 3, p); }, {s.leaf({3, 3, 4})});
  check("e_step", [p](const In& in) { return e_step(in[0], in[1], p); }, {s.leaf({3, 4}), s.leaf({6, 4})});
  check("m_step", [p](const In& in) { return softmax_axis(m_step(softmax_axis(in[0], 0), in[1], p), 1); },
        {s.leaf({3, 6}), s.leaf({6, 4})});
  check("recurrent_cluster", [p](const In& in) { return recurrent_cluster(in[0], in[1], 3, p).centers; },
        {s.leaf({6, 4}), s.leaf({3, 4})});
  check("dispatch_features", [p](const In& in) { return dispatch_features(in[0], in[1], p); },
        {s.leaf({6, 4}), s.leaf({3, 4})});

  // Parameters of the clustering layer itself.
  const Tensor f = s.leaf({6, 4}), c = s.leaf({3, 4}), proj = s.leaf({6, 4});
  std::vector<std::pair<std::string, Tensor>> leaves{
      {"w_q", p.query.weight}, {"b_q", p.query.bias},  {"w_k", p.key.weight},
      {"w_v", p.value.weight}, {"b_v", p.value.bias},  {"dispatch.fc1", p.dispatch_mlp.fc1.weight},
      {"dispatch.fc2", p.dispatch_mlp.fc2.weight}};
  auto loss = [&] {
    const auto state = recurrent_cluster(f, c, 3, p);
    return add(sum(mul(dispatch_features(f, state.centers, p), proj)), sum(mul(state.assignment, state.assignment)));
  };
  out.push_back(grad_check_scalar("recurrent_cluster_params", loss, std::move(leaves), tol));
  return out;
}

GradReport model_grad_check(const ModelConfig& config, double tol, double fraction, std::uint64_t seed) {
  PrecisionScope precision(Precision::kDouble);
  const Model m = init_params(config, seed);
  Sampler s{std::mt19937_64(seed ^ 0x5bd1e995ull)};
  Tensor image = s.leaf({config.image_size, config.image_size, config.in_channels}, 0.0, 1.0).detach();
  const std::vector<std::size_t> label{seed % config.num_classes};
  auto loss = [&] { return cross_entropy(reshape(model_forward(image, m).logits, {1, config.num_classes}), label); };
  GradCheckOptions opts;
  opts.fraction = fraction;
  opts.seed = seed;
  return grad_check_scalar("model", loss, m.named, tol, opts);
}

}  // namespace clusterformer
