#include "mfil/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "mfil/ops.hpp"

namespace mfil::analysis {

template <typename T>
ErfMap erf(const Backbone<T>& model, const ErfOptions& o) {
  if (o.samples == 0) throw ConfigError("erf: samples must be at least 1");
  if (o.stage < 0 || o.stage > 3) throw ShapeError("erf: stage " + std::to_string(o.stage) + " out of range [0,3]");
  const std::size_t s = o.input_size, c = model.config.in_channels;
  Tensor<double> acc({s, s});
  Rng rng(o.seed);
  for (std::size_t k = 0; k < o.samples; ++k) {
    Tape<T> tape(true);
    Context<T> ctx(tape);
    Tensor<T> input = rng.normal_tensor<T>({1, c, s, s});
    if (o.mirror_inputs) {
      for (std::size_t r = 0; r < c * s; ++r) std::reverse(input.data().begin() + r * s, input.data().begin() + (r + 1) * s);
    }
    Var<T> x = tape.leaf(std::move(input), true);
    ForwardOptions fo;
    fo.stop_stage = o.stage;
    fo.skip_blocks = o.skip_blocks;
    Var<T> feat = forward(ctx, x, model, fo);
    const std::size_t ch = feat.dim(1), h = feat.dim(2), w = feat.dim(3);
    std::vector<std::size_t> idx;
    for (std::size_t q = 0; q < ch; ++q) idx.push_back((q * h + h / 2) * w + w / 2);
    Var<T> center = ops::gather(ops::reshape(feat, {ch * h * w}), 0, idx);
    tape.backward(ops::sum(center));
    const Tensor<T>& g = tape.grad(x.id());
    for (std::size_t q = 0; q < c; ++q)
      for (std::size_t p = 0; p < s * s; ++p) acc[p] += std::abs(static_cast<double>(g[q * s * s + p]));
  }
  double mx = 0.0;
  for (double v : acc.data()) mx = std::max(mx, v);
  if (mx > 0.0)
    for (double& v : acc.data()) v /= mx;
  return {std::move(acc), mx > 0.0};
}

double coverage(const ErfMap& map, double threshold) {
  double mx = 0.0;
  for (double v : map.grid.data()) mx = std::max(mx, v);
  if (mx == 0.0) return 0.0;
  std::size_t n = 0;
  for (double v : map.grid.data()) n += v > threshold * mx;
  return static_cast<double>(n) / static_cast<double>(map.grid.numel());
}

std::pair<std::size_t, std::size_t> support_box(const ErfMap& map) {
  const std::size_t h = map.grid.dim(0), w = map.grid.dim(1);
  std::size_t y0 = h, y1 = 0, x0 = w, x1 = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (map.grid[y * w + x] != 0.0) {
        y0 = std::min(y0, y), y1 = std::max(y1, y);
        x0 = std::min(x0, x), x1 = std::max(x1, x);
      }
  if (y0 == h) return {0, 0};
  return {y1 - y0 + 1, x1 - x0 + 1};
}

template <typename T>
Tensor<T> input_gradient(const Backbone<T>& model, const Tensor<T>& image, std::size_t class_index) {
  if (class_index >= model.config.num_classes) {
    throw ShapeError("saliency: class index " + std::to_string(class_index) + " out of range for " +
                     std::to_string(model.config.num_classes) + " classes");
  }
  if (image.rank() != 3) throw ShapeError("saliency: image must be [C,H,W], got " + shape_str(image.shape()));
  Tape<T> tape(true);
  Context<T> ctx(tape);
  Shape batched{1, image.dim(0), image.dim(1), image.dim(2)};
  Var<T> x = tape.leaf(image.reshape(batched), true);
  Var<T> logits = forward(ctx, x, model);
  tape.backward(ops::gather(ops::reshape(logits, {model.config.num_classes}), 0, {class_index}));
  return tape.grad(x.id()).reshape(image.shape());
}

template <typename T>
Tensor<T> saliency(const Backbone<T>& model, const Tensor<T>& image, std::size_t class_index) {
  const Tensor<T> g = input_gradient(model, image, class_index);
  const std::size_t c = image.dim(0), hw = image.dim(1) * image.dim(2);
  Tensor<T> out({image.dim(1), image.dim(2)});
  for (std::size_t q = 0; q < c; ++q)
    for (std::size_t p = 0; p < hw; ++p) out[p] += std::abs(g[q * hw + p]);
  return out;
}

std::vector<std::string> GradcheckReport::failing() const {
  std::vector<std::string> out;
  for (const auto& g : groups)
    if (!g.pass) out.push_back(g.name);
  return out;
}

GradcheckReport gradcheck_suite(const VariantConfig& config, std::uint64_t seed, const GradcheckOptions& o) {
  Backbone<double> model = Backbone<double>::build(config, seed);
  ParamList<double> params = model.parameters();
  Rng rng(mix_seed(seed, 0x67c4ULL));
  if (o.perturb > 0.0)
    for (Param<double>* p : params)
      for (double& v : p->value.data()) v += rng.normal(0.0, o.perturb);
  const Tensor<double> images = rng.normal_tensor<double>({o.batch, config.in_channels, o.image_size, o.image_size});
  std::vector<int> labels;
  for (std::size_t b = 0; b < o.batch; ++b) labels.push_back(static_cast<int>(rng.index(config.num_classes)));

  auto loss_value = [&]() {
    Tape<double> tape(false);
    Context<double> ctx(tape);
    Var<double> logits = forward(ctx, tape.constant(images), model);
    return ops::cross_entropy(logits, std::span<const int>(labels), 0.1).value()[0];
  };

  GradientMap<double> analytic;
  {
    Tape<double> tape(true);
    Context<double> ctx(tape);
    Var<double> logits = forward(ctx, tape.constant(images), model);
    tape.backward(ops::cross_entropy(logits, std::span<const int>(labels), 0.1));
    analytic = ctx.gradients(params);
  }

  GradcheckReport rep;
  rep.seed = seed;
  rep.tolerance = o.tolerance;
  std::set<std::string> names;
  bool unique = true;
  for (Param<double>* p : params) {
    unique &= names.insert(p->name).second;
    const Tensor<double>& a = analytic.at(p->name);
    GroupCheck g;
    g.name = p->name;
    g.numel = p->value.numel();
    std::size_t argmax = 0;
    double norm2 = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
      norm2 += a[i] * a[i];
      if (std::abs(a[i]) > std::abs(a[argmax])) argmax = i;
    }
    g.grad_norm = std::sqrt(norm2);
    std::vector<std::size_t> coords{argmax};
    for (std::size_t k = 0; k < o.coords_per_group && coords.size() < g.numel; ++k) {
      std::size_t c = rng.index(g.numel);
      while (std::find(coords.begin(), coords.end(), c) != coords.end()) c = (c + 1) % g.numel;
      coords.push_back(c);
    }
    double max_diff = 0.0, scale = 0.0;
    for (std::size_t c : coords) {
      double& w = p->value[c];
      const double orig = w;
      w = orig + o.step;
      const double up = loss_value();
      w = orig - o.step;
      const double down = loss_value();
      w = orig;
      const double fd = (up - down) / (2.0 * o.step);
      max_diff = std::max(max_diff, std::abs(fd - a[c]));
      scale = std::max(scale, std::abs(fd));
    }
    g.checked = coords.size();
    g.max_rel_error = max_diff / std::max(scale, 1e-10);
    g.pass = g.max_rel_error <= o.tolerance;
    rep.groups.push_back(std::move(g));
  }
  rep.coverage_ok = unique && rep.groups.size() == params.size() && names.size() == params.size();
  rep.pass = rep.coverage_ok && std::all_of(rep.groups.begin(), rep.groups.end(), [](const GroupCheck& g) { return g.pass; });
  return rep;
}

std::string format(const GradcheckReport& r) {
  std::ostringstream o;
  char buf[256];
  o << "seed: " << r.seed << "\n";
  o << "groups: " << r.groups.size() << "\n";
  o << "coverage: " << (r.coverage_ok ? "complete" : "incomplete") << "\n";
  double worst = 0.0;
  for (const auto& g : r.groups) {
    worst = std::max(worst, g.max_rel_error);
    std::snprintf(buf, sizeof buf, "group: %s numel=%zu checked=%zu max_rel_error=%.3e grad_norm=%.3e %s\n",
                  g.name.c_str(), g.numel, g.checked, g.max_rel_error, g.grad_norm, g.pass ? "ok" : "FAIL");
    o << buf;
  }
  std::snprintf(buf, sizeof buf, "worst_rel_error: %.3e\n", worst);
  o << buf;
  o << "result: " << (r.pass ? "pass" : "fail") << "\n";
  return o.str();
}

std::string matrix_text(const Tensor<double>& grid) {
  if (grid.rank() != 2) throw ShapeError("matrix_text: expected a rank-2 grid");
  std::ostringstream o;
  o.precision(9);
  const std::size_t h = grid.dim(0), w = grid.dim(1);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) o << (x ? " " : "") << grid[y * w + x];
    o << "\n";
  }
  return o.str();
}

std::vector<unsigned char> to_pgm(const Tensor<double>& grid) {
  if (grid.rank() != 2) throw ShapeError("to_pgm: expected a rank-2 grid");
  const std::size_t h = grid.dim(0), w = grid.dim(1);
  double mx = 0.0;
  for (double v : grid.data()) mx = std::max(mx, v);
  const std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  for (double v : grid.data()) {
    const double s = mx > 0.0 ? std::clamp(v / mx, 0.0, 1.0) : 0.0;
    out.push_back(static_cast<unsigned char>(std::lround(255.0 * s)));
  }
  return out;
}

template ErfMap erf(const Backbone<float>&, const ErfOptions&);
template ErfMap erf(const Backbone<double>&, const ErfOptions&);
template Tensor<float> saliency(const Backbone<float>&, const Tensor<float>&, std::size_t);
template Tensor<double> saliency(const Backbone<double>&, const Tensor<double>&, std::size_t);
template Tensor<float> input_gradient(const Backbone<float>&, const Tensor<float>&, std::size_t);
template Tensor<double> input_gradient(const Backbone<double>&, const Tensor<double>&, std::size_t);

}  // namespace mfil::analysis
