#include "comatch/backbone.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "json.hpp"

#include "comatch/rng.hpp"
#include "comatch/tensor_io.hpp"

namespace comatch {

namespace {

constexpr int kStageWidths[3] = {64, 128, 256};

Tensor he_kernel(Rng& rng, int k, int cin, int cout) {
  Tensor t({k, k, cin, cout});
  double stddev = std::sqrt(2.0 / (static_cast<double>(k) * k * cin));
  for (int i = 0; i < t.size(); ++i)
    t.at(i) = static_cast<float>(rng.normal(0.0, stddev));
  return t;
}

ConvLayer make_conv(Rng& rng, int k, int cin, int cout, int stride) {
  return {he_kernel(rng, k, cin, cout), Tensor({cout}), stride};
}

Tensor apply_conv(const Tensor& x, const ConvLayer& layer) {
  Tensor y = conv2d(x, layer.kernel, layer.stride, Padding::kSame);
  const int c = y.dim(2);
  for (int i = 0; i < y.dim(0); ++i)
    for (int j = 0; j < y.dim(1); ++j)
      for (int ch = 0; ch < c; ++ch) y.at(i, j, ch) += layer.bias.at(ch);
  return y;
}

Tensor apply_block(const Tensor& x, const ResidualBlock& block) {
  Tensor y = relu(apply_conv(x, block.conv1));
  y = apply_conv(y, block.conv2);
  Tensor skip = block.has_proj ? apply_conv(x, block.proj) : x;
  return relu(add(y, skip));
}

}  // namespace

BackboneParams init_backbone(uint64_t seed) {
  BackboneParams p;
  uint64_t layer = 0;
  auto next_rng = [&]() { return Rng(mix_seed(seed, layer++)); };

  {
    Rng rng = next_rng();
    p.stem = make_conv(rng, 3, 1, 64, 1);
  }
  int cin = 64;
  for (int s = 0; s < 3; ++s) {
    int width = kStageWidths[s];
    for (int b = 0; b < 2; ++b) {
      ResidualBlock& block = p.stages[static_cast<size_t>(s)][static_cast<size_t>(b)];
      int stride = (b == 0) ? 2 : 1;
      int block_in = (b == 0) ? cin : width;
      {
        Rng rng = next_rng();
        block.conv1 = make_conv(rng, 3, block_in, width, stride);
      }
      {
        Rng rng = next_rng();
        block.conv2 = make_conv(rng, 3, width, width, 1);
      }
      block.has_proj = (b == 0);
      if (block.has_proj) {
        Rng rng = next_rng();
        block.proj = make_conv(rng, 1, block_in, width, stride);
      }
    }
    cin = width;
  }
  return p;
}

PyramidFeatures extract_features(const Tensor& image,
                                 const BackboneParams& params) {
  if (image.rank() != 3 || image.dim(2) != 1)
    throw std::invalid_argument("extract_features: image must be [H,W,1]");
  const int h = image.dim(0), w = image.dim(1);
  if (h % 8 != 0 || w % 8 != 0 || h < 8 || w < 8)
    throw std::invalid_argument(
        "extract_features: image dims " + std::to_string(h) + "x" +
        std::to_string(w) +
        " must be divisible by 8; pad or resize the input first");

  Tensor x = relu(apply_conv(image, params.stem));
  PyramidFeatures out;
  for (int s = 0; s < 3; ++s) {
    for (int b = 0; b < 2; ++b)
      x = apply_block(x, params.stages[static_cast<size_t>(s)][static_cast<size_t>(b)]);
    if (s == 0) out.f2 = x;
    if (s == 1) out.f4 = x;
    if (s == 2) out.f8 = x;
  }
  return out;
}

namespace {

struct NamedTensor {
  std::string name;
  const Tensor* tensor;
};

template <typename Fn>
void visit_params(const BackboneParams& p, Fn&& fn) {
  fn("stem_kernel", p.stem.kernel);
  fn("stem_bias", p.stem.bias);
  for (int s = 0; s < 3; ++s)
    for (int b = 0; b < 2; ++b) {
      const ResidualBlock& block =
          p.stages[static_cast<size_t>(s)][static_cast<size_t>(b)];
      std::string prefix = "stage" + std::to_string(s + 1) + "_block" +
                           std::to_string(b + 1) + "_";
      fn(prefix + "conv1_kernel", block.conv1.kernel);
      fn(prefix + "conv1_bias", block.conv1.bias);
      fn(prefix + "conv2_kernel", block.conv2.kernel);
      fn(prefix + "conv2_bias", block.conv2.bias);
      if (block.has_proj) {
        fn(prefix + "proj_kernel", block.proj.kernel);
        fn(prefix + "proj_bias", block.proj.bias);
      }
    }
}

}  // namespace

void save_backbone(const BackboneParams& params, const std::string& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "backbone-v1";
  nlohmann::json records = nlohmann::json::object();
  visit_params(params, [&](const std::string& name, const Tensor& t) {
    std::string file = name + ".tsr";
    write_tensor((std::filesystem::path(dir) / file).string(), t);
    records[name] = file;
  });
  manifest["records"] = records;
  std::ofstream out(std::filesystem::path(dir) / "manifest.json");
  if (!out) throw std::runtime_error(dir + ": cannot write manifest.json");
  out << manifest.dump(2) << "\n";
}

BackboneParams load_backbone(const std::string& dir) {
  std::ifstream in(std::filesystem::path(dir) / "manifest.json");
  if (!in) throw std::runtime_error(dir + ": cannot open manifest.json");
  nlohmann::json manifest;
  in >> manifest;
  if (manifest.value("format", "") != "backbone-v1")
    throw std::runtime_error(dir + ": unknown manifest format");
  const auto& records = manifest.at("records");
  auto load = [&](const std::string& name) {
    std::string file = records.at(name).get<std::string>();
    return read_tensor((std::filesystem::path(dir) / file).string());
  };

  BackboneParams p = init_backbone(0);  // shapes only; overwritten below
  p.stem.kernel = load("stem_kernel");
  p.stem.bias = load("stem_bias");
  for (int s = 0; s < 3; ++s)
    for (int b = 0; b < 2; ++b) {
      ResidualBlock& block =
          p.stages[static_cast<size_t>(s)][static_cast<size_t>(b)];
      std::string prefix = "stage" + std::to_string(s + 1) + "_block" +
                           std::to_string(b + 1) + "_";
      block.conv1.kernel = load(prefix + "conv1_kernel");
      block.conv1.bias = load(prefix + "conv1_bias");
      block.conv2.kernel = load(prefix + "conv2_kernel");
      block.conv2.bias = load(prefix + "conv2_bias");
      if (block.has_proj) {
        block.proj.kernel = load(prefix + "proj_kernel");
        block.proj.bias = load(prefix + "proj_bias");
      }
    }
  return p;
}

uint64_t tensor_checksum(const Tensor& t) {
  uint64_t hash = 14695981039346656037ull;
  for (int i = 0; i < t.size(); ++i) {
    float v = t.at(i);
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int b = 0; b < 4; ++b) {
      hash ^= (bits >> (8 * b)) & 0xff;
      hash *= 1099511628211ull;
    }
  }
  return hash;
}

}  // namespace comatch
