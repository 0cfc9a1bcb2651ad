#pragma once

#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "coseg/conv.hpp"
#include "coseg/rng.hpp"
#include "coseg/tensor_io.hpp"

namespace coseg {

// Encoder-decoder segmentation network.
//
// Three stride-2 stages with additive skip connections back to full
// resolution; every conv is 3x3 with zero padding. Activated blocks follow
// the conv with per-sample feature standardization, a learned per-channel
// affine, and ReLU; the head conv emits raw logits. Input height and width
// must be divisible by 8.
//
// forward maps [N,in_channels,H,W] -> [N,num_classes,H,W].

struct ArchDescriptor {
  int in_channels = 3;
  int num_classes = 4;
  std::vector<int> widths = {16, 24, 40, 64};

  static constexpr const char* kFormat = "coseg-net-v1";

  nlohmann::json to_json() const {
    return {{"format", kFormat},
            {"in_channels", in_channels},
            {"num_classes", num_classes},
            {"widths", widths}};
  }

  static ArchDescriptor from_json(const nlohmann::json& j) {
    if (!j.contains("format") || j.at("format").get<std::string>() != kFormat)
      throw DataError("checkpoint: unknown network descriptor format");
    ArchDescriptor d;
    d.in_channels = j.at("in_channels").get<int>();
    d.num_classes = j.at("num_classes").get<int>();
    d.widths = j.at("widths").get<std::vector<int>>();
    if (d.in_channels < 1 || d.num_classes < 2 || d.widths.size() != 4)
      throw DataError("checkpoint: descriptor values out of range");
    return d;
  }
};

template <class T>
class SegNetworkT {
 public:
  struct ConvBlock {
    std::string name;
    // activated blocks carry w + scale/shift: the standardization makes a
    // conv bias a dead parameter, so only the head keeps b
    TensorT<T> w, b, scale, shift;
    int stride = 1;
    bool activated = true;  // standardize + affine + relu after the conv
  };

  SegNetworkT() = default;

  // Tensor handles are shared; an implicit copy would alias parameters
  // between two networks. Deep copies go through clone().
  SegNetworkT(const SegNetworkT&) = delete;
  SegNetworkT& operator=(const SegNetworkT&) = delete;
  SegNetworkT(SegNetworkT&&) = default;
  SegNetworkT& operator=(SegNetworkT&&) = default;

  SegNetworkT clone() const {
    SegNetworkT out;
    out.arch_ = arch_;
    out.blocks_.reserve(blocks_.size());
    for (const auto& blk : blocks_) {
      ConvBlock b;
      b.name = blk.name;
      b.w = blk.w.clone();
      if (blk.activated) {
        b.scale = blk.scale.clone();
        b.shift = blk.shift.clone();
      } else {
        b.b = blk.b.clone();
      }
      b.stride = blk.stride;
      b.activated = blk.activated;
      out.blocks_.push_back(std::move(b));
    }
    return out;
  }

  explicit SegNetworkT(const ArchDescriptor& arch, uint64_t init_seed = 0) : arch_(arch) {
    if (arch.widths.size() != 4) throw ConfigError("network: expected 4 stage widths");
    const int w0 = arch.widths[0], w1 = arch.widths[1], w2 = arch.widths[2], w3 = arch.widths[3];
    const int c = arch.num_classes;
    blocks_.clear();
    add_block("stem", arch.in_channels, w0, 1, true);
    add_block("down1", w0, w1, 2, true);
    add_block("body1", w1, w1, 1, true);
    add_block("down2", w1, w2, 2, true);
    add_block("body2", w2, w2, 1, true);
    add_block("down3", w2, w3, 2, true);
    add_block("body3", w3, w3, 1, true);
    add_block("proj2", w3, w2, 1, true);
    add_block("refine2", w2, w2, 1, true);
    add_block("proj1", w2, w1, 1, true);
    add_block("refine1", w1, w1, 1, true);
    add_block("proj0", w1, w0, 1, true);
    add_block("head", w0, c, 1, false);
    init_params(init_seed);
  }

  const ArchDescriptor& arch() const { return arch_; }

  // [N,in,H,W] -> [N,classes,H,W]; H and W must be divisible by 8
  TensorT<T> forward(const TensorT<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != arch_.in_channels)
      throw ShapeError("network: expected [N," + std::to_string(arch_.in_channels) + ",H,W] input");
    if (x.dim(2) % 8 != 0 || x.dim(3) % 8 != 0)
      throw ShapeError("network: input " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                       " not divisible by 8");
    auto e0 = run(0, x);                 // stem, full res
    auto e1 = run(2, run(1, e0));        // down1 + body1, H/2
    auto e2 = run(4, run(3, e1));        // down2 + body2, H/4
    auto e3 = run(6, run(5, e2));        // down3 + body3, H/8
    auto r2 = run(8, add(run(7, upsample_nearest2x(e3)), e2));
    auto r1 = run(10, add(run(9, upsample_nearest2x(r2)), e1));
    auto s0 = add(run(11, upsample_nearest2x(r1)), e0);
    return run(12, s0);  // head logits
  }

  std::vector<TensorT<T>*> params() {
    std::vector<TensorT<T>*> out;
    for (auto& blk : blocks_) {
      out.push_back(&blk.w);
      if (blk.activated) {
        out.push_back(&blk.scale);
        out.push_back(&blk.shift);
      } else {
        out.push_back(&blk.b);
      }
    }
    return out;
  }

  std::vector<std::pair<std::string, TensorT<T>*>> named_params() {
    std::vector<std::pair<std::string, TensorT<T>*>> out;
    for (auto& blk : blocks_) {
      out.emplace_back(blk.name + ".w", &blk.w);
      if (blk.activated) {
        out.emplace_back(blk.name + ".scale", &blk.scale);
        out.emplace_back(blk.name + ".shift", &blk.shift);
      } else {
        out.emplace_back(blk.name + ".b", &blk.b);
      }
    }
    return out;
  }

  size_t num_params() {
    size_t n = 0;
    for (auto* p : params()) n += p->numel();
    return n;
  }

  void set_requires_grad(bool rg) {
    for (auto* p : params()) p->set_requires_grad(rg);
  }

  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }

  // value copy; shapes must already match
  void copy_params_from(SegNetworkT& src) {
    auto a = params();
    auto b = src.params();
    if (a.size() != b.size()) throw ShapeError("network: parameter count mismatch in copy");
    for (size_t i = 0; i < a.size(); ++i) {
      if (a[i]->shape() != b[i]->shape()) throw ShapeError("network: parameter shape mismatch in copy");
      a[i]->values() = b[i]->values();
    }
  }

  void save_checkpoint(const std::string& path) {
    TensorArchive ar;
    for (auto& [name, p] : named_params()) ar.add(name, *p);
    ar.save(path);
    std::ofstream os(path + ".json");
    if (!os) throw DataError("checkpoint: cannot open for writing: " + path + ".json");
    os << arch_.to_json().dump(2) << "\n";
  }

  static SegNetworkT load_checkpoint(const std::string& path) {
    std::ifstream is(path + ".json");
    if (!is) throw DataError("checkpoint: missing descriptor: " + path + ".json");
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("checkpoint: bad descriptor json: ") + e.what());
    }
    SegNetworkT net(ArchDescriptor::from_json(j));
    TensorArchive ar = TensorArchive::load(path);
    for (auto& [name, p] : net.named_params()) {
      const AnyTensor& t = ar.at(name);
      if (t.shape != p->shape()) throw DataError("checkpoint: shape mismatch for '" + name + "'");
      *p = t.as_tensor<T>();
    }
    return net;
  }

 private:
  void add_block(std::string name, int cin, int cout, int stride, bool activated) {
    ConvBlock blk;
    blk.name = std::move(name);
    blk.w = TensorT<T>({cout, cin, 3, 3});
    blk.stride = stride;
    blk.activated = activated;
    if (activated) {
      blk.scale = TensorT<T>({cout}, T(1));
      blk.shift = TensorT<T>({cout});
    } else {
      blk.b = TensorT<T>({cout});
    }
    blocks_.push_back(std::move(blk));
  }

  void init_params(uint64_t seed) {
    Rng rng(seed, /*stream=*/0x5e97e7u);
    for (auto& blk : blocks_) {
      const double fan_in = static_cast<double>(blk.w.dim(1)) * 9;
      const double std = std::sqrt(2.0 / fan_in);
      for (auto& v : blk.w.values()) v = static_cast<T>(rng.normal(0.0, std));
    }
  }

  TensorT<T> run(size_t i, const TensorT<T>& x) const {
    const ConvBlock& blk = blocks_[i];
    if (!blk.activated) return conv2d(x, blk.w, blk.b, blk.stride, /*pad=*/1);
    TensorT<T> zero_bias({blk.w.dim(0)});
    auto y = conv2d(x, blk.w, zero_bias, blk.stride, /*pad=*/1);
    return relu(channel_affine(sample_norm(y), blk.scale, blk.shift));
  }

  ArchDescriptor arch_;
  std::vector<ConvBlock> blocks_;  // mutable params; forward is logically const
};

using SegNetwork = SegNetworkT<double>;
using SegNetworkF = SegNetworkT<float>;

}  // namespace coseg
