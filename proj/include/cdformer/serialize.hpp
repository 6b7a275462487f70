#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cdformer/binary_io.hpp"
#include "cdformer/tensor.hpp"

namespace cdformer {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Named-tensor container:
//   "CDFT" | u32 version | u64 count |
//   count x { str name | u32 rank | u64 extents[rank] | f64 values[] }
// All integers and reals little-endian.
inline constexpr std::uint32_t kTensorContainerVersion = 1;
inline constexpr std::string_view kTensorContainerMagic = "CDFT";

inline void write_tensors(ByteWriter& w, const NamedTensors& tensors) {
  w.bytes(kTensorContainerMagic);
  w.u32(kTensorContainerVersion);
  w.u64(tensors.size());
  for (const auto& [name, t] : tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) w.u64(e);
    for (double v : t.values()) w.f64(v);
  }
}

inline NamedTensors read_tensors(ByteReader& r) {
  if (r.bytes(kTensorContainerMagic.size()) != kTensorContainerMagic) r.fail("bad tensor magic");
  const auto version = r.u32();
  if (version != kTensorContainerVersion) {
    r.fail("unsupported tensor container version " + std::to_string(version));
  }
  const auto count = r.u64();
  NamedTensors out;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str(4096);
    const auto rank = r.u32();
    if (rank > 8) r.fail("tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& e : shape) {
      e = r.u64();
      if (e != 0 && n > r.remaining() / e) r.fail("tensor '" + name + "' extents exceed file");
      n *= e;
    }
    r.need(n * 8);
    std::vector<double> values(n);
    for (auto& v : values) v = r.f64();
    out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  return out;
}

inline std::string encode_tensors(const NamedTensors& tensors) {
  ByteWriter w;
  write_tensors(w, tensors);
  return w.take();
}

inline NamedTensors decode_tensors(std::string_view data, const std::string& context) {
  ByteReader r(data, context);
  auto out = read_tensors(r);
  if (r.remaining() != 0) r.fail("trailing bytes after tensor container");
  return out;
}

}  // namespace cdformer
