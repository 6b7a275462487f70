#pragma once

#include <string>

#include "cdformer/adam.hpp"
#include "cdformer/binary_io.hpp"
#include "cdformer/config.hpp"
#include "cdformer/model.hpp"
#include "cdformer/serialize.hpp"

namespace cdformer {

// Checkpoint file:
//   "CDFK" | u32 version | str config (JSON) | u64 step |
//   parameter container | u64 adam step | f64 lr, beta1, beta2, eps |
//   moment container ("m.<name>", "v.<name>") | str sha256-hex of all
//   preceding bytes
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "CDFK";

struct Checkpoint {
  RunConfig config;
  std::uint64_t step = 0;
  NamedTensors parameters;
  AdamState adam;
};

inline std::string encode_checkpoint(const RunConfig& config, std::uint64_t step,
                                     const ModelState& state, const AdamState& adam) {
  ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(to_json(config).dump());
  w.u64(step);
  const auto params = state.named();
  write_tensors(w, params);
  w.u64(adam.step_count);
  for (double v : {adam.learning_rate, adam.beta1, adam.beta2, adam.epsilon}) w.f64(v);
  NamedTensors moments;
  if (!adam.first_moment.empty()) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto& shape = params[k].second.shape();
      moments.emplace_back("m." + params[k].first, Tensor::from(shape, adam.first_moment[k]));
      moments.emplace_back("v." + params[k].first, Tensor::from(shape, adam.second_moment[k]));
    }
  }
  write_tensors(w, moments);
  const std::string digest = sha256_hex(w.data());
  w.str(digest);
  return w.take();
}

inline void save_checkpoint(const std::string& path, const RunConfig& config, std::uint64_t step,
                            const ModelState& state, const AdamState& adam) {
  write_file(path, encode_checkpoint(config, step, state, adam));
}

inline Checkpoint decode_checkpoint(std::string_view data, const std::string& context) {
  ByteReader r(data, context);
  if (r.bytes(kCheckpointMagic.size()) != kCheckpointMagic) r.fail("bad checkpoint magic");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    r.fail("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  const std::string config_text = r.str(1 << 20);
  ck.step = r.u64();
  ck.parameters = read_tensors(r);
  ck.adam.step_count = r.u64();
  ck.adam.learning_rate = r.f64();
  ck.adam.beta1 = r.f64();
  ck.adam.beta2 = r.f64();
  ck.adam.epsilon = r.f64();
  auto moments = read_tensors(r);
  const std::size_t body = r.position();
  const std::string digest = r.str(128);
  if (r.remaining() != 0) r.fail("trailing bytes after checkpoint digest");
  if (sha256_hex(data.substr(0, body)) != digest) {
    throw CorruptionError(context + ": checkpoint digest mismatch");
  }
  try {
    ck.config = RunConfig{};
    apply_json(ck.config, nlohmann::json::parse(config_text));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(context + ": embedded config unreadable: " + e.what());
  }
  if (!moments.empty()) {
    if (moments.size() != 2 * ck.parameters.size()) {
      throw CorruptionError(context + ": optimizer moments do not match parameters");
    }
    for (std::size_t k = 0; k < ck.parameters.size(); ++k) {
      ck.adam.first_moment.push_back(moments[2 * k].second.to_vector());
      ck.adam.second_moment.push_back(moments[2 * k + 1].second.to_vector());
    }
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file(path), path);
}

}  // namespace cdformer
