#pragma once

#include <string>
#include <vector>

#include "cdformer/binary_io.hpp"
#include "cdformer/episode.hpp"

namespace cdformer {

// Episode file:
//   manifest: "CDFE" | u32 version | spec | u32 split | u64 count |
//             count x { u64 index | str sha256-hex of the record }
//   records:  count x { u64 length | record bytes }
// A record holds index, split, grid, feature dim, C, class ids, prototype
// matrix, patch matrix, patch labels, G, boxes, labels. Little-endian.
inline constexpr std::uint32_t kEpisodeFormatVersion = 1;
inline constexpr std::string_view kEpisodeMagic = "CDFE";

struct EpisodeFile {
  BenchmarkSpec spec;
  Split split = Split::kBase;
  std::string manifest_digest;
  std::vector<std::string> digests;
  std::vector<Episode> episodes;
};

namespace detail {

inline void write_spec(ByteWriter& w, const BenchmarkSpec& s) {
  for (std::size_t v : {s.class_count, s.shots, s.sequence_capacity, s.grid_rows, s.grid_cols,
                        s.feature_dim, s.objects_min, s.objects_max, s.object_extent_max,
                        s.base_classes, s.novel_classes}) {
    w.u64(v);
  }
  for (double v : {s.bg_overlap, s.oo_overlap, s.patch_noise, s.shot_noise}) w.f64(v);
  w.u64(s.seed);
}

inline BenchmarkSpec read_spec(ByteReader& r) {
  BenchmarkSpec s;
  for (std::size_t* v : {&s.class_count, &s.shots, &s.sequence_capacity, &s.grid_rows,
                         &s.grid_cols, &s.feature_dim, &s.objects_min, &s.objects_max,
                         &s.object_extent_max, &s.base_classes, &s.novel_classes}) {
    *v = r.u64();
  }
  for (double* v : {&s.bg_overlap, &s.oo_overlap, &s.patch_noise, &s.shot_noise}) *v = r.f64();
  s.seed = r.u64();
  return s;
}

inline std::string encode_episode(const Episode& e) {
  ByteWriter w;
  w.u64(e.index);
  w.u32(static_cast<std::uint32_t>(e.split));
  w.u64(e.grid_rows);
  w.u64(e.grid_cols);
  w.u64(e.feature_dim);
  w.u64(e.class_ids.size());
  for (int c : e.class_ids) w.i64(c);
  for (double v : e.prototypes) w.f64(v);
  for (double v : e.patches) w.f64(v);
  for (int l : e.patch_labels) w.i64(l);
  w.u64(e.gt.size());
  for (const auto& b : e.gt.boxes)
    for (double v : b.as_array()) w.f64(v);
  for (int l : e.gt.labels) w.i64(l);
  return w.take();
}

inline Episode decode_episode(std::string_view bytes, const std::string& context) {
  ByteReader r(bytes, context);
  Episode e;
  e.index = r.u64();
  const auto split = r.u32();
  if (split > 1) r.fail("unknown split " + std::to_string(split));
  e.split = static_cast<Split>(split);
  e.grid_rows = r.u64();
  e.grid_cols = r.u64();
  e.feature_dim = r.u64();
  const auto c = r.u64();
  const std::size_t p = e.grid_rows * e.grid_cols;
  if (c > r.remaining() / 8 || e.feature_dim > r.remaining() / 8 || p > r.remaining() / 8) {
    r.fail("episode extents exceed record size");
  }
  for (std::uint64_t i = 0; i < c; ++i) e.class_ids.push_back(static_cast<int>(r.i64()));
  r.need(c * e.feature_dim * 8);
  e.prototypes.resize(c * e.feature_dim);
  for (double& v : e.prototypes) v = r.f64();
  r.need(p * e.feature_dim * 8);
  e.patches.resize(p * e.feature_dim);
  for (double& v : e.patches) v = r.f64();
  for (std::size_t i = 0; i < p; ++i) e.patch_labels.push_back(static_cast<int>(r.i64()));
  const auto g = r.u64();
  if (g > r.remaining() / 40) r.fail("box count exceeds record size");
  for (std::uint64_t i = 0; i < g; ++i) {
    Box b;
    b.cx = r.f64();
    b.cy = r.f64();
    b.w = r.f64();
    b.h = r.f64();
    e.gt.boxes.push_back(b);
  }
  for (std::uint64_t i = 0; i < g; ++i) e.gt.labels.push_back(static_cast<int>(r.i64()));
  if (r.remaining() != 0) r.fail("trailing bytes in episode record");
  return e;
}

}  // namespace detail

inline std::string encode_episode_file(const BenchmarkSpec& spec, Split split,
                                       const std::vector<Episode>& episodes,
                                       std::string* manifest_digest = nullptr) {
  std::vector<std::string> records;
  ByteWriter manifest;
  manifest.bytes(kEpisodeMagic);
  manifest.u32(kEpisodeFormatVersion);
  detail::write_spec(manifest, spec);
  manifest.u32(static_cast<std::uint32_t>(split));
  manifest.u64(episodes.size());
  for (const auto& e : episodes) {
    records.push_back(detail::encode_episode(e));
    manifest.u64(e.index);
    manifest.str(sha256_hex(records.back()));
  }
  if (manifest_digest) *manifest_digest = sha256_hex(manifest.data());
  ByteWriter out;
  out.bytes(manifest.data());
  for (const auto& rec : records) {
    out.u64(rec.size());
    out.bytes(rec);
  }
  return out.take();
}

// Generates episodes [0, count) of `split` and writes them to `path`.
// Returns the manifest digest.
inline std::string write_episodes(const BenchmarkSpec& spec, std::size_t count,
                                  const std::string& path, Split split = Split::kBase) {
  std::vector<Episode> episodes;
  episodes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) episodes.push_back(generate_episode(spec, i, split));
  std::string digest;
  write_file(path, encode_episode_file(spec, split, episodes, &digest));
  return digest;
}

inline EpisodeFile decode_episode_file(std::string_view data, const std::string& context) {
  ByteReader r(data, context);
  EpisodeFile f;
  if (r.bytes(kEpisodeMagic.size()) != kEpisodeMagic) r.fail("bad episode-file magic");
  const auto version = r.u32();
  if (version != kEpisodeFormatVersion) {
    r.fail("unsupported episode-file version " + std::to_string(version));
  }
  f.spec = detail::read_spec(r);
  const auto split = r.u32();
  if (split > 1) r.fail("unknown split " + std::to_string(split));
  f.split = static_cast<Split>(split);
  const auto count = r.u64();
  if (count > r.remaining() / 16) r.fail("episode count exceeds file size");
  std::vector<std::uint64_t> indices;
  for (std::uint64_t i = 0; i < count; ++i) {
    indices.push_back(r.u64());
    f.digests.push_back(r.str(128));
  }
  f.manifest_digest = sha256_hex(data.substr(0, r.position()));
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = r.u64();
    const std::string_view rec = r.bytes(len);
    if (sha256_hex(rec) != f.digests[i]) {
      throw CorruptionError(context + ": digest mismatch for episode " +
                            std::to_string(indices[i]));
    }
    f.episodes.push_back(
        detail::decode_episode(rec, context + " episode " + std::to_string(indices[i])));
    if (f.episodes.back().index != indices[i]) {
      throw CorruptionError(context + ": episode " + std::to_string(indices[i]) +
                            " carries index " + std::to_string(f.episodes.back().index));
    }
  }
  if (r.remaining() != 0) r.fail("trailing bytes after last episode");
  return f;
}

inline EpisodeFile read_episodes(const std::string& path) {
  return decode_episode_file(read_file(path), path);
}

}  // namespace cdformer
