// SPDX-License-Identifier: Apache-2.0
#include "fpt/cache.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <fstream>
#include <sstream>
#include <thread>

#include "fpt/errors.hpp"
#include "fpt/hash.hpp"
#include "fpt/tensor_archive.hpp"

namespace fpt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kMagic = "FPTC";

std::uint32_t load_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  }
  return v;
}

float load_f32(const char* p) { return std::bit_cast<float>(load_u32(p)); }

std::vector<TokenSelection> select_batch(const Tensor<float>& attn_map,
                                         const SelectionConfig& selection) {
  const auto scores = token_scores(attn_map);
  const std::size_t batch = attn_map.dim(0);
  const std::size_t n = attn_map.dim(2);
  std::vector<TokenSelection> out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    out.push_back(select_topk(std::span<const double>(scores).subspan(b * n, n), selection.ratio,
                              selection.keep_cls));
  }
  return out;
}

}  // namespace

std::uint64_t cache_config_hash(const FptConfig& cfg, std::uint64_t backbone_identity) {
  const auto& b = cfg.backbone;
  Fnv1a h;
  h.str("fptc").u64(kCacheFormatVersion);
  h.i64(b.image_size_high).i64(b.patch_size).i64(b.layers).i64(b.dim).i64(b.heads);
  h.i64(b.mlp_ratio).i64(b.pretrain_grid).u64(b.weight_seed).u64(backbone_identity);
  h.f64(cfg.selection.ratio).i64(cfg.selection.keep_cls ? 1 : 0).i64(cfg.selection.source_layer);
  h.i64(kSelectionRuleVersion);
  h.i64(cfg.data.norm_mean ? 1 : 0);
  if (cfg.data.norm_mean && cfg.data.norm_std) {
    for (double v : *cfg.data.norm_mean) h.f64(v);
    for (double v : *cfg.data.norm_std) h.f64(v);
  }
  return h.digest();
}

std::vector<LayerFusionFeatures<float>> frozen_features(const Backbone<float>& backbone,
                                                        const Tensor<float>& images_high,
                                                        const SelectionConfig& selection) {
  const auto layers = static_cast<std::size_t>(backbone.config().layers);
  std::vector<LayerFusionFeatures<float>> out(layers);
  if (selection.source_layer < 0) {
    backbone.forward_streaming(images_high, [&](std::size_t l, const LayerTap<float>& tap) {
      const auto sels = select_batch(tap.attn_map, selection);
      out[l] = gather_selected(tap, l, sels);
    });
    return out;
  }
  // A fixed source layer may come after the layers that reuse its ranking,
  // so keys/values are held until the whole pass is done.
  const auto source = static_cast<std::size_t>(selection.source_layer);
  std::vector<LayerTap<float>> held(layers);
  std::vector<TokenSelection> shared;
  backbone.forward_streaming(images_high, [&](std::size_t l, const LayerTap<float>& tap) {
    held[l] = {Tensor<float>(), Tensor<float>(), tap.keys, tap.values};
    if (l == source) {
      shared = select_batch(tap.attn_map, selection);
    }
  });
  for (std::size_t l = 0; l < layers; ++l) {
    out[l] = gather_selected(held[l], l, shared);
  }
  return out;
}

json CacheManifest::to_json() const {
  return {{"format", "fptc"},
          {"version", version},
          {"config_hash", hex64(config_hash)},
          {"config_digest", hex64(config_digest)},
          {"dataset_fingerprint", hex64(dataset_fingerprint)},
          {"split", split},
          {"layers", layers},
          {"heads", heads},
          {"head_dim", head_dim},
          {"selected", selected},
          {"entry_bytes", entry_bytes},
          {"dtype", "f32le"},
          {"index_dtype", "u32le"},
          {"entry_layout", "per layer: indices[S], keys[S][h][d], values[S][h][d]"},
          {"count", ids.size()},
          {"ids", ids},
          {"labels", labels},
          {"offsets", offsets},
          {"skipped", skipped}};
}

CacheManifest CacheManifest::from_json(const json& j) {
  CacheManifest m;
  try {
    m.version = j.at("version").get<std::uint32_t>();
    m.config_hash = parse_hex64(j.at("config_hash").get<std::string>());
    m.config_digest = parse_hex64(j.at("config_digest").get<std::string>());
    m.dataset_fingerprint = parse_hex64(j.at("dataset_fingerprint").get<std::string>());
    m.split = j.at("split").get<std::string>();
    m.layers = j.at("layers").get<std::size_t>();
    m.heads = j.at("heads").get<std::size_t>();
    m.head_dim = j.at("head_dim").get<std::size_t>();
    m.selected = j.at("selected").get<std::size_t>();
    m.entry_bytes = j.at("entry_bytes").get<std::uint64_t>();
    m.ids = j.at("ids").get<std::vector<std::string>>();
    m.labels = j.at("labels").get<std::vector<int>>();
    m.offsets = j.at("offsets").get<std::vector<std::uint64_t>>();
    m.skipped = j.at("skipped").get<std::vector<std::string>>();
    if (j.at("dtype") != "f32le" || j.at("index_dtype") != "u32le") {
      throw StaleCacheError("cache declares an unsupported dtype");
    }
  } catch (const json::exception& e) {
    throw StaleCacheError(std::string("malformed cache manifest: ") + e.what());
  }
  if (m.labels.size() != m.ids.size() || m.offsets.size() != m.ids.size()) {
    throw StaleCacheError("cache manifest lists inconsistent sample counts");
  }
  for (std::size_t i = 0; i < m.offsets.size(); ++i) {
    if (m.offsets[i] != i * m.entry_bytes) {
      throw StaleCacheError("cache manifest offsets are not contiguous");
    }
  }
  return m;
}

std::uint64_t cache_entry_bytes(std::size_t layers, std::size_t selected, std::size_t heads,
                                std::size_t head_dim) {
  return static_cast<std::uint64_t>(layers) * selected * (4 + 2 * heads * head_dim * 4);
}

fs::path cache_data_path(const fs::path& dir, std::string_view split) {
  return dir / (std::string(split) + ".fptc");
}

fs::path cache_manifest_path(const fs::path& dir, std::string_view split) {
  return dir / (std::string(split) + ".manifest.json");
}

namespace {

/// Serializes sample b of a feature batch in the on-disk entry layout.
void append_entry(std::string& out, std::span<const LayerFusionFeatures<float>> feats,
                  std::size_t b) {
  std::ostringstream buf;
  for (const auto& f : feats) {
    const std::size_t s_sel = f.count;
    write_u32_le(buf, std::span<const std::uint32_t>(f.indices).subspan(b * s_sel, s_sel));
    std::vector<float> k(s_sel * f.heads * f.head_dim);
    std::vector<float> v(k.size());
    const auto kv = f.keys.values();
    const auto vv = f.values.values();
    for (std::size_t h = 0; h < f.heads; ++h) {
      for (std::size_t s = 0; s < s_sel; ++s) {
        const std::size_t src = ((b * f.heads + h) * s_sel + s) * f.head_dim;
        const std::size_t dst = (s * f.heads + h) * f.head_dim;
        std::copy_n(kv.data() + src, f.head_dim, k.data() + dst);
        std::copy_n(vv.data() + src, f.head_dim, v.data() + dst);
      }
    }
    write_f32_le(buf, k);
    write_f32_le(buf, v);
  }
  out += buf.str();
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out.flush()) {
    throw IoError("cannot write '" + path.string() + "'");
  }
}

struct PartialFiles {
  std::vector<fs::path> paths;
  bool committed = false;
  ~PartialFiles() {
    if (!committed) {
      std::error_code ec;
      for (const auto& p : paths) fs::remove(p, ec);
    }
  }
};

}  // namespace

CacheBuildResult build_cache(const Split& split, const FptConfig& cfg,
                             const Backbone<float>& backbone, const Normalizer& norm,
                             const fs::path& dir, const CacheBuildOptions& options) {
  const fs::path data_path = cache_data_path(dir, split.name);
  const fs::path manifest_path = cache_manifest_path(dir, split.name);
  if (!options.force && (fs::exists(data_path) || fs::exists(manifest_path))) {
    throw CacheExistsError("cache for split '" + split.name + "' already exists in '" +
                           dir.string() + "'; pass --force to rebuild");
  }

  FptConfig pinned = cfg;
  pin_normalizer(pinned, norm);
  const auto& bcfg = backbone.config();
  const auto high = static_cast<std::size_t>(bcfg.image_size_high);

  CacheManifest manifest;
  manifest.config_hash = cache_config_hash(pinned, backbone.identity());
  manifest.config_digest = config_digest(pinned);
  manifest.split = split.name;
  manifest.layers = static_cast<std::size_t>(bcfg.layers);
  manifest.heads = static_cast<std::size_t>(bcfg.heads);
  manifest.head_dim = static_cast<std::size_t>(bcfg.head_dim());
  manifest.selected = selected_count(static_cast<std::size_t>(bcfg.tokens()), cfg.selection.ratio,
                                     cfg.selection.keep_cls);
  manifest.entry_bytes =
      cache_entry_bytes(manifest.layers, manifest.selected, manifest.heads, manifest.head_dim);

  Split included{split.name, {}};
  for (const auto& s : split.samples) {
    try {
      Sample copy = s;
      copy.image = load_sample_image(s);
      included.samples.push_back(std::move(copy));
    } catch (const IoError&) {
      manifest.skipped.push_back(s.id);
    }
  }
  manifest.dataset_fingerprint = split_fingerprint(included);
  for (std::size_t i = 0; i < included.samples.size(); ++i) {
    manifest.ids.push_back(included.samples[i].id);
    manifest.labels.push_back(included.samples[i].label);
    manifest.offsets.push_back(i * manifest.entry_bytes);
  }

  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    throw IoError("cannot create cache dir '" + dir.string() + "': " + ec.message());
  }
  PartialFiles partial;
  const fs::path data_tmp = data_path.string() + ".partial";
  const fs::path manifest_tmp = manifest_path.string() + ".partial";
  partial.paths = {data_tmp, manifest_tmp};

  std::ofstream out(data_tmp, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot open '" + data_tmp.string() + "' for writing");
  }
  const json header = manifest.to_json();
  write_framed_header(out, kMagic, kCacheFormatVersion, header);

  const std::size_t batch = std::max<std::size_t>(1, options.batch_size);
  const std::size_t n = included.samples.size();
  const std::size_t n_batches = (n + batch - 1) / batch;
  std::size_t threads = options.threads ? options.threads : std::thread::hardware_concurrency();
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, n_batches));

  // Batches are computed in waves of `threads` and written in order, so the
  // bytes never depend on scheduling.
  for (std::size_t wave = 0; wave < n_batches; wave += threads) {
    const std::size_t wave_end = std::min(n_batches, wave + threads);
    std::vector<std::string> blobs(wave_end - wave);
    std::vector<std::exception_ptr> errors(blobs.size());
    std::atomic<std::size_t> next{wave};
    auto worker = [&] {
      for (std::size_t bi = next++; bi < wave_end; bi = next++) {
        try {
          const std::size_t lo = bi * batch;
          const std::size_t hi = std::min(n, lo + batch);
          std::vector<Image> imgs;
          for (std::size_t i = lo; i < hi; ++i) {
            imgs.push_back(resize_bilinear(included.samples[i].image, high));
          }
          const auto feats = frozen_features(backbone, to_tensor(imgs, norm), cfg.selection);
          std::string& blob = blobs[bi - wave];
          for (std::size_t b = 0; b < hi - lo; ++b) {
            append_entry(blob, feats, b);
          }
        } catch (...) {
          errors[bi - wave] = std::current_exception();
        }
      }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < std::min(threads, wave_end - wave); ++t) {
      pool.emplace_back(worker);
    }
    worker();
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    for (const auto& blob : blobs) {
      out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }
    if (!out) {
      throw IoError("write failed for '" + data_tmp.string() + "'");
    }
  }
  out.close();
  if (!out) {
    throw IoError("cannot finish '" + data_tmp.string() + "'");
  }
  write_json_file(manifest_tmp, header);

  fs::rename(data_tmp, data_path, ec);
  if (!ec) fs::rename(manifest_tmp, manifest_path, ec);
  if (ec) {
    throw IoError("cannot publish cache in '" + dir.string() + "': " + ec.message());
  }
  partial.committed = true;
  return {std::move(manifest), static_cast<std::uint64_t>(fs::file_size(data_path))};
}

FeatureCache FeatureCache::open(const fs::path& dir, std::string_view split,
                                std::uint64_t expected_hash) {
  const fs::path path = cache_data_path(dir, split);
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw StaleCacheError("no cache for split '" + std::string(split) + "' in '" + dir.string() +
                          "'; run the cache command first");
  }
  FramedHeader framed;
  try {
    framed = read_framed_header(in, kMagic);
  } catch (const IoError& e) {
    throw StaleCacheError(std::string("unreadable cache header: ") + e.what());
  }
  if (framed.version != kCacheFormatVersion) {
    throw StaleCacheError("cache format version " + std::to_string(framed.version) +
                          " is not supported");
  }
  FeatureCache cache;
  cache.manifest_ = CacheManifest::from_json(framed.header);
  const auto& m = cache.manifest_;
  if (m.config_hash != expected_hash) {
    throw StaleCacheError("cache '" + path.string() + "' was built for config hash " +
                          hex64(m.config_hash) + ", current config hashes to " +
                          hex64(expected_hash) + "; rebuild it with the cache command");
  }
  const std::uint64_t payload = m.entry_bytes * m.ids.size();
  const std::uint64_t size = fs::file_size(path);
  if (size != framed.payload_offset + payload) {
    throw StaleCacheError("cache '" + path.string() + "' is truncated or padded (" +
                          std::to_string(size) + " bytes, expected " +
                          std::to_string(framed.payload_offset + payload) + ")");
  }
  cache.payload_.resize(payload);
  in.seekg(static_cast<std::streamoff>(framed.payload_offset));
  in.read(cache.payload_.data(), static_cast<std::streamsize>(payload));
  if (!in) {
    throw StaleCacheError("cannot read cache payload of '" + path.string() + "'");
  }
  for (std::size_t i = 0; i < m.ids.size(); ++i) {
    cache.index_.emplace(m.ids[i], i);
  }
  return cache;
}

std::size_t FeatureCache::index_of(const std::string& id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) {
    throw LookupError("sample '" + id + "' is not in cache split '" + manifest_.split + "'");
  }
  return it->second;
}

FeatureCacheEntry FeatureCache::load_entry(const std::string& id) const {
  return load_entry(index_of(id));
}

FeatureCacheEntry FeatureCache::load_entry(std::size_t index) const {
  if (index >= size()) {
    throw LookupError("cache entry " + std::to_string(index) + " out of range");
  }
  const auto& m = manifest_;
  FeatureCacheEntry entry;
  entry.sample_id = m.ids[index];
  entry.config_hash = m.config_hash;
  const char* p = payload_.data() + m.offsets[index];
  const std::size_t kv = m.selected * m.heads * m.head_dim;
  for (std::size_t l = 0; l < m.layers; ++l) {
    CachedLayer layer;
    layer.indices.resize(m.selected);
    for (auto& i : layer.indices) {
      i = load_u32(p);
      p += 4;
    }
    layer.keys.resize(kv);
    for (auto& v : layer.keys) {
      v = load_f32(p);
      p += 4;
    }
    layer.values.resize(kv);
    for (auto& v : layer.values) {
      v = load_f32(p);
      p += 4;
    }
    entry.layers.push_back(std::move(layer));
  }
  return entry;
}

std::vector<LayerFusionFeatures<float>> FeatureCache::batch(
    std::span<const std::size_t> indices) const {
  const auto& m = manifest_;
  const std::size_t batch = indices.size();
  const std::size_t s_sel = m.selected;
  const std::size_t dh = m.head_dim;
  std::vector<LayerFusionFeatures<float>> out(m.layers);
  std::vector<std::vector<float>> keys(m.layers, std::vector<float>(batch * m.heads * s_sel * dh));
  std::vector<std::vector<float>> values(keys);
  for (std::size_t l = 0; l < m.layers; ++l) {
    out[l].layer = l;
    out[l].batch = batch;
    out[l].heads = m.heads;
    out[l].count = s_sel;
    out[l].head_dim = dh;
    out[l].indices.reserve(batch * s_sel);
  }
  const std::size_t layer_bytes = s_sel * (4 + 2 * m.heads * dh * 4);
  for (std::size_t b = 0; b < batch; ++b) {
    if (indices[b] >= size()) {
      throw LookupError("cache entry " + std::to_string(indices[b]) + " out of range");
    }
    const char* base = payload_.data() + m.offsets[indices[b]];
    for (std::size_t l = 0; l < m.layers; ++l) {
      const char* p = base + l * layer_bytes;
      for (std::size_t s = 0; s < s_sel; ++s) {
        out[l].indices.push_back(load_u32(p + 4 * s));
      }
      const char* kp = p + 4 * s_sel;
      const char* vp = kp + 4 * s_sel * m.heads * dh;
      for (std::size_t s = 0; s < s_sel; ++s) {
        for (std::size_t h = 0; h < m.heads; ++h) {
          const std::size_t src = ((s * m.heads + h) * dh) * 4;
          const std::size_t dst = ((b * m.heads + h) * s_sel + s) * dh;
          for (std::size_t d = 0; d < dh; ++d) {
            keys[l][dst + d] = load_f32(kp + src + 4 * d);
            values[l][dst + d] = load_f32(vp + src + 4 * d);
          }
        }
      }
    }
  }
  for (std::size_t l = 0; l < m.layers; ++l) {
    const Shape shape{batch, m.heads, s_sel, dh};
    out[l].keys = Tensor<float>(shape, std::move(keys[l]), false);
    out[l].values = Tensor<float>(shape, std::move(values[l]), false);
  }
  return out;
}

}  // namespace fpt
