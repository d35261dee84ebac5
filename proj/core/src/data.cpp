// SPDX-License-Identifier: Apache-2.0
#include "fpt/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "fpt/errors.hpp"
#include "fpt/hash.hpp"

namespace fpt {

namespace fs = std::filesystem;
using nlohmann::json;

const Split& Dataset::split(std::string_view name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw LookupError("unknown split '" + std::string(name) + "'");
}

Split& Dataset::split(std::string_view name) {
  return const_cast<Split&>(std::as_const(*this).split(name));
}

Image load_sample_image(const Sample& sample) {
  if (sample.loaded()) {
    return sample.image;
  }
  if (sample.path.empty()) {
    throw IoError("sample '" + sample.id + "' has neither pixels nor a source path");
  }
  return read_png(sample.path);
}

void load_images(Split& split) {
  for (auto& s : split.samples) {
    if (!s.loaded()) {
      s.image = load_sample_image(s);
    }
  }
}

namespace {

constexpr double kBackground = 48.0;
constexpr double kHigh = 240.0;
constexpr double kLow = 112.0;
constexpr double kFlat = 176.0;

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

void check_spec(const SynthSpec& spec) {
  if (spec.canvas <= 0 || spec.cue_size <= 0 || spec.cue_size > spec.canvas) {
    throw ConfigError("synth spec: cue size " + std::to_string(spec.cue_size) +
                      " does not fit canvas " + std::to_string(spec.canvas));
  }
  if (spec.num_classes < 2 || spec.num_classes > static_cast<int>(kSynthClassNames.size())) {
    throw ConfigError("synth spec: num_classes must be in [2, 4]");
  }
  if (spec.train_count < 0 || spec.val_count < 0 || spec.test_count < 0 || spec.noise < 0.0) {
    throw ConfigError("synth spec: counts and noise must be non-negative");
  }
}

}  // namespace

Image synth_image(const SynthSpec& spec, int label, std::uint64_t sample_seed) {
  check_spec(spec);
  Rng rng(sample_seed);
  const auto canvas = static_cast<std::size_t>(spec.canvas);
  const auto cue = static_cast<std::size_t>(spec.cue_size);
  const std::size_t stripe = std::max<std::size_t>(1, cue / 4);
  // Even offsets keep the texture's parity fixed against the pixel grid.
  const auto cx = 2 * static_cast<std::size_t>(rng.below((canvas - cue) / 2 + 1));
  const auto cy = 2 * static_cast<std::size_t>(rng.below((canvas - cue) / 2 + 1));
  const std::size_t phase = 0;

  Image img(canvas, canvas);
  for (std::size_t y = 0; y < canvas; ++y) {
    for (std::size_t x = 0; x < canvas; ++x) {
      double base = kBackground;
      if (y >= cy && y < cy + cue && x >= cx && x < cx + cue) {
        const std::size_t ry = (y - cy) / stripe;
        const std::size_t rx = (x - cx) / stripe;
        bool bright = false;
        switch (label) {
          case 0: bright = (ry + phase) % 2 == 0; break;
          case 1: bright = (rx + phase) % 2 == 0; break;
          case 2: bright = (rx + ry + phase) % 2 == 0; break;
          default: break;
        }
        base = label == 3 ? kFlat : (bright ? kHigh : kLow);
      }
      for (std::size_t c = 0; c < 3; ++c) {
        img.at(c, y, x) = to_byte(base + rng.normal(0.0, spec.noise));
      }
    }
  }
  return img;
}

Dataset synth_generate(const SynthSpec& spec) {
  check_spec(spec);
  Dataset data;
  for (int c = 0; c < spec.num_classes; ++c) {
    data.class_names.emplace_back(kSynthClassNames[static_cast<std::size_t>(c)]);
  }
  const std::array<int, 3> counts = {spec.train_count, spec.val_count, spec.test_count};
  for (std::size_t s = 0; s < kSplitNames.size(); ++s) {
    auto& split = data.split(kSplitNames[s]);
    for (int i = 0; i < counts[s]; ++i) {
      Sample sample;
      char id[32];
      std::snprintf(id, sizeof(id), "%s-%05d", std::string(kSplitNames[s]).c_str(), i);
      sample.id = id;
      sample.label = i % spec.num_classes;
      sample.image = synth_image(spec, sample.label, mix_seed(spec.seed, s, static_cast<std::uint64_t>(i)));
      split.samples.push_back(std::move(sample));
    }
  }
  return data;
}

void write_dataset(const Dataset& data, const fs::path& root) {
  json splits = json::object();
  for (auto name : kSplitNames) {
    json entries = json::array();
    for (const auto& s : data.split(name).samples) {
      const auto cls = data.class_names.at(static_cast<std::size_t>(s.label));
      const fs::path dir = root / name / cls;
      std::error_code ec;
      fs::create_directories(dir, ec);
      if (ec) {
        throw IoError("cannot create '" + dir.string() + "': " + ec.message());
      }
      write_png(dir / (s.id + ".png"), load_sample_image(s));
      entries.push_back({{"id", s.id}, {"label", s.label}});
    }
    splits[std::string(name)] = std::move(entries);
  }
  const json manifest = {{"version", 1}, {"classes", data.class_names}, {"splits", splits}};
  std::ofstream out(root / "splits.json");
  if (!out) {
    throw IoError("cannot write '" + (root / "splits.json").string() + "'");
  }
  out << manifest.dump(2) << '\n';
}

namespace {

std::vector<std::string> sorted_subdirs(const fs::path& dir) {
  std::vector<std::string> names;
  std::error_code ec;
  for (const auto& e : fs::directory_iterator(dir, ec)) {
    if (e.is_directory()) {
      names.push_back(e.path().filename().string());
    }
  }
  std::sort(names.begin(), names.end());
  return names;
}

std::vector<fs::path> sorted_pngs(const fs::path& dir) {
  std::vector<fs::path> files;
  std::error_code ec;
  for (const auto& e : fs::directory_iterator(dir, ec)) {
    if (e.is_regular_file() && e.path().extension() == ".png") {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace

Dataset read_dataset(const fs::path& root, bool decode, std::uint64_t seed) {
  if (!fs::is_directory(root)) {
    throw IoError("dataset root '" + root.string() + "' is not a directory");
  }
  Dataset data;
  const fs::path manifest_path = root / "splits.json";
  if (fs::exists(manifest_path)) {
    std::ifstream in(manifest_path);
    json manifest;
    try {
      in >> manifest;
      data.class_names = manifest.at("classes").get<std::vector<std::string>>();
      for (auto name : kSplitNames) {
        auto& split = data.split(name);
        const auto& entries = manifest.at("splits").at(std::string(name));
        for (const auto& e : entries) {
          Sample s;
          s.id = e.at("id").get<std::string>();
          s.label = e.at("label").get<int>();
          if (s.label < 0 || static_cast<std::size_t>(s.label) >= data.class_names.size()) {
            throw IoError("sample '" + s.id + "' has label outside the class list");
          }
          s.path = root / name / data.class_names[static_cast<std::size_t>(s.label)] /
                   (s.id + ".png");
          split.samples.push_back(std::move(s));
        }
      }
    } catch (const json::exception& e) {
      throw IoError("malformed split manifest '" + manifest_path.string() + "': " + e.what());
    }
  } else if (fs::is_directory(root / "train")) {
    std::set<std::string> classes;
    for (auto name : kSplitNames) {
      for (auto& c : sorted_subdirs(root / name)) {
        classes.insert(c);
      }
    }
    data.class_names.assign(classes.begin(), classes.end());
    for (auto name : kSplitNames) {
      for (std::size_t c = 0; c < data.class_names.size(); ++c) {
        for (auto& file : sorted_pngs(root / name / data.class_names[c])) {
          data.split(name).samples.push_back(
              {file.stem().string(), static_cast<int>(c), file, {}});
        }
      }
    }
  } else {
    data.class_names = sorted_subdirs(root);
    std::vector<Sample> all;
    for (std::size_t c = 0; c < data.class_names.size(); ++c) {
      for (auto& file : sorted_pngs(root / data.class_names[c])) {
        all.push_back({file.stem().string(), static_cast<int>(c), file, {}});
      }
    }
    const auto parts = partition_indices(all.size(), seed);
    for (std::size_t s = 0; s < parts.size(); ++s) {
      for (auto i : parts[s]) {
        data.split(kSplitNames[s]).samples.push_back(all[i]);
      }
    }
  }
  if (decode) {
    for (auto name : kSplitNames) {
      load_images(data.split(name));
    }
  }
  return data;
}

std::array<std::vector<std::size_t>, 3> partition_indices(std::size_t n, std::uint64_t seed,
                                                          std::array<double, 3> fractions) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-9 || fractions[0] < 0 || fractions[1] < 0 || fractions[2] < 0) {
    throw ConfigError("partition fractions must be non-negative and sum to 1");
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x9A27));
  rng.shuffle(order);
  const auto n_train = static_cast<std::size_t>(std::floor(fractions[0] * static_cast<double>(n) + 0.5));
  const auto n_val = std::min(
      n - n_train, static_cast<std::size_t>(std::floor(fractions[1] * static_cast<double>(n) + 0.5)));
  std::array<std::vector<std::size_t>, 3> parts;
  parts[0].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  parts[1].assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                  order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  parts[2].assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return parts;
}

Image augment_low(const Image& image, std::size_t target, Rng& rng,
                  const AugmentOptions& options) {
  // Both draws always happen so forcing one option leaves the other's stream intact.
  const double drawn_scale = rng.uniform(options.min_scale, options.max_scale);
  const bool drawn_flip = rng.bernoulli(options.flip_probability);
  const double scale = options.force_scale.value_or(drawn_scale);
  const bool flip = options.force_flip.value_or(drawn_flip);

  const std::size_t short_side = std::min(image.width, image.height);
  auto side = static_cast<std::size_t>(std::lround(std::sqrt(scale) * static_cast<double>(short_side)));
  side = std::clamp<std::size_t>(side, 1, short_side);
  Image out;
  if (side == image.width && side == image.height) {
    out = resize_bilinear(image, target);
  } else {
    const auto x = static_cast<std::size_t>(rng.below(image.width - side + 1));
    const auto y = static_cast<std::size_t>(rng.below(image.height - side + 1));
    out = resize_bilinear(crop(image, x, y, side, side), target);
  }
  return flip ? flip_horizontal(out) : out;
}

Normalizer channel_stats(const Split& split) {
  std::array<double, 3> sum{};
  std::array<double, 3> sq{};
  double count = 0.0;
  for (const auto& s : split.samples) {
    const Image img = load_sample_image(s);
    const std::size_t plane = img.width * img.height;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = img.pixels[c * plane + i] / 255.0;
        sum[c] += v;
        sq[c] += v * v;
      }
    }
    count += static_cast<double>(plane);
  }
  Normalizer norm;
  if (count == 0.0) {
    return norm;
  }
  for (std::size_t c = 0; c < 3; ++c) {
    norm.mean[c] = sum[c] / count;
    const double var = std::max(0.0, sq[c] / count - norm.mean[c] * norm.mean[c]);
    norm.std[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return norm;
}

Normalizer resolve_normalizer(const FptConfig& cfg, const Split& train) {
  if (cfg.data.norm_mean && cfg.data.norm_std) {
    return {*cfg.data.norm_mean, *cfg.data.norm_std};
  }
  return channel_stats(train);
}

void pin_normalizer(FptConfig& cfg, const Normalizer& norm) {
  cfg.data.norm_mean = norm.mean;
  cfg.data.norm_std = norm.std;
}

Tensor<float> to_tensor(std::span<const Image> images, const Normalizer& norm) {
  if (images.empty()) {
    throw ShapeError("to_tensor: empty image batch");
  }
  const std::size_t w = images[0].width;
  const std::size_t h = images[0].height;
  std::vector<float> values;
  values.reserve(images.size() * 3 * w * h);
  std::array<std::array<float, 256>, 3> lut{};
  for (std::size_t c = 0; c < 3; ++c) {
    for (int p = 0; p < 256; ++p) {
      lut[c][static_cast<std::size_t>(p)] =
          static_cast<float>((p / 255.0 - norm.mean[c]) / norm.std[c]);
    }
  }
  for (const auto& img : images) {
    if (img.width != w || img.height != h) {
      throw ShapeError("to_tensor: images in a batch must share one size");
    }
    const std::size_t plane = w * h;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < plane; ++i) {
        values.push_back(lut[c][img.pixels[c * plane + i]]);
      }
    }
  }
  return Tensor<float>(Shape{images.size(), 3, h, w}, std::move(values), false);
}

std::uint64_t split_fingerprint(const Split& split) {
  Fnv1a h;
  h.u64(split.samples.size());
  for (const auto& s : split.samples) {
    h.str(s.id).i64(s.label);
    const Image img = load_sample_image(s);
    h.u64(img.width).u64(img.height).bytes(img.pixels.data(), img.pixels.size());
  }
  return h.digest();
}

}  // namespace fpt
