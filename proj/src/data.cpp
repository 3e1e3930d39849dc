#include "fedsup/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "fedsup/errors.hpp"

namespace fedsup {

namespace {

constexpr char kDatasetMagic[8] = {'F', 'S', 'U', 'P', 'D', 'A', 'T', 'A'};
constexpr uint32_t kDatasetVersion = 1;

double frac(double x) { return x - std::floor(x); }

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

void write_f32(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(os, bits);
}

uint32_t read_u32(std::istream& is, uint64_t offset) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw FormatError("dataset truncated at byte " + std::to_string(offset));
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

uint64_t read_u64(std::istream& is, uint64_t offset) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8))
    throw FormatError("dataset truncated at byte " + std::to_string(offset));
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

float read_f32(std::istream& is, uint64_t offset) {
  uint32_t bits = read_u32(is, offset);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

void SceneConfig::validate() const {
  if (height < 4 || width < 4 || height % 4 != 0 || width % 4 != 0)
    throw ConfigError("scene extents must be positive multiples of 4, got " +
                      std::to_string(height) + "x" + std::to_string(width));
  if (channels < 1) throw ConfigError("scene channels must be positive");
  if (classes < 2 || classes > 254)
    throw ConfigError("scene classes must be in [2,254], got " + std::to_string(classes));
  if (shapes_min < 0 || shapes_max < shapes_min)
    throw ConfigError("invalid shapes-per-image range [" + std::to_string(shapes_min) + "," +
                      std::to_string(shapes_max) + "]");
  if (noise_stddev < 0) throw ConfigError("noise stddev must be nonnegative");
  if (!palette.empty()) {
    if (static_cast<int>(palette.size()) != classes)
      throw ConfigError("palette must have one color per class");
    for (const auto& c : palette)
      if (static_cast<int>(c.size()) != channels)
        throw ConfigError("palette colors must have one value per channel");
  }
}

std::vector<float> SceneConfig::class_color(int k) const {
  if (!palette.empty()) return palette[k];
  // golden-ratio spread keeps classes apart for any K
  std::vector<float> color(channels);
  for (int c = 0; c < channels; ++c)
    color[c] = static_cast<float>(0.15 + 0.7 * frac(0.17 + k * 0.618033988749895 + c * 0.371));
  return color;
}

SegSample generate_scene(const SceneConfig& config, RngStream& rng) {
  const int H = config.height, W = config.width, C = config.channels;
  SegSample s;
  s.label.assign(static_cast<size_t>(H) * W, 0);
  s.image.assign(static_cast<size_t>(C) * H * W, 0.f);

  const int nshapes =
      config.shapes_min +
      static_cast<int>(rng.uniform_int(static_cast<uint64_t>(config.shapes_max - config.shapes_min + 1)));
  for (int i = 0; i < nshapes; ++i) {
    const int cls = 1 + static_cast<int>(rng.uniform_int(config.classes - 1));
    const bool disc = rng.uniform() < 0.5;
    const int cy = static_cast<int>(rng.uniform_int(H));
    const int cx = static_cast<int>(rng.uniform_int(W));
    const int max_r = std::max(2, std::min(H, W) / 3);
    const int r = 2 + static_cast<int>(rng.uniform_int(max_r - 1));
    for (int y = std::max(0, cy - r); y <= std::min(H - 1, cy + r); ++y)
      for (int x = std::max(0, cx - r); x <= std::min(W - 1, cx + r); ++x) {
        if (disc && (y - cy) * (y - cy) + (x - cx) * (x - cx) > r * r) continue;
        s.label[static_cast<size_t>(y) * W + x] = static_cast<uint8_t>(cls);
      }
  }

  std::vector<std::vector<float>> colors(config.classes);
  for (int k = 0; k < config.classes; ++k) colors[k] = config.class_color(k);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const int cls = s.label[static_cast<size_t>(y) * W + x];
      for (int c = 0; c < C; ++c) {
        double v = colors[cls][c];
        if (config.noise_stddev > 0) v += rng.normal() * config.noise_stddev;
        s.image[(static_cast<size_t>(c) * H + y) * W + x] =
            static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return s;
}

Dataset generate_dataset(const SceneConfig& config, size_t count, RngStream& rng) {
  config.validate();
  Dataset d;
  d.scene = config;
  d.samples.reserve(count);
  for (size_t i = 0; i < count; ++i) d.samples.push_back(generate_scene(config, rng));
  return d;
}

int dominant_class(const SegSample& sample, int classes) {
  std::vector<int64_t> hist(classes, 0);
  for (uint8_t l : sample.label) ++hist[l];
  int best = 0;
  int64_t best_count = -1;
  for (int k = 1; k < classes; ++k)
    if (hist[k] > best_count && hist[k] > 0) {
      best = k;
      best_count = hist[k];
    }
  return best_count > 0 ? best : 0;
}

void PartitionSpec::validate() const {
  if (vehicles < 1) throw ConfigError("partition needs at least one vehicle");
  if (gamma <= 0) throw ConfigError("dirichlet concentration must be positive");
  if (min_per_vehicle < 1) throw ConfigError("minimum samples per vehicle must be positive");
}

std::vector<std::vector<int>> dirichlet_partition(const Dataset& dataset,
                                                  const PartitionSpec& spec, RngStream& rng) {
  spec.validate();
  const int N = spec.vehicles;
  if (dataset.size() < static_cast<size_t>(N) * spec.min_per_vehicle)
    throw ConfigError("dataset of " + std::to_string(dataset.size()) +
                      " samples cannot give " + std::to_string(N) + " vehicles at least " +
                      std::to_string(spec.min_per_vehicle) + " each");

  // per-dominant-class vehicle shares
  const int K = dataset.scene.classes;
  std::vector<std::vector<double>> shares(K, std::vector<double>(N));
  for (int k = 0; k < K; ++k) {
    double sum = 0;
    for (int v = 0; v < N; ++v) {
      shares[k][v] = rng.gamma(spec.gamma);
      sum += shares[k][v];
    }
    for (int v = 0; v < N; ++v) shares[k][v] /= sum;
  }

  // group samples by dominant class, shuffle, then cut each group into
  // chunks matching the drawn shares (largest-remainder rounding)
  std::vector<std::vector<int>> by_class(K);
  for (size_t i = 0; i < dataset.size(); ++i)
    by_class[dominant_class(dataset.samples[i], K)].push_back(static_cast<int>(i));

  std::vector<std::vector<int>> parts(N);
  for (int k = 0; k < K; ++k) {
    auto& group = by_class[k];
    if (group.empty()) continue;
    rng.shuffle(group.begin(), group.size());
    const int n = static_cast<int>(group.size());
    std::vector<int> counts(N);
    std::vector<std::pair<double, int>> remainders(N);
    int assigned = 0;
    for (int v = 0; v < N; ++v) {
      const double exact = shares[k][v] * n;
      counts[v] = static_cast<int>(exact);
      assigned += counts[v];
      remainders[v] = {exact - counts[v], v};
    }
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    for (int r = 0; r < n - assigned; ++r) ++counts[remainders[r].second];
    int cursor = 0;
    for (int v = 0; v < N; ++v)
      for (int c = 0; c < counts[v]; ++c) parts[v].push_back(group[cursor++]);
  }

  // top up starving vehicles from the currently largest one
  for (;;) {
    int smallest = 0, largest = 0;
    for (int v = 1; v < N; ++v) {
      if (parts[v].size() < parts[smallest].size()) smallest = v;
      if (parts[v].size() > parts[largest].size()) largest = v;
    }
    if (parts[smallest].size() >= static_cast<size_t>(spec.min_per_vehicle)) break;
    parts[smallest].push_back(parts[largest].back());
    parts[largest].pop_back();
  }
  return parts;
}

void save_dataset(const std::string& path, const Dataset& dataset) {
  dataset.scene.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open dataset for writing: " + path);
  os.write(kDatasetMagic, 8);
  write_u32(os, kDatasetVersion);
  write_u32(os, static_cast<uint32_t>(dataset.scene.classes));
  write_u32(os, static_cast<uint32_t>(dataset.scene.channels));
  write_u32(os, static_cast<uint32_t>(dataset.scene.height));
  write_u32(os, static_cast<uint32_t>(dataset.scene.width));
  write_f32(os, dataset.scene.noise_stddev);
  write_u32(os, static_cast<uint32_t>(dataset.scene.shapes_min));
  write_u32(os, static_cast<uint32_t>(dataset.scene.shapes_max));
  write_u64(os, dataset.samples.size());
  for (const auto& s : dataset.samples) {
    os.write(reinterpret_cast<const char*>(s.image.data()),
             static_cast<std::streamsize>(s.image.size() * sizeof(float)));
    os.write(reinterpret_cast<const char*>(s.label.data()),
             static_cast<std::streamsize>(s.label.size()));
  }
  if (!os) throw FormatError("write failure on dataset: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open dataset: " + path);
  char magic[8];
  if (!is.read(magic, 8)) throw FormatError("dataset truncated at byte 0");
  if (std::memcmp(magic, kDatasetMagic, 8) != 0) throw FormatError("bad dataset magic at byte 0");
  const uint32_t version = read_u32(is, 8);
  if (version != kDatasetVersion)
    throw FormatError("unsupported dataset version " + std::to_string(version) + " (expected " +
                      std::to_string(kDatasetVersion) + ")");
  Dataset d;
  d.scene.classes = static_cast<int>(read_u32(is, 12));
  d.scene.channels = static_cast<int>(read_u32(is, 16));
  d.scene.height = static_cast<int>(read_u32(is, 20));
  d.scene.width = static_cast<int>(read_u32(is, 24));
  d.scene.noise_stddev = read_f32(is, 28);
  d.scene.shapes_min = static_cast<int>(read_u32(is, 32));
  d.scene.shapes_max = static_cast<int>(read_u32(is, 36));
  const uint64_t count = read_u64(is, 40);
  d.scene.validate();

  const size_t pixels = static_cast<size_t>(d.scene.height) * d.scene.width;
  const size_t floats = static_cast<size_t>(d.scene.channels) * pixels;
  uint64_t offset = 48;
  d.samples.resize(count);
  for (uint64_t i = 0; i < count; ++i) {
    auto& s = d.samples[i];
    s.image.resize(floats);
    s.label.resize(pixels);
    if (!is.read(reinterpret_cast<char*>(s.image.data()),
                 static_cast<std::streamsize>(floats * sizeof(float))))
      throw FormatError("dataset truncated at byte " + std::to_string(offset));
    offset += floats * sizeof(float);
    if (!is.read(reinterpret_cast<char*>(s.label.data()), static_cast<std::streamsize>(pixels)))
      throw FormatError("dataset truncated at byte " + std::to_string(offset));
    offset += pixels;
    for (size_t p = 0; p < pixels; ++p)
      if (s.label[p] >= d.scene.classes && s.label[p] != 255)
        throw DataError("label " + std::to_string(s.label[p]) + " out of range in sample " +
                        std::to_string(i));
  }
  return d;
}

}  // namespace fedsup
