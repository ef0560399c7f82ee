#include "bgadapt/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <random>

#include "bgadapt/binary_io.hpp"
#include "bgadapt/errors.hpp"

namespace bgadapt {

namespace {

constexpr std::array<std::array<float, 3>, 8> kColors{{
    {0.90f, 0.15f, 0.15f},
    {0.15f, 0.80f, 0.20f},
    {0.15f, 0.30f, 0.90f},
    {0.92f, 0.88f, 0.15f},
    {0.85f, 0.20f, 0.85f},
    {0.15f, 0.85f, 0.85f},
    {0.95f, 0.55f, 0.10f},
    {0.55f, 0.25f, 0.15f},
}};

constexpr int kMaxAttempts = 200;

bool inside(ShapeFamily family, double dx, double dy, double s) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (family) {
    case ShapeFamily::kDisk: return dx * dx + dy * dy <= s * s;
    case ShapeFamily::kSquare: return ax <= 0.8 * s && ay <= 0.8 * s;
    case ShapeFamily::kTriangle: return dy >= -s && dy <= s && ax <= (dy + s) * 0.5;
    case ShapeFamily::kRing: {
      const double r2 = dx * dx + dy * dy;
      return r2 <= s * s && r2 >= 0.3 * s * s;
    }
    case ShapeFamily::kCross: return (ax <= s / 3 && ay <= s) || (ay <= s / 3 && ax <= s);
    case ShapeFamily::kBar: return ax <= s && ay <= s / 3;
    case ShapeFamily::kDiamond: return ax + ay <= s;
    case ShapeFamily::kLShape: return (dx >= -s && dx <= -s / 3 && ay <= s) || (dy >= s / 3 && dy <= s && ax <= s);
  }
  return false;
}

struct Placement {
  int class_id;
  double cx, cy, size;
  std::array<float, 3> color;
};

std::vector<int> all_classes(const TaskProtocol& protocol) {
  std::vector<int> out(static_cast<std::size_t>(protocol.total_classes()));
  for (int c = 1; c <= protocol.total_classes(); ++c) out[static_cast<std::size_t>(c - 1)] = c;
  return out;
}

void check_palette(const TaskProtocol& protocol) {
  if (protocol.total_classes() > kMaxPaletteClasses) {
    throw ConfigError("protocol " + protocol.name() + " needs " + std::to_string(protocol.total_classes()) +
                      " classes; the shape palette has " + std::to_string(kMaxPaletteClasses));
  }
}

}  // namespace

ShapeFamily shape_family_of(int class_id) {
  if (class_id < 1 || class_id > kMaxPaletteClasses) throw ConfigError("class " + std::to_string(class_id) + " has no shape");
  return static_cast<ShapeFamily>((class_id - 1) % 8);
}

bool is_textured(int class_id) { return class_id > 8; }

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  // splitmix64 finalizer applied to a mix of the three inputs
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ stream) ^ index);
}

LabelMap SyntheticScene::step_label(const TaskProtocol& protocol, int step) const {
  const ClassRange r = protocol.classes_of_step(step);
  LabelMap out = full_label;
  for (int& id : out.ids) {
    if (!r.contains(id)) id = kBackgroundId;
  }
  return out;
}

LabelMap SyntheticScene::label_up_to(const TaskProtocol& protocol, int step) const {
  const int last = protocol.classes_up_to(step);
  LabelMap out = full_label;
  for (int& id : out.ids) {
    if (id > last) id = kBackgroundId;
  }
  return out;
}

SyntheticScene generate_scene(std::uint64_t seed, const SceneRequest& request) {
  const int n = request.canvas;
  if (n < kMinCanvas) {
    throw ConfigError("canvas " + std::to_string(n) + " below the minimum of " + std::to_string(kMinCanvas));
  }
  if (request.palette.empty() && !request.required_class) throw ConfigError("scene palette is empty");
  if (request.min_objects < 1 || request.max_objects < request.min_objects) throw ConfigError("bad object count range");
  for (int c : request.palette) shape_family_of(c);
  if (request.required_class) shape_family_of(*request.required_class);

  std::mt19937_64 rng(seed);
  const double min_size = n * 0.16, max_size = n * 0.26;
  std::uniform_real_distribution<double> size_dist(min_size, max_size);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<float> noise(0.0f, 0.1f);
  std::uniform_real_distribution<float> jitter(-0.08f, 0.08f);

  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    const int count = std::uniform_int_distribution<int>(request.min_objects, request.max_objects)(rng);
    std::vector<Placement> objects;
    for (int i = 0; i < count; ++i) {
      int cls;
      if (i == 0 && request.required_class) {
        cls = *request.required_class;
      } else {
        if (request.palette.empty()) break;
        cls = request.palette[std::uniform_int_distribution<std::size_t>(0, request.palette.size() - 1)(rng)];
      }
      const double s = size_dist(rng);
      const double cx = s * 0.6 + unit(rng) * (n - 1.2 * s);
      const double cy = s * 0.6 + unit(rng) * (n - 1.2 * s);
      auto color = kColors[static_cast<std::size_t>((cls - 1) % 8)];
      for (auto& ch : color) ch = std::clamp(ch + jitter(rng), 0.0f, 1.0f);
      objects.push_back({cls, cx, cy, s, color});
    }

    // Paint in order; each pixel keeps the index of the last object covering it.
    std::vector<int> owner(static_cast<std::size_t>(n) * n, -1);
    std::vector<std::size_t> footprint(objects.size(), 0);
    for (std::size_t o = 0; o < objects.size(); ++o) {
      const auto& p = objects[o];
      for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
          if (inside(shape_family_of(p.class_id), x + 0.5 - p.cx, y + 0.5 - p.cy, p.size)) {
            owner[static_cast<std::size_t>(y) * n + x] = static_cast<int>(o);
            ++footprint[o];
          }
        }
      }
    }
    std::vector<std::size_t> visible(objects.size(), 0);
    for (int o : owner) {
      if (o >= 0) ++visible[static_cast<std::size_t>(o)];
    }
    bool ok = true;
    for (std::size_t o = 0; o < objects.size(); ++o) {
      ok = ok && footprint[o] > 0 && static_cast<double>(visible[o]) >= kMinVisibleFraction * footprint[o];
    }
    if (!ok) continue;

    SyntheticScene scene;
    scene.full_label = LabelMap(n, n);
    const float base = 0.35f + 0.3f * static_cast<float>(unit(rng));
    std::vector<float> img(3 * static_cast<std::size_t>(n) * n);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const std::size_t k = static_cast<std::size_t>(y) * n + x;
        const int o = owner[k];
        std::array<float, 3> rgb{base, base, base};
        if (o >= 0) {
          const auto& p = objects[static_cast<std::size_t>(o)];
          rgb = p.color;
          if (is_textured(p.class_id) && ((x + y) / 2) % 2 == 0) rgb = {0.05f, 0.05f, 0.05f};
          scene.full_label.ids[k] = p.class_id;
        }
        const float grain = noise(rng);
        for (int c = 0; c < 3; ++c) {
          const float v = o >= 0 ? rgb[c] + 0.3f * grain : rgb[c] + grain;
          img[static_cast<std::size_t>(c) * n * n + k] = std::clamp(v, 0.0f, 1.0f);
        }
      }
    }
    scene.image = Tensor::from({3, n, n}, std::move(img));
    for (const auto& p : objects) scene.objects.push_back(p.class_id);
    return scene;
  }
  throw ConfigError("could not place objects without excessive occlusion on a " + std::to_string(n) + " canvas");
}

Dataset build_split(const TaskProtocol& protocol, int step, int count, std::uint64_t seed, int canvas) {
  check_palette(protocol);
  if (count < 0) throw ConfigError("negative split size");
  const ClassRange owned = protocol.classes_of_step(step);
  SceneRequest request;
  request.canvas = canvas;
  request.palette = all_classes(protocol);
  Dataset data;
  data.step = step;
  data.canvas = canvas;
  std::mt19937_64 pick(derive_seed(seed, static_cast<std::uint64_t>(step), 0xC1A55ULL));
  for (int i = 0; i < count; ++i) {
    request.required_class = std::uniform_int_distribution<int>(owned.first, owned.last)(pick);
    const SyntheticScene s = generate_scene(derive_seed(seed, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i)), request);
    data.samples.push_back({s.image, s.step_label(protocol, step)});
  }
  return data;
}

Dataset build_validation(const TaskProtocol& protocol, int count, std::uint64_t seed, int canvas) {
  check_palette(protocol);
  if (count < 0) throw ConfigError("negative split size");
  SceneRequest request;
  request.canvas = canvas;
  request.palette = all_classes(protocol);
  Dataset data;
  data.step = 0;
  data.canvas = canvas;
  data.full_labels = true;
  for (int i = 0; i < count; ++i) {
    const SyntheticScene s = generate_scene(derive_seed(seed, 0xFA11DA7AULL, static_cast<std::uint64_t>(i)), request);
    data.samples.push_back({s.image, s.full_label});
  }
  return data;
}

Dataset restrict_to_step(const Dataset& validation, const TaskProtocol& protocol, int step) {
  const int last = protocol.classes_up_to(step);
  Dataset out = validation;
  for (auto& s : out.samples) {
    for (int& id : s.label.ids) {
      if (id > last) id = kBackgroundId;
    }
  }
  return out;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write("BGADATA1", 8);
  binio::write<std::uint32_t>(os, 1);
  binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(data.step));
  binio::write<std::uint32_t>(os, data.full_labels ? 1u : 0u);
  binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(data.samples.size()));
  binio::write<std::uint32_t>(os, 3);
  binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(data.canvas));
  binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(data.canvas));
  for (const auto& s : data.samples) {
    if (s.image.shape() != Shape{3, data.canvas, data.canvas}) throw ShapeError("dataset sample has wrong image shape");
    binio::write_floats(os, s.image.values());
    std::vector<std::uint8_t> ids(s.label.ids.begin(), s.label.ids.end());
    binio::write_bytes(os, ids.data(), ids.size());
  }
  if (!os) throw IoError("failed writing " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  binio::expect_magic(is, "BGADATA1");
  if (binio::read<std::uint32_t>(is) != 1) throw IoError("unsupported dataset version in " + path.string());
  Dataset data;
  data.step = static_cast<int>(binio::read<std::uint32_t>(is));
  data.full_labels = binio::read<std::uint32_t>(is) != 0;
  const auto count = binio::read<std::uint32_t>(is);
  const auto channels = binio::read<std::uint32_t>(is);
  const auto height = binio::read<std::uint32_t>(is);
  const auto width = binio::read<std::uint32_t>(is);
  if (channels != 3 || height != width || height < kMinCanvas || height > 4096) {
    throw IoError("corrupt dataset header in " + path.string());
  }
  data.canvas = static_cast<int>(height);
  const int n = data.canvas;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::vector<float> img(3 * static_cast<std::size_t>(n) * n);
    binio::read_floats(is, img);
    std::vector<std::uint8_t> ids(static_cast<std::size_t>(n) * n);
    binio::read_bytes(is, ids.data(), ids.size());
    Sample s{Tensor::from({3, n, n}, std::move(img)), LabelMap(n, n)};
    std::copy(ids.begin(), ids.end(), s.label.ids.begin());
    data.samples.push_back(std::move(s));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes in " + path.string());
  return data;
}

void write_label_pgm(const LabelMap& label, int max_id, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "P5\n" << label.width << ' ' << label.height << "\n255\n";
  const double scale = max_id > 0 ? 255.0 / max_id : 0.0;
  for (int id : label.ids) os.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(id, 0, max_id) * scale))));
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace bgadapt
