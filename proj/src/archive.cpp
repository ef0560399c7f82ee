#include "bgadapt/archive.hpp"

#include <fstream>
#include <map>

#include "bgadapt/binary_io.hpp"
#include "bgadapt/errors.hpp"

namespace bgadapt {

namespace {
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxDim = 1 << 20;
}  // namespace

void save_checkpoint(const SegmentationModel& model, std::uint64_t config_hash, int step_index,
                     const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write("BGAMODEL", 8);
  binio::write<std::uint32_t>(os, kVersion);
  const auto& c = model.config();
  for (int v : {c.image_size, c.encoder_width, c.feature_width, c.head_hidden}) {
    binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  }
  const auto counts = model.class_counts();
  binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(counts.size()));
  for (int n : counts) binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(n));
  binio::write<std::uint64_t>(os, config_hash);
  binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(step_index));
  const auto params = model.parameters();
  binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    binio::write_string(os, p.name);
    binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (int d : p.tensor.shape()) binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    binio::write_floats(os, p.tensor.values());
  }
  os.flush();
  if (!os) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  try {
    binio::expect_magic(is, "BGAMODEL");
    if (binio::read<std::uint32_t>(is) != kVersion) throw IoError("unsupported archive version");
    ModelConfig mc;
    for (int* v : {&mc.image_size, &mc.encoder_width, &mc.feature_width, &mc.head_hidden}) {
      const auto x = binio::read<std::uint32_t>(is);
      if (x == 0 || x > kMaxDim) throw IoError("corrupt model header");
      *v = static_cast<int>(x);
    }
    const auto steps = binio::read<std::uint32_t>(is);
    if (steps == 0 || steps > 1024) throw IoError("corrupt step count");
    std::vector<int> counts;
    for (std::uint32_t i = 0; i < steps; ++i) {
      const auto n = binio::read<std::uint32_t>(is);
      if (n == 0 || n > 1024) throw IoError("corrupt class count");
      counts.push_back(static_cast<int>(n));
    }
    Checkpoint ck;
    ck.config_hash = binio::read<std::uint64_t>(is);
    ck.step_index = static_cast<int>(binio::read<std::uint32_t>(is));
    if (expected_hash && *expected_hash != ck.config_hash) {
      throw ConfigError("checkpoint " + path.string() + " was written under a different configuration");
    }
    ck.model = SegmentationModel::with_layout(mc, counts);
    std::map<std::string, Tensor> by_name;
    for (const auto& p : ck.model.parameters()) by_name.emplace(p.name, p.tensor);

    const auto n_params = binio::read<std::uint32_t>(is);
    if (n_params != by_name.size()) throw IoError("archive lists " + std::to_string(n_params) + " parameters, layout needs " + std::to_string(by_name.size()));
    for (std::uint32_t i = 0; i < n_params; ++i) {
      const std::string name = binio::read_string(is, 256);
      const auto it = by_name.find(name);
      if (it == by_name.end()) throw IoError("unexpected parameter '" + name + "'");
      const auto ndim = binio::read<std::uint32_t>(is);
      if (ndim > 8) throw IoError("corrupt rank for '" + name + "'");
      Shape shape;
      for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(static_cast<int>(binio::read<std::uint32_t>(is)));
      Tensor t = it->second;
      if (shape != t.shape()) {
        throw IoError("parameter '" + name + "' has shape " + shape_to_string(shape) + ", expected " + shape_to_string(t.shape()));
      }
      binio::read_floats(is, t.mutable_values());
    }
    if (is.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes");
    return ck;
  } catch (const IoError& e) {
    throw IoError("corrupt checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace bgadapt
