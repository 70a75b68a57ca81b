#include "tcaf/checkpoint.hpp"

#include "binary_io.hpp"
#include "tcaf/config_json.hpp"

namespace tcaf {

namespace {
constexpr std::string_view kMagic = "TCAF";
}  // namespace

template <typename T>
std::vector<std::uint8_t> serialize_model(const TcafModel<T>& model) {
  detail::ByteWriter w;
  w.bytes(kMagic);
  w.u32(kCheckpointVersion);
  w.str(to_json(model.config()).dump());
  w.u32(static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& [name, p] : model.parameters()) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(p.rank()));
    for (std::size_t d : p.shape()) w.u64(d);
    w.f32_array(p.data());
  }
  w.u32(static_cast<std::uint32_t>(model.norm_states().size()));
  for (const auto& [name, s] : model.norm_states()) {
    w.str(name);
    w.u64(s.running_mean.size());
    w.f32_array(std::span<const T>(s.running_mean));
    w.f32_array(std::span<const T>(s.running_var));
    w.i64(s.batches_tracked);
  }
  return std::move(w.buffer());
}

template <typename T>
TcafModel<T> deserialize_model(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "checkpoint");
  if (r.bytes(4) != kMagic) throw IoError("checkpoint: bad magic");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint: version " + std::to_string(version) + ", expected " +
                  std::to_string(kCheckpointVersion));
  }
  ArchConfig arch;
  try {
    arch = arch_from_json(nlohmann::json::parse(r.str()));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: malformed config: ") + e.what());
  }
  TcafModel<T> model(arch, 0);
  const auto count = r.u32();
  if (count != model.parameters().size()) {
    throw IoError("checkpoint: " + std::to_string(count) + " parameters, model expects " +
                  std::to_string(model.parameters().size()));
  }
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = r.str();
    Tensor<T>& p = model.parameter(name);
    const auto rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
    if (shape != p.shape()) {
      throw IoError("checkpoint: parameter '" + name + "' has shape " + shape_str(shape) + ", expected " +
                    shape_str(p.shape()));
    }
    for (auto& v : p.mutable_data()) v = static_cast<T>(r.f32());
  }
  const auto states = r.u32();
  for (std::uint32_t k = 0; k < states; ++k) {
    const std::string name = r.str();
    auto it = model.norm_states().find(name);
    if (it == model.norm_states().end()) throw IoError("checkpoint: unknown batch-norm state '" + name + "'");
    const auto n = r.u64();
    if (n != it->second.running_mean.size()) throw IoError("checkpoint: batch-norm state '" + name + "' width mismatch");
    for (auto& v : it->second.running_mean) v = static_cast<T>(r.f32());
    for (auto& v : it->second.running_var) v = static_cast<T>(r.f32());
    it->second.batches_tracked = r.i64();
  }
  if (r.remaining() != 0) throw IoError("checkpoint: trailing bytes");
  return model;
}

template <typename T>
void save_checkpoint(const TcafModel<T>& model, const std::filesystem::path& path) {
  detail::write_file(path, serialize_model(model));
}

template <typename T>
TcafModel<T> load_checkpoint(const std::filesystem::path& path) {
  return deserialize_model<T>(detail::read_file(path));
}

template std::vector<std::uint8_t> serialize_model(const TcafModel<float>&);
template std::vector<std::uint8_t> serialize_model(const TcafModel<double>&);
template TcafModel<float> deserialize_model(std::span<const std::uint8_t>);
template TcafModel<double> deserialize_model(std::span<const std::uint8_t>);
template void save_checkpoint(const TcafModel<float>&, const std::filesystem::path&);
template void save_checkpoint(const TcafModel<double>&, const std::filesystem::path&);
template TcafModel<float> load_checkpoint(const std::filesystem::path&);
template TcafModel<double> load_checkpoint(const std::filesystem::path&);

}  // namespace tcaf
