#include "pacn/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "pacn/binio.hpp"

namespace pacn {

namespace {

void put_tensors(std::string& out, const NamedTensors& tensors) {
  for (const auto& e : tensors.entries()) {
    binio::put_string(out, e.path);
    binio::put_u32(out, static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.shape()) binio::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : e.value.data()) binio::put_f32(out, v);
  }
}

}  // namespace

std::string serialize_checkpoint(const PacnModel& model) {
  std::string out(kCheckpointMagic, 8);
  binio::put_u32(out, kCheckpointVersion);
  binio::put_string(out, model.config().to_json());
  binio::put_u32(out, static_cast<std::uint32_t>(model.params().size() + model.buffers().size()));
  put_tensors(out, model.params());
  put_tensors(out, model.buffers());
  return out;
}

PacnModel deserialize_checkpoint(const std::string& bytes) {
  binio::Reader r(bytes, "checkpoint");
  if (r.bytes(8) != std::string(kCheckpointMagic, 8)) {
    throw IngestionError("checkpoint: bad magic (not a PACNCKPT file)");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw IngestionError("checkpoint: unsupported version " + std::to_string(version));
  }
  PacnModel model(PacnConfig::from_json(r.string()));
  const auto count = r.u32();
  if (count != model.params().size() + model.buffers().size()) {
    throw IngestionError("checkpoint: tensor count " + std::to_string(count) +
                         " does not match the embedded config");
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string path = r.string();
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u32();
    Tensor* target = nullptr;
    if (model.params().contains(path)) {
      target = &model.params().at(path);
    } else if (model.buffers().contains(path)) {
      target = &model.buffers().at(path);
    } else {
      throw IngestionError("checkpoint: unexpected tensor " + path);
    }
    if (target->shape() != shape) {
      throw IngestionError("checkpoint: tensor " + path + " has shape " + shape_str(shape) +
                           ", expected " + shape_str(target->shape()));
    }
    for (auto& v : target->data()) v = r.f32();
  }
  if (!r.done()) throw IngestionError("checkpoint: trailing bytes");
  return model;
}

void save_checkpoint(const std::string& path, const PacnModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  const std::string bytes = serialize_checkpoint(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

PacnModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace pacn
