#include "retro/checkpoint.hpp"

#include "retro/binary_io.hpp"

namespace retro {

const NamedArray* Checkpoint::find(std::string_view name) const {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  io::Writer w;
  w.put_bytes("RCK1");
  w.put<std::uint64_t>(ckpt.config_hash);
  w.put<std::uint64_t>(ckpt.step);
  for (const auto& r : ckpt.records) {
    if (tensor::numel(r.shape) != r.data.size()) {
      throw std::invalid_argument("checkpoint record " + r.name + " has inconsistent shape");
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.name.size()));
    w.put_bytes(r.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) w.put<std::uint64_t>(d);
    w.put_span(std::span<const float>(r.data));
  }
  w.commit(path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  io::Reader r(path);
  if (r.get_bytes(4) != "RCK1") throw std::runtime_error(path.string() + ": not an RCK1 checkpoint");
  Checkpoint c;
  c.config_hash = r.get<std::uint64_t>();
  c.step = r.get<std::uint64_t>();
  while (!r.at_end()) {
    NamedArray a;
    a.name = r.get_bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < rank; ++i) a.shape.push_back(r.get<std::uint64_t>());
    a.data = r.get_vector<float>(tensor::numel(a.shape));
    c.records.push_back(std::move(a));
  }
  return c;
}

}  // namespace retro
