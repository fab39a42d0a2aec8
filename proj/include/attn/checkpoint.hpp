#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "attn/bytes.hpp"
#include "attn/decoder.hpp"

namespace attn {

// Parameter checkpoint: magic "ATTNCKPT", version u32, then named sections of
// (name_len u16, name, rank u8, dims u32 each, row-major f64 data). Everything
// little-endian; round-trips are bit-exact.

inline constexpr std::string_view kCheckpointMagic = "ATTNCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_section(ByteWriter& w, const std::string& name, const Tensor& t) {
  check(name.size() <= UINT16_MAX, "section name too long");
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.bytes(name);
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
  for (double v : t.data) w.f64(v);
}

inline void save_checkpoint(const DecoderParams& params, AttMode train_mode,
                            const std::filesystem::path& path) {
  ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  for (const auto& [name, tensor] : params.entries()) write_section(w, name, *tensor);
  write_section(w, "train_mode",
                Tensor::scalar(train_mode == AttMode::Hard ? 1.0 : 0.0));
  w.to_file(path);
}

struct Checkpoint {
  DecoderParams params;
  AttMode train_mode = AttMode::Soft;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  ByteReader r = ByteReader::from_file(path);
  if (r.remaining() < kCheckpointMagic.size() ||
      r.bytes(kCheckpointMagic.size()) != kCheckpointMagic)
    throw bad_magic_error("not a checkpoint file (bad magic): " + path.string());
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw version_error("unsupported checkpoint version " + std::to_string(version));

  std::map<std::string, Tensor> sections;
  while (!r.at_end()) {
    const std::uint16_t name_len = r.u16();
    std::string name = r.bytes(name_len);
    const std::uint8_t rank = r.u8();
    if (rank < 1 || rank > 2) throw io_error("checkpoint section '" + name + "': bad rank");
    Shape shape;
    for (int i = 0; i < rank; ++i) shape.push_back(r.u32());
    Tensor t(shape);
    for (auto& v : t.data) v = r.f64();
    sections.emplace(std::move(name), std::move(t));
  }

  auto take = [&](const std::string& name) -> Tensor {
    auto it = sections.find(name);
    if (it == sections.end())
      throw io_error("checkpoint missing parameter section '" + name + "'");
    return it->second;
  };

  Checkpoint ck;
  Tensor out_W = take("out_W");
  Tensor out_h = take("out_h");
  Tensor out_z = take("out_z");
  Tensor score = take("att_score");
  ModelDims d;
  d.K = out_W.rows();
  d.m = out_W.cols();
  d.n = out_h.cols();
  d.D = out_z.cols();
  d.A = score.size();
  ck.params.dims = d;
  for (auto& [name, tensor] : ck.params.entries()) *tensor = take(name);

  // Shape consistency across sections.
  Rng scratch(0);
  DecoderParams reference = DecoderParams::init(d, scratch);
  for (auto& [name, tensor] : ck.params.entries()) {
    const Tensor& expect = reference.by_name(name);
    if (tensor->shape != expect.shape)
      throw io_error("checkpoint section '" + name + "' has shape " +
                     shape_str(tensor->shape) + ", expected " + shape_str(expect.shape));
    if (!tensor->all_finite())
      throw numeric_error("checkpoint section '" + name + "' contains non-finite values");
  }

  if (auto it = sections.find("train_mode"); it != sections.end())
    ck.train_mode = it->second.data[0] != 0.0 ? AttMode::Hard : AttMode::Soft;
  return ck;
}

}  // namespace attn
