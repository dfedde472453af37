#include "derc/checkpoint.hpp"

#include "derc/config.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace derc {

using nlohmann::json;

namespace {

void put_le(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
  out.write(bytes, 8);
}

double get_le(const unsigned char* bytes) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(const DercModel& model, std::ostream& out, const json& metadata) {
  const ParameterSet& params = model.params();
  json manifest = json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    manifest.push_back({{"name", params.name(i)}, {"shape", params.value(i).shape()}, {"offset", offset}});
    offset += params.value(i).size();
  }
  json header = {{"format_version", kCheckpointFormatVersion},
                 {"encoder", model.encoder_config()},
                 {"derc", model.config()},
                 {"parameters", manifest},
                 {"total_elements", offset},
                 {"metadata", metadata.is_null() ? json::object() : metadata}};
  out << header.dump() << '\n';
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (double v : params.value(i).values()) put_le(out, v);
  }
  if (!out) throw CheckpointError("failed to write checkpoint");
}

void save_checkpoint(const DercModel& model, const std::filesystem::path& path, const json& metadata) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  save_checkpoint(model, out, metadata);
}

LoadedCheckpoint load_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw CheckpointError("checkpoint is empty");
  json header;
  EncoderConfig enc;
  DercConfig cfg;
  try {
    header = json::parse(line);
    if (header.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw CheckpointError("unsupported checkpoint format version " + header.at("format_version").dump());
    }
    enc = header.at("encoder").get<EncoderConfig>();
    cfg = header.at("derc").get<DercConfig>();
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  }

  LoadedCheckpoint loaded{DercModel(enc, cfg), header.value("metadata", json::object())};
  ParameterSet& params = loaded.model.params();
  const json& manifest = header.at("parameters");
  const std::size_t total = header.at("total_elements").get<std::size_t>();

  std::vector<unsigned char> payload(total * 8);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (static_cast<std::size_t>(in.gcount()) != payload.size()) {
    throw CheckpointError("checkpoint payload truncated: expected " + std::to_string(total) + " values");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after checkpoint payload");

  std::vector<bool> seen(params.size(), false);
  for (const json& entry : manifest) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const std::size_t n = shape_size(shape);
    if (offset + n > total) throw CheckpointError("parameter " + name + " extends past the payload");
    Buffer values(n);
    for (std::size_t e = 0; e < n; ++e) values[e] = get_le(payload.data() + 8 * (offset + e));
    if (const auto idx = params.find(name)) {
      if (params.value(*idx).shape() != shape) {
        throw CheckpointError("parameter " + name + " has shape " + shape_to_string(shape) + ", model expects " +
                              shape_to_string(params.value(*idx).shape()));
      }
      params.value(*idx) = Tensor(shape, std::move(values));
      seen[*idx] = true;
    } else {
      params.add(name, Tensor(shape, std::move(values)));
      seen.push_back(true);
    }
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) throw CheckpointError("checkpoint lacks parameter " + params.name(i));
  }
  return loaded;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  return load_checkpoint(in);
}

}  // namespace derc
