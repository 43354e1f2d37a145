#include "wseg/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace wseg {

namespace {

constexpr char kMagic[4] = {'W', 'S', 'E', 'G'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

struct Cursor {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw FormatError("checkpoint truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    }
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    }
    pos += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

nlohmann::json config_to_json(const EncoderConfig& c) {
  return nlohmann::json{{"in_channels", c.in_channels},
                        {"stage_channels", c.stage_channels},
                        {"stage_modules", c.stage_modules},
                        {"stage_dilations", c.stage_dilations},
                        {"classes", c.classes},
                        {"factor", c.factor},
                        {"dropout_first", c.dropout_first},
                        {"dropout_rest", c.dropout_rest},
                        {"dropout_first_count", c.dropout_first_count},
                        {"use_prelu", c.use_prelu},
                        {"use_bias", c.use_bias},
                        {"tail_1x1", c.tail_1x1}};
}

EncoderConfig config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  try {
    j.at("in_channels").get_to(c.in_channels);
    j.at("stage_channels").get_to(c.stage_channels);
    j.at("stage_modules").get_to(c.stage_modules);
    j.at("stage_dilations").get_to(c.stage_dilations);
    j.at("classes").get_to(c.classes);
    j.at("factor").get_to(c.factor);
    j.at("dropout_first").get_to(c.dropout_first);
    j.at("dropout_rest").get_to(c.dropout_rest);
    j.at("dropout_first_count").get_to(c.dropout_first_count);
    j.at("use_prelu").get_to(c.use_prelu);
    j.at("use_bias").get_to(c.use_bias);
    j.at("tail_1x1").get_to(c.tail_1x1);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config echo is invalid: ") + e.what());
  }
  return c;
}

std::vector<NamedTensor> all_records(Network& net) {
  std::vector<NamedTensor> records = net.parameters();
  for (auto& b : net.buffers()) records.push_back(b);
  return records;
}

}  // namespace

void save_checkpoint(const std::string& path, Network& net) {
  if (net.folded()) {
    throw UsageError("folded networks are not checkpointable; fold after loading");
  }
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  const std::string cfg = config_to_json(net.config()).dump();
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  std::vector<NamedTensor> records = all_records(net);
  put_u32(out, static_cast<std::uint32_t>(records.size()));
  for (auto& r : records) {
    put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    const Shape& s = r.value.shape();
    put_u32(out, 4);
    for (std::int64_t dim : {s.b, s.c, s.h, s.w}) put_u64(out, static_cast<std::uint64_t>(dim));
    for (double v : r.value.values()) put_f64(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError("short write to " + path);
}

Network load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Cursor cur{buf};
  if (cur.bytes(4) != std::string(kMagic, 4)) throw FormatError("bad checkpoint magic");
  const std::uint32_t version = cur.u32();
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t cfg_len = cur.u32();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(cur.bytes(cfg_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config echo is not valid JSON: ") + e.what());
  }
  Network net(config_from_json(j), 0);

  std::map<std::string, Tensor> by_name;
  for (auto& r : all_records(net)) by_name.emplace(r.name, r.value);
  const std::uint32_t n_records = cur.u32();
  if (n_records != by_name.size()) {
    throw FormatError("checkpoint holds " + std::to_string(n_records) + " records, network has " +
                      std::to_string(by_name.size()));
  }
  for (std::uint32_t i = 0; i < n_records; ++i) {
    const std::uint32_t name_len = cur.u32();
    const std::string name = cur.bytes(name_len);
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw FormatError("checkpoint record " + name + " matches no unfilled parameter");
    }
    const std::uint32_t rank = cur.u32();
    if (rank != 4) throw FormatError("record " + name + " has rank " + std::to_string(rank));
    const Shape& s = it->second.shape();
    const std::int64_t want[4] = {s.b, s.c, s.h, s.w};
    for (int d = 0; d < 4; ++d) {
      if (cur.u64() != static_cast<std::uint64_t>(want[d])) {
        throw FormatError("record " + name + " disagrees with parameter shape " + s.str());
      }
    }
    for (double& v : it->second.values()) v = cur.f64();
    by_name.erase(it);
  }
  if (cur.pos != buf.size()) throw FormatError("checkpoint has trailing bytes");
  return net;
}

}  // namespace wseg
