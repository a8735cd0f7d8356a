// SPDX-License-Identifier: Apache-2.0
//
// Binary container I/O and model/adapter persistence.

#include "dco/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iostream>
#include <stdexcept>

namespace dco {

namespace {

constexpr char kMagic[8] = {'D', 'C', 'O', 'L', 'A', 'B', '0', '1'};

[[noreturn]] void fail(const std::string& msg) {
  throw std::runtime_error("checkpoint: " + msg);
}

}  // namespace

std::uint64_t fnv1a(const unsigned char* data, std::size_t n,
                    std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::bytes(const void* p, std::size_t n) {
  const auto* b = static_cast<const unsigned char*>(p);
  buf_.insert(buf_.end(), b, b + n);
}

void ByteWriter::f64_array(const std::vector<double>& v) {
  for (double x : v) f64(x);
}

ByteReader::ByteReader(const unsigned char* data, std::size_t n)
    : pos_(data), end_(data + n), begin_(data) {}

void ByteReader::need(std::size_t n) const {
  if (static_cast<std::size_t>(end_ - pos_) < n) fail("truncated file");
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(pos_[i]) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(pos_[i]) << (8 * i);
  pos_ += 8;
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

void ByteReader::bytes(void* out, std::size_t n) {
  need(n);
  std::memcpy(out, pos_, n);
  pos_ += n;
}

std::size_t ByteReader::offset() const {
  return static_cast<std::size_t>(pos_ - begin_);
}

void write_container(const std::string& path, const Container& c) {
  ByteWriter w;
  w.bytes(kMagic, sizeof(kMagic));
  std::string header = c.header.dump();
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.bytes(header.data(), header.size());
  w.u32(static_cast<std::uint32_t>(c.arrays.size()));
  for (const auto& a : c.arrays) {
    w.u64(a.size());
    w.f64_array(a);
  }
  std::uint64_t checksum = fnv1a(w.data().data(), w.data().size());
  w.u64(checksum);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(w.data().data()),
            static_cast<std::streamsize>(w.data().size()));
  if (!out) fail("short write to '" + path + "'");
}

Container read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open '" + path + "'");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(kMagic) + 4 + 4 + 8) fail("truncated file");

  if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
    fail("bad magic; not a checkpoint container");

  std::uint64_t stored = 0;
  {
    ByteReader tail(buf.data() + buf.size() - 8, 8);
    stored = tail.u64();
  }
  if (fnv1a(buf.data(), buf.size() - 8) != stored) fail("checksum mismatch");

  ByteReader r(buf.data() + sizeof(kMagic), buf.size() - sizeof(kMagic) - 8);
  std::uint32_t header_len = r.u32();
  std::string header(header_len, '\0');
  r.bytes(header.data(), header_len);

  Container c;
  try {
    c.header = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("corrupt header: ") + e.what());
  }
  std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint64_t len = r.u64();
    if (r.remaining() < len * 8) fail("truncated file");
    std::vector<double> a(len);
    for (auto& x : a) x = r.f64();
    c.arrays.push_back(std::move(a));
  }
  return c;
}

namespace {

void assign_values(Tensor& t, const std::vector<double>& values,
                   const std::string& what) {
  if (t.numel() != values.size())
    fail("array size mismatch for " + what);
  t.mutable_values() = values;
}

}  // namespace

void save_model(const EpsModel& m, const std::string& path) {
  Container c;
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : m.layers()) {
    layers.push_back({{"name", layer.name},
                      {"rows", layer.w.rows()},
                      {"cols", layer.w.cols()}});
    c.arrays.push_back(layer.w.values());
    c.arrays.push_back(layer.b.values());
  }
  nlohmann::json conditions = nlohmann::json::array();
  for (std::size_t i = 0; i < m.conditions().size(); ++i) {
    int id = static_cast<int>(i);
    conditions.push_back(m.conditions().name_of(id));
    c.arrays.push_back(m.conditions().row(id).values());
  }
  c.header = {{"kind", "model"},
              {"format", 1},
              {"schedule", m.spec().schedule},
              {"data_dim", m.spec().data_dim},
              {"embed_dim", m.spec().embed_dim},
              {"time_dim", m.spec().time_dim},
              {"hidden", m.spec().hidden},
              {"frozen", m.frozen()},
              {"layers", layers},
              {"conditions", conditions},
              {"param_checksum", m.param_checksum()}};
  write_container(path, c);
}

EpsModel load_model(const std::string& path) {
  Container c = read_container(path);
  try {
    if (c.header.at("kind").get<std::string>() != "model")
      fail("container at '" + path + "' is not a model checkpoint");
    ModelSpec spec;
    spec.data_dim = c.header.at("data_dim").get<std::size_t>();
    spec.embed_dim = c.header.at("embed_dim").get<std::size_t>();
    spec.time_dim = c.header.at("time_dim").get<std::size_t>();
    spec.hidden = c.header.at("hidden").get<std::vector<std::size_t>>();
    spec.schedule = c.header.at("schedule").get<std::string>();

    auto names = c.header.at("conditions").get<std::vector<std::string>>();
    if (names.empty() || names.front() != "<null>")
      fail("condition table missing null row");
    EpsModel m(spec, {names.begin() + 1, names.end()}, 0);

    std::size_t expected = 2 * m.layers().size() + names.size();
    if (c.arrays.size() != expected) fail("array count mismatch");
    std::size_t k = 0;
    for (auto& layer : m.layers()) {
      assign_values(layer.w, c.arrays[k++], layer.name + ".w");
      assign_values(layer.b, c.arrays[k++], layer.name + ".b");
    }
    for (std::size_t i = 0; i < names.size(); ++i)
      assign_values(m.conditions().mutable_row(static_cast<int>(i)),
                    c.arrays[k++], "condition '" + names[i] + "'");
    if (c.header.value("frozen", false)) m.freeze();
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("corrupt header: ") + e.what());
  }
}

void save_adapter(const AdaptedModel& m, const std::string& path) {
  Container c;
  nlohmann::json parts = nlohmann::json::array();
  for (const auto& part : m.adapter().parts()) {
    parts.push_back({{"target", part.target},
                     {"n", part.a.rows()},
                     {"r", part.a.cols()},
                     {"m", part.b.cols()}});
    c.arrays.push_back(part.a.values());
    c.arrays.push_back(part.b.values());
  }
  nlohmann::json tokens = nlohmann::json::array();
  for (const auto& token : m.new_tokens()) {
    tokens.push_back({{"name", token.name}, {"init_from", token.init_from}});
    c.arrays.push_back(m.conditions().row(token.row).values());
  }
  c.header = {{"kind", "adapter"},
              {"format", 1},
              {"tau", m.adapter().tau()},
              {"requested_rank", m.adapter().requested_rank()},
              {"base_checksum", m.adapter().base_checksum()},
              {"embed_dim", m.conditions().embed_dim()},
              {"parts", parts},
              {"tokens", tokens}};
  write_container(path, c);
}

AdaptedModel load_adapter(const EpsModel& base, const std::string& path,
                          bool* mismatch) {
  Container c = read_container(path);
  try {
    if (c.header.at("kind").get<std::string>() != "adapter")
      fail("container at '" + path + "' is not an adapter file");

    LoraAdapter adapter;
    adapter.set_tau(c.header.at("tau").get<double>());
    adapter.set_requested_rank(c.header.at("requested_rank").get<std::size_t>());
    adapter.set_base_checksum(c.header.at("base_checksum").get<std::uint64_t>());

    std::size_t k = 0;
    for (const auto& p : c.header.at("parts")) {
      std::size_t n = p.at("n").get<std::size_t>();
      std::size_t r = p.at("r").get<std::size_t>();
      std::size_t m = p.at("m").get<std::size_t>();
      if (k + 2 > c.arrays.size()) fail("array count mismatch");
      Tensor a({n, r}, c.arrays[k++]);
      Tensor b({r, m}, c.arrays[k++]);
      adapter.parts().push_back(
          {p.at("target").get<std::string>(), std::move(a), std::move(b)});
    }

    bool bad_base = adapter.base_checksum() != base.param_checksum();
    if (bad_base)
      std::cerr << "warning: adapter '" << path
                << "' was trained against a different base model\n";
    if (mismatch != nullptr) *mismatch = bad_base;

    AdaptedModel out = attach(base, std::move(adapter));
    for (const auto& tok : c.header.at("tokens")) {
      int id = out.add_token(tok.at("name").get<std::string>(),
                             tok.at("init_from").get<std::string>());
      if (k >= c.arrays.size()) fail("array count mismatch");
      assign_values(out.conditions().mutable_row(id), c.arrays[k++],
                    "token row");
    }
    if (k != c.arrays.size()) fail("array count mismatch");
    return out;
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("corrupt header: ") + e.what());
  }
}

}  // namespace dco
